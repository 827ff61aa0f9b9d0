//! Independent reference computations and regression locks.

#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use fairdec::benchmark::{
    run_sweep, tokenize, BenchmarkSuite, DebiasResources, SuiteConfig, SweepConfig, VariantKind,
};
use fairdec::classifier::{
    build_classifier_dataset, inlp_on_matrices, nullspace_projector, run_inlp,
    train_linear_classifier, DatasetSources, InlpConfig, NullspaceProjector, SplitFractions,
    SvmConfig,
};
use fairdec::debias::{
    candidate_set, compute_alpha, AlphaMode, DebiasConfig, DebiasMethod, Debiaser,
};
use fairdec::embeddings::EmbeddingTable;
use fairdec::lm::{
    generate, softmax, train_toy_lm, GenerationConfig, IdentityHook, LanguageModel, TrainConfig,
};
use fairdec::metrics::{
    hellinger_sq, kl_divergence, local_bias, ContextPair, Decoder, LexiconScorer, SwapMap,
};
use fairdec::subspace::{
    default_stopwords, estimate_subspace, rank_bias_sensitive, BiasSensitiveSet, DefinitionalSets,
    ScoredToken,
};
use fairdec::synthetic::{gaussian_blobs, shipped_world};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_table(rng: &mut ChaCha8Rng, vocab: usize, dim: usize) -> EmbeddingTable {
    EmbeddingTable::from_rows(
        (0..vocab).map(|i| (format!("w{i}"), (0..dim).map(|_| normal(rng)).collect())),
    )
    .unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn softmax_oracle(z: &[f64]) -> Vec<f64> {
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix; eigenvectors in columns.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(i == j)).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

#[test]
fn subspace_matches_reference_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 10;
    let table = random_table(&mut rng, 10, dim);
    let pairs: Vec<Vec<String>> = (0..5)
        .map(|i| vec![format!("w{i}"), format!("w{}", i + 5)])
        .collect();
    let sets = DefinitionalSets::new(vec!["a".into(), "b".into()], pairs.clone()).unwrap();
    let sub = estimate_subspace(&sets, &table, 3).unwrap();
    let b = sub.basis_matrix();
    assert!(max_abs(&(b.transpose() * &b - DMatrix::identity(3, 3))) <= 1e-10);

    // scatter matrix of the per-pair centered rows, built by hand
    let mut scatter = vec![vec![0.0; dim]; dim];
    for pair in &pairs {
        let u = table.embed(&pair[0]).unwrap();
        let w = table.embed(&pair[1]).unwrap();
        for x in [u, w] {
            let r: Vec<f64> = (0..dim).map(|j| x[j] - 0.5 * (u[j] + w[j])).collect();
            for i in 0..dim {
                for j in 0..dim {
                    scatter[i][j] += r[i] * r[j];
                }
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(scatter);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let reference = DMatrix::from_fn(dim, 3, |i, c| vecs[i][order[c]]);
    let diff = &b * b.transpose() - &reference * reference.transpose();
    assert!(max_abs(&diff) <= 1e-8, "span mismatch {}", max_abs(&diff));
}

#[test]
fn context_embedding_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let dim = rng.random_range(2..12);
        let vocab = rng.random_range(3..30);
        let window = rng.random_range(1..9);
        let table = Arc::new(random_table(&mut rng, vocab, dim));
        let a = random_matrix(&mut rng, dim, dim);
        let lm = LanguageModel::new(table.clone(), a.clone(), window).unwrap();
        let ctx: Vec<usize> = (0..rng.random_range(1..20))
            .map(|_| rng.random_range(0..vocab))
            .collect();
        let tail = &ctx[ctx.len().saturating_sub(window)..];
        let mut mean = vec![0.0; dim];
        for &id in tail {
            for j in 0..dim {
                mean[j] += table.row(id)[j] / tail.len() as f64;
            }
        }
        let expected: Vec<f64> = (0..dim)
            .map(|i| (0..dim).map(|j| a[(i, j)] * mean[j]).sum())
            .collect();
        let got = lm.context_embedding_ids(&ctx).unwrap();
        for (x, y) in got.iter().zip(&expected) {
            assert!((x - y).abs() <= 1e-12);
        }
        let p = lm.next_token_distribution_ids(&ctx).unwrap();
        let logits: Vec<f64> = (0..vocab)
            .map(|v| (0..dim).map(|j| table.row(v)[j] * expected[j]).sum())
            .collect();
        for (x, y) in p.iter().zip(softmax_oracle(&logits)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_matches_exp_normalize(z in prop::collection::vec(-50.0f64..50.0, 1..100)) {
        for (x, y) in softmax(&z).iter().zip(softmax_oracle(&z)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn nullspace_annihilates_random_weights(
        rows in 1usize..5,
        cols in 2usize..20,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, rows, cols);
        let p = nullspace_projector(&w).unwrap();
        prop_assert!(max_abs(&(&w * &p)) <= 1e-8 * max_abs(&w));
    }

    #[test]
    fn candidate_set_matches_brute_force(
        raw in prop::collection::vec(0.0f64..1.0, 2..40),
        k in 1usize..50,
        mask_seed in any::<u64>(),
    ) {
        let s: f64 = raw.iter().sum::<f64>().max(1e-9);
        let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let in_set: Vec<bool> = p.iter().map(|_| rng.random_bool(0.4)).collect();
        let q: Vec<f64> = p.iter().map(|_| rng.random::<f64>()).collect();

        // rank by counting how many entries beat each one
        let rank = |i: usize| (0..p.len()).filter(|&j| p[j] > p[i] || (p[j] == p[i] && j < i)).count();
        let mut expected: Vec<usize> = (0..p.len()).filter(|&i| rank(i) < k && in_set[i]).collect();
        expected.sort_by_key(|&i| rank(i));
        let got = candidate_set(&p, k, &in_set);
        prop_assert_eq!(&got, &expected);

        let alpha = compute_alpha(&p, &got, &q);
        let mass: f64 = expected.iter().map(|&i| p[i]).sum();
        let oracle = if mass > 0.0 { expected.iter().map(|&i| p[i] * q[i]).sum::<f64>() / mass } else { 0.0 };
        prop_assert!((alpha - oracle.clamp(0.0, 1.0)).abs() <= 1e-12);
    }

    #[test]
    fn divergences_match_term_sums(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let v: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let (p, q) = (draw(), draw());
        let mut kl = 0.0;
        let mut h = 0.0;
        for i in 0..10 {
            kl += p[i] * (p[i] / q[i]).ln();
            h += (p[i].sqrt() - q[i].sqrt()).powi(2) / 2.0;
        }
        prop_assert!((kl_divergence(&p, &q).unwrap() - kl).abs() <= 1e-12);
        prop_assert!((hellinger_sq(&p, &q).unwrap() - h).abs() <= 1e-12);
    }
}

#[test]
fn two_rule_corpus_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = Arc::new(
        EmbeddingTable::from_rows(
            ["the", "cat", "a", "dog", "sat", "ran"]
                .iter()
                .map(|t| (*t, (0..8).map(|_| normal(&mut rng)).collect())),
        )
        .unwrap(),
    );
    let corpus: Vec<Vec<&str>> = (0..50)
        .flat_map(|_| [vec!["the", "cat", "sat"], vec!["a", "dog", "ran"]])
        .collect();
    let (lm, report) = train_toy_lm(&corpus, table, &TrainConfig::default()).unwrap();
    let p = lm.next_token_distribution(&["the"]).unwrap();
    let cat = lm.table().vocab().id("cat").unwrap();
    assert!(p[cat] > 0.9, "p(cat | the) = {}", p[cat]);
    assert!(
        (p[cat] - LOCKED_P_CAT).abs() <= 1e-6,
        "p(cat | the) = {}",
        p[cat]
    );
    assert!(report.final_loss() < report.epoch_losses[0]);
}

const LOCKED_P_CAT: f64 = 0.9999999983271881;

#[test]
fn small_step_training_curve_does_not_rise() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let table = Arc::new(random_table(&mut rng, 12, 6));
    let corpus: Vec<Vec<String>> = (0..20)
        .map(|_| {
            (0..8)
                .map(|_| format!("w{}", rng.random_range(0..12)))
                .collect()
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 60,
        learning_rate: 0.05,
        batch_size: None,
        ..TrainConfig::default()
    };
    let (_, report) = train_toy_lm(&corpus, table, &cfg).unwrap();
    for w in report.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
    }
    assert!(
        (report.final_loss() - LOCKED_CURVE_END).abs() <= 1e-9,
        "{}",
        report.final_loss()
    );
}

const LOCKED_CURVE_END: f64 = 2.3837412223273304;

fn toy_lm(epochs: usize) -> LanguageModel {
    let world = shipped_world().unwrap();
    let corpus: Vec<Vec<String>> = world.corpus.iter().map(|l| tokenize(l)).collect();
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    train_toy_lm(&corpus, Arc::new(world.table), &cfg)
        .unwrap()
        .0
}

#[test]
fn no_trigram_repeats_in_generations() {
    let lm = toy_lm(10);
    let cfg = GenerationConfig {
        max_length: 40,
        no_repeat_ngram: 3,
        ..GenerationConfig::default()
    };
    for seed in 0..100 {
        let g = generate(
            &lm,
            &["the", "doctor", "said"],
            &GenerationConfig {
                seed,
                ..cfg.clone()
            },
            &mut IdentityHook,
        )
        .unwrap();
        let mut seen = std::collections::HashSet::new();
        for tri in g.ids.windows(3) {
            assert!(
                seen.insert(tri.to_vec()),
                "seed {seed}: repeated trigram {tri:?}"
            );
        }
    }
}

#[test]
fn separated_gaussians_are_classified() {
    let (x, y) = gaussian_blobs(100, 3, 10, 4.0, 31);
    let (xv, yv) = gaussian_blobs(100, 3, 10, 4.0, 32);
    let clf = train_linear_classifier(&x, &y, 3, &SvmConfig::default()).unwrap();
    let acc = clf.accuracy(&xv, &yv);
    assert!(acc >= 0.95, "{acc}");
    assert!((acc - LOCKED_BLOB_ACCURACY).abs() <= 1e-12, "{acc}");
}

const LOCKED_BLOB_ACCURACY: f64 = 0.9933333333333333;

#[test]
fn inlp_trajectory_falls() {
    let (x, y) = gaussian_blobs(200, 3, 20, 3.0, 41);
    let (xv, yv) = gaussian_blobs(1000, 3, 20, 3.0, 42);
    let proj = inlp_on_matrices(&x, &y, &xv, &yv, 3, &InlpConfig::gender()).unwrap();
    for w in proj.val_accuracies.windows(2) {
        assert!(w[1] <= w[0] + 0.03, "{:?}", proj.val_accuracies);
    }
}

fn toy_set(tokens: &[(&str, f64)]) -> BiasSensitiveSet {
    BiasSensitiveSet::from_ranked(
        vec!["a".into(), "b".into()],
        vec![
            tokens
                .iter()
                .filter(|t| t.1 > 0.0)
                .map(|(t, r)| ScoredToken {
                    token: t.to_string(),
                    raw: *r,
                })
                .collect(),
            tokens
                .iter()
                .filter(|t| t.1 < 0.0)
                .map(|(t, r)| ScoredToken {
                    token: t.to_string(),
                    raw: *r,
                })
                .collect(),
        ],
    )
    .unwrap()
}

#[test]
fn greedy_rollout_matches_hand_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 4;
    let table = Arc::new(random_table(&mut rng, 6, dim));
    let a = random_matrix(&mut rng, dim, dim);
    let lm = LanguageModel::new(table.clone(), a.clone(), 8).unwrap();
    let p_mat = nullspace_projector(&random_matrix(&mut rng, 1, dim)).unwrap();
    let projector = NullspaceProjector {
        matrix: p_mat.clone(),
        ..NullspaceProjector::identity(dim)
    };
    let raw = [("w1", 2.0), ("w3", -0.5), ("w4", 1.0)];
    let debiaser = Debiaser::new(
        &lm,
        DebiasConfig {
            method: DebiasMethod::Inlp(projector),
            alpha: AlphaMode::learned(),
            top_k: 3,
            bias_set: toy_set(&raw),
        },
    )
    .unwrap();
    let cfg = GenerationConfig {
        max_length: 3,
        top_k: 1,
        repetition_penalty: 1.0,
        no_repeat_ngram: 0,
        ..GenerationConfig::default()
    };
    let mut hook = debiaser.hook();
    let g = generate(&lm, &["w0", "w2"], &cfg, &mut hook).unwrap();

    // the same three steps, every quantity enumerated by hand
    let q = |v: usize| {
        raw.iter()
            .find(|(t, _)| *t == format!("w{v}"))
            .map_or(0.0, |(_, r)| r.abs() / 2.0)
    };
    let mut ids = vec![0usize, 2];
    for step in 0..3 {
        let mut mean = vec![0.0; dim];
        for &id in &ids {
            for j in 0..dim {
                mean[j] += table.row(id)[j] / ids.len() as f64;
            }
        }
        let f: Vec<f64> = (0..dim)
            .map(|i| (0..dim).map(|j| a[(i, j)] * mean[j]).sum())
            .collect();
        let pf: Vec<f64> = (0..dim)
            .map(|i| (0..dim).map(|j| p_mat[(i, j)] * f[j]).sum())
            .collect();
        let logits = |h: &[f64]| -> Vec<f64> {
            (0..6)
                .map(|v| (0..dim).map(|j| table.row(v)[j] * h[j]).sum())
                .collect()
        };
        let p_star = softmax_oracle(&logits(&f));
        let p_hat = softmax_oracle(&logits(&pf));
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&i, &j| p_star[j].total_cmp(&p_star[i]).then(i.cmp(&j)));
        let cands: Vec<usize> = order[..3].iter().copied().filter(|&v| q(v) > 0.0).collect();
        let mass: f64 = cands.iter().map(|&v| p_star[v]).sum();
        let alpha = if cands.is_empty() {
            0.0
        } else {
            cands.iter().map(|&v| p_star[v] * q(v)).sum::<f64>() / mass
        };
        let mixed: Vec<f64> = (0..6)
            .map(|v| alpha * p_hat[v] + (1.0 - alpha) * p_star[v])
            .collect();
        let trace = &hook.traces[step];
        assert!((trace.alpha - alpha).abs() <= 1e-12);
        for (x, y) in trace.mixed.iter().zip(&mixed) {
            assert!((x - y).abs() <= 1e-12);
        }
        let next = (0..6)
            .max_by(|&i, &j| mixed[i].total_cmp(&mixed[j]).then(j.cmp(&i)))
            .unwrap();
        ids.push(next);
    }
    assert_eq!(g.ids, ids);
}

#[test]
fn single_direction_rejection_matches_gram_schmidt() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let dim = rng.random_range(2..10);
        let table = random_table(&mut rng, 2, dim);
        let sets = DefinitionalSets::new(
            vec!["a".into(), "b".into()],
            vec![vec!["w0".into(), "w1".into()]],
        )
        .unwrap();
        let sub = estimate_subspace(&sets, &table, 1).unwrap();
        let d: Vec<f64> = (0..dim)
            .map(|j| table.row(0)[j] - table.row(1)[j])
            .collect();
        let len = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let b: Vec<f64> = d.iter().map(|x| x / len).collect();
        let f: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let dot: f64 = f.iter().zip(&b).map(|(x, y)| x * y).sum();
        let expected: Vec<f64> = f.iter().zip(&b).map(|(x, y)| x - dot * y).collect();
        let got = DebiasMethod::Subspace(sub).guard(&f).unwrap();
        for (x, y) in got.iter().zip(&expected) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn male_only_occupation_is_locally_biased() {
    let world = shipped_world().unwrap();
    let corpus: Vec<Vec<&str>> = (0..100)
        .flat_map(|_| {
            [
                vec!["he", "was", "a", "doctor"],
                vec!["she", "was", "a", "nurse"],
                vec!["he", "met", "the", "doctor"],
                vec!["she", "met", "the", "nurse"],
            ]
        })
        .collect();
    let (lm, _) = train_toy_lm(&corpus, Arc::new(world.table), &TrainConfig::default()).unwrap();
    let pair = ContextPair {
        c1: tokenize("she was a"),
        c2: tokenize("he was a"),
        rest: Vec::new(),
        gold: None,
    };
    let kl = local_bias(Decoder::plain(&lm), &pair).unwrap().kl();
    assert!(kl > 0.1, "{kl}");
    assert!(
        (kl - LOCKED_DOCTOR_KL).abs() <= 1e-6 * LOCKED_DOCTOR_KL.max(1.0),
        "{kl}"
    );
}

const LOCKED_DOCTOR_KL: f64 = 8.630555254220194;

#[test]
fn toy_sweep_orders_drift_and_bias() {
    let world = shipped_world().unwrap();
    let lm = toy_lm(30);
    let sets = DefinitionalSets::gender();
    let subspace = estimate_subspace(&sets, &world.table, 1).unwrap();
    let bias_set = rank_bias_sensitive(&subspace, &world.table, 20, &default_stopwords()).unwrap();
    let map = SwapMap::gender();
    let names = vec!["female".to_string(), "male".to_string()];
    let class_words: Vec<Vec<String>> = (0..2)
        .map(|c| sets.class_words(c).map(str::to_string).collect())
        .collect();
    let sources = DatasetSources {
        templates: SuiteConfig::default().templates,
        bias_tokens: (0..2).map(|c| map.class_words(c)).collect(),
        class_words,
        corpus: world.corpus.iter().map(|l| tokenize(l)).collect(),
        subsequences_per_sentence: 3,
        min_len: 5,
    };
    let ds = build_classifier_dataset(&lm, names.clone(), &sources, SplitFractions::default(), 0)
        .unwrap();
    let projector = run_inlp(&ds, &InlpConfig::gender()).unwrap();
    let corpora = vec![("toy".to_string(), world.corpus.clone())];
    let mut suite = BenchmarkSuite::build(names, &map, &corpora, &SuiteConfig::default()).unwrap();
    suite.retain_in_vocab(lm.table().vocab());
    let resources = DebiasResources {
        projector: Some(projector),
        subspace: Some(subspace),
        bias_set,
        top_k: 50,
    };
    let config = SweepConfig {
        grid: vec![0.0, 0.5, 1.0],
        global_samples: 0,
        ..SweepConfig::default()
    };
    let kinds = [VariantKind::AInlpTune, VariantKind::ASubspace];
    let result = run_sweep(
        &suite,
        &lm,
        &kinds,
        &resources,
        &config,
        &LexiconScorer::bundled(),
    )
    .unwrap();
    for kind in kinds {
        let r = |a: f64| result.row(kind, a).unwrap();
        let (r0, r5, r1) = (r(0.0), r(0.5), r(1.0));
        assert!(
            r0.kl_drift < r5.kl_drift && r5.kl_drift < r1.kl_drift,
            "{kind:?} drift"
        );
        assert!(
            r1.h2_local <= r0.h2_local && r1.kl_local <= r0.kl_local,
            "{kind:?} bias"
        );
    }
    let r = result.row(VariantKind::AInlpTune, 1.0).unwrap();
    let locked = [LOCKED_SWEEP_H2, LOCKED_SWEEP_DRIFT];
    for (got, want) in [r.h2_local, r.kl_drift].into_iter().zip(locked) {
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

const LOCKED_SWEEP_H2: f64 = 0.06743007881069028;
const LOCKED_SWEEP_DRIFT: f64 = 1.0015835120395424;
