//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use fairdec::benchmark::{
    run_sweep, tokenize, BenchmarkSuite, DebiasResources, SuiteConfig, SweepConfig, SweepResult,
    VariantKind,
};
use fairdec::classifier::{
    build_classifier_dataset, clean_projector, idempotence_error, inlp_on_matrices,
    nullspace_projector, run_inlp, to_matrix, train_linear_classifier, DatasetSources, InlpConfig,
    LabeledContextDataset, NullspaceProjector, Provenance, Split, SplitFractions, SvmConfig,
};
use fairdec::debias::{
    debiased_distribution, AlphaMode, DebiasConfig, DebiasMethod, Debiaser, GuardEveryStep,
};
use fairdec::embeddings::EmbeddingTable;
use fairdec::lm::{
    generate, train_toy_lm, GenerationConfig, IdentityHook, LanguageModel, TrainConfig, TrainingSet,
};
use fairdec::metrics::{hellinger_sq, kl_divergence, LexiconScorer, SwapMap};
use fairdec::subspace::{
    centered_rows, default_stopwords, estimate_subspace, max_principal_angle, rank_bias_sensitive,
    subspace_from_rows, BiasSensitiveSet, BiasSubspace, DefinitionalSets,
};
use fairdec::synthetic::{gaussian_blobs, shipped_world, ToyWorld};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 projector suite", projector_suite),
        ("2 INLP reaches chance", inlp_chance_level),
        ("3 mixing endpoints", mixing_endpoints),
        ("4 learned alpha bounds", learned_alpha_bounds),
        ("5 divergence oracles", divergence_oracles),
        ("6 debiased softmax oracle", softmax_oracle),
        ("7 gradient check", gradient_check),
        ("8 toy debiasing effect", toy_debiasing_effect),
        ("9 tier generalization", tier_generalization),
        ("10 subspace sanity", subspace_sanity),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn within(elapsed: Duration, limit_secs: u64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_secs as f64 {
        Ok(())
    } else {
        Err(format!(
            "took {:.1}s, limit {limit_secs}s",
            elapsed.as_secs_f64()
        ))
    }
}

fn projector_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_wp, mut worst_idem) = (0.0f64, 0.0f64);
    for case in 0..50u64 {
        let classes = rng.random_range(2..=5);
        let dim = rng.random_range(8..=64);
        let (x, y) = gaussian_blobs(40, classes, dim, 2.0, 1000 + case);
        let cfg = InlpConfig {
            iterations: 4,
            early_stop_patience: usize::MAX,
            ..InlpConfig::gender()
        };
        let clf = train_linear_classifier(&x, &y, classes, &cfg.svm).map_err(|e| e.to_string())?;
        let w = &clf.weights;
        let p = clean_projector(&nullspace_projector(w).map_err(|e| e.to_string())?);
        let wp = max_abs(&(w * &p)) / max_abs(w);
        let idem = idempotence_error(&p);
        worst_wp = worst_wp.max(wp);
        worst_idem = worst_idem.max(idem);
        ensure!(wp <= 1e-8, "case {case}: |WP|max = {wp:e} |W|max");
        ensure!(idem <= 1e-8, "case {case}: |P^2-P|F = {idem:e}");
        // the composed projector of a short INLP run, whose first classifier is `w`
        let proj = inlp_on_matrices(&x, &y, &x, &y, classes, &cfg).map_err(|e| e.to_string())?;
        let idem = idempotence_error(&proj.matrix);
        worst_idem = worst_idem.max(idem);
        ensure!(idem <= 1e-8, "case {case}: composed |P^2-P|F = {idem:e}");
        ensure!(
            max_abs(&(w * &proj.matrix)) / max_abs(w) <= 1e-8,
            "case {case}: composed projector does not annihilate the first classifier"
        );
    }
    within(start.elapsed(), 30)?;
    Ok(format!(
        "worst |WP|max/|W|max {worst_wp:.1e}, worst |P^2-P|F {worst_idem:.1e}"
    ))
}

fn inlp_chance_level() -> Outcome {
    let start = Instant::now();
    let (x_train, y_train) = gaussian_blobs(400, 3, 24, 3.0, 21);
    let (x_val, y_val) = gaussian_blobs(150, 3, 24, 3.0, 22);
    let (x_test, y_test) = gaussian_blobs(1000, 3, 24, 3.0, 23);
    let before = train_linear_classifier(&x_train, &y_train, 3, &SvmConfig::default())
        .map_err(|e| e.to_string())?
        .accuracy(&x_test, &y_test);
    let proj = inlp_on_matrices(&x_train, &y_train, &x_val, &y_val, 3, &InlpConfig::gender())
        .map_err(|e| e.to_string())?;
    let clf = train_linear_classifier(
        &proj.apply_rows(&x_train),
        &y_train,
        3,
        &SvmConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let after = clf.accuracy(&proj.apply_rows(&x_test), &y_test);
    ensure!(
        before > 0.8,
        "classes are not separable to begin with ({before:.3})"
    );
    ensure!(
        (0.283..=0.383).contains(&after),
        "post-INLP accuracy {after:.4} outside [0.283, 0.383]"
    );
    within(start.elapsed(), 120)?;
    Ok(format!(
        "accuracy {before:.3} before, {after:.4} after {} iterations",
        proj.iterations_used
    ))
}

/// The shipped toy world pushed through the default pipeline.
struct Toy {
    world: ToyWorld,
    corpus: Vec<Vec<String>>,
    lm: LanguageModel,
    subspace: BiasSubspace,
    bias_set: BiasSensitiveSet,
    dataset: LabeledContextDataset,
    projector: NullspaceProjector,
    setup: Duration,
}

fn class_names() -> Vec<String> {
    vec!["female".into(), "male".into()]
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let start = Instant::now();
        let world = shipped_world().expect("shipped world parses");
        let table = Arc::new(world.table.clone());
        let corpus: Vec<Vec<String>> = world.corpus.iter().map(|l| tokenize(l)).collect();
        let (lm, _) = train_toy_lm(&corpus, table, &TrainConfig::default()).expect("toy LM trains");
        let sets = DefinitionalSets::gender();
        let subspace = estimate_subspace(&sets, &world.table, 1).expect("subspace");
        let bias_set = rank_bias_sensitive(&subspace, &world.table, 20, &default_stopwords())
            .expect("ranking");
        let map = SwapMap::gender();
        let class_words: Vec<Vec<String>> = (0..2)
            .map(|c| sets.class_words(c).map(str::to_string).collect())
            .collect();
        let mut bias_tokens = class_words.clone();
        for (c, list) in bias_tokens.iter_mut().enumerate() {
            for w in map.class_words(c) {
                if !list.contains(&w) {
                    list.push(w);
                }
            }
        }
        let sources = DatasetSources {
            templates: SuiteConfig::default().templates,
            class_words,
            corpus: corpus.clone(),
            bias_tokens,
            subsequences_per_sentence: 3,
            min_len: 5,
        };
        let dataset =
            build_classifier_dataset(&lm, class_names(), &sources, SplitFractions::default(), 0)
                .expect("dataset builds");
        let projector = run_inlp(&dataset, &InlpConfig::gender()).expect("INLP runs");
        Toy {
            world,
            corpus,
            lm,
            subspace,
            bias_set,
            dataset,
            projector,
            setup: start.elapsed(),
        }
    })
}

fn debiaser(
    toy: &Toy,
    method: DebiasMethod,
    alpha: AlphaMode,
    top_k: usize,
) -> Result<Debiaser, String> {
    Debiaser::new(
        &toy.lm,
        DebiasConfig {
            method,
            alpha,
            top_k,
            bias_set: toy.bias_set.clone(),
        },
    )
    .map_err(|e| e.to_string())
}

fn prompts(toy: &Toy, n: usize) -> Vec<Vec<String>> {
    toy.corpus
        .iter()
        .filter(|s| s.len() >= 4)
        .step_by(7)
        .take(n)
        .map(|s| s[..3].to_vec())
        .collect()
}

fn render(lm: &LanguageModel, ids: &[usize]) -> Vec<u8> {
    ids.iter()
        .map(|&i| lm.table().vocab().token(i))
        .collect::<Vec<_>>()
        .join(" ")
        .into_bytes()
}

fn mixing_endpoints() -> Outcome {
    let toy = toy();
    let methods = [
        DebiasMethod::Inlp(toy.projector.clone()),
        DebiasMethod::Subspace(toy.subspace.clone()),
    ];
    let mut runs = 0;
    for method in methods {
        let zero = debiaser(toy, method.clone(), AlphaMode::fixed(0.0), 50)?;
        let one = debiaser(toy, method.clone(), AlphaMode::fixed(1.0), 50)?;
        for (i, prompt) in prompts(toy, 40).iter().enumerate() {
            let cfg = GenerationConfig {
                seed: 500 + i as u64,
                ..GenerationConfig::default()
            };
            let run = |hook: &mut dyn fairdec::lm::DistributionHook| {
                generate(&toy.lm, prompt, &cfg, hook).map(|g| render(&toy.lm, &g.ids))
            };
            let base = run(&mut IdentityHook).map_err(|e| e.to_string())?;
            let at_zero = run(&mut zero.hook()).map_err(|e| e.to_string())?;
            ensure!(
                base == at_zero,
                "{}: alpha=0 differs from baseline for prompt {prompt:?}",
                method.name()
            );
            let guarded = run(&mut GuardEveryStep {
                method: method.clone(),
            })
            .map_err(|e| e.to_string())?;
            let at_one = run(&mut one.hook()).map_err(|e| e.to_string())?;
            ensure!(
                guarded == at_one,
                "{}: alpha=1 differs from guarding every step",
                method.name()
            );
            runs += 1;
        }
    }
    Ok(format!("{runs} seeded generations per endpoint identical"))
}

fn learned_alpha_bounds() -> Outcome {
    let toy = toy();
    let mut steps = 0usize;
    let mut empty_steps = 0usize;
    let mut worst = 0.0f64;
    let prompts = prompts(toy, 100);
    for (g, top_k) in [1usize, 5, 50].into_iter().enumerate() {
        let d = debiaser(
            toy,
            DebiasMethod::Inlp(toy.projector.clone()),
            AlphaMode::learned(),
            top_k,
        )?;
        for (i, prompt) in prompts.iter().enumerate() {
            let cfg = GenerationConfig {
                max_length: 40,
                seed: (g * 1000 + i) as u64,
                ..GenerationConfig::default()
            };
            let mut hook = d.hook();
            let gen = generate(&toy.lm, prompt, &cfg, &mut hook).map_err(|e| e.to_string())?;
            for (t, trace) in hook.traces.iter().enumerate() {
                steps += 1;
                ensure!(
                    (0.0..=1.0).contains(&trace.alpha),
                    "alpha_t = {} outside [0, 1]",
                    trace.alpha
                );
                if trace.candidates == 0 {
                    empty_steps += 1;
                    let base = toy
                        .lm
                        .next_token_distribution_ids(&gen.ids[..gen.prompt_len + t])
                        .map_err(|e| e.to_string())?;
                    for (a, b) in trace.mixed.iter().zip(&base) {
                        worst = worst.max((a - b).abs());
                    }
                    ensure!(
                        worst <= 1e-12,
                        "empty candidate step deviates from baseline by {worst:e}"
                    );
                }
            }
        }
    }
    ensure!(steps >= 10_000, "only {steps} traced steps");
    ensure!(empty_steps > 0, "no step had an empty candidate set");
    Ok(format!(
        "{steps} steps, {empty_steps} with empty candidate set, max deviation {worst:.1e}"
    ))
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if u < 0.1 {
                0.0
            } else {
                rng.random::<f64>().powi(3)
            }
        })
        .collect();
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        if p[i] == 0.0 {
            continue;
        }
        let qi = if q[i] < 1e-12 { 1e-12 } else { q[i] };
        acc += p[i] * p[i].ln() - p[i] * qi.ln();
    }
    acc.max(0.0)
}

fn h2_oracle(p: &[f64], q: &[f64]) -> f64 {
    let bc: f64 = (0..p.len()).map(|i| (p[i] * q[i]).sqrt()).sum();
    (1.0 - bc).clamp(0.0, 1.0)
}

fn divergence_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut worst_kl, mut worst_h) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let n = rng.random_range(2..200);
        let p = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        let kl = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
        let h = hellinger_sq(&p, &q).map_err(|e| e.to_string())?;
        worst_kl = worst_kl.max((kl - kl_oracle(&p, &q)).abs());
        worst_h = worst_h.max((h - h2_oracle(&p, &q)).abs());
        ensure!(worst_kl <= 1e-12, "case {case}: KL off by {worst_kl:e}");
        ensure!(worst_h <= 1e-12, "case {case}: H2 off by {worst_h:e}");
        ensure!((0.0..=1.0).contains(&h), "case {case}: H2 = {h}");
        ensure!(
            kl_divergence(&p, &p).unwrap() == 0.0,
            "case {case}: KL(p, p) != 0"
        );
        ensure!(
            hellinger_sq(&q, &p).unwrap() == h,
            "case {case}: H2 not symmetric"
        );
    }
    Ok(format!(
        "1000 pairs, max error KL {worst_kl:.1e}, H2 {worst_h:.1e}"
    ))
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_table(rng: &mut ChaCha8Rng, vocab: usize, dim: usize) -> EmbeddingTable {
    EmbeddingTable::from_rows((0..vocab).map(|i| {
        (
            format!("w{i}"),
            (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }))
    .expect("random table")
}

fn softmax_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let dim = rng.random_range(3..16);
        let vocab = rng.random_range(5..60);
        let table = Arc::new(random_table(&mut rng, vocab, dim));
        let encoder = random_matrix(&mut rng, dim, dim);
        let window = rng.random_range(1..10);
        let lm = LanguageModel::new(table.clone(), encoder.clone(), window)
            .map_err(|e| e.to_string())?;
        let rank = rng.random_range(1..dim);
        let p =
            nullspace_projector(&random_matrix(&mut rng, rank, dim)).map_err(|e| e.to_string())?;
        let projector = NullspaceProjector {
            matrix: p.clone(),
            ..NullspaceProjector::identity(dim)
        };
        let len = rng.random_range(1..15);
        let ctx: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();

        let tail = &ctx[ctx.len().saturating_sub(window)..];
        let e = table.matrix();
        let mut mean = nalgebra::DVector::zeros(dim);
        for &id in tail {
            mean += e.row(id).transpose();
        }
        mean /= tail.len() as f64;
        let logits = &e * (&p * (&encoder * mean));
        let top = logits.max();
        let exps = logits.map(|z| (z - top).exp());
        let expected = &exps / exps.sum();

        let got = debiased_distribution(&lm, &ctx, &projector).map_err(|e| e.to_string())?;
        for (a, b) in got.iter().zip(expected.iter()) {
            worst = worst.max((a - b).abs());
        }
        ensure!(worst <= 1e-12, "case {case}: off by {worst:e}");
    }
    Ok(format!("100 cases, max error {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let dim = rng.random_range(2..7);
        let vocab = rng.random_range(4..12);
        let table = random_table(&mut rng, vocab, dim);
        let corpus: Vec<Vec<String>> = (0..rng.random_range(2..6))
            .map(|_| {
                (0..rng.random_range(2..10))
                    .map(|_| format!("w{}", rng.random_range(0..vocab)))
                    .collect()
            })
            .collect();
        let set = TrainingSet::from_corpus(&corpus, &table, rng.random_range(1..5))
            .map_err(|e| e.to_string())?;
        let a = random_matrix(&mut rng, dim, dim) * 0.5;
        let g = set.gradient(&a);
        let h = 1e-5;
        let fd = DMatrix::from_fn(dim, dim, |i, j| {
            let mut plus = a.clone();
            plus[(i, j)] += h;
            let mut minus = a.clone();
            minus[(i, j)] -= h;
            (set.loss(&plus) - set.loss(&minus)) / (2.0 * h)
        });
        let rel = (&g - &fd).norm() / g.norm().max(fd.norm()).max(1e-12);
        worst = worst.max(rel);
        ensure!(rel <= 1e-4, "case {case}: relative error {rel:e}");
    }
    Ok(format!("20 instances, worst relative error {worst:.1e}"))
}

/// Reference values from the first run of the default toy pipeline.
const LOCKED_H2_ALPHA0: f64 = 0.13551;
const LOCKED_H2_ALPHA1: f64 = 0.11569;
const LOCKED_PGOLD_ALPHA0: f64 = 0.31172;
const LOCKED_PGOLD_ALPHA1: f64 = 0.20730;

fn toy_sweep(toy: &Toy) -> Result<SweepResult, String> {
    let corpora = vec![("toy".to_string(), toy.world.corpus.clone())];
    let mut suite = BenchmarkSuite::build(
        class_names(),
        &SwapMap::gender(),
        &corpora,
        &SuiteConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    suite.retain_in_vocab(toy.lm.table().vocab());
    let resources = DebiasResources {
        projector: Some(toy.projector.clone()),
        subspace: Some(toy.subspace.clone()),
        bias_set: toy.bias_set.clone(),
        top_k: 50,
    };
    let config = SweepConfig {
        grid: vec![0.0, 1.0],
        global_samples: 0,
        ..SweepConfig::default()
    };
    run_sweep(
        &suite,
        &toy.lm,
        &[VariantKind::AInlpTune],
        &resources,
        &config,
        &LexiconScorer::bundled(),
    )
    .map_err(|e| e.to_string())
}

fn close(name: &str, got: f64, locked: f64) -> Result<(), String> {
    if (got - locked).abs() <= 0.05 * locked {
        Ok(())
    } else {
        Err(format!("{name} = {got:.5}, locked {locked:.5} +/- 5%"))
    }
}

fn toy_debiasing_effect() -> Outcome {
    let start = Instant::now();
    let toy = toy();
    let result = toy_sweep(toy)?;
    let row = |a: f64| {
        result
            .row(VariantKind::AInlpTune, a)
            .ok_or_else(|| format!("missing sweep row at alpha {a}"))
    };
    let (r0, r1) = (row(0.0)?, row(1.0)?);
    ensure!(
        r1.h2_local < r0.h2_local,
        "H2 at alpha=1 ({}) not below alpha=0 ({})",
        r1.h2_local,
        r0.h2_local
    );
    let ratio = r1.p_gold / r0.p_gold;
    ensure!(ratio >= 0.5, "gold probability ratio {ratio:.3} < 0.5");
    close("H2 at alpha=0", r0.h2_local, LOCKED_H2_ALPHA0)?;
    close("H2 at alpha=1", r1.h2_local, LOCKED_H2_ALPHA1)?;
    close("p_gold at alpha=0", r0.p_gold, LOCKED_PGOLD_ALPHA0)?;
    close("p_gold at alpha=1", r1.p_gold, LOCKED_PGOLD_ALPHA1)?;
    within(start.elapsed() + toy.setup, 300)?;
    Ok(format!(
        "H2 {:.5} -> {:.5}, p_gold {:.5} -> {:.5} (ratio {ratio:.3})",
        r0.h2_local, r1.h2_local, r0.p_gold, r1.p_gold
    ))
}

fn tier_generalization() -> Outcome {
    use Provenance::*;
    let ds = &toy().dataset;
    let gap = |tiers: &[Provenance]| -> Result<(f64, f64), String> {
        let (x, y) = to_matrix(&ds.select(Split::Train, tiers));
        let clf =
            train_linear_classifier(&x, &y, 2, &SvmConfig::default()).map_err(|e| e.to_string())?;
        let (xs, ys) = to_matrix(&ds.select(Split::Test, &[SimpleTemplate]));
        let (xd, yd) = to_matrix(&ds.select(Split::Test, &[DiverseCorpus]));
        Ok((clf.accuracy(&xs, &ys), clf.accuracy(&xd, &yd)))
    };
    let (s1, d1) = gap(&[SimpleTemplate])?;
    let (s3, d3) = gap(&[SimpleTemplate, DiverseCorpus, Subsequence])?;
    let (g1, g3) = (100.0 * (s1 - d1), 100.0 * (s3 - d3));
    ensure!(g1 >= 20.0, "simple-only gap {g1:.1} points < 20");
    ensure!(
        g3 <= g1 / 2.0,
        "all-tier gap {g3:.1} not at most half of {g1:.1}"
    );
    Ok(format!(
        "gap {g1:.1} points simple-only, {g3:.1} with all tiers"
    ))
}

fn orthonormality_error(sub: &BiasSubspace) -> f64 {
    let b = sub.basis_matrix();
    let gram = b.transpose() * &b;
    max_abs(&(gram - DMatrix::identity(sub.k(), sub.k())))
}

fn subspace_sanity() -> Outcome {
    let mut worst_orth = 0.0f64;
    let mut worst_angle = 0.0f64;
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let world = shipped_world().map_err(|e| e.to_string())?;
    let mut tables = vec![(world.table.clone(), DefinitionalSets::gender())];
    for _ in 0..5 {
        let dim = rng.random_range(8..40);
        let table = random_table(&mut rng, 60, dim);
        let pairs = (0..8)
            .map(|i| vec![format!("w{i}"), format!("w{}", i + 8)])
            .collect();
        let sets = DefinitionalSets::new(class_names(), pairs).map_err(|e| e.to_string())?;
        tables.push((table, sets));
    }
    for (table, sets) in &tables {
        let rows = centered_rows(sets, table).map_err(|e| e.to_string())?;
        let flipped: Vec<Vec<Vec<f64>>> = rows
            .iter()
            .map(|class| {
                class
                    .iter()
                    .map(|r| r.iter().map(|x| -x).collect())
                    .collect()
            })
            .collect();
        for k in 1..=3 {
            let sub = estimate_subspace(sets, table, k).map_err(|e| e.to_string())?;
            let flip = subspace_from_rows(sets.class_names.clone(), &flipped, k)
                .map_err(|e| e.to_string())?;
            worst_orth = worst_orth
                .max(orthonormality_error(&sub))
                .max(orthonormality_error(&flip));
            worst_angle = worst_angle.max(max_principal_angle(&sub, &flip));
            ensure!(
                worst_orth <= 1e-10,
                "basis not orthonormal ({worst_orth:e})"
            );
            ensure!(
                worst_angle <= 1e-8,
                "sign flip moved the span by {worst_angle:e} rad"
            );
            let all = rank_bias_sensitive(&sub, table, table.len(), &Default::default())
                .map_err(|e| e.to_string())?;
            for t in table.vocab().tokens() {
                let q = all.q_normalized(t);
                ensure!((0.0..=1.0).contains(&q), "q({t}) = {q}");
                checked += 1;
            }
        }
    }
    Ok(format!(
        "orthonormality {worst_orth:.1e}, principal angle {worst_angle:.1e}, {checked} q values in [0, 1]"
    ))
}
