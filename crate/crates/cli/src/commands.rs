use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fairdec::benchmark::{
    run_sweep, sweep_file_name, tokenize, BenchmarkSuite, DebiasResources, SweepConfig,
    VariantKind, DEFAULT_TEMPLATES,
};
use fairdec::classifier::{
    build_classifier_dataset, run_inlp, DatasetSources, LabeledContextDataset, NullspaceProjector,
    ProjectorCheckpoint, SplitFractions,
};
use fairdec::debias::{write_trace, AlphaMode, DebiasConfig, DebiasMethod, Debiaser, StepTrace};
use fairdec::embeddings::{parse_embeddings, EmbeddingTable};
use fairdec::lm::{
    generate as run_generation, train_toy_lm, DistributionHook, IdentityHook, LanguageModel,
    LmCheckpoint,
};
use fairdec::metrics::{Decoder, LexiconScorer};
use fairdec::subspace::{
    default_stopwords, estimate_subspace, parse_stopwords, rank_bias_sensitive, BiasSensitiveSet,
    BiasSubspace,
};
use fairdec::synthetic::{toy_gender_world, ToyConfig};
use serde_json::json;

use crate::config::{read_text, Method, RunConfig};
use crate::error::CliError;
use crate::output::{write_bytes, write_json, Meta};

type CliResult<T = ()> = Result<T, CliError>;

fn json_value<T: serde::Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| CliError::Runtime(e.into()))
}

fn load_table(cfg: &RunConfig) -> CliResult<Arc<EmbeddingTable>> {
    let path = RunConfig::require(&cfg.paths.embeddings, "paths.embeddings")?;
    let file = File::open(path)?;
    Ok(Arc::new(parse_embeddings(BufReader::new(file))?))
}

fn load_corpora(cfg: &RunConfig) -> CliResult<Vec<(String, Vec<String>)>> {
    if cfg.paths.corpora.is_empty() {
        return Err(CliError::Config(
            "paths.corpora needs at least one file".into(),
        ));
    }
    cfg.paths
        .corpora
        .iter()
        .map(|p| {
            let text = read_text(p, "paths.corpora")?;
            let lines = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect();
            Ok((p.display().to_string(), lines))
        })
        .collect()
}

fn load_lm(cfg: &RunConfig, table: Arc<EmbeddingTable>) -> CliResult<LanguageModel> {
    let path = cfg.paths.lm();
    RunConfig::require_file(&path, "paths.lm")?;
    let ck = LmCheckpoint::from_json(&read_text(&path, "paths.lm")?)?;
    Ok(ck.into_model(table)?)
}

fn class_names(cfg: &RunConfig) -> CliResult<Vec<String>> {
    Ok(cfg.classes.definitional_sets()?.class_names)
}

fn load_bias_set(cfg: &RunConfig) -> CliResult<BiasSensitiveSet> {
    let path = cfg.paths.bias_tokens();
    RunConfig::require_file(&path, "paths.bias_tokens")?;
    Ok(BiasSensitiveSet::read_csv(
        File::open(&path)?,
        class_names(cfg)?,
    )?)
}

fn load_projector(cfg: &RunConfig) -> CliResult<NullspaceProjector> {
    let path = cfg.paths.projector();
    RunConfig::require_file(&path, "paths.projector")?;
    Ok(ProjectorCheckpoint::from_json(&read_text(&path, "paths.projector")?)?.into_projector())
}

fn load_subspace(cfg: &RunConfig) -> CliResult<BiasSubspace> {
    let path = cfg.paths.subspace();
    RunConfig::require_file(&path, "paths.subspace")?;
    Ok(BiasSubspace::from_json(&read_text(
        &path,
        "paths.subspace",
    )?)?)
}

fn load_templates(cfg: &RunConfig) -> CliResult<Vec<String>> {
    match &cfg.paths.templates {
        Some(p) => {
            let t: Vec<String> = read_text(p, "paths.templates")?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect();
            if t.is_empty() {
                return Err(CliError::Config("paths.templates: no templates".into()));
            }
            Ok(t)
        }
        None => Ok(DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()),
    }
}

fn load_scorer(cfg: &RunConfig) -> CliResult<LexiconScorer> {
    match &cfg.paths.lexicon {
        Some(p) => Ok(LexiconScorer::parse(&read_text(p, "paths.lexicon")?)?),
        None => Ok(LexiconScorer::bundled()),
    }
}

fn parse_alpha(text: &str) -> CliResult<AlphaMode> {
    if text.eq_ignore_ascii_case("learned") {
        return Ok(AlphaMode::learned());
    }
    let a: f64 = text.parse().map_err(|_| {
        CliError::Config(format!(
            "alpha: expected a number or \"learned\", got {text:?}"
        ))
    })?;
    if !(0.0..=1.0).contains(&a) {
        return Err(CliError::Config(format!("alpha: {a} is outside [0, 1]")));
    }
    Ok(AlphaMode::fixed(a))
}

/// The debiaser for the configured method, or `None` for the plain model.
fn build_debiaser(cfg: &RunConfig, lm: &LanguageModel) -> CliResult<Option<Debiaser>> {
    let (method, alpha) = match cfg.debias.method {
        Method::None => return Ok(None),
        Method::Inlp => (
            DebiasMethod::Inlp(load_projector(cfg)?),
            AlphaMode::fixed(1.0),
        ),
        Method::AInlp => (
            DebiasMethod::Inlp(load_projector(cfg)?),
            parse_alpha(&cfg.debias.alpha)?,
        ),
        Method::ASubspace => (
            DebiasMethod::Subspace(load_subspace(cfg)?),
            parse_alpha(&cfg.debias.alpha)?,
        ),
    };
    let bias_set = match cfg.debias.method {
        Method::Inlp => load_bias_set(cfg).unwrap_or_else(|_| BiasSensitiveSet::empty(Vec::new())),
        _ => load_bias_set(cfg)?,
    };
    Ok(Some(Debiaser::new(
        lm,
        DebiasConfig {
            method,
            alpha,
            top_k: cfg.debias.top_k,
            bias_set,
        },
    )?))
}

pub fn synth(cfg: &RunConfig) -> CliResult {
    let world = toy_gender_world(&ToyConfig {
        dim: cfg.synth.dim,
        sentences: cfg.synth.sentences,
        stereotype_rate: cfg.synth.stereotype_rate,
        seed: cfg.synth.seed,
    })?;
    let meta = Meta::of(cfg);
    let mut emb = Vec::new();
    world.table.write(&mut emb)?;
    write_bytes(&cfg.paths.out("embeddings.txt"), &emb, &meta)?;
    write_bytes(
        &cfg.paths.out("corpus.txt"),
        (world.corpus.join("\n") + "\n").as_bytes(),
        &meta,
    )?;
    println!("{}", cfg.paths.output_dir.display());
    Ok(())
}

pub fn subspace(cfg: &RunConfig) -> CliResult {
    let table = load_table(cfg)?;
    let sets = cfg.classes.definitional_sets()?;
    let stopwords = match &cfg.paths.stopwords {
        Some(p) => parse_stopwords(&read_text(p, "paths.stopwords")?),
        None => default_stopwords(),
    };
    let sub = estimate_subspace(&sets, &table, cfg.subspace.k)?;
    let ranked = rank_bias_sensitive(&sub, &table, cfg.subspace.top_n, &stopwords)?;
    let meta = Meta::of(cfg);
    write_json(&cfg.paths.out("subspace.json"), json_value(&sub)?, &meta)?;
    let mut csv = Vec::new();
    ranked.write_csv(&mut csv)?;
    write_bytes(&cfg.paths.out("bias_tokens.csv"), &csv, &meta)?;
    Ok(())
}

pub fn train_lm(cfg: &RunConfig) -> CliResult {
    let embeddings = RunConfig::require(&cfg.paths.embeddings, "paths.embeddings")?.clone();
    let table = load_table(cfg)?;
    let corpus: Vec<Vec<String>> = load_corpora(cfg)?
        .into_iter()
        .flat_map(|(_, lines)| lines)
        .map(|l| tokenize(&l))
        .collect();
    let (lm, report) = train_toy_lm(&corpus, table, &cfg.lm.train_config(cfg.seed))?;
    log::info!("final training loss {}", report.final_loss());
    let meta = Meta::of(cfg);
    let ck = lm.to_checkpoint(embeddings.display().to_string());
    write_json(&cfg.paths.out("lm.json"), json_value(&ck)?, &meta)?;
    let mut curve = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    write_bytes(&cfg.paths.out("lm_loss.csv"), curve.as_bytes(), &meta)?;
    Ok(())
}

fn cache_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("embeddings.json")
}

pub fn build_dataset(cfg: &RunConfig) -> CliResult {
    let table = load_table(cfg)?;
    let lm = load_lm(cfg, table)?;
    let sets = cfg.classes.definitional_sets()?;
    let map = cfg.classes.swap_map()?;
    let n = sets.num_classes();
    if map.arity() != n {
        return Err(CliError::Config(format!(
            "classes.swap_map has {} classes but the definitional sets have {n}",
            map.arity()
        )));
    }
    let class_words: Vec<Vec<String>> = (0..n)
        .map(|c| sets.class_words(c).map(str::to_string).collect())
        .collect();
    let mut bias_tokens = class_words.clone();
    for (c, list) in bias_tokens.iter_mut().enumerate() {
        for t in map.class_words(c) {
            if !list.contains(&t) {
                list.push(t);
            }
        }
    }
    let corpus: Vec<Vec<String>> = load_corpora(cfg)?
        .into_iter()
        .flat_map(|(_, lines)| lines)
        .map(|l| tokenize(&l))
        .collect();
    let sources = DatasetSources {
        templates: load_templates(cfg)?,
        class_words,
        corpus,
        bias_tokens,
        subsequences_per_sentence: cfg.dataset.subsequences_per_sentence,
        min_len: cfg.dataset.min_len,
    };
    let fractions = SplitFractions {
        train: cfg.dataset.train_fraction,
        val: cfg.dataset.val_fraction,
    };
    if !(fractions.train > 0.0 && fractions.val >= 0.0 && fractions.train + fractions.val <= 1.0) {
        return Err(CliError::Config(
            "dataset split fractions must be positive and sum to at most 1".into(),
        ));
    }
    let ds =
        build_classifier_dataset(&lm, sets.class_names.clone(), &sources, fractions, cfg.seed)?;
    let meta = Meta::of(cfg);
    let mut csv = Vec::new();
    ds.write_csv(&mut csv)?;
    let path = cfg.paths.out("dataset.csv");
    write_bytes(&path, &csv, &meta)?;
    write_bytes(&cache_path(&path), ds.embeddings_json().as_bytes(), &meta)?;
    Ok(())
}

pub fn train_inlp(cfg: &RunConfig) -> CliResult {
    let path = cfg.paths.dataset();
    RunConfig::require_file(&path, "paths.dataset")?;
    let mut ds = LabeledContextDataset::read_csv(File::open(&path)?, class_names(cfg)?)?;
    let cache = cache_path(&path);
    if cache.exists() {
        ds.attach_embeddings_json(&read_text(&cache, "dataset embedding cache")?)?;
    } else {
        let lm = load_lm(cfg, load_table(cfg)?)?;
        ds.embed_with(&lm)?;
    }
    let proj = run_inlp(&ds, &cfg.inlp_config())?;
    log::info!(
        "INLP used {} iterations, final validation accuracy {:?}",
        proj.iterations_used,
        proj.val_accuracies.last()
    );
    let meta = Meta::of(cfg);
    write_json(
        &cfg.paths.out("projector.json"),
        json_value(&proj.to_checkpoint())?,
        &meta,
    )?;
    let mut csv = Vec::new();
    proj.write_trajectory_csv(&mut csv)?;
    write_bytes(&cfg.paths.out("inlp_trajectory.csv"), &csv, &meta)?;
    Ok(())
}

/// Records plain steps in the same shape as debiased ones.
struct PlainTrace {
    traces: Vec<StepTrace>,
}

impl DistributionHook for PlainTrace {
    fn transform(
        &mut self,
        _: &LanguageModel,
        _: &[usize],
        base: Vec<f64>,
    ) -> fairdec::Result<Vec<f64>> {
        self.traces.push(StepTrace {
            alpha: 0.0,
            candidates: 0,
            p_star: base.clone(),
            p_hat: base.clone(),
            mixed: base.clone(),
            sampled: None,
        });
        Ok(base)
    }

    fn observe(&mut self, token: usize) {
        if let Some(t) = self.traces.last_mut() {
            t.sampled = Some(token);
        }
    }
}

pub fn generate(cfg: &RunConfig, prompt: &str, trace: Option<&Path>) -> CliResult {
    let table = load_table(cfg)?;
    let lm = load_lm(cfg, table)?;
    let tokens = tokenize(prompt);
    if tokens.is_empty() {
        return Err(CliError::Config("--prompt is empty".into()));
    }
    let gen_cfg = fairdec::lm::GenerationConfig {
        seed: cfg.seed,
        ..cfg.generation.clone()
    };
    let debiaser = build_debiaser(cfg, &lm)?;
    let (generation, records, trace_cfg) = match &debiaser {
        None if trace.is_some() => {
            let mut hook = PlainTrace { traces: Vec::new() };
            let g = run_generation(&lm, &tokens, &gen_cfg, &mut hook)?;
            (g, hook.traces, None)
        }
        None => (
            run_generation(&lm, &tokens, &gen_cfg, &mut IdentityHook)?,
            Vec::new(),
            None,
        ),
        Some(d) => {
            let mut hook = d.hook();
            let g = run_generation(&lm, &tokens, &gen_cfg, &mut hook)?;
            (g, hook.traces, Some(d.config()))
        }
    };
    if let Some(path) = trace {
        let mut buf = Vec::new();
        match trace_cfg {
            Some(c) => write_trace(&mut buf, c, &records)?,
            None => {
                writeln!(
                    buf,
                    "{}",
                    json!({"mixing": "probabilities", "method": "none", "alpha_mode": {"mode": "fixed", "alpha": 0.0}, "top_k": cfg.debias.top_k})
                )?;
                for r in &records {
                    writeln!(
                        buf,
                        "{}",
                        serde_json::to_string(r).map_err(|e| CliError::Runtime(e.into()))?
                    )?;
                }
            }
        }
        write_bytes(path, &buf, &Meta::of(cfg))?;
    }
    let mut out = std::io::stdout().lock();
    let mut text = tokens.join(" ");
    if !generation.tokens.is_empty() {
        text.push(' ');
        text.push_str(&generation.tokens.join(" "));
    }
    writeln!(out, "{text}")?;
    Ok(())
}

/// Loads `paths.suite` when set, otherwise builds the suite from the corpora.
fn build_suite(cfg: &RunConfig, lm: &LanguageModel) -> CliResult<BenchmarkSuite> {
    if let Some(p) = &cfg.paths.suite {
        let mut suite = BenchmarkSuite::from_json(&read_text(p, "paths.suite")?)?;
        suite.retain_in_vocab(lm.table().vocab());
        if suite.is_empty() {
            return Err(CliError::Config("benchmark suite is empty".into()));
        }
        return Ok(suite);
    }
    let sets = cfg.classes.definitional_sets()?;
    let map = cfg.classes.swap_map()?;
    let corpora = load_corpora(cfg)?;
    let mut suite = BenchmarkSuite::build(
        sets.class_names,
        &map,
        &corpora,
        &cfg.suite_config(load_templates(cfg)?),
    )?;
    suite.retain_in_vocab(lm.table().vocab());
    if suite.is_empty() {
        return Err(CliError::Config("benchmark suite is empty".into()));
    }
    Ok(suite)
}

pub fn evaluate(cfg: &RunConfig) -> CliResult {
    let table = load_table(cfg)?;
    let lm = load_lm(cfg, table)?;
    let suite = build_suite(cfg, &lm)?;
    let debiaser = build_debiaser(cfg, &lm)?;
    let model = Decoder {
        lm: &lm,
        debiaser: debiaser.as_ref(),
    };
    let gen_cfg = fairdec::lm::GenerationConfig {
        seed: cfg.seed,
        ..cfg.generation.clone()
    };
    let report = fairdec::benchmark::evaluate_suite(
        &suite,
        model,
        &lm,
        &load_scorer(cfg)?,
        &gen_cfg,
        cfg.benchmark.global_samples,
    )?;
    let meta = Meta::of(cfg);
    if cfg.paths.suite.is_none() {
        write_json(&cfg.paths.out("suite.json"), json_value(&suite)?, &meta)?;
    }
    let mut pairs = Vec::new();
    report.write_pairs_csv(&mut pairs)?;
    write_bytes(&cfg.paths.out("report_pairs.csv"), &pairs, &meta)?;
    let mut perf = Vec::new();
    report.write_performance_csv(&mut perf)?;
    write_bytes(&cfg.paths.out("report_performance.csv"), &perf, &meta)?;
    write_json(
        &cfg.paths.out("summary.json"),
        json_value(&report.summary())?,
        &meta,
    )?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> CliResult {
    let table = load_table(cfg)?;
    let lm = load_lm(cfg, table)?;
    let suite = build_suite(cfg, &lm)?;
    let variants = &cfg.sweep.variants;
    let needs: HashSet<VariantKind> = variants.iter().copied().collect();
    let needs_projector = [
        VariantKind::Inlp,
        VariantKind::AInlpTune,
        VariantKind::AInlpLearn,
    ]
    .iter()
    .any(|v| needs.contains(v));
    let resources = DebiasResources {
        projector: if needs_projector {
            Some(load_projector(cfg)?)
        } else {
            None
        },
        subspace: if needs.contains(&VariantKind::ASubspace) {
            Some(load_subspace(cfg)?)
        } else {
            None
        },
        bias_set: if needs.iter().any(|v| *v != VariantKind::Base) {
            load_bias_set(cfg)?
        } else {
            BiasSensitiveSet::empty(Vec::new())
        },
        top_k: cfg.debias.top_k,
    };
    let config = SweepConfig {
        grid: cfg.sweep.grid.clone(),
        generation: fairdec::lm::GenerationConfig {
            seed: cfg.seed,
            ..cfg.generation.clone()
        },
        global_samples: cfg.benchmark.global_samples,
    };
    let mut result = run_sweep(
        &suite,
        &lm,
        variants,
        &resources,
        &config,
        &load_scorer(cfg)?,
    )?;
    result.class = cfg.classes.name.clone();
    let meta = Meta::of(cfg);
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    let path = cfg.paths.out(&sweep_file_name(&result.class, &stamp));
    write_bytes(&path, &csv, &meta)?;
    write_json(
        &cfg.paths.out("sweep_details.json"),
        json_value(&result)?,
        &meta,
    )?;
    println!("{}", path.display());
    fs::metadata(&path)?;
    Ok(())
}
