//! Run configuration: a TOML file, then `FAIRDEC_SEED`, then command-line flags.

use std::path::{Path, PathBuf};

use fairdec::benchmark::{default_alpha_grid, SuiteConfig, VariantKind};
use fairdec::classifier::{InlpConfig, SplitFractions, SvmConfig};
use fairdec::lm::{GenerationConfig, TrainConfig};
use fairdec::metrics::SwapMap;
use fairdec::subspace::DefinitionalSets;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SEED_ENV: &str = "FAIRDEC_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub classes: Classes,
    pub synth: SynthSection,
    pub subspace: SubspaceSection,
    pub lm: LmSection,
    pub dataset: DatasetSection,
    pub inlp: InlpSection,
    pub generation: GenerationConfig,
    pub debias: DebiasSection,
    pub benchmark: SuiteSection,
    pub sweep: SweepSection,
}

/// Inputs and outputs. Unset model paths default to files in `output_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub output_dir: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub corpora: Vec<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub subspace: Option<PathBuf>,
    pub bias_tokens: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub projector: Option<PathBuf>,
    pub suite: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("fairdec-out"),
            embeddings: None,
            corpora: Vec::new(),
            stopwords: None,
            templates: None,
            lexicon: None,
            lm: None,
            subspace: None,
            bias_tokens: None,
            dataset: None,
            projector: None,
            suite: None,
        }
    }
}

impl Paths {
    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn lm(&self) -> PathBuf {
        self.lm.clone().unwrap_or_else(|| self.out("lm.json"))
    }

    pub fn subspace(&self) -> PathBuf {
        self.subspace
            .clone()
            .unwrap_or_else(|| self.out("subspace.json"))
    }

    pub fn bias_tokens(&self) -> PathBuf {
        self.bias_tokens
            .clone()
            .unwrap_or_else(|| self.out("bias_tokens.csv"))
    }

    pub fn dataset(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.out("dataset.csv"))
    }

    pub fn projector(&self) -> PathBuf {
        self.projector
            .clone()
            .unwrap_or_else(|| self.out("projector.json"))
    }
}

/// Which social-group classes to work with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Classes {
    /// `gender`, `religion`, or a custom name used in output file names.
    pub name: String,
    /// Overrides the preset definitional sets.
    pub definitional: Option<PathBuf>,
    /// Overrides the preset swap map.
    pub swap_map: Option<PathBuf>,
}

impl Default for Classes {
    fn default() -> Self {
        Self {
            name: "gender".into(),
            definitional: None,
            swap_map: None,
        }
    }
}

impl Classes {
    pub fn definitional_sets(&self) -> Result<DefinitionalSets, CliError> {
        match (&self.definitional, self.name.as_str()) {
            (Some(p), _) => Ok(DefinitionalSets::from_json(&read_text(
                p,
                "classes.definitional",
            )?)?),
            (None, "gender") => Ok(DefinitionalSets::gender()),
            (None, "religion") => Ok(DefinitionalSets::religion()),
            (None, other) => Err(CliError::Config(format!(
                "classes.definitional: no preset for class set {other:?}; give a file"
            ))),
        }
    }

    pub fn swap_map(&self) -> Result<SwapMap, CliError> {
        match (&self.swap_map, self.name.as_str()) {
            (Some(p), _) => Ok(SwapMap::from_json(&read_text(p, "classes.swap_map")?)?),
            (None, "gender") => Ok(SwapMap::gender()),
            (None, "religion") => Ok(SwapMap::religion()),
            (None, other) => Err(CliError::Config(format!(
                "classes.swap_map: no preset for class set {other:?}; give a file"
            ))),
        }
    }

    fn is_religion(&self) -> bool {
        self.name == "religion"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub dim: usize,
    pub sentences: usize,
    pub stereotype_rate: f64,
    /// The generator seed; the default reproduces the shipped toy files.
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = fairdec::synthetic::ToyConfig::default();
        Self {
            dim: d.dim,
            sentences: d.sentences,
            stereotype_rate: d.stereotype_rate,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubspaceSection {
    pub k: usize,
    pub top_n: usize,
}

impl Default for SubspaceSection {
    fn default() -> Self {
        Self { k: 1, top_n: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// 0 trains full-batch.
    pub batch_size: usize,
    pub init_scale: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            window: t.window,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size.unwrap_or(0),
            init_scale: t.init_scale,
        }
    }
}

impl LmSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            window: self.window,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            init_scale: self.init_scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub subsequences_per_sentence: usize,
    pub min_len: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self {
            subsequences_per_sentence: 3,
            min_len: 5,
            train_fraction: f.train,
            val_fraction: f.val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InlpSection {
    /// 0 picks the class-set default (80 for gender, 50 for religion).
    pub iterations: usize,
    pub penalty: f64,
    /// 0 picks the class-set default.
    pub solver_steps: usize,
    pub early_stop_patience: usize,
    pub early_stop_margin: f64,
}

impl Default for InlpSection {
    fn default() -> Self {
        let d = InlpConfig::gender();
        Self {
            iterations: 0,
            penalty: d.svm.penalty,
            solver_steps: 0,
            early_stop_patience: d.early_stop_patience,
            early_stop_margin: d.early_stop_margin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    Inlp,
    AInlp,
    ASubspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasSection {
    pub method: Method,
    /// A number in `[0, 1]` or `"learned"`.
    pub alpha: String,
    pub top_k: usize,
}

impl Default for DebiasSection {
    fn default() -> Self {
        Self {
            method: Method::AInlp,
            alpha: "learned".into(),
            top_k: fairdec::debias::DEFAULT_CANDIDATE_POOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub min_len: usize,
    pub bias_cap: usize,
    pub performance_cap: usize,
    /// Completions per context for global bias; 0 skips it.
    pub global_samples: usize,
}

impl Default for SuiteSection {
    fn default() -> Self {
        let d = SuiteConfig::default();
        Self {
            min_len: d.min_len,
            bias_cap: d.bias_cap,
            performance_cap: d.performance_cap,
            global_samples: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub grid: Vec<f64>,
    pub variants: Vec<VariantKind>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            grid: default_alpha_grid(),
            variants: vec![
                VariantKind::Base,
                VariantKind::Inlp,
                VariantKind::AInlpTune,
                VariantKind::AInlpLearn,
                VariantKind::ASubspace,
            ],
        }
    }
}

pub fn read_text(path: &Path, field: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{field}: cannot read {}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = read_text(p, "--config")?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| {
                CliError::Config(format!("{SEED_ENV}: not an unsigned integer: {v:?}"))
            })?;
        }
        Ok(cfg)
    }

    pub fn inlp_config(&self) -> InlpConfig {
        let base = if self.classes.is_religion() {
            InlpConfig::religion()
        } else {
            InlpConfig::gender()
        };
        InlpConfig {
            iterations: if self.inlp.iterations > 0 {
                self.inlp.iterations
            } else {
                base.iterations
            },
            svm: SvmConfig {
                penalty: self.inlp.penalty,
                max_iterations: if self.inlp.solver_steps > 0 {
                    self.inlp.solver_steps
                } else {
                    base.svm.max_iterations
                },
                ..base.svm
            },
            early_stop_patience: self.inlp.early_stop_patience,
            early_stop_margin: self.inlp.early_stop_margin,
        }
    }

    pub fn suite_config(&self, templates: Vec<String>) -> SuiteConfig {
        SuiteConfig {
            templates,
            min_len: self.benchmark.min_len,
            bias_cap: self.benchmark.bias_cap,
            performance_cap: self.benchmark.performance_cap,
            seed: self.seed,
        }
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, field: &str) -> Result<&'a PathBuf, CliError> {
        let p = value
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("{field} is required")))?;
        if !p.exists() {
            return Err(CliError::Config(format!(
                "{field}: {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn require_file(path: &Path, field: &str) -> Result<(), CliError> {
        if !path.exists() {
            return Err(CliError::Config(format!(
                "{field}: {} does not exist (run the producing command first or set {field})",
                path.display()
            )));
        }
        Ok(())
    }
}
