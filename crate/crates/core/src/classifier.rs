//! Bias classifiers over context embeddings and iterative nullspace projection.
//!
//! INLP repeatedly trains a linear classifier to predict the protected class
//! from (already projected) context embeddings, then removes the classifier's
//! row space:
//!
//! ```text
//! P_W = I − R Rᵀ        R = orthonormal basis of rowspace(W)
//! P  ← P_W · P
//! ```
//!
//! Each iteration's classifier is trained on `P x`, so its rows are mapped
//! through `P` before taking the row space. That keeps every new projector
//! commuting with the composed one, and the product stays an orthogonal
//! projection up to round-off.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;

/// Relative singular-value cutoff for the classifier row space.
const ROWSPACE_TOL: f64 = 1e-10;
/// Idempotence drift that triggers eigenvalue clipping.
const IDEMPOTENCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SimpleTemplate,
    DiverseCorpus,
    Subsequence,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::SimpleTemplate => "simple-template",
            Provenance::DiverseCorpus => "diverse-corpus",
            Provenance::Subsequence => "subsequence",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple-template" => Ok(Self::SimpleTemplate),
            "diverse-corpus" => Ok(Self::DiverseCorpus),
            "subsequence" => Ok(Self::Subsequence),
            _ => Err(Error::Format(format!("unknown provenance {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub tokens: Vec<String>,
    pub label: usize,
    pub provenance: Provenance,
    pub split: Split,
    pub embedding: Vec<f64>,
}

/// Train/val/test fractions; the test fraction is whatever remains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    /// 2940 / 1260 / 1800 out of 6000.
    fn default() -> Self {
        Self {
            train: 0.49,
            val: 0.21,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledContextDataset {
    pub class_names: Vec<String>,
    pub examples: Vec<LabeledExample>,
}

impl LabeledContextDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.embedding.len())
    }

    /// Examples in `split` whose provenance is in `provenances`.
    pub fn select(&self, split: Split, provenances: &[Provenance]) -> Vec<&LabeledExample> {
        self.examples
            .iter()
            .filter(|e| e.split == split && provenances.contains(&e.provenance))
            .collect()
    }

    pub fn in_split(&self, split: Split) -> Vec<&LabeledExample> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    /// Recomputes every embedding as `f(c)` under `lm`.
    pub fn embed_with(&mut self, lm: &LanguageModel) -> Result<()> {
        for e in &mut self.examples {
            e.embedding = lm.context_embedding(&e.tokens)?;
        }
        Ok(())
    }

    /// Writes `label,provenance,split,text` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "provenance", "split", "text"])?;
        for e in &self.examples {
            w.write_record([
                self.class_names[e.label].as_str(),
                e.provenance.as_str(),
                e.split.as_str(),
                &e.tokens.join(" "),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv). Embeddings are
    /// left empty; call [`embed_with`](Self::embed_with) or attach a cache.
    pub fn read_csv<R: Read>(input: R, class_names: Vec<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["label", "provenance", "split", "text"] {
            return Err(Error::Format(
                "dataset header must be label,provenance,split,text".into(),
            ));
        }
        let mut examples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::Format(format!(
                    "expected 4 columns, found {}",
                    rec.len()
                )));
            }
            let label = class_names
                .iter()
                .position(|c| c == &rec[0])
                .ok_or_else(|| Error::Format(format!("unknown label {:?}", &rec[0])))?;
            let tokens: Vec<String> = rec[3].split_whitespace().map(str::to_string).collect();
            if tokens.is_empty() {
                return Err(Error::Format("empty context text".into()));
            }
            examples.push(LabeledExample {
                tokens,
                label,
                provenance: rec[1].parse()?,
                split: rec[2].parse()?,
                embedding: Vec::new(),
            });
        }
        if examples.is_empty() {
            return Err(Error::Format("dataset has no rows".into()));
        }
        Ok(Self {
            class_names,
            examples,
        })
    }

    /// Embedding cache: one vector per example, in order.
    pub fn embeddings_json(&self) -> String {
        let rows: Vec<&Vec<f64>> = self.examples.iter().map(|e| &e.embedding).collect();
        serde_json::to_string(&rows).expect("serializable")
    }

    pub fn attach_embeddings_json(&mut self, text: &str) -> Result<()> {
        let rows: Vec<Vec<f64>> = serde_json::from_str(text)?;
        if rows.len() != self.examples.len() {
            return Err(Error::Format(format!(
                "embedding cache has {} rows for {} examples",
                rows.len(),
                self.examples.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        if rows
            .iter()
            .any(|r| r.len() != dim || r.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Format("ragged or non-finite embedding cache".into()));
        }
        for (e, r) in self.examples.iter_mut().zip(rows) {
            e.embedding = r;
        }
        Ok(())
    }
}

/// Sources for [`build_classifier_dataset`].
#[derive(Debug, Clone, Default)]
pub struct DatasetSources {
    /// Templates containing the `XYZ` placeholder.
    pub templates: Vec<String>,
    /// Words substituted into templates, per class.
    pub class_words: Vec<Vec<String>>,
    /// Pre-tokenized corpus sentences.
    pub corpus: Vec<Vec<String>>,
    /// Bias-sensitive tokens per class, used to label corpus sentences.
    pub bias_tokens: Vec<Vec<String>>,
    /// Partial contexts drawn per diverse sentence; 0 disables the tier.
    pub subsequences_per_sentence: usize,
    pub min_len: usize,
}

pub const PLACEHOLDER: &str = "XYZ";

/// Tokenizes a template after substituting `word` for the placeholder.
pub fn fill_template(template: &str, word: &str) -> Vec<String> {
    template
        .split_whitespace()
        .map(|t| {
            if t == PLACEHOLDER {
                word.to_lowercase()
            } else {
                t.to_lowercase()
            }
        })
        .collect()
}

/// Builds the three-tier labeled context dataset and embeds it under `lm`.
pub fn build_classifier_dataset(
    lm: &LanguageModel,
    class_names: Vec<String>,
    sources: &DatasetSources,
    fractions: SplitFractions,
    seed: u64,
) -> Result<LabeledContextDataset> {
    let n = class_names.len();
    let mut raw: Vec<(Vec<String>, usize, Provenance)> = Vec::new();

    if !sources.templates.is_empty() {
        for (label, words) in sources.class_words.iter().enumerate().take(n) {
            for tpl in &sources.templates {
                for w in words {
                    raw.push((fill_template(tpl, w), label, Provenance::SimpleTemplate));
                }
            }
        }
    }

    if !sources.corpus.is_empty() && !sources.bias_tokens.is_empty() {
        let diverse = crate::benchmark::extract_diverse_contexts(
            &sources.corpus,
            &sources.bias_tokens,
            sources.min_len,
        )
        .unwrap_or_default();
        let class_sets: Vec<std::collections::HashSet<&str>> = sources
            .bias_tokens
            .iter()
            .map(|ts| ts.iter().map(String::as_str).collect())
            .collect();
        for (i, ctx) in diverse.iter().enumerate() {
            raw.push((ctx.tokens.clone(), ctx.label, Provenance::DiverseCorpus));
            if sources.subsequences_per_sentence > 0 {
                let subs = crate::benchmark::subsequence_augment(
                    &ctx.tokens,
                    &class_sets[ctx.label],
                    sources.subsequences_per_sentence,
                    sources.min_len,
                    seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                )?;
                for s in subs {
                    if s != ctx.tokens {
                        raw.push((s, ctx.label, Provenance::Subsequence));
                    }
                }
            }
        }
    }

    if raw.is_empty() {
        return Err(Error::InvalidConfig(
            "no dataset source produced examples".into(),
        ));
    }
    for (c, name) in class_names.iter().enumerate() {
        if !raw.iter().any(|(_, l, _)| *l == c) {
            return Err(Error::NoExamplesForClass(name.clone()));
        }
    }

    let mut examples = Vec::with_capacity(raw.len());
    for (tokens, label, provenance) in raw {
        match lm.context_embedding(&tokens) {
            Ok(embedding) => examples.push(LabeledExample {
                tokens,
                label,
                provenance,
                split: Split::Train,
                embedding,
            }),
            Err(Error::AllTokensOov) => continue,
            Err(e) => return Err(e),
        }
    }
    assign_splits(&mut examples, fractions, seed);
    Ok(LabeledContextDataset {
        class_names,
        examples,
    })
}

/// Stratified split per (provenance, label) cell so every tier is represented.
pub fn assign_splits(examples: &mut [LabeledExample], fractions: SplitFractions, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<((Provenance, usize), Vec<usize>)> = Vec::new();
    let mut index: HashMap<(Provenance, usize), usize> = HashMap::new();
    for (i, e) in examples.iter().enumerate() {
        let key = (e.provenance, e.label);
        let slot = *index.entry(key).or_insert_with(|| {
            cells.push((key, Vec::new()));
            cells.len() - 1
        });
        cells[slot].1.push(i);
    }
    for (_, idx) in &mut cells {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((n as f64) * fractions.train).round() as usize;
        let n_val = ((n as f64) * fractions.val).round() as usize;
        for (pos, &i) in idx.iter().enumerate() {
            examples[i].split = if pos < n_train {
                Split::Train
            } else if pos < (n_train + n_val).min(n) {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
}

/// Stacks embeddings into an `n × dim` matrix plus labels.
pub fn to_matrix(examples: &[&LabeledExample]) -> (DMatrix<f64>, Vec<usize>) {
    let dim = examples.first().map_or(0, |e| e.embedding.len());
    let x = DMatrix::from_fn(examples.len(), dim, |i, j| examples[i].embedding[j]);
    (x, examples.iter().map(|e| e.label).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    /// `C`, weight of the squared-hinge term against `½‖w‖²`.
    pub penalty: f64,
    pub max_iterations: usize,
    /// Stop once the gradient norm falls below this fraction of its initial value.
    pub tolerance: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            penalty: 1.0,
            max_iterations: 1000,
            tolerance: 1e-6,
        }
    }
}

/// Linear classifier `score = W x + b`.
///
/// Two classes use a single decision row (positive → class 1); more classes
/// use one-vs-rest rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBiasClassifier {
    pub weights: DMatrix<f64>,
    pub bias: Vec<f64>,
    pub num_classes: usize,
    pub objective: f64,
    pub iterations: usize,
    pub penalty: f64,
}

impl LinearBiasClassifier {
    pub fn predict_row(&self, x: &[f64]) -> usize {
        let scores: Vec<f64> = (0..self.weights.nrows())
            .map(|r| {
                self.weights
                    .row(r)
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.bias[r]
            })
            .collect();
        if self.num_classes == 2 {
            usize::from(scores[0] > 0.0)
        } else {
            scores
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc },
                )
                .0
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        x.row_iter()
            .map(|r| self.predict_row(&r.iter().copied().collect::<Vec<_>>()))
            .collect()
    }

    pub fn accuracy(&self, x: &DMatrix<f64>, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .predict(x)
            .iter()
            .zip(labels)
            .filter(|(a, b)| a == b)
            .count();
        hits as f64 / labels.len() as f64
    }
}

/// ℓ2-regularized squared-hinge linear SVM, primal, solved by accelerated
/// full-batch gradient descent from a zero start.
pub fn train_linear_classifier(
    x: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    config: &SvmConfig,
) -> Result<LinearBiasClassifier> {
    let n = x.nrows();
    let d = x.ncols();
    if n != labels.len() {
        return Err(Error::DimMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    let mut present = vec![false; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::Format(format!("label {l} out of range")));
        }
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::SingleClassDataset);
    }
    let rows = if num_classes == 2 { 1 } else { num_classes };
    // targets in {-1, +1}
    let y = DMatrix::from_fn(n, rows, |i, j| {
        let positive = if num_classes == 2 {
            labels[i] == 1
        } else {
            labels[i] == j
        };
        if positive {
            1.0
        } else {
            -1.0
        }
    });
    let xa = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[(i, j)] } else { 1.0 });
    let gram = xa.transpose() * &xa;
    let lambda_max = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    let c = config.penalty;
    let lipschitz = 1.0 + 2.0 * c * lambda_max;
    let step = 1.0 / lipschitz;

    let objective_grad = |theta: &DMatrix<f64>| -> (f64, DMatrix<f64>) {
        let margins = &xa * theta;
        let slack = DMatrix::from_fn(n, rows, |i, j| (1.0 - y[(i, j)] * margins[(i, j)]).max(0.0));
        let mut reg = theta.clone();
        reg.row_mut(d).fill(0.0);
        let obj = 0.5 * reg.norm_squared() + c * slack.norm_squared();
        let weighted = y.component_mul(&slack);
        let g = reg - xa.transpose() * weighted * (2.0 * c);
        (obj, g)
    };

    let mut theta = DMatrix::zeros(d + 1, rows);
    let mut momentum = theta.clone();
    let mut t = 1.0f64;
    let (_, g0) = objective_grad(&theta);
    let g0_norm = g0.norm().max(f64::MIN_POSITIVE);
    let mut iterations = 0;
    for it in 0..config.max_iterations {
        iterations = it + 1;
        let (_, g) = objective_grad(&momentum);
        if g.norm() <= config.tolerance * g0_norm {
            theta = momentum.clone();
            break;
        }
        let next = &momentum - &g * step;
        // gradient-based adaptive restart
        let restart = g.dot(&(&next - &theta)) > 0.0;
        let t_next = if restart {
            1.0
        } else {
            (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0
        };
        let beta = if restart { 0.0 } else { (t - 1.0) / t_next };
        momentum = &next + (&next - &theta) * beta;
        theta = next;
        t = t_next;
    }
    let (objective, _) = objective_grad(&theta);
    let weights = theta.rows(0, d).transpose();
    let bias = theta.row(d).iter().copied().collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Format("classifier diverged".into()));
    }
    Ok(LinearBiasClassifier {
        weights,
        bias,
        num_classes,
        objective,
        iterations,
        penalty: c,
    })
}

/// `I − R Rᵀ` with `R` an orthonormal basis of the row space of `weights`.
pub fn nullspace_projector(weights: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = weights.ncols();
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Err(Error::ZeroWeightMatrix);
    }
    let svd = weights.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let top = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let mut p = DMatrix::identity(d, d);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > ROWSPACE_TOL * top {
            let r = v_t.row(i).transpose();
            p -= &r * r.transpose();
        }
    }
    Ok(p)
}

/// Symmetrizes `p` and, if `‖P² − P‖_F` drifts past tolerance, snaps its
/// eigenvalues to {0, 1}.
pub fn clean_projector(p: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (p + p.transpose()) * 0.5;
    if idempotence_error(&sym) <= IDEMPOTENCE_TOL {
        return sym;
    }
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|l| if l >= 0.5 { 1.0 } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// `‖P² − P‖_F`.
pub fn idempotence_error(p: &DMatrix<f64>) -> f64 {
    (p * p - p).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InlpConfig {
    pub iterations: usize,
    pub svm: SvmConfig,
    /// Stop after this many consecutive iterations at or below chance + margin.
    pub early_stop_patience: usize,
    pub early_stop_margin: f64,
}

impl InlpConfig {
    /// 80 iterations, used for gender.
    pub fn gender() -> Self {
        Self {
            iterations: 80,
            svm: SvmConfig::default(),
            early_stop_patience: 3,
            early_stop_margin: 0.02,
        }
    }

    /// 50 iterations and 2000 solver steps, used for religion.
    pub fn religion() -> Self {
        Self {
            iterations: 50,
            svm: SvmConfig {
                max_iterations: 2000,
                ..SvmConfig::default()
            },
            ..Self::gender()
        }
    }
}

impl Default for InlpConfig {
    fn default() -> Self {
        Self::gender()
    }
}

/// Composed projector plus the per-iteration record.
#[derive(Debug, Clone, PartialEq)]
pub struct NullspaceProjector {
    pub matrix: DMatrix<f64>,
    pub iterations_used: usize,
    pub train_accuracies: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    /// Rank of the composed projector after each iteration.
    pub ranks: Vec<usize>,
}

impl NullspaceProjector {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            iterations_used: 0,
            train_accuracies: Vec::new(),
            val_accuracies: Vec::new(),
            ranks: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.matrix.row(i).iter().zip(x).map(|(p, v)| p * v).sum())
            .collect()
    }

    /// Projects every row of `x` (`P` is symmetric, so `X P`).
    pub fn apply_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * &self.matrix
    }

    pub fn to_checkpoint(&self) -> ProjectorCheckpoint {
        let d = self.dim();
        ProjectorCheckpoint {
            format: "fairdec-projector".into(),
            version: 1,
            dim: d,
            matrix: (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| self.matrix[(i, j)])
                .collect(),
            iterations_used: self.iterations_used,
            train_accuracies: self.train_accuracies.clone(),
            val_accuracies: self.val_accuracies.clone(),
            ranks: self.ranks.clone(),
        }
    }

    /// Writes `iteration,train_accuracy,val_accuracy,rank` rows.
    pub fn write_trajectory_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "train_accuracy", "val_accuracy", "rank"])?;
        for i in 0..self.iterations_used {
            w.write_record([
                (i + 1).to_string(),
                self.train_accuracies[i].to_string(),
                self.val_accuracies[i].to_string(),
                self.ranks[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorCheckpoint {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub iterations_used: usize,
    pub train_accuracies: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl ProjectorCheckpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != "fairdec-projector" || ck.version != 1 {
            return Err(Error::Format("not a fairdec projector checkpoint".into()));
        }
        if ck.matrix.len() != ck.dim * ck.dim {
            return Err(Error::Format("projector size does not match dim".into()));
        }
        Ok(ck)
    }

    pub fn into_projector(self) -> NullspaceProjector {
        NullspaceProjector {
            matrix: DMatrix::from_row_slice(self.dim, self.dim, &self.matrix),
            iterations_used: self.iterations_used,
            train_accuracies: self.train_accuracies,
            val_accuracies: self.val_accuracies,
            ranks: self.ranks,
        }
    }
}

/// Majority-class rate, the accuracy of always guessing the most common label.
pub fn chance_rate(labels: &[usize], num_classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / labels.len() as f64
}

/// Iterative nullspace projection over the train/val splits of `dataset`.
pub fn run_inlp(
    dataset: &LabeledContextDataset,
    config: &InlpConfig,
) -> Result<NullspaceProjector> {
    let train = dataset.in_split(Split::Train);
    let val = dataset.in_split(Split::Val);
    let (x_train, y_train) = to_matrix(&train);
    let (x_val, y_val) = to_matrix(&val);
    inlp_on_matrices(
        &x_train,
        &y_train,
        &x_val,
        &y_val,
        dataset.num_classes(),
        config,
    )
}

/// INLP on raw matrices (rows are examples).
pub fn inlp_on_matrices(
    x_train: &DMatrix<f64>,
    y_train: &[usize],
    x_val: &DMatrix<f64>,
    y_val: &[usize],
    num_classes: usize,
    config: &InlpConfig,
) -> Result<NullspaceProjector> {
    if config.iterations == 0 {
        return Err(Error::InvalidConfig(
            "INLP needs at least one iteration".into(),
        ));
    }
    let d = x_train.ncols();
    let mut proj = NullspaceProjector::identity(d);
    let chance = chance_rate(y_val, num_classes);
    let mut streak = 0;
    for _ in 0..config.iterations {
        let xt = proj.apply_rows(x_train);
        let clf = train_linear_classifier(&xt, y_train, num_classes, &config.svm)?;
        let train_acc = clf.accuracy(&xt, y_train);
        let val_acc = if y_val.is_empty() {
            train_acc
        } else {
            clf.accuracy(&proj.apply_rows(x_val), y_val)
        };
        let effective = &clf.weights * &proj.matrix;
        let p_w = match nullspace_projector(&effective) {
            Ok(p) => p,
            // nothing left to remove
            Err(Error::ZeroWeightMatrix) => break,
            Err(e) => return Err(e),
        };
        proj.matrix = clean_projector(&(p_w * &proj.matrix));
        proj.iterations_used += 1;
        proj.train_accuracies.push(train_acc);
        proj.val_accuracies.push(val_acc);
        proj.ranks
            .push(proj.matrix.trace().round().max(0.0) as usize);

        if val_acc <= chance + config.early_stop_margin {
            streak += 1;
            if config.early_stop_patience > 0 && streak >= config.early_stop_patience {
                break;
            }
        } else {
            streak = 0;
        }
    }
    Ok(proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(
        n_per: usize,
        centers: &[Vec<f64>],
        spread: f64,
        seed: u64,
    ) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = centers[0].len();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..n_per {
                for &m in center {
                    rows.push(m + spread * rng.sample::<f64, _>(StandardNormal));
                }
                labels.push(c);
            }
        }
        (DMatrix::from_row_slice(labels.len(), d, &rows), labels)
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let (x, y) = blobs(40, &[vec![-2.0, -2.0], vec![2.0, 2.0]], 0.5, 1);
        let clf = train_linear_classifier(&x, &y, 2, &SvmConfig::default()).unwrap();
        assert_eq!(clf.weights.nrows(), 1);
        assert_eq!(clf.accuracy(&x, &y), 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(matches!(
            train_linear_classifier(&x, &[0, 0], 2, &SvmConfig::default()),
            Err(Error::SingleClassDataset)
        ));
    }

    #[test]
    fn axis_nullspace() {
        let w = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let p = nullspace_projector(&w).unwrap();
        assert!(
            (p - DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 1.0]))).norm()
                < 1e-15
        );
    }

    #[test]
    fn full_rank_leaves_nothing() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]);
        let p = nullspace_projector(&w).unwrap();
        assert!(p.norm() < 1e-12);
    }

    #[test]
    fn zero_weights() {
        assert!(matches!(
            nullspace_projector(&DMatrix::zeros(2, 3)),
            Err(Error::ZeroWeightMatrix)
        ));
    }

    #[test]
    fn one_iteration_is_single_projector() {
        let (x, y) = blobs(
            30,
            &[
                vec![0.0, 1.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            0.3,
            5,
        );
        let cfg = InlpConfig {
            iterations: 1,
            ..InlpConfig::default()
        };
        let proj = inlp_on_matrices(&x, &y, &x, &y, 3, &cfg).unwrap();
        let clf = train_linear_classifier(&x, &y, 3, &cfg.svm).unwrap();
        let direct = nullspace_projector(&clf.weights).unwrap();
        assert!((proj.matrix - direct).norm() < 1e-10);
        assert_eq!(proj.iterations_used, 1);
    }

    #[test]
    fn clean_projector_snaps_drift() {
        let mut p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.0, 1.0]));
        p[(0, 0)] = 1.0 + 1e-5;
        p[(0, 1)] = 1e-6;
        assert!(idempotence_error(&p) > 1e-8);
        let c = clean_projector(&p);
        assert!(idempotence_error(&c) < 1e-12);
        assert!((&c - c.transpose()).norm() < 1e-15);
    }

    #[test]
    fn templates_fill_lowercase() {
        assert_eq!(
            fill_template("The XYZ was known for", "Man"),
            ["the", "man", "was", "known", "for"]
        );
    }

    #[test]
    fn chance_is_majority_rate() {
        assert_eq!(chance_rate(&[0, 0, 1, 2], 3), 0.5);
    }
}
