//! A desk-scale autoregressive language model of the bilinear softmax form
//!
//! ```text
//! p(w | c) = exp(e(w)ᵀ f(c)) / Σ_v exp(e(v)ᵀ f(c))
//! ```
//!
//! where `e` is a fixed [`EmbeddingTable`] and `f(c) = A · mean(e(last K tokens of c))`
//! with a learned square encoder `A`. The model is exactly the shape that
//! decode-time debiasing operates on: every step exposes `f(c)` and `e(w)`.
//!
//! Decoding goes through [`generate`], which hands the model's next-token
//! distribution to a [`DistributionHook`] before sampling. Debiasers plug in
//! there.

use std::collections::HashSet;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::{dot, EmbeddingTable};
use crate::error::{Error, Result};

/// Default number of trailing tokens averaged into the context vector.
pub const DEFAULT_WINDOW: usize = 8;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Checks that `p` is a strictly positive distribution summing to one within `tol`.
pub fn check_distribution(p: &[f64], tol: f64) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol || p.iter().any(|&x| x.is_nan() || x <= 0.0 || !x.is_finite()) {
        return Err(Error::NotNormalized(sum));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    table: Arc<EmbeddingTable>,
    encoder: DMatrix<f64>,
    window: usize,
}

impl LanguageModel {
    pub fn new(table: Arc<EmbeddingTable>, encoder: DMatrix<f64>, window: usize) -> Result<Self> {
        let d = table.dim();
        if encoder.nrows() != d || encoder.ncols() != d {
            return Err(Error::DimMismatch {
                expected: d,
                found: encoder.nrows(),
            });
        }
        if window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        Ok(Self {
            table,
            encoder,
            window,
        })
    }

    /// Model whose encoder is the identity, so `f(c)` is the plain context mean.
    pub fn identity(table: Arc<EmbeddingTable>, window: usize) -> Result<Self> {
        let d = table.dim();
        Self::new(table, DMatrix::identity(d, d), window)
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn shared_table(&self) -> Arc<EmbeddingTable> {
        Arc::clone(&self.table)
    }

    pub fn encoder(&self) -> &DMatrix<f64> {
        &self.encoder
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.len()
    }

    /// Maps context tokens to ids, skipping (and logging) unknown tokens.
    pub fn encode_tokens<S: AsRef<str>>(&self, context: &[S]) -> Result<Vec<usize>> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        let ids: Vec<usize> = context
            .iter()
            .filter_map(|t| {
                let t = t.as_ref();
                let id = self.table.vocab().id(t);
                if id.is_none() {
                    log::warn!("skipping out-of-vocabulary context token {t:?}");
                }
                id
            })
            .collect();
        if ids.is_empty() {
            return Err(Error::AllTokensOov);
        }
        Ok(ids)
    }

    /// Mean of the embeddings of the last `window` ids.
    pub fn context_mean(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::EmptyContext);
        }
        let tail = &ids[ids.len().saturating_sub(self.window)..];
        let mut mean = vec![0.0; self.dim()];
        for &id in tail {
            for (m, x) in mean.iter_mut().zip(self.table.row(id)) {
                *m += x;
            }
        }
        let n = tail.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }

    /// `f(c)` for a context given as token ids.
    pub fn context_embedding_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mean = self.context_mean(ids)?;
        let d = self.dim();
        Ok((0..d)
            .map(|i| (0..d).map(|j| self.encoder[(i, j)] * mean[j]).sum())
            .collect())
    }

    /// `f(c)` for a context given as tokens.
    pub fn context_embedding<S: AsRef<str>>(&self, context: &[S]) -> Result<Vec<f64>> {
        let ids = self.encode_tokens(context)?;
        self.context_embedding_ids(&ids)
    }

    /// `e(w)ᵀ h` for every vocabulary token.
    pub fn logits_for(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: h.len(),
            });
        }
        Ok((0..self.vocab_size())
            .map(|id| dot(self.table.row(id), h))
            .collect())
    }

    /// Softmax over `e(w)ᵀ h`.
    pub fn distribution_for(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits_for(h)?))
    }

    pub fn next_token_distribution_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.distribution_for(&self.context_embedding_ids(ids)?)
    }

    /// `p(· | c)`.
    pub fn next_token_distribution<S: AsRef<str>>(&self, context: &[S]) -> Result<Vec<f64>> {
        let ids = self.encode_tokens(context)?;
        self.next_token_distribution_ids(&ids)
    }

    pub fn to_checkpoint(&self, embeddings: impl Into<String>) -> LmCheckpoint {
        let d = self.dim();
        LmCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            embeddings: embeddings.into(),
            dim: d,
            window: self.window,
            encoder: (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| self.encoder[(i, j)])
                .collect(),
        }
    }
}

const CHECKPOINT_FORMAT: &str = "fairdec-lm";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: encoder matrix (row-major), window, and a reference to the
/// embedding file the model was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmCheckpoint {
    pub format: String,
    pub version: u32,
    pub embeddings: String,
    pub dim: usize,
    pub window: usize,
    pub encoder: Vec<f64>,
}

impl LmCheckpoint {
    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.encoder.len() != ck.dim * ck.dim {
            return Err(Error::Format("encoder size does not match dim".into()));
        }
        Ok(ck)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn into_model(self, table: Arc<EmbeddingTable>) -> Result<LanguageModel> {
        if table.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: table.dim(),
            });
        }
        let enc = DMatrix::from_row_slice(self.dim, self.dim, &self.encoder);
        LanguageModel::new(table, enc, self.window)
    }
}

/// Next-token prediction examples precomputed from a corpus.
///
/// The cross-entropy objective is convex in the encoder because the logits
/// are linear in it.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// `n × dim` context means.
    means: DMatrix<f64>,
    targets: Vec<usize>,
    /// `|V| × dim`.
    embeddings: DMatrix<f64>,
}

impl TrainingSet {
    pub fn from_corpus<S: AsRef<str>>(
        corpus: &[Vec<S>],
        table: &EmbeddingTable,
        window: usize,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        let dim = table.dim();
        let mut rows: Vec<f64> = Vec::new();
        let mut targets = Vec::new();
        for sentence in corpus {
            let ids: Vec<usize> = sentence
                .iter()
                .filter_map(|t| table.vocab().id(t.as_ref()))
                .collect();
            for t in 1..ids.len() {
                let tail = &ids[t.saturating_sub(window)..t];
                let mut mean = vec![0.0; dim];
                for &id in tail {
                    for (m, x) in mean.iter_mut().zip(table.row(id)) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= tail.len() as f64);
                rows.extend_from_slice(&mean);
                targets.push(ids[t]);
            }
        }
        if targets.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            means: DMatrix::from_row_slice(targets.len(), dim, &rows),
            targets,
            embeddings: table.matrix(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let d = self.means.ncols();
        let m = DMatrix::from_fn(idx.len(), d, |r, c| self.means[(idx[r], c)]);
        (m, idx.iter().map(|&i| self.targets[i]).collect())
    }

    fn probs(&self, means: &DMatrix<f64>, encoder: &DMatrix<f64>) -> DMatrix<f64> {
        let h = means * encoder.transpose();
        let mut z = h * self.embeddings.transpose();
        for mut row in z.row_iter_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|x| *x = (*x - max).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        z
    }

    /// Mean cross-entropy of the encoder over all examples.
    pub fn loss(&self, encoder: &DMatrix<f64>) -> f64 {
        let p = self.probs(&self.means, encoder);
        let n = self.len() as f64;
        self.targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -p[(i, t)].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n
    }

    /// Gradient of [`loss`](Self::loss) with respect to the encoder.
    pub fn gradient(&self, encoder: &DMatrix<f64>) -> DMatrix<f64> {
        Self::batch_gradient(self, &self.means, &self.targets, encoder)
    }

    fn batch_gradient(
        &self,
        means: &DMatrix<f64>,
        targets: &[usize],
        encoder: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let mut d = self.probs(means, encoder);
        for (i, &t) in targets.iter().enumerate() {
            d[(i, t)] -= 1.0;
        }
        d /= targets.len() as f64;
        // dL/dH = D E ; dL/dA = (dL/dH)ᵀ X
        let dh = d * &self.embeddings;
        dh.transpose() * means
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Standard deviation of the random encoder initialisation; 0 gives a zero encoder.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            epochs: 100,
            learning_rate: 3.0,
            batch_size: Some(64),
            init_scale: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Full-corpus loss before training followed by one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least the initial loss")
    }
}

/// Trains the encoder by cross-entropy gradient descent on next-token prediction.
pub fn train_toy_lm<S: AsRef<str>>(
    corpus: &[Vec<S>],
    table: Arc<EmbeddingTable>,
    config: &TrainConfig,
) -> Result<(LanguageModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let data = TrainingSet::from_corpus(corpus, &table, config.window)?;
    let d = table.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = if config.init_scale > 0.0 {
        DMatrix::from_fn(d, d, |_, _| {
            config.init_scale * rng.sample::<f64, _>(StandardNormal)
        })
    } else {
        DMatrix::zeros(d, d)
    };
    let mut losses = vec![data.loss(&encoder)];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        match config.batch_size {
            None => {
                let g = data.gradient(&encoder);
                encoder -= g * config.learning_rate;
            }
            Some(bs) => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(bs.max(1)) {
                    let (m, t) = data.subset(chunk);
                    let g = data.batch_gradient(&m, &t, &encoder);
                    encoder -= g * config.learning_rate;
                }
            }
        }
        losses.push(data.loss(&encoder));
    }
    let lm = LanguageModel::new(table, encoder, config.window)?;
    Ok((
        lm,
        TrainReport {
            epoch_losses: losses,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Number of tokens to generate after the prompt.
    pub max_length: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub repetition_penalty: f64,
    /// 0 disables the n-gram ban.
    pub no_repeat_ngram: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_length: 30,
            top_k: 50,
            temperature: 1.0,
            repetition_penalty: 1.5,
            no_repeat_ngram: 3,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_length == 0 {
            return Err(Error::InvalidConfig("max_length must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.repetition_penalty.is_nan() || self.repetition_penalty < 1.0 {
            return Err(Error::InvalidConfig(
                "repetition_penalty must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Intercepts the model's next-token distribution at every decoding step.
pub trait DistributionHook {
    /// Returns the distribution to sample from, given `p*(· | context)`.
    fn transform(
        &mut self,
        lm: &LanguageModel,
        context: &[usize],
        base: Vec<f64>,
    ) -> Result<Vec<f64>>;

    /// Called with the token sampled from the transformed distribution.
    fn observe(&mut self, _token: usize) {}
}

/// Leaves the model's distribution untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl DistributionHook for IdentityHook {
    fn transform(&mut self, _: &LanguageModel, _: &[usize], base: Vec<f64>) -> Result<Vec<f64>> {
        Ok(base)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// In-vocabulary prompt ids followed by generated ids.
    pub ids: Vec<usize>,
    pub prompt_len: usize,
    /// Generated tokens only.
    pub tokens: Vec<String>,
}

impl Generation {
    pub fn generated_ids(&self) -> &[usize] {
        &self.ids[self.prompt_len..]
    }
}

/// Indices of the `k` largest entries, ties broken by ascending index.
pub fn top_k_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k.min(p.len()));
    idx
}

/// Tokens that would complete an n-gram already present in `ids`.
fn banned_tokens(ids: &[usize], n: usize) -> HashSet<usize> {
    let mut banned = HashSet::new();
    if n == 0 || ids.len() + 1 < n {
        return banned;
    }
    let prefix = &ids[ids.len() + 1 - n..];
    for w in ids.windows(n) {
        if &w[..n - 1] == prefix {
            banned.insert(w[n - 1]);
        }
    }
    banned
}

/// Autoregressive sampling. Each step: hook → top-k → temperature →
/// repetition penalty → no-repeat-n-gram ban → sample.
///
/// If the ban removes every top-k candidate, the pool widens to the whole
/// vocabulary; if the whole vocabulary is banned, generation stops early.
pub fn generate<S: AsRef<str>>(
    lm: &LanguageModel,
    context: &[S],
    config: &GenerationConfig,
    hook: &mut dyn DistributionHook,
) -> Result<Generation> {
    config.validate()?;
    let mut ids = lm.encode_tokens(context)?;
    let prompt_len = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.max_length {
        let base = lm.next_token_distribution_ids(&ids)?;
        let p = hook.transform(lm, &ids, base)?;
        check_distribution(&p, 1e-9)?;
        let banned = banned_tokens(&ids, config.no_repeat_ngram);
        let mut pool: Vec<usize> = top_k_indices(&p, config.top_k)
            .into_iter()
            .filter(|t| !banned.contains(t))
            .collect();
        if pool.is_empty() {
            pool = top_k_indices(&p, p.len())
                .into_iter()
                .filter(|t| !banned.contains(t))
                .collect();
        }
        if pool.is_empty() {
            break;
        }
        let history: HashSet<usize> = ids.iter().copied().collect();
        let logits: Vec<f64> = pool
            .iter()
            .map(|&t| {
                let mut l = p[t].ln() / config.temperature;
                if history.contains(&t) {
                    if l > 0.0 {
                        l /= config.repetition_penalty;
                    } else {
                        l *= config.repetition_penalty;
                    }
                }
                l
            })
            .collect();
        let probs = softmax(&logits);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut choice = *pool.last().expect("nonempty pool");
        for (&t, &q) in pool.iter().zip(&probs) {
            acc += q;
            if u < acc {
                choice = t;
                break;
            }
        }
        hook.observe(choice);
        ids.push(choice);
    }
    let tokens = ids[prompt_len..]
        .iter()
        .map(|&id| lm.table().vocab().token(id).to_string())
        .collect();
    Ok(Generation {
        ids,
        prompt_len,
        tokens,
    })
}
