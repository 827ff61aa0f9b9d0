//! Local bias, global bias and performance drift for counterfactual contexts.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::debias::Debiaser;
use crate::error::{Error, Result};
use crate::lm::{generate, GenerationConfig, IdentityHook, LanguageModel};

/// Floor applied to `q` inside [`kl_divergence`].
pub const KL_EPSILON: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-9;

fn check_normalized(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized(sum));
    }
    Ok(())
}

/// `Σ p ln(p / max(q, ε))`, skipping terms with `p = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    check_normalized(p)?;
    check_normalized(q)?;
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_EPSILON)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Squared Hellinger distance `½ Σ (√p − √q)²`.
pub fn hellinger_sq(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    check_normalized(p)?;
    check_normalized(q)?;
    let h: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum::<f64>()
        * 0.5;
    Ok(h.clamp(0.0, 1.0))
}

/// Word substitution over aligned tuples. Tuple position `i` belongs to class `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapMap {
    tuples: Vec<Vec<String>>,
    #[serde(skip)]
    index: HashMap<String, (usize, usize)>,
}

impl SwapMap {
    /// When a word appears in several tuples the first occurrence wins.
    pub fn new(tuples: Vec<Vec<String>>) -> Result<Self> {
        let arity = tuples.first().map(Vec::len).unwrap_or(0);
        if arity < 2 {
            return Err(Error::InvalidConfig(
                "swap map needs tuples of at least two words".into(),
            ));
        }
        if tuples.iter().any(|t| t.len() != arity) {
            return Err(Error::InvalidConfig(
                "swap map tuples differ in length".into(),
            ));
        }
        let tuples: Vec<Vec<String>> = tuples
            .into_iter()
            .map(|t| t.into_iter().map(|w| w.to_lowercase()).collect())
            .collect();
        let mut index = HashMap::new();
        for (ti, t) in tuples.iter().enumerate() {
            for (pos, w) in t.iter().enumerate() {
                index.entry(w.clone()).or_insert((ti, pos));
            }
        }
        Ok(Self { tuples, index })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tuples: Vec<Vec<String>> = serde_json::from_str(text)?;
        Self::new(tuples)
    }

    /// The shipped female/male map.
    pub fn gender() -> Self {
        Self::from_json(include_str!("../data/gender_swap.json"))
            .expect("shipped swap map is valid")
    }

    /// The shipped three-way religion map.
    pub fn religion() -> Self {
        Self::from_json(include_str!("../data/religion_swap.json"))
            .expect("shipped swap map is valid")
    }

    /// Number of classes (tuple width).
    pub fn arity(&self) -> usize {
        self.tuples[0].len()
    }

    pub fn tuples(&self) -> &[Vec<String>] {
        &self.tuples
    }

    /// `(tuple, class)` of a word, case-insensitively.
    pub fn lookup(&self, word: &str) -> Option<(usize, usize)> {
        self.index.get(&word.to_lowercase()).copied()
    }

    /// Words of one class.
    pub fn class_words(&self, class: usize) -> Vec<String> {
        self.tuples.iter().map(|t| t[class].clone()).collect()
    }

    fn rotate_word(&self, word: &str, shift: usize) -> Option<String> {
        let (ti, pos) = self.lookup(word)?;
        let t = &self.tuples[ti];
        Some(match_case(word, &t[(pos + shift) % t.len()]))
    }
}

fn match_case(original: &str, replacement: &str) -> String {
    let has_alpha = original.chars().any(char::is_alphabetic);
    if has_alpha
        && original
            .chars()
            .filter(|c| c.is_alphabetic())
            .all(char::is_uppercase)
        && original.chars().count() > 1
    {
        replacement.to_uppercase()
    } else if original.chars().next().is_some_and(char::is_uppercase) {
        let mut chars = replacement.chars();
        match chars.next() {
            Some(f) => f.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    } else {
        replacement.to_string()
    }
}

/// Counterfactual contexts that differ only in social-group terms.
///
/// For more than two classes `rest` holds the further cyclic rotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPair {
    pub c1: Vec<String>,
    pub c2: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rest: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

impl ContextPair {
    pub fn contexts(&self) -> impl Iterator<Item = &Vec<String>> {
        [&self.c1, &self.c2].into_iter().chain(self.rest.iter())
    }

    /// The same contexts with `c1` and `c2` exchanged.
    pub fn reversed(&self) -> Self {
        Self {
            c1: self.c2.clone(),
            c2: self.c1.clone(),
            rest: self.rest.clone(),
            gold: self.gold.clone(),
        }
    }
}

/// All cyclic rotations of the context under `map`, starting with the
/// original. Fails if no token is mapped.
pub fn counterfactual_rotations<S: AsRef<str>>(
    context: &[S],
    map: &SwapMap,
) -> Result<Vec<Vec<String>>> {
    if !context.iter().any(|t| map.lookup(t.as_ref()).is_some()) {
        return Err(Error::NoSwappableToken);
    }
    Ok((0..map.arity())
        .map(|shift| {
            context
                .iter()
                .map(|t| {
                    let t = t.as_ref();
                    if shift == 0 {
                        t.to_string()
                    } else {
                        map.rotate_word(t, shift).unwrap_or_else(|| t.to_string())
                    }
                })
                .collect()
        })
        .collect())
}

/// Swaps every mapped term in `context`.
pub fn counterfactual_swap<S: AsRef<str>>(context: &[S], map: &SwapMap) -> Result<ContextPair> {
    let mut rot = counterfactual_rotations(context, map)?;
    let c1 = rot.remove(0);
    let c2 = rot.remove(0);
    Ok(ContextPair {
        c1,
        c2,
        rest: rot,
        gold: None,
    })
}

/// A language model, optionally wrapped by a decode-time debiaser.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub lm: &'a LanguageModel,
    pub debiaser: Option<&'a Debiaser>,
}

impl<'a> Decoder<'a> {
    pub fn plain(lm: &'a LanguageModel) -> Self {
        Self { lm, debiaser: None }
    }

    pub fn debiased(lm: &'a LanguageModel, debiaser: &'a Debiaser) -> Self {
        Self {
            lm,
            debiaser: Some(debiaser),
        }
    }

    pub fn distribution_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        match self.debiaser {
            None => self.lm.next_token_distribution_ids(ids),
            Some(d) => d.step(self.lm, ids).map(|(p, _)| p),
        }
    }

    pub fn distribution<S: AsRef<str>>(&self, context: &[S]) -> Result<Vec<f64>> {
        self.distribution_ids(&self.lm.encode_tokens(context)?)
    }

    /// Generated tokens only.
    pub fn complete<S: AsRef<str>>(
        &self,
        context: &[S],
        config: &GenerationConfig,
    ) -> Result<Vec<String>> {
        let g = match self.debiaser {
            None => generate(self.lm, context, config, &mut IdentityHook)?,
            Some(d) => generate(self.lm, context, config, &mut d.hook())?,
        };
        Ok(g.tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalBias {
    /// `KL(p(·|c1) ‖ p(·|c2))`; for more classes, the maximum over ordered pairs `i < j`.
    pub kl_forward: f64,
    /// `KL(p(·|c2) ‖ p(·|c1))`; for more classes, the maximum over pairs `i > j`.
    pub kl_backward: f64,
    /// Largest pairwise squared Hellinger distance.
    pub hellinger_sq: f64,
}

impl LocalBias {
    /// Mean of both KL directions.
    pub fn kl(&self) -> f64 {
        0.5 * (self.kl_forward + self.kl_backward)
    }
}

/// Divergences between next-token distributions of the counterfactual contexts.
pub fn local_bias(model: Decoder<'_>, pair: &ContextPair) -> Result<LocalBias> {
    let dists: Vec<Vec<f64>> = pair
        .contexts()
        .map(|c| model.distribution(c))
        .collect::<Result<_>>()?;
    let mut out = LocalBias {
        kl_forward: 0.0,
        kl_backward: 0.0,
        hellinger_sq: 0.0,
    };
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            out.kl_forward = out.kl_forward.max(kl_divergence(&dists[i], &dists[j])?);
            out.kl_backward = out.kl_backward.max(kl_divergence(&dists[j], &dists[i])?);
            out.hellinger_sq = out.hellinger_sq.max(hellinger_sq(&dists[i], &dists[j])?);
        }
    }
    Ok(out)
}

/// Maps a token sequence to a polarity score in `[0, 1]`.
pub trait SentenceScorer: Sync {
    fn score(&self, tokens: &[String]) -> f64;
}

/// Signed word-list average mapped to `[0, 1]`; 0.5 when no listed word occurs.
#[derive(Debug, Clone, Default)]
pub struct LexiconScorer {
    polarity: HashMap<String, f64>,
}

impl LexiconScorer {
    pub fn new<S: AsRef<str>>(positive: &[S], negative: &[S]) -> Self {
        let mut polarity = HashMap::new();
        for w in positive {
            polarity.insert(w.as_ref().to_lowercase(), 1.0);
        }
        for w in negative {
            polarity.insert(w.as_ref().to_lowercase(), -1.0);
        }
        Self { polarity }
    }

    /// The bundled English word list.
    pub fn bundled() -> Self {
        Self::parse(include_str!("../data/sentiment_lexicon.txt")).expect("bundled lexicon parses")
    }

    /// One word per line, `word<TAB or space>+1` or `-1`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut polarity = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(w), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::MalformedLine { line: i + 1 });
            };
            let v: f64 = v
                .parse()
                .map_err(|_| Error::MalformedLine { line: i + 1 })?;
            polarity.insert(w.to_lowercase(), v.signum());
        }
        Ok(Self { polarity })
    }
}

impl SentenceScorer for LexiconScorer {
    fn score(&self, tokens: &[String]) -> f64 {
        let hits: Vec<f64> = tokens
            .iter()
            .filter_map(|t| self.polarity.get(&t.to_lowercase()).copied())
            .collect();
        if hits.is_empty() {
            return 0.5;
        }
        let mean = hits.iter().sum::<f64>() / hits.len() as f64;
        0.5 * (1.0 + mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub fn of(score: f64) -> Self {
        if score > 0.5 {
            Polarity::Positive
        } else if score < 0.5 {
            Polarity::Negative
        } else {
            Polarity::Neutral
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBias {
    /// Mean over samples of the largest pairwise `|g(s_i) − g(s_j)|`.
    pub score_diff: f64,
    /// Largest pairwise difference in the fraction of positive completions.
    pub positive_diff: f64,
    pub neutral_diff: f64,
    pub negative_diff: f64,
}

/// Global bias with paired seeds: sample `k` of every context uses seed
/// `config.seed + k`.
pub fn global_bias(
    model: Decoder<'_>,
    pair: &ContextPair,
    scorer: &dyn SentenceScorer,
    config: &GenerationConfig,
    n_samples: usize,
) -> Result<GlobalBias> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let contexts: Vec<&Vec<String>> = pair.contexts().collect();
    let mut scores = vec![Vec::with_capacity(n_samples); contexts.len()];
    for k in 0..n_samples {
        let cfg = GenerationConfig {
            seed: config.seed.wrapping_add(k as u64),
            ..config.clone()
        };
        for (i, c) in contexts.iter().enumerate() {
            scores[i].push(scorer.score(&model.complete(c, &cfg)?));
        }
    }
    let mut diff = 0.0;
    for k in 0..n_samples {
        let col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
        diff += max_spread(&col);
    }
    let frac = |pol: Polarity| -> Vec<f64> {
        scores
            .iter()
            .map(|s| {
                s.iter().filter(|&&x| Polarity::of(x) == pol).count() as f64 / n_samples as f64
            })
            .collect()
    };
    Ok(GlobalBias {
        score_diff: diff / n_samples as f64,
        positive_diff: max_spread(&frac(Polarity::Positive)),
        neutral_diff: max_spread(&frac(Polarity::Neutral)),
        negative_diff: max_spread(&frac(Polarity::Negative)),
    })
}

fn max_spread(xs: &[f64]) -> f64 {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    /// `p(w* | c)` under the evaluated model.
    pub p_gold: f64,
    /// `p(w* | c)` under the original model.
    pub p_gold_original: f64,
    /// `KL(p_debiased ‖ p_original)`.
    pub kl_to_original: f64,
    pub hellinger_to_original: f64,
}

/// Gold-token probability and drift from the original model on one context.
pub fn performance<S: AsRef<str>>(
    model: Decoder<'_>,
    original: &LanguageModel,
    context: &[S],
    gold: &str,
) -> Result<Performance> {
    let gold_id = original
        .table()
        .vocab()
        .id(gold)
        .ok_or_else(|| Error::OovGoldToken(gold.to_string()))?;
    let ids = original.encode_tokens(context)?;
    let p = model.distribution_ids(&ids)?;
    let p0 = original.next_token_distribution_ids(&ids)?;
    Ok(Performance {
        p_gold: p[gold_id],
        p_gold_original: p0[gold_id],
        kl_to_original: kl_divergence(&p, &p0)?,
        hellinger_to_original: hellinger_sq(&p, &p0)?,
    })
}

/// Local and global bias for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub c1: String,
    pub c2: String,
    pub local: LocalBias,
    pub global: Option<GlobalBias>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub context: String,
    pub gold: String,
    pub performance: Performance,
}

/// Full evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub pairs: Vec<PairReport>,
    pub performance: Vec<PerformanceReport>,
}

/// Mean and quantiles of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                count: 0,
                mean: f64::NAN,
                p10: f64::NAN,
                p50: f64::NAN,
                p90: f64::NAN,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p10: q(0.1),
            p50: q(0.5),
            p90: q(0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub kl_forward: Stats,
    pub kl_backward: Stats,
    pub hellinger_sq: Stats,
    pub global_diff: Stats,
    pub p_gold: Stats,
    pub kl_drift: Stats,
    pub hellinger_drift: Stats,
}

impl BiasReport {
    pub fn summary(&self) -> ReportSummary {
        let col = |f: &dyn Fn(&PairReport) -> Option<f64>| -> Vec<f64> {
            self.pairs.iter().filter_map(f).collect()
        };
        let perf = |f: &dyn Fn(&Performance) -> f64| -> Vec<f64> {
            self.performance.iter().map(|r| f(&r.performance)).collect()
        };
        ReportSummary {
            kl_forward: Stats::of(&col(&|r| Some(r.local.kl_forward))),
            kl_backward: Stats::of(&col(&|r| Some(r.local.kl_backward))),
            hellinger_sq: Stats::of(&col(&|r| Some(r.local.hellinger_sq))),
            global_diff: Stats::of(&col(&|r| r.global.as_ref().map(|g| g.score_diff))),
            p_gold: Stats::of(&perf(&|p| p.p_gold)),
            kl_drift: Stats::of(&perf(&|p| p.kl_to_original)),
            hellinger_drift: Stats::of(&perf(&|p| p.hellinger_to_original)),
        }
    }

    /// One row per context pair.
    pub fn write_pairs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "c1",
            "c2",
            "kl_forward",
            "kl_backward",
            "hellinger_sq",
            "global_diff",
            "positive_diff",
            "neutral_diff",
            "negative_diff",
        ])?;
        for r in &self.pairs {
            let g = |f: fn(&GlobalBias) -> f64| {
                r.global
                    .as_ref()
                    .map(|x| f(x).to_string())
                    .unwrap_or_default()
            };
            w.write_record([
                r.c1.clone(),
                r.c2.clone(),
                r.local.kl_forward.to_string(),
                r.local.kl_backward.to_string(),
                r.local.hellinger_sq.to_string(),
                g(|x| x.score_diff),
                g(|x| x.positive_diff),
                g(|x| x.neutral_diff),
                g(|x| x.negative_diff),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per performance context.
    pub fn write_performance_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "context",
            "gold",
            "p_gold",
            "p_gold_original",
            "kl_to_original",
            "hellinger_to_original",
        ])?;
        for r in &self.performance {
            let p = &r.performance;
            w.write_record([
                r.context.clone(),
                r.gold.clone(),
                p.p_gold.to_string(),
                p.p_gold_original.to_string(),
                p.kl_to_original.to_string(),
                p.hellinger_to_original.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
