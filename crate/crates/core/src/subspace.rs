//! Bias subspace estimation from definitional word sets, and discovery of
//! bias-sensitive tokens by projection onto that subspace.
//!
//! Given defining tuples `D_1..D_m` (one word per class in each tuple), every
//! word is centered on its own tuple mean and the top-`k` right singular
//! vectors of the stacked centered vectors form the basis `B_k`. No global
//! recentering is applied on top of the per-tuple centering.
//!
//! A token's bias score is the signed sum `Σ_b bᵀw` over the basis. Basis
//! vectors are oriented so the first class's centered mean projects
//! non-negatively on each of them, which makes that sum reproducible.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine, dot, norm, EmbeddingTable};
use crate::error::{Error, Result};

/// Relative cutoff below which a singular value counts as zero.
const RANK_TOL: f64 = 1e-10;

/// Defining word tuples, one word per class in every tuple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionalSets {
    pub class_names: Vec<String>,
    pub sets: Vec<Vec<String>>,
}

impl DefinitionalSets {
    pub fn new(class_names: Vec<String>, sets: Vec<Vec<String>>) -> Result<Self> {
        let s = Self { class_names, sets };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_names.len();
        if n < 2 {
            return Err(Error::InvalidConfig(
                "definitional sets need at least two classes".into(),
            ));
        }
        if self.sets.is_empty() {
            return Err(Error::InvalidConfig(
                "definitional sets need at least one tuple".into(),
            ));
        }
        if let Some(bad) = self.sets.iter().find(|t| t.len() != n) {
            return Err(Error::InvalidConfig(format!(
                "tuple {bad:?} has {} entries, expected {n}",
                bad.len()
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Keeps the first `m` tuples.
    pub fn truncated(&self, m: usize) -> Self {
        Self {
            class_names: self.class_names.clone(),
            sets: self.sets.iter().take(m.max(1)).cloned().collect(),
        }
    }

    /// Every word used by class `class`.
    pub fn class_words(&self, class: usize) -> impl Iterator<Item = &str> {
        self.sets.iter().map(move |t| t[class].as_str())
    }

    /// Binary gender pairs (female, male).
    pub fn gender() -> Self {
        Self::from_json(include_str!("../data/gender_definitional.json")).expect("bundled data")
    }

    /// Religion triplets (jewish, christian, muslim).
    pub fn religion() -> Self {
        Self::from_json(include_str!("../data/religion_definitional.json")).expect("bundled data")
    }
}

/// Orthonormal basis `B_k` of the bias subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSubspace {
    pub class_names: Vec<String>,
    /// `k` orthonormal vectors of length `dim`.
    pub basis: Vec<Vec<f64>>,
    /// Fraction of total squared singular mass captured by each basis vector.
    pub explained_variance: Vec<f64>,
    /// Unit vector per class: the class's centered mean, projected into the subspace.
    pub class_directions: Vec<Vec<f64>>,
}

impl BiasSubspace {
    pub fn k(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.basis.first().map_or(0, Vec::len)
    }

    /// Signed projection score `Σ_b bᵀw`.
    pub fn projection_score(&self, w: &[f64]) -> Result<f64> {
        self.check_dim(w)?;
        Ok(self.basis.iter().map(|b| dot(b, w)).sum())
    }

    /// Coordinates of `w` in the basis.
    pub fn coordinates(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        Ok(self.basis.iter().map(|b| dot(b, w)).collect())
    }

    /// Component of `w` inside the subspace, `Σ_b (bᵀw) b`.
    pub fn project(&self, w: &[f64]) -> Result<Vec<f64>> {
        let coords = self.coordinates(w)?;
        let mut out = vec![0.0; w.len()];
        for (b, c) in self.basis.iter().zip(coords) {
            for (o, bi) in out.iter_mut().zip(b) {
                *o += c * bi;
            }
        }
        Ok(out)
    }

    /// `w` with its subspace component removed.
    pub fn reject(&self, w: &[f64]) -> Result<Vec<f64>> {
        let inside = self.project(w)?;
        Ok(w.iter().zip(inside).map(|(a, b)| a - b).collect())
    }

    /// Basis as a `dim × k` matrix.
    pub fn basis_matrix(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self
            .basis
            .iter()
            .map(|b| DVector::from_column_slice(b))
            .collect();
        DMatrix::from_columns(&cols)
    }

    fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: w.len(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Centered difference vectors `w − μ_i`, grouped by class.
///
/// Returns `rows[class][tuple]`.
pub fn centered_rows(
    sets: &DefinitionalSets,
    table: &EmbeddingTable,
) -> Result<Vec<Vec<Vec<f64>>>> {
    sets.validate()?;
    let mut missing: Vec<String> = sets
        .sets
        .iter()
        .flatten()
        .filter(|w| !table.vocab().contains(w))
        .cloned()
        .collect();
    if !missing.is_empty() {
        missing.dedup();
        return Err(Error::OutOfVocabulary(missing));
    }
    let n = sets.num_classes();
    let dim = table.dim();
    let mut rows = vec![Vec::with_capacity(sets.sets.len()); n];
    for tuple in &sets.sets {
        let vecs: Vec<&[f64]> = tuple
            .iter()
            .map(|w| table.embed(w))
            .collect::<Result<_>>()?;
        let mut mean = vec![0.0; dim];
        for v in &vecs {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x / n as f64;
            }
        }
        for (class, v) in vecs.iter().enumerate() {
            rows[class].push(v.iter().zip(&mean).map(|(x, m)| x - m).collect());
        }
    }
    Ok(rows)
}

/// Estimates `B_k` from definitional sets.
pub fn estimate_subspace(
    sets: &DefinitionalSets,
    table: &EmbeddingTable,
    k: usize,
) -> Result<BiasSubspace> {
    let rows = centered_rows(sets, table)?;
    subspace_from_rows(sets.class_names.clone(), &rows, k)
}

/// PCA (uncentered SVD) of pre-centered rows grouped by class.
pub fn subspace_from_rows(
    class_names: Vec<String>,
    rows: &[Vec<Vec<f64>>],
    k: usize,
) -> Result<BiasSubspace> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let flat: Vec<&Vec<f64>> = rows.iter().flatten().collect();
    let dim = flat.first().map(|r| r.len()).ok_or(Error::EmptyResult)?;
    let m = DMatrix::from_fn(flat.len(), dim, |i, j| flat[i][j]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let top = sv.first().copied().unwrap_or(0.0);
    let available = sv
        .iter()
        .filter(|&&s| s > RANK_TOL * top.max(1e-300) && s > 0.0)
        .count();
    if available < k {
        return Err(Error::RankDeficient {
            requested: k,
            available,
        });
    }
    let total: f64 = sv.iter().map(|s| s * s).sum();

    // Orientation: the first class's mean centered vector projects >= 0.
    let n = rows.len();
    let class_means: Vec<Vec<f64>> = rows
        .iter()
        .map(|cls| {
            let mut mean = vec![0.0; dim];
            for r in cls {
                for (m, x) in mean.iter_mut().zip(r) {
                    *m += x / cls.len() as f64;
                }
            }
            mean
        })
        .collect();

    let mut basis = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for (&idx, &s) in order.iter().zip(&sv).take(k) {
        let mut b: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let proj = dot(&b, &class_means[0]);
        let flip = if proj.abs() > 1e-12 {
            proj < 0.0
        } else {
            // Fall back to the largest-magnitude entry being positive.
            let (_, big) = b.iter().enumerate().fold((0, 0.0f64), |acc, (i, &x)| {
                if x.abs() > acc.1.abs() {
                    (i, x)
                } else {
                    acc
                }
            });
            big < 0.0
        };
        if flip {
            b.iter_mut().for_each(|x| *x = -*x);
        }
        basis.push(b);
        explained.push(s * s / total);
    }

    let mut sub = BiasSubspace {
        class_names,
        basis,
        explained_variance: explained,
        class_directions: Vec::with_capacity(n),
    };
    for mean in &class_means {
        let p = sub.project(mean)?;
        let len = norm(&p);
        if len == 0.0 {
            return Err(Error::ZeroNorm);
        }
        sub.class_directions
            .push(p.iter().map(|x| x / len).collect());
    }
    Ok(sub)
}

/// Largest principal angle (radians) between the spans of two bases.
///
/// Uses the sine form `σ_max((I − A Aᵀ) B)`, which stays accurate for tiny
/// angles where `acos` of the cosines does not. Assumes equal `k`.
pub fn max_principal_angle(a: &BiasSubspace, b: &BiasSubspace) -> f64 {
    let (ma, mb) = (a.basis_matrix(), b.basis_matrix());
    let residual = &mb - &ma * (ma.transpose() * &mb);
    let largest = residual
        .singular_values()
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    largest.clamp(0.0, 1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub token: String,
    pub raw: f64,
}

/// Per-class ranked bias-sensitive tokens `S`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BiasSensitiveSet {
    pub class_names: Vec<String>,
    /// Sorted by descending `|raw|` within each class.
    pub per_class: Vec<Vec<ScoredToken>>,
    /// `max |raw|` over all retained tokens.
    pub normalizer: f64,
    lookup: HashMap<String, (usize, f64)>,
}

impl BiasSensitiveSet {
    /// A set with no tokens; every `q` is 0.
    pub fn empty(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        Self {
            class_names,
            per_class: vec![Vec::new(); n],
            normalizer: 1.0,
            lookup: HashMap::new(),
        }
    }

    pub fn from_ranked(
        class_names: Vec<String>,
        mut per_class: Vec<Vec<ScoredToken>>,
    ) -> Result<Self> {
        if per_class.len() != class_names.len() {
            return Err(Error::InvalidConfig(
                "one token list per class required".into(),
            ));
        }
        let mut lookup = HashMap::new();
        let mut normalizer = 0.0f64;
        for (c, list) in per_class.iter_mut().enumerate() {
            list.sort_by(|a, b| b.raw.abs().total_cmp(&a.raw.abs()));
            for t in list.iter() {
                if lookup.insert(t.token.clone(), (c, t.raw)).is_some() {
                    return Err(Error::Format(format!("token {:?} listed twice", t.token)));
                }
                normalizer = normalizer.max(t.raw.abs());
            }
        }
        if lookup.is_empty() {
            return Ok(Self::empty(class_names));
        }
        if normalizer <= 0.0 {
            return Err(Error::EmptyAfterFiltering);
        }
        Ok(Self {
            class_names,
            per_class,
            normalizer,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.lookup.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lookup.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.lookup.contains_key(token)
    }

    pub fn class_of(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).map(|&(c, _)| c)
    }

    pub fn class_tokens(&self, class: usize) -> impl Iterator<Item = &str> {
        self.per_class[class].iter().map(|t| t.token.as_str())
    }

    /// `q(w) = |raw(w)| / max |raw|` for tokens in the set, 0 otherwise.
    pub fn q_normalized(&self, token: &str) -> f64 {
        match self.lookup.get(token) {
            Some(&(_, raw)) => (raw.abs() / self.normalizer).clamp(0.0, 1.0),
            None => 0.0,
        }
    }

    /// Writes `token,class,raw_score,normalized_score` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["token", "class", "raw_score", "normalized_score"])?;
        for (c, list) in self.per_class.iter().enumerate() {
            for t in list {
                w.write_record([
                    t.token.clone(),
                    self.class_names[c].clone(),
                    t.raw.to_string(),
                    self.q_normalized(&t.token).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(input: R, class_names: Vec<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut per_class = vec![Vec::new(); class_names.len()];
        for rec in r.records() {
            let rec = rec?;
            let (Some(token), Some(class), Some(raw)) = (rec.get(0), rec.get(1), rec.get(2)) else {
                return Err(Error::Format(
                    "expected token,class,raw_score columns".into(),
                ));
            };
            let c = class_names
                .iter()
                .position(|n| n == class)
                .ok_or_else(|| Error::Format(format!("unknown class {class:?}")))?;
            let raw: f64 = raw
                .parse()
                .map_err(|_| Error::Format(format!("bad score {raw:?}")))?;
            per_class[c].push(ScoredToken {
                token: token.to_string(),
                raw,
            });
        }
        Self::from_ranked(class_names, per_class)
    }
}

/// Scores every non-stopword token, assigns each to the class whose direction
/// has the largest positive cosine with the token's in-subspace component, and
/// keeps the `top_n` largest-magnitude tokens per class.
pub fn rank_bias_sensitive(
    subspace: &BiasSubspace,
    table: &EmbeddingTable,
    top_n: usize,
    stopwords: &HashSet<String>,
) -> Result<BiasSensitiveSet> {
    if top_n == 0 {
        return Err(Error::InvalidConfig("top_n must be at least 1".into()));
    }
    if table.dim() != subspace.dim() {
        return Err(Error::DimMismatch {
            expected: subspace.dim(),
            found: table.dim(),
        });
    }
    let n = subspace.class_names.len();
    let mut per_class: Vec<Vec<ScoredToken>> = vec![Vec::new(); n];
    let mut considered = 0usize;
    for (id, token) in table.vocab().tokens().iter().enumerate() {
        if stopwords.contains(token) {
            continue;
        }
        considered += 1;
        let w = table.row(id);
        let raw = subspace.projection_score(w)?;
        let inside = subspace.project(w)?;
        if norm(&inside) == 0.0 {
            continue;
        }
        let best = subspace
            .class_directions
            .iter()
            .enumerate()
            .filter_map(|(c, d)| cosine(&inside, d).ok().map(|cos| (c, cos)))
            .filter(|&(_, cos)| cos > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((c, _)) = best {
            per_class[c].push(ScoredToken {
                token: token.clone(),
                raw,
            });
        }
    }
    if considered == 0 {
        return Err(Error::EmptyAfterFiltering);
    }
    for list in &mut per_class {
        // Stable sort keeps vocabulary order among equal magnitudes.
        list.sort_by(|a, b| b.raw.abs().total_cmp(&a.raw.abs()));
        list.truncate(top_n);
    }
    let set = BiasSensitiveSet::from_ranked(subspace.class_names.clone(), per_class)?;
    if set.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    Ok(set)
}

/// Parses a stopword list: one word per line, `#` starts a comment.
pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The bundled English stopword list.
pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(include_str!("../data/stopwords.txt"))
}
