//! A small, fully deterministic gendered toy world: embeddings, a biased
//! corpus and the word lists that go with them.
//!
//! Axis 0 carries the primary gender direction shared by pronouns and other
//! definitional words. Axis 1 carries a secondary gender direction used by
//! kinship and title words (`queen`, `aunt`, ...) that mostly appear in longer
//! corpus sentences. Axis 2 is sentiment. The remaining axes hold random
//! semantic content, with each occupation sharing a cluster with the words
//! that predict it (`surgery` → `doctor`).
//!
//! Occupations lean toward one gender and the corpus pairs gendered subjects
//! with stereotyped occupations most of the time.

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::embeddings::{parse_embeddings_str, EmbeddingTable};
use crate::error::Result;

/// Female/male definitional pairs used by the toy world.
pub const DEFINITIONAL_PAIRS: &[(&str, &str)] = &[
    ("woman", "man"),
    ("girl", "boy"),
    ("she", "he"),
    ("mother", "father"),
    ("daughter", "son"),
    ("gal", "guy"),
    ("female", "male"),
    ("her", "his"),
    ("herself", "himself"),
    ("mary", "john"),
];

/// Pairs along the secondary direction. Absent from simple templates.
pub const SECONDARY_PAIRS: &[(&str, &str)] = &[
    ("queen", "king"),
    ("bride", "groom"),
    ("actress", "actor"),
    ("aunt", "uncle"),
    ("niece", "nephew"),
    ("wife", "husband"),
    ("sister", "brother"),
    ("lady", "gentleman"),
    ("grandmother", "grandfather"),
    ("mom", "dad"),
];

/// `(occupation, associated context word, lean)`; lean > 0 is male-stereotyped.
pub const OCCUPATIONS: &[(&str, &str, f64)] = &[
    ("nurse", "patients", -1.0),
    ("secretary", "office", -1.0),
    ("receptionist", "desk", -1.0),
    ("homemaker", "house", -1.0),
    ("dancer", "stage", -1.0),
    ("librarian", "books", -1.0),
    ("doctor", "surgery", 1.0),
    ("engineer", "bridge", 1.0),
    ("carpenter", "wood", 1.0),
    ("mechanic", "cars", 1.0),
    ("pilot", "plane", 1.0),
    ("programmer", "code", 1.0),
    ("teacher", "classroom", 0.0),
    ("writer", "novels", 0.0),
    ("chef", "kitchen", 0.0),
    ("lawyer", "court", 0.0),
];

pub const POSITIVE_WORDS: &[&str] = &[
    "good",
    "kind",
    "smart",
    "brilliant",
    "friendly",
    "honest",
    "loved",
    "praised",
];
pub const NEGATIVE_WORDS: &[&str] = &[
    "bad",
    "rude",
    "lazy",
    "cruel",
    "dishonest",
    "weak",
    "hated",
    "criticized",
];

const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "an", "was", "is", "as", "of", "for", "to", "and", "in", "at", "by", "with", "who",
    "that", "this", "very", "from", "on", "my", "we", "our", "were",
];

const OTHER_WORDS: &[&str] = &[
    "him",
    "hers",
    "known",
    "described",
    "regarded",
    "thought",
    "worked",
    "had",
    "job",
    "earned",
    "money",
    "started",
    "working",
    "well-known",
    "part-time",
    "people",
    "person",
    "day",
    "work",
    "hard",
    "home",
    "city",
    "family",
    "friends",
    "everyone",
    "respected",
    "handled",
    "thanked",
    "met",
    "went",
    "visited",
    "spent",
    "yesterday",
    "said",
    "being",
    "seen",
    "then",
];

/// Templates with the `XYZ` placeholder for definitional words.
pub const SIMPLE_TEMPLATES: &[&str] = &[
    "the XYZ was known for",
    "the XYZ was described as",
    "the XYZ was regarded as",
    "the XYZ was thought of as",
    "the XYZ was well-known for",
    "the XYZ worked as",
    "the XYZ had a job as",
    "the XYZ had a part-time job as",
    "the XYZ earned money by",
    "the XYZ started working as",
];

/// Subjects usable at the start of a corpus sentence, per class (female, male).
fn subjects(class: usize) -> Vec<String> {
    let pick = |f: &str, m: &str| {
        if class == 0 {
            f.to_string()
        } else {
            m.to_string()
        }
    };
    vec![
        pick("she", "he"),
        pick("she", "he"),
        pick("the woman", "the man"),
        pick("my mother", "my father"),
        pick("her daughter", "his son"),
        pick("the girl", "the boy"),
        pick("mary", "john"),
    ]
}

fn secondary(class: usize) -> Vec<&'static str> {
    SECONDARY_PAIRS
        .iter()
        .map(|p| if class == 0 { p.0 } else { p.1 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub dim: usize,
    pub sentences: usize,
    /// Probability that an occupation sentence uses a stereotyped occupation.
    pub stereotype_rate: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 40,
            sentences: 2000,
            stereotype_rate: 0.9,
            seed: 7,
        }
    }
}

/// The generated toy world.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub table: EmbeddingTable,
    /// One sentence per line, lowercase, space-separated.
    pub corpus: Vec<String>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Builds the toy world from `config`. Identical configs give identical worlds.
pub fn toy_gender_world(config: &ToyConfig) -> Result<ToyWorld> {
    let d = config.dim.max(8);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, 0.35).expect("valid sd");
    let random_sem = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
        let mut v = vec![0.0; d];
        for x in v.iter_mut().skip(3) {
            *x = scale * noise.sample(rng);
        }
        v
    };

    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    let push = |rows: &mut Vec<(String, Vec<f64>)>, tok: &str, v: Vec<f64>| {
        rows.push((tok.to_string(), v.into_iter().map(round4).collect()));
    };

    for &w in FUNCTION_WORDS {
        let mut v = random_sem(&mut rng, 0.6);
        // a mild male lean on some very frequent words
        if matches!(w, "was" | "of" | "the") {
            v[0] = 0.3;
        }
        push(&mut rows, w, v);
    }
    for &(f, m) in DEFINITIONAL_PAIRS {
        let base = random_sem(&mut rng, 1.0);
        for (tok, sign) in [(f, -1.0), (m, 1.0)] {
            let mut v = base.clone();
            v[0] = sign * 1.0;
            v[1] = sign * 0.05;
            for x in v.iter_mut().skip(3) {
                *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            push(&mut rows, tok, v);
        }
    }
    for &(f, m) in SECONDARY_PAIRS {
        let base = random_sem(&mut rng, 1.0);
        for (tok, sign) in [(f, -1.0), (m, 1.0)] {
            let mut v = base.clone();
            v[0] = sign * 0.1;
            v[1] = sign * 1.0;
            for x in v.iter_mut().skip(3) {
                *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            push(&mut rows, tok, v);
        }
    }
    for &(occ, assoc, lean) in OCCUPATIONS {
        let cluster = random_sem(&mut rng, 1.2);
        let mut v = cluster.clone();
        v[0] = 0.6 * lean;
        v[1] = 0.3 * lean;
        push(&mut rows, occ, v);
        let mut a = cluster.iter().map(|x| 0.8 * x).collect::<Vec<_>>();
        for x in a.iter_mut().skip(3) {
            *x += 0.15 * rng.sample::<f64, _>(StandardNormal);
        }
        push(&mut rows, assoc, a);
    }
    for (words, sign) in [(POSITIVE_WORDS, 1.0), (NEGATIVE_WORDS, -1.0)] {
        for &w in words {
            let mut v = random_sem(&mut rng, 0.5);
            v[2] = sign;
            push(&mut rows, w, v);
        }
    }
    for &w in OTHER_WORDS {
        let mut v = random_sem(&mut rng, 0.8);
        match w {
            "him" => {
                v[0] = 1.0;
                v[1] = 0.05;
            }
            "hers" => {
                v[0] = -1.0;
                v[1] = -0.05;
            }
            _ => {}
        }
        push(&mut rows, w, v);
    }
    let table = EmbeddingTable::from_rows(rows)?;
    let corpus = toy_corpus(config, &mut rng);
    Ok(ToyWorld { table, corpus })
}

fn occupation_for(class: usize, rate: f64, rng: &mut ChaCha8Rng) -> &'static str {
    let want = if class == 0 { -1.0 } else { 1.0 };
    let stereotyped: Vec<&str> = OCCUPATIONS
        .iter()
        .filter(|o| o.2 == want)
        .map(|o| o.0)
        .collect();
    let others: Vec<&str> = OCCUPATIONS
        .iter()
        .filter(|o| o.2 != want)
        .map(|o| o.0)
        .collect();
    if rng.random::<f64>() < rate {
        stereotyped.choose(rng).expect("nonempty")
    } else {
        others.choose(rng).expect("nonempty")
    }
}

fn toy_corpus(config: &ToyConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut lines = Vec::with_capacity(config.sentences);
    for _ in 0..config.sentences {
        let class = rng.random_range(0..2usize);
        let kind = rng.random::<f64>();
        let subj = subjects(class).choose(rng).expect("nonempty").clone();
        let sec = *secondary(class).choose(rng).expect("nonempty");
        let line = if kind < 0.25 {
            let occ = occupation_for(class, config.stereotype_rate, rng);
            let tpl = [
                "{S} worked as a {O}",
                "{S} had a job as a {O}",
                "{S} started working as a {O}",
                "{S} earned money as a {O}",
            ]
            .choose(rng)
            .expect("nonempty");
            tpl.replace("{S}", &subj).replace("{O}", occ)
        } else if kind < 0.4 {
            let &(occ, assoc, _) = OCCUPATIONS.choose(rng).expect("nonempty");
            let tpl = [
                "the {A} was handled by the {O}",
                "people at the {A} thanked the {O}",
                "we went to the {A} and met the {O}",
            ]
            .choose(rng)
            .expect("nonempty");
            tpl.replace("{A}", assoc).replace("{O}", occ)
        } else if kind < 0.55 {
            let positive_rate = if class == 0 { 0.7 } else { 0.3 };
            let adj = if rng.random::<f64>() < positive_rate {
                POSITIVE_WORDS.choose(rng)
            } else {
                NEGATIVE_WORDS.choose(rng)
            }
            .expect("nonempty");
            let tpl = [
                "{S} was very {J}",
                "{S} was described as {J}",
                "everyone said that {S} was {J}",
            ]
            .choose(rng)
            .expect("nonempty");
            tpl.replace("{S}", &subj).replace("{J}", adj)
        } else {
            let occ = occupation_for(class, config.stereotype_rate, rng);
            let &(_, place, _) = OCCUPATIONS.choose(rng).expect("nonempty");
            let tpl = [
                "my {X} visited the {P} with friends",
                "the {X} spent the day at the {P}",
                "our {X} worked hard as a {O}",
                "everyone respected the {X} who was a {O}",
                "my {X} went to the {P} on a hard day",
            ]
            .choose(rng)
            .expect("nonempty");
            tpl.replace("{X}", sec)
                .replace("{P}", place)
                .replace("{O}", occ)
        };
        lines.push(line);
    }
    lines
}

/// Embeddings shipped with the crate, generated by `toy_gender_world(&ToyConfig::default())`.
pub const SHIPPED_EMBEDDINGS: &str = include_str!("../data/toy/embeddings.txt");
/// Corpus shipped with the crate, generated alongside [`SHIPPED_EMBEDDINGS`].
pub const SHIPPED_CORPUS: &str = include_str!("../data/toy/corpus.txt");

/// The shipped toy world.
pub fn shipped_world() -> Result<ToyWorld> {
    Ok(ToyWorld {
        table: parse_embeddings_str(SHIPPED_EMBEDDINGS)?,
        corpus: SHIPPED_CORPUS
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
    })
}

/// Female/male word lists covering both gender directions, for labeling corpus sentences.
pub fn gender_class_words() -> Vec<Vec<String>> {
    (0..2)
        .map(|c| {
            DEFINITIONAL_PAIRS
                .iter()
                .chain(SECONDARY_PAIRS)
                .map(|p| if c == 0 { p.0 } else { p.1 })
                .chain(if c == 0 { ["hers"] } else { ["him"] })
                .map(str::to_string)
                .collect()
        })
        .collect()
}

/// Female/male definitional words only, the fill-ins for simple templates.
pub fn definitional_class_words() -> Vec<Vec<String>> {
    (0..2)
        .map(|c| {
            DEFINITIONAL_PAIRS
                .iter()
                .map(|p| if c == 0 { p.0 } else { p.1 }.to_string())
                .collect()
        })
        .collect()
}

/// Isotropic Gaussian blobs with class means on scaled coordinate axes.
pub fn gaussian_blobs(
    per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * classes;
    let mut x = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for i in 0..per_class {
            let r = c * per_class + i;
            for j in 0..dim {
                x[(r, j)] = rng.sample::<f64, _>(StandardNormal);
            }
            x[(r, c % dim)] += separation;
            labels.push(c);
        }
    }
    (x, labels)
}
