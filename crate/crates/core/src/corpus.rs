//! Preference data model, JSON-lines ingestion and deterministic splits.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"user_id":"u0","pair_id":"p0","emb_chosen":[..],"emb_rejected":[..],"split":"train"}
//! ```
//!
//! Each embedding represents a whole (prompt, response) pair; the library
//! never sees raw text.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seeding;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Seen,
    Unseen,
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Population::Seen => f.write_str("seen"),
            Population::Unseen => f.write_str("unseen"),
        }
    }
}

/// One pairwise comparison owned by a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub user_id: String,
    pub pair_id: String,
    pub emb_chosen: Vec<f64>,
    pub emb_rejected: Vec<f64>,
    pub split: SplitTag,
}

impl PreferencePair {
    pub fn dim(&self) -> usize {
        self.emb_chosen.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserDataset {
    pub user_id: String,
    pub pairs: Vec<PreferencePair>,
    pub population: Option<Population>,
}

impl UserDataset {
    pub fn train_pairs(&self) -> impl Iterator<Item = &PreferencePair> {
        self.pairs.iter().filter(|p| p.split == SplitTag::Train)
    }

    pub fn test_pairs(&self) -> impl Iterator<Item = &PreferencePair> {
        self.pairs.iter().filter(|p| p.split == SplitTag::Test)
    }

    pub fn n_train(&self) -> usize {
        self.train_pairs().count()
    }
}

/// Per-user support/query split of the training pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub user_id: String,
    pub support: Vec<PreferencePair>,
    pub query: Vec<PreferencePair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub users: Vec<UserDataset>,
    pub dim: usize,
}

impl Corpus {
    /// Groups pairs by user in first-appearance order, keeping file order
    /// within each user.
    pub fn from_pairs(pairs: Vec<PreferencePair>) -> Result<Self> {
        let first = pairs.first().ok_or(Error::EmptyCorpus)?;
        let dim = first.dim();
        if dim == 0 {
            return Err(Error::InvalidParams("embedding dimension must be > 0".into()));
        }
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut users: Vec<UserDataset> = Vec::new();
        for pair in pairs {
            check_pair(&pair, dim)?;
            let slot = *index.entry(pair.user_id.clone()).or_insert_with(|| {
                users.push(UserDataset {
                    user_id: pair.user_id.clone(),
                    pairs: Vec::new(),
                    population: None,
                });
                users.len() - 1
            });
            users[slot].pairs.push(pair);
        }
        Ok(Corpus { users, dim })
    }

    pub fn n_pairs(&self) -> usize {
        self.users.iter().map(|u| u.pairs.len()).sum()
    }

    pub fn user(&self, user_id: &str) -> Option<&UserDataset> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn users_in(&self, population: Population) -> impl Iterator<Item = &UserDataset> {
        self.users
            .iter()
            .filter(move |u| u.population == Some(population))
    }

    /// Corpus restricted to one population; fails if tags are missing.
    pub fn subset(&self, population: Population) -> Result<Corpus> {
        if self.users.iter().any(|u| u.population.is_none()) {
            return Err(Error::InvalidConfig(
                "corpus has no population tags; run split_population first".into(),
            ));
        }
        Ok(Corpus {
            users: self.users_in(population).cloned().collect(),
            dim: self.dim,
        })
    }

    /// Drops users with fewer than `min_train` training pairs.
    pub fn filter_min_train_pairs(mut self, min_train: usize) -> Corpus {
        self.users.retain(|u| u.n_train() >= min_train);
        self
    }

    pub fn all_pairs(&self) -> impl Iterator<Item = &PreferencePair> {
        self.users.iter().flat_map(|u| u.pairs.iter())
    }
}

fn check_pair(pair: &PreferencePair, dim: usize) -> Result<()> {
    for len in [pair.emb_chosen.len(), pair.emb_rejected.len()] {
        if len != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: len,
            });
        }
    }
    if pair
        .emb_chosen
        .iter()
        .chain(&pair.emb_rejected)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite(format!("pair {}", pair.pair_id)));
    }
    Ok(())
}

/// Parses a corpus from any reader; line numbers in errors are 1-based.
pub fn read_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut pairs = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let expected = *dim.get_or_insert(pair.emb_chosen.len());
        for found in [pair.emb_chosen.len(), pair.emb_rejected.len()] {
            if found != expected || found == 0 {
                return Err(Error::DimensionMismatchAtLine {
                    line: line_no,
                    expected,
                    found,
                });
            }
        }
        if pair
            .emb_chosen
            .iter()
            .chain(&pair.emb_rejected)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFiniteAtLine { line: line_no });
        }
        pairs.push(pair);
    }
    Corpus::from_pairs(pairs)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file))
}

pub fn write_corpus(corpus: &Corpus, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for pair in corpus.all_pairs() {
        serde_json::to_writer(&mut w, pair)?;
        w.write_all(b"\n").map_err(|e| Error::io("<corpus writer>", e))?;
    }
    w.flush().map_err(|e| Error::io("<corpus writer>", e))
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(corpus, file)
}

/// Tags users seen/unseen with a seeded permutation. The first `ceil(U/2)`
/// users of the permutation are seen. Users keep their corpus order.
pub fn split_population(mut corpus: Corpus, seed: u64) -> Result<Corpus> {
    let n = corpus.users.len();
    if n < 2 {
        return Err(Error::TooFew {
            what: "users",
            needed: 2,
            found: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng_from(seeding::derive_seed(
        seed,
        "",
        "population",
    )));
    let n_seen = n.div_ceil(2);
    for (rank, &idx) in order.iter().enumerate() {
        corpus.users[idx].population = Some(if rank < n_seen {
            Population::Seen
        } else {
            Population::Unseen
        });
    }
    Ok(corpus)
}

/// The user's training pairs in a per-user seeded order. Support sets and
/// few-shot subsets are prefixes of this order, so they nest.
pub fn shuffled_train_pairs(user: &UserDataset, seed: u64) -> Vec<PreferencePair> {
    let mut pairs: Vec<PreferencePair> = user.train_pairs().cloned().collect();
    pairs.shuffle(&mut seeding::user_rng(seed, &user.user_id, "train-order"));
    pairs
}

/// Support size for `m` training pairs: `max(1, floor(fraction * m))`.
pub fn support_size(m: usize, support_fraction: f64) -> usize {
    ((support_fraction * m as f64).floor() as usize).max(1)
}

pub fn split_support_query(
    user: &UserDataset,
    support_fraction: f64,
    seed: u64,
) -> Result<TaskSplit> {
    if !(support_fraction > 0.0 && support_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "support_fraction must lie in (0, 1), got {support_fraction}"
        )));
    }
    let mut pairs = shuffled_train_pairs(user, seed);
    let m = pairs.len();
    if m < 2 {
        return Err(Error::TooFew {
            what: "train pairs",
            needed: 2,
            found: m,
        });
    }
    let n_support = support_size(m, support_fraction).min(m - 1);
    let query = pairs.split_off(n_support);
    Ok(TaskSplit {
        user_id: user.user_id.clone(),
        support: pairs,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn pair(user: &str, id: usize, d: usize, split: SplitTag) -> PreferencePair {
        PreferencePair {
            user_id: user.into(),
            pair_id: format!("p{id}"),
            emb_chosen: (0..d).map(|j| (id * d + j) as f64 * 0.25).collect(),
            emb_rejected: (0..d).map(|j| -((id + j) as f64)).collect(),
            split,
        }
    }

    fn user(id: &str, n_train: usize) -> UserDataset {
        UserDataset {
            user_id: id.into(),
            pairs: (0..n_train).map(|i| pair(id, i, 3, SplitTag::Train)).collect(),
            population: None,
        }
    }

    fn corpus_text(records: &[PreferencePair]) -> String {
        records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    }

    #[test]
    fn loads_two_users() {
        let mut recs = Vec::new();
        for u in ["a", "b"] {
            for i in 0..3 {
                recs.push(pair(u, i, 4, SplitTag::Train));
            }
        }
        // interleave to check grouping keeps per-user file order
        recs.swap(1, 3);
        let c = read_corpus(corpus_text(&recs).as_bytes()).unwrap();
        assert_eq!(c.dim, 4);
        assert_eq!(c.users.len(), 2);
        assert_eq!(c.users[0].user_id, "a");
        let ids: Vec<_> = c.users[0].pairs.iter().map(|p| p.pair_id.as_str()).collect();
        assert_eq!(ids, ["p0", "p2", "p1"]);
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let recs = [pair("a", 0, 4, SplitTag::Train), pair("a", 1, 5, SplitTag::Train)];
        match read_corpus(corpus_text(&recs).as_bytes()) {
            Err(Error::DimensionMismatchAtLine { line, expected, found }) => {
                assert_eq!((line, expected, found), (2, 4, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(read_corpus("".as_bytes()), Err(Error::EmptyCorpus)));
        assert!(matches!(read_corpus("\n\n".as_bytes()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut text = corpus_text(&[pair("a", 0, 2, SplitTag::Train)]);
        text.push_str("{not json}\n");
        assert!(matches!(
            read_corpus(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        // unknown keys are rejected too
        let extra = r#"{"user_id":"a","pair_id":"x","emb_chosen":[1],"emb_rejected":[2],"split":"test","note":1}"#;
        assert!(matches!(
            read_corpus(extra.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn round_trip_identity() {
        let recs: Vec<_> = (0..5)
            .map(|i| pair(if i % 2 == 0 { "x" } else { "y" }, i, 3, SplitTag::Test))
            .collect();
        let c = read_corpus(corpus_text(&recs).as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let again = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn population_split_sizes_and_determinism() {
        let c4 = Corpus {
            users: (0..4).map(|i| user(&format!("u{i}"), 2)).collect(),
            dim: 3,
        };
        let a = split_population(c4.clone(), 7).unwrap();
        let b = split_population(c4.clone(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.users_in(Population::Seen).count(), 2);
        assert_eq!(a.users_in(Population::Unseen).count(), 2);
        for seed in 0..20 {
            let s = split_population(c4.clone(), seed).unwrap();
            assert_eq!(s.users_in(Population::Seen).count(), 2);
        }

        let c5 = Corpus {
            users: (0..5).map(|i| user(&format!("u{i}"), 2)).collect(),
            dim: 3,
        };
        let s = split_population(c5, 1).unwrap();
        assert_eq!(s.users_in(Population::Seen).count(), 3);
        assert_eq!(s.users_in(Population::Unseen).count(), 2);

        let c1 = Corpus {
            users: vec![user("solo", 2)],
            dim: 3,
        };
        assert!(matches!(split_population(c1, 0), Err(Error::TooFew { .. })));
    }

    #[test]
    fn support_query_sizes() {
        let s = split_support_query(&user("u", 10), 0.1, 3).unwrap();
        assert_eq!((s.support.len(), s.query.len()), (1, 9));
        let s = split_support_query(&user("u", 3), 0.1, 3).unwrap();
        assert_eq!((s.support.len(), s.query.len()), (1, 2));
        assert!(matches!(
            split_support_query(&user("u", 1), 0.1, 3),
            Err(Error::TooFew { .. })
        ));
    }

    #[test]
    fn support_query_disjoint_and_covering() {
        let u = user("u", 17);
        for seed in 0..10 {
            let s = split_support_query(&u, 0.3, seed).unwrap();
            let sup: HashSet<_> = s.support.iter().map(|p| &p.pair_id).collect();
            let qry: HashSet<_> = s.query.iter().map(|p| &p.pair_id).collect();
            assert!(sup.is_disjoint(&qry));
            assert_eq!(sup.len() + qry.len(), 17);
            assert_eq!(s, split_support_query(&u, 0.3, seed).unwrap());
        }
    }

    #[test]
    fn split_depends_on_user_id_not_position() {
        let mut a = user("alice", 8);
        let s1 = split_support_query(&a, 0.25, 9).unwrap();
        a.pairs.iter_mut().for_each(|p| p.user_id = "bob".into());
        a.user_id = "bob".into();
        let s2 = split_support_query(&a, 0.25, 9).unwrap();
        // different user key -> generally different order; same key -> same
        assert_eq!(s1.support.len(), s2.support.len());
        a.user_id = "alice".into();
        let s3 = split_support_query(&a, 0.25, 9).unwrap();
        let ids = |t: &TaskSplit| t.support.iter().map(|p| p.pair_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&s1), ids(&s3));
    }

    #[test]
    fn min_train_filter() {
        let c = Corpus {
            users: vec![user("a", 1), user("b", 6)],
            dim: 3,
        };
        let f = c.filter_min_train_pairs(6);
        assert_eq!(f.users.len(), 1);
        assert_eq!(f.users[0].user_id, "b");
    }
}
