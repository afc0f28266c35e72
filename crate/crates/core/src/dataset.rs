//! Rating ingestion, train/test splitting and the sparse HDI matrix.
//!
//! The matrix keeps the observed set in its original order and two CSR-style
//! adjacency indexes: per user the `(item, rating)` pairs and per item the
//! `(user, rating)` pairs, each bucket sorted by the opposing index.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: rating is not finite")]
    NonFiniteRating { line: usize },
    #[error("duplicate rating for ({user}, {item}) on lines {first_line} and {second_line}")]
    DuplicateLine {
        user: u64,
        item: u64,
        first_line: usize,
        second_line: usize,
    },
    #[error("duplicate pair (user {user}, item {item})")]
    DuplicatePair { user: usize, item: usize },
    #[error("index out of range: user {user} of {num_users}, item {item} of {num_items}")]
    IndexOutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },
    #[error("rating is not finite for (user {user}, item {item})")]
    NonFinite { user: usize, item: usize },
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("cannot split an empty rating list")]
    EmptyInput,
    #[error("split of {total} ratings at fraction {fraction} leaves the training set empty")]
    EmptyTrain { total: usize, fraction: f64 },
    #[error("matrix has a zero dimension ({num_users} x {num_items})")]
    ZeroDimension { num_users: usize, num_items: usize },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One observed rating, indexed by dense 0-based user and item indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingTriple {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

impl RatingTriple {
    pub fn new(user: usize, item: usize, rating: f64) -> Self {
        Self { user, item, rating }
    }
}

/// Field separator of a rating file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    /// Picked from the first non-empty line: `::`, then tab, then comma,
    /// falling back to runs of whitespace.
    #[default]
    Auto,
    Tab,
    Comma,
    DoubleColon,
    Whitespace,
}

impl Delimiter {
    fn detect(line: &str) -> Delimiter {
        if line.contains("::") {
            Delimiter::DoubleColon
        } else if line.contains('\t') {
            Delimiter::Tab
        } else if line.contains(',') {
            Delimiter::Comma
        } else {
            Delimiter::Whitespace
        }
    }

    fn fields<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Tab => line.split('\t').map(str::trim).collect(),
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::DoubleColon => line.split("::").map(str::trim).collect(),
            Delimiter::Whitespace | Delimiter::Auto => line.split_whitespace().collect(),
        }
    }
}

impl FromStr for Delimiter {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Delimiter::Auto),
            "tab" | "\\t" | "\t" => Ok(Delimiter::Tab),
            "comma" | "," => Ok(Delimiter::Comma),
            "::" | "double_colon" | "double-colon" => Ok(Delimiter::DoubleColon),
            "whitespace" | "space" | " " => Ok(Delimiter::Whitespace),
            other => Err(format!(
                "unknown delimiter {other:?} (expected auto, tab, comma, ::, whitespace)"
            )),
        }
    }
}

impl fmt::Display for Delimiter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Delimiter::Auto => "auto",
            Delimiter::Tab => "tab",
            Delimiter::Comma => "comma",
            Delimiter::DoubleColon => "::",
            Delimiter::Whitespace => "whitespace",
        };
        f.write_str(s)
    }
}

/// How external integer ids become internal indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IdMode {
    /// Dense indices in order of first appearance.
    #[default]
    Remap,
    /// `index = id - base`; the dimension is the largest index plus one, so
    /// ids that never occur still occupy a row.
    Offset { base: u64 },
}

impl FromStr for IdMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "remap" => Ok(IdMode::Remap),
            "zero-based" | "zero_based" => Ok(IdMode::Offset { base: 0 }),
            "one-based" | "one_based" => Ok(IdMode::Offset { base: 1 }),
            other => Err(format!(
                "unknown id mode {other:?} (expected remap, zero-based, one-based)"
            )),
        }
    }
}

impl fmt::Display for IdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdMode::Remap => f.write_str("remap"),
            IdMode::Offset { base: 0 } => f.write_str("zero-based"),
            IdMode::Offset { base: 1 } => f.write_str("one-based"),
            IdMode::Offset { base } => write!(f, "offset-{base}"),
        }
    }
}

/// Mapping from internal indices back to the ids found in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdTable {
    Remapped(Vec<u64>),
    Offset(u64),
}

impl IdTable {
    pub fn external(&self, index: usize) -> u64 {
        match self {
            IdTable::Remapped(ids) => ids[index],
            IdTable::Offset(base) => index as u64 + base,
        }
    }
}

struct IdAssigner {
    mode: IdMode,
    lookup: HashMap<u64, usize>,
    external: Vec<u64>,
    max_index: Option<usize>,
}

impl IdAssigner {
    fn new(mode: IdMode) -> Self {
        Self {
            mode,
            lookup: HashMap::new(),
            external: Vec::new(),
            max_index: None,
        }
    }

    fn assign(&mut self, id: u64, line: usize, what: &str) -> Result<usize> {
        let index = match self.mode {
            IdMode::Remap => {
                let next = self.external.len();
                *self.lookup.entry(id).or_insert_with(|| {
                    self.external.push(id);
                    next
                })
            }
            IdMode::Offset { base } => {
                if id < base {
                    return Err(DatasetError::Malformed {
                        line,
                        reason: format!("{what} id {id} is below the id base {base}"),
                    });
                }
                usize::try_from(id - base).map_err(|_| DatasetError::Malformed {
                    line,
                    reason: format!("{what} id {id} does not fit an index"),
                })?
            }
        };
        self.max_index = Some(self.max_index.map_or(index, |m| m.max(index)));
        Ok(index)
    }

    fn finish(self) -> (usize, IdTable) {
        match self.mode {
            IdMode::Remap => (self.external.len(), IdTable::Remapped(self.external)),
            IdMode::Offset { base } => (self.max_index.map_or(0, |m| m + 1), IdTable::Offset(base)),
        }
    }
}

/// Parsed rating file: triples in line order plus the id tables.
#[derive(Debug, Clone)]
pub struct Ratings {
    pub triples: Vec<RatingTriple>,
    pub num_users: usize,
    pub num_items: usize,
    pub user_ids: IdTable,
    pub item_ids: IdTable,
    /// Delimiter actually used (resolved when `Auto` was requested).
    pub delimiter: Delimiter,
}

/// Parses `user<delim>item<delim>rating` lines. Trailing fields (such as a
/// timestamp column) are ignored; blank lines are skipped.
pub fn load_ratings<R: BufRead>(source: R, delimiter: Delimiter, ids: IdMode) -> Result<Ratings> {
    let mut users = IdAssigner::new(ids);
    let mut items = IdAssigner::new(ids);
    let mut triples = Vec::new();
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    let mut delimiter = delimiter;

    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if delimiter == Delimiter::Auto {
            delimiter = Delimiter::detect(trimmed);
        }
        let fields = delimiter.fields(trimmed);
        if fields.len() < 3 {
            return Err(DatasetError::Malformed {
                line: line_no,
                reason: format!("expected at least 3 fields, found {}", fields.len()),
            });
        }
        let user_id = parse_id(fields[0], line_no, "user")?;
        let item_id = parse_id(fields[1], line_no, "item")?;
        let rating: f64 = fields[2].parse().map_err(|_| DatasetError::Malformed {
            line: line_no,
            reason: format!("rating {:?} is not a number", fields[2]),
        })?;
        if !rating.is_finite() {
            return Err(DatasetError::NonFiniteRating { line: line_no });
        }
        if let Some(&first_line) = seen.get(&(user_id, item_id)) {
            return Err(DatasetError::DuplicateLine {
                user: user_id,
                item: item_id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert((user_id, item_id), line_no);

        let user = users.assign(user_id, line_no, "user")?;
        let item = items.assign(item_id, line_no, "item")?;
        triples.push(RatingTriple { user, item, rating });
    }

    let (num_users, user_ids) = users.finish();
    let (num_items, item_ids) = items.finish();
    Ok(Ratings {
        triples,
        num_users,
        num_items,
        user_ids,
        item_ids,
        delimiter,
    })
}

pub fn load_ratings_file(path: impl AsRef<Path>, delimiter: Delimiter, ids: IdMode) -> Result<Ratings> {
    let file = File::open(path.as_ref())?;
    load_ratings(BufReader::new(file), delimiter, ids)
}

fn parse_id(field: &str, line: usize, what: &str) -> Result<u64> {
    field.parse().map_err(|_| DatasetError::Malformed {
        line,
        reason: format!("{what} id {field:?} is not a non-negative integer"),
    })
}

/// Shuffles with ChaCha8 seeded by `seed` and cuts at
/// `round(train_fraction * n)`. Both halves keep the input's relative order.
pub fn split(
    triples: &[RatingTriple],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<RatingTriple>, Vec<RatingTriple>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    if triples.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    let n_train = (train_fraction * triples.len() as f64).round() as usize;
    if n_train == 0 {
        return Err(DatasetError::EmptyTrain {
            total: triples.len(),
            fraction: train_fraction,
        });
    }

    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut in_train = vec![false; triples.len()];
    for &k in &order[..n_train] {
        in_train[k] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = triples
        .iter()
        .zip(&in_train)
        .partition(|(_, &is_train)| is_train);
    Ok((
        train.into_iter().map(|(t, _)| *t).collect(),
        test.into_iter().map(|(t, _)| *t).collect(),
    ))
}

/// CSR-style adjacency: bucket `k` is `pairs[offsets[k]..offsets[k + 1]]`.
#[derive(Debug, Clone, PartialEq)]
struct Adjacency {
    offsets: Vec<usize>,
    pairs: Vec<(usize, f64)>,
}

impl Adjacency {
    /// `key` selects the bucket, `other` the opposing index stored in it.
    fn build(
        entries: &[RatingTriple],
        buckets: usize,
        key: impl Fn(&RatingTriple) -> usize,
        other: impl Fn(&RatingTriple) -> usize,
    ) -> Self {
        let mut offsets = vec![0usize; buckets + 1];
        for e in entries {
            offsets[key(e) + 1] += 1;
        }
        for k in 0..buckets {
            offsets[k + 1] += offsets[k];
        }
        let mut cursor = offsets.clone();
        let mut pairs = vec![(0usize, 0.0f64); entries.len()];
        for e in entries {
            let slot = &mut cursor[key(e)];
            pairs[*slot] = (other(e), e.rating);
            *slot += 1;
        }
        for k in 0..buckets {
            pairs[offsets[k]..offsets[k + 1]].sort_by_key(|p| p.0);
        }
        Self { offsets, pairs }
    }

    fn bucket(&self, k: usize) -> &[(usize, f64)] {
        &self.pairs[self.offsets[k]..self.offsets[k + 1]]
    }

    fn count(&self, k: usize) -> usize {
        self.offsets[k + 1] - self.offsets[k]
    }
}

/// The observed entries `R_K` of a `num_users x num_items` rating matrix.
///
/// Immutable once built; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct HdiMatrix {
    num_users: usize,
    num_items: usize,
    entries: Vec<RatingTriple>,
    by_user: Adjacency,
    by_item: Adjacency,
}

impl HdiMatrix {
    pub fn build(triples: &[RatingTriple], num_users: usize, num_items: usize) -> Result<Self> {
        for t in triples {
            if t.user >= num_users || t.item >= num_items {
                return Err(DatasetError::IndexOutOfRange {
                    user: t.user,
                    item: t.item,
                    num_users,
                    num_items,
                });
            }
            if !t.rating.is_finite() {
                return Err(DatasetError::NonFinite {
                    user: t.user,
                    item: t.item,
                });
            }
        }
        let by_user = Adjacency::build(triples, num_users, |e| e.user, |e| e.item);
        for u in 0..num_users {
            if let Some(w) = by_user.bucket(u).windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(DatasetError::DuplicatePair { user: u, item: w[0].0 });
            }
        }
        let by_item = Adjacency::build(triples, num_items, |e| e.item, |e| e.user);
        Ok(Self {
            num_users,
            num_items,
            entries: triples.to_vec(),
            by_user,
            by_item,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn entries(&self) -> &[RatingTriple] {
        &self.entries
    }

    /// `|R_K|`
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `R_{K_u}` as `(item, rating)` pairs sorted by item.
    pub fn user_ratings(&self, user: usize) -> &[(usize, f64)] {
        self.by_user.bucket(user)
    }

    /// `R_{K_i}` as `(user, rating)` pairs sorted by user.
    pub fn item_ratings(&self, item: usize) -> &[(usize, f64)] {
        self.by_item.bucket(item)
    }

    pub fn user_count(&self, user: usize) -> usize {
        self.by_user.count(user)
    }

    pub fn item_count(&self, item: usize) -> usize {
        self.by_item.count(item)
    }

    /// `|R_K| / (|U| * |I|)`
    pub fn density(&self) -> Result<f64> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(DatasetError::ZeroDimension {
                num_users: self.num_users,
                num_items: self.num_items,
            });
        }
        Ok(self.entries.len() as f64 / (self.num_users as f64 * self.num_items as f64))
    }
}

/// Density fraction as a percentage truncated to two decimals.
pub fn format_percent(fraction: f64) -> String {
    let hundredths = (fraction * 10_000.0 + 1e-9).floor();
    format!("{:.2}", hundredths / 100.0)
}
