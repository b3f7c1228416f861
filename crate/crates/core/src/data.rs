//! Rating logs: parsing, positive/negative labeling, time-based splits,
//! session discretization and precomputed content features.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Rng;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingEvent {
    pub user: usize,
    pub movie: usize,
    pub rating: f64,
    pub timestamp: i64,
}

/// Bijection between raw external ids and dense indices `0..len`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    raw: Vec<i64>,
    dense: HashMap<i64, usize>,
}

impl IdMap {
    /// Dense indices follow ascending raw id order.
    pub fn from_raw_ids(ids: impl IntoIterator<Item = i64>) -> Self {
        let raw: Vec<i64> = ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let dense = raw.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        Self { raw, dense }
    }

    pub fn dense(&self, raw: i64) -> Option<usize> {
        self.dense.get(&raw).copied()
    }

    pub fn raw(&self, dense: usize) -> i64 {
        self.raw[dense]
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw_ids(&self) -> &[i64] {
        &self.raw
    }

    /// Known raw ids closest to `raw`, nearest first.
    pub fn nearest(&self, raw: i64, k: usize) -> Vec<i64> {
        let mut ids = self.raw.clone();
        ids.sort_by_key(|&r| ((r - raw).abs(), r));
        ids.truncate(k);
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    /// Sorted by `(timestamp, user, movie)`.
    pub events: Vec<RatingEvent>,
    pub num_users: usize,
    pub num_movies: usize,
    pub users: IdMap,
    pub movies: IdMap,
}

struct RawEvent {
    user: i64,
    movie: i64,
    rating: i64,
    timestamp: i64,
    line: usize,
}

impl RatingDataset {
    fn build(raw: Vec<RawEvent>, path: &Path) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty(format!("{} contains no ratings", path.display())));
        }
        let users = IdMap::from_raw_ids(raw.iter().map(|e| e.user));
        let movies = IdMap::from_raw_ids(raw.iter().map(|e| e.movie));
        let mut seen = HashSet::with_capacity(raw.len());
        let mut events = Vec::with_capacity(raw.len());
        for e in &raw {
            if !seen.insert((e.user, e.movie, e.timestamp)) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: e.line,
                    msg: format!(
                        "duplicate rating of movie {} by user {} at {}",
                        e.movie, e.user, e.timestamp
                    ),
                });
            }
            events.push(RatingEvent {
                user: users.dense(e.user).unwrap(),
                movie: movies.dense(e.movie).unwrap(),
                rating: e.rating as f64,
                timestamp: e.timestamp,
            });
        }
        events.sort_by_key(|e| (e.timestamp, e.user, e.movie));
        Ok(Self { num_users: users.len(), num_movies: movies.len(), users, movies, events })
    }

    /// Builds a dataset from `(raw user, raw movie, rating 1..=5, timestamp)` records.
    pub fn from_records(records: impl IntoIterator<Item = (i64, i64, i64, i64)>) -> Result<Self> {
        let path = Path::new("<memory>");
        let mut raw = Vec::new();
        for (i, (user, movie, rating, timestamp)) in records.into_iter().enumerate() {
            check_event(path, i + 1, rating, timestamp)?;
            raw.push(RawEvent { user, movie, rating, timestamp, line: i + 1 });
        }
        Self::build(raw, path)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn start_timestamp(&self) -> i64 {
        self.events.first().map(|e| e.timestamp).unwrap_or(0)
    }

    pub fn end_timestamp(&self) -> i64 {
        self.events.last().map(|e| e.timestamp).unwrap_or(0)
    }

    /// Writes the MovieLens tab-separated form using raw ids.
    pub fn write_movielens(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.events.len() * 24);
        for e in &self.events {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                self.users.raw(e.user),
                self.movies.raw(e.movie),
                e.rating as i64,
                e.timestamp
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn check_event(path: &Path, line: usize, rating: i64, timestamp: i64) -> Result<()> {
    if !(1..=5).contains(&rating) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("rating {rating} outside 1..=5"),
        });
    }
    if timestamp <= 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("timestamp {timestamp} must be positive"),
        });
    }
    Ok(())
}

/// Parses the MovieLens `user \t item \t rating \t timestamp` format.
pub fn parse_movielens(path: &Path) -> Result<RatingDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line: lineno, msg };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let mut nums = [0i64; 4];
        for (n, f) in nums.iter_mut().zip(&fields) {
            *n = f
                .trim()
                .parse()
                .map_err(|_| bad(format!("non-integer field {f:?}")))?;
        }
        check_event(path, lineno, nums[2], nums[3])?;
        raw.push(RawEvent {
            user: nums[0],
            movie: nums[1],
            rating: nums[2],
            timestamp: nums[3],
            line: lineno,
        });
    }
    RatingDataset::build(raw, path)
}

/// Parses the Netflix prize layout: a `<movie_id>:` header followed by
/// `user,rating,YYYY-MM-DD` lines. `path` may be a single file or a directory
/// of such files (read in file-name order).
pub fn parse_netflix(path: &Path) -> Result<RatingDataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
    let mut raw = Vec::new();
    for file in &files {
        let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        let mut movie: Option<i64> = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { path: file.clone(), line: lineno, msg };
            if let Some(id) = line.strip_suffix(':') {
                movie = Some(id.parse().map_err(|_| bad(format!("bad movie header {line:?}")))?);
                continue;
            }
            let movie = movie.ok_or_else(|| bad("rating before any movie header".into()))?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected user,rating,date; found {line:?}")));
            }
            let user: i64 = fields[0].parse().map_err(|_| bad(format!("bad user {:?}", fields[0])))?;
            let rating: i64 =
                fields[1].parse().map_err(|_| bad(format!("bad rating {:?}", fields[1])))?;
            let date = NaiveDate::parse_from_str(fields[2], "%Y-%m-%d")
                .map_err(|_| bad(format!("bad date {:?}", fields[2])))?;
            let timestamp = (date - epoch).num_days() * SECONDS_PER_DAY;
            check_event(file, lineno, rating, timestamp)?;
            raw.push(RawEvent { user, movie, rating, timestamp, line: lineno });
        }
    }
    RatingDataset::build(raw, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackScheme {
    /// Positive iff rating = 5.
    Netflix,
    /// Positive iff rating >= 4.
    MovieLens,
}

impl FeedbackScheme {
    pub fn is_positive(self, rating: f64) -> bool {
        match self {
            FeedbackScheme::Netflix => rating >= 5.0,
            FeedbackScheme::MovieLens => rating >= 4.0,
        }
    }
}

impl FromStr for FeedbackScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "netflix" => Ok(FeedbackScheme::Netflix),
            "movielens" => Ok(FeedbackScheme::MovieLens),
            other => Err(Error::Config(format!(
                "unknown feedback scheme {other:?} (expected netflix or movielens)"
            ))),
        }
    }
}

impl fmt::Display for FeedbackScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackScheme::Netflix => "netflix",
            FeedbackScheme::MovieLens => "movielens",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dataset: RatingDataset,
    pub scheme: FeedbackScheme,
    /// Parallel to `dataset.events`.
    pub positive: Vec<bool>,
    pub num_positive: usize,
    pub num_negative: usize,
}

pub fn label_feedback(ds: RatingDataset, scheme: FeedbackScheme) -> LabeledDataset {
    let positive: Vec<bool> = ds.events.iter().map(|e| scheme.is_positive(e.rating)).collect();
    let num_positive = positive.iter().filter(|&&p| p).count();
    LabeledDataset { num_negative: positive.len() - num_positive, num_positive, positive, dataset: ds, scheme }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Last training timestamp (inclusive).
    pub train_end: i64,
    /// Last timestamp of the held-out interval (inclusive).
    pub test_end: i64,
    pub validation_fraction: f64,
    pub session_length_days: u32,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_end >= self.test_end {
            return Err(Error::Config(format!(
                "train_end {} must precede test_end {}",
                self.train_end, self.test_end
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.session_length_days == 0 {
            return Err(Error::Config("session length must be at least one day".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Validation,
    Test,
    /// Held-out event whose user or movie never occurs in training.
    Cold,
    /// After `test_end`.
    Excluded,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
            Partition::Cold => "cold",
            Partition::Excluded => "excluded",
        }
    }
}

impl FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Partition::Train,
            "validation" => Partition::Validation,
            "test" => Partition::Test,
            "cold" => Partition::Cold,
            "excluded" => Partition::Excluded,
            other => return Err(Error::Format(format!("unknown partition {other:?}"))),
        })
    }
}

/// Per-event partition assignment (parallel to the dataset's events).
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub assignment: Vec<Partition>,
}

impl Split {
    pub fn indices(&self, p: Partition) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == p)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, p: Partition) -> usize {
        self.assignment.iter().filter(|&&a| a == p).count()
    }

    /// Line-oriented manifest: `raw_user \t raw_movie \t timestamp \t partition`.
    pub fn manifest(&self, ds: &RatingDataset) -> String {
        let mut out = String::from("# lsic split manifest v1\n");
        for (e, p) in ds.events.iter().zip(&self.assignment) {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                ds.users.raw(e.user),
                ds.movies.raw(e.movie),
                e.timestamp,
                p.as_str()
            ));
        }
        out
    }

    pub fn manifest_hash(&self, ds: &RatingDataset) -> String {
        hex::encode(Sha256::digest(self.manifest(ds).as_bytes()))
    }

    pub fn write_manifest(&self, ds: &RatingDataset, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.manifest(ds).as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest written by [`Split::write_manifest`] for the same dataset.
    pub fn read_manifest(ds: &RatingDataset, path: &Path) -> Result<Split> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut assignment = Vec::with_capacity(ds.events.len());
        for (idx, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line: idx + 1, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 fields".into()));
            }
            let e = ds
                .events
                .get(assignment.len())
                .ok_or_else(|| bad("more entries than dataset events".into()))?;
            let expect = format!("{}\t{}\t{}", ds.users.raw(e.user), ds.movies.raw(e.movie), e.timestamp);
            if fields[..3].join("\t") != expect {
                return Err(bad(format!("entry does not match dataset event {expect:?}")));
            }
            assignment.push(fields[3].parse().map_err(|err: Error| bad(err.to_string()))?);
        }
        if assignment.len() != ds.events.len() {
            return Err(Error::Format(format!(
                "{}: manifest lists {} events, dataset has {}",
                path.display(),
                assignment.len(),
                ds.events.len()
            )));
        }
        Ok(Split { assignment })
    }
}

/// Time-based split: training up to `train_end`, then a seeded per-event
/// random partition of `(train_end, test_end]` into validation and test.
/// Held-out events of users or movies unseen in training become [`Partition::Cold`].
pub fn time_split(ds: &RatingDataset, spec: &SplitSpec, rng_seed: u64) -> Result<Split> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::Split("dataset is empty".into()));
    }
    let mut rng = Rng::new(rng_seed);
    let mut assignment = Vec::with_capacity(ds.len());
    let mut train_users = vec![false; ds.num_users];
    let mut train_movies = vec![false; ds.num_movies];
    for e in &ds.events {
        let p = if e.timestamp <= spec.train_end {
            train_users[e.user] = true;
            train_movies[e.movie] = true;
            Partition::Train
        } else if e.timestamp <= spec.test_end {
            if rng.uniform() < spec.validation_fraction {
                Partition::Validation
            } else {
                Partition::Test
            }
        } else {
            Partition::Excluded
        };
        assignment.push(p);
    }
    for (e, p) in ds.events.iter().zip(assignment.iter_mut()) {
        if matches!(p, Partition::Validation | Partition::Test)
            && !(train_users[e.user] && train_movies[e.movie])
        {
            *p = Partition::Cold;
        }
    }
    let split = Split { assignment };
    if split.count(Partition::Train) == 0 {
        return Err(Error::Split(format!("no events at or before train_end {}", spec.train_end)));
    }
    if split.count(Partition::Test) == 0 {
        return Err(Error::Split(format!(
            "test partition is empty for ({}, {}]",
            spec.train_end, spec.test_end
        )));
    }
    Ok(split)
}

/// A training event with its session index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionEvent {
    pub user: usize,
    pub movie: usize,
    pub rating: f64,
    pub positive: bool,
    pub session: usize,
}

/// Sparse per-session rating vectors for every user (over movies) and every
/// movie (over users), built from training events only.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionizedDataset {
    pub start_timestamp: i64,
    pub session_length_days: u32,
    pub session_count: usize,
    pub num_users: usize,
    pub num_movies: usize,
    /// `user_sessions[u][t]` lists `(movie, rating)`.
    pub user_sessions: Vec<Vec<Vec<(usize, f64)>>>,
    /// `movie_sessions[m][t]` lists `(user, rating)`.
    pub movie_sessions: Vec<Vec<Vec<(usize, f64)>>>,
    pub events: Vec<SessionEvent>,
}

impl SessionizedDataset {
    pub fn session_of(&self, timestamp: i64) -> usize {
        session_index(timestamp, self.start_timestamp, self.session_length_days)
    }

    /// Events rebuilt from the user-side session vectors, sorted.
    pub fn reconstruct_events(&self) -> Vec<(usize, usize, usize, u64)> {
        let mut out = Vec::new();
        for (u, sessions) in self.user_sessions.iter().enumerate() {
            for (t, s) in sessions.iter().enumerate() {
                out.extend(s.iter().map(|&(m, r)| (u, m, t, r.to_bits())));
            }
        }
        out.sort_unstable();
        out
    }
}

pub fn session_index(timestamp: i64, start: i64, session_length_days: u32) -> usize {
    let len = session_length_days as i64 * SECONDS_PER_DAY;
    ((timestamp - start).max(0) / len) as usize
}

/// Assigns every training event of `split` to a session of
/// `session_length_days` days counted from the dataset's first timestamp.
pub fn sessionize(
    labeled: &LabeledDataset,
    split: &Split,
    session_length_days: u32,
) -> Result<SessionizedDataset> {
    if session_length_days == 0 {
        return Err(Error::InvalidArgument("session length must be at least one day".into()));
    }
    let ds = &labeled.dataset;
    let start = ds.start_timestamp();
    let mut events = Vec::new();
    for (i, e) in ds.events.iter().enumerate() {
        if split.assignment[i] == Partition::Train {
            events.push(SessionEvent {
                user: e.user,
                movie: e.movie,
                rating: e.rating,
                positive: labeled.positive[i],
                session: session_index(e.timestamp, start, session_length_days),
            });
        }
    }
    let session_count = events.iter().map(|e| e.session + 1).max().unwrap_or(0);
    let mut user_sessions = vec![vec![Vec::new(); session_count]; ds.num_users];
    let mut movie_sessions = vec![vec![Vec::new(); session_count]; ds.num_movies];
    for e in &events {
        user_sessions[e.user][e.session].push((e.movie, e.rating));
        movie_sessions[e.movie][e.session].push((e.user, e.rating));
    }
    Ok(SessionizedDataset {
        start_timestamp: start,
        session_length_days,
        session_count,
        num_users: ds.num_users,
        num_movies: ds.num_movies,
        user_sessions,
        movie_sessions,
        events,
    })
}

/// Fixed-dimension feature vectors per dense movie index.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFeatures {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    /// `false` for movies that received the zero vector.
    pub present: Vec<bool>,
}

impl ContentFeatures {
    pub fn zeros(num_movies: usize, dim: usize) -> Self {
        Self { dim, vectors: vec![vec![0.0; dim]; num_movies], present: vec![false; num_movies] }
    }

    pub fn missing(&self) -> usize {
        self.present.iter().filter(|&&p| !p).count()
    }

    /// Writes `raw_movie_id v1 ... vF` lines for present movies.
    pub fn write(&self, ds: &RatingDataset, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (m, v) in self.vectors.iter().enumerate() {
            if !self.present[m] {
                continue;
            }
            out.push_str(&ds.movies.raw(m).to_string());
            for x in v {
                out.push(' ');
                out.push_str(&format!("{x:?}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads `raw_movie_id` followed by F whitespace-separated reals per line.
/// Movies without a record get the zero vector; records for unknown movies are skipped.
pub fn load_content_features(path: &Path, ds: &RatingDataset) -> Result<ContentFeatures> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dim: Option<usize> = None;
    let mut features: Option<ContentFeatures> = None;
    for (idx, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line: idx + 1, msg };
        let raw: i64 = id.parse().map_err(|_| bad(format!("bad movie id {id:?}")))?;
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>().map_err(|_| bad(format!("bad value {p:?}"))))
            .collect::<Result<_>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{}:{}: non-finite feature", path.display(), idx + 1)));
        }
        match dim {
            None => {
                if values.is_empty() {
                    return Err(Error::Format(format!("{}:{}: empty vector", path.display(), idx + 1)));
                }
                dim = Some(values.len());
                features = Some(ContentFeatures::zeros(ds.num_movies, values.len()));
            }
            Some(d) if d != values.len() => {
                return Err(Error::Format(format!(
                    "{}:{}: vector has length {}, expected {d}",
                    path.display(),
                    idx + 1,
                    values.len()
                )));
            }
            _ => {}
        }
        let f = features.as_mut().unwrap();
        if let Some(m) = ds.movies.dense(raw) {
            f.vectors[m] = values;
            f.present[m] = true;
        }
    }
    features.ok_or_else(|| Error::Empty(format!("{} has no feature records", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn ten_event_dataset() -> RatingDataset {
        // users 1..=3, movies 10..=13; event k at day k.
        let rows = [
            (1, 10, 5),
            (2, 11, 4),
            (1, 11, 3),
            (3, 10, 2),
            (2, 10, 5),
            (3, 12, 4),
            // held-out interval
            (1, 12, 5),
            (2, 13, 4), // movie 13 unseen in train -> cold
            (4, 10, 3), // user 4 unseen in train -> cold
            (3, 11, 5),
        ];
        let mut s = String::new();
        for (k, (u, m, r)) in rows.iter().enumerate() {
            s.push_str(&format!("{u}\t{m}\t{r}\t{}\n", 1_000_000 + k as i64 * SECONDS_PER_DAY));
        }
        parse_movielens(write_tmp(&s).path()).unwrap()
    }

    #[test]
    fn parses_single_line() {
        let f = write_tmp("196\t242\t3\t881250949\n");
        let ds = parse_movielens(f.path()).unwrap();
        assert_eq!(ds.len(), 1);
        let e = ds.events[0];
        assert_eq!(ds.users.dense(196), Some(e.user));
        assert_eq!(ds.movies.dense(242), Some(e.movie));
        assert_eq!(e.rating, 3.0);
        assert_eq!(e.timestamp, 881250949);
    }

    #[test]
    fn rejects_non_integer_fields() {
        let f = write_tmp("a\tb\tc\td\n");
        match parse_movielens(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("1\t2\t3\t100\n1\t2\t3\n");
        assert!(matches!(parse_movielens(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        assert!(matches!(parse_movielens(write_tmp("").path()), Err(Error::Empty(_))));
        assert!(parse_movielens(write_tmp("1\t2\t6\t100\n").path()).is_err());
        assert!(parse_movielens(write_tmp("1\t2\t3\t0\n").path()).is_err());
        assert!(parse_movielens(write_tmp("1\t2\t3\t5\n1\t2\t4\t5\n").path()).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_movielens(Path::new("/nonexistent/u.data")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/u.data"));
    }

    #[test]
    fn netflix_format() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mv_0000001.txt"), "1:\n6,5,2005-09-06\n7,3,2005-10-01\n").unwrap();
        fs::write(dir.path().join("mv_0000002.txt"), "2:\n6,4,2005-11-30\n").unwrap();
        let ds = parse_netflix(dir.path()).unwrap();
        assert_eq!((ds.num_users, ds.num_movies, ds.len()), (2, 2, 3));
        let first = ds.events[0];
        assert_eq!(ds.users.raw(first.user), 6);
        assert_eq!(first.timestamp, 1_125_964_800);
        assert!(parse_netflix(write_tmp("6,5,2005-09-06\n").path()).is_err());
    }

    #[test]
    fn feedback_schemes() {
        use FeedbackScheme::*;
        assert!(Netflix.is_positive(5.0));
        assert!(!Netflix.is_positive(4.0));
        assert!(MovieLens.is_positive(4.0));
        assert!(!MovieLens.is_positive(3.0));
        assert!(matches!("imdb".parse::<FeedbackScheme>(), Err(Error::Config(_))));
        let l = label_feedback(ten_event_dataset(), MovieLens);
        assert_eq!(l.num_positive + l.num_negative, 10);
        assert_eq!(l.num_positive, 7);
    }

    #[test]
    fn split_ten_events_by_hand() {
        let ds = ten_event_dataset();
        let spec = SplitSpec {
            train_end: 1_000_000 + 5 * SECONDS_PER_DAY,
            test_end: 1_000_000 + 100 * SECONDS_PER_DAY,
            validation_fraction: 0.5,
            session_length_days: 30,
        };
        let split = time_split(&ds, &spec, 3).unwrap();
        assert_eq!(split.count(Partition::Train), 6);
        assert_eq!(split.count(Partition::Cold), 2);
        assert_eq!(split.count(Partition::Validation) + split.count(Partition::Test), 2);
        let again = time_split(&ds, &spec, 3).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn split_requires_test_events() {
        let ds = ten_event_dataset();
        let spec = SplitSpec {
            train_end: ds.end_timestamp(),
            test_end: ds.end_timestamp() + 1,
            validation_fraction: 0.5,
            session_length_days: 30,
        };
        assert!(matches!(time_split(&ds, &spec, 0), Err(Error::Split(_))));
        let bad = SplitSpec { validation_fraction: 1.0, ..spec };
        assert!(time_split(&ds, &bad, 0).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_mismatch() {
        let ds = ten_event_dataset();
        let spec = SplitSpec {
            train_end: 1_000_000 + 5 * SECONDS_PER_DAY,
            test_end: i64::MAX,
            validation_fraction: 0.1,
            session_length_days: 30,
        };
        let split = time_split(&ds, &spec, 9).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        split.write_manifest(&ds, f.path()).unwrap();
        assert_eq!(Split::read_manifest(&ds, f.path()).unwrap(), split);
        let tampered = split.manifest(&ds).replacen("\n1\t10\t", "\n1\t11\t", 1);
        fs::write(f.path(), tampered).unwrap();
        assert!(Split::read_manifest(&ds, f.path()).is_err());
    }

    #[test]
    fn session_windows() {
        let base = 500_000;
        assert_eq!(session_index(base + 10 * SECONDS_PER_DAY, base, 30), 0);
        assert_eq!(session_index(base + 40 * SECONDS_PER_DAY, base, 30), 1);
        let f = write_tmp(&format!(
            "1\t1\t5\t{base}\n1\t2\t4\t{}\n2\t1\t3\t{}\n2\t2\t1\t{}\n",
            base + 10 * SECONDS_PER_DAY,
            base + 40 * SECONDS_PER_DAY,
            base + 90 * SECONDS_PER_DAY
        ));
        let ds = parse_movielens(f.path()).unwrap();
        let l = label_feedback(ds, FeedbackScheme::MovieLens);
        let split = Split { assignment: vec![Partition::Train, Partition::Train, Partition::Train, Partition::Test] };
        let s = sessionize(&l, &split, 30).unwrap();
        assert_eq!(s.session_count, 2);
        assert_eq!(s.user_sessions[0][0].len(), 2);
        assert_eq!(s.user_sessions[1][1], vec![(0, 3.0)]);
        assert_eq!(s.movie_sessions[0][1], vec![(1, 3.0)]);
        assert!(sessionize(&l, &split, 0).is_err());
    }

    #[test]
    fn content_features() {
        let ds = ten_event_dataset();
        let f = write_tmp("10 0.5 1.5 -2\n12 1 2 3\n999 0 0 0\n");
        let c = load_content_features(f.path(), &ds).unwrap();
        assert_eq!(c.dim, 3);
        let m10 = ds.movies.dense(10).unwrap();
        let m11 = ds.movies.dense(11).unwrap();
        assert_eq!(c.vectors[m10], vec![0.5, 1.5, -2.0]);
        assert!(c.present[m10]);
        assert_eq!(c.vectors[m11], vec![0.0; 3]);
        assert!(!c.present[m11]);
        assert_eq!(c.missing(), 2);

        let bad = write_tmp("10 1 2 3\n11 1 2\n");
        assert!(matches!(load_content_features(bad.path(), &ds), Err(Error::Format(_))));
    }

    #[test]
    fn content_features_full_width() {
        let ds = ten_event_dataset();
        let mut s = String::new();
        for raw in [10, 11, 12, 13] {
            s.push_str(&raw.to_string());
            for k in 0..2048 {
                s.push_str(&format!(" {}", (k % 7) as f64 * 0.1));
            }
            s.push('\n');
        }
        let c = load_content_features(write_tmp(&s).path(), &ds).unwrap();
        assert_eq!(c.dim, 2048);
        assert_eq!(c.missing(), 0);
        let short: String = s.lines().enumerate().map(|(i, l)| {
            if i == 2 { l.rsplit_once(' ').unwrap().0.to_string() + "\n" } else { l.to_string() + "\n" }
        }).collect();
        assert!(matches!(load_content_features(write_tmp(&short).path(), &ds), Err(Error::Format(_))));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn arb_dataset() -> impl Strategy<Value = Vec<(i64, i64, i64, i64)>> {
            proptest::collection::vec((1i64..8, 1i64..12, 1i64..=5, 1i64..200), 1..60)
        }

        fn build(rows: &[(i64, i64, i64, i64)]) -> Option<RatingDataset> {
            let mut seen = HashSet::new();
            let mut s = String::new();
            for &(u, m, r, d) in rows {
                let ts = 1_000 + d * SECONDS_PER_DAY;
                if seen.insert((u, m, ts)) {
                    s.push_str(&format!("{u}\t{m}\t{r}\t{ts}\n"));
                }
            }
            let f = tempfile::NamedTempFile::new().unwrap();
            fs::write(f.path(), s).unwrap();
            parse_movielens(f.path()).ok()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn serialize_reparse_roundtrip(rows in arb_dataset()) {
                let ds = build(&rows).unwrap();
                let f = tempfile::NamedTempFile::new().unwrap();
                ds.write_movielens(f.path()).unwrap();
                prop_assert_eq!(parse_movielens(f.path()).unwrap(), ds);
            }

            #[test]
            fn split_partition_properties(rows in arb_dataset(), cut in 20i64..180, seed in 0u64..50) {
                let ds = build(&rows).unwrap();
                let spec = SplitSpec {
                    train_end: 1_000 + cut * SECONDS_PER_DAY,
                    test_end: i64::MAX,
                    validation_fraction: 0.5,
                    session_length_days: 30,
                };
                let Ok(split) = time_split(&ds, &spec, seed) else { return Ok(()) };
                prop_assert_eq!(split.assignment.len(), ds.len());
                prop_assert_eq!(split.count(Partition::Excluded), 0);
                let max_train = split.indices(Partition::Train).iter().map(|&i| ds.events[i].timestamp).max().unwrap();
                for p in [Partition::Validation, Partition::Test, Partition::Cold] {
                    for i in split.indices(p) {
                        prop_assert!(ds.events[i].timestamp >= max_train);
                        prop_assert!(ds.events[i].timestamp > spec.train_end);
                    }
                }
                let labeled = label_feedback(ds.clone(), FeedbackScheme::MovieLens);
                let s = sessionize(&labeled, &split, 30).unwrap();
                let mut want: Vec<(usize, usize, usize, u64)> = split.indices(Partition::Train).iter().map(|&i| {
                    let e = ds.events[i];
                    (e.user, e.movie, s.session_of(e.timestamp), e.rating.to_bits())
                }).collect();
                want.sort_unstable();
                prop_assert_eq!(s.reconstruct_events(), want);
                let movie_side: usize = s.movie_sessions.iter().flatten().map(Vec::len).sum();
                prop_assert_eq!(movie_side, split.count(Partition::Train));
            }
        }
    }
}
