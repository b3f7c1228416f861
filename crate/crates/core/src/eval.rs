//! Rank metrics, held-out relevance, and MF candidate re-ranking.

use std::fmt::Write as _;

use crate::data::{LabeledDataset, Partition, Split};
use crate::error::{Error, Result};
use crate::mf::top_n_by_score;

/// A user's ranked movies with binary relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: usize,
    pub movies: Vec<usize>,
    pub relevant: Vec<bool>,
    /// Held-out positives of the user, including any not present in `movies`.
    pub total_relevant: usize,
}

impl RankedList {
    /// Labels `movies` against the sorted relevant set.
    pub fn new(user: usize, movies: Vec<usize>, relevant_set: &[usize]) -> Self {
        let relevant = movies.iter().map(|m| relevant_set.binary_search(m).is_ok()).collect();
        Self { user, movies, relevant, total_relevant: relevant_set.len() }
    }

    /// Builds a list straight from relevance flags (movie ids are the ranks).
    pub fn from_flags(relevant: &[bool], total_relevant: usize) -> Self {
        Self { user: 0, movies: (0..relevant.len()).collect(), relevant: relevant.to_vec(), total_relevant }
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidArgument("cutoff n must be at least 1".into()))
    } else {
        Ok(())
    }
}

pub fn precision_at_n(list: &RankedList, n: usize) -> Result<f64> {
    check_n(n)?;
    let hits = list.relevant.iter().take(n).filter(|&&r| r).count();
    Ok(hits as f64 / n as f64)
}

pub fn ndcg_at_n(list: &RankedList, n: usize) -> Result<f64> {
    check_n(n)?;
    if list.total_relevant == 0 {
        return Ok(0.0);
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = (1..=n).zip(list.relevant.iter()).filter(|(_, &r)| r).map(|(k, _)| gain(k)).sum();
    let ideal: f64 = (1..=n.min(list.total_relevant)).map(gain).sum();
    Ok(dcg / ideal)
}

pub fn mean_reciprocal_rank(list: &RankedList) -> f64 {
    list.relevant.iter().position(|&r| r).map_or(0.0, |k| 1.0 / (k + 1) as f64)
}

pub fn mean_average_precision(list: &RankedList) -> f64 {
    if list.total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in list.relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / list.total_relevant as f64
}

/// Metric columns in report order.
pub const METRIC_NAMES: [&str; 8] =
    ["precision_at_3", "precision_at_5", "precision_at_10", "ndcg_at_3", "ndcg_at_5", "ndcg_at_10", "map", "mrr"];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics(pub [f64; 8]);

impl Metrics {
    pub fn of(list: &RankedList) -> Self {
        let p = |n| precision_at_n(list, n).expect("fixed cutoff");
        let g = |n| ndcg_at_n(list, n).expect("fixed cutoff");
        Metrics([p(3), p(5), p(10), g(3), g(5), g(10), mean_average_precision(list), mean_reciprocal_rank(list)])
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|&n| n == name).map(|k| self.0[k])
    }

    pub fn precision_at_5(&self) -> f64 {
        self.0[1]
    }

    pub fn ndcg_at_5(&self) -> f64 {
        self.0[4]
    }
}

/// Per-user and mean metrics over users with at least one relevant item.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub users: Vec<(usize, Metrics)>,
    pub mean: Metrics,
}

impl MetricReport {
    pub fn from_lists(label: impl Into<String>, lists: &[RankedList]) -> Result<Self> {
        let users: Vec<(usize, Metrics)> =
            lists.iter().filter(|l| l.total_relevant > 0).map(|l| (l.user, Metrics::of(l))).collect();
        let mut mean = [0.0; 8];
        for (_, m) in &users {
            for (acc, v) in mean.iter_mut().zip(m.0) {
                *acc += v;
            }
        }
        if !users.is_empty() {
            mean.iter_mut().for_each(|v| *v /= users.len() as f64);
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric mean".into()));
        }
        Ok(Self { label: label.into(), users, mean: Metrics(mean) })
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn table(&self) -> String {
        let mut s = format!("{} ({} users)\n", self.label, self.user_count());
        for (name, v) in METRIC_NAMES.iter().zip(self.mean.0) {
            let _ = writeln!(s, "  {name:<16} {v:.4}");
        }
        s
    }
}

/// Summary CSV: one row per report, preceded by a config-hash comment.
pub fn reports_csv(reports: &[MetricReport], config_hash: &str) -> String {
    let mut s = format!("# config_sha256={config_hash}\nmodel,users,{}\n", METRIC_NAMES.join(","));
    for r in reports {
        let _ = write!(s, "{},{}", r.label, r.user_count());
        for v in r.mean.0 {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

/// Per-user CSV (raw ids via `raw_user`).
pub fn per_user_csv(report: &MetricReport, config_hash: &str, raw_user: impl Fn(usize) -> i64) -> String {
    let mut s = format!("# config_sha256={config_hash}\nuser,{}\n", METRIC_NAMES.join(","));
    for (u, m) in &report.users {
        let _ = write!(s, "{}", raw_user(*u));
        for v in m.0 {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    s
}

/// Per-user relevance and exclusion sets derived from a split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTargets {
    /// Sorted held-out positives per user (training-observed movies removed).
    pub relevant: Vec<Vec<usize>>,
    /// Sorted movies each user rated in training.
    pub seen: Vec<Vec<usize>>,
}

impl EvalTargets {
    pub fn new(labeled: &LabeledDataset, split: &Split, held_out: Partition) -> Self {
        let ds = &labeled.dataset;
        let mut relevant = vec![Vec::new(); ds.num_users];
        let mut seen = vec![Vec::new(); ds.num_users];
        for (k, e) in ds.events.iter().enumerate() {
            match split.assignment[k] {
                Partition::Train => seen[e.user].push(e.movie),
                p if p == held_out && labeled.positive[k] => relevant[e.user].push(e.movie),
                _ => {}
            }
        }
        for (r, s) in relevant.iter_mut().zip(&mut seen) {
            s.sort_unstable();
            s.dedup();
            r.sort_unstable();
            r.dedup();
            r.retain(|m| s.binary_search(m).is_err());
        }
        Self { relevant, seen }
    }

    /// Users with at least one relevant movie, ascending.
    pub fn users(&self) -> Vec<usize> {
        (0..self.relevant.len()).filter(|&u| !self.relevant[u].is_empty()).collect()
    }

    pub fn exclude_mask(&self, user: usize, num_movies: usize) -> Vec<bool> {
        let mut mask = vec![false; num_movies];
        for &m in &self.seen[user] {
            mask[m] = true;
        }
        mask
    }
}

/// Ranks every movie not seen by `user` by descending score (ties by index).
pub fn rank_all(scores: &[f64], seen: &[usize]) -> Vec<usize> {
    top_n_by_score(scores, |j| seen.binary_search(&j).is_ok(), scores.len())
}

/// Re-orders `candidates` by descending `score`, ties by ascending movie id.
pub fn rerank(candidates: &[usize], mut score: impl FnMut(usize) -> Result<f64>) -> Result<Vec<usize>> {
    let mut scored = candidates.iter().map(|&m| Ok((score(m)?, m))).collect::<Result<Vec<(f64, usize)>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, m)| m).collect())
}
