//! Adversarial training of a generator and a discriminator that are both
//! mixture scorers.
//!
//! The discriminator scores triples `(u, m_neg, m_pos)` with the pairwise
//! hinge `max(0, eps - g(u, m_pos) + g(u, m_neg))`, read as a probability
//! through `clip(hinge / eps, 0, 1)`. The generator is a softmax policy over
//! candidate movies trained with REINFORCE on `ln D~(u, m_k, m_pos)`: a
//! sample the discriminator cannot separate from the positive scores best.

use std::fmt::Write as _;

use log::info;

use crate::eval::{rank_all, MetricReport, Metrics, RankedList};
use crate::error::{Error, Result};
use crate::mixture::{LogitGrad, MixtureScorer, ModelInputs};
use crate::nn::{log_softmax, sgd_step, sigmoid, softmax, OptimizerConfig, Parameters, Rng, RngState};

/// Floor applied inside every log.
pub const DELTA: f64 = 1e-8;

/// One training interaction used as the positive of a triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Positive {
    pub user: usize,
    pub movie: usize,
    pub step: usize,
}

/// Training positives, observed sets and candidate sets shared by both players.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    pub inputs: ModelInputs<'a>,
    pub positives: Vec<Positive>,
    /// Sorted training positives per user.
    pub positive_sets: Vec<Vec<usize>>,
    /// Sorted generator candidates per user.
    pub candidates: Vec<Vec<usize>>,
    /// Positives whose user has at least one generator candidate.
    pub playable: Vec<Positive>,
}

impl<'a> TrainingData<'a> {
    /// Candidates default to every movie the user did not rate in training.
    pub fn new(inputs: ModelInputs<'a>) -> Self {
        let s = inputs.sessions;
        let mut positive_sets = vec![Vec::new(); s.num_users];
        let mut seen = vec![Vec::new(); s.num_users];
        let mut positives = Vec::new();
        for e in &s.events {
            seen[e.user].push(e.movie);
            if e.positive {
                positive_sets[e.user].push(e.movie);
                positives.push(Positive { user: e.user, movie: e.movie, step: e.session });
            }
        }
        for v in positive_sets.iter_mut().chain(seen.iter_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        let candidates = seen
            .iter()
            .map(|sn| (0..s.num_movies).filter(|m| sn.binary_search(m).is_err()).collect())
            .collect();
        let mut data = Self { inputs, positives, positive_sets, candidates, playable: Vec::new() };
        data.refresh_playable();
        data
    }

    fn refresh_playable(&mut self) {
        self.playable = self.positives.iter().copied().filter(|p| !self.candidates[p.user].is_empty()).collect();
    }

    /// Replaces the generator candidate sets (e.g. with MF top-N lists).
    pub fn with_candidates(mut self, candidates: Vec<Vec<usize>>) -> Result<Self> {
        if candidates.len() != self.positive_sets.len() {
            return Err(Error::Shape(format!("{} candidate sets for {} users", candidates.len(), self.positive_sets.len())));
        }
        self.candidates = candidates.into_iter().map(|mut c| {
            c.sort_unstable();
            c.dedup();
            c
        }).collect();
        self.refresh_playable();
        Ok(self)
    }

    pub fn is_positive(&self, user: usize, movie: usize) -> bool {
        self.positive_sets.get(user).is_some_and(|s| s.binary_search(&movie).is_ok())
    }

    /// A movie drawn uniformly from those that are not training positives of `user`.
    pub fn sample_negative(&self, user: usize, rng: &mut Rng) -> Result<usize> {
        let m = self.inputs.sessions.num_movies;
        let pos = &self.positive_sets[user];
        if pos.len() >= m {
            return Err(Error::Contract(format!("user {user} has no non-positive movies")));
        }
        loop {
            let j = rng.below(m);
            if pos.binary_search(&j).is_err() {
                return Ok(j);
            }
        }
    }

    fn sample_positives(&self, n: usize, rng: &mut Rng) -> Result<Vec<Positive>> {
        if self.positives.is_empty() {
            return Err(Error::Empty("no positive training interactions".into()));
        }
        Ok((0..n).map(|_| self.positives[rng.below(self.positives.len())]).collect())
    }

    fn sample_playable(&self, n: usize, rng: &mut Rng) -> Result<Vec<Positive>> {
        if self.playable.is_empty() {
            return Err(Error::Empty("no training positive has a generator candidate".into()));
        }
        Ok((0..n).map(|_| self.playable[rng.below(self.playable.len())]).collect())
    }
}

/// `max(0, eps - s_pos + s_neg)` on probabilities.
pub fn hinge(score_pos: f64, score_neg: f64, margin: f64) -> f64 {
    (margin - score_pos + score_neg).max(0.0)
}

/// Compressed discriminator output `clip(hinge / eps, 0, 1)`.
pub fn compressed(hinge: f64, margin: f64) -> f64 {
    (hinge / margin).clamp(0.0, 1.0)
}

/// `ln max(D~, delta)`.
pub fn reward_from_compressed(d: f64) -> f64 {
    d.max(DELTA).ln()
}

/// Discriminator hinge for `(u, m_neg, m_pos)` at step `t`.
pub fn d_hinge(
    d: &MixtureScorer,
    fwd: &crate::mixture::BatchForward,
    data: &TrainingData,
    margin: f64,
    u: usize,
    m_neg: usize,
    m_pos: usize,
    t: usize,
) -> Result<f64> {
    if !data.is_positive(u, m_pos) {
        return Err(Error::Contract(format!("movie {m_pos} is not a training positive of user {u}")));
    }
    Ok(hinge(d.score(fwd, u, m_pos, t)?, d.score(fwd, u, m_neg, t)?, margin))
}

/// Generator reward for sample `m_k` against positive `m_pos`.
pub fn reward(
    d: &MixtureScorer,
    fwd: &crate::mixture::BatchForward,
    margin: f64,
    u: usize,
    m_k: usize,
    m_pos: usize,
    t: usize,
) -> Result<f64> {
    let h = hinge(d.score(fwd, u, m_pos, t)?, d.score(fwd, u, m_k, t)?, margin);
    Ok(reward_from_compressed(compressed(h, margin)))
}

/// `(r - mean) / max(std, 1e-8)` with the population standard deviation.
pub fn normalize_rewards(rewards: &[f64]) -> Vec<f64> {
    if rewards.len() <= 1 {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// `K` draws with replacement from `softmax(logits)`: `(candidate index, log-prob)`.
pub fn g_sample(logits: &[f64], k: usize, rng: &mut Rng) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample count K must be at least 1".into()));
    }
    if logits.is_empty() {
        return Err(Error::Empty("generator candidate set is empty".into()));
    }
    let logp = log_softmax(logits);
    let mut cdf = Vec::with_capacity(logp.len());
    let mut acc = 0.0;
    for lp in &logp {
        acc += lp.exp();
        cdf.push(acc);
    }
    Ok((0..k)
        .map(|_| {
            let x = rng.uniform() * acc;
            let idx = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
            (idx, logp[idx])
        })
        .collect())
}

/// REINFORCE estimate of `d/ds (1/K) sum_k r_k log G(m_k)` for each candidate
/// logit: `(1/K) sum_k r_k ([m = m_k] - G(m))`.
pub fn reinforce_logit_gradient(probs: &[f64], samples: &[usize], rewards: &[f64]) -> Vec<f64> {
    let k = samples.len() as f64;
    let total: f64 = rewards.iter().sum::<f64>() / k;
    let mut g: Vec<f64> = probs.iter().map(|p| -p * total).collect();
    for (&idx, &r) in samples.iter().zip(rewards) {
        g[idx] += r / k;
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Minibatches per epoch; `None` covers the positives once on average.
    pub batches_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub margin: f64,
    pub optimizer: OptimizerConfig,
}

/// Pairwise hinge pretraining with uniformly sampled non-positive negatives.
/// Returns the mean per-triple hinge of each epoch.
pub fn pretrain_pairwise(model: &mut MixtureScorer, data: &TrainingData, cfg: &PretrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let batches = cfg.batches_per_epoch.unwrap_or_else(|| data.positives.len().div_ceil(cfg.batch_size)).max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..batches {
            let batch = data.sample_positives(cfg.batch_size, rng)?;
            let negs = batch.iter().map(|p| data.sample_negative(p.user, rng)).collect::<Result<Vec<_>>>()?;
            let users: Vec<usize> = batch.iter().map(|p| p.user).collect();
            let movies: Vec<usize> = batch.iter().map(|p| p.movie).chain(negs.iter().copied()).collect();
            let last = batch.iter().map(|p| p.step).max().unwrap_or(0);
            let fwd = model.forward(&data.inputs, &users, &movies, last)?;
            let mut grads = Vec::new();
            for (p, &n) in batch.iter().zip(&negs) {
                let sp = model.logit(&fwd, p.user, p.movie, p.step)?;
                let sn = model.logit(&fwd, p.user, n, p.step)?;
                let (gp, gn) = (sigmoid(sp), sigmoid(sn));
                let h = hinge(gp, gn, cfg.margin);
                total += h;
                if h > 0.0 {
                    grads.push(LogitGrad { user: p.user, movie: p.movie, step: p.step, grad: -gp * (1.0 - gp) });
                    grads.push(LogitGrad { user: p.user, movie: n, step: p.step, grad: gn * (1.0 - gn) });
                }
            }
            model.zero_grad();
            model.backward(&data.inputs, &fwd, &grads)?;
            sgd_step(model, &cfg.optimizer).map_err(|e| abort(e, "pretraining", epoch))?;
        }
        let mean = total / (batches * cfg.batch_size) as f64;
        info!("pretrain epoch {} mean hinge {mean:.5}", epoch + 1);
        history.push(mean);
    }
    Ok(history)
}

fn abort(e: Error, phase: &str, epoch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::Diverged(format!("{phase} epoch {}: {m}", epoch + 1)),
        other => other,
    }
}

/// One discriminator minibatch element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DTriple {
    pub user: usize,
    pub pos: usize,
    pub true_neg: usize,
    pub generated: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DStats {
    /// Summed objective `-ln(1 - D~_true + delta) - ln(1 - D~_gen + delta)`.
    pub loss: f64,
    /// Fraction of triples with `D(pos) > D(generated)`.
    pub accuracy: f64,
}

/// Logit gradients of the discriminator loss for a batch of triples (summed).
pub fn d_logit_grads(d: &MixtureScorer, fwd: &crate::mixture::BatchForward, batch: &[DTriple], margin: f64) -> Result<(Vec<LogitGrad>, DStats)> {
    if batch.is_empty() {
        return Err(Error::Empty("discriminator batch is empty".into()));
    }
    let mut grads = Vec::new();
    let mut stats = DStats::default();
    let mut correct = 0usize;
    for tr in batch {
        let sp = d.logit(fwd, tr.user, tr.pos, tr.step)?;
        let gp = sigmoid(sp);
        for (arm, neg) in [tr.true_neg, tr.generated].into_iter().enumerate() {
            let gn = sigmoid(d.logit(fwd, tr.user, neg, tr.step)?);
            if arm == 1 && gp > gn {
                correct += 1;
            }
            let h = hinge(gp, gn, margin);
            let dt = compressed(h, margin);
            stats.loss -= (1.0 - dt + DELTA).ln();
            if h > 0.0 && h < margin {
                // d/dD~ of -ln(1 - D~ + delta), then D~ = (eps - g_pos + g_neg) / eps.
                let up = 1.0 / (1.0 - dt + DELTA) / margin;
                grads.push(LogitGrad { user: tr.user, movie: tr.pos, step: tr.step, grad: -up * gp * (1.0 - gp) });
                grads.push(LogitGrad { user: tr.user, movie: neg, step: tr.step, grad: up * gn * (1.0 - gn) });
            }
        }
    }
    stats.accuracy = correct as f64 / batch.len() as f64;
    Ok((grads, stats))
}

/// One SGD step on the discriminator objective.
pub fn d_update(d: &mut MixtureScorer, inputs: &ModelInputs, batch: &[DTriple], margin: f64, opt: &OptimizerConfig) -> Result<DStats> {
    if batch.is_empty() {
        return Err(Error::Empty("discriminator batch is empty".into()));
    }
    let users: Vec<usize> = batch.iter().map(|t| t.user).collect();
    let movies: Vec<usize> = batch.iter().flat_map(|t| [t.pos, t.true_neg, t.generated]).collect();
    let last = batch.iter().map(|t| t.step).max().unwrap_or(0);
    let fwd = d.forward(inputs, &users, &movies, last)?;
    let (grads, stats) = d_logit_grads(d, &fwd, batch, margin)?;
    d.zero_grad();
    d.backward(inputs, &fwd, &grads)?;
    sgd_step(d, opt)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialConfig {
    pub epochs: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub batch_size: usize,
    /// Generator samples per positive (`K`).
    pub samples: usize,
    pub margin: f64,
    pub g_optimizer: OptimizerConfig,
    pub d_optimizer: OptimizerConfig,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            g_steps: 1,
            d_steps: 1,
            batch_size: 128,
            samples: 64,
            margin: 0.2,
            g_optimizer: OptimizerConfig::default(),
            d_optimizer: OptimizerConfig::default(),
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        self.g_optimizer.validate()?;
        self.d_optimizer.validate()?;
        if self.samples == 0 || self.batch_size == 0 {
            return Err(Error::Config("batch size and sample count must be at least 1".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GStats {
    /// Mean raw (unnormalised) reward over all samples.
    pub mean_reward: f64,
}

/// One REINFORCE step on the generator against a frozen discriminator.
pub fn g_policy_gradient_step(
    g: &mut MixtureScorer,
    d: &MixtureScorer,
    data: &TrainingData,
    batch: &[Positive],
    cfg: &AdversarialConfig,
    rng: &mut Rng,
) -> Result<GStats> {
    if batch.is_empty() {
        return Err(Error::Empty("generator batch is empty".into()));
    }
    let inputs = &data.inputs;
    let users: Vec<usize> = batch.iter().map(|p| p.user).collect();
    let last = batch.iter().map(|p| p.step).max().unwrap_or(0);
    let cand_movies = union(batch.iter().map(|p| data.candidates[p.user].as_slice()));
    let gf = g.forward(inputs, &users, &cand_movies, last)?;

    let mut drawn: Vec<(Vec<f64>, Vec<usize>)> = Vec::with_capacity(batch.len());
    for p in batch {
        let cands = &data.candidates[p.user];
        let probs = softmax(&g.logits_for_user(&gf, p.user, cands, p.step)?);
        let s = g_sample(&probs.iter().map(|p| p.ln()).collect::<Vec<_>>(), cfg.samples, rng)?;
        drawn.push((probs, s.into_iter().map(|(i, _)| i).collect()));
    }

    let d_movies: Vec<usize> = batch
        .iter()
        .zip(&drawn)
        .flat_map(|(p, (_, idx))| std::iter::once(p.movie).chain(idx.iter().map(|&i| data.candidates[p.user][i])))
        .collect();
    let df = d.forward(inputs, &users, &d_movies, last)?;
    let mut raw = Vec::with_capacity(batch.len() * cfg.samples);
    for (p, (_, idx)) in batch.iter().zip(&drawn) {
        for &i in idx {
            raw.push(reward(d, &df, cfg.margin, p.user, data.candidates[p.user][i], p.movie, p.step)?);
        }
    }
    let mean_reward = raw.iter().sum::<f64>() / raw.len() as f64;
    let norm = normalize_rewards(&raw);

    let mut grads = Vec::new();
    for (b, (p, (probs, idx))) in batch.iter().zip(&drawn).enumerate() {
        let r = &norm[b * cfg.samples..(b + 1) * cfg.samples];
        let c = reinforce_logit_gradient(probs, idx, r);
        for (k, &ck) in c.iter().enumerate() {
            if ck != 0.0 {
                let movie = data.candidates[p.user][k];
                grads.push(LogitGrad { user: p.user, movie, step: p.step, grad: -ck });
            }
        }
    }
    if grads.iter().any(|g| !g.grad.is_finite()) {
        return Err(Error::NonFinite("policy-gradient estimator".into()));
    }
    g.zero_grad();
    g.backward(inputs, &gf, &grads)?;
    sgd_step(g, &cfg.g_optimizer)?;
    Ok(GStats { mean_reward })
}

fn union<'s>(sets: impl Iterator<Item = &'s [usize]>) -> Vec<usize> {
    let mut all: Vec<usize> = sets.flat_map(|s| s.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Builds a discriminator batch: true negatives uniform, generated negatives from `g`.
pub fn d_batch(g: &MixtureScorer, data: &TrainingData, batch: &[Positive], rng: &mut Rng) -> Result<Vec<DTriple>> {
    let users: Vec<usize> = batch.iter().map(|p| p.user).collect();
    let last = batch.iter().map(|p| p.step).max().unwrap_or(0);
    let cand_movies = union(batch.iter().map(|p| data.candidates[p.user].as_slice()));
    let gf = g.forward(&data.inputs, &users, &cand_movies, last)?;
    batch
        .iter()
        .map(|p| {
            let cands = &data.candidates[p.user];
            let logits = g.logits_for_user(&gf, p.user, cands, p.step)?;
            let (i, _) = g_sample(&logits, 1, rng)?[0];
            Ok(DTriple { user: p.user, pos: p.movie, true_neg: data.sample_negative(p.user, rng)?, generated: cands[i], step: p.step })
        })
        .collect()
}

/// Ranks, for every user with relevant items, all candidates by the scorer at
/// the final step.
pub fn rank_users(model: &MixtureScorer, inputs: &ModelInputs, relevant: &[Vec<usize>], seen: &[Vec<usize>], label: &str) -> Result<MetricReport> {
    let fwd = model.forward_all(inputs)?;
    let t = inputs.last_step();
    let movies: Vec<usize> = (0..model.num_movies()).collect();
    let mut lists = Vec::new();
    for (u, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        let scores = model.logits_for_user(&fwd, u, &movies, t)?;
        lists.push(RankedList::new(u, rank_all(&scores, &seen[u]), rel));
    }
    MetricReport::from_lists(label, &lists)
}

/// One row of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub precision_at_5: f64,
    pub ndcg_at_5: f64,
    pub mean_reward: Option<f64>,
    pub d_loss: Option<f64>,
    pub d_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub epoch: usize,
    pub g_steps_done: usize,
    pub d_steps_done: usize,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_ndcg: f64,
    /// Running mean of raw rewards over all generator steps.
    pub reward_mean: f64,
    pub rng: Rng,
}

impl TrainerState {
    pub fn new(rng: Rng) -> Self {
        Self { epoch: 0, g_steps_done: 0, d_steps_done: 0, log: Vec::new(), best_epoch: 0, best_ndcg: f64::NEG_INFINITY, reward_mean: 0.0, rng }
    }

    /// Learning curve as CSV (`config_hash` goes into a leading comment).
    pub fn curve_csv(&self, config_hash: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = format!("# config_sha256={config_hash}\nepoch,precision_at_5,ndcg_at_5,mean_reward,d_loss,d_accuracy\n");
        for r in &self.log {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{},{}",
                r.epoch,
                r.precision_at_5,
                r.ndcg_at_5,
                opt(r.mean_reward),
                opt(r.d_loss),
                opt(r.d_accuracy)
            );
        }
        s
    }

    /// Flat key/value form for checkpoint metadata.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let bits = |v: Option<f64>| v.map(|x| x.to_bits().to_string()).unwrap_or_else(|| "-".into());
        let log = self
            .log
            .iter()
            .map(|r| {
                format!(
                    "{}:{}:{}:{}:{}:{}",
                    r.epoch,
                    r.precision_at_5.to_bits(),
                    r.ndcg_at_5.to_bits(),
                    bits(r.mean_reward),
                    bits(r.d_loss),
                    bits(r.d_accuracy)
                )
            })
            .collect::<Vec<_>>()
            .join(";");
        vec![
            ("trainer.epoch".into(), self.epoch.to_string()),
            ("trainer.g_steps".into(), self.g_steps_done.to_string()),
            ("trainer.d_steps".into(), self.d_steps_done.to_string()),
            ("trainer.best_epoch".into(), self.best_epoch.to_string()),
            ("trainer.best_ndcg".into(), self.best_ndcg.to_bits().to_string()),
            ("trainer.reward_mean".into(), self.reward_mean.to_bits().to_string()),
            ("trainer.rng".into(), self.rng.state().to_string()),
            ("trainer.log".into(), log),
        ]
    }

    pub fn from_meta(get: impl Fn(&str) -> Result<String>) -> Result<Self> {
        let bad = |k: &str| Error::Checkpoint(format!("malformed trainer metadata {k}"));
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| bad(k));
        let float = |k: &str| Ok::<f64, Error>(f64::from_bits(num(k)?));
        let parse_bits = |s: &str| -> Result<Option<f64>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse::<u64>().map(|b| Some(f64::from_bits(b))).map_err(|_| bad("trainer.log"))
            }
        };
        let mut log = Vec::new();
        let raw = get("trainer.log")?;
        for row in raw.split(';').filter(|r| !r.is_empty()) {
            let f: Vec<&str> = row.split(':').collect();
            if f.len() != 6 {
                return Err(bad("trainer.log"));
            }
            log.push(EpochLog {
                epoch: f[0].parse().map_err(|_| bad("trainer.log"))?,
                precision_at_5: parse_bits(f[1])?.ok_or_else(|| bad("trainer.log"))?,
                ndcg_at_5: parse_bits(f[2])?.ok_or_else(|| bad("trainer.log"))?,
                mean_reward: parse_bits(f[3])?,
                d_loss: parse_bits(f[4])?,
                d_accuracy: parse_bits(f[5])?,
            });
        }
        let rng_state: RngState = get("trainer.rng")?.parse().map_err(|_| bad("trainer.rng"))?;
        Ok(Self {
            epoch: num("trainer.epoch")? as usize,
            g_steps_done: num("trainer.g_steps")? as usize,
            d_steps_done: num("trainer.d_steps")? as usize,
            log,
            best_epoch: num("trainer.best_epoch")? as usize,
            best_ndcg: float("trainer.best_ndcg")?,
            reward_mean: float("trainer.reward_mean")?,
            rng: Rng::from_state(rng_state),
        })
    }
}

/// Validation relevance used to pick the best generator.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'v> {
    pub relevant: &'v [Vec<usize>],
    pub seen: &'v [Vec<usize>],
}

fn validate(g: &MixtureScorer, data: &TrainingData, val: &Validation) -> Result<Metrics> {
    let r = rank_users(g, &data.inputs, val.relevant, val.seen, "generator")?;
    if r.mean.0.iter().any(|v| v.is_nan()) {
        return Err(Error::Diverged("validation metric is NaN".into()));
    }
    Ok(r.mean)
}

/// Alternates generator and discriminator steps until `cfg.epochs`.
///
/// Resumable: `state` carries the epoch counter and RNG, `best` the best
/// generator so far. `on_epoch` runs after every completed epoch (and after
/// the initial evaluation of the pretrained generator).
pub fn train_adversarial(
    g: &mut MixtureScorer,
    d: &mut MixtureScorer,
    best: &mut MixtureScorer,
    data: &TrainingData,
    val: &Validation,
    cfg: &AdversarialConfig,
    state: &mut TrainerState,
    mut on_epoch: impl FnMut(&TrainerState, &MixtureScorer, &MixtureScorer, &MixtureScorer) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if state.log.is_empty() {
        let m = validate(g, data, val)?;
        state.log.push(EpochLog { epoch: 0, precision_at_5: m.precision_at_5(), ndcg_at_5: m.ndcg_at_5(), mean_reward: None, d_loss: None, d_accuracy: None });
        state.best_ndcg = m.ndcg_at_5();
        state.best_epoch = 0;
        *best = g.clone();
        on_epoch(state, g, d, best)?;
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut reward_sum = 0.0;
        for _ in 0..cfg.g_steps {
            let batch = data.sample_playable(cfg.batch_size, &mut state.rng)?;
            let s = g_policy_gradient_step(g, d, data, &batch, cfg, &mut state.rng).map_err(|e| abort(e, "generator", epoch))?;
            reward_sum += s.mean_reward;
            state.g_steps_done += 1;
            state.reward_mean += (s.mean_reward - state.reward_mean) / state.g_steps_done as f64;
        }
        let (mut loss, mut acc) = (0.0, 0.0);
        for _ in 0..cfg.d_steps {
            let batch = data.sample_playable(cfg.batch_size, &mut state.rng)?;
            let triples = d_batch(g, data, &batch, &mut state.rng)?;
            let s = d_update(d, &data.inputs, &triples, cfg.margin, &cfg.d_optimizer).map_err(|e| abort(e, "discriminator", epoch))?;
            loss += s.loss / triples.len() as f64;
            acc += s.accuracy;
            state.d_steps_done += 1;
        }
        let m = validate(g, data, val)?;
        let avg = |x: f64, n: usize| (n > 0).then(|| x / n as f64);
        state.epoch += 1;
        state.log.push(EpochLog {
            epoch: state.epoch,
            precision_at_5: m.precision_at_5(),
            ndcg_at_5: m.ndcg_at_5(),
            mean_reward: avg(reward_sum, cfg.g_steps),
            d_loss: avg(loss, cfg.d_steps),
            d_accuracy: avg(acc, cfg.d_steps),
        });
        if m.ndcg_at_5() > state.best_ndcg {
            state.best_ndcg = m.ndcg_at_5();
            state.best_epoch = state.epoch;
            *best = g.clone();
        }
        info!(
            "epoch {} P@5 {:.4} NDCG@5 {:.4} reward {:.4} d_loss {:.4} d_acc {:.3}",
            state.epoch,
            m.precision_at_5(),
            m.ndcg_at_5(),
            reward_sum / cfg.g_steps.max(1) as f64,
            loss / cfg.d_steps.max(1) as f64,
            acc / cfg.d_steps.max(1) as f64
        );
        on_epoch(state, g, d, best)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SessionEvent, SessionizedDataset};
    use crate::mf::FactorStore;
    use crate::mixture::{MixtureVariant, ScorerConfig};
    use crate::nn::Rng;

    fn world() -> SessionizedDataset {
        // 2 users, 4 movies, 2 sessions; user 0 likes 0 and 1, user 1 likes 2.
        let raw = [(0, 0, 5.0, 0), (0, 1, 4.0, 1), (0, 3, 1.0, 1), (1, 2, 5.0, 0), (1, 0, 2.0, 1)];
        let mut us = vec![vec![Vec::new(); 2]; 2];
        let mut ms = vec![vec![Vec::new(); 2]; 4];
        let mut events = Vec::new();
        for (u, m, r, t) in raw {
            us[u][t].push((m, r));
            ms[m][t].push((u, r));
            events.push(SessionEvent { user: u, movie: m, rating: r, positive: r >= 4.0, session: t });
        }
        SessionizedDataset { start_timestamp: 1, session_length_days: 30, session_count: 2, num_users: 2, num_movies: 4, user_sessions: us, movie_sessions: ms, events }
    }

    fn scorer(seed: u64) -> MixtureScorer {
        let mut rng = Rng::new(seed);
        let fs = FactorStore::random(2, 4, 2, &mut rng).unwrap();
        let cfg = ScorerConfig { variant: MixtureVariant::V4, hidden: 3, input_dim: 2, attention_dim: 2, ..Default::default() };
        let mut s = MixtureScorer::new(cfg, fs, &mut rng).unwrap();
        for t in s.tensors_mut() {
            t.values.iter_mut().for_each(|v| *v = rng.uniform() - 0.5);
        }
        s
    }

    #[test]
    fn hinge_examples() {
        assert!((hinge(0.9, 0.1, 0.2) - 0.0).abs() < 1e-15);
        assert_eq!(hinge(0.5, 0.5, 0.2), 0.2);
        assert!((hinge(0.3, 0.4, 0.2) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn d_hinge_requires_a_positive() {
        let w = world();
        let data = TrainingData::new(ModelInputs::new(&w, None));
        let d = scorer(1);
        let fwd = d.forward_all(&data.inputs).unwrap();
        assert!(d_hinge(&d, &fwd, &data, 0.2, 0, 3, 1, 1).unwrap() >= 0.0);
        assert!(matches!(d_hinge(&d, &fwd, &data, 0.2, 0, 1, 3, 1), Err(Error::Contract(_))));
        // Siamese arms: the same (u, m, t) scores bit-identically whichever arm it sits in.
        let h1 = d_hinge(&d, &fwd, &data, 0.2, 0, 0, 1, 1).unwrap();
        let h2 = hinge(d.score(&fwd, 0, 1, 1).unwrap(), d.score(&fwd, 0, 0, 1).unwrap(), 0.2);
        assert_eq!(h1.to_bits(), h2.to_bits());
    }

    #[test]
    fn reward_examples() {
        assert!(reward_from_compressed(1.0 - DELTA).abs() < 1e-7);
        assert!((reward_from_compressed(0.5) + std::f64::consts::LN_2).abs() < 1e-12);
        assert!((reward_from_compressed(0.0) + 18.42).abs() < 1e-2);
        assert!(reward_from_compressed(0.0).is_finite());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_rewards(&[1.0, 2.0, 3.0]);
        for (a, b) in n.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(normalize_rewards(&[4.0, 4.0, 4.0]), vec![0.0; 3]);
        assert_eq!(normalize_rewards(&[7.0]), vec![0.0]);
    }

    #[test]
    fn g_sample_examples() {
        let mut rng = Rng::new(3);
        assert!(g_sample(&[0.0], 0, &mut rng).is_err());
        let single = g_sample(&[1.3], 5, &mut rng).unwrap();
        assert!(single.iter().all(|&(i, lp)| i == 0 && lp == 0.0));
        let n = 100_000;
        let draws = g_sample(&[0.0; 4], n, &mut rng).unwrap();
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for c in 0..4 {
            let cnt = draws.iter().filter(|d| d.0 == c).count() as f64;
            assert!((cnt - n as f64 * 0.25).abs() < 3.0 * sd, "candidate {c}: {cnt}");
        }
        let draws = g_sample(&[0.0, 20.0, 0.0], 10_000, &mut rng).unwrap();
        assert!(draws.iter().filter(|d| d.0 == 1).count() as f64 > 0.999 * 10_000.0);
    }

    #[test]
    fn reinforce_zero_for_constant_rewards_and_single_sample_form() {
        let probs = softmax(&[0.2, -0.1, 0.5]);
        assert!(reinforce_logit_gradient(&probs, &[0, 2, 2], &[0.0; 3]).iter().all(|&g| g == 0.0));
        // K = 1: grad log G(m_1) * r_1.
        let g = reinforce_logit_gradient(&probs, &[1], &[0.7]);
        for (m, gm) in g.iter().enumerate() {
            let want = 0.7 * (f64::from(u8::from(m == 1)) - probs[m]);
            assert!((gm - want).abs() < 1e-15);
        }
    }

    #[test]
    fn d_grads_match_hand_derivation_and_are_linear() {
        let w = world();
        let inputs = ModelInputs::new(&w, None);
        let mut d = scorer(4);
        // Put every arm inside the margin so the hinge is differentiable.
        d.factors.movie_bias.values = vec![0.0, 2.5, -1.0, -1.0];
        let fwd = d.forward_all(&inputs).unwrap();
        let tr = DTriple { user: 0, pos: 1, true_neg: 3, generated: 2, step: 1 };
        let (g1, s1) = d_logit_grads(&d, &fwd, &[tr], 1.0).unwrap();
        let gp = d.score(&fwd, 0, 1, 1).unwrap();
        let mut want_pos = 0.0;
        let mut loss = 0.0;
        for neg in [3, 2] {
            let gn = d.score(&fwd, 0, neg, 1).unwrap();
            let h = 1.0 - gp + gn;
            assert!(h > 0.0 && h < 1.0);
            loss -= (1.0 - h + DELTA).ln();
            let up = 1.0 / (1.0 - h + DELTA);
            want_pos -= up * gp * (1.0 - gp);
            let gneg: f64 = g1.iter().filter(|g| g.movie == neg).map(|g| g.grad).sum();
            assert!((gneg - up * gn * (1.0 - gn)).abs() < 1e-8);
        }
        let gpos: f64 = g1.iter().filter(|g| g.movie == 1).map(|g| g.grad).sum();
        assert!((gpos - want_pos).abs() < 1e-8);
        assert!((s1.loss - loss).abs() < 1e-8);

        let mut a = d.clone();
        a.zero_grad();
        a.backward(&inputs, &fwd, &g1).unwrap();
        let (g2, _) = d_logit_grads(&d, &fwd, &[tr, tr], 1.0).unwrap();
        let mut b = d.clone();
        b.zero_grad();
        b.backward(&inputs, &fwd, &g2).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            for (p, q) in x.grad.iter().zip(&y.grad) {
                assert!((2.0 * p - q).abs() <= 1e-12 * q.abs().max(1.0));
            }
        }
        assert!(d_logit_grads(&d, &fwd, &[], 1.0).is_err());
    }

    #[test]
    fn generated_positive_sits_on_the_plateau() {
        let w = world();
        let d = scorer(2);
        let fwd = d.forward_all(&ModelInputs::new(&w, None)).unwrap();
        let tr = DTriple { user: 0, pos: 1, true_neg: 1, generated: 1, step: 1 };
        let (grads, _) = d_logit_grads(&d, &fwd, &[tr], 0.2).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn zero_epochs_returns_pretrained_models() {
        let w = world();
        let data = TrainingData::new(ModelInputs::new(&w, None));
        let (mut g, mut d) = (scorer(5), scorer(6));
        let (g0, d0) = (g.clone(), d.clone());
        let mut best = g.clone();
        let rel = vec![vec![2], vec![1]];
        let seen = vec![vec![0, 1, 3], vec![0, 2]];
        let val = Validation { relevant: &rel, seen: &seen };
        let cfg = AdversarialConfig { epochs: 0, ..Default::default() };
        let mut st = TrainerState::new(Rng::new(0));
        train_adversarial(&mut g, &mut d, &mut best, &data, &val, &cfg, &mut st, |_, _, _, _| Ok(())).unwrap();
        assert_eq!(g, g0);
        assert_eq!(d, d0);
        assert_eq!(best, g0);
        assert_eq!(st.log.len(), 1);
    }

    #[test]
    fn training_is_deterministic_and_state_roundtrips() {
        let w = world();
        let data = TrainingData::new(ModelInputs::new(&w, None));
        let rel = vec![vec![2], vec![1]];
        let seen = vec![vec![0, 1, 3], vec![0, 2]];
        let val = Validation { relevant: &rel, seen: &seen };
        let cfg = AdversarialConfig { epochs: 3, batch_size: 4, samples: 5, ..Default::default() };
        let run = || {
            let (mut g, mut d) = (scorer(5), scorer(6));
            let mut best = g.clone();
            let mut st = TrainerState::new(Rng::new(9));
            train_adversarial(&mut g, &mut d, &mut best, &data, &val, &cfg, &mut st, |_, _, _, _| Ok(())).unwrap();
            (st, g)
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.curve_csv("h"), b.curve_csv("h"));
        assert_eq!(ga, gb);
        assert_eq!(a.log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let meta: std::collections::BTreeMap<String, String> = a.to_meta().into_iter().collect();
        let back = TrainerState::from_meta(|k| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(k.into()))).unwrap();
        assert_eq!(back.curve_csv("h"), a.curve_csv("h"));
        assert_eq!(back.rng.state(), a.rng.state());
    }

    #[test]
    fn pretraining_reduces_hinge() {
        let w = world();
        let data = TrainingData::new(ModelInputs::new(&w, None));
        let mut m = scorer(8);
        let cfg = PretrainConfig {
            epochs: 30,
            batches_per_epoch: Some(4),
            batch_size: 8,
            margin: 0.2,
            optimizer: OptimizerConfig { learning_rate: 0.05, clip: 0.2, l2_lambda: 0.0 },
        };
        let h = pretrain_pairwise(&mut m, &data, &cfg, &mut Rng::new(1)).unwrap();
        let first: f64 = h[..5].iter().sum();
        let last: f64 = h[25..].iter().sum();
        assert!(last < first, "{first} -> {last}");
    }
}
