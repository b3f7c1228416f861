//! Mixed MF + session-RNN scoring under the four LSIC strategies.
//!
//! Every variant scores `s = e_u . e_m + h_u(t) . h_m(t) + b_u + b_m` and
//! outputs `sigmoid(s)`; the variants differ only in how the recurrent
//! states are produced:
//!
//! * `V1` - plain session LSTMs.
//! * `V2` - initial hidden state `W e + b` from the entity's factor.
//! * `V3` - `V2` plus the factor fed to every step as a static context.
//! * `V4` - a per-step attention context over the factor pool of the same
//!   side, weighted by `softmax_k sigma(h_prev, e_k)`.
//!
//! Step indexing: step 0 consumes no ratings (only the movie content
//! projection, when wired) and step `t >= 1` consumes session `t - 1`.
//! The state at step `t` therefore summarises every session before `t`,
//! which is the state used to score interactions that happen in session `t`.

use std::fmt;
use std::str::FromStr;

use crate::data::{ContentFeatures, SessionizedDataset};
use crate::error::{Error, Result};
use crate::mf::FactorStore;
use crate::nn::{axpy, dot, init_uniform, sigmoid, softmax, ParamTensor, Parameters, Rng};
use crate::rnn::{bptt_backward_with, encode_with, InputEmbedder, LstmCell, Session, Trajectory, INIT_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixtureVariant {
    V1,
    V2,
    V3,
    V4,
}

impl MixtureVariant {
    pub const ALL: [MixtureVariant; 4] = [Self::V1, Self::V2, Self::V3, Self::V4];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::V1 => "v1",
            Self::V2 => "v2",
            Self::V3 => "v3",
            Self::V4 => "v4",
        }
    }

    fn has_init_map(self) -> bool {
        matches!(self, Self::V2 | Self::V3)
    }

    fn has_context(self) -> bool {
        matches!(self, Self::V3 | Self::V4)
    }
}

impl fmt::Display for MixtureVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixtureVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "v3" => Ok(Self::V3),
            "v4" => Ok(Self::V4),
            other => Err(Error::Config(format!("unknown mixture variant {other:?} (expected v1|v2|v3|v4)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Movie,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Movie => "movie",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerConfig {
    pub variant: MixtureVariant,
    /// LSTM hidden size `H`.
    pub hidden: usize,
    /// LSTM input size `D_in`.
    pub input_dim: usize,
    /// Width of the movie content vectors, when a projection is wired.
    pub content_dim: Option<usize>,
    /// Width `A` of the attention towers (V4).
    pub attention_dim: usize,
    /// Uniform subsample of each attention pool; `None` uses every entity.
    pub attention_pool_size: Option<usize>,
    pub pool_seed: u64,
    /// Start the V2/V3 state map at the identity (requires `d == H`).
    pub identity_init_map: bool,
    pub bptt_truncation: Option<usize>,
    /// Half-width of the uniform init of recurrent, embedding and attention weights.
    pub init_range: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            variant: MixtureVariant::V4,
            hidden: 10,
            input_dim: 15,
            content_dim: None,
            attention_dim: 8,
            attention_pool_size: None,
            pool_seed: 0,
            identity_init_map: false,
            bptt_truncation: None,
            init_range: INIT_RANGE,
        }
    }
}

/// Two-tower compatibility `sigma(h, e) = tanh(Q h + q) . tanh(K e + k)`.
///
/// Factoring sigma this way lets the key side be computed once per pool
/// member instead of once per (step, member) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNet {
    pub query_w: ParamTensor,
    pub query_b: ParamTensor,
    pub key_w: ParamTensor,
    pub key_b: ParamTensor,
}

impl AttentionNet {
    pub fn new(prefix: &str, hidden: usize, dim: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            query_w: init_uniform(format!("{prefix}/query_w"), &[width, hidden], -INIT_RANGE, INIT_RANGE, rng)?,
            query_b: ParamTensor::zeros(format!("{prefix}/query_b"), &[width]),
            key_w: init_uniform(format!("{prefix}/key_w"), &[width, dim], -INIT_RANGE, INIT_RANGE, rng)?,
            key_b: ParamTensor::zeros(format!("{prefix}/key_b"), &[width]),
        })
    }

    pub fn width(&self) -> usize {
        self.query_b.len()
    }

    pub fn query(&self, h: &[f64]) -> Vec<f64> {
        tower(&self.query_w, &self.query_b, h)
    }

    pub fn key(&self, e: &[f64]) -> Vec<f64> {
        tower(&self.key_w, &self.key_b, e)
    }

    pub fn sigma(&self, h: &[f64], e: &[f64]) -> f64 {
        dot(&self.query(h), &self.key(e))
    }
}

fn tower(w: &ParamTensor, b: &ParamTensor, x: &[f64]) -> Vec<f64> {
    (0..b.len()).map(|r| (b.values[r] + dot(w.row(r), x)).tanh()).collect()
}

/// Gradient of `tanh(W x + b)` given upstream `dy` and output `y`;
/// accumulates into `W`, `b` and `dx`.
fn tower_backward(w: &mut ParamTensor, b: &mut ParamTensor, x: &[f64], y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = x.len();
    for r in 0..y.len() {
        let g = dy[r] * (1.0 - y[r] * y[r]);
        if g == 0.0 {
            continue;
        }
        b.grad[r] += g;
        axpy(g, x, &mut w.grad[r * cols..(r + 1) * cols]);
        axpy(g, &w.values[r * cols..(r + 1) * cols], dx);
    }
}

impl Parameters for AttentionNet {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.query_w, &self.query_b, &self.key_w, &self.key_b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.query_w, &mut self.query_b, &mut self.key_w, &mut self.key_b]
    }
}

/// One half of an attention context: weights over the pool and the mixed factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionContext {
    pub members: Vec<usize>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

/// Softmax over `scores` followed by the convex combination of `rows`.
pub fn attend<'a>(scores: &[f64], rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("attention pool is empty".into()));
    }
    let weights = softmax(scores);
    let mut context = vec![0.0; dim];
    for (w, row) in weights.iter().zip(rows) {
        axpy(*w, row, &mut context);
    }
    Ok((weights, context))
}

/// Recurrent components of one side (user or movie).
#[derive(Debug, Clone, PartialEq)]
pub struct SideModel {
    pub cell: LstmCell,
    pub embedder: InputEmbedder,
    /// `[H, d]` map and `[H]` bias producing the initial hidden state (V2, V3).
    pub init_w: Option<ParamTensor>,
    pub init_b: Option<ParamTensor>,
    pub attention: Option<AttentionNet>,
}

impl SideModel {
    fn new(side: Side, cfg: &ScorerConfig, dim: usize, counterparts: usize, rng: &mut Rng) -> Result<Self> {
        let p = side.name();
        let v = cfg.variant;
        let context = if v.has_context() { dim } else { 0 };
        if !(cfg.init_range >= 0.0 && cfg.init_range.is_finite()) {
            return Err(Error::Config(format!("init range must be non-negative, got {}", cfg.init_range)));
        }
        let scale = cfg.init_range / INIT_RANGE;
        let mut cell = LstmCell::new(&format!("{p}/cell"), cfg.hidden, cfg.input_dim, context, rng)?;
        let content = if side == Side::Movie { cfg.content_dim } else { None };
        let mut embedder = InputEmbedder::new(&format!("{p}/embed"), counterparts, cfg.input_dim, content, rng)?;
        rescale(&mut cell, scale);
        rescale(&mut embedder, scale);
        let (init_w, init_b) = if v.has_init_map() {
            let mut w = ParamTensor::zeros(format!("{p}/init_w"), &[cfg.hidden, dim]);
            if cfg.identity_init_map {
                if dim != cfg.hidden {
                    return Err(Error::Config(format!(
                        "identity state map needs factor dim == hidden size ({dim} != {})",
                        cfg.hidden
                    )));
                }
                for r in 0..dim {
                    w.values[r * dim + r] = 1.0;
                }
            }
            (Some(w), Some(ParamTensor::zeros(format!("{p}/init_b"), &[cfg.hidden])))
        } else {
            (None, None)
        };
        let attention = if v == MixtureVariant::V4 {
            if cfg.attention_dim == 0 {
                return Err(Error::Config("attention width must be at least 1".into()));
            }
            let mut a = AttentionNet::new(&format!("{p}/attn"), cfg.hidden, dim, cfg.attention_dim, rng)?;
            rescale(&mut a, scale);
            Some(a)
        } else {
            None
        };
        Ok(Self { cell, embedder, init_w, init_b, attention })
    }
}

fn rescale(p: &mut impl Parameters, scale: f64) {
    if scale != 1.0 {
        for t in p.tensors_mut() {
            t.values.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

impl Parameters for SideModel {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = self.cell.tensors();
        v.extend(self.embedder.tensors());
        v.extend(self.init_w.iter());
        v.extend(self.init_b.iter());
        if let Some(a) = &self.attention {
            v.extend(a.tensors());
        }
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.cell.tensors_mut();
        v.extend(self.embedder.tensors_mut());
        v.extend(self.init_w.iter_mut());
        v.extend(self.init_b.iter_mut());
        if let Some(a) = &mut self.attention {
            v.extend(a.tensors_mut());
        }
        v
    }
}

/// Session data a scorer reads during encoding.
#[derive(Debug, Clone, Copy)]
pub struct ModelInputs<'a> {
    pub sessions: &'a SessionizedDataset,
    pub content: Option<&'a ContentFeatures>,
}

const EMPTY: &Session = &[];

impl<'a> ModelInputs<'a> {
    pub fn new(sessions: &'a SessionizedDataset, content: Option<&'a ContentFeatures>) -> Self {
        Self { sessions, content }
    }

    /// Largest step index that can be encoded (all training sessions consumed).
    pub fn last_step(&self) -> usize {
        self.sessions.session_count
    }

    fn step_sessions(&self, side: Side, entity: usize, steps: usize) -> Vec<&'a Session> {
        let raw = match side {
            Side::User => &self.sessions.user_sessions[entity],
            Side::Movie => &self.sessions.movie_sessions[entity],
        };
        std::iter::once(EMPTY).chain(raw.iter().take(steps - 1).map(|s| s.as_slice())).collect()
    }

    fn content_for(&self, side: Side, entity: usize, emb: &InputEmbedder) -> Option<&'a [f64]> {
        match (side, self.content, &emb.content_w) {
            (Side::Movie, Some(c), Some(_)) => Some(c.vectors[entity].as_slice()),
            _ => None,
        }
    }
}

/// Cached trajectories for the entities of one side in a batch.
#[derive(Debug, Clone)]
pub struct SideForward {
    slots: Vec<usize>,
    pub entities: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
    /// Key-tower outputs per pool member (V4).
    keys: Vec<Vec<f64>>,
}

impl SideForward {
    fn slot(&self, entity: usize, side: Side) -> Result<usize> {
        match self.slots.get(entity) {
            Some(&s) if s != usize::MAX => Ok(s),
            _ => Err(Error::Index(format!("{} {entity} was not encoded in this batch", side.name()))),
        }
    }

    pub fn trajectory(&self, entity: usize) -> Option<&Trajectory> {
        let s = *self.slots.get(entity)?;
        (s != usize::MAX).then(|| &self.trajectories[s])
    }
}

/// Forward state of a batch: trajectories for every encoded user and movie.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub user: SideForward,
    pub movie: SideForward,
    pub last_step: usize,
}

/// Upstream gradient on one logit `s(user, movie, step)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitGrad {
    pub user: usize,
    pub movie: usize,
    pub step: usize,
    pub grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureScorer {
    pub config: ScorerConfig,
    pub factors: FactorStore,
    pub user_side: SideModel,
    pub movie_side: SideModel,
    user_pool: Vec<usize>,
    movie_pool: Vec<usize>,
}

impl MixtureScorer {
    /// Builds a scorer around (a copy of) pretrained factors; recurrent
    /// weights are drawn from `rng`.
    pub fn new(config: ScorerConfig, factors: FactorStore, rng: &mut Rng) -> Result<Self> {
        if config.hidden == 0 || config.input_dim == 0 {
            return Err(Error::Config("hidden and input sizes must be positive".into()));
        }
        let (u, m, d) = (factors.num_users(), factors.num_movies(), factors.dim());
        let user_side = SideModel::new(Side::User, &config, d, m, rng)?;
        let movie_side = SideModel::new(Side::Movie, &config, d, u, rng)?;
        let mut pool_rng = Rng::stream(config.pool_seed, 0x9001);
        let user_pool = make_pool(u, config.attention_pool_size, &mut pool_rng)?;
        let movie_pool = make_pool(m, config.attention_pool_size, &mut pool_rng)?;
        Ok(Self { config, factors, user_side, movie_side, user_pool, movie_pool })
    }

    pub fn variant(&self) -> MixtureVariant {
        self.config.variant
    }

    pub fn num_users(&self) -> usize {
        self.factors.num_users()
    }

    pub fn num_movies(&self) -> usize {
        self.factors.num_movies()
    }

    pub fn side(&self, side: Side) -> &SideModel {
        match side {
            Side::User => &self.user_side,
            Side::Movie => &self.movie_side,
        }
    }

    fn side_factors(&self, side: Side) -> &ParamTensor {
        match side {
            Side::User => &self.factors.user_factors,
            Side::Movie => &self.factors.movie_factors,
        }
    }

    pub fn pool(&self, side: Side) -> &[usize] {
        match side {
            Side::User => &self.user_pool,
            Side::Movie => &self.movie_pool,
        }
    }

    /// Initial `(h, c)` from the factor map (V2/V3); `None` for zero states.
    pub fn prepare_v2(&self, side: Side, entity: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let m = self.side(side);
        let (w, b) = (m.init_w.as_ref()?, m.init_b.as_ref()?);
        let e = self.side_factors(side).row(entity);
        let h = (0..b.len()).map(|r| b.values[r] + dot(w.row(r), e)).collect();
        Some((h, vec![0.0; b.len()]))
    }

    /// The static per-step context of V3: the entity's own factor at every step.
    pub fn prepare_v3(&self, side: Side, entity: usize, steps: usize) -> Vec<Vec<f64>> {
        vec![self.side_factors(side).row(entity).to_vec(); steps]
    }

    fn pool_keys(&self, side: Side) -> Vec<Vec<f64>> {
        match &self.side(side).attention {
            Some(a) => {
                let f = self.side_factors(side);
                self.pool(side).iter().map(|&k| a.key(f.row(k))).collect()
            }
            None => Vec::new(),
        }
    }

    fn attend_keys(&self, side: Side, keys: &[Vec<f64>], h_prev: &[f64]) -> Result<AttentionContext> {
        let a = self
            .side(side)
            .attention
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("variant {} has no attention", self.variant())))?;
        let q = a.query(h_prev);
        let scores: Vec<f64> = keys.iter().map(|k| dot(&q, k)).collect();
        let f = self.side_factors(side);
        let pool = self.pool(side);
        let (weights, context) = attend(&scores, pool.iter().map(|&k| f.row(k)), f.shape[1])?;
        Ok(AttentionContext { members: pool.to_vec(), weights, context })
    }

    /// Attention weights over this side's pool for hidden state `h_prev` (V4).
    pub fn attention_context(&self, side: Side, h_prev: &[f64]) -> Result<AttentionContext> {
        self.attend_keys(side, &self.pool_keys(side), h_prev)
    }

    fn encode_entity(
        &self,
        side: Side,
        inputs: &ModelInputs,
        keys: &[Vec<f64>],
        entity: usize,
        steps: usize,
    ) -> Result<Trajectory> {
        let m = self.side(side);
        let sessions = inputs.step_sessions(side, entity, steps);
        let content = inputs.content_for(side, entity, &m.embedder);
        let init = self.prepare_v2(side, entity);
        let init_ref = init.as_ref().map(|(h, c)| (h.as_slice(), c.as_slice()));
        let own = self.side_factors(side).row(entity);
        let variant = self.variant();
        encode_with(&m.cell, &m.embedder, &sessions, content, init_ref, |_, h_prev| match variant {
            MixtureVariant::V3 => Ok(Some(own.to_vec())),
            MixtureVariant::V4 => Ok(Some(self.attend_keys(side, keys, h_prev)?.context)),
            _ => Ok(None),
        })
    }

    fn forward_side(&self, side: Side, inputs: &ModelInputs, entities: &[usize], steps: usize) -> Result<SideForward> {
        let n = match side {
            Side::User => self.num_users(),
            Side::Movie => self.num_movies(),
        };
        let mut slots = vec![usize::MAX; n];
        let mut unique = Vec::new();
        for &e in entities {
            if e >= n {
                return Err(Error::Index(format!("{} {e} >= {n}", side.name())));
            }
            if slots[e] == usize::MAX {
                slots[e] = unique.len();
                unique.push(e);
            }
        }
        let keys = self.pool_keys(side);
        let trajectories = unique
            .iter()
            .map(|&e| self.encode_entity(side, inputs, &keys, e, steps))
            .collect::<Result<Vec<_>>>()?;
        Ok(SideForward { slots, entities: unique, trajectories, keys })
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        let s = inputs.sessions;
        if s.num_users != self.num_users() || s.num_movies != self.num_movies() {
            return Err(Error::Shape(format!(
                "sessions cover {}x{} entities, scorer has {}x{}",
                s.num_users,
                s.num_movies,
                self.num_users(),
                self.num_movies()
            )));
        }
        Ok(())
    }

    /// Encodes the listed users and movies through step `last_step` (inclusive).
    pub fn forward(
        &self,
        inputs: &ModelInputs,
        users: &[usize],
        movies: &[usize],
        last_step: usize,
    ) -> Result<BatchForward> {
        self.check_inputs(inputs)?;
        if last_step > inputs.last_step() {
            return Err(Error::Index(format!(
                "step {last_step} beyond the {} encodable steps",
                inputs.last_step() + 1
            )));
        }
        Ok(BatchForward {
            user: self.forward_side(Side::User, inputs, users, last_step + 1)?,
            movie: self.forward_side(Side::Movie, inputs, movies, last_step + 1)?,
            last_step,
        })
    }

    /// Encodes every user and movie through every training session.
    pub fn forward_all(&self, inputs: &ModelInputs) -> Result<BatchForward> {
        let users: Vec<usize> = (0..self.num_users()).collect();
        let movies: Vec<usize> = (0..self.num_movies()).collect();
        self.forward(inputs, &users, &movies, inputs.last_step())
    }

    fn states<'f>(&self, fwd: &'f BatchForward, i: usize, j: usize, t: usize) -> Result<(&'f [f64], &'f [f64])> {
        if t > fwd.last_step {
            return Err(Error::Index(format!("step {t} beyond encoded range 0..={}", fwd.last_step)));
        }
        let hu = fwd.user.trajectories[fwd.user.slot(i, Side::User)?].hidden(t)?;
        let hm = fwd.movie.trajectories[fwd.movie.slot(j, Side::Movie)?].hidden(t)?;
        Ok((hu, hm))
    }

    /// Pre-activation `s` for user `i`, movie `j` at step `t`.
    pub fn logit(&self, fwd: &BatchForward, i: usize, j: usize, t: usize) -> Result<f64> {
        let (hu, hm) = self.states(fwd, i, j, t)?;
        let f = &self.factors;
        Ok(f.affinity(i, j) + dot(hu, hm) + f.user_bias.values[i] + f.movie_bias.values[j])
    }

    /// Mixed score in `(0, 1)`.
    pub fn score(&self, fwd: &BatchForward, i: usize, j: usize, t: usize) -> Result<f64> {
        Ok(sigmoid(self.logit(fwd, i, j, t)?))
    }

    /// Logits of user `i` against each movie in `movies` at step `t`.
    pub fn logits_for_user(&self, fwd: &BatchForward, i: usize, movies: &[usize], t: usize) -> Result<Vec<f64>> {
        movies.iter().map(|&j| self.logit(fwd, i, j, t)).collect()
    }

    /// Accumulates parameter gradients for the given logit gradients.
    /// Gradients add onto whatever is already stored.
    pub fn backward(&mut self, inputs: &ModelInputs, fwd: &BatchForward, grads: &[LogitGrad]) -> Result<()> {
        self.check_inputs(inputs)?;
        let hsz = self.config.hidden;
        let steps = fwd.last_step + 1;
        let zeros = || vec![vec![0.0; hsz]; steps];
        let mut user_dh = vec![Vec::new(); fwd.user.entities.len()];
        let mut movie_dh = vec![Vec::new(); fwd.movie.entities.len()];
        for g in grads {
            if !g.grad.is_finite() {
                return Err(Error::NonFinite(format!("logit gradient {} for ({}, {})", g.grad, g.user, g.movie)));
            }
            let (hu, hm) = self.states(fwd, g.user, g.movie, g.step)?;
            let su = fwd.user.slot(g.user, Side::User)?;
            let sm = fwd.movie.slot(g.movie, Side::Movie)?;
            if user_dh[su].is_empty() {
                user_dh[su] = zeros();
            }
            if movie_dh[sm].is_empty() {
                movie_dh[sm] = zeros();
            }
            axpy(g.grad, hm, &mut user_dh[su][g.step]);
            axpy(g.grad, hu, &mut movie_dh[sm][g.step]);
            let f = &mut self.factors;
            let d = f.dim();
            let (i, j) = (g.user, g.movie);
            for k in 0..d {
                let eu = f.user_factors.values[i * d + k];
                let em = f.movie_factors.values[j * d + k];
                f.user_factors.grad[i * d + k] += g.grad * em;
                f.movie_factors.grad[j * d + k] += g.grad * eu;
            }
            f.user_bias.grad[i] += g.grad;
            f.movie_bias.grad[j] += g.grad;
        }
        self.backward_side(Side::User, inputs, &fwd.user, &user_dh)?;
        self.backward_side(Side::Movie, inputs, &fwd.movie, &movie_dh)
    }

    fn backward_side(
        &mut self,
        side: Side,
        inputs: &ModelInputs,
        sf: &SideForward,
        dh: &[Vec<Vec<f64>>],
    ) -> Result<()> {
        let variant = self.config.variant;
        let truncation = self.config.bptt_truncation;
        let (model, factors, pool) = match side {
            Side::User => (&mut self.user_side, &mut self.factors.user_factors, &self.user_pool),
            Side::Movie => (&mut self.movie_side, &mut self.factors.movie_factors, &self.movie_pool),
        };
        let SideModel { cell, embedder, init_w, init_b, attention } = model;
        let width = attention.as_ref().map_or(0, |a| a.width());
        let mut dkeys = vec![vec![0.0; width]; sf.keys.len()];
        let d = factors.shape[1];
        let mut any_key_grad = false;

        for (slot, &entity) in sf.entities.iter().enumerate() {
            if dh[slot].is_empty() {
                continue;
            }
            let traj = &sf.trajectories[slot];
            let sessions = inputs.step_sessions(side, entity, traj.len());
            let content = inputs.content_for(side, entity, embedder);
            let out = bptt_backward_with(cell, embedder, traj, &sessions, content, &dh[slot], truncation, |t, dctx, dh_prev| {
                match variant {
                    MixtureVariant::V3 => axpy(1.0, dctx, factors.grad_row_mut(entity)),
                    MixtureVariant::V4 => {
                        let att = attention.as_mut().expect("v4 has attention");
                        let h_prev = traj.hidden_before(t);
                        let q = att.query(h_prev);
                        let scores: Vec<f64> = sf.keys.iter().map(|k| dot(&q, k)).collect();
                        let w = softmax(&scores);
                        let dots: Vec<f64> = pool.iter().map(|&k| dot(dctx, factors.row(k))).collect();
                        let mean: f64 = w.iter().zip(&dots).map(|(a, b)| a * b).sum();
                        let mut dq = vec![0.0; q.len()];
                        for (k, &member) in pool.iter().enumerate() {
                            axpy(w[k], dctx, factors.grad_row_mut(member));
                            let ds = w[k] * (dots[k] - mean);
                            if ds != 0.0 {
                                axpy(ds, &sf.keys[k], &mut dq);
                                axpy(ds, &q, &mut dkeys[k]);
                                any_key_grad = true;
                            }
                        }
                        tower_backward(&mut att.query_w, &mut att.query_b, h_prev, &q, &dq, dh_prev);
                    }
                    _ => {}
                }
            })?;
            if let (Some(w), Some(b)) = (init_w.as_mut(), init_b.as_mut()) {
                let e = factors.row(entity).to_vec();
                let mut de = vec![0.0; d];
                for (r, &g) in out.initial_h.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    b.grad[r] += g;
                    axpy(g, &e, &mut w.grad[r * d..(r + 1) * d]);
                    axpy(g, &w.values[r * d..(r + 1) * d], &mut de);
                }
                axpy(1.0, &de, factors.grad_row_mut(entity));
            }
        }

        if let (Some(att), true) = (attention.as_mut(), any_key_grad) {
            for (k, &member) in pool.iter().enumerate() {
                let e = factors.row(member).to_vec();
                let mut de = vec![0.0; d];
                tower_backward(&mut att.key_w, &mut att.key_b, &e, &sf.keys[k], &dkeys[k], &mut de);
                axpy(1.0, &de, factors.grad_row_mut(member));
            }
        }
        Ok(())
    }
}

fn make_pool(n: usize, size: Option<usize>, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("attention pool is empty".into()));
    }
    match size {
        Some(0) => Err(Error::Config("attention_pool_size must be at least 1".into())),
        Some(k) if k < n => {
            let mut pool = rand::seq::index::sample(rng, n, k).into_vec();
            pool.sort_unstable();
            Ok(pool)
        }
        _ => Ok((0..n).collect()),
    }
}

impl Parameters for MixtureScorer {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = self.factors.tensors();
        v.extend(self.user_side.tensors());
        v.extend(self.movie_side.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.factors.tensors_mut();
        v.extend(self.user_side.tensors_mut());
        v.extend(self.movie_side.tensors_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SessionEvent;
    use crate::nn::{finite_diff_check, Rng};
    use proptest::prelude::*;

    /// Small hand-built session world: `u` users, `m` movies, `t` sessions.
    fn toy_world(u: usize, m: usize, t: usize, seed: u64) -> SessionizedDataset {
        let mut rng = Rng::new(seed);
        let mut user_sessions = vec![vec![Vec::new(); t]; u];
        let mut movie_sessions = vec![vec![Vec::new(); t]; m];
        let mut events = Vec::new();
        for i in 0..u {
            for s in 0..t {
                for j in 0..m {
                    if rng.uniform() < 0.5 {
                        let r = (1 + rng.below(5)) as f64;
                        user_sessions[i][s].push((j, r));
                        movie_sessions[j][s].push((i, r));
                        events.push(SessionEvent { user: i, movie: j, rating: r, positive: r >= 4.0, session: s });
                    }
                }
            }
        }
        SessionizedDataset {
            start_timestamp: 1,
            session_length_days: 30,
            session_count: t,
            num_users: u,
            num_movies: m,
            user_sessions,
            movie_sessions,
            events,
        }
    }

    fn toy_scorer(variant: MixtureVariant, u: usize, m: usize, d: usize, h: usize, content: Option<usize>, seed: u64) -> MixtureScorer {
        let mut rng = Rng::new(seed);
        let fs = FactorStore::random(u, m, d, &mut rng).unwrap();
        let cfg = ScorerConfig {
            variant,
            hidden: h,
            input_dim: 3,
            content_dim: content,
            attention_dim: 3,
            ..ScorerConfig::default()
        };
        let mut s = MixtureScorer::new(cfg, fs, &mut rng).unwrap();
        // Larger weights than the default init so every pathway carries signal.
        for t in s.tensors_mut() {
            for v in &mut t.values {
                *v = rng.uniform() * 1.6 - 0.8;
            }
        }
        s
    }

    fn toy_content(m: usize, f: usize, seed: u64) -> ContentFeatures {
        let mut rng = Rng::new(seed);
        let mut c = ContentFeatures::zeros(m, f);
        for v in &mut c.vectors {
            for x in v.iter_mut() {
                *x = rng.uniform() - 0.5;
            }
        }
        c.present = vec![true; m];
        c
    }

    /// Weighted sum of logits over a few (i, j, t) triples.
    fn objective(s: &MixtureScorer, inputs: &ModelInputs, terms: &[LogitGrad]) -> f64 {
        let fwd = s.forward_all(inputs).unwrap();
        terms.iter().map(|g| g.grad * s.logit(&fwd, g.user, g.movie, g.step).unwrap()).sum()
    }

    fn grad_check(variant: MixtureVariant, content: bool, seed: u64) -> f64 {
        let world = toy_world(3, 3, 3, seed);
        let feats = toy_content(3, 2, seed + 1);
        let inputs = ModelInputs::new(&world, content.then_some(&feats));
        let mut s = toy_scorer(variant, 3, 3, 2, 3, content.then_some(2), seed);
        let terms = [
            LogitGrad { user: 0, movie: 1, step: 3, grad: 1.0 },
            LogitGrad { user: 2, movie: 0, step: 2, grad: -0.7 },
            LogitGrad { user: 1, movie: 2, step: 1, grad: 0.4 },
            LogitGrad { user: 0, movie: 0, step: 0, grad: 0.3 },
        ];
        s.zero_grad();
        let fwd = s.forward_all(&inputs).unwrap();
        s.backward(&inputs, &fwd, &terms).unwrap();
        finite_diff_check(&mut s, |p| objective(p, &inputs, &terms), 1e-6, None).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_for_every_variant() {
        for v in MixtureVariant::ALL {
            for content in [false, true] {
                let err = grad_check(v, content, 11);
                assert!(err < 1e-4, "{v} content={content}: rel err {err}");
            }
        }
    }

    #[test]
    fn v4_gradient_with_subsampled_pool() {
        let world = toy_world(4, 5, 2, 3);
        let inputs = ModelInputs::new(&world, None);
        let mut rng = Rng::new(5);
        let fs = FactorStore::random(4, 5, 2, &mut rng).unwrap();
        let cfg = ScorerConfig { hidden: 3, input_dim: 2, attention_dim: 2, attention_pool_size: Some(2), ..Default::default() };
        let mut s = MixtureScorer::new(cfg, fs, &mut rng).unwrap();
        for t in s.tensors_mut() {
            for v in &mut t.values {
                *v = rng.uniform() - 0.5;
            }
        }
        assert_eq!(s.pool(Side::User).len(), 2);
        let terms = [LogitGrad { user: 3, movie: 4, step: 2, grad: 1.0 }];
        let fwd = s.forward_all(&inputs).unwrap();
        s.backward(&inputs, &fwd, &terms).unwrap();
        let err = finite_diff_check(&mut s, |p| objective(p, &inputs, &terms), 1e-6, None).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn score_examples() {
        let world = toy_world(2, 2, 1, 0);
        let inputs = ModelInputs::new(&world, None);
        let mut rng = Rng::new(0);
        let fs = FactorStore::zeros(2, 2, 2);
        let mut s = MixtureScorer::new(ScorerConfig { variant: MixtureVariant::V1, ..Default::default() }, fs, &mut rng).unwrap();
        for t in s.user_side.tensors_mut().into_iter().chain(s.movie_side.tensors_mut()) {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let fwd = s.forward_all(&inputs).unwrap();
        assert_eq!(s.score(&fwd, 0, 0, 1).unwrap(), 0.5);
        s.factors.user_bias.values[0] = 1.0;
        assert!((s.score(&fwd, 0, 0, 1).unwrap() - 0.7311).abs() < 1e-4);
        let before = s.score(&fwd, 0, 1, 0).unwrap();
        s.factors.movie_bias.values[1] = 0.3;
        assert!(s.score(&fwd, 0, 1, 0).unwrap() > before);
        assert!(s.score(&fwd, 0, 0, 2).is_err());
        assert!(s.forward(&inputs, &[0], &[0], 2).is_err());
    }

    #[test]
    fn prepare_v2_examples() {
        let mut rng = Rng::new(1);
        let mut fs = FactorStore::zeros(2, 1, 3);
        let cfg = ScorerConfig { variant: MixtureVariant::V2, hidden: 3, ..Default::default() };
        let s = MixtureScorer::new(cfg.clone(), fs.clone(), &mut rng).unwrap();
        assert_eq!(s.prepare_v2(Side::User, 0).unwrap().0, vec![0.0; 3]);

        fs.user_factors.values = vec![0.1, -0.2, 0.3, 0.5, 0.5, 0.5];
        let id = ScorerConfig { identity_init_map: true, ..cfg.clone() };
        let s = MixtureScorer::new(id, fs.clone(), &mut rng).unwrap();
        assert_eq!(s.prepare_v2(Side::User, 0).unwrap().0, vec![0.1, -0.2, 0.3]);

        // Different factors give different initial states and different scores
        // for identical (empty) session histories.
        let world = toy_world(2, 1, 0, 0);
        let inputs = ModelInputs::new(&world, None);
        let fwd = s.forward_all(&inputs).unwrap();
        assert_ne!(fwd.user.trajectories[0].initial_h, fwd.user.trajectories[1].initial_h);
        let h = |u: usize| fwd.user.trajectories[u].hidden(0).unwrap().to_vec();
        assert_ne!(h(0), h(1));

        let bad = ScorerConfig { identity_init_map: true, hidden: 4, ..cfg };
        assert!(MixtureScorer::new(bad, fs, &mut rng).is_err());
    }

    fn zero_context_columns(s: &mut MixtureScorer) {
        for side in [&mut s.user_side, &mut s.movie_side] {
            let cols = side.cell.context_columns();
            let z = side.cell.hidden + side.cell.input + side.cell.context;
            for w in [&mut side.cell.gates_w, &mut side.cell.cand_w] {
                for r in 0..w.shape[0] {
                    for c in cols.clone() {
                        w.values[r * z + c] = 0.0;
                    }
                }
            }
        }
    }

    fn copy_shared(from: &MixtureScorer, to: &mut MixtureScorer) {
        to.factors = from.factors.clone();
        for (src, dst) in [(&from.user_side, &mut to.user_side), (&from.movie_side, &mut to.movie_side)] {
            dst.embedder = src.embedder.clone();
            let zs = src.cell.hidden + src.cell.input + src.cell.context;
            let zd = dst.cell.hidden + dst.cell.input + dst.cell.context;
            for (ws, wd) in [(&src.cell.gates_w, &mut dst.cell.gates_w), (&src.cell.cand_w, &mut dst.cell.cand_w)] {
                for r in 0..ws.shape[0] {
                    let n = zs.min(zd);
                    wd.values[r * zd..r * zd + n].copy_from_slice(&ws.values[r * zs..r * zs + n]);
                }
            }
            dst.cell.gates_b = src.cell.gates_b.clone();
            dst.cell.cand_b = src.cell.cand_b.clone();
        }
    }

    #[test]
    fn disabled_pathways_reduce_to_v1() {
        let world = toy_world(3, 4, 3, 8);
        let inputs = ModelInputs::new(&world, None);
        let v1 = toy_scorer(MixtureVariant::V1, 3, 4, 2, 3, None, 2);
        let f1 = v1.forward_all(&inputs).unwrap();

        // V3 with zero context weights and a zero state map.
        let mut v3 = toy_scorer(MixtureVariant::V3, 3, 4, 2, 3, None, 4);
        copy_shared(&v1, &mut v3);
        zero_context_columns(&mut v3);
        for side in [&mut v3.user_side, &mut v3.movie_side] {
            side.init_w.as_mut().unwrap().values.iter_mut().for_each(|v| *v = 0.0);
            side.init_b.as_mut().unwrap().values.iter_mut().for_each(|v| *v = 0.0);
        }
        let f3 = v3.forward_all(&inputs).unwrap();

        // V4 with uniform attention (zero query tower) and zero context weights.
        let mut v4 = toy_scorer(MixtureVariant::V4, 3, 4, 2, 3, None, 6);
        copy_shared(&v1, &mut v4);
        zero_context_columns(&mut v4);
        for side in [&mut v4.user_side, &mut v4.movie_side] {
            let a = side.attention.as_mut().unwrap();
            a.query_w.values.iter_mut().for_each(|v| *v = 0.0);
            a.query_b.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let f4 = v4.forward_all(&inputs).unwrap();
        let ctx = v4.attention_context(Side::User, &[0.3, -0.1, 0.2]).unwrap();
        assert!(ctx.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));

        for i in 0..3 {
            for j in 0..4 {
                for t in 0..=3 {
                    let a = v1.score(&f1, i, j, t).unwrap();
                    assert_eq!(a.to_bits(), v3.score(&f3, i, j, t).unwrap().to_bits());
                    assert_eq!(a.to_bits(), v4.score(&f4, i, j, t).unwrap().to_bits());
                }
            }
        }
    }

    #[test]
    fn v3_constant_context_shifts_gates() {
        let world = toy_world(1, 1, 0, 0);
        let inputs = ModelInputs::new(&world, None);
        let mut s = toy_scorer(MixtureVariant::V3, 1, 1, 2, 3, None, 1);
        s.user_side.init_w.as_mut().unwrap().values.iter_mut().for_each(|v| *v = 0.0);
        s.factors.user_factors.values = vec![0.0, 0.0];
        let base = s.forward_all(&inputs).unwrap();
        s.factors.user_factors.values = vec![0.7, -0.4];
        let shifted = s.forward_all(&inputs).unwrap();
        let b = &base.user.trajectories[0].steps[0];
        let c = &shifted.user.trajectories[0].steps[0];
        // Pre-activation shift equals the context columns times the context.
        let cell = &s.user_side.cell;
        let z = cell.hidden + cell.input + cell.context;
        let cols = cell.context_columns();
        for r in 0..cell.hidden {
            let row = &cell.gates_w.values[r * z..(r + 1) * z];
            let shift: f64 = cols.clone().zip([0.7, -0.4]).map(|(k, e)| row[k] * e).sum();
            let logit = |p: f64| (p / (1.0 - p)).ln();
            assert!((logit(c.f[r]) - logit(b.f[r]) - shift).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_examples() {
        let f = [[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let rows = || f.iter().map(|r| r.as_slice());
        let (w, c) = attend(&[0.0, 0.0, 0.0], rows(), 2).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 1.0).abs() < 1e-12);
        let (w, c) = attend(&[0.0, 20.0, 0.0], rows(), 2).unwrap();
        assert!(w[1] > 0.999);
        assert!((c[1] - 1.0).abs() < 1e-3);
        let (w, _) = attend(&[-3.0], rows(), 2).unwrap();
        assert_eq!(w, vec![1.0]);
        assert!(attend(&[], rows(), 2).is_err());
        assert!(make_pool(0, None, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn content_projection_reaches_movie_states() {
        let world = toy_world(2, 2, 1, 2);
        let feats = toy_content(2, 2, 3);
        let s = toy_scorer(MixtureVariant::V1, 2, 2, 2, 3, Some(2), 4);
        let with = s.forward_all(&ModelInputs::new(&world, Some(&feats))).unwrap();
        let without = s.forward_all(&ModelInputs::new(&world, None)).unwrap();
        assert_ne!(with.movie.trajectories[0].steps[0].h, without.movie.trajectories[0].steps[0].h);
        assert_eq!(with.user.trajectories[0].steps[0].h, without.user.trajectories[0].steps[0].h);
    }

    #[test]
    fn states_ignore_future_sessions() {
        let world = toy_world(2, 3, 4, 6);
        let mut cut = world.clone();
        for u in 0..2 {
            cut.user_sessions[u][3].clear();
        }
        for m in 0..3 {
            cut.movie_sessions[m][3].clear();
        }
        let s = toy_scorer(MixtureVariant::V4, 2, 3, 2, 3, None, 1);
        let a = s.forward_all(&ModelInputs::new(&world, None)).unwrap();
        let b = s.forward_all(&ModelInputs::new(&cut, None)).unwrap();
        for t in 0..=3 {
            assert_eq!(s.logit(&a, 1, 2, t).unwrap(), s.logit(&b, 1, 2, t).unwrap());
        }
        assert_ne!(s.logit(&a, 1, 2, 4).unwrap(), s.logit(&b, 1, 2, 4).unwrap());
    }

    #[test]
    fn batch_forward_matches_full_forward() {
        let world = toy_world(3, 4, 2, 1);
        let inputs = ModelInputs::new(&world, None);
        let s = toy_scorer(MixtureVariant::V4, 3, 4, 2, 3, None, 9);
        let full = s.forward_all(&inputs).unwrap();
        let part = s.forward(&inputs, &[2, 0, 2], &[3], 1).unwrap();
        assert_eq!(part.user.entities, vec![2, 0]);
        assert_eq!(s.logit(&full, 2, 3, 1).unwrap(), s.logit(&part, 2, 3, 1).unwrap());
        assert!(s.logit(&part, 1, 3, 1).is_err());
    }

    #[test]
    fn variant_parsing() {
        for v in MixtureVariant::ALL {
            assert_eq!(v.to_string().parse::<MixtureVariant>().unwrap(), v);
        }
        assert!(matches!("v5".parse::<MixtureVariant>(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn attention_weights_normalised_and_shift_invariant(
            scores in proptest::collection::vec(-30.0f64..30.0, 1..12), shift in -50.0f64..50.0) {
            let rows: Vec<[f64; 1]> = (0..scores.len()).map(|k| [k as f64]).collect();
            let (w, _) = attend(&scores, rows.iter().map(|r| r.as_slice()), 1).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let moved: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let (w2, _) = attend(&moved, rows.iter().map(|r| r.as_slice()), 1).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn scores_in_unit_interval_and_rank_preserving(seed in 0u64..50, v in 0usize..4) {
            let world = toy_world(2, 5, 2, seed);
            let inputs = ModelInputs::new(&world, None);
            let s = toy_scorer(MixtureVariant::ALL[v], 2, 5, 2, 3, None, seed);
            let fwd = s.forward_all(&inputs).unwrap();
            let movies: Vec<usize> = (0..5).collect();
            let logits = s.logits_for_user(&fwd, 1, &movies, 2).unwrap();
            let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
            prop_assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
            let order = |xs: &[f64]| {
                let mut idx: Vec<usize> = (0..xs.len()).collect();
                idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap().then(a.cmp(&b)));
                idx
            };
            prop_assert_eq!(order(&logits), order(&probs));
        }
    }
}
