//! LSTM session encoders: a single-layer cell with an optional context slot,
//! the session-input embedder, trajectory encoding and exact BPTT.

use crate::error::{Error, Result};
use crate::nn::{axpy, dot, init_uniform, sigmoid, ParamTensor, Parameters, Rng};

pub const INIT_RANGE: f64 = 0.05;

/// `[f, i, o] = sigmoid(W z + b)`, `l = tanh(V z + b_v)` over `z = [h_prev, x, ctx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub hidden: usize,
    pub input: usize,
    pub context: usize,
    /// `[3H, Z]`, row blocks forget, input, output.
    pub gates_w: ParamTensor,
    pub gates_b: ParamTensor,
    /// `[H, Z]`
    pub cand_w: ParamTensor,
    pub cand_b: ParamTensor,
}

/// Cached activations of one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub z: Vec<f64>,
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub o: Vec<f64>,
    pub l: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Gradients flowing out of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrad {
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub x: Vec<f64>,
    pub context: Vec<f64>,
}

impl LstmCell {
    /// Weights uniform in `[-0.05, 0.05)`, biases zero.
    pub fn new(prefix: &str, hidden: usize, input: usize, context: usize, rng: &mut Rng) -> Result<Self> {
        let z = hidden + input + context;
        Ok(Self {
            hidden,
            input,
            context,
            gates_w: init_uniform(format!("{prefix}/gates_w"), &[3 * hidden, z], -INIT_RANGE, INIT_RANGE, rng)?,
            gates_b: ParamTensor::zeros(format!("{prefix}/gates_b"), &[3 * hidden]),
            cand_w: init_uniform(format!("{prefix}/cand_w"), &[hidden, z], -INIT_RANGE, INIT_RANGE, rng)?,
            cand_b: ParamTensor::zeros(format!("{prefix}/cand_b"), &[hidden]),
        })
    }

    pub fn zeros(prefix: &str, hidden: usize, input: usize, context: usize) -> Self {
        let z = hidden + input + context;
        Self {
            hidden,
            input,
            context,
            gates_w: ParamTensor::zeros(format!("{prefix}/gates_w"), &[3 * hidden, z]),
            gates_b: ParamTensor::zeros(format!("{prefix}/gates_b"), &[3 * hidden]),
            cand_w: ParamTensor::zeros(format!("{prefix}/cand_w"), &[hidden, z]),
            cand_b: ParamTensor::zeros(format!("{prefix}/cand_b"), &[hidden]),
        }
    }

    fn z_dim(&self) -> usize {
        self.hidden + self.input + self.context
    }

    /// Columns of the weight matrices that read the context slot.
    pub fn context_columns(&self) -> std::ops::Range<usize> {
        self.hidden + self.input..self.z_dim()
    }

    pub fn forward(
        &self,
        h_prev: &[f64],
        c_prev: &[f64],
        x: &[f64],
        context: Option<&[f64]>,
    ) -> Result<StepCache> {
        let h = self.hidden;
        if h_prev.len() != h || c_prev.len() != h {
            return Err(Error::Shape(format!(
                "state has length {}/{}, cell hidden size is {h}",
                h_prev.len(),
                c_prev.len()
            )));
        }
        if x.len() != self.input {
            return Err(Error::Shape(format!("input has length {}, expected {}", x.len(), self.input)));
        }
        match (context, self.context) {
            (None, 0) => {}
            (Some(c), n) if n > 0 && c.len() == n => {}
            (c, n) => {
                return Err(Error::Shape(format!(
                    "context of length {:?} given to cell with context size {n}",
                    c.map(<[f64]>::len)
                )))
            }
        }
        let mut z = Vec::with_capacity(self.z_dim());
        z.extend_from_slice(h_prev);
        z.extend_from_slice(x);
        if let Some(c) = context {
            z.extend_from_slice(c);
        }
        let zd = z.len();
        let gate = |r: usize| sigmoid(self.gates_b.values[r] + dot(&self.gates_w.values[r * zd..(r + 1) * zd], &z));
        let f: Vec<f64> = (0..h).map(gate).collect();
        let i: Vec<f64> = (h..2 * h).map(gate).collect();
        let o: Vec<f64> = (2 * h..3 * h).map(gate).collect();
        let l: Vec<f64> = (0..h)
            .map(|r| (self.cand_b.values[r] + dot(&self.cand_w.values[r * zd..(r + 1) * zd], &z)).tanh())
            .collect();
        let c: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * l[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hn: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        Ok(StepCache { z, f, i, o, l, c_prev: c_prev.to_vec(), c, tanh_c, h: hn })
    }

    /// Accumulates parameter gradients for one step and returns the
    /// gradients with respect to the step's inputs.
    pub fn backward(&mut self, cache: &StepCache, dh: &[f64], dc_next: &[f64]) -> StepGrad {
        let h = self.hidden;
        let zd = cache.z.len();
        let mut dgates = vec![0.0; 3 * h];
        let mut dcand = vec![0.0; h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let (f, i, o, l, tc) = (cache.f[k], cache.i[k], cache.o[k], cache.l[k], cache.tanh_c[k]);
            let d_o = dh[k] * tc;
            let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
            let d_f = dc * cache.c_prev[k];
            let d_i = dc * l;
            let d_l = dc * i;
            dc_prev[k] = dc * f;
            dgates[k] = d_f * f * (1.0 - f);
            dgates[h + k] = d_i * i * (1.0 - i);
            dgates[2 * h + k] = d_o * o * (1.0 - o);
            dcand[k] = d_l * (1.0 - l * l);
        }
        let mut dz = vec![0.0; zd];
        for (r, &g) in dgates.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, &cache.z, &mut self.gates_w.grad[r * zd..(r + 1) * zd]);
            self.gates_b.grad[r] += g;
            axpy(g, &self.gates_w.values[r * zd..(r + 1) * zd], &mut dz);
        }
        for (r, &g) in dcand.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, &cache.z, &mut self.cand_w.grad[r * zd..(r + 1) * zd]);
            self.cand_b.grad[r] += g;
            axpy(g, &self.cand_w.values[r * zd..(r + 1) * zd], &mut dz);
        }
        let context = dz.split_off(h + self.input);
        let x = dz.split_off(h);
        StepGrad { h_prev: dz, c_prev: dc_prev, x, context }
    }
}

impl Parameters for LstmCell {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.gates_w, &self.gates_b, &self.cand_w, &self.cand_b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.gates_w, &mut self.gates_b, &mut self.cand_w, &mut self.cand_b]
    }
}

/// One LSTM step returning `(h, c)`.
pub fn lstm_step(
    cell: &LstmCell,
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
    context: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = cell.forward(h_prev, c_prev, x, context)?;
    Ok((s.h, s.c))
}

/// Maps sparse session rating vectors (and, optionally, a content feature
/// vector) to `D_in`-dimensional LSTM inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEmbedder {
    /// `[counterparts, D_in]`: one row per rated counterpart entity.
    pub table: ParamTensor,
    /// `[D_in, F]` content projection and its bias, when content is wired.
    pub content_w: Option<ParamTensor>,
    pub content_b: Option<ParamTensor>,
}

/// A sparse session: `(counterpart index, rating)` pairs.
pub type Session = [(usize, f64)];

impl InputEmbedder {
    pub fn new(
        prefix: &str,
        counterparts: usize,
        dim: usize,
        content_dim: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let table = init_uniform(format!("{prefix}/table"), &[counterparts, dim], -INIT_RANGE, INIT_RANGE, rng)?;
        let (content_w, content_b) = match content_dim {
            Some(f) => (
                Some(init_uniform(format!("{prefix}/content_w"), &[dim, f], -INIT_RANGE, INIT_RANGE, rng)?),
                Some(ParamTensor::zeros(format!("{prefix}/content_b"), &[dim])),
            ),
            None => (None, None),
        };
        Ok(Self { table, content_w, content_b })
    }

    pub fn dim(&self) -> usize {
        self.table.shape[1]
    }

    /// Rating-weighted mean of counterpart rows: `sum (r/5) row_k / n`.
    /// An empty session embeds to zero.
    pub fn embed(&self, session: &Session) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        if session.is_empty() {
            return x;
        }
        let n = session.len() as f64;
        for &(k, r) in session {
            axpy(r / 5.0 / n, self.table.row(k), &mut x);
        }
        x
    }

    fn embed_backward(&mut self, session: &Session, dx: &[f64]) {
        if session.is_empty() {
            return;
        }
        let n = session.len() as f64;
        for &(k, r) in session {
            axpy(r / 5.0 / n, dx, self.table.grad_row_mut(k));
        }
    }

    pub fn project(&self, content: &[f64]) -> Result<Vec<f64>> {
        let (Some(w), Some(b)) = (&self.content_w, &self.content_b) else {
            return Err(Error::Shape("embedder has no content projection".into()));
        };
        let f = w.shape[1];
        if content.len() != f {
            return Err(Error::Shape(format!("content vector has length {}, expected {f}", content.len())));
        }
        Ok((0..self.dim()).map(|r| b.values[r] + dot(w.row(r), content)).collect())
    }

    fn project_backward(&mut self, content: &[f64], dx: &[f64]) {
        let (Some(w), Some(b)) = (&mut self.content_w, &mut self.content_b) else { return };
        let f = w.shape[1];
        for (r, &g) in dx.iter().enumerate() {
            axpy(g, content, &mut w.grad[r * f..(r + 1) * f]);
            b.grad[r] += g;
        }
    }
}

impl Parameters for InputEmbedder {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = vec![&self.table];
        v.extend(self.content_w.iter());
        v.extend(self.content_b.iter());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = vec![&mut self.table];
        v.extend(self.content_w.iter_mut());
        v.extend(self.content_b.iter_mut());
        v
    }
}

/// Hidden and cell vectors of one entity, one pair per encoded step.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub entity: usize,
    pub initial_h: Vec<f64>,
    pub initial_c: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl SessionState {
    /// Index of the last encoded step, if any.
    pub fn last_session(&self) -> Option<usize> {
        self.h.len().checked_sub(1)
    }

    /// Hidden state after step `t`.
    pub fn hidden(&self, t: usize) -> Result<&[f64]> {
        self.h.get(t).map(Vec::as_slice).ok_or_else(|| {
            Error::Index(format!("step {t} beyond encoded range of {} steps", self.h.len()))
        })
    }
}

/// Forward pass over a sequence of sessions with all activations cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial_h: Vec<f64>,
    pub initial_c: Vec<f64>,
    pub steps: Vec<StepCache>,
    cached: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn hidden(&self, t: usize) -> Result<&[f64]> {
        self.steps.get(t).map(|s| s.h.as_slice()).ok_or_else(|| {
            Error::Index(format!("step {t} beyond encoded range of {} steps", self.steps.len()))
        })
    }

    /// Hidden state entering step `t` (the initial state for `t = 0`).
    pub fn hidden_before(&self, t: usize) -> &[f64] {
        if t == 0 {
            &self.initial_h
        } else {
            &self.steps[t - 1].h
        }
    }

    pub fn state(&self, entity: usize) -> SessionState {
        SessionState {
            entity,
            initial_h: self.initial_h.clone(),
            initial_c: self.initial_c.clone(),
            h: self.steps.iter().map(|s| s.h.clone()).collect(),
            c: self.steps.iter().map(|s| s.c.clone()).collect(),
        }
    }

    /// Drops the backward caches; [`bptt_backward`] then refuses the trajectory.
    pub fn without_cache(mut self) -> Self {
        for s in &mut self.steps {
            s.z = Vec::new();
        }
        self.cached = false;
        self
    }
}

/// Encodes `sessions` step by step. Step `t` consumes `embed(sessions[t])`;
/// when `content` is given its projection is added to the step-0 input. With
/// no sessions but content present a single step is encoded.
///
/// `context(t, h_prev)` supplies the context-slot input for step `t`.
pub fn encode_with<C>(
    cell: &LstmCell,
    emb: &InputEmbedder,
    sessions: &[&Session],
    content: Option<&[f64]>,
    initial: Option<(&[f64], &[f64])>,
    mut context: C,
) -> Result<Trajectory>
where
    C: FnMut(usize, &[f64]) -> Result<Option<Vec<f64>>>,
{
    if emb.dim() != cell.input {
        return Err(Error::Shape(format!(
            "embedder width {} differs from cell input size {}",
            emb.dim(),
            cell.input
        )));
    }
    let (h0, c0) = match initial {
        Some((h, c)) => (h.to_vec(), c.to_vec()),
        None => (vec![0.0; cell.hidden], vec![0.0; cell.hidden]),
    };
    let n = sessions.len().max(usize::from(content.is_some()));
    let projected = content.map(|c| emb.project(c)).transpose()?;
    let mut steps: Vec<StepCache> = Vec::with_capacity(n);
    for t in 0..n {
        let mut x = sessions.get(t).map(|s| emb.embed(s)).unwrap_or_else(|| vec![0.0; emb.dim()]);
        if t == 0 {
            if let Some(p) = &projected {
                axpy(1.0, p, &mut x);
            }
        }
        let (hp, cp) = match steps.last() {
            Some(s) => (&s.h, &s.c),
            None => (&h0, &c0),
        };
        let ctx = context(t, hp)?;
        let step = cell.forward(hp, cp, &x, ctx.as_deref())?;
        steps.push(step);
    }
    Ok(Trajectory { initial_h: h0, initial_c: c0, steps, cached: true })
}

/// [`encode_with`] using precomputed per-step contexts.
pub fn encode_trajectory(
    cell: &LstmCell,
    emb: &InputEmbedder,
    sessions: &[&Session],
    content: Option<&[f64]>,
    contexts: Option<&[Vec<f64>]>,
    initial: Option<(&[f64], &[f64])>,
) -> Result<Trajectory> {
    let n = sessions.len().max(usize::from(content.is_some()));
    if let Some(cs) = contexts {
        if cs.len() != n {
            return Err(Error::Shape(format!("{} contexts for {n} steps", cs.len())));
        }
    }
    encode_with(cell, emb, sessions, content, initial, |t, _| Ok(contexts.map(|cs| cs[t].clone())))
}

/// Gradients that leave the trajectory through its initial state and contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct BpttOutput {
    pub initial_h: Vec<f64>,
    pub initial_c: Vec<f64>,
    /// Per-step gradient of the context input (empty vectors without a slot).
    pub contexts: Vec<Vec<f64>>,
}

/// Reverse-mode gradients through a cached trajectory.
///
/// `dh[t]` is the upstream gradient on the hidden state after step `t`
/// (missing trailing entries count as zero). `hook(t, d_context, dh_prev)`
/// runs after each step's backward pass, so dynamic-context callers can
/// route the context gradient and add contributions to `dh_prev`.
/// With `truncation = Some(k)` recurrent gradients stop `k` steps before the end.
#[allow(clippy::too_many_arguments)]
pub fn bptt_backward_with<H>(
    cell: &mut LstmCell,
    emb: &mut InputEmbedder,
    traj: &Trajectory,
    sessions: &[&Session],
    content: Option<&[f64]>,
    dh: &[Vec<f64>],
    truncation: Option<usize>,
    mut hook: H,
) -> Result<BpttOutput>
where
    H: FnMut(usize, &[f64], &mut [f64]),
{
    if !traj.cached {
        return Err(Error::Contract("trajectory was encoded without backward caches".into()));
    }
    if dh.len() > traj.len() {
        return Err(Error::Shape(format!("{} upstream gradients for {} steps", dh.len(), traj.len())));
    }
    let hsz = cell.hidden;
    let n = traj.len();
    let stop = truncation.map(|k| n.saturating_sub(k)).unwrap_or(0);
    let mut dh_next = vec![0.0; hsz];
    let mut dc_next = vec![0.0; hsz];
    let mut contexts = vec![Vec::new(); n];
    for t in (0..n).rev() {
        if let Some(up) = dh.get(t) {
            axpy(1.0, up, &mut dh_next);
        }
        let g = cell.backward(&traj.steps[t], &dh_next, &dc_next);
        if let Some(s) = sessions.get(t) {
            emb.embed_backward(s, &g.x);
        }
        if t == 0 {
            if let Some(c) = content {
                emb.project_backward(c, &g.x);
            }
        }
        let mut dh_prev = g.h_prev;
        hook(t, &g.context, &mut dh_prev);
        contexts[t] = g.context;
        if t <= stop && t > 0 {
            dh_next = vec![0.0; hsz];
            dc_next = vec![0.0; hsz];
        } else {
            dh_next = dh_prev;
            dc_next = g.c_prev;
        }
    }
    Ok(BpttOutput { initial_h: dh_next, initial_c: dc_next, contexts })
}

pub fn bptt_backward(
    cell: &mut LstmCell,
    emb: &mut InputEmbedder,
    traj: &Trajectory,
    sessions: &[&Session],
    content: Option<&[f64]>,
    dh: &[Vec<f64>],
) -> Result<BpttOutput> {
    bptt_backward_with(cell, emb, traj, sessions, content, dh, None, |_, _, _| {})
}
