//! Long-term latent factors learned with a logistic squared-loss objective.

use crate::error::{Error, Result};
use crate::nn::{dot, init_uniform, sigmoid, OptimizerConfig, ParamTensor, Parameters, Rng};

pub const INIT_RANGE: f64 = 0.05;

/// User/movie factor matrices and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStore {
    pub user_factors: ParamTensor,
    pub movie_factors: ParamTensor,
    pub user_bias: ParamTensor,
    pub movie_bias: ParamTensor,
}

impl FactorStore {
    pub const PREFIX: &'static str = "mf";

    pub fn zeros(num_users: usize, num_movies: usize, dim: usize) -> Self {
        Self {
            user_factors: ParamTensor::zeros("user_factors", &[num_users, dim]),
            movie_factors: ParamTensor::zeros("movie_factors", &[num_movies, dim]),
            user_bias: ParamTensor::zeros("user_bias", &[num_users]),
            movie_bias: ParamTensor::zeros("movie_bias", &[num_movies]),
        }
    }

    /// Factors uniform in `[-0.05, 0.05)`, biases zero.
    pub fn random(num_users: usize, num_movies: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("factor dimension must be at least 1".into()));
        }
        Ok(Self {
            user_factors: init_uniform("user_factors", &[num_users, dim], -INIT_RANGE, INIT_RANGE, rng)?,
            movie_factors: init_uniform("movie_factors", &[num_movies, dim], -INIT_RANGE, INIT_RANGE, rng)?,
            user_bias: ParamTensor::zeros("user_bias", &[num_users]),
            movie_bias: ParamTensor::zeros("movie_bias", &[num_movies]),
        })
    }

    pub fn dim(&self) -> usize {
        self.user_factors.shape[1]
    }

    pub fn num_users(&self) -> usize {
        self.user_factors.shape[0]
    }

    pub fn num_movies(&self) -> usize {
        self.movie_factors.shape[0]
    }

    pub fn user(&self, i: usize) -> &[f64] {
        self.user_factors.row(i)
    }

    pub fn movie(&self, j: usize) -> &[f64] {
        self.movie_factors.row(j)
    }

    fn check(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.num_users() {
            return Err(Error::Index(format!("user {i} >= {}", self.num_users())));
        }
        if j >= self.num_movies() {
            return Err(Error::Index(format!("movie {j} >= {}", self.num_movies())));
        }
        Ok(())
    }

    /// Raw dot product `e_u(i) . e_m(j)`.
    pub fn affinity(&self, i: usize, j: usize) -> f64 {
        dot(self.user(i), self.movie(j))
    }
}

impl Parameters for FactorStore {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.user_factors, &self.movie_factors, &self.user_bias, &self.movie_bias]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.user_factors, &mut self.movie_factors, &mut self.user_bias, &mut self.movie_bias]
    }
}

/// `sigmoid(e_u(i) . e_m(j))`.
pub fn mf_predict(fs: &FactorStore, i: usize, j: usize) -> Result<f64> {
    fs.check(i, j)?;
    Ok(sigmoid(fs.affinity(i, j)))
}

/// Maps a 1..5 star rating to the logistic target `(r - 0.5) / 5`.
pub fn rating_target(rating: f64) -> f64 {
    (rating - 0.5) / 5.0
}

/// One observed entry: `(user, movie, target in (0,1))`.
pub type Observation = (usize, usize, f64);

/// `sum (y - sigmoid(e_u . e_m))^2 + lambda (|E_u|^2 + |E_m|^2)`.
pub fn mf_objective(fs: &FactorStore, obs: &[Observation], lambda: f64) -> f64 {
    let data: f64 = obs
        .iter()
        .map(|&(i, j, y)| {
            let r = y - sigmoid(fs.affinity(i, j));
            r * r
        })
        .sum();
    let norm = |t: &ParamTensor| t.values.iter().map(|v| v * v).sum::<f64>();
    data + lambda * (norm(&fs.user_factors) + norm(&fs.movie_factors))
}

/// Accumulates the gradient of [`mf_objective`] into the factor grads.
pub fn mf_gradient(fs: &mut FactorStore, obs: &[Observation], lambda: f64) {
    let d = fs.dim();
    for &(i, j, y) in obs {
        let p = sigmoid(fs.affinity(i, j));
        let coef = -2.0 * (y - p) * p * (1.0 - p);
        for k in 0..d {
            let (eu, em) = (fs.user_factors.values[i * d + k], fs.movie_factors.values[j * d + k]);
            fs.user_factors.grad[i * d + k] += coef * em;
            fs.movie_factors.grad[j * d + k] += coef * eu;
        }
    }
    for t in [&mut fs.user_factors, &mut fs.movie_factors] {
        for (g, v) in t.grad.iter_mut().zip(&t.values) {
            *g += 2.0 * lambda * v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfReport {
    /// Objective before training followed by one entry per epoch.
    pub objective: Vec<f64>,
}

/// Per-example clipped SGD on the observed entries, shuffled each epoch.
///
/// Each visit to `(i, j)` updates rows `i` and `j` with the squared-error
/// gradient plus `l2_lambda` weight decay. With no observations each epoch
/// applies a pure weight-decay step to every factor.
pub fn mf_train(
    obs: &[Observation],
    num_users: usize,
    num_movies: usize,
    dim: usize,
    cfg: &OptimizerConfig,
    epochs: usize,
    rng: &mut Rng,
) -> Result<(FactorStore, MfReport)> {
    let fs = FactorStore::random(num_users, num_movies, dim, rng)?;
    mf_train_from(fs, obs, cfg, epochs, rng)
}

pub fn mf_train_from(
    mut fs: FactorStore,
    obs: &[Observation],
    cfg: &OptimizerConfig,
    epochs: usize,
    rng: &mut Rng,
) -> Result<(FactorStore, MfReport)> {
    cfg.validate()?;
    let d = fs.dim();
    for &(i, j, y) in obs {
        fs.check(i, j)?;
        if !(y > 0.0 && y < 1.0) {
            return Err(Error::InvalidArgument(format!("target {y} outside (0,1)")));
        }
    }
    let initial = mf_objective(&fs, obs, cfg.l2_lambda);
    let mut report = MfReport { objective: vec![initial] };
    let mut order: Vec<usize> = (0..obs.len()).collect();
    let mut gu = vec![0.0; d];
    let mut gm = vec![0.0; d];
    for epoch in 0..epochs {
        if obs.is_empty() {
            for t in [&mut fs.user_factors, &mut fs.movie_factors] {
                for v in t.values.iter_mut() {
                    *v -= cfg.step(*v, 0.0);
                }
            }
        }
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for &k in &order {
            let (i, j, y) = obs[k];
            let p = sigmoid(fs.affinity(i, j));
            let coef = -2.0 * (y - p) * p * (1.0 - p);
            let eu = fs.user_factors.row(i);
            let em = fs.movie_factors.row(j);
            for c in 0..d {
                gu[c] = coef * em[c];
                gm[c] = coef * eu[c];
            }
            crate::nn::sgd_update(fs.user_factors.row_mut(i), &gu, cfg);
            crate::nn::sgd_update(fs.movie_factors.row_mut(j), &gm, cfg);
        }
        let obj = mf_objective(&fs, obs, cfg.l2_lambda);
        if !obj.is_finite() || !fs.user_factors.is_finite() || !fs.movie_factors.is_finite() {
            return Err(Error::NonFinite(format!("matrix factorization at epoch {}", epoch + 1)));
        }
        if initial > 0.0 && obj > 10.0 * initial {
            return Err(Error::Diverged(format!(
                "matrix factorization objective {obj:.4} exceeds 10x initial {initial:.4} at epoch {}",
                epoch + 1
            )));
        }
        log::debug!("mf epoch {} objective {obj:.6}", epoch + 1);
        report.objective.push(obj);
    }
    Ok((fs, report))
}

/// Ordered candidate list from [`mf_top_candidates`].
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub movies: Vec<usize>,
    /// Set when fewer than the requested number of movies were available.
    pub truncated: bool,
}

/// The `n` highest-scoring movies not excluded, by descending score with
/// ties broken by ascending index.
pub fn mf_top_candidates(fs: &FactorStore, i: usize, exclude: &[bool], n: usize) -> Result<Candidates> {
    if n == 0 {
        return Err(Error::InvalidArgument("candidate count must be at least 1".into()));
    }
    fs.check(i, 0)?;
    let scores: Vec<f64> = (0..fs.num_movies()).map(|j| fs.affinity(i, j)).collect();
    let movies = top_n_by_score(&scores, |j| exclude.get(j).copied().unwrap_or(false), n);
    Ok(Candidates { truncated: movies.len() < n, movies })
}

/// Indices of the `n` largest scores (descending, ties by ascending index),
/// skipping any index for which `skip` is true.
pub fn top_n_by_score(scores: &[f64], skip: impl Fn(usize) -> bool, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| !skip(j)).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if n < idx.len() {
        idx.select_nth_unstable_by(n, cmp);
        idx.truncate(n);
    }
    idx.sort_by(cmp);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;

    #[test]
    fn predict_reference_values() {
        let mut fs = FactorStore::zeros(2, 2, 4);
        assert_eq!(mf_predict(&fs, 0, 1).unwrap(), 0.5);
        // dot = 4 * (s * s) = 2 with s = sqrt(0.5)
        let s = 0.5f64.sqrt();
        fs.user_factors.row_mut(0).fill(s);
        fs.movie_factors.row_mut(0).fill(s);
        fs.movie_factors.row_mut(1).fill(-s);
        let p = mf_predict(&fs, 0, 0).unwrap();
        assert!((p - 0.880_797_077_977_882_3).abs() < 1e-12);
        let q = mf_predict(&fs, 0, 1).unwrap();
        assert!((q - 0.119_202_922_022_117_7).abs() < 1e-12);
        assert!((p + q - 1.0).abs() < 1e-12);
        assert!(mf_predict(&fs, 2, 0).is_err());
        assert!(mf_predict(&fs, 0, 5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let mut fs = FactorStore::random(4, 5, 3, &mut rng).unwrap();
        for t in [&mut fs.user_factors, &mut fs.movie_factors] {
            for v in t.values.iter_mut() {
                *v *= 20.0;
            }
        }
        let obs: Vec<Observation> =
            vec![(0, 1, 0.9), (1, 1, 0.1), (2, 3, 0.5), (3, 4, 0.7), (0, 0, 0.3), (3, 2, 0.1)];
        mf_gradient(&mut fs, &obs, 0.05);
        let err = finite_diff_check(&mut fs, |f| mf_objective(f, &obs, 0.05), 1e-6, None).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn recovers_rank_one_matrix() {
        let mut rng = Rng::new(17);
        let a: Vec<f64> = (0..12).map(|k| 0.5 + 0.15 * (k % 5) as f64).collect();
        let b: Vec<f64> = (0..15).map(|k| -1.2 + 0.2 * (k % 11) as f64).collect();
        let mut obs = Vec::new();
        for (i, ai) in a.iter().enumerate() {
            for (j, bj) in b.iter().enumerate() {
                obs.push((i, j, sigmoid(ai * bj)));
            }
        }
        let cfg = OptimizerConfig { learning_rate: 0.5, clip: 0.2, l2_lambda: 1e-4 };
        let (fs, report) = mf_train(&obs, 12, 15, 2, &cfg, 200, &mut rng).unwrap();
        let rmse = (obs
            .iter()
            .map(|&(i, j, y)| (y - mf_predict(&fs, i, j).unwrap()).powi(2))
            .sum::<f64>()
            / obs.len() as f64)
            .sqrt();
        assert!(rmse < 0.05, "rmse {rmse}");
        assert!(report.objective.last() < report.objective.first());
    }

    #[test]
    fn no_observations_shrinks_factors() {
        let mut rng = Rng::new(2);
        let fs0 = FactorStore::random(3, 3, 2, &mut rng).unwrap();
        let cfg = OptimizerConfig { learning_rate: 0.5, clip: 0.2, l2_lambda: 0.5 };
        let before = mf_objective(&fs0, &[], cfg.l2_lambda);
        let (fs, report) = mf_train_from(fs0.clone(), &[], &cfg, 5, &mut rng).unwrap();
        assert!(report.objective.last().unwrap() < &before);
        for (a, b) in fs.user_factors.values.iter().zip(&fs0.user_factors.values) {
            assert!(a.abs() < b.abs());
        }
    }

    #[test]
    fn candidates_order_and_ties() {
        let mut fs = FactorStore::zeros(1, 5, 1);
        fs.user_factors.values[0] = 1.0;
        fs.movie_factors.values.copy_from_slice(&[0.1, 0.5, 0.5, -1.0, 2.0]);
        let c = mf_top_candidates(&fs, 0, &[false; 5], 3).unwrap();
        assert_eq!(c.movies, vec![4, 1, 2]);
        assert!(!c.truncated);

        let mut only = [true; 5];
        only[3] = false;
        assert_eq!(mf_top_candidates(&fs, 0, &only, 1).unwrap().movies, vec![3]);

        let c = mf_top_candidates(&fs, 0, &[false, false, true, true, true], 10).unwrap();
        assert_eq!(c.movies, vec![1, 0]);
        assert!(c.truncated);
        assert!(mf_top_candidates(&fs, 0, &[false; 5], 0).is_err());
    }

    #[test]
    fn hundred_candidates_non_increasing() {
        let mut rng = Rng::new(8);
        let fs = FactorStore::random(3, 300, 5, &mut rng).unwrap();
        let c = mf_top_candidates(&fs, 1, &vec![false; 300], 100).unwrap();
        assert_eq!(c.movies.len(), 100);
        let mut uniq = c.movies.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 100);
        let scores: Vec<f64> = c.movies.iter().map(|&j| mf_predict(&fs, 1, j).unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(mf_top_candidates(&fs, 1, &vec![false; 300], 100).unwrap(), c);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shift_and_monotone_transform_preserve_order(
                scores in proptest::collection::vec(-5.0f64..5.0, 1..40),
                shift in -3.0f64..3.0,
                n in 1usize..40,
            ) {
                let base = top_n_by_score(&scores, |_| false, n);
                let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
                let squashed: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
                prop_assert_eq!(&top_n_by_score(&shifted, |_| false, n), &base);
                prop_assert_eq!(&top_n_by_score(&squashed, |_| false, n), &base);
            }

            #[test]
            fn predict_in_open_interval(u in proptest::collection::vec(-3.0f64..3.0, 3),
                                        m in proptest::collection::vec(-3.0f64..3.0, 3)) {
                let mut fs = FactorStore::zeros(1, 1, 3);
                fs.user_factors.values.copy_from_slice(&u);
                fs.movie_factors.values.copy_from_slice(&m);
                let p = mf_predict(&fs, 0, 0).unwrap();
                prop_assert!(p > 0.0 && p < 1.0);
            }
        }
    }
}
