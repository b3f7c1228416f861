//! Planted-preference rating worlds for tests and experiments.
//!
//! Every user and movie gets a latent vector. A user's taste drifts linearly
//! from one vector to another across sessions; movies are consumed with
//! probability increasing in current affinity and rated 4-5 exactly when the
//! affinity is in the user's top `positive_fraction` of the catalog. Content
//! features are noisy copies of the movie latents.

use crate::data::{ContentFeatures, RatingDataset, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::nn::{dot, Rng};

pub const START: i64 = 1_000_000_000 - 1_000_000_000 % SECONDS_PER_DAY;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub users: usize,
    pub movies: usize,
    /// Training sessions; one further session is held out.
    pub sessions: usize,
    pub session_days: u32,
    pub ratings_per_session: usize,
    /// Ratings per user in the held-out session.
    pub held_out_ratings: usize,
    pub latent_dim: usize,
    /// When positive, latents are one of `clusters` shared centres plus noise of
    /// standard deviation `cluster_noise`.
    pub clusters: usize,
    pub cluster_noise: f64,
    /// 0 keeps tastes fixed, 1 moves each user fully to a new taste by the held-out session.
    pub drift: f64,
    /// Inverse temperature of movie choice over affinities.
    pub choice_sharpness: f64,
    pub positive_fraction: f64,
    /// Standard deviation of the noise added to movie latents to form content features.
    pub content_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            users: 10,
            movies: 20,
            sessions: 6,
            session_days: 30,
            ratings_per_session: 1,
            held_out_ratings: 8,
            latent_dim: 4,
            clusters: 2,
            cluster_noise: 0.3,
            drift: 0.0,
            choice_sharpness: 1.0,
            positive_fraction: 0.5,
            content_noise: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub dataset: RatingDataset,
    pub content: ContentFeatures,
    /// Last second of the final training session.
    pub train_end: i64,
    /// Last second of the held-out session.
    pub test_end: i64,
    pub user_latent: Vec<Vec<f64>>,
    pub user_target: Vec<Vec<f64>>,
    pub movie_latent: Vec<Vec<f64>>,
}

impl World {
    /// Taste of `user` during session `t` (the held-out session is `sessions`).
    pub fn taste(&self, user: usize, t: usize, cfg: &WorldConfig) -> Vec<f64> {
        taste(&self.user_latent[user], &self.user_target[user], t, cfg)
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    let u1 = rng.uniform().max(1e-300);
    let u2 = rng.uniform();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

fn taste(a: &[f64], b: &[f64], t: usize, cfg: &WorldConfig) -> Vec<f64> {
    let w = cfg.drift * t as f64 / cfg.sessions.max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
}

pub fn generate(cfg: &WorldConfig) -> Result<World> {
    if cfg.users == 0 || cfg.movies == 0 || cfg.sessions == 0 || cfg.latent_dim == 0 || cfg.session_days == 0 {
        return Err(Error::InvalidArgument("world dimensions must be positive".into()));
    }
    if cfg.sessions * cfg.ratings_per_session + cfg.held_out_ratings > cfg.movies {
        return Err(Error::InvalidArgument(format!(
            "{} sessions x {} ratings plus {} held out exceed the {} movies",
            cfg.sessions, cfg.ratings_per_session, cfg.held_out_ratings, cfg.movies
        )));
    }
    if !(0.0..=1.0).contains(&cfg.positive_fraction) {
        return Err(Error::InvalidArgument("positive_fraction must lie in [0, 1]".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let centres: Vec<_> = (0..cfg.clusters).map(|_| gaussian_vec(&mut rng, cfg.latent_dim)).collect();
    let latent = |rng: &mut Rng| {
        if centres.is_empty() {
            return gaussian_vec(rng, cfg.latent_dim);
        }
        let c = &centres[rng.below(centres.len())];
        c.iter().map(|x| x + cfg.cluster_noise * gaussian(rng)).collect::<Vec<f64>>()
    };
    let user_latent: Vec<_> = (0..cfg.users).map(|_| latent(&mut rng)).collect();
    let user_target: Vec<_> = (0..cfg.users).map(|_| latent(&mut rng)).collect();
    let movie_latent: Vec<_> = (0..cfg.movies).map(|_| latent(&mut rng)).collect();

    let len = cfg.session_days as i64 * SECONDS_PER_DAY;
    let top = ((cfg.positive_fraction * cfg.movies as f64).round() as usize).min(cfg.movies);
    let mut records = Vec::new();
    for u in 0..cfg.users {
        let mut seen = vec![false; cfg.movies];
        for t in 0..=cfg.sessions {
            let p = taste(&user_latent[u], &user_target[u], t, cfg);
            let aff: Vec<f64> = movie_latent.iter().map(|q| dot(&p, q)).collect();
            let mut order: Vec<usize> = (0..cfg.movies).collect();
            order.sort_by(|&a, &b| aff[b].total_cmp(&aff[a]).then(a.cmp(&b)));
            let mut liked = vec![false; cfg.movies];
            for &m in &order[..top] {
                liked[m] = true;
            }
            let n = if t == cfg.sessions { cfg.held_out_ratings } else { cfg.ratings_per_session };
            for _ in 0..n {
                let weights: Vec<f64> = (0..cfg.movies)
                    .map(|m| if seen[m] { 0.0 } else { (cfg.choice_sharpness * aff[m]).exp() })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut x = rng.uniform() * total;
                let mut m = weights.iter().rposition(|&w| w > 0.0).unwrap();
                for (j, w) in weights.iter().enumerate() {
                    if *w > 0.0 && x < *w {
                        m = j;
                        break;
                    }
                    x -= w;
                }
                seen[m] = true;
                let rating = if liked[m] { 4 + rng.below(2) as i64 } else { 1 + rng.below(3) as i64 };
                let ts = START + t as i64 * len + 1 + rng.below((len - 1) as usize) as i64;
                records.push((u as i64 + 1, m as i64 + 1, rating, ts));
            }
        }
    }
    // Anchor the first session window at START.
    if let Some(first) = records.iter_mut().min_by_key(|r| r.3) {
        first.3 = START;
    }
    let dataset = RatingDataset::from_records(records)?;
    let mut content = ContentFeatures::zeros(dataset.num_movies, cfg.latent_dim);
    for m in 0..dataset.num_movies {
        let raw = dataset.movies.raw(m) as usize - 1;
        content.vectors[m] = movie_latent[raw].iter().map(|x| x + cfg.content_noise * gaussian(&mut rng)).collect();
        content.present[m] = true;
    }
    Ok(World {
        dataset,
        content,
        train_end: START + cfg.sessions as i64 * len - 1,
        test_end: START + (cfg.sessions as i64 + 1) * len - 1,
        user_latent,
        user_target,
        movie_latent,
    })
}
