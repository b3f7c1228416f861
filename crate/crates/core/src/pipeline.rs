//! End-to-end commands: ingest, train, evaluate, recommend and the sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::adversarial::{pretrain_pairwise, train_adversarial, AdversarialConfig, PretrainConfig, TrainerState, TrainingData, Validation};
use crate::checkpoint::Checkpoint;
use crate::config::{Bound, DataFormat, GeneratorCandidates, RunConfig};
use crate::data::{
    label_feedback, load_content_features, parse_movielens, parse_netflix, sessionize, time_split, ContentFeatures,
    LabeledDataset, Partition, RatingDataset, SessionizedDataset, Split, SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{rank_all, rerank, reports_csv, EvalTargets, MetricReport, RankedList, METRIC_NAMES};
use crate::mf::{mf_top_candidates, mf_train, rating_target, FactorStore, Observation};
use crate::mixture::{MixtureScorer, ModelInputs, ScorerConfig};
use crate::nn::{sigmoid, OptimizerConfig, Parameters, Rng};

pub const CHECKPOINT_FILE: &str = "checkpoint.lsic";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "split_manifest.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";

const DAY: i64 = 86_400;

pub fn load_dataset(cfg: &RunConfig) -> Result<RatingDataset> {
    match cfg.data_format {
        DataFormat::MovieLens => parse_movielens(&cfg.data_path),
        DataFormat::Netflix => parse_netflix(&cfg.data_path),
    }
}

/// Resolves `auto` bounds: training ends on the UTC day containing
/// `start + train_fraction * span`; the held-out interval runs to the last event.
pub fn split_spec(cfg: &RunConfig, ds: &RatingDataset) -> SplitSpec {
    let (start, end) = (ds.start_timestamp(), ds.end_timestamp());
    let train_end = match cfg.train_end {
        Bound::At(t) => t,
        Bound::Auto => {
            let cut = start + ((end - start) as f64 * cfg.train_fraction) as i64;
            (cut.div_euclid(DAY) + 1) * DAY - 1
        }
    };
    let test_end = match cfg.test_end {
        Bound::At(t) => t,
        Bound::Auto => end.max(train_end + 1),
    };
    SplitSpec { train_end, test_end, validation_fraction: cfg.validation_fraction, session_length_days: cfg.session_length_days }
}

/// Parsed, labelled, split and sessionized data for one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub labeled: LabeledDataset,
    pub spec: SplitSpec,
    pub split: Split,
    pub sessions: SessionizedDataset,
    pub content: Option<ContentFeatures>,
    pub validation: EvalTargets,
    pub test: EvalTargets,
}

impl Prepared {
    pub fn new(cfg: &RunConfig, ds: RatingDataset) -> Result<Self> {
        let content = cfg.content_path.as_deref().map(|p| load_content_features(p, &ds)).transpose()?;
        Self::with_content(cfg, ds, content)
    }

    pub fn with_content(cfg: &RunConfig, ds: RatingDataset, content: Option<ContentFeatures>) -> Result<Self> {
        let spec = split_spec(cfg, &ds);
        let split = time_split(&ds, &spec, cfg.seed)?;
        let labeled = label_feedback(ds, cfg.feedback_scheme());
        Self::from_parts(labeled, spec, split, content)
    }

    pub fn from_parts(labeled: LabeledDataset, spec: SplitSpec, split: Split, content: Option<ContentFeatures>) -> Result<Self> {
        let sessions = sessionize(&labeled, &split, spec.session_length_days)?;
        let validation = EvalTargets::new(&labeled, &split, Partition::Validation);
        let test = EvalTargets::new(&labeled, &split, Partition::Test);
        Ok(Self { labeled, spec, split, sessions, content, validation, test })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg, load_dataset(cfg)?)
    }

    pub fn dataset(&self) -> &RatingDataset {
        &self.labeled.dataset
    }

    pub fn inputs(&self, use_content: bool) -> ModelInputs<'_> {
        ModelInputs::new(&self.sessions, if use_content { self.content.as_ref() } else { None })
    }

    /// Rescaled training ratings for MF.
    pub fn observations(&self) -> Vec<Observation> {
        self.sessions.events.iter().map(|e| (e.user, e.movie, rating_target(e.rating))).collect()
    }

    pub fn summary(&self) -> String {
        let ds = self.dataset();
        let density = ds.len() as f64 / (ds.num_users as f64 * ds.num_movies as f64);
        let mut s = String::new();
        let _ = writeln!(s, "users          {}", ds.num_users);
        let _ = writeln!(s, "movies         {}", ds.num_movies);
        let _ = writeln!(s, "ratings        {}", ds.len());
        let _ = writeln!(s, "density        {:.4}%", density * 100.0);
        let _ = writeln!(s, "positives      {} ({})", self.labeled.num_positive, self.labeled.scheme);
        let _ = writeln!(s, "train_end      {}", self.spec.train_end);
        let _ = writeln!(s, "test_end       {}", self.spec.test_end);
        for p in [Partition::Train, Partition::Validation, Partition::Test, Partition::Cold, Partition::Excluded] {
            let _ = writeln!(s, "{:<14} {}", p.as_str(), self.split.count(p));
        }
        let _ = writeln!(s, "session_days   {}", self.spec.session_length_days);
        let _ = writeln!(s, "sessions       {}", self.sessions.session_count);
        let _ = writeln!(s, "eval_users     {}", self.test.users().len());
        s
    }
}

fn out_path(cfg: &RunConfig, file: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(cfg.out_dir.join(file))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses and splits the data, writing the split manifest and a summary.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<Prepared> {
    let prep = Prepared::load(cfg)?;
    prep.split.write_manifest(prep.dataset(), &out_path(cfg, MANIFEST_FILE)?)?;
    let mut summary = format!("# config_sha256={}\n", cfg.hash());
    summary.push_str(&prep.summary());
    let _ = writeln!(summary, "manifest_sha256 {}", prep.split.manifest_hash(prep.dataset()));
    write(&out_path(cfg, SUMMARY_FILE)?, &summary)?;
    Ok(prep)
}

pub fn scorer_config(cfg: &RunConfig, content_dim: Option<usize>) -> ScorerConfig {
    ScorerConfig {
        variant: cfg.mixture,
        hidden: cfg.hidden_size,
        input_dim: cfg.input_dim,
        content_dim,
        attention_dim: cfg.attention_dim,
        attention_pool_size: (cfg.attention_pool_size > 0).then_some(cfg.attention_pool_size),
        pool_seed: cfg.seed,
        identity_init_map: false,
        bptt_truncation: (cfg.bptt_truncation > 0).then_some(cfg.bptt_truncation),
        init_range: cfg.rnn_init_range,
    }
}

fn adversarial_config(cfg: &RunConfig) -> AdversarialConfig {
    let opt = |learning_rate| OptimizerConfig { learning_rate, clip: cfg.clip, l2_lambda: cfg.l2_lambda };
    AdversarialConfig {
        epochs: cfg.adversarial_epochs,
        g_steps: cfg.g_steps,
        d_steps: cfg.d_steps,
        batch_size: cfg.batch_size,
        samples: cfg.samples,
        margin: cfg.margin,
        g_optimizer: opt(cfg.learning_rate),
        d_optimizer: opt(cfg.d_learning_rate),
    }
}

/// Hash of every setting that shapes the trained state, so a run may be
/// resumed with a larger adversarial epoch budget.
pub fn resume_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.adversarial_epochs = 0;
    c.hash()
}

/// All trained artefacts of one run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub mf: FactorStore,
    pub generator: MixtureScorer,
    pub discriminator: MixtureScorer,
    pub best: MixtureScorer,
    pub state: TrainerState,
}

impl Trained {
    pub fn to_checkpoint(&self, cfg: &RunConfig, prep: &Prepared) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("config_sha256", cfg.hash());
        ck.set_meta("resume_sha256", resume_hash(cfg));
        ck.set_meta("num_users", prep.sessions.num_users);
        ck.set_meta("num_movies", prep.sessions.num_movies);
        ck.set_meta("mixture", cfg.mixture);
        for (k, v) in self.state.to_meta() {
            ck.set_meta(k, v);
        }
        ck.push_all(FactorStore::PREFIX, self.mf.tensors());
        ck.push_all("gen", self.generator.tensors());
        ck.push_all("disc", self.discriminator.tensors());
        ck.push_all("best", self.best.tensors());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &RunConfig, prep: &Prepared) -> Result<Self> {
        let (u, m): (usize, usize) = (ck.meta_parse("num_users")?, ck.meta_parse("num_movies")?);
        if (u, m) != (prep.sessions.num_users, prep.sessions.num_movies) {
            return Err(Error::Checkpoint(format!(
                "checkpoint covers {u} users x {m} movies, data has {} x {}",
                prep.sessions.num_users, prep.sessions.num_movies
            )));
        }
        let mut mf = FactorStore::zeros(u, m, cfg.factor_dim);
        ck.restore_into(FactorStore::PREFIX, mf.tensors_mut())?;
        let content_dim = prep.content.as_ref().map(|c| c.dim);
        let blank = || MixtureScorer::new(scorer_config(cfg, content_dim), mf.clone(), &mut Rng::new(0));
        let (mut generator, mut discriminator, mut best) = (blank()?, blank()?, blank()?);
        ck.restore_into("gen", generator.tensors_mut())?;
        ck.restore_into("disc", discriminator.tensors_mut())?;
        ck.restore_into("best", best.tensors_mut())?;
        let state = TrainerState::from_meta(|k| ck.meta(k).map(str::to_string))?;
        Ok(Self { mf, generator, discriminator, best, state })
    }

    pub fn load(path: &Path, cfg: &RunConfig, prep: &Prepared) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, cfg, prep)
    }
}

/// MF training followed by pairwise pretraining of both players.
pub fn pretrain(cfg: &RunConfig, prep: &Prepared) -> Result<Trained> {
    let s = &prep.sessions;
    let mf_opt = OptimizerConfig { learning_rate: cfg.mf_learning_rate, clip: cfg.clip, l2_lambda: cfg.mf_l2_lambda };
    let (mf, report) = mf_train(&prep.observations(), s.num_users, s.num_movies, cfg.factor_dim, &mf_opt, cfg.mf_epochs, &mut Rng::stream(cfg.seed, 1))?;
    info!("mf objective {:.4} -> {:.4}", report.objective[0], report.objective.last().copied().unwrap_or(f64::NAN));

    let content_dim = prep.content.as_ref().map(|c| c.dim);
    let scfg = scorer_config(cfg, content_dim);
    let mut generator = MixtureScorer::new(scfg.clone(), mf.clone(), &mut Rng::stream(cfg.seed, 2))?;
    let mut discriminator = MixtureScorer::new(scfg, mf.clone(), &mut Rng::stream(cfg.seed, 3))?;
    let data = training_data(cfg, prep, &mf)?;
    let pcfg = |epochs| PretrainConfig {
        epochs,
        batches_per_epoch: (cfg.pretrain_batches > 0).then_some(cfg.pretrain_batches),
        batch_size: cfg.batch_size,
        margin: cfg.margin,
        optimizer: OptimizerConfig { learning_rate: cfg.pretrain_learning_rate, clip: cfg.clip, l2_lambda: cfg.l2_lambda },
    };
    pretrain_pairwise(&mut generator, &data, &pcfg(cfg.g_pretrain_epochs), &mut Rng::stream(cfg.seed, 4))?;
    pretrain_pairwise(&mut discriminator, &data, &pcfg(cfg.d_pretrain_epochs), &mut Rng::stream(cfg.seed, 5))?;
    Ok(Trained {
        mf,
        best: generator.clone(),
        generator,
        discriminator,
        state: TrainerState::new(Rng::stream(cfg.seed, 6)),
    })
}

fn training_data<'p>(cfg: &RunConfig, prep: &'p Prepared, mf: &FactorStore) -> Result<TrainingData<'p>> {
    let data = TrainingData::new(prep.inputs(true));
    match cfg.generator_candidates {
        GeneratorCandidates::All => Ok(data),
        GeneratorCandidates::MfTop => {
            let n = prep.sessions.num_movies;
            let lists = (0..prep.sessions.num_users)
                .map(|u| Ok(mf_top_candidates(mf, u, &prep.validation.exclude_mask(u, n), cfg.candidates)?.movies))
                .collect::<Result<Vec<_>>>()?;
            data.with_candidates(lists)
        }
    }
}

/// Runs (or resumes) the full training pipeline, checkpointing every epoch.
pub fn cmd_train(cfg: &RunConfig, prep: &Prepared, resume: Option<&Path>) -> Result<Trained> {
    let ck_path = out_path(cfg, CHECKPOINT_FILE)?;
    let mut t = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.meta("resume_sha256")? != resume_hash(cfg) {
                return Err(Error::Config(format!("checkpoint {} was produced by a different configuration", p.display())));
            }
            Trained::from_checkpoint(&ck, cfg, prep)?
        }
        None => pretrain(cfg, prep)?,
    };
    let data = training_data(cfg, prep, &t.mf)?;
    let val = Validation { relevant: &prep.validation.relevant, seen: &prep.validation.seen };
    let acfg = adversarial_config(cfg);
    let Trained { mf, generator, discriminator, best, state } = &mut t;
    train_adversarial(generator, discriminator, best, &data, &val, &acfg, state, |st, g, d, b| {
        let snapshot = Trained { mf: mf.clone(), generator: g.clone(), discriminator: d.clone(), best: b.clone(), state: st.clone() };
        snapshot.to_checkpoint(cfg, prep).save(&ck_path)
    })?;
    write(&out_path(cfg, CURVE_FILE)?, &t.state.curve_csv(&cfg.hash()))?;
    Ok(t)
}

/// MF-only and re-ranked mixture lists for every user with test positives.
///
/// The mixture re-orders the user's MF top-`n` candidates by its score at
/// the step after the final training session.
pub fn rerank_lists(
    prep: &Prepared,
    targets: &EvalTargets,
    mf: &FactorStore,
    scorer: &MixtureScorer,
    use_content: bool,
    n: usize,
) -> Result<(Vec<RankedList>, Vec<RankedList>)> {
    let inputs = prep.inputs(use_content);
    let fwd = scorer.forward_all(&inputs)?;
    let t = inputs.last_step();
    let m = prep.sessions.num_movies;
    let mut mf_lists = Vec::new();
    let mut mix_lists = Vec::new();
    for u in targets.users() {
        let cands = mf_top_candidates(mf, u, &targets.exclude_mask(u, m), n)?.movies;
        let reranked = rerank(&cands, |j| scorer.logit(&fwd, u, j, t))?;
        mf_lists.push(RankedList::new(u, cands, &targets.relevant[u]));
        mix_lists.push(RankedList::new(u, reranked, &targets.relevant[u]));
    }
    Ok((mf_lists, mix_lists))
}

/// Full-catalog ranking by the mixture score (no MF candidate stage).
pub fn full_lists(prep: &Prepared, targets: &EvalTargets, scorer: &MixtureScorer, use_content: bool) -> Result<Vec<RankedList>> {
    let inputs = prep.inputs(use_content);
    let fwd = scorer.forward_all(&inputs)?;
    let t = inputs.last_step();
    let movies: Vec<usize> = (0..prep.sessions.num_movies).collect();
    targets
        .users()
        .into_iter()
        .map(|u| {
            let scores = scorer.logits_for_user(&fwd, u, &movies, t)?;
            Ok(RankedList::new(u, rank_all(&scores, &targets.seen[u]), &targets.relevant[u]))
        })
        .collect()
}

/// Test-set reports for the MF baseline and the best generator.
pub fn evaluate(cfg: &RunConfig, prep: &Prepared, trained: &Trained, use_content: bool) -> Result<(MetricReport, MetricReport)> {
    let (a, b) = rerank_lists(prep, &prep.test, &trained.mf, &trained.best, use_content, cfg.candidates)?;
    let label = if use_content { format!("lsic-{}", cfg.mixture) } else { format!("lsic-{}-no-content", cfg.mixture) };
    Ok((MetricReport::from_lists("mf", &a)?, MetricReport::from_lists(label, &b)?))
}

pub fn cmd_evaluate(cfg: &RunConfig, prep: &Prepared, checkpoint: &Path, no_content: bool) -> Result<Vec<MetricReport>> {
    let trained = Trained::load(checkpoint, cfg, prep)?;
    let (mf, mix) = evaluate(cfg, prep, &trained, true)?;
    let mut reports = vec![mf, mix];
    if no_content {
        reports.push(evaluate(cfg, prep, &trained, false)?.1);
    }
    write(&out_path(cfg, METRICS_FILE)?, &reports_csv(&reports, &cfg.hash()))?;
    Ok(reports)
}

/// Top-`n` unwatched movies for a raw user id: `(raw movie id, score)`.
pub fn cmd_recommend(cfg: &RunConfig, prep: &Prepared, checkpoint: &Path, raw_user: i64, n: usize) -> Result<Vec<(i64, f64)>> {
    known_user(prep, raw_user)?;
    recommend(prep, &Trained::load(checkpoint, cfg, prep)?, raw_user, n)
}

fn known_user(prep: &Prepared, raw_user: i64) -> Result<usize> {
    let ds = prep.dataset();
    let user = ds.users.dense(raw_user).ok_or_else(|| {
        let near: Vec<String> = ds.users.nearest(raw_user, 5).iter().map(|r| r.to_string()).collect();
        Error::InvalidArgument(format!("unknown user {raw_user}; nearest known ids: {}", near.join(", ")))
    })?;
    if prep.sessions.user_sessions[user].iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidArgument(format!("user {raw_user} has no training ratings")));
    }
    Ok(user)
}

/// Top-`n` movies (raw id, probability) the user has not rated before the test period.
pub fn recommend(prep: &Prepared, trained: &Trained, raw_user: i64, n: usize) -> Result<Vec<(i64, f64)>> {
    let user = known_user(prep, raw_user)?;
    let ds = prep.dataset();
    let inputs = prep.inputs(true);
    let movies: Vec<usize> = (0..ds.num_movies).collect();
    let fwd = trained.best.forward(&inputs, &[user], &movies, inputs.last_step())?;
    let scores = trained.best.logits_for_user(&fwd, user, &movies, inputs.last_step())?;
    let ranked = rank_all(&scores, &prep.test.seen[user]);
    Ok(ranked.into_iter().take(n).map(|m| (ds.movies.raw(m), sigmoid(scores[m]))).collect())
}

fn metric_row(s: &mut String, prefix: &str, r: &MetricReport) {
    let _ = write!(s, "{prefix},{},{}", r.label, r.user_count());
    for v in r.mean.0 {
        let _ = write!(s, ",{v:.6}");
    }
    s.push('\n');
}

/// Re-rank evaluation over several candidate counts `n`.
pub fn sweep_candidates(cfg: &RunConfig, prep: &Prepared, trained: &Trained, ns: &[usize]) -> Result<String> {
    if ns.is_empty() {
        return Err(Error::InvalidArgument("candidate sweep needs at least one N".into()));
    }
    let mut s = format!("# config_sha256={}\ncandidates,model,users,{}\n", cfg.hash(), METRIC_NAMES.join(","));
    for &n in ns {
        let (a, b) = rerank_lists(prep, &prep.test, &trained.mf, &trained.best, true, n)?;
        metric_row(&mut s, &n.to_string(), &MetricReport::from_lists("mf", &a)?);
        metric_row(&mut s, &n.to_string(), &MetricReport::from_lists(format!("lsic-{}", cfg.mixture), &b)?);
    }
    Ok(s)
}

pub fn cmd_sweep_candidates(cfg: &RunConfig, prep: &Prepared, checkpoint: &Path, ns: &[usize]) -> Result<String> {
    let trained = Trained::load(checkpoint, cfg, prep)?;
    let csv = sweep_candidates(cfg, prep, &trained, ns)?;
    write(&out_path(cfg, "sweep_candidates.csv")?, &csv)?;
    Ok(csv)
}

/// Per session length: MF and mixture test reports.
pub type SessionSweep = Vec<(u32, MetricReport, MetricReport)>;

/// Retrains the whole pipeline for each session length and reports MF-only
/// and mixture test metrics.
pub fn sweep_sessions(cfg: &RunConfig, ds: &RatingDataset, periods: &[u32]) -> Result<(String, SessionSweep)> {
    if periods.is_empty() {
        return Err(Error::InvalidArgument("session sweep needs at least one period".into()));
    }
    if let Some(p) = periods.iter().find(|&&p| p < 1) {
        return Err(Error::InvalidArgument(format!("session period {p} is shorter than one day")));
    }
    let mut s = format!("# config_sha256={}\nsession_days,model,users,{}\n", cfg.hash(), METRIC_NAMES.join(","));
    let mut out = Vec::new();
    for &p in periods {
        let mut c = cfg.clone();
        c.session_length_days = p;
        let prep = Prepared::new(&c, ds.clone())?;
        let mut t = pretrain(&c, &prep)?;
        let data = training_data(&c, &prep, &t.mf)?;
        let val = Validation { relevant: &prep.validation.relevant, seen: &prep.validation.seen };
        let Trained { generator, discriminator, best, state, .. } = &mut t;
        train_adversarial(generator, discriminator, best, &data, &val, &adversarial_config(&c), state, |_, _, _, _| Ok(()))?;
        let (a, b) = evaluate(&c, &prep, &t, true)?;
        metric_row(&mut s, &p.to_string(), &a);
        metric_row(&mut s, &p.to_string(), &b);
        info!("session period {p}d: mf NDCG@5 {:.4}, mixture {:.4}", a.mean.ndcg_at_5(), b.mean.ndcg_at_5());
        out.push((p, a, b));
    }
    Ok((s, out))
}

pub fn cmd_sweep_sessions(cfg: &RunConfig, periods: &[u32]) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let (csv, _) = sweep_sessions(cfg, &ds, periods)?;
    write(&out_path(cfg, "sweep_sessions.csv")?, &csv)?;
    Ok(csv)
}
