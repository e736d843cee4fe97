//! Run orchestration: training on disk, evaluation, diagnostics, sweeps.
//!
//! A run lives in one directory: a config snapshot, a line-delimited metrics
//! log (one JSON record per optimizer update), numbered checkpoints, and the
//! evaluation / diagnostics artifacts derived from them. Training is
//! resumable: the latest checkpoint restores parameters, optimizer state,
//! and counters, and because every random draw comes from a stream keyed by
//! the master seed and an episode index, a resumed run reproduces the
//! uninterrupted one bit for bit.

pub mod report;

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{preset, Ablation, ConfigError, Method, RunConfig};
use crate::curriculum::{sample_roster, stage_for_episode, Split};
use crate::env::EnvError;
use crate::exec::ExecMode;
use crate::learner::{Critic, Learner, LearnerError, UpdateMetrics};
use crate::nn::Params;
use crate::policy::{ActorNet, Categorical, PolicyError};
use crate::rng::{stream, stream2};
use crate::rollout::{collect_episode, greedy_return, EpisodeData, RolloutBatch, RolloutError};
use crate::teacher::SetTeacherCritic;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run directory {dir} was created for a different configuration")]
    ConfigMismatch { dir: PathBuf },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("no checkpoint found under {0}")]
    NoCheckpoint(PathBuf),
    #[error("the {0} split has no roster counts to evaluate")]
    EmptySplit(&'static str),
    #[error("context diagnostics need a distilled run: {0}")]
    NotDistilled(&'static str),
    #[error("no completed runs found under {0}")]
    NoRuns(PathBuf),
}

impl HarnessError {
    /// Configuration mistakes are reported differently from runtime
    /// failures (exit code 2 versus 1 in the command-line tool).
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::ConfigMismatch { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Serializes `value` prettily to `path` via a temp-file rename.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Mean and sample standard deviation; the deviation needs two points.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    if xs.is_empty() {
        return (f64::NAN, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Cosine similarity, defined as 0 when either vector is (numerically) zero.
pub fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let dot = a.dot(&b);
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    dot / (na * nb).max(1e-12)
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

/// Layout of one run on disk.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// The directory a config trains into under `root`.
    pub fn for_config(root: &Path, cfg: &RunConfig) -> Self {
        Self { path: root.join(cfg.run_label()) }
    }

    pub fn open(path: &Path) -> Self {
        Self { path: path.to_path_buf() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join("config.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.jsonl")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.path.join("checkpoints")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.path.join("eval")
    }

    pub fn diagnostics_dir(&self) -> PathBuf {
        self.path.join("diagnostics")
    }

    pub fn checkpoint_path(&self, update: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("update-{update:06}.json"))
    }

    fn ensure_layout(&self) -> Result<(), HarnessError> {
        for dir in [
            self.path.clone(),
            self.checkpoints_dir(),
            self.eval_dir(),
            self.diagnostics_dir(),
        ] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(())
    }

    /// The highest-numbered checkpoint, if any exist.
    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        let dir = self.checkpoints_dir();
        let entries = fs::read_dir(&dir).ok()?;
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in entries.flatten() {
            let name = entry.file_name();
            let name = name.to_string_lossy();
            let update: u64 = match name
                .strip_prefix("update-")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse().ok())
            {
                Some(u) => u,
                None => continue,
            };
            if best.as_ref().is_none_or(|(b, _)| update > *b) {
                best = Some((update, entry.path()));
            }
        }
        best.map(|(_, p)| p)
    }
}

/// Reads the config snapshot stored in a run directory.
pub fn load_run_config(run_dir: &Path) -> Result<RunConfig, HarnessError> {
    let path = run_dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

fn capture_checkpoint(
    cfg: &RunConfig,
    learner: &Learner,
    episode: u64,
) -> Result<Checkpoint, CheckpointError> {
    let mut sections: Vec<(&str, &dyn Params)> = vec![("actor", &learner.actor)];
    if !learner.critic.is_local() {
        sections.push(("critic", &learner.critic));
    }
    if let Some(ema) = &learner.ema {
        sections.push(("ema", &ema.shadow));
    }
    Checkpoint::capture(
        &cfg.fingerprint(),
        episode,
        learner.updates_done,
        &sections,
        &learner.opt,
    )
}

fn restore_learner(learner: &mut Learner, ck: &Checkpoint) -> Result<(), CheckpointError> {
    {
        let mut sections: Vec<(&str, &mut dyn Params)> = vec![("actor", &mut learner.actor)];
        if !learner.critic.is_local() {
            sections.push(("critic", &mut learner.critic));
        }
        if let Some(ema) = learner.ema.as_mut() {
            sections.push(("ema", &mut ema.shadow));
        }
        ck.restore(&mut sections)?;
    }
    learner.opt = ck.adam.clone();
    learner.updates_done = ck.update;
    Ok(())
}

/// Rebuilds the actor alone from a checkpoint. Critic and teacher sections
/// are never touched, so this works on checkpoints whose teacher arrays have
/// been stripped — decentralized execution needs nothing but the actor.
pub fn load_actor(cfg: &RunConfig, checkpoint: &Path) -> Result<(ActorNet, u64), HarnessError> {
    let ck = Checkpoint::load(checkpoint, Some(&cfg.fingerprint()))?;
    let mut actor = ActorNet::new(cfg.actor_config(), &mut stream(cfg.seed, "init-actor", 0));
    ck.restore(&mut [("actor", &mut actor)])?;
    Ok((actor, ck.update))
}

/// Rebuilds the full learner (actor, critic, teacher shadow, optimizer).
pub fn load_learner(cfg: &RunConfig, checkpoint: &Path) -> Result<Learner, HarnessError> {
    let mut learner = cfg.build()?;
    let ck = Checkpoint::load(checkpoint, Some(&cfg.fingerprint()))?;
    restore_learner(&mut learner, &ck)?;
    Ok(learner)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Episodes collected when this update finished.
    pub episode: usize,
    /// Curriculum stage of the most recent episode.
    pub stage: usize,
    /// Mean per-episode return of the update batch, in reporting units.
    pub mean_return: f64,
    #[serde(flatten)]
    pub metrics: UpdateMetrics,
}

/// Summary of a [`run_training`] call.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub episodes: usize,
    pub updates: u64,
    /// Update count restored from a checkpoint, when the run resumed.
    pub resumed_at: Option<u64>,
    pub final_checkpoint: PathBuf,
    /// Whether the full episode budget has been consumed.
    pub complete: bool,
}

/// Drops metrics records at or past `keep_below`, so a resumed run regrows
/// the log identically to an uninterrupted one.
fn truncate_metrics(path: &Path, keep_below: u64) -> Result<(), HarnessError> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainRecord = serde_json::from_str(&line)?;
        if record.metrics.update < keep_below {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io_err(path))
}

/// Parses a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<TrainRecord>, HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Trains `cfg` inside `root/<run label>`, creating or resuming the run
/// directory. `stop_after` caps the number of collected episodes (for
/// interruption tests and smoke runs); `on_update` sees each metrics record
/// as it is written.
pub fn run_training(
    cfg: &RunConfig,
    root: &Path,
    stop_after: Option<usize>,
    mut on_update: Option<&mut dyn FnMut(&TrainRecord)>,
) -> Result<TrainOutcome, HarnessError> {
    let mut learner = cfg.build()?;
    let rd = RunDir::for_config(root, cfg);
    rd.ensure_layout()?;
    let fingerprint = cfg.fingerprint();

    // The snapshot pins the run; a second invocation must agree with it.
    let config_path = rd.config_path();
    if config_path.exists() {
        let existing = load_run_config(&rd.path)?;
        if existing.fingerprint() != fingerprint {
            return Err(HarnessError::ConfigMismatch { dir: rd.path.clone() });
        }
    } else {
        write_json(&config_path, cfg)?;
    }

    // Resume from the newest checkpoint, or start clean.
    let mut episodes_done = 0usize;
    let mut resumed_at = None;
    if let Some(ck_path) = rd.latest_checkpoint() {
        let ck = Checkpoint::load(&ck_path, Some(&fingerprint))?;
        restore_learner(&mut learner, &ck)?;
        episodes_done = ck.episode as usize;
        resumed_at = Some(ck.update);
        truncate_metrics(&rd.metrics_path(), ck.update)?;
    } else {
        truncate_metrics(&rd.metrics_path(), 0)?;
    }

    let metrics_path = rd.metrics_path();
    let mut metrics_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;

    let spec = cfg.task.template_spec();
    let target = stop_after.map_or(cfg.episodes, |s| s.min(cfg.episodes));
    let mut buffer: Vec<EpisodeData> = Vec::new();
    let mut buffered_pairs = 0usize;
    let mut stage = stage_for_episode(episodes_done.min(cfg.episodes - 1), cfg.episodes, &cfg.curriculum);

    let flush_update = |learner: &mut Learner,
                            buffer: &mut Vec<EpisodeData>,
                            buffered_pairs: &mut usize,
                            episode: usize,
                            stage: usize,
                            metrics_file: &mut fs::File,
                            on_update: &mut Option<&mut dyn FnMut(&TrainRecord)>|
     -> Result<(), HarnessError> {
        let episodes = std::mem::take(buffer);
        *buffered_pairs = 0;
        let mean_return = episodes
            .iter()
            .map(|e| spec.report_return(e.raw_return(), e.roster))
            .sum::<f64>()
            / episodes.len() as f64;
        let metrics = learner.update(&RolloutBatch { episodes })?;
        let record = TrainRecord { episode, stage, mean_return, metrics };
        let line = serde_json::to_string(&record)?;
        writeln!(metrics_file, "{line}").map_err(io_err(&metrics_path))?;
        metrics_file.flush().map_err(io_err(&metrics_path))?;
        if let Some(cb) = on_update.as_mut() {
            cb(&record);
        }
        if learner.updates_done % cfg.checkpoint_every as u64 == 0 {
            let ck = capture_checkpoint(cfg, learner, episode as u64)?;
            ck.save(&rd.checkpoint_path(learner.updates_done))?;
        }
        Ok(())
    };

    for ep in episodes_done..target {
        stage = stage_for_episode(ep, cfg.episodes, &cfg.curriculum);
        let roster = sample_roster(
            &cfg.curriculum[stage],
            &mut stream(cfg.seed, "roster", ep as u64),
        );
        let mut env = cfg.task.make(roster)?;
        let episode = collect_episode(
            env.as_mut(),
            &learner.actor,
            learner.critic.estimator(),
            &mut stream(cfg.seed, "env", ep as u64),
            &mut stream(cfg.seed, "policy", ep as u64),
        )?;
        buffered_pairs += episode.pairs();
        buffer.push(episode);
        // The buffer cap is a safety bound: drop the oldest whole episodes.
        while buffered_pairs > cfg.buffer_pairs && buffer.len() > 1 {
            let oldest = buffer.remove(0);
            buffered_pairs -= oldest.pairs();
        }
        if (ep + 1) % cfg.update_every == 0 {
            flush_update(
                &mut learner,
                &mut buffer,
                &mut buffered_pairs,
                ep + 1,
                stage,
                &mut metrics_file,
                &mut on_update,
            )?;
        }
    }

    // A trailing partial window still trains once the budget is exhausted;
    // an interruption (stop_after) just drops it, and the resumed run will
    // recollect those episodes from their seeded streams.
    let complete = target == cfg.episodes;
    if complete && !buffer.is_empty() {
        flush_update(
            &mut learner,
            &mut buffer,
            &mut buffered_pairs,
            target,
            stage,
            &mut metrics_file,
            &mut on_update,
        )?;
    }

    let final_checkpoint = rd.checkpoint_path(learner.updates_done);
    if !final_checkpoint.exists() {
        // The loop checkpoints on cadence; always leave a resumable head.
        let consumed = if complete { target } else { last_boundary(episodes_done, target, cfg.update_every) };
        let ck = capture_checkpoint(cfg, &learner, consumed as u64)?;
        ck.save(&final_checkpoint)?;
    }

    Ok(TrainOutcome {
        run_dir: rd.path,
        episodes: target,
        updates: learner.updates_done,
        resumed_at,
        final_checkpoint,
        complete,
    })
}

/// Largest update boundary at or below `target`, but not before `start`.
fn last_boundary(start: usize, target: usize, every: usize) -> usize {
    (target - target % every).max(start)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Greedy evaluation outcomes for one roster count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountEval {
    pub roster: usize,
    /// Per-rollout returns in reporting units.
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: Option<f64>,
}

/// Greedy evaluation of one roster split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub method: Method,
    pub ablation: Ablation,
    pub seed: u64,
    pub split: Split,
    /// Update count of the evaluated checkpoint.
    pub checkpoint_update: u64,
    pub rollouts_per_count: usize,
    pub counts: Vec<CountEval>,
    /// Mean of the per-count means, weighing every team size equally.
    pub mean: f64,
}

/// Runs greedy decentralized rollouts for every count in `split`.
/// Evaluation streams are disjoint from training ones by construction.
pub fn evaluate_split(
    cfg: &RunConfig,
    actor: &ActorNet,
    split: Split,
    checkpoint_update: u64,
) -> Result<EvalReport, HarnessError> {
    let counts = cfg.splits.counts(split);
    if counts.is_empty() {
        return Err(HarnessError::EmptySplit(split.name()));
    }
    let spec = cfg.task.template_spec();
    let mut evals = Vec::with_capacity(counts.len());
    for &count in counts {
        let results: Vec<Result<f64, HarnessError>> =
            cfg.exec.map_indexed(cfg.eval_rollouts, |r| {
                let mut env = cfg.task.make(count)?;
                let raw = greedy_return(
                    env.as_mut(),
                    actor,
                    &mut stream2(cfg.seed, "eval-env", count as u64, r as u64),
                )?;
                Ok(spec.report_return(raw, count))
            });
        let returns = results.into_iter().collect::<Result<Vec<f64>, _>>()?;
        let (mean, std) = mean_std(&returns);
        evals.push(CountEval { roster: count, returns, mean, std });
    }
    let mean = evals.iter().map(|c| c.mean).sum::<f64>() / evals.len() as f64;
    Ok(EvalReport {
        task: cfg.task.id().to_string(),
        method: cfg.method,
        ablation: cfg.ablation,
        seed: cfg.seed,
        split,
        checkpoint_update,
        rollouts_per_count: cfg.eval_rollouts,
        counts: evals,
        mean,
    })
}

/// Evaluates the latest checkpoint of a run on every non-empty split and
/// writes `eval/<split>.json` files.
pub fn evaluate_run(cfg: &RunConfig, run_dir: &Path) -> Result<Vec<EvalReport>, HarnessError> {
    let rd = RunDir::open(run_dir);
    let ckpt = rd
        .latest_checkpoint()
        .ok_or_else(|| HarnessError::NoCheckpoint(rd.path.clone()))?;
    let (actor, update) = load_actor(cfg, &ckpt)?;
    let mut reports = Vec::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        if cfg.splits.counts(split).is_empty() {
            continue;
        }
        let report = evaluate_split(cfg, &actor, split, update)?;
        write_json(&rd.eval_dir().join(format!("{}.json", split.name())), &report)?;
        reports.push(report);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Context-recovery diagnostics
// ---------------------------------------------------------------------------

/// Student/teacher context alignment for one roster count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountAlignment {
    pub roster: usize,
    /// Number of (agent, step) samples aggregated across rollouts.
    pub samples: usize,
    pub cosine_mean: f64,
    pub cosine_std: Option<f64>,
    pub gate_mean: f64,
    pub gate_std: Option<f64>,
    pub reliance_mean: f64,
}

/// How well decentralized actors reconstruct the coordination context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub task: String,
    pub method: Method,
    pub ablation: Ablation,
    pub seed: u64,
    pub rollouts_per_count: usize,
    /// Targets come from the live teacher, not the EMA shadow.
    pub targets: String,
    pub counts: Vec<CountAlignment>,
}

impl AlignmentReport {
    /// Sample-weighted mean cosine across the given counts.
    pub fn mean_cosine_over(&self, counts: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut den = 0usize;
        for c in &self.counts {
            if counts.contains(&c.roster) {
                num += c.cosine_mean * c.samples as f64;
                den += c.samples;
            }
        }
        num / den.max(1) as f64
    }
}

fn alignment_rollout(
    cfg: &RunConfig,
    actor: &ActorNet,
    teacher: &SetTeacherCritic,
    count: usize,
    rollout: usize,
) -> Result<Vec<(f64, f64, f64)>, HarnessError> {
    let mut env = cfg.task.make(count)?;
    let mut rng = stream2(cfg.seed, "diag-env", count as u64, rollout as u64);
    let mut obs = env.reset(&mut rng);
    let mut states: Vec<ndarray::Array1<f64>> = (0..count).map(|_| actor.initial_state()).collect();
    let mut samples = Vec::new();
    loop {
        let targets = teacher.contexts_for(&obs);
        let mut actions = Vec::with_capacity(count);
        for i in 0..count {
            let (step, _) = actor.forward_step(&obs[i], &states[i].view());
            let chat = step
                .context
                .as_ref()
                .ok_or(HarnessError::NotDistilled("the actor has no context head"))?;
            samples.push((
                cosine(chat.view(), targets.row(i)),
                step.gate.unwrap_or(0.0),
                step.reliance.unwrap_or(0.0),
            ));
            let dist = Categorical::from_logits(&step.logits.view())?;
            actions.push(dist.greedy());
            states[i] = step.h;
        }
        let res = env.step(&actions);
        obs = res.observations;
        if res.done {
            return Ok(samples);
        }
    }
}

/// Measures per-count alignment between each actor's context estimate and
/// the live teacher's personalized context, along with gate statistics,
/// over greedy rollouts at every configured roster count.
pub fn context_diagnostics(
    cfg: &RunConfig,
    actor: &ActorNet,
    teacher: &SetTeacherCritic,
) -> Result<AlignmentReport, HarnessError> {
    if actor.ctx.is_none() {
        return Err(HarnessError::NotDistilled("the actor has no context head"));
    }
    let mut counts = Vec::new();
    for count in cfg.splits.all_counts() {
        let rollouts: Vec<Result<Vec<(f64, f64, f64)>, HarnessError>> = cfg
            .exec
            .map_indexed(cfg.diag_rollouts, |r| alignment_rollout(cfg, actor, teacher, count, r));
        let mut cos = Vec::new();
        let mut gates = Vec::new();
        let mut rhos = Vec::new();
        for rollout in rollouts {
            for (c, g, rho) in rollout? {
                cos.push(c);
                gates.push(g);
                rhos.push(rho);
            }
        }
        let (cosine_mean, cosine_std) = mean_std(&cos);
        let (gate_mean, gate_std) = mean_std(&gates);
        let (reliance_mean, _) = mean_std(&rhos);
        counts.push(CountAlignment {
            roster: count,
            samples: cos.len(),
            cosine_mean,
            cosine_std,
            gate_mean,
            gate_std,
            reliance_mean,
        });
    }
    Ok(AlignmentReport {
        task: cfg.task.id().to_string(),
        method: cfg.method,
        ablation: cfg.ablation,
        seed: cfg.seed,
        rollouts_per_count: cfg.diag_rollouts,
        targets: "live-teacher".to_string(),
        counts,
    })
}

/// Runs diagnostics for an on-disk run and writes
/// `diagnostics/alignment.json`.
pub fn diagnose_run(cfg: &RunConfig, run_dir: &Path) -> Result<AlignmentReport, HarnessError> {
    let rd = RunDir::open(run_dir);
    let ckpt = rd
        .latest_checkpoint()
        .ok_or_else(|| HarnessError::NoCheckpoint(rd.path.clone()))?;
    let learner = load_learner(cfg, &ckpt)?;
    let teacher = match &learner.critic {
        Critic::SetTeacher(t) => t,
        _ => return Err(HarnessError::NotDistilled("the run has no teacher critic")),
    };
    let report = context_diagnostics(cfg, &learner.actor, teacher)?;
    write_json(&rd.diagnostics_dir().join("alignment.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// A cartesian family of runs over methods, ablations, and seeds.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub preset: String,
    pub methods: Vec<Method>,
    /// `Ablation::None` pairs with every method; the surgical switches pair
    /// only with the methods that support them.
    pub ablations: Vec<Ablation>,
    pub seeds: Vec<u64>,
    pub episodes: Option<usize>,
    pub eval_rollouts: Option<usize>,
    pub exec: Option<ExecMode>,
}

/// Expands a sweep into concrete validated configurations, skipping
/// method/ablation pairs that do not exist.
pub fn sweep_configs(spec: &SweepSpec) -> Result<Vec<RunConfig>, HarnessError> {
    let mut out = Vec::new();
    for &method in &spec.methods {
        for &ablation in &spec.ablations {
            if ablation != Ablation::None && !method.has_context() {
                continue;
            }
            if matches!(ablation, Ablation::GateOff | Ablation::GateOn)
                && method == Method::HyperPc3d
            {
                continue;
            }
            for &seed in &spec.seeds {
                let mut cfg = preset(&spec.preset, method)?;
                cfg.ablation = ablation;
                cfg.seed = seed;
                if let Some(e) = spec.episodes {
                    cfg.episodes = e;
                }
                if let Some(r) = spec.eval_rollouts {
                    cfg.eval_rollouts = r;
                }
                if let Some(x) = spec.exec {
                    cfg.exec = x;
                }
                cfg.validate()?;
                out.push(cfg);
            }
        }
    }
    Ok(out)
}

/// Trains and evaluates every configuration of a sweep, sequentially, under
/// one runs root. When the run already completed, it is only re-evaluated.
pub fn run_sweep(
    spec: &SweepSpec,
    root: &Path,
    mut on_run: Option<&mut dyn FnMut(&RunConfig, &TrainOutcome)>,
) -> Result<Vec<TrainOutcome>, HarnessError> {
    let mut outcomes = Vec::new();
    for cfg in sweep_configs(spec)? {
        let outcome = run_training(&cfg, root, None, None)?;
        evaluate_run(&cfg, &outcome.run_dir)?;
        if let Some(cb) = on_run.as_mut() {
            cb(&cfg, &outcome);
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}
