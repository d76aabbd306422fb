//! Continual training loop, evaluation, checkpoints and resume.
//!
//! Per step the model sees one current-task patch under `L_SW`. From task 2 on,
//! one memory entry is drawn as well and contributes `α·L_KD` (output
//! distillation from the frozen previous model), `λ·L_PKD` (distillation through
//! the frozen projector) and, for paired memory, a ground-truth `L_SW` term.
//! The learning rate follows a cosine schedule that restarts every task and Adam
//! state is reset per task.
//!
//! At each task boundary the model is rounded to f32 (the checkpoint
//! precision), evaluated on every seen test split, the memory is rebalanced,
//! the previous model is replaced by a copy of the current one, the projector is
//! retrained on the memory's features, and everything is checkpointed. A run
//! resumed from a boundary therefore continues bit-identically.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint;
use crate::config::{materialize, MemoryKind, Mode, ReplayMix, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::{Dataset, Image, SamplePair, Split};
use crate::losses::{self, LossParts, Pyramid};
use crate::metrics::{score_pairs, MetricRow};
use crate::optim::{cosine_lr, Adam};
use crate::perceptual::PerceptualPyramid;
use crate::projector::{train_autoencoder, PrincipalProjector};
use crate::replay::{PairedBuffer, ReplayBuffer};
use crate::report::{EvalRow, TaskReport};

/// Replay memory of either entry type.
#[derive(Clone, Debug, PartialEq)]
pub enum Memory {
    Degraded(ReplayBuffer),
    Paired(PairedBuffer),
}

/// One memory draw: degraded input and, for paired memory, its clean target.
pub struct MemorySample<'a> {
    pub degraded: &'a Image,
    pub clean: Option<&'a Image>,
}

impl Memory {
    pub fn new(kind: MemoryKind, capacity: usize, seed: u64) -> Self {
        match kind {
            MemoryKind::Degraded => Memory::Degraded(ReplayBuffer::new(capacity, seed)),
            MemoryKind::Paired => Memory::Paired(PairedBuffer::new(capacity, seed)),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Memory::Degraded(b) => b.len(),
            Memory::Paired(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> std::collections::BTreeMap<usize, usize> {
        match self {
            Memory::Degraded(b) => b.counts(),
            Memory::Paired(b) => b.counts(),
        }
    }

    pub fn update_after_task(&mut self, ds: &Dataset, task: usize, patch: usize) -> Result<usize> {
        match self {
            Memory::Degraded(b) => b.update_after_task(ds, task, Some(patch)),
            Memory::Paired(b) => b.update_after_task(ds, task, Some(patch)),
        }
    }

    pub fn degraded_images(&self) -> Vec<&Image> {
        match self {
            Memory::Degraded(b) => b.entries().iter().map(|e| &e.item).collect(),
            Memory::Paired(b) => b.entries().iter().map(|e| &e.item.degraded).collect(),
        }
    }

    fn get(&self, i: usize) -> MemorySample<'_> {
        match self {
            Memory::Degraded(b) => MemorySample {
                degraded: &b.entries()[i].item,
                clean: None,
            },
            Memory::Paired(b) => MemorySample {
                degraded: &b.entries()[i].item.degraded,
                clean: Some(&b.entries()[i].item.clean),
            },
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<MemorySample<'_>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok(self.get(rng.random_range(0..self.len())))
    }

    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        match self {
            Memory::Degraded(b) => b.save_snapshot(dir),
            Memory::Paired(b) => b.save_snapshot(dir),
        }
    }

    pub fn load_snapshot(kind: MemoryKind, dir: &Path) -> Result<Self> {
        Ok(match kind {
            MemoryKind::Degraded => Memory::Degraded(ReplayBuffer::load_snapshot(dir)?),
            MemoryKind::Paired => Memory::Paired(PairedBuffer::load_snapshot(dir)?),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainerState {
    pub model: Backbone,
    pub old_model: Option<Backbone>,
    pub projector: Option<PrincipalProjector>,
    pub memory: Memory,
    /// Optimizer steps taken over the whole run.
    pub step: usize,
    /// Tasks completed.
    pub task: usize,
}

impl TrainerState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            model: Backbone::new(cfg.backbone.clone(), cfg.seeds.init)?,
            old_model: None,
            projector: None,
            memory: Memory::new(cfg.replay.memory, cfg.replay.capacity, cfg.seeds.buffer),
            step: 0,
            task: 0,
        })
    }
}

/// One run-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub task: usize,
    pub step: usize,
    pub task_step: usize,
    pub lr: f64,
    pub l_sw: f64,
    pub l_mem: f64,
    pub l_kd: f64,
    pub l_pkd: f64,
    pub total: f64,
}

pub const RUNLOG_HEADER: &str = "task,step,task_step,lr,l_sw,l_mem,l_kd,l_pkd,total";

pub fn runlog_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(RUNLOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.task, r.step, r.task_step, r.lr, r.l_sw, r.l_mem, r.l_kd, r.l_pkd, r.total
        ));
    }
    out
}

/// Data stream seed for one task, independent of everything before it.
fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (task as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn draw_current<R: Rng>(
    sources: &[&Dataset],
    balance: bool,
    patch: usize,
    rng: &mut R,
) -> Result<SamplePair> {
    let pair = if balance || sources.len() == 1 {
        let ds = sources[rng.random_range(0..sources.len())];
        &ds.pairs()[rng.random_range(0..ds.len())]
    } else {
        let total: usize = sources.iter().map(|d| d.len()).sum();
        let mut i = rng.random_range(0..total);
        let mut pick = None;
        for ds in sources {
            if i < ds.len() {
                pick = Some(&ds.pairs()[i]);
                break;
            }
            i -= ds.len();
        }
        pick.expect("index within total")
    };
    let (h, w) = pair.degraded.dims();
    pair.random_crop(patch.min(h).min(w), rng)
}

/// Everything a step needs besides the state.
struct StepContext<'a> {
    cfg: &'a RunConfig,
    pyramid: &'a PerceptualPyramid,
}

/// Builds the step objective, back-propagates and returns the loss parts and the
/// gradient for the current model.
fn step_gradients(
    ctx: &StepContext<'_>,
    state: &TrainerState,
    current: &SamplePair,
    memory: Option<MemorySample<'_>>,
) -> Result<(LogRow, Vec<Vec<f64>>)> {
    let cfg = ctx.cfg;
    let w = &cfg.loss;
    let mut g = Graph::new();
    let np = state.model.params().bind(&mut g, true);
    let pp = ctx.pyramid.bind(&mut g);
    let pyr = Pyramid {
        model: ctx.pyramid,
        params: &pp,
        cfg: &cfg.contrastive,
    };

    let x = g.constant(current.degraded.to_tensor());
    let y = g.constant(current.clean.to_tensor());
    let (_, out) = state.model.forward_graph(&mut g, &np, x);
    let sw = losses::single_weather_graph(&mut g, &pyr, w, out, y, x);
    let mut terms: Vec<Var> = vec![sw];
    let mut row = LogRow {
        task: 0,
        step: 0,
        task_step: 0,
        lr: 0.0,
        l_sw: g.scalar(sw),
        l_mem: 0.0,
        l_kd: 0.0,
        l_pkd: 0.0,
        total: 0.0,
    };

    if let Some(mem) = memory {
        let m = g.constant(mem.degraded.to_tensor());
        let kd_on = w.alpha > 0.0 && state.old_model.is_some();
        let pkd_on = w.lambda > 0.0 && state.old_model.is_some() && state.projector.is_some();
        let paired_on = mem.clean.is_some() && cfg.replay.memory_weight > 0.0;
        if kd_on || pkd_on || paired_on {
            let (new_f, new_out) = state.model.forward_graph(&mut g, &np, m);
            if paired_on {
                let c = g.constant(mem.clean.expect("paired").to_tensor());
                let l = losses::single_weather_graph(&mut g, &pyr, w, new_out, c, m);
                row.l_mem = g.scalar(l);
                terms.push(g.scale(l, cfg.replay.memory_weight));
            }
            if kd_on || pkd_on {
                let old = state.old_model.as_ref().expect("old model");
                let op = old.params().bind(&mut g, false);
                let (old_f, old_out) = old.forward_graph(&mut g, &op, m);
                if kd_on {
                    let l = losses::knowledge_replay_graph(&mut g, &pyr, w, new_out, old_out, m);
                    row.l_kd = g.scalar(l);
                    terms.push(g.scale(l, w.alpha));
                }
                if pkd_on {
                    let proj = state.projector.as_ref().expect("projector");
                    let jp = proj.bind(&mut g);
                    let l = losses::principal_kd_graph(&mut g, proj, &jp, new_f, old_f);
                    row.l_pkd = g.scalar(l);
                    terms.push(g.scale(l, w.lambda));
                }
            }
        }
    }

    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    row.total = g.scalar(total);
    let parts = LossParts {
        l_sw: row.l_sw + cfg.replay.memory_weight * row.l_mem,
        l_kd: row.l_kd,
        l_pkd: row.l_pkd,
    };
    if let Err(e) = losses::total_loss(&parts, w) {
        return Err(Error::Diverged {
            step: state.step,
            detail: format!(
                "{e}; l_sw={} l_mem={} l_kd={} l_pkd={}",
                row.l_sw, row.l_mem, row.l_kd, row.l_pkd
            ),
        });
    }
    if !row.total.is_finite() {
        return Err(Error::Diverged {
            step: state.step,
            detail: format!("total loss {}", row.total),
        });
    }
    let grads = np.grads(&g.backward(total), state.model.params());
    Ok((row, grads))
}

/// Trains the current model for `steps_per_task` steps on `sources` (one dataset
/// except in joint mode) as task `task_id`. Run-log rows are appended to `log`.
pub fn train_task(
    state: &mut TrainerState,
    sources: &[&Dataset],
    task_id: usize,
    steps: usize,
    cfg: &RunConfig,
    pyramid: &PerceptualPyramid,
    log: &mut Vec<LogRow>,
) -> Result<()> {
    if sources.is_empty() || sources.iter().any(|d| d.is_empty()) {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    let ctx = StepContext { cfg, pyramid };
    let mut rng = task_rng(cfg.seeds.data, task_id);
    let mut adam = Adam::new(state.model.params(), cfg.optimizer.adam);
    let patch = cfg.training.patch_size;
    for s in 0..steps {
        let lr = cosine_lr(cfg.optimizer.lr, s, steps);
        let pooled = cfg.replay.mix == ReplayMix::Pooled;
        let (current, memory) = if pooled {
            let n = sources[0].len() + state.memory.len();
            let i = rng.random_range(0..n);
            if i < sources[0].len() {
                (draw_current(sources, cfg.training.balance_tasks, patch, &mut rng)?, None)
            } else {
                let m = state.memory.get(i - sources[0].len());
                let pair = SamplePair::new(
                    m.degraded.clone(),
                    m.clean.expect("pooled memory is paired").clone(),
                    task_id,
                )?;
                (pair, None)
            }
        } else {
            let cur = draw_current(sources, cfg.training.balance_tasks, patch, &mut rng)?;
            let mem = if state.memory.is_empty() {
                None
            } else {
                Some(state.memory.sample(&mut rng)?)
            };
            (cur, mem)
        };
        let (mut row, grads) = step_gradients(&ctx, state, &current, memory)?;
        adam.step(state.model.params_mut(), &grads, lr, &[]);
        state.step += 1;
        if s % cfg.training.log_every == 0 || s + 1 == steps {
            row.task = task_id;
            row.step = state.step;
            row.task_step = s;
            row.lr = lr;
            log.push(row);
        }
    }
    if !state.model.params().is_finite() {
        return Err(Error::Diverged {
            step: state.step,
            detail: "parameters became non-finite".into(),
        });
    }
    state.model.params_mut().round_to_f32();
    state.model.set_version_tag(task_id);
    Ok(())
}

/// Rebalances memory with the finished task, freezes a copy of the model as the
/// previous model and retrains the projector on memory features.
pub fn between_tasks(
    state: &mut TrainerState,
    finished: &Dataset,
    task_id: usize,
    cfg: &RunConfig,
) -> Result<()> {
    if cfg.replay.capacity > 0 {
        state
            .memory
            .update_after_task(finished, task_id, cfg.training.patch_size)?;
    }
    state.old_model = Some(state.model.clone());
    state.projector = None;
    if cfg.loss.lambda > 0.0 && !state.memory.is_empty() {
        let old = state.old_model.as_ref().expect("just set");
        let features = state
            .memory
            .degraded_images()
            .into_iter()
            .map(|img| old.extract_features(img))
            .collect::<Result<Vec<_>>>()?;
        let pcfg = cfg.projector.config(cfg.backbone.base_channels);
        let seed = cfg.seeds.init ^ (task_id as u64).wrapping_mul(0xa076_1d64_78bd_642f);
        let trained = train_autoencoder(&features, &pcfg, &cfg.projector.budget, seed)?;
        let mut params = trained.params().clone();
        params.round_to_f32();
        state.projector = Some(PrincipalProjector::from_params(pcfg, params)?);
    }
    state.task = task_id;
    Ok(())
}

/// PSNR/SSIM of the clamped restorations of every test set.
pub fn evaluate(model: &Backbone, test_sets: &[(String, &Dataset)]) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(test_sets.len());
    for (name, ds) in test_sets {
        if ds.is_empty() {
            return Err(Error::invalid(format!("test set {name} is empty")));
        }
        let restored = ds
            .pairs()
            .iter()
            .map(|p| model.restore(&p.degraded))
            .collect::<Result<Vec<_>>>()?;
        let clean: Vec<Image> = ds.pairs().iter().map(|p| p.clean.clone()).collect();
        let s = score_pairs(&restored, &clean)?;
        rows.push(MetricRow {
            dataset: name.clone(),
            version_tag: model.version_tag(),
            psnr_db: s.psnr_db,
            ssim: s.ssim,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where artifacts go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Continue from the latest task-boundary checkpoint in `out_dir`.
    pub resume: bool,
    /// Stop after this many tasks, as if interrupted.
    pub stop_after: Option<usize>,
}

/// Loaded train and test splits of every task.
pub struct TaskData {
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

impl TaskData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, t) in cfg.tasks.iter().enumerate() {
            train.push(materialize(&t.kind, &t.train, Split::Train)?.with_task_id(i + 1)?);
            test.push(materialize(&t.kind, &t.test, Split::Test)?.with_task_id(i + 1)?);
        }
        Ok(Self { train, test })
    }
}

#[derive(Serialize, Deserialize)]
struct BoundaryState {
    task: usize,
    step: usize,
    config: RunConfig,
    report: TaskReport,
    log: Vec<LogRow>,
}

#[derive(Serialize)]
struct Timing {
    task_seconds: Vec<f64>,
    total_seconds: f64,
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn boundary_paths(out: &Path, task: usize) -> [PathBuf; 4] {
    let d = checkpoint_dir(out);
    [
        d.join(format!("task_{task}.backbone.ckpt")),
        d.join(format!("task_{task}.projector.ckpt")),
        d.join(format!("task_{task}.buffer")),
        d.join(format!("task_{task}.state.json")),
    ]
}

fn write_artifacts(out: &Path, report: &TaskReport, log: &[LogRow]) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("runlog.csv"), runlog_csv(log))?;
    fs::write(out.join("config.json"), report.config.to_pretty_json()?)?;
    Ok(())
}

fn save_boundary(out: &Path, state: &TrainerState, report: &TaskReport, log: &[LogRow]) -> Result<()> {
    fs::create_dir_all(checkpoint_dir(out))?;
    let [bb, pj, buf, st] = boundary_paths(out, state.task);
    checkpoint::save_backbone(&bb, &state.model)?;
    if let Some(p) = &state.projector {
        checkpoint::save_projector(&pj, p, state.task)?;
    }
    if buf.exists() {
        fs::remove_dir_all(&buf)?;
    }
    state.memory.save_snapshot(&buf)?;
    let boundary = BoundaryState {
        task: state.task,
        step: state.step,
        config: report.config.clone(),
        report: report.clone(),
        log: log.to_vec(),
    };
    // Written last: its presence marks a complete boundary.
    fs::write(st, serde_json::to_string_pretty(&boundary)? + "\n")?;
    Ok(())
}

/// Latest complete boundary in `out`, if any.
pub fn latest_boundary(out: &Path) -> Option<usize> {
    let entries = fs::read_dir(checkpoint_dir(out)).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("task_")?
                .strip_suffix(".state.json")?
                .parse::<usize>()
                .ok()
        })
        .max()
}

fn load_boundary(out: &Path, task: usize, cfg: &RunConfig) -> Result<(TrainerState, TaskReport, Vec<LogRow>)> {
    let [bb, pj, buf, st] = boundary_paths(out, task);
    let text = fs::read_to_string(&st).map_err(|_| Error::MissingFile(st.clone()))?;
    let b: BoundaryState = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", st.display())))?;
    if &b.config != cfg {
        return Err(Error::Config {
            key: String::new(),
            reason: "resume config differs from the checkpointed run".into(),
        });
    }
    let model = checkpoint::load_backbone(&bb)?;
    let projector = if pj.is_file() {
        Some(checkpoint::load_projector(&pj)?)
    } else {
        None
    };
    let memory = Memory::load_snapshot(cfg.replay.memory, &buf)?;
    let state = TrainerState {
        old_model: (cfg.mode == Mode::Continual).then(|| model.clone()),
        model,
        projector,
        memory,
        step: b.step,
        task: b.task,
    };
    Ok((state, b.report, b.log))
}

fn stage_rows(
    model: &Backbone,
    data: &TaskData,
    cfg: &RunConfig,
    tasks: impl Iterator<Item = usize>,
) -> Result<Vec<EvalRow>> {
    let ids: Vec<usize> = tasks.collect();
    let sets: Vec<(String, &Dataset)> = ids
        .iter()
        .map(|&t| (cfg.tasks[t - 1].kind.as_str().to_string(), &data.test[t - 1]))
        .collect();
    let metrics = evaluate(model, &sets)?;
    Ok(ids
        .iter()
        .zip(metrics)
        .map(|(&t, m)| EvalRow {
            trained_through: 0,
            task: t,
            kind: m.dataset,
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            forgetting_psnr_db: 0.0,
            forgetting_ssim: 0.0,
        })
        .collect())
}

/// Runs the configured sequence and returns its report. With an output directory,
/// artifacts and checkpoints are refreshed at every task boundary, so a failure
/// leaves the report of all completed tasks behind.
pub fn run_sequence(cfg: &RunConfig, opts: &RunOptions) -> Result<TaskReport> {
    cfg.validate()?;
    let data = TaskData::load(cfg)?;
    run_with_data(cfg, &data, opts)
}

pub fn run_with_data(cfg: &RunConfig, data: &TaskData, opts: &RunOptions) -> Result<TaskReport> {
    let pyramid = PerceptualPyramid::default();
    let n = cfg.tasks.len();
    let started = Instant::now();
    let mut timing = Vec::new();

    let mut state = TrainerState::new(cfg)?;
    let mut report = TaskReport::new(cfg.clone());
    let mut log = Vec::new();
    if opts.resume {
        let out = opts
            .out_dir
            .as_deref()
            .ok_or_else(|| Error::invalid("resume needs an output directory"))?;
        if let Some(t) = latest_boundary(out) {
            log::info!("resuming after task {t}");
            (state, report, log) = load_boundary(out, t, cfg)?;
        }
    }

    let stages = if cfg.mode == Mode::Joint { 1 } else { n };
    while state.task < stages {
        if opts.stop_after.is_some_and(|k| state.task >= k) {
            break;
        }
        let t = state.task + 1;
        let task_start = Instant::now();
        match cfg.mode {
            Mode::Continual => {
                log::info!("task {t}/{n}: {}", cfg.tasks[t - 1].kind.as_str());
                let steps = cfg.training.steps_per_task;
                train_task(&mut state, &[&data.train[t - 1]], t, steps, cfg, &pyramid, &mut log)?;
                let rows = stage_rows(&state.model, data, cfg, 1..=t)?;
                report.push_stage(t, rows)?;
                between_tasks(&mut state, &data.train[t - 1], t, cfg)?;
            }
            Mode::Joint => {
                log::info!("joint training over {n} tasks");
                let sources: Vec<&Dataset> = data.train.iter().collect();
                let steps = cfg.training.steps_per_task * n;
                train_task(&mut state, &sources, 1, steps, cfg, &pyramid, &mut log)?;
                let rows = stage_rows(&state.model, data, cfg, 1..=n)?;
                report.push_stage(n, rows)?;
                state.task = 1;
            }
            Mode::Individual => {
                log::info!("individual model for task {t}");
                let step = state.step;
                state = TrainerState::new(cfg)?;
                state.step = step;
                let steps = cfg.training.steps_per_task;
                train_task(&mut state, &[&data.train[t - 1]], t, steps, cfg, &pyramid, &mut log)?;
                let rows = stage_rows(&state.model, data, cfg, t..=t)?;
                report.push_stage(t, rows)?;
                state.task = t;
            }
        }
        timing.push(task_start.elapsed().as_secs_f64());
        if let Some(out) = &opts.out_dir {
            save_boundary(out, &state, &report, &log)?;
            write_artifacts(out, &report, &log)?;
        }
    }

    if let Some(out) = &opts.out_dir {
        write_artifacts(out, &report, &log)?;
        let t = Timing {
            task_seconds: timing,
            total_seconds: started.elapsed().as_secs_f64(),
        };
        fs::write(out.join("timing.json"), serde_json::to_string_pretty(&t)? + "\n")?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{synthetic_dataset, TaskKind};

    fn tiny(preset: &str, steps: usize) -> RunConfig {
        let mut cfg = RunConfig::preset(preset, &[]).unwrap();
        cfg.training.steps_per_task = steps;
        cfg.training.log_every = 1;
        cfg.training.patch_size = 12;
        cfg.replay.capacity = cfg.replay.capacity.min(6);
        cfg.projector.budget.epochs = 2;
        cfg
    }

    fn small(kind: TaskKind, seed: u64) -> Dataset {
        synthetic_dataset(&kind, 6, 16, Split::Train, seed).unwrap()
    }

    #[test]
    fn first_task_optimizes_single_weather_loss_only() {
        let cfg = tiny("full_method", 3);
        let mut state = TrainerState::new(&cfg).unwrap();
        let mut log = Vec::new();
        let ds = small(TaskKind::Haze, 1);
        let pyr = PerceptualPyramid::default();
        train_task(&mut state, &[&ds], 1, 3, &cfg, &pyr, &mut log).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|r| r.total == r.l_sw && r.l_kd == 0.0 && r.l_pkd == 0.0));
        assert_eq!(state.step, 3);
        assert!(log.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn boundary_freezes_old_model_and_trains_projector() {
        let cfg = tiny("full_method", 2);
        let mut state = TrainerState::new(&cfg).unwrap();
        let pyr = PerceptualPyramid::default();
        let ds = small(TaskKind::Haze, 1);
        train_task(&mut state, &[&ds], 1, 2, &cfg, &pyr, &mut Vec::new()).unwrap();
        let before = state.model.hash();
        between_tasks(&mut state, &ds, 1, &cfg).unwrap();
        assert_eq!(state.old_model.as_ref().unwrap().hash(), before);
        assert_eq!(state.memory.len(), 6);
        let proj = state.projector.as_ref().unwrap();
        assert!(proj.is_frozen());
        assert_eq!(proj.config().in_channels, cfg.backbone.base_channels);

        let old_hash = before;
        let proj_hash = proj.hash();
        let pyr_hash = pyr.hash();
        let mut log = Vec::new();
        let rain = small(TaskKind::Rain, 2);
        train_task(&mut state, &[&rain], 2, 3, &cfg, &pyr, &mut log).unwrap();
        assert_eq!(state.old_model.as_ref().unwrap().hash(), old_hash);
        assert_eq!(state.projector.as_ref().unwrap().hash(), proj_hash);
        assert_eq!(pyr.hash(), pyr_hash);
        assert_ne!(state.model.hash(), old_hash);
        assert!(log.iter().all(|r| r.l_kd > 0.0 || r.task_step == 0));
        let r = &log[1];
        let expect = r.l_sw + cfg.loss.alpha * r.l_kd + cfg.loss.lambda * r.l_pkd;
        assert!((r.total - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny("finetune", 1);
        let mut state = TrainerState::new(&cfg).unwrap();
        let err = train_task(&mut state, &[], 1, 1, &cfg, &PerceptualPyramid::default(), &mut Vec::new()).unwrap_err();
        assert_eq!(err.code(), "invalid-argument");
    }

    #[test]
    fn identity_evaluation_is_capped() {
        let cfg = tiny("finetune", 1);
        let state = TrainerState::new(&cfg).unwrap();
        let ds = small(TaskKind::Haze, 3);
        let same: Vec<SamplePair> = ds
            .pairs()
            .iter()
            .map(|p| SamplePair::new(p.clean.clone(), p.clean.clone(), 1).unwrap())
            .collect();
        let same = Dataset::new(same, TaskKind::Haze, Split::Test).unwrap();
        let rows = evaluate(&state.model, &[("same".into(), &same)]).unwrap();
        assert_eq!(rows[0].psnr_db, 100.0);
        assert_eq!(rows[0].ssim, 1.0);
        assert_eq!(rows, evaluate(&state.model, &[("same".into(), &same)]).unwrap());
    }

    #[test]
    fn diverging_loss_is_reported_with_components() {
        let mut cfg = tiny("finetune", 5);
        cfg.optimizer.lr = 1e300;
        let mut state = TrainerState::new(&cfg).unwrap();
        let ds = small(TaskKind::Haze, 1);
        let err = train_task(&mut state, &[&ds], 1, 5, &cfg, &PerceptualPyramid::default(), &mut Vec::new())
            .unwrap_err();
        assert_eq!(err.code(), "diverged");
    }
}
