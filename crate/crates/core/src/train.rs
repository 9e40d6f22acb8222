//! Full-batch AdamW training with weight decay, grokking detection, metric
//! logging, and trajectory checkpoint capture.
//!
//! One step is one full-batch gradient over all training pairs with all
//! three task losses. The optimizer state and master weights are f64; the
//! hot forward/backward runs on an f32 mirror of the master. Everything
//! logged or checkpointed is evaluated from the f32-rounded parameters in
//! f64 arithmetic, so a reloaded checkpoint reproduces its logged
//! accuracies exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ckpt::{self, CkptError, CkptMeta};
use crate::model::{
    accuracy_and_loss, init, loss_and_grads, Batch, FlatParams, ModelConfig, ModelError, ParamSet,
    TaskSelector, Workspace,
};
use crate::tasks::{generate, Dataset, TaskError, N_TASKS};

pub const METRICS_HEADER: &str =
    "step,loss,acc_add_train,acc_mul_train,acc_quad_train,acc_add_test,acc_mul_test,acc_quad_test";

/// Evaluation batch rows held in memory at once.
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("malformed metrics file {path}: {msg}")]
    BadMetrics { path: PathBuf, msg: String },
    #[error("malformed run.meta {path}: {msg}")]
    BadMeta { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Optimization and run-control settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_steps: u64,
    pub grok_threshold: f64,
    pub eval_every: u64,
    /// Geometric checkpoint spacing factor.
    pub ckpt_growth: f64,
    /// Cap on scheduled checkpoints per run (step 0 and the final step are
    /// always captured).
    pub ckpt_max: usize,
    pub init_seed: u64,
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 1.0,
            max_steps: 200_000,
            grok_threshold: 0.95,
            eval_every: 100,
            ckpt_growth: 1.05,
            ckpt_max: 400,
            init_seed: 1,
            split_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight_decay must be >= 0".into()));
        }
        if !(0.0 < self.grok_threshold && self.grok_threshold < 1.0) {
            return Err(TrainError::BadConfig(
                "grok_threshold must be in (0, 1)".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(TrainError::BadConfig("eval_every must be positive".into()));
        }
        if self.ckpt_growth <= 1.0 {
            return Err(TrainError::BadConfig("ckpt_growth must exceed 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::BadConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Grokked,
    MaxSteps,
    Diverged,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub acc_train: [f64; N_TASKS],
    pub acc_test: [f64; N_TASKS],
}

/// Everything a finished (or aborted) run reports back.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: Vec<MetricRow>,
    pub grok_step: Option<u64>,
    pub grok_step_task: [Option<u64>; N_TASKS],
    pub ckpt_steps: Vec<u64>,
    pub status: RunStatus,
    pub final_step: u64,
}

/// Run summary persisted at the end of `run.meta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub status: RunStatus,
    pub final_step: u64,
    pub n_checkpoints: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grok_step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grok_step_add: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grok_step_mul: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grok_step_quad: Option<u64>,
}

/// The `run.meta` file: config snapshot plus, once finished, the result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<RunResult>,
}

pub fn write_run_meta(run_dir: &Path, meta: &RunMeta) -> Result<(), TrainError> {
    let path = run_dir.join("run.meta");
    let text = toml::to_string(meta).map_err(|e| TrainError::BadMeta {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    std::fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_run_meta(run_dir: &Path) -> Result<RunMeta, TrainError> {
    let path = run_dir.join("run.meta");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    toml::from_str(&text).map_err(|e| TrainError::BadMeta {
        path,
        msg: e.to_string(),
    })
}

/// Parse a `metrics.csv` back into rows.
pub fn read_metrics(run_dir: &Path) -> Result<Vec<MetricRow>, TrainError> {
    let path = run_dir.join("metrics.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| TrainError::BadMetrics {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TrainError::BadMetrics {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let field = |i: usize| -> Result<f64, TrainError> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| TrainError::BadMetrics {
                    path: path.clone(),
                    msg: format!("bad field {i}"),
                })
        };
        rows.push(MetricRow {
            step: field(0)? as u64,
            loss: field(1)?,
            acc_train: [field(2)?, field(3)?, field(4)?],
            acc_test: [field(5)?, field(6)?, field(7)?],
        });
    }
    Ok(rows)
}

/// Decoupled-weight-decay Adam update, applied to all parameters.
///
/// theta -= lr * mhat / (sqrt(vhat) + eps) + lr * lambda * theta
pub fn adamw_step(
    master: &mut [f64],
    grads: &[f32],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let lr = cfg.lr;
    let wd = cfg.weight_decay;
    const CH: usize = 16384;
    master
        .par_chunks_mut(CH)
        .zip(m.par_chunks_mut(CH))
        .zip(v.par_chunks_mut(CH))
        .zip(grads.par_chunks(CH))
        .for_each(|(((mst, mm), vv), gg)| {
            for i in 0..mst.len() {
                let g = gg[i] as f64;
                mm[i] = b1 * mm[i] + (1.0 - b1) * g;
                vv[i] = b2 * vv[i] + (1.0 - b2) * g * g;
                let mhat = mm[i] / bc1;
                let vhat = vv[i] / bc2;
                mst[i] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps)) + lr * wd * mst[i];
            }
        });
}

/// Geometric-plus-band checkpoint schedule.
struct CkptSchedule {
    growth: f64,
    cap: usize,
    captured: usize,
    last_step: u64,
    last_bands: [i32; N_TASKS],
}

impl CkptSchedule {
    fn new(growth: f64, cap: usize) -> Self {
        CkptSchedule {
            growth,
            cap,
            captured: 0,
            last_step: 0,
            last_bands: [-1; N_TASKS],
        }
    }

    fn bands(acc: &[f64; N_TASKS]) -> [i32; N_TASKS] {
        // 5-percentage-point bands.
        let b = |a: f64| (a * 20.0).floor() as i32;
        [b(acc[0]), b(acc[1]), b(acc[2])]
    }

    fn wants(&self, step: u64, test_acc: &[f64; N_TASKS]) -> bool {
        if self.captured >= self.cap {
            return false;
        }
        if step as f64 >= self.growth * self.last_step.max(1) as f64 {
            return true;
        }
        Self::bands(test_acc) != self.last_bands
    }

    fn record(&mut self, step: u64, test_acc: &[f64; N_TASKS]) {
        self.captured += 1;
        self.last_step = step;
        self.last_bands = Self::bands(test_acc);
    }
}

struct MetricsWriter {
    w: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    fn create(run_dir: &Path) -> Result<Self, TrainError> {
        let path = run_dir.join("metrics.csv");
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        writeln!(w, "{METRICS_HEADER}").map_err(io_err(&path))?;
        Ok(MetricsWriter { w, path })
    }

    fn append(&mut self, row: &MetricRow) -> Result<(), TrainError> {
        writeln!(
            self.w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.step,
            row.loss,
            row.acc_train[0],
            row.acc_train[1],
            row.acc_train[2],
            row.acc_test[0],
            row.acc_test[1],
            row.acc_test[2],
        )
        .map_err(io_err(&self.path))?;
        self.w.flush().map_err(io_err(&self.path))
    }
}

/// Train one model on one dataset pair, writing the run directory layout
/// (`run.meta`, `metrics.csv`, `ckpt/step_<N>.grkc`).
///
/// Divergence (non-finite loss) aborts the run and reports
/// `RunStatus::Diverged` with the metrics gathered so far.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    out_dir: &Path,
) -> Result<RunRecord, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_ds.modulus as usize != model_cfg.p {
        return Err(TrainError::BadConfig(format!(
            "dataset modulus {} vs model p {}",
            train_ds.modulus, model_cfg.p
        )));
    }
    std::fs::create_dir_all(out_dir.join("ckpt")).map_err(io_err(out_dir))?;
    let mut meta = RunMeta {
        schema: 1,
        model: *model_cfg,
        train: train_cfg.clone(),
        result: None,
    };
    write_run_meta(out_dir, &meta)?;
    let mut metrics_file = MetricsWriter::create(out_dir)?;

    let ckpt_meta = |step: u64| CkptMeta {
        step,
        init_seed: train_cfg.init_seed,
        split_seed: train_cfg.split_seed,
        model: *model_cfg,
    };

    let mut master = init(model_cfg, train_cfg.init_seed)?;
    let total = master.len();
    let mut moment_m = vec![0.0f64; total];
    let mut moment_v = vec![0.0f64; total];
    let mut mirror: FlatParams<f32> = master.cast();
    let mut grads = FlatParams::<f32>::zeros(model_cfg);
    let batch = Batch::from(train_ds);
    let mut ws32 = Workspace::<f32>::new(model_cfg, batch.len());
    let mut ws64 = Workspace::<f64>::new(model_cfg, EVAL_CHUNK);

    let mut record = RunRecord {
        model: *model_cfg,
        train: train_cfg.clone(),
        metrics: Vec::new(),
        grok_step: None,
        grok_step_task: [None; N_TASKS],
        ckpt_steps: Vec::new(),
        status: RunStatus::MaxSteps,
        final_step: 0,
    };
    let mut schedule = CkptSchedule::new(train_cfg.ckpt_growth, train_cfg.ckpt_max);

    // Evaluate the f32-rounded master so logged numbers match checkpoints.
    let evaluate = |master: &ParamSet, ws64: &mut Workspace<f64>, step: u64| {
        let eval_params = master.round_f32();
        let train_res = accuracy_and_loss(&eval_params, train_ds, ws64)?;
        let test_res = accuracy_and_loss(&eval_params, test_ds, ws64)?;
        Ok::<(ParamSet, MetricRow), TrainError>((
            eval_params,
            MetricRow {
                step,
                loss: train_res.mean_loss(),
                acc_train: train_res.accuracy,
                acc_test: test_res.accuracy,
            },
        ))
    };

    // Step 0: log and always checkpoint the initialization.
    {
        let (eval_params, row) = evaluate(&master, &mut ws64, 0)?;
        metrics_file.append(&row)?;
        ckpt::save(&ckpt::ckpt_path(out_dir, 0), &eval_params, &ckpt_meta(0))?;
        schedule.record(0, &row.acc_test);
        record.ckpt_steps.push(0);
        record.metrics.push(row);
    }

    let mut diverged_at: Option<u64> = None;
    for step in 1..=train_cfg.max_steps {
        mirror.assign_cast(&master);
        let loss = match loss_and_grads(&mirror, &batch, &mut ws32, &mut grads, TaskSelector::All)
        {
            Ok(l) => l,
            Err(ModelError::NonFinite(_)) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() {
            diverged_at = Some(step);
            break;
        }
        adamw_step(
            &mut master.data,
            &grads.data,
            &mut moment_m,
            &mut moment_v,
            step,
            train_cfg,
        );

        let is_eval = step % train_cfg.eval_every == 0 || step == train_cfg.max_steps;
        if !is_eval {
            continue;
        }
        let (eval_params, row) = evaluate(&master, &mut ws64, step)?;
        metrics_file.append(&row)?;
        for t in 0..N_TASKS {
            if record.grok_step_task[t].is_none() && row.acc_test[t] > train_cfg.grok_threshold {
                record.grok_step_task[t] = Some(step);
            }
        }
        let grokked = row
            .acc_test
            .iter()
            .all(|&a| a > train_cfg.grok_threshold);
        let capture = schedule.wants(step, &row.acc_test) || grokked || step == train_cfg.max_steps;
        if capture {
            ckpt::save(&ckpt::ckpt_path(out_dir, step), &eval_params, &ckpt_meta(step))?;
            schedule.record(step, &row.acc_test);
            record.ckpt_steps.push(step);
        }
        record.final_step = step;
        record.metrics.push(row);
        if grokked {
            record.grok_step = Some(step);
            record.status = RunStatus::Grokked;
            break;
        }
    }

    if let Some(step) = diverged_at {
        record.status = RunStatus::Diverged;
        record.final_step = step;
    } else if record.grok_step.is_none() {
        record.status = RunStatus::MaxSteps;
        // Make sure the last step is checkpointed even if the schedule
        // skipped it.
        if record.ckpt_steps.last() != Some(&record.final_step) && record.final_step > 0 {
            let (eval_params, _) = evaluate(&master, &mut ws64, record.final_step)?;
            ckpt::save(
                &ckpt::ckpt_path(out_dir, record.final_step),
                &eval_params,
                &ckpt_meta(record.final_step),
            )?;
            record.ckpt_steps.push(record.final_step);
        }
    }

    meta.result = Some(RunResult {
        status: record.status,
        final_step: record.final_step,
        n_checkpoints: record.ckpt_steps.len(),
        grok_step: record.grok_step,
        grok_step_add: record.grok_step_task[0],
        grok_step_mul: record.grok_step_task[1],
        grok_step_quad: record.grok_step_task[2],
    });
    write_run_meta(out_dir, &meta)?;
    Ok(record)
}

/// Directory name for one sweep condition.
pub fn run_dir_name(model: &ModelConfig, weight_decay: f64) -> String {
    format!("{}_wd{}", model.tag(), weight_decay)
}

/// Train every (model, weight decay) combination with shared seeds.
///
/// Per-run failures are isolated: the sweep continues and reports each
/// outcome. `jobs` > 1 runs that many conditions concurrently (they share
/// the global thread pool).
pub fn sweep(
    models: &[ModelConfig],
    weight_decays: &[f64],
    base: &TrainConfig,
    out_root: &Path,
    jobs: usize,
) -> Vec<(PathBuf, Result<RunRecord, TrainError>)> {
    let combos: Vec<(ModelConfig, f64)> = models
        .iter()
        .flat_map(|m| weight_decays.iter().map(move |&wd| (*m, wd)))
        .collect();
    let run_one = |&(model, wd): &(ModelConfig, f64)| {
        let dir = out_root.join(run_dir_name(&model, wd));
        let cfg = TrainConfig {
            weight_decay: wd,
            ..base.clone()
        };
        let result = generate(model.p as u32, cfg.split_seed)
            .map_err(TrainError::from)
            .and_then(|(train_ds, test_ds)| train(&model, &cfg, &train_ds, &test_ds, &dir));
        (dir, result)
    };
    if jobs <= 1 {
        combos.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("sweep pool");
        pool.install(|| combos.par_iter().map(run_one).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            p: 13,
            n_tasks: 3,
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            max_steps: 60,
            eval_every: 20,
            weight_decay: 0.1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adamw_with_zero_gradients_decays_geometrically() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut master = vec![2.0f64, -1.5, 0.25];
        let grads = vec![0.0f32; 3];
        let mut m = vec![0.0f64; 3];
        let mut v = vec![0.0f64; 3];
        let start = master.clone();
        let mut expected = start.clone();
        for t in 1..=10 {
            adamw_step(&mut master, &grads, &mut m, &mut v, t, &cfg);
            // With zero gradients the moment term is exactly zero, so the
            // update must be pure decay: theta -= lr * wd * theta.
            for e in expected.iter_mut() {
                *e -= cfg.lr * cfg.weight_decay * *e;
            }
            for (got, want) in master.iter().zip(expected.iter()) {
                assert_eq!(got, want, "decoupled decay at t={t}");
            }
        }
        // And the closed form holds to rounding error.
        let factor = (1.0 - cfg.lr * cfg.weight_decay).powi(10);
        for (got, s) in master.iter().zip(start.iter()) {
            assert!((got - s * factor).abs() < 1e-12 * s.abs());
        }
    }

    #[test]
    fn run_layout_and_record_are_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let cfg = quick_cfg();
        let (train_ds, test_ds) = generate(13, cfg.split_seed).unwrap();
        let rec = train(&model, &cfg, &train_ds, &test_ds, dir.path()).unwrap();
        assert_eq!(rec.final_step, 60);
        // Checkpoint index includes step 0 and the final step.
        assert_eq!(rec.ckpt_steps.first(), Some(&0));
        assert_eq!(rec.ckpt_steps.last(), Some(&60));
        // Files exist.
        assert!(dir.path().join("run.meta").exists());
        assert!(dir.path().join("metrics.csv").exists());
        for &s in &rec.ckpt_steps {
            assert!(ckpt::ckpt_path(dir.path(), s).exists());
        }
        // run.meta round-trips with a result section.
        let meta = read_run_meta(dir.path()).unwrap();
        let result = meta.result.expect("result written");
        assert_eq!(result.final_step, 60);
        assert_eq!(result.n_checkpoints, rec.ckpt_steps.len());
        // metrics.csv parses back to the same rows.
        let rows = read_metrics(dir.path()).unwrap();
        assert_eq!(rows.len(), rec.metrics.len());
        assert_eq!(rows[0].step, 0);
        assert_eq!(rows.last().unwrap().step, 60);
    }

    #[test]
    fn checkpoints_reproduce_logged_accuracies_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let cfg = quick_cfg();
        let (train_ds, test_ds) = generate(13, cfg.split_seed).unwrap();
        let rec = train(&model, &cfg, &train_ds, &test_ds, dir.path()).unwrap();
        let mut ws = Workspace::<f64>::new(&model, EVAL_CHUNK);
        for &step in &rec.ckpt_steps {
            let (params, meta) = ckpt::load(&ckpt::ckpt_path(dir.path(), step)).unwrap();
            assert_eq!(meta.step, step);
            let row = rec.metrics.iter().find(|r| r.step == step).unwrap();
            let test_res = accuracy_and_loss(&params, &test_ds, &mut ws).unwrap();
            for t in 0..N_TASKS {
                assert!(
                    (test_res.accuracy[t] - row.acc_test[t]).abs() < 1e-6,
                    "step {step} task {t}: {} vs {}",
                    test_res.accuracy[t],
                    row.acc_test[t]
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let model = tiny_model();
        let cfg = quick_cfg();
        let (train_ds, test_ds) = generate(13, cfg.split_seed).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        train(&model, &cfg, &train_ds, &test_ds, dir_a.path()).unwrap();
        train(&model, &cfg, &train_ds, &test_ds, dir_b.path()).unwrap();
        let bytes_a = std::fs::read(dir_a.path().join("metrics.csv")).unwrap();
        let bytes_b = std::fs::read(dir_b.path().join("metrics.csv")).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn memorization_precedes_generalization_without_weight_decay() {
        // Qualitative check on a small modulus: with zero weight decay the
        // model memorizes the training set while test accuracy lags.
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            max_steps: 1200,
            eval_every: 100,
            ..TrainConfig::default()
        };
        let (train_ds, test_ds) = generate(13, cfg.split_seed).unwrap();
        let rec = train(&model, &cfg, &train_ds, &test_ds, dir.path()).unwrap();
        let last = rec.metrics.last().unwrap();
        let train_mean: f64 = last.acc_train.iter().sum::<f64>() / 3.0;
        assert!(train_mean > 0.99, "memorization failed: {train_mean}");
        // Train accuracy dominates test accuracy during the memorization
        // phase (allowing eval-noise slack).
        for row in &rec.metrics {
            let tr: f64 = row.acc_train.iter().sum::<f64>() / 3.0;
            let te: f64 = row.acc_test.iter().sum::<f64>() / 3.0;
            if tr < 0.99 {
                assert!(tr >= te - 0.05, "step {}: train {tr} test {te}", row.step);
            }
        }
    }

    #[test]
    fn sweep_isolates_failures_and_names_dirs() {
        let root = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let base = TrainConfig {
            max_steps: 10,
            eval_every: 5,
            ..TrainConfig::default()
        };
        let results = sweep(&[model], &[0.5, 1.0], &base, root.path(), 1);
        assert_eq!(results.len(), 2);
        for (dir, res) in &results {
            assert!(res.is_ok(), "{dir:?}: {res:?}");
            assert!(dir.join("run.meta").exists());
        }
        assert!(root.path().join("custom_wd0.5").exists());
        assert!(root.path().join("custom_wd1").exists());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let model = tiny_model();
        let (train_ds, test_ds) = generate(13, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bad = TrainConfig {
            weight_decay: -1.0,
            ..TrainConfig::default()
        };
        assert!(train(&model, &bad, &train_ds, &test_ds, dir.path()).is_err());
        let bad = TrainConfig {
            grok_threshold: 1.5,
            ..TrainConfig::default()
        };
        assert!(train(&model, &bad, &train_ds, &test_ds, dir.path()).is_err());
        // Mismatched modulus.
        let (wrong_train, wrong_test) = generate(11, 7).unwrap();
        assert!(train(
            &model,
            &TrainConfig::default(),
            &wrong_train,
            &wrong_test,
            dir.path()
        )
        .is_err());
    }
}
