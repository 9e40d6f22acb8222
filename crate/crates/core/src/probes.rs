//! Gradient-covariance circuit probes: per-task top gradient directions,
//! directional ablation, selectivity, per-layer subspace overlap, and
//! two-task cross-ablation.
//!
//! For each task we sample per-example gradients of that task's loss alone,
//! take the top eigenvectors of their (uncentered) second moment via the
//! Gram trick, and ablate the model by projecting those directions out of
//! the final weight change. Damage patterns expose how task-specific the
//! directions are.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ckpt::{self, CkptError};
use crate::kernels::dot64;
use crate::linalg::{gram_top_dirs, union_basis, LinalgError, Mat};
use crate::model::{
    accuracy_and_loss, loss_and_grads, Batch, CoordSet, FlatParams, Layout, ModelError, ParamSet,
    TaskSelector, Workspace,
};
use crate::recon::ReconError;
use crate::tasks::{generate, Dataset, TaskError, TaskId, N_TASKS};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error("sample size {m} too small for {k} directions")]
    SampleTooSmall { m: usize, k: usize },
    #[error("subspace mismatch: {0}")]
    SubspaceMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ProbeError + '_ {
    move |source| ProbeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Coordinate scope for gradient rows and ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeScope {
    /// The full flattened parameter vector.
    Full,
    /// The trunk interior: excludes embeddings and heads.
    TrunkInterior,
}

impl ProbeScope {
    pub fn coords(self, layout: &Layout) -> CoordSet {
        match self {
            ProbeScope::Full => CoordSet::full(layout),
            ProbeScope::TrunkInterior => CoordSet::trunk(layout),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeScope::Full => "full",
            ProbeScope::TrunkInterior => "trunk-interior",
        }
    }
}

/// An orthonormal task-gradient subspace, whole-model or per-layer.
#[derive(Debug, Clone)]
pub struct TaskSubspace {
    pub task: TaskId,
    /// `None` for a whole-scope subspace, the layer name otherwise.
    pub layer: Option<String>,
    /// Columns are directions over the scope (or layer-local) coordinates.
    pub basis: Mat,
}

/// Per-example gradients of one task's loss at the given examples,
/// restricted to `coords`. Row i is the flattened gradient at example
/// `indices[i]`.
pub fn task_grad_rows(
    params: &ParamSet,
    task: TaskId,
    ds: &Dataset,
    indices: &[usize],
    coords: &CoordSet,
) -> Result<Mat, ProbeError> {
    let cfg = &params.config;
    let mut ws = Workspace::<f64>::new(cfg, 1);
    let mut grads = FlatParams::<f64>::zeros(cfg);
    let mut rows = Mat::zeros(indices.len(), coords.len());
    for (r, &idx) in indices.iter().enumerate() {
        let pair = [ds.pairs[idx]];
        let labels: [Vec<u32>; N_TASKS] = [
            vec![ds.labels[0][idx]],
            vec![ds.labels[1][idx]],
            vec![ds.labels[2][idx]],
        ];
        let batch = Batch {
            pairs: &pair,
            labels: [&labels[0], &labels[1], &labels[2]],
        };
        loss_and_grads(params, &batch, &mut ws, &mut grads, TaskSelector::Single(task))?;
        let row = rows.row_mut(r);
        let mut cursor = 0usize;
        for range in coords.ranges() {
            row[cursor..cursor + range.len()].copy_from_slice(&grads.data[range.clone()]);
            cursor += range.len();
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::Model(ModelError::NonFinite(format!(
                "gradient of {} at example {idx}",
                task.name()
            ))));
        }
    }
    Ok(rows)
}

/// Seeded sample of `m` distinct training examples for one task's gradient
/// rows.
pub fn task_grad_sample(
    params: &ParamSet,
    task: TaskId,
    ds: &Dataset,
    m: usize,
    seed: u64,
    coords: &CoordSet,
) -> Result<Mat, ProbeError> {
    let m = m.min(ds.len());
    let mut rng = crate::rng::SplitMix64::new(seed);
    let indices = rng.sample_indices(ds.len(), m);
    task_grad_rows(params, task, ds, &indices, coords)
}

/// Top-k directions of the uncentered gradient second moment.
pub fn top_directions(
    task: TaskId,
    rows: &Mat,
    k: usize,
    layer: Option<String>,
) -> Result<TaskSubspace, ProbeError> {
    if k > rows.rows {
        return Err(ProbeError::SampleTooSmall { m: rows.rows, k });
    }
    let dirs = gram_top_dirs(rows, k)?;
    Ok(TaskSubspace {
        task,
        layer,
        basis: dirs.dirs,
    })
}

/// Project the union of the given subspaces out of the final weight change
/// on `coords`; everything else keeps its final value. An empty list
/// returns the final parameters unchanged.
pub fn ablate(
    init: &ParamSet,
    final_p: &ParamSet,
    subspaces: &[&TaskSubspace],
    coords: &CoordSet,
) -> Result<ParamSet, ProbeError> {
    if subspaces.is_empty() {
        return Ok(final_p.clone());
    }
    for s in subspaces {
        if s.basis.rows != coords.len() {
            return Err(ProbeError::SubspaceMismatch(format!(
                "basis over {} coordinates, scope has {}",
                s.basis.rows,
                coords.len()
            )));
        }
        if s.layer.is_some() {
            return Err(ProbeError::SubspaceMismatch(
                "per-layer subspaces cannot ablate the whole scope".into(),
            ));
        }
    }
    let bases: Vec<&Mat> = subspaces.iter().map(|s| &s.basis).collect();
    let joint = union_basis(&bases, 1e-12)?;
    let f = coords.gather(&final_p.data);
    let i = coords.gather(&init.data);
    let delta: Vec<f64> = f.iter().zip(i.iter()).map(|(a, b)| a - b).collect();
    let kept = crate::linalg::project_out(&delta, &joint)?;
    let rebuilt: Vec<f64> = i.iter().zip(kept.iter()).map(|(a, b)| a + b).collect();
    let mut out = final_p.clone();
    coords.scatter(&rebuilt, &mut out.data);
    Ok(out)
}

/// Mean squared principal cosine between two equal-rank orthonormal bases:
/// ||A^T B||_F^2 / k, in [0, 1].
pub fn layer_overlap(a: &TaskSubspace, b: &TaskSubspace) -> Result<f64, ProbeError> {
    if a.basis.cols != b.basis.cols {
        return Err(ProbeError::SubspaceMismatch(format!(
            "rank mismatch: {} vs {}",
            a.basis.cols, b.basis.cols
        )));
    }
    if a.basis.rows != b.basis.rows {
        return Err(ProbeError::SubspaceMismatch(format!(
            "coordinate mismatch: {} vs {}",
            a.basis.rows, b.basis.rows
        )));
    }
    let k = a.basis.cols;
    if k == 0 {
        return Ok(0.0);
    }
    // ||A^T B||_F^2 accumulated column against column.
    let mut total = 0.0f64;
    for ja in 0..k {
        let ca = a.basis.column(ja);
        for jb in 0..k {
            let cb = b.basis.column(jb);
            let d = dot64(&ca, &cb);
            total += d * d;
        }
    }
    Ok(total / k as f64)
}

/// Selectivity index from (floored) self-damage and mean collateral damage.
/// `None` when both are zero (the index is undefined, not zero).
pub fn selectivity_index(self_damage: f64, mean_collateral: f64) -> Option<f64> {
    let denom = self_damage + mean_collateral;
    if denom > 0.0 {
        Some((self_damage - mean_collateral) / denom)
    } else {
        None
    }
}

/// Accuracy damage report after ablating one or more task subspaces.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub ablated: Vec<TaskId>,
    pub k: usize,
    pub scope: String,
    pub acc_before: [f64; N_TASKS],
    pub acc_after: [f64; N_TASKS],
    /// Accuracy drop on the ablated task(s)' own data, floored at zero;
    /// for multi-task ablation this is the mean over the ablated tasks.
    pub self_damage: f64,
    /// Mean accuracy drop on the untouched tasks, floored at zero.
    pub mean_collateral: f64,
    pub si: Option<f64>,
}

impl AblationReport {
    fn build(
        ablated: Vec<TaskId>,
        k: usize,
        scope: &str,
        acc_before: [f64; N_TASKS],
        acc_after: [f64; N_TASKS],
    ) -> AblationReport {
        let drop = |t: usize| (acc_before[t] - acc_after[t]).max(0.0);
        let is_ablated = |t: usize| ablated.iter().any(|a| a.index() == t);
        let mut self_sum = 0.0;
        let mut self_n = 0usize;
        let mut col_sum = 0.0;
        let mut col_n = 0usize;
        for t in 0..N_TASKS {
            if is_ablated(t) {
                self_sum += drop(t);
                self_n += 1;
            } else {
                col_sum += drop(t);
                col_n += 1;
            }
        }
        let self_damage = if self_n > 0 { self_sum / self_n as f64 } else { 0.0 };
        let mean_collateral = if col_n > 0 { col_sum / col_n as f64 } else { 0.0 };
        AblationReport {
            ablated,
            k,
            scope: scope.to_string(),
            acc_before,
            acc_after,
            self_damage,
            mean_collateral,
            si: selectivity_index(self_damage, mean_collateral),
        }
    }
}

pub struct ProbeOptions {
    /// Directions removed per task.
    pub k: usize,
    /// Training examples sampled per task.
    pub sample: usize,
    pub scope: ProbeScope,
    /// Base seed for the per-task example samples.
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            k: 10,
            sample: 256,
            scope: ProbeScope::Full,
            seed: 1234,
        }
    }
}

/// Everything the probe pass produces, also written as CSV files.
pub struct ProbeSummary {
    pub scope: ProbeScope,
    pub k: usize,
    pub baseline: [f64; N_TASKS],
    /// One single-task ablation report per task.
    pub selectivity: Vec<AblationReport>,
    /// Mean SI over tasks with a defined index.
    pub mean_si: Option<f64>,
    /// (layer name, task pair, overlap).
    pub overlaps: Vec<(String, String, f64)>,
    pub mean_overlap: f64,
    /// Two-task ablation reports (one per unordered pair).
    pub cross: Vec<AblationReport>,
}

/// Run the full probe suite on a trained run directory and write
/// `analysis/selectivity.csv`, `analysis/overlap.csv`, and
/// `analysis/cross_ablation.csv`.
pub fn probe_run(run_dir: &Path, opts: &ProbeOptions) -> Result<ProbeSummary, ProbeError> {
    if opts.sample < opts.k {
        return Err(ProbeError::SampleTooSmall {
            m: opts.sample,
            k: opts.k,
        });
    }
    let ckpts = ckpt::list_checkpoints(run_dir)?;
    if ckpts[0].0 != 0 {
        return Err(ProbeError::Ckpt(CkptError::MissingStepZero(
            run_dir.to_path_buf(),
        )));
    }
    let (init_p, meta) = ckpt::load(&ckpts[0].1)?;
    let (final_p, _) = ckpt::load(&ckpts[ckpts.len() - 1].1)?;
    let cfg = meta.model;
    let layout = Layout::new(&cfg);
    let coords = opts.scope.coords(&layout);
    let (train_ds, test_ds) = generate(cfg.p as u32, meta.split_seed)?;

    // Per-task whole-scope and per-layer subspaces. Gradient rows for one
    // task are dropped before the next task's are sampled.
    let mut whole: Vec<TaskSubspace> = Vec::new();
    let mut per_layer: Vec<Vec<TaskSubspace>> = Vec::new();
    for task in TaskId::ALL {
        let rows = task_grad_sample(
            &final_p,
            task,
            &train_ds,
            opts.sample,
            opts.seed + task.index() as u64,
            &coords,
        )?;
        whole.push(top_directions(task, &rows, opts.k, None)?);
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let span = layout.layer_range(l);
            let local = coords.locate(span).expect("layer span inside scope");
            let mut sub = Mat::zeros(rows.rows, local.len());
            for r in 0..rows.rows {
                sub.row_mut(r).copy_from_slice(&rows.row(r)[local.clone()]);
            }
            layers.push(top_directions(
                task,
                &sub,
                opts.k,
                Some(format!("layers.{l}")),
            )?);
        }
        per_layer.push(layers);
    }

    let mut ws = Workspace::<f64>::new(&cfg, 2048);
    let mut eval = |params: &ParamSet| -> Result<[f64; N_TASKS], ProbeError> {
        Ok(accuracy_and_loss(params, &test_ds, &mut ws)?.accuracy)
    };
    let baseline = eval(&final_p)?;

    // Single-task ablations.
    let mut selectivity = Vec::new();
    for task in TaskId::ALL {
        let ablated = ablate(&init_p, &final_p, &[&whole[task.index()]], &coords)?;
        let after = eval(&ablated)?;
        selectivity.push(AblationReport::build(
            vec![task],
            opts.k,
            opts.scope.as_str(),
            baseline,
            after,
        ));
    }
    let defined: Vec<f64> = selectivity.iter().filter_map(|r| r.si).collect();
    let mean_si = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    // Per-layer pairwise overlaps.
    let mut overlaps = Vec::new();
    let mut overlap_sum = 0.0f64;
    let mut overlap_n = 0usize;
    for l in 0..cfg.n_layers {
        for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let v = layer_overlap(&per_layer[a][l], &per_layer[b][l])?;
            overlaps.push((
                format!("layers.{l}"),
                format!("{}-{}", TaskId::ALL[a].name(), TaskId::ALL[b].name()),
                v,
            ));
            overlap_sum += v;
            overlap_n += 1;
        }
    }
    let mean_overlap = overlap_sum / overlap_n.max(1) as f64;

    // Two-task cross-ablations.
    let mut cross = Vec::new();
    for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
        let ablated = ablate(
            &init_p,
            &final_p,
            &[&whole[a], &whole[b]],
            &coords,
        )?;
        let after = eval(&ablated)?;
        cross.push(AblationReport::build(
            vec![TaskId::ALL[a], TaskId::ALL[b]],
            opts.k,
            opts.scope.as_str(),
            baseline,
            after,
        ));
    }

    let summary = ProbeSummary {
        scope: opts.scope,
        k: opts.k,
        baseline,
        selectivity,
        mean_si,
        overlaps,
        mean_overlap,
        cross,
    };
    write_probe_csvs(run_dir, &summary)?;
    Ok(summary)
}

fn fmt_si(si: Option<f64>) -> String {
    match si {
        Some(v) => format!("{v:.6}"),
        None => "NA".to_string(),
    }
}

fn write_probe_csvs(run_dir: &Path, s: &ProbeSummary) -> Result<(), ProbeError> {
    let dir = run_dir.join("analysis");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let path = dir.join("selectivity.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
    writeln!(
        f,
        "task,k,scope,acc_before_add,acc_before_mul,acc_before_quad,\
         acc_after_add,acc_after_mul,acc_after_quad,self_damage,mean_collateral,si"
    )
    .map_err(io_err(&path))?;
    for r in &s.selectivity {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.ablated[0].name(),
            r.k,
            r.scope,
            r.acc_before[0],
            r.acc_before[1],
            r.acc_before[2],
            r.acc_after[0],
            r.acc_after[1],
            r.acc_after[2],
            r.self_damage,
            r.mean_collateral,
            fmt_si(r.si),
        )
        .map_err(io_err(&path))?;
    }
    writeln!(f, "mean,{},{},,,,,,,,,{}", s.k, s.scope.as_str(), fmt_si(s.mean_si))
        .map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;

    let path = dir.join("overlap.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
    writeln!(f, "layer,task_pair,overlap").map_err(io_err(&path))?;
    for (layer, pair, v) in &s.overlaps {
        writeln!(f, "{layer},{pair},{v:.6}").map_err(io_err(&path))?;
    }
    writeln!(f, "all,mean,{:.6}", s.mean_overlap).map_err(io_err(&path))?;
    f.flush().map_err(io_err(&path))?;

    let path = dir.join("cross_ablation.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
    writeln!(
        f,
        "removed,spared,acc_before_add,acc_before_mul,acc_before_quad,\
         acc_after_add,acc_after_mul,acc_after_quad,spared_delta"
    )
    .map_err(io_err(&path))?;
    for r in &s.cross {
        let removed: Vec<&str> = r.ablated.iter().map(|t| t.name()).collect();
        let spared = TaskId::ALL
            .iter()
            .find(|t| !r.ablated.contains(t))
            .expect("one spared task");
        let delta = r.acc_after[spared.index()] - r.acc_before[spared.index()];
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            removed.join("+"),
            spared.name(),
            r.acc_before[0],
            r.acc_before[1],
            r.acc_before[2],
            r.acc_after[0],
            r.acc_after[1],
            r.acc_after[2],
            delta,
        )
        .map_err(io_err(&path))?;
    }
    f.flush().map_err(io_err(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            p: 7,
            n_tasks: 3,
        }
    }

    fn full_coords(cfg: &ModelConfig) -> CoordSet {
        CoordSet::full(&Layout::new(cfg))
    }

    #[test]
    fn other_heads_carry_exactly_zero_gradient() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 3).unwrap();
        let (train, _) = generate(7, 7).unwrap();
        let coords = full_coords(&cfg);
        let rows = task_grad_rows(&params, TaskId::Add, &train, &[0, 5, 9], &coords).unwrap();
        let layout = Layout::new(&cfg);
        for other in ["heads.1.w", "heads.1.b", "heads.2.w", "heads.2.b"] {
            let span = layout.span_of(other).unwrap();
            for r in 0..rows.rows {
                assert!(
                    rows.row(r)[span.clone()].iter().all(|&v| v == 0.0),
                    "{other} row {r}"
                );
            }
        }
        // Own head carries gradient.
        let own = layout.span_of("heads.0.w").unwrap();
        assert!(rows.row(0)[own].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn identical_examples_give_identical_rows() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 4).unwrap();
        let (train, _) = generate(7, 8).unwrap();
        let coords = full_coords(&cfg);
        let rows = task_grad_rows(&params, TaskId::Mul, &train, &[3, 3], &coords).unwrap();
        assert_eq!(rows.row(0), rows.row(1));
    }

    #[test]
    fn mean_gradient_row_matches_full_batch_gradient() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 5).unwrap();
        let (train, _) = generate(7, 9).unwrap();
        let coords = full_coords(&cfg);
        let all: Vec<usize> = (0..train.len()).collect();
        let rows = task_grad_rows(&params, TaskId::Quad, &train, &all, &coords).unwrap();
        // Full-batch gradient of the same task loss.
        let mut ws = Workspace::<f64>::new(&cfg, train.len());
        let mut grads = FlatParams::<f64>::zeros(&cfg);
        let batch = Batch::from(&train);
        loss_and_grads(
            &params,
            &batch,
            &mut ws,
            &mut grads,
            TaskSelector::Single(TaskId::Quad),
        )
        .unwrap();
        let n = rows.rows as f64;
        let mut max_diff = 0.0f64;
        for j in 0..rows.cols {
            let mean: f64 = (0..rows.rows).map(|r| rows.get(r, j)).sum::<f64>() / n;
            max_diff = max_diff.max((mean - grads.data[j]).abs());
        }
        assert!(max_diff < 1e-10, "max diff {max_diff}");
    }

    #[test]
    fn parallel_gradients_give_single_direction() {
        let mut rows = Mat::zeros(3, 10);
        let v: Vec<f64> = (0..10).map(|i| (i as f64 + 1.0) * 0.3).collect();
        for (r, scale) in [(0usize, 1.0f64), (1, 2.0), (2, -1.0)] {
            for (dst, &src) in rows.row_mut(r).iter_mut().zip(v.iter()) {
                *dst = scale * src;
            }
        }
        let sub = top_directions(TaskId::Add, &rows, 1, None).unwrap();
        let norm = dot64(&v, &v).sqrt();
        let cos: f64 = (0..10).map(|i| sub.basis.get(i, 0) * v[i] / norm).sum();
        assert!((cos.abs() - 1.0).abs() < 1e-10, "cos {cos}");
        // k above the sample count errors.
        assert!(top_directions(TaskId::Add, &rows, 4, None).is_err());
    }

    /// Dense covariance oracle: power iteration with deflation on R^T R.
    fn dense_cov_eigen(rows: &Mat, count: usize) -> Vec<(f64, Vec<f64>)> {
        let d = rows.cols;
        let mut cov = Mat::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for r in 0..rows.rows {
                    s += rows.get(r, i) * rows.get(r, j);
                }
                cov.set(i, j, s);
            }
        }
        let mut out = Vec::new();
        for round in 0..count {
            let mut v: Vec<f64> = (0..d)
                .map(|i| ((i * 3 + round + 1) as f64 * 0.313).cos())
                .collect();
            let mut lambda = 0.0;
            for _ in 0..30_000 {
                let mut w = vec![0.0f64; d];
                for i in 0..d {
                    for j in 0..d {
                        w[i] += cov.get(i, j) * v[j];
                    }
                }
                let norm = dot64(&w, &w).sqrt();
                if norm < 1e-300 {
                    break;
                }
                for x in w.iter_mut() {
                    *x /= norm;
                }
                lambda = norm;
                v = w;
            }
            for i in 0..d {
                for j in 0..d {
                    let val = cov.get(i, j) - lambda * v[i] * v[j];
                    cov.set(i, j, val);
                }
            }
            out.push((lambda, v));
        }
        out
    }

    #[test]
    fn gram_directions_match_dense_covariance_oracle() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(21);
        let rows = Mat::from_fn(6, 24, |_, _| rng.next_normal());
        let sub = top_directions(TaskId::Add, &rows, 3, None).unwrap();
        let dirs = gram_top_dirs(&rows, 3).unwrap();
        let oracle = dense_cov_eigen(&rows, 3);
        for j in 0..3 {
            let lam = dirs.singular_values[j].powi(2);
            assert!(
                (lam - oracle[j].0).abs() < 1e-8 * oracle[0].0,
                "eigenvalue {j}: {lam} vs {}",
                oracle[j].0
            );
            let col = sub.basis.column(j);
            let cos = dot64(&col, &oracle[j].1);
            assert!((cos.abs() - 1.0).abs() < 1e-6, "direction {j} cos {cos}");
        }
    }

    #[test]
    fn empty_ablation_is_identity() {
        let cfg = tiny_cfg();
        let init_p = init(&cfg, 1).unwrap();
        let final_p = init(&cfg, 2).unwrap();
        let coords = full_coords(&cfg);
        let out = ablate(&init_p, &final_p, &[], &coords).unwrap();
        assert_eq!(out.data, final_p.data);
    }

    #[test]
    fn ablation_is_idempotent_and_respects_complement() {
        use crate::rng::SplitMix64;
        let cfg = tiny_cfg();
        let init_p = init(&cfg, 1).unwrap();
        let final_p = init(&cfg, 2).unwrap();
        let coords = full_coords(&cfg);
        let mut rng = SplitMix64::new(77);
        let rows = Mat::from_fn(4, coords.len(), |_, _| rng.next_normal());
        let sub = top_directions(TaskId::Mul, &rows, 2, None).unwrap();
        let once = ablate(&init_p, &final_p, &[&sub], &coords).unwrap();
        let twice = ablate(&init_p, &once, &[&sub], &coords).unwrap();
        let max_diff = once
            .data
            .iter()
            .zip(twice.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-10, "not idempotent: {max_diff}");
        // The ablated delta is orthogonal to the removed directions.
        let delta: Vec<f64> = once
            .data
            .iter()
            .zip(init_p.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        for j in 0..2 {
            let col = sub.basis.column(j);
            assert!(dot64(&delta, &col).abs() < 1e-9);
        }
    }

    #[test]
    fn selectivity_index_formula() {
        assert_eq!(selectivity_index(0.3, 0.0), Some(1.0));
        assert_eq!(selectivity_index(0.3, 0.3), Some(0.0));
        assert_eq!(selectivity_index(0.0, 0.0), None);
        let si = selectivity_index(0.2, 0.1).unwrap();
        assert!((si - (0.1 / 0.3)).abs() < 1e-15);
        // Reports reproduce the formula from their own fields exactly.
        let rep = AblationReport::build(
            vec![TaskId::Add],
            10,
            "full",
            [0.9, 0.8, 0.7],
            [0.5, 0.78, 0.71],
        );
        let expect = selectivity_index(0.4, (0.02 + 0.0) / 2.0).unwrap();
        assert!((rep.si.unwrap() - expect).abs() < 1e-15);
        assert!((rep.self_damage - 0.4).abs() < 1e-15);
        assert!((rep.mean_collateral - 0.01).abs() < 1e-15);
    }

    #[test]
    fn overlap_limits() {
        let mut a = Mat::zeros(6, 2);
        a.set(0, 0, 1.0);
        a.set(1, 1, 1.0);
        let mut b = Mat::zeros(6, 2);
        b.set(2, 0, 1.0);
        b.set(3, 1, 1.0);
        let sa = TaskSubspace {
            task: TaskId::Add,
            layer: None,
            basis: a.clone(),
        };
        let sb = TaskSubspace {
            task: TaskId::Mul,
            layer: None,
            basis: b,
        };
        assert_eq!(layer_overlap(&sa, &sa).unwrap(), 1.0);
        assert_eq!(layer_overlap(&sa, &sb).unwrap(), 0.0);
        let sc = TaskSubspace {
            task: TaskId::Quad,
            layer: None,
            basis: a.left_columns(1),
        };
        assert!(layer_overlap(&sa, &sc).is_err());
    }
}
