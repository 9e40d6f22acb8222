//! Reconstruction of the final model from compressed representations of the
//! weight change, plus the spectral diagnostics around it.
//!
//! Three routes are compared, all operating on delta = final - init:
//! per-matrix SVD truncation, joint SVD of the stacked (zero-padded) trunk
//! deltas, and projection onto trajectory principal components. Per-task
//! test accuracy of the rebuilt model is the figure of merit throughout.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ckpt::{self, CkptError, Trajectory};
use crate::kernels::dot64;
use crate::linalg::{self, gram_top_dirs, LinalgError, Mat, SvdResult};
use crate::model::{
    accuracy_and_loss, CoordSet, Layout, ModelConfig, ModelError, ParamSet, TensorMeta, Workspace,
};
use crate::tasks::{generate, Dataset, TaskError, N_TASKS};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("svd of tensor {name} failed: {source}")]
    TensorSvd {
        name: String,
        source: LinalgError,
    },
    #[error("configs of init and final parameter sets differ")]
    ConfigMismatch,
    #[error("rank {requested} out of range for {what} (maximum {available})")]
    RankOutOfRange {
        requested: usize,
        available: usize,
        what: String,
    },
    #[error("scope mismatch: basis has {basis} coordinates, scope has {scope}")]
    ScopeMismatch { basis: usize, scope: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReconError + '_ {
    move |source| ReconError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which 2-D weight matrices a per-matrix truncation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixScope {
    /// The attention and feed-forward matrices of every layer.
    Trunk,
    /// The per-task head matrices.
    Heads,
    /// Every 2-D tensor including the embeddings.
    All,
}

impl MatrixScope {
    pub fn names(self, layout: &Layout) -> Vec<String> {
        match self {
            MatrixScope::Trunk => layout.trunk_matrix_names(),
            MatrixScope::Heads => layout.head_matrix_names(),
            MatrixScope::All => {
                let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
                names.extend(layout.trunk_matrix_names());
                names.extend(layout.head_matrix_names());
                names
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixScope::Trunk => "trunk",
            MatrixScope::Heads => "heads",
            MatrixScope::All => "all",
        }
    }
}

/// Coordinate scope of a trajectory basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajScope {
    Full,
    Trunk,
}

impl TrajScope {
    pub fn coords(self, layout: &Layout) -> CoordSet {
        match self {
            TrajScope::Full => CoordSet::full(layout),
            TrajScope::Trunk => CoordSet::trunk(layout),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrajScope::Full => "full",
            TrajScope::Trunk => "trunk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Baseline,
    PerMatrix,
    HeadsOnly,
    PerMatrixAll,
    Joint,
    Trajectory,
    PcRemoved,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::PerMatrix => "per_matrix",
            Method::HeadsOnly => "heads_only",
            Method::PerMatrixAll => "per_matrix_all",
            Method::Joint => "joint",
            Method::Trajectory => "trajectory",
            Method::PcRemoved => "pc_removed",
        }
    }
}

/// One evaluated reconstruction.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub method: Method,
    pub scope: String,
    pub rank: usize,
    pub accuracy: [f64; N_TASKS],
    pub mean_accuracy: f64,
    /// Stored numbers in the compressed representation (0 where the row is
    /// not a compression, e.g. baseline and PC removal).
    pub params_used: usize,
}

impl ReconstructionResult {
    fn new(
        method: Method,
        scope: &str,
        rank: usize,
        accuracy: [f64; N_TASKS],
        params_used: usize,
    ) -> Self {
        ReconstructionResult {
            method,
            scope: scope.to_string(),
            rank,
            accuracy,
            mean_accuracy: accuracy.iter().sum::<f64>() / N_TASKS as f64,
            params_used,
        }
    }
}

/// Per-matrix SVDs of the deltas in one scope, reusable across ranks.
pub struct PerMatrixPlan {
    entries: Vec<(TensorMeta, SvdResult)>,
}

impl PerMatrixPlan {
    pub fn new(init: &ParamSet, final_p: &ParamSet, scope: MatrixScope) -> Result<Self, ReconError> {
        if init.config != final_p.config {
            return Err(ReconError::ConfigMismatch);
        }
        let layout = Layout::new(&init.config);
        let mut entries = Vec::new();
        for name in scope.names(&layout) {
            let meta = layout.by_name(&name)?.clone();
            let span = meta.span();
            let delta: Vec<f64> = final_p.data[span.clone()]
                .iter()
                .zip(init.data[span].iter())
                .map(|(f, i)| f - i)
                .collect();
            let mat = Mat::from_tensor(meta.rows(), meta.cols(), delta, &name)?;
            let svd = linalg::svd(&mat).map_err(|source| ReconError::TensorSvd {
                name: name.clone(),
                source,
            })?;
            entries.push((meta, svd));
        }
        Ok(Self { entries })
    }

    /// Rebuild parameters with every in-scope delta truncated to
    /// `min(k, full rank)`; everything else keeps its final value.
    pub fn reconstruct(&self, init: &ParamSet, final_p: &ParamSet, k: usize) -> ParamSet {
        let mut out = final_p.clone();
        for (meta, svd) in &self.entries {
            let k_eff = k.min(svd.s.len());
            let approx = svd.truncated(k_eff);
            let span = meta.span();
            for ((dst, iv), dv) in out.data[span.clone()]
                .iter_mut()
                .zip(init.data[span].iter())
                .zip(approx.data.iter())
            {
                *dst = iv + dv;
            }
        }
        out
    }

    /// Numbers stored by a rank-k truncation: k_eff * (m + n + 1) per
    /// matrix.
    pub fn params_used(&self, k: usize) -> usize {
        self.entries
            .iter()
            .map(|(meta, svd)| k.min(svd.s.len()) * (meta.rows() + meta.cols() + 1))
            .sum()
    }

    pub fn svds(&self) -> impl Iterator<Item = (&str, &SvdResult, usize)> {
        self.entries
            .iter()
            .map(|(meta, svd)| (meta.name.as_str(), svd, meta.rows().min(meta.cols())))
    }

    pub fn max_full_rank(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, svd)| svd.s.len())
            .max()
            .unwrap_or(0)
    }
}

/// Convenience wrapper: per-matrix truncation at one rank.
pub fn per_matrix_truncate(
    init: &ParamSet,
    final_p: &ParamSet,
    k: usize,
    scope: MatrixScope,
) -> Result<ParamSet, ReconError> {
    Ok(PerMatrixPlan::new(init, final_p, scope)?.reconstruct(init, final_p, k))
}

/// The stacked-delta SVD shared by all joint ranks.
pub struct JointPlan {
    svd: SvdResult,
    metas: Vec<TensorMeta>,
    d_max: usize,
}

impl JointPlan {
    /// Stack the flattened trunk deltas as rows of an n-by-d_max matrix
    /// (zero-padded to the largest matrix's element count).
    pub fn new(init: &ParamSet, final_p: &ParamSet) -> Result<Self, ReconError> {
        if init.config != final_p.config {
            return Err(ReconError::ConfigMismatch);
        }
        let layout = Layout::new(&init.config);
        let metas: Vec<TensorMeta> = layout
            .trunk_matrix_names()
            .iter()
            .map(|n| layout.by_name(n).cloned())
            .collect::<Result<_, _>>()?;
        let d_max = metas.iter().map(|m| m.len).max().unwrap_or(0);
        let n = metas.len();
        let mut stacked = Mat::zeros(n, d_max);
        for (row, meta) in metas.iter().enumerate() {
            let span = meta.span();
            for (dst, (f, i)) in stacked.row_mut(row)[..meta.len]
                .iter_mut()
                .zip(final_p.data[span.clone()].iter().zip(init.data[span].iter()))
            {
                *dst = f - i;
            }
        }
        if stacked.data.iter().any(|v| !v.is_finite()) {
            return Err(ReconError::Linalg(LinalgError::NonFinite(
                "stacked trunk deltas".into(),
            )));
        }
        let svd = linalg::svd(&stacked).map_err(|source| ReconError::TensorSvd {
            name: "stacked trunk deltas".into(),
            source,
        })?;
        Ok(Self { svd, metas, d_max })
    }

    pub fn n_matrices(&self) -> usize {
        self.metas.len()
    }

    /// Rebuild parameters from the rank-r stacked approximation; non-trunk
    /// tensors and all vectors keep their final values.
    pub fn reconstruct(
        &self,
        init: &ParamSet,
        final_p: &ParamSet,
        r: usize,
    ) -> Result<ParamSet, ReconError> {
        let n = self.metas.len();
        if r > n {
            return Err(ReconError::RankOutOfRange {
                requested: r,
                available: n,
                what: "joint stacked svd".into(),
            });
        }
        let approx = self.svd.truncated(r);
        let mut out = final_p.clone();
        for (row, meta) in self.metas.iter().enumerate() {
            let span = meta.span();
            for ((dst, iv), dv) in out.data[span.clone()]
                .iter_mut()
                .zip(init.data[span].iter())
                .zip(approx.row(row)[..meta.len].iter())
            {
                *dst = iv + dv;
            }
        }
        Ok(out)
    }

    /// Numbers stored by a rank-r joint truncation: r * (n + d_max + 1).
    pub fn params_used(&self, r: usize) -> usize {
        r * (self.metas.len() + self.d_max + 1)
    }
}

pub fn joint_truncate(
    init: &ParamSet,
    final_p: &ParamSet,
    r: usize,
) -> Result<ParamSet, ReconError> {
    JointPlan::new(init, final_p)?.reconstruct(init, final_p, r)
}

/// Orthonormal principal directions of a checkpoint trajectory.
pub struct TrajectoryBasis {
    /// Columns are directions, rows are scope coordinates.
    pub directions: Mat,
    /// All singular values of the delta matrix, descending.
    pub singular_values: Vec<f64>,
    /// Variance fractions s_i^2 / sum s_j^2, same length.
    pub variance_fractions: Vec<f64>,
    pub scope: TrajScope,
    pub coords: CoordSet,
}

impl TrajectoryBasis {
    pub fn k_max(&self) -> usize {
        self.directions.cols
    }
}

/// Principal directions of a loaded trajectory, up to `k_max` (clamped to
/// the numerical rank of the delta matrix).
pub fn trajectory_basis(
    traj: &Trajectory,
    scope: TrajScope,
    k_max: usize,
) -> Result<TrajectoryBasis, ReconError> {
    let layout = Layout::new(&traj.meta.model);
    let coords = scope.coords(&layout);
    if coords.len() != traj.deltas.cols {
        return Err(ReconError::ScopeMismatch {
            basis: traj.deltas.cols,
            scope: coords.len(),
        });
    }
    let want = k_max.min(traj.deltas.rows);
    let dirs = match gram_top_dirs(&traj.deltas, want) {
        Ok(g) => g,
        Err(LinalgError::RankOutOfRange { available, .. }) if available > 0 => {
            gram_top_dirs(&traj.deltas, available)?
        }
        Err(e) => return Err(e.into()),
    };
    let total: f64 = dirs.singular_values.iter().map(|s| s * s).sum();
    let variance_fractions = dirs
        .singular_values
        .iter()
        .map(|s| s * s / total)
        .collect();
    Ok(TrajectoryBasis {
        directions: dirs.dirs,
        singular_values: dirs.singular_values,
        variance_fractions,
        scope,
        coords,
    })
}

/// Load a run's checkpoints and compute the trajectory basis in one go.
pub fn trajectory_pca(
    run_dir: &Path,
    scope: TrajScope,
    k_max: usize,
) -> Result<TrajectoryBasis, ReconError> {
    let (traj, basis) = trajectory_pca_with(run_dir, scope, k_max)?;
    drop(traj);
    Ok(basis)
}

/// Like [`trajectory_pca`] but also hands back the loaded trajectory.
pub fn trajectory_pca_with(
    run_dir: &Path,
    scope: TrajScope,
    k_max: usize,
) -> Result<(Trajectory, TrajectoryBasis), ReconError> {
    let probe_layout = {
        let ckpts = ckpt::list_checkpoints(run_dir)?;
        let (_, meta) = ckpt::load(&ckpts[0].1)?;
        Layout::new(&meta.model)
    };
    let coords = scope.coords(&probe_layout);
    let traj = ckpt::load_trajectory(run_dir, Some(&coords))?;
    let basis = trajectory_basis(&traj, scope, k_max)?;
    Ok((traj, basis))
}

fn scoped_delta(init: &ParamSet, final_p: &ParamSet, coords: &CoordSet) -> Vec<f64> {
    let f = coords.gather(&final_p.data);
    let i = coords.gather(&init.data);
    f.iter().zip(i.iter()).map(|(a, b)| a - b).collect()
}

fn rebuild_from_scoped_delta(
    init: &ParamSet,
    final_p: &ParamSet,
    coords: &CoordSet,
    delta: &[f64],
) -> ParamSet {
    let init_scoped = coords.gather(&init.data);
    let rebuilt: Vec<f64> = init_scoped
        .iter()
        .zip(delta.iter())
        .map(|(i, d)| i + d)
        .collect();
    let mut out = final_p.clone();
    coords.scatter(&rebuilt, &mut out.data);
    out
}

/// Project the final weight change onto the top-k trajectory directions and
/// rebuild the model; coordinates outside the basis scope keep final values.
pub fn traj_reconstruct(
    init: &ParamSet,
    final_p: &ParamSet,
    basis: &TrajectoryBasis,
    k: usize,
) -> Result<ParamSet, ReconError> {
    if init.config != final_p.config {
        return Err(ReconError::ConfigMismatch);
    }
    if k > basis.k_max() {
        return Err(ReconError::RankOutOfRange {
            requested: k,
            available: basis.k_max(),
            what: "trajectory basis".into(),
        });
    }
    if basis.directions.rows != basis.coords.len() {
        return Err(ReconError::ScopeMismatch {
            basis: basis.directions.rows,
            scope: basis.coords.len(),
        });
    }
    let delta = scoped_delta(init, final_p, &basis.coords);
    let projected = project_onto_k(&delta, &basis.directions, k)?;
    Ok(rebuild_from_scoped_delta(init, final_p, &basis.coords, &projected))
}

/// Remove a single principal component from the final weight change.
pub fn remove_pc(
    init: &ParamSet,
    final_p: &ParamSet,
    basis: &TrajectoryBasis,
    pc_index: usize,
) -> Result<ParamSet, ReconError> {
    if pc_index >= basis.k_max() {
        return Err(ReconError::RankOutOfRange {
            requested: pc_index,
            available: basis.k_max().saturating_sub(1),
            what: "principal component index".into(),
        });
    }
    let delta = scoped_delta(init, final_p, &basis.coords);
    let dirs = &basis.directions;
    let mut coef = 0.0f64;
    for (i, d) in delta.iter().enumerate() {
        coef += dirs.get(i, pc_index) * d;
    }
    let removed: Vec<f64> = delta
        .iter()
        .enumerate()
        .map(|(i, d)| d - coef * dirs.get(i, pc_index))
        .collect();
    Ok(rebuild_from_scoped_delta(init, final_p, &basis.coords, &removed))
}

/// Projection onto the first k basis columns.
fn project_onto_k(v: &[f64], basis: &Mat, k: usize) -> Result<Vec<f64>, ReconError> {
    if basis.rows != v.len() {
        return Err(ReconError::Linalg(LinalgError::DimensionMismatch(format!(
            "vector length {} vs basis rows {}",
            v.len(),
            basis.rows
        ))));
    }
    let mut coef = vec![0.0f64; k];
    for (i, &vi) in v.iter().enumerate() {
        let row = &basis.row(i)[..k];
        for (c, b) in coef.iter_mut().zip(row.iter()) {
            *c += b * vi;
        }
    }
    let mut out = vec![0.0f64; v.len()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot64(&basis.row(i)[..k], &coef);
    }
    Ok(out)
}

/// Smallest k whose leading spectral energy reaches `fraction` of the total.
pub fn energy_rank_from_s(s: &[f64], fraction: f64) -> Result<usize, LinalgError> {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Err(LinalgError::Degenerate("zero matrix has no energy rank".into()));
    }
    let target = fraction * total;
    let mut cum = 0.0f64;
    for (i, x) in s.iter().enumerate() {
        cum += x * x;
        if cum >= target {
            return Ok(i + 1);
        }
    }
    Ok(s.len())
}

/// Energy rank of a delta matrix plus its percentage of full rank.
pub fn energy_rank(delta: &Mat, fraction: f64) -> Result<(usize, f64), ReconError> {
    let svd = linalg::svd(delta)?;
    let k = energy_rank_from_s(&svd.s, fraction)?;
    let full = delta.rows.min(delta.cols);
    Ok((k, 100.0 * k as f64 / full as f64))
}

/// Normalized spectral entropy of a singular value distribution:
/// 0 for rank-1, 1 for a flat spectrum.
pub fn spectral_entropy_from_s(s: &[f64], min_dim: usize) -> Result<f64, LinalgError> {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Err(LinalgError::Degenerate(
            "zero matrix has no spectral entropy".into(),
        ));
    }
    if min_dim <= 1 {
        return Ok(0.0);
    }
    let mut h = 0.0f64;
    for x in s {
        let p = x * x / total;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h / (min_dim as f64).ln())
}

pub fn spectral_entropy(delta: &Mat) -> Result<f64, ReconError> {
    let svd = linalg::svd(delta)?;
    Ok(spectral_entropy_from_s(&svd.s, delta.rows.min(delta.cols))?)
}

/// Smallest k at which every task's accuracy reaches
/// `threshold * baseline accuracy`; `None` if no scanned k qualifies.
pub fn kstar_from_curve(
    curve: &[(usize, [f64; N_TASKS])],
    baseline: [f64; N_TASKS],
    threshold: f64,
) -> Option<usize> {
    curve
        .iter()
        .filter(|(_, acc)| {
            (0..N_TASKS).all(|t| acc[t] >= threshold * baseline[t])
        })
        .map(|&(k, _)| k)
        .min()
}

/// Artifacts of one full analysis pass, also written as CSV files.
pub struct AnalyzeSummary {
    pub model: ModelConfig,
    pub baseline: [f64; N_TASKS],
    pub rows: Vec<ReconstructionResult>,
    /// (threshold, scope, k*) with `None` for "not reached by k_cap".
    pub kstar: Vec<(f64, TrajScope, Option<usize>)>,
    /// Per trunk matrix: (name, entropy, k90, k99, k90 percent, k99 percent).
    pub spectral: Vec<(String, f64, usize, usize, f64, f64)>,
    pub mean_entropy: f64,
    pub mean_k90_pct: f64,
    pub mean_k99_pct: f64,
    /// Variance fractions of the full-scope trajectory basis.
    pub variance_fractions: Vec<f64>,
}

pub struct AnalyzeOptions {
    /// Ranks scanned by the per-matrix method (full rank is appended).
    pub pm_ranks: Vec<usize>,
    /// Trajectory PCs scanned (k = 1..=kmax), also the k* scan cap.
    pub kmax: usize,
    /// Restrict the trajectory analysis to one scope (both when `None`).
    pub traj_scope: Option<TrajScope>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            pm_ranks: vec![1, 2, 4, 8, 16, 32, 64],
            kmax: 30,
            traj_scope: None,
        }
    }
}

const KSTAR_THRESHOLDS: [f64; 2] = [0.95, 0.99];

/// Run the full reconstruction suite on a run directory and write
/// `analysis/recon_curve.csv`, `analysis/spectra.csv`, `analysis/kstar.csv`,
/// and `analysis/entropy.csv`.
pub fn analyze_run(run_dir: &Path, opts: &AnalyzeOptions) -> Result<AnalyzeSummary, ReconError> {
    let ckpts = ckpt::list_checkpoints(run_dir)?;
    if ckpts[0].0 != 0 {
        return Err(ReconError::Ckpt(CkptError::MissingStepZero(
            run_dir.to_path_buf(),
        )));
    }
    let (init_p, meta) = ckpt::load(&ckpts[0].1)?;
    let (final_p, final_meta) = ckpt::load(&ckpts[ckpts.len() - 1].1)?;
    if final_meta.model != meta.model {
        return Err(ReconError::ConfigMismatch);
    }
    let cfg = meta.model;
    let (_, test_ds) = generate(cfg.p as u32, meta.split_seed)?;
    let mut ws = Workspace::<f64>::new(&cfg, 2048);
    let mut eval = |params: &ParamSet| -> Result<[f64; N_TASKS], ReconError> {
        Ok(accuracy_and_loss(params, &test_ds, &mut ws)?.accuracy)
    };

    let total_params = init_p.len();
    let baseline = eval(&final_p)?;
    let mut rows = vec![ReconstructionResult::new(
        Method::Baseline,
        "none",
        0,
        baseline,
        total_params,
    )];

    // Per-matrix SVD, trunk scope, across ranks (including lossless).
    let pm = PerMatrixPlan::new(&init_p, &final_p, MatrixScope::Trunk)?;
    let mut pm_ranks = opts.pm_ranks.clone();
    let full = pm.max_full_rank();
    if !pm_ranks.contains(&full) {
        pm_ranks.push(full);
    }
    for &k in &pm_ranks {
        let acc = eval(&pm.reconstruct(&init_p, &final_p, k))?;
        rows.push(ReconstructionResult::new(
            Method::PerMatrix,
            "trunk",
            k,
            acc,
            pm.params_used(k),
        ));
    }

    // Spectral diagnostics of the trunk deltas.
    let mut spectral = Vec::new();
    let (mut sum_h, mut sum_k90, mut sum_k99) = (0.0f64, 0.0f64, 0.0f64);
    for (name, svd, min_dim) in pm.svds() {
        let h = spectral_entropy_from_s(&svd.s, min_dim)?;
        let k90 = energy_rank_from_s(&svd.s, 0.90)?;
        let k99 = energy_rank_from_s(&svd.s, 0.99)?;
        let p90 = 100.0 * k90 as f64 / min_dim as f64;
        let p99 = 100.0 * k99 as f64 / min_dim as f64;
        sum_h += h;
        sum_k90 += p90;
        sum_k99 += p99;
        spectral.push((name.to_string(), h, k90, k99, p90, p99));
    }
    let n_mat = spectral.len() as f64;
    let (mean_entropy, mean_k90_pct, mean_k99_pct) =
        (sum_h / n_mat, sum_k90 / n_mat, sum_k99 / n_mat);
    write_spectra_csv(run_dir, &pm)?;

    // Heads-only compressibility at rank 64 and lossless.
    let heads = PerMatrixPlan::new(&init_p, &final_p, MatrixScope::Heads)?;
    for k in [64usize, heads.max_full_rank()] {
        let acc = eval(&heads.reconstruct(&init_p, &final_p, k))?;
        rows.push(ReconstructionResult::new(
            Method::HeadsOnly,
            "heads",
            k,
            acc,
            heads.params_used(k),
        ));
    }

    // Joint stacked SVD across every rank up to n.
    let joint = JointPlan::new(&init_p, &final_p)?;
    for r in 1..=joint.n_matrices() {
        let acc = eval(&joint.reconstruct(&init_p, &final_p, r)?)?;
        rows.push(ReconstructionResult::new(
            Method::Joint,
            "trunk",
            r,
            acc,
            joint.params_used(r),
        ));
    }

    // Trajectory PCA, trunk and full scopes.
    let scopes: Vec<TrajScope> = match opts.traj_scope {
        Some(s) => vec![s],
        None => vec![TrajScope::Trunk, TrajScope::Full],
    };
    let mut kstar = Vec::new();
    let mut variance_fractions = Vec::new();
    for scope in scopes {
        let (traj, basis) = trajectory_pca_with(run_dir, scope, opts.kmax)?;
        drop(traj);
        let d_scope = basis.coords.len();
        let mut curve = Vec::new();
        for k in 1..=basis.k_max() {
            let acc = eval(&traj_reconstruct(&init_p, &final_p, &basis, k)?)?;
            rows.push(ReconstructionResult::new(
                Method::Trajectory,
                scope.as_str(),
                k,
                acc,
                k * (d_scope + 1),
            ));
            curve.push((k, acc));
        }
        for threshold in KSTAR_THRESHOLDS {
            kstar.push((threshold, scope, kstar_from_curve(&curve, baseline, threshold)));
        }
        if scope == TrajScope::Full {
            variance_fractions = basis.variance_fractions.clone();
            // PC removal: each of the leading three, plus one trailing PC.
            let mut pcs = vec![0usize, 1, 2];
            if basis.k_max() > 21 {
                pcs.push(21);
            }
            for pc in pcs {
                if pc >= basis.k_max() {
                    continue;
                }
                let acc = eval(&remove_pc(&init_p, &final_p, &basis, pc)?)?;
                rows.push(ReconstructionResult::new(
                    Method::PcRemoved,
                    scope.as_str(),
                    pc + 1, // 1-based PC index in reports
                    acc,
                    0,
                ));
            }
        }
    }

    let summary = AnalyzeSummary {
        model: cfg,
        baseline,
        rows,
        kstar,
        spectral,
        mean_entropy,
        mean_k90_pct,
        mean_k99_pct,
        variance_fractions,
    };
    write_analysis_csvs(run_dir, &summary)?;
    Ok(summary)
}

fn write_analysis_csvs(run_dir: &Path, s: &AnalyzeSummary) -> Result<(), ReconError> {
    let dir = run_dir.join("analysis");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let curve_path = dir.join("recon_curve.csv");
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&curve_path).map_err(io_err(&curve_path))?,
    );
    writeln!(
        f,
        "method,scope,rank,acc_add,acc_mul,acc_quad,acc_mean,params_used"
    )
    .map_err(io_err(&curve_path))?;
    for r in &s.rows {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.method.as_str(),
            r.scope,
            r.rank,
            r.accuracy[0],
            r.accuracy[1],
            r.accuracy[2],
            r.mean_accuracy,
            r.params_used
        )
        .map_err(io_err(&curve_path))?;
    }
    f.flush().map_err(io_err(&curve_path))?;

    let kstar_path = dir.join("kstar.csv");
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(&kstar_path).map_err(io_err(&kstar_path))?);
    writeln!(f, "scope,threshold,kstar").map_err(io_err(&kstar_path))?;
    for (threshold, scope, k) in &s.kstar {
        let cell = match k {
            Some(k) => k.to_string(),
            None => format!(">{}", 30),
        };
        writeln!(f, "{},{},{}", scope.as_str(), threshold, cell).map_err(io_err(&kstar_path))?;
    }
    f.flush().map_err(io_err(&kstar_path))?;

    let entropy_path = dir.join("entropy.csv");
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&entropy_path).map_err(io_err(&entropy_path))?,
    );
    writeln!(f, "matrix_name,entropy,k90,k99,k90_pct,k99_pct").map_err(io_err(&entropy_path))?;
    for (name, h, k90, k99, p90, p99) in &s.spectral {
        writeln!(f, "{name},{h:.6},{k90},{k99},{p90:.1},{p99:.1}").map_err(io_err(&entropy_path))?;
    }
    writeln!(
        f,
        "mean_trunk,{:.6},,,{:.1},{:.1}",
        s.mean_entropy, s.mean_k90_pct, s.mean_k99_pct
    )
    .map_err(io_err(&entropy_path))?;
    f.flush().map_err(io_err(&entropy_path))?;
    Ok(())
}

/// Emit the per-matrix singular spectra for a run (tidy CSV: one row per
/// singular value).
pub fn write_spectra_csv(
    run_dir: &Path,
    plan: &PerMatrixPlan,
) -> Result<(), ReconError> {
    let dir = run_dir.join("analysis");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join("spectra.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
    writeln!(f, "matrix_name,index,sigma").map_err(io_err(&path))?;
    for (name, svd, _) in plan.svds() {
        for (i, sv) in svd.s.iter().enumerate() {
            writeln!(f, "{name},{i},{sv:.9e}").map_err(io_err(&path))?;
        }
    }
    f.flush().map_err(io_err(&path))
}
