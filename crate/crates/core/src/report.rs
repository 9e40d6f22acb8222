//! Aggregate per-run analysis artifacts into summary tables.
//!
//! Every cell is read from a CSV artifact produced by the recon or probe
//! passes (or from `run.meta`); nothing is recomputed or defaulted here.
//! Missing artifacts surface as "NA" cells, and each emitted row names the
//! artifact files its numbers came from.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelConfig;
use crate::tasks::N_TASKS;
use crate::train::{read_run_meta, TrainError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("malformed artifact {path}: {msg}")]
    BadArtifact { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One run's aggregated numbers. `None` marks a missing analysis artifact,
/// which is reported as "NA", never defaulted.
#[derive(Debug, Clone)]
pub struct ConditionSummary {
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub model_tag: String,
    pub weight_decay: f64,
    pub grok_step: Option<u64>,
    pub baseline: Option<[f64; N_TASKS]>,
    /// k* cells keep their artifact spelling ("3" or ">30").
    pub kstar95: Option<String>,
    pub kstar99: Option<String>,
    pub pm_r64: Option<f64>,
    pub joint_half: Option<f64>,
    pub joint_full: Option<f64>,
    pub traj_k3: Option<f64>,
    pub traj_k5: Option<f64>,
    pub heads_r64: Option<f64>,
    pub k90_pct: Option<f64>,
    pub k99_pct: Option<f64>,
    pub entropy: Option<f64>,
    pub mean_si: Option<f64>,
    pub mean_overlap: Option<f64>,
}

fn read_csv(path: &Path) -> Result<Option<Vec<csv::StringRecord>>, ReportError> {
    if !path.exists() {
        return Ok(None);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| ReportError::BadArtifact {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec.map_err(|e| ReportError::BadArtifact {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?);
    }
    Ok(Some(rows))
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok()
}

/// Collect one run directory into a summary row. Fields whose artifacts are
/// absent stay `None`.
pub fn summarize(run_dir: &Path) -> Result<ConditionSummary, ReportError> {
    let meta = read_run_meta(run_dir)?;
    let analysis = run_dir.join("analysis");
    let mut summary = ConditionSummary {
        run_dir: run_dir.to_path_buf(),
        model: meta.model,
        model_tag: meta.model.tag().to_string(),
        weight_decay: meta.train.weight_decay,
        grok_step: meta.result.as_ref().and_then(|r| r.grok_step),
        baseline: None,
        kstar95: None,
        kstar99: None,
        pm_r64: None,
        joint_half: None,
        joint_full: None,
        traj_k3: None,
        traj_k5: None,
        heads_r64: None,
        k90_pct: None,
        k99_pct: None,
        entropy: None,
        mean_si: None,
        mean_overlap: None,
    };

    // recon_curve.csv: method,scope,rank,acc_add,acc_mul,acc_quad,acc_mean,params_used
    if let Some(rows) = read_csv(&analysis.join("recon_curve.csv"))? {
        let n_joint = 6 * meta.model.n_layers;
        for rec in &rows {
            let (method, scope, rank) = (&rec[0], &rec[1], rec[2].parse::<usize>().unwrap_or(0));
            let mean = parse_f64(&rec[6]);
            match (method, scope, rank) {
                ("baseline", _, _) => {
                    summary.baseline = Some([
                        parse_f64(&rec[3]).unwrap_or(f64::NAN),
                        parse_f64(&rec[4]).unwrap_or(f64::NAN),
                        parse_f64(&rec[5]).unwrap_or(f64::NAN),
                    ]);
                }
                ("per_matrix", "trunk", 64) => summary.pm_r64 = mean,
                ("heads_only", "heads", 64) => summary.heads_r64 = mean,
                ("joint", "trunk", r) if r == n_joint / 2 => summary.joint_half = mean,
                ("joint", "trunk", r) if r == n_joint => summary.joint_full = mean,
                ("trajectory", "trunk", 3) => summary.traj_k3 = mean,
                ("trajectory", "trunk", 5) => summary.traj_k5 = mean,
                _ => {}
            }
        }
    }

    // kstar.csv: scope,threshold,kstar (the full-parameter scope rows).
    if let Some(rows) = read_csv(&analysis.join("kstar.csv"))? {
        for rec in &rows {
            if &rec[0] == "full" {
                match &rec[1] {
                    "0.95" => summary.kstar95 = Some(rec[2].to_string()),
                    "0.99" => summary.kstar99 = Some(rec[2].to_string()),
                    _ => {}
                }
            }
        }
    }

    // entropy.csv: matrix_name,entropy,k90,k99,k90_pct,k99_pct.
    if let Some(rows) = read_csv(&analysis.join("entropy.csv"))? {
        for rec in &rows {
            if &rec[0] == "mean_trunk" {
                summary.entropy = parse_f64(&rec[1]);
                summary.k90_pct = parse_f64(&rec[4]);
                summary.k99_pct = parse_f64(&rec[5]);
            }
        }
    }

    // selectivity.csv: mean row carries the mean SI in the last column.
    if let Some(rows) = read_csv(&analysis.join("selectivity.csv"))? {
        for rec in &rows {
            if &rec[0] == "mean" {
                summary.mean_si = rec.iter().last().and_then(parse_f64);
            }
        }
    }

    // overlap.csv: layer,task_pair,overlap with an all/mean row.
    if let Some(rows) = read_csv(&analysis.join("overlap.csv"))? {
        for rec in &rows {
            if &rec[0] == "all" && &rec[1] == "mean" {
                summary.mean_overlap = parse_f64(&rec[2]);
            }
        }
    }

    Ok(summary)
}

fn fmt_acc(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "NA".into(),
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.1}"),
        None => "NA".into(),
    }
}

fn fmt_cell(v: &Option<String>) -> String {
    v.clone().unwrap_or_else(|| "NA".into())
}

fn fmt_step(v: Option<u64>) -> String {
    match v {
        Some(v) => v.to_string(),
        None => "NA".into(),
    }
}

fn model_order(tag: &str) -> usize {
    match tag {
        "baseline" => 0,
        "medium" => 1,
        "large" => 2,
        _ => 3,
    }
}

/// Emit `table2.csv` .. `table6.csv` plus `summary.csv` under `out_dir`.
///
/// Rows are ordered by model (baseline, medium, large, custom) and then by
/// weight decay, so re-emission over the same inputs is byte-identical.
pub fn emit_tables(summaries: &[ConditionSummary], out_dir: &Path) -> Result<(), ReportError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut ordered: Vec<&ConditionSummary> = summaries.iter().collect();
    ordered.sort_by(|a, b| {
        model_order(&a.model_tag)
            .cmp(&model_order(&b.model_tag))
            .then(a.weight_decay.partial_cmp(&b.weight_decay).unwrap())
            .then_with(|| a.run_dir.cmp(&b.run_dir))
    });

    let write_table = |name: &str, header: &str, body: &dyn Fn(&ConditionSummary) -> String| {
        let path = out_dir.join(name);
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&path).map_err(io_err(&path))?,
        );
        writeln!(f, "{header}").map_err(io_err(&path))?;
        for s in &ordered {
            writeln!(f, "{},{},{}", s.model_tag, s.weight_decay, body(s))
                .map_err(io_err(&path))?;
        }
        f.flush().map_err(io_err(&path))
    };

    write_table(
        "table2.csv",
        "model,lambda,kstar95,kstar99,source",
        &|s| {
            format!(
                "{},{},analysis/kstar.csv",
                fmt_cell(&s.kstar95),
                fmt_cell(&s.kstar99)
            )
        },
    )?;
    write_table(
        "table3.csv",
        "model,lambda,k90_pct,k99_pct,source",
        &|s| {
            format!(
                "{},{},analysis/entropy.csv",
                fmt_pct(s.k90_pct),
                fmt_pct(s.k99_pct)
            )
        },
    )?;
    write_table("table4.csv", "model,lambda,mean_si,source", &|s| {
        format!("{},analysis/selectivity.csv", fmt_acc(s.mean_si))
    })?;
    write_table(
        "table5.csv",
        "model,lambda,pm_r64,joint_half,joint_full,traj_k3,traj_k5,baseline_mean,source",
        &|s| {
            let baseline_mean = s
                .baseline
                .map(|b| b.iter().sum::<f64>() / N_TASKS as f64);
            format!(
                "{},{},{},{},{},{},analysis/recon_curve.csv",
                fmt_acc(s.pm_r64),
                fmt_acc(s.joint_half),
                fmt_acc(s.joint_full),
                fmt_acc(s.traj_k3),
                fmt_acc(s.traj_k5),
                fmt_acc(baseline_mean)
            )
        },
    )?;
    write_table("table6.csv", "model,lambda,mean_overlap,source", &|s| {
        format!("{},analysis/overlap.csv", fmt_acc(s.mean_overlap))
    })?;

    // Full per-condition summary with one source column per field group.
    let path = out_dir.join("summary.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
    writeln!(
        f,
        "model,lambda,grok_step,grok_src,acc_add,acc_mul,acc_quad,\
         pm_r64,joint_half,joint_full,traj_k3,traj_k5,heads_r64,recon_src,\
         kstar95,kstar99,kstar_src,k90_pct,k99_pct,entropy,spectral_src,\
         mean_si,si_src,mean_overlap,overlap_src"
    )
    .map_err(io_err(&path))?;
    for s in &ordered {
        let b = s.baseline;
        writeln!(
            f,
            "{},{},{},run.meta,{},{},{},{},{},{},{},{},{},analysis/recon_curve.csv,\
             {},{},analysis/kstar.csv,{},{},{},analysis/entropy.csv,\
             {},analysis/selectivity.csv,{},analysis/overlap.csv",
            s.model_tag,
            s.weight_decay,
            fmt_step(s.grok_step),
            fmt_acc(b.map(|x| x[0])),
            fmt_acc(b.map(|x| x[1])),
            fmt_acc(b.map(|x| x[2])),
            fmt_acc(s.pm_r64),
            fmt_acc(s.joint_half),
            fmt_acc(s.joint_full),
            fmt_acc(s.traj_k3),
            fmt_acc(s.traj_k5),
            fmt_acc(s.heads_r64),
            fmt_cell(&s.kstar95),
            fmt_cell(&s.kstar99),
            fmt_pct(s.k90_pct),
            fmt_pct(s.k99_pct),
            fmt_acc(s.entropy),
            fmt_acc(s.mean_si),
            fmt_acc(s.mean_overlap),
        )
        .map_err(io_err(&path))?;
    }
    f.flush().map_err(io_err(&path))?;
    Ok(())
}

/// Group summaries by model tag for quick terminal inspection.
pub fn format_brief(summaries: &[ConditionSummary]) -> String {
    let mut by_model: BTreeMap<String, Vec<&ConditionSummary>> = BTreeMap::new();
    for s in summaries {
        by_model.entry(s.model_tag.clone()).or_default().push(s);
    }
    let mut out = String::new();
    for (tag, rows) in by_model {
        out.push_str(&format!("{tag}:\n"));
        for s in rows {
            out.push_str(&format!(
                "  wd={} grok={} pm64={} joint_half={} traj5={} si={}\n",
                s.weight_decay,
                fmt_step(s.grok_step),
                fmt_acc(s.pm_r64),
                fmt_acc(s.joint_half),
                fmt_acc(s.traj_k5),
                fmt_acc(s.mean_si),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::{RunMeta, RunResult, RunStatus, TrainConfig, write_run_meta};

    fn fixture_run(dir: &Path, with_probes: bool) {
        std::fs::create_dir_all(dir.join("analysis")).unwrap();
        let meta = RunMeta {
            schema: 1,
            model: ModelConfig::BASELINE,
            train: TrainConfig {
                weight_decay: 0.1,
                ..TrainConfig::default()
            },
            result: Some(RunResult {
                status: RunStatus::Grokked,
                final_step: 25_000,
                n_checkpoints: 40,
                grok_step: Some(25_000),
                grok_step_add: Some(20_000),
                grok_step_mul: Some(21_000),
                grok_step_quad: Some(25_000),
            }),
        };
        write_run_meta(dir, &meta).unwrap();
        std::fs::write(
            dir.join("analysis/recon_curve.csv"),
            "method,scope,rank,acc_add,acc_mul,acc_quad,acc_mean,params_used\n\
             baseline,none,0,0.995000,0.993000,0.994000,0.994000,315427\n\
             per_matrix,trunk,64,0.700000,0.650000,0.670000,0.673333,100000\n\
             heads_only,heads,64,0.990000,0.991000,0.992000,0.991000,5000\n\
             joint,trunk,6,0.010000,0.008000,0.009000,0.009000,20000\n\
             joint,trunk,12,0.995000,0.993000,0.994000,0.994000,40000\n\
             trajectory,trunk,3,0.850000,0.840000,0.845000,0.845000,795651\n\
             trajectory,trunk,5,0.970000,0.965000,0.969000,0.968000,1326085\n",
        )
        .unwrap();
        std::fs::write(
            dir.join("analysis/kstar.csv"),
            "scope,threshold,kstar\ntrunk,0.95,4\ntrunk,0.99,9\nfull,0.95,5\nfull,0.99,7\n",
        )
        .unwrap();
        std::fs::write(
            dir.join("analysis/entropy.csv"),
            "matrix_name,entropy,k90,k99,k90_pct,k99_pct\n\
             layers.0.attn.wq,0.870000,64,101,50.0,78.9\n\
             mean_trunk,0.870000,,,50.0,79.0\n",
        )
        .unwrap();
        if with_probes {
            std::fs::write(
                dir.join("analysis/selectivity.csv"),
                "task,k,scope,acc_before_add,acc_before_mul,acc_before_quad,\
                 acc_after_add,acc_after_mul,acc_after_quad,self_damage,mean_collateral,si\n\
                 add,10,full,0.99,0.99,0.99,0.79,0.99,0.99,0.2,0.0,1.0\n\
                 mean,10,full,,,,,,,,,0.990000\n",
            )
            .unwrap();
            std::fs::write(
                dir.join("analysis/overlap.csv"),
                "layer,task_pair,overlap\nlayers.0,add-mul,0.070000\nall,mean,0.065000\n",
            )
            .unwrap();
        }
    }

    #[test]
    fn summarize_reads_every_field() {
        let dir = tempfile::tempdir().unwrap();
        fixture_run(dir.path(), true);
        let s = summarize(dir.path()).unwrap();
        assert_eq!(s.model_tag, "baseline");
        assert_eq!(s.weight_decay, 0.1);
        assert_eq!(s.grok_step, Some(25_000));
        assert_eq!(s.pm_r64, Some(0.673333));
        assert_eq!(s.joint_half, Some(0.009));
        assert_eq!(s.joint_full, Some(0.994));
        // Traj(k=5) is a pass-through of the artifact cell.
        assert_eq!(s.traj_k5, Some(0.968));
        assert_eq!(s.kstar95.as_deref(), Some("5"));
        assert_eq!(s.kstar99.as_deref(), Some("7"));
        assert_eq!(s.entropy, Some(0.87));
        assert_eq!(s.k90_pct, Some(50.0));
        assert_eq!(s.mean_si, Some(0.99));
        assert_eq!(s.mean_overlap, Some(0.065));
    }

    #[test]
    fn missing_artifacts_stay_missing() {
        let dir = tempfile::tempdir().unwrap();
        fixture_run(dir.path(), false);
        let s = summarize(dir.path()).unwrap();
        assert_eq!(s.mean_si, None);
        assert_eq!(s.mean_overlap, None);
        assert!(s.pm_r64.is_some());
        // Emission spells them NA.
        let out = tempfile::tempdir().unwrap();
        emit_tables(&[s], out.path()).unwrap();
        let t4 = std::fs::read_to_string(out.path().join("table4.csv")).unwrap();
        assert!(t4.lines().nth(1).unwrap().contains("NA"));
    }

    #[test]
    fn emission_is_deterministic_and_row_per_condition() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        fixture_run(dir_a.path(), true);
        fixture_run(dir_b.path(), true);
        let mut s_b = summarize(dir_b.path()).unwrap();
        s_b.weight_decay = 1.0;
        let summaries = vec![summarize(dir_a.path()).unwrap(), s_b];
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        emit_tables(&summaries, out1.path()).unwrap();
        emit_tables(&summaries, out2.path()).unwrap();
        for t in ["table2.csv", "table3.csv", "table4.csv", "table5.csv", "table6.csv", "summary.csv"] {
            let a = std::fs::read(out1.path().join(t)).unwrap();
            let b = std::fs::read(out2.path().join(t)).unwrap();
            assert_eq!(a, b, "{t} not deterministic");
            let text = String::from_utf8(a).unwrap();
            assert_eq!(text.lines().count(), 3, "{t} row count");
        }
        // Table 5 carries the artifact-sourced cells and provenance.
        let t5 = std::fs::read_to_string(out1.path().join("table5.csv")).unwrap();
        let row = t5.lines().nth(1).unwrap();
        assert!(row.starts_with("baseline,0.1,0.6733,0.0090,0.9940,0.8450,0.9680,0.9940"));
        assert!(row.ends_with("analysis/recon_curve.csv"));
    }
}
