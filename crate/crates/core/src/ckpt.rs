//! Versioned binary persistence for parameter sets, and trajectory loading.
//!
//! A `.grkc` file holds a magic tag, a format version, a TOML metadata
//! block, and the tensors in canonical order as little-endian f32 payloads.
//! The exact byte layout is documented in `docs/format.md`; it is the
//! interchange boundary for all analysis, so readers reject any version
//! they do not know instead of reinterpreting bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::model::{CoordSet, Layout, ModelConfig, ModelError, ParamSet};

pub const MAGIC: &[u8; 4] = b"GRKC";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a checkpoint file)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unknown format version {version} (expected {FORMAT_VERSION})")]
    UnknownVersion { path: PathBuf, version: u32 },
    #[error("{path}: malformed metadata: {msg}")]
    BadMeta { path: PathBuf, msg: String },
    #[error("{path}: tensor {index} is {got}, expected {want}")]
    TensorMismatch {
        path: PathBuf,
        index: usize,
        got: String,
        want: String,
    },
    #[error("{path}: truncated file")]
    Truncated { path: PathBuf },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("run directory {0}: no checkpoints found")]
    NoCheckpoints(PathBuf),
    #[error("run directory {0}: missing step-0 checkpoint")]
    MissingStepZero(PathBuf),
    #[error("checkpoints disagree on model config: step {step}")]
    ConfigMismatch { step: u64 },
    #[error("trajectory is degenerate: no parameter movement")]
    DegenerateTrajectory,
}

impl CkptError {
    fn io(path: &Path, source: std::io::Error) -> CkptError {
        CkptError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Metadata stored inside every checkpoint as TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptMeta {
    pub step: u64,
    pub init_seed: u64,
    pub split_seed: u64,
    pub model: ModelConfig,
}

/// Write a parameter set as a `.grkc` file (f32 payloads, little-endian).
///
/// The file appears atomically: data goes to a sibling temp file which is
/// renamed into place.
pub fn save(path: &Path, params: &ParamSet, meta: &CkptMeta) -> Result<(), CkptError> {
    let layout = Layout::new(&params.config);
    let meta_text = toml::to_string(meta).map_err(|e| CkptError::BadMeta {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let tmp = path.with_extension("grkc.tmp");
    {
        let file = File::create(&tmp).map_err(|e| CkptError::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let mut out = |bytes: &[u8]| w.write_all(bytes).map_err(|e| CkptError::io(&tmp, e));
        out(MAGIC)?;
        out(&FORMAT_VERSION.to_le_bytes())?;
        out(&(meta_text.len() as u64).to_le_bytes())?;
        out(meta_text.as_bytes())?;
        out(&(layout.entries.len() as u32).to_le_bytes())?;
        for e in &layout.entries {
            out(&(e.name.len() as u32).to_le_bytes())?;
            out(e.name.as_bytes())?;
            out(&[DTYPE_F32, e.shape.len() as u8])?;
            for &dim in &e.shape {
                out(&(dim as u64).to_le_bytes())?;
            }
            for &v in &params.data[e.span()] {
                out(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| CkptError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| CkptError::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    r: BufReader<File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), CkptError> {
        self.r.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                CkptError::Truncated {
                    path: self.path.to_path_buf(),
                }
            } else {
                CkptError::io(self.path, e)
            }
        })
    }

    fn u32(&mut self) -> Result<u32, CkptError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, CkptError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Read a `.grkc` file back into an f64 parameter set plus its metadata.
pub fn load(path: &Path) -> Result<(ParamSet, CkptMeta), CkptError> {
    let file = File::open(path).map_err(|e| CkptError::io(path, e))?;
    let mut rd = Reader {
        r: BufReader::new(file),
        path,
    };
    let mut magic = [0u8; 4];
    rd.exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CkptError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(CkptError::UnknownVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let meta_len = rd.u64()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    rd.exact(&mut meta_bytes)?;
    let meta_text = String::from_utf8(meta_bytes).map_err(|e| CkptError::BadMeta {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let meta: CkptMeta = toml::from_str(&meta_text).map_err(|e| CkptError::BadMeta {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let layout = Layout::new(&meta.model);
    let n_tensors = rd.u32()? as usize;
    if n_tensors != layout.entries.len() {
        return Err(CkptError::TensorMismatch {
            path: path.to_path_buf(),
            index: 0,
            got: format!("{n_tensors} tensors"),
            want: format!("{} tensors", layout.entries.len()),
        });
    }
    let mut data = vec![0.0f64; layout.total];
    for (index, e) in layout.entries.iter().enumerate() {
        let mismatch = |got: String, want: String| CkptError::TensorMismatch {
            path: path.to_path_buf(),
            index,
            got,
            want,
        };
        let name_len = rd.u32()? as usize;
        if name_len > 4096 {
            return Err(mismatch(format!("name length {name_len}"), e.name.clone()));
        }
        let mut name = vec![0u8; name_len];
        rd.exact(&mut name)?;
        let name = String::from_utf8_lossy(&name).to_string();
        if name != e.name {
            return Err(mismatch(name, e.name.clone()));
        }
        let mut tag = [0u8; 2];
        rd.exact(&mut tag)?;
        if tag[0] != DTYPE_F32 {
            return Err(mismatch(format!("dtype {}", tag[0]), "dtype f32".into()));
        }
        if tag[1] as usize != e.shape.len() {
            return Err(mismatch(
                format!("rank {}", tag[1]),
                format!("rank {}", e.shape.len()),
            ));
        }
        let mut dims = Vec::with_capacity(e.shape.len());
        for _ in 0..e.shape.len() {
            dims.push(rd.u64()? as usize);
        }
        if dims != e.shape {
            return Err(mismatch(
                format!("shape {dims:?}"),
                format!("shape {:?}", e.shape),
            ));
        }
        let mut payload = vec![0u8; e.len * 4];
        rd.exact(&mut payload)?;
        for (slot, chunk) in data[e.span()].iter_mut().zip(payload.chunks_exact(4)) {
            *slot = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    }
    let params = ParamSet::from_flat(&meta.model, data)?;
    Ok((params, meta))
}

/// Path of the checkpoint for a step inside a run directory.
pub fn ckpt_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("ckpt").join(format!("step_{step}.grkc"))
}

/// Checkpoints of a run, sorted by step.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>, CkptError> {
    let dir = run_dir.join("ckpt");
    let entries = std::fs::read_dir(&dir).map_err(|e| CkptError::io(&dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CkptError::io(&dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".grkc"))
        {
            if let Ok(step) = stem.parse::<u64>() {
                out.push((step, entry.path()));
            }
        }
    }
    if out.is_empty() {
        return Err(CkptError::NoCheckpoints(run_dir.to_path_buf()));
    }
    out.sort_by_key(|&(s, _)| s);
    Ok(out)
}

/// A loaded trajectory: checkpoint steps, the initial parameters (restricted
/// to the requested coordinates), and one delta row per checkpoint.
pub struct Trajectory {
    pub steps: Vec<u64>,
    /// Step-0 parameter values on the selected coordinates.
    pub init: Vec<f64>,
    /// Row i = params(step i) - params(step 0), on the selected coordinates.
    pub deltas: Mat,
    pub meta: CkptMeta,
}

/// Load every checkpoint of a run and assemble the delta matrix
/// (one row per checkpoint, ordered by step, row 0 identically zero).
///
/// `subset` restricts the columns; `None` takes all coordinates.
pub fn load_trajectory(run_dir: &Path, subset: Option<&CoordSet>) -> Result<Trajectory, CkptError> {
    let ckpts = list_checkpoints(run_dir)?;
    if ckpts[0].0 != 0 {
        return Err(CkptError::MissingStepZero(run_dir.to_path_buf()));
    }
    if ckpts.len() < 2 {
        return Err(CkptError::NoCheckpoints(run_dir.to_path_buf()));
    }
    let (init_params, meta) = load(&ckpts[0].1)?;
    let layout = Layout::new(&meta.model);
    let full = CoordSet::full(&layout);
    let set = subset.unwrap_or(&full);
    let init = set.gather(&init_params.data);
    let n = ckpts.len();
    let d = set.len();
    let mut deltas = Mat::zeros(n, d);
    let mut steps = Vec::with_capacity(n);
    let mut moved = false;
    for (i, (step, path)) in ckpts.iter().enumerate() {
        steps.push(*step);
        if i == 0 {
            continue; // row 0 is zero by definition
        }
        let (p, m) = load(path)?;
        if m.model != meta.model {
            return Err(CkptError::ConfigMismatch { step: *step });
        }
        let row = deltas.row_mut(i);
        let mut cursor = 0usize;
        for r in set.ranges() {
            for (dst, (a, b)) in row[cursor..cursor + r.len()].iter_mut().zip(
                p.data[r.clone()]
                    .iter()
                    .zip(init_params.data[r.clone()].iter()),
            ) {
                *dst = a - b;
                if *dst != 0.0 {
                    moved = true;
                }
            }
            cursor += r.len();
        }
    }
    if !moved {
        return Err(CkptError::DegenerateTrajectory);
    }
    Ok(Trajectory {
        steps,
        init,
        deltas,
        meta,
    })
}
