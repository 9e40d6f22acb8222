//! The shared-trunk transformer: parameter container with a canonical
//! flattening order, forward pass, analytic backward pass, and per-task
//! loss/accuracy.
//!
//! Architecture: token embedding + 2-position embedding, a stack of
//! pre-norm encoder layers (attention then feed-forward, both with residual
//! connections), a final layer norm, mean pooling over the two positions,
//! and one linear head per task.

mod net;

pub use net::{accuracy_and_loss, loss_and_grads, logits_into, EvalResult, TaskSelector, Workspace};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::Elem;
use crate::rng::SplitMix64;
use crate::tasks::N_TASKS;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("non-finite values detected in {0}")]
    NonFinite(String),
    #[error("unknown tensor name: {0}")]
    UnknownTensor(String),
    #[error("flat vector length {got} does not match parameter count {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("batch and labels disagree: {0}")]
    BadBatch(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
}

fn default_p() -> usize {
    97
}

fn default_n_tasks() -> usize {
    N_TASKS
}

impl ModelConfig {
    pub const BASELINE: ModelConfig = ModelConfig {
        d_model: 128,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        p: 97,
        n_tasks: N_TASKS,
    };

    pub const MEDIUM: ModelConfig = ModelConfig {
        d_model: 128,
        n_layers: 4,
        n_heads: 4,
        d_ff: 256,
        p: 97,
        n_tasks: N_TASKS,
    };

    pub const LARGE: ModelConfig = ModelConfig {
        d_model: 256,
        n_layers: 4,
        n_heads: 8,
        d_ff: 512,
        p: 97,
        n_tasks: N_TASKS,
    };

    pub fn from_tag(tag: &str) -> Option<ModelConfig> {
        match tag {
            "baseline" => Some(Self::BASELINE),
            "medium" => Some(Self::MEDIUM),
            "large" => Some(Self::LARGE),
            _ => None,
        }
    }

    /// Tag of a known configuration, or "custom".
    pub fn tag(&self) -> &'static str {
        if *self == Self::BASELINE {
            "baseline"
        } else if *self == Self::MEDIUM {
            "medium"
        } else if *self == Self::LARGE {
            "large"
        } else {
            "custom"
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.p < 2 {
            return Err(ModelError::BadConfig(format!("modulus {} too small", self.p)));
        }
        if self.n_tasks != N_TASKS {
            return Err(ModelError::BadConfig(format!(
                "n_tasks must be {N_TASKS}, got {}",
                self.n_tasks
            )));
        }
        Ok(())
    }
}

/// What a tensor is, which fixes its initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Embedding table: 0.02 * N(0, 1).
    Embedding,
    /// Linear weight: N(0, 1/fan_in), fan_in = input dimension (shape[0]).
    Weight,
    /// Additive parameter, initialized to zero.
    Bias,
    /// Layer-norm gain, initialized to one.
    Gain,
}

/// Metadata of one named tensor in the canonical flattening order.
#[derive(Debug, Clone)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub offset: usize,
    pub len: usize,
}

impl TensorMeta {
    pub fn span(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Canonical tensor order and flat offsets for a configuration.
///
/// The order is: tok_emb, pos_emb, then per layer
/// (wq, bq, wk, bk, wv, bv, wo, bo, ln1.gain, ln1.bias,
///  w1, b1, w2, b2, ln2.gain, ln2.bias), then final_ln.{gain,bias},
/// then per task (head w, head b). Row-major within each tensor.
#[derive(Debug, Clone)]
pub struct Layout {
    pub entries: Vec<TensorMeta>,
    pub total: usize,
    n_layers: usize,
    n_tasks: usize,
}

const ENTRIES_PER_LAYER: usize = 16;

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.d_model;
        let dff = cfg.d_ff;
        let p = cfg.p;
        let mut entries: Vec<TensorMeta> = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, kind: TensorKind| {
            let len: usize = shape.iter().product();
            entries.push(TensorMeta {
                name,
                shape,
                kind,
                offset,
                len,
            });
            offset += len;
        };
        push("tok_emb".into(), vec![p, d], TensorKind::Embedding);
        push("pos_emb".into(), vec![2, d], TensorKind::Embedding);
        for l in 0..cfg.n_layers {
            let base = format!("layers.{l}");
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{base}.attn.{w}"), vec![d, d], TensorKind::Weight);
                push(
                    format!("{base}.attn.{}", w.replace('w', "b")),
                    vec![d],
                    TensorKind::Bias,
                );
            }
            push(format!("{base}.ln1.gain"), vec![d], TensorKind::Gain);
            push(format!("{base}.ln1.bias"), vec![d], TensorKind::Bias);
            push(format!("{base}.ffn.w1"), vec![d, dff], TensorKind::Weight);
            push(format!("{base}.ffn.b1"), vec![dff], TensorKind::Bias);
            push(format!("{base}.ffn.w2"), vec![dff, d], TensorKind::Weight);
            push(format!("{base}.ffn.b2"), vec![d], TensorKind::Bias);
            push(format!("{base}.ln2.gain"), vec![d], TensorKind::Gain);
            push(format!("{base}.ln2.bias"), vec![d], TensorKind::Bias);
        }
        push("final_ln.gain".into(), vec![d], TensorKind::Gain);
        push("final_ln.bias".into(), vec![d], TensorKind::Bias);
        for t in 0..cfg.n_tasks {
            push(format!("heads.{t}.w"), vec![d, p], TensorKind::Weight);
            push(format!("heads.{t}.b"), vec![p], TensorKind::Bias);
        }
        Layout {
            entries,
            total: offset,
            n_layers: cfg.n_layers,
            n_tasks: cfg.n_tasks,
        }
    }

    pub fn by_name(&self, name: &str) -> Result<&TensorMeta, ModelError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ModelError::UnknownTensor(name.to_string()))
    }

    /// Flat index range of a named tensor.
    pub fn span_of(&self, name: &str) -> Result<std::ops::Range<usize>, ModelError> {
        Ok(self.by_name(name)?.span())
    }

    // Entry indices, derived from the fixed per-layer entry count.
    pub fn idx_tok_emb(&self) -> usize {
        0
    }
    pub fn idx_pos_emb(&self) -> usize {
        1
    }
    pub fn layer_base(&self, l: usize) -> usize {
        2 + ENTRIES_PER_LAYER * l
    }
    pub fn idx_final_gain(&self) -> usize {
        2 + ENTRIES_PER_LAYER * self.n_layers
    }
    pub fn idx_final_bias(&self) -> usize {
        self.idx_final_gain() + 1
    }
    pub fn idx_head_w(&self, t: usize) -> usize {
        self.idx_final_bias() + 1 + 2 * t
    }
    pub fn idx_head_b(&self, t: usize) -> usize {
        self.idx_head_w(t) + 1
    }

    /// Contiguous flat range of the trunk: every per-layer tensor plus the
    /// final layer norm. Excludes embeddings and heads.
    pub fn trunk_range(&self) -> std::ops::Range<usize> {
        let start = self.entries[self.layer_base(0)].offset;
        let end_meta = &self.entries[self.idx_final_bias()];
        start..end_meta.offset + end_meta.len
    }

    /// Names of the 2-D trunk matrices, in canonical order: the attention
    /// projections and feed-forward matrices of every layer. This is the
    /// matrix set used by per-matrix and joint reconstruction.
    pub fn trunk_matrix_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                names.push(format!("layers.{l}.attn.{w}"));
            }
            names.push(format!("layers.{l}.ffn.w1"));
            names.push(format!("layers.{l}.ffn.w2"));
        }
        names
    }

    /// Names of the per-task head matrices.
    pub fn head_matrix_names(&self) -> Vec<String> {
        (0..self.n_tasks).map(|t| format!("heads.{t}.w")).collect()
    }

    /// Contiguous flat range of one encoder layer's parameters.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let first = &self.entries[self.layer_base(l)];
        let last = &self.entries[self.layer_base(l) + ENTRIES_PER_LAYER - 1];
        first.offset..last.offset + last.len
    }
}

/// A set of flat-coordinate ranges, used to restrict analysis to a subset
/// of the parameter vector (trunk-only, per-layer, named tensors).
///
/// Ranges are sorted, disjoint, and non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordSet {
    ranges: Vec<std::ops::Range<usize>>,
    len: usize,
}

impl CoordSet {
    pub fn from_ranges(mut ranges: Vec<std::ops::Range<usize>>) -> CoordSet {
        ranges.retain(|r| !r.is_empty());
        ranges.sort_by_key(|r| r.start);
        let mut merged: Vec<std::ops::Range<usize>> = Vec::new();
        for r in ranges {
            match merged.last_mut() {
                Some(last) if r.start <= last.end => {
                    assert!(r.start >= last.start);
                    last.end = last.end.max(r.end);
                }
                _ => merged.push(r),
            }
        }
        let len = merged.iter().map(|r| r.len()).sum();
        CoordSet {
            ranges: merged,
            len,
        }
    }

    /// Every coordinate of a model with this layout.
    pub fn full(layout: &Layout) -> CoordSet {
        CoordSet::from_ranges(vec![0..layout.total])
    }

    /// The trunk coordinates (per-layer tensors plus final layer norm).
    pub fn trunk(layout: &Layout) -> CoordSet {
        CoordSet::from_ranges(vec![layout.trunk_range()])
    }

    pub fn from_tensor_names(layout: &Layout, names: &[String]) -> Result<CoordSet, ModelError> {
        let mut ranges = Vec::with_capacity(names.len());
        for n in names {
            ranges.push(layout.span_of(n)?);
        }
        Ok(CoordSet::from_ranges(ranges))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ranges(&self) -> &[std::ops::Range<usize>] {
        &self.ranges
    }

    /// Copy the selected coordinates of `src` into a dense vector.
    pub fn gather(&self, src: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len);
        for r in &self.ranges {
            out.extend_from_slice(&src[r.clone()]);
        }
        out
    }

    /// Write a dense masked vector back over the selected coordinates.
    pub fn scatter(&self, masked: &[f64], dst: &mut [f64]) {
        assert_eq!(masked.len(), self.len, "masked length");
        let mut cursor = 0usize;
        for r in &self.ranges {
            dst[r.clone()].copy_from_slice(&masked[cursor..cursor + r.len()]);
            cursor += r.len();
        }
    }

    /// Local (dense) offsets of a global range that lies entirely inside
    /// one of the set's ranges. Returns `None` if it does not.
    pub fn locate(&self, global: std::ops::Range<usize>) -> Option<std::ops::Range<usize>> {
        let mut acc = 0usize;
        for r in &self.ranges {
            if global.start >= r.start && global.end <= r.end {
                let s = acc + (global.start - r.start);
                return Some(s..s + global.len());
            }
            acc += r.len();
        }
        None
    }
}

/// All model parameters in one flat buffer, canonical order.
#[derive(Debug, Clone)]
pub struct FlatParams<E> {
    pub config: ModelConfig,
    pub data: Vec<E>,
}

/// The f64 parameter set used by training masters, checkpoints, and
/// analysis.
pub type ParamSet = FlatParams<f64>;

impl<E: Elem> FlatParams<E> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layout = Layout::new(cfg);
        FlatParams {
            config: *cfg,
            data: vec![E::zero(); layout.total],
        }
    }

    /// Rebuild from a flat vector (the inverse of [`FlatParams::flatten`]).
    pub fn from_flat(cfg: &ModelConfig, data: Vec<E>) -> Result<Self, ModelError> {
        let layout = Layout::new(cfg);
        if data.len() != layout.total {
            return Err(ModelError::LengthMismatch {
                got: data.len(),
                want: layout.total,
            });
        }
        Ok(FlatParams { config: *cfg, data })
    }

    /// The canonical flat view. Round-trips exactly with
    /// [`FlatParams::from_flat`].
    pub fn flatten(&self) -> Vec<E> {
        self.data.clone()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor<'a>(&'a self, layout: &Layout, entry: usize) -> &'a [E] {
        let m = &layout.entries[entry];
        &self.data[m.offset..m.offset + m.len]
    }

    pub fn tensor_mut<'a>(&'a mut self, layout: &Layout, entry: usize) -> &'a mut [E] {
        let m = &layout.entries[entry];
        &mut self.data[m.offset..m.offset + m.len]
    }

    /// Convert elementwise to another precision.
    pub fn cast<F: Elem>(&self) -> FlatParams<F> {
        FlatParams {
            config: self.config,
            data: self.data.iter().map(|v| F::of(v.f64())).collect(),
        }
    }

    /// Overwrite from another precision without reallocating.
    pub fn assign_cast<F: Elem>(&mut self, src: &FlatParams<F>) {
        debug_assert_eq!(self.data.len(), src.data.len());
        for (d, s) in self.data.iter_mut().zip(src.data.iter()) {
            *d = E::of(s.f64());
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(E::zero());
    }
}

impl ParamSet {
    /// Pass every value through f32, the checkpoint storage type. The result
    /// evaluates exactly like a saved-and-reloaded copy of `self`.
    pub fn round_f32(&self) -> ParamSet {
        FlatParams {
            config: self.config,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

/// Deterministic parameter initialization.
///
/// A single SplitMix64 stream seeded with `seed` is consumed tensor by
/// tensor in canonical order, row-major: embeddings draw 0.02*N(0,1) per
/// element, linear weights draw N(0, 1/fan_in), biases are zero and gains
/// one (neither consumes the stream).
pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ParamSet, ModelError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = SplitMix64::new(seed);
    let mut data = vec![0.0f64; layout.total];
    for meta in &layout.entries {
        let slot = &mut data[meta.offset..meta.offset + meta.len];
        match meta.kind {
            TensorKind::Embedding => {
                for v in slot.iter_mut() {
                    *v = 0.02 * rng.next_normal();
                }
            }
            TensorKind::Weight => {
                let std = (meta.rows() as f64).sqrt().recip();
                for v in slot.iter_mut() {
                    *v = std * rng.next_normal();
                }
            }
            TensorKind::Bias => {}
            TensorKind::Gain => slot.fill(1.0),
        }
    }
    Ok(FlatParams { config: *cfg, data })
}

/// A borrowed batch of examples: input pairs plus per-task target labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub pairs: &'a [(u32, u32)],
    pub labels: [&'a [u32]; N_TASKS],
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch<'a> {
        Batch {
            pairs: &self.pairs[range.clone()],
            labels: [
                &self.labels[0][range.clone()],
                &self.labels[1][range.clone()],
                &self.labels[2][range],
            ],
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        for l in &self.labels {
            if l.len() != self.pairs.len() {
                return Err(ModelError::BadBatch("label/pair length mismatch".into()));
            }
        }
        let p = cfg.p as u32;
        if self
            .pairs
            .iter()
            .any(|&(x, y)| x >= p || y >= p)
        {
            return Err(ModelError::BadBatch("token id out of range".into()));
        }
        Ok(())
    }
}

impl<'a> From<&'a crate::tasks::Dataset> for Batch<'a> {
    fn from(ds: &'a crate::tasks::Dataset) -> Batch<'a> {
        Batch {
            pairs: &ds.pairs,
            labels: [&ds.labels[0], &ds.labels[1], &ds.labels[2]],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_match_known_configs() {
        assert_eq!(Layout::new(&ModelConfig::BASELINE).total, 315_427);
        assert_eq!(Layout::new(&ModelConfig::MEDIUM).total, 580_387);
        assert_eq!(Layout::new(&ModelConfig::LARGE).total, 2_209_059);
    }

    #[test]
    fn init_lengths_match_counts() {
        for cfg in [ModelConfig::BASELINE, ModelConfig::MEDIUM, ModelConfig::LARGE] {
            let p = init(&cfg, 1).unwrap();
            assert_eq!(p.flatten().len(), Layout::new(&cfg).total);
        }
    }

    #[test]
    fn spans_cover_everything_once() {
        let layout = Layout::new(&ModelConfig::BASELINE);
        let mut cursor = 0usize;
        for e in &layout.entries {
            assert_eq!(e.offset, cursor, "gap before {}", e.name);
            cursor += e.len;
        }
        assert_eq!(cursor, layout.total);
        let sum: usize = layout.entries.iter().map(|e| e.len).sum();
        assert_eq!(sum, 315_427);
    }

    #[test]
    fn trunk_span_arithmetic() {
        let layout = Layout::new(&ModelConfig::BASELINE);
        let trunk = layout.trunk_range();
        // total minus tok_emb (97*128) minus pos_emb (2*128) minus heads
        // (3 * (128*97 + 97))
        assert_eq!(trunk.len(), 315_427 - 12_416 - 256 - 37_539);
        assert_eq!(trunk.len(), 265_216);
        let tok = layout.span_of("tok_emb").unwrap();
        assert_eq!(tok, 0..12_416);
    }

    #[test]
    fn flatten_round_trip_is_identity() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            p: 11,
            n_tasks: 3,
        };
        let p = init(&cfg, 99).unwrap();
        let flat = p.flatten();
        let back = ParamSet::from_flat(&cfg, flat.clone()).unwrap();
        assert_eq!(back.data, p.data);
        assert!(ParamSet::from_flat(&cfg, vec![0.0; 3]).is_err());
    }

    #[test]
    fn span_of_unknown_name_errors() {
        let layout = Layout::new(&ModelConfig::BASELINE);
        assert!(layout.span_of("layers.0.attn.wq").is_ok());
        assert!(layout.span_of("nope").is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::BASELINE;
        let a = init(&cfg, 5).unwrap();
        let b = init(&cfg, 5).unwrap();
        let c = init(&cfg, 6).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn init_statistics() {
        let cfg = ModelConfig::BASELINE;
        let layout = Layout::new(&cfg);
        let p = init(&cfg, 7).unwrap();
        let wq = p.tensor(&layout, layout.layer_base(0));
        let var: f64 = wq.iter().map(|v| v * v).sum::<f64>() / wq.len() as f64;
        assert!((var - 1.0 / 128.0).abs() < 0.1 / 128.0 * 5.0, "var {var}");
        let gains = p.tensor(&layout, layout.idx_final_gain());
        assert!(gains.iter().all(|&g| g == 1.0));
        let bq = p.tensor(&layout, layout.layer_base(0) + 1);
        assert!(bq.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn trunk_matrix_names_count() {
        let layout = Layout::new(&ModelConfig::BASELINE);
        assert_eq!(layout.trunk_matrix_names().len(), 12);
        let layout = Layout::new(&ModelConfig::LARGE);
        assert_eq!(layout.trunk_matrix_names().len(), 24);
    }

    #[test]
    fn coord_set_gather_scatter_round_trip() {
        let layout = Layout::new(&ModelConfig::BASELINE);
        let trunk = CoordSet::trunk(&layout);
        assert_eq!(trunk.len(), 265_216);
        let src: Vec<f64> = (0..layout.total).map(|i| i as f64).collect();
        let dense = trunk.gather(&src);
        assert_eq!(dense.len(), trunk.len());
        let mut dst = vec![0.0; layout.total];
        trunk.scatter(&dense, &mut dst);
        let tr = layout.trunk_range();
        assert_eq!(&dst[tr.clone()], &src[tr.clone()]);
        assert!(dst[..tr.start].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coord_set_merges_and_locates() {
        let set = CoordSet::from_ranges(vec![10..20, 20..30, 50..60]);
        assert_eq!(set.len(), 30);
        assert_eq!(set.ranges().len(), 2);
        assert_eq!(set.locate(12..15), Some(2..5));
        assert_eq!(set.locate(55..58), Some(25..28));
        assert_eq!(set.locate(25..55), None);
        // Layer spans sit inside the trunk set at the right local offsets.
        let layout = Layout::new(&ModelConfig::BASELINE);
        let trunk = CoordSet::trunk(&layout);
        let l0 = layout.layer_range(0);
        let local = trunk.locate(l0.clone()).unwrap();
        assert_eq!(local.start, 0);
        assert_eq!(local.len(), l0.len());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::BASELINE;
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::BASELINE.validate().is_ok());
        assert_eq!(ModelConfig::BASELINE.tag(), "baseline");
        assert_eq!(ModelConfig::from_tag("large"), Some(ModelConfig::LARGE));
    }
}
