//! Forward pass, analytic backward pass, and evaluation.
//!
//! All activations live in a caller-owned [`Workspace`] so the full-batch
//! training loop never allocates in the hot path. Reductions (layer-norm
//! statistics, attention scores, softmax normalizers, losses, column sums)
//! accumulate in f64 regardless of the element type; matrix products use
//! the kernels in [`crate::kernels`]. Every value is produced by exactly
//! one thread in a fixed order, so results do not depend on thread count.

use rayon::prelude::*;

use super::{Batch, FlatParams, Layout, ModelError};
use crate::kernels::{dot64, gemm_nn, gemm_nt, gemm_tn, Elem};
use crate::tasks::{TaskId, N_TASKS};

const LN_EPS: f64 = 1e-5;

/// Which task losses contribute to `loss_and_grads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSelector {
    /// Mean over the three task losses.
    All,
    /// One task's loss only.
    Single(TaskId),
}

impl TaskSelector {
    fn tasks(self) -> Vec<usize> {
        match self {
            TaskSelector::All => (0..N_TASKS).collect(),
            TaskSelector::Single(t) => vec![t.index()],
        }
    }
}

struct LayerBufs<E> {
    xhat1: Vec<E>,
    rstd1: Vec<f64>,
    a1: Vec<E>,
    q: Vec<E>,
    k: Vec<E>,
    v: Vec<E>,
    probs: Vec<f64>,
    mix: Vec<E>,
    x1: Vec<E>,
    xhat2: Vec<E>,
    rstd2: Vec<f64>,
    a2: Vec<E>,
    h_pre: Vec<E>,
    h_act: Vec<E>,
}

impl<E: Elem> LayerBufs<E> {
    fn new(t: usize, d: usize, dff: usize, heads: usize) -> Self {
        LayerBufs {
            xhat1: vec![E::zero(); t * d],
            rstd1: vec![0.0; t],
            a1: vec![E::zero(); t * d],
            q: vec![E::zero(); t * d],
            k: vec![E::zero(); t * d],
            v: vec![E::zero(); t * d],
            probs: vec![0.0; (t / 2) * heads * 4],
            mix: vec![E::zero(); t * d],
            x1: vec![E::zero(); t * d],
            xhat2: vec![E::zero(); t * d],
            rstd2: vec![0.0; t],
            a2: vec![E::zero(); t * d],
            h_pre: vec![E::zero(); t * dff],
            h_act: vec![E::zero(); t * dff],
        }
    }
}

/// Reusable activation and gradient buffers for batches up to a fixed size.
pub struct Workspace<E> {
    cap: usize,
    last_batch: usize,
    layers: Vec<LayerBufs<E>>,
    /// Layer inputs: xs[l] feeds layer l; xs[n_layers] is the trunk output.
    xs: Vec<Vec<E>>,
    xhat_f: Vec<E>,
    rstd_f: Vec<f64>,
    zf: Vec<E>,
    pooled: Vec<E>,
    logits: Vec<Vec<E>>,
    // backward scratch
    d_x: Vec<E>,
    d_x2: Vec<E>,
    d_q: Vec<E>,
    d_k: Vec<E>,
    d_v: Vec<E>,
    d_a: Vec<E>,
    d_mix: Vec<E>,
    d_h: Vec<E>,
    d_pooled: Vec<E>,
    d_logits: Vec<E>,
}

impl<E: Elem> Workspace<E> {
    pub fn new(cfg: &super::ModelConfig, max_batch: usize) -> Self {
        let t = 2 * max_batch;
        let (d, dff, p) = (cfg.d_model, cfg.d_ff, cfg.p);
        Workspace {
            cap: max_batch,
            last_batch: 0,
            layers: (0..cfg.n_layers)
                .map(|_| LayerBufs::new(t, d, dff, cfg.n_heads))
                .collect(),
            xs: (0..cfg.n_layers + 1).map(|_| vec![E::zero(); t * d]).collect(),
            xhat_f: vec![E::zero(); t * d],
            rstd_f: vec![0.0; t],
            zf: vec![E::zero(); t * d],
            pooled: vec![E::zero(); max_batch * d],
            logits: (0..cfg.n_tasks).map(|_| vec![E::zero(); max_batch * p]).collect(),
            d_x: vec![E::zero(); t * d],
            d_x2: vec![E::zero(); t * d],
            d_q: vec![E::zero(); t * d],
            d_k: vec![E::zero(); t * d],
            d_v: vec![E::zero(); t * d],
            d_a: vec![E::zero(); t * d],
            d_mix: vec![E::zero(); t * d],
            d_h: vec![E::zero(); t * dff],
            d_pooled: vec![E::zero(); max_batch * d],
            d_logits: vec![E::zero(); max_batch * p],
        }
    }

    /// Per-task logits of the most recent forward pass (batch-size rows).
    pub fn logits(&self, task: usize) -> &[E] {
        let p = self.logits[task].len() / self.cap;
        &self.logits[task][..self.last_batch * p]
    }
}

fn check_finite<E: Elem>(buf: &[E], what: &str) -> Result<(), ModelError> {
    if buf.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite(what.to_string()));
    }
    Ok(())
}

fn add_bias_rows<E: Elem>(out: &mut [E], bias: &[E], n: usize) {
    out.par_chunks_mut(n).for_each(|row| {
        for j in 0..n {
            row[j] = row[j] + bias[j];
        }
    });
}

/// y = gain * xhat + bias with xhat the per-row standardization of x.
fn ln_forward<E: Elem>(
    x: &[E],
    gain: &[E],
    bias: &[E],
    xhat: &mut [E],
    out: &mut [E],
    rstd: &mut [f64],
    d: usize,
) {
    xhat.par_chunks_mut(d)
        .zip(out.par_chunks_mut(d))
        .zip(rstd.par_iter_mut())
        .enumerate()
        .for_each(|(r, ((xh, o), rs))| {
            let xrow = &x[r * d..(r + 1) * d];
            let mut mean = 0.0f64;
            for &v in xrow {
                mean += v.f64();
            }
            mean /= d as f64;
            let mut var = 0.0f64;
            for &v in xrow {
                let c = v.f64() - mean;
                var += c * c;
            }
            var /= d as f64;
            let r_inv = 1.0 / (var + LN_EPS).sqrt();
            *rs = r_inv;
            for j in 0..d {
                let h = (xrow[j].f64() - mean) * r_inv;
                xh[j] = E::of(h);
                o[j] = E::of(h * gain[j].f64() + bias[j].f64());
            }
        });
}

/// Accumulates the input gradient into `dx` and the parameter gradients
/// into `dgain`/`dbias`.
fn ln_backward<E: Elem>(
    dy: &[E],
    xhat: &[E],
    rstd: &[f64],
    gain: &[E],
    dx: &mut [E],
    dgain: &mut [E],
    dbias: &mut [E],
    d: usize,
) {
    dx.par_chunks_mut(d).enumerate().for_each(|(r, dxrow)| {
        let dyrow = &dy[r * d..(r + 1) * d];
        let xhrow = &xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0f64;
        let mut m2 = 0.0f64;
        for j in 0..d {
            let dh = dyrow[j].f64() * gain[j].f64();
            m1 += dh;
            m2 += dh * xhrow[j].f64();
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let r_inv = rstd[r];
        for j in 0..d {
            let dh = dyrow[j].f64() * gain[j].f64();
            let add = r_inv * (dh - m1 - xhrow[j].f64() * m2);
            dxrow[j] = dxrow[j] + E::of(add);
        }
    });
    // Column reductions in f64, fixed row order.
    let rows = dy.len() / d;
    let mut g64 = vec![0.0f64; d];
    let mut b64 = vec![0.0f64; d];
    for r in 0..rows {
        let dyrow = &dy[r * d..(r + 1) * d];
        let xhrow = &xhat[r * d..(r + 1) * d];
        for j in 0..d {
            let dyv = dyrow[j].f64();
            g64[j] += dyv * xhrow[j].f64();
            b64[j] += dyv;
        }
    }
    for j in 0..d {
        dgain[j] = dgain[j] + E::of(g64[j]);
        dbias[j] = dbias[j] + E::of(b64[j]);
    }
}

fn colsum_into<E: Elem>(dy: &[E], n: usize, out: &mut [E]) {
    let mut acc = vec![0.0f64; n];
    for row in dy.chunks(n) {
        for j in 0..n {
            acc[j] += row[j].f64();
        }
    }
    for j in 0..n {
        out[j] = out[j] + E::of(acc[j]);
    }
}

/// Two-token scaled dot-product attention, one example per work item.
fn attention_forward<E: Elem>(
    q: &[E],
    k: &[E],
    v: &[E],
    mix: &mut [E],
    probs: &mut [f64],
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    mix.par_chunks_mut(2 * d)
        .zip(probs.par_chunks_mut(heads * 4))
        .enumerate()
        .for_each(|(i, (mrow, prow))| {
            let r0 = 2 * i * d;
            let r1 = r0 + d;
            for h in 0..heads {
                let hs = h * dh;
                let q0 = &q[r0 + hs..r0 + hs + dh];
                let q1 = &q[r1 + hs..r1 + hs + dh];
                let k0 = &k[r0 + hs..r0 + hs + dh];
                let k1 = &k[r1 + hs..r1 + hs + dh];
                let v0 = &v[r0 + hs..r0 + hs + dh];
                let v1 = &v[r1 + hs..r1 + hs + dh];
                let s00 = dot64(q0, k0) * scale;
                let s01 = dot64(q0, k1) * scale;
                let s10 = dot64(q1, k0) * scale;
                let s11 = dot64(q1, k1) * scale;
                let soft2 = |a: f64, b: f64| {
                    let m = a.max(b);
                    let ea = (a - m).exp();
                    let eb = (b - m).exp();
                    let z = ea + eb;
                    (ea / z, eb / z)
                };
                let (p00, p01) = soft2(s00, s01);
                let (p10, p11) = soft2(s10, s11);
                prow[h * 4] = p00;
                prow[h * 4 + 1] = p01;
                prow[h * 4 + 2] = p10;
                prow[h * 4 + 3] = p11;
                for j in 0..dh {
                    let v0j = v0[j].f64();
                    let v1j = v1[j].f64();
                    mrow[hs + j] = E::of(p00 * v0j + p01 * v1j);
                    mrow[d + hs + j] = E::of(p10 * v0j + p11 * v1j);
                }
            }
        });
}

/// Backward through attention: writes dq, dk, dv (all rows overwritten).
#[allow(clippy::too_many_arguments)]
fn attention_backward<E: Elem>(
    d_mix: &[E],
    q: &[E],
    k: &[E],
    v: &[E],
    probs: &[f64],
    d_q: &mut [E],
    d_k: &mut [E],
    d_v: &mut [E],
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    d_q.par_chunks_mut(2 * d)
        .zip(d_k.par_chunks_mut(2 * d))
        .zip(d_v.par_chunks_mut(2 * d))
        .enumerate()
        .for_each(|(i, ((dq, dk), dv))| {
            let r0 = 2 * i * d;
            let r1 = r0 + d;
            let prow = &probs[i * heads * 4..(i + 1) * heads * 4];
            for h in 0..heads {
                let hs = h * dh;
                let q0 = &q[r0 + hs..r0 + hs + dh];
                let q1 = &q[r1 + hs..r1 + hs + dh];
                let k0 = &k[r0 + hs..r0 + hs + dh];
                let k1 = &k[r1 + hs..r1 + hs + dh];
                let v0 = &v[r0 + hs..r0 + hs + dh];
                let v1 = &v[r1 + hs..r1 + hs + dh];
                let do0 = &d_mix[r0 + hs..r0 + hs + dh];
                let do1 = &d_mix[r1 + hs..r1 + hs + dh];
                let (p00, p01, p10, p11) = (
                    prow[h * 4],
                    prow[h * 4 + 1],
                    prow[h * 4 + 2],
                    prow[h * 4 + 3],
                );
                let dp00 = dot64(do0, v0);
                let dp01 = dot64(do0, v1);
                let dp10 = dot64(do1, v0);
                let dp11 = dot64(do1, v1);
                // softmax backward per row
                let g0 = p00 * dp00 + p01 * dp01;
                let ds00 = p00 * (dp00 - g0) * scale;
                let ds01 = p01 * (dp01 - g0) * scale;
                let g1 = p10 * dp10 + p11 * dp11;
                let ds10 = p10 * (dp10 - g1) * scale;
                let ds11 = p11 * (dp11 - g1) * scale;
                for j in 0..dh {
                    let do0j = do0[j].f64();
                    let do1j = do1[j].f64();
                    dv[hs + j] = E::of(p00 * do0j + p10 * do1j);
                    dv[d + hs + j] = E::of(p01 * do0j + p11 * do1j);
                    dq[hs + j] = E::of(ds00 * k0[j].f64() + ds01 * k1[j].f64());
                    dq[d + hs + j] = E::of(ds10 * k0[j].f64() + ds11 * k1[j].f64());
                    dk[hs + j] = E::of(ds00 * q0[j].f64() + ds10 * q1[j].f64());
                    dk[d + hs + j] = E::of(ds01 * q0[j].f64() + ds11 * q1[j].f64());
                }
            }
        });
}

/// Run the forward pass, leaving per-task logits in the workspace.
///
/// With `strict` set, every stage is checked for non-finite values and the
/// failing stage is named in the error; training leaves it off and relies
/// on the loss check.
pub fn logits_into<E: Elem>(
    params: &FlatParams<E>,
    batch: &Batch,
    ws: &mut Workspace<E>,
    strict: bool,
) -> Result<(), ModelError> {
    let cfg = &params.config;
    batch.validate(cfg)?;
    let b = batch.len();
    assert!(b <= ws.cap, "batch {} exceeds workspace capacity {}", b, ws.cap);
    ws.last_batch = b;
    let t = 2 * b;
    let (d, dff, p, heads) = (cfg.d_model, cfg.d_ff, cfg.p, cfg.n_heads);
    let layout = Layout::new(cfg);

    // Embedding: row 2i is token x at position 0, row 2i+1 token y at 1.
    {
        let tok = params.tensor(&layout, layout.idx_tok_emb());
        let pos = params.tensor(&layout, layout.idx_pos_emb());
        ws.xs[0][..t * d]
            .par_chunks_mut(2 * d)
            .zip(batch.pairs.par_iter())
            .for_each(|(rows, &(x, y))| {
                let ex = &tok[x as usize * d..(x as usize + 1) * d];
                let ey = &tok[y as usize * d..(y as usize + 1) * d];
                for j in 0..d {
                    rows[j] = ex[j] + pos[j];
                    rows[d + j] = ey[j] + pos[d + j];
                }
            });
        if strict {
            check_finite(&ws.xs[0][..t * d], "embedding")?;
        }
    }

    for l in 0..cfg.n_layers {
        let lb = layout.layer_base(l);
        let name = |s: &str| format!("layers.{l}.{s}");
        // Pre-norm attention.
        {
            let (xs_in, bufs) = (&ws.xs[l], &mut ws.layers[l]);
            ln_forward(
                &xs_in[..t * d],
                params.tensor(&layout, lb + 8),
                params.tensor(&layout, lb + 9),
                &mut bufs.xhat1[..t * d],
                &mut bufs.a1[..t * d],
                &mut bufs.rstd1[..t],
                d,
            );
            for (wi, bi, out) in [
                (lb, lb + 1, &mut bufs.q),
                (lb + 2, lb + 3, &mut bufs.k),
                (lb + 4, lb + 5, &mut bufs.v),
            ] {
                out[..t * d].fill(E::zero());
                gemm_nn(
                    &mut out[..t * d],
                    &bufs.a1[..t * d],
                    params.tensor(&layout, wi),
                    t,
                    d,
                    d,
                );
                add_bias_rows(&mut out[..t * d], params.tensor(&layout, bi), d);
            }
            attention_forward(
                &bufs.q[..t * d],
                &bufs.k[..t * d],
                &bufs.v[..t * d],
                &mut bufs.mix[..t * d],
                &mut bufs.probs[..b * heads * 4],
                d,
                heads,
            );
            bufs.x1[..t * d].copy_from_slice(&xs_in[..t * d]);
            gemm_nn(
                &mut bufs.x1[..t * d],
                &bufs.mix[..t * d],
                params.tensor(&layout, lb + 6),
                t,
                d,
                d,
            );
            add_bias_rows(&mut bufs.x1[..t * d], params.tensor(&layout, lb + 7), d);
            if strict {
                check_finite(&bufs.x1[..t * d], &name("attn"))?;
            }
        }
        // Pre-norm feed-forward.
        {
            let bufs = &mut ws.layers[l];
            ln_forward(
                &bufs.x1[..t * d],
                params.tensor(&layout, lb + 14),
                params.tensor(&layout, lb + 15),
                &mut bufs.xhat2[..t * d],
                &mut bufs.a2[..t * d],
                &mut bufs.rstd2[..t],
                d,
            );
            bufs.h_pre[..t * dff].fill(E::zero());
            gemm_nn(
                &mut bufs.h_pre[..t * dff],
                &bufs.a2[..t * d],
                params.tensor(&layout, lb + 10),
                t,
                d,
                dff,
            );
            add_bias_rows(&mut bufs.h_pre[..t * dff], params.tensor(&layout, lb + 11), dff);
            bufs.h_act[..t * dff]
                .par_iter_mut()
                .zip(bufs.h_pre[..t * dff].par_iter())
                .for_each(|(a, &h)| *a = h.max(E::zero()));
        }
        {
            let (bufs, xs_out) = {
                let (a, bb) = ws.xs.split_at_mut(l + 1);
                let _ = a;
                (&ws.layers[l], &mut bb[0])
            };
            xs_out[..t * d].copy_from_slice(&bufs.x1[..t * d]);
            gemm_nn(
                &mut xs_out[..t * d],
                &bufs.h_act[..t * dff],
                params.tensor(&layout, lb + 12),
                t,
                dff,
                d,
            );
            add_bias_rows(&mut xs_out[..t * d], params.tensor(&layout, lb + 13), d);
            if strict {
                check_finite(&xs_out[..t * d], &name("ffn"))?;
            }
        }
    }

    // Final layer norm, mean pooling, heads.
    let n_layers = cfg.n_layers;
    ln_forward(
        &ws.xs[n_layers][..t * d],
        params.tensor(&layout, layout.idx_final_gain()),
        params.tensor(&layout, layout.idx_final_bias()),
        &mut ws.xhat_f[..t * d],
        &mut ws.zf[..t * d],
        &mut ws.rstd_f[..t],
        d,
    );
    ws.pooled[..b * d]
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(i, prow)| {
            let z0 = &ws.zf[2 * i * d..(2 * i + 1) * d];
            let z1 = &ws.zf[(2 * i + 1) * d..(2 * i + 2) * d];
            for j in 0..d {
                prow[j] = E::of(0.5 * (z0[j].f64() + z1[j].f64()));
            }
        });
    for task in 0..cfg.n_tasks {
        ws.logits[task][..b * p].fill(E::zero());
        gemm_nn(
            &mut ws.logits[task][..b * p],
            &ws.pooled[..b * d],
            params.tensor(&layout, layout.idx_head_w(task)),
            b,
            d,
            p,
        );
        add_bias_rows(
            &mut ws.logits[task][..b * p],
            params.tensor(&layout, layout.idx_head_b(task)),
            p,
        );
        if strict {
            check_finite(&ws.logits[task][..b * p], &format!("heads.{task}"))?;
        }
    }
    if !strict {
        // Cheap last-line check so training catches divergence promptly.
        for task in 0..cfg.n_tasks {
            check_finite(&ws.logits[task][..b * p], &format!("heads.{task}"))?;
        }
    }
    Ok(())
}

/// Cross-entropy over one task's logits; returns the summed (unnormalized)
/// loss and writes `(softmax - onehot) * weight` into `dlogits`.
fn ce_and_dlogits<E: Elem>(
    logits: &[E],
    labels: &[u32],
    p: usize,
    weight: f64,
    dlogits: &mut [E],
) -> f64 {
    let mut row_losses = vec![0.0f64; labels.len()];
    dlogits
        .par_chunks_mut(p)
        .zip(logits.par_chunks(p))
        .zip(labels.par_iter())
        .zip(row_losses.par_iter_mut())
        .for_each(|(((drow, lrow), &label), loss)| {
            let mut m = f64::NEG_INFINITY;
            for &v in lrow {
                m = m.max(v.f64());
            }
            let mut z = 0.0f64;
            for &v in lrow {
                z += (v.f64() - m).exp();
            }
            let log_z = m + z.ln();
            *loss = log_z - lrow[label as usize].f64();
            for j in 0..p {
                let soft = (lrow[j].f64() - m).exp() / z;
                let onehot = if j == label as usize { 1.0 } else { 0.0 };
                drow[j] = E::of((soft - onehot) * weight);
            }
        });
    row_losses.iter().sum()
}

/// Mean loss over the selected task(s) and its exact analytic gradient.
///
/// The gradient has the same flat layout as the parameters; it is zeroed
/// first. Returns the loss.
pub fn loss_and_grads<E: Elem>(
    params: &FlatParams<E>,
    batch: &Batch,
    ws: &mut Workspace<E>,
    grads: &mut FlatParams<E>,
    select: TaskSelector,
) -> Result<f64, ModelError> {
    logits_into(params, batch, ws, false)?;
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    let b = batch.len();
    let t = 2 * b;
    let (d, dff, p, heads) = (cfg.d_model, cfg.d_ff, cfg.p, cfg.n_heads);
    grads.fill_zero();

    let tasks = select.tasks();
    let weight = 1.0 / (b as f64 * tasks.len() as f64);
    let mut loss = 0.0f64;
    ws.d_pooled[..b * d].fill(E::zero());
    for &task in &tasks {
        loss += weight
            * ce_and_dlogits(
                &ws.logits[task][..b * p],
                batch.labels[task],
                p,
                weight,
                &mut ws.d_logits[..b * p],
            );
        // Head gradients and pooled gradient.
        gemm_tn(
            grads.tensor_mut(&layout, layout.idx_head_w(task)),
            &ws.pooled[..b * d],
            &ws.d_logits[..b * p],
            d,
            b,
            p,
        );
        colsum_into(
            &ws.d_logits[..b * p],
            p,
            grads.tensor_mut(&layout, layout.idx_head_b(task)),
        );
        gemm_nt(
            &mut ws.d_pooled[..b * d],
            &ws.d_logits[..b * p],
            params.tensor(&layout, layout.idx_head_w(task)),
            b,
            p,
            d,
        );
    }
    if !loss.is_finite() {
        return Err(ModelError::NonFinite("loss".into()));
    }

    // Pooling backward: each of the two positions gets half.
    ws.d_x[..t * d]
        .par_chunks_mut(2 * d)
        .zip(ws.d_pooled[..b * d].par_chunks(d))
        .for_each(|(rows, prow)| {
            for j in 0..d {
                let half = E::of(0.5 * prow[j].f64());
                rows[j] = half;
                rows[d + j] = half;
            }
        });

    // Final layer norm backward into d_x2 (gradient at trunk output).
    ws.d_x2[..t * d].fill(E::zero());
    {
        let fg = layout.idx_final_gain();
        let fb = layout.idx_final_bias();
        let (ga, gb) = split_two(&mut grads.data, &layout, fg, fb);
        ln_backward(
            &ws.d_x[..t * d],
            &ws.xhat_f[..t * d],
            &ws.rstd_f[..t],
            params.tensor(&layout, fg),
            &mut ws.d_x2[..t * d],
            ga,
            gb,
            d,
        );
    }

    for l in (0..cfg.n_layers).rev() {
        let lb = layout.layer_base(l);
        let bufs = &ws.layers[l];
        // d_x2 holds the gradient at this layer's output.
        // FFN backward.
        ws.d_h[..t * dff].fill(E::zero());
        gemm_nt(
            &mut ws.d_h[..t * dff],
            &ws.d_x2[..t * d],
            params.tensor(&layout, lb + 12),
            t,
            d,
            dff,
        );
        gemm_tn(
            grads.tensor_mut(&layout, lb + 12),
            &bufs.h_act[..t * dff],
            &ws.d_x2[..t * d],
            dff,
            t,
            d,
        );
        colsum_into(&ws.d_x2[..t * d], d, grads.tensor_mut(&layout, lb + 13));
        ws.d_h[..t * dff]
            .par_iter_mut()
            .zip(bufs.h_pre[..t * dff].par_iter())
            .for_each(|(g, &h)| {
                if h <= E::zero() {
                    *g = E::zero();
                }
            });
        gemm_tn(
            grads.tensor_mut(&layout, lb + 10),
            &bufs.a2[..t * d],
            &ws.d_h[..t * dff],
            d,
            t,
            dff,
        );
        colsum_into(&ws.d_h[..t * dff], dff, grads.tensor_mut(&layout, lb + 11));
        ws.d_a[..t * d].fill(E::zero());
        gemm_nt(
            &mut ws.d_a[..t * d],
            &ws.d_h[..t * dff],
            params.tensor(&layout, lb + 10),
            t,
            dff,
            d,
        );
        // dx1 = upstream + LN2 backward contribution.
        let (d_x, d_x2) = (&mut ws.d_x, &mut ws.d_x2);
        d_x[..t * d].copy_from_slice(&d_x2[..t * d]);
        {
            let (gg, gb) = split_two(&mut grads.data, &layout, lb + 14, lb + 15);
            ln_backward(
                &ws.d_a[..t * d],
                &bufs.xhat2[..t * d],
                &bufs.rstd2[..t],
                params.tensor(&layout, lb + 14),
                &mut d_x[..t * d],
                gg,
                gb,
                d,
            );
        }
        // Attention backward. d_x holds the gradient at x1.
        colsum_into(&d_x[..t * d], d, grads.tensor_mut(&layout, lb + 7));
        ws.d_mix[..t * d].fill(E::zero());
        gemm_nt(
            &mut ws.d_mix[..t * d],
            &d_x[..t * d],
            params.tensor(&layout, lb + 6),
            t,
            d,
            d,
        );
        gemm_tn(
            grads.tensor_mut(&layout, lb + 6),
            &bufs.mix[..t * d],
            &d_x[..t * d],
            d,
            t,
            d,
        );
        attention_backward(
            &ws.d_mix[..t * d],
            &bufs.q[..t * d],
            &bufs.k[..t * d],
            &bufs.v[..t * d],
            &bufs.probs[..b * heads * 4],
            &mut ws.d_q[..t * d],
            &mut ws.d_k[..t * d],
            &mut ws.d_v[..t * d],
            d,
            heads,
        );
        ws.d_a[..t * d].fill(E::zero());
        for (wi, bi, dsrc) in [
            (lb, lb + 1, &ws.d_q),
            (lb + 2, lb + 3, &ws.d_k),
            (lb + 4, lb + 5, &ws.d_v),
        ] {
            gemm_tn(
                grads.tensor_mut(&layout, wi),
                &bufs.a1[..t * d],
                &dsrc[..t * d],
                d,
                t,
                d,
            );
            colsum_into(&dsrc[..t * d], d, grads.tensor_mut(&layout, bi));
            gemm_nt(
                &mut ws.d_a[..t * d],
                &dsrc[..t * d],
                params.tensor(&layout, wi),
                t,
                d,
                d,
            );
        }
        // dx0 = dx1 + LN1 backward contribution; store into d_x2 for the
        // next (earlier) layer.
        d_x2[..t * d].copy_from_slice(&d_x[..t * d]);
        {
            let (gg, gb) = split_two(&mut grads.data, &layout, lb + 8, lb + 9);
            ln_backward(
                &ws.d_a[..t * d],
                &bufs.xhat1[..t * d],
                &bufs.rstd1[..t],
                params.tensor(&layout, lb + 8),
                &mut d_x2[..t * d],
                gg,
                gb,
                d,
            );
        }
    }

    // Embedding backward (sequential scatter, f64 accumulators).
    {
        let tok_meta = &layout.entries[layout.idx_tok_emb()];
        let pos_meta = &layout.entries[layout.idx_pos_emb()];
        let mut tok64 = vec![0.0f64; tok_meta.len];
        let mut pos64 = vec![0.0f64; pos_meta.len];
        for (i, &(x, y)) in batch.pairs.iter().enumerate() {
            let r0 = 2 * i * d;
            for j in 0..d {
                let g0 = ws.d_x2[r0 + j].f64();
                let g1 = ws.d_x2[r0 + d + j].f64();
                tok64[x as usize * d + j] += g0;
                tok64[y as usize * d + j] += g1;
                pos64[j] += g0;
                pos64[d + j] += g1;
            }
        }
        let gtok = grads.tensor_mut(&layout, layout.idx_tok_emb());
        for (g, &v) in gtok.iter_mut().zip(tok64.iter()) {
            *g = E::of(v);
        }
        let gpos = grads.tensor_mut(&layout, layout.idx_pos_emb());
        for (g, &v) in gpos.iter_mut().zip(pos64.iter()) {
            *g = E::of(v);
        }
    }

    Ok(loss)
}

/// Split two disjoint tensor slices out of the flat gradient buffer.
fn split_two<'a, E>(
    data: &'a mut [E],
    layout: &Layout,
    first: usize,
    second: usize,
) -> (&'a mut [E], &'a mut [E]) {
    let a = layout.entries[first].span();
    let b = layout.entries[second].span();
    assert!(a.end <= b.start, "tensor spans must be ordered and disjoint");
    let (head, tail) = data.split_at_mut(b.start);
    (&mut head[a.start..a.end], &mut tail[..b.end - b.start])
}

/// Per-task evaluation results over a dataset.
#[derive(Debug, Clone, Copy)]
pub struct EvalResult {
    /// Exact-match fraction per task.
    pub accuracy: [f64; N_TASKS],
    /// Mean cross-entropy per task.
    pub loss: [f64; N_TASKS],
}

impl EvalResult {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / N_TASKS as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss.iter().sum::<f64>() / N_TASKS as f64
    }
}

pub(crate) fn row_argmax<E: Elem>(row: &[E]) -> usize {
    let mut best = 0usize;
    let mut bestv = row[0].f64();
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v.f64() > bestv {
            bestv = v.f64();
            best = j;
        }
    }
    best
}

/// Compare the analytic gradient against central finite differences on a
/// seeded model and batch, over `n_coords` sampled coordinates. Returns the
/// maximum relative error.
pub fn finite_diff_check(
    cfg: &super::ModelConfig,
    init_seed: u64,
    batch_size: usize,
    n_coords: usize,
    step: f64,
    coord_seed: u64,
) -> Result<f64, ModelError> {
    use crate::rng::SplitMix64;
    let mut params = super::init(cfg, init_seed)?;
    let (train, _) = crate::tasks::generate(cfg.p as u32, coord_seed)
        .map_err(|e| ModelError::BadBatch(e.to_string()))?;
    let n = batch_size.min(train.len());
    let batch = Batch::from(&train).slice(0..n);
    let mut ws = Workspace::<f64>::new(cfg, n);
    let mut grads = FlatParams::<f64>::zeros(cfg);
    loss_and_grads(&params, &batch, &mut ws, &mut grads, TaskSelector::All)?;
    let analytic = grads.data.clone();
    let mut scratch = FlatParams::<f64>::zeros(cfg);
    let mut rng = SplitMix64::new(coord_seed ^ 0xC0FFEE);
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let i = rng.next_below(params.data.len() as u64) as usize;
        let orig = params.data[i];
        params.data[i] = orig + step;
        let lp = loss_and_grads(&params, &batch, &mut ws, &mut scratch, TaskSelector::All)?;
        params.data[i] = orig - step;
        let lm = loss_and_grads(&params, &batch, &mut ws, &mut scratch, TaskSelector::All)?;
        params.data[i] = orig;
        let fd = (lp - lm) / (2.0 * step);
        let g = analytic[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Argmax accuracy and mean cross-entropy per task, streamed in chunks so
/// evaluation never needs training-sized buffers.
pub fn accuracy_and_loss<E: Elem>(
    params: &FlatParams<E>,
    dataset: &crate::tasks::Dataset,
    ws: &mut Workspace<E>,
) -> Result<EvalResult, ModelError> {
    let batch: Batch = dataset.into();
    let p = params.config.p;
    let chunk = ws.cap;
    let mut correct = [0usize; N_TASKS];
    let mut loss_sum = [0.0f64; N_TASKS];
    let mut start = 0usize;
    while start < batch.len() {
        let end = (start + chunk).min(batch.len());
        let part = batch.slice(start..end);
        logits_into(params, &part, ws, true)?;
        for t in 0..N_TASKS {
            let logits = ws.logits(t);
            let labels = part.labels[t];
            let counts: Vec<(bool, f64)> = logits
                .par_chunks(p)
                .zip(labels.par_iter())
                .map(|(row, &label)| {
                    let best = row_argmax(row);
                    let m = row[best].f64();
                    let mut z = 0.0f64;
                    for &v in row {
                        z += (v.f64() - m).exp();
                    }
                    let ce = m + z.ln() - row[label as usize].f64();
                    (best == label as usize, ce)
                })
                .collect();
            for (ok, ce) in counts {
                if ok {
                    correct[t] += 1;
                }
                loss_sum[t] += ce;
            }
        }
        start = end;
    }
    let n = batch.len() as f64;
    Ok(EvalResult {
        accuracy: [
            correct[0] as f64 / n,
            correct[1] as f64 / n,
            correct[2] as f64 / n,
        ],
        loss: [loss_sum[0] / n, loss_sum[1] / n, loss_sum[2] / n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, FlatParams, Layout, ModelConfig, TensorKind};
    use crate::tasks::generate;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            p: 7,
            n_tasks: 3,
        }
    }

    /// Zero parameters with layer-norm gains set to one.
    fn zeros_unit_gains(cfg: &ModelConfig) -> FlatParams<f64> {
        let layout = Layout::new(cfg);
        let mut p = FlatParams::<f64>::zeros(cfg);
        for (i, e) in layout.entries.iter().enumerate() {
            if e.kind == TensorKind::Gain {
                p.tensor_mut(&layout, i).fill(1.0);
            }
        }
        p
    }

    #[test]
    fn gradients_match_finite_differences() {
        let max_rel = finite_diff_check(&tiny_cfg(), 3, 16, 200, 1e-4, 18).unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn uniform_logits_loss_is_ln_p() {
        let cfg = tiny_cfg();
        let params = zeros_unit_gains(&cfg);
        let (train, _) = generate(7, 1).unwrap();
        let batch = Batch::from(&train).slice(0..8);
        let mut ws = Workspace::<f64>::new(&cfg, 8);
        let mut grads = FlatParams::<f64>::zeros(&cfg);
        let loss = loss_and_grads(&params, &batch, &mut ws, &mut grads, TaskSelector::All).unwrap();
        assert!((loss - (7.0f64).ln()).abs() < 1e-12, "loss {loss}");

        // Same property at the production modulus.
        let cfg97 = ModelConfig::BASELINE;
        let params97 = zeros_unit_gains(&cfg97);
        let (train97, _) = generate(97, 1).unwrap();
        let batch97 = Batch::from(&train97).slice(0..4);
        let mut ws97 = Workspace::<f64>::new(&cfg97, 4);
        let mut grads97 = FlatParams::<f64>::zeros(&cfg97);
        let loss97 =
            loss_and_grads(&params97, &batch97, &mut ws97, &mut grads97, TaskSelector::All)
                .unwrap();
        assert!((loss97 - (97.0f64).ln()).abs() < 1e-12, "loss {loss97}");
    }

    #[test]
    fn zeroed_trunk_gives_bias_only_logits() {
        let cfg = tiny_cfg();
        let layout = Layout::new(&cfg);
        let mut params = zeros_unit_gains(&cfg);
        // Give each head a distinctive bias row.
        for t in 0..3 {
            let b = params.tensor_mut(&layout, layout.idx_head_b(t));
            for (j, v) in b.iter_mut().enumerate() {
                *v = (t + 1) as f64 * 0.1 + j as f64;
            }
        }
        let (train, _) = generate(7, 1).unwrap();
        let batch = Batch::from(&train).slice(0..6);
        let mut ws = Workspace::<f64>::new(&cfg, 6);
        logits_into(&params, &batch, &mut ws, true).unwrap();
        for t in 0..3 {
            let logits = ws.logits(t);
            let bias = params.tensor(&layout, layout.idx_head_b(t));
            for row in logits.chunks(cfg.p) {
                for j in 0..cfg.p {
                    assert!((row[j] - bias[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 5).unwrap();
        let (train, _) = generate(7, 2).unwrap();
        let batch = Batch::from(&train).slice(0..10);
        let mut ws = Workspace::<f64>::new(&cfg, 10);
        logits_into(&params, &batch, &mut ws, true).unwrap();
        let direct: Vec<Vec<f64>> = (0..3).map(|t| ws.logits(t).to_vec()).collect();

        // Reverse the batch.
        let pairs: Vec<(u32, u32)> = batch.pairs.iter().rev().copied().collect();
        let labels: Vec<Vec<u32>> = (0..3)
            .map(|t| batch.labels[t].iter().rev().copied().collect())
            .collect();
        let rev = Batch {
            pairs: &pairs,
            labels: [&labels[0], &labels[1], &labels[2]],
        };
        logits_into(&params, &rev, &mut ws, true).unwrap();
        for t in 0..3 {
            let got = ws.logits(t);
            let n = batch.len();
            for i in 0..n {
                let want = &direct[t][(n - 1 - i) * cfg.p..(n - i) * cfg.p];
                assert_eq!(&got[i * cfg.p..(i + 1) * cfg.p], want);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 9).unwrap();
        let (train, _) = generate(7, 3).unwrap();
        let batch = Batch::from(&train);
        let mut ws = Workspace::<f64>::new(&cfg, batch.len());
        let mut grads_a = FlatParams::<f64>::zeros(&cfg);
        let la = loss_and_grads(&params, &batch, &mut ws, &mut grads_a, TaskSelector::All).unwrap();
        let mut grads_b = FlatParams::<f64>::zeros(&cfg);
        let lb = loss_and_grads(&params, &batch, &mut ws, &mut grads_b, TaskSelector::All).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(grads_a.data, grads_b.data);
    }

    #[test]
    fn zero_gain_layer_is_identity() {
        // A 2-layer model with the second layer's norm gains zeroed must
        // compute exactly what the 1-layer model computes.
        let cfg2 = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            p: 7,
            n_tasks: 3,
        };
        let cfg1 = ModelConfig { n_layers: 1, ..cfg2 };
        let lay2 = Layout::new(&cfg2);
        let lay1 = Layout::new(&cfg1);
        let mut params2 = init(&cfg2, 21).unwrap();
        let lb = lay2.layer_base(1);
        params2.tensor_mut(&lay2, lb + 8).fill(0.0); // ln1.gain
        params2.tensor_mut(&lay2, lb + 14).fill(0.0); // ln2.gain

        // Copy everything except layer 1 into the 1-layer model.
        let mut params1 = FlatParams::<f64>::zeros(&cfg1);
        for name in lay1.entries.iter().map(|e| e.name.clone()) {
            let src = lay2.span_of(&name).unwrap();
            let dst = lay1.span_of(&name).unwrap();
            params1.data[dst.start..dst.end].copy_from_slice(&params2.data[src.start..src.end]);
        }

        let (train, _) = generate(7, 4).unwrap();
        let batch = Batch::from(&train).slice(0..12);
        let mut ws2 = Workspace::<f64>::new(&cfg2, 12);
        let mut ws1 = Workspace::<f64>::new(&cfg1, 12);
        logits_into(&params2, &batch, &mut ws2, true).unwrap();
        logits_into(&params1, &batch, &mut ws1, true).unwrap();
        for t in 0..3 {
            assert_eq!(ws2.logits(t), ws1.logits(t));
        }
    }

    #[test]
    fn symmetric_saddle_has_zero_norm_gradients() {
        let cfg = tiny_cfg();
        let layout = Layout::new(&cfg);
        let params = zeros_unit_gains(&cfg);
        // One example per class, labels uniform across classes for every
        // task: the batch-summed softmax gradient cancels exactly.
        let pairs: Vec<(u32, u32)> = (0..7).map(|i| (i, (i + 1) % 7)).collect();
        let uniform: Vec<u32> = (0..7).collect();
        let batch = Batch {
            pairs: &pairs,
            labels: [&uniform, &uniform, &uniform],
        };
        let mut ws = Workspace::<f64>::new(&cfg, 7);
        let mut grads = FlatParams::<f64>::zeros(&cfg);
        loss_and_grads(&params, &batch, &mut ws, &mut grads, TaskSelector::All).unwrap();
        // Layer-norm inputs are constant rows, so xhat = 0 and gain
        // gradients vanish identically.
        let g_gain = grads.tensor(&layout, layout.idx_final_gain());
        assert!(g_gain.iter().all(|&g| g == 0.0));
        // Uniform labels cancel the bias gradients.
        let g_bias = grads.tensor(&layout, layout.idx_final_bias());
        assert!(g_bias.iter().all(|&g| g.abs() < 1e-12));
        for t in 0..3 {
            let hb = grads.tensor(&layout, layout.idx_head_b(t));
            assert!(hb.iter().all(|&g| g.abs() < 1e-12));
        }
    }

    #[test]
    fn untrained_accuracy_is_chance_level() {
        let cfg = ModelConfig::BASELINE;
        let params = init(&cfg, 1).unwrap();
        let (_, test) = generate(97, 7).unwrap();
        let mut ws = Workspace::<f64>::new(&cfg, 2048);
        let r = accuracy_and_loss(&params, &test, &mut ws).unwrap();
        for t in 0..3 {
            assert!(
                r.accuracy[t] > 0.003 && r.accuracy[t] < 0.03,
                "task {t} accuracy {}",
                r.accuracy[t]
            );
        }
    }

    #[test]
    fn lookup_oracle_scores_perfectly() {
        // Inject one-hot labels as logits and check the argmax path.
        let p = 7usize;
        let labels: Vec<u32> = vec![3, 0, 6, 1, 1, 5];
        let mut logits = vec![0.0f64; labels.len() * p];
        for (i, &l) in labels.iter().enumerate() {
            logits[i * p + l as usize] = 1.0;
        }
        let correct = logits
            .chunks(p)
            .zip(labels.iter())
            .filter(|(row, &l)| row_argmax(row) == l as usize)
            .count();
        assert_eq!(correct, labels.len());
    }

    #[test]
    fn task_selector_single_zeroes_other_heads() {
        let cfg = tiny_cfg();
        let layout = Layout::new(&cfg);
        let params = init(&cfg, 8).unwrap();
        let (train, _) = generate(7, 5).unwrap();
        let batch = Batch::from(&train).slice(0..9);
        let mut ws = Workspace::<f64>::new(&cfg, 9);
        let mut grads = FlatParams::<f64>::zeros(&cfg);
        loss_and_grads(
            &params,
            &batch,
            &mut ws,
            &mut grads,
            TaskSelector::Single(crate::tasks::TaskId::Mul),
        )
        .unwrap();
        for t in [0usize, 2] {
            assert!(grads
                .tensor(&layout, layout.idx_head_w(t))
                .iter()
                .all(|&g| g == 0.0));
            assert!(grads
                .tensor(&layout, layout.idx_head_b(t))
                .iter()
                .all(|&g| g == 0.0));
        }
        assert!(grads
            .tensor(&layout, layout.idx_head_w(1))
            .iter()
            .any(|&g| g != 0.0));
    }
}
