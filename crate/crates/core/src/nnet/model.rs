//! Forward and exact reverse-mode passes.
//!
//! Row-vector convention throughout: activations are [rows, cols] in
//! row-major Vec<f64>, linear layers compute y = x·W + b with W [in, out].
//! The forward pass records every intermediate needed for an exact
//! backward pass on a Tape.

use crate::error::{Error, Result};
use crate::raster::TileRaster;

use super::params::{BlockParams, HeadParams, Params, ViTConfig};
use super::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// --- dense kernels ------------------------------------------------------

/// out[m,n] = a[m,k] · b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// out[m,n] = a[m,k] · b[n,k]ᵀ  (b stored row-major [n,k])
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            *o = acc;
        }
    }
    out
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn linear(x: &[f64], w: &Tensor, b: &Tensor, rows: usize) -> Vec<f64> {
    let (din, dout) = (w.dims()[0], w.dims()[1]);
    debug_assert_eq!(x.len(), rows * din);
    let mut y = mm(x, w.data(), rows, din, dout);
    for row in y.chunks_exact_mut(dout) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    y
}

/// Backward of `linear`: accumulates dw/db, returns dx.
fn linear_bwd(
    x: &[f64],
    w: &Tensor,
    dy: &[f64],
    rows: usize,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let (din, dout) = (w.dims()[0], w.dims()[1]);
    mm_tn_acc(x, dy, rows, din, dout, dw.data_mut());
    for row in dy.chunks_exact(dout) {
        for (g, v) in db.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    mm_nt(dy, w.data(), rows, dout, din)
}

// --- layer norm ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LnTape {
    /// Input rows [rows, d].
    x: Vec<f64>,
    /// Normalized rows before gain/bias.
    xhat: Vec<f64>,
    /// 1/sqrt(var + eps) per row.
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &Tensor, b: &Tensor, rows: usize) -> (Vec<f64>, LnTape) {
    let d = g.len();
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    let mut y = vec![0.0; rows * d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mu = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = inv;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (xr[j] - mu) * inv;
            yr[j] = xh[j] * g.data()[j] + b.data()[j];
        }
    }
    (y, LnTape { x: x.to_vec(), xhat, inv_std })
}

fn layer_norm_bwd(
    tape: &LnTape,
    g: &Tensor,
    dy: &[f64],
    dg: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let d = g.len();
    let rows = tape.inv_std.len();
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &tape.xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            dg.data_mut()[j] += dyr[j] * xh[j];
            db.data_mut()[j] += dyr[j];
            let dxh = dyr[j] * g.data()[j];
            m1 += dxh;
            m2 += dxh * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let inv = tape.inv_std[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let dxh = dyr[j] * g.data()[j];
            dxr[j] = inv * (dxh - m1 - xh[j] * m2);
        }
    }
    dx
}

// --- transformer block ---------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTape {
    ln1: LnTape,
    /// LN1 output [S, D] (input to the qkv projection).
    h1: Vec<f64>,
    /// Packed q|k|v [S, 3D].
    qkv: Vec<f64>,
    /// Softmax attention maps, heads × S × S.
    attn: Vec<f64>,
    /// Concatenated per-head context [S, D].
    ctx: Vec<f64>,
    ln2: LnTape,
    /// LN2 output [S, D].
    h2: Vec<f64>,
    /// Pre-GELU MLP activations [S, H].
    mlp_u: Vec<f64>,
    /// Post-GELU MLP activations [S, H].
    mlp_a: Vec<f64>,
}

fn block_forward(blk: &BlockParams, x: &[f64], cfg: &ViTConfig) -> (Vec<f64>, BlockTape) {
    let s = cfg.seq_len();
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let (h1, ln1) = layer_norm(x, &blk.ln1_g, &blk.ln1_b, s);
    let qkv = linear(&h1, &blk.qkv_w, &blk.qkv_b, s);

    let mut attn = vec![0.0; cfg.heads * s * s];
    let mut ctx = vec![0.0; s * d];
    for h in 0..cfg.heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        let amap = &mut attn[h * s * s..(h + 1) * s * s];
        for i in 0..s {
            let qi = &qkv[i * 3 * d + qo..i * 3 * d + qo + hd];
            let arow = &mut amap[i * s..(i + 1) * s];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..s {
                let kj = &qkv[j * 3 * d + ko..j * 3 * d + ko + hd];
                let mut acc = 0.0;
                for p in 0..hd {
                    acc += qi[p] * kj[p];
                }
                arow[j] = acc * scale;
                mx = mx.max(arow[j]);
            }
            let mut z = 0.0;
            for a in arow.iter_mut() {
                *a = (*a - mx).exp();
                z += *a;
            }
            for a in arow.iter_mut() {
                *a /= z;
            }
            let crow = &mut ctx[i * d + h * hd..i * d + h * hd + hd];
            for j in 0..s {
                let vj = &qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                let a = arow[j];
                for p in 0..hd {
                    crow[p] += a * vj[p];
                }
            }
        }
    }

    let o = linear(&ctx, &blk.proj_w, &blk.proj_b, s);
    let x_mid: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();

    let (h2, ln2) = layer_norm(&x_mid, &blk.ln2_g, &blk.ln2_b, s);
    let mlp_u = linear(&h2, &blk.fc1_w, &blk.fc1_b, s);
    let mlp_a: Vec<f64> = mlp_u.iter().map(|&v| gelu(v)).collect();
    let m = linear(&mlp_a, &blk.fc2_w, &blk.fc2_b, s);
    let x_out: Vec<f64> = x_mid.iter().zip(&m).map(|(a, b)| a + b).collect();

    let tape = BlockTape { ln1, h1, qkv, attn, ctx, ln2, h2, mlp_u, mlp_a };
    (x_out, tape)
}

fn block_backward(
    blk: &BlockParams,
    tape: &BlockTape,
    dx_out: &[f64],
    cfg: &ViTConfig,
    g: &mut BlockParams,
) -> Vec<f64> {
    let s = cfg.seq_len();
    let d = cfg.embed_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // MLP branch.
    let da: Vec<f64> = linear_bwd(&tape.mlp_a, &blk.fc2_w, dx_out, s, &mut g.fc2_w, &mut g.fc2_b);
    let du: Vec<f64> = da
        .iter()
        .zip(&tape.mlp_u)
        .map(|(dv, &u)| dv * gelu_prime(u))
        .collect();
    let dh2 = linear_bwd(&tape.h2, &blk.fc1_w, &du, s, &mut g.fc1_w, &mut g.fc1_b);
    let dx_ln2 = layer_norm_bwd(&tape.ln2, &blk.ln2_g, &dh2, &mut g.ln2_g, &mut g.ln2_b);
    let dx_mid: Vec<f64> = dx_out.iter().zip(&dx_ln2).map(|(a, b)| a + b).collect();

    // Attention branch.
    let dctx = linear_bwd(&tape.ctx, &blk.proj_w, &dx_mid, s, &mut g.proj_w, &mut g.proj_b);
    let mut dqkv = vec![0.0; s * 3 * d];
    for h in 0..cfg.heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        let amap = &tape.attn[h * s * s..(h + 1) * s * s];
        for i in 0..s {
            let arow = &amap[i * s..(i + 1) * s];
            let dcrow = &dctx[i * d + h * hd..i * d + h * hd + hd];
            // dA[i,j] = dctx_i · v_j ; dV_j += A[i,j]·dctx_i
            let mut darow = vec![0.0; s];
            for j in 0..s {
                let vj = &tape.qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                let mut acc = 0.0;
                for p in 0..hd {
                    acc += dcrow[p] * vj[p];
                }
                darow[j] = acc;
                let dvj = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                let a = arow[j];
                for p in 0..hd {
                    dvj[p] += a * dcrow[p];
                }
            }
            // Softmax backward on the row, then into q and k.
            let dot: f64 = darow.iter().zip(arow).map(|(x, y)| x * y).sum();
            let qi = &tape.qkv[i * 3 * d + qo..i * 3 * d + qo + hd];
            let mut dqi = vec![0.0; hd];
            for j in 0..s {
                let ds = arow[j] * (darow[j] - dot) * scale;
                let kj = &tape.qkv[j * 3 * d + ko..j * 3 * d + ko + hd];
                for p in 0..hd {
                    dqi[p] += ds * kj[p];
                }
                let dkj = &mut dqkv[j * 3 * d + ko..j * 3 * d + ko + hd];
                for p in 0..hd {
                    dkj[p] += ds * qi[p];
                }
            }
            let dq = &mut dqkv[i * 3 * d + qo..i * 3 * d + qo + hd];
            for p in 0..hd {
                dq[p] += dqi[p];
            }
        }
    }
    let dh1 = linear_bwd(&tape.h1, &blk.qkv_w, &dqkv, s, &mut g.qkv_w, &mut g.qkv_b);
    let dx_ln1 = layer_norm_bwd(&tape.ln1, &blk.ln1_g, &dh1, &mut g.ln1_g, &mut g.ln1_b);
    dx_mid.iter().zip(&dx_ln1).map(|(a, b)| a + b).collect()
}

// --- full model ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    cfg: ViTConfig,
    /// Patch matrix [n_patches, patch_dim].
    patches: Vec<f64>,
    blocks: Vec<BlockTape>,
    ln_f: LnTape,
    cls_out: Vec<f64>,
}

impl Tape {
    pub fn cfg(&self) -> &ViTConfig {
        &self.cfg
    }

    /// Attention maps of one block, heads × S × S (for inspection).
    pub fn attention(&self, block: usize) -> &[f64] {
        &self.blocks[block].attn
    }
}

/// Fixed input standardization: unit-interval pixels map to
/// (x − PIXEL_MEAN) / PIXEL_STD before the patch projection. Without it
/// the shared positive mean dominates every patch feature at init and
/// the CLS output is nearly input-independent, which stalls distillation.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Row-major patch matrix; within a patch, pixels row-major × RGB.
fn patchify(tile: &TileRaster, cfg: &ViTConfig) -> Vec<f64> {
    let ppx = cfg.patch_px;
    let grid = cfg.image_px / ppx;
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; cfg.n_patches() * pd];
    let data = tile.data();
    let w = cfg.image_px;
    for gy in 0..grid {
        for gx in 0..grid {
            let dst = &mut out[(gy * grid + gx) * pd..(gy * grid + gx + 1) * pd];
            for yy in 0..ppx {
                let src = ((gy * ppx + yy) * w + gx * ppx) * 3;
                let row = &data[src..src + ppx * 3];
                for (d, v) in dst[yy * ppx * 3..(yy + 1) * ppx * 3].iter_mut().zip(row) {
                    *d = (v - PIXEL_MEAN) / PIXEL_STD;
                }
            }
        }
    }
    out
}

/// CLS embedding of one tile plus the tape for the reverse pass.
pub fn forward(params: &Params, tile: &TileRaster) -> Result<(Vec<f64>, Tape)> {
    let cfg = params.cfg;
    if tile.px() != cfg.image_px {
        return Err(Error::Domain(format!(
            "tile is {}px, model expects {}px",
            tile.px(),
            cfg.image_px
        )));
    }
    let s = cfg.seq_len();
    let d = cfg.embed_dim;
    let patches = patchify(tile, &cfg);
    let mut emb = linear(&patches, &params.patch_w, &params.patch_b, cfg.n_patches());
    for (row, pos) in emb.chunks_exact_mut(d).zip(params.pos.data().chunks_exact(d)) {
        for (v, p) in row.iter_mut().zip(pos) {
            *v += p;
        }
    }
    let mut x = vec![0.0; s * d];
    x[..d].copy_from_slice(params.cls.data());
    x[d..d * (1 + cfg.n_registers)].copy_from_slice(params.reg.data());
    x[d * (1 + cfg.n_registers)..].copy_from_slice(&emb);

    let mut blocks = Vec::with_capacity(cfg.depth);
    for blk in &params.blocks {
        let (nx, tape) = block_forward(blk, &x, &cfg);
        x = nx;
        blocks.push(tape);
    }
    let (y, ln_f) = layer_norm(&x, &params.ln_f_g, &params.ln_f_b, s);
    let cls_out = y[..d].to_vec();
    Ok((cls_out.clone(), Tape { cfg, patches, blocks, ln_f, cls_out }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTape {
    e: Vec<f64>,
    u1: Vec<f64>,
    a1: Vec<f64>,
    u2: Vec<f64>,
    a2: Vec<f64>,
    z3: Vec<f64>,
    /// max(‖z3‖, 1e-12)
    norm: f64,
    zn: Vec<f64>,
}

impl HeadTape {
    /// Pre-normalization bottleneck magnitude (collapse diagnostics).
    pub fn bottleneck_norm(&self) -> f64 {
        self.norm
    }
}

/// Projection head: lin→GELU→lin→GELU→lin→L2-normalize→cosine logits
/// against unit-norm prototype rows.
pub fn head_forward(head: &HeadParams, e: &[f64]) -> Result<(Vec<f64>, HeadTape)> {
    if e.len() != head.fc1_w.dims()[0] {
        return Err(Error::Domain(format!(
            "embedding dim {} does not match head input {}",
            e.len(),
            head.fc1_w.dims()[0]
        )));
    }
    let u1 = linear(e, &head.fc1_w, &head.fc1_b, 1);
    let a1: Vec<f64> = u1.iter().map(|&v| gelu(v)).collect();
    let u2 = linear(&a1, &head.fc2_w, &head.fc2_b, 1);
    let a2: Vec<f64> = u2.iter().map(|&v| gelu(v)).collect();
    let z3 = linear(&a2, &head.fc3_w, &head.fc3_b, 1);
    let norm = z3.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let zn: Vec<f64> = z3.iter().map(|v| v / norm).collect();
    let logits = cosine_logits(&head.proto_w, &zn);
    Ok((logits, HeadTape { e: e.to_vec(), u1, a1, u2, a2, z3, norm, zn }))
}

/// logits[k] = ⟨prototype_k, zn⟩ for an already-normalized zn.
pub fn cosine_logits(proto: &Tensor, zn: &[f64]) -> Vec<f64> {
    let d = proto.dims()[1];
    proto
        .data()
        .chunks_exact(d)
        .map(|row| row.iter().zip(zn).map(|(a, b)| a * b).sum())
        .collect()
}

/// Head gradients plus the gradient w.r.t. the CLS embedding.
pub fn head_backward(
    head: &HeadParams,
    tape: &HeadTape,
    d_logits: &[f64],
    g: &mut HeadParams,
) -> Vec<f64> {
    let kdim = head.proto_w.dims()[1];
    // logits = proto · zn
    let mut dzn = vec![0.0; kdim];
    for (k, &dl) in d_logits.iter().enumerate() {
        let row = &head.proto_w.data()[k * kdim..(k + 1) * kdim];
        let grow = &mut g.proto_w.data_mut()[k * kdim..(k + 1) * kdim];
        for p in 0..kdim {
            dzn[p] += dl * row[p];
            grow[p] += dl * tape.zn[p];
        }
    }
    // zn = z3 / max(‖z3‖, 1e-12)
    let dz3: Vec<f64> = if tape.z3.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-12 {
        let proj: f64 = dzn.iter().zip(&tape.zn).map(|(a, b)| a * b).sum();
        dzn.iter().zip(&tape.zn).map(|(dv, zn)| (dv - zn * proj) / tape.norm).collect()
    } else {
        dzn.iter().map(|dv| dv / tape.norm).collect()
    };
    let da2 = linear_bwd(&tape.a2, &head.fc3_w, &dz3, 1, &mut g.fc3_w, &mut g.fc3_b);
    let du2: Vec<f64> = da2.iter().zip(&tape.u2).map(|(dv, &u)| dv * gelu_prime(u)).collect();
    let da1 = linear_bwd(&tape.a1, &head.fc2_w, &du2, 1, &mut g.fc2_w, &mut g.fc2_b);
    let du1: Vec<f64> = da1.iter().zip(&tape.u1).map(|(dv, &u)| dv * gelu_prime(u)).collect();
    linear_bwd(&tape.e, &head.fc1_w, &du1, 1, &mut g.fc1_w, &mut g.fc1_b)
}

/// Backbone reverse pass from a gradient on the CLS embedding.
/// Returns parameter gradients (head tensors zero) and the gradient
/// w.r.t. the input tile pixels.
pub fn backward_vit(params: &Params, tape: &Tape, d_cls: &[f64]) -> Result<(Params, Vec<f64>)> {
    if tape.cfg != params.cfg {
        return Err(Error::Domain("tape/params mismatch".into()));
    }
    let cfg = params.cfg;
    let s = cfg.seq_len();
    let d = cfg.embed_dim;
    let mut g = params.zeros_like();

    let mut dy = vec![0.0; s * d];
    dy[..d].copy_from_slice(d_cls);
    let mut dx = layer_norm_bwd(&tape.ln_f, &params.ln_f_g, &dy, &mut g.ln_f_g, &mut g.ln_f_b);
    for i in (0..cfg.depth).rev() {
        dx = block_backward(&params.blocks[i], &tape.blocks[i], &dx, &cfg, &mut g.blocks[i]);
    }

    // Split token gradients.
    g.cls.data_mut().copy_from_slice(&dx[..d]);
    g.reg.data_mut().copy_from_slice(&dx[d..d * (1 + cfg.n_registers)]);
    let dpatch_tokens = &dx[d * (1 + cfg.n_registers)..];
    g.pos.data_mut().copy_from_slice(dpatch_tokens);
    let dpatches = linear_bwd(
        &tape.patches,
        &params.patch_w,
        dpatch_tokens,
        cfg.n_patches(),
        &mut g.patch_w,
        &mut g.patch_b,
    );

    // Scatter patch gradients back to pixel layout.
    let ppx = cfg.patch_px;
    let grid = cfg.image_px / ppx;
    let pd = cfg.patch_dim();
    let w = cfg.image_px;
    let mut d_input = vec![0.0; w * w * 3];
    for gy in 0..grid {
        for gx in 0..grid {
            let src = &dpatches[(gy * grid + gx) * pd..(gy * grid + gx + 1) * pd];
            for yy in 0..ppx {
                let dst = ((gy * ppx + yy) * w + gx * ppx) * 3;
                for (d, s) in d_input[dst..dst + ppx * 3]
                    .iter_mut()
                    .zip(&src[yy * ppx * 3..(yy + 1) * ppx * 3])
                {
                    *d = s / PIXEL_STD;
                }
            }
        }
    }
    Ok((g, d_input))
}

/// Full reverse pass head + backbone from a gradient on the logits.
pub fn backward(
    params: &Params,
    tape: &Tape,
    head_tape: &HeadTape,
    d_logits: &[f64],
) -> Result<(Params, Vec<f64>)> {
    let mut hg = HeadParams {
        fc1_w: Tensor::zeros(params.head.fc1_w.dims()),
        fc1_b: Tensor::zeros(params.head.fc1_b.dims()),
        fc2_w: Tensor::zeros(params.head.fc2_w.dims()),
        fc2_b: Tensor::zeros(params.head.fc2_b.dims()),
        fc3_w: Tensor::zeros(params.head.fc3_w.dims()),
        fc3_b: Tensor::zeros(params.head.fc3_b.dims()),
        proto_w: Tensor::zeros(params.head.proto_w.dims()),
    };
    let d_e = head_backward(&params.head, head_tape, d_logits, &mut hg);
    let (mut g, d_input) = backward_vit(params, tape, &d_e)?;
    g.head = hg;
    Ok((g, d_input))
}
