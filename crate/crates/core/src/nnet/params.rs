//! Model configuration and named parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fill_gauss, ChaCha8Rng};

use super::tensor::{Precision, Tensor};

/// Token embeddings (pos/CLS/registers) init std. Weight matrices use
/// fan-in scaling instead: at 0.02 every block is a near-identity and
/// Adam at the default lr rewrites the whole net within the warmup
/// window, which collapses distillation before per-tile structure can
/// build up.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_px: usize,
    pub patch_px: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_registers: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    pub n_prototypes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_px: 32,
            patch_px: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            n_registers: 4,
            head_hidden: 128,
            head_bottleneck: 32,
            n_prototypes: 64,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_px == 0 || self.image_px == 0 || self.image_px % self.patch_px != 0 {
            return Err(Error::Config(format!(
                "image_px {} not divisible by patch_px {}",
                self.image_px, self.patch_px
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0
            || self.head_hidden == 0
            || self.head_bottleneck == 0
            || self.n_prototypes == 0
        {
            return Err(Error::Config("ViT dims must be positive".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let g = self.image_px / self.patch_px;
        g * g
    }

    /// CLS + registers + patch tokens.
    pub fn seq_len(&self) -> usize {
        1 + self.n_registers + self.n_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub fc3_w: Tensor,
    pub fc3_b: Tensor,
    /// K x bottleneck; rows kept at unit L2 norm.
    pub proto_w: Tensor,
}

impl HeadParams {
    /// Re-normalize prototype rows to unit L2 norm. Rows already unit to
    /// within 1e-12 are left untouched so the operation is idempotent.
    pub fn renorm_prototypes(&mut self) {
        let d = self.proto_w.dims()[1];
        for row in self.proto_w.data_mut().chunks_exact_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            if (n - 1.0).abs() <= 1e-12 {
                continue;
            }
            for v in row {
                *v /= n;
            }
        }
    }
}

/// Full parameter set (backbone + head). Also the shape of a gradient
/// or an Adam moment buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub cfg: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos: Tensor,
    pub cls: Tensor,
    pub reg: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    pub head: HeadParams,
}

impl Params {
    /// Weight matrices gauss(0, 1/√fan_in), token embeddings
    /// gauss(0, 0.02), biases zero, LN gains one, prototype rows
    /// unit-normalized. Draws in structural order.
    pub fn init(cfg: ViTConfig, rng: &mut ChaCha8Rng) -> Result<Params> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden();
        // Weight matrix [fan_in, fan_out]: Xavier-style fan-in scaling.
        let fan_t = |dims: &[usize; 2], rng: &mut ChaCha8Rng| {
            let mut t = Tensor::zeros(dims);
            fill_gauss(rng, 1.0 / (dims[0] as f64).sqrt(), t.data_mut());
            t
        };
        let patch_w = fan_t(&[cfg.patch_dim(), d], rng);
        let patch_b = Tensor::zeros(&[d]);
        let tok_t = |dims: &[usize], rng: &mut ChaCha8Rng| {
            let mut t = Tensor::zeros(dims);
            fill_gauss(rng, INIT_STD, t.data_mut());
            t
        };
        let pos = tok_t(&[cfg.n_patches(), d], rng);
        let cls = tok_t(&[d], rng);
        let reg = tok_t(&[cfg.n_registers, d], rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(BlockParams {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                qkv_w: fan_t(&[d, 3 * d], rng),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: fan_t(&[d, d], rng),
                proj_b: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                fc1_w: fan_t(&[d, h], rng),
                fc1_b: Tensor::zeros(&[h]),
                fc2_w: fan_t(&[h, d], rng),
                fc2_b: Tensor::zeros(&[d]),
            });
        }
        let ln_f_g = Tensor::filled(&[d], 1.0);
        let ln_f_b = Tensor::zeros(&[d]);
        let mut head = HeadParams {
            fc1_w: fan_t(&[d, cfg.head_hidden], rng),
            fc1_b: Tensor::zeros(&[cfg.head_hidden]),
            fc2_w: fan_t(&[cfg.head_hidden, cfg.head_hidden], rng),
            fc2_b: Tensor::zeros(&[cfg.head_hidden]),
            fc3_w: fan_t(&[cfg.head_hidden, cfg.head_bottleneck], rng),
            fc3_b: Tensor::zeros(&[cfg.head_bottleneck]),
            proto_w: fan_t(&[cfg.n_prototypes, cfg.head_bottleneck], rng),
        };
        head.renorm_prototypes();
        Ok(Params {
            cfg,
            patch_w,
            patch_b,
            pos,
            cls,
            reg,
            blocks,
            ln_f_g,
            ln_f_b,
            head,
        })
    }

    pub fn zeros_like(&self) -> Params {
        let z = |t: &Tensor| Tensor::zeros(t.dims());
        Params {
            cfg: self.cfg,
            patch_w: z(&self.patch_w),
            patch_b: z(&self.patch_b),
            pos: z(&self.pos),
            cls: z(&self.cls),
            reg: z(&self.reg),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: z(&b.ln1_g),
                    ln1_b: z(&b.ln1_b),
                    qkv_w: z(&b.qkv_w),
                    qkv_b: z(&b.qkv_b),
                    proj_w: z(&b.proj_w),
                    proj_b: z(&b.proj_b),
                    ln2_g: z(&b.ln2_g),
                    ln2_b: z(&b.ln2_b),
                    fc1_w: z(&b.fc1_w),
                    fc1_b: z(&b.fc1_b),
                    fc2_w: z(&b.fc2_w),
                    fc2_b: z(&b.fc2_b),
                })
                .collect(),
            ln_f_g: z(&self.ln_f_g),
            ln_f_b: z(&self.ln_f_b),
            head: HeadParams {
                fc1_w: z(&self.head.fc1_w),
                fc1_b: z(&self.head.fc1_b),
                fc2_w: z(&self.head.fc2_w),
                fc2_b: z(&self.head.fc2_b),
                fc3_w: z(&self.head.fc3_w),
                fc3_b: z(&self.head.fc3_b),
                proto_w: z(&self.head.proto_w),
            },
        }
    }

    /// (name, tensor) pairs in structural order. Block tensors are
    /// prefixed `blk{i:02}_`, head tensors `head_`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("pos".into(), &self.pos),
            ("cls".into(), &self.cls),
            ("reg".into(), &self.reg),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("qkv_w", &b.qkv_w),
                ("qkv_b", &b.qkv_b),
                ("proj_w", &b.proj_w),
                ("proj_b", &b.proj_b),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("fc1_w", &b.fc1_w),
                ("fc1_b", &b.fc1_b),
                ("fc2_w", &b.fc2_w),
                ("fc2_b", &b.fc2_b),
            ] {
                out.push((format!("blk{i:02}_{suffix}"), t));
            }
        }
        out.push(("ln_f_g".into(), &self.ln_f_g));
        out.push(("ln_f_b".into(), &self.ln_f_b));
        for (suffix, t) in [
            ("fc1_w", &self.head.fc1_w),
            ("fc1_b", &self.head.fc1_b),
            ("fc2_w", &self.head.fc2_w),
            ("fc2_b", &self.head.fc2_b),
            ("fc3_w", &self.head.fc3_w),
            ("fc3_b", &self.head.fc3_b),
            ("proto_w", &self.head.proto_w),
        ] {
            out.push((format!("head_{suffix}"), t));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_w".into(), &mut self.patch_w),
            ("patch_b".into(), &mut self.patch_b),
            ("pos".into(), &mut self.pos),
            ("cls".into(), &mut self.cls),
            ("reg".into(), &mut self.reg),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &mut b.ln1_g),
                ("ln1_b", &mut b.ln1_b),
                ("qkv_w", &mut b.qkv_w),
                ("qkv_b", &mut b.qkv_b),
                ("proj_w", &mut b.proj_w),
                ("proj_b", &mut b.proj_b),
                ("ln2_g", &mut b.ln2_g),
                ("ln2_b", &mut b.ln2_b),
                ("fc1_w", &mut b.fc1_w),
                ("fc1_b", &mut b.fc1_b),
                ("fc2_w", &mut b.fc2_w),
                ("fc2_b", &mut b.fc2_b),
            ] {
                out.push((format!("blk{i:02}_{suffix}"), t));
            }
        }
        out.push(("ln_f_g".into(), &mut self.ln_f_g));
        out.push(("ln_f_b".into(), &mut self.ln_f_b));
        for (suffix, t) in [
            ("fc1_w", &mut self.head.fc1_w),
            ("fc1_b", &mut self.head.fc1_b),
            ("fc2_w", &mut self.head.fc2_w),
            ("fc2_b", &mut self.head.fc2_b),
            ("fc3_w", &mut self.head.fc3_w),
            ("fc3_b", &mut self.head.fc3_b),
            ("proto_w", &mut self.head.proto_w),
        ] {
            out.push((format!("head_{suffix}"), t));
        }
        out
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn quantize(&mut self, p: Precision) {
        for (_, t) in self.named_mut() {
            p.quantize(t);
        }
    }

    /// Accumulate `other` scaled by `a` into self (axpy over all tensors).
    pub fn add_scaled(&mut self, other: &Params, a: f64) {
        for (dst, src) in self.named_mut().into_iter().zip(other.named()) {
            debug_assert_eq!(dst.0, src.0);
            for (x, y) in dst.1.data_mut().iter_mut().zip(src.1.data()) {
                *x += a * y;
            }
        }
    }

    /// Rebuild from a checkpoint tensor map; names as produced by
    /// `named()` with an optional prefix (e.g. "student_").
    pub fn from_named(
        cfg: ViTConfig,
        map: &std::collections::BTreeMap<String, Tensor>,
        prefix: &str,
    ) -> Result<Params> {
        let mut rng = crate::rng::seeded(0);
        let mut p = Params::init(cfg, &mut rng)?;
        for (name, t) in p.named_mut() {
            let key = format!("{prefix}{name}");
            let src = map
                .get(&key)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {key}")))?;
            if src.dims() != t.dims() {
                return Err(Error::Format(format!(
                    "tensor {key} has dims {:?}, config expects {:?}",
                    src.dims(),
                    t.dims()
                )));
            }
            *t = src.clone();
        }
        Ok(p)
    }
}
