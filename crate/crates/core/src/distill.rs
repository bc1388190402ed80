//! DINO-style teacher/student distillation with magnification-aware
//! view pairs.
//!
//! The student is trained by Adam on a centered-temperature
//! cross-entropy between teacher prototype distributions and student
//! prototype distributions; the teacher trails the student as an EMA.
//! BASELINE mode swaps only the view sampler (random resized crops of a
//! single tile), holding everything else fixed, which is the controlled
//! ablation arm.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::checkpoint::{read_checkpoint, write_checkpoint, Sidecar};
use crate::nnet::model::{backward, forward, head_forward};
use crate::nnet::params::{Params, ViTConfig};
use crate::nnet::tensor::{Precision, Tensor};
use crate::rng::{derive_seed, seeded, ChaCha8Rng, RngState};
use crate::tiler::{extract_pixels, Split, TileManifest, Transition};
use crate::views::{draw_step_kind, AugParams, Sampler, SlideSet, StepKind, ViewBatch};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "MAD")]
    Mad,
    #[serde(rename = "BASELINE")]
    Baseline,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<TrainMode> {
        match s {
            "mad" | "MAD" => Ok(TrainMode::Mad),
            "baseline" | "BASELINE" => Ok(TrainMode::Baseline),
            other => Err(Error::Config(format!("unknown mode {other} (mad|baseline)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Parent families (or baseline tiles) per optimizer step.
    pub batch_families_per_step: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    /// Applied to weight-matrix tensors only (names ending `_w`),
    /// never to biases or LayerNorm parameters.
    pub weight_decay: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub center_momentum: f64,
    /// EMA momentum endpoints; follows a cosine from .0 to .1.
    pub ema_lambda: (f64, f64),
    pub mode: TrainMode,
    /// Standalone fraction of the mixing schedule.
    pub rho: f64,
    /// Also feed the two global views through the student.
    pub student_sees_globals: bool,
    /// LOW→MID for the first half of training, MID→HIGH for the second,
    /// instead of uniform alternation.
    pub staged_curriculum: bool,
    /// Global L2 cap on the averaged gradient; 0 disables. Tames the
    /// spikes the bottleneck normalization produces when ‖z₃‖ drifts
    /// small, which otherwise feed noise into the EMA teacher.
    pub grad_clip: f64,
    pub precision: Precision,
    /// Intermediate checkpoint interval in steps; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub aug: AugParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_families_per_step: 16,
            lr: 5e-4,
            betas: (0.9, 0.999),
            weight_decay: 1e-4,
            tau_s: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            ema_lambda: (0.99, 0.999),
            mode: TrainMode::Mad,
            rho: 0.2,
            student_sees_globals: false,
            staged_curriculum: false,
            grad_clip: 3.0,
            precision: Precision::F32,
            checkpoint_every: 1000,
            seed: 0,
            aug: AugParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_t > 0.0 && self.tau_t < self.tau_s) {
            return Err(Error::Config(format!(
                "need 0 < tau_t < tau_s, got tau_t={} tau_s={}",
                self.tau_t, self.tau_s
            )));
        }
        for (name, v) in [
            ("center_momentum", self.center_momentum),
            ("ema_lambda.0", self.ema_lambda.0),
            ("ema_lambda.1", self.ema_lambda.1),
            ("rho", self.rho),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        if self.batch_families_per_step == 0 {
            return Err(Error::Config("batch_families_per_step must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("bad lr {}", self.lr)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("bad grad_clip {}", self.grad_clip)));
        }
        self.aug.validate()
    }

    /// Linear warmup over the first 5% of steps, then cosine decay.
    pub fn lr_at(&self, t: usize) -> f64 {
        let steps = self.steps.max(1);
        let warm = ((0.05 * steps as f64).ceil() as usize).max(1);
        if t < warm {
            self.lr * (t + 1) as f64 / warm as f64
        } else {
            let p = (t - warm) as f64 / (steps - warm).max(1) as f64;
            self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }

    /// Cosine from ema_lambda.0 at step 0 to ema_lambda.1 at the last step.
    pub fn lambda_at(&self, t: usize) -> f64 {
        let (l0, l1) = self.ema_lambda;
        let denom = (self.steps.saturating_sub(1)).max(1) as f64;
        let p = (t as f64 / denom).clamp(0.0, 1.0);
        l1 - (l1 - l0) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Student, EMA teacher, softmax center and the training rng stream.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub student: Params,
    pub teacher: Params,
    pub center: Vec<f64>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub lambda: f64,
    pub teacher_entropy: f64,
    pub center_l2: f64,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Teacher prototype distribution for one logit vector.
pub fn teacher_distribution(logits: &[f64], center: &[f64], tau_t: f64) -> Vec<f64> {
    let shifted: Vec<f64> = logits.iter().zip(center).map(|(l, c)| (l - c) / tau_t).collect();
    softmax(&shifted)
}

/// Centered-temperature cross-entropy over every (teacher, student) view
/// pair, averaged; returns the exact gradient w.r.t. the student logits.
/// No gradient flows to the teacher: the teacher side enters only
/// through its recorded logits.
pub fn mad_loss(
    teacher_logits: &[Vec<f64>],
    student_logits: &[Vec<f64>],
    center: &[f64],
    tau_t: f64,
    tau_s: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(tau_t > 0.0 && tau_s > 0.0) {
        return Err(Error::Config("temperatures must be positive".into()));
    }
    let k = center.len();
    for l in teacher_logits.iter().chain(student_logits) {
        if l.len() != k {
            return Err(Error::Domain(format!("logit dim {} != K {k}", l.len())));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits in distillation loss".into()));
        }
    }
    let n_pairs = (teacher_logits.len() * student_logits.len()) as f64;
    let ps: Vec<Vec<f64>> =
        teacher_logits.iter().map(|t| teacher_distribution(t, center, tau_t)).collect();
    let mut p_sum = vec![0.0; k];
    for p in &ps {
        for (s, v) in p_sum.iter_mut().zip(p) {
            *s += v;
        }
    }

    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(student_logits.len());
    for s in student_logits {
        // Stable log-softmax of the student view.
        let scaled: Vec<f64> = s.iter().map(|v| v / tau_s).collect();
        let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + scaled.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let q: Vec<f64> = scaled.iter().map(|v| (v - mx).exp()).collect();
        let qz: f64 = q.iter().sum();
        for p in &ps {
            loss -= p
                .iter()
                .zip(&scaled)
                .map(|(pv, sv)| pv * (sv - lse))
                .sum::<f64>();
        }
        // d loss / d s = (n_teacher·q − Σ_g p_g) / (n_pairs · τ_s)
        let g: Vec<f64> = q
            .iter()
            .zip(&p_sum)
            .map(|(qv, pv)| (teacher_logits.len() as f64 * qv / qz - pv) / (n_pairs * tau_s))
            .collect();
        grads.push(g);
    }
    loss /= n_pairs;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite distillation loss {loss}")));
    }
    Ok((loss, grads))
}

/// center' = m·center + (1−m)·mean over the step's teacher logit vectors.
pub fn update_center(center: &mut [f64], teacher_logits: &[Vec<f64>], m: f64) {
    if teacher_logits.is_empty() {
        return;
    }
    let n = teacher_logits.len() as f64;
    for (k, c) in center.iter_mut().enumerate() {
        let mean = teacher_logits.iter().map(|l| l[k]).sum::<f64>() / n;
        *c = m * *c + (1.0 - m) * mean;
    }
}

/// θ_T ← λ·θ_T + (1−λ)·θ_S per coordinate.
pub fn ema_update(teacher: &mut Params, student: &Params, lambda: f64) -> Result<()> {
    if teacher.cfg != student.cfg {
        return Err(Error::Domain("teacher/student shape mismatch".into()));
    }
    for (t, s) in teacher.named_mut().into_iter().zip(student.named()) {
        debug_assert_eq!(t.0, s.0);
        for (tv, sv) in t.1.data_mut().iter_mut().zip(s.1.data()) {
            *tv = lambda * *tv + (1.0 - lambda) * sv;
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay on `*_w` tensors.
pub struct Adam {
    m: Params,
    v: Params,
    t: u64,
    betas: (f64, f64),
    weight_decay: f64,
}

impl Adam {
    pub fn new(like: &Params, betas: (f64, f64), weight_decay: f64) -> Adam {
        Adam { m: like.zeros_like(), v: like.zeros_like(), t: 0, betas, weight_decay }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let wd = self.weight_decay;
        for (((pn, pt), (_, gt)), ((_, mt), (_, vt))) in params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut().into_iter().zip(self.v.named_mut()))
        {
            let decay = if pn.ends_with("_w") { wd } else { 0.0 };
            let p = pt.data_mut();
            let g = gt.data();
            let m = mt.data_mut();
            let v = vt.data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + decay * p[i]);
            }
        }
    }
}

/// Per-batch forward/backward result (pure function of the batch).
struct BatchResult {
    loss: f64,
    grads: Params,
    teacher_logits: Vec<Vec<f64>>,
    /// Teacher-view entropies are derived later from logits + center.
    descriptor: String,
}

fn batch_pass(
    student: &Params,
    teacher: &Params,
    center: &[f64],
    cfg: &TrainConfig,
    batch: &ViewBatch,
) -> Result<BatchResult> {
    let mut teacher_logits = Vec::with_capacity(batch.teacher_views.len());
    for v in &batch.teacher_views {
        let (e, _) = forward(teacher, v)?;
        let (logits, _) = head_forward(&teacher.head, &e)?;
        teacher_logits.push(logits);
    }
    let student_views: Vec<_> = if cfg.student_sees_globals {
        batch.student_views.iter().chain(&batch.teacher_views).collect()
    } else {
        batch.student_views.iter().collect()
    };
    let mut student_logits = Vec::with_capacity(student_views.len());
    let mut tapes = Vec::with_capacity(student_views.len());
    for v in &student_views {
        let (e, tape) = forward(student, v)?;
        let (logits, htape) = head_forward(&student.head, &e)?;
        student_logits.push(logits);
        tapes.push((tape, htape));
    }
    let (loss, dlogits) = mad_loss(&teacher_logits, &student_logits, center, cfg.tau_t, cfg.tau_s)?;
    let mut grads = student.zeros_like();
    for ((tape, htape), dl) in tapes.iter().zip(&dlogits) {
        let (g, _) = backward(student, tape, htape, dl)?;
        grads.add_scaled(&g, 1.0);
    }
    Ok(BatchResult {
        loss,
        grads,
        teacher_logits,
        descriptor: format!(
            "{:?} slide {} context {} seed_trace {:#018x}",
            batch.mode, batch.slide_id, batch.context_index, batch.seed_trace
        ),
    })
}

/// Full training loop. Deterministic per seed and thread count: batches
/// are sampled sequentially, computed in parallel, and reduced in batch
/// order. Writes intermediate checkpoints into `ckpt_dir` when given.
pub fn train(
    manifest: &TileManifest,
    slides: &SlideSet,
    vit_cfg: ViTConfig,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<(ModelState, Vec<TraceRow>)> {
    vit_cfg.validate()?;
    cfg.validate()?;
    let sampler = Sampler::new(manifest, slides, cfg.aug.clone())?;
    let k = vit_cfg.n_prototypes;

    let mut init_rng = seeded(derive_seed(cfg.seed, "init"));
    let mut student = Params::init(vit_cfg, &mut init_rng)?;
    student.quantize(cfg.precision);
    let teacher = student.clone();

    // Warm-start the center at the teacher's mean logits over a fixed
    // probe of TRAIN tiles. Starting from zero leaves the shared logit
    // component uncancelled for the first ~1/(1−m) steps, and chasing
    // that common target is what pulls all embeddings together.
    let mut center = vec![0.0; k];
    let probe = manifest.select_dedup(Split::Train);
    let n_probe = probe.len().min(64);
    if n_probe > 0 {
        for pi in 0..n_probe {
            let rec = &manifest.records[probe[pi * probe.len() / n_probe]];
            let tile = extract_pixels(slides.get(&rec.slide_id)?, rec)?;
            let (e, _) = forward(&teacher, &tile)?;
            let (logits, _) = head_forward(&teacher.head, &e)?;
            for (c, l) in center.iter_mut().zip(&logits) {
                *c += l / n_probe as f64;
            }
        }
    }
    if cfg.precision == Precision::F32 {
        for c in &mut center {
            *c = *c as f32 as f64;
        }
    }

    let mut state = ModelState {
        student,
        teacher,
        center,
        step: 0,
        rng: seeded(derive_seed(cfg.seed, "train")),
    };
    let mut adam = Adam::new(&state.student, cfg.betas, cfg.weight_decay);
    let mut trace = Vec::with_capacity(cfg.steps);

    for t in 0..cfg.steps {
        // Sample all batches for the step on the single rng stream.
        let mut batches = Vec::with_capacity(cfg.batch_families_per_step);
        for _ in 0..cfg.batch_families_per_step {
            let batch = match cfg.mode {
                TrainMode::Baseline => sampler.sample_baseline_batch(&mut state.rng)?,
                TrainMode::Mad => {
                    let mut kind = draw_step_kind(cfg.rho, &mut state.rng);
                    if cfg.staged_curriculum {
                        if let StepKind::Pair(_) = kind {
                            kind = StepKind::Pair(if t < cfg.steps / 2 {
                                Transition::LowToMid
                            } else {
                                Transition::MidToHigh
                            });
                        }
                    }
                    sampler.sample_batch(kind, &mut state.rng)?
                }
            };
            batches.push(batch);
        }

        let results: Vec<BatchResult> = batches
            .par_iter()
            .map(|b| batch_pass(&state.student, &state.teacher, &state.center, cfg, b))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "step {t}: {msg}; batches: {}",
                    batches
                        .iter()
                        .map(|b| format!(
                            "{:?} slide {} context {} seed_trace {:#018x}",
                            b.mode, b.slide_id, b.context_index, b.seed_trace
                        ))
                        .collect::<Vec<_>>()
                        .join(" | ")
                )),
                other => other,
            })?;

        let inv_b = 1.0 / cfg.batch_families_per_step as f64;
        let mut loss = 0.0;
        let mut grads = state.student.zeros_like();
        let mut step_teacher_logits = Vec::new();
        for r in &results {
            loss += r.loss * inv_b;
            grads.add_scaled(&r.grads, inv_b);
            step_teacher_logits.extend(r.teacher_logits.iter().cloned());
        }
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss} at step {t}; batches: {}",
                results.iter().map(|r| r.descriptor.clone()).collect::<Vec<_>>().join(" | ")
            )));
        }

        // Teacher entropy under the center used for this step's loss.
        let teacher_entropy = step_teacher_logits
            .iter()
            .map(|l| entropy(&teacher_distribution(l, &state.center, cfg.tau_t)))
            .sum::<f64>()
            / step_teacher_logits.len() as f64;

        if cfg.grad_clip > 0.0 {
            let norm = grads
                .named()
                .iter()
                .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                for (_, t) in grads.named_mut() {
                    for v in t.data_mut() {
                        *v *= s;
                    }
                }
            }
        }

        adam.step(&mut state.student, &grads, cfg.lr_at(t));
        state.student.head.renorm_prototypes();
        state.student.quantize(cfg.precision);

        let lambda = cfg.lambda_at(t);
        ema_update(&mut state.teacher, &state.student, lambda)?;
        state.teacher.head.renorm_prototypes();
        state.teacher.quantize(cfg.precision);

        update_center(&mut state.center, &step_teacher_logits, cfg.center_momentum);
        if cfg.precision == Precision::F32 {
            for c in &mut state.center {
                *c = *c as f32 as f64;
            }
        }
        state.step = (t + 1) as u64;

        trace.push(TraceRow {
            step: state.step,
            loss,
            lambda,
            teacher_entropy,
            center_l2: state.center.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });

        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
                save_state(&dir.join(format!("ckpt_{:06}.madc", state.step)), &state, None)?;
            }
        }
    }
    Ok((state, trace))
}

/// Serialize student + teacher + center into one MADC checkpoint.
pub fn save_state(path: &Path, state: &ModelState, prov: Option<&crate::Provenance>) -> Result<()> {
    let mut map = BTreeMap::new();
    for (n, t) in state.student.named() {
        map.insert(format!("student_{n}"), t.clone());
    }
    for (n, t) in state.teacher.named() {
        map.insert(format!("teacher_{n}"), t.clone());
    }
    map.insert("center".to_string(), Tensor::from_vec(&[state.center.len()], state.center.clone()));
    let sidecar = Sidecar {
        vit_config: state.student.cfg,
        step: state.step,
        rng: RngState::capture(&state.rng),
        provenance: prov.cloned(),
    };
    write_checkpoint(path, &map, &sidecar)
}

pub fn load_state(path: &Path) -> Result<ModelState> {
    let (map, sidecar) = read_checkpoint(path)?;
    let student = Params::from_named(sidecar.vit_config, &map, "student_")?;
    let teacher = Params::from_named(sidecar.vit_config, &map, "teacher_")?;
    let center = map
        .get("center")
        .ok_or_else(|| Error::Format("checkpoint missing tensor center".into()))?;
    if center.dims() != [sidecar.vit_config.n_prototypes] {
        return Err(Error::Format(format!(
            "center dims {:?} do not match K {}",
            center.dims(),
            sidecar.vit_config.n_prototypes
        )));
    }
    Ok(ModelState {
        student,
        teacher,
        center: center.data().to_vec(),
        step: sidecar.step,
        rng: sidecar.rng.restore()?,
    })
}

/// Trace CSV: `step,loss,lambda,teacher_entropy,center_l2`.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from("step,loss,lambda,teacher_entropy,center_l2\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss, r.lambda, r.teacher_entropy, r.center_l2
        ));
    }
    std::fs::write(path, out.as_bytes()).map_err(|e| Error::io(path, e))
}
