//! Finite-difference verification of the reverse pass.
//!
//! Probes random parameter coordinates of a randomly initialized model
//! against central differences of the scalar loss w·logits. The
//! denominator uses the realized perturbation (the stored values after
//! quantization), so the 32-bit mode measures exactly what training sees.

use rand::Rng;

use crate::error::Result;
use crate::raster::TileRaster;
use crate::rng::{fill_gauss, seeded};

use super::model::{backward, backward_vit, forward, head_forward};
use super::params::{Params, ViTConfig};
use super::tensor::Precision;

pub const FD_STEP: f64 = 1e-5;

/// Which scalar loss the probe differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path {
    /// w·logits through the projection head (the training path).
    Head,
    /// w·cls_embedding, backbone only (patch embed + blocks + final LN).
    Backbone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub precision: Precision,
    pub n_probes: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_tensor: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

fn loss(params: &Params, tile: &TileRaster, w: &[f64], path: Path) -> f64 {
    let (e, _) = forward(params, tile).expect("valid shapes");
    match path {
        Path::Head => {
            let (logits, _) = head_forward(&params.head, &e).expect("valid shapes");
            logits.iter().zip(w).map(|(a, b)| a * b).sum()
        }
        Path::Backbone => e.iter().zip(w).map(|(a, b)| a * b).sum(),
    }
}

/// Max relative error |a−n| / max(|a|, |n|, 1e-8) over `n_probes`
/// uniformly sampled parameter coordinates, loss taken through the head.
pub fn grad_check(
    cfg: ViTConfig,
    seed: u64,
    n_probes: usize,
    precision: Precision,
) -> Result<GradCheckReport> {
    grad_check_impl(cfg, seed, n_probes, precision, Path::Head)
}

/// Same probe with the loss on the CLS embedding instead of the logits;
/// isolates the backbone from the head's normalization nonlinearity.
pub fn grad_check_backbone(
    cfg: ViTConfig,
    seed: u64,
    n_probes: usize,
    precision: Precision,
) -> Result<GradCheckReport> {
    grad_check_impl(cfg, seed, n_probes, precision, Path::Backbone)
}

fn grad_check_impl(
    cfg: ViTConfig,
    seed: u64,
    n_probes: usize,
    precision: Precision,
    path: Path,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let mut params = Params::init(cfg, &mut rng)?;
    params.quantize(precision);

    let mut tile = TileRaster::zeros(cfg.image_px);
    for v in tile.data_mut() {
        *v = rng.gen();
    }
    let w_len = match path {
        Path::Head => cfg.n_prototypes,
        Path::Backbone => cfg.embed_dim,
    };
    let mut w = vec![0.0; w_len];
    fill_gauss(&mut rng, 1.0, &mut w);

    let (e, tape) = forward(&params, &tile)?;
    let grads = match path {
        Path::Head => {
            let (_, head_tape) = head_forward(&params.head, &e)?;
            backward(&params, &tape, &head_tape, &w)?.0
        }
        Path::Backbone => backward_vit(&params, &tape, &w)?.0,
    };

    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();

    let mut report = GradCheckReport {
        precision,
        n_probes,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut work = params.clone();
    for _ in 0..n_probes {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let analytic = grads.named()[ti].1.data()[flat];
        let orig = work.named()[ti].1.data()[flat];

        let eval = |theta: f64, work: &mut Params| -> (f64, f64) {
            {
                let mut named = work.named_mut();
                named[ti].1.data_mut()[flat] = theta;
                precision.quantize(named[ti].1);
            }
            let realized = work.named()[ti].1.data()[flat];
            (loss(work, &tile, &w, path), realized)
        };
        let (f_plus, theta_p) = eval(orig + FD_STEP, &mut work);
        let (f_minus, theta_m) = eval(orig - FD_STEP, &mut work);
        work.named_mut()[ti].1.data_mut()[flat] = orig;

        let numeric = (f_plus - f_minus) / (theta_p - theta_m);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_tensor = params.named()[ti].0.clone();
            report.worst_index = flat;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Same oracle for the input gradient: probes pixel coordinates.
pub fn grad_check_input(cfg: ViTConfig, seed: u64, n_probes: usize) -> Result<f64> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let params = Params::init(cfg, &mut rng)?;
    let mut tile = TileRaster::zeros(cfg.image_px);
    for v in tile.data_mut() {
        *v = rng.gen();
    }
    let mut w = vec![0.0; cfg.n_prototypes];
    fill_gauss(&mut rng, 1.0, &mut w);

    let (e, tape) = forward(&params, &tile)?;
    let (_, head_tape) = head_forward(&params.head, &e)?;
    let (_, d_input) = backward(&params, &tape, &head_tape, &w)?;

    let mut max_rel = 0.0f64;
    let n_px = tile.data().len();
    for _ in 0..n_probes {
        let i = rng.gen_range(0..n_px);
        let orig = tile.data()[i];
        tile.data_mut()[i] = orig + FD_STEP;
        let f_plus = loss(&params, &tile, &w, Path::Head);
        tile.data_mut()[i] = orig - FD_STEP;
        let f_minus = loss(&params, &tile, &w, Path::Head);
        tile.data_mut()[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
        let analytic = d_input[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
