//! Synthetic multi-magnification slide pyramids with known pixel labels.
//!
//! A slide is three levels — LOW, MID, HIGH, analogs of 2.5x/10x/40x with
//! a fixed linear factor of 4 between adjacent levels. The HIGH level is
//! generated procedurally: an elliptical tissue blob containing a
//! smoothed nearest-seed class field, background (class 0) outside. Each
//! class renders as a base color plus a class-specific high-frequency
//! sinusoidal texture plus Gaussian noise. Lower levels are derived by
//! box downsampling (rasters) and majority pooling (labels), exactly as
//! the tiler's stitch round-trip test expects: the texture carries
//! scale-specific appearance (it averages out at MID/LOW) while color
//! keeps classes identifiable at every level.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm;
use crate::rng::{self, ChaCha8Rng};
use crate::{sha256_hex, Provenance};

/// Linear size ratio between adjacent pyramid levels.
pub const SCALE_FACTOR: u32 = 4;
pub const N_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MagTag {
    #[serde(rename = "LOW")]
    Low,
    #[serde(rename = "MID")]
    Mid,
    #[serde(rename = "HIGH")]
    High,
}

impl MagTag {
    pub const ALL: [MagTag; 3] = [MagTag::Low, MagTag::Mid, MagTag::High];

    pub fn index(self) -> usize {
        match self {
            MagTag::Low => 0,
            MagTag::Mid => 1,
            MagTag::High => 2,
        }
    }

    /// Length of a hierarchical tile coordinate at this level.
    pub fn coords_len(self) -> usize {
        self.index() + 2
    }

    pub fn finer(self) -> Option<MagTag> {
        match self {
            MagTag::Low => Some(MagTag::Mid),
            MagTag::Mid => Some(MagTag::High),
            MagTag::High => None,
        }
    }

    pub fn coarser(self) -> Option<MagTag> {
        match self {
            MagTag::Low => None,
            MagTag::Mid => Some(MagTag::Low),
            MagTag::High => Some(MagTag::Mid),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MagTag::Low => "LOW",
            MagTag::Mid => "MID",
            MagTag::High => "HIGH",
        }
    }
}

impl fmt::Display for MagTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One pyramid level: interleaved 8-bit RGB raster plus a class-id label
/// plane of identical dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    pub mag: MagTag,
    pub width: usize,
    pub height: usize,
    pub raster: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Level {
    pub fn label_at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlidePyramid {
    pub slide_id: String,
    pub scale_factor: u32,
    /// Index 0 is always Background.
    pub class_names: Vec<String>,
    /// Ordered LOW, MID, HIGH.
    pub levels: Vec<Level>,
    pub seed: u64,
}

impl SlidePyramid {
    pub fn level(&self, mag: MagTag) -> &Level {
        &self.levels[mag.index()]
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        if self.scale_factor != SCALE_FACTOR {
            return Err(Error::Format(format!(
                "slide {}: scale_factor {} (expected {SCALE_FACTOR})",
                self.slide_id, self.scale_factor
            )));
        }
        if self.levels.len() != N_LEVELS {
            return Err(Error::Format(format!(
                "slide {}: {} levels (expected {N_LEVELS})",
                self.slide_id,
                self.levels.len()
            )));
        }
        for (i, lv) in self.levels.iter().enumerate() {
            if lv.mag.index() != i {
                return Err(Error::Format(format!(
                    "slide {}: level {i} tagged {}, expected {}",
                    self.slide_id,
                    lv.mag,
                    MagTag::ALL[i]
                )));
            }
            if lv.raster.len() != lv.width * lv.height * 3 || lv.labels.len() != lv.width * lv.height {
                return Err(Error::Format(format!(
                    "slide {}: level {} plane sizes do not match {}x{}",
                    self.slide_id, lv.mag, lv.width, lv.height
                )));
            }
            if let Some(m) = lv.labels.iter().max() {
                if *m as usize >= self.class_names.len() {
                    return Err(Error::Format(format!(
                        "slide {}: label {m} out of range for {} classes",
                        self.slide_id,
                        self.class_names.len()
                    )));
                }
            }
            if i > 0 {
                let prev = &self.levels[i - 1];
                if lv.width != prev.width * SCALE_FACTOR as usize
                    || lv.height != prev.height * SCALE_FACTOR as usize
                {
                    return Err(Error::Format(format!(
                        "slide {}: level {} is {}x{}, expected {}x{}",
                        self.slide_id,
                        lv.mag,
                        lv.width,
                        lv.height,
                        prev.width * 4,
                        prev.height * 4
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BlobParams {
    /// Semi-axis ranges as fractions of the half-edge; values around 1
    /// give a blob that fills most of the slide but leaves the corners
    /// as background.
    pub rx: (f64, f64),
    pub ry: (f64, f64),
    /// Center offset range as a fraction of the edge.
    pub center_jitter: f64,
    /// Boundary warp amplitude as a fraction of the edge, and its
    /// frequency in cycles per edge. Warping makes region borders
    /// organic instead of conic sections.
    pub warp_amp: f64,
    pub warp_freq: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams {
            rx: (1.0, 1.15),
            ry: (1.0, 1.15),
            center_jitter: 0.04,
            warp_amp: 0.03,
            warp_freq: 2.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub slide_id: String,
    pub seed: u64,
    /// HIGH-level edge length in pixels.
    pub base_size: usize,
    /// Tile edge the downstream tiler will use; the generator only needs
    /// it to guarantee that all three levels tile exactly.
    pub tile_px: usize,
    pub n_region_seeds: usize,
    pub class_names: Vec<String>,
    /// Per-class base RGB in [0,1]; index 0 = background.
    pub class_palette: Vec<[f64; 3]>,
    /// Per-class sinusoid frequency (cycles/pixel at HIGH). Multiples of
    /// 0.25 average to exactly zero over a 4x4 block, so the texture is
    /// invisible at MID and below.
    pub texture_freq: Vec<f64>,
    pub texture_amp: Vec<f64>,
    pub noise_sigma: f64,
    pub blob: BlobParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            slide_id: "slide_000".into(),
            seed: 0,
            base_size: 1024,
            tile_px: 32,
            n_region_seeds: 12,
            class_names: vec![
                "Background".into(),
                "GrayMatter".into(),
                "WhiteMatter".into(),
                "Leptomeninges".into(),
                "SuperficialCortex".into(),
            ],
            class_palette: vec![
                [0.93, 0.92, 0.96],
                [0.78, 0.55, 0.65],
                [0.88, 0.72, 0.80],
                [0.55, 0.35, 0.55],
                [0.70, 0.45, 0.40],
            ],
            texture_freq: vec![0.0, 0.25, 0.5, 0.25, 0.5],
            texture_amp: vec![0.0, 0.16, 0.12, 0.14, 0.10],
            noise_sigma: 0.02,
            blob: BlobParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if !(2..=256).contains(&c) {
            return Err(Error::Config(format!("class count {c} outside 2..=256")));
        }
        if self.class_palette.len() != c || self.texture_freq.len() != c || self.texture_amp.len() != c {
            return Err(Error::Config(format!(
                "palette/texture lengths must all equal class count {c}"
            )));
        }
        if self.tile_px == 0 || self.base_size == 0 || self.base_size % (16 * self.tile_px) != 0 {
            return Err(Error::Config(format!(
                "base_size {} must be a positive multiple of 16*tile_px = {}",
                self.base_size,
                16 * self.tile_px
            )));
        }
        if self.base_size > pnm::MAX_DIM {
            return Err(Error::Config(format!("base_size {} exceeds {}", self.base_size, pnm::MAX_DIM)));
        }
        if self.n_region_seeds == 0 {
            return Err(Error::Config("n_region_seeds must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        for rgb in &self.class_palette {
            if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("palette values must lie in [0,1]".into()));
            }
        }
        for r in [self.blob.rx, self.blob.ry] {
            if !(r.0 > 0.0 && r.1 >= r.0) {
                return Err(Error::Config("blob semi-axis ranges must be positive and ordered".into()));
            }
        }
        Ok(())
    }
}

/// Tissue layout: a warped ellipse, class-region seed points inside it,
/// and per-class texture phases.
struct Layout {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    warp_amp: f64,
    warp_freq: f64,
    warp_phase: (f64, f64),
    /// (x, y, class)
    seeds: Vec<(f64, f64, u8)>,
}

impl Layout {
    #[inline]
    fn warp(&self, x: f64, y: f64, edge: f64) -> (f64, f64) {
        use std::f64::consts::TAU;
        let wx = x + self.warp_amp * (TAU * self.warp_freq * y / edge + self.warp_phase.0).sin();
        let wy = y + self.warp_amp * (TAU * self.warp_freq * x / edge + self.warp_phase.1).sin();
        (wx, wy)
    }

    #[inline]
    fn inside(&self, wx: f64, wy: f64) -> bool {
        let dx = wx - self.cx;
        let dy = wy - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    #[inline]
    fn nearest_seed_class(&self, wx: f64, wy: f64) -> u8 {
        let mut best = (f64::INFINITY, 0u8);
        for &(sx, sy, c) in &self.seeds {
            let d = (wx - sx).powi(2) + (wy - sy).powi(2);
            // Strict < keeps the first (lowest seed index) on exact ties.
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

fn sample_layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Layout {
    let edge = cfg.base_size as f64;
    let half = edge / 2.0;
    let j = cfg.blob.center_jitter;
    let cx = half * (1.0 + rng.gen_range(-j..=j));
    let cy = half * (1.0 + rng.gen_range(-j..=j));
    let a = half * rng.gen_range(cfg.blob.rx.0..=cfg.blob.rx.1);
    let b = half * rng.gen_range(cfg.blob.ry.0..=cfg.blob.ry.1);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let mut layout = Layout {
        cx,
        cy,
        a,
        b,
        cos_t: theta.cos(),
        sin_t: theta.sin(),
        warp_amp: cfg.blob.warp_amp * edge,
        warp_freq: cfg.blob.warp_freq,
        warp_phase: (
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ),
        seeds: Vec::with_capacity(cfg.n_region_seeds),
    };
    let n_tissue_classes = (cfg.class_names.len() - 1) as u64;
    let (x_lo, x_hi) = ((cx - a).max(0.0), (cx + a).min(edge));
    let (y_lo, y_hi) = ((cy - b).max(0.0), (cy + b).min(edge));
    for s in 0..cfg.n_region_seeds {
        let class = 1 + (s as u64 % n_tissue_classes) as u8;
        // Rejection-sample a point inside the (unwarped) ellipse.
        let mut placed = false;
        for _ in 0..10_000 {
            let x = rng.gen_range(x_lo..x_hi);
            let y = rng.gen_range(y_lo..y_hi);
            if layout.inside(x, y) {
                layout.seeds.push((x, y, class));
                placed = true;
                break;
            }
        }
        if !placed {
            // Degenerate geometry; drop the seed at the center.
            layout.seeds.push((cx, cy, class));
        }
    }
    layout
}

fn rasterize_labels(cfg: &SynthConfig, layout: &Layout) -> Vec<u8> {
    let n = cfg.base_size;
    let edge = n as f64;
    let mut labels = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let (wx, wy) = layout.warp(x as f64, y as f64, edge);
            if layout.inside(wx, wy) {
                labels[y * n + x] = layout.nearest_seed_class(wx, wy);
            }
        }
    }
    labels
}

/// Every class that owns at least one region seed must cover >= 1% of
/// tissue pixels; otherwise the layout is re-drawn.
fn shares_ok(layout: &Layout, labels: &[u8]) -> bool {
    let mut counts = [0usize; 256];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let tissue: usize = counts[1..].iter().sum();
    if tissue == 0 {
        return false;
    }
    let mut required = [false; 256];
    for &(_, _, c) in &layout.seeds {
        required[c as usize] = true;
    }
    required
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .all(|(c, _)| counts[c] as f64 >= 0.01 * tissue as f64)
}

/// Fraction of pixels per class at the HIGH level (sums to 1).
pub fn class_pixel_shares(level: &Level, n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &l in &level.labels {
        counts[l as usize] += 1;
    }
    let total = level.labels.len() as f64;
    counts.iter().map(|&c| c as f64 / total).collect()
}

pub fn synth_slide(cfg: &SynthConfig) -> Result<SlidePyramid> {
    cfg.validate()?;
    let n = cfg.base_size;

    let mut chosen = None;
    for attempt in 0..64u64 {
        let mut layout_rng = rng::seeded(rng::derive_seed(cfg.seed, &format!("layout{attempt}")));
        let layout = sample_layout(cfg, &mut layout_rng);
        let labels = rasterize_labels(cfg, &layout);
        if shares_ok(&layout, &labels) {
            chosen = Some(labels);
            break;
        }
    }
    let hi_labels = chosen.ok_or_else(|| {
        Error::Domain(format!(
            "slide {}: no layout with >=1% tissue share per seeded class after 64 draws",
            cfg.slide_id
        ))
    })?;

    // Texture phases and pixel noise come from a stream that does not
    // depend on how many layout attempts were burned.
    let mut px_rng = rng::seeded(rng::derive_seed(cfg.seed, "pixels"));
    let n_classes = cfg.class_names.len();
    let phases: Vec<(f64, f64)> = (0..n_classes)
        .map(|_| {
            (
                px_rng.gen_range(0.0..std::f64::consts::TAU),
                px_rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    use std::f64::consts::TAU;
    let mut hi_raster = vec![0u8; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let c = hi_labels[y * n + x] as usize;
            let tex = cfg.texture_amp[c]
                * (TAU * cfg.texture_freq[c] * x as f64 + phases[c].0).sin()
                * (TAU * cfg.texture_freq[c] * y as f64 + phases[c].1).sin();
            for ch in 0..3 {
                let v = cfg.class_palette[c][ch] + tex + cfg.noise_sigma * rng::gauss(&mut px_rng);
                hi_raster[(y * n + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
            }
        }
    }

    let f = SCALE_FACTOR as usize;
    let mid_raster = box_downsample(&hi_raster, n, n, 3, f)?;
    let low_raster = box_downsample(&mid_raster, n / f, n / f, 3, f)?;
    let mid_labels = majority_pool(&hi_labels, n, n, f)?;
    let low_labels = majority_pool(&mid_labels, n / f, n / f, f)?;

    let pyramid = SlidePyramid {
        slide_id: cfg.slide_id.clone(),
        scale_factor: SCALE_FACTOR,
        class_names: cfg.class_names.clone(),
        levels: vec![
            Level { mag: MagTag::Low, width: n / (f * f), height: n / (f * f), raster: low_raster, labels: low_labels },
            Level { mag: MagTag::Mid, width: n / f, height: n / f, raster: mid_raster, labels: mid_labels },
            Level { mag: MagTag::High, width: n, height: n, raster: hi_raster, labels: hi_labels },
        ],
        seed: cfg.seed,
    };
    pyramid.validate()?;
    Ok(pyramid)
}

/// Mean-pool `factor`x`factor` blocks of an interleaved 8-bit plane,
/// rounding half-up. Integer arithmetic, hence exactly reproducible:
/// floor(sum/f^2 + 1/2) = (2*sum + f^2) / (2*f^2).
pub fn box_downsample(src: &[u8], width: usize, height: usize, channels: usize, factor: usize) -> Result<Vec<u8>> {
    if factor == 0 || width == 0 || height == 0 || width % factor != 0 || height % factor != 0 {
        return Err(Error::Domain(format!(
            "box_downsample: {width}x{height} not divisible by factor {factor}"
        )));
    }
    if src.len() != width * height * channels {
        return Err(Error::Domain(format!(
            "box_downsample: plane length {} does not match {width}x{height}x{channels}",
            src.len()
        )));
    }
    let (ow, oh) = (width / factor, height / factor);
    let f2 = (factor * factor) as u32;
    let mut out = vec![0u8; ow * oh * channels];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..channels {
                let mut sum: u32 = 0;
                for dy in 0..factor {
                    let row = (oy * factor + dy) * width;
                    for dx in 0..factor {
                        sum += src[(row + ox * factor + dx) * channels + ch] as u32;
                    }
                }
                out[(oy * ow + ox) * channels + ch] = ((2 * sum + f2) / (2 * f2)) as u8;
            }
        }
    }
    Ok(out)
}

/// Most frequent class id per `factor`x`factor` block; ties go to the
/// smallest class id.
pub fn majority_pool(labels: &[u8], width: usize, height: usize, factor: usize) -> Result<Vec<u8>> {
    if factor == 0 || width == 0 || height == 0 || width % factor != 0 || height % factor != 0 {
        return Err(Error::Domain(format!(
            "majority_pool: {width}x{height} not divisible by factor {factor}"
        )));
    }
    if labels.len() != width * height {
        return Err(Error::Domain(format!(
            "majority_pool: plane length {} does not match {width}x{height}",
            labels.len()
        )));
    }
    let (ow, oh) = (width / factor, height / factor);
    let mut out = vec![0u8; ow * oh];
    let mut counts = [0u32; 256];
    for oy in 0..oh {
        for ox in 0..ow {
            counts.fill(0);
            for dy in 0..factor {
                let row = (oy * factor + dy) * width;
                for dx in 0..factor {
                    counts[labels[row + ox * factor + dx] as usize] += 1;
                }
            }
            let mut best = (0u32, 0u8);
            for (c, &cnt) in counts.iter().enumerate() {
                if cnt > best.0 {
                    best = (cnt, c as u8);
                }
            }
            out[oy * ow + ox] = best.1;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Pyramid directory format

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelEntry {
    pub mag_tag: MagTag,
    pub width: usize,
    pub height: usize,
    pub raster_file: String,
    pub label_file: String,
    pub raster_sha256: String,
    pub label_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidManifest {
    pub slide_id: String,
    pub scale_factor: u32,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub levels: Vec<LevelEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// A manifest is untrusted input; level file names must be bare file
/// names, not paths.
fn check_file_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('/') || name.contains('\\') || name.contains("..") {
        return Err(Error::Format(format!("manifest: illegal file name {name:?}")));
    }
    Ok(())
}

pub fn save_slide(p: &SlidePyramid, dir: &Path, provenance: Option<&Provenance>) -> Result<()> {
    p.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for lv in &p.levels {
        let tag = lv.mag.as_str().to_ascii_lowercase();
        let raster_file = format!("{tag}.ppm");
        let label_file = format!("{tag}_labels.pgm");
        let ppm = pnm::encode_ppm(lv.width, lv.height, &lv.raster)?;
        let pgm = pnm::encode_pgm(lv.width, lv.height, &lv.labels)?;
        let rp = dir.join(&raster_file);
        fs::write(&rp, &ppm).map_err(|e| Error::io(&rp, e))?;
        let lp = dir.join(&label_file);
        fs::write(&lp, &pgm).map_err(|e| Error::io(&lp, e))?;
        entries.push(LevelEntry {
            mag_tag: lv.mag,
            width: lv.width,
            height: lv.height,
            raster_file,
            label_file,
            raster_sha256: sha256_hex(&ppm),
            label_sha256: sha256_hex(&pgm),
        });
    }
    let manifest = PyramidManifest {
        slide_id: p.slide_id.clone(),
        scale_factor: p.scale_factor,
        class_names: p.class_names.clone(),
        seed: p.seed,
        levels: entries,
        provenance: provenance.cloned(),
    };
    let mp = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

pub fn load_slide(dir: &Path) -> Result<SlidePyramid> {
    let mp = dir.join("manifest.json");
    let bytes = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: PyramidManifest = serde_json::from_slice(&bytes)?;
    load_slide_with_manifest(dir, &manifest)
}

pub fn load_slide_with_manifest(dir: &Path, manifest: &PyramidManifest) -> Result<SlidePyramid> {
    if manifest.levels.len() != N_LEVELS {
        return Err(Error::Format(format!(
            "manifest for {}: {} levels (expected {N_LEVELS})",
            manifest.slide_id,
            manifest.levels.len()
        )));
    }
    let n_classes = manifest.class_names.len();
    if !(2..=256).contains(&n_classes) {
        return Err(Error::Format(format!("manifest: class count {n_classes} outside 2..=256")));
    }
    let mut levels = Vec::with_capacity(N_LEVELS);
    for (i, entry) in manifest.levels.iter().enumerate() {
        if entry.mag_tag.index() != i {
            return Err(Error::Format(format!(
                "manifest: level {i} tagged {}, expected {}",
                entry.mag_tag,
                MagTag::ALL[i]
            )));
        }
        check_file_name(&entry.raster_file)?;
        check_file_name(&entry.label_file)?;
        let rp = dir.join(&entry.raster_file);
        let raster_bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
        let ppm = pnm::decode_ppm(&raster_bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", entry.raster_file)))?;
        if sha256_hex(&raster_bytes) != entry.raster_sha256 {
            return Err(Error::Format(format!("checksum mismatch for {}", entry.raster_file)));
        }
        let lp = dir.join(&entry.label_file);
        let label_bytes = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
        let pgm = pnm::decode_pgm(&label_bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", entry.label_file)))?;
        if sha256_hex(&label_bytes) != entry.label_sha256 {
            return Err(Error::Format(format!("checksum mismatch for {}", entry.label_file)));
        }
        if ppm.width != entry.width || ppm.height != entry.height {
            return Err(Error::Format(format!(
                "{}: {}x{} does not match manifest {}x{}",
                entry.raster_file, ppm.width, ppm.height, entry.width, entry.height
            )));
        }
        if pgm.width != entry.width || pgm.height != entry.height {
            return Err(Error::Format(format!(
                "{}: {}x{} does not match manifest {}x{}",
                entry.label_file, pgm.width, pgm.height, entry.width, entry.height
            )));
        }
        levels.push(Level {
            mag: entry.mag_tag,
            width: entry.width,
            height: entry.height,
            raster: ppm.data,
            labels: pgm.data,
        });
    }
    let pyramid = SlidePyramid {
        slide_id: manifest.slide_id.clone(),
        scale_factor: manifest.scale_factor,
        class_names: manifest.class_names.clone(),
        levels,
        seed: manifest.seed,
    };
    pyramid.validate()?;
    Ok(pyramid)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small, fast config: 128px base with 8px tiles satisfies the
    /// 16*tile_px divisibility rule.
    pub(crate) fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            slide_id: format!("s{seed}"),
            seed,
            base_size: 128,
            tile_px: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn level_edges_are_factor_4() {
        let p = synth_slide(&small_cfg(1)).unwrap();
        let edges: Vec<usize> = p.levels.iter().map(|l| l.width).collect();
        assert_eq!(edges, vec![8, 32, 128]);
        let big = SynthConfig { base_size: 1024, tile_px: 32, ..small_cfg(1) };
        // Only check arithmetic, not a full synth, for the 1024 case.
        assert!(big.validate().is_ok());
    }

    #[test]
    fn determinism_byte_identical() {
        let a = synth_slide(&small_cfg(7)).unwrap();
        let b = synth_slide(&small_cfg(7)).unwrap();
        assert_eq!(a, b);
        let c = synth_slide(&small_cfg(8)).unwrap();
        assert_ne!(a.level(MagTag::High).raster, c.level(MagTag::High).raster);
    }

    #[test]
    fn degenerate_single_class_blob() {
        let cfg = SynthConfig {
            n_region_seeds: 1,
            blob: BlobParams { rx: (3.0, 3.0), ry: (3.0, 3.0), center_jitter: 0.0, warp_amp: 0.0, warp_freq: 1.0 },
            ..small_cfg(3)
        };
        let p = synth_slide(&cfg).unwrap();
        let hi = p.level(MagTag::High);
        assert!(hi.labels.iter().all(|&l| l == 1), "blob covers everything, one class");
        let low = p.level(MagTag::Low);
        assert!(low.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn tissue_class_shares_at_least_1pct() {
        for seed in [1, 2, 3] {
            let p = synth_slide(&small_cfg(seed)).unwrap();
            let shares = class_pixel_shares(p.level(MagTag::High), p.n_classes());
            assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let tissue: f64 = shares[1..].iter().sum();
            for (c, &s) in shares.iter().enumerate().skip(1) {
                assert!(s / tissue >= 0.01, "seed {seed} class {c} share {s}");
            }
            // Default geometry leaves corners as background.
            assert!(shares[0] > 0.01, "seed {seed} background share {}", shares[0]);
        }
    }

    #[test]
    fn box_downsample_constant_and_checkerboard() {
        let v = vec![57u8; 8 * 8];
        assert!(box_downsample(&v, 8, 8, 1, 4).unwrap().iter().all(|&o| o == 57));
        // Alternating 0/255: mean 127.5, round-half-up -> 128.
        let alt: Vec<u8> = (0..16).map(|i| if (i + i / 4) % 2 == 0 { 0 } else { 255 }).collect();
        assert_eq!(box_downsample(&alt, 4, 4, 1, 4).unwrap(), vec![128]);
    }

    #[test]
    fn box_downsample_matches_block_mean_oracle() {
        // Oracle: mean in f64 then round half-up, computed independently
        // of the integer formula used by the implementation.
        let mut rng = crate::rng::seeded(11);
        use rand::Rng;
        let (w, h, ch, f) = (8, 8, 3, 4);
        let src: Vec<u8> = (0..w * h * ch).map(|_| rng.gen()).collect();
        let got = box_downsample(&src, w, h, ch, f).unwrap();
        for oy in 0..h / f {
            for ox in 0..w / f {
                for c in 0..ch {
                    let mut s = 0.0f64;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += src[(((oy * f + dy) * w) + ox * f + dx) * ch + c] as f64;
                        }
                    }
                    let want = (s / (f * f) as f64 + 0.5).floor() as u8;
                    assert_eq!(got[(oy * (w / f) + ox) * ch + c], want);
                }
            }
        }
    }

    #[test]
    fn double_downsample_close_to_16_block_mean() {
        let mut rng = crate::rng::seeded(5);
        use rand::Rng;
        let n = 32;
        let src: Vec<u8> = (0..n * n).map(|_| rng.gen()).collect();
        let once = box_downsample(&src, n, n, 1, 4).unwrap();
        let twice = box_downsample(&once, n / 4, n / 4, 1, 4).unwrap();
        let direct = box_downsample(&src, n, n, 1, 16).unwrap();
        for (a, b) in twice.iter().zip(&direct) {
            assert!((*a as i32 - *b as i32).abs() <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn majority_pool_rules() {
        let mut block = vec![2u8; 16];
        assert_eq!(majority_pool(&block, 4, 4, 4).unwrap(), vec![2]);
        block = vec![1, 1, 1, 1, 1, 1, 1, 1, 3, 3, 3, 3, 3, 3, 3, 3];
        // 8 vs 8 tie -> smallest class id.
        assert_eq!(majority_pool(&block, 4, 4, 4).unwrap(), vec![1]);
    }

    #[test]
    fn majority_pool_matches_histogram_oracle() {
        let mut rng = crate::rng::seeded(17);
        use rand::Rng;
        let n = 8;
        let labels: Vec<u8> = (0..n * n).map(|_| rng.gen_range(0..5)).collect();
        let got = majority_pool(&labels, n, n, 4).unwrap();
        for oy in 0..n / 4 {
            for ox in 0..n / 4 {
                let mut hist = std::collections::BTreeMap::new();
                for dy in 0..4 {
                    for dx in 0..4 {
                        *hist.entry(labels[(oy * 4 + dy) * n + ox * 4 + dx]).or_insert(0u32) += 1;
                    }
                }
                let max = *hist.values().max().unwrap();
                let want = *hist.iter().find(|(_, &v)| v == max).unwrap().0;
                assert_eq!(got[oy * (n / 4) + ox], want);
            }
        }
    }

    #[test]
    fn labels_consistent_across_levels() {
        let p = synth_slide(&small_cfg(21)).unwrap();
        for (coarse, fine) in [(MagTag::Low, MagTag::Mid), (MagTag::Mid, MagTag::High)] {
            let c = p.level(coarse);
            let f = p.level(fine);
            let pooled = majority_pool(&f.labels, f.width, f.height, 4).unwrap();
            assert_eq!(pooled, c.labels, "{coarse}->{fine}");
        }
    }

    #[test]
    fn texture_vanishes_at_mid() {
        // With noise off, MID-level within-class pixel variation is tiny
        // because the quarter-period sinusoid sums to zero over 4x4.
        let cfg = SynthConfig { noise_sigma: 0.0, ..small_cfg(9) };
        let p = synth_slide(&cfg).unwrap();
        let hi = p.level(MagTag::High);
        let mid = p.level(MagTag::Mid);
        let spread = |vals: &[f64]| -> f64 {
            vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min)
        };
        let hi_vals: Vec<f64> = hi
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(i, _)| hi.raster[i * 3] as f64 / 255.0)
            .collect();
        // Restrict MID to pixels whose HIGH block is pure class 1 so class
        // boundaries don't mix colors into the measurement.
        let mut mid_vals = Vec::new();
        for my in 0..mid.height {
            for mx in 0..mid.width {
                let pure = (0..4).all(|dy| {
                    (0..4).all(|dx| hi.label_at(my * 4 + dy, mx * 4 + dx) == 1)
                });
                if pure {
                    mid_vals.push(mid.raster[(my * mid.width + mx) * 3] as f64 / 255.0);
                }
            }
        }
        assert!(hi_vals.len() > 100 && mid_vals.len() > 10);
        assert!(spread(&hi_vals) > 0.15, "HIGH shows texture: {}", spread(&hi_vals));
        assert!(spread(&mid_vals) < 0.03, "MID flat within class: {}", spread(&mid_vals));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = synth_slide(&small_cfg(4)).unwrap();
        save_slide(&p, dir.path(), None).unwrap();
        let q = load_slide(dir.path()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn load_missing_level_file_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let p = synth_slide(&small_cfg(4)).unwrap();
        save_slide(&p, dir.path(), None).unwrap();
        fs::remove_file(dir.path().join("mid.ppm")).unwrap();
        let err = load_slide(dir.path()).unwrap_err();
        assert!(err.to_string().contains("mid.ppm"), "{err}");
    }

    #[test]
    fn load_truncated_raster_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = synth_slide(&small_cfg(4)).unwrap();
        save_slide(&p, dir.path(), None).unwrap();
        let path = dir.path().join("low.ppm");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_slide(dir.path()).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn load_corrupted_byte_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = synth_slide(&small_cfg(4)).unwrap();
        save_slide(&p, dir.path(), None).unwrap();
        let path = dir.path().join("low_labels.pgm");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, &bytes).unwrap();
        let err = load_slide(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");
    }

    #[test]
    fn manifest_rejects_path_escapes() {
        let dir = tempfile::tempdir().unwrap();
        let p = synth_slide(&small_cfg(4)).unwrap();
        save_slide(&p, dir.path(), None).unwrap();
        let mp = dir.path().join("manifest.json");
        let text = fs::read_to_string(&mp).unwrap().replace("low.ppm", "../low.ppm");
        fs::write(&mp, text).unwrap();
        let err = load_slide(dir.path()).unwrap_err();
        assert!(err.to_string().contains("illegal file name"), "{err}");
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(SynthConfig { base_size: 100, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { class_palette: vec![[0.0; 3]; 2], ..SynthConfig::default() }
            .validate()
            .is_err());
        assert!(SynthConfig { noise_sigma: -1.0, ..SynthConfig::default() }.validate().is_err());
    }
}
