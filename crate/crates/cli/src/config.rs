//! One JSON file drives every subcommand. Every field has a default, so
//! `{}` is a complete config; the resolved form (defaults expanded, zero
//! seeds replaced by derived ones) is echoed next to the artifacts it
//! produced, and its hash goes into every provenance stamp.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mad_core::distill::{TrainConfig, TrainMode};
use mad_core::evalsuite::ProbeConfig;
use mad_core::nnet::ViTConfig;
use mad_core::rng::derive_seed;
use mad_core::slidegen::SynthConfig;
use mad_core::tiler::SplitAssignment;
use mad_core::{sha256_hex, Error, Provenance, Result, TOOL_VERSION};

/// Artifact locations. `out` is the tree root (`--out` replaces it); the
/// rest are relative to `out`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out: PathBuf,
    pub slides: String,
    pub tiles: String,
    pub runs: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            out: PathBuf::from("out"),
            slides: "slides".into(),
            tiles: "tiles.jsonl".into(),
            runs: "runs".into(),
        }
    }
}

/// Uniform per-class manifest caps; `null` keeps every candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsSection {
    pub aligned: Option<usize>,
    pub standalone: Option<usize>,
}

impl Default for CapsSection {
    fn default() -> Self {
        CapsSection { aligned: Some(24), standalone: Some(24) }
    }
}

/// Slide ids per split; defaults pair with the default synth section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: (0..8).map(|i| format!("train_{i:02}")).collect(),
            test: (0..2).map(|i| format!("test_{i:02}")).collect(),
        }
    }
}

impl SplitSection {
    pub fn assignment(&self) -> SplitAssignment {
        SplitAssignment { train: self.train.clone(), test: self.test.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingSection {
    pub tile_px: usize,
    pub caps: CapsSection,
    pub split: SplitSection,
}

impl Default for TilingSection {
    fn default() -> Self {
        TilingSection { tile_px: 32, caps: CapsSection::default(), split: SplitSection::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub distill: TrainConfig,
    pub vit: ViTConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Neighbours for the k-NN classifier.
    pub k: usize,
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    /// Negatives per parent in the consistency analysis.
    pub n_neg: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: 20,
            kmeans_k: 5,
            kmeans_iters: 100,
            kmeans_restarts: 8,
            n_neg: 4,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed; `--seed` replaces it. Stage seeds left at 0 are derived
    /// from this one.
    pub seed: u64,
    pub paths: PathsSection,
    pub synth: Vec<SynthConfig>,
    pub tiling: TilingSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let split = SplitSection::default();
        let synth = split
            .train
            .iter()
            .chain(&split.test)
            .map(|id| SynthConfig { slide_id: id.clone(), ..SynthConfig::default() })
            .collect();
        RunConfig {
            seed: 0,
            paths: PathsSection::default(),
            synth,
            tiling: TilingSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn slides_dir(&self) -> PathBuf {
        self.paths.out.join(&self.paths.slides)
    }

    pub fn slide_dir(&self, id: &str) -> PathBuf {
        self.slides_dir().join(id)
    }

    pub fn tiles_path(&self) -> PathBuf {
        self.paths.out.join(&self.paths.tiles)
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.paths.out.join(&self.paths.runs)
    }

    /// Artifacts for one (mode, seed) combination.
    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir().join(format!("{}_s{}", mode_dir(self.train.distill.mode), self.seed))
    }
}

pub fn mode_dir(m: TrainMode) -> &'static str {
    match m {
        TrainMode::Mad => "mad",
        TrainMode::Baseline => "baseline",
    }
}

/// Command-line overrides applied before resolution.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<TrainMode>,
}

/// A validated config with every seed pinned, plus the provenance stamp
/// shared by everything this invocation writes.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: RunConfig,
    pub provenance: Provenance,
}

pub fn resolve(mut cfg: RunConfig, ov: &Overrides) -> Result<Resolved> {
    if let Some(out) = &ov.out {
        cfg.paths.out = out.clone();
    }
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = ov.mode {
        cfg.train.distill.mode = mode;
    }

    // Stage seeds left at 0 get independent streams derived from the run
    // seed; the derived values are what get echoed and hashed.
    for s in &mut cfg.synth {
        if s.seed == 0 {
            s.seed = derive_seed(cfg.seed, &format!("synth/{}", s.slide_id));
        }
        s.tile_px = cfg.tiling.tile_px;
    }
    if cfg.train.distill.seed == 0 {
        cfg.train.distill.seed = derive_seed(cfg.seed, "train");
    }

    validate(&cfg)?;
    let provenance = Provenance {
        config_sha256: config_hash(&cfg)?,
        seed: cfg.seed,
        tool_version: TOOL_VERSION.to_string(),
    };
    Ok(Resolved { cfg, provenance })
}

/// Hash of the resolved config with `paths` removed, so identical runs
/// into different directories stamp identical artifacts.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let mut v = serde_json::to_value(cfg)?;
    v.as_object_mut().expect("config serializes to an object").remove("paths");
    Ok(sha256_hex(v.to_string().as_bytes()))
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if cfg.synth.is_empty() {
        return Err(Error::Config("synth: at least one slide required".into()));
    }
    let ids: BTreeSet<&str> = cfg.synth.iter().map(|s| s.slide_id.as_str()).collect();
    if ids.len() != cfg.synth.len() {
        return Err(Error::Config("synth: duplicate slide ids".into()));
    }
    let mut assigned = BTreeSet::new();
    for id in cfg.tiling.split.train.iter().chain(&cfg.tiling.split.test) {
        if !ids.contains(id.as_str()) {
            return Err(Error::Config(format!("tiling.split names unknown slide {id}")));
        }
        if !assigned.insert(id.as_str()) {
            return Err(Error::Config(format!("tiling.split assigns {id} twice")));
        }
    }
    if assigned.len() != ids.len() {
        let missing: Vec<&&str> = ids.iter().filter(|i| !assigned.contains(**i)).collect();
        return Err(Error::Config(format!("tiling.split misses slides {missing:?}")));
    }
    if cfg.eval.k == 0 {
        return Err(Error::Config("eval.k must be >= 1".into()));
    }
    if cfg.eval.kmeans_k < 2 {
        return Err(Error::Config("eval.kmeans_k must be >= 2".into()));
    }
    if cfg.eval.kmeans_iters == 0 || cfg.eval.kmeans_restarts == 0 {
        return Err(Error::Config("eval.kmeans_iters and kmeans_restarts must be >= 1".into()));
    }
    if cfg.eval.n_neg == 0 {
        return Err(Error::Config("eval.n_neg must be >= 1".into()));
    }
    Ok(())
}
