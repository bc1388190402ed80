//! Non-overlapping tile grids with hierarchical indices.
//!
//! A LOW tile (i,j) covers a 4x4 block of MID tiles (i,j,k), k = 4*row +
//! col in [0,15], and each MID tile covers 16 HIGH tiles (i,j,k,m). The
//! index arithmetic is pure; `build_manifest` turns a set of slides into
//! a capped, split train/test manifest of ALIGNED parent/child families
//! plus STANDALONE tiles, serialized as JSON-Lines.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::TileRaster;
use crate::rng::{self, choose_indices};
use crate::slidegen::{MagTag, SlidePyramid, SCALE_FACTOR};
use crate::Provenance;

/// Sub-grid fanout per level transition: 4x4 = 16 children.
pub const CHILDREN_PER_PARENT: usize = 16;
const SUB: u32 = SCALE_FACTOR; // 4

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Transition {
    #[serde(rename = "LOW_TO_MID")]
    LowToMid,
    #[serde(rename = "MID_TO_HIGH")]
    MidToHigh,
}

impl Transition {
    pub const ALL: [Transition; 2] = [Transition::LowToMid, Transition::MidToHigh];

    pub fn parent_level(self) -> MagTag {
        match self {
            Transition::LowToMid => MagTag::Low,
            Transition::MidToHigh => MagTag::Mid,
        }
    }

    pub fn child_level(self) -> MagTag {
        match self {
            Transition::LowToMid => MagTag::Mid,
            Transition::MidToHigh => MagTag::High,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "TRAIN")]
    Train,
    #[serde(rename = "TEST")]
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TileKind {
    #[serde(rename = "ALIGNED")]
    Aligned,
    #[serde(rename = "STANDALONE")]
    Standalone,
}

/// Hierarchical tile coordinate: (i,j) at LOW, (i,j,k) at MID,
/// (i,j,k,m) at HIGH with k,m in [0,15].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TileIndex {
    level: MagTag,
    coords: Vec<u32>,
}

impl TileIndex {
    pub fn new(level: MagTag, coords: Vec<u32>) -> Result<Self> {
        if coords.len() != level.coords_len() {
            return Err(Error::Format(format!(
                "tile index at {level} needs {} coords, got {}",
                level.coords_len(),
                coords.len()
            )));
        }
        for &sub in &coords[2..] {
            if sub >= CHILDREN_PER_PARENT as u32 {
                return Err(Error::Format(format!("sub-index {sub} outside [0,15]")));
            }
        }
        Ok(TileIndex { level, coords })
    }

    pub fn level(&self) -> MagTag {
        self.level
    }

    pub fn coords(&self) -> &[u32] {
        &self.coords
    }

    /// Grid position (row, col) of this tile at its own level.
    pub fn grid_cell(&self) -> (u32, u32) {
        let (mut row, mut col) = (self.coords[0], self.coords[1]);
        for &sub in &self.coords[2..] {
            row = row * SUB + sub / SUB;
            col = col * SUB + sub % SUB;
        }
        (row, col)
    }

    /// Inverse of `grid_cell`.
    pub fn from_cell(level: MagTag, row: u32, col: u32) -> Self {
        let depth = (level.coords_len() - 2) as u32;
        let top = SUB.pow(depth);
        let mut coords = vec![row / top, col / top];
        for d in (0..depth).rev() {
            let p = SUB.pow(d);
            let r = (row / p) % SUB;
            let c = (col / p) % SUB;
            coords.push(r * SUB + c);
        }
        TileIndex { level, coords }
    }
}

impl fmt::Display for TileIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.level)?;
        for (i, c) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// The 16 children of a LOW or MID tile, ordered by k = 4*row + col.
pub fn children_of(idx: &TileIndex) -> Result<Vec<TileIndex>> {
    let child_level = idx
        .level
        .finer()
        .ok_or_else(|| Error::Domain(format!("{idx} is at HIGH level and has no children")))?;
    Ok((0..CHILDREN_PER_PARENT as u32)
        .map(|k| {
            let mut coords = idx.coords.clone();
            coords.push(k);
            TileIndex { level: child_level, coords }
        })
        .collect())
}

pub fn parent_of(idx: &TileIndex) -> Result<TileIndex> {
    let parent_level = idx
        .level
        .coarser()
        .ok_or_else(|| Error::Domain(format!("{idx} is at LOW level and has no parent")))?;
    let mut coords = idx.coords.clone();
    coords.pop();
    Ok(TileIndex { level: parent_level, coords })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord {
    pub index: TileIndex,
    pub slide_id: String,
    /// Pixel origin at the tile's own level.
    pub x: usize,
    pub y: usize,
    pub tile_px: usize,
    pub label: u8,
    pub split: Split,
    pub kind: TileKind,
}

impl TileRecord {
    fn sort_key(&self) -> (&str, usize, &[u32], TileKind) {
        (&self.slide_id, self.index.level.index(), &self.index.coords, self.kind)
    }
}

/// Majority label over a rectangle of a label plane; ties break toward
/// the smallest class id.
fn rect_majority(labels: &[u8], width: usize, x: usize, y: usize, side: usize) -> u8 {
    let mut counts = [0u32; 256];
    for dy in 0..side {
        let row = (y + dy) * width;
        for dx in 0..side {
            counts[labels[row + x + dx] as usize] += 1;
        }
    }
    let mut best = (0u32, 0u8);
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt > best.0 {
            best = (cnt, c as u8);
        }
    }
    best.1
}

/// Enumerate the full tile grid of one level in row-major order. The
/// returned records carry TRAIN/STANDALONE placeholders; `build_manifest`
/// assigns real split and kind attributes.
pub fn tile_grid(slide: &SlidePyramid, level: MagTag, tile_px: usize) -> Result<Vec<TileRecord>> {
    let lv = slide.level(level);
    if tile_px == 0 || lv.width % tile_px != 0 || lv.height % tile_px != 0 {
        return Err(Error::Domain(format!(
            "level {level} of {} is {}x{}, not divisible by tile_px {tile_px}",
            slide.slide_id, lv.width, lv.height
        )));
    }
    let (cols, rows) = (lv.width / tile_px, lv.height / tile_px);
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let (x, y) = (col * tile_px, row * tile_px);
            out.push(TileRecord {
                index: TileIndex::from_cell(level, row as u32, col as u32),
                slide_id: slide.slide_id.clone(),
                x,
                y,
                tile_px,
                label: rect_majority(&lv.labels, lv.width, x, y, tile_px),
                split: Split::Train,
                kind: TileKind::Standalone,
            });
        }
    }
    Ok(out)
}

/// Exact 8-bit crop of a record's rect.
pub fn extract_bytes(slide: &SlidePyramid, rec: &TileRecord) -> Result<Vec<u8>> {
    if rec.slide_id != slide.slide_id {
        return Err(Error::Domain(format!(
            "record belongs to {}, not {}",
            rec.slide_id, slide.slide_id
        )));
    }
    let lv = slide.level(rec.index.level);
    if rec.x + rec.tile_px > lv.width || rec.y + rec.tile_px > lv.height {
        return Err(Error::Domain(format!(
            "tile rect {}px at ({},{}) exceeds level {} ({}x{})",
            rec.tile_px, rec.x, rec.y, rec.index.level, lv.width, lv.height
        )));
    }
    let mut out = Vec::with_capacity(rec.tile_px * rec.tile_px * 3);
    for dy in 0..rec.tile_px {
        let start = ((rec.y + dy) * lv.width + rec.x) * 3;
        out.extend_from_slice(&lv.raster[start..start + rec.tile_px * 3]);
    }
    Ok(out)
}

/// Crop as unit-interval reals (v/255), the network's input format.
pub fn extract_pixels(slide: &SlidePyramid, rec: &TileRecord) -> Result<TileRaster> {
    TileRaster::from_rgb8(rec.tile_px, &extract_bytes(slide, rec)?)
}

/// Per-class maxima. `None` = unlimited. `aligned` counts parent
/// families per transition; `standalone` counts tiles per class per
/// level.
#[derive(Debug, Clone, Default)]
pub struct Caps {
    pub aligned: BTreeMap<u8, usize>,
    pub standalone: BTreeMap<u8, usize>,
}

impl Caps {
    pub fn unlimited() -> Self {
        Caps::default()
    }

    pub fn uniform(n_classes: usize, aligned: Option<usize>, standalone: Option<usize>) -> Self {
        let mut caps = Caps::default();
        for c in 0..n_classes as u8 {
            if let Some(a) = aligned {
                if c != 0 {
                    caps.aligned.insert(c, a);
                }
            }
            if let Some(s) = standalone {
                caps.standalone.insert(c, s);
            }
        }
        caps
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    fn validate(&self, slides: &[&SlidePyramid]) -> Result<BTreeMap<String, Split>> {
        let mut map = BTreeMap::new();
        for (ids, split) in [(&self.train, Split::Train), (&self.test, Split::Test)] {
            for id in ids {
                if map.insert(id.clone(), split).is_some() {
                    return Err(Error::Config(format!("slide {id} assigned to both splits")));
                }
            }
        }
        for s in slides {
            if !map.contains_key(&s.slide_id) {
                return Err(Error::Config(format!("slide {} has no split assignment", s.slide_id)));
            }
        }
        Ok(map)
    }
}

/// A complete aligned family: indices into `TileManifest::records`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Family {
    pub parent: usize,
    pub children: [usize; CHILDREN_PER_PARENT],
}

#[derive(Debug, Clone)]
pub struct TileManifest {
    pub scale_factor: u32,
    pub class_names: Vec<String>,
    pub seed: u64,
    /// Sorted by (slide_id, level, coords, kind); unique on that key.
    pub records: Vec<TileRecord>,
    families_low_mid: Vec<Family>,
    families_mid_high: Vec<Family>,
}

impl TileManifest {
    /// Validates records, sorts them, and derives the pair tables. The
    /// pair table contains every non-Background ALIGNED parent whose 16
    /// children are all present as ALIGNED records of the same slide.
    pub fn from_parts(class_names: Vec<String>, seed: u64, mut records: Vec<TileRecord>) -> Result<Self> {
        let n_classes = class_names.len();
        if !(2..=256).contains(&n_classes) {
            return Err(Error::Format(format!("manifest: class count {n_classes} outside 2..=256")));
        }
        for r in &records {
            if r.label as usize >= n_classes {
                return Err(Error::Format(format!(
                    "record {}/{}: label {} out of range for {} classes",
                    r.slide_id, r.index, r.label, n_classes
                )));
            }
            if r.tile_px == 0 {
                return Err(Error::Format(format!("record {}/{}: tile_px 0", r.slide_id, r.index)));
            }
            let (row, col) = r.index.grid_cell();
            if r.x != col as usize * r.tile_px || r.y != row as usize * r.tile_px {
                return Err(Error::Format(format!(
                    "record {}/{}: origin ({},{}) inconsistent with grid cell ({row},{col})",
                    r.slide_id, r.index, r.x, r.y
                )));
            }
        }
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        for w in records.windows(2) {
            if w[0].sort_key() == w[1].sort_key() {
                return Err(Error::Format(format!(
                    "duplicate record {}/{}",
                    w[0].slide_id, w[0].index
                )));
            }
        }

        let mut m = TileManifest {
            scale_factor: SCALE_FACTOR,
            class_names,
            seed,
            records,
            families_low_mid: Vec::new(),
            families_mid_high: Vec::new(),
        };
        m.rebuild_families()?;
        Ok(m)
    }

    fn rebuild_families(&mut self) -> Result<()> {
        let mut aligned: BTreeMap<(&str, MagTag, &[u32]), usize> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.kind == TileKind::Aligned {
                aligned.insert((&r.slide_id, r.index.level, r.index.coords()), i);
            }
        }
        let mut fam_lm = Vec::new();
        let mut fam_mh = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.kind != TileKind::Aligned || r.label == 0 || r.index.level == MagTag::High {
                continue;
            }
            let children = children_of(&r.index).expect("LOW/MID parent");
            let mut idxs = [0usize; CHILDREN_PER_PARENT];
            let mut complete = true;
            for (slot, child) in children.iter().enumerate() {
                match aligned.get(&(r.slide_id.as_str(), child.level(), child.coords())) {
                    Some(&j) => idxs[slot] = j,
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                let fam = Family { parent: i, children: idxs };
                match r.index.level {
                    MagTag::Low => fam_lm.push(fam),
                    MagTag::Mid => fam_mh.push(fam),
                    MagTag::High => unreachable!(),
                }
            }
        }
        self.families_low_mid = fam_lm;
        self.families_mid_high = fam_mh;

        // Every ALIGNED MID/HIGH record must have its parent in the
        // manifest (as an ALIGNED record of the same slide).
        let aligned_set: std::collections::BTreeSet<(&str, MagTag, &[u32])> = self
            .records
            .iter()
            .filter(|r| r.kind == TileKind::Aligned)
            .map(|r| (r.slide_id.as_str(), r.index.level, r.index.coords()))
            .collect();
        for r in &self.records {
            if r.kind == TileKind::Aligned && r.index.level != MagTag::Low {
                let p = parent_of(&r.index).expect("MID/HIGH record");
                if !aligned_set.contains(&(r.slide_id.as_str(), p.level(), p.coords())) {
                    return Err(Error::Format(format!(
                        "aligned record {}/{} has no parent record",
                        r.slide_id, r.index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn families(&self, t: Transition) -> &[Family] {
        match t {
            Transition::LowToMid => &self.families_low_mid,
            Transition::MidToHigh => &self.families_mid_high,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Record indices matching the given filters (None = any).
    pub fn select(
        &self,
        level: Option<MagTag>,
        split: Option<Split>,
        kind: Option<TileKind>,
    ) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| {
                level.map_or(true, |l| r.index.level == l)
                    && split.map_or(true, |s| r.split == s)
                    && kind.map_or(true, |k| r.kind == k)
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct (slide, level, coords) record indices for a split,
    /// preferring the ALIGNED copy when a tile appears as both kinds.
    pub fn select_dedup(&self, split: Split) -> Vec<usize> {
        let mut seen: BTreeMap<(&str, MagTag, &[u32]), usize> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.split != split {
                continue;
            }
            // Records are sorted with ALIGNED before STANDALONE, so the
            // first hit wins.
            seen.entry((&r.slide_id, r.index.level, r.index.coords())).or_insert(i);
        }
        seen.into_values().collect()
    }
}

pub fn build_manifest(
    slides: &[SlidePyramid],
    tile_px: usize,
    caps: &Caps,
    split_assignment: &SplitAssignment,
    seed: u64,
) -> Result<TileManifest> {
    if slides.is_empty() {
        return Err(Error::Config("build_manifest: no slides".into()));
    }
    let mut refs: Vec<&SlidePyramid> = slides.iter().collect();
    refs.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    for w in refs.windows(2) {
        if w[0].slide_id == w[1].slide_id {
            return Err(Error::Config(format!("duplicate slide id {}", w[0].slide_id)));
        }
    }
    let class_names = refs[0].class_names.clone();
    for s in &refs {
        if s.class_names != class_names {
            return Err(Error::Config(format!("slide {} has different class names", s.slide_id)));
        }
    }
    let split_map = split_assignment.validate(&refs)?;
    let n_classes = class_names.len();
    for (name, caps_map) in [("aligned", &caps.aligned), ("standalone", &caps.standalone)] {
        if let Some((&c, _)) = caps_map.iter().find(|(&c, _)| c as usize >= n_classes) {
            return Err(Error::Config(format!("{name} cap for class {c} out of range")));
        }
    }
    if caps.aligned.get(&0).is_some() {
        return Err(Error::Config("Background cannot have an aligned-family cap: it has no pairs".into()));
    }

    // Full grids per slide and level; labels come from the label planes.
    let mut grids: BTreeMap<(&str, MagTag), Vec<TileRecord>> = BTreeMap::new();
    for s in &refs {
        let split = split_map[&s.slide_id];
        for level in MagTag::ALL {
            let mut g = tile_grid(s, level, tile_px)?;
            for r in &mut g {
                r.split = split;
            }
            grids.insert((s.slide_id.as_str(), level), g);
        }
    }

    // Candidate families: every non-Background parent tile. Children are
    // always complete because the grids tile exactly.
    // Candidate standalone tiles: every tile.
    type KeptMap = BTreeMap<(String, MagTag, Vec<u32>, TileKind), TileRecord>;
    let mut rng = rng::seeded(rng::derive_seed(seed, "caps"));
    let mut kept: KeptMap = BTreeMap::new();

    fn keep(kept: &mut KeptMap, rec: &TileRecord, kind: TileKind) {
        kept.insert(
            (rec.slide_id.clone(), rec.index.level, rec.index.coords().to_vec(), kind),
            TileRecord { kind, ..rec.clone() },
        );
    }

    for transition in Transition::ALL {
        let parent_level = transition.parent_level();
        for class in 1..n_classes as u8 {
            // Candidates in deterministic (slide, coords) order.
            let mut pool: Vec<(&str, usize)> = Vec::new();
            for s in &refs {
                let g = &grids[&(s.slide_id.as_str(), parent_level)];
                for (i, r) in g.iter().enumerate() {
                    if r.label == class {
                        pool.push((s.slide_id.as_str(), i));
                    }
                }
            }
            let picked: Vec<usize> = match caps.aligned.get(&class) {
                Some(&cap) => {
                    if cap == 0 && !pool.is_empty() {
                        return Err(Error::Config(format!(
                            "aligned cap for class {class} is 0 but {} candidate families exist",
                            pool.len()
                        )));
                    }
                    choose_indices(&mut rng, pool.len(), cap)
                }
                None => (0..pool.len()).collect(),
            };
            for pi in picked {
                let (slide_id, gi) = pool[pi];
                let parent = &grids[&(slide_id, parent_level)][gi];
                keep(&mut kept, parent, TileKind::Aligned);
                // Keep all 16 children of a kept parent.
                let child_level = transition.child_level();
                let children = children_of(&parent.index).expect("LOW/MID parent");
                let child_grid = &grids[&(slide_id, child_level)];
                let cols = (child_grid.len() as f64).sqrt() as u32;
                for child in children {
                    let (row, col) = child.grid_cell();
                    let rec = &child_grid[(row * cols + col) as usize];
                    debug_assert_eq!(rec.index, child);
                    keep(&mut kept, rec, TileKind::Aligned);
                }
                // Ancestor closure: a MID parent kept for MID->HIGH must
                // itself have its LOW parent present as an ALIGNED record.
                if parent_level == MagTag::Mid {
                    let low = parent_of(&parent.index).expect("MID parent");
                    let low_grid = &grids[&(slide_id, MagTag::Low)];
                    let cols = (low_grid.len() as f64).sqrt() as u32;
                    let (row, col) = low.grid_cell();
                    keep(&mut kept, &low_grid[(row * cols + col) as usize], TileKind::Aligned);
                }
            }
        }
    }

    // Standalone tiles, capped per (class, level).
    for level in MagTag::ALL {
        for class in 0..n_classes as u8 {
            let mut pool: Vec<(&str, usize)> = Vec::new();
            for s in &refs {
                let g = &grids[&(s.slide_id.as_str(), level)];
                for (i, r) in g.iter().enumerate() {
                    if r.label == class {
                        pool.push((s.slide_id.as_str(), i));
                    }
                }
            }
            let picked: Vec<usize> = match caps.standalone.get(&class) {
                Some(&cap) => {
                    if cap == 0 && !pool.is_empty() {
                        return Err(Error::Config(format!(
                            "standalone cap for class {class} is 0 but {} candidates exist",
                            pool.len()
                        )));
                    }
                    choose_indices(&mut rng, pool.len(), cap)
                }
                None => (0..pool.len()).collect(),
            };
            for pi in picked {
                let (slide_id, gi) = pool[pi];
                keep(&mut kept, &grids[&(slide_id, level)][gi], TileKind::Standalone);
            }
        }
    }

    TileManifest::from_parts(class_names, seed, kept.into_values().collect())
}

// ---------------------------------------------------------------------
// JSON-Lines interchange

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    version: u32,
    scale_factor: u32,
    class_names: Vec<String>,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    slide: String,
    level: MagTag,
    coords: Vec<u32>,
    x: usize,
    y: usize,
    tile_px: usize,
    label: u8,
    split: Split,
    kind: TileKind,
}

pub fn write_manifest(m: &TileManifest, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
    let mut out = Vec::new();
    let header = HeaderLine {
        version: 1,
        scale_factor: m.scale_factor,
        class_names: m.class_names.clone(),
        seed: m.seed,
        provenance: provenance.cloned(),
    };
    serde_json::to_writer(&mut out, &header).expect("header serializes");
    out.push(b'\n');
    for r in &m.records {
        let line = RecordLine {
            slide: r.slide_id.clone(),
            level: r.index.level,
            coords: r.index.coords().to_vec(),
            x: r.x,
            y: r.y,
            tile_px: r.tile_px,
            label: r.label,
            split: r.split,
            kind: r.kind,
        };
        serde_json::to_writer(&mut out, &line).expect("record serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse a manifest from raw bytes. Strict: bad version, out-of-range
/// coords or labels, inconsistent origins, and duplicates are all errors.
pub fn read_manifest_bytes(bytes: &[u8]) -> Result<TileManifest> {
    let mut lines = bytes.lines();
    let header_line = match lines.next() {
        Some(Ok(l)) => l,
        Some(Err(e)) => return Err(Error::Format(format!("manifest header: {e}"))),
        None => return Err(Error::Format("empty tile manifest".into())),
    };
    let header: HeaderLine = serde_json::from_str(&header_line)?;
    if header.version != 1 {
        return Err(Error::Format(format!("unsupported tile manifest version {}", header.version)));
    }
    if header.scale_factor != SCALE_FACTOR {
        return Err(Error::Format(format!(
            "tile manifest scale_factor {} (expected {SCALE_FACTOR})",
            header.scale_factor
        )));
    }
    let mut records = Vec::new();
    for (li, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Format(format!("manifest line {}: {e}", li + 2)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rl: RecordLine =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", li + 2)))?;
        records.push(TileRecord {
            index: TileIndex::new(rl.level, rl.coords)?,
            slide_id: rl.slide,
            x: rl.x,
            y: rl.y,
            tile_px: rl.tile_px,
            label: rl.label,
            split: rl.split,
            kind: rl.kind,
        });
    }
    TileManifest::from_parts(header.class_names, header.seed, records)
}

pub fn load_manifest(path: &Path) -> Result<TileManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_manifest_bytes(&bytes)
}
