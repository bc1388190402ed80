//! Frozen-embedding extraction and the MADE interchange format.
//!
//! MADE layout: magic "MADE", u32 version, u32 row count, u32 dim, then
//! N·D little-endian f32 row-major. Per-row metadata travels in a
//! `.meta.jsonl` sidecar, one JSON object per row, same order.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::ModelState;
use crate::error::{Error, Result};
use crate::nnet::model::forward;
use crate::nnet::params::Params;
use crate::slidegen::MagTag;
use crate::tiler::{extract_pixels, Split, TileKind, TileManifest};
use crate::views::SlideSet;

pub const EMB_MAGIC: &[u8; 4] = b"MADE";
pub const EMB_VERSION: u32 = 1;
/// Decode guards; desk-scale sets are far below either bound.
const MAX_ROWS: u32 = 1 << 24;
const MAX_DIM: u32 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WhichNet {
    #[serde(rename = "TEACHER")]
    Teacher,
    #[serde(rename = "STUDENT")]
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowMeta {
    pub slide: String,
    pub level: MagTag,
    pub coords: Vec<u32>,
    pub label: u8,
    pub split: Split,
    pub kind: TileKind,
}

/// N×D embedding rows plus aligned per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub rows: Vec<Vec<f64>>,
    pub meta: Vec<RowMeta>,
    pub source_checkpoint: String,
    pub net: WhichNet,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.meta.len() {
            return Err(Error::Domain(format!(
                "{} rows but {} meta entries",
                self.rows.len(),
                self.meta.len()
            )));
        }
        let d = self.dim();
        if self.rows.iter().any(|r| r.len() != d) {
            return Err(Error::Domain("ragged embedding rows".into()));
        }
        Ok(())
    }

    /// Distinct levels present, in pyramid order.
    pub fn levels(&self) -> Vec<MagTag> {
        let set: BTreeSet<usize> = self.meta.iter().map(|m| m.level.index()).collect();
        [MagTag::Low, MagTag::Mid, MagTag::High]
            .into_iter()
            .filter(|l| set.contains(&l.index()))
            .collect()
    }
}

/// Record selection for `embed_tiles`; `None` means no constraint.
#[derive(Debug, Clone, Default)]
pub struct EmbedFilter {
    pub levels: Option<Vec<MagTag>>,
    pub splits: Option<Vec<Split>>,
    pub kinds: Option<Vec<TileKind>>,
    /// Keep one record per (slide, level, coords); ALIGNED copy wins
    /// since manifests sort it first.
    pub dedup: bool,
}

impl EmbedFilter {
    pub fn level(l: MagTag, s: Split) -> EmbedFilter {
        EmbedFilter {
            levels: Some(vec![l]),
            splits: Some(vec![s]),
            kinds: None,
            dedup: true,
        }
    }

    fn keeps(&self, m: &crate::tiler::TileRecord) -> bool {
        self.levels.as_ref().map_or(true, |ls| ls.contains(&m.index.level()))
            && self.splits.as_ref().map_or(true, |ss| ss.contains(&m.split))
            && self.kinds.as_ref().map_or(true, |ks| ks.contains(&m.kind))
    }
}

/// Embed every manifest record the filter keeps, un-augmented, in
/// manifest order (slide, level, coords). Parallel over tiles with
/// ordered collection, so output is thread-count independent.
pub fn embed_tiles(
    state: &ModelState,
    manifest: &TileManifest,
    slides: &SlideSet,
    net: WhichNet,
    filter: &EmbedFilter,
    source_checkpoint: &str,
) -> Result<EmbeddingSet> {
    let params: &Params = match net {
        WhichNet::Teacher => &state.teacher,
        WhichNet::Student => &state.student,
    };
    let mut picked: Vec<usize> = Vec::new();
    let mut seen: BTreeSet<(&str, usize, &[u32])> = BTreeSet::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if !filter.keeps(r) {
            continue;
        }
        if filter.dedup && !seen.insert((&r.slide_id, r.index.level().index(), r.index.coords())) {
            continue;
        }
        picked.push(i);
    }

    let rows: Vec<Vec<f64>> = picked
        .par_iter()
        .map(|&i| {
            let rec = &manifest.records[i];
            let tile = extract_pixels(slides.get(&rec.slide_id)?, rec)?;
            Ok(forward(params, &tile)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = picked
        .iter()
        .map(|&i| {
            let r = &manifest.records[i];
            RowMeta {
                slide: r.slide_id.clone(),
                level: r.index.level(),
                coords: r.index.coords().to_vec(),
                label: r.label,
                split: r.split,
                kind: r.kind,
            }
        })
        .collect();
    Ok(EmbeddingSet {
        rows,
        meta,
        source_checkpoint: source_checkpoint.to_string(),
        net,
    })
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    set.validate()?;
    let n = set.len();
    let d = set.dim();
    if n as u64 > MAX_ROWS as u64 || d as u64 > MAX_DIM as u64 {
        return Err(Error::Domain(format!("embedding set {n}x{d} exceeds format bounds")));
    }
    let mut out = Vec::with_capacity(16 + n * d * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for row in &set.rows {
        for &v in row {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite embedding value {v}")));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Strict decode of the binary part: exact payload length, finite
/// values, bounded dims. Returns rows only; metadata lives in the
/// sidecar.
pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 16 {
        return Err(Error::Format("truncated embedding header".into()));
    }
    if &bytes[..4] != EMB_MAGIC {
        return Err(Error::Format("bad magic (expected MADE)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != EMB_VERSION {
        return Err(Error::Format(format!("unsupported embedding version {version}")));
    }
    let n = word(8);
    let d = word(12);
    if n > MAX_ROWS || d > MAX_DIM {
        return Err(Error::Format(format!("implausible embedding dims {n}x{d}")));
    }
    let payload = &bytes[16..];
    let want = (n as usize) * (d as usize) * 4;
    if payload.len() != want {
        return Err(Error::Format(format!(
            "embedding payload is {} bytes, header implies {want}",
            payload.len()
        )));
    }
    let mut rows = Vec::with_capacity(n as usize);
    for i in 0..n as usize {
        let mut row = Vec::with_capacity(d as usize);
        for j in 0..d as usize {
            let off = (i * d as usize + j) * 4;
            let v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format(format!("non-finite value in embedding row {i}")));
            }
            row.push(v as f64);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    fs::write(path, encode_embeddings(set)?).map_err(|e| Error::io(path, e))?;
    let mut meta = String::new();
    for m in &set.meta {
        meta.push_str(&serde_json::to_string(m)?);
        meta.push('\n');
    }
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

pub fn decode_meta_lines(text: &str) -> Result<Vec<RowMeta>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("bad meta line: {e}"))))
        .collect()
}

/// Reads binary + sidecar. Net and source are restored by the caller
/// from its own provenance records; files alone don't carry them.
pub fn read_embeddings(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<RowMeta>)> {
    let rows = decode_embeddings(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
    let mp = meta_path(path);
    let meta = decode_meta_lines(&fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?)?;
    if rows.len() != meta.len() {
        return Err(Error::Format(format!(
            "{} embedding rows but {} meta lines",
            rows.len(),
            meta.len()
        )));
    }
    Ok((rows, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{Params, ViTConfig};
    use crate::rng::seeded;
    use crate::slidegen::{synth_slide, SynthConfig};
    use crate::tiler::{build_manifest, Caps, SplitAssignment};
    use rand::Rng;

    fn sample_set() -> EmbeddingSet {
        let mut rng = seeded(6);
        // Pre-quantize to f32 so the on-disk roundtrip is exact.
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0) as f32 as f64).collect())
            .collect();
        let meta: Vec<RowMeta> = (0..7)
            .map(|i| RowMeta {
                slide: format!("s{i:03}"),
                level: MagTag::Mid,
                coords: vec![i, 1, 2],
                label: (i % 3) as u8,
                split: if i % 2 == 0 { Split::Train } else { Split::Test },
                kind: TileKind::Aligned,
            })
            .collect();
        EmbeddingSet { rows, meta, source_checkpoint: "ck0".into(), net: WhichNet::Teacher }
    }

    #[test]
    fn made_roundtrip_is_exact() {
        let set = sample_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.made");
        write_embeddings(&path, &set).unwrap();
        let (rows, meta) = read_embeddings(&path).unwrap();
        assert_eq!(rows, set.rows);
        assert_eq!(meta, set.meta);
        // Binary is byte-stable.
        assert_eq!(encode_embeddings(&set).unwrap(), encode_embeddings(&set).unwrap());
    }

    #[test]
    fn decode_rejects_malformed_bytes() {
        let good = encode_embeddings(&sample_set()).unwrap();
        assert!(decode_embeddings(&good).is_ok());
        assert!(decode_embeddings(&good[..10]).is_err(), "truncated header");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_embeddings(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(decode_embeddings(&bad).unwrap_err().to_string().contains("version"));
        let mut short = good.clone();
        short.truncate(good.len() - 3);
        assert!(decode_embeddings(&short).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_embeddings(&long).is_err(), "trailing bytes");
        // NaN payload.
        let mut nan = good;
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_embeddings(&nan).is_err());
    }

    #[test]
    fn meta_lines_roundtrip_and_reject_junk() {
        let set = sample_set();
        let mut text = String::new();
        for m in &set.meta {
            text.push_str(&serde_json::to_string(m).unwrap());
            text.push('\n');
        }
        assert_eq!(decode_meta_lines(&text).unwrap(), set.meta);
        assert!(decode_meta_lines("{\"slide\": 3}\n").is_err());
        assert!(decode_meta_lines("not json\n").is_err());
    }

    #[test]
    fn embed_tiles_is_deterministic_and_ordered() {
        let slides_vec: Vec<_> = (0..2u64)
            .map(|seed| {
                synth_slide(&SynthConfig {
                    slide_id: format!("e{seed:03}"),
                    seed: seed + 60,
                    base_size: 128,
                    tile_px: 8,
                    ..SynthConfig::default()
                })
                .unwrap()
            })
            .collect();
        let split = SplitAssignment { train: vec!["e000".into()], test: vec!["e001".into()] };
        let manifest = build_manifest(&slides_vec, 8, &Caps::uniform(4, Some(3), Some(3)), &split, 5).unwrap();
        let slides = SlideSet::new(slides_vec).unwrap();
        let cfg = ViTConfig {
            image_px: 8,
            patch_px: 4,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            n_registers: 1,
            head_hidden: 16,
            head_bottleneck: 8,
            n_prototypes: 12,
        };
        let params = Params::init(cfg, &mut seeded(2)).unwrap();
        let state = crate::distill::ModelState {
            student: params.clone(),
            teacher: params,
            center: vec![0.0; 12],
            step: 0,
            rng: seeded(0),
        };
        let filter = EmbedFilter::level(MagTag::Mid, Split::Test);
        let a = embed_tiles(&state, &manifest, &slides, WhichNet::Teacher, &filter, "ck").unwrap();
        let b = embed_tiles(&state, &manifest, &slides, WhichNet::Teacher, &filter, "ck").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 16);
        assert!(a.len() > 0);
        // Cardinality matches a hand count of matching records.
        let mut seen = BTreeSet::new();
        let want = manifest
            .records
            .iter()
            .filter(|r| r.index.level() == MagTag::Mid && r.split == Split::Test)
            .filter(|r| seen.insert((r.slide_id.clone(), r.index.coords().to_vec())))
            .count();
        assert_eq!(a.len(), want);
        // Meta mirrors the manifest records, in manifest order.
        assert!(a.meta.windows(2).all(|w| (&w[0].slide, &w[0].coords) < (&w[1].slide, &w[1].coords)));
        assert!(a.meta.iter().all(|m| m.level == MagTag::Mid && m.split == Split::Test));
        // Teacher and student start identical here, so nets agree.
        let s = embed_tiles(&state, &manifest, &slides, WhichNet::Student, &filter, "ck").unwrap();
        assert_eq!(a.rows, s.rows);
    }

    #[test]
    fn embedding_set_validates_shape() {
        let mut set = sample_set();
        set.rows[3].pop();
        assert!(set.validate().is_err());
        let mut set = sample_set();
        set.meta.pop();
        assert!(set.validate().is_err());
    }
}
