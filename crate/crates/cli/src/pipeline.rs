//! The seven subcommands. Each one reads its inputs from the paths in
//! the resolved config, writes its artifacts plus a `<cmd>.run.json`
//! echo of the exact config it ran under, and stamps everything with the
//! shared provenance block. No state passes between commands except
//! through these files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use mad_core::distill::{load_state, save_state, train, write_trace};
use mad_core::evalsuite::metrics::{MetricsDetail, Segmentation};
use mad_core::evalsuite::{
    ami, consistency_analysis, consistency_pct, dbi, embed_tiles, gt_grid, kmeans, knn_classify,
    macro_f1, named_f1, pca_export, pool_grids, read_embeddings, segment, train_probe,
    write_embeddings, EmbedFilter, EmbeddingSet, Metrics, ProbeModel, WhichNet,
};
use mad_core::rng::derive_seed;
use mad_core::slidegen::{class_pixel_shares, load_slide, synth_slide, MagTag, SlidePyramid};
use mad_core::tiler::{build_manifest, load_manifest, write_manifest, Caps, Split, TileManifest};
use mad_core::views::SlideSet;
use mad_core::{Error, Provenance, Result};

use crate::config::{mode_dir, Resolved, RunConfig};

const CHECKPOINT_FILE: &str = "checkpoint.madc";

/// Embedding sets written by `embed` and consumed by `probe`/`eval`.
const EMB_TRAIN_MID: &str = "emb_train_mid.made";
const EMB_TEST_MID: &str = "emb_test_mid.made";
const EMB_TEST_HIGH: &str = "emb_test_high.made";

pub fn cmd_synth(r: &Resolved) -> Result<()> {
    ensure_dir(&r.cfg.slides_dir())?;
    for sc in &r.cfg.synth {
        let p = synth_slide(sc)?;
        save_slide_checked(&p, &r.cfg.slide_dir(&sc.slide_id), r)?;
        let shares = class_pixel_shares(p.level(MagTag::High), p.n_classes());
        // Full-precision shares: downstream checks re-sum the printed
        // numbers.
        let cells: Vec<String> =
            p.class_names.iter().zip(&shares).map(|(n, s)| format!("{n}={s}")).collect();
        println!("{} {}", sc.slide_id, cells.join(" "));
    }
    log::info!("synth: {} slides -> {}", r.cfg.synth.len(), r.cfg.slides_dir().display());
    write_echo("synth", &r.cfg.paths.out, r)
}

fn save_slide_checked(p: &SlidePyramid, dir: &Path, r: &Resolved) -> Result<()> {
    ensure_dir(dir)?;
    mad_core::slidegen::save_slide(p, dir, Some(&r.provenance))
}

pub fn cmd_tile(r: &Resolved) -> Result<()> {
    let slides = load_slides(&r.cfg, None)?;
    let n_classes = slides[0].class_names.len();
    let caps = Caps::uniform(n_classes, r.cfg.tiling.caps.aligned, r.cfg.tiling.caps.standalone);
    let manifest = build_manifest(
        &slides,
        r.cfg.tiling.tile_px,
        &caps,
        &r.cfg.tiling.split.assignment(),
        derive_seed(r.cfg.seed, "tiling"),
    )?;
    ensure_dir(&r.cfg.paths.out)?;
    write_manifest(&manifest, &r.cfg.tiles_path(), Some(&r.provenance))?;
    log::info!(
        "tile: {} records over {} slides -> {}",
        manifest.records.len(),
        slides.len(),
        r.cfg.tiles_path().display()
    );
    write_echo("tile", &r.cfg.paths.out, r)
}

pub fn cmd_train(r: &Resolved) -> Result<()> {
    let manifest = load_tiles(&r.cfg)?;
    let slides = SlideSet::new(load_slides(&r.cfg, None)?)?;
    let run_dir = r.cfg.run_dir();
    ensure_dir(&run_dir)?;
    let t0 = Instant::now();
    let (state, trace) =
        train(&manifest, &slides, r.cfg.train.vit, &r.cfg.train.distill, Some(&run_dir))?;
    save_state(&run_dir.join(CHECKPOINT_FILE), &state, Some(&r.provenance))?;
    let trace_path = run_dir.join("trace.csv");
    write_trace(&trace_path, &trace)?;
    write_sidecar(&trace_path, r, None)?;
    if let Some(last) = trace.last() {
        log::info!(
            "train[{}]: {} steps in {:.0}s, loss {:.4} -> {:.4}",
            mode_dir(r.cfg.train.distill.mode),
            state.step,
            t0.elapsed().as_secs_f64(),
            trace.first().map_or(f64::NAN, |t| t.loss),
            last.loss
        );
    }
    write_echo("train", &run_dir, r)
}

pub fn cmd_embed(r: &Resolved) -> Result<()> {
    let run_dir = r.cfg.run_dir();
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    require(&ckpt, "train")?;
    let state = load_state(&ckpt)?;
    let manifest = load_tiles(&r.cfg)?;
    let slides = SlideSet::new(load_slides(&r.cfg, None)?)?;
    for (name, level, split) in [
        (EMB_TRAIN_MID, MagTag::Mid, Split::Train),
        (EMB_TEST_MID, MagTag::Mid, Split::Test),
        (EMB_TEST_HIGH, MagTag::High, Split::Test),
    ] {
        let set = embed_tiles(
            &state,
            &manifest,
            &slides,
            WhichNet::Teacher,
            &EmbedFilter::level(level, split),
            CHECKPOINT_FILE,
        )?;
        let path = run_dir.join(name);
        write_embeddings(&path, &set)?;
        write_sidecar(&path, r, Some(&set))?;
        log::info!("embed: {} rows x {} -> {}", set.len(), set.dim(), path.display());
    }
    write_echo("embed", &run_dir, r)
}

/// probe.json: the trained linear probe plus the provenance stamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeDoc {
    pub provenance: Provenance,
    pub model: ProbeModel,
}

pub fn cmd_probe(r: &Resolved) -> Result<()> {
    let run_dir = r.cfg.run_dir();
    let train_set = read_set(&run_dir.join(EMB_TRAIN_MID))?;
    let model = train_probe(&train_set, &r.cfg.eval.probe)?;
    if !model.trained_on.is_zero_shot() {
        return Err(Error::Domain(format!(
            "probe trained on levels {:?} splits {:?}; the zero-shot protocol allows MID/TRAIN only",
            model.trained_on.levels, model.trained_on.splits
        )));
    }
    if let Some(last) = model.log.last() {
        log::info!("probe: {} rows, final train acc {:.3}", model.trained_on.n_rows, last.acc);
    }
    let doc = ProbeDoc { provenance: r.provenance.clone(), model };
    write_json(&run_dir.join("probe.json"), &doc)?;
    write_echo("probe", &run_dir, r)
}

pub fn cmd_eval(r: &Resolved) -> Result<()> {
    let run_dir = r.cfg.run_dir();
    let train_mid = read_set(&run_dir.join(EMB_TRAIN_MID))?;
    let mid_test = read_set(&run_dir.join(EMB_TEST_MID))?;
    let high_test = read_set(&run_dir.join(EMB_TEST_HIGH))?;
    let probe_path = run_dir.join("probe.json");
    require(&probe_path, "probe")?;
    let probe: ProbeDoc = read_json(&probe_path)?;
    let probe = probe.model;
    if !probe.trained_on.is_zero_shot() {
        return Err(Error::Domain(
            "probe.json was not trained zero-shot (MID/TRAIN only)".into(),
        ));
    }
    let manifest = load_tiles(&r.cfg)?;
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    require(&ckpt, "train")?;
    let state = load_state(&ckpt)?;
    let test_slides = load_slides(&r.cfg, Some(&r.cfg.tiling.split.test))?;
    let eval_seed = derive_seed(r.cfg.seed, "eval");

    // Zero-shot linear probe and k-NN on TEST MID tiles.
    let gt: Vec<u8> = mid_test.meta.iter().map(|m| m.label).collect();
    let (probe_f1, probe_per) = macro_f1(&probe.predict_set(&mid_test.rows), &gt)?;
    let (knn_f1, knn_per) = macro_f1(&knn_classify(&train_mid, &mid_test, r.cfg.eval.k)?, &gt)?;

    // Unsupervised structure of the same embeddings.
    let km = kmeans(
        &mid_test.rows,
        r.cfg.eval.kmeans_k,
        r.cfg.eval.kmeans_iters,
        r.cfg.eval.kmeans_restarts,
        eval_seed,
    )?;
    let gt_ids: Vec<usize> = gt.iter().map(|&l| l as usize).collect();
    let ami_v = ami(&km.labels, &gt_ids)?;
    let dbi_v = match dbi(&mid_test.rows, &km.labels) {
        Ok(v) => Some(v),
        Err(Error::Numerical(msg)) if msg.contains("degenerate centroids") => {
            log::warn!("dbi degenerate ({msg}); writing null");
            None
        }
        Err(e) => return Err(e),
    };

    let cons = consistency_analysis(&mid_test, &high_test, &manifest, r.cfg.eval.n_neg, eval_seed)?;

    // Dense zero-shot segmentation over the full TEST grids, pooled per
    // level across slides.
    let grids = |level: MagTag| -> Result<Vec<(Vec<Vec<u8>>, Vec<Vec<u8>>)>> {
        test_slides
            .iter()
            .map(|s| {
                let pred = segment(&state.teacher, &probe, s, level, r.cfg.tiling.tile_px)?;
                let gt = gt_grid(s, level, r.cfg.tiling.tile_px)?;
                Ok((pred, gt))
            })
            .collect()
    };
    let seg_mid = pool_grids(&grids(MagTag::Mid)?, &manifest.class_names)?;
    let seg_high = pool_grids(&grids(MagTag::High)?, &manifest.class_names)?;
    let pct = consistency_pct(seg_mid.miou, seg_high.miou)?;

    let pca_path = run_dir.join("pca.csv");
    pca_export(&mid_test, &high_test, &manifest, &pca_path)?;
    write_sidecar(&pca_path, r, None)?;

    let mut segmentation_per_class = std::collections::BTreeMap::new();
    for (level, rep) in [("MID", &seg_mid), ("HIGH", &seg_high)] {
        segmentation_per_class.insert(
            level.to_string(),
            rep.per_class.iter().map(|(c, s)| (c.clone(), s.iou)).collect(),
        );
    }
    let metrics = Metrics {
        probe_f1_per_class: named_f1(&probe_per, &manifest.class_names)?,
        knn_f1_per_class: named_f1(&knn_per, &manifest.class_names)?,
        ami: ami_v,
        dbi: dbi_v,
        consistency: (&cons).into(),
        segmentation: Segmentation {
            mid: (&seg_mid).into(),
            high: (&seg_high).into(),
            consistency_pct: pct,
        },
        detail: MetricsDetail {
            probe_macro_f1: probe_f1,
            knn_macro_f1: knn_f1,
            kmeans_wcss: km.wcss,
            consistency_report: cons,
            segmentation_per_class,
        },
        provenance: r.provenance.clone(),
    };
    let path = run_dir.join("metrics.json");
    fs::write(&path, metrics.to_json()?).map_err(|e| Error::io(&path, e))?;
    log::info!(
        "eval: ami {:.4}, probe f1 {:.3}, knn f1 {:.3}, d_hier {:+.4}, consistency {:.1}%",
        metrics.ami,
        probe_f1,
        knn_f1,
        metrics.consistency.delta_hier,
        pct
    );
    write_echo("eval", &run_dir, r)
}

/// One evaluated run in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub run: String,
    pub mode: String,
    pub seed: u64,
    pub consistency_pct: f64,
    pub ami: f64,
    pub delta_hier: f64,
    pub delta_sem: f64,
    pub probe_macro_f1: f64,
    pub knn_macro_f1: f64,
    pub miou_mid: f64,
    pub miou_high: f64,
}

/// Per-mode medians over seeds; the MAD-vs-BASELINE comparison lives
/// here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: String,
    pub n_runs: usize,
    pub consistency_pct: f64,
    pub ami: f64,
    pub delta_hier: f64,
    pub delta_sem: f64,
    pub probe_macro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<RunRow>,
    pub medians: Vec<ModeRow>,
    pub provenance: Provenance,
}

pub fn cmd_report(r: &Resolved) -> Result<()> {
    let runs_dir = r.cfg.runs_dir();
    require(&runs_dir, "eval")?;
    let mut rows = Vec::new();
    let mut names: Vec<PathBuf> = fs::read_dir(&runs_dir)
        .map_err(|e| Error::io(&runs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    for dir in names {
        let metrics_path = dir.join("metrics.json");
        if !metrics_path.is_file() {
            continue;
        }
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        let Some((mode, seed)) = parse_run_name(&name) else {
            log::warn!("report: skipping {name} (not <mode>_s<seed>)");
            continue;
        };
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let m = Metrics::from_json(&text)?;
        rows.push(RunRow {
            run: name,
            mode: mode.to_string(),
            seed,
            consistency_pct: m.segmentation.consistency_pct,
            ami: m.ami,
            delta_hier: m.consistency.delta_hier,
            delta_sem: m.consistency.delta_sem,
            probe_macro_f1: m.detail.probe_macro_f1,
            knn_macro_f1: m.detail.knn_macro_f1,
            miou_mid: m.segmentation.mid.miou,
            miou_high: m.segmentation.high.miou,
        });
    }
    if rows.is_empty() {
        return Err(Error::Domain(format!(
            "no metrics.json under {}; run `mad eval` first",
            runs_dir.display()
        )));
    }
    let medians = ["MAD", "BASELINE"]
        .iter()
        .filter_map(|mode| {
            let sel: Vec<&RunRow> = rows.iter().filter(|r| r.mode == *mode).collect();
            if sel.is_empty() {
                return None;
            }
            Some(ModeRow {
                mode: mode.to_string(),
                n_runs: sel.len(),
                consistency_pct: median(sel.iter().map(|r| r.consistency_pct)),
                ami: median(sel.iter().map(|r| r.ami)),
                delta_hier: median(sel.iter().map(|r| r.delta_hier)),
                delta_sem: median(sel.iter().map(|r| r.delta_sem)),
                probe_macro_f1: median(sel.iter().map(|r| r.probe_macro_f1)),
            })
        })
        .collect::<Vec<_>>();

    let report = Report { rows, medians, provenance: r.provenance.clone() };
    let md = render_markdown(&report);
    print!("{md}");
    let md_path = r.cfg.paths.out.join("report.md");
    fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    write_json(&r.cfg.paths.out.join("report.json"), &report)?;
    write_echo("report", &r.cfg.paths.out, r)
}

fn parse_run_name(name: &str) -> Option<(&'static str, u64)> {
    let (mode, seed) = name.rsplit_once("_s")?;
    let seed: u64 = seed.parse().ok()?;
    match mode {
        "mad" => Some(("MAD", seed)),
        "baseline" => Some(("BASELINE", seed)),
        _ => None,
    }
}

fn median(vals: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = vals.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn render_markdown(rep: &Report) -> String {
    let mut md = String::from("# MAD vs BASELINE\n\n");
    md.push_str("| mode | runs | consistency_pct | ami | delta_hier | delta_sem | probe_f1 |\n");
    md.push_str("|------|------|-----------------|-----|------------|-----------|----------|\n");
    for m in &rep.medians {
        md.push_str(&format!(
            "| {} | {} | {:.2} | {:.4} | {:+.4} | {:+.4} | {:.3} |\n",
            m.mode, m.n_runs, m.consistency_pct, m.ami, m.delta_hier, m.delta_sem, m.probe_macro_f1
        ));
    }
    md.push_str("\n## Runs\n\n");
    md.push_str("| run | consistency_pct | ami | delta_hier | miou_mid | miou_high |\n");
    md.push_str("|-----|-----------------|-----|------------|----------|-----------|\n");
    for row in &rep.rows {
        md.push_str(&format!(
            "| {} | {:.2} | {:.4} | {:+.4} | {:.3} | {:.3} |\n",
            row.run, row.consistency_pct, row.ami, row.delta_hier, row.miou_mid, row.miou_high
        ));
    }
    md.push_str(&format!(
        "\n_mad {} · config {} · seed {}_\n",
        rep.provenance.tool_version, rep.provenance.config_sha256, rep.provenance.seed
    ));
    md
}

// ---- artifact plumbing ----

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Actionable missing-input error naming the command that produces it.
fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Domain(format!(
            "missing {}; run `mad {producer}` first",
            path.display()
        )));
    }
    Ok(())
}

fn load_slides(cfg: &RunConfig, only: Option<&[String]>) -> Result<Vec<SlidePyramid>> {
    let ids: Vec<&str> = match only {
        Some(ids) => ids.iter().map(String::as_str).collect(),
        None => cfg.synth.iter().map(|s| s.slide_id.as_str()).collect(),
    };
    ids.iter()
        .map(|id| {
            let dir = cfg.slide_dir(id);
            require(&dir.join("manifest.json"), "synth")?;
            load_slide(&dir)
        })
        .collect()
}

fn load_tiles(cfg: &RunConfig) -> Result<TileManifest> {
    let path = cfg.tiles_path();
    require(&path, "tile")?;
    load_manifest(&path)
}

/// Sidecar stamp for artifacts whose format has no provenance slot
/// (MADE embeddings, CSVs).
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    net: Option<WhichNet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_checkpoint: Option<String>,
}

fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn write_sidecar(artifact: &Path, r: &Resolved, set: Option<&EmbeddingSet>) -> Result<()> {
    let doc = Sidecar {
        provenance: r.provenance.clone(),
        net: set.map(|s| s.net),
        source_checkpoint: set.map(|s| s.source_checkpoint.clone()),
    };
    write_json(&sidecar_path(artifact), &doc)
}

/// Read a MADE file back into a full EmbeddingSet, recovering net and
/// source checkpoint from the sidecar when present.
fn read_set(path: &Path) -> Result<EmbeddingSet> {
    require(path, "embed")?;
    let (rows, meta) = read_embeddings(path)?;
    let (net, source) = match fs::read_to_string(sidecar_path(path)) {
        Ok(text) => {
            let sc: Sidecar = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", sidecar_path(path).display())))?;
            (sc.net.unwrap_or(WhichNet::Teacher), sc.source_checkpoint)
        }
        Err(_) => (WhichNet::Teacher, None),
    };
    let set = EmbeddingSet {
        rows,
        meta,
        source_checkpoint: source.unwrap_or_else(|| CHECKPOINT_FILE.to_string()),
        net,
    };
    set.validate()?;
    Ok(set)
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// `<dir>/<cmd>.run.json`: the resolved config this invocation ran
/// under, for auditing defaults and derived seeds.
fn write_echo(command: &str, dir: &Path, r: &Resolved) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a> {
        command: &'a str,
        provenance: &'a Provenance,
        config: &'a RunConfig,
    }
    ensure_dir(dir)?;
    write_json(
        &dir.join(format!("{command}.run.json")),
        &Echo { command, provenance: &r.provenance, config: &r.cfg },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_names_parse_and_reject() {
        assert_eq!(parse_run_name("mad_s3"), Some(("MAD", 3)));
        assert_eq!(parse_run_name("baseline_s12"), Some(("BASELINE", 12)));
        assert_eq!(parse_run_name("mad_sx"), None);
        assert_eq!(parse_run_name("probe_s1"), None);
        assert_eq!(parse_run_name("mad"), None);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median([3.0, 1.0, 2.0].into_iter()), 2.0);
        assert_eq!(median([4.0, 1.0, 2.0, 3.0].into_iter()), 2.5);
    }

    #[test]
    fn sidecar_path_appends() {
        assert_eq!(
            sidecar_path(Path::new("runs/mad_s1/pca.csv")),
            PathBuf::from("runs/mad_s1/pca.csv.provenance.json")
        );
    }
}
