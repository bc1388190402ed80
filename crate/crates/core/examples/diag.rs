// Scratch diagnostic: loss trajectory + collapse indicators at the
// default desk scale.

use mad_core::distill::{teacher_distribution, train, TrainConfig, TrainMode};
use mad_core::nnet::model::{forward, head_forward};
use mad_core::nnet::params::{Params, ViTConfig};
use mad_core::rng::{derive_seed, seeded};
use mad_core::slidegen::{synth_slide, SynthConfig};
use mad_core::tiler::{build_manifest, extract_pixels, Caps, Split, SplitAssignment, TileKind};
use mad_core::views::SlideSet;

fn cosine_stats(rows: &[Vec<f64>]) -> (f64, f64, f64) {
    let normed: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut cs = Vec::new();
    for i in 0..normed.len() {
        for j in i + 1..normed.len() {
            cs.push(normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    let mean = cs.iter().sum::<f64>() / cs.len() as f64;
    let min = cs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let b: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5e-4);
    let grad_clip: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3.0);

    let slides: Vec<_> = (0..4u64)
        .map(|seed| {
            synth_slide(&SynthConfig {
                slide_id: format!("t{seed:03}"),
                seed: seed + 40,
                base_size: 1024,
                tile_px: 32,
                ..SynthConfig::default()
            })
            .unwrap()
        })
        .collect();
    let split = SplitAssignment {
        train: (0..4).map(|i| format!("t{i:03}")).collect(),
        test: vec![],
    };
    let manifest =
        build_manifest(&slides, 32, &Caps::uniform(5, Some(40), Some(40)), &split, 3).unwrap();
    eprintln!(
        "manifest: {} records, {} lowmid fams, {} midhigh fams",
        manifest.records.len(),
        manifest.families(mad_core::tiler::Transition::LowToMid).len(),
        manifest.families(mad_core::tiler::Transition::MidToHigh).len()
    );
    let slides = SlideSet::new(slides).unwrap();
    let vit = ViTConfig::default();

    // Embedding geometry of the untrained net over a spread of tiles.
    let probe_idx = manifest.select(None, Some(Split::Train), None);
    let probe_tiles: Vec<_> = probe_idx
        .iter()
        .step_by((probe_idx.len() / 30).max(1))
        .take(30)
        .map(|&i| {
            let rec = &manifest.records[i];
            extract_pixels(slides.get(&rec.slide_id).unwrap(), rec).unwrap()
        })
        .collect();
    let init = Params::init(vit, &mut seeded(derive_seed(1, "init"))).unwrap();
    let es: Vec<Vec<f64>> = probe_tiles.iter().map(|t| forward(&init, t).unwrap().0).collect();
    let (m, lo, hi) = cosine_stats(&es);
    println!("init CLS cosine over 30 tiles: mean {m:.4} min {lo:.4} max {hi:.4}");
    let ls: Vec<Vec<f64>> =
        probe_tiles.iter().map(|t| head_forward(&init.head, &forward(&init, t).unwrap().0).unwrap().0).collect();
    let (m, lo, hi) = cosine_stats(&ls);
    println!("init logit cosine over 30 tiles: mean {m:.4} min {lo:.4} max {hi:.4}");
    let cfg = TrainConfig {
        steps,
        batch_families_per_step: b,
        lr,
        grad_clip,
        mode: TrainMode::Mad,
        checkpoint_every: 0,
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (state, trace) = train(&manifest, &slides, vit, &cfg, None).unwrap();
    let dt = t0.elapsed();
    eprintln!(
        "trained {} steps (B={}) in {:.1?} ({:.0} ms/step)",
        steps,
        b,
        dt,
        dt.as_secs_f64() * 1000.0 / steps as f64
    );

    let win = (steps / 16).max(10);
    for w in (0..steps).step_by(win) {
        let rows = &trace[w..(w + win).min(trace.len())];
        let mut losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
        losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = losses[losses.len() / 2];
        let ent = rows.iter().map(|r| r.teacher_entropy).sum::<f64>() / rows.len() as f64;
        println!(
            "steps {w:4}..{:4}  median loss {med:8.4}  teacher H {ent:7.4} (lnK {:.4})",
            w + win,
            64f64.ln()
        );
    }

    let es: Vec<Vec<f64>> =
        probe_tiles.iter().map(|t| forward(&state.teacher, t).unwrap().0).collect();
    let (m, lo, hi) = cosine_stats(&es);
    println!("trained CLS cosine over 30 tiles: mean {m:.4} min {lo:.4} max {hi:.4}");

    // Probe a few MID tiles: bottleneck norms + teacher distribution stats.
    let idxs = manifest.select(None, Some(Split::Train), Some(TileKind::Standalone));
    for &i in idxs.iter().take(5) {
        let rec = &manifest.records[i];
        let slide = slides.get(&rec.slide_id).unwrap();
        let tile = extract_pixels(slide, rec).unwrap();
        let (e, _) = forward(&state.teacher, &tile).unwrap();
        let (logits, ht) = head_forward(&state.teacher.head, &e).unwrap();
        let p = teacher_distribution(&logits, &state.center, cfg.tau_t);
        let pmax = p.iter().cloned().fold(0.0f64, f64::max);
        let lsp = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - logits.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "tile {}: |z3| {:8.5}  logit spread {lsp:7.4}  p_max {pmax:6.3}",
            rec.index,
            ht.bottleneck_norm()
        );
    }
}
