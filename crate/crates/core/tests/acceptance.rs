//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use colorvar::augment::{slice4, slice_regions, SliceMode, SliceTag};
use colorvar::clustering::{agglomerative_ward, ward_dendrogram};
use colorvar::dataset::{generate_synthetic, ImageRecord, Raster, SyntheticSpec};
use colorvar::experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
use colorvar::losses::{ntxent_loss, ntxent_loss_grad, triplet_loss, triplet_loss_grad, ContrastiveBatch, TripletBatch};
use colorvar::matrix::l2_normalize_rows;
use colorvar::metrics::{ari, cscore, fms};
use colorvar::model::nn::Mode;
use colorvar::model::{build_encoder, embed_sliced, rasters_to_tensor, EncoderConfig, Head, ViewEncoder};
use colorvar::trainers::{ema_update, MemoryQueue, Method, TrainConfig, Trainer};
use colorvar::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn loss_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let (a, p, n) = (uniform(&mut rng, 8, 16), uniform(&mut rng, 8, 16), uniform(&mut rng, 8, 16));
        let margin = 0.5 + rng.random::<f64>();
        let loss =
            |a: &Matrix, p: &Matrix, n: &Matrix| triplet_loss(&TripletBatch { anchors: a, positives: p, negatives: n }, margin).unwrap();
        let (_, g) = triplet_loss_grad(&TripletBatch { anchors: &a, positives: &p, negatives: &n }, margin).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(g.anchors.as_slice(), numeric_grad(&a, |x| loss(x, &p, &n)).as_slice()));
        worst = worst.max(rel_err(g.positives.as_slice(), numeric_grad(&p, |x| loss(&a, x, &n)).as_slice()));
        worst = worst.max(rel_err(g.negatives.as_slice(), numeric_grad(&n, |x| loss(&a, &p, x)).as_slice()));
    }
    for k in [1usize, 8, 32] {
        let (q, kp, kn) = (unit(&mut rng, 8, 16), unit(&mut rng, 8, 16), unit(&mut rng, k, 16));
        let tau = 0.07 + rng.random::<f64>() * 0.3;
        fn batch<'a>(q: &'a Matrix, kp: &'a Matrix, kn: &'a Matrix, tau: f64) -> ContrastiveBatch<'a> {
            ContrastiveBatch { queries: q, positive_keys: kp, negative_keys: kn, temperature: tau }
        }
        let loss = |q: &Matrix, kp: &Matrix, kn: &Matrix| ntxent_loss(&batch(q, kp, kn, tau)).unwrap();
        let (_, g) = ntxent_loss_grad(&batch(&q, &kp, &kn, tau)).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(g.queries.as_slice(), numeric_grad(&q, |x| loss(x, &kp, &kn)).as_slice()));
        worst = worst.max(rel_err(g.positive_keys.as_slice(), numeric_grad(&kp, |x| loss(&q, x, &kn)).as_slice()));
        worst = worst.max(rel_err(g.negative_keys.as_slice(), numeric_grad(&kn, |x| loss(&q, &kp, x)).as_slice()));
    }
    ensure!(worst < 1e-3, "max relative gradient error {worst:.2e}");
    let (q, kp) = (unit(&mut rng, 8, 16), unit(&mut rng, 8, 16));
    let k0 = ntxent_loss(&ContrastiveBatch { queries: &q, positive_keys: &kp, negative_keys: &Matrix::zeros(0, 16), temperature: 0.05 })
        .map_err(|e| e.to_string())?;
    ensure!(k0 == 0.0, "K=0 loss is {k0}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("max rel err {worst:.2e}, K=0 loss exactly 0, {secs:.2} s"))
}

fn toy_trainer(method: Method, records: &[ImageRecord]) -> Trainer {
    let mut cfg = TrainConfig::new(method);
    cfg.batch_size = Some(3);
    cfg.optimizer.lr = 0.05;
    cfg.ema_momentum = Some(1.0);
    if method.uses_queue() {
        cfg.queue_size = Some(6);
    }
    let dims = match method.required_head() {
        Head::None => vec![],
        Head::ProjectorMlp => vec![16, 8],
        Head::ProjectorPlusPredictor => vec![16, 8, 16],
    };
    let mut enc = EncoderConfig::tiny(16, 8).with_head(method.required_head(), dims);
    enc.tiny_widths = vec![4, 8];
    let refs: Vec<&ImageRecord> = records.iter().collect();
    Trainer::new(cfg, &enc, &refs).unwrap()
}

fn mechanics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let query: Vec<f64> = (0..500).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let key0: Vec<f64> = (0..500).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut key = key0.clone();
    ema_update(&mut key, &query, 1.0).map_err(|e| e.to_string())?;
    ensure!(key == key0, "m=1 changed the key");
    ema_update(&mut key, &query, 0.0).map_err(|e| e.to_string())?;
    ensure!(key == query, "m=0 did not copy the query");

    for seq in 0..1000 {
        let capacity = rng.random_range(1..=12);
        let dim = rng.random_range(1..=4);
        let mut queue = MemoryQueue::new(capacity, dim).map_err(|e| e.to_string())?;
        let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
        for _ in 0..rng.random_range(0..=20) {
            let rows = rng.random_range(0..=capacity);
            let v = (0..rows * dim).map(|_| rng.random::<f64>() - 0.5 + 1e-3).collect();
            let batch = l2_normalize_rows(&Matrix::from_vec(rows, dim, v).unwrap()).unwrap().0;
            queue.push(&batch).map_err(|e| e.to_string())?;
            for r in batch.iter_rows() {
                if reference.len() == capacity {
                    reference.pop_front();
                }
                reference.push_back(r.to_vec());
            }
            let got: Vec<Vec<f64>> = queue.contents().iter_rows().map(<[f64]>::to_vec).collect();
            ensure!(got.iter().eq(reference.iter()), "queue diverged from the deque on sequence {seq}");
        }
    }

    let records = generate_synthetic(&SyntheticSpec { n_styles: 3, variants_per_style: 2, canvas: 48, ..Default::default() })
        .map_err(|e| e.to_string())?;
    for method in [Method::Mocov2, Method::Byol, Method::Pbcnet] {
        let mut t = toy_trainer(method, &records);
        ensure!(t.optimizer_state_len() == t.online().param_count(), "{method}: optimizer holds more than the online parameters");
        let before = t.target().unwrap().clone();
        for s in 0..10 {
            t.step(&[s % 6, (s + 1) % 6, (s + 2) % 6]).map_err(|e| e.to_string())?;
        }
        let after = t.target().unwrap();
        ensure!(after.backbone.params == before.backbone.params, "{method}: key backbone moved");
        ensure!(
            after.projector.as_ref().map(|p| &p.params) == before.projector.as_ref().map(|p| &p.params),
            "{method}: key projector moved"
        );
    }
    Ok("EMA fixpoints exact, 1000 queue sequences match, key untouched over 10 steps (mocov2, byol, pbcnet)".into())
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=15);
        let (truth, pred) = (random_partition(&mut rng, n), random_partition(&mut rng, n));
        worst = worst.max((ari(&truth, &pred).map_err(|e| e.to_string())? - brute_ari(&truth, &pred)).abs());
        worst = worst.max((fms(&truth, &pred).map_err(|e| e.to_string())? - brute_fms(&truth, &pred)).abs());
    }
    ensure!(worst < 1e-12, "max deviation from pair enumeration {worst:.2e}");
    let (c1, c2) = (cscore(0.69, 0.71), cscore(0.75, 0.76));
    ensure!((c1 - 0.700).abs() <= 0.001, "cscore(0.69, 0.71) = {c1:.4}");
    ensure!((c2 - 0.756).abs() <= 0.002, "cscore(0.75, 0.76) = {c2:.4}");
    Ok(format!("max |err| {worst:.1e} over 200 partitions, cscore {c1:.4} / {c2:.4}"))
}

fn clustering_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for set in 0..50 {
        let n = rng.random_range(2..=20);
        let d = rng.random_range(1..=5);
        let pts = random_points(&mut rng, n, d);
        let e = emb(&pts);
        let top = ward_dendrogram(&e.values).merges().last().unwrap().height;
        for _ in 0..8 {
            let t = rng.random::<f64>() * top * 1.1 + 1e-9;
            let got = agglomerative_ward(&e, t).map_err(|e| e.to_string())?.labels;
            ensure!(got == naive_ward(&pts, t), "set {set} (n={n}) differs at threshold {t}");
        }
        ensure!(agglomerative_ward(&e, 1e12).unwrap().n_clusters() == 1, "set {set}: huge threshold left several clusters");
        ensure!(agglomerative_ward(&e, 1e-12).unwrap().n_clusters() == n, "set {set}: tiny threshold merged points");
    }
    Ok("50 random sets match naive linkage at 8 thresholds each, limits hold".into())
}

/// Reverses the views before encoding and restores the order afterwards.
struct Reversed<'a>(&'a colorvar::model::Encoder);

impl ViewEncoder for Reversed<'_> {
    fn input_side(&self) -> u32 {
        self.0.input_side()
    }

    fn encode_views(&self, views: &[Raster]) -> Matrix {
        let rev: Vec<Raster> = views.iter().rev().cloned().collect();
        let out = self.0.encode_views(&rev);
        out.select_rows(&(0..out.rows()).rev().collect::<Vec<_>>())
    }
}

fn slicing_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..200 {
        let (w, h) = (rng.random_range(2..80), rng.random_range(2..80));
        let img = noise(w, h, rng.random());
        let views = slice_regions(&img, SliceMode::Both).map_err(|e| e.to_string())?;
        let get = |tag| &views.iter().find(|(t, _)| *t == tag).unwrap().1;
        ensure!(reassemble_lr(get(SliceTag::Left), get(SliceTag::Right)) == img, "{w}x{h}: left/right reassembly differs");
        ensure!(reassemble_tb(get(SliceTag::Top), get(SliceTag::Bottom)) == img, "{w}x{h}: top/bottom reassembly differs");
    }
    let mut cfg = EncoderConfig::tiny(16, 8);
    cfg.tiny_widths = vec![4, 6];
    let mut enc = build_encoder(&cfg, 5).map_err(|e| e.to_string())?;
    let warm: Vec<Raster> = (0..6).map(|s| noise(16, 16, 200 + s)).collect();
    enc.backbone.run(rasters_to_tensor(&warm), Mode::Train);
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let img = noise(rng.random_range(8..60), rng.random_range(8..60), 300 + seed);
        for mode in [SliceMode::Both, SliceMode::Horiz, SliceMode::Vert] {
            let e = embed_sliced(&enc, &img, mode).map_err(|e| e.to_string())?;
            let rev = embed_sliced(&Reversed(&enc), &img, mode).map_err(|e| e.to_string())?;
            let mut sum = vec![0.0; e.len()];
            for v in slice4(&img, mode, 16).map_err(|e| e.to_string())?.rasters() {
                let row = enc.encode_views(std::slice::from_ref(v));
                sum.iter_mut().zip(row.row(0)).for_each(|(s, x)| *s += x);
            }
            for ((a, b), c) in e.iter().zip(&rev).zip(&sum) {
                worst = worst.max((a - b).abs()).max((a - c).abs());
            }
        }
    }
    ensure!(worst < 1e-6, "max deviation {worst:.2e}");
    Ok(format!("200 shapes reassemble bitwise, order/per-view deviation {worst:.1e}"))
}

fn desk_config() -> Result<ExperimentConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    ExperimentConfig::load(&path).map_err(|e| e.to_string())
}

struct Runs {
    root: tempfile::TempDir,
    pbcnet: Option<ExperimentOutcome>,
}

impl Runs {
    fn run(&self, cfg: ExperimentConfig, dir: &str) -> Result<ExperimentOutcome, String> {
        let mut cfg = cfg;
        cfg.out_dir = self.root.path().join(dir);
        run_experiment(&cfg).map_err(|e| e.to_string())
    }

    fn method(&self, method: Method) -> Result<ExperimentOutcome, String> {
        self.run(desk_config()?.with_method(method), &method.to_string())
    }
}

fn summary(o: &ExperimentOutcome) -> String {
    let r = &o.report.report;
    format!("cscore {:.3} ari {:.3} cgacc {:.3}", r.cscore, r.ari, r.cgacc)
}

fn end_to_end(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let mut scores = Vec::new();
    let mut lines = Vec::new();
    for method in [Method::Pbcnet, Method::Mocov2, Method::Byol, Method::SimsiamV1] {
        let o = runs.method(method)?;
        lines.push(format!("{method}: {}", summary(&o)));
        scores.push((method, o.report.report.cscore));
        if method == Method::Pbcnet {
            runs.pbcnet = Some(o);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{} ({secs:.0} s)", lines.join("; "));
    let pb = &runs.pbcnet.as_ref().unwrap().report.report;
    ensure!(pb.ari >= 0.8, "pbcnet ARI {:.3} < 0.8. {detail}", pb.ari);
    ensure!(pb.cgacc >= 0.9, "pbcnet CGacc {:.3} < 0.9. {detail}", pb.cgacc);
    for w in scores.windows(2) {
        ensure!(w[0].1 >= w[1].1, "{} cscore {:.3} < {} cscore {:.3}. {detail}", w[0].0, w[0].1, w[1].0, w[1].1);
    }
    ensure!(secs < 1800.0, "took {secs:.0} s. {detail}");
    Ok(detail)
}

fn normalization(runs: &mut Runs) -> Outcome {
    let base = desk_config()?.with_method(Method::SimsiamV1);
    let on = runs.run(base.clone(), "simsiam_v1-l2")?;
    let mut off_cfg = base;
    off_cfg.normalize = false;
    let off = runs.run(off_cfg, "simsiam_v1-raw")?;
    let (a, b) = (on.report.report.cscore, off.report.report.cscore);
    ensure!(a >= b, "normalized cscore {a:.3} < unnormalized {b:.3}");
    Ok(format!("normalized {a:.3} >= unnormalized {b:.3}"))
}

fn slicing_ablation(runs: &mut Runs) -> Outcome {
    let pb = match runs.pbcnet.take() {
        Some(o) => o,
        None => runs.method(Method::Pbcnet)?,
    };
    let horiz = runs.method(Method::PbcnetHoriz)?;
    let vert = runs.method(Method::PbcnetVert)?;
    let s = [pb.report.report.cscore, horiz.report.report.cscore, vert.report.report.cscore];
    let best = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let detail = format!("pbcnet {:.3}, horiz {:.3}, vert {:.3}", s[0], s[1], s[2]);
    ensure!(s[0] >= best - 0.05, "pbcnet trails the best by {:.3}: {detail}", best - s[0]);
    Ok(detail)
}

fn reproducibility(runs: &mut Runs) -> Outcome {
    let cfg = desk_config()?;
    let read = |o: &ExperimentOutcome| -> Result<(Vec<u8>, String), String> {
        let bytes = std::fs::read(o.out_dir.join("report.json")).map_err(|e| e.to_string())?;
        Ok((bytes, serde_json::to_string(&o.report.report).map_err(|e| e.to_string())?))
    };
    let first = read(&runs.run(cfg.clone(), "repeat")?)?;
    let second = read(&runs.run(cfg, "repeat")?)?;
    ensure!(first.1 == second.1, "EvalReport JSON differs between runs");
    ensure!(first.0 == second.0, "report.json bytes differ between runs");
    Ok(format!("report.json identical ({} bytes)", first.0.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() -> ExitCode {
    // panics are reported on the criterion line
    std::panic::set_hook(Box::new(|_| {}));
    let mut runs = Runs { root: tempfile::tempdir().expect("temporary directory"), pbcnet: None };
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| match &outcome {
        Ok(detail) => println!("criterion {id} PASS {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("criterion {id} FAIL {name}: {detail}");
        }
    };
    report(1, "loss correctness", guarded(loss_correctness));
    report(2, "mechanics", guarded(mechanics));
    report(3, "metric oracles", guarded(metric_oracles));
    report(4, "clustering oracles", guarded(clustering_oracles));
    report(5, "slicing invariants", guarded(slicing_invariants));
    report(6, "end-to-end synthetic", guarded(|| end_to_end(&mut runs)));
    report(7, "normalization", guarded(|| normalization(&mut runs)));
    report(8, "slicing ablation", guarded(|| slicing_ablation(&mut runs)));
    report(9, "reproducibility", guarded(|| reproducibility(&mut runs)));
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
