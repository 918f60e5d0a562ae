//! Experiment orchestration: dataset → train → embed → clustering sweep →
//! evaluate, with every intermediate written to the output directory.
//!
//! Output layout of one run:
//!
//! ```text
//! config.json            resolved configuration
//! run_manifest.json      training record (losses, init, wall time)
//! encoder.ckpt           trained encoder
//! embeddings.ids.txt     embedding export (ids + header)
//! embeddings.f32         embedding export (values)
//! truth.jsonl            ground-truth group of every eval record
//! sweep/NNN.assignments.jsonl, sweep/NNN.report.json
//! sweep.json             every sweep point with its scores
//! report.json            best sweep point, with seed and config echo
//! report.txt             one-line metric table
//! contact_sheets/        one PNG per predicted cluster
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::clustering::{affinity_propagation, dbscan, ward_assignment, ward_dendrogram, AffinityParams, ClusterAssignment, NOISE};
use crate::dataset::{crop_primary, generate_synthetic, load_manifest, ImageRecord, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::export::{align_by_id, read_assignments, read_truth, write_assignments, write_embeddings, write_truth};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{embed_dataset, save_checkpoint, EmbeddingMatrix, EncoderConfig, Head};
use crate::trainers::{train, Method, RunManifest, TrainConfig};

/// Clustering algorithm plus the parameter grid swept for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClusteringSweep {
    AgglomerativeWard {
        thresholds: Vec<f64>,
    },
    Dbscan {
        eps: Vec<f64>,
        min_pts: Vec<usize>,
    },
    AffinityPropagation {
        damping: Vec<f64>,
        /// Empty means the median similarity only.
        #[serde(default)]
        preference: Vec<f64>,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
    },
}

fn default_max_iter() -> usize {
    200
}

impl ClusteringSweep {
    /// `n` evenly spaced Ward thresholds from `lo` to `hi` inclusive.
    pub fn ward_grid(lo: f64, hi: f64, n: usize) -> Self {
        let thresholds = if n <= 1 { vec![lo] } else { (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect() };
        ClusteringSweep::AgglomerativeWard { thresholds }
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        match self {
            ClusteringSweep::AgglomerativeWard { thresholds } => thresholds
                .iter()
                .map(|&t| SweepPoint {
                    algorithm: "agglomerative_ward".into(),
                    params: serde_json::json!({ "distance_threshold": t }),
                    key: t,
                })
                .collect(),
            ClusteringSweep::Dbscan { eps, min_pts } => eps
                .iter()
                .flat_map(|&e| {
                    min_pts.iter().map(move |&m| SweepPoint {
                        algorithm: "dbscan".into(),
                        params: serde_json::json!({ "eps": e, "min_pts": m }),
                        key: e,
                    })
                })
                .collect(),
            ClusteringSweep::AffinityPropagation { damping, preference, max_iter } => {
                let prefs: Vec<Option<f64>> =
                    if preference.is_empty() { vec![None] } else { preference.iter().copied().map(Some).collect() };
                damping
                    .iter()
                    .flat_map(|&d| {
                        prefs.iter().map(move |&p| SweepPoint {
                            algorithm: "affinity_propagation".into(),
                            params: serde_json::json!({ "damping": d, "preference": p, "max_iter": max_iter }),
                            key: d,
                        })
                    })
                    .collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = match self {
            ClusteringSweep::AgglomerativeWard { thresholds } => thresholds.is_empty(),
            ClusteringSweep::Dbscan { eps, min_pts } => eps.is_empty() || min_pts.is_empty(),
            ClusteringSweep::AffinityPropagation { damping, .. } => damping.is_empty(),
        };
        if empty {
            return Err(Error::Config("clustering sweep grid is empty".into()));
        }
        let bad = match self {
            ClusteringSweep::AgglomerativeWard { thresholds } => thresholds.iter().any(|t| !(*t > 0.0)),
            ClusteringSweep::Dbscan { eps, min_pts } => eps.iter().any(|e| !(*e > 0.0)) || min_pts.contains(&0),
            ClusteringSweep::AffinityPropagation { damping, max_iter, .. } => {
                damping.iter().any(|d| !(0.5..1.0).contains(d)) || *max_iter == 0
            }
        };
        if bad {
            return Err(Error::Config("clustering sweep has out-of-range parameters".into()));
        }
        Ok(())
    }

    /// Runs every grid point; Ward builds its hierarchy once.
    fn run(&self, emb: &EmbeddingMatrix) -> Result<Vec<(SweepPoint, ClusterAssignment)>> {
        let points = self.points();
        if let ClusteringSweep::AgglomerativeWard { .. } = self {
            if emb.is_empty() {
                return Err(Error::validation("embeddings", "cannot cluster zero rows"));
            }
            let tree = ward_dendrogram(&emb.values);
            return Ok(points
                .into_iter()
                .map(|p| {
                    let a = ward_assignment(emb, tree.cut(p.key), p.key);
                    (p, a)
                })
                .collect());
        }
        points
            .into_iter()
            .map(|p| {
                let a = match self {
                    ClusteringSweep::Dbscan { .. } => dbscan(emb, p.key, p.params["min_pts"].as_u64().unwrap_or(1) as usize)?,
                    _ => affinity_propagation(
                        emb,
                        AffinityParams {
                            damping: p.key,
                            max_iter: p.params["max_iter"].as_u64().unwrap_or(200) as usize,
                            preference: p.params["preference"].as_f64(),
                            ..AffinityParams::default()
                        },
                    )?,
                };
                Ok((p, a))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub algorithm: String,
    pub params: serde_json::Value,
    /// Primary swept value (threshold, eps or damping); lower wins ties.
    pub key: f64,
}

/// Full description of one experiment. `seed` drives initialization,
/// augmentation and sampling and overrides `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub clustering: ClusteringSweep,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "yes")]
    pub bbox_crop: bool,
    #[serde(default = "yes")]
    pub contact_sheets: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Methods to run as an ablation grid from this base config.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<Method>,
}

fn yes() -> bool {
    true
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.manifest) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => return Err(Error::Config("set exactly one of `synthetic` and `manifest`".into())),
        }
        self.train.validate()?;
        self.encoder.validate()?;
        self.clustering.validate()?;
        if self.encoder.head != self.train.method.required_head() {
            return Err(Error::Config(format!(
                "method {} needs head {:?}, encoder has {:?}",
                self.train.method,
                self.train.method.required_head(),
                self.encoder.head
            )));
        }
        Ok(())
    }

    /// Parses TOML or JSON (chosen by extension, JSON when it starts with `{`).
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        let mut cfg: ExperimentConfig = if json {
            serde_json::from_str(text).map_err(|e| Error::parse("experiment config", e))?
        } else {
            toml::from_str(text).map_err(|e| Error::parse("experiment config", e))?
        };
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Loads a config file; a relative `manifest` path is resolved against
    /// the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
        let mut cfg = Self::from_str_with_format(&text, json).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })?;
        if let Some(m) = cfg.manifest.as_mut() {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Switches the training method, dropping settings the new method does
    /// not use and giving the encoder the head it needs.
    pub fn with_method(mut self, method: Method) -> Self {
        let old = self.train.method;
        let t = &mut self.train;
        t.method = method;
        if !method.uses_queue() {
            t.queue_size = None;
            t.temperature = None;
        }
        if !method.uses_ema() {
            t.ema_momentum = None;
        }
        if method != Method::Triplet {
            t.margin = None;
        }
        if method == Method::Triplet || method.slice_mode().is_some() != old.slice_mode().is_some() {
            t.augment = None;
        }
        let need = method.required_head();
        if self.encoder.head != need {
            let d = self.encoder.embed_dim;
            let dims = match need {
                Head::None => vec![],
                Head::ProjectorMlp => vec![d, d],
                Head::ProjectorPlusPredictor => vec![d, d, d],
            };
            self.encoder = self.encoder.clone().with_head(need, dims);
        }
        self
    }

    pub fn dataset_label(&self) -> String {
        match (&self.synthetic, &self.manifest) {
            (Some(s), _) => format!("synthetic-{}x{}-seed{}", s.n_styles, s.variants_per_style, s.seed),
            (_, Some(m)) => m.file_stem().map_or("manifest".into(), |s| s.to_string_lossy().into_owned()),
            _ => "none".into(),
        }
    }

    /// Label used as a comparison column.
    pub fn run_label(&self) -> String {
        if self.normalize {
            self.train.method.to_string()
        } else {
            format!("{} (unnormalized)", self.train.method)
        }
    }
}

/// Records of one experiment with the train/eval partition applied.
pub struct Dataset {
    pub label: String,
    pub records: Vec<ImageRecord>,
    /// Whether an explicit eval split exists; otherwise everything is used for both.
    pub held_out: bool,
}

impl Dataset {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let records = match (&config.synthetic, &config.manifest) {
            (Some(s), None) => generate_synthetic(s)?,
            (None, Some(m)) => load_manifest(m)?,
            _ => return Err(Error::Config("set exactly one of `synthetic` and `manifest`".into())),
        };
        if records.is_empty() {
            return Err(Error::validation("dataset", "no records"));
        }
        let held_out = records.iter().any(|r| r.split == Split::Eval);
        Ok(Dataset { label: config.dataset_label(), records, held_out })
    }

    pub fn train(&self) -> Vec<&ImageRecord> {
        self.pick(Split::Train)
    }

    pub fn eval(&self) -> Vec<&ImageRecord> {
        self.pick(Split::Eval)
    }

    fn pick(&self, split: Split) -> Vec<&ImageRecord> {
        if self.held_out {
            self.records.iter().filter(|r| r.split == split).collect()
        } else {
            self.records.iter().collect()
        }
    }

    pub fn split_name(&self) -> &'static str {
        if self.held_out {
            "eval"
        } else {
            "all"
        }
    }

    fn same_eval_split(&self, other: &Dataset) -> bool {
        let a = self.eval();
        let b = other.eval();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.id == y.id && x.group_id == y.group_id && x.pixels == y.pixels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub point: SweepPoint,
    pub converged: bool,
    pub report: EvalReport,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub method: Method,
    pub normalize: bool,
    pub dataset: String,
    pub eval_split: String,
    pub n_eval: usize,
    pub selected: SweepPoint,
    pub report: EvalReport,
    pub sweep_grid: Vec<SweepPoint>,
    pub config: ExperimentConfig,
}

pub struct ExperimentOutcome {
    pub report: RunReport,
    pub sweep: Vec<SweepResult>,
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Best by CScore, then ARI, then the lower swept value.
pub fn select_best(results: &[SweepResult]) -> Option<&SweepResult> {
    results.iter().reduce(|best, r| {
        let better = r
            .report
            .cscore
            .total_cmp(&best.report.cscore)
            .then(r.report.ari.total_cmp(&best.report.ari))
            .then(best.point.key.total_cmp(&r.point.key));
        if better.is_gt() {
            r
        } else {
            best
        }
    })
}

/// Runs every stage of one experiment and writes its artifacts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let mut config = config.clone();
    config.train.seed = config.seed;
    let out = config.out_dir.clone();
    mkdir(&out).map_err(|e| e.in_stage("config"))?;
    write_json(&out.join("config.json"), &config).map_err(|e| e.in_stage("config"))?;

    let data = Dataset::load(&config).map_err(|e| e.in_stage("dataset"))?;
    let train_set = data.train();
    let eval_set = data.eval();

    let trained = train(&config.train, &train_set, &config.encoder).map_err(|e| e.in_stage("train"))?;
    write_json(&out.join("run_manifest.json"), &trained.manifest).map_err(|e| e.in_stage("train"))?;
    save_checkpoint(&trained.encoder, &out.join("encoder.ckpt")).map_err(|e| e.in_stage("train"))?;

    let emb = embed_dataset(&trained.encoder, &eval_set, config.bbox_crop, config.normalize).map_err(|e| e.in_stage("embed"))?;
    write_embeddings(&emb, &out.join("embeddings")).map_err(|e| e.in_stage("embed"))?;
    let groups: Vec<Option<String>> = eval_set.iter().map(|r| r.group_id.clone()).collect();
    write_truth(&out.join("truth.jsonl"), &emb.ids, &groups).map_err(|e| e.in_stage("embed"))?;

    let assignments = config.clustering.run(&emb).map_err(|e| e.in_stage("cluster"))?;
    let sweep_dir = out.join("sweep");
    mkdir(&sweep_dir).map_err(|e| e.in_stage("cluster"))?;
    let mut sweep = Vec::with_capacity(assignments.len());
    for (i, (point, assignment)) in assignments.iter().enumerate() {
        write_assignments(&sweep_dir.join(format!("{i:03}.assignments.jsonl")), assignment).map_err(|e| e.in_stage("cluster"))?;
        let report = evaluate(&groups, &assignment.labels).map_err(|e| e.in_stage("evaluate"))?;
        let result = SweepResult { point: point.clone(), converged: assignment.converged, report };
        write_json(&sweep_dir.join(format!("{i:03}.report.json")), &result).map_err(|e| e.in_stage("evaluate"))?;
        sweep.push(result);
    }
    let best_idx = {
        let best = select_best(&sweep).ok_or_else(|| Error::Config("empty sweep".into()).in_stage("evaluate"))?;
        sweep.iter().position(|r| std::ptr::eq(r, best)).unwrap_or(0)
    };
    let best = sweep[best_idx].clone();
    #[derive(Serialize)]
    struct SweepFile<'a> {
        seed: u64,
        best_index: usize,
        points: &'a [SweepResult],
        config: &'a ExperimentConfig,
    }
    write_json(&out.join("sweep.json"), &SweepFile { seed: config.seed, best_index: best_idx, points: &sweep, config: &config })
        .map_err(|e| e.in_stage("report"))?;

    let report = RunReport {
        seed: config.seed,
        method: config.train.method,
        normalize: config.normalize,
        dataset: data.label.clone(),
        eval_split: data.split_name().into(),
        n_eval: eval_set.len(),
        selected: best.point.clone(),
        report: best.report.clone(),
        sweep_grid: sweep.iter().map(|r| r.point.clone()).collect(),
        config: config.clone(),
    };
    write_json(&out.join("report.json"), &report).map_err(|e| e.in_stage("report"))?;
    let table = format_table(&data.label, &[(config.run_label(), best.report.clone())]);
    fs::write(out.join("report.txt"), format!("seed {}\n{table}", config.seed))
        .map_err(|e| Error::io(out.join("report.txt"), e).in_stage("report"))?;
    if config.contact_sheets {
        write_contact_sheets(&out.join("contact_sheets"), &eval_set, &assignments[best_idx].1).map_err(|e| e.in_stage("report"))?;
    }
    Ok(ExperimentOutcome { report, sweep, manifest: trained.manifest, out_dir: out })
}

pub fn run_experiment_file(path: &Path) -> Result<ExperimentOutcome> {
    let cfg = ExperimentConfig::load(path).map_err(|e| e.in_stage("config"))?;
    run_experiment(&cfg)
}

/// Recomputes an `EvalReport` from a truth file and an assignment file.
pub fn evaluate_files(truth: &Path, assignments: &Path) -> Result<EvalReport> {
    let t = read_truth(truth)?;
    let a = read_assignments(assignments)?;
    let (groups, labels) = align_by_id(&t, &a)?;
    evaluate(&groups, &labels)
}

const THUMB: u32 = 48;
const SHEET_COLS: u32 = 8;

/// One PNG per predicted cluster (noise points share `noise.png`).
pub fn write_contact_sheets(dir: &Path, records: &[&ImageRecord], assignment: &ClusterAssignment) -> Result<Vec<PathBuf>> {
    mkdir(dir)?;
    let mut clusters: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
    for (i, &l) in assignment.labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    let mut written = Vec::new();
    for (label, members) in clusters {
        let cols = SHEET_COLS.min(members.len() as u32);
        let rows = (members.len() as u32).div_ceil(cols);
        let pad = 2;
        let mut sheet = RgbImage::from_pixel(cols * (THUMB + pad) + pad, rows * (THUMB + pad) + pad, Rgb([255, 255, 255]));
        for (slot, &i) in members.iter().enumerate() {
            let img = crop_primary(records[i])?;
            let thumb = imageops::resize(&img, THUMB, THUMB, imageops::FilterType::Triangle);
            let (c, r) = (slot as u32 % cols, slot as u32 / cols);
            imageops::replace(&mut sheet, &thumb, (pad + c * (THUMB + pad)) as i64, (pad + r * (THUMB + pad)) as i64);
        }
        let name = if label == NOISE { "noise.png".to_string() } else { format!("cluster_{label:03}.png") };
        let path = dir.join(name);
        sheet.save(&path).map_err(|e| Error::parse(path.display().to_string(), e))?;
        written.push(path);
    }
    Ok(written)
}

/// Aligned metric table: one row for the dataset, four cells per column.
pub fn format_table(dataset: &str, columns: &[(String, EvalReport)]) -> String {
    let cell_w = 29;
    let first_w = dataset.len().max(7);
    let mut head = format!("{:first_w$}", "dataset");
    let mut sub = format!("{:first_w$}", "");
    let mut row = format!("{dataset:first_w$}");
    for (label, r) in columns {
        head.push_str(&format!(" | {label:<cell_w$}"));
        sub.push_str(&format!(" | {:<6} {:<6} {:<6} {:<6}  ", "CGacc", "ARI", "FMS", "CScore"));
        row.push_str(&format!(" | {:<6.3} {:<6.3} {:<6.3} {:<6.3}  ", r.cgacc, r.ari, r.fms, r.cscore));
    }
    format!("{}\n{}\n{}\n", head.trim_end(), sub.trim_end(), row.trim_end())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    pub columns: Vec<ComparisonColumn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonColumn {
    pub label: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub report: EvalReport,
}

impl Comparison {
    pub fn table(&self) -> String {
        let cols: Vec<(String, EvalReport)> = self.columns.iter().map(|c| (c.label.clone(), c.report.clone())).collect();
        format_table(&self.dataset, &cols)
    }

    pub fn column(&self, label: &str) -> Option<&EvalReport> {
        self.columns.iter().find(|c| c.label == label).map(|c| &c.report)
    }

    /// Writes `comparison.txt`, `comparison.json` and `comparison.png`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        mkdir(dir)?;
        let txt = dir.join("comparison.txt");
        fs::write(&txt, self.table()).map_err(|e| Error::io(&txt, e))?;
        write_json(&dir.join("comparison.json"), self)?;
        let png = dir.join("comparison.png");
        bar_chart(&self.columns.iter().map(|c| &c.report).collect::<Vec<_>>())
            .save(&png)
            .map_err(|e| Error::parse(png.display().to_string(), e))
    }
}

const METRIC_COLORS: [[u8; 3]; 4] = [[66, 133, 244], [219, 68, 55], [244, 180, 0], [15, 157, 88]];

/// Grouped bars, one group per column, bars in CGacc/ARI/FMS/CScore order.
pub fn bar_chart(reports: &[&EvalReport]) -> RgbImage {
    let (bar_w, gap, plot_h, margin) = (14u32, 18u32, 200u32, 20u32);
    let group_w = 4 * bar_w + gap;
    let width = 2 * margin + group_w * reports.len().max(1) as u32;
    let height = plot_h + 2 * margin;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let base = margin + plot_h;
    for x in margin / 2..width - margin / 2 {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    for y in margin..=base {
        img.put_pixel(margin / 2, y, Rgb([0, 0, 0]));
    }
    for (g, r) in reports.iter().enumerate() {
        let values = [r.cgacc, r.ari, r.fms, r.cscore];
        for (k, v) in values.iter().enumerate() {
            let h = (v.clamp(0.0, 1.0) * plot_h as f64).round() as u32;
            let x0 = margin + g as u32 * group_w + k as u32 * bar_w;
            for x in x0..x0 + bar_w - 2 {
                for y in base - h..base {
                    img.put_pixel(x, y, Rgb(METRIC_COLORS[k]));
                }
            }
        }
    }
    img
}

/// Runs each config and assembles the comparison. All configs must share
/// the same eval split; this is checked before any training starts.
pub fn compare_configs(configs: &[ExperimentConfig]) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(Error::Config("comparison needs at least two configs".into()));
    }
    let first = Dataset::load(&configs[0]).map_err(|e| e.in_stage("dataset"))?;
    for c in &configs[1..] {
        let d = Dataset::load(c).map_err(|e| e.in_stage("dataset"))?;
        if !first.same_eval_split(&d) {
            return Err(Error::Config(format!("eval split of `{}` differs from `{}`", c.out_dir.display(), configs[0].out_dir.display()))
                .in_stage("compare"));
        }
    }
    let mut columns: Vec<ComparisonColumn> = Vec::new();
    for c in configs {
        let outcome = run_experiment(c)?;
        let mut label = c.run_label();
        if columns.iter().any(|col| col.label == label) {
            label = format!("{label} #{}", columns.len() + 1);
        }
        columns.push(ComparisonColumn { label, seed: c.seed, out_dir: outcome.out_dir, report: outcome.report.report });
    }
    Ok(Comparison { dataset: first.label, columns })
}

pub fn compare_methods(paths: &[PathBuf]) -> Result<Comparison> {
    let configs = paths.iter().map(|p| ExperimentConfig::load(p).map_err(|e| e.in_stage("config"))).collect::<Result<Vec<_>>>()?;
    compare_configs(&configs)
}

/// One run per method from a shared base config, each in `<out_dir>/<method>`,
/// plus the merged comparison written to `out_dir`.
pub fn run_ablation(base: &ExperimentConfig, methods: &[Method]) -> Result<Comparison> {
    if methods.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let configs: Vec<ExperimentConfig> = methods
        .iter()
        .map(|&m| {
            let mut c = base.clone().with_method(m);
            c.ablation.clear();
            c.out_dir = base.out_dir.join(m.name());
            c
        })
        .collect();
    let cmp = if configs.len() == 1 {
        let o = run_experiment(&configs[0])?;
        Comparison {
            dataset: o.report.dataset.clone(),
            columns: vec![ComparisonColumn { label: configs[0].run_label(), seed: base.seed, out_dir: o.out_dir, report: o.report.report }],
        }
    } else {
        compare_configs(&configs)?
    };
    cmp.write(&base.out_dir).map_err(|e| e.in_stage("report"))?;
    Ok(cmp)
}
