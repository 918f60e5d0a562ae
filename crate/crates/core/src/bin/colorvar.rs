use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use colorvar::clustering::{affinity_propagation, agglomerative_ward, dbscan, AffinityParams};
use colorvar::dataset::{generate_synthetic, write_dataset, SyntheticSpec};
use colorvar::experiment::{compare_methods, evaluate_files, run_ablation, run_experiment, Dataset, ExperimentConfig};
use colorvar::export::{read_embeddings, write_assignments, write_embeddings, write_truth};
use colorvar::model::{embed_dataset, load_checkpoint, save_checkpoint};
use colorvar::trainers::{train, Method};
use colorvar::{Error, Result};

#[derive(Parser)]
#[command(name = "colorvar", version, about = "Color-variant identification: train, embed, cluster and score")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by the config-driven verbs.
#[derive(clap::Args)]
struct Overrides {
    /// Experiment config (TOML or JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).map_err(|e| e.in_stage("config"))?;
        if let Some(m) = self.method {
            cfg = cfg.with_method(m);
        }
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images + manifest.jsonl).
    Generate {
        /// Synthetic spec file (TOML or JSON); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder and write encoder.ckpt and run_manifest.json.
    Train(Overrides),
    /// Embed the eval split with a trained checkpoint.
    Embed {
        #[command(flatten)]
        over: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cluster an embedding export.
    Cluster {
        /// Embedding export stem (without `.ids.txt` / `.f32`).
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_parser = ["agglomerative_ward", "dbscan", "affinity_propagation"])]
        algorithm: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 2)]
        min_pts: usize,
        #[arg(long, default_value_t = 0.5)]
        damping: f64,
        #[arg(long)]
        preference: Option<f64>,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an assignment file against a truth file.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline, or the ablation grid when the config lists one.
    Run(Overrides),
    /// Run several configs over one eval split and tabulate them.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable value")
}

fn write(path: &Path, text: String, stage: &'static str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e }.in_stage(stage))?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e }.in_stage(stage))
}

fn load_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| Error::Parse { context: path.display().to_string(), message })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, seed, out } => {
            let mut spec = match spec {
                Some(p) => load_spec(&p).map_err(|e| e.in_stage("config"))?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let records = generate_synthetic(&spec).map_err(|e| e.in_stage("dataset"))?;
            let manifest = write_dataset(&records, &out).map_err(|e| e.in_stage("dataset"))?;
            println!("wrote {} images, manifest {}", records.len(), manifest.display());
        }
        Command::Train(over) => {
            let cfg = over.load()?;
            cfg.validate().map_err(|e| e.in_stage("config"))?;
            let data = Dataset::load(&cfg).map_err(|e| e.in_stage("dataset"))?;
            let trained = train(&cfg.train, &data.train(), &cfg.encoder).map_err(|e| e.in_stage("train"))?;
            let ckpt = cfg.out_dir.join("encoder.ckpt");
            write(&cfg.out_dir.join("run_manifest.json"), json(&trained.manifest), "train")?;
            save_checkpoint(&trained.encoder, &ckpt).map_err(|e| e.in_stage("train"))?;
            println!("checkpoint {}", ckpt.display());
        }
        Command::Embed { over, checkpoint } => {
            let cfg = over.load()?;
            let encoder = load_checkpoint(&checkpoint).map_err(|e| e.in_stage("embed"))?;
            let data = Dataset::load(&cfg).map_err(|e| e.in_stage("dataset"))?;
            let eval = data.eval();
            let emb = embed_dataset(&encoder, &eval, cfg.bbox_crop, cfg.normalize).map_err(|e| e.in_stage("embed"))?;
            fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io { path: cfg.out_dir.clone(), source: e }.in_stage("embed"))?;
            let (ids, _) = write_embeddings(&emb, &cfg.out_dir.join("embeddings")).map_err(|e| e.in_stage("embed"))?;
            let groups: Vec<_> = eval.iter().map(|r| r.group_id.clone()).collect();
            write_truth(&cfg.out_dir.join("truth.jsonl"), &emb.ids, &groups).map_err(|e| e.in_stage("embed"))?;
            println!("embeddings {}", ids.display());
        }
        Command::Cluster { embeddings, algorithm, threshold, eps, min_pts, damping, preference, max_iter, out } => {
            let emb = read_embeddings(&embeddings).map_err(|e| e.in_stage("cluster"))?;
            let missing = |flag: &str| Error::Config(format!("--{flag} is required for {algorithm}")).in_stage("cluster");
            let assignment = match algorithm.as_str() {
                "agglomerative_ward" => agglomerative_ward(&emb, threshold.ok_or_else(|| missing("threshold"))?),
                "dbscan" => dbscan(&emb, eps.ok_or_else(|| missing("eps"))?, min_pts),
                _ => affinity_propagation(&emb, AffinityParams { damping, max_iter, preference, ..AffinityParams::default() }),
            }
            .map_err(|e| e.in_stage("cluster"))?;
            write_assignments(&out, &assignment).map_err(|e| e.in_stage("cluster"))?;
            println!("{} clusters, assignments {}", assignment.n_clusters(), out.display());
        }
        Command::Evaluate { truth, assignments, out } => {
            let report = evaluate_files(&truth, &assignments).map_err(|e| e.in_stage("evaluate"))?;
            let text = json(&report);
            println!("{text}");
            if let Some(o) = out {
                write(&o, text + "\n", "evaluate")?;
            }
        }
        Command::Run(over) => {
            let cfg = over.load()?;
            if cfg.ablation.is_empty() {
                let outcome = run_experiment(&cfg)?;
                println!("{}", json(&outcome.report.report));
            } else {
                let cmp = run_ablation(&cfg, &cfg.ablation)?;
                print!("{}", cmp.table());
            }
        }
        Command::Compare { configs, out } => {
            let cmp = compare_methods(&configs)?;
            cmp.write(&out).map_err(|e| e.in_stage("report"))?;
            print!("{}", cmp.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("colorvar: {e}");
            ExitCode::FAILURE
        }
    }
}
