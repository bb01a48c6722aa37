use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use gsmoe::data::{generate_synthetic, load_container, save_container, write_ground_truth_csv, Dataset, VideoRecord};
use gsmoe::metrics::{write_eval_csv, EvalResult};
use gsmoe::model::ModelBundle;
use gsmoe::signal::{make_targets, read_scores_csv, write_pseudo_labels_csv, ScoreSeries};
use gsmoe::train::{
    cluster_videos, expert_assignment, train_experts, train_fuser, train_task_encoder, ExpertMode, TrainLog,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::plot::{render_svg, Series};
use crate::runs::{encoder_scores, run_seed, score_dataset, stage_metrics, with_seed_offset, StageMetrics};
use crate::CliError;

pub const TRAIN_DATA: &str = "data/train.gsmk";
pub const TEST_DATA: &str = "data/test.gsmk";
pub const GT_CSV: &str = "data/gt.csv";
pub const MIL_CKPT: &str = "models/encoder_mil.gsmk";
pub const ENCODER_CKPT: &str = "models/encoder.gsmk";
pub const EXPERTS_CKPT: &str = "models/experts.gsmk";
pub const MODEL_CKPT: &str = "models/model.gsmk";

#[derive(Debug, Parser)]
#[command(
    name = "gsmoe",
    version,
    about = "Gaussian-splatting guided mixture of experts for weakly supervised anomaly detection",
    after_help = "Any config field can be overridden with `--section.key value`, e.g. `--train.seed 3` \
                  or `--data.t_range [40,80]`; `--output_dir DIR` moves all outputs."
)]
pub struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Encoder,
    Experts,
    Gate,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExpertModeArg {
    Class,
    Cluster,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test splits.
    GenData,
    /// Train one stage, or all three in order.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long, value_enum)]
        expert_mode: Option<ExpertModeArg>,
    },
    /// Score a test split with a checkpoint and write metrics.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Expert (name or index) replaced by a constant before fusion.
        #[arg(long)]
        mask: Option<String>,
        /// Run generate, train and evaluate for this many consecutive seeds.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Turn a score CSV into a pseudo-label CSV.
    Splat {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// K-means over mean task features of the abnormal training videos.
    Cluster {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// SVG of one video's scores, pseudo-labels and ground truth.
    Plot {
        #[arg(long)]
        video: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), overrides)?;
    if let Command::Train { expert_mode: Some(m), .. } = &cli.command {
        cfg.train.expert_mode = match m {
            ExpertModeArg::Class => ExpertMode::Class,
            ExpertModeArg::Cluster => ExpertMode::Cluster,
        };
    }
    cfg.write_resolved()?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train { stage, .. } => train(&cfg, stage),
        Command::Eval { seeds: Some(n), .. } => eval_seeds(&cfg, n),
        Command::Eval {
            checkpoint, data, mask, ..
        } => eval(&cfg, checkpoint, data, mask),
        Command::Splat { scores, out } => splat(&cfg, &scores, out),
        Command::Cluster { checkpoint, data } => cluster(&cfg, checkpoint, data),
        Command::Plot {
            video,
            checkpoint,
            data,
            out,
        } => plot(&cfg, &video, checkpoint, data, out),
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(gsmoe::Error::from)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    create_parent(path)?;
    fs::write(path, text).map_err(gsmoe::Error::from)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    create_parent(path)?;
    Ok(BufWriter::new(File::create(path).map_err(gsmoe::Error::from)?))
}

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    load_container(path).map_err(|e| match e {
        gsmoe::Error::Io(io) => gsmoe::Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
    .map_err(CliError::from)
}

fn load_bundle(path: &Path) -> Result<ModelBundle, CliError> {
    ModelBundle::load(path).map_err(CliError::from)
}

fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<(), CliError> {
    create_parent(path)?;
    bundle.save(path)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let split = generate_synthetic(&cfg.data)?;
    for (rel, ds) in [(TRAIN_DATA, &split.train), (TEST_DATA, &split.test)] {
        let path = cfg.path(rel);
        create_parent(&path)?;
        save_container(&path, ds)?;
    }
    let mut w = create(&cfg.path(GT_CSV))?;
    write_ground_truth_csv(&mut w, &split.test)?;
    w.flush().map_err(gsmoe::Error::from)?;
    eprintln!(
        "wrote {} train and {} test videos to {}",
        split.train.records.len(),
        split.test.records.len(),
        cfg.path("data").display()
    );
    Ok(())
}

/// JSON-lines training log; the start time is the only non-deterministic
/// field in any output.
fn write_log(cfg: &RunConfig, stage: &str, log: &TrainLog, checkpoints: &[&str]) -> Result<(), CliError> {
    let unix_time = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut w = create(&cfg.path(&format!("logs/train_{stage}.jsonl")))?;
    let mut line = |v: Value| writeln!(w, "{v}").map_err(gsmoe::Error::from);
    line(json!({"event": "start", "command": "train", "stage": stage, "unix_time": unix_time}))?;
    for e in &log.epochs {
        let mut v = serde_json::to_value(e).expect("log serialises");
        v["event"] = json!("epoch");
        line(v)?;
    }
    for m in &log.warnings {
        line(json!({"event": "warning", "message": m}))?;
    }
    line(json!({"event": "done", "checkpoints": checkpoints}))?;
    w.flush().map_err(gsmoe::Error::from)?;
    Ok(())
}

fn train(cfg: &RunConfig, stage: StageArg) -> Result<(), CliError> {
    let train = load_data(&cfg.path(TRAIN_DATA))?;
    let tc = &cfg.train;
    if matches!(stage, StageArg::Encoder | StageArg::All) {
        let mut log = TrainLog::default();
        let s = train_task_encoder(&train, tc, &mut log)?;
        let only = |encoder| ModelBundle {
            config: tc.model.clone(),
            encoder,
            experts: Vec::new(),
            expert_names: Vec::new(),
            fuser: None,
        };
        save_bundle(&cfg.path(MIL_CKPT), &only(s.mil))?;
        save_bundle(&cfg.path(ENCODER_CKPT), &only(s.encoder))?;
        write_log(cfg, "encoder", &log, &[MIL_CKPT, ENCODER_CKPT])?;
    }
    if matches!(stage, StageArg::Experts | StageArg::All) {
        let mut log = TrainLog::default();
        let mut bundle = load_bundle(&cfg.path(ENCODER_CKPT))?;
        let assignment = expert_assignment(&bundle.encoder, &train, tc)?;
        let (experts, names) = train_experts(&bundle.encoder, &train, &assignment, tc, &mut log)?;
        bundle.experts = experts;
        bundle.expert_names = names;
        bundle.fuser = None;
        save_bundle(&cfg.path(EXPERTS_CKPT), &bundle)?;
        write_log(cfg, "experts", &log, &[EXPERTS_CKPT])?;
    }
    if matches!(stage, StageArg::Gate | StageArg::All) {
        let mut log = TrainLog::default();
        let mut bundle = load_bundle(&cfg.path(EXPERTS_CKPT))?;
        if bundle.experts.is_empty() {
            return Err(CliError::Usage(format!("{EXPERTS_CKPT} holds no experts; train them first")));
        }
        bundle.fuser = Some(train_fuser(&bundle.encoder, &bundle.experts, &train, tc, &mut log)?);
        save_bundle(&cfg.path(MODEL_CKPT), &bundle)?;
        write_log(cfg, "gate", &log, &[MODEL_CKPT])?;
    }
    Ok(())
}

fn resolve_mask(bundle: &ModelBundle, mask: &str) -> Result<usize, CliError> {
    if let Some(i) = bundle.expert_names.iter().position(|n| n == mask) {
        return Ok(i);
    }
    match mask.parse::<usize>() {
        Ok(i) if i < bundle.experts.len() => Ok(i),
        _ => Err(CliError::Usage(format!(
            "no expert `{mask}`; known: {}",
            bundle.expert_names.join(", ")
        ))),
    }
}

fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, data: Option<PathBuf>, mask: Option<String>) -> Result<(), CliError> {
    let bundle = load_bundle(&checkpoint.unwrap_or_else(|| cfg.path(MODEL_CKPT)))?;
    let test = load_data(&data.unwrap_or_else(|| cfg.path(TEST_DATA)))?;
    let mask_index = mask.as_deref().map(|m| resolve_mask(&bundle, m)).transpose()?;
    let scores = score_dataset(&bundle, &test, mask_index)?;
    let mil_path = cfg.path(MIL_CKPT);
    let mil = if mil_path.exists() {
        Some(encoder_scores(&load_bundle(&mil_path)?.encoder, &test)?)
    } else {
        None
    };
    let metrics = stage_metrics(&scores, mil.as_deref(), &test)?;

    let suffix = match mask_index {
        Some(i) => format!(".mask-{}", bundle.expert_names[i]),
        None => String::new(),
    };
    let mut doc = serde_json::to_value(&metrics).expect("metrics serialise");
    if let Some(i) = mask_index {
        doc["masked_expert"] = json!(bundle.expert_names[i]);
    }
    write_text(
        &cfg.path(&format!("eval/metrics{suffix}.json")),
        &(serde_json::to_string_pretty(&doc).expect("json") + "\n"),
    )?;
    let mut w = create(&cfg.path(&format!("eval/metrics{suffix}.csv")))?;
    write_eval_csv(&mut w, &metrics.headline)?;
    w.flush().map_err(gsmoe::Error::from)?;

    let mut w = create(&cfg.path(&format!("eval/scores{suffix}.csv")))?;
    let io = |r: std::io::Result<()>| r.map_err(gsmoe::Error::from);
    io(writeln!(w, "video_id,snippet,encoder,experts_max,fused"))?;
    for (i, r) in test.records.iter().enumerate() {
        for t in 0..r.len() {
            let opt = |s: &Option<Vec<Vec<f64>>>| s.as_ref().map(|s| s[i][t].to_string()).unwrap_or_default();
            io(writeln!(
                w,
                "{},{t},{},{},{}",
                r.id,
                scores.encoder[i][t],
                opt(&scores.experts_max),
                opt(&scores.fused)
            ))?;
        }
    }
    io(w.flush())?;
    eprintln!(
        "auc {:.4}  ap {:.4}  auc_a {:.4}  ap_a {:.4}",
        metrics.headline.auc, metrics.headline.ap, metrics.headline.auc_a, metrics.headline.ap_a
    );
    Ok(())
}

fn mean_of(results: &[&EvalResult]) -> Value {
    let n = results.len() as f64;
    let avg = |f: fn(&EvalResult) -> f64| results.iter().map(|r| f(r)).sum::<f64>() / n;
    json!({
        "auc": avg(|r| r.auc),
        "ap": avg(|r| r.ap),
        "auc_a": avg(|r| r.auc_a),
        "ap_a": avg(|r| r.ap_a),
    })
}

fn eval_seeds(cfg: &RunConfig, n: u64) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut runs: Vec<(u64, StageMetrics)> = (0..n)
        .into_par_iter()
        .map(|i| run_seed(&with_seed_offset(cfg, i)).map(|r| (i, r.metrics)))
        .collect::<gsmoe::Result<_>>()?;
    runs.sort_by_key(|(i, _)| *i);

    let stages: [(&str, fn(&StageMetrics) -> Option<&EvalResult>); 4] = [
        ("mil_encoder", |m| m.mil_encoder.as_ref()),
        ("encoder", |m| Some(&m.encoder)),
        ("experts_max", |m| m.experts_max.as_ref()),
        ("fused", |m| m.fused.as_ref()),
    ];
    let mut mean = serde_json::Map::new();
    let mut csv = String::from("data_seed,train_seed,stage,auc,ap,auc_a,ap_a\n");
    for (name, get) in stages {
        let got: Vec<&EvalResult> = runs.iter().filter_map(|(_, m)| get(m)).collect();
        if got.len() == runs.len() {
            mean.insert(name.into(), mean_of(&got));
        }
        for (i, m) in &runs {
            if let Some(r) = get(m) {
                csv.push_str(&format!(
                    "{},{},{name},{},{},{},{}\n",
                    cfg.data.seed + i,
                    cfg.train.seed + i,
                    r.auc,
                    r.ap,
                    r.auc_a,
                    r.ap_a
                ));
            }
        }
    }
    let doc = json!({
        "runs": runs.iter().map(|(i, m)| json!({
            "data_seed": cfg.data.seed + i,
            "train_seed": cfg.train.seed + i,
            "metrics": m,
        })).collect::<Vec<_>>(),
        "mean": mean,
    });
    write_text(&cfg.path("eval/seeds.json"), &(serde_json::to_string_pretty(&doc).expect("json") + "\n"))?;
    write_text(&cfg.path("eval/seeds.csv"), &csv)?;
    for (name, v) in &mean {
        eprintln!("{name:12} mean auc {:.4}", v["auc"].as_f64().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn splat(cfg: &RunConfig, scores: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let file = File::open(scores).map_err(gsmoe::Error::from)?;
    let series = read_scores_csv(BufReader::new(file))?;
    let labels = make_targets(&series, &cfg.train.splat)?;
    let out = out.unwrap_or_else(|| cfg.path("splat/pseudo_labels.csv"));
    let mut w = create(&out)?;
    write_pseudo_labels_csv(&mut w, &labels)?;
    w.flush().map_err(gsmoe::Error::from)?;
    Ok(())
}

fn cluster(cfg: &RunConfig, checkpoint: Option<PathBuf>, data: Option<PathBuf>) -> Result<(), CliError> {
    let bundle = load_bundle(&checkpoint.unwrap_or_else(|| cfg.path(ENCODER_CKPT)))?;
    let train = load_data(&data.unwrap_or_else(|| cfg.path(TRAIN_DATA)))?;
    let records: Vec<&VideoRecord> = train.abnormal().collect();
    let k = cfg.train.n_clusters.unwrap_or(train.n_classes());
    let labels = cluster_videos(&bundle.encoder, &records, k, cfg.train.seed)?;
    let mut csv = String::from("video_id,class,cluster\n");
    for (r, c) in records.iter().zip(&labels) {
        let class = r
            .class_id
            .and_then(|i| train.class_names.get(i).cloned())
            .unwrap_or_default();
        csv.push_str(&format!("{},{class},{c}\n", r.id));
    }
    write_text(&cfg.path("cluster/clusters.csv"), &csv)
}

fn plot(
    cfg: &RunConfig,
    video: &str,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let bundle = load_bundle(&checkpoint.unwrap_or_else(|| cfg.path(MODEL_CKPT)))?;
    let ds = load_data(&data.unwrap_or_else(|| cfg.path(TEST_DATA)))?;
    let record = ds
        .records
        .iter()
        .find(|r| r.id == video)
        .ok_or_else(|| CliError::Usage(format!("no video `{video}` in the dataset")))?;
    let s = bundle.score(&record.features)?;
    let experts = (!bundle.experts.is_empty()).then(|| s.experts_max());
    let last = s.fused.clone().or_else(|| experts.clone()).unwrap_or_else(|| s.encoder.clone());
    let pseudo = make_targets(&ScoreSeries::new(last)?, &cfg.train.splat)?;

    let mut series = vec![Series {
        name: "encoder",
        values: &s.encoder,
        color: "#888888",
        dashed: false,
    }];
    if let Some(e) = &experts {
        series.push(Series {
            name: "experts (max)",
            values: e,
            color: "#1f77b4",
            dashed: false,
        });
    }
    if let Some(f) = &s.fused {
        series.push(Series {
            name: "fused",
            values: f,
            color: "#000000",
            dashed: false,
        });
    }
    series.push(Series {
        name: "pseudo-labels",
        values: pseudo.targets(),
        color: "#ff7f0e",
        dashed: true,
    });
    let svg = render_svg(video, &series, record.snippet_gt.as_deref());
    let out = out.unwrap_or_else(|| cfg.path(&format!("plots/{}.svg", video.replace('/', "_"))));
    write_text(&out, &svg)
}
