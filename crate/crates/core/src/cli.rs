//! Command-line front end: `gen`, `train`, `track`, `eval`, `stats`.
//!
//! Sequences live in a directory as `<video>.det.jsonl` (detections),
//! `<video>.gt.json` (annotations) and `<video>.traj.jsonl` (tracker
//! output). Every command that writes files echoes its effective
//! configuration as `config.json` next to them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::association::{track_sequence, TrackerConfig};
use crate::data_io::{
    parse_annotations, parse_detection_stream, read_trajectories, trajectories_as_annotations, write_annotations,
    write_detection_stream, write_trajectories, Annotations,
};
use crate::error::{Error, Result};
use crate::matcher::{load_checkpoint, save_checkpoint, MatcherDims, MatcherVariant, Model, SimilarityConfig};
use crate::metrics::{evaluate, EvalConfig, EvalMode, MotReport};
use crate::synth::{generate_sequence, SynthConfig};
use crate::training::{train, LossConfig, Sequence, TrainConfig};

pub const DET_SUFFIX: &str = ".det.jsonl";
pub const GT_SUFFIX: &str = ".gt.json";
pub const TRAJ_SUFFIX: &str = ".traj.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: MatcherVariant,
    /// Ignored by the similarity-only variant, which embeds with the raw
    /// queries.
    pub d_e: usize,
    pub similarity: SimilarityConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: MatcherVariant::CrossAttnBased,
            d_e: 32,
            similarity: SimilarityConfig::default(),
        }
    }
}

/// Everything a run needs, loaded from JSON with flag overrides on top.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub tracker: TrackerConfig,
    pub eval: EvalConfig,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.tracker.validate()?;
        self.eval.validate()?;
        self.model.similarity.validate().map_err(Error::Config)?;
        if self.model.d_e == 0 {
            return Err(Error::Config("model.d_e must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[derive(Debug, Parser)]
#[command(name = "qtrack", version, about = "Embedding-based video text tracking")]
pub struct Cli {
    /// JSON configuration; flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for generation, initialization and clip sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Matcher: transformer, similarity, ffn or crossattn.
    #[arg(long, global = true, value_parser = parse_variant)]
    pub variant: Option<MatcherVariant>,
    /// Association threshold θ.
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    /// Memory bank depth H in frames.
    #[arg(long, global = true)]
    pub history: Option<u32>,
    /// Shortest trajectory kept in the output.
    #[arg(long = "min-track-len", global = true)]
    pub min_track_len: Option<usize>,
    /// Evaluation mode: tracking or spotting.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<EvalMode>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_variant(s: &str) -> std::result::Result<MatcherVariant, String> {
    s.parse()
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic detection streams and annotations.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        sequences: usize,
    },
    /// Train a model on every annotated stream of a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track one stream file, or every stream of a directory.
    Track {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        /// Trajectory file, or a directory when `--stream` is one.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trajectories against ground truth (files or directories).
    Eval {
        /// Annotations, or a trajectory file used as ground truth.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Directory for `report.json` and `report.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histograms of instances per frame, text length and category.
    Stats {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Cli {
    /// Loads the config file (if any), applies flag overrides and
    /// validates the result.
    pub fn effective_config(&self) -> Result<CliConfig> {
        let mut cfg = match &self.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(t) = self.theta {
            cfg.tracker.assoc_threshold = t;
        }
        if let Some(h) = self.history {
            cfg.tracker.history_depth = h;
        }
        if let Some(m) = self.min_track_len {
            cfg.tracker.min_track_len = m;
        }
        if let Some(m) = self.mode {
            cfg.eval.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo_config(dir: &Path, cfg: &CliConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_json())
}

/// Files of `dir` ending in `suffix`, keyed by the name before it.
fn files_with_suffix(dir: &Path, suffix: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if let Some(stem) = name.strip_suffix(suffix) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Annotations from a `.json` file, or trajectories read as annotations.
fn load_tracks(path: &Path) -> Result<Annotations> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".jsonl") {
        let video = name.strip_suffix(TRAJ_SUFFIX).unwrap_or(name);
        Ok(trajectories_as_annotations(video, &read_trajectories(path)?))
    } else {
        Ok(parse_annotations(path)?)
    }
}

pub fn cmd_gen(cfg: &CliConfig, out: &Path, sequences: usize) -> Result<Vec<String>> {
    if sequences == 0 {
        return Err(Error::Config("--sequences must be positive".into()));
    }
    create_dir(out)?;
    let mut videos = Vec::with_capacity(sequences);
    for i in 0..sequences {
        let mut sc = cfg.synth.clone();
        sc.seed = cfg.synth.seed.wrapping_add(i as u64);
        if sequences > 1 {
            sc.video = format!("{}-{i:03}", cfg.synth.video);
        }
        let (stream, ann) = generate_sequence(&sc)?;
        write_detection_stream(&stream, out.join(format!("{}{DET_SUFFIX}", sc.video)))?;
        write_annotations(&ann, out.join(format!("{}{GT_SUFFIX}", sc.video)))?;
        info!("wrote {} with {} detections", sc.video, stream.num_records());
        videos.push(sc.video);
    }
    echo_config(out, cfg)?;
    Ok(videos)
}

/// Every `<video>.det.jsonl` of `dir` with its `<video>.gt.json`.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    let streams = files_with_suffix(dir, DET_SUFFIX)?;
    if streams.is_empty() {
        return Err(Error::Invalid(format!("no *{DET_SUFFIX} files in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(streams.len());
    for (video, path) in streams {
        let gt = dir.join(format!("{video}{GT_SUFFIX}"));
        if !gt.exists() {
            return Err(Error::Invalid(format!("{} has no annotations {}", path.display(), gt.display())));
        }
        out.push(Sequence {
            stream: parse_detection_stream(&path)?,
            annotations: parse_annotations(&gt)?,
        });
    }
    Ok(out)
}

pub fn cmd_train(cfg: &CliConfig, data: &Path, out: &Path) -> Result<Model> {
    let dataset = load_dataset(data)?;
    let d_q = dataset[0].stream.header.d_q;
    let d_e = if cfg.model.variant == MatcherVariant::SimilarityOnly {
        d_q
    } else {
        cfg.model.d_e
    };
    let mut model = Model::init(cfg.model.variant, MatcherDims::new(d_q, d_e), cfg.train.seed)?;
    model.similarity = cfg.model.similarity;
    let report = train(&mut model, &dataset, &cfg.train, &cfg.loss)?;
    create_dir(out)?;
    save_checkpoint(&model, out.join(CHECKPOINT_FILE))?;
    let mut csv = String::from("step,learning_rate,total,rescoring,short_term,long_term\n");
    for (i, (l, lr)) in report.losses.iter().zip(&report.learning_rates).enumerate() {
        csv.push_str(&format!(
            "{i},{lr},{},{},{},{}\n",
            l.total, l.rescoring, l.short_term, l.long_term
        ));
    }
    write_file(&out.join(LOSS_FILE), &csv)?;
    echo_config(out, cfg)?;
    Ok(model)
}

pub fn cmd_track(cfg: &CliConfig, model_path: &Path, stream: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    if stream.is_dir() {
        create_dir(out)?;
        for (video, path) in files_with_suffix(stream, DET_SUFFIX)? {
            let s = parse_detection_stream(&path)?;
            let tracks = track_sequence(&s, &model, &cfg.tracker)?;
            write_trajectories(&tracks, out.join(format!("{video}{TRAJ_SUFFIX}")))?;
            info!("{video}: {} trajectories", tracks.len());
        }
        echo_config(out, cfg)
    } else {
        let s = parse_detection_stream(stream)?;
        let tracks = track_sequence(&s, &model, &cfg.tracker)?;
        let dir = parent_dir(out);
        create_dir(&dir)?;
        write_trajectories(&tracks, out)?;
        info!("{}: {} trajectories", s.header.video, tracks.len());
        echo_config(&dir, cfg)
    }
}

pub fn cmd_eval(cfg: &CliConfig, gt: &Path, pred: &Path, out: Option<&Path>) -> Result<MotReport> {
    let pairs = if gt.is_dir() {
        let gts = files_with_suffix(gt, GT_SUFFIX)?;
        let mut pairs = Vec::with_capacity(gts.len());
        for (video, path) in gts {
            let p = pred.join(format!("{video}{TRAJ_SUFFIX}"));
            // a sequence with no trajectory file scores as empty output
            let predicted = if p.exists() {
                load_tracks(&p)?
            } else {
                Annotations {
                    video: video.clone(),
                    tracks: Vec::new(),
                }
            };
            let mut g = parse_annotations(&path)?;
            g.video = video;
            pairs.push((g, predicted));
        }
        pairs
    } else {
        vec![(load_tracks(gt)?, load_tracks(pred)?)]
    };
    let report = evaluate(&pairs, &cfg.eval)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write_file(&dir.join("report.json"), &json)?;
        write_file(&dir.join("report.txt"), &report.to_table())?;
        echo_config(dir, cfg)?;
    }
    Ok(report)
}

/// CSV bodies: instances per frame, text length per instance, category
/// counts.
pub fn stats_csv(ann: &Annotations) -> (String, String, String) {
    let mut per_frame: BTreeMap<u32, usize> = BTreeMap::new();
    let mut lengths: BTreeMap<usize, usize> = BTreeMap::new();
    let mut categories: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in &ann.tracks {
        let c = categories
            .entry(serde_json::to_value(t.category).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
            .or_default();
        c.0 += 1;
        for (&f, g) in &t.frames {
            *per_frame.entry(f).or_default() += 1;
            *lengths.entry(g.text.chars().count()).or_default() += 1;
            c.1 += 1;
        }
    }
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    if let (Some(&first), Some(&last)) = (per_frame.keys().next(), per_frame.keys().next_back()) {
        for f in first..=last {
            *hist.entry(per_frame.get(&f).copied().unwrap_or(0)).or_default() += 1;
        }
    }
    let mut a = String::from("instances,frames\n");
    for (k, v) in hist {
        a.push_str(&format!("{k},{v}\n"));
    }
    let mut b = String::from("length,instances\n");
    for (k, v) in lengths {
        b.push_str(&format!("{k},{v}\n"));
    }
    let mut c = String::from("category,tracks,instances\n");
    for (k, (tracks, inst)) in categories {
        c.push_str(&format!("{k},{tracks},{inst}\n"));
    }
    (a, b, c)
}

pub fn cmd_stats(cfg: &CliConfig, gt: &Path, out: &Path) -> Result<()> {
    let ann = load_tracks(gt)?;
    let (per_frame, lengths, categories) = stats_csv(&ann);
    create_dir(out)?;
    write_file(&out.join("instances_per_frame.csv"), &per_frame)?;
    write_file(&out.join("text_length.csv"), &lengths)?;
    write_file(&out.join("categories.csv"), &categories)?;
    echo_config(out, cfg)
}

/// Runs one parsed command line. Output that is not a file goes to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.effective_config()?;
    match &cli.command {
        Command::Gen { out, sequences } => {
            for v in cmd_gen(&cfg, out, *sequences)? {
                println!("{v}");
            }
        }
        Command::Train { data, out } => {
            cmd_train(&cfg, data, out)?;
            println!("{}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Track { model, stream, out } => cmd_track(&cfg, model, stream, out)?,
        Command::Eval { gt, pred, out } => {
            let report = cmd_eval(&cfg, gt, pred, out.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Stats { gt, out } => cmd_stats(&cfg, gt, out)?,
    }
    Ok(())
}

/// One-line JSON error report.
pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}
