//! Command-line entry point: `kgrec <command>`.
//!
//! Every relative path is resolved against `--workdir`. Exit codes: 0 ok,
//! 1 usage or configuration, 2 data or validation, 3 numeric failure.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{
    augment_with_entities, count_filtered_mentions, extract_triplets, parse_corpus, read_triplets, split_dataset,
    write_corpus, write_triplets, Speaker, TrainingTriplet, Utterance,
};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::kg::{build_graph, coverage_of_ids, load_graph, parse_dump, parse_mentions, KnowledgeGraph};
use crate::metrics::{self, evaluate, evaluate_predictions, ModelRunner, Prediction};
use crate::model::{AblationFlags, DecodeStrategy, ModelConfig, Profile, RecommenderModel, TrainableSpec};
use crate::service::{self, ServiceState, Snapshot};
use crate::tokenizer::{word_pieces, BpeTokenizer, Tokenizer};
use crate::training::{self, read_epoch_logs, EpochLog, OutputDir, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "kgrec", version, about = "Knowledge-graph conversational recommender")]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build node and edge files from a movie property dump.
    BuildKg(BuildKgArgs),
    /// Turn a dialogue corpus into train/valid/test triplet files.
    Preprocess(PreprocessArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint (or a predictions file) on a triplet file.
    Eval(EvalArgs),
    /// Convert an epoch log into curve data (CSV, optional SVG).
    Plot(PlotArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
    /// Chat with a checkpoint in the terminal.
    Chat(ChatArgs),
    /// Write a synthetic graph and dialogue corpus.
    Synth(SynthArgs),
    /// Create a checkpoint from pretrained encoder-decoder weights.
    ImportBart(ImportArgs),
}

#[derive(Debug, Args)]
pub struct BuildKgArgs {
    /// Line-delimited movie property records.
    #[arg(long)]
    pub dump: PathBuf,
    /// Line-delimited `{id, name, year}` movies mentioned in the corpus.
    #[arg(long)]
    pub mentions: PathBuf,
    #[arg(long, default_value = "nodes.jsonl")]
    pub nodes: PathBuf,
    #[arg(long, default_value = "edges.jsonl")]
    pub edges: PathBuf,
    /// Coverage statistics (JSON).
    #[arg(long, default_value = "coverage.json")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long, default_value = "nodes.jsonl")]
    pub nodes: PathBuf,
    #[arg(long, default_value = "edges.jsonl")]
    pub edges: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Output directory for train/valid/test.jsonl and summary.json.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Skip descriptive-entity augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Train, valid and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub ratios: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.jsonl and valid.jsonl.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
    /// Run directory (epochs.jsonl, final/, best/).
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// TOML file with `[train]` and `[model]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from this checkpoint (e.g. imported pretrained weights).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `all`, `none`, `top`, or `enc:5;dec:4,5`.
    #[arg(long)]
    pub trainable: Option<String>,
    #[arg(long)]
    pub no_node_loss: bool,
    #[arg(long)]
    pub no_data_aug: bool,
    #[arg(long)]
    pub no_node_init: bool,
    #[arg(long)]
    pub no_corg: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Line-delimited `{ranked, generated}` records aligned with the data.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value = "data/test.jsonl")]
    pub data: PathBuf,
    /// Report destination (JSON); the text table goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Beam width; greedy when absent.
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, default_value = "run/epochs.jsonl")]
    pub log: PathBuf,
    #[arg(long, default_value = "curves.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Allow any origin (local UI development).
    #[arg(long)]
    pub cors: bool,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub dialogues: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// `model.safetensors`.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub merges: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    #[arg(long, default_value = "pretrained")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub no_node_init: bool,
    #[arg(long)]
    pub no_corg: bool,
}

/// Optional overrides of the model shape from the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub max_context_len: Option<usize>,
    pub max_response_len: Option<usize>,
    pub rgcn_layers: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, mut c: ModelConfig) -> ModelConfig {
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.heads = self.heads.unwrap_or(c.heads);
        c.ffn_dim = self.ffn_dim.unwrap_or(c.ffn_dim);
        c.encoder_layers = self.encoder_layers.unwrap_or(c.encoder_layers);
        c.decoder_layers = self.decoder_layers.unwrap_or(c.decoder_layers);
        c.max_context_len = self.max_context_len.unwrap_or(c.max_context_len);
        c.max_response_len = self.max_response_len.unwrap_or(c.max_response_len);
        c.rgcn_layers = self.rgcn_layers.unwrap_or(c.rgcn_layers);
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelOverrides,
}

/// Parses args and runs; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn flush(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_kg(workdir: &Path, g: &GraphArgs) -> Result<KnowledgeGraph> {
    load_graph(open(&resolve(workdir, &g.nodes))?, open(&resolve(workdir, &g.edges))?)
}

fn write_kg(kg: &KnowledgeGraph, nodes: &Path, edges: &Path) -> Result<()> {
    let mut w = create(nodes)?;
    kg.write_nodes(&mut w)?;
    flush(w, nodes)?;
    let mut w = create(edges)?;
    kg.write_edges(&mut w)?;
    flush(w, edges)
}

pub fn run(cli: Cli) -> Result<()> {
    let wd = cli.workdir.as_path();
    match cli.command {
        Command::BuildKg(a) => cmd_build_kg(wd, &a),
        Command::Preprocess(a) => cmd_preprocess(wd, &a),
        Command::Train(a) => cmd_train(wd, &a),
        Command::Eval(a) => cmd_eval(wd, &a),
        Command::Plot(a) => cmd_plot(wd, &a),
        Command::Serve(a) => cmd_serve(wd, &a),
        Command::Chat(a) => cmd_chat(wd, &a),
        Command::Synth(a) => cmd_synth(wd, &a),
        Command::ImportBart(a) => cmd_import(wd, &a),
    }
}

fn cmd_build_kg(wd: &Path, a: &BuildKgArgs) -> Result<()> {
    let dump = parse_dump(open(&resolve(wd, &a.dump))?)?;
    let mentions = parse_mentions(open(&resolve(wd, &a.mentions))?)?;
    let built = build_graph(&dump, &mentions)?;
    for w in &built.warnings {
        log::warn!("{w}");
    }
    for m in &built.unmatched {
        log::warn!("no dump record for mentioned movie {} ({:?})", m.name, m.year);
    }
    write_kg(&built.graph, &resolve(wd, &a.nodes), &resolve(wd, &a.edges))?;
    let stats = coverage_of_ids(&built.graph, mentions.iter().map(|m| m.id.as_str()));
    write_json(&resolve(wd, &a.report), &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub conversations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub augmented: usize,
    pub recommendation_triplets: usize,
    pub filtered_items: usize,
    pub unresolved_mentions: usize,
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad ratio {p:?}")))
        })
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Error::Config("--ratios needs three comma-separated values".into())),
    }
}

fn cmd_preprocess(wd: &Path, a: &PreprocessArgs) -> Result<()> {
    let ratios = parse_ratios(&a.ratios)?;
    let kg = load_kg(wd, &a.graph)?;
    let known: HashSet<String> = kg.item_index().iter().cloned().collect();
    let parsed = parse_corpus(open(&resolve(wd, &a.corpus))?, Some(&known))?;
    for u in &parsed.unresolved {
        log::warn!(
            "line {}: item {} of conversation {} is not a movie of the graph",
            u.line,
            u.item_id,
            u.conversation_id
        );
    }
    let mut triplets: Vec<TrainingTriplet> = parsed.conversations.iter().flat_map(extract_triplets).collect();
    let filtered_items = parsed.conversations.iter().map(count_filtered_mentions).sum();
    let recommendation_triplets = triplets.iter().filter(|t| t.has_recommendation()).count();
    let augmented = if a.no_augment {
        Vec::new()
    } else {
        augment_with_entities(&kg)
    };
    let augmented_count = augmented.len();
    triplets.extend(augmented);
    let splits = split_dataset(triplets, ratios, a.seed)?;
    let out = resolve(wd, &a.out);
    for (name, set) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let path = out.join(format!("{name}.jsonl"));
        let mut w = create(&path)?;
        write_triplets(&mut w, set)?;
        flush(w, &path)?;
    }
    let summary = PreprocessSummary {
        conversations: parsed.conversations.len(),
        train: splits.train.len(),
        valid: splits.valid.len(),
        test: splits.test.len(),
        augmented: augmented_count,
        recommendation_triplets,
        filtered_items,
        unresolved_mentions: parsed.unresolved.len(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn read_triplet_file(path: &Path) -> Result<Vec<TrainingTriplet>> {
    read_triplets(open(path)?)
}

/// Effective training and model configuration: flag, then file, then default.
pub fn resolve_train_config(wd: &Path, a: &TrainArgs, base_model: ModelConfig) -> Result<(TrainConfig, ModelConfig)> {
    let file: RunFile = match &a.config {
        Some(p) => {
            let path = resolve(wd, p);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunFile::default(),
    };
    let mut c = file.train;
    c.epochs = a.epochs.unwrap_or(c.epochs);
    c.learning_rate = a.lr.unwrap_or(c.learning_rate);
    c.batch_size = a.batch_size.unwrap_or(c.batch_size);
    c.alpha = a.alpha.unwrap_or(c.alpha);
    c.beta = a.beta.unwrap_or(c.beta);
    c.seed = a.seed.unwrap_or(c.seed);
    c.ablation.no_node_loss |= a.no_node_loss;
    c.ablation.no_data_aug |= a.no_data_aug;
    c.ablation.no_node_init |= a.no_node_init;
    c.ablation.no_corg |= a.no_corg;
    let model = file.model.apply(base_model);
    if let Some(spec) = &a.trainable {
        c.trainable = TrainableSpec::parse(spec, &model)?;
    }
    c.validate()?;
    model.validate()?;
    Ok((c, model))
}

/// Word vocabulary of the training texts and entity names.
pub fn desk_tokenizer(train: &[TrainingTriplet], kg: &KnowledgeGraph) -> Tokenizer {
    Tokenizer::word(
        train
            .iter()
            .flat_map(|t| t.context.iter().map(|u| u.text.as_str()).chain([t.target.as_str()]))
            .chain(kg.names()),
    )
}

fn cmd_train(wd: &Path, a: &TrainArgs) -> Result<()> {
    let data = resolve(wd, &a.data);
    let train = read_triplet_file(&data.join("train.jsonl"))?;
    let valid_path = data.join("valid.jsonl");
    let valid = if valid_path.exists() {
        read_triplet_file(&valid_path)?
    } else {
        Vec::new()
    };
    let mut model = match &a.init {
        Some(init) => {
            let model = checkpoint::load(&resolve(wd, init))?;
            let (config, _) = resolve_train_config(wd, a, model.config().clone())?;
            let flags = model.ablation();
            if flags.no_corg != config.ablation.no_corg || flags.no_node_init != config.ablation.no_node_init {
                return Err(Error::Config(
                    "--no-corg/--no-node-init must match the flags the initial checkpoint was built with".into(),
                ));
            }
            let mut model = model;
            model.apply_trainability(&config.trainable)?;
            model
        }
        None => {
            let kg = load_kg(wd, &a.graph)?;
            let (config, model_config) = resolve_train_config(wd, a, ModelConfig::desk())?;
            let tokenizer = desk_tokenizer(&train, &kg);
            training::build_model(model_config, tokenizer, kg, &config)?
        }
    };
    let (config, _) = resolve_train_config(wd, a, model.config().clone())?;
    let out = OutputDir(resolve(wd, &a.out));
    fs::create_dir_all(&out.0).map_err(|e| Error::io(&out.0, e))?;
    write_json(&out.0.join("train_config.json"), &config)?;
    let breakdown = model.count_parameters();
    log::info!(
        "parameters: total {}, trainable {} (recommendation {}, generation {})",
        breakdown.total,
        breakdown.trainable_total,
        breakdown.recommendation_module,
        breakdown.generation_module
    );
    let outcome = training::train(&mut model, &train, &valid, &config, Some(&out), |log, _| {
        println!(
            "epoch {:>3}  loss {:.4}  rec {:.4}  gen {:.4}  node {:.4}  valid R@{} {}  valid rec {}",
            log.epoch,
            log.train_loss,
            log.train_rec_loss,
            log.train_gen_loss,
            log.train_node_loss,
            log.eval_k,
            log.valid_recall_at_k.map_or("n/a".into(), |v| format!("{v:.4}")),
            log.valid_rec_loss.map_or("n/a".into(), |v| format!("{v:.4}")),
        );
    })?;
    if let Some(best) = outcome.best_epoch {
        println!("best epoch {best}");
    }
    println!("checkpoint {}", out.final_dir().display());
    Ok(())
}

fn strategy(beam: Option<usize>) -> DecodeStrategy {
    match beam {
        Some(w) if w > 1 => DecodeStrategy::Beam { width: w },
        _ => DecodeStrategy::Greedy,
    }
}

fn cmd_eval(wd: &Path, a: &EvalArgs) -> Result<()> {
    let triplets = read_triplet_file(&resolve(wd, &a.data))?;
    let report = match (&a.predictions, &a.checkpoint) {
        (Some(p), ckpt) => {
            let path = resolve(wd, p);
            let predictions: Vec<Prediction> = BufReader::new(open(&path)?)
                .lines()
                .enumerate()
                .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
                .map(|(i, l)| {
                    let l = l.map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str(&l).map_err(|e| Error::Parse {
                        line: i + 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            let tokenizer = ckpt
                .as_ref()
                .map(|c| checkpoint::load(&resolve(wd, c)))
                .transpose()?
                .map(|m| m.tokenizer().clone());
            let reference = |t: &str| match &tokenizer {
                Some(tok) => tok.pieces(&tok.encode(t)),
                None => word_pieces(t),
            };
            evaluate_predictions(&predictions, &triplets, reference, &metrics::DEFAULT_KS, &metrics::DEFAULT_NS)
        }
        (None, Some(c)) => {
            let model = checkpoint::load(&resolve(wd, c))?;
            let runner = ModelRunner::new(&model, strategy(a.beam))?;
            evaluate(&runner, &triplets, &metrics::DEFAULT_KS, &metrics::DEFAULT_NS)?
        }
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --predictions".into())),
    };
    print!("{report}");
    if let Some(out) = &a.out {
        write_json(&resolve(wd, out), &report)?;
    }
    Ok(())
}

/// CSV with one row per epoch: `epoch,valid_recall_at_<k>,valid_rec_loss`.
/// Missing values are empty cells.
pub fn curve_csv(logs: &[EpochLog]) -> String {
    let k = logs.first().map_or(5, |l| l.eval_k);
    let mut out = format!("epoch,valid_recall_at_{k},valid_rec_loss\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
    for l in logs {
        out.push_str(&format!(
            "{},{},{}\n",
            l.epoch,
            cell(l.valid_recall_at_k),
            cell(l.valid_rec_loss)
        ));
    }
    out
}

fn polyline(points: &[(f64, f64)], x0: f64, w: f64, h: f64) -> String {
    if points.is_empty() {
        return String::new();
    }
    let (xmin, xmax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let sx = if xmax > xmin { w / (xmax - xmin) } else { 0.0 };
    let sy = if ymax > ymin { h / (ymax - ymin) } else { 0.0 };
    let pts: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{:.1},{:.1}", x0 + (x - xmin) * sx, 20.0 + h - (y - ymin) * sy))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>\n<text x=\"{x0}\" y=\"14\" font-size=\"11\">min {ymin:.4} max {ymax:.4}</text>\n",
        pts.join(" ")
    )
}

/// Two side-by-side panels: validation recall and validation rec loss.
pub fn curve_svg(logs: &[EpochLog]) -> String {
    let recall: Vec<(f64, f64)> = logs
        .iter()
        .filter_map(|l| l.valid_recall_at_k.map(|v| (l.epoch as f64, v)))
        .collect();
    let loss: Vec<(f64, f64)> = logs
        .iter()
        .filter_map(|l| l.valid_rec_loss.map(|v| (l.epoch as f64, v)))
        .collect();
    let k = logs.first().map_or(5, |l| l.eval_k);
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"260\">\n\
         <text x=\"20\" y=\"250\" font-size=\"12\">valid R@{k} by epoch</text>\n\
         <text x=\"380\" y=\"250\" font-size=\"12\">valid rec loss by epoch</text>\n{}{}</svg>\n",
        polyline(&recall, 20.0, 320.0, 200.0),
        polyline(&loss, 380.0, 320.0, 200.0)
    )
}

fn cmd_plot(wd: &Path, a: &PlotArgs) -> Result<()> {
    let logs = read_epoch_logs(&resolve(wd, &a.log))?;
    let out = resolve(wd, &a.out);
    let mut w = create(&out)?;
    w.write_all(curve_csv(&logs).as_bytes()).map_err(|e| Error::io(&out, e))?;
    flush(w, &out)?;
    if let Some(svg) = &a.svg {
        let path = resolve(wd, svg);
        fs::write(&path, curve_svg(&logs)).map_err(|e| Error::io(&path, e))?;
    }
    println!("{} points written to {}", logs.len(), out.display());
    Ok(())
}

fn load_snapshot(path: &Path) -> Result<Snapshot> {
    let model = checkpoint::load(path)?;
    Snapshot::new(model, checkpoint::checkpoint_hash(path)?)
}

fn cmd_serve(wd: &Path, a: &ServeArgs) -> Result<()> {
    let snapshot = a
        .checkpoint
        .as_ref()
        .map(|c| load_snapshot(&resolve(wd, c)))
        .transpose()?;
    let state = Arc::new(ServiceState::new(snapshot));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<tokio runtime>", e))?;
    rt.block_on(service::serve(a.addr, state, a.cors))
}

fn cmd_chat(wd: &Path, a: &ChatArgs) -> Result<()> {
    let model: RecommenderModel = checkpoint::load(&resolve(wd, &a.checkpoint))?;
    let entities = model.entity_representations()?;
    let mut history: Vec<Utterance> = Vec::new();
    let stdin = io::stdin();
    println!("type a message; /reset clears the dialogue, /quit exits");
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                history.clear();
                println!("(dialogue cleared)");
                continue;
            }
            _ => {}
        }
        history.push(Utterance::new(Speaker::Seeker, text));
        let r = model.respond(
            &history,
            &entities,
            a.top_k,
            model.config().max_response_len,
            strategy(a.beam),
        )?;
        println!("recommender: {}", r.filled);
        for (i, (id, p)) in r.recommendations.top_k.iter().enumerate() {
            let name = model.kg().node(id).map_or(id.clone(), |n| n.display_name());
            println!("  {:>2}. {name}  ({p:.3})", i + 1);
        }
        history.push(Utterance::new(Speaker::Recommender, r.filled));
    }
    Ok(())
}

fn cmd_synth(wd: &Path, a: &SynthArgs) -> Result<()> {
    let out = resolve(wd, &a.out);
    let kg = fixtures::synthetic_kg();
    let conversations = fixtures::synthetic_dialogues(&kg, a.dialogues, a.seed);
    write_kg(&kg, &out.join("nodes.jsonl"), &out.join("edges.jsonl"))?;
    let path = out.join("corpus.jsonl");
    let mut w = create(&path)?;
    write_corpus(&mut w, &conversations)?;
    flush(w, &path)?;
    let (dump, mentions) = fixtures::builder_dump();
    let path = out.join("dump.jsonl");
    let mut w = create(&path)?;
    for r in &dump {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    flush(w, &path)?;
    let path = out.join("mentions.jsonl");
    let mut w = create(&path)?;
    for m in &mentions {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    flush(w, &path)?;
    println!(
        "wrote {} conversations over {} entities to {}",
        conversations.len(),
        kg.num_entities(),
        out.display()
    );
    Ok(())
}

fn cmd_import(wd: &Path, a: &ImportArgs) -> Result<()> {
    let read = |p: &Path| {
        let path = resolve(wd, p);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    };
    let tokenizer = Tokenizer::Bpe(BpeTokenizer::from_files(&read(&a.vocab)?, &read(&a.merges)?)?);
    let weights_path = resolve(wd, &a.weights);
    let weights = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let kg = load_kg(wd, &a.graph)?;
    let ablation = AblationFlags {
        no_node_init: a.no_node_init,
        no_corg: a.no_corg,
        ..Default::default()
    };
    let mut model = crate::bart_import::import_bart(&weights, tokenizer, kg, a.heads, ablation, a.seed)?;
    model.apply_trainability(&TrainableSpec::top_layers(model.config()))?;
    debug_assert_eq!(model.config().profile, Profile::Pretrained);
    let hash = checkpoint::save(&model, &resolve(wd, &a.out))?;
    let b = model.count_parameters();
    println!(
        "checkpoint {} ({hash}); trainable {} of {}",
        resolve(wd, &a.out).display(),
        b.trainable_total,
        b.total
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(run_from(["kgrec", "frobnicate"]), 1);
        assert_eq!(run_from(["kgrec", "plot", "--bogus"]), 1);
        assert_eq!(run_from(["kgrec", "--help"]), 0);
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("c.toml"),
            "[train]\nepochs = 7\nbatch_size = 3\n[model]\nd_model = 32\n",
        )
        .unwrap();
        let cli = Cli::try_parse_from(["kgrec", "train", "--config", "c.toml", "--epochs", "2"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let (c, m) = resolve_train_config(dir.path(), &a, ModelConfig::desk()).unwrap();
        assert_eq!(c.epochs, 2);
        assert_eq!(c.batch_size, 3);
        assert_eq!(c.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(m.d_model, 32);
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let logs: Vec<EpochLog> = (1..=3)
            .map(|e| EpochLog {
                epoch: e,
                train_rec_loss: 1.0,
                train_gen_loss: 1.0,
                train_node_loss: 1.0,
                train_loss: 3.0,
                valid_recall_at_k: Some(0.1 * e as f64),
                valid_rec_loss: None,
                eval_k: 5,
                wall_clock_secs: 0.0,
            })
            .collect();
        let csv = curve_csv(&logs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,valid_recall_at_5,valid_rec_loss");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "2,0.2,");
        assert!(curve_svg(&logs).contains("<polyline"));
    }
}
