//! Joint optimisation of the graph encoder and the encoder–decoder.
//!
//! One step runs the graph encoder once on its own tape, then one tape per
//! example that takes the entity matrix `H` as an input leaf. Gradients
//! w.r.t. `H` are summed over the batch and pushed back through the graph
//! tape together with the node-type loss.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Matrix, Tape};
use crate::checkpoint;
use crate::corpus::TrainingTriplet;
use crate::error::{Error, Result};
use crate::graph_encoder;
use crate::kg::KnowledgeGraph;
use crate::model::{recommend_train, AblationFlags, ModelConfig, RecommenderModel, TrainableSpec};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Random entities added to each step's node-type loss sample.
    pub node_sample: usize,
    /// `k` of the per-epoch validation recall.
    pub eval_k: usize,
    pub lr_schedule: LrSchedule,
    pub trainable: TrainableSpec,
    pub ablation: AblationFlags,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly to zero over all steps of the run.
    Linear,
}

impl LrSchedule {
    /// Learning rate for 0-based `step` out of `total`.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            learning_rate: 3e-5,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 22,
            seed: 42,
            grad_clip: 1.0,
            node_sample: 256,
            eval_k: 5,
            lr_schedule: LrSchedule::Constant,
            trainable: TrainableSpec::All,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.eval_k == 0 {
            return Err(Error::Config(
                "learning_rate, batch_size and eval_k must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `beta`, or 0 under `no_node_loss`.
    pub fn effective_beta(&self) -> f64 {
        if self.ablation.no_node_loss {
            0.0
        } else {
            self.beta
        }
    }
}

/// `L = L_rec + alpha L_gen + beta L_node`, with beta forced to 0 by the
/// `no_node_loss` ablation.
pub fn joint_loss(rec: f64, gen: f64, node: f64, config: &TrainConfig) -> f64 {
    rec + config.alpha * gen + config.effective_beta() * node
}

/// Mean cross-entropy of `p_rec` against each gold row.
pub fn rec_loss(p_rec: &[f64], gold_rows: &[usize]) -> Result<f64> {
    if gold_rows.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &g in gold_rows {
        let p = p_rec
            .get(g)
            .ok_or_else(|| Error::Data(format!("gold row {g} outside the entity set")))?;
        total -= p.ln();
    }
    Ok(total / gold_rows.len() as f64)
}

/// Mean per-token negative log-likelihood; zero for augmented examples.
pub fn gen_loss(logits: &Matrix, targets: &[usize], is_augmented: bool) -> f64 {
    if is_augmented || targets.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / targets.len() as f64
}

/// A triplet resolved against the model's vocabulary and entity rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub context_ids: Vec<usize>,
    pub gold_rows: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub labels: Vec<usize>,
    pub is_augmented: bool,
}

pub fn prepare_example(model: &RecommenderModel, triplet: &TrainingTriplet) -> Result<Example> {
    let gold_rows = triplet
        .gold_items
        .iter()
        .map(|id| {
            model
                .kg()
                .position(id)
                .ok_or_else(|| Error::Data(format!("gold item {id} is not in the knowledge graph")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (decoder_input, labels) = model.target_ids(&triplet.target);
    Ok(Example {
        context_ids: model.context_ids(&triplet.context)?,
        gold_rows,
        decoder_input,
        labels,
        is_augmented: triplet.is_augmented,
    })
}

pub fn prepare_examples(model: &RecommenderModel, triplets: &[TrainingTriplet]) -> Result<Vec<Example>> {
    triplets.iter().map(|t| prepare_example(model, t)).collect()
}

/// Drops augmented triplets under `no_data_aug`.
pub fn training_set(triplets: &[TrainingTriplet], ablation: AblationFlags) -> Vec<TrainingTriplet> {
    triplets
        .iter()
        .filter(|t| !(ablation.no_data_aug && t.is_augmented))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub gen: f64,
    pub node: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

/// Batch objective and, when `with_grad`, its gradient.
///
/// `L_rec` averages over every (example, gold item) pair of the batch,
/// `L_gen` over every target token of non-augmented examples, `L_node` over
/// `node_rows`.
pub fn batch_objective(
    model: &RecommenderModel,
    batch: &[&Example],
    node_rows: &[usize],
    weights: LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let store = model.params();
    let mut graph_tape = Tape::new(store);
    let h = model.graph_on_tape(&mut graph_tape);
    let node_loss = graph_encoder::node_type_loss(
        &mut graph_tape,
        h,
        &model.handles().classifier,
        node_rows,
        model.node_types(),
    );
    let h_value = graph_tape.value(h);
    graph_encoder::check_finite(h_value, "representation")?;

    let pairs: usize = batch.iter().map(|e| e.gold_rows.len()).sum();
    let tokens: usize = batch
        .iter()
        .filter(|e| !e.is_augmented)
        .map(|e| e.labels.len())
        .sum();
    let rec_scale = if pairs > 0 { 1.0 / pairs as f64 } else { 0.0 };
    let gen_scale = if tokens > 0 { 1.0 / tokens as f64 } else { 0.0 };

    let mut rec_sum = 0.0;
    let mut gen_sum = 0.0;
    let mut grads = with_grad.then(|| Gradients::zeros_like(store));
    let mut d_h = with_grad.then(|| Matrix::zeros(h_value.dim()));

    for ex in batch {
        let mut tape = Tape::new(store);
        let h_in = tape.input_borrowed(h_value, with_grad);
        let memory = model.encode_on_tape(&mut tape, &ex.context_ids);
        let mut parts = Vec::new();
        if !ex.gold_rows.is_empty() {
            let last = ex.context_ids.len() - 1;
            let c = tape.gather(memory, &[last]);
            let scores = tape.matmul_t(c, h_in);
            let targets: Vec<(usize, usize)> = ex.gold_rows.iter().map(|&g| (0, g)).collect();
            let ce = tape.cross_entropy_sum(scores, &targets);
            rec_sum += tape.scalar(ce);
            parts.push(tape.scale(ce, rec_scale));
        }
        if !ex.is_augmented {
            let logits = model.decode_on_tape(&mut tape, &ex.decoder_input, memory);
            let targets: Vec<(usize, usize)> = ex.labels.iter().copied().enumerate().collect();
            let nll = tape.cross_entropy_sum(logits, &targets);
            gen_sum += tape.scalar(nll);
            parts.push(tape.scale(nll, weights.alpha * gen_scale));
        }
        if let (Some(grads), Some(d_h)) = (grads.as_mut(), d_h.as_mut()) {
            let Some((&first, rest)) = parts.split_first() else { continue };
            let mut total = first;
            for &p in rest {
                total = tape.add(total, p);
            }
            let g = tape.backward_scalar(total);
            grads.accumulate(&g);
            if let Some(gh) = g.var(h_in) {
                *d_h += gh;
            }
        }
    }

    let rec = rec_sum * rec_scale;
    let gen = gen_sum * gen_scale;
    let node = graph_tape.scalar(node_loss);
    let total = rec + weights.alpha * gen + weights.beta * node;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (rec {rec}, gen {gen}, node {node})"
        )));
    }
    let breakdown = LossBreakdown {
        rec,
        gen,
        node,
        total,
    };
    let grads = match (grads, d_h) {
        (Some(mut grads), Some(d_h)) => {
            let mut seeds = vec![(h, d_h)];
            if weights.beta != 0.0 && !node_rows.is_empty() {
                seeds.push((node_loss, Matrix::from_elem((1, 1), weights.beta)));
            }
            grads.accumulate(&graph_tape.backward(&seeds));
            Some(grads)
        }
        _ => None,
    };
    Ok((breakdown, grads))
}

/// Gold rows of the batch plus a seeded random sample of entities, sorted
/// and de-duplicated.
pub fn node_sample<R: rand::Rng>(batch: &[&Example], num_entities: usize, extra: usize, rng: &mut R) -> Vec<usize> {
    let mut rows: Vec<usize> = batch.iter().flat_map(|e| e.gold_rows.iter().copied()).collect();
    let extra = extra.min(num_entities);
    rows.extend(rand::seq::index::sample(rng, num_entities, extra).into_iter());
    rows.sort_unstable();
    rows.dedup();
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_rec_loss: f64,
    pub train_gen_loss: f64,
    pub train_node_loss: f64,
    pub train_loss: f64,
    pub valid_recall_at_k: Option<f64>,
    pub valid_rec_loss: Option<f64>,
    pub eval_k: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub recall_at_k: Option<f64>,
    pub rec_loss: Option<f64>,
}

/// Recall@k over items and mean training-style `L_rec` on examples with gold.
pub fn validate(model: &RecommenderModel, examples: &[Example], k: usize) -> Result<ValidationResult> {
    let with_gold: Vec<&Example> = examples.iter().filter(|e| !e.gold_rows.is_empty()).collect();
    if with_gold.is_empty() {
        return Ok(ValidationResult {
            recall_at_k: None,
            rec_loss: None,
        });
    }
    let entities = model.entity_representations()?;
    let item_rows = model.item_rows();
    let mut hits = 0usize;
    let mut total_items = 0usize;
    let mut loss = 0.0;
    let mut pairs = 0usize;
    for ex in with_gold {
        let rep = model.encode_ids(ex.context_ids.clone())?;
        let p = recommend_train(rep.c.view(), &entities.h)?;
        loss += rec_loss(&p, &ex.gold_rows)? * ex.gold_rows.len() as f64;
        pairs += ex.gold_rows.len();
        let result = model.recommend_with(&rep, &entities, k)?;
        for &g in &ex.gold_rows {
            if let Some(pos) = item_rows.iter().position(|&r| r == g) {
                total_items += 1;
                let id = &model.item_ids()[pos];
                if result.top_k.iter().any(|(t, _)| t == id) {
                    hits += 1;
                }
            }
        }
    }
    Ok(ValidationResult {
        recall_at_k: (total_items > 0).then(|| hits as f64 / total_items as f64),
        rec_loss: Some(loss / pairs as f64),
    })
}

/// Fresh model with the ablation flags and trainability of `config` applied.
pub fn build_model(
    model_config: ModelConfig,
    tokenizer: Tokenizer,
    kg: KnowledgeGraph,
    config: &TrainConfig,
) -> Result<RecommenderModel> {
    config.validate()?;
    let mut model = RecommenderModel::new(model_config, tokenizer, kg, config.ablation, config.seed)?;
    model.apply_trainability(&config.trainable)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_epoch: Option<usize>,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    pub fn final_dir(&self) -> PathBuf {
        self.0.join("final")
    }

    pub fn best_dir(&self) -> PathBuf {
        self.0.join("best")
    }

    pub fn log_path(&self) -> PathBuf {
        self.0.join("epochs.jsonl")
    }
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(log)?).map_err(|e| Error::io(path, e))
}

/// Runs `config.epochs` passes over `train`, validating on `valid` after
/// each. With `out`, writes `epochs.jsonl`, `final/` and `best/`; on a
/// non-finite loss the current (last good) parameters go to `final/` and the
/// error is returned. `on_epoch` sees each log as it is produced.
pub fn train(
    model: &mut RecommenderModel,
    train: &[TrainingTriplet],
    valid: &[TrainingTriplet],
    config: &TrainConfig,
    out: Option<&OutputDir>,
    mut on_epoch: impl FnMut(&EpochLog, &RecommenderModel),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = training_set(train, config.ablation);
    let train_examples = prepare_examples(model, &train_set)?;
    let valid_examples = prepare_examples(model, valid)?;
    if let Some(out) = out {
        fs::create_dir_all(&out.0).map_err(|e| Error::io(&out.0, e))?;
        let log_path = out.log_path();
        if log_path.exists() {
            fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
        }
    }
    let weights = LossWeights {
        alpha: config.alpha,
        beta: config.effective_beta(),
    };
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        model.params().len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_examples.len()).collect();
    let mut logs = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let num_entities = model.kg().num_entities();
    let total_steps = config.epochs * train_examples.len().div_ceil(config.batch_size);
    let mut step_index = 0usize;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        // Rec and gen are weighted by their pair and token counts so the epoch
        // figure is the mean over the whole training set, whatever the batching.
        let mut sums = LossBreakdown::default();
        let mut pairs = 0usize;
        let mut tokens = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_examples[i]).collect();
            let rows = if weights.beta > 0.0 {
                node_sample(&batch, num_entities, config.node_sample, &mut rng)
            } else {
                Vec::new()
            };
            let step = batch_objective(model, &batch, &rows, weights, true).and_then(|(loss, grads)| {
                let mut grads = grads.expect("gradients requested");
                let norm = clip_global_norm(&mut grads, config.grad_clip);
                if norm.is_finite() {
                    Ok((loss, grads))
                } else {
                    Err(Error::Numeric("non-finite gradient norm".into()))
                }
            });
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    if let Some(out) = out {
                        checkpoint::save(model, &out.final_dir())?;
                    }
                    return Err(Error::Numeric(format!(
                        "training diverged in epoch {epoch}: {msg}; parameters before the failing step were kept"
                    )));
                }
                Err(e) => return Err(e),
            };
            opt.config.lr = config.lr_schedule.rate(config.learning_rate, step_index, total_steps);
            step_index += 1;
            opt.step(model.params_mut(), &grads);
            let batch_pairs: usize = batch.iter().map(|e| e.gold_rows.len()).sum();
            let batch_tokens: usize = batch
                .iter()
                .filter(|e| !e.is_augmented)
                .map(|e| e.labels.len())
                .sum();
            sums.rec += loss.rec * batch_pairs as f64;
            sums.gen += loss.gen * batch_tokens as f64;
            sums.node += loss.node;
            pairs += batch_pairs;
            tokens += batch_tokens;
            batches += 1;
        }
        let rec = sums.rec / pairs.max(1) as f64;
        let gen = sums.gen / tokens.max(1) as f64;
        let node = sums.node / batches.max(1) as f64;
        let v = validate(model, &valid_examples, config.eval_k)?;
        let log = EpochLog {
            epoch,
            train_rec_loss: rec,
            train_gen_loss: gen,
            train_node_loss: node,
            train_loss: rec + weights.alpha * gen + weights.beta * node,
            valid_recall_at_k: v.recall_at_k,
            valid_rec_loss: v.rec_loss,
            eval_k: config.eval_k,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (rec {:.4}, gen {:.4}, node {:.4}), valid R@{} {:?}",
            log.train_loss,
            log.train_rec_loss,
            log.train_gen_loss,
            log.train_node_loss,
            config.eval_k,
            log.valid_recall_at_k
        );
        if let Some(out) = out {
            append_log(&out.log_path(), &log)?;
            if let Some(r) = log.valid_recall_at_k {
                if best.map_or(true, |(b, _)| r > b) {
                    best = Some((r, epoch));
                    checkpoint::save(model, &out.best_dir())?;
                }
            }
        } else if let Some(r) = log.valid_recall_at_k {
            if best.map_or(true, |(b, _)| r > b) {
                best = Some((r, epoch));
            }
        }
        on_epoch(&log, model);
        logs.push(log);
    }

    let (final_checkpoint, best_checkpoint) = match out {
        Some(out) => {
            checkpoint::save(model, &out.final_dir())?;
            if best.is_none() {
                checkpoint::save(model, &out.best_dir())?;
            }
            (Some(out.final_dir()), Some(out.best_dir()))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        logs,
        final_checkpoint,
        best_checkpoint,
        best_epoch: best.map(|(_, e)| e),
    })
}

pub fn read_epoch_logs(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
