//! Adam optimization, the epoch loop, evaluation, and checkpoints.
//!
//! Training is deterministic under a fixed seed: shuffling and every
//! per-example dropout mask derive from (seed, epoch, example index), so
//! parallel gradient computation cannot reorder randomness. The optimizer
//! step itself is exclusive and sequential.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{ModelParams, Prediction};
use crate::config::ModelConfig;
use crate::data::{IndexedPair, Label};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

// ── Adam ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.0004, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, aligned index-for-index with
/// [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(params: &ModelParams<T>) -> Self {
        let zero = |t: &Tensor<T>| vec![T::zero(); t.numel()];
        AdamState {
            t: 0,
            m: params.tensors.iter().map(|(_, t)| zero(t)).collect(),
            v: params.tensors.iter().map(|(_, t)| zero(t)).collect(),
        }
    }
}

/// One bias-corrected Adam update over every tensor. Gradients must align
/// with the parameter list; frozen embedding rows are skipped outright so
/// neither the weights nor their moments ever move.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(Error::Contract(format!(
            "{} gradient buffers for {} tensors",
            grads.len(),
            params.tensors.len()
        )));
    }
    for ((name, tensor), grad) in params.tensors.iter().zip(grads) {
        if grad.len() != tensor.numel() {
            return Err(Error::Contract(format!(
                "gradient for {name} has {} entries, tensor has {}",
                grad.len(),
                tensor.numel()
            )));
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                tensor: name.clone(),
                detail: format!("non-finite gradient value {bad}"),
            });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let (alpha, eps) = (T::from_f64(cfg.learning_rate), T::from_f64(cfg.epsilon));

    let frozen_rows = params.frozen_rows.clone();
    for (i, (name, tensor)) in params.tensors.iter_mut().enumerate() {
        let cols = if name.as_str() == "embed.table" { tensor.shape()[1] } else { 0 };
        let data = tensor.data_mut();
        for (j, g) in grads[i].iter().enumerate() {
            if cols > 0 && frozen_rows.contains(&(j / cols)) {
                continue;
            }
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = b1 * *m + one_b1 * *g;
            *v = b2 * *v + one_b2 * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            data[j] -= alpha * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g.into_f64() * g.into_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

// ── Evaluation ───────────────────────────────────────────────────────────

/// Fraction of exact label matches; slices must pair up one to one.
pub fn accuracy(predicted: &[Label], gold: &[Label]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions against {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    /// One prediction per input pair, in input order.
    pub predictions: Vec<Prediction>,
}

/// Dropout-free predictions for every pair, in input order.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, pairs: &[IndexedPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let predictions: Vec<Prediction> = pairs
        .par_iter()
        .map(|p| params.predict(&p.premise, &p.hypothesis))
        .collect::<Result<_>>()?;
    let predicted: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    let gold: Vec<Label> = pairs.iter().map(|p| p.label).collect();
    Ok(EvalReport { accuracy: accuracy(&predicted, &gold)?, predictions })
}

// ── Training loop ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Consecutive epochs without a dev improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    /// Optional global-norm gradient clipping threshold.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 64,
            batch_size: 32,
            patience: 5,
            adam: AdamConfig::default(),
            clip_norm: None,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_acc: f64,
    pub dev_acc: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport<T: Scalar> {
    pub history: Vec<EpochStats>,
    /// Parameters from the epoch with the highest dev accuracy.
    pub params: ModelParams<T>,
    /// Optimizer state from that same epoch, for resuming.
    pub adam: AdamState<T>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub stopped_early: bool,
}

/// splitmix64 finalizer; spreads structured counters into seed material.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent seed for one (epoch, example) slot of a run.
pub fn derive_seed(master: u64, epoch: u64, index: u64) -> u64 {
    mix(master ^ mix(epoch.wrapping_mul(0x9E3779B97F4A7C15) ^ index))
}

/// Runs the epoch loop and returns the best-dev model. See [`train_with`]
/// for a progress callback.
pub fn train<T: Scalar>(
    params: ModelParams<T>,
    train_set: &[IndexedPair],
    dev_set: &[IndexedPair],
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    train_with(params, train_set, dev_set, cfg, |_| {})
}

/// Like [`train`], invoking `on_epoch` after each epoch's evaluation.
pub fn train_with<T: Scalar>(
    mut params: ModelParams<T>,
    train_set: &[IndexedPair],
    dev_set: &[IndexedPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Config("training and dev sets must be non-empty".into()));
    }

    let mut state = AdamState::zeros(&params);
    let mut history = Vec::new();
    let mut best: Option<(ModelParams<T>, AdamState<T>, usize, f64)> = None;
    let mut since_improvement = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(T, Vec<Vec<T>>)> = batch
                .par_iter()
                .map(|&idx| {
                    let pair = &train_set[idx];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        epoch as u64,
                        idx as u64,
                    ));
                    params.example_gradients(
                        &pair.premise,
                        &pair.hypothesis,
                        pair.label,
                        true,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?;

            let scale = T::from_f64(1.0 / batch.len() as f64);
            let mut mean: Vec<Vec<T>> = params
                .tensors
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect();
            for (loss, grads) in &results {
                loss_sum += loss.into_f64();
                for (acc, g) in mean.iter_mut().zip(grads) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += *x * scale;
                    }
                }
            }
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut mean, max_norm);
            }
            adam_step(&mut params, &mean, &mut state, &cfg.adam)?;
        }

        let train_eval = evaluate(&params, train_set)?;
        let dev_eval = evaluate(&params, dev_set)?;
        let stats = EpochStats {
            epoch,
            train_acc: train_eval.accuracy,
            dev_acc: dev_eval.accuracy,
            mean_loss: loss_sum / train_set.len() as f64,
        };
        on_epoch(&stats);
        history.push(stats);

        let improved = best
            .as_ref()
            .map(|&(_, _, _, acc)| dev_eval.accuracy > acc)
            .unwrap_or(true);
        if improved {
            best = Some((params.clone(), state.clone(), epoch, dev_eval.accuracy));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (params, adam, best_epoch, best_dev_accuracy) =
        best.expect("at least one epoch ran");
    Ok(TrainReport { history, params, adam, best_epoch, best_dev_accuracy, stopped_early })
}

// ── History CSV ──────────────────────────────────────────────────────────

pub fn write_history(path: impl AsRef<Path>, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record(["epoch", "train_acc", "dev_acc", "mean_loss"]).map_err(csv_err)?;
    for s in history {
        w.write_record([
            s.epoch.to_string(),
            s.train_acc.to_string(),
            s.dev_acc.to_string(),
            s.mean_loss.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochStats>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2; // header is line 1
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                detail: format!("expected 4 history fields, found {}", rec.len()),
            });
        }
        let field = |idx: usize| -> Result<f64> {
            rec[idx].parse().map_err(|_| Error::Parse {
                line,
                detail: format!("bad number {:?}", &rec[idx]),
            })
        };
        out.push(EpochStats {
            epoch: field(0)? as usize,
            train_acc: field(1)?,
            dev_acc: field(2)?,
            mean_loss: field(3)?,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("history csv: {e}"))
}

// ── Checkpoints ──────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"DRBL";
const VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run. Frozen embedding rows
/// are not stored; re-arm them from the vocabulary after loading.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: Option<(u64, Vec<Vec<f32>>, Vec<Vec<f32>>)>,
    pub best_dev_accuracy: f64,
    pub seed: u64,
}

fn push_tensor_table(buf: &mut Vec<u8>, entries: &[(String, Vec<usize>, &[f32])]) {
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, values) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape.iter() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let config_text = ckpt.params.config.to_kv_text();
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());

    let shapes: Vec<(String, Vec<usize>, &[f32])> = ckpt
        .params
        .tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data()))
        .collect();
    push_tensor_table(&mut buf, &shapes);

    match &ckpt.adam {
        Some((t, m, v)) => {
            for moments in [m, v] {
                if moments.len() != ckpt.params.tensors.len()
                    || moments
                        .iter()
                        .zip(&ckpt.params.tensors)
                        .any(|(mom, (_, t))| mom.len() != t.numel())
                {
                    return Err(Error::Contract(
                        "optimizer moments do not mirror the parameter tensors".into(),
                    ));
                }
            }
            buf.push(1);
            buf.extend_from_slice(&t.to_le_bytes());
            for moments in [m, v] {
                let entries: Vec<(String, Vec<usize>, &[f32])> = ckpt
                    .params
                    .tensors
                    .iter()
                    .zip(moments.iter())
                    .map(|((n, t), mom)| (n.clone(), t.shape().to_vec(), mom.as_slice()))
                    .collect();
                push_tensor_table(&mut buf, &entries);
            }
        }
        None => buf.push(0),
    }
    buf.extend_from_slice(&ckpt.best_dev_accuracy.to_le_bytes());
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    fs::write(path.as_ref(), buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor_table(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()? as usize;
        if count > 4096 {
            return Err(Error::Format(format!("implausible tensor count {count}")));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            if name_len > 4096 {
                return Err(Error::Format(format!("implausible tensor name length {name_len}")));
            }
            let name = std::str::from_utf8(self.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("implausible tensor rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let e = self.u64()? as usize;
                numel = numel
                    .checked_mul(e)
                    .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
                shape.push(e);
            }
            let byte_len = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
            let raw = self.take(byte_len)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(values, &shape)
                .map_err(|e| Error::Format(format!("bad tensor {name}: {e}")))?
                .trainable();
            out.push((name, tensor));
        }
        Ok(out)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path.as_ref())?;
    let mut r = Reader { buf: &bytes, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes, not a checkpoint".into()));
    }
    let found = r.u32()?;
    if found != VERSION {
        return Err(Error::Version { found, expected: VERSION });
    }

    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Format("config block is not valid UTF-8".into()))?;
    let config = ModelConfig::from_kv_text(config_text)
        .map_err(|e| Error::Format(format!("bad config block: {e}")))?;

    let tensors = r.tensor_table()?;
    let params = ModelParams { config, tensors, frozen_rows: vec![] };

    let adam = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut tables = Vec::with_capacity(2);
            for which in ["first", "second"] {
                let table = r.tensor_table()?;
                if table.len() != params.tensors.len() {
                    return Err(Error::Format(format!(
                        "{which} moment table has {} tensors, parameters have {}",
                        table.len(),
                        params.tensors.len()
                    )));
                }
                for ((mn, mt), (pn, pt)) in table.iter().zip(&params.tensors) {
                    if mn != pn || mt.shape() != pt.shape() {
                        return Err(Error::Format(format!(
                            "{which} moment entry {mn} does not mirror parameter {pn}"
                        )));
                    }
                }
                tables.push(table.into_iter().map(|(_, t)| t.data().to_vec()).collect());
            }
            let v = tables.pop().expect("two tables");
            let m = tables.pop().expect("two tables");
            Some((t, m, v))
        }
        other => {
            return Err(Error::Format(format!("bad optimizer-state flag {other}")));
        }
    };

    let best_dev_accuracy = r.f64()?;
    let seed = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { params, adam, best_dev_accuracy, seed })
}
