//! The complete model: parameters, forward pass, and loss.
//!
//! This module owns the named parameter set and wires the pipeline
//! together: embed, encode with dependent reading, align and enrich,
//! re-read in the inference stage, pool, and classify through the output
//! MLP. Everything below works on a fresh tape per example; sentences are
//! processed at their true length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    align, enrich_project, init_projection, Alignment, EnrichOptions, Projection,
};
use crate::config::ModelConfig;
use crate::data::Label;
use crate::encoder::{encode_pair, init_direction, BiLstm, LstmDirection};
use crate::error::{Error, Result};
use crate::inference::{dependent_inference, pool_fixed};
use crate::tensor::{ParamAccess, Scalar, Tape, Tensor, Var};

// ── Parameters ───────────────────────────────────────────────────────────

/// Every trainable tensor of one model, by name, in a fixed order.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<T>)>,
    /// Embedding-table rows excluded from updates (the unknown vector).
    pub frozen_rows: Vec<usize>,
}

fn uniform_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let k = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -k, k, rng).trainable()
}

impl ModelParams<f32> {
    /// Fresh random initialization for a given vocabulary size. The
    /// embedding table starts from small noise; swap in a pretrained
    /// table with [`ModelParams::with_embeddings`].
    pub fn init<R: Rng>(config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("vocabulary must not be empty".into()));
        }
        let (r, d) = (config.embedding_dim, config.hidden_dim);
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();

        let embed = Tensor::rand_normal(&[vocab_size, r], 0.0, 0.01, rng).trainable();
        tensors.push(("embed.table".into(), embed));

        for (prefix, input) in [("encoder", r), ("infer", d)] {
            for side in ["fwd", "bwd"] {
                let init = init_direction(input, d, rng)?;
                tensors.push((format!("{prefix}.{side}.w_input"), init.w_input));
                tensors.push((format!("{prefix}.{side}.w_hidden"), init.w_hidden));
                tensors.push((format!("{prefix}.{side}.bias"), init.bias));
            }
        }
        // Keep the projection between the two recurrent stages, matching
        // the dataflow order even though the loop above grouped the LSTMs.
        let proj = init_projection(config.enrich_dim(), d, rng);
        let at = tensors.len() - 6;
        tensors.insert(at, ("project.w".into(), proj.w));
        tensors.insert(at + 1, ("project.b".into(), proj.b));

        let mlp_in = config.mlp_input_dim();
        if config.hidden_mlp {
            let dh = config.mlp_hidden_dim();
            tensors.push(("mlp.hidden.w".into(), uniform_init(&[mlp_in, dh], mlp_in, rng)));
            tensors.push(("mlp.hidden.b".into(), Tensor::zeros(&[dh]).trainable()));
            tensors.push(("mlp.out.w".into(), uniform_init(&[dh, 3], dh, rng)));
        } else {
            tensors.push(("mlp.out.w".into(), uniform_init(&[mlp_in, 3], mlp_in, rng)));
        }
        tensors.push(("mlp.out.b".into(), Tensor::zeros(&[3]).trainable()));

        Ok(ModelParams { config: config.clone(), tensors, frozen_rows: vec![] })
    }

    /// Replaces the embedding table with a loaded one.
    pub fn with_embeddings(
        mut self,
        table: Tensor<f32>,
        frozen_rows: Vec<usize>,
    ) -> Result<Self> {
        let expect = self.tensors[0].1.shape().to_vec();
        if table.shape() != expect {
            return Err(Error::shape("with_embeddings", table.shape(), &expect));
        }
        self.tensors[0].1 = table;
        self.frozen_rows = frozen_rows;
        Ok(self)
    }

    /// 64-bit copy for gradient checking.
    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::<f64>::from_f32(t)))
                .collect(),
            frozen_rows: self.frozen_rows.clone(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn total_parameters(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.tensors[0].1.shape()[0]
    }

    pub fn tensor_named(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Contract(format!("no tensor named {name:?}")))
    }
}

impl<T: Scalar> ParamAccess<T> for ModelParams<T> {
    fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.tensor(name)
    }

    fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.tensor_mut(name)
    }
}

// ── Staging ──────────────────────────────────────────────────────────────

/// The parameter set loaded onto one tape.
pub struct StagedModel {
    /// One entry per tensor in [`ModelParams::tensors`] order.
    pub vars: Vec<Var>,
    pub embed: Var,
    pub encoder: BiLstm,
    pub project: Projection,
    pub infer: BiLstm,
    pub mlp_hidden: Option<(Var, Var)>,
    pub mlp_out: (Var, Var),
}

/// Copies every tensor onto the tape and wires up the structure views.
pub fn stage<T: Scalar>(params: &ModelParams<T>, tape: &mut Tape<T>) -> Result<StagedModel> {
    let vars: Vec<Var> = params.tensors.iter().map(|(_, t)| tape.input(t)).collect();
    let var_of = |name: &str| -> Result<Var> {
        params
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::Contract(format!("missing tensor {name:?}")))
    };
    let dir = |prefix: &str, side: &str| -> Result<LstmDirection> {
        Ok(LstmDirection {
            w_input: var_of(&format!("{prefix}.{side}.w_input"))?,
            w_hidden: var_of(&format!("{prefix}.{side}.w_hidden"))?,
            bias: var_of(&format!("{prefix}.{side}.bias"))?,
        })
    };
    let d = params.config.hidden_dim;
    let staged = StagedModel {
        embed: var_of("embed.table")?,
        encoder: BiLstm { fwd: dir("encoder", "fwd")?, bwd: dir("encoder", "bwd")?, hidden_dim: d },
        project: Projection { w: var_of("project.w")?, b: var_of("project.b")? },
        infer: BiLstm { fwd: dir("infer", "fwd")?, bwd: dir("infer", "bwd")?, hidden_dim: d },
        mlp_hidden: if params.config.hidden_mlp {
            Some((var_of("mlp.hidden.w")?, var_of("mlp.hidden.b")?))
        } else {
            None
        },
        mlp_out: (var_of("mlp.out.w")?, var_of("mlp.out.b")?),
        vars,
    };
    Ok(staged)
}

// ── Forward pass ─────────────────────────────────────────────────────────

/// The classifier head: `[1, 8d]` pooled features to a `[1, 3]`
/// distribution. Dropout hits the input and the hidden activation while
/// training.
pub fn mlp<T: Scalar, R: Rng>(
    pooled: Var,
    staged: &StagedModel,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
    tape: &mut Tape<T>,
) -> Result<Var> {
    let mut x = tape.dropout(pooled, dropout_rate, training, rng)?;
    if let Some((w_h, b_h)) = staged.mlp_hidden {
        let h = tape.matmul(x, w_h)?;
        let h = tape.add_row_bias(h, b_h)?;
        let h = tape.tanh(h);
        x = tape.dropout(h, dropout_rate, training, rng)?;
    }
    let logits = tape.matmul(x, staged.mlp_out.0)?;
    let logits = tape.add_row_bias(logits, staged.mlp_out.1)?;
    tape.softmax_rows(logits, None)
}

/// Runs the whole pipeline for one id-mapped pair on the given tape.
/// Returns the `[1, 3]` probability node and the attention weights.
pub fn forward<T: Scalar, R: Rng>(
    staged: &StagedModel,
    config: &ModelConfig,
    premise: &[usize],
    hypothesis: &[usize],
    training: bool,
    rng: &mut R,
    tape: &mut Tape<T>,
) -> Result<(Var, Alignment)> {
    if premise.is_empty() || hypothesis.is_empty() {
        return Err(Error::Contract("both sentences need at least one token".into()));
    }
    let u_emb = tape.gather_rows(staged.embed, premise)?;
    let v_emb = tape.gather_rows(staged.embed, hypothesis)?;

    let rounds = if config.dep_enc { config.reading_rounds } else { 1 };
    let (u_enc, v_enc) = encode_pair(&staged.encoder, u_emb, v_emb, rounds, tape)?;

    let alignment = align(u_enc, v_enc, None, None, tape)?;
    let opts = EnrichOptions {
        difference: config.difference,
        elem_prod: config.elem_prod,
        activation: config.projection_activation,
        dropout_rate: config.dropout_rate,
    };
    let p_u = enrich_project(u_enc, alignment.u_context, &staged.project, &opts, training, rng, tape)?;
    let p_v = enrich_project(v_enc, alignment.v_context, &staged.project, &opts, training, rng, tape)?;

    let (q_u, q_v) = dependent_inference(
        &staged.infer,
        p_u,
        p_v,
        config.dep_infer,
        config.inference_pooling,
        tape,
    )?;
    let pooled = pool_fixed(q_u, q_v, config.max_pool, config.avg_pool, tape)?;
    let probs = mlp(pooled, staged, config.dropout_rate, training, rng, tape)?;
    Ok((probs, alignment))
}

/// Negative log likelihood of the gold label, with the probability
/// clamped at 1e-12 before the log.
pub fn nll_loss<T: Scalar>(probs: Var, gold: Label, tape: &mut Tape<T>) -> Result<Var> {
    let p = tape.narrow(probs, 1, gold.index(), 1)?;
    let p = tape.clamp_min(p, T::from_f64(1e-12));
    let logp = tape.ln(p);
    Ok(tape.scale(logp, T::from_f64(-1.0)))
}

// ── Whole-model conveniences ─────────────────────────────────────────────

/// A class distribution plus its argmax label.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: [f64; 3],
    pub label: Label,
}

impl Prediction {
    /// Argmax with ties going to the lowest label index.
    pub fn from_probs(probs: [f64; 3]) -> Self {
        let mut best = 0;
        for i in 1..3 {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        Prediction { probs, label: Label::from_index(best).expect("index < 3") }
    }
}

fn probs_from_tape<T: Scalar>(tape: &Tape<T>, v: Var) -> [f64; 3] {
    let vals = tape.value(v);
    [vals[0].into_f64(), vals[1].into_f64(), vals[2].into_f64()]
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic evaluation-mode prediction for one pair.
    pub fn predict(&self, premise: &[usize], hypothesis: &[usize]) -> Result<Prediction> {
        Ok(self.predict_with_attention(premise, hypothesis)?.0)
    }

    /// Prediction plus the premise-over-hypothesis attention weights as a
    /// `[Tu][Tv]` row-stochastic matrix.
    pub fn predict_with_attention(
        &self,
        premise: &[usize],
        hypothesis: &[usize],
    ) -> Result<(Prediction, Vec<Vec<f64>>)> {
        let mut tape = Tape::<T>::new();
        let staged = stage(self, &mut tape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: training=false
        let (probs, alignment) =
            forward(&staged, &self.config, premise, hypothesis, false, &mut rng, &mut tape)?;
        let weights_flat = tape.value(alignment.u_weights);
        let tv = hypothesis.len();
        let weights = premise
            .iter()
            .enumerate()
            .map(|(i, _)| {
                weights_flat[i * tv..(i + 1) * tv]
                    .iter()
                    .map(|w| w.into_f64())
                    .collect()
            })
            .collect();
        Ok((Prediction::from_probs(probs_from_tape(&tape, probs)), weights))
    }

    /// Prediction plus the raw alignment energy, row-major `[Tu * Tv]`.
    /// Heatmap export normalizes the energy itself, so it wants the scores
    /// before the softmax rather than the weights above.
    pub fn predict_with_energy(
        &self,
        premise: &[usize],
        hypothesis: &[usize],
    ) -> Result<(Prediction, Vec<f64>)> {
        let mut tape = Tape::<T>::new();
        let staged = stage(self, &mut tape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: training=false
        let (probs, alignment) =
            forward(&staged, &self.config, premise, hypothesis, false, &mut rng, &mut tape)?;
        let energy = tape.value(alignment.energy).iter().map(|e| e.into_f64()).collect();
        Ok((Prediction::from_probs(probs_from_tape(&tape, probs)), energy))
    }

    /// Like [`ModelParams::predict`] but accepting padded id lists with
    /// validity masks; padded positions are dropped before the model runs,
    /// so the result is identical to predicting the trimmed pair.
    pub fn predict_padded(
        &self,
        premise: &[usize],
        premise_mask: &[bool],
        hypothesis: &[usize],
        hypothesis_mask: &[bool],
    ) -> Result<Prediction> {
        let trim = |ids: &[usize], mask: &[bool]| -> Result<Vec<usize>> {
            if ids.len() != mask.len() {
                return Err(Error::Contract(format!(
                    "mask has {} entries for {} ids",
                    mask.len(),
                    ids.len()
                )));
            }
            Ok(ids
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|(&id, _)| id)
                .collect())
        };
        self.predict(&trim(premise, premise_mask)?, &trim(hypothesis, hypothesis_mask)?)
    }

    /// One training example: loss value and per-tensor gradients, aligned
    /// with [`ModelParams::tensors`]. Tensors off the active graph get
    /// zero gradients.
    pub fn example_gradients<R: Rng>(
        &self,
        premise: &[usize],
        hypothesis: &[usize],
        gold: Label,
        training: bool,
        rng: &mut R,
    ) -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::<T>::new();
        let staged = stage(self, &mut tape)?;
        let (probs, _) =
            forward(&staged, &self.config, premise, hypothesis, training, rng, &mut tape)?;
        let loss = nll_loss(probs, gold, &mut tape)?;
        tape.backward(loss)?;
        let grads = self
            .tensors
            .iter()
            .zip(&staged.vars)
            .map(|((_, t), &v)| {
                tape.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); t.numel()])
            })
            .collect();
        Ok((tape.scalar_value(loss), grads))
    }
}
