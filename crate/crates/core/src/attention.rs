//! Soft alignment between the two encoded sentences.
//!
//! Every premise token attends over all hypothesis tokens and vice versa.
//! The shared energy matrix is the plain dot product of the encoded
//! vectors; each side normalizes it along its own axis. The aligned
//! context then joins the original encoding in an enrichment vector
//! (value, context, their difference, their product) that a single
//! projection maps back down to the recurrent width.
//!
//! Masks are optional: the training path runs sentences at true length,
//! but batched callers can mark padding and get exact zeros there.

use rand::Rng;

use crate::config::Activation;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Raw alignment energies: `e[i][j] = u_enc[i] . v_enc[j]`, shape `[Tu, Tv]`.
pub fn energy<T: Scalar>(u_enc: Var, v_enc: Var, tape: &mut Tape<T>) -> Result<Var> {
    let v_t = tape.transpose(v_enc)?;
    tape.matmul(u_enc, v_t)
}

/// Attention weights and aligned contexts for both sentences.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    /// `[Tu, Tv]` raw dot-product scores, before any normalization.
    pub energy: Var,
    /// `[Tu, Tv]`, each real row a distribution over the partner.
    pub u_weights: Var,
    /// `[Tv, Tu]`.
    pub v_weights: Var,
    /// `[Tu, 2d]`: for each premise token, the expected hypothesis vector.
    pub u_context: Var,
    /// `[Tv, 2d]`.
    pub v_context: Var,
}

/// Builds a `[rows, cols]` constant that zeroes the rows marked `false`.
fn row_mask_matrix<T: Scalar>(
    mask: &[bool],
    cols: usize,
    tape: &mut Tape<T>,
) -> Result<Var> {
    let data: Vec<T> = mask
        .iter()
        .flat_map(|&keep| {
            std::iter::repeat(if keep { T::one() } else { T::zero() }).take(cols)
        })
        .collect();
    tape.constant(data, &[mask.len(), cols])
}

/// Aligns two encoded sentences.
///
/// A mask entry is `true` for a real token and `false` for padding. With a
/// partner mask, padded columns get weight exactly zero and real rows
/// still sum to one; rows for padded tokens are zeroed outright, so
/// contexts at padded positions are zero vectors.
pub fn align<T: Scalar>(
    u_enc: Var,
    v_enc: Var,
    u_mask: Option<&[bool]>,
    v_mask: Option<&[bool]>,
    tape: &mut Tape<T>,
) -> Result<Alignment> {
    for (name, mask, var) in [("premise", u_mask, u_enc), ("hypothesis", v_mask, v_enc)] {
        if let Some(m) = mask {
            let len = tape.shape(var)[0];
            if m.len() != len {
                return Err(Error::Contract(format!(
                    "{name} mask has {} entries for {len} tokens",
                    m.len()
                )));
            }
        }
    }

    let e = energy(u_enc, v_enc, tape)?;
    let e_t = tape.transpose(e)?;

    // The softmax mask is per element; replicate the partner mask to every row.
    let expand = |partner: Option<&[bool]>, rows: usize| {
        partner.map(|m| m.iter().copied().cycle().take(rows * m.len()).collect::<Vec<_>>())
    };
    let tu = tape.shape(u_enc)[0];
    let tv = tape.shape(v_enc)[0];
    let u_elem = expand(v_mask, tu);
    let v_elem = expand(u_mask, tv);
    let mut u_weights = tape.softmax_rows(e, u_elem.as_deref())?;
    let mut v_weights = tape.softmax_rows(e_t, v_elem.as_deref())?;
    if let Some(m) = u_mask {
        let cols = tape.shape(u_weights)[1];
        let keep = row_mask_matrix(m, cols, tape)?;
        u_weights = tape.mul(u_weights, keep)?;
    }
    if let Some(m) = v_mask {
        let cols = tape.shape(v_weights)[1];
        let keep = row_mask_matrix(m, cols, tape)?;
        v_weights = tape.mul(v_weights, keep)?;
    }

    let u_context = tape.matmul(u_weights, v_enc)?;
    let v_context = tape.matmul(v_weights, u_enc)?;
    Ok(Alignment { energy: e, u_weights, v_weights, u_context, v_context })
}

/// The projection that maps enrichment vectors back to width d.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// `[enrich_dim, d]`.
    pub w: Var,
    /// `[d]`.
    pub b: Var,
}

/// Freshly initialized projection weights: uniform(-k, k), k = 1/sqrt(fan_in).
pub struct ProjectionInit {
    pub w: Tensor<f32>,
    pub b: Tensor<f32>,
}

pub fn init_projection<R: Rng>(
    enrich_dim: usize,
    hidden_dim: usize,
    rng: &mut R,
) -> ProjectionInit {
    let k = 1.0 / (enrich_dim as f64).sqrt();
    ProjectionInit {
        w: Tensor::rand_uniform(&[enrich_dim, hidden_dim], -k, k, rng).trainable(),
        b: Tensor::zeros(&[hidden_dim]).trainable(),
    }
}

/// Which enrichment terms to include and how to squash the projection.
#[derive(Debug, Clone, Copy)]
pub struct EnrichOptions {
    pub difference: bool,
    pub elem_prod: bool,
    pub activation: Activation,
    /// Dropout on the concatenated enrichment while training.
    pub dropout_rate: f64,
}

/// Concatenates `[x, ctx, x - ctx, x * ctx]` per token (difference and
/// product subject to the options), applies dropout, and projects down to
/// `[T, d]` through the shared weights.
pub fn enrich_project<T: Scalar, R: Rng>(
    encoded: Var,
    context: Var,
    proj: &Projection,
    opts: &EnrichOptions,
    training: bool,
    rng: &mut R,
    tape: &mut Tape<T>,
) -> Result<Var> {
    let mut parts = vec![encoded, context];
    if opts.difference {
        parts.push(tape.sub(encoded, context)?);
    }
    if opts.elem_prod {
        parts.push(tape.mul(encoded, context)?);
    }
    let enriched = tape.concat(&parts, 1)?;
    let dropped = tape.dropout(enriched, opts.dropout_rate, training, rng)?;
    let projected = tape.matmul(dropped, proj.w)?;
    let biased = tape.add_row_bias(projected, proj.b)?;
    Ok(match opts.activation {
        Activation::Relu => tape.relu(biased),
        Activation::Tanh => tape.tanh(biased),
    })
}
