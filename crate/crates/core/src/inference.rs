//! The inference stage: re-reading the aligned sentences.
//!
//! After enrichment each sentence passes through a second shared BiLSTM
//! twice: once from a zero state and once seeded with the final state the
//! partner's first read produced. The two readings fuse elementwise with
//! max, letting each coordinate keep whichever reading expressed it more
//! strongly. A fixed pooling stage then collapses each sentence to the
//! concatenation of its column max and column mean.

use crate::encoder::{bilstm, BiLstm, BiState};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Elementwise max of two readings of the same sentence.
pub fn dual_max_pool<T: Scalar>(a: Var, b: Var, tape: &mut Tape<T>) -> Result<Var> {
    tape.maximum(a, b)
}

/// Produces the fused inference reading of both sentences, `[T, 2d]` each.
///
/// * `dep_infer` off: only the zero-state readings are used.
/// * `fuse` off: only the partner-seeded readings are used.
/// * both on: the elementwise max of the two readings.
///
/// The zero-state pass over one sentence doubles as the state source for
/// the partner's seeded pass, so the dependent path costs one extra scan
/// per sentence, not two.
pub fn dependent_inference<T: Scalar>(
    net: &BiLstm,
    p_u: Var,
    p_v: Var,
    dep_infer: bool,
    fuse: bool,
    tape: &mut Tape<T>,
) -> Result<(Var, Var)> {
    let d = net.hidden_dim;
    let zero_u = BiState::zeros(d, tape);
    let zero_v = BiState::zeros(d, tape);
    let (bar_u, state_u) = bilstm(net, p_u, &zero_u, tape)?;
    let (bar_v, state_v) = bilstm(net, p_v, &zero_v, tape)?;
    if !dep_infer {
        return Ok((bar_u, bar_v));
    }
    let (hat_u, _) = bilstm(net, p_u, &state_v, tape)?;
    let (hat_v, _) = bilstm(net, p_v, &state_u, tape)?;
    if !fuse {
        return Ok((hat_u, hat_v));
    }
    Ok((
        dual_max_pool(bar_u, hat_u, tape)?,
        dual_max_pool(bar_v, hat_v, tape)?,
    ))
}

/// Collapses one sentence `[T, w]` to `[1, parts * w]`: column max first,
/// column mean second, subject to the toggles.
pub fn pool_sentence<T: Scalar>(
    p: Var,
    max_pool: bool,
    avg_pool: bool,
    tape: &mut Tape<T>,
) -> Result<Var> {
    let mut parts = Vec::new();
    if max_pool {
        parts.push(tape.reduce_max(p, 0)?);
    }
    if avg_pool {
        parts.push(tape.reduce_mean(p, 0)?);
    }
    if parts.is_empty() {
        return Err(Error::Config(
            "pooling needs max_pool or avg_pool enabled".into(),
        ));
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 1)
}

/// Pools both sentences and joins them, premise first: `[1, 2 * pooled]`.
pub fn pool_fixed<T: Scalar>(
    p_u: Var,
    p_v: Var,
    max_pool: bool,
    avg_pool: bool,
    tape: &mut Tape<T>,
) -> Result<Var> {
    let u = pool_sentence(p_u, max_pool, avg_pool, tape)?;
    let v = pool_sentence(p_v, max_pool, avg_pool, tape)?;
    tape.concat(&[u, v], 1)
}
