//! Recurrent sentence encoding.
//!
//! Both sentences pass through one shared bidirectional LSTM. The defining
//! trick is the dependent read: the network first skims the partner
//! sentence and uses the final recurrent state it reaches as the initial
//! state for reading the sentence of interest, so every token is encoded
//! with the partner already in mind. With three rounds the state threads
//! back and forth once more before the final read.
//!
//! Sentences are processed at their true length; there are no padding
//! steps anywhere in this module.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// One scan direction staged on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirection {
    /// `[input, 4d]`, gate order input/forget/cell/output along the columns.
    pub w_input: Var,
    /// `[d, 4d]`.
    pub w_hidden: Var,
    /// `[4d]`.
    pub bias: Var,
}

/// A bidirectional LSTM staged on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
    pub hidden_dim: usize,
}

/// Final recurrent state of both directions, each `[1, d]`.
#[derive(Debug, Clone, Copy)]
pub struct BiState {
    pub h_fwd: Var,
    pub c_fwd: Var,
    pub h_bwd: Var,
    pub c_bwd: Var,
}

impl BiState {
    pub fn zeros<T: Scalar>(d: usize, tape: &mut Tape<T>) -> Self {
        BiState {
            h_fwd: tape.zeros(&[1, d]),
            c_fwd: tape.zeros(&[1, d]),
            h_bwd: tape.zeros(&[1, d]),
            c_bwd: tape.zeros(&[1, d]),
        }
    }
}

/// Freshly initialized weights for one direction.
///
/// Weights draw from uniform(-k, k) with k = 1/sqrt(d). Biases start at
/// zero except the forget gate block, which starts at one so early
/// training does not wipe the cell state.
pub struct DirectionInit {
    pub w_input: Tensor<f32>,
    pub w_hidden: Tensor<f32>,
    pub bias: Tensor<f32>,
}

pub fn init_direction<R: Rng>(
    input_dim: usize,
    hidden_dim: usize,
    rng: &mut R,
) -> Result<DirectionInit> {
    let k = 1.0 / (hidden_dim as f64).sqrt();
    let w_input =
        Tensor::rand_uniform(&[input_dim, 4 * hidden_dim], -k, k, rng).trainable();
    let w_hidden =
        Tensor::rand_uniform(&[hidden_dim, 4 * hidden_dim], -k, k, rng).trainable();
    let mut bias_data = vec![0.0f32; 4 * hidden_dim];
    bias_data[hidden_dim..2 * hidden_dim].fill(1.0);
    let bias = Tensor::new(bias_data, &[4 * hidden_dim])?.trainable();
    Ok(DirectionInit { w_input, w_hidden, bias })
}

/// One recurrence step given the already-projected input row `[1, 4d]`.
fn cell_from_projected<T: Scalar>(
    dir: &LstmDirection,
    d: usize,
    x_proj: Var,
    h: Var,
    c: Var,
    tape: &mut Tape<T>,
) -> Result<(Var, Var)> {
    let hw = tape.matmul(h, dir.w_hidden)?;
    let pre = tape.add(x_proj, hw)?;
    let pre = tape.add_row_bias(pre, dir.bias)?;

    let i_pre = tape.narrow(pre, 1, 0, d)?;
    let f_pre = tape.narrow(pre, 1, d, d)?;
    let g_pre = tape.narrow(pre, 1, 2 * d, d)?;
    let o_pre = tape.narrow(pre, 1, 3 * d, d)?;
    let i = tape.sigmoid_op(i_pre);
    let f = tape.sigmoid_op(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid_op(o_pre);

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, c_new))
}

/// One step from a raw input row `[1, input]`.
pub fn lstm_cell<T: Scalar>(
    dir: &LstmDirection,
    d: usize,
    x: Var,
    h: Var,
    c: Var,
    tape: &mut Tape<T>,
) -> Result<(Var, Var)> {
    let x_proj = tape.matmul(x, dir.w_input)?;
    cell_from_projected(dir, d, x_proj, h, c, tape)
}

/// Scans `inputs` `[T, input]` in one direction.
///
/// Output rows sit in original token order regardless of direction; the
/// returned state is the one reached after the direction's last step (the
/// first token for a reverse scan).
pub fn run_direction<T: Scalar>(
    dir: &LstmDirection,
    d: usize,
    inputs: Var,
    init: (Var, Var),
    reverse: bool,
    tape: &mut Tape<T>,
) -> Result<(Var, (Var, Var))> {
    let steps = tape.shape(inputs)[0];
    if steps == 0 {
        return Err(Error::Contract("cannot scan an empty sentence".into()));
    }
    // Project all steps through the input weights at once.
    let projected = tape.matmul(inputs, dir.w_input)?;

    let (mut h, mut c) = init;
    let mut rows: Vec<Option<Var>> = vec![None; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let x_proj = tape.narrow(projected, 0, t, 1)?;
        let (h_new, c_new) = cell_from_projected(dir, d, x_proj, h, c, tape)?;
        h = h_new;
        c = c_new;
        rows[t] = Some(h);
    }
    let rows: Vec<Var> = rows.into_iter().map(|r| r.expect("every step visited")).collect();
    let hiddens = tape.concat(&rows, 0)?;
    Ok((hiddens, (h, c)))
}

/// Runs both directions and concatenates them per token: `[T, 2d]`.
pub fn bilstm<T: Scalar>(
    net: &BiLstm,
    inputs: Var,
    init: &BiState,
    tape: &mut Tape<T>,
) -> Result<(Var, BiState)> {
    let d = net.hidden_dim;
    let (fwd, (h_fwd, c_fwd)) =
        run_direction(&net.fwd, d, inputs, (init.h_fwd, init.c_fwd), false, tape)?;
    let (bwd, (h_bwd, c_bwd)) =
        run_direction(&net.bwd, d, inputs, (init.h_bwd, init.c_bwd), true, tape)?;
    let hiddens = tape.concat(&[fwd, bwd], 1)?;
    Ok((hiddens, BiState { h_fwd, c_fwd, h_bwd, c_bwd }))
}

/// Encodes a sentence pair with the requested number of reading rounds.
///
/// * 1: each sentence reads from a zero state, independently.
/// * 2: each sentence reads from the final state of a zero-initialized
///   pass over its partner.
/// * 3: the state threads partner, self, partner before the final read.
///
/// Every pass reuses the same weights; the rounds differ only in how the
/// initial state is produced.
pub fn encode_pair<T: Scalar>(
    net: &BiLstm,
    u: Var,
    v: Var,
    rounds: usize,
    tape: &mut Tape<T>,
) -> Result<(Var, Var)> {
    let d = net.hidden_dim;
    let chain = |tape: &mut Tape<T>, seq: &[Var], last: Var| -> Result<Var> {
        // Thread the state through `seq`, then emit hiddens for `last`.
        let mut state = BiState::zeros(d, tape);
        for &s in seq {
            state = bilstm(net, s, &state, tape)?.1;
        }
        Ok(bilstm(net, last, &state, tape)?.0)
    };
    match rounds {
        1 => Ok((chain(tape, &[], u)?, chain(tape, &[], v)?)),
        2 => Ok((chain(tape, &[v], u)?, chain(tape, &[u], v)?)),
        3 => Ok((
            chain(tape, &[v, u, v], u)?,
            chain(tape, &[u, v, u], v)?,
        )),
        other => Err(Error::Config(format!(
            "reading_rounds must be 1, 2 or 3, got {other}"
        ))),
    }
}
