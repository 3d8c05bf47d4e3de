use super::params::{Bound, GATES};
use super::ModelError;
use crate::diffcore::{Kernel, Tape, Tensor, Var};
use crate::marketdata::{ATTRIBUTES, STEPS};

/// Hidden and cell state; grids `[5, 6, C]` for convolutional cells, vectors for dense ones.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Gate kernels in `i, f, o, c` order over the channel-concatenated `[X, H]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmParams {
    pub gates: [Kernel; 4],
}

impl ConvLstmParams {
    pub fn bind(tape: &Tape, p: &Bound, prefix: &str) -> Result<Self, ModelError> {
        let k = |g: &str| -> Result<Kernel, ModelError> {
            Ok(Kernel::new(tape, p.get(&format!("{prefix}.{g}.w"))?, p.get(&format!("{prefix}.{g}.b"))?)?)
        };
        Ok(Self {
            gates: [k(GATES[0])?, k(GATES[1])?, k(GATES[2])?, k(GATES[3])?],
        })
    }

    pub fn channels(&self) -> usize {
        self.gates[0].out_channels
    }
}

/// Dense gate weights `[D, in + D]` and biases `[D]`, `i, f, o, c` order.
#[derive(Clone, Copy, Debug)]
pub struct DenseLstmParams {
    pub gates: [(Var, Var); 4],
}

impl DenseLstmParams {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self, ModelError> {
        let g = |g: &str| -> Result<(Var, Var), ModelError> {
            Ok((p.get(&format!("{prefix}.{g}.w"))?, p.get(&format!("{prefix}.{g}.b"))?))
        };
        Ok(Self {
            gates: [g(GATES[0])?, g(GATES[1])?, g(GATES[2])?, g(GATES[3])?],
        })
    }
}

fn lstm_update(tape: &mut Tape, pre: [Var; 4], state: &LstmState) -> Result<LstmState, ModelError> {
    let i = tape.sigmoid(pre[0])?;
    let f = tape.sigmoid(pre[1])?;
    let o = tape.sigmoid(pre[2])?;
    let g = tape.tanh(pre[3])?;
    let keep = tape.hadamard(f, state.c)?;
    let write = tape.hadamard(i, g)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c)?;
    let h = tape.hadamard(o, squashed)?;
    Ok(LstmState { h, c })
}

/// One convolutional LSTM step on a `[5, 6, in]` frame grid.
pub fn convlstm_step(tape: &mut Tape, p: &ConvLstmParams, x: Var, state: &LstmState) -> Result<LstmState, ModelError> {
    let xh = tape.concat_last(x, state.h)?;
    let mut pre = [xh; 4];
    for (slot, k) in pre.iter_mut().zip(&p.gates) {
        *slot = tape.conv1d_row_shared(xh, k)?;
    }
    lstm_update(tape, pre, state)
}

/// One fully connected LSTM step on a flat input vector.
pub fn dense_lstm_step(tape: &mut Tape, p: &DenseLstmParams, x: Var, state: &LstmState) -> Result<LstmState, ModelError> {
    let xh = tape.concat_last(x, state.h)?;
    let mut pre = [xh; 4];
    for (slot, (w, b)) in pre.iter_mut().zip(&p.gates) {
        *slot = tape.affine(*w, xh, *b)?;
    }
    lstm_update(tape, pre, state)
}

#[derive(Clone, Copy, Debug)]
pub enum Cell {
    Conv(ConvLstmParams),
    Dense(DenseLstmParams),
}

impl Cell {
    pub fn step(&self, tape: &mut Tape, x: Var, state: &LstmState) -> Result<LstmState, ModelError> {
        match self {
            Cell::Conv(p) => convlstm_step(tape, p, x, state),
            Cell::Dense(p) => dense_lstm_step(tape, p, x, state),
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, channels: usize) -> LstmState {
        let shape = match self {
            Cell::Conv(_) => vec![ATTRIBUTES, STEPS, channels],
            Cell::Dense(_) => vec![ATTRIBUTES * STEPS * channels],
        };
        LstmState {
            h: tape.leaf(Tensor::zeros(&shape)),
            c: tape.leaf(Tensor::zeros(&shape)),
        }
    }

    /// Reshapes a flat hidden vector into this cell's input layout.
    pub fn layer_input(&self, tape: &mut Tape, h: Var, channels: usize) -> Result<Var, ModelError> {
        match self {
            Cell::Conv(_) => Ok(tape.reshape(h, &[ATTRIBUTES, STEPS, channels])?),
            Cell::Dense(_) => Ok(h),
        }
    }
}
