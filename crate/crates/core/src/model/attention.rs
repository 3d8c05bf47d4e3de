use super::ModelError;
use crate::diffcore::{Tape, Tensor, Var};

/// Mixer weights `[D, 2D]` and bias `[D]` for `tanh(W [h, context] + b)`.
#[derive(Clone, Copy, Debug)]
pub struct Mixer {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    /// Softmax weights over the attended states; `None` when there were none.
    pub weights: Option<Var>,
}

/// Final-layer encoder outputs stacked into a `[steps, D]` matrix.
#[derive(Clone, Copy, Debug)]
pub struct EncoderMemory {
    pub states: Var,
    pub len: usize,
}

impl EncoderMemory {
    pub fn new(tape: &mut Tape, states: &[Var]) -> Result<Self, ModelError> {
        if states.is_empty() {
            return Err(ModelError::NoEncoderStates);
        }
        Ok(Self {
            states: tape.stack(states)?,
            len: states.len(),
        })
    }
}

fn attend(tape: &mut Tape, query: Var, keys: Var) -> Result<(Var, Var), ModelError> {
    let scores = tape.matvec(keys, query)?;
    let weights = tape.softmax_last(scores)?;
    let context = tape.matvec_t(keys, weights)?;
    Ok((context, weights))
}

fn mix(tape: &mut Tape, h: Var, context: Var, m: &Mixer) -> Result<Var, ModelError> {
    let joined = tape.concat_last(h, context)?;
    let pre = tape.affine(m.w, joined, m.b)?;
    Ok(tape.tanh(pre)?)
}

/// Attends `h_t` over earlier outputs of the same layer. With no history the
/// context is the zero vector.
pub fn self_attend(tape: &mut Tape, h: Var, history: &[Var], mixer: &Mixer) -> Result<Attended, ModelError> {
    let d = tape.shape(h).to_vec();
    if d.len() != 1 {
        return Err(ModelError::Dimension {
            what: "self-attention query",
            got: d,
        });
    }
    if history.is_empty() {
        let zero = tape.leaf(Tensor::zeros(&d));
        return Ok(Attended {
            output: mix(tape, h, zero, mixer)?,
            weights: None,
        });
    }
    let keys = tape.stack(history)?;
    let (context, weights) = attend(tape, h, keys)?;
    Ok(Attended {
        output: mix(tape, h, context, mixer)?,
        weights: Some(weights),
    })
}

/// Attends a decoder state over the encoder's final-layer outputs.
pub fn inter_attend(tape: &mut Tape, hd: Var, memory: &EncoderMemory, mixer: &Mixer) -> Result<Attended, ModelError> {
    let (context, weights) = attend(tape, hd, memory.states)?;
    Ok(Attended {
        output: mix(tape, hd, context, mixer)?,
        weights: Some(weights),
    })
}
