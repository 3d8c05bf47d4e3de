use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::attention::{inter_attend, self_attend, EncoderMemory, Mixer};
use super::cells::{Cell, ConvLstmParams, DenseLstmParams};
use super::params::{stacks, Bound, ParamStore};
use super::{ModelConfig, ModelError};
use crate::diffcore::{Kernel, Tape, Tensor, Var};
use crate::marketdata::{DayPair, Frame, ATTRIBUTES, STEPS};

pub const LOGVAR_BOUND: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout on, latent samples from the posterior, backward decoder runs.
    Train,
    /// Dropout off, latent set to the prior mean, backward decoder skipped.
    Eval,
}

/// Diagonal Gaussian given by mean and clamped log-variance.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mu: Var,
    pub logvar: Var,
}

/// Per-step nodes produced by one pass over a day pair.
#[derive(Clone, Debug, Default)]
pub struct ModelOutput {
    /// Forward-decoder class probabilities `[Up, Flat, Down]`, one per frame of day B.
    pub probs: Vec<Var>,
    /// Backward-decoder probabilities in reversed time order.
    pub backward_probs: Vec<Var>,
    pub prior: Vec<Gaussian>,
    pub posterior: Vec<Gaussian>,
    pub z: Vec<Var>,
    /// Every softmax attention weight vector computed in the pass.
    pub attention: Vec<Var>,
}

fn frame_input(tape: &mut Tape, frame: &Frame, convolutional: bool) -> Result<Var, ModelError> {
    let shape = if convolutional {
        vec![ATTRIBUTES, STEPS, 1]
    } else {
        vec![ATTRIBUTES * STEPS]
    };
    Ok(tape.leaf(Tensor::new(shape, frame.flat())?))
}

/// Shared state of one forward pass.
struct Pass<'a, R: Rng + ?Sized> {
    tape: &'a mut Tape,
    p: &'a Bound,
    cfg: &'a ModelConfig,
    training: bool,
    rng: &'a mut R,
    attention: Vec<Var>,
}

impl<R: Rng + ?Sized> Pass<'_, R> {
    fn dense(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let w = self.p.get(&format!("{prefix}.w"))?;
        let b = self.p.get(&format!("{prefix}.b"))?;
        Ok(self.tape.affine(w, x, b)?)
    }

    fn relu_dropout(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let pre = self.dense(prefix, x)?;
        let h = self.tape.relu(pre)?;
        Ok(self.tape.dropout(h, self.cfg.dropout, self.training, self.rng)?)
    }

    fn classify(&mut self, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let h = self.relu_dropout(&format!("{prefix}.fc0"), x)?;
        let h = self.relu_dropout(&format!("{prefix}.fc1"), h)?;
        let logits = self.dense(&format!("{prefix}.out"), h)?;
        Ok(self.tape.softmax_last(logits)?)
    }

    fn gaussian(&mut self, prefix: &str, x: Var) -> Result<Gaussian, ModelError> {
        let h = self.relu_dropout(&format!("{prefix}.fc"), x)?;
        let mu = self.dense(&format!("{prefix}.mu"), h)?;
        let raw = self.dense(&format!("{prefix}.logvar"), h)?;
        let logvar = self.tape.clamp(raw, -LOGVAR_BOUND, LOGVAR_BOUND)?;
        Ok(Gaussian { mu, logvar })
    }

    fn mixer(&self, prefix: &str) -> Result<Mixer, ModelError> {
        Ok(Mixer {
            w: self.p.get(&format!("{prefix}.w"))?,
            b: self.p.get(&format!("{prefix}.b"))?,
        })
    }

    fn cell(&self, prefix: &str) -> Result<Cell, ModelError> {
        Ok(if self.cfg.convolutional {
            Cell::Conv(ConvLstmParams::bind(self.tape, self.p, prefix)?)
        } else {
            Cell::Dense(DenseLstmParams::bind(self.p, prefix)?)
        })
    }

    /// Runs every layer of a recurrent stack and returns the final layer's
    /// flat outputs, one per input frame.
    fn run_stack(&mut self, stack: &str, frames: &[&Frame], memory: Option<&EncoderMemory>) -> Result<Vec<Var>, ModelError> {
        let c = self.cfg.channels;
        let mut inputs = Vec::with_capacity(frames.len());
        for f in frames {
            inputs.push(frame_input(self.tape, f, self.cfg.convolutional)?);
        }
        let mut outputs = Vec::new();
        for l in 0..self.cfg.layers {
            let cell = self.cell(&format!("{stack}.{l}"))?;
            let self_mixer = if self.cfg.attention {
                Some(self.mixer(&format!("{stack}.{l}.self"))?)
            } else {
                None
            };
            let inter_mixer = match memory {
                Some(_) => Some(self.mixer(&format!("{stack}.{l}.inter"))?),
                None => None,
            };
            let mut state = cell.zero_state(self.tape, c);
            let mut history: Vec<Var> = Vec::with_capacity(inputs.len());
            outputs = Vec::with_capacity(inputs.len());
            for &x in &inputs {
                state = cell.step(self.tape, x, &state)?;
                let mut h = if self.tape.shape(state.h).len() == 1 {
                    state.h
                } else {
                    self.tape.flatten(state.h)?
                };
                if let Some(m) = &self_mixer {
                    let a = self_attend(self.tape, h, &history, m)?;
                    self.attention.extend(a.weights);
                    history.push(a.output);
                    h = a.output;
                }
                if let (Some(mem), Some(m)) = (memory, &inter_mixer) {
                    let a = inter_attend(self.tape, h, mem, m)?;
                    self.attention.extend(a.weights);
                    h = a.output;
                }
                outputs.push(h);
            }
            if l + 1 < self.cfg.layers {
                inputs = Vec::with_capacity(outputs.len());
                for &h in &outputs {
                    inputs.push(cell.layer_input(self.tape, h, c)?);
                }
            }
        }
        Ok(outputs)
    }

    fn cnn_features(&mut self, frame: &Frame) -> Result<Var, ModelError> {
        let x = frame_input(self.tape, frame, true)?;
        let k0 = Kernel::new(self.tape, self.p.get("cnn.conv0.w")?, self.p.get("cnn.conv0.b")?)?;
        let k1 = Kernel::new(self.tape, self.p.get("cnn.conv1.w")?, self.p.get("cnn.conv1.b")?)?;
        let h = self.tape.conv1d_row_shared(x, &k0)?;
        let h = self.tape.relu(h)?;
        let h = self.tape.conv1d_row_shared(h, &k1)?;
        let h = self.tape.relu(h)?;
        Ok(self.tape.flatten(h)?)
    }
}

fn check_pair(pair: &DayPair, cfg: &ModelConfig) -> Result<(), ModelError> {
    if pair.day_b.frames.is_empty() || (cfg.encoder && pair.day_a.frames.is_empty()) {
        return Err(ModelError::EmptyDay);
    }
    if pair.day_b_reversed.frames.len() != pair.day_b.frames.len() {
        return Err(ModelError::DayLength {
            forward: pair.day_b.frames.len(),
            backward: pair.day_b_reversed.frames.len(),
        });
    }
    Ok(())
}

fn encoder_memory<R: Rng + ?Sized>(pass: &mut Pass<'_, R>, pair: &DayPair) -> Result<Option<EncoderMemory>, ModelError> {
    if !pass.cfg.encoder {
        return Ok(None);
    }
    let frames: Vec<&Frame> = pair.day_a.frames.iter().collect();
    let states = pass.run_stack("enc", &frames, None)?;
    Ok(Some(EncoderMemory::new(pass.tape, &states)?))
}

/// Final-layer encoder outputs over day A, one flat vector per frame.
pub fn encode_day(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, day_a: &[Frame]) -> Result<Vec<Var>, ModelError> {
    if !cfg.encoder {
        return Err(ModelError::Config("model has no encoder".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pass = Pass {
        tape,
        p,
        cfg,
        training: false,
        rng: &mut rng,
        attention: Vec::new(),
    };
    let frames: Vec<&Frame> = day_a.iter().collect();
    pass.run_stack("enc", &frames, None)
}

/// Backward-decoder hidden vectors and class probabilities over the reversed
/// day, both in reversed time order.
pub fn decode_day_backward<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    pair: &DayPair,
    memory: Option<&EncoderMemory>,
    training: bool,
    rng: &mut R,
) -> Result<(Vec<Var>, Vec<Var>), ModelError> {
    if !cfg.variational {
        return Err(ModelError::BackwardDisabled);
    }
    let mut pass = Pass {
        tape,
        p,
        cfg,
        training,
        rng,
        attention: Vec::new(),
    };
    backward_branch(&mut pass, pair, memory)
}

fn backward_branch<R: Rng + ?Sized>(
    pass: &mut Pass<'_, R>,
    pair: &DayPair,
    memory: Option<&EncoderMemory>,
) -> Result<(Vec<Var>, Vec<Var>), ModelError> {
    let attends = stacks(pass.cfg).iter().any(|(s, inter)| *s == "bwd" && *inter);
    let frames: Vec<&Frame> = pair.day_b_reversed.frames.iter().collect();
    let hidden = pass.run_stack("bwd", &frames, if attends { memory } else { None })?;
    let mut probs = Vec::with_capacity(hidden.len());
    for &b in &hidden {
        probs.push(pass.classify("bwd_cls", b)?);
    }
    Ok((hidden, probs))
}

/// Index of the backward-decoder state aligned with forward step `t` of a day of `len` frames.
pub fn aligned_backward_index(t: usize, len: usize) -> usize {
    len - 1 - t
}

/// One pass over a day pair. In [`Mode::Train`] the latent at each step is a
/// single reparameterized posterior sample and dropout is active; in
/// [`Mode::Eval`] the latent is the prior mean and `rng` is never consulted.
pub fn forward_pass<R: Rng + ?Sized>(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    pair: &DayPair,
    mode: Mode,
    rng: &mut R,
) -> Result<ModelOutput, ModelError> {
    check_pair(pair, cfg)?;
    let training = mode == Mode::Train;
    let mut pass = Pass {
        tape,
        p,
        cfg,
        training,
        rng,
        attention: Vec::new(),
    };
    let mut out = ModelOutput::default();

    if !cfg.recurrent {
        for f in &pair.day_b.frames {
            let h = pass.cnn_features(f)?;
            out.probs.push(pass.classify("cls", h)?);
        }
        return Ok(out);
    }

    let memory = encoder_memory(&mut pass, pair)?;
    let backward_hidden = if cfg.variational && training {
        let (hidden, probs) = backward_branch(&mut pass, pair, memory.as_ref())?;
        out.backward_probs = probs;
        hidden
    } else {
        Vec::new()
    };

    let frames: Vec<&Frame> = pair.day_b.frames.iter().collect();
    let hidden = pass.run_stack("dec", &frames, memory.as_ref())?;
    let len = hidden.len();
    let mut z_prev = if cfg.variational {
        Some(pass.tape.leaf(Tensor::zeros(&[cfg.z_dim])))
    } else {
        None
    };
    for (t, &h) in hidden.iter().enumerate() {
        let features = match z_prev {
            Some(zp) => {
                let prior_in = pass.tape.concat_last(h, zp)?;
                let prior = pass.gaussian("prior", prior_in)?;
                let z = if training {
                    let b = backward_hidden[aligned_backward_index(t, len)];
                    let post = pass.gaussian("post", b)?;
                    let eps: Vec<f64> = (0..cfg.z_dim).map(|_| StandardNormal.sample(&mut *pass.rng)).collect();
                    let z = pass.tape.reparameterize(post.mu, post.logvar, &Tensor::vector(eps)?)?;
                    out.posterior.push(post);
                    z
                } else {
                    prior.mu
                };
                out.prior.push(prior);
                out.z.push(z);
                z_prev = Some(z);
                latent_features(pass.tape, h, z)?
            }
            None => h,
        };
        out.probs.push(pass.classify("cls", features)?);
    }
    out.attention = pass.attention;
    Ok(out)
}

/// Where the latent variable enters the classifier: appended to the decoder output.
pub fn latent_features(tape: &mut Tape, h: Var, z: Var) -> Result<Var, ModelError> {
    Ok(tape.concat_last(h, z)?)
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = ParamStore::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Evaluation-mode class probabilities for every frame of day B.
    pub fn predict(&self, pair: &DayPair) -> Result<Vec<[f64; 3]>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward_pass(&mut tape, &bound, &self.config, pair, Mode::Eval, &mut rng)?;
        Ok(out
            .probs
            .iter()
            .map(|&v| {
                let d = tape.data(v);
                [d[0], d[1], d[2]]
            })
            .collect())
    }
}
