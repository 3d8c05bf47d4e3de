use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::diffcore::{Tape, Tensor, Var};
use crate::marketdata::{ATTRIBUTES, STEPS};

pub const GATES: [&str; 4] = ["i", "f", "o", "c"];
pub const CLASSES: usize = 3;

/// Name, shape and initialization scale of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in for weights; `None` marks a zero-initialized bias.
    pub fan_in: Option<usize>,
}

fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape,
        fan_in: Some(fan_in),
    }
}

fn bias(name: String, len: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![len],
        fan_in: None,
    }
}

fn dense(out: &mut Vec<ParamSpec>, prefix: &str, inputs: usize, outputs: usize) {
    out.push(weight(format!("{prefix}.w"), vec![outputs, inputs], inputs));
    out.push(bias(format!("{prefix}.b"), outputs));
}

fn classifier(out: &mut Vec<ParamSpec>, prefix: &str, inputs: usize, hidden: [usize; 2]) {
    dense(out, &format!("{prefix}.fc0"), inputs, hidden[0]);
    dense(out, &format!("{prefix}.fc1"), hidden[0], hidden[1]);
    dense(out, &format!("{prefix}.out"), hidden[1], CLASSES);
}

fn gaussian_head(out: &mut Vec<ParamSpec>, prefix: &str, inputs: usize, hidden: usize, z: usize) {
    dense(out, &format!("{prefix}.fc"), inputs, hidden);
    dense(out, &format!("{prefix}.mu"), hidden, z);
    dense(out, &format!("{prefix}.logvar"), hidden, z);
}

/// Recurrent stacks present under `cfg`, with whether each attends to the encoder.
pub(crate) fn stacks(cfg: &ModelConfig) -> Vec<(&'static str, bool)> {
    let mut s = Vec::new();
    if !cfg.recurrent {
        return s;
    }
    if cfg.encoder {
        s.push(("enc", false));
    }
    s.push(("dec", cfg.uses_inter_attention()));
    if cfg.variational {
        s.push(("bwd", cfg.uses_inter_attention() && cfg.backward_inter_attention));
    }
    s
}

/// Every trainable tensor of a model, in a fixed order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let d = cfg.hidden_len();
    let kw = cfg.kernel_width;
    let mut out = Vec::new();
    for (stack, inter) in stacks(cfg) {
        for l in 0..cfg.layers {
            for g in GATES {
                let p = format!("{stack}.{l}.{g}");
                if cfg.convolutional {
                    let cin = if l == 0 { 1 } else { c };
                    out.push(weight(format!("{p}.w"), vec![kw, cin + c, c], kw * (cin + c)));
                    out.push(bias(format!("{p}.b"), c));
                } else {
                    let input = if l == 0 { ATTRIBUTES * STEPS } else { d };
                    dense(&mut out, &p, input + d, d);
                }
            }
            if cfg.attention {
                dense(&mut out, &format!("{stack}.{l}.self"), 2 * d, d);
            }
            if inter {
                dense(&mut out, &format!("{stack}.{l}.inter"), 2 * d, d);
            }
        }
    }
    if !cfg.recurrent {
        out.push(weight("cnn.conv0.w".into(), vec![kw, 1, c], kw));
        out.push(bias("cnn.conv0.b".into(), c));
        out.push(weight("cnn.conv1.w".into(), vec![kw, c, c], kw * c));
        out.push(bias("cnn.conv1.b".into(), c));
    }
    let z = if cfg.variational { cfg.z_dim } else { 0 };
    classifier(&mut out, "cls", d + z, cfg.classifier_hidden);
    if cfg.variational {
        gaussian_head(&mut out, "prior", d + z, cfg.prior_hidden, z);
        gaussian_head(&mut out, "post", d, cfg.posterior_hidden, z);
        classifier(&mut out, "bwd_cls", d, cfg.classifier_hidden);
    }
    out
}

/// Named parameter tensors, shared cheaply with tapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamStore {
    fn from_parts(names: Vec<String>, values: Vec<Arc<Tensor>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            names,
            values,
            index: Arc::new(index),
        }
    }

    /// Weights uniform in ±√(3/fan-in) (unit gain for linear maps), biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = layout(cfg);
        let mut values = Vec::with_capacity(specs.len());
        for s in &specs {
            let n: usize = s.shape.iter().product();
            let data = match s.fan_in {
                Some(fan) => {
                    let a = (3.0 / fan as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                None => vec![0.0; n],
            };
            values.push(Arc::new(Tensor::new(s.shape.clone(), data)?));
        }
        Ok(Self::from_parts(specs.into_iter().map(|s| s.name).collect(), values))
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let specs = layout(cfg);
        let values = specs.iter().map(|s| Arc::new(Tensor::zeros(&s.shape))).collect();
        Ok(Self::from_parts(specs.into_iter().map(|s| s.name).collect(), values))
    }

    /// Builds a store from named tensors, checking them against `cfg`'s layout.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let specs = layout(cfg);
        if specs.len() != named.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut values = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name {
                return Err(ModelError::MissingParam(spec.name.clone()));
            }
            if spec.shape != t.shape() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: spec.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            names.push(name);
            values.push(Arc::new(t));
        }
        Ok(Self::from_parts(names, values))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| self.values[i].as_ref())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }

    /// Total number of scalars.
    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(|v| v.sum_squares()).sum()
    }

    /// Copy-on-write access for optimizer updates.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let i = *self.index.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        if self.values[i].shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                expected: self.values[i].shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    /// Registers every tensor as a tape leaf without copying.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.values.iter().map(|v| tape.leaf_shared(Arc::clone(v))).collect();
        self.bind_vars(vars)
    }

    /// Names already-registered leaves, given in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        Bound {
            vars,
            index: Arc::clone(&self.index),
        }
    }
}

/// Parameter leaves on one tape, addressable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub const CHECKPOINT_FORMAT: &str = "clvsa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk model: format tag, version, configuration and named tensors in layout order.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

pub fn checkpoint_to_string(cfg: &ModelConfig, store: &ParamStore) -> Result<String, ModelError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params: store
            .names
            .iter()
            .zip(&store.values)
            .map(|(n, v)| NamedTensor {
                name: n.clone(),
                shape: v.shape().to_vec(),
                data: v.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_str(s: &str) -> Result<(ModelConfig, ParamStore), ModelError> {
    let file: CheckpointFile = serde_json::from_str(s)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let named = file
        .params
        .into_iter()
        .map(|p| Ok((p.name, Tensor::new(p.shape, p.data)?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let store = ParamStore::from_named(&file.config, named)?;
    Ok((file.config, store))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<(), ModelError> {
    let text = checkpoint_to_string(cfg, store)?;
    fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore), ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_str(&text)
}
