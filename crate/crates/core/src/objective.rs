//! The training loss: forward cross-entropy, weighted backward cross-entropy,
//! annealed KL divergence between posterior and prior, and an L2 penalty.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Var};
use crate::marketdata::Label;
use crate::model::{Gaussian, ModelOutput};

pub const DEFAULT_ALPHA: f64 = 2.5e-4;
pub const DEFAULT_GAMMA: f64 = 1e-5;
pub const DEFAULT_ANNEAL_ITERATIONS: usize = 1000;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("{what}: {outputs} outputs but {labels} labels")]
    StepMismatch {
        what: &'static str,
        outputs: usize,
        labels: usize,
    },
    #[error("no labeled step in the forward sequence")]
    NoLabels,
    #[error("anneal horizon must be at least 1")]
    AnnealHorizon,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Linear KLD warm-up over `iterations` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub iterations: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ANNEAL_ITERATIONS,
        }
    }
}

impl AnnealSchedule {
    pub fn new(iterations: usize) -> Result<Self, ObjectiveError> {
        if iterations == 0 {
            return Err(ObjectiveError::AnnealHorizon);
        }
        Ok(Self { iterations })
    }
}

/// `min(1, k / K)`.
pub fn beta_at(k: usize, schedule: &AnnealSchedule) -> f64 {
    (k as f64 / schedule.iterations.max(1) as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    /// Weight of the backward-decoder cross-entropy.
    pub alpha: f64,
    /// Weight of the L2 penalty.
    pub gamma: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

/// Loss terms in nats, except `l2` (sum of squared parameters) and `beta`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub ce_forward: f64,
    pub ce_backward: f64,
    pub kld: f64,
    pub l2: f64,
    pub beta: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ce_forward, self.ce_backward, self.kld, self.l2, self.beta, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Field-wise mean, accumulated in slice order.
    pub fn mean(items: &[ObjectiveBreakdown]) -> ObjectiveBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = ObjectiveBreakdown::default();
        for b in items {
            m.ce_forward += b.ce_forward;
            m.ce_backward += b.ce_backward;
            m.kld += b.kld;
            m.l2 += b.l2;
            m.beta += b.beta;
            m.total += b.total;
        }
        m.ce_forward /= n;
        m.ce_backward /= n;
        m.kld /= n;
        m.l2 /= n;
        m.beta /= n;
        m.total /= n;
        m
    }
}

/// KL(posterior ‖ prior) in closed form.
pub fn kld_diag_gaussian(tape: &mut Tape, posterior: &Gaussian, prior: &Gaussian) -> Result<Var, ObjectiveError> {
    Ok(tape.kld_diag_gaussian(posterior.mu, posterior.logvar, prior.mu, prior.logvar)?)
}

/// Sum of every squared parameter entry, biases included.
pub fn l2_penalty(tape: &mut Tape, params: &[Var]) -> Result<Var, ObjectiveError> {
    let mut terms = Vec::with_capacity(params.len());
    for &p in params {
        terms.push((tape.sum_squares(p)?, 1.0));
    }
    if terms.is_empty() {
        return Ok(tape.leaf(crate::diffcore::Tensor::zeros(&[1])));
    }
    Ok(tape.weighted_sum(&terms)?)
}

fn mean_cross_entropy(
    tape: &mut Tape,
    probs: &[Var],
    labels: &[Option<Label>],
    what: &'static str,
) -> Result<Option<Var>, ObjectiveError> {
    if probs.len() != labels.len() {
        return Err(ObjectiveError::StepMismatch {
            what,
            outputs: probs.len(),
            labels: labels.len(),
        });
    }
    let mut terms = Vec::new();
    for (&p, l) in probs.iter().zip(labels) {
        if let Some(l) = l {
            terms.push(tape.cross_entropy(p, l.class_index())?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.mean_of(&terms)?))
}

/// Builds the scalar loss on `tape` and reports each term.
///
/// Cross-entropies average over labeled steps and the KLD over all steps.
/// Terms the model did not produce (no backward decoder, no posterior)
/// contribute zero.
pub fn total_objective(
    tape: &mut Tape,
    output: &ModelOutput,
    labels: &[Option<Label>],
    backward_labels: &[Option<Label>],
    params: &[Var],
    beta: f64,
    weights: &ObjectiveWeights,
) -> Result<(Var, ObjectiveBreakdown), ObjectiveError> {
    let ce_f = mean_cross_entropy(tape, &output.probs, labels, "forward decoder")?.ok_or(ObjectiveError::NoLabels)?;
    let mut terms = vec![(ce_f, 1.0)];
    let mut bd = ObjectiveBreakdown {
        ce_forward: tape.scalar_value(ce_f),
        beta,
        ..Default::default()
    };
    if !output.backward_probs.is_empty() {
        if let Some(ce_b) = mean_cross_entropy(tape, &output.backward_probs, backward_labels, "backward decoder")? {
            bd.ce_backward = tape.scalar_value(ce_b);
            terms.push((ce_b, weights.alpha));
        }
    }
    if !output.posterior.is_empty() {
        if output.posterior.len() != output.prior.len() {
            return Err(ObjectiveError::StepMismatch {
                what: "posterior/prior",
                outputs: output.posterior.len(),
                labels: output.prior.len(),
            });
        }
        let mut klds = Vec::with_capacity(output.prior.len());
        for (q, p) in output.posterior.iter().zip(&output.prior) {
            klds.push(kld_diag_gaussian(tape, q, p)?);
        }
        let kld = tape.mean_of(&klds)?;
        bd.kld = tape.scalar_value(kld);
        terms.push((kld, beta));
    }
    if !params.is_empty() {
        let l2 = l2_penalty(tape, params)?;
        bd.l2 = tape.scalar_value(l2);
        terms.push((l2, weights.gamma));
    }
    let total = tape.weighted_sum(&terms)?;
    bd.total = tape.scalar_value(total);
    Ok((total, bd))
}

pub const LOG_HEADER: &str = "iteration,ce_forward,ce_backward,kld,l2,beta,total";

/// Writes one CSV row per iteration.
pub fn write_log<W: Write>(rows: &[(usize, ObjectiveBreakdown)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for (k, b) in rows {
        writeln!(
            out,
            "{k},{},{},{},{},{},{}",
            b.ce_forward, b.ce_backward, b.kld, b.l2, b.beta, b.total
        )?;
    }
    Ok(())
}
