use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, OpKind, Tape, Tensor, Var};
use crate::par::{self, ExecMode};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Upper bound on coordinates probed per parameter tensor; `None` probes all.
    pub max_coords: Option<usize>,
    /// Seeds the coordinate subsample.
    pub seed: u64,
    pub exec: ExecMode,
    /// Corrupts one gradient rule (see [`Tape::with_fault`]).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            exec: ExecMode::default(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub per_param: Vec<ParamError>,
    pub max_rel_error: f64,
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn new_tape(fault: Option<OpKind>) -> Tape {
    match fault {
        Some(kind) => Tape::with_fault(kind),
        None => Tape::new(),
    }
}

fn evaluate<F>(f: &F, params: &[Tensor], fault: Option<OpKind>) -> Result<(Tape, Var, Vec<Var>), DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = new_tape(fault);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(DiffError::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    Ok((tape, loss, vars))
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences, coordinate by coordinate.
pub fn grad_check<F>(params: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + Sync,
{
    let (mut tape, loss, vars) = evaluate(&f, params, opts.fault)?;
    let base = tape.scalar_value(loss);
    let (again, again_loss, _) = evaluate(&f, params, opts.fault)?;
    let second = again.scalar_value(again_loss);
    if base.to_bits() != second.to_bits() {
        return Err(DiffError::NonDeterministic { first: base, second });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    drop(tape);

    let mut probes: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        match opts.max_coords {
            Some(k) if k < p.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, p.len(), k).into_vec();
                idx.sort_unstable();
                probes.extend(idx.into_iter().map(|c| (pi, c)));
            }
            _ => probes.extend((0..p.len()).map(|c| (pi, c))),
        }
    }

    let h = opts.step;
    let numeric = par::try_map(opts.exec, &probes, |&(pi, c)| -> Result<f64, DiffError> {
        let mut shifted = params.to_vec();
        let x0 = params[pi].data()[c];
        shifted[pi].update(|i, v| if i == c { x0 + h } else { v })?;
        let (t, l, _) = evaluate(&f, &shifted, None)?;
        let plus = t.scalar_value(l);
        shifted[pi].update(|i, v| if i == c { x0 - h } else { v })?;
        let (t, l, _) = evaluate(&f, &shifted, None)?;
        let minus = t.scalar_value(l);
        Ok((plus - minus) / (2.0 * h))
    })?;

    let mut per_param: Vec<ParamError> = (0..params.len())
        .map(|index| ParamError {
            index,
            coords_checked: 0,
            max_rel_error: 0.0,
        })
        .collect();
    for (&(pi, c), n) in probes.iter().zip(numeric) {
        let entry = &mut per_param[pi];
        entry.coords_checked += 1;
        entry.max_rel_error = entry.max_rel_error.max(relative_error(analytic[pi][c], n));
    }
    let max_rel_error = per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss: base,
        per_param,
        max_rel_error,
    })
}
