//! Central finite-difference gradient verification.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub step: f64,
    /// At most this many evenly strided entries per input are probed (0 = all).
    pub max_probes_per_input: usize,
    /// Entries whose gradient magnitude is below `floor_fraction · max|grad|`
    /// are compared against that floor instead of their own magnitude.
    pub floor_fraction: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self { step: 1e-5, max_probes_per_input: 0, floor_fraction: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat offset) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, floor)` where
/// `floor = floor_fraction · max_k |n_k|` over every probed entry, so entries
/// that are tiny compared to the overall gradient scale are judged on that scale.
pub fn check_gradients<F>(inputs: &[Tensor], opts: GradCheckOpts, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().map(|g| (*g).clone()).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.item()
    };

    let mut probes = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = match opts.max_probes_per_input {
            0 => 1,
            m => n.div_ceil(m).max(1),
        };
        for off in (0..n).step_by(stride) {
            let orig = t.data()[off];
            work[i].data_mut()[off] = orig + opts.step;
            let up = eval(&work)?;
            work[i].data_mut()[off] = orig - opts.step;
            let down = eval(&work)?;
            work[i].data_mut()[off] = orig;
            probes.push((i, off, analytic[i].data()[off], (up - down) / (2.0 * opts.step)));
        }
    }
    let scale = probes.iter().map(|p| p.3.abs()).fold(0.0, f64::max);
    let floor = (opts.floor_fraction * scale).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        probes: probes.len(),
    };
    for (i, off, a, n) in probes {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err >= report.max_rel_err {
            report = GradCheckReport { max_rel_err: err, worst: (i, off), analytic: a, numeric: n, ..report };
        }
    }
    Ok(report)
}
