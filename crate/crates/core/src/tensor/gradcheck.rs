//! Central finite-difference gradient checking in `f64`.
//!
//! The checker only ever calls the forward closure; analytic gradients come
//! from one [`Tape::backward`] sweep and are compared element by element.

use super::{Tape, Tensor, Var};

/// Default finite-difference step.
pub const STEP: f64 = 1e-6;

/// Gradients smaller than this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Which elements of an input to probe.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    None,
    Indices(Vec<usize>),
}

/// Compare analytic and central-difference gradients of the scalar
/// `build(tape, inputs)` with respect to every probed input element.
pub fn check<F>(inputs: &[Tensor<f64>], probes: &[Probe], step: f64, build: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    assert_eq!(inputs.len(), probes.len());
    let tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .zip(probes)
        .map(|(t, p)| tape.leaf(t.clone(), !matches!(p, Probe::None)))
        .collect();
    let out = build(&tape, &vars);
    assert_eq!(
        out.shape().iter().product::<usize>(),
        1,
        "gradcheck needs a scalar output"
    );
    let grads = tape.backward(out);

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        build(&tape, &vars).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, probe) in probes.iter().enumerate() {
        let indices: Vec<usize> = match probe {
            Probe::All => (0..inputs[which].numel()).collect(),
            Probe::None => continue,
            Probe::Indices(ix) => ix.clone(),
        };
        let analytic = grads.get(vars[which]);
        for idx in indices {
            let a = analytic.map_or(0.0, |g| g.data()[idx]);
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + step;
            let plus = eval(&work);
            work[which].data_mut()[idx] = orig - step;
            let minus = eval(&work);
            work[which].data_mut()[idx] = orig;
            let n = (plus - minus) / (2.0 * step);
            let err = relative_error(a, n);
            report.probes += 1;
            if err > report.max_rel_error || report.probes == 1 {
                report.max_rel_error = err;
                report.worst = (which, idx);
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    report
}
