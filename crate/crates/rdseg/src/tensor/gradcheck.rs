//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, ValueId};
use super::{DiffTensor, TensorError};

/// Worst relative error observed for one leaf.
#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_error: f64,
}

/// Outcome of [`grad_check`]: per-leaf errors plus the overall verdict.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compare analytic gradients of a deterministic scalar function against
/// central finite differences with step `h`.
///
/// `f` rebuilds its computation from the registered leaves on every call; the
/// relative error per element is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(
    f: F,
    leaves: &[(&str, DiffTensor)],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId, TensorError>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(TensorError::InvalidArgument(format!(
            "finite-difference step must lie in (0, 1e-2], got {h}"
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let mut ids = Vec::with_capacity(leaves.len());
    for (_, tensor) in leaves {
        let mut tracked = tensor.clone();
        tracked.set_requires_grad(true);
        ids.push(tape.leaf(&tracked)?);
    }
    let root = f(&mut tape, &ids)?;
    if tape.numel(root) != 1 {
        return Err(TensorError::NotScalar { numel: tape.numel(root) });
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.numel(id)]))
        .collect();

    // Numeric pass: twice per element, leaves as constants.
    let eval = |perturbed: &[DiffTensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(perturbed.len());
        for tensor in perturbed {
            let mut frozen = tensor.clone();
            frozen.set_requires_grad(false);
            ids.push(tape.leaf(&frozen)?);
        }
        let root = f(&mut tape, &ids)?;
        Ok(tape.value(root)[0])
    };

    let mut working: Vec<DiffTensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(leaves.len());
    let mut overall = 0.0f64;
    for li in 0..leaves.len() {
        let mut worst = 0.0f64;
        for e in 0..working[li].numel() {
            let original = working[li].data()[e];
            working[li].data_mut()[e] = original + h;
            let plus = eval(&working)?;
            working[li].data_mut()[e] = original - h;
            let minus = eval(&working)?;
            working[li].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[li][e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
        overall = overall.max(worst);
        reports.push(LeafReport { name: leaves[li].0.to_string(), max_rel_error: worst });
    }

    Ok(GradCheckReport { leaves: reports, max_rel_error: overall, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = DiffTensor::new(vec![2, 3], vec![0.3, -1.2, 0.7, 2.0, -0.4, 1.1]).unwrap();
        let report = grad_check(
            |tape, ids| tape.sum(ids[0]),
            &[("x", x)],
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "error {}", report.max_rel_error);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = DiffTensor::new(vec![1], vec![0.5]).unwrap();
        assert!(grad_check(|tape, ids| tape.sum(ids[0]), &[("x", x.clone())], 0.0, 1e-4).is_err());
        assert!(grad_check(|tape, ids| tape.sum(ids[0]), &[("x", x)], 0.5, 1e-4).is_err());
    }

    #[test]
    fn rejects_non_scalar_function() {
        let x = DiffTensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        let err = grad_check(|tape, ids| tape.relu(ids[0]), &[("x", x)], 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }
}
