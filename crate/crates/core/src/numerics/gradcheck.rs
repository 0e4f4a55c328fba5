use crate::error::Result;
use crate::numerics::Tensor;

/// A scalar function of several tensors with an analytic gradient.
///
/// Vector-valued primitives are checked by contracting their output with a
/// fixed upstream tensor, which turns the vector-Jacobian product into the
/// gradient of a scalar.
pub trait Differentiable {
    fn value(&self, inputs: &[Tensor]) -> Result<f64>;
    fn gradient(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Cap on coordinates probed per input tensor; coordinates are spread
    /// evenly across the tensor. `None` probes all of them.
    pub max_coords_per_input: Option<usize>,
    /// A coordinate is treated as a kink (and skipped) when its forward and
    /// backward one-sided differences disagree by more than
    /// `kink_tol * max(1, |central|)`.
    pub kink_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_input: None,
            kink_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - central| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn finite_diff_check(op: &dyn Differentiable, point: &[Tensor], step: f64) -> Result<GradCheckReport> {
    finite_diff_check_with(
        op,
        point,
        &GradCheckOptions {
            step,
            ..GradCheckOptions::default()
        },
    )
}

/// Compares the analytic gradient of `op` at `point` with central differences.
pub fn finite_diff_check_with(
    op: &dyn Differentiable,
    point: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    assert!(opts.step > 0.0, "finite-difference step must be positive");
    let analytic = op.gradient(point)?;
    assert_eq!(analytic.len(), point.len(), "gradient count must match input count");
    let f0 = op.value(point)?;
    let h = opts.step;
    let mut report = GradCheckReport::default();
    let mut probe = point.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.dims(), point[ti].dims(), "gradient shape for input {ti}");
        let n = point[ti].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(cap) if cap < n => (0..cap).map(|i| i * n / cap).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = point[ti].data()[j];
            probe[ti].data_mut()[j] = x0 + h;
            let fp = op.value(&probe)?;
            probe[ti].data_mut()[j] = x0 - h;
            let fm = op.value(&probe)?;
            probe[ti].data_mut()[j] = x0;

            let central = (fp - fm) / (2.0 * h);
            let right = (fp - f0) / h;
            let left = (f0 - fm) / h;
            if (right - left).abs() > opts.kink_tol * central.abs().max(1.0) {
                report.skipped += 1;
                continue;
            }
            let a = grad.data()[j];
            let rel = (a - central).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
