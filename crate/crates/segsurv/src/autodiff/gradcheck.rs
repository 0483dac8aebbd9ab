//! Central finite-difference verification of analytic gradients.
//!
//! Checks run in f64 only. The relative error of a coordinate uses a unit
//! floor in the denominator, `|a - n| / max(|a|, |n|, 1)`, so near-zero
//! gradients are compared absolutely instead of amplifying rounding noise.

use super::tape::{Tape, TensorRef};
use super::tensor::Tensor;
use crate::error::DiffError;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Settings for a gradient check run.
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// When set, only this many randomly chosen coordinates per parameter
    /// are differenced; otherwise every coordinate is checked.
    pub max_coords_per_param: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

/// Outcome for one checked parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub pass: bool,
}

/// Full gradient-check report.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn print(&self) {
        for p in &self.params {
            println!(
                "  {:<28} coords {:>5}  max rel err {:.3e}  {}",
                p.name,
                p.coords_checked,
                p.max_rel_err,
                if p.pass { "ok" } else { "FAIL" }
            );
        }
        println!(
            "  overall max rel err {:.3e} -> {}",
            self.max_rel_err,
            if self.pass { "PASS" } else { "FAIL" }
        );
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares the analytic gradient of `f` against central finite differences
/// at `params`. `f` rebuilds its forward pass on the tape it is given; the
/// slice of refs it receives corresponds to `params` in order and must
/// produce a scalar.
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape<f64>, &[TensorRef]) -> Result<TensorRef, DiffError>,
{
    if cfg.step <= 0.0 {
        return Err(DiffError::GradCheck("step must be positive".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &refs)?;
    if !tape.value(loss).is_scalar() {
        return Err(DiffError::NonScalarLoss {
            shape: tape.value(loss).shape().to_vec(),
        });
    }
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(DiffError::NonFinite { op: "grad_check forward" });
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = refs.iter().map(|&r| tape.leaf_grad(r)).collect();
    drop(tape);

    // Numeric pass, re-running the forward with perturbed copies.
    let eval = |values: &[Tensor<f64>]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let refs: Vec<TensorRef> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &refs)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(DiffError::NonFinite { op: "grad_check forward" });
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut working: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        max_rel_err: 0.0,
        pass: true,
    };

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let numel = tensor.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(m) if m < numel => sample(&mut rng, numel, m).into_vec(),
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            pass: true,
        };
        for &c in &coords {
            let orig = working[pi].data()[c];
            working[pi].data_mut()[c] = orig + cfg.step;
            let up = eval(&working)?;
            working[pi].data_mut()[c] = orig - cfg.step;
            let down = eval(&working)?;
            working[pi].data_mut()[c] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[pi].data()[c];
            let e = rel_err(a, numeric);
            if e > check.max_rel_err {
                check.max_rel_err = e;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        check.pass = check.max_rel_err <= cfg.tolerance;
        report.pass &= check.pass;
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let params = vec![("x".to_string(), Tensor::scalar(3.0))];
        let report = grad_check(
            &params,
            |tape, refs| {
                let sq = tape.mul(refs[0], refs[0])?;
                tape.sum_all(sq)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        // d(x^2)/dx at 3 is 6; central differences agree to ~1e-10.
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let params = vec![("x".to_string(), Tensor::scalar(-1.0))];
        let err = grad_check(
            &params,
            |tape, refs| {
                let l = tape.log(refs[0])?; // log of a negative value
                tape.sum_all(l)
            },
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = vec![
            ("a".to_string(), Tensor::new(vec![3, 4], a).unwrap()),
            ("b".to_string(), Tensor::new(vec![4, 2], b).unwrap()),
        ];
        let report = grad_check(
            &params,
            |tape, refs| {
                let prod = tape.matmul(refs[0], refs[1])?;
                // A nonlinear readout so dA depends on B and vice versa.
                let sq = tape.mul(prod, prod)?;
                tape.sum_all(sq)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "matmul rel err {}",
            report.max_rel_err
        );
    }
}
