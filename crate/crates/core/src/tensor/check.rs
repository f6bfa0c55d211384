//! Central-difference verification of analytic gradients.
//!
//! The caller computes gradients once with `backward`, hands them over
//! together with mutable access to the parameters, and this module perturbs
//! sampled coordinates one at a time, re-evaluating the loss at `theta + h`
//! and `theta - h`. The two paths share no code beyond the loss closure
//! itself, which is the point: a bug in a backward rule cannot cancel out.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Read and write access to a named parameter collection. Implemented by
/// the full model parameter set and, for tests, by plain vectors of named
/// tensors.
pub trait ParamAccess<T: Scalar> {
    fn tensor(&self, name: &str) -> Result<&Tensor<T>>;
    fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>>;
}

impl<T: Scalar> ParamAccess<T> for Vec<(String, Tensor<T>)> {
    fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Contract(format!("unknown parameter tensor {name}")))
    }

    fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Contract(format!("unknown parameter tensor {name}")))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// A coordinate passes when its relative error stays below this.
    pub tolerance: f64,
    /// Upper bound on checked coordinates per tensor; the rest are sampled.
    pub samples_per_tensor: usize,
    /// Seed for coordinate sampling, so reports are reproducible.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            tolerance: 1e-4,
            samples_per_tensor: 24,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Relative error with a floor: |a - n| / max(|a| + |n|, 1e-6).
///
/// The floor must sit above the cancellation noise of the central
/// difference itself, roughly ulp(loss) / (2 eps), or near-zero gradients
/// fail on rounding error alone. At the same time a genuinely wrong rule
/// still surfaces: an off-by-everything gradient of magnitude 1e-8 scores
/// 1e-2 against the floor, far past any sane tolerance.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compares `analytic` gradients against central differences of `loss`.
///
/// `analytic` pairs tensor names with full-length gradient buffers; each
/// buffer must match the named tensor's element count. The loss closure is
/// re-evaluated at perturbed parameters and must be deterministic given the
/// parameter values (fix any dropout seed). Non-finite losses or gradients
/// fail with a numeric error naming the offending tensor.
pub fn grad_check<T, P, F>(
    params: &mut P,
    analytic: &[(String, Vec<T>)],
    mut loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Scalar,
    P: ParamAccess<T>,
    F: FnMut(&P) -> Result<T>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for (name, grad) in analytic {
        let numel = params.tensor(name)?.numel();
        if grad.len() != numel {
            return Err(Error::Contract(format!(
                "gradient for {name} has {} entries, tensor has {numel}",
                grad.len()
            )));
        }
        let indices: Vec<usize> = if numel <= cfg.samples_per_tensor {
            (0..numel).collect()
        } else {
            let mut picked =
                rand::seq::index::sample(&mut rng, numel, cfg.samples_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        for i in indices {
            let orig = params.tensor(name)?.data()[i];
            let h = T::from_f64(cfg.eps);

            params.tensor_mut(name)?.data_mut()[i] = orig + h;
            let lp = loss(params)?;
            params.tensor_mut(name)?.data_mut()[i] = orig - h;
            let lm = loss(params)?;
            params.tensor_mut(name)?.data_mut()[i] = orig;

            let analytic_v = grad[i].into_f64();
            let numeric = (lp.into_f64() - lm.into_f64()) / (2.0 * cfg.eps);
            if !numeric.is_finite() || !analytic_v.is_finite() {
                return Err(Error::Numeric {
                    tensor: name.clone(),
                    detail: format!(
                        "non-finite gradient at index {i}: analytic {analytic_v}, numeric {numeric}"
                    ),
                });
            }
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                index: i,
                analytic: analytic_v,
                numeric,
                rel_err: relative_error(analytic_v, numeric),
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    // Loss for a tiny linear layer: mean((x w + b)^2) over fixed input.
    fn linear_loss(params: &Vec<(String, Tensor<f64>)>) -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![0.4, -1.2, 0.9, 0.1, 2.0, -0.7], &[2, 3])?;
        let w = t.input(params.tensor("w")?);
        let b = t.input(params.tensor("b")?);
        let h = t.matmul(x, w)?;
        let h = t.add_row_bias(h, b)?;
        let sq = t.mul(h, h)?;
        let m0 = t.reduce_mean(sq, 0)?;
        let m1 = t.reduce_mean(m0, 1)?;
        Ok(t.scalar_value(m1))
    }

    fn linear_params() -> Vec<(String, Tensor<f64>)> {
        let w = Tensor::new(vec![0.3, -0.5, 0.8, 0.2, -0.1, 0.6], &[3, 2])
            .unwrap()
            .trainable();
        let b = Tensor::new(vec![0.05, -0.2], &[2]).unwrap().trainable();
        vec![("w".into(), w), ("b".into(), b)]
    }

    fn linear_grads(params: &Vec<(String, Tensor<f64>)>) -> Vec<(String, Vec<f64>)> {
        let mut t = Tape::<f64>::new();
        let x = t
            .constant(vec![0.4, -1.2, 0.9, 0.1, 2.0, -0.7], &[2, 3])
            .unwrap();
        let w = t.input(params.tensor("w").unwrap());
        let b = t.input(params.tensor("b").unwrap());
        let h = t.matmul(x, w).unwrap();
        let h = t.add_row_bias(h, b).unwrap();
        let sq = t.mul(h, h).unwrap();
        let m0 = t.reduce_mean(sq, 0).unwrap();
        let m1 = t.reduce_mean(m0, 1).unwrap();
        t.backward(m1).unwrap();
        vec![
            ("w".into(), t.grad(w).unwrap().to_vec()),
            ("b".into(), t.grad(b).unwrap().to_vec()),
        ]
    }

    #[test]
    fn linear_layer_gradients_verify() {
        let mut params = linear_params();
        let analytic = linear_grads(&params);
        let report = grad_check(
            &mut params,
            &analytic,
            linear_loss,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {:?}",
            report.max_rel_err(),
            report.worst()
        );
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut params = linear_params();
        let mut analytic = linear_grads(&params);
        analytic[0].1[2] += 0.5;
        let report = grad_check(
            &mut params,
            &analytic,
            linear_loss,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().tensor, "w");
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error_naming_the_tensor() {
        let mut params = linear_params();
        let analytic = linear_grads(&params);
        let err = grad_check(
            &mut params,
            &analytic,
            |_| Ok(f64::NAN),
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::Numeric { tensor, .. } => assert_eq!(tensor, "w"),
            other => panic!("expected numeric error, got {other}"),
        }
    }

    #[test]
    fn gradient_length_mismatch_is_a_contract_error() {
        let mut params = linear_params();
        let analytic = vec![("w".to_string(), vec![0.0; 3])];
        assert!(matches!(
            grad_check(
                &mut params,
                &analytic,
                linear_loss,
                &GradCheckConfig::default()
            ),
            Err(Error::Contract(_))
        ));
    }
}
