//! Central-difference validation of tape gradients.

use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max over all leaf elements of `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
    pub max_rel_err: f64,
    /// Worst relative error per leaf, in input order.
    pub per_leaf: Vec<f64>,
    /// (leaf, flat element) where the maximum was attained.
    pub worst: (usize, usize),
}

/// Compares tape gradients of a scalar function against fourth-order central
/// differences with step `step`.
///
/// `f` receives a fresh tape and one [`Var`] per entry of `leaves`, and must
/// return a scalar. It is evaluated once with differentiable leaves and four times
/// per leaf element with perturbed constant leaves.
pub fn finite_diff_check<T, F>(f: F, leaves: &[Tensor<T>], step: f64) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid(format!("finite difference step must be positive, got {step}")));
    }

    let mut tape = Tape::new();
    let vars = leaves
        .iter()
        .map(|t| tape.leaf(&t.clone().requires_grad()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let analytic: Vec<Vec<f64>> = match tape.backward(loss) {
        Ok(()) => vars
            .iter()
            .map(|&v| {
                Ok(tape
                    .grad(v)?
                    .expect("leaf gradient")
                    .iter()
                    .map(|g| g.as_f64())
                    .collect())
            })
            .collect::<Result<_>>()?,
        // a function that ignores every leaf has an identically zero gradient
        Err(Error::DetachedLoss) => leaves.iter().map(|t| vec![0.0; t.len()]).collect(),
        Err(e) => return Err(e),
    };

    let eval = |inputs: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out)?;
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(out)?.to_vec()));
        }
        let v = v[0].as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check",
            });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<T>> = leaves.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        per_leaf: vec![0.0; leaves.len()],
        worst: (0, 0),
    };
    for li in 0..leaves.len() {
        for k in 0..leaves[li].len() {
            let orig = leaves[li].data()[k];
            let h = T::c(step);
            let mut at = |x: T| -> Result<f64> {
                work[li].data_mut()[k] = x;
                eval(&work)
            };
            // fourth-order stencil (−f(2h) + 8f(h) − 8f(−h) + f(−2h)) / 12h
            let (fp2, fp1, fm1, fm2) = (at(orig + h + h)?, at(orig + h)?, at(orig - h)?, at(orig - h - h)?);
            work[li].data_mut()[k] = orig;
            let fd = (fm2 - fp2 + 8.0 * (fp1 - fm1)) / (12.0 * step);
            let ad = analytic[li][k];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            if rel > report.per_leaf[li] {
                report.per_leaf[li] = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (li, k);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = x^T M x with M fixed
        let m = Tensor::<f64>::from_f64([3, 3], &[2., 1., 0., 1., 3., -1., 0., -1., 4.]).unwrap();
        let x = Tensor::<f64>::from_f64([1, 3], &[0.3, -1.2, 0.7]).unwrap();
        let report = finite_diff_check(
            |tape, v| {
                let mc = tape.constant(&m)?;
                let xm = tape.matmul(v[0], mc)?;
                let p = tape.mul(xm, v[0])?;
                tape.sum_all(p)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let report = finite_diff_check(|tape, _| tape.scalar(3.0), &[x], 1e-5).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn linear_sigmoid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([4, 3], 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::randn([3, 2], 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::randn([2], 1.0, &mut rng).unwrap();
        let report = finite_diff_check(
            |tape, v| {
                let y = tape.linear(v[0], v[1], Some(v[2]))?;
                let s = tape.sigmoid(y)?;
                tape.sum_all(s)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::zeros([1]).unwrap();
        assert!(finite_diff_check(|tape, v| tape.sum_all(v[0]), &[x], 0.0).is_err());
    }
}
