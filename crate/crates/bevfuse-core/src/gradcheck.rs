//! Central finite-difference gradient checking.
//!
//! The numerical side is the independent oracle for every backward rule in
//! the crate: it only ever calls the forward pass.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst-case result of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (param index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked_entries: usize,
}

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` must be deterministic: it is re-run twice per checked entry with one
/// input element nudged by ±step, where step = eps · max(1, |x|). The
/// relative error is |analytic − numeric| / max(|analytic|, |numeric|, 1).
pub fn grad_check<F>(f: &F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(CoreError::Config { detail: "grad_check eps must be > 0".to_string() });
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        if tape.value(root).len() != 1 {
            return Err(CoreError::ShapeMismatch {
                op: "grad_check",
                detail: "f must return a scalar".to_string(),
            });
        }
        let y = tape.scalar_value(root);
        if !y.is_finite() {
            return Err(CoreError::NonFinite { op: "grad_check", detail: format!("f = {y}") });
        }
        Ok(y)
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).len() != 1 {
        return Err(CoreError::ShapeMismatch {
            op: "grad_check",
            detail: "f must return a scalar".to_string(),
        });
    }
    tape.backward(root);
    let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad_tensor(*v)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked_entries: 0 };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let x = params[p].data[i];
            let step = eps * crate::mathf::abs(x).max(1.0);
            work[p].data[i] = x + step;
            let fp = eval(&work)?;
            work[p].data[i] = x - step;
            let fm = eval(&work)?;
            work[p].data[i] = x;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[p].data[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(CoreError::NonFinite {
                    op: "grad_check",
                    detail: format!("param {p} entry {i}: analytic {a}, numeric {numeric}"),
                });
            }
            let denom = crate::mathf::abs(a).max(crate::mathf::abs(numeric)).max(1.0);
            let rel = crate::mathf::abs(a - numeric) / denom;
            report.checked_entries += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (p, i);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, StreamId};

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let rep = grad_check(&|t: &mut Tape, vs: &[Var]| Ok(t.sum_all(vs[0])), &[x], 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-9, "err {}", rep.max_rel_error);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::new(&[5], vec![0.3, -0.2, 1.1, 0.0, -0.7]).unwrap();
        let rep = grad_check(
            &|t: &mut Tape, vs: &[Var]| {
                let s = t.softmax(vs[0], 0)?;
                Ok(t.sum_all(s))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-9, "err {}", rep.max_rel_error);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut s = Stream::new(42, StreamId::Instances);
        let a = Tensor::rand_uniform(&[5, 7], -1.0, 1.0, &mut s);
        let b = Tensor::rand_uniform(&[7, 3], -1.0, 1.0, &mut s);
        let w = Tensor::rand_uniform(&[5, 3], -1.0, 1.0, &mut s);
        let wc = w.clone();
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.matmul(vs[0], vs[1])?;
                let probe = t.leaf(wc.clone());
                let p = t.mul(y, probe)?;
                Ok(t.sum_all(p))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut s = Stream::new(7, StreamId::Instances);
        let x = Tensor::rand_uniform(&[2, 6], -2.0, 2.0, &mut s);
        let w = Tensor::rand_uniform(&[2, 6], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.softmax(vs[0], 1)?;
                let probe = t.leaf(w.clone());
                let p = t.mul(y, probe)?;
                Ok(t.sum_all(p))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut s = Stream::new(9, StreamId::Instances);
        let map = Tensor::rand_uniform(&[2, 4, 5], -1.0, 1.0, &mut s);
        let kernel = Tensor::rand_uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut s);
        let w = Tensor::rand_uniform(&[3, 4, 5], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.conv2d_lite(vs[0], vs[1])?;
                let probe = t.leaf(w.clone());
                let p = t.mul(y, probe)?;
                Ok(t.sum_all(p))
            },
            &[map, kernel],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }

    #[test]
    fn bilinear_gradient_in_map_and_coords() {
        let mut s = Stream::new(13, StreamId::Instances);
        let map = Tensor::rand_uniform(&[3, 6, 7], -1.0, 1.0, &mut s);
        // Keep coords away from the integer lattice so the kink never sits
        // inside the finite-difference window.
        let uv = Tensor::new(&[2], vec![2.37, 3.61]).unwrap();
        let w = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.bilinear_sample(vs[0], vs[1])?;
                let probe = t.leaf(w.clone());
                let p = t.mul(y, probe)?;
                Ok(t.sum_all(p))
            },
            &[map, uv],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut s = Stream::new(21, StreamId::Instances);
        let x = Tensor::rand_uniform(&[3, 5], -2.0, 2.0, &mut s);
        let gamma = Tensor::rand_uniform(&[5], 0.5, 1.5, &mut s);
        let beta = Tensor::rand_uniform(&[5], -0.5, 0.5, &mut s);
        let w = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut s);
        let rep = grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let y = t.layer_norm_rows(vs[0], vs[1], vs[2], 1e-6)?;
                let probe = t.leaf(w.clone());
                let p = t.mul(y, probe)?;
                Ok(t.sum_all(p))
            },
            &[x, gamma, beta],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let x = Tensor::new(&[1], vec![f64::NAN]).unwrap();
        let r = grad_check(&|t: &mut Tape, vs: &[Var]| Ok(t.sum_all(vs[0])), &[x], 1e-6);
        assert!(matches!(r, Err(CoreError::NonFinite { .. })));
    }
}
