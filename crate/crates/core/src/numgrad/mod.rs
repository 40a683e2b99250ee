//! Differentiable math kernel: tensors, a reverse-mode tape, and a
//! finite-difference oracle for checking it.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckConfig, GradReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
#[allow(unused_imports)]
pub(crate) use tensor::{dot, norm};


/// Epsilon used by every layer norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Raw cosine similarity of two vectors, outside any graph.
pub fn cos_sim_raw(a: &[f64], b: &[f64]) -> crate::Result<f64> {
    cos_values(a, b, false)
}

/// `max(0, cos_sim_raw(a, b))`.
pub fn cos_sim_clamped(a: &[f64], b: &[f64]) -> crate::Result<f64> {
    cos_values(a, b, true)
}

fn cos_values(a: &[f64], b: &[f64], clamp: bool) -> crate::Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        let op = if clamp { "cos_sim_clamped" } else { "cos_sim_raw" };
        return Err(crate::Error::shape(op, format!("[{}] vs [{}]", a.len(), b.len())));
    }
    let mut g = Graph::new();
    let va = g.constant(Tensor::vector(a.to_vec()));
    let vb = g.constant(Tensor::vector(b.to_vec()));
    let c = g.cos_rows(va, vb, clamp)?;
    Ok(g.value(c).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cos_raw_examples() {
        assert!(approx(cos_sim_raw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0, 1e-15));
        assert_eq!(cos_sim_raw(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cos_sim_raw(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
    }

    #[test]
    fn cos_clamped_examples() {
        assert!(approx(cos_sim_clamped(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0, 1e-15));
        assert_eq!(cos_sim_clamped(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
        let c = cos_sim_clamped(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!(approx(c, std::f64::consts::FRAC_1_SQRT_2, 1e-15));
    }

    #[test]
    fn cos_zero_norm_names_argument() {
        let err = cos_sim_raw(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err().to_string();
        assert!(err.contains("`a`"), "{err}");
        let err = cos_sim_raw(&[1.0, 0.0], &[0.0, 0.0]).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
        assert!(cos_sim_raw(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!(approx(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero_before_affine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.25));
        let gain = g.constant(Tensor::full(&[5], 1.0));
        let bias = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_is_scale_free() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 4], vec![3.0, -4.0, 0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 4], vec![0.03, -0.04, 0.0, 0.0]).unwrap());
        let ya = g.rms_norm(a, 1e-12).unwrap();
        let yb = g.rms_norm(b, 1e-12).unwrap();
        let rms = (25.0f64 / 4.0).sqrt();
        assert!(approx(g.value(ya).data()[0], 3.0 / rms, 1e-12));
        for (x, y) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!(approx(*x, *y, 1e-8));
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::randn(&[7, 6, 3], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let kv = g.constant(k);
        let y = g.conv2d(x, kv, 1, 0).unwrap();
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_err());
        let d = g.constant(Tensor::zeros(&[2]));
        assert!(g.layer_norm(a, d, d, 1e-5).is_err());
    }

    #[test]
    fn clamp_gradient_vanishes_outside_and_on_boundary() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 0.5, 1.0, 2.0]));
        let y = g.clamp(x, 0.0, 1.0).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let f = |g: &mut Graph, x: Var| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        };
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let x = g.param(p.clone());
        let y = f(&mut g, x).unwrap();
        let grad = g.backward(y).unwrap().get(x).unwrap().clone();
        assert_eq!(grad.data(), &[2.0, 4.0, 6.0]);
        let report = finite_diff_check("sum_sq", f, &p, &GradCheckConfig::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_abs_error < 1e-6, "{report:?}");
    }

    #[test]
    fn clamped_cos_gradient_is_zero_when_clamped() {
        // raw cosine -0.5
        let b = Tensor::vector(vec![1.0, 0.0]);
        let a = Tensor::vector(vec![-0.5, 0.75f64.sqrt()]);
        let mut g = Graph::new();
        let va = g.param(a);
        let vb = g.constant(b);
        let raw = g.cos_sim(va, vb).unwrap();
        assert!(approx(g.value(raw).item(), -0.5, 1e-15));
        let c = g.cos_sim_clamped(va, vb).unwrap();
        let grads = g.backward(c).unwrap();
        assert!(grads.get(va).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
            let b = Tensor::randn(&[7, 4], 1.0, &mut rng);
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a), g.constant(b));
            let m = g.matmul(va, vb).unwrap();
            let s = g.softmax(m).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    proptest! {
        #[test]
        fn cos_is_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let c = cos_sim_raw(&a, &b).unwrap();
            prop_assert!((c - cos_sim_raw(&b, &a).unwrap()).abs() <= 1e-12);
            let sa: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * beta).collect();
            prop_assert!((c - cos_sim_raw(&sa, &sb).unwrap()).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c) || (c.abs() - 1.0).abs() < 1e-15);
        }

        #[test]
        fn clamped_is_exactly_max_zero_raw(
            a in prop::collection::vec(-10.0f64..10.0, 5),
            b in prop::collection::vec(-10.0f64..10.0, 5),
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let raw = cos_sim_raw(&a, &b).unwrap();
            prop_assert_eq!(cos_sim_clamped(&a, &b).unwrap(), raw.max(0.0));
        }
    }
}
