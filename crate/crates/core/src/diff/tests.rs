use super::*;
use crate::error::Error;

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.data(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn derivative_of_square() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let gr = g.backward(y).unwrap();
    assert_eq!(gr.get(x).unwrap(), &[6.0]);
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_vec(vec![1.0, -2.0, 5.0]));
    let y = g.sum(x);
    let gr = g.backward(y).unwrap();
    assert_eq!(gr.get(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn constants_have_no_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
    let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let y = g.mul(x, c).unwrap();
    let y = g.sum(y);
    let gr = g.backward(y).unwrap();
    assert!(gr.get(c).is_none());
    assert_eq!(gr.get(x).unwrap(), &[3.0, 4.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(1.0));
    let y = g.exp(x);
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Backward(_))));
    g.reset_backward();
    assert!(g.backward(y).is_ok());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Backward(_))));
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    let e = g.add(a, b).unwrap_err().to_string();
    assert!(e.contains("add") && e.contains("[2, 3]"), "{e}");
    let e = g.matmul(a, a).unwrap_err().to_string();
    assert!(e.contains("matmul"), "{e}");
}

#[test]
fn trailing_broadcast() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::from_vec(vec![10.0, 20.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.data(c), &[11.0, 22.0, 13.0, 24.0]);
    let s = g.scalar(2.0);
    let d = g.mul(s, a).unwrap();
    assert_eq!(g.data(d), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn forward_values_match_scalar_formulas() {
    let xs = [-1.3, -0.2, 0.0, 0.4, 2.2];
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(xs.to_vec()));
    type Check = (Var, fn(f64) -> f64);
    let checks: Vec<Check> = vec![
        (g.relu(x), |v| v.max(0.0)),
        (g.sigmoid(x), |v| 1.0 / (1.0 + (-v).exp())),
        (g.sin(x), f64::sin),
        (g.cos(x), f64::cos),
        (g.abs(x), f64::abs),
        (g.exp(x), f64::exp),
        (g.clamp(x, -0.5, 0.5), |v| v.clamp(-0.5, 0.5)),
    ];
    for (v, f) in checks {
        for (o, &i) in g.data(v).iter().zip(&xs) {
            assert!((o - f(i)).abs() <= 1e-12 * f(i).abs().max(1.0));
        }
    }
    let ln = g.layer_norm(x, 0.0).unwrap();
    let m = xs.iter().sum::<f64>() / 5.0;
    let sd = (xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 5.0).sqrt();
    for (o, &i) in g.data(ln).iter().zip(&xs) {
        assert!((o - (i - m) / sd).abs() < 1e-12);
    }
}

#[test]
fn trilinear_center_and_midpoint() {
    let mut g = Graph::new();
    // 1 channel, 2×1×1 volume with values 2 and 6
    let vol = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![2.0, 6.0]).unwrap());
    let pts = g.constant(Tensor::new(vec![3, 3], vec![0.25, 0.5, 0.5, 0.5, 0.5, 0.5, 0.75, 0.5, 0.5]).unwrap());
    let s = g.trilinear_sample(vol, pts).unwrap();
    assert_eq!(g.data(s), &[2.0, 4.0, 6.0]);
    // out of range clamps to the border value
    let far = g.constant(Tensor::new(vec![1, 3], vec![1.7, 0.5, 0.5]).unwrap());
    let s = g.trilinear_sample(vol, far).unwrap();
    assert_eq!(g.data(s), &[6.0]);
}

#[test]
fn chained_relu_matmul_gradient() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let a = normal(&[4, 5], 1.0, &mut rng);
    let b = normal(&[5, 3], 1.0, &mut rng);
    let rep = grad_check(&[a, b], 1e-6, |g, x| {
        let m = g.matmul(x[0], x[1])?;
        let r = g.relu(m);
        random_projection(g, r, 5)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn matmul_gradient_tight() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
    let a = normal(&[4, 5], 1.0, &mut rng);
    let b = normal(&[5, 3], 1.0, &mut rng);
    let rep = grad_check(&[a, b], 1e-6, |g, x| {
        let m = g.matmul(x[0], x[1])?;
        random_projection(g, m, 6)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn linear_function_check_is_exact_to_roundoff() {
    let rep = grad_check(&[Tensor::from_vec(vec![0.3, -0.7, 1.1])], 1e-6, |g, x| {
        let c = g.constant(Tensor::from_vec(vec![2.0, -1.0, 0.5]));
        let m = g.mul(x[0], c)?;
        Ok(g.sum(m))
    })
    .unwrap();
    assert!(rep.max_abs_err < 1e-9, "{rep:?}");
}

#[test]
fn every_primitive_passes_grad_check() {
    for (name, rep) in audit::primitive_audit(2024, 3).unwrap() {
        assert!(rep.max_rel_err < 1e-5, "{name}: {rep:?}");
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let a = normal(&[6, 7], 1.0, &mut rng);
        let b = normal(&[7, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.constant(a);
        let b = g.constant(b);
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m, 1).unwrap();
        g.data(s).to_vec()
    };
    assert_eq!(run(), run());
}
