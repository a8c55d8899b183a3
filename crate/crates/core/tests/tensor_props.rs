use effectppl::tensor::{broadcast_shapes, Tensor, TensorError};
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(|(m, n)| {
        prop::collection::vec(-5.0f64..5.0, m * n).prop_map(move |d| Tensor::new(d, &[m, n]).unwrap())
    })
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (a, b) = (a.to_vec(), b.to_vec());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

proptest! {
    #[test]
    fn add_commutes_under_broadcast(a in matrix(4), row in prop::collection::vec(-3.0f64..3.0, 1..5)) {
        let n = a.shape()[1];
        let row = Tensor::from_slice(&row.iter().cycle().take(n).copied().collect::<Vec<_>>());
        prop_assert_eq!(a.add(&row).unwrap().to_vec(), row.add(&a).unwrap().to_vec());
    }

    #[test]
    fn matmul_matches_triple_loop(a in matrix(5), seed in 0u64..1000) {
        let k = a.shape()[1];
        let n = 1 + (seed % 4) as usize;
        let b = Tensor::new((0..k * n).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect(), &[k, n]).unwrap();
        let got = a.matmul(&b).unwrap().to_vec();
        for (g, w) in got.iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_round_trip_keeps_data(a in matrix(5)) {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let back = a.reshape(&[m * n]).unwrap().reshape(&[m, n]).unwrap();
        prop_assert_eq!(back.to_vec(), a.to_vec());
        prop_assert_eq!(back.shape(), a.shape());
    }

    #[test]
    fn double_transpose_is_identity(a in matrix(5)) {
        prop_assert_eq!(a.transpose().unwrap().transpose().unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn axis_sums_add_up(a in matrix(5)) {
        let total = a.sum().item();
        for axis in 0..2 {
            let s = a.sum_axis(axis).unwrap().sum().item();
            prop_assert!((s - total).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_in_unit_interval_softplus_above_relu(x in -700.0f64..700.0) {
        let t = Tensor::scalar(x);
        let s = t.sigmoid().item();
        prop_assert!((0.0..=1.0).contains(&s));
        let sp = t.softplus().item();
        prop_assert!(sp >= x.max(0.0) && sp.is_finite());
    }

    #[test]
    fn broadcast_shape_is_symmetric(a in prop::collection::vec(1usize..4, 0..4), b in prop::collection::vec(1usize..4, 0..4)) {
        prop_assert_eq!(broadcast_shapes(&a, &b), broadcast_shapes(&b, &a));
    }

    #[test]
    fn gradient_of_sum_is_ones(a in matrix(4)) {
        let leaf = a.requires_grad_leaf();
        leaf.sum().backward().unwrap();
        prop_assert!(leaf.grad().unwrap().iter().all(|g| *g == 1.0));
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let err = Tensor::zeros(&[2, 3]).add(&Tensor::zeros(&[4])).unwrap_err();
    let TensorError::ShapeMismatch { lhs, rhs, .. } = err else { panic!("{err:?}") };
    assert_eq!((lhs, rhs), (vec![2, 3], vec![4]));
    assert!(Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).is_err());
}

#[test]
fn domain_errors() {
    assert!(matches!(Tensor::from_slice(&[1.0, -1.0]).log(), Err(TensorError::Domain { index: 1, .. })));
    assert!(Tensor::from_slice(&[-0.5]).sqrt().is_err());
    assert!(matches!(
        Tensor::ones(&[2]).div(&Tensor::from_slice(&[1.0, 0.0])),
        Err(TensorError::DivisionByZero { index: 1 })
    ));
}

#[test]
fn backward_requires_scalar_root() {
    let x = Tensor::ones(&[3]).requires_grad_leaf();
    assert!(matches!(x.exp().backward(), Err(TensorError::NonScalarRoot { .. })));
}

#[test]
fn shared_subexpression_accumulates() {
    // y = x*x + x, dy/dx = 2x + 1
    let x = Tensor::scalar(3.0).requires_grad_leaf();
    x.mul(&x).unwrap().add(&x).unwrap().backward().unwrap();
    assert_eq!(x.grad().unwrap(), [7.0]);
}
