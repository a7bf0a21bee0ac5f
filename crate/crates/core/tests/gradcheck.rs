mod common;

use bdfa::tensor::{Tape, Tensor};
use common::gradcheck::{self, max_relative_error, op_cases, FD_TOL};

#[test]
fn every_op_matches_central_differences() {
    let mut worst_by_op = std::collections::BTreeMap::new();
    for seed in 0..20 {
        for case in op_cases(seed) {
            let err = max_relative_error(case.build.as_ref(), &case.inputs);
            let entry = worst_by_op.entry(case.op).or_insert(0.0f64);
            *entry = entry.max(err);
            assert!(err < FD_TOL, "{} seed {seed}: relative error {err:e}", case.op);
        }
    }
    assert!(worst_by_op.len() >= 15, "{worst_by_op:?}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = gradcheck::rng(7);
    let x = gradcheck::normal_tensor(&mut r, &[2, 2, 4, 4], true);
    let w = gradcheck::normal_tensor(&mut r, &[3, 2, 3, 3], true);
    let (a, b) = (0.7, -1.3);

    let grads = |coef_1: f64, coef_2: f64| {
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(x.clone()).unwrap();
        let wv = t.leaf(w.clone()).unwrap();
        let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
        let l1 = gradcheck::project(&mut t, y, 1).unwrap();
        let sq = t.square(y).unwrap();
        let l2 = t.mean(sq).unwrap();
        let s1 = t.scale(l1, coef_1).unwrap();
        let s2 = t.scale(l2, coef_2).unwrap();
        let l = t.add(s1, s2).unwrap();
        t.backward(l).unwrap();
        (t.grad(xv).unwrap().to_vec(), t.grad(wv).unwrap().to_vec())
    };
    let (gx1, gw1) = grads(1.0, 0.0);
    let (gx2, gw2) = grads(0.0, 1.0);
    let (gx, gw) = grads(a, b);
    for (combined, (p, q)) in gx.iter().chain(&gw).zip(gx1.iter().chain(&gw1).zip(gx2.iter().chain(&gw2))) {
        assert!((combined - (a * p + b * q)).abs() < 1e-10);
    }
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let run = || {
        let mut r = gradcheck::rng(3);
        let x = gradcheck::normal_tensor(&mut r, &[4, 3, 6, 6], true).cast::<f32>();
        let w = gradcheck::normal_tensor(&mut r, &[5, 3, 3, 3], true).cast::<f32>();
        let mut t = Tape::<f32>::new();
        let xv = t.leaf(x).unwrap();
        let wv = t.leaf(w).unwrap();
        let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = t.relu(y).unwrap();
        let y = t.maxpool2d(y, 2, 2).unwrap();
        let y = t.flatten(y).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        (t.value(y).clone(), t.grad(xv).unwrap().to_vec(), t.grad(wv).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.0.data()), bits(b.0.data()));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

#[test]
fn constants_are_never_tracked() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().requires_grad(true)).unwrap();
    let s = t.sum(c).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
}
