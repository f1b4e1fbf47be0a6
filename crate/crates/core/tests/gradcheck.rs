mod common;

use common::{max_grad_error, op_cases, FD_REL_TOL};

const INSTANCES: u64 = 20;

#[test]
fn every_op_matches_central_differences() {
    for case in op_cases() {
        let mut worst: f64 = 0.0;
        for i in 0..INSTANCES {
            let mut r = common::rng(1000 + i);
            let inputs = (case.inputs)(&mut r);
            worst = worst.max(max_grad_error(case.op.as_ref(), &inputs, i, case.analytic_scale));
        }
        assert!(worst < FD_REL_TOL, "{}: max relative error {worst:e}", case.name);
    }
}

#[test]
fn grad_reverse_scales_by_negative_coefficient() {
    use menan::numerics::{Graph, Tensor};
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let r = g.grad_reverse(x, 0.5).unwrap();
    assert_eq!(g.value(r).data(), &[1.0, -2.0, 0.5]);
    let s = g.sum(r).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[-0.5, -0.5, -0.5]);
}
