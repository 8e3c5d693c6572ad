use diffcore::{adam_step, AdamConfig, AdamState, Error, Parameter, Tensor};

fn param(v: f64, trainable: bool, grad: Option<f64>) -> Parameter<f64> {
    let mut p = Parameter::new("w", Tensor::full(vec![1], v), trainable);
    p.grad = grad.map(|g| Tensor::full(vec![1], g));
    p
}

#[test]
fn zero_gradient_leaves_parameter_unchanged() {
    let mut ps = vec![param(1.5, true, Some(0.0))];
    let mut st = AdamState::new(&ps);
    adam_step(&mut ps, &mut st, &AdamConfig::with_lr(0.1)).unwrap();
    assert_eq!(ps[0].tensor.item(), 1.5);
}

#[test]
fn first_step_moves_by_learning_rate() {
    let mut ps = vec![param(0.0, true, Some(1.0))];
    let mut st = AdamState::new(&ps);
    adam_step(&mut ps, &mut st, &AdamConfig::with_lr(0.1)).unwrap();
    // m_hat = v_hat = 1 after bias correction: delta = -lr / (1 + eps)
    let expect = -0.1 / (1.0 + 1e-8);
    assert!((ps[0].tensor.item() - expect).abs() < 1e-15);
}

#[test]
fn frozen_parameter_is_bit_identical() {
    let mut ps = vec![param(0.25, false, Some(3.0)), param(0.25, true, Some(3.0))];
    let mut st = AdamState::new(&ps);
    for _ in 0..10 {
        adam_step(&mut ps, &mut st, &AdamConfig::with_lr(0.1)).unwrap();
    }
    assert_eq!(ps[0].tensor.item().to_bits(), 0.25f64.to_bits());
    assert_ne!(ps[1].tensor.item(), 0.25);
}

#[test]
fn shape_mismatch_is_contract_error() {
    let mut ps = vec![param(0.0, true, None)];
    ps[0].grad = Some(Tensor::zeros(vec![2]));
    let mut st = AdamState::new(&ps);
    let err = adam_step(&mut ps, &mut st, &AdamConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}
