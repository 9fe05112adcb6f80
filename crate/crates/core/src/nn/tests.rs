use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Small graph touching every layer kind the backbones use.
fn mixed_architecture() -> Architecture {
    let mut b = ArchBuilder::new();
    b.begin_block();
    let stem = Layer::Sequential(vec![
        b.conv("stem", 3, 4, (3, 3), 2, Padding::Same, 1, true),
        b.batch_norm("stem_bn", 4, true, 1e-3),
        Layer::Relu6,
    ]);
    b.begin_block();
    let residual = Layer::Residual {
        body: Box::new(Layer::Sequential(vec![
            b.conv("dw", 4, 4, (3, 3), 1, Padding::Same, 4, false),
            b.batch_norm("dw_bn", 4, false, 1e-3),
            Layer::Relu,
            b.conv("pw", 4, 4, (1, 1), 1, Padding::Valid, 1, false),
        ])),
        shortcut: None,
    };
    let projected = Layer::Residual {
        body: Box::new(b.conv("body", 4, 6, (3, 1), 1, Padding::Same, 1, true)),
        shortcut: Some(Box::new(b.conv("proj", 4, 6, (1, 1), 1, Padding::Valid, 1, false))),
    };
    b.begin_block();
    let mixed = Layer::Concat(vec![
        b.conv("b1", 6, 2, (1, 1), 1, Padding::Valid, 1, true),
        Layer::Sequential(vec![Layer::AvgPool(Window::square(3, 1, Padding::Same)), b.conv("b2", 6, 3, (1, 1), 1, Padding::Valid, 1, true)]),
        Layer::MaxPool(Window::square(3, 1, Padding::Same)),
    ]);
    let reduce = Layer::MaxPool(Window::square(2, 2, Padding::Valid));
    b.begin_head();
    let head_conv = b.conv("tail", 11, 5, (2, 2), 1, Padding::Explicit { h: 1, w: 1 }, 1, true);
    let head = b.dense("fc", 5, 2);
    let root = Layer::Sequential(vec![
        stem,
        residual,
        projected,
        mixed,
        reduce,
        head_conv,
        Layer::Relu,
        Layer::GlobalAvgPool,
        head,
    ]);
    b.finish(root, Shape::new(3, 9, 8))
}

fn random_input(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn randomize_state(net: &mut Network, rng: &mut ChaCha8Rng) {
    let specs = net.architecture().params.clone();
    for (id, spec) in specs.iter().enumerate() {
        let v = net.value_mut(id);
        match spec.kind {
            ParamKind::RunningVar => v.iter_mut().for_each(|x| *x = rng.gen_range(0.5..2.0)),
            ParamKind::RunningMean | ParamKind::Bias | ParamKind::Shift | ParamKind::Scale => {
                v.iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3))
            }
            ParamKind::Weight => {}
        }
    }
}

#[test]
fn output_shape_matches_forward() {
    let arch = mixed_architecture();
    let net = Network::initialized(arch.clone(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_input(arch.input, &mut rng);
    assert_eq!(net.logits(&x).shape(), arch.output_shape());
    assert_eq!(arch.output_shape(), Shape::vector(2));
}

#[test]
fn every_parameter_gradient_matches_central_differences() {
    let arch = mixed_architecture();
    let mut net = Network::initialized(arch.clone(), 11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    randomize_state(&mut net, &mut rng);
    let x = random_input(arch.input, &mut rng);
    let target = 1;
    let mut grads = net.zero_gradients();
    net.accumulate(&x, target, &mut grads);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (id, spec) in arch.params.iter().enumerate() {
        if !spec.kind.is_learnable() {
            assert!(grads.slot(id).is_none());
            continue;
        }
        let analytic = grads.slot(id).unwrap().to_vec();
        for i in 0..spec.numel() {
            let orig = net.value(id)[i];
            net.value_mut(id)[i] = orig + h;
            let up = net.loss(&x, target);
            net.value_mut(id)[i] = orig - h;
            let down = net.loss(&x, target);
            net.value_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / (numeric.abs() + analytic[i].abs()).max(1e-6);
            worst = worst.max(err);
            assert!(err < 1e-4, "{} [{i}]: analytic {} numeric {numeric}", spec.name, analytic[i]);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn frozen_parameters_receive_no_gradient_slot() {
    let mut net = Network::initialized(mixed_architecture(), 1);
    net.set_trainable(|g| g == ParamGroup::Head);
    let grads = net.zero_gradients();
    for (id, spec) in net.architecture().params.iter().enumerate() {
        assert_eq!(grads.slot(id).is_some(), spec.group == ParamGroup::Head && spec.kind.is_learnable());
    }
}

#[test]
fn softmax_is_normalised_and_stable() {
    let p = softmax(&[1000.0, -1000.0]);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(p[0], 1.0);
    assert!((cross_entropy(&[0.0, 0.0], 0) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn sgd_step_with_zero_learning_rate_is_bit_exact() {
    let arch = mixed_architecture();
    let mut net = Network::initialized(arch.clone(), 2);
    let before = net.values().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_input(arch.input, &mut rng);
    let mut g = net.zero_gradients();
    net.accumulate(&x, 0, &mut g);
    for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
        let mut opt = Optimizer::new(kind, 0.0, 0.9, 0.0);
        opt.step(&mut net, &g);
        opt.step(&mut net, &g);
        for (a, b) in before.iter().zip(net.values()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn optimizer_descends_on_a_single_sample() {
    let arch = mixed_architecture();
    let mut net = Network::initialized(arch.clone(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_input(arch.input, &mut rng);
    let start = net.loss(&x, 0);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, 0.0, 0.0);
    for _ in 0..30 {
        let mut g = net.zero_gradients();
        net.accumulate(&x, 0, &mut g);
        opt.step(&mut net, &g);
    }
    assert!(net.loss(&x, 0) < start * 0.5);
}
