//! Reverse-mode gradients against central finite differences.

use dsd_core::autodiff::{GradTape, Var};
use dsd_core::network::{
    softmax_cross_entropy, Activation, InitScheme, InitSpec, LayerSpec, Mode, Network,
};
use dsd_core::rng::rng_for;
use dsd_core::tensor::Tensor;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks d f / d inputs[k] for every k by central differences.
fn check(inputs: &[Tensor], f: impl Fn(&mut GradTape, &[Var]) -> Var) {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).unwrap();
        assert_eq!(g.shape(), x.shape());
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let e = rel_err(g.data()[i], numeric);
            assert!(
                e < TOL,
                "input {k} index {i}: analytic {} numeric {numeric} rel {e}",
                g.data()[i]
            );
        }
    }
}

#[test]
fn matmul_and_bias() {
    let inputs = [random(&[4, 3], 1), random(&[3, 5], 2), random(&[5], 3)];
    check(&inputs, |t, v| {
        let z = t.matmul(v[0], v[1]).unwrap();
        let z = t.add_bias(z, v[2]).unwrap();
        let sq = t.mul(z, z).unwrap();
        t.sum(sq)
    });
}

#[test]
fn smooth_activations() {
    let inputs = [random(&[3, 4], 4), random(&[3, 4], 5)];
    check(&inputs, |t, v| {
        let a = t.tanh(v[0]).unwrap();
        let b = t.sigmoid(v[1]).unwrap();
        let d = t.sub(a, b).unwrap();
        let p = t.mul(d, a).unwrap();
        let s = t.add(p, b).unwrap();
        t.sum(s)
    });
}

#[test]
fn relu_away_from_the_kink() {
    // Entries bounded away from 0 so the difference quotient never straddles it.
    let x = random(&[5, 5], 6).map(|v| if v.abs() < 0.05 { 0.5 } else { v });
    check(&[x], |t, v| {
        let r = t.relu(v[0]).unwrap();
        let sq = t.mul(r, r).unwrap();
        t.sum(sq)
    });
}

#[test]
fn scale_by_constant_factors() {
    let factors = random(&[3, 3], 7);
    check(&[random(&[3, 3], 8)], |t, v| {
        let s = t.scale_by(v[0], factors.clone()).unwrap();
        let sq = t.mul(s, v[0]).unwrap();
        t.sum(sq)
    });
}

#[test]
fn softmax_cross_entropy_logits() {
    let labels = [0, 2, 1, 2, 0, 1];
    check(&[random(&[6, 3], 9).map(|v| 3.0 * v)], |t, v| {
        t.softmax_cross_entropy(v[0], &labels).unwrap()
    });
}

#[test]
fn network_gradients_including_dropout() {
    let specs = vec![
        LayerSpec::dense("fc1", 4, 6, Activation::Tanh),
        LayerSpec::dropout("drop", 0.3),
        LayerSpec::dense("fc2", 6, 5, Activation::Sigmoid),
        LayerSpec::dense("fc3", 5, 3, Activation::None),
    ];
    let init = InitSpec {
        scheme: InitScheme::Gaussian,
        scale: 0.8,
        seed: 11,
    };
    let net = Network::build(&specs, &init).unwrap();
    let x = random(&[7, 4], 12);
    let labels = [0, 1, 2, 2, 1, 0, 1];
    // A fixed dropout seed makes the mask part of a deterministic function.
    let mode = Mode::Train { dropout_seed: 99 };
    let (_, grads) = net.loss_and_grads(&x, &labels, mode).unwrap();
    let loss_at =
        |n: &Network| softmax_cross_entropy(&n.forward(&x, mode).unwrap(), &labels).unwrap();
    for (li, g) in grads.iter().enumerate() {
        for i in 0..g.weight.len() {
            let mut plus = net.clone();
            plus.dense_mut().nth(li).unwrap().weight.data_mut()[i] += H;
            let mut minus = net.clone();
            minus.dense_mut().nth(li).unwrap().weight.data_mut()[i] -= H;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
            assert!(
                rel_err(g.weight.data()[i], numeric) < TOL,
                "layer {li} weight {i}"
            );
        }
        for i in 0..g.bias.len() {
            let mut plus = net.clone();
            plus.dense_mut().nth(li).unwrap().bias.data_mut()[i] += H;
            let mut minus = net.clone();
            minus.dense_mut().nth(li).unwrap().bias.data_mut()[i] -= H;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
            assert!(
                rel_err(g.bias.data()[i], numeric) < TOL,
                "layer {li} bias {i}"
            );
        }
    }
}
