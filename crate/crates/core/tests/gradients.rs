//! Central finite-difference validation of every analytic backward pass:
//! the attention fusion block on its own, the conv/batchnorm primitives, and
//! the total training loss through the whole tiny model.

mod common;

use common::{ha_fd_worst_rel, model_loss_fd, rel_err, H_STEP};
use ndarray::{Array1, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rgbt_detect::nn::{BatchNorm, Conv2d};
use rgbt_detect::rng::stream_rng;

fn rand_map(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_fn((b, c, h, w), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn attention_fusion_gradients_match_finite_differences() {
    let worst = ha_fd_worst_rel();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = stream_rng(22, "fd-conv", 0);
    let mut conv = Conv2d {
        weight: Array4::from_shape_fn((2, 3, 3, 3), |_| rng.gen_range(-0.5..0.5)),
        bias: Some(Array1::from_shape_fn(2, |_| rng.gen_range(-0.2..0.2))),
        stride: 2,
        pad: 1,
    };
    let x = rand_map(&mut rng, 2, 3, 5, 4);
    let r = {
        let (y, _) = conv.forward(&x).unwrap();
        Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0))
    };
    let loss = |c: &Conv2d, x: &Array4<f64>| (&c.forward(x).unwrap().0 * &r).sum();

    let (_, cache) = conv.forward(&x).unwrap();
    let (dx, dw, db) = conv.backward(&cache, &r);
    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[idx] += H_STEP;
        minus.as_slice_mut().unwrap()[idx] -= H_STEP;
        let numeric = (loss(&conv, &plus) - loss(&conv, &minus)) / (2.0 * H_STEP);
        worst = worst.max(rel_err(dx.as_slice().unwrap()[idx], numeric));
    }
    for idx in 0..conv.weight.len() {
        let mut probe = |delta: f64| {
            conv.weight.as_slice_mut().unwrap()[idx] += delta;
            let l = loss(&conv, &x);
            conv.weight.as_slice_mut().unwrap()[idx] -= delta;
            l
        };
        let numeric = (probe(H_STEP) - probe(-H_STEP)) / (2.0 * H_STEP);
        worst = worst.max(rel_err(dw.as_slice().unwrap()[idx], numeric));
    }
    let db = db.expect("bias gradient");
    for idx in 0..db.len() {
        let mut probe = |delta: f64| {
            conv.bias.as_mut().unwrap()[idx] += delta;
            let l = loss(&conv, &x);
            conv.bias.as_mut().unwrap()[idx] -= delta;
            l
        };
        let numeric = (probe(H_STEP) - probe(-H_STEP)) / (2.0 * H_STEP);
        worst = worst.max(rel_err(db[idx], numeric));
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = stream_rng(23, "fd-bn", 0);
    let mut bn = BatchNorm::new(3);
    bn.gamma = Array1::from_shape_fn(3, |_| rng.gen_range(0.5..1.5));
    bn.beta = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
    let x = rand_map(&mut rng, 2, 3, 4, 3);
    let r = rand_map(&mut rng, 2, 3, 4, 3);
    // Train-mode loss; batch statistics are recomputed inside every probe.
    let loss = |bn: &BatchNorm, x: &Array4<f64>| {
        let mut b = bn.clone();
        (&b.forward_train(x).unwrap().0 * &r).sum()
    };
    let (_, cache) = bn.clone().forward_train(&x).unwrap();
    let (dx, dgamma, dbeta) = bn.backward(&cache, &r);
    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[idx] += H_STEP;
        minus.as_slice_mut().unwrap()[idx] -= H_STEP;
        let numeric = (loss(&bn, &plus) - loss(&bn, &minus)) / (2.0 * H_STEP);
        worst = worst.max(rel_err(dx.as_slice().unwrap()[idx], numeric));
    }
    for (grad, field) in [(&dgamma, 0usize), (&dbeta, 1)] {
        for idx in 0..grad.len() {
            let mut probe = |delta: f64| {
                match field {
                    0 => bn.gamma[idx] += delta,
                    _ => bn.beta[idx] += delta,
                }
                let l = loss(&bn, &x);
                match field {
                    0 => bn.gamma[idx] -= delta,
                    _ => bn.beta[idx] -= delta,
                }
                l
            };
            let numeric = (probe(H_STEP) - probe(-H_STEP)) / (2.0 * H_STEP);
            worst = worst.max(rel_err(grad[idx], numeric));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn total_loss_gradients_match_finite_differences_on_tiny_model() {
    let start = std::time::Instant::now();
    let (worst, checked) = model_loss_fd();
    let elapsed = start.elapsed();
    assert!(checked > 400, "expected to sweep every parameter, got {checked}");
    assert!(worst < 1e-3, "worst relative error {worst}");
    assert!(elapsed.as_secs() < 60, "gradient check took {elapsed:?}");
}
