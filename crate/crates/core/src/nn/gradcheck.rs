//! Finite-difference checks of every layer's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

struct Fixture {
    ps: ParamStore,
    rng: ChaCha8Rng,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        Self {
            ps: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn param(&mut self, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        let v = (0..n).map(|_| self.rng.gen_range(-0.5..0.5)).collect();
        let name = format!("p{}", self.ps.len());
        self.ps.add(name, shape, v, false)
    }

    fn conv(&mut self, kh: usize, kw: usize, c_in: usize, c_out: usize, stride: usize, padding: Padding) -> Layer {
        Layer::Conv(Conv2d {
            kh,
            kw,
            c_in,
            c_out,
            stride,
            padding,
            weight: self.param(vec![kh, kw, c_in, c_out]),
            bias: Some(self.param(vec![c_out])),
        })
    }

    fn tensor(&mut self, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.rng.gen_range(-1.0..1.0)).collect())
    }
}

fn projected_loss(layer: &Layer, ps: &ParamStore, x: &Tensor, r: &[f32]) -> f64 {
    let (y, _) = layer.forward(ps, x.clone(), false);
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt())
        .max(1e-12);
    diff / scale
}

fn check(layer: Layer, mut fx: Fixture, input: [usize; 4]) {
    let x = fx.tensor(input);
    let out_shape = layer.output_shape([input[1], input[2], input[3]]);
    let r: Vec<f32> = (0..input[0] * out_shape.iter().product::<usize>())
        .map(|_| fx.rng.gen_range(-1.0..1.0))
        .collect();
    let ps = fx.ps;

    let (y, cache) = layer.forward(&ps, x.clone(), true);
    assert_eq!(y.sample_shape(), (out_shape[0], out_shape[1], out_shape[2]));
    let mut grads = Grads::for_store(&ps);
    let dx = layer
        .backward(&ps, cache, Tensor::new(y.shape(), r.clone()), &mut grads, true)
        .expect("input gradient");

    let eps = 1e-2f32;
    let numeric_dx: Vec<f64> = (0..x.data().len())
        .map(|i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            (projected_loss(&layer, &ps, &xp, &r) - projected_loss(&layer, &ps, &xm, &r)) / (2.0 * eps as f64)
        })
        .collect();
    let analytic_dx: Vec<f64> = dx.data().iter().map(|&v| v as f64).collect();
    let e = rel_err(&analytic_dx, &numeric_dx);
    assert!(e < 2e-3, "input gradient relative error {e}");

    for (id, p) in ps.iter() {
        let mut numeric = Vec::with_capacity(p.len());
        for i in 0..p.len() {
            let mut plus = ps.clone();
            plus.get_mut(id).value[i] += eps;
            let mut minus = ps.clone();
            minus.get_mut(id).value[i] -= eps;
            numeric.push(
                (projected_loss(&layer, &plus, &x, &r) - projected_loss(&layer, &minus, &x, &r)) / (2.0 * eps as f64),
            );
        }
        let analytic: Vec<f64> = grads.get(id).unwrap().iter().map(|&v| v as f64).collect();
        let e = rel_err(&analytic, &numeric);
        assert!(e < 2e-3, "parameter {} relative error {e}", p.name);
    }
}

#[test]
fn conv_same_stride1() {
    let mut fx = Fixture::new(1);
    let l = fx.conv(3, 3, 2, 3, 1, Padding::Same);
    check(l, fx, [2, 5, 4, 2]);
}

#[test]
fn conv_valid_stride2() {
    let mut fx = Fixture::new(2);
    let l = fx.conv(3, 3, 2, 2, 2, Padding::Valid);
    check(l, fx, [2, 7, 6, 2]);
}

#[test]
fn conv_strided_same_and_factorized() {
    let mut fx = Fixture::new(3);
    let l = Layer::Sequential(vec![
        fx.conv(1, 3, 2, 3, 1, Padding::Same),
        fx.conv(3, 1, 3, 2, 2, Padding::Same),
    ]);
    check(l, fx, [2, 6, 5, 2]);
}

#[test]
fn conv_pointwise() {
    let mut fx = Fixture::new(4);
    let l = fx.conv(1, 1, 3, 4, 1, Padding::Same);
    check(l, fx, [3, 3, 3, 3]);
}

#[test]
fn depthwise_strided() {
    let mut fx = Fixture::new(5);
    let l = Layer::Depthwise(DepthwiseConv2d {
        k: 3,
        channels: 3,
        stride: 2,
        padding: Padding::Same,
        weight: fx.param(vec![3, 3, 3]),
        bias: Some(fx.param(vec![3])),
    });
    check(l, fx, [2, 5, 6, 3]);
}

#[test]
fn dense_over_flatten() {
    let mut fx = Fixture::new(6);
    let w = fx.param(vec![2 * 3 * 2, 40]);
    let b = fx.param(vec![40]);
    let l = Layer::Sequential(vec![
        Layer::Flatten,
        Layer::Dense(Dense {
            inputs: 12,
            outputs: 40,
            weight: w,
            bias: b,
        }),
    ]);
    check(l, fx, [3, 2, 3, 2]);
}

#[test]
fn pools_and_global_average() {
    let fx = Fixture::new(7);
    let l = Layer::Sequential(vec![
        Layer::Pool(Pool2d {
            kind: PoolKind::Max,
            k: 3,
            stride: 2,
            padding: Padding::Same,
        }),
        Layer::Pool(Pool2d {
            kind: PoolKind::Avg,
            k: 3,
            stride: 1,
            padding: Padding::Same,
        }),
        Layer::GlobalAvgPool,
    ]);
    check(l, fx, [2, 7, 6, 2]);
}

#[test]
fn residual_concat_and_dense_concat() {
    let mut fx = Fixture::new(8);
    let body = Layer::Sequential(vec![
        fx.conv(3, 3, 2, 2, 1, Padding::Same),
        fx.conv(1, 1, 2, 3, 1, Padding::Same),
    ]);
    let shortcut = fx.conv(1, 1, 2, 3, 1, Padding::Same);
    let residual = Layer::Residual {
        body: Box::new(body),
        shortcut: Some(Box::new(shortcut)),
        scale: 0.7,
    };
    let concat = Layer::Concat(vec![fx.conv(1, 1, 3, 2, 1, Padding::Same), fx.conv(3, 3, 3, 1, 1, Padding::Same)]);
    let dense = Layer::DenseConcat(Box::new(fx.conv(3, 3, 3, 2, 1, Padding::Same)));
    let l = Layer::Sequential(vec![residual, concat, dense]);
    check(l, fx, [2, 4, 5, 2]);
}

#[test]
fn identity_residual() {
    let mut fx = Fixture::new(9);
    let l = Layer::Residual {
        body: Box::new(fx.conv(3, 3, 2, 2, 1, Padding::Same)),
        shortcut: None,
        scale: 1.0,
    };
    check(l, fx, [2, 4, 4, 2]);
}

#[test]
fn relu_routes_gradient_by_sign() {
    let ps = ParamStore::new();
    let x = Tensor::new([1, 1, 2, 2], vec![-1.0, 2.0, 7.0, 0.5]);
    for (layer, mask) in [(Layer::Relu, [0.0, 1.0, 1.0, 1.0]), (Layer::Relu6, [0.0, 1.0, 0.0, 1.0])] {
        let (y, c) = layer.forward(&ps, x.clone(), true);
        let mut g = Grads::for_store(&ps);
        let dx = layer
            .backward(&ps, c, Tensor::new(y.shape(), vec![1.0; 4]), &mut g, true)
            .unwrap();
        assert_eq!(dx.data(), &mask);
    }
}

#[test]
fn output_shapes() {
    let l = Layer::Pool(Pool2d {
        kind: PoolKind::Max,
        k: 2,
        stride: 2,
        padding: Padding::Valid,
    });
    assert_eq!(l.output_shape([224, 224, 32]), [112, 112, 32]);
    assert_eq!(l.output_shape([7, 5, 1]), [3, 2, 1]);
    let mut fx = Fixture::new(0);
    let c = fx.conv(3, 3, 3, 8, 2, Padding::Same);
    assert_eq!(c.output_shape([299, 299, 3]), [150, 150, 8]);
    let c = fx.conv(3, 3, 3, 8, 2, Padding::Valid);
    assert_eq!(c.output_shape([299, 299, 3]), [149, 149, 8]);
}
