//! Layer graph with forward passes and hand-written backpropagation.
//!
//! Batch kernels parallelize over samples or over disjoint output blocks;
//! per-sample partial gradients are reduced in sample order so results
//! do not depend on the thread count.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::params::{Grads, ParamId, ParamStore};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_t: isize,
    pad_l: isize,
    ho: usize,
    wo: usize,
}

fn out_dim(size: usize, k: usize, stride: usize, padding: Padding) -> (usize, isize) {
    match padding {
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            (out, (total / 2) as isize)
        }
        Padding::Valid => {
            assert!(size >= k, "input extent {size} smaller than kernel {k} with valid padding");
            ((size - k) / stride + 1, 0)
        }
    }
}

impl Geom {
    fn new(input: [usize; 3], kh: usize, kw: usize, stride: usize, padding: Padding) -> Self {
        let [h, w, c] = input;
        let (ho, pad_t) = out_dim(h, kh, stride, padding);
        let (wo, pad_l) = out_dim(w, kw, stride, padding);
        Self {
            h,
            w,
            c,
            kh,
            kw,
            stride,
            pad_t,
            pad_l,
            ho,
            wo,
        }
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_t == 0 && self.pad_l == 0
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad_t;
        let ix = (ox * self.stride + kx) as isize - self.pad_l;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some(iy as usize * self.w + ix as usize)
        }
    }
}

fn im2col(x: &[f32], g: &Geom) -> Vec<f32> {
    let pk = g.patch();
    let mut cols = vec![0.0; g.ho * g.wo * pk];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * pk..][..pk];
            let mut off = 0;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some(p) = g.source(oy, ox, ky, kx) {
                        row[off..off + g.c].copy_from_slice(&x[p * g.c..(p + 1) * g.c]);
                    }
                    off += g.c;
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f32], g: &Geom, dx: &mut [f32]) {
    let pk = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &dcols[(oy * g.wo + ox) * pk..][..pk];
            let mut off = 0;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some(p) = g.source(oy, ox, ky, kx) {
                        dx[p * g.c..(p + 1) * g.c]
                            .iter_mut()
                            .zip(&row[off..off + g.c])
                            .for_each(|(a, b)| *a += b);
                    }
                    off += g.c;
                }
            }
        }
    }
}

/// Standard convolution, weight layout `(kh, kw, c_in, c_out)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: Padding,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Per-channel convolution (depth multiplier 1), weight layout `(k, k, c)`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub k: usize,
    pub channels: usize,
    pub stride: usize,
    pub padding: Padding,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Fully connected layer over the flattened sample, weight `(in, out)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Depthwise(DepthwiseConv2d),
    Dense(Dense),
    Relu,
    Relu6,
    Pool(Pool2d),
    GlobalAvgPool,
    Flatten,
    Sequential(Vec<Layer>),
    /// `shortcut(x) + scale * body(x)`; identity shortcut when `None`.
    Residual {
        body: Box<Layer>,
        shortcut: Option<Box<Layer>>,
        scale: f32,
    },
    /// Parallel branches over one input, concatenated along channels.
    Concat(Vec<Layer>),
    /// `concat(x, body(x))` along channels.
    DenseConcat(Box<Layer>),
}

/// Intermediate values kept by a recorded forward pass.
#[derive(Debug)]
pub enum Cache {
    Empty,
    Input(Tensor),
    Output(Tensor),
    MaxPool { input_shape: [usize; 4], argmax: Vec<u32> },
    Shape([usize; 4]),
    Seq(Vec<Cache>),
    Residual { body: Box<Cache>, shortcut: Option<Box<Cache>> },
    Concat { caches: Vec<Cache>, widths: Vec<usize> },
    DenseConcat { body: Box<Cache>, c_in: usize },
}

fn shape3(t: &Tensor) -> [usize; 3] {
    let (h, w, c) = t.sample_shape();
    [h, w, c]
}

impl Layer {
    pub fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        match self {
            Layer::Conv(c) => {
                let g = Geom::new(input, c.kh, c.kw, c.stride, c.padding);
                [g.ho, g.wo, c.c_out]
            }
            Layer::Depthwise(d) => {
                let g = Geom::new(input, d.k, d.k, d.stride, d.padding);
                [g.ho, g.wo, d.channels]
            }
            Layer::Dense(d) => [1, 1, d.outputs],
            Layer::Relu | Layer::Relu6 => input,
            Layer::Pool(p) => {
                let g = Geom::new(input, p.k, p.k, p.stride, p.padding);
                [g.ho, g.wo, input[2]]
            }
            Layer::GlobalAvgPool => [1, 1, input[2]],
            Layer::Flatten => [1, 1, input.iter().product()],
            Layer::Sequential(layers) => layers.iter().fold(input, |s, l| l.output_shape(s)),
            Layer::Residual { body, .. } => body.output_shape(input),
            Layer::Concat(branches) => {
                let shapes: Vec<_> = branches.iter().map(|b| b.output_shape(input)).collect();
                let c = shapes.iter().map(|s| s[2]).sum();
                [shapes[0][0], shapes[0][1], c]
            }
            Layer::DenseConcat(body) => {
                let s = body.output_shape(input);
                [s[0], s[1], input[2] + s[2]]
            }
        }
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        match self {
            Layer::Conv(c) => {
                out.push(c.weight);
                out.extend(c.bias);
            }
            Layer::Depthwise(d) => {
                out.push(d.weight);
                out.extend(d.bias);
            }
            Layer::Dense(d) => {
                out.push(d.weight);
                out.push(d.bias);
            }
            Layer::Sequential(ls) | Layer::Concat(ls) => ls.iter().for_each(|l| l.collect_params(out)),
            Layer::Residual { body, shortcut, .. } => {
                body.collect_params(out);
                if let Some(s) = shortcut {
                    s.collect_params(out);
                }
            }
            Layer::DenseConcat(body) => body.collect_params(out),
            _ => {}
        }
    }

    /// Runs the layer; with `record` the returned cache supports
    /// [`Layer::backward`].
    pub fn forward(&self, ps: &ParamStore, x: Tensor, record: bool) -> (Tensor, Cache) {
        match self {
            Layer::Conv(c) => {
                let y = conv_forward(c, ps, &x);
                (y, if record { Cache::Input(x) } else { Cache::Empty })
            }
            Layer::Depthwise(d) => {
                let y = depthwise_forward(d, ps, &x);
                (y, if record { Cache::Input(x) } else { Cache::Empty })
            }
            Layer::Dense(d) => {
                let y = dense_forward(d, ps, &x);
                (y, if record { Cache::Input(x) } else { Cache::Empty })
            }
            Layer::Relu | Layer::Relu6 => {
                let cap = if matches!(self, Layer::Relu6) { 6.0 } else { f32::INFINITY };
                let mut y = x;
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0).min(cap));
                let cache = if record { Cache::Output(y.clone()) } else { Cache::Empty };
                (y, cache)
            }
            Layer::Pool(p) => {
                let (y, argmax) = pool_forward(p, &x, record);
                let cache = match (record, p.kind) {
                    (false, _) => Cache::Empty,
                    (true, PoolKind::Max) => Cache::MaxPool {
                        input_shape: x.shape(),
                        argmax,
                    },
                    (true, PoolKind::Avg) => Cache::Shape(x.shape()),
                };
                (y, cache)
            }
            Layer::GlobalAvgPool => {
                let [n, h, w, c] = x.shape();
                let hw = (h * w) as f32;
                let mut y = vec![0.0; n * c];
                for (i, out) in y.chunks_mut(c).enumerate() {
                    for px in x.sample(i).chunks(c) {
                        out.iter_mut().zip(px).for_each(|(o, v)| *o += v);
                    }
                    out.iter_mut().for_each(|o| *o /= hw);
                }
                let cache = if record { Cache::Shape(x.shape()) } else { Cache::Empty };
                (Tensor::new([n, 1, 1, c], y), cache)
            }
            Layer::Flatten => {
                let shape = x.shape();
                let len = x.sample_len();
                (x.reshape([shape[0], 1, 1, len]), if record { Cache::Shape(shape) } else { Cache::Empty })
            }
            Layer::Sequential(layers) => {
                let mut caches = Vec::with_capacity(if record { layers.len() } else { 0 });
                let mut h = x;
                for l in layers {
                    let (y, c) = l.forward(ps, h, record);
                    if record {
                        caches.push(c);
                    }
                    h = y;
                }
                (h, if record { Cache::Seq(caches) } else { Cache::Empty })
            }
            Layer::Residual { body, shortcut, scale } => {
                let (b, bc) = body.forward(ps, x.clone(), record);
                let (mut s, sc) = match shortcut {
                    Some(l) => {
                        let (s, c) = l.forward(ps, x, record);
                        (s, Some(Box::new(c)))
                    }
                    None => (x, None),
                };
                assert_eq!(s.shape(), b.shape(), "residual branch shapes differ");
                s.data_mut().iter_mut().zip(b.data()).for_each(|(a, v)| *a += scale * v);
                let cache = if record {
                    Cache::Residual {
                        body: Box::new(bc),
                        shortcut: sc,
                    }
                } else {
                    Cache::Empty
                };
                (s, cache)
            }
            Layer::Concat(branches) => {
                let mut outs = Vec::with_capacity(branches.len());
                let mut caches = Vec::new();
                for b in branches {
                    let (y, c) = b.forward(ps, x.clone(), record);
                    outs.push(y);
                    if record {
                        caches.push(c);
                    }
                }
                let widths = outs.iter().map(Tensor::channels).collect();
                let y = concat_channels(&outs);
                (y, if record { Cache::Concat { caches, widths } } else { Cache::Empty })
            }
            Layer::DenseConcat(body) => {
                let c_in = x.channels();
                let (b, bc) = body.forward(ps, x.clone(), record);
                let y = concat_channels(&[x, b]);
                let cache = if record {
                    Cache::DenseConcat {
                        body: Box::new(bc),
                        c_in,
                    }
                } else {
                    Cache::Empty
                };
                (y, cache)
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: Cache,
        grad: Tensor,
        grads: &mut Grads,
        need_input: bool,
    ) -> Option<Tensor> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Input(x)) => conv_backward(c, ps, &x, &grad, grads, need_input),
            (Layer::Depthwise(d), Cache::Input(x)) => depthwise_backward(d, ps, &x, &grad, grads, need_input),
            (Layer::Dense(d), Cache::Input(x)) => dense_backward(d, ps, &x, &grad, grads, need_input),
            (Layer::Relu | Layer::Relu6, Cache::Output(y)) => {
                if !need_input {
                    return None;
                }
                let cap = if matches!(self, Layer::Relu6) { 6.0 } else { f32::INFINITY };
                let mut g = grad;
                g.data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(g, &y)| {
                        if y <= 0.0 || y >= cap {
                            *g = 0.0
                        }
                    });
                Some(g)
            }
            (Layer::Pool(p), cache) => need_input.then(|| pool_backward(p, cache, &grad)),
            (Layer::GlobalAvgPool, Cache::Shape(shape)) => {
                if !need_input {
                    return None;
                }
                let [n, h, w, c] = shape;
                let hw = (h * w) as f32;
                let mut dx = vec![0.0; n * h * w * c];
                for (i, sample) in dx.chunks_mut(h * w * c).enumerate() {
                    let g = &grad.data()[i * c..(i + 1) * c];
                    for px in sample.chunks_mut(c) {
                        px.iter_mut().zip(g).for_each(|(d, g)| *d = g / hw);
                    }
                }
                Some(Tensor::new(shape, dx))
            }
            (Layer::Flatten, Cache::Shape(shape)) => need_input.then(|| grad.reshape(shape)),
            (Layer::Sequential(layers), Cache::Seq(caches)) => {
                let mut g = Some(grad);
                for (i, (l, c)) in layers.iter().zip(caches).enumerate().rev() {
                    let want = need_input || i > 0;
                    g = l.backward(ps, c, g.expect("gradient flows through sequence"), grads, want);
                }
                g
            }
            (Layer::Residual { body, shortcut, scale }, Cache::Residual { body: bc, shortcut: sc }) => {
                let mut gb = grad.clone();
                gb.data_mut().iter_mut().for_each(|v| *v *= scale);
                let db = body.backward(ps, *bc, gb, grads, need_input);
                let ds = match (shortcut, sc) {
                    (Some(l), Some(c)) => l.backward(ps, *c, grad, grads, need_input),
                    _ => need_input.then_some(grad),
                };
                match (db, ds) {
                    (Some(mut a), Some(b)) => {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(a, b)| *a += b);
                        Some(a)
                    }
                    _ => None,
                }
            }
            (Layer::Concat(branches), Cache::Concat { caches, widths }) => {
                let parts = split_channels(&grad, &widths);
                let mut acc: Option<Tensor> = None;
                for ((b, c), g) in branches.iter().zip(caches).zip(parts) {
                    if let Some(d) = b.backward(ps, c, g, grads, need_input) {
                        acc = Some(match acc {
                            None => d,
                            Some(mut a) => {
                                a.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
                                a
                            }
                        });
                    }
                }
                acc
            }
            (Layer::DenseConcat(body), Cache::DenseConcat { body: bc, c_in }) => {
                let c_out = grad.channels() - c_in;
                let mut parts = split_channels(&grad, &[c_in, c_out]).into_iter();
                let gx = parts.next().unwrap();
                let gb = parts.next().unwrap();
                let db = body.backward(ps, *bc, gb, grads, need_input);
                match db {
                    Some(mut d) => {
                        d.data_mut().iter_mut().zip(gx.data()).for_each(|(a, b)| *a += b);
                        Some(d)
                    }
                    None => None,
                }
            }
            (_, Cache::Empty) => panic!("backward called without a recorded forward pass"),
            _ => unreachable!("cache does not match layer"),
        }
    }
}

fn concat_channels(parts: &[Tensor]) -> Tensor {
    let [n, h, w, _] = parts[0].shape();
    let widths: Vec<usize> = parts.iter().map(Tensor::channels).collect();
    let c: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * h * w * c);
    for p in 0..n * h * w {
        for (t, &wd) in parts.iter().zip(&widths) {
            out.extend_from_slice(&t.data()[p * wd..(p + 1) * wd]);
        }
    }
    Tensor::new([n, h, w, c], out)
}

fn split_channels(t: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let [n, h, w, c] = t.shape();
    debug_assert_eq!(widths.iter().sum::<usize>(), c);
    let mut outs: Vec<Vec<f32>> = widths.iter().map(|&wd| Vec::with_capacity(n * h * w * wd)).collect();
    for px in t.data().chunks(c) {
        let mut off = 0;
        for (o, &wd) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&px[off..off + wd]);
            off += wd;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &wd)| Tensor::new([n, h, w, wd], d))
        .collect()
}

fn conv_forward(c: &Conv2d, ps: &ParamStore, x: &Tensor) -> Tensor {
    assert_eq!(x.channels(), c.c_in, "conv input channels");
    let g = Geom::new(shape3(x), c.kh, c.kw, c.stride, c.padding);
    let n = x.batch();
    let rows = g.ho * g.wo;
    let out_len = rows * c.c_out;
    let w = ps.value(c.weight);
    let bias = c.bias.map(|b| ps.value(b));
    let mut out = vec![0.0; n * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |i, o| {
        let beta = match bias {
            Some(b) => {
                o.chunks_mut(c.c_out).for_each(|r| r.copy_from_slice(b));
                1.0
            }
            None => 0.0,
        };
        let xs = x.sample(i);
        let wm = MatRef::row_major(w, g.patch(), c.c_out);
        if g.is_pointwise() {
            gemm(MatRef::row_major(xs, rows, g.c), wm, beta, o, c.c_out);
        } else {
            let cols = im2col(xs, &g);
            gemm(MatRef::row_major(&cols, rows, g.patch()), wm, beta, o, c.c_out);
        }
    });
    Tensor::new([n, g.ho, g.wo, c.c_out], out)
}

type SampleGrads = (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>);

fn reduce_param_grads(parts: &mut [SampleGrads], grads: &mut Grads, weight: ParamId, bias: Option<ParamId>) {
    let mut sum_w: Option<Vec<f32>> = None;
    let mut sum_b: Option<Vec<f32>> = None;
    for (dw, db, _) in parts.iter_mut() {
        if let Some(dw) = dw.take() {
            match &mut sum_w {
                None => sum_w = Some(dw),
                Some(s) => s.iter_mut().zip(&dw).for_each(|(a, b)| *a += b),
            }
        }
        if let Some(db) = db.take() {
            match &mut sum_b {
                None => sum_b = Some(db),
                Some(s) => s.iter_mut().zip(&db).for_each(|(a, b)| *a += b),
            }
        }
    }
    if let Some(s) = sum_w {
        grads.accumulate(weight, &s);
    }
    if let (Some(s), Some(b)) = (sum_b, bias) {
        grads.accumulate(b, &s);
    }
}

fn assemble_input_grad(parts: Vec<SampleGrads>, shape: [usize; 4]) -> Option<Tensor> {
    let mut data = Vec::with_capacity(shape.iter().product());
    for (_, _, dx) in parts {
        data.extend(dx?);
    }
    Some(Tensor::new(shape, data))
}

fn column_sums(m: &[f32], cols: usize) -> Vec<f32> {
    let mut s = vec![0.0; cols];
    for r in m.chunks(cols) {
        s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    s
}

fn conv_backward(
    c: &Conv2d,
    ps: &ParamStore,
    x: &Tensor,
    grad: &Tensor,
    grads: &mut Grads,
    need_input: bool,
) -> Option<Tensor> {
    let want_w = grads.wants(c.weight);
    let want_b = c.bias.is_some_and(|b| grads.wants(b));
    if !want_w && !want_b && !need_input {
        return None;
    }
    let g = Geom::new(shape3(x), c.kh, c.kw, c.stride, c.padding);
    let rows = g.ho * g.wo;
    let pk = g.patch();
    let w = ps.value(c.weight);
    let mut parts: Vec<SampleGrads> = par::map_range(x.batch(), |i| {
        let xs = x.sample(i);
        let dout = grad.sample(i);
        let cols_owned;
        let cols: &[f32] = if g.is_pointwise() {
            xs
        } else if want_w {
            cols_owned = im2col(xs, &g);
            &cols_owned
        } else {
            &[]
        };
        let dw = want_w.then(|| {
            let mut dw = vec![0.0; pk * c.c_out];
            gemm(
                MatRef::transposed(cols, rows, pk),
                MatRef::row_major(dout, rows, c.c_out),
                0.0,
                &mut dw,
                c.c_out,
            );
            dw
        });
        let db = want_b.then(|| column_sums(dout, c.c_out));
        let dx = need_input.then(|| {
            let mut dcols = vec![0.0; rows * pk];
            gemm(
                MatRef::row_major(dout, rows, c.c_out),
                MatRef::transposed(w, pk, c.c_out),
                0.0,
                &mut dcols,
                pk,
            );
            if g.is_pointwise() {
                dcols
            } else {
                let mut dx = vec![0.0; g.h * g.w * g.c];
                col2im(&dcols, &g, &mut dx);
                dx
            }
        });
        (dw, db, dx)
    });
    reduce_param_grads(&mut parts, grads, c.weight, c.bias);
    if need_input {
        assemble_input_grad(parts, x.shape())
    } else {
        None
    }
}

fn depthwise_forward(d: &DepthwiseConv2d, ps: &ParamStore, x: &Tensor) -> Tensor {
    assert_eq!(x.channels(), d.channels, "depthwise input channels");
    let g = Geom::new(shape3(x), d.k, d.k, d.stride, d.padding);
    let ch = d.channels;
    let out_len = g.ho * g.wo * ch;
    let w = ps.value(d.weight);
    let bias = d.bias.map(|b| ps.value(b));
    let mut out = vec![0.0; x.batch() * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |i, o| {
        let xs = x.sample(i);
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let acc = &mut o[(oy * g.wo + ox) * ch..][..ch];
                if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some(p) = g.source(oy, ox, ky, kx) {
                            let wk = &w[(ky * g.kw + kx) * ch..][..ch];
                            let xp = &xs[p * ch..][..ch];
                            for ((a, &xv), &wv) in acc.iter_mut().zip(xp).zip(wk) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new([x.batch(), g.ho, g.wo, ch], out)
}

fn depthwise_backward(
    d: &DepthwiseConv2d,
    ps: &ParamStore,
    x: &Tensor,
    grad: &Tensor,
    grads: &mut Grads,
    need_input: bool,
) -> Option<Tensor> {
    let want_w = grads.wants(d.weight);
    let want_b = d.bias.is_some_and(|b| grads.wants(b));
    if !want_w && !want_b && !need_input {
        return None;
    }
    let g = Geom::new(shape3(x), d.k, d.k, d.stride, d.padding);
    let ch = d.channels;
    let w = ps.value(d.weight);
    let mut parts: Vec<SampleGrads> = par::map_range(x.batch(), |i| {
        let xs = x.sample(i);
        let dout = grad.sample(i);
        let mut dw = want_w.then(|| vec![0.0; g.kh * g.kw * ch]);
        let mut dx = need_input.then(|| vec![0.0; g.h * g.w * ch]);
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = &dout[(oy * g.wo + ox) * ch..][..ch];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let Some(p) = g.source(oy, ox, ky, kx) else { continue };
                        let k = (ky * g.kw + kx) * ch;
                        if let Some(dw) = &mut dw {
                            let xp = &xs[p * ch..][..ch];
                            for ((a, &xv), &gv) in dw[k..k + ch].iter_mut().zip(xp).zip(go) {
                                *a += xv * gv;
                            }
                        }
                        if let Some(dx) = &mut dx {
                            let wk = &w[k..k + ch];
                            for ((a, &wv), &gv) in dx[p * ch..(p + 1) * ch].iter_mut().zip(wk).zip(go) {
                                *a += wv * gv;
                            }
                        }
                    }
                }
            }
        }
        let db = want_b.then(|| column_sums(dout, ch));
        (dw, db, dx)
    });
    reduce_param_grads(&mut parts, grads, d.weight, d.bias);
    if need_input {
        assemble_input_grad(parts, x.shape())
    } else {
        None
    }
}

const DENSE_BLOCK: usize = 16;
const DENSE_ROW_BLOCK: usize = 256;

/// `a (n x k) * b[:, block]` computed per column block in parallel and
/// written into row-major `n x total_cols` output.
fn blocked_product<'a>(
    n: usize,
    a: MatRef<'a>,
    total_cols: usize,
    b_block: impl Fn(usize, usize) -> MatRef<'a> + Sync + Send,
) -> Vec<f32> {
    let blocks = total_cols.div_ceil(DENSE_BLOCK);
    let parts = par::map_range(blocks, |j| {
        let c0 = j * DENSE_BLOCK;
        let bw = DENSE_BLOCK.min(total_cols - c0);
        let mut buf = vec![0.0; n * bw];
        gemm(a, b_block(c0, bw), 0.0, &mut buf, bw);
        (c0, bw, buf)
    });
    let mut out = vec![0.0; n * total_cols];
    for (c0, bw, buf) in parts {
        for r in 0..n {
            out[r * total_cols + c0..r * total_cols + c0 + bw].copy_from_slice(&buf[r * bw..(r + 1) * bw]);
        }
    }
    out
}

fn dense_forward(d: &Dense, ps: &ParamStore, x: &Tensor) -> Tensor {
    assert_eq!(x.sample_len(), d.inputs, "dense input width");
    let n = x.batch();
    let w = ps.value(d.weight);
    let mut out = blocked_product(n, MatRef::row_major(x.data(), n, d.inputs), d.outputs, |c0, bw| MatRef {
        data: &w[c0..],
        rows: d.inputs,
        cols: bw,
        row_stride: d.outputs,
        col_stride: 1,
    });
    let b = ps.value(d.bias);
    for r in out.chunks_mut(d.outputs) {
        r.iter_mut().zip(b).for_each(|(o, b)| *o += b);
    }
    Tensor::new([n, 1, 1, d.outputs], out)
}

fn dense_backward(
    d: &Dense,
    ps: &ParamStore,
    x: &Tensor,
    grad: &Tensor,
    grads: &mut Grads,
    need_input: bool,
) -> Option<Tensor> {
    let n = x.batch();
    let (fi, fo) = (d.inputs, d.outputs);
    if let Some(dw) = grads.get_mut(d.weight) {
        // dW += X^T dY, parallel over row blocks of dW.
        par::for_each_chunk_mut(dw, DENSE_ROW_BLOCK * fo, |j, chunk| {
            let r0 = j * DENSE_ROW_BLOCK;
            let rows = chunk.len() / fo;
            let a = MatRef {
                data: &x.data()[r0..],
                rows,
                cols: n,
                row_stride: 1,
                col_stride: fi,
            };
            gemm(a, MatRef::row_major(grad.data(), n, fo), 1.0, chunk, fo);
        });
    }
    if grads.wants(d.bias) {
        grads.accumulate(d.bias, &column_sums(grad.data(), fo));
    }
    if !need_input {
        return None;
    }
    let w = ps.value(d.weight);
    let dx = blocked_product(n, MatRef::row_major(grad.data(), n, fo), fi, |c0, bw| MatRef {
        data: &w[c0 * fo..],
        rows: fo,
        cols: bw,
        row_stride: 1,
        col_stride: fo,
    });
    Some(Tensor::new(x.shape(), dx))
}

fn pool_forward(p: &Pool2d, x: &Tensor, record: bool) -> (Tensor, Vec<u32>) {
    let g = Geom::new(shape3(x), p.k, p.k, p.stride, p.padding);
    let ch = g.c;
    let out_len = g.ho * g.wo * ch;
    let n = x.batch();
    let mut out = vec![0.0; n * out_len];
    let mut argmax = if record && p.kind == PoolKind::Max {
        vec![0u32; n * out_len]
    } else {
        Vec::new()
    };
    let compute = |i: usize, o: &mut [f32], am: Option<&mut [u32]>| {
        let xs = x.sample(i);
        let mut am = am;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let base = (oy * g.wo + ox) * ch;
                match p.kind {
                    PoolKind::Max => {
                        let acc = &mut o[base..base + ch];
                        acc.fill(f32::NEG_INFINITY);
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let Some(src) = g.source(oy, ox, ky, kx) else { continue };
                                for cc in 0..ch {
                                    let v = xs[src * ch + cc];
                                    if v > acc[cc] {
                                        acc[cc] = v;
                                        if let Some(am) = am.as_deref_mut() {
                                            am[base + cc] = (src * ch + cc) as u32;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    PoolKind::Avg => {
                        let mut count = 0.0;
                        let acc = &mut o[base..base + ch];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let Some(src) = g.source(oy, ox, ky, kx) else { continue };
                                count += 1.0;
                                acc.iter_mut().zip(&xs[src * ch..(src + 1) * ch]).for_each(|(a, v)| *a += v);
                            }
                        }
                        acc.iter_mut().for_each(|a| *a /= count);
                    }
                }
            }
        }
    };
    if argmax.is_empty() {
        par::for_each_chunk_mut(&mut out, out_len, |i, o| compute(i, o, None));
    } else {
        // Pair output and argmax chunks by sample.
        let mut pairs: Vec<(&mut [f32], &mut [u32])> =
            out.chunks_mut(out_len).zip(argmax.chunks_mut(out_len)).collect();
        par::for_each_chunk_mut(&mut pairs, 1, |i, pair| {
            let (o, am) = &mut pair[0];
            compute(i, o, Some(am));
        });
    }
    (Tensor::new([n, g.ho, g.wo, ch], out), argmax)
}

fn pool_backward(p: &Pool2d, cache: Cache, grad: &Tensor) -> Tensor {
    match (p.kind, cache) {
        (PoolKind::Max, Cache::MaxPool { input_shape, argmax }) => {
            let in_len: usize = input_shape[1..].iter().product();
            let out_len = grad.sample_len();
            let mut dx = vec![0.0; input_shape.iter().product()];
            par::for_each_chunk_mut(&mut dx, in_len, |i, d| {
                let g = grad.sample(i);
                let am = &argmax[i * out_len..(i + 1) * out_len];
                for (&src, &gv) in am.iter().zip(g) {
                    d[src as usize] += gv;
                }
            });
            Tensor::new(input_shape, dx)
        }
        (PoolKind::Avg, Cache::Shape(input_shape)) => {
            let [_, h, w, c] = input_shape;
            let g = Geom::new([h, w, c], p.k, p.k, p.stride, p.padding);
            let in_len = h * w * c;
            let mut dx = vec![0.0; input_shape.iter().product()];
            par::for_each_chunk_mut(&mut dx, in_len, |i, d| {
                let gs = grad.sample(i);
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let srcs: Vec<usize> = (0..g.kh)
                            .flat_map(|ky| (0..g.kw).map(move |kx| (ky, kx)))
                            .filter_map(|(ky, kx)| g.source(oy, ox, ky, kx))
                            .collect();
                        let scale = 1.0 / srcs.len() as f32;
                        let go = &gs[(oy * g.wo + ox) * c..][..c];
                        for src in srcs {
                            d[src * c..(src + 1) * c]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(a, gv)| *a += gv * scale);
                        }
                    }
                }
            });
            Tensor::new(input_shape, dx)
        }
        _ => unreachable!("pool cache mismatch"),
    }
}
