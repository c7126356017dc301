//! Parameter-allocating constructors for layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Conv2d, Dense, DepthwiseConv2d, Layer, Padding, ParamStore, Pool2d, PoolKind};
use crate::seed;

pub(crate) struct NetBuilder {
    pub ps: ParamStore,
    rng: ChaCha8Rng,
}

impl NetBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            ps: ParamStore::new(),
            rng: seed::rng(seed, &[0x494e_4954]),
        }
    }

    fn uniform(&mut self, n: usize, bound: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect()
    }

    /// He-uniform convolution scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_gain(
        &mut self,
        name: &str,
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: Padding,
        gain: f32,
    ) -> Layer {
        let fan_in = (kh * kw * c_in) as f32;
        let w = self.uniform(kh * kw * c_in * c_out, gain * (6.0 / fan_in).sqrt());
        let weight = self.ps.add(format!("{name}.weight"), vec![kh, kw, c_in, c_out], w, false);
        let bias = self.ps.add(format!("{name}.bias"), vec![c_out], vec![0.0; c_out], false);
        Layer::Conv(Conv2d {
            kh,
            kw,
            c_in,
            c_out,
            stride,
            padding,
            weight,
            bias: Some(bias),
        })
    }

    pub fn conv(&mut self, name: &str, kh: usize, kw: usize, c_in: usize, c_out: usize, stride: usize, padding: Padding) -> Layer {
        self.conv_gain(name, kh, kw, c_in, c_out, stride, padding, 1.0)
    }

    /// Convolution followed by a rectifier.
    pub fn conv_relu(&mut self, name: &str, kh: usize, kw: usize, c_in: usize, c_out: usize, stride: usize, padding: Padding) -> Layer {
        Layer::Sequential(vec![self.conv(name, kh, kw, c_in, c_out, stride, padding), Layer::Relu])
    }

    /// Square `k x k` convolution plus rectifier, the common case.
    pub fn cr(&mut self, name: &str, k: usize, c_in: usize, c_out: usize, stride: usize, padding: Padding) -> Layer {
        self.conv_relu(name, k, k, c_in, c_out, stride, padding)
    }

    pub fn depthwise(&mut self, name: &str, k: usize, channels: usize, stride: usize, padding: Padding) -> Layer {
        self.depthwise_gain(name, k, channels, stride, padding, 1.0)
    }

    pub fn depthwise_gain(&mut self, name: &str, k: usize, channels: usize, stride: usize, padding: Padding, gain: f32) -> Layer {
        let w = self.uniform(k * k * channels, gain * (6.0 / (k * k) as f32).sqrt());
        let weight = self.ps.add(format!("{name}.weight"), vec![k, k, channels], w, false);
        let bias = self.ps.add(format!("{name}.bias"), vec![channels], vec![0.0; channels], false);
        Layer::Depthwise(DepthwiseConv2d {
            k,
            channels,
            stride,
            padding,
            weight,
            bias: Some(bias),
        })
    }

    /// Depthwise 3x3 then pointwise projection. The depthwise part is
    /// variance preserving since no rectifier follows it.
    pub fn separable(&mut self, name: &str, c_in: usize, c_out: usize) -> Layer {
        self.separable_gain(name, c_in, c_out, 1.0)
    }

    pub fn separable_gain(&mut self, name: &str, c_in: usize, c_out: usize, gain: f32) -> Layer {
        Layer::Sequential(vec![
            self.depthwise_gain(&format!("{name}.depthwise"), 3, c_in, 1, Padding::Same, std::f32::consts::FRAC_1_SQRT_2),
            self.conv_gain(&format!("{name}.pointwise"), 1, 1, c_in, c_out, 1, Padding::Same, gain),
        ])
    }

    /// Glorot-uniform dense layer with zero bias; the kernel joins the L2
    /// penalty when `regularized`.
    pub fn dense(&mut self, name: &str, inputs: usize, outputs: usize, regularized: bool) -> Layer {
        let bound = (6.0 / (inputs + outputs) as f32).sqrt();
        let w = self.uniform(inputs * outputs, bound);
        let weight = self.ps.add(format!("{name}.weight"), vec![inputs, outputs], w, regularized);
        let bias = self.ps.add(format!("{name}.bias"), vec![outputs], vec![0.0; outputs], false);
        Layer::Dense(Dense {
            inputs,
            outputs,
            weight,
            bias,
        })
    }
}

pub(crate) fn max_pool(k: usize, stride: usize, padding: Padding) -> Layer {
    Layer::Pool(Pool2d {
        kind: PoolKind::Max,
        k,
        stride,
        padding,
    })
}

pub(crate) fn avg_pool(k: usize, stride: usize, padding: Padding) -> Layer {
    Layer::Pool(Pool2d {
        kind: PoolKind::Avg,
        k,
        stride,
        padding,
    })
}
