//! Compact feature extractors that keep each family's block structure
//! (module types, depth pattern, strides, skip connections) at reduced width.

use super::builder::{avg_pool, max_pool, NetBuilder};
use crate::nn::{Layer, Padding};

use Padding::{Same, Valid};

pub(crate) struct Backbone {
    pub blocks: Vec<(String, Layer)>,
    pub out_channels: usize,
}

fn seq(layers: Vec<Layer>) -> Layer {
    Layer::Sequential(layers)
}

fn residual(body: Layer, shortcut: Option<Layer>, scale: f32) -> Layer {
    Layer::Residual {
        body: Box::new(body),
        shortcut: shortcut.map(Box::new),
        scale,
    }
}

pub(crate) fn vgg(b: &mut NetBuilder, c_in: usize, convs: [usize; 5]) -> Backbone {
    let widths = [8, 16, 32, 64, 64];
    let mut c = c_in;
    let mut blocks = Vec::new();
    for (i, (&n, &w)) in convs.iter().zip(&widths).enumerate() {
        let name = format!("block{}", i + 1);
        let mut layers = Vec::new();
        for j in 0..n {
            layers.push(b.cr(&format!("{name}.conv{}", j + 1), 3, c, w, 1, Same));
            c = w;
        }
        layers.push(max_pool(2, 2, Valid));
        blocks.push((name, seq(layers)));
    }
    Backbone {
        blocks,
        out_channels: c,
    }
}

pub(crate) fn resnet50(b: &mut NetBuilder, c_in: usize) -> Backbone {
    let mut blocks = vec![(
        "conv1".to_string(),
        seq(vec![b.cr("conv1.conv", 7, c_in, 8, 2, Same), max_pool(3, 2, Same)]),
    )];
    let mut c = 8;
    for (stage, (&n, &f)) in [3usize, 4, 6, 3].iter().zip(&[8usize, 16, 32, 64]).enumerate() {
        let name = format!("conv{}", stage + 2);
        let mut units = Vec::new();
        for i in 0..n {
            let p = format!("{name}.block{}", i + 1);
            let stride = if i == 0 && stage > 0 { 2 } else { 1 };
            let body = seq(vec![
                b.cr(&format!("{p}.1"), 1, c, f, stride, Same),
                b.cr(&format!("{p}.2"), 3, f, f, 1, Same),
                b.conv_gain(&format!("{p}.3"), 1, 1, f, 4 * f, 1, Same, 0.2),
            ]);
            let shortcut = (i == 0).then(|| b.conv(&format!("{p}.0"), 1, 1, c, 4 * f, stride, Same));
            units.push(residual(body, shortcut, 1.0));
            units.push(Layer::Relu);
            c = 4 * f;
        }
        blocks.push((name, seq(units)));
    }
    Backbone {
        blocks,
        out_channels: c,
    }
}

pub(crate) fn inception_v3(b: &mut NetBuilder, c_in: usize) -> Backbone {
    let stem = seq(vec![
        b.cr("stem.conv1", 3, c_in, 4, 2, Valid),
        b.cr("stem.conv2", 3, 4, 4, 1, Valid),
        b.cr("stem.conv3", 3, 4, 8, 1, Same),
        max_pool(3, 2, Valid),
        b.cr("stem.conv4", 1, 8, 10, 1, Same),
        b.cr("stem.conv5", 3, 10, 24, 1, Valid),
        max_pool(3, 2, Valid),
    ]);
    let mut blocks = vec![("stem".to_string(), stem)];
    let mut c = 24;

    for (i, pool_w) in [4usize, 8, 8].into_iter().enumerate() {
        let p = format!("mixed{i}");
        let m = Layer::Concat(vec![
            b.cr(&format!("{p}.b1"), 1, c, 8, 1, Same),
            seq(vec![b.cr(&format!("{p}.b5a"), 1, c, 6, 1, Same), b.cr(&format!("{p}.b5b"), 5, 6, 8, 1, Same)]),
            seq(vec![
                b.cr(&format!("{p}.b3a"), 1, c, 8, 1, Same),
                b.cr(&format!("{p}.b3b"), 3, 8, 12, 1, Same),
                b.cr(&format!("{p}.b3c"), 3, 12, 12, 1, Same),
            ]),
            seq(vec![avg_pool(3, 1, Same), b.cr(&format!("{p}.bp"), 1, c, pool_w, 1, Same)]),
        ]);
        c = 8 + 8 + 12 + pool_w;
        blocks.push((p, m));
    }

    let m = Layer::Concat(vec![
        b.cr("mixed3.b3", 3, c, 48, 2, Valid),
        seq(vec![
            b.cr("mixed3.bd1", 1, c, 8, 1, Same),
            b.cr("mixed3.bd2", 3, 8, 12, 1, Same),
            b.cr("mixed3.bd3", 3, 12, 12, 2, Valid),
        ]),
        max_pool(3, 2, Valid),
    ]);
    c += 48 + 12;
    blocks.push(("mixed3".into(), m));

    for i in 4..8 {
        let p = format!("mixed{i}");
        let m = Layer::Concat(vec![
            b.cr(&format!("{p}.b1"), 1, c, 24, 1, Same),
            seq(vec![
                b.cr(&format!("{p}.b7a"), 1, c, 16, 1, Same),
                b.conv_relu(&format!("{p}.b7b"), 1, 7, 16, 16, 1, Same),
                b.conv_relu(&format!("{p}.b7c"), 7, 1, 16, 24, 1, Same),
            ]),
            seq(vec![
                b.cr(&format!("{p}.bd1"), 1, c, 16, 1, Same),
                b.conv_relu(&format!("{p}.bd2"), 7, 1, 16, 16, 1, Same),
                b.conv_relu(&format!("{p}.bd3"), 1, 7, 16, 16, 1, Same),
                b.conv_relu(&format!("{p}.bd4"), 7, 1, 16, 16, 1, Same),
                b.conv_relu(&format!("{p}.bd5"), 1, 7, 16, 24, 1, Same),
            ]),
            seq(vec![avg_pool(3, 1, Same), b.cr(&format!("{p}.bp"), 1, c, 24, 1, Same)]),
        ]);
        c = 96;
        blocks.push((p, m));
    }

    let m = Layer::Concat(vec![
        seq(vec![b.cr("mixed8.b3a", 1, c, 24, 1, Same), b.cr("mixed8.b3b", 3, 24, 40, 2, Valid)]),
        seq(vec![
            b.cr("mixed8.b7a", 1, c, 24, 1, Same),
            b.conv_relu("mixed8.b7b", 1, 7, 24, 24, 1, Same),
            b.conv_relu("mixed8.b7c", 7, 1, 24, 24, 1, Same),
            b.cr("mixed8.b7d", 3, 24, 24, 2, Valid),
        ]),
        max_pool(3, 2, Valid),
    ]);
    c += 40 + 24;
    blocks.push(("mixed8".into(), m));

    for i in 9..11 {
        let p = format!("mixed{i}");
        let m = Layer::Concat(vec![
            b.cr(&format!("{p}.b1"), 1, c, 40, 1, Same),
            seq(vec![
                b.cr(&format!("{p}.b3"), 1, c, 48, 1, Same),
                Layer::Concat(vec![
                    b.conv_relu(&format!("{p}.b3a"), 1, 3, 48, 48, 1, Same),
                    b.conv_relu(&format!("{p}.b3b"), 3, 1, 48, 48, 1, Same),
                ]),
            ]),
            seq(vec![
                b.cr(&format!("{p}.bd1"), 1, c, 56, 1, Same),
                b.cr(&format!("{p}.bd2"), 3, 56, 48, 1, Same),
                Layer::Concat(vec![
                    b.conv_relu(&format!("{p}.bd3a"), 1, 3, 48, 48, 1, Same),
                    b.conv_relu(&format!("{p}.bd3b"), 3, 1, 48, 48, 1, Same),
                ]),
            ]),
            seq(vec![avg_pool(3, 1, Same), b.cr(&format!("{p}.bp"), 1, c, 24, 1, Same)]),
        ]);
        c = 40 + 96 + 96 + 24;
        blocks.push((p, m));
    }
    Backbone {
        blocks,
        out_channels: c,
    }
}

pub(crate) fn inception_resnet_v2(b: &mut NetBuilder, c_in: usize) -> Backbone {
    let stem = seq(vec![
        b.cr("stem.conv1", 3, c_in, 4, 2, Valid),
        b.cr("stem.conv2", 3, 4, 4, 1, Valid),
        b.cr("stem.conv3", 3, 4, 8, 1, Same),
        max_pool(3, 2, Valid),
        b.cr("stem.conv4", 1, 8, 10, 1, Same),
        b.cr("stem.conv5", 3, 10, 24, 1, Valid),
        max_pool(3, 2, Valid),
        Layer::Concat(vec![
            b.cr("stem.mixed_5b.b1", 1, 24, 12, 1, Same),
            seq(vec![b.cr("stem.mixed_5b.b5a", 1, 24, 6, 1, Same), b.cr("stem.mixed_5b.b5b", 5, 6, 8, 1, Same)]),
            seq(vec![
                b.cr("stem.mixed_5b.b3a", 1, 24, 8, 1, Same),
                b.cr("stem.mixed_5b.b3b", 3, 8, 12, 1, Same),
                b.cr("stem.mixed_5b.b3c", 3, 12, 12, 1, Same),
            ]),
            seq(vec![avg_pool(3, 1, Same), b.cr("stem.mixed_5b.bp", 1, 24, 8, 1, Same)]),
        ]),
    ]);
    let mut blocks = vec![("stem".to_string(), stem)];
    let c35 = 40;

    let mut units = Vec::new();
    for i in 0..10 {
        let p = format!("block35.{}", i + 1);
        let branches = Layer::Concat(vec![
            b.cr(&format!("{p}.b1"), 1, c35, 4, 1, Same),
            seq(vec![b.cr(&format!("{p}.b3a"), 1, c35, 4, 1, Same), b.cr(&format!("{p}.b3b"), 3, 4, 4, 1, Same)]),
            seq(vec![
                b.cr(&format!("{p}.bd1"), 1, c35, 4, 1, Same),
                b.cr(&format!("{p}.bd2"), 3, 4, 6, 1, Same),
                b.cr(&format!("{p}.bd3"), 3, 6, 8, 1, Same),
            ]),
        ]);
        let up = b.conv(&format!("{p}.up"), 1, 1, 16, c35, 1, Same);
        units.push(residual(seq(vec![branches, up]), None, 0.17));
        units.push(Layer::Relu);
    }
    blocks.push(("block35".into(), seq(units)));

    let m = Layer::Concat(vec![
        b.cr("mixed_6a.b3", 3, c35, 48, 2, Valid),
        seq(vec![
            b.cr("mixed_6a.bd1", 1, c35, 32, 1, Same),
            b.cr("mixed_6a.bd2", 3, 32, 32, 1, Same),
            b.cr("mixed_6a.bd3", 3, 32, 48, 2, Valid),
        ]),
        max_pool(3, 2, Valid),
    ]);
    let c17 = 48 + 48 + c35;
    blocks.push(("mixed_6a".into(), m));

    let mut units = Vec::new();
    for i in 0..20 {
        let p = format!("block17.{}", i + 1);
        let branches = Layer::Concat(vec![
            b.cr(&format!("{p}.b1"), 1, c17, 24, 1, Same),
            seq(vec![
                b.cr(&format!("{p}.b7a"), 1, c17, 16, 1, Same),
                b.conv_relu(&format!("{p}.b7b"), 1, 7, 16, 20, 1, Same),
                b.conv_relu(&format!("{p}.b7c"), 7, 1, 20, 24, 1, Same),
            ]),
        ]);
        let up = b.conv(&format!("{p}.up"), 1, 1, 48, c17, 1, Same);
        units.push(residual(seq(vec![branches, up]), None, 0.1));
        units.push(Layer::Relu);
    }
    blocks.push(("block17".into(), seq(units)));

    let m = Layer::Concat(vec![
        seq(vec![b.cr("mixed_7a.ba1", 1, c17, 32, 1, Same), b.cr("mixed_7a.ba2", 3, 32, 48, 2, Valid)]),
        seq(vec![b.cr("mixed_7a.bb1", 1, c17, 32, 1, Same), b.cr("mixed_7a.bb2", 3, 32, 36, 2, Valid)]),
        seq(vec![
            b.cr("mixed_7a.bc1", 1, c17, 32, 1, Same),
            b.cr("mixed_7a.bc2", 3, 32, 32, 1, Same),
            b.cr("mixed_7a.bc3", 3, 32, 40, 2, Valid),
        ]),
        max_pool(3, 2, Valid),
    ]);
    let c8 = 48 + 36 + 40 + c17;
    blocks.push(("mixed_7a".into(), m));

    let block8 = |b: &mut NetBuilder, p: &str, scale: f32| {
        let branches = Layer::Concat(vec![
            b.cr(&format!("{p}.b1"), 1, c8, 24, 1, Same),
            seq(vec![
                b.cr(&format!("{p}.b3a"), 1, c8, 24, 1, Same),
                b.conv_relu(&format!("{p}.b3b"), 1, 3, 24, 28, 1, Same),
                b.conv_relu(&format!("{p}.b3c"), 3, 1, 28, 32, 1, Same),
            ]),
        ]);
        let up = b.conv(&format!("{p}.up"), 1, 1, 56, c8, 1, Same);
        residual(seq(vec![branches, up]), None, scale)
    };
    let mut units = Vec::new();
    for i in 0..9 {
        units.push(block8(b, &format!("block8.{}", i + 1), 0.2));
        units.push(Layer::Relu);
    }
    blocks.push(("block8".into(), seq(units)));
    let last = block8(b, "top.block8_10", 1.0);
    let top = seq(vec![last, b.cr("top.conv_7b", 1, c8, 192, 1, Same)]);
    blocks.push(("top".into(), top));
    Backbone {
        blocks,
        out_channels: 192,
    }
}

pub(crate) fn densenet201(b: &mut NetBuilder, c_in: usize) -> Backbone {
    let growth = 4;
    let mut blocks = vec![(
        "stem".to_string(),
        seq(vec![b.cr("stem.conv", 7, c_in, 8, 2, Same), max_pool(3, 2, Same)]),
    )];
    let mut c = 8;
    let sizes = [6usize, 12, 48, 32];
    for (i, &n) in sizes.iter().enumerate() {
        let name = format!("conv{}", i + 2);
        let mut layers = Vec::new();
        for j in 0..n {
            let p = format!("{name}.block{}", j + 1);
            layers.push(Layer::DenseConcat(Box::new(seq(vec![
                b.cr(&format!("{p}.1"), 1, c, 4 * growth, 1, Same),
                b.cr(&format!("{p}.2"), 3, 4 * growth, growth, 1, Same),
            ]))));
            c += growth;
        }
        if i + 1 < sizes.len() {
            let reduced = c / 2;
            layers.push(b.cr(&format!("pool{}.conv", i + 2), 1, c, reduced, 1, Same));
            layers.push(avg_pool(2, 2, Valid));
            c = reduced;
        }
        blocks.push((name, seq(layers)));
    }
    Backbone {
        blocks,
        out_channels: c,
    }
}

pub(crate) fn mobilenet_v2(b: &mut NetBuilder, c_in: usize) -> Backbone {
    let mut blocks = vec![(
        "stem".to_string(),
        seq(vec![b.conv("stem.conv", 3, 3, c_in, 8, 2, Same), Layer::Relu6]),
    )];
    let mut c = 8;
    // (expansion, output channels, repeats, first stride)
    let stages = [(1, 8, 1, 1), (6, 8, 2, 2), (6, 8, 3, 2), (6, 16, 4, 2), (6, 24, 3, 1), (6, 40, 3, 2), (6, 80, 1, 1)];
    for (s, &(t, out, n, stride)) in stages.iter().enumerate() {
        let name = if s + 1 == stages.len() {
            "top".to_string()
        } else {
            format!("stage{}", s + 1)
        };
        let mut units = Vec::new();
        for i in 0..n {
            let p = format!("{name}.block{}", i + 1);
            let st = if i == 0 { stride } else { 1 };
            let hidden = c * t;
            let mut body = Vec::new();
            if t != 1 {
                body.push(b.conv(&format!("{p}.expand"), 1, 1, c, hidden, 1, Same));
                body.push(Layer::Relu6);
            }
            body.push(b.depthwise(&format!("{p}.depthwise"), 3, hidden, st, Same));
            body.push(Layer::Relu6);
            body.push(b.conv(&format!("{p}.project"), 1, 1, hidden, out, 1, Same));
            let body = seq(body);
            units.push(if st == 1 && c == out {
                residual(body, None, 1.0)
            } else {
                body
            });
            c = out;
        }
        if s + 1 == stages.len() {
            units.push(b.conv("top.conv_1", 1, 1, c, 160, 1, Same));
            units.push(Layer::Relu6);
            c = 160;
        }
        blocks.push((name, seq(units)));
    }
    Backbone {
        blocks,
        out_channels: c,
    }
}

pub(crate) fn xception(b: &mut NetBuilder, c_in: usize) -> Backbone {
    let mut entry = vec![b.cr("entry.conv1", 3, c_in, 4, 2, Valid), b.cr("entry.conv2", 3, 4, 8, 1, Valid)];
    let mut c = 8;
    for (i, &w) in [16usize, 32, 91].iter().enumerate() {
        let p = format!("entry.block{}", i + 1);
        let mut body = Vec::new();
        if i > 0 {
            body.push(Layer::Relu);
        }
        body.push(b.separable(&format!("{p}.sep1"), c, w));
        body.push(Layer::Relu);
        body.push(b.separable(&format!("{p}.sep2"), w, w));
        body.push(max_pool(3, 2, Same));
        let shortcut = b.conv(&format!("{p}.shortcut"), 1, 1, c, w, 2, Same);
        entry.push(residual(seq(body), Some(shortcut), 1.0));
        c = w;
    }
    let mut blocks = vec![("entry_flow".to_string(), seq(entry))];

    let mut middle = Vec::new();
    for i in 0..8 {
        let p = format!("middle.block{}", i + 1);
        let mut body = Vec::new();
        for j in 0..3 {
            body.push(Layer::Relu);
            let gain = if j == 2 { 0.3 } else { 1.0 };
            body.push(b.separable_gain(&format!("{p}.sep{}", j + 1), c, c, gain));
        }
        middle.push(residual(seq(body), None, 1.0));
    }
    blocks.push(("middle_flow".into(), seq(middle)));

    let body = seq(vec![
        Layer::Relu,
        b.separable("exit.block1.sep1", c, c),
        Layer::Relu,
        b.separable("exit.block1.sep2", c, 128),
        max_pool(3, 2, Same),
    ]);
    let shortcut = b.conv("exit.block1.shortcut", 1, 1, c, 128, 2, Same);
    let exit = seq(vec![
        residual(body, Some(shortcut), 1.0),
        b.separable("exit.sep3", 128, 192),
        Layer::Relu,
        b.separable("exit.sep4", 192, 256),
        Layer::Relu,
    ]);
    blocks.push(("exit_flow".into(), exit));
    Backbone {
        blocks,
        out_channels: 256,
    }
}
