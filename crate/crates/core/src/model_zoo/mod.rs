//! Architecture catalogue, network construction, pretrained weights and
//! checkpoints.

mod backbones;
mod builder;
mod spec;
mod weights;

pub use spec::{
    list_architectures, Architecture, ArchitectureSpec, BaselineLayout, FreezePolicy, HeadSpec, HiddenActivation,
    OutputActivation, Pooling,
};
pub use weights::{
    default_weights_dir, load_checkpoint, load_pretrained, read_checkpoint_spec, save_checkpoint, weights_path,
    write_synthetic_weights, WEIGHTS_ENV,
};

use std::path::Path;

use self::backbones::Backbone;
use self::builder::{max_pool, NetBuilder};
use crate::error::Result;
use crate::nn::{Block, BlockRole, Layer, Model, Padding};

/// Builds the network with freshly initialised parameters only; no weights
/// are read.
pub fn build_untrained(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut b = NetBuilder::new(seed);
    let c = spec.channels;
    let backbone = match spec.name {
        Architecture::BaselineCnn => baseline_body(&mut b, c, &spec.baseline.clone().unwrap_or_default()),
        Architecture::Vgg16 => backbones::vgg(&mut b, c, [2, 2, 3, 3, 3]),
        Architecture::Vgg19 => backbones::vgg(&mut b, c, [2, 2, 4, 4, 4]),
        Architecture::InceptionV3 => backbones::inception_v3(&mut b, c),
        Architecture::Xception => backbones::xception(&mut b, c),
        Architecture::DenseNet201 => backbones::densenet201(&mut b, c),
        Architecture::MobileNetV2 => backbones::mobilenet_v2(&mut b, c),
        Architecture::InceptionResNetV2 => backbones::inception_resnet_v2(&mut b, c),
        Architecture::ResNet50 => backbones::resnet50(&mut b, c),
    };
    let input_shape = [spec.input_size, spec.input_size, spec.channels];
    let feature_shape = backbone
        .blocks
        .iter()
        .fold(input_shape, |s, (_, l)| l.output_shape(s));
    debug_assert_eq!(feature_shape[2], backbone.out_channels);
    let (pool, features) = match spec.head.pooling {
        Pooling::Flatten => (Layer::Flatten, feature_shape.iter().product()),
        Pooling::GlobalAveragePool => (Layer::GlobalAvgPool, feature_shape[2]),
    };
    let head = Layer::Sequential(vec![
        pool,
        b.dense("head.hidden", features, spec.head.hidden_units, true),
        Layer::Relu,
        b.dense("head.output", spec.head.hidden_units, 1, true),
    ]);
    let mut blocks: Vec<Block> = backbone
        .blocks
        .into_iter()
        .map(|(name, layer)| Block {
            name,
            role: BlockRole::Backbone,
            layer,
        })
        .collect();
    blocks.push(Block {
        name: "head".into(),
        role: BlockRole::Head,
        layer: head,
    });
    let mut model = Model::new(b.ps, blocks, input_shape);
    apply_freeze_policy(&mut model, spec);
    Ok(model)
}

fn baseline_body(b: &mut NetBuilder, c_in: usize, layout: &BaselineLayout) -> Backbone {
    let mut c = c_in;
    let blocks = layout
        .filters
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let name = format!("conv{}", i + 1);
            let layer = Layer::Sequential(vec![
                b.cr(&format!("{name}.conv"), 3, c, f, 1, Padding::Same),
                max_pool(2, 2, Padding::Valid),
            ]);
            c = f;
            (name, layer)
        })
        .collect();
    Backbone {
        blocks,
        out_channels: c,
    }
}

/// The from-scratch baseline network.
pub fn build_baseline_cnn(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    if spec.name != Architecture::BaselineCnn {
        return Err(crate::Error::Config(format!("{} is not the baseline CNN", spec.name)));
    }
    build_untrained(spec, seed)
}

/// A transfer-learning network: backbone parameters come from
/// `<weights_dir>/<name>.safetensors`, the head is freshly initialised.
pub fn build_finetuned(spec: &ArchitectureSpec, weights_dir: &Path, seed: u64) -> Result<Model> {
    let mut model = build_untrained(spec, seed)?;
    if spec.pretrained {
        load_pretrained(&mut model, spec.name, &weights_path(weights_dir, spec.name))?;
    }
    Ok(model)
}

/// Dispatches to [`build_baseline_cnn`] or [`build_finetuned`].
pub fn build_model(spec: &ArchitectureSpec, weights_dir: &Path, seed: u64) -> Result<Model> {
    match spec.name {
        Architecture::BaselineCnn => build_baseline_cnn(spec, seed),
        _ => build_finetuned(spec, weights_dir, seed),
    }
}

/// Sets per-parameter trainability from the architecture's freeze policy. The head
/// is always trainable.
pub fn apply_freeze_policy(model: &mut Model, spec: &ArchitectureSpec) {
    let top = spec.name.top_block();
    let flags: Vec<bool> = model
        .blocks()
        .iter()
        .map(|block| match (spec.freeze_policy, block.role) {
            (_, BlockRole::Head) | (FreezePolicy::FreezeNone, _) => true,
            (FreezePolicy::FreezeAllButTopBlock, BlockRole::Backbone) => block.name == top,
        })
        .collect();
    for (i, trainable) in flags.into_iter().enumerate() {
        model.set_block_trainable(i, trainable);
    }
}
