use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The nine benchmarked networks, in results-table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "BaselineCNN")]
    BaselineCnn,
    #[serde(rename = "VGG16")]
    Vgg16,
    #[serde(rename = "VGG19")]
    Vgg19,
    #[serde(rename = "Inception_V3")]
    InceptionV3,
    #[serde(rename = "Xception")]
    Xception,
    #[serde(rename = "DenseNet201")]
    DenseNet201,
    #[serde(rename = "MobileNet_V2")]
    MobileNetV2,
    #[serde(rename = "Inception_Resnet_V2")]
    InceptionResNetV2,
    #[serde(rename = "Resnet50")]
    ResNet50,
}

impl Architecture {
    pub const ALL: [Architecture; 9] = [
        Architecture::BaselineCnn,
        Architecture::Vgg16,
        Architecture::Vgg19,
        Architecture::InceptionV3,
        Architecture::Xception,
        Architecture::DenseNet201,
        Architecture::MobileNetV2,
        Architecture::InceptionResNetV2,
        Architecture::ResNet50,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::BaselineCnn => "BaselineCNN",
            Architecture::Vgg16 => "VGG16",
            Architecture::Vgg19 => "VGG19",
            Architecture::InceptionV3 => "Inception_V3",
            Architecture::Xception => "Xception",
            Architecture::DenseNet201 => "DenseNet201",
            Architecture::MobileNetV2 => "MobileNet_V2",
            Architecture::InceptionResNetV2 => "Inception_Resnet_V2",
            Architecture::ResNet50 => "Resnet50",
        }
    }

    pub fn is_pretrained_backbone(self) -> bool {
        self != Architecture::BaselineCnn
    }

    /// Name of the backbone block left trainable under
    /// [`FreezePolicy::FreezeAllButTopBlock`].
    pub fn top_block(self) -> &'static str {
        match self {
            Architecture::BaselineCnn => "conv3",
            Architecture::Vgg16 | Architecture::Vgg19 => "block5",
            Architecture::InceptionV3 => "mixed10",
            Architecture::Xception => "exit_flow",
            Architecture::DenseNet201 => "conv5",
            Architecture::MobileNetV2 => "top",
            Architecture::InceptionResNetV2 => "top",
            Architecture::ResNet50 => "conv5",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Case-insensitive; also accepts "CNN" and the "DensNet201" spelling.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim();
        if key.eq_ignore_ascii_case("cnn") {
            return Ok(Architecture::BaselineCnn);
        }
        if key.eq_ignore_ascii_case("densnet201") {
            return Ok(Architecture::DenseNet201);
        }
        Architecture::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(key))
            .ok_or_else(|| {
                let known: Vec<_> = Architecture::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown architecture {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    FreezeAllButTopBlock,
    FreezeNone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Flatten,
    GlobalAveragePool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
}

/// Classification head placed on top of the feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub pooling: Pooling,
    pub hidden_units: usize,
    pub hidden_activation: HiddenActivation,
    pub output_units: usize,
    pub output_activation: OutputActivation,
}

impl HeadSpec {
    pub fn new(pooling: Pooling, hidden_units: usize) -> Self {
        Self {
            pooling,
            hidden_units,
            hidden_activation: HiddenActivation::Relu,
            output_units: 1,
            output_activation: OutputActivation::Sigmoid,
        }
    }
}

/// Convolution widths of the baseline network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineLayout {
    pub filters: Vec<usize>,
}

impl Default for BaselineLayout {
    fn default() -> Self {
        Self {
            filters: vec![32, 64, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: Architecture,
    pub input_size: usize,
    pub channels: usize,
    pub pretrained: bool,
    pub freeze_policy: FreezePolicy,
    pub head: HeadSpec,
    pub l2_coefficient: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineLayout>,
}

impl ArchitectureSpec {
    pub fn default_for(name: Architecture) -> Self {
        match name {
            Architecture::BaselineCnn => Self {
                name,
                input_size: 224,
                channels: 3,
                pretrained: false,
                freeze_policy: FreezePolicy::FreezeNone,
                head: HeadSpec::new(Pooling::Flatten, 128),
                l2_coefficient: 1e-4,
                baseline: Some(BaselineLayout::default()),
            },
            _ => Self {
                name,
                input_size: if name == Architecture::InceptionV3 { 299 } else { 224 },
                channels: 3,
                pretrained: true,
                freeze_policy: FreezePolicy::FreezeAllButTopBlock,
                head: HeadSpec::new(Pooling::GlobalAveragePool, 256),
                l2_coefficient: 1e-4,
                baseline: None,
            },
        }
    }

    /// Smallest input the architecture's valid-padded stem accepts.
    pub fn min_input_size(&self) -> usize {
        match self.name {
            Architecture::BaselineCnn => 8,
            Architecture::InceptionV3 | Architecture::InceptionResNetV2 => 75,
            Architecture::Xception => 71,
            _ => 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name)));
        if self.input_size < self.min_input_size() {
            return fail(format!(
                "input_size {} below the minimum {}",
                self.input_size,
                self.min_input_size()
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.name == Architecture::BaselineCnn {
            if self.pretrained {
                return fail("the baseline CNN is never pretrained".into());
            }
            let layout = self.baseline.clone().unwrap_or_default();
            if layout.filters.is_empty() || layout.filters.contains(&0) {
                return fail("baseline filters must be positive".into());
            }
            if self.input_size >> layout.filters.len() == 0 {
                return fail("input too small for the number of pooling stages".into());
            }
        }
        if self.head.output_units != 1 {
            return fail("the head must end in a single sigmoid unit".into());
        }
        if self.head.hidden_units == 0 {
            return fail("head.hidden_units must be positive".into());
        }
        if !(self.l2_coefficient.is_finite() && self.l2_coefficient >= 0.0) {
            return fail("l2_coefficient must be >= 0".into());
        }
        Ok(())
    }
}

/// Default specs for all nine networks: baseline first, then the
/// results-table order.
pub fn list_architectures() -> Vec<ArchitectureSpec> {
    Architecture::ALL
        .into_iter()
        .map(ArchitectureSpec::default_for)
        .collect()
}
