//! Fixed victim architectures. Changing any of these changes attack results,
//! so each carries a version in its name.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, LayerSpec, ModelGraph, Weights, BN_MOMENTUM};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// conv-BN-ReLU, max-pool, conv-BN-ReLU, global average pool, linear.
    DeskCnn,
    /// `DeskCnn` with equal widths and a skip connection around the second
    /// block.
    DeskResnet,
    /// One conv-BN-ReLU block and a linear head; under 1k attackable weights.
    TinyCnn,
    /// Flatten plus a single linear layer.
    Linear,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Self::DeskCnn, Self::DeskResnet, Self::TinyCnn, Self::Linear];

    pub fn name(self) -> &'static str {
        match self {
            Self::DeskCnn => "desk_cnn",
            Self::DeskResnet => "desk_resnet",
            Self::TinyCnn => "tiny_cnn",
            Self::Linear => "linear",
        }
    }

    /// Layer descriptors for `[C, H, W]` inputs and `classes` outputs.
    pub fn specs(self, input_shape: [usize; 3], classes: usize) -> Result<Vec<LayerSpec>> {
        let [c, h, w] = input_shape;
        let conv = |i, o| LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 3, stride: 1, pad: 1, bias: false };
        let bn = |ch| LayerSpec::BatchNorm2d { channels: ch, momentum: BN_MOMENTUM as f64 };
        let needs_even = |arch: &str| {
            if h != w || h % 2 != 0 || h < 4 {
                Err(Error::Config(format!("{arch} needs square inputs with even side >= 4, got {h}x{w}")))
            } else {
                Ok(())
            }
        };
        Ok(match self {
            Self::DeskCnn => {
                needs_even(self.name())?;
                vec![
                    conv(c, 8),
                    bn(8),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
                    conv(8, 16),
                    bn(16),
                    LayerSpec::Relu,
                    LayerSpec::AvgPool2d { kernel: h / 2, stride: 1 },
                    LayerSpec::Flatten,
                    LayerSpec::Linear { in_features: 16, out_features: classes },
                ]
            }
            Self::DeskResnet => {
                needs_even(self.name())?;
                vec![
                    conv(c, 8),
                    bn(8),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
                    conv(8, 8),
                    bn(8),
                    LayerSpec::Relu,
                    // activation 4 is the max-pool output
                    LayerSpec::ResidualAdd { from: 4 },
                    LayerSpec::AvgPool2d { kernel: h / 2, stride: 1 },
                    LayerSpec::Flatten,
                    LayerSpec::Linear { in_features: 8, out_features: classes },
                ]
            }
            Self::TinyCnn => {
                if h != w {
                    return Err(Error::Config(format!("tiny_cnn needs square inputs, got {h}x{w}")));
                }
                vec![
                    conv(c, 4),
                    bn(4),
                    LayerSpec::Relu,
                    LayerSpec::AvgPool2d { kernel: h, stride: 1 },
                    LayerSpec::Flatten,
                    LayerSpec::Linear { in_features: 4, out_features: classes },
                ]
            }
            Self::Linear => vec![LayerSpec::Flatten, LayerSpec::Linear { in_features: c * h * w, out_features: classes }],
        })
    }

    /// Freshly initialized model: Kaiming-uniform fan-in weights, zero
    /// biases, unit gamma, zero beta.
    pub fn build(self, input_shape: [usize; 3], classes: usize, seed: u64) -> Result<ModelGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .specs(input_shape, classes)?
            .iter()
            .map(|spec| {
                let mut layer = Layer::from_spec(spec);
                let fan_in = match spec {
                    LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
                    LayerSpec::Linear { in_features, .. } => *in_features,
                    _ => 0,
                };
                if let Some(Weights::Float(w)) = layer.weights_mut() {
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    w.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                layer
            })
            .collect();
        let mut model = ModelGraph::new(self.name(), layers, classes, input_shape)?;
        model.metadata.insert("architecture".into(), self.name().into());
        Ok(model)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected one of desk_cnn, desk_resnet, tiny_cnn, linear)")))
    }
}
