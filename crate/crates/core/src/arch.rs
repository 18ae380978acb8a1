//! Teacher architectures. Builders return gate-free networks; gates are added
//! when two teachers are merged into a big student.

use std::collections::BTreeMap;

use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, BatchNorm, Layer};
use crate::network::{Block, Network};

/// Fully connected network with the given widths, `activation` between
/// layers and no activation on the output.
pub fn build_mlp<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Network> {
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        if i > 0 {
            layers.push(Layer::Activation { function: activation });
        }
        layers.push(Layer::dense(pair[0], pair[1], true, rng));
    }
    Network::new(vec![widths[0]], vec![Block::Plain(layers)], BTreeMap::new())
}

/// `Dense(1,100) → activation → Dense(100,1)`.
pub fn build_sine_mlp<R: Rng + ?Sized>(activation: Activation, rng: &mut R) -> Network {
    build_mlp(&[1, 100, 1], activation, rng).expect("static architecture")
}

/// LeNet on `3×28×28` inputs. The first convolution pads by 2 so the second
/// pooling stage leaves `16×5×5 = 400` features.
pub fn build_lenet<R: Rng + ?Sized>(classes: usize, rng: &mut R) -> Network {
    let layers = vec![
        Layer::conv(3, 6, 5, 1, 2, rng),
        Layer::relu(),
        Layer::MaxPool { k: 2 },
        Layer::conv(6, 16, 5, 1, 0, rng),
        Layer::relu(),
        Layer::MaxPool { k: 2 },
        Layer::Flatten,
        Layer::dense(400, 120, true, rng),
        Layer::relu(),
        Layer::dense(120, 80, true, rng),
        Layer::relu(),
        Layer::dense(80, classes, true, rng),
    ];
    Network::new(vec![3, 28, 28], vec![Block::Plain(layers)], BTreeMap::new()).expect("static architecture")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyResNet {
    pub input_channels: usize,
    pub input_size: usize,
    pub channels: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl Default for TinyResNet {
    fn default() -> Self {
        TinyResNet {
            input_channels: 3,
            input_size: 8,
            channels: 4,
            blocks: 2,
            classes: 10,
        }
    }
}

/// Stem `conv-BN-relu`, `blocks` residual blocks `conv-BN-relu-conv-BN`
/// with identity skips, global max pooling and a dense head.
pub fn build_tiny_resnet<R: Rng + ?Sized>(cfg: &TinyResNet, rng: &mut R) -> Result<Network> {
    let c = cfg.channels;
    let mut blocks = vec![Block::Plain(vec![
        Layer::conv(cfg.input_channels, c, 3, 1, 1, rng),
        Layer::BatchNorm2d(BatchNorm::new(c)),
        Layer::relu(),
    ])];
    for _ in 0..cfg.blocks {
        blocks.push(Block::Residual {
            body: vec![
                Layer::conv(c, c, 3, 1, 1, rng),
                Layer::BatchNorm2d(BatchNorm::new(c)),
                Layer::relu(),
                Layer::conv(c, c, 3, 1, 1, rng),
                Layer::BatchNorm2d(BatchNorm::new(c)),
            ],
            entry_gate: None,
            exit_gate: None,
        });
    }
    blocks.push(Block::Plain(vec![
        Layer::MaxPool { k: cfg.input_size },
        Layer::Flatten,
        Layer::dense(c, cfg.classes, true, rng),
    ]));
    Network::new(
        vec![cfg.input_channels, cfg.input_size, cfg.input_size],
        blocks,
        BTreeMap::new(),
    )
}

/// Architecture selector used by configs and the strategy drivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    SineMlp {
        #[serde(default = "relu")]
        activation: Activation,
    },
    Mlp { widths: Vec<usize>, activation: Activation },
    Lenet { classes: usize },
    TinyResnet(TinyResNet),
}

fn relu() -> Activation {
    Activation::Relu
}

impl Arch {
    /// The sine model with its default ReLU hidden layer.
    pub fn sine() -> Self {
        Arch::SineMlp { activation: relu() }
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Network> {
        match self {
            Arch::SineMlp { activation } => Ok(build_sine_mlp(*activation, rng)),
            Arch::Mlp { widths, activation } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::config("arch.widths", "need at least two positive widths"));
                }
                build_mlp(widths, *activation, rng)
            }
            Arch::Lenet { classes } => {
                if *classes == 0 {
                    return Err(Error::config("arch.classes", "must be positive"));
                }
                Ok(build_lenet(*classes, rng))
            }
            Arch::TinyResnet(cfg) => build_tiny_resnet(cfg, rng),
        }
    }
}
