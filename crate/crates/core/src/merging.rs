//! Layerwise concatenation of two teachers into a double-width big student.
//!
//! Interior weights become block-diagonal, so at initialization the big
//! student runs both teachers side by side. The first weighted layer stacks
//! the teachers' filters over the shared input, and the last one halves and
//! concatenates them so the output is the mean of the two teacher outputs.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gates::{GateParams, HardConcrete};
use crate::layers::{BatchNorm, GateId, Layer};
use crate::network::{Block, Network};
use crate::tensor::Tensor;

/// How freshly created gates are initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateInit {
    pub constants: HardConcrete,
    pub log_alpha_mean: f64,
    pub log_alpha_std: f64,
}

impl Default for GateInit {
    fn default() -> Self {
        GateInit {
            constants: HardConcrete::default(),
            log_alpha_mean: 2.0,
            log_alpha_std: 0.01,
        }
    }
}

fn dense_parts(l: &Layer) -> Result<(&Tensor, Option<&Tensor>)> {
    match l {
        Layer::Dense { weight, bias } => Ok((weight, bias.as_ref())),
        other => Err(Error::Merge(format!("expected a dense layer, got {}", other.name()))),
    }
}

/// Merges two dense layers. See [`merge_dense_grouped`] for flattened inputs.
pub fn merge_dense(l1: &Layer, l2: &Layer, first_layer: bool, last_layer: bool) -> Result<Layer> {
    merge_dense_grouped(l1, l2, first_layer, last_layer, 1)
}

/// Merges two dense layers whose input features come in per-channel groups
/// of `group` consecutive entries (a flattened `[C, H, W]` map has
/// `group = H·W`). Big-student input feature `f` belongs to channel
/// `f / group`; channels `0..C` are teacher 1's and `C..2C` teacher 2's.
pub fn merge_dense_grouped(l1: &Layer, l2: &Layer, first_layer: bool, last_layer: bool, group: usize) -> Result<Layer> {
    let (w1, b1) = dense_parts(l1)?;
    let (w2, b2) = dense_parts(l2)?;
    if w1.shape() != w2.shape() || b1.map(Tensor::shape) != b2.map(Tensor::shape) {
        return Err(Error::Merge(format!(
            "dense shapes differ: {:?} vs {:?}",
            w1.shape(),
            w2.shape()
        )));
    }
    let (out, inp) = (w1.shape()[0], w1.shape()[1]);
    if group == 0 || inp % group != 0 {
        return Err(Error::Merge(format!("{inp} input features are not groups of {group}")));
    }
    let (big_out, big_in) = (
        if last_layer { out } else { 2 * out },
        if first_layer { inp } else { 2 * inp },
    );
    let channels = inp / group;
    // big input column -> (teacher, teacher column)
    let source_col = |f: usize| -> (usize, usize) {
        if first_layer {
            return (usize::MAX, f);
        }
        let (c, s) = (f / group, f % group);
        (c / channels, (c % channels) * group + s)
    };
    let teachers = [w1, w2];
    let mut weight = Tensor::zeros(&[big_out, big_in]);
    for r in 0..big_out {
        for f in 0..big_in {
            let (tc, col) = source_col(f);
            let value = match (first_layer, last_layer) {
                (true, true) => 0.5 * (w1.at(&[r, col]) + w2.at(&[r, col])),
                (true, false) => teachers[r / out].at(&[r % out, col]),
                (false, true) => 0.5 * teachers[tc].at(&[r, col]),
                (false, false) if r / out == tc => teachers[tc].at(&[r % out, col]),
                (false, false) => 0.0,
            };
            weight.set(&[r, f], value);
        }
    }
    let bias = match (b1, b2) {
        (Some(b1), Some(b2)) => Some(if last_layer {
            let data = b1.data().iter().zip(b2.data()).map(|(a, b)| 0.5 * (a + b)).collect();
            Tensor::new(vec![out], data)?
        } else {
            Tensor::new(vec![2 * out], [b1.data(), b2.data()].concat())?
        }),
        _ => None,
    };
    Ok(Layer::Dense { weight, bias })
}

/// Merges two bias-free convolutions: stacked filters for the first layer,
/// block-diagonal over channels otherwise.
pub fn merge_conv(c1: &Layer, c2: &Layer, first_layer: bool) -> Result<Layer> {
    let (
        Layer::Conv2d {
            weight: w1,
            stride: s1,
            padding: p1,
        },
        Layer::Conv2d {
            weight: w2,
            stride: s2,
            padding: p2,
        },
    ) = (c1, c2)
    else {
        return Err(Error::Merge("expected two conv2d layers".into()));
    };
    if w1.shape() != w2.shape() || s1 != s2 || p1 != p2 {
        return Err(Error::Merge(format!(
            "conv hyperparameters differ: {:?}/s{s1}/p{p1} vs {:?}/s{s2}/p{p2}",
            w1.shape(),
            w2.shape()
        )));
    }
    let (out, inp, kh, kw) = (w1.shape()[0], w1.shape()[1], w1.shape()[2], w1.shape()[3]);
    let kernel = kh * kw;
    let big_in = if first_layer { inp } else { 2 * inp };
    let mut data = vec![0.0; 2 * out * big_in * kernel];
    for (t, w) in [w1, w2].into_iter().enumerate() {
        let in_offset = if first_layer { 0 } else { t * inp };
        for o in 0..out {
            for i in 0..inp {
                let src = &w.data()[(o * inp + i) * kernel..(o * inp + i + 1) * kernel];
                let dst = ((t * out + o) * big_in + in_offset + i) * kernel;
                data[dst..dst + kernel].copy_from_slice(src);
            }
        }
    }
    Ok(Layer::Conv2d {
        weight: Tensor::new(vec![2 * out, big_in, kh, kw], data)?,
        stride: *s1,
        padding: *p1,
    })
}

/// Concatenates channels; teacher 1 first. Running statistics are kept.
pub fn merge_batchnorm(b1: &Layer, b2: &Layer) -> Result<Layer> {
    let (Layer::BatchNorm2d(n1), Layer::BatchNorm2d(n2)) = (b1, b2) else {
        return Err(Error::Merge("expected two batch norm layers".into()));
    };
    if n1.channels() != n2.channels() || n1.eps != n2.eps || n1.momentum != n2.momentum {
        return Err(Error::Merge("batch norm configurations differ".into()));
    }
    let cat = |a: &Tensor, b: &Tensor| Tensor::new(vec![a.len() + b.len()], [a.data(), b.data()].concat());
    Ok(Layer::BatchNorm2d(BatchNorm {
        gamma: cat(&n1.gamma, &n2.gamma)?,
        beta: cat(&n1.beta, &n2.beta)?,
        running_mean: cat(&n1.running_mean, &n2.running_mean)?,
        running_var: cat(&n1.running_var, &n2.running_var)?,
        eps: n1.eps,
        momentum: n1.momentum,
    }))
}

fn same_kind(a: &Layer, b: &Layer) -> bool {
    let shapes = |l: &Layer| l.params().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
    let hyper = match (a, b) {
        (
            Layer::Conv2d {
                stride: s1,
                padding: p1,
                ..
            },
            Layer::Conv2d {
                stride: s2,
                padding: p2,
                ..
            },
        ) => s1 == s2 && p1 == p2,
        (Layer::Activation { function: f1 }, Layer::Activation { function: f2 }) => f1 == f2,
        (Layer::MaxPool { k: k1 }, Layer::MaxPool { k: k2 }) => k1 == k2,
        (Layer::Dense { bias: b1, .. }, Layer::Dense { bias: b2, .. }) => b1.is_some() == b2.is_some(),
        (Layer::BatchNorm2d(_), Layer::BatchNorm2d(_)) | (Layer::Flatten, Layer::Flatten) => true,
        _ => false,
    };
    hyper && shapes(a) == shapes(b)
}

fn check_same_architecture(t1: &Network, t2: &Network) -> Result<()> {
    if t1.input_shape() != t2.input_shape() {
        return Err(Error::Merge(format!(
            "input shapes differ: {:?} vs {:?}",
            t1.input_shape(),
            t2.input_shape()
        )));
    }
    if t1.has_gates() || t2.has_gates() {
        return Err(Error::Merge("teachers must not carry gate layers".into()));
    }
    if t1.blocks().len() != t2.blocks().len() {
        return Err(Error::Merge(format!(
            "teachers have {} and {} blocks",
            t1.blocks().len(),
            t2.blocks().len()
        )));
    }
    for (b, (x, y)) in t1.blocks().iter().zip(t2.blocks()).enumerate() {
        let kind_matches = matches!(
            (x, y),
            (Block::Plain(_), Block::Plain(_)) | (Block::Residual { .. }, Block::Residual { .. })
        );
        if !kind_matches {
            return Err(Error::Merge(format!("block {b}: block kinds differ")));
        }
        let (lx, ly) = (x.layers(), y.layers());
        for i in 0..lx.len().max(ly.len()) {
            match (lx.get(i), ly.get(i)) {
                (Some(a), Some(c)) if same_kind(a, c) => {}
                (a, c) => {
                    return Err(Error::Merge(format!(
                        "block {b} layer {i}: {} vs {}",
                        a.map_or("nothing", Layer::name),
                        c.map_or("nothing", Layer::name)
                    )))
                }
            }
        }
    }
    Ok(())
}

struct GateAlloc<'a, R: Rng + ?Sized> {
    init: &'a GateInit,
    rng: &'a mut R,
    gates: BTreeMap<GateId, GateParams>,
}

impl<R: Rng + ?Sized> GateAlloc<'_, R> {
    fn layer(&mut self, big_shape: &[usize]) -> Result<(GateId, Layer)> {
        let id = GateId(self.gates.len() as u32);
        let width = big_shape[0];
        let params = GateParams::init(
            width,
            self.init.constants,
            self.init.log_alpha_mean,
            self.init.log_alpha_std,
            self.rng,
        )?;
        self.gates.insert(id, params);
        let layer = if big_shape.len() == 1 {
            Layer::Gate1d { width, gate: id }
        } else {
            Layer::Gate2d { channels: width, gate: id }
        };
        Ok((id, layer))
    }
}

/// Per-layer merge with the flatten group and first/last flags.
fn merge_layer(a: &Layer, b: &Layer, first: bool, last: bool, group: usize) -> Result<Layer> {
    match a {
        Layer::Dense { .. } => merge_dense_grouped(a, b, first, last, group),
        Layer::Conv2d { .. } if last => Err(Error::Merge("a convolution cannot be the output layer".into())),
        Layer::Conv2d { .. } => merge_conv(a, b, first),
        Layer::BatchNorm2d(_) => merge_batchnorm(a, b),
        other => Ok(other.clone()),
    }
}

fn doubled(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[0] *= 2;
    s
}

/// Builds the big student of two architecturally identical teachers.
///
/// Gates are inserted in front of every weighted layer that reads hidden
/// units (before a flatten when the units are conv channels), so they scale
/// the inputs of the next weighted layer. A residual stream gets one gate
/// shared by the stem and every block exit of that stage.
pub fn merge_networks<R: Rng + ?Sized>(t1: &Network, t2: &Network, init: &GateInit, rng: &mut R) -> Result<Network> {
    check_same_architecture(t1, t2)?;
    let weighted: usize = t1.layers().filter(|l| l.is_weighted()).count();
    if weighted == 0 {
        return Err(Error::Merge("teachers have no weighted layers".into()));
    }
    let mut alloc = GateAlloc {
        init,
        rng,
        gates: BTreeMap::new(),
    };
    let mut seen_weighted = 0usize;
    // teacher-width shape of the current activation, per sample
    let mut shape = t1.input_shape().to_vec();
    // a weighted layer has run since the last gate
    let mut dirty = false;
    let mut group = 1usize;
    let mut stream: Option<GateId> = None;
    let mut blocks = Vec::with_capacity(t1.blocks().len());

    let n_blocks = t1.blocks().len();
    for (bi, (x, y)) in t1.blocks().iter().zip(t2.blocks()).enumerate() {
        let mut out = Vec::new();
        let is_residual = matches!(x, Block::Residual { .. });
        if is_residual && dirty {
            return Err(Error::Merge(format!("block {bi}: residual stream has no gate position")));
        }
        if is_residual && stream.is_none() {
            return Err(Error::Merge(format!(
                "block {bi}: residual block must follow a weighted layer"
            )));
        }
        let block_input = shape.clone();
        for (la, lb) in x.layers().iter().zip(y.layers()) {
            if dirty && (la.is_weighted() || matches!(la, Layer::Flatten)) {
                let (_, gate) = alloc.layer(&doubled(&shape))?;
                out.push(gate);
                dirty = false;
            }
            if matches!(la, Layer::Flatten) {
                group = shape[1..].iter().product();
            }
            let first = la.is_weighted() && seen_weighted == 0;
            let last = la.is_weighted() && seen_weighted + 1 == weighted;
            out.push(merge_layer(la, lb, first, last, group)?);
            if la.is_weighted() {
                seen_weighted += 1;
                dirty = !last;
                group = 1;
            }
            shape = la.output_shape(&shape)?;
        }
        match x {
            Block::Plain(_) => {
                let next_is_residual = matches!(t1.blocks().get(bi + 1), Some(Block::Residual { .. }));
                if next_is_residual && dirty {
                    let (id, gate) = alloc.layer(&doubled(&shape))?;
                    out.push(gate);
                    stream = Some(id);
                    dirty = false;
                } else if !next_is_residual {
                    stream = None;
                }
                blocks.push(Block::Plain(out));
            }
            Block::Residual { .. } => {
                if shape != block_input {
                    return Err(Error::Merge(format!("block {bi}: residual body changes shape")));
                }
                dirty = false;
                blocks.push(Block::Residual {
                    body: out,
                    entry_gate: stream,
                    exit_gate: stream,
                });
                if bi + 1 == n_blocks {
                    stream = None;
                }
            }
        }
    }
    Network::new(t1.input_shape().to_vec(), blocks, alloc.gates)
}
