//! Compression of a gated big student back to teacher width.
//!
//! Every gate keeps the half of its units with the highest open probability.
//! Producers of a gated activation lose the dropped output units, consumers
//! lose the matching inputs, and the deterministic gate value of each kept
//! unit is folded into the consumer's input weights. Gates on a residual
//! stream are applied to the identity skip as well, where no weight can absorb
//! them, so those gates are binarized: kept units pass with value 1.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::layers::{GateId, Layer};
use crate::network::{Block, Network};
use crate::tensor::Tensor;

/// Unit indices by descending open probability. Ties go to the lower index.
pub fn rank_units(p_open: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p_open.len()).collect();
    order.sort_by(|&a, &b| p_open[b].total_cmp(&p_open[a]).then(a.cmp(&b)));
    order
}

/// The top half of [`rank_units`], in ascending index order.
pub fn kept_units(p_open: &[f64]) -> Result<Vec<usize>> {
    let k = p_open.len();
    if k == 0 || !k.is_multiple_of(2) {
        return Err(Error::contract(format!("cannot halve a gate of width {k}")));
    }
    let mut kept = rank_units(p_open);
    kept.truncate(k / 2);
    kept.sort_unstable();
    Ok(kept)
}

/// Ids of gates that sit on a residual stream.
pub fn stream_gates(net: &Network) -> BTreeSet<GateId> {
    net.blocks()
        .iter()
        .filter_map(|b| match b {
            Block::Residual { exit_gate, .. } => *exit_gate,
            Block::Plain(_) => None,
        })
        .collect()
}

/// What compression keeps from one gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSelection {
    pub kept: Vec<usize>,
    /// Factor folded into the consumer for each kept unit.
    pub scale: Vec<f64>,
}

/// Kept units and folded factors for every gate of `net`.
pub fn select(net: &Network) -> Result<BTreeMap<GateId, GateSelection>> {
    let streams = stream_gates(net);
    net.gates()
        .iter()
        .map(|(id, g)| {
            let kept = kept_units(&g.p_open_values()).map_err(|e| Error::contract(format!("gate {id}: {e}")))?;
            let det = g.deterministic_values();
            let scale = if streams.contains(id) {
                vec![1.0; kept.len()]
            } else {
                kept.iter().map(|&u| det[u]).collect()
            };
            Ok((*id, GateSelection { kept, scale }))
        })
        .collect()
}

/// Gate values under which the big student computes exactly what the
/// compressed network computes: the folded factor on kept units, 0 elsewhere.
pub fn masked_gate_values(net: &Network) -> Result<BTreeMap<GateId, Vec<f64>>> {
    Ok(select(net)?
        .into_iter()
        .map(|(id, sel)| {
            let mut v = vec![0.0; net.gates()[&id].width()];
            for (&u, &s) in sel.kept.iter().zip(&sel.scale) {
                v[u] = s;
            }
            (id, v)
        })
        .collect())
}

struct Pending<'a> {
    sel: &'a GateSelection,
    group: usize,
}

fn slice_outputs(layer: &mut Layer, kept: &[usize]) -> Result<()> {
    let pick = |t: &Tensor| -> Result<Tensor> {
        let row = t.len() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] = kept.len();
        let data = kept.iter().flat_map(|&k| t.data()[k * row..(k + 1) * row].iter().copied()).collect();
        Tensor::new(shape, data)
    };
    match layer {
        Layer::Dense { weight, bias } => {
            *weight = pick(weight)?;
            if let Some(b) = bias {
                *b = pick(b)?;
            }
        }
        Layer::Conv2d { weight, .. } => *weight = pick(weight)?,
        Layer::BatchNorm2d(bn) => {
            bn.gamma = pick(&bn.gamma)?;
            bn.beta = pick(&bn.beta)?;
            bn.running_mean = pick(&bn.running_mean)?;
            bn.running_var = pick(&bn.running_var)?;
        }
        other => return Err(Error::contract(format!("cannot slice the outputs of {}", other.name()))),
    }
    Ok(())
}

/// Keeps the input groups of `pending` and folds their scale into the weights.
fn slice_inputs(layer: &mut Layer, pending: &Pending<'_>) -> Result<()> {
    let Pending { sel, group } = pending;
    let weight = match layer {
        Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => weight,
        other => return Err(Error::contract(format!("cannot slice the inputs of {}", other.name()))),
    };
    // both layouts are [out, in_channels, inner]: dense has inner 1 and a
    // flatten group per channel, conv has the kernel as inner and group 1
    let shape = weight.shape().to_vec();
    let out = shape[0];
    let inner: usize = shape[2..].iter().product::<usize>() * group;
    let in_units = shape[1] / group;
    if sel.kept.iter().any(|&k| k >= in_units) {
        return Err(Error::contract(format!(
            "{} has {in_units} input units, selection exceeds it",
            layer.name()
        )));
    }
    let old = weight.data();
    let mut data = Vec::with_capacity(out * sel.kept.len() * inner);
    for o in 0..out {
        for (&k, &s) in sel.kept.iter().zip(&sel.scale) {
            let start = (o * in_units + k) * inner;
            data.extend(old[start..start + inner].iter().map(|w| w * s));
        }
    }
    let mut new_shape = shape;
    new_shape[1] = sel.kept.len() * group;
    *weight = Tensor::new(new_shape, data)?;
    Ok(())
}

/// Slices producers walking back from the end of `layers` up to and
/// including the last weighted layer.
fn slice_producers(layers: &mut [Layer], kept: &[usize], id: GateId) -> Result<()> {
    for layer in layers.iter_mut().rev() {
        match layer {
            Layer::BatchNorm2d(_) => slice_outputs(layer, kept)?,
            Layer::Dense { .. } | Layer::Conv2d { .. } => return slice_outputs(layer, kept),
            Layer::Activation { .. } | Layer::MaxPool { .. } => {}
            other => {
                return Err(Error::contract(format!(
                    "gate {id}: unexpected {} between producer and gate",
                    other.name()
                )))
            }
        }
    }
    Err(Error::contract(format!("gate {id} has no producing layer in its block")))
}

/// Builds the compressed, gate-free network from a gated big student.
pub fn compress(big: &Network) -> Result<Network> {
    if !big.has_gates() {
        return Err(Error::contract("network has no gates to compress"));
    }
    let selections = select(big)?;
    let mut shape = big.input_shape().to_vec();
    let mut pending: Option<Pending<'_>> = None;
    let mut blocks = Vec::with_capacity(big.blocks().len());

    for block in big.blocks() {
        let mut out: Vec<Layer> = Vec::new();
        for layer in block.layers() {
            let next_shape = layer.output_shape(&shape)?;
            if let Some(id) = layer.gate() {
                let sel = &selections[&id];
                slice_producers(&mut out, &sel.kept, id)?;
                pending = Some(Pending { sel, group: 1 });
            } else {
                let mut layer = layer.clone();
                if matches!(layer, Layer::Flatten) {
                    if let Some(p) = pending.as_mut() {
                        p.group = shape[1..].iter().product();
                    }
                }
                if layer.is_weighted() {
                    if let Some(p) = pending.take() {
                        slice_inputs(&mut layer, &p)?;
                    }
                }
                out.push(layer);
            }
            shape = next_shape;
        }
        match block {
            Block::Plain(_) => blocks.push(Block::Plain(out)),
            Block::Residual { exit_gate, .. } => {
                if let Some(id) = exit_gate {
                    let sel = &selections[id];
                    slice_producers(&mut out, &sel.kept, *id)?;
                    pending = Some(Pending { sel, group: 1 });
                }
                blocks.push(Block::Residual {
                    body: out,
                    entry_gate: None,
                    exit_gate: None,
                });
            }
        }
    }
    if pending.is_some() {
        return Err(Error::contract("the last gate has no consuming layer"));
    }
    Network::new(big.input_shape().to_vec(), blocks, BTreeMap::new())
}

/// One row per gated unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub gate: GateId,
    pub unit: usize,
    pub p_open: f64,
    pub kept: bool,
}

pub fn compression_report(big: &Network) -> Result<Vec<ReportRow>> {
    let selections = select(big)?;
    let mut rows = Vec::new();
    for (id, g) in big.gates() {
        let kept: BTreeSet<usize> = selections[id].kept.iter().copied().collect();
        rows.extend(g.p_open_values().into_iter().enumerate().map(|(unit, p)| ReportRow {
            gate: *id,
            unit,
            p_open: p,
            kept: kept.contains(&unit),
        }));
    }
    Ok(rows)
}

/// CSV with header `layer,unit_index,p_open,kept`.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("layer,unit_index,p_open,kept\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.gate, r.unit, r.p_open, r.kept));
    }
    s
}
