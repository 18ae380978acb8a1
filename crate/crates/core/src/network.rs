//! Networks: an ordered list of plain and residual blocks plus a registry of
//! gate parameters referenced by id.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{deterministic_gate, sample_gates, GateParams};
use crate::layers::{Activation, GateId, Layer};
use crate::tape::{NormMode, Tape, Var};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Plain(Vec<Layer>),
    /// `relu(x + body(x))`, followed by the exit gate when present. The entry
    /// gate names the gate that last touched the stream `x`; in a gated
    /// network it must equal the exit gate so the skip path stays `x + f(x)`.
    Residual {
        body: Vec<Layer>,
        entry_gate: Option<GateId>,
        exit_gate: Option<GateId>,
    },
}

impl Block {
    pub fn layers(&self) -> &[Layer] {
        match self {
            Block::Plain(layers) => layers,
            Block::Residual { body, .. } => body,
        }
    }

    pub fn layers_mut(&mut self) -> &mut Vec<Layer> {
        match self {
            Block::Plain(layers) => layers,
            Block::Residual { body, .. } => body,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How gate layers behave during a forward pass.
pub enum GateMode<'a> {
    /// Gates are the identity.
    Off,
    /// One hard-concrete realization per gate id, shared by the minibatch.
    Stochastic(&'a mut ChaCha8Rng),
    /// Expected-value gates.
    Deterministic,
    /// Caller-supplied gate values per id.
    Fixed(&'a BTreeMap<GateId, Vec<f64>>),
}

/// Which parameters are recorded as differentiable on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Weights,
    Gates,
    Nothing,
}

impl Trainable {
    fn weights(self) -> bool {
        matches!(self, Trainable::All | Trainable::Weights)
    }

    fn gates(self) -> bool {
        matches!(self, Trainable::All | Trainable::Gates)
    }
}

/// Tape handles for every parameter of a network, in [`Network::parameters`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    params: Vec<Var>,
    gates: BTreeMap<GateId, Var>,
}

impl Bound {
    pub fn gate(&self, id: GateId) -> Option<Var> {
        self.gates.get(&id).copied()
    }

    pub fn gate_vars(&self) -> impl Iterator<Item = (GateId, Var)> + '_ {
        self.gates.iter().map(|(k, v)| (*k, *v))
    }
}

/// Result of a forward pass. `norm_stats` holds (mean, unbiased variance) for
/// every batch-norm layer in traversal order when run in train mode.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    pub norm_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    blocks: Vec<Block>,
    gates: BTreeMap<GateId, GateParams>,
}

struct PassState<'g, 'r> {
    gate_mode: &'g mut GateMode<'r>,
    realized: BTreeMap<GateId, Var>,
    norm_stats: Vec<(Vec<f64>, Vec<f64>)>,
    cursor: usize,
    mode: Mode,
}

impl Network {
    /// Builds and validates a network. Adjacent plain blocks are merged.
    pub fn new(input_shape: Vec<usize>, blocks: Vec<Block>, gates: BTreeMap<GateId, GateParams>) -> Result<Self> {
        let mut normalized: Vec<Block> = Vec::with_capacity(blocks.len());
        for block in blocks {
            match (normalized.last_mut(), block) {
                (_, Block::Plain(layers)) if layers.is_empty() => {}
                (Some(Block::Plain(prev)), Block::Plain(layers)) => prev.extend(layers),
                (_, b) => normalized.push(b),
            }
        }
        let net = Network {
            input_shape,
            blocks: normalized,
            gates,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn gates(&self) -> &BTreeMap<GateId, GateParams> {
        &self.gates
    }

    pub fn gate(&self, id: GateId) -> Option<&GateParams> {
        self.gates.get(&id)
    }

    /// Mutable access to a registry gate; every layer referencing `id` sees the change.
    pub fn gate_mut(&mut self, id: GateId) -> Option<&mut GateParams> {
        self.gates.get_mut(&id)
    }

    pub fn has_gates(&self) -> bool {
        !self.gates.is_empty()
    }

    /// All layers in execution order (residual bodies inline).
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.blocks.iter().flat_map(|b| b.layers().iter())
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().last().cloned().unwrap_or_else(|| self.input_shape.clone())
    }

    /// Per-sample shape after every layer, in execution order.
    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut shape = self.input_shape.clone();
        for block in &self.blocks {
            for layer in block.layers() {
                shape = layer.output_shape(&shape).expect("validated");
                out.push(shape.clone());
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::dim(format!("input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut stream_gate: Option<GateId> = None;
        for (b, block) in self.blocks.iter().enumerate() {
            let block_input = shape.clone();
            if let Block::Residual {
                entry_gate,
                exit_gate,
                ..
            } = block
            {
                if entry_gate != exit_gate {
                    return Err(Error::contract(format!(
                        "residual block {b}: entry gate {entry_gate:?} differs from exit gate {exit_gate:?}"
                    )));
                }
                if entry_gate.is_some() && *entry_gate != stream_gate {
                    return Err(Error::contract(format!(
                        "residual block {b}: entry gate {entry_gate:?} is not the gate on its input stream ({stream_gate:?})"
                    )));
                }
            }
            for (i, layer) in block.layers().iter().enumerate() {
                shape = layer.output_shape(&shape).map_err(|e| at_layer(e, b, i, layer))?;
                if let Some(id) = layer.gate() {
                    self.check_gate(id, shape[0])
                        .map_err(|e| Error::contract(format!("block {b} layer {i}: {e}")))?;
                    stream_gate = Some(id);
                } else {
                    stream_gate = None;
                }
            }
            if let Block::Residual { exit_gate, .. } = block {
                if shape != block_input {
                    return Err(Error::dim(format!(
                        "residual block {b}: body maps {block_input:?} to {shape:?}"
                    )));
                }
                if let Some(id) = exit_gate {
                    if shape.len() < 2 {
                        return Err(Error::dim(format!("residual block {b}: gated stream needs channels")));
                    }
                    self.check_gate(*id, shape[0])
                        .map_err(|e| Error::contract(format!("residual block {b}: {e}")))?;
                }
                stream_gate = *exit_gate;
            }
        }
        Ok(())
    }

    fn check_gate(&self, id: GateId, width: usize) -> Result<()> {
        match self.gates.get(&id) {
            None => Err(Error::contract(format!("gate {id} is not registered"))),
            Some(g) if g.width() != width => Err(Error::contract(format!(
                "gate {id} has {} units, layer needs {width}",
                g.width()
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Trainable tensors: layer parameters in execution order, then gate
    /// log-alphas in id order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers().flat_map(|l| l.params()).collect();
        out.extend(self.gates.values().map(|g| &g.log_alpha));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .blocks
            .iter_mut()
            .flat_map(|b| b.layers_mut().iter_mut())
            .flat_map(|l| l.params_mut())
            .collect();
        out.extend(self.gates.values_mut().map(|g| &mut g.log_alpha));
        out
    }

    /// Number of scalar parameters in weighted layers (gates excluded).
    pub fn weight_count(&self) -> usize {
        self.layers()
            .filter(|l| l.is_weighted())
            .flat_map(|l| l.params())
            .map(|t| t.len())
            .sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Bound {
        let params = self
            .layers()
            .flat_map(|l| l.params())
            .map(|t| {
                if trainable.weights() {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        let gates = self
            .gates
            .iter()
            .map(|(id, g)| {
                let v = if trainable.gates() {
                    tape.param(&g.log_alpha)
                } else {
                    tape.constant(&g.log_alpha)
                };
                (*id, v)
            })
            .collect();
        Bound { params, gates }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode, gate_mode: &mut GateMode<'_>) -> Result<Forward> {
        let xs = tape.shape(x);
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "input batch {xs:?} does not match network input {:?}",
                self.input_shape
            )));
        }
        let mut state = PassState {
            gate_mode,
            realized: BTreeMap::new(),
            norm_stats: Vec::new(),
            cursor: 0,
            mode,
        };
        let mut h = x;
        for (b, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Plain(layers) => {
                    for (i, layer) in layers.iter().enumerate() {
                        h = self
                            .apply(tape, bound, layer, h, &mut state)
                            .map_err(|e| at_layer(e, b, i, layer))?;
                    }
                }
                Block::Residual { body, exit_gate, .. } => {
                    let mut z = h;
                    for (i, layer) in body.iter().enumerate() {
                        z = self
                            .apply(tape, bound, layer, z, &mut state)
                            .map_err(|e| at_layer(e, b, i, layer))?;
                    }
                    let joined = tape.add(h, z)?;
                    h = tape.relu(joined);
                    if let Some(id) = exit_gate {
                        h = self.apply_gate(tape, bound, *id, h, &mut state)?;
                    }
                }
            }
        }
        Ok(Forward {
            output: h,
            norm_stats: state.norm_stats,
        })
    }

    fn next_param(bound: &Bound, state: &mut PassState<'_, '_>) -> Var {
        let v = bound.params[state.cursor];
        state.cursor += 1;
        v
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, layer: &Layer, h: Var, state: &mut PassState<'_, '_>) -> Result<Var> {
        match layer {
            Layer::Dense { bias, .. } => {
                let w = Self::next_param(bound, state);
                let b = bias.as_ref().map(|_| Self::next_param(bound, state));
                tape.linear(h, w, b)
            }
            Layer::Conv2d { stride, padding, .. } => {
                let w = Self::next_param(bound, state);
                tape.conv2d(h, w, *stride, *padding)
            }
            Layer::BatchNorm2d(bn) => {
                let gamma = Self::next_param(bound, state);
                let beta = Self::next_param(bound, state);
                let norm_mode = match state.mode {
                    Mode::Train => NormMode::Batch,
                    Mode::Eval => NormMode::Running,
                };
                let (y, stats) = tape.batch_norm(
                    h,
                    gamma,
                    beta,
                    bn.eps,
                    norm_mode,
                    (bn.running_mean.data(), bn.running_var.data()),
                )?;
                state.norm_stats.extend(stats);
                Ok(y)
            }
            Layer::Activation { function } => Ok(match function {
                Activation::Relu => tape.relu(h),
                Activation::Tanh => tape.tanh(h),
            }),
            Layer::MaxPool { k } => tape.max_pool(h, *k),
            Layer::Flatten => tape.flatten(h),
            Layer::Gate1d { gate, .. } | Layer::Gate2d { gate, .. } => self.apply_gate(tape, bound, *gate, h, state),
        }
    }

    fn apply_gate(&self, tape: &mut Tape, bound: &Bound, id: GateId, h: Var, state: &mut PassState<'_, '_>) -> Result<Var> {
        if let GateMode::Off = state.gate_mode {
            return Ok(h);
        }
        let g = match state.realized.get(&id) {
            Some(g) => *g,
            None => {
                let params = self
                    .gates
                    .get(&id)
                    .ok_or_else(|| Error::contract(format!("gate {id} is not registered")))?;
                let la = bound
                    .gate(id)
                    .ok_or_else(|| Error::contract(format!("gate {id} is not bound")))?;
                let g = match state.gate_mode {
                    GateMode::Off => unreachable!(),
                    GateMode::Stochastic(rng) => sample_gates(tape, la, &params.constants, *rng)?,
                    GateMode::Deterministic => deterministic_gate(tape, la, &params.constants),
                    GateMode::Fixed(values) => {
                        let v = values
                            .get(&id)
                            .ok_or_else(|| Error::contract(format!("no fixed values for gate {id}")))?;
                        tape.constant_from(vec![params.width()], v.clone())?
                    }
                };
                state.realized.insert(id, g);
                g
            }
        };
        tape.scale_channels(h, g)
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_norm_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) {
        let mut it = stats.iter();
        for block in &mut self.blocks {
            for layer in block.layers_mut() {
                if let Layer::BatchNorm2d(bn) = layer {
                    if let Some((mean, var)) = it.next() {
                        bn.update_running(mean, var);
                    }
                }
            }
        }
    }

    /// Adds the tape gradients of the bound parameters into their tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        let vars: Vec<Var> = bound.params.iter().copied().chain(bound.gates.values().copied()).collect();
        let mut params = self.parameters_mut();
        if vars.len() != params.len() {
            return Err(Error::contract("binding does not match this network"));
        }
        for (p, v) in params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Eval-mode forward without gradients.
    pub fn predict(&self, x: &Tensor, gate_mode: &mut GateMode<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, &bound, xv, Mode::Eval, gate_mode)?;
        Ok(tape.to_tensor(out.output))
    }

    /// Copy with every gate layer and the registry removed.
    pub fn without_gates(&self) -> Network {
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Plain(layers) => Block::Plain(layers.iter().filter(|l| l.gate().is_none()).cloned().collect()),
                Block::Residual { body, .. } => Block::Residual {
                    body: body.iter().filter(|l| l.gate().is_none()).cloned().collect(),
                    entry_gate: None,
                    exit_gate: None,
                },
            })
            .collect();
        Network::new(self.input_shape.clone(), blocks, BTreeMap::new()).expect("removing gates keeps shapes")
    }

    /// Architecture fingerprint: layer kinds with parameter shapes, block
    /// structure and input shape. Gate layers are excluded.
    pub fn shape_signature(&self) -> Vec<String> {
        let mut sig = vec![format!("input {:?}", self.input_shape)];
        for block in &self.blocks {
            if let Block::Residual { .. } = block {
                sig.push("residual{".into());
            }
            for layer in block.layers().iter().filter(|l| l.gate().is_none()) {
                let shapes: Vec<&[usize]> = layer.params().iter().map(|t| t.shape()).collect();
                let extra = match layer {
                    Layer::Conv2d { stride, padding, .. } => format!(" s{stride} p{padding}"),
                    Layer::Activation { function } => format!(" {function:?}"),
                    Layer::MaxPool { k } => format!(" k{k}"),
                    Layer::Dense { bias, .. } => format!(" bias={}", bias.is_some()),
                    _ => String::new(),
                };
                sig.push(format!("{}{extra} {shapes:?}", layer.name()));
            }
            if let Block::Residual { .. } = block {
                sig.push("}".into());
            }
        }
        sig
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetworkDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: NetworkDoc = serde_json::from_str(s)?;
        doc.into_network()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn at_layer(e: Error, block: usize, index: usize, layer: &Layer) -> Error {
    match e {
        Error::Dimension(msg) => Error::Dimension(format!("block {block} layer {index} ({}): {msg}", layer.name())),
        other => other,
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    format_version: u32,
    input_shape: Vec<usize>,
    layers: Vec<Item>,
    gates: BTreeMap<GateId, GateParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Item {
    Residual(ResidualDoc),
    Layer(Layer),
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ResidualKind {
    Residual,
}

#[derive(Serialize, Deserialize)]
struct ResidualDoc {
    kind: ResidualKind,
    body: Vec<Layer>,
    entry_gate: Option<GateId>,
    exit_gate: Option<GateId>,
}

impl From<&Network> for NetworkDoc {
    fn from(net: &Network) -> Self {
        let mut layers = Vec::new();
        for block in &net.blocks {
            match block {
                Block::Plain(ls) => layers.extend(ls.iter().cloned().map(Item::Layer)),
                Block::Residual {
                    body,
                    entry_gate,
                    exit_gate,
                } => layers.push(Item::Residual(ResidualDoc {
                    kind: ResidualKind::Residual,
                    body: body.clone(),
                    entry_gate: *entry_gate,
                    exit_gate: *exit_gate,
                })),
            }
        }
        NetworkDoc {
            format_version: FORMAT_VERSION,
            input_shape: net.input_shape.clone(),
            layers,
            gates: net.gates.clone(),
        }
    }
}

impl NetworkDoc {
    fn into_network(self) -> Result<Network> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::contract(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let blocks = self
            .layers
            .into_iter()
            .map(|item| match item {
                Item::Layer(l) => Block::Plain(vec![l]),
                Item::Residual(r) => Block::Residual {
                    body: r.body,
                    entry_gate: r.entry_gate,
                    exit_gate: r.exit_gate,
                },
            })
            .collect();
        Network::new(self.input_shape, blocks, self.gates)
    }
}
