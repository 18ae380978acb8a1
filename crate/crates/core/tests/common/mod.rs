#![allow(dead_code)]

use std::collections::BTreeMap;

use netmerge::arch::{build_lenet, build_mlp, build_sine_mlp, build_tiny_resnet, TinyResNet};
use netmerge::{Activation, Block, GateId, GateMode, Mode, Network, Tape, Tensor, Trainable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random parameters everywhere and non-trivial batch-norm running stats.
pub fn scramble(net: &mut Network, rng: &mut ChaCha8Rng) {
    for p in net.parameters_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x = Tensor::normal(&batch_shape(net, 8), 0.0, 1.0, rng);
    for _ in 0..3 {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, Trainable::Nothing);
        let xv = tape.constant(&x);
        let out = net.forward(&mut tape, &bound, xv, Mode::Train, &mut GateMode::Off).unwrap();
        net.apply_norm_stats(&out.norm_stats);
    }
}

pub fn batch_shape(net: &Network, n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(net.input_shape());
    s
}

pub fn random_input(net: &Network, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::normal(&batch_shape(net, n), 0.0, 1.0, rng)
}

/// Largest |a-b| / max(|a|, |b|, 1).
pub fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Two scrambled teachers of kind `mlp`, `sine`, `lenet` or `resnet`.
pub fn teachers(kind: &str, seed: u64) -> (Network, Network) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let build = |r: &mut ChaCha8Rng| match kind {
        "mlp" => build_mlp(&[3, 5, 4, 2], Activation::Tanh, r).unwrap(),
        "sine" => build_sine_mlp(Activation::Relu, r),
        "lenet" => build_lenet(10, r),
        "resnet" => build_tiny_resnet(&TinyResNet::default(), r).unwrap(),
        _ => unreachable!(),
    };
    let mut t1 = build(&mut r);
    let mut t2 = build(&mut r);
    scramble(&mut t1, &mut r);
    scramble(&mut t2, &mut r);
    (t1, t2)
}

/// Elementwise mean of the two teachers' outputs.
pub fn averaged(t1: &Network, t2: &Network, x: &Tensor) -> Tensor {
    let y1 = t1.predict(x, &mut GateMode::Off).unwrap();
    let y2 = t2.predict(x, &mut GateMode::Off).unwrap();
    let data = y1.data().iter().zip(y2.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    Tensor::new(y1.shape().to_vec(), data).unwrap()
}

pub fn randomize_gates(net: &mut Network, std: f64, r: &mut ChaCha8Rng) {
    let ids: Vec<GateId> = net.gates().keys().copied().collect();
    for id in ids {
        for v in net.gate_mut(id).unwrap().log_alpha.data_mut() {
            *v = r.random_range(-std..std);
        }
    }
}

/// Masked-forward oracle computed from the gate parameters alone: kept units
/// at their deterministic value (1 on residual streams), dropped units at 0.
pub fn oracle_mask(big: &Network) -> BTreeMap<GateId, Vec<f64>> {
    let streams: Vec<GateId> = big
        .blocks()
        .iter()
        .filter_map(|b| match b {
            Block::Residual { exit_gate, .. } => *exit_gate,
            _ => None,
        })
        .collect();
    big.gates()
        .iter()
        .map(|(id, g)| {
            let p = g.p_open_values();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            let det = g.deterministic_values();
            let mut v = vec![0.0; p.len()];
            for &u in &idx[..p.len() / 2] {
                v[u] = if streams.contains(id) { 1.0 } else { det[u] };
            }
            (*id, v)
        })
        .collect()
}
