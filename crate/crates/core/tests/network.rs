mod common;

use std::collections::BTreeMap;

use common::{random_input, rel_diff, scramble};
use netmerge::arch::{build_lenet, build_mlp, build_tiny_resnet, TinyResNet};
use netmerge::gates::{GateParams, HardConcrete};
use netmerge::layers::BatchNorm;
use netmerge::merging::{merge_networks, GateInit};
use netmerge::{Activation, Block, Error, GateId, GateMode, Layer, Mode, Network, Tape, Tensor, Trainable};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn zero_weights_give_zero_output() {
    let mut net = build_mlp(&[4, 8, 3], Activation::Relu, &mut rng(0)).unwrap();
    for p in net.parameters_mut() {
        p.data_mut().fill(0.0);
    }
    let x = random_input(&net, 5, &mut rng(1));
    let y = net.predict(&x, &mut GateMode::Off).unwrap();
    assert_eq!(y.shape(), &[5, 3]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gates_off_equals_gates_removed() {
    let mut r = rng(2);
    let (t1, t2) = (build_lenet(10, &mut r), build_lenet(10, &mut r));
    let big = merge_networks(&t1, &t2, &GateInit::default(), &mut r).unwrap();
    let x = random_input(&big, 3, &mut r);
    let a = big.predict(&x, &mut GateMode::Off).unwrap();
    let b = big.without_gates().predict(&x, &mut GateMode::Off).unwrap();
    assert_eq!(a, b);
}

/// `conv → gate g0 → residual{conv} (g0)` on a 2-channel stream.
fn gated_residual(la: [f64; 2]) -> Network {
    let mut r = rng(3);
    let gate = GateParams::new(la.to_vec(), HardConcrete::default()).unwrap();
    Network::new(
        vec![2, 3, 3],
        vec![
            Block::Plain(vec![
                Layer::conv(2, 2, 3, 1, 1, &mut r),
                Layer::Gate2d {
                    channels: 2,
                    gate: GateId(0),
                },
            ]),
            Block::Residual {
                body: vec![Layer::conv(2, 2, 3, 1, 1, &mut r)],
                entry_gate: Some(GateId(0)),
                exit_gate: Some(GateId(0)),
            },
        ],
        BTreeMap::from([(GateId(0), gate)]),
    )
    .unwrap()
}

#[test]
fn closed_stream_gate_zeroes_its_channel_everywhere() {
    let net = gated_residual([0.0, 0.0]);
    let x = random_input(&net, 2, &mut rng(4));
    let mask = BTreeMap::from([(GateId(0), vec![1.0, 0.0])]);
    let y = net.predict(&x, &mut GateMode::Fixed(&mask)).unwrap();
    for n in 0..2 {
        assert!(y.data()[n * 18 + 9..n * 18 + 18].iter().all(|&v| v == 0.0));
        assert!(y.data()[n * 18..n * 18 + 9].iter().any(|&v| v != 0.0));
    }
    // mutating the shared parameters is seen at both positions
    let mut net = net;
    net.gate_mut(GateId(0)).unwrap().log_alpha.data_mut()[1] = -50.0;
    let z = net.predict(&x, &mut GateMode::Deterministic).unwrap();
    for n in 0..2 {
        assert!(z.data()[n * 18 + 9..n * 18 + 18].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn stochastic_gate_is_realized_once_per_pass() {
    // with entry and exit scaled by the same realization g, a zero body
    // gives relu(g·h + 0)·g = g²·relu(h) for h = conv(x)
    let mut net = gated_residual([0.3, -0.2]);
    let body_weight = net.parameters_mut().into_iter().nth(1).unwrap();
    body_weight.data_mut().fill(0.0);
    let x = random_input(&net, 1, &mut rng(5));
    let ones = BTreeMap::from([(GateId(0), vec![1.0, 1.0])]);
    let plain = net.predict(&x, &mut GateMode::Fixed(&ones)).unwrap();
    let mut r = rng(6);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, Trainable::Nothing);
    let xv = tape.constant(&x);
    let out = net.forward(&mut tape, &bound, xv, Mode::Eval, &mut GateMode::Stochastic(&mut r)).unwrap();
    let y = tape.to_tensor(out.output);
    // recover g per channel from the first positive activation
    for c in 0..2 {
        let (base, got) = (&plain.data()[c * 9..c * 9 + 9], &y.data()[c * 9..c * 9 + 9]);
        let Some(i) = base.iter().position(|&v| v > 1e-6) else { continue };
        let g2 = got[i] / base[i];
        for j in 0..9 {
            assert!((got[j] - g2 * base[j]).abs() < 1e-12);
        }
        assert!((0.0..=1.0).contains(&g2));
    }
}

#[test]
fn batch_norm_eval_is_affine() {
    let mut bn = BatchNorm::new(2);
    bn.gamma = Tensor::new(vec![2], vec![2.0, -0.5]).unwrap();
    bn.beta = Tensor::new(vec![2], vec![0.1, 0.3]).unwrap();
    bn.running_mean = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
    bn.running_var = Tensor::new(vec![2], vec![4.0, 0.25]).unwrap();
    let net = Network::new(vec![2, 2, 2], vec![Block::Plain(vec![Layer::BatchNorm2d(bn.clone())])], BTreeMap::new()).unwrap();
    let x = random_input(&net, 3, &mut rng(7));
    let y = net.predict(&x, &mut GateMode::Off).unwrap();
    for (i, (&xi, &yi)) in x.data().iter().zip(y.data()).enumerate() {
        let c = (i / 4) % 2;
        let m = bn.running_mean.data()[c];
        let v = bn.running_var.data()[c];
        let expect = bn.gamma.data()[c] * (xi - m) / (v + 1e-5).sqrt() + bn.beta.data()[c];
        assert!((yi - expect).abs() < 1e-12);
    }
}

#[test]
fn train_mode_updates_running_stats() {
    let mut net = build_tiny_resnet(&TinyResNet::default(), &mut rng(8)).unwrap();
    let before: Vec<f64> = match &net.blocks()[0].layers()[1] {
        Layer::BatchNorm2d(bn) => bn.running_mean.data().to_vec(),
        _ => panic!(),
    };
    scramble(&mut net, &mut rng(9));
    let after: Vec<f64> = match &net.blocks()[0].layers()[1] {
        Layer::BatchNorm2d(bn) => bn.running_mean.data().to_vec(),
        _ => panic!(),
    };
    assert_ne!(before, after);
}

#[test]
fn shapes_must_compose() {
    let mut r = rng(10);
    let err = Network::new(
        vec![3],
        vec![Block::Plain(vec![
            Layer::dense(3, 4, true, &mut r),
            Layer::relu(),
            Layer::dense(5, 2, true, &mut r),
        ])],
        BTreeMap::new(),
    )
    .unwrap_err();
    assert!(matches!(&err, Error::Dimension(m) if m.contains("block 0 layer 2")), "{err}");

    let err = Network::new(
        vec![2, 4, 4],
        vec![Block::Residual {
            body: vec![Layer::conv(2, 3, 3, 1, 1, &mut r)],
            entry_gate: None,
            exit_gate: None,
        }],
        BTreeMap::new(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));

    // gate width must match its registry entry
    let err = Network::new(
        vec![3],
        vec![Block::Plain(vec![
            Layer::dense(3, 4, true, &mut r),
            Layer::Gate1d {
                width: 4,
                gate: GateId(0),
            },
        ])],
        BTreeMap::from([(GateId(0), GateParams::new(vec![0.0; 3], HardConcrete::default()).unwrap())]),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn forward_rejects_wrong_input() {
    let net = build_mlp(&[4, 3], Activation::Relu, &mut rng(11)).unwrap();
    let x = Tensor::zeros(&[2, 5]);
    assert!(matches!(net.predict(&x, &mut GateMode::Off), Err(Error::Dimension(_))));
}

#[test]
fn gradients_reach_every_parameter() {
    let mut r = rng(12);
    let (t1, t2) = (build_lenet(10, &mut r), build_lenet(10, &mut r));
    let mut big = merge_networks(&t1, &t2, &GateInit::default(), &mut r).unwrap();
    let x = random_input(&big, 2, &mut r);
    let mut tape = Tape::new();
    let bound = big.bind(&mut tape, Trainable::All);
    let xv = tape.constant(&x);
    let out = big.forward(&mut tape, &bound, xv, Mode::Train, &mut GateMode::Stochastic(&mut r)).unwrap();
    let loss = tape.cross_entropy(out.output, &[1, 7]).unwrap();
    tape.backward(loss).unwrap();
    big.accumulate_grads(&tape, &bound).unwrap();
    for p in big.parameters() {
        let g = p.grad().expect("gradient");
        assert!(g.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn load_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{\"format_version\": 1, \"input_shape\": [2]").unwrap();
    let err = Network::load(&path).unwrap_err();
    assert!(err.to_string().contains("broken.json"), "{err}");
    assert!(matches!(Network::load(dir.path().join("missing.json")), Err(Error::Io { .. })));
}

#[test]
fn save_load_round_trip() {
    let mut r = rng(13);
    let t = build_tiny_resnet(&TinyResNet::default(), &mut r).unwrap();
    let big = merge_networks(&t, &t, &GateInit::default(), &mut r).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.json");
    big.save(&path).unwrap();
    let back = Network::load(&path).unwrap();
    assert_eq!(back, big);
    let x = random_input(&big, 2, &mut r);
    let a = big.predict(&x, &mut GateMode::Deterministic).unwrap();
    let b = back.predict(&x, &mut GateMode::Deterministic).unwrap();
    assert_eq!(rel_diff(&a, &b), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn serialization_is_bitwise(seed in any::<u64>(), scale in 1e-300f64..1e300) {
        let mut r = rng(seed);
        let (a, b) = (
            build_mlp(&[2, 6, 3], Activation::Tanh, &mut r).unwrap(),
            build_mlp(&[2, 6, 3], Activation::Tanh, &mut r).unwrap(),
        );
        let mut big = merge_networks(&a, &b, &GateInit::default(), &mut r).unwrap();
        for p in big.parameters_mut() {
            for v in p.data_mut() {
                *v *= scale;
            }
        }
        let text = big.to_json().unwrap();
        let back = Network::from_json(&text).unwrap();
        for (p, q) in big.parameters().iter().zip(back.parameters()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(p), bits(q));
        }
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}
