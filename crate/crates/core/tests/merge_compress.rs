mod common;

use std::collections::BTreeMap;

use common::{averaged, oracle_mask, random_input, randomize_gates, rel_diff, scramble, teachers};
use netmerge::arch::build_mlp;
use netmerge::compression::{compress, compression_report, kept_units, rank_units, report_csv};
use netmerge::gates::HardConcrete;
use netmerge::merging::{merge_batchnorm, merge_conv, merge_dense, merge_networks, GateInit};
use netmerge::{Activation, Block, Error, GateId, GateMode, Layer, Network, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dense(w: Vec<f64>, shape: [usize; 2], b: Vec<f64>) -> Layer {
    Layer::Dense {
        weight: Tensor::new(shape.to_vec(), w).unwrap(),
        bias: Some(Tensor::new(vec![shape[0]], b).unwrap()),
    }
}

fn weight_of(l: &Layer) -> &Tensor {
    match l {
        Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => weight,
        _ => panic!("not weighted"),
    }
}

#[test]
fn scalar_dense_merges() {
    let l1 = dense(vec![2.0], [1, 1], vec![0.0]);
    let l2 = dense(vec![4.0], [1, 1], vec![0.0]);
    let both = merge_dense(&l1, &l2, true, true).unwrap();
    assert_eq!(weight_of(&both).data(), &[3.0]);

    let l1 = dense(vec![1.0], [1, 1], vec![0.5]);
    let l2 = dense(vec![3.0], [1, 1], vec![-0.5]);
    let interior = merge_dense(&l1, &l2, false, false).unwrap();
    assert_eq!(weight_of(&interior).shape(), &[2, 2]);
    assert_eq!(weight_of(&interior).data(), &[1.0, 0.0, 0.0, 3.0]);

    let first = merge_dense(&l1, &l2, true, false).unwrap();
    assert_eq!(weight_of(&first).data(), &[1.0, 3.0]);
    let Layer::Dense { bias: Some(b), .. } = &first else { panic!() };
    assert_eq!(b.data(), &[0.5, -0.5]);

    let last = merge_dense(&l1, &l2, false, true).unwrap();
    assert_eq!(weight_of(&last).data(), &[0.5, 1.5]);
    let Layer::Dense { bias: Some(b), .. } = &last else { panic!() };
    assert_eq!(b.data(), &[0.0]);

    let wide = dense(vec![1.0, 2.0], [1, 2], vec![0.0]);
    assert!(matches!(merge_dense(&l1, &wide, false, false), Err(Error::Merge(_))));
}

#[test]
fn one_by_one_convs_merge_block_diagonally() {
    let conv = |w: f64| Layer::Conv2d {
        weight: Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap(),
        stride: 1,
        padding: 0,
    };
    let m = merge_conv(&conv(1.0), &conv(2.0), false).unwrap();
    assert_eq!(weight_of(&m).shape(), &[2, 2, 1, 1]);
    assert_eq!(weight_of(&m).data(), &[1.0, 0.0, 0.0, 2.0]);
    let first = merge_conv(&conv(1.0), &conv(2.0), true).unwrap();
    assert_eq!(weight_of(&first).shape(), &[2, 1, 1, 1]);
    let strided = Layer::Conv2d {
        weight: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
        stride: 2,
        padding: 0,
    };
    assert!(merge_conv(&conv(1.0), &strided, false).is_err());
}

#[test]
fn merged_conv_off_blocks_are_zero_and_forward_concatenates() {
    let mut r = rng(3);
    let (c1, c2) = (Layer::conv(3, 4, 3, 1, 1, &mut r), Layer::conv(3, 4, 3, 1, 1, &mut r));
    let m = merge_conv(&c1, &c2, false).unwrap();
    let w = weight_of(&m);
    for o in 0..8 {
        for i in 0..6 {
            if (o < 4) != (i < 3) {
                for k in 0..9 {
                    assert_eq!(w.at(&[o, i, k / 3, k % 3]), 0.0);
                }
            }
        }
    }
    // duplicated-channel input: [x, x] through the merged conv equals [c1(x), c2(x)]
    let x = Tensor::normal(&[2, 3, 5, 5], 0.0, 1.0, &mut r);
    let single = |layer: &Layer, input: &Tensor| {
        let net = Network::new(input.shape()[1..].to_vec(), vec![Block::Plain(vec![layer.clone()])], BTreeMap::new()).unwrap();
        net.predict(input, &mut GateMode::Off).unwrap()
    };
    let mut dup = Vec::new();
    for n in 0..2 {
        let sample = &x.data()[n * 75..(n + 1) * 75];
        dup.extend_from_slice(sample);
        dup.extend_from_slice(sample);
    }
    let xx = Tensor::new(vec![2, 6, 5, 5], dup).unwrap();
    let y = single(&m, &xx);
    let (y1, y2) = (single(&c1, &x), single(&c2, &x));
    for n in 0..2 {
        for c in 0..8 {
            for p in 0..25 {
                let expect = if c < 4 {
                    y1.data()[(n * 4 + c) * 25 + p]
                } else {
                    y2.data()[(n * 4 + c - 4) * 25 + p]
                };
                assert!((y.data()[(n * 8 + c) * 25 + p] - expect).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn batchnorm_concatenates_teacher_one_first() {
    let mut r = rng(4);
    let (mut t1, _) = teachers("resnet", 4);
    scramble(&mut t1, &mut r);
    let bns: Vec<&Layer> = t1.layers().filter(|l| matches!(l, Layer::BatchNorm2d(_))).collect();
    let m = merge_batchnorm(bns[0], bns[1]).unwrap();
    let (Layer::BatchNorm2d(a), Layer::BatchNorm2d(b), Layer::BatchNorm2d(mm)) = (bns[0], bns[1], &m) else {
        panic!()
    };
    assert_eq!(mm.channels(), 8);
    assert_eq!(mm.running_mean.data(), [a.running_mean.data(), b.running_mean.data()].concat());
    assert_eq!(mm.running_var.data(), [a.running_var.data(), b.running_var.data()].concat());
    assert_eq!(mm.gamma.data(), [a.gamma.data(), b.gamma.data()].concat());
}

#[test]
fn merged_networks_average_their_teachers() {
    for (kind, seed) in [("mlp", 1), ("sine", 2), ("lenet", 3), ("resnet", 4)] {
        let (t1, t2) = teachers(kind, seed);
        let big = merge_networks(&t1, &t2, &GateInit::default(), &mut rng(seed + 100)).unwrap();
        let x = random_input(&t1, 6, &mut rng(seed + 200));
        let got = big.predict(&x, &mut GateMode::Off).unwrap();
        let err = rel_diff(&got, &averaged(&t1, &t2, &x));
        assert!(err < 1e-10, "{kind}: relative error {err:e}");
    }
}

#[test]
fn self_merge_reproduces_the_teacher() {
    for (kind, seed) in [("mlp", 5), ("lenet", 6), ("resnet", 7)] {
        let (t, _) = teachers(kind, seed);
        let big = merge_networks(&t, &t, &GateInit::default(), &mut rng(0)).unwrap();
        let x = random_input(&t, 4, &mut rng(seed));
        let err = rel_diff(
            &big.predict(&x, &mut GateMode::Off).unwrap(),
            &t.predict(&x, &mut GateMode::Off).unwrap(),
        );
        assert!(err < 1e-12, "{kind}: {err:e}");
    }
}

#[test]
fn zeroing_teacher_two_leaves_half_of_teacher_one() {
    let (t1, t2) = teachers("mlp", 8);
    let mut zeroed = t2.clone();
    for p in zeroed.parameters_mut() {
        p.data_mut().fill(0.0);
    }
    let big = merge_networks(&t1, &zeroed, &GateInit::default(), &mut rng(0)).unwrap();
    let x = random_input(&t1, 5, &mut rng(9));
    let y1 = t1.predict(&x, &mut GateMode::Off).unwrap();
    let half: Vec<f64> = y1.data().iter().map(|v| v / 2.0).collect();
    let got = big.predict(&x, &mut GateMode::Off).unwrap();
    assert!(rel_diff(&got, &Tensor::new(y1.shape().to_vec(), half).unwrap()) < 1e-12);
}

fn gate_widths(net: &Network) -> Vec<usize> {
    net.gates().values().map(|g| g.width()).collect()
}

#[test]
fn lenet_merge_widths() {
    let (t1, t2) = teachers("lenet", 10);
    let big = merge_networks(&t1, &t2, &GateInit::default(), &mut rng(0)).unwrap();
    let shapes: Vec<Vec<usize>> = big.layers().filter(|l| l.is_weighted()).map(|l| weight_of(l).shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![12, 3, 5, 5],
            vec![32, 12, 5, 5],
            vec![240, 800],
            vec![160, 240],
            vec![10, 160]
        ]
    );
    assert_eq!(gate_widths(&big), vec![12, 32, 240, 160]);
    assert_eq!(big.output_shape(), vec![10]);
    // interior layers hold four times the teacher's weights
    let w1: Vec<usize> = t1.layers().filter(|l| l.is_weighted()).map(|l| weight_of(l).len()).collect();
    let wb: Vec<usize> = big.layers().filter(|l| l.is_weighted()).map(|l| weight_of(l).len()).collect();
    assert_eq!(wb[1], 4 * w1[1]);
    assert_eq!(wb[2], 4 * w1[2]);
}

#[test]
fn sine_merge_has_hidden_width_200() {
    let (t1, t2) = teachers("sine", 11);
    let big = merge_networks(&t1, &t2, &GateInit::default(), &mut rng(0)).unwrap();
    assert_eq!(gate_widths(&big), vec![200]);
    let shapes: Vec<Vec<usize>> = big.layers().filter(|l| l.is_weighted()).map(|l| weight_of(l).shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![200, 1], vec![1, 200]]);
}

#[test]
fn resnet_stream_gate_is_shared() {
    let (t1, t2) = teachers("resnet", 12);
    let big = merge_networks(&t1, &t2, &GateInit::default(), &mut rng(0)).unwrap();
    let stream = match &big.blocks()[0] {
        Block::Plain(layers) => layers.last().unwrap().gate().expect("stem ends with a gate"),
        _ => panic!(),
    };
    let mut residuals = 0;
    for block in big.blocks() {
        if let Block::Residual {
            entry_gate, exit_gate, ..
        } = block
        {
            assert_eq!(*entry_gate, Some(stream));
            assert_eq!(*exit_gate, Some(stream));
            residuals += 1;
        }
    }
    assert_eq!(residuals, 2);
    assert_eq!(gate_widths(&big), vec![8, 8, 8]);
    for g in big.gates().values() {
        assert!(g.log_alpha.data().iter().all(|a| (a - 2.0).abs() < 0.1));
    }
}

#[test]
fn mismatched_teachers_name_the_layer() {
    let mut r = rng(13);
    let a = build_mlp(&[3, 5, 2], Activation::Tanh, &mut r).unwrap();
    let b = build_mlp(&[3, 6, 2], Activation::Tanh, &mut r).unwrap();
    let err = merge_networks(&a, &b, &GateInit::default(), &mut r).unwrap_err();
    assert!(matches!(&err, Error::Merge(m) if m.contains("block 0 layer 0")), "{err}");
    let c = build_mlp(&[3, 5, 2], Activation::Relu, &mut r).unwrap();
    let err = merge_networks(&a, &c, &GateInit::default(), &mut r).unwrap_err();
    assert!(matches!(&err, Error::Merge(m) if m.contains("layer 1")), "{err}");
}

#[test]
fn ranking_examples() {
    assert_eq!(rank_units(&[0.9, 0.1, 0.5, 0.5]), vec![0, 2, 3, 1]);
    assert_eq!(rank_units(&[0.25; 6]), (0..6).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn kept_set_is_the_brute_force_top_half(las in prop::collection::vec(-6.0f64..6.0, 1..12usize)) {
        let las: Vec<f64> = las.iter().copied().chain(las.iter().map(|v| v * 0.5)).collect();
        let hc = HardConcrete::default();
        let p: Vec<f64> = las.iter().map(|&a| hc.p_open(a)).collect();
        let kept = kept_units(&p).unwrap();
        prop_assert_eq!(kept.len(), p.len() / 2);
        // no dropped unit beats a kept one
        let min_kept = kept.iter().map(|&i| p[i]).fold(f64::INFINITY, f64::min);
        for i in 0..p.len() {
            if !kept.contains(&i) {
                prop_assert!(p[i] <= min_kept);
            }
        }
    }
}

#[test]
fn compressed_network_matches_the_masked_big_student() {
    for (kind, seed) in [("mlp", 20), ("sine", 21), ("lenet", 22), ("resnet", 23)] {
        let (t1, t2) = teachers(kind, seed);
        let mut r = rng(seed);
        let mut big = merge_networks(&t1, &t2, &GateInit::default(), &mut r).unwrap();
        randomize_gates(&mut big, 3.0, &mut r);
        let small = compress(&big).unwrap();
        assert_eq!(small.shape_signature(), t1.shape_signature(), "{kind}");
        assert!(!small.has_gates());
        let mask = oracle_mask(&big);
        let x = random_input(&t1, 100, &mut r);
        let expect = big.predict(&x, &mut GateMode::Fixed(&mask)).unwrap();
        let got = small.predict(&x, &mut GateMode::Off).unwrap();
        let err = rel_diff(&got, &expect);
        assert!(err < 1e-9, "{kind}: {err:e}");
        // deterministic
        assert_eq!(compress(&big).unwrap(), small);
    }
}

#[test]
fn saturated_gates_recover_teacher_one() {
    for (kind, seed) in [("mlp", 30), ("lenet", 31), ("resnet", 32)] {
        let (t1, t2) = teachers(kind, seed);
        let mut big = merge_networks(&t1, &t2, &GateInit::default(), &mut rng(0)).unwrap();
        let ids: Vec<GateId> = big.gates().keys().copied().collect();
        for id in ids {
            let la = &mut big.gate_mut(id).unwrap().log_alpha;
            let k = la.len();
            for (i, v) in la.data_mut().iter_mut().enumerate() {
                *v = if i < k / 2 { 30.0 } else { -30.0 };
            }
        }
        let small = compress(&big).unwrap();
        let x = random_input(&t1, 10, &mut rng(seed));
        let got = small.predict(&x, &mut GateMode::Off).unwrap();
        // the output layer keeps W1/2 and (b1+b2)/2: small(x) = (t1(x) + b2)/2
        let y1 = t1.predict(&x, &mut GateMode::Off).unwrap();
        let Some(Layer::Dense { bias: Some(b2), .. }) = t2.layers().last() else { panic!() };
        let out = b2.len();
        let expect: Vec<f64> = y1.data().iter().enumerate().map(|(i, v)| 0.5 * (v + b2.data()[i % out])).collect();
        let err = rel_diff(&got, &Tensor::new(y1.shape().to_vec(), expect).unwrap());
        assert!(err < 1e-9, "{kind}: {err:e}");

    }
}

#[test]
fn toy_layer_slicing() {
    // 2 -> 4 -> 1 with gate keeping {0, 2}
    let first = dense((0..8).map(f64::from).collect(), [4, 2], vec![0.1, 0.2, 0.3, 0.4]);
    let last = dense(vec![1.0, 2.0, 3.0, 4.0], [1, 4], vec![0.0]);
    let hc = HardConcrete::default();
    let open = 30.0;
    let gate = netmerge::gates::GateParams::new(vec![open, -open, open, -open], hc).unwrap();
    let big = Network::new(
        vec![2],
        vec![Block::Plain(vec![
            first,
            Layer::Gate1d {
                width: 4,
                gate: GateId(0),
            },
            last,
        ])],
        BTreeMap::from([(GateId(0), gate)]),
    )
    .unwrap();
    let small = compress(&big).unwrap();
    let ws: Vec<&Tensor> = small.layers().map(weight_of).collect();
    assert_eq!(ws[0].data(), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(ws[1].data(), &[1.0, 3.0]);
    let rows = compression_report(&big).unwrap();
    assert_eq!(rows.iter().filter(|r| r.kept).map(|r| r.unit).collect::<Vec<_>>(), vec![0, 2]);
    let csv = report_csv(&rows);
    assert!(csv.starts_with("layer,unit_index,p_open,kept\ng0,0,"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn odd_gate_width_is_rejected() {
    let hc = HardConcrete::default();
    let big = Network::new(
        vec![2],
        vec![Block::Plain(vec![
            dense(vec![1.0; 6], [3, 2], vec![0.0; 3]),
            Layer::Gate1d {
                width: 3,
                gate: GateId(0),
            },
            dense(vec![1.0; 3], [1, 3], vec![0.0]),
        ])],
        BTreeMap::from([(GateId(0), netmerge::gates::GateParams::new(vec![0.0; 3], hc).unwrap())]),
    )
    .unwrap();
    assert!(matches!(compress(&big), Err(Error::Contract(_))));
}
