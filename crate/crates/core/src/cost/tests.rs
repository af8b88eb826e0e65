use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;
use crate::zoo::{build, ArchConfig, Conv2d, CorrHead, Linear, Node};

fn graph(nodes: Vec<Node>) -> ModelGraph {
    ModelGraph {
        arch: ArchConfig::MiniAlex { widths: vec![1; 5] },
        template_size: 32,
        search_size: 64,
        output: nodes.len() - 1,
        nodes,
        gates: BTreeMap::new(),
        head: CorrHead {
            scale: Tensor::scalar(1.0),
            bias: Tensor::scalar(0.0),
            norm: 1.0,
        },
    }
}

fn node(id: &str, inputs: Vec<usize>, layer: Layer) -> Node {
    Node {
        id: id.into(),
        inputs,
        layer,
    }
}

#[test]
fn conv_example() {
    let conv = Layer::Conv2d(Conv2d {
        weight: Tensor::zeros(&[2, 3, 3, 3]),
        bias: Some(Tensor::zeros(&[2])),
        stride: 1,
        padding: 0,
    });
    let g = graph(vec![
        node("input", vec![], Layer::Input),
        node("conv", vec![0], conv),
    ]);
    let r = cost(&g, &[1, 3, 6, 6]).unwrap();
    assert_eq!(r.layers[1].params, 56);
    assert_eq!(r.layers[1].flops, 1728);
    assert_eq!(r.conv_flops(), 1728);
    assert_eq!(r.params, 58);
}

#[test]
fn linear_examples() {
    let lin = |o: usize, i: usize| {
        Layer::Linear(Linear {
            weight: Tensor::zeros(&[o, i]),
            bias: Some(Tensor::zeros(&[o])),
        })
    };
    assert_eq!(layer_params(&lin(2, 3)), 8);
    assert_eq!(layer_flops(&lin(4, 4), &[&vec![1, 1, 4]], &[1, 1, 4]), 32);
    let g = graph(vec![
        node("input", vec![], Layer::Input),
        node("tokens", vec![0], Layer::ToTokens),
        node("fc", vec![1], lin(2, 3)),
    ]);
    let r = cost(&g, &[1, 3, 2, 2]).unwrap();
    assert_eq!(r.layers[2].flops, 4 * 2 * 2 * 3);
}

/// Counts every learnable scalar one at a time.
fn enumerate(model: &ModelGraph) -> u64 {
    let mut count = 0;
    model.visit_params(|_, _, data| {
        for _ in data {
            count += 1;
        }
    });
    count
}

pub(crate) fn random_arch(rng: &mut ChaCha8Rng) -> ArchConfig {
    match rng.random_range(0..4) {
        0 => ArchConfig::MiniAlex {
            widths: (0..5).map(|_| rng.random_range(1..9)).collect(),
        },
        1 => {
            let stages = rng.random_range(1..=3);
            ArchConfig::MiniResnet {
                stages,
                blocks: rng.random_range(1..=2),
                trunk_widths: (0..stages).map(|_| 4 * rng.random_range(1..4)).collect(),
            }
        }
        2 => {
            let heads = rng.random_range(1..=3);
            ArchConfig::MiniVit {
                layers: rng.random_range(1..=2),
                dim: heads * rng.random_range(1..=4),
                heads,
                mlp_ratio: rng.random_range(1..=3),
                patch: 8,
            }
        }
        _ => {
            let heads = rng.random_range(1..=3);
            ArchConfig::MiniEncdec {
                stacks: rng.random_range(1..=2),
                dim: heads * rng.random_range(1..=4),
                heads,
                ffn_dim: rng.random_range(1..=16),
            }
        }
    }
}

#[test]
fn params_match_enumeration_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for case in 0..100 {
        let arch = random_arch(&mut rng);
        let model = build(&arch, case, rng.random_bool(0.5)).unwrap();
        let report = cost(&model, &model.search_shape()).unwrap();
        assert_eq!(report.params, enumerate(&model), "{arch:?}");
        assert_eq!(count_params(&model), report.params);
        assert_eq!(
            report.layers.iter().map(|l| l.params).sum::<u64>(),
            report.params
        );
        assert_eq!(
            report.layers.iter().map(|l| l.flops).sum::<u64>(),
            report.flops
        );
    }
}

#[test]
fn alex_defaults_match_enumeration() {
    let model = build(&ArchConfig::default_for("mini_alex").unwrap(), 0, true).unwrap();
    assert_eq!(count_params(&model), enumerate(&model));
    let r = cost(&model, &model.search_shape()).unwrap();
    assert_eq!(r.param_bytes(), 4 * r.params);
    let kinds = r.by_kind();
    assert_eq!(kinds["conv"].1, r.conv_flops());
    assert_eq!(kinds.values().map(|k| k.0).sum::<u64>(), r.params);
}

#[test]
fn halving_a_conv_chain_quarters_its_flops() {
    let conv = |cout: usize, cin: usize| {
        Layer::Conv2d(Conv2d {
            weight: Tensor::zeros(&[cout, cin, 3, 3]),
            bias: None,
            stride: 1,
            padding: 1,
        })
    };
    let chain = |w: usize| {
        graph(vec![
            node("input", vec![], Layer::Input),
            node("a", vec![0], conv(w, 3)),
            node("b", vec![1], conv(w, w)),
        ])
    };
    let full = cost(&chain(8), &[1, 3, 10, 10]).unwrap();
    let half = cost(&chain(4), &[1, 3, 10, 10]).unwrap();
    assert_eq!(4 * half.layers[2].flops, full.layers[2].flops);
    assert_eq!(2 * half.layers[1].flops, full.layers[1].flops);
}

#[test]
fn csv_lists_every_layer_and_the_total() {
    let model = build(&ArchConfig::toy_for("mini_vit").unwrap(), 0, true).unwrap();
    let r = cost(&model, &model.search_shape()).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# flops: 1 multiply-accumulate = 2 FLOPs"));
    assert_eq!(lines[1], CostReport::CSV_HEADER);
    assert_eq!(lines.len(), 2 + r.layers.len() + 1);
    assert_eq!(
        *lines.last().unwrap(),
        format!("total,total,{},{}", r.params, r.flops)
    );
}

#[test]
fn bad_input_shape_is_an_error() {
    let model = build(&ArchConfig::toy_for("mini_alex").unwrap(), 0, true).unwrap();
    assert!(cost(&model, &[1, 4, 64, 64]).is_err());
}
