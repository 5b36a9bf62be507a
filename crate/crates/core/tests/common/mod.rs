#![allow(dead_code)]

use std::path::PathBuf;

use mionet::model::{ModelConfig, ModelParams, Network, NormalizationStats};
use mionet::oracle::{Dataset, GeometrySpec};
use mionet::{BoundingBox, CenterPlaneMesh, FieldSnapshot, InputRanges, InputSample};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

/// The dataset frozen in `tests/data/golden_dataset.bin`: 2 samples, 2 flux
/// sensors, 4 nodes, all values exactly representable.
pub fn golden_dataset() -> Dataset {
    let geometry = GeometrySpec::default();
    let mesh = CenterPlaneMesh::new(
        vec![0.00625, 0.0075, 0.005, 0.00625],
        vec![0.00625, 0.005, 0.0075, 0.0],
        vec![0.004, 0.0025, 0.0025, 0.0],
        BoundingBox::square(geometry.pitch),
        0.5 * geometry.length,
    )
    .unwrap();
    let samples = vec![
        InputSample { p_rod: vec![412.5, 412.5], t_in: 560.0, v_in: 4.5 },
        InputSample { p_rod: vec![250.0, 250.0], t_in: 600.25, v_in: 4.125 },
    ];
    let snapshots = vec![
        FieldSnapshot {
            t: vec![562.5, 563.0, 563.0, 570.0],
            v: vec![5.0, 4.75, 4.75, 0.0],
            k: vec![0.03125, 0.0625, 0.0625, 0.015625],
        },
        FieldSnapshot {
            t: vec![601.0, 601.5, 601.5, 605.0],
            v: vec![4.5, 4.25, 4.25, 0.0],
            k: vec![0.025, 0.05, 0.05, 0.0125],
        },
    ];
    Dataset {
        geometry,
        ranges: InputRanges::default(),
        seed: 42,
        n1: 2,
        mesh,
        samples,
        snapshots,
    }
}

/// The model frozen in `tests/data/golden_checkpoint.bin`: hidden widths
/// [3] and [2], 4 nodes, parameters `0.125 · (i mod 17) − 1`.
pub fn golden_params() -> ModelParams {
    let config = ModelConfig {
        n1: 2,
        n_scalar: 2,
        branch_hidden: vec![3],
        trunk_hidden: vec![2],
        n_nodes: 4,
        dropout_rate: 0.2,
    };
    let mut net = Network::zeros(&config);
    let mut i = 0usize;
    let mut next = || {
        i += 1;
        0.125 * (i % 17) as f64 - 1.0
    };
    for layer in net.layers_mut() {
        for w in layer.weight.as_mut_slice() {
            *w = next();
        }
        for b in &mut layer.bias {
            *b = next();
        }
    }
    let mut norm = NormalizationStats::from_ranges(&InputRanges::default(), config.n1);
    norm.output_mean = [580.0, 4.5, 0.04];
    norm.output_std = [20.0, 1.5, 0.02];
    ModelParams::new(config, net, norm).unwrap()
}
