#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lsseg_core::data_synth::SceneSpec;
use lsseg_core::grid::Image;
use lsseg_core::ls_loss::LossWeights;
use lsseg_core::tinynet::{NetConfig, SgdConfig};
use lsseg_core::train::TrainConfig;
use lsseg_core::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub const FIXTURE_SAMPLES: usize = 8;
pub const FIXTURE_SEED: u64 = 2024;

pub fn fixture_spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        num_classes: 4,
        shapes_min: 2,
        shapes_max: 3,
        noise_sigma: 0.05,
        seed: FIXTURE_SEED,
    }
}

pub fn fixture_net_config() -> NetConfig {
    NetConfig::new(1, 4)
}

pub const FIXTURE_NET_SEED: u64 = 11;

pub fn fixture_train_config() -> TrainConfig {
    TrainConfig {
        sgd: SgdConfig {
            lr0: 0.01,
            max_iter: 10,
            ..Default::default()
        },
        batch_size: 4,
        eval_every: 5,
        ..Default::default()
    }
}

pub fn fixture_weights() -> LossWeights {
    LossWeights::default()
}

/// Image with a bright disk on a darker background plus Gaussian noise, and the disk mask.
pub fn noisy_disk(size: usize, sigma: f64, seed: u64) -> (Image, BinaryMask) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let s = size as f64;
    let r = rng.random_range(0.15 * s..0.3 * s);
    let cy = rng.random_range(r + 2.0..s - r - 2.0);
    let cx = rng.random_range(r + 2.0..s - r - 2.0);
    let bg = rng.random_range(0.1..0.4);
    let fg = bg + rng.random_range(0.3..0.5);
    let mask = BinaryMask::from_fn(size, size, |y, x| {
        (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r
    })
    .unwrap();
    let data = mask
        .data()
        .iter()
        .map(|&m| {
            let base = if m > 0.5 { fg } else { bg };
            (base + sigma * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)
        })
        .collect();
    (Image::new(size, size, 1, data).unwrap(), mask)
}

/// Parses `iter,ce,ls,total,miou` rows; empty cells become `None`.
pub fn parse_curve_csv(text: &str) -> Vec<[Option<f64>; 5]> {
    text.lines()
        .skip(1)
        .map(|line| {
            let mut row = [None; 5];
            for (i, cell) in line.split(',').enumerate() {
                if !cell.is_empty() {
                    row[i] = Some(cell.parse().unwrap());
                }
            }
            row
        })
        .collect()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
