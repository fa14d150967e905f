//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! Set `LSSEG_ACCEPTANCE_ONLY=1,5,9` to run a subset.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use lsseg_core::chan_vese::{cv_segment, orient_bright_inside, CvParams, LevelSetField};
use lsseg_core::data_synth::{build_dataset, Dataset, SceneSpec};
use lsseg_core::grid::{LabelMap, ProbMaps};
use lsseg_core::heaviside::HeavisideKind;
use lsseg_core::ls_loss::{combined_loss, decompose_ground_truth, ls_gradient, LossWeights};
use lsseg_core::metrics::{moving_average, spearman, ConfusionMatrix};
use lsseg_core::tinynet::{NetConfig, SgdConfig, TinyNet};
use lsseg_core::train::{train, TrainConfig};
use lsseg_core::Image;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use sha2::{Digest, Sha256};

/// Relative error with a floor so entries whose derivative is essentially zero
/// are compared in absolute terms.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn tanh_step(z: f64, eps: f64) -> f64 {
    0.5 * (1.0 + (z / eps).tanh())
}

fn random_labels(rng: &mut Xoshiro256PlusPlus, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..k) as u16).collect()).unwrap()
}

fn random_probs(rng: &mut Xoshiro256PlusPlus, k: usize, h: usize, w: usize) -> ProbMaps {
    let logits: Vec<f64> = (0..k * h * w)
        .map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ProbMaps::from_logits(k, h, w, &logits).unwrap()
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

/// Level set gradient against central differences of an independently written energy with frozen means.
fn criterion_1() -> Verdict {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(101);
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut entries = 0usize;
    for case in 0..100 {
        let h = rng.random_range(4..=16);
        let w = rng.random_range(4..=16);
        let k = [2, 3, 4][rng.random_range(0..3)];
        let eps = [1.0 / 20.0, 1.0][case % 2];
        let p = random_probs(&mut rng, k, h, w);
        let gt = random_labels(&mut rng, h, w, k);
        let analytic = ls_gradient(&p, &decompose_ground_truth(&gt), HeavisideKind::Tanh { epsilon: eps }).unwrap();
        let n = h * w;
        for l in 0..k {
            let g: Vec<f64> = gt.data().iter().map(|&c| if c as usize == l { 1.0 } else { 0.0 }).collect();
            let slice = &analytic[l * n..(l + 1) * n];
            if g.iter().all(|&v| v == 0.0) {
                worst = worst.max(slice.iter().fold(0.0, |m, v| m.max(v.abs())));
                entries += n;
                continue;
            }
            let mut phi: Vec<f64> = p.class_map(l).iter().map(|v| v - 0.5).collect();
            let hs: Vec<f64> = phi.iter().map(|&z| tanh_step(z, eps)).collect();
            let c1 = g.iter().zip(&hs).map(|(a, b)| a * b).sum::<f64>() / hs.iter().sum::<f64>();
            let c2 = g.iter().zip(&hs).map(|(a, b)| a * (1.0 - b)).sum::<f64>()
                / hs.iter().map(|b| 1.0 - b).sum::<f64>();
            let energy = |phi: &[f64]| -> f64 {
                phi.iter()
                    .zip(&g)
                    .map(|(&z, &gv)| {
                        let hz = tanh_step(z, eps);
                        (gv - c1).powi(2) * hz + (gv - c2).powi(2) * (1.0 - hz)
                    })
                    .sum()
            };
            for px in 0..n {
                let base = phi[px];
                phi[px] = base + step;
                let up = energy(&phi);
                phi[px] = base - step;
                let down = energy(&phi);
                phi[px] = base;
                worst = worst.max(rel_err(slice[px], (up - down) / (2.0 * step)));
                entries += 1;
            }
        }
    }
    verdict(
        worst <= 1e-5,
        format!("max rel err {worst:.3e} over 100 instances, {entries} entries (tol 1e-5)"),
    )
}

/// Parameter gradients of the combined loss against central differences through the whole network.
fn criterion_2() -> Verdict {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(202);
    let cfg = NetConfig {
        in_channels: 1,
        width1: 8,
        width2: 16,
        num_classes: 3,
    };
    let weights = LossWeights {
        lambda_ls: 4e-4,
        heaviside: HeavisideKind::Tanh { epsilon: 1.0 / 20.0 },
        ..Default::default()
    };
    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut params_count = 0;
    for case in 0..10 {
        let mut net = TinyNet::new(cfg, 500 + case).unwrap();
        params_count = net.num_parameters();
        let img = Image::new(8, 8, 1, (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
        let gt = random_labels(&mut rng, 8, 8, 3);
        let pass = net.forward(&img).unwrap();
        let analytic = net
            .backward(&pass.cache, &combined_loss(&pass.probs, &gt, &weights).unwrap().logit_grad)
            .unwrap()
            .flatten();
        let loss = |net: &TinyNet| {
            let probs = net.forward(&img).unwrap().probs;
            combined_loss(&probs, &gt, &weights).unwrap().report.total
        };
        let mut params = net.parameters();
        for i in 0..params.len() {
            let base = params[i];
            params[i] = base + step;
            net.set_parameters(&params).unwrap();
            let up = loss(&net);
            params[i] = base - step;
            net.set_parameters(&params).unwrap();
            let down = loss(&net);
            params[i] = base;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * step)));
        }
        net.set_parameters(&params).unwrap();
    }
    verdict(
        worst <= 1e-4 && params_count <= 5000,
        format!("max rel err {worst:.3e} on a {params_count}-parameter net, 10 inputs (tol 1e-4)"),
    )
}

fn criterion_3() -> Verdict {
    let eps = 1.0 / 20.0;
    let kind = HeavisideKind::Tanh { epsilon: eps };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(303);
    let mut zs: Vec<f64> = (0..1000).map(|_| rng.random_range(-0.5..=0.5)).collect();
    let mut sym = 0.0f64;
    let mut delta_err = 0.0f64;
    let step = 1e-6;
    for &z in &zs {
        sym = sym.max((kind.heaviside(-z) - (1.0 - kind.heaviside(z))).abs());
        let fd = (kind.heaviside(z + step) - kind.heaviside(z - step)) / (2.0 * step);
        delta_err = delta_err.max(rel_err(kind.delta(z).unwrap(), fd));
    }
    zs.sort_by(f64::total_cmp);
    let monotone = zs
        .windows(2)
        .all(|p| p[0] == p[1] || kind.heaviside(p[0]) < kind.heaviside(p[1]));
    let centre = kind.heaviside(0.0) == 0.5;
    verdict(
        sym <= 1e-12 && monotone && centre && delta_err <= 1e-5,
        format!(
            "symmetry {sym:.1e} (tol 1e-12), strictly increasing {monotone}, H(0)=0.5 {centre}, delta rel err {delta_err:.2e} (tol 1e-5)"
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(404);
    let mut bad = 0usize;
    for _ in 0..1000 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let k = rng.random_range(1..=6);
        let gt = random_labels(&mut rng, h, w, k);
        let d = decompose_ground_truth(&gt);
        for px in 0..h * w {
            let s: f64 = d.masks().iter().map(|(_, m)| m.data()[px]).sum();
            if s != 1.0 {
                bad += 1;
            }
        }
    }
    verdict(bad == 0, format!("{bad} pixels with mask sum != 1 across 1000 label maps"))
}

fn criterion_5() -> Verdict {
    let mut worst_iou = 1.0f64;
    let mut non_monotone = 0;
    for seed in 0..20 {
        let (img, truth) = noisy_disk(64, 0.05, 5000 + seed);
        let init = LevelSetField::random_binary(64, 64, seed).unwrap();
        let out = cv_segment(&img, &CvParams::default(), &init).unwrap();
        if out.energy_trace.windows(2).any(|p| p[1] > p[0]) {
            non_monotone += 1;
        }
        let mask = orient_bright_inside(&img, &out.phi).unwrap().interior();
        worst_iou = worst_iou.min(mask.iou(&truth).unwrap());
    }
    verdict(
        worst_iou >= 0.95 && non_monotone == 0,
        format!("min IoU {worst_iou:.4} over 20 disks (need 0.95), {non_monotone} non-monotone traces"),
    )
}

fn big_corpus() -> (Dataset, Dataset) {
    let spec = SceneSpec::default();
    (
        Dataset::generate(&spec, 0, 200).unwrap(),
        Dataset::generate(&spec, 1000, 50).unwrap(),
    )
}

fn desk_config(iters: usize, eval_every: usize) -> TrainConfig {
    TrainConfig {
        sgd: SgdConfig {
            lr0: 0.01,
            max_iter: iters,
            ..Default::default()
        },
        batch_size: 8,
        eval_every,
        ..Default::default()
    }
}

fn criterion_6() -> Verdict {
    let (data, held_out) = big_corpus();
    let net = TinyNet::new(NetConfig::new(1, 4), 0).unwrap();
    let out = train(net, &data, Some(&held_out), &desk_config(2000, 100), &LossWeights::default(), 0).unwrap();
    let ls: Vec<f64> = out.curve.iterations.iter().map(|i| i.report.ls).collect();
    let smooth = moving_average(&ls, 100);
    let (early, late) = (smooth[99], smooth[1999]);
    let (miou, ls_at): (Vec<f64>, Vec<f64>) = out
        .curve
        .evals
        .iter()
        .filter(|e| e.iter >= 100)
        .map(|e| (e.miou, smooth[e.iter - 1]))
        .unzip();
    let rho = spearman(&miou, &ls_at);
    let final_miou = miou.last().copied().unwrap_or(f64::NAN);
    verdict(
        late < early && rho.is_some_and(|r| r < 0.0),
        format!(
            "smoothed LS {early:.2} at 100 -> {late:.2} at 2000, spearman(mIoU, LS) {} over {} checkpoints, final mIoU {final_miou:.4}",
            rho.map(|r| format!("{r:.3}")).unwrap_or_else(|| "undefined".into()),
            miou.len()
        ),
    )
}

const COMPARISON_ITERS: usize = 500;

fn criterion_7() -> Verdict {
    let (data, held_out) = big_corpus();
    let cfg = desk_config(COMPARISON_ITERS, 0);
    let run = |seed: u64, lambda: f64| {
        let weights = LossWeights {
            lambda_ls: lambda,
            ..Default::default()
        };
        let net = TinyNet::new(NetConfig::new(1, 4), seed).unwrap();
        let out = train(net, &data, Some(&held_out), &cfg, &weights, seed).unwrap();
        out.curve.evals.last().unwrap().miou
    };
    let mut ce = Vec::new();
    let mut ls = Vec::new();
    for seed in 0..5 {
        ce.push(run(seed, 0.0));
        ls.push(run(seed, 4e-4));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = ce.iter().zip(&ls).filter(|(c, l)| l > c).count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    verdict(
        mean(&ls) >= mean(&ce) - 0.005 && wins >= 3,
        format!(
            "mean mIoU CE+LS {:.4} vs CE {:.4}, CE+LS wins {wins}/5 (CE: {}; CE+LS: {}; {COMPARISON_ITERS} iterations each)",
            mean(&ls),
            mean(&ce),
            fmt(&ce),
            fmt(&ls)
        ),
    )
}

fn criterion_8() -> Verdict {
    let data = Dataset::generate(&fixture_spec(), 0, FIXTURE_SAMPLES).unwrap();
    let zero = LossWeights {
        lambda_ls: 0.0,
        ..Default::default()
    };
    let cfg = TrainConfig {
        sgd: SgdConfig {
            max_iter: 30,
            ..fixture_train_config().sgd
        },
        ..fixture_train_config()
    };
    let net = || TinyNet::new(fixture_net_config(), 8).unwrap();
    let with = train(net(), &data, Some(&data), &cfg, &zero, 8).unwrap();
    let skipped = train(net(), &data, Some(&data), &TrainConfig { skip_ls: true, ..cfg }, &zero, 8).unwrap();
    let bits = |n: &TinyNet| n.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same_params = bits(&with.net) == bits(&skipped.net);
    let ce_bits = |c: &lsseg_core::train::TrainingCurve| {
        c.iterations
            .iter()
            .map(|i| (i.report.ce.to_bits(), i.report.total.to_bits()))
            .collect::<Vec<_>>()
    };
    let same_curve = ce_bits(&with.curve) == ce_bits(&skipped.curve);
    let same_eval = with.curve.evals == skipped.curve.evals;
    verdict(
        same_params && same_curve && same_eval,
        format!("30 iterations: parameters identical {same_params}, loss curve identical {same_curve}, evals identical {same_eval}"),
    )
}

fn criterion_9() -> Verdict {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(909);
    let mut mismatches = 0;
    for _ in 0..50 {
        let k = rng.random_range(2..=6);
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        // restricted label ranges leave some classes absent from both maps
        let gk = rng.random_range(1..=k);
        let pk = rng.random_range(1..=k);
        let gt = random_labels(&mut rng, h, w, gk);
        let pred = random_labels(&mut rng, h, w, pk);
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&gt, &pred).unwrap();
        let got = cm.mean_iou().unwrap();

        let mut ious = Vec::new();
        for c in 0..k as u16 {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&g, &p) in gt.data().iter().zip(pred.data()) {
                if g == c && p == c {
                    inter += 1;
                }
                if g == c || p == c {
                    union += 1;
                }
            }
            let iou = (union > 0).then(|| inter as f64 / union as f64);
            if got.per_class[c as usize] != iou {
                mismatches += 1;
            }
            ious.extend(iou);
        }
        let brute = ious.iter().sum::<f64>() / ious.len() as f64;
        if got.miou != brute {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches across 50 matrices (exact comparison)"))
}

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&fixture_spec(), FIXTURE_SAMPLES, dir.path()).unwrap();
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let hashes: String = names
        .iter()
        .map(|n| format!("{}  {n}\n", hex::encode(Sha256::digest(fs::read(dir.path().join(n)).unwrap()))))
        .collect();
    let stored = fs::read_to_string(fixtures_dir().join("corpus.sha256")).unwrap();
    let hashes_match = hashes == stored;

    let data = Dataset::load(dir.path()).unwrap();
    let net = TinyNet::new(fixture_net_config(), FIXTURE_NET_SEED).unwrap();
    let out = train(net, &data, Some(&data), &fixture_train_config(), &fixture_weights(), FIXTURE_NET_SEED).unwrap();
    let got = parse_curve_csv(&String::from_utf8(lsseg_core::curves::training_curve_csv(&out.curve).unwrap()).unwrap());
    let golden = parse_curve_csv(&fs::read_to_string(fixtures_dir().join("golden_curve.csv")).unwrap());
    let mut worst = 0.0f64;
    let mut shape_ok = got.len() == golden.len();
    for (a, b) in got.iter().zip(&golden) {
        for (x, y) in a.iter().zip(b) {
            match (x, y) {
                (Some(x), Some(y)) => worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1.0)),
                (None, None) => {}
                _ => shape_ok = false,
            }
        }
    }
    verdict(
        hashes_match && shape_ok && worst <= 1e-8,
        format!(
            "corpus hashes match {hashes_match} ({} files), 10-iteration curve max deviation {worst:.1e} (tol 1e-8)",
            names.len()
        ),
    )
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "level set gradient vs finite differences", budget: Duration::from_secs(30), run: criterion_1 },
        Criterion { id: 2, name: "end-to-end network gradient", budget: Duration::from_secs(120), run: criterion_2 },
        Criterion { id: 3, name: "smooth step properties", budget: Duration::from_secs(1), run: criterion_3 },
        Criterion { id: 4, name: "ground truth decomposition partition", budget: Duration::from_secs(5), run: criterion_4 },
        Criterion { id: 5, name: "two-region segmentation of noisy disks", budget: Duration::from_secs(10), run: criterion_5 },
        Criterion { id: 6, name: "level set energy falls as mIoU rises", budget: Duration::from_secs(15 * 60), run: criterion_6 },
        Criterion { id: 7, name: "CE+LS vs CE-only over 5 seeds", budget: Duration::from_secs(2 * 3600), run: criterion_7 },
        Criterion { id: 8, name: "zero weight equals skipped level set term", budget: Duration::from_secs(60), run: criterion_8 },
        Criterion { id: 9, name: "mean IoU vs brute force", budget: Duration::from_secs(1), run: criterion_9 },
        Criterion { id: 10, name: "fixture corpus and golden run reproduce", budget: Duration::from_secs(60), run: criterion_10 },
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("LSSEG_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());

    let mut failed = Vec::new();
    let mut ran = 0;
    let stdout = std::io::stdout();
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run));
        let elapsed = start.elapsed();
        let (passed, detail) = match result {
            Ok(v) => (v.passed && elapsed <= c.budget, v.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        ran += 1;
        if !passed {
            failed.push(c.id);
        }
        let mut out = stdout.lock();
        let _ = writeln!(
            out,
            "{} criterion {:>2} {}: {} [{:.1}s, budget {}s]",
            if passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
        let _ = out.flush();
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
