//! Mini-batch SGD training of [`TinyNet`] with the combined loss.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

use crate::data_synth::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};
use crate::ls_loss::{combined_loss, cross_entropy, LossReport, LossWeights};
use crate::metrics::{ConfusionMatrix, MeanIou};
use crate::tinynet::{poly_lr, sgd_step, NetGradients, SgdConfig, TinyNet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    /// Square random crop side; `None` trains on whole images.
    pub crop: Option<usize>,
    pub hflip: bool,
    /// Evaluate every this many iterations (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Leave the level set term out entirely instead of weighting it.
    pub skip_ls: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            batch_size: 8,
            crop: None,
            hflip: true,
            eval_every: 100,
            skip_ls: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        if let Some(c) = self.crop {
            if c == 0 || c % 2 != 0 {
                return Err(Error::InvalidParameter(format!("crop {c} must be even and positive")));
            }
        }
        Ok(())
    }
}

/// Batch-averaged losses of one iteration (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub lr: f64,
    pub report: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalLog {
    /// Iterations completed when evaluated; 0 is the initial network.
    pub iter: usize,
    pub miou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    pub iterations: Vec<IterationLog>,
    pub evals: Vec<EvalLog>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: TinyNet,
    pub curve: TrainingCurve,
}

pub fn augment_hflip(img: &Image, gt: &LabelMap, coin: bool) -> (Image, LabelMap) {
    if coin {
        (img.flip_horizontal(), gt.flip_horizontal())
    } else {
        (img.clone(), gt.clone())
    }
}

fn crop_pair(img: &Image, gt: &LabelMap, top: usize, left: usize, size: usize) -> Result<(Image, LabelMap)> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut pixels = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in top..top + size {
            pixels.extend_from_slice(&plane[y * w + left..y * w + left + size]);
        }
    }
    let labels = (top..top + size)
        .flat_map(|y| gt.data()[y * w + left..y * w + left + size].iter().copied())
        .collect();
    Ok((Image::new(size, size, c, pixels)?, LabelMap::new(size, size, labels)?))
}

/// Per-sample randomness, drawn serially so it does not depend on threading.
#[derive(Clone, Copy, Debug)]
struct Augment {
    flip: bool,
    crop: Option<(usize, usize, usize)>,
}

fn draw_augment(rng: &mut Xoshiro256PlusPlus, sample: &Sample, cfg: &TrainConfig) -> Augment {
    let flip = cfg.hflip && rng.random::<bool>();
    let crop = cfg.crop.and_then(|size| {
        let (h, w) = (sample.image.height(), sample.image.width());
        (h > size || w > size).then(|| {
            let size = size.min(h).min(w);
            (rng.random_range(0..=h - size), rng.random_range(0..=w - size), size)
        })
    });
    Augment { flip, crop }
}

fn sample_step(
    net: &TinyNet,
    sample: &Sample,
    aug: Augment,
    weights: &LossWeights,
    skip_ls: bool,
) -> Result<(LossReport, NetGradients)> {
    let (img, gt) = match aug.crop {
        Some((top, left, size)) => crop_pair(&sample.image, &sample.labels, top, left, size)?,
        None => (sample.image.clone(), sample.labels.clone()),
    };
    let (img, gt) = augment_hflip(&img, &gt, aug.flip);
    let pass = net.forward(&img)?;
    let (report, logit_grad) = if skip_ls {
        let (ce, grad) = cross_entropy(&pass.probs, &gt)?;
        let report = LossReport {
            ce,
            ls: 0.0,
            total: ce,
            per_class_ls: BTreeMap::new(),
        };
        (report, grad)
    } else {
        let out = combined_loss(&pass.probs, &gt, weights)?;
        (out.report, out.logit_grad)
    };
    let grads = net.backward(&pass.cache, &logit_grad)?;
    Ok((report, grads))
}

/// Confusion matrix and mean IoU of `net`'s argmax predictions over `data`.
pub fn evaluate(net: &TinyNet, data: &Dataset) -> Result<(ConfusionMatrix, MeanIou)> {
    let classes = net.config().num_classes;
    let partial: Vec<Result<ConfusionMatrix>> = data
        .samples
        .par_iter()
        .map(|s| {
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(&s.labels, &net.predict(&s.image)?)?;
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(classes);
    for p in partial {
        cm.merge(&p?)?;
    }
    let miou = cm.mean_iou()?;
    Ok((cm, miou))
}

/// Trains for `cfg.sgd.max_iter` iterations; deterministic in `(net, data, cfg, weights, seed)`.
pub fn train(
    mut net: TinyNet,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !cfg.skip_ls {
        weights.validate()?;
    }
    if data.is_empty() {
        return Err(Error::InvalidParameter("training set is empty".into()));
    }
    if data.num_classes != net.config().num_classes {
        return Err(Error::Shape(format!(
            "dataset has {} classes, network predicts {}",
            data.num_classes,
            net.config().num_classes
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut velocity = NetGradients::zeros_like(&net);
    let mut curve = TrainingCurve::default();
    let run_eval = |net: &TinyNet, iter: usize, curve: &mut TrainingCurve| -> Result<()> {
        if let Some(e) = eval_data {
            curve.evals.push(EvalLog {
                iter,
                miou: evaluate(net, e)?.1.miou,
            });
        }
        Ok(())
    };
    run_eval(&net, 0, &mut curve)?;

    let max_iter = cfg.sgd.max_iter;
    for iter in 0..max_iter {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            batch.push((idx, draw_augment(&mut rng, &data.samples[idx], cfg)));
        }

        let results: Vec<Result<(LossReport, NetGradients)>> = batch
            .par_iter()
            .map(|&(idx, aug)| sample_step(&net, &data.samples[idx], aug, weights, cfg.skip_ls))
            .collect();

        let scale = 1.0 / cfg.batch_size as f64;
        let mut grads = NetGradients::zeros_like(&net);
        let mut report = LossReport {
            ce: 0.0,
            ls: 0.0,
            total: 0.0,
            per_class_ls: BTreeMap::new(),
        };
        for r in results {
            let (r, g) = match r {
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        iter: iter + 1,
                        last_good: Box::new(net),
                    })
                }
                other => other?,
            };
            grads.add_scaled(&g, scale);
            report.ce += scale * r.ce;
            report.ls += scale * r.ls;
            report.total += scale * r.total;
            for (class, v) in r.per_class_ls {
                *report.per_class_ls.entry(class).or_insert(0.0) += scale * v;
            }
        }

        let finite = report.total.is_finite() && grads.layers.iter().all(|l| {
            l.weight.iter().chain(&l.bias).all(|v| v.is_finite())
        });
        if !finite {
            return Err(Error::Diverged {
                iter: iter + 1,
                last_good: Box::new(net),
            });
        }

        let lr = poly_lr(&cfg.sgd, iter)?;
        sgd_step(&mut net, &grads, &mut velocity, &cfg.sgd, iter)?;
        curve.iterations.push(IterationLog {
            iter: iter + 1,
            lr,
            report,
        });
        let done = iter + 1;
        if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == max_iter {
            if curve.evals.last().map(|e| e.iter) != Some(done) {
                run_eval(&net, done, &mut curve)?;
            }
        }
    }
    Ok(TrainOutcome { net, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::SceneSpec;
    use crate::tinynet::NetConfig;

    fn tiny_spec() -> SceneSpec {
        SceneSpec {
            height: 16,
            width: 16,
            num_classes: 3,
            shapes_min: 1,
            shapes_max: 2,
            ..Default::default()
        }
    }

    fn tiny_net() -> TinyNet {
        TinyNet::new(
            NetConfig {
                in_channels: 1,
                width1: 4,
                width2: 6,
                num_classes: 3,
            },
            3,
        )
        .unwrap()
    }

    fn short_cfg() -> TrainConfig {
        TrainConfig {
            sgd: SgdConfig {
                lr0: 0.05,
                max_iter: 6,
                ..Default::default()
            },
            batch_size: 3,
            eval_every: 3,
            ..Default::default()
        }
    }

    #[test]
    fn hflip_examples() {
        let img = Image::new(1, 3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let gt = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        assert_eq!(augment_hflip(&img, &gt, false), (img.clone(), gt.clone()));
        let (fi, fg) = augment_hflip(&img, &gt, true);
        assert_eq!(fi.data(), &[0.3, 0.2, 0.1]);
        assert_eq!(fg.data(), &[2, 1, 0]);
        assert_eq!(augment_hflip(&fi, &fg, true), (img, gt));
        let sym = Image::new(1, 3, 1, vec![0.4, 0.9, 0.4]).unwrap();
        let sgt = LabelMap::new(1, 3, vec![1, 0, 1]).unwrap();
        assert_eq!(augment_hflip(&sym, &sgt, true), (sym.clone(), sgt.clone()));
    }

    #[test]
    fn crop_takes_the_requested_window() {
        let img = Image::new(2, 3, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let gt = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let (ci, cg) = crop_pair(&img, &gt, 0, 1, 2).unwrap();
        assert_eq!(ci.data(), &[0.1, 0.2, 0.4, 0.5]);
        assert_eq!(cg.data(), &[1, 2, 4, 5]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = Dataset::generate(&tiny_spec(), 0, 5).unwrap();
        let run = || train(tiny_net(), &data, Some(&data), &short_cfg(), &LossWeights::default(), 9).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.net, b.net);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.iterations.len(), 6);
        let eval_iters: Vec<usize> = a.curve.evals.iter().map(|e| e.iter).collect();
        assert_eq!(eval_iters, vec![0, 3, 6]);
    }

    #[test]
    fn zero_lambda_matches_skipped_level_set_term() {
        let data = Dataset::generate(&tiny_spec(), 0, 4).unwrap();
        let weights = LossWeights {
            lambda_ls: 0.0,
            ..Default::default()
        };
        let with = train(tiny_net(), &data, None, &short_cfg(), &weights, 1).unwrap();
        let skipped = TrainConfig {
            skip_ls: true,
            ..short_cfg()
        };
        let without = train(tiny_net(), &data, None, &skipped, &weights, 1).unwrap();
        let bits = |n: &TinyNet| n.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&with.net), bits(&without.net));
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let data = Dataset::generate(&tiny_spec(), 0, 4).unwrap();
        let cfg = TrainConfig {
            sgd: SgdConfig {
                lr0: 1e200,
                max_iter: 50,
                momentum: 0.0,
                ..Default::default()
            },
            batch_size: 2,
            eval_every: 0,
            ..Default::default()
        };
        match train(tiny_net(), &data, None, &cfg, &LossWeights::default(), 0) {
            Err(Error::Diverged { iter, last_good }) => {
                assert!(iter >= 1);
                assert!(last_good.parameters().iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.curve.iterations.len())),
        }
    }

    #[test]
    fn empty_or_mismatched_datasets_are_rejected() {
        let empty = Dataset {
            num_classes: 3,
            samples: vec![],
        };
        assert!(train(tiny_net(), &empty, None, &short_cfg(), &LossWeights::default(), 0).is_err());
        let four = Dataset::generate(&SceneSpec { num_classes: 4, ..tiny_spec() }, 0, 2).unwrap();
        assert!(train(tiny_net(), &four, None, &short_cfg(), &LossWeights::default(), 0).is_err());
    }
}
