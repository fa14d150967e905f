//! Confusion matrix, per-class IoU and mean IoU, plus helpers for summarizing
//! training curves.

use crate::error::{Error, Result};
use crate::grid::{LabelMap, ProbMaps};

/// `K x K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
            return Err(Error::Shape(format!(
                "ground truth {}x{} vs prediction {}x{}",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            )));
        }
        gt.validate(self.classes)?;
        pred.validate(self.classes)?;
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::Shape(format!(
                "merging {} and {} class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class appears in neither ground truth nor prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Result<MeanIou> {
        let per_class = self.per_class_iou();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::UndefinedMetric);
        }
        Ok(MeanIou {
            miou: defined.iter().sum::<f64>() / defined.len() as f64,
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanIou {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn mean_iou(cm: &ConfusionMatrix) -> Result<MeanIou> {
    cm.mean_iou()
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_labels(p: &ProbMaps) -> LabelMap {
    argmax_planes(p.classes(), p.height(), p.width(), p.data())
}

/// Argmax over `[class][row][col]` scores (probabilities or logits).
pub fn argmax_planes(classes: usize, height: usize, width: usize, scores: &[f64]) -> LabelMap {
    let plane = height * width;
    let data = (0..plane)
        .map(|px| {
            let mut best = 0usize;
            for l in 1..classes {
                if scores[l * plane + px] > scores[best * plane + px] {
                    best = l;
                }
            }
            best as u16
        })
        .collect();
    LabelMap::new(height, width, data).expect("dimensions come from a valid source")
}

/// Trailing moving average: entry `i` averages the last `window` values up to `i`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ties share the average of their positions
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` for fewer than two points or a constant series.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}
