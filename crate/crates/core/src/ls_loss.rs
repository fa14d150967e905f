//! Level set loss for multi-class segmentation.
//!
//! The ground truth is split into one binary map per class present in the
//! image (background included). Each class's shifted probability map
//! `phi_l = P_l - 0.5` plays the role of a level set function, and the binary
//! map plays the role of the image in a two-region fitting energy:
//!
//! ```text
//! E_l = sum (G_l - c_l1)^2 H(phi_l) + sum (G_l - c_l2)^2 (1 - H(phi_l))
//! ```
//!
//! where `c_l1`, `c_l2` are the `H`-weighted means of `G_l` inside and outside
//! the contour. The loss is the sum of `E_l` over present classes, a raw pixel
//! sum unless [`LsReduction::Mean`] is selected.
//!
//! Gradients hold the region means constant. Because each mean is the
//! minimizer of its own quadratic term, the partial derivative of the energy
//! in the means vanishes, so the held-constant gradient is also the total one.

use std::collections::BTreeMap;

use crate::chan_vese::{weighted_means, LevelSetField, RegionMeans};
use crate::error::{Error, Result};
use crate::grid::{sum_f64, BinaryMask, LabelMap, ProbMaps};
use crate::heaviside::HeavisideKind;

/// Weight on the level set term used when nothing else is configured.
pub const DEFAULT_LAMBDA: f64 = 4e-4;
/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// One binary map per class present in a label map.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedGt {
    height: usize,
    width: usize,
    masks: Vec<(u16, BinaryMask)>,
}

impl DecomposedGt {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Classes in ascending order.
    pub fn classes(&self) -> Vec<u16> {
        self.masks.iter().map(|(c, _)| *c).collect()
    }

    pub fn masks(&self) -> &[(u16, BinaryMask)] {
        &self.masks
    }

    pub fn mask(&self, class: u16) -> Option<&BinaryMask> {
        self.masks
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, m)| m)
    }
}

pub fn decompose_ground_truth(gt: &LabelMap) -> DecomposedGt {
    let masks = gt
        .classes_present()
        .into_iter()
        .map(|class| {
            let data = gt
                .data()
                .iter()
                .map(|&l| if l == class { 1.0 } else { 0.0 })
                .collect();
            let mask = BinaryMask::new(gt.height(), gt.width(), data)
                .expect("label map dimensions are valid");
            (class, mask)
        })
        .collect();
    DecomposedGt {
        height: gt.height(),
        width: gt.width(),
        masks,
    }
}

/// `phi_l = P_l - 0.5` for every class.
pub fn shift_probabilities(p: &ProbMaps) -> Vec<LevelSetField> {
    (0..p.classes())
        .map(|l| {
            let data = p.class_map(l).iter().map(|v| v - 0.5).collect();
            LevelSetField::new(p.height(), p.width(), data).expect("probabilities lie in [0, 1]")
        })
        .collect()
}

/// `H`-weighted means of the binary map inside and outside the contour of `phi`.
pub fn class_region_means(g: &BinaryMask, phi: &LevelSetField, h: HeavisideKind) -> Result<RegionMeans> {
    if (g.height(), g.width()) != (phi.height(), phi.width()) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs level set {}x{}",
            g.height(),
            g.width(),
            phi.height(),
            phi.width()
        )));
    }
    let weights: Vec<f64> = phi.data().iter().map(|&z| h.heaviside(z)).collect();
    Ok(weighted_means(g.data(), &weights))
}

/// How the per-class energy is reduced over pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LsReduction {
    #[default]
    Sum,
    /// Divide by the pixel count; rescale lambda accordingly.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsEnergy {
    pub total: f64,
    pub per_class: BTreeMap<u16, f64>,
    /// The region means each class's energy was evaluated with.
    pub means: BTreeMap<u16, RegionMeans>,
}

fn check_consistent(p: &ProbMaps, d: &DecomposedGt) -> Result<()> {
    if (p.height(), p.width()) != (d.height, d.width) {
        return Err(Error::Shape(format!(
            "probabilities {}x{} vs ground truth {}x{}",
            p.height(),
            p.width(),
            d.height,
            d.width
        )));
    }
    for &(class, _) in &d.masks {
        if class as usize >= p.classes() {
            return Err(Error::InconsistentClasses {
                class,
                available: p.classes(),
            });
        }
    }
    Ok(())
}

pub(crate) fn class_energy(g: &[f64], phi: &[f64], h: HeavisideKind, means: &RegionMeans) -> f64 {
    sum_f64(g.iter().zip(phi).map(|(&gv, &z)| {
        let hz = h.heaviside(z);
        (gv - means.inside).powi(2) * hz + (gv - means.outside).powi(2) * (1.0 - hz)
    }))
}

/// Summation order fixed by value so that relabeling classes cannot change the total.
fn order_independent_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    sum_f64(v)
}

fn reduction_scale(reduction: LsReduction, pixels: usize) -> f64 {
    match reduction {
        LsReduction::Sum => 1.0,
        LsReduction::Mean => 1.0 / pixels as f64,
    }
}

fn energy_impl(
    p: &ProbMaps,
    d: &DecomposedGt,
    h: HeavisideKind,
    reduction: LsReduction,
    frozen: Option<&BTreeMap<u16, RegionMeans>>,
) -> Result<LsEnergy> {
    check_consistent(p, d)?;
    h.validated()?;
    let scale = reduction_scale(reduction, p.pixels());
    let mut per_class = BTreeMap::new();
    let mut means = BTreeMap::new();
    for (class, mask) in &d.masks {
        let phi: Vec<f64> = p.class_map(*class as usize).iter().map(|v| v - 0.5).collect();
        let m = match frozen {
            Some(f) => *f.get(class).ok_or_else(|| {
                Error::InvalidParameter(format!("no frozen region means for class {class}"))
            })?,
            None => {
                let weights: Vec<f64> = phi.iter().map(|&z| h.heaviside(z)).collect();
                weighted_means(mask.data(), &weights)
            }
        };
        per_class.insert(*class, scale * class_energy(mask.data(), &phi, h, &m));
        means.insert(*class, m);
    }
    Ok(LsEnergy {
        total: order_independent_sum(per_class.values().copied()),
        per_class,
        means,
    })
}

/// Level set energy summed over the classes present in `d`.
pub fn ls_energy(p: &ProbMaps, d: &DecomposedGt, h: HeavisideKind) -> Result<LsEnergy> {
    energy_impl(p, d, h, LsReduction::Sum, None)
}

pub fn ls_energy_reduced(
    p: &ProbMaps,
    d: &DecomposedGt,
    h: HeavisideKind,
    reduction: LsReduction,
) -> Result<LsEnergy> {
    energy_impl(p, d, h, reduction, None)
}

/// Energy evaluated with externally supplied region means instead of recomputed ones.
pub fn ls_energy_with_means(
    p: &ProbMaps,
    d: &DecomposedGt,
    h: HeavisideKind,
    reduction: LsReduction,
    means: &BTreeMap<u16, RegionMeans>,
) -> Result<LsEnergy> {
    energy_impl(p, d, h, reduction, Some(means))
}

/// `dE/dphi_l = delta(phi_l) [(G_l - c_l1)^2 - (G_l - c_l2)^2]`, laid out like `p`.
///
/// Classes absent from `d` get zero gradient.
pub fn ls_gradient(p: &ProbMaps, d: &DecomposedGt, h: HeavisideKind) -> Result<Vec<f64>> {
    ls_gradient_reduced(p, d, h, LsReduction::Sum)
}

pub fn ls_gradient_reduced(
    p: &ProbMaps,
    d: &DecomposedGt,
    h: HeavisideKind,
    reduction: LsReduction,
) -> Result<Vec<f64>> {
    check_consistent(p, d)?;
    h.validated()?;
    if !h.is_smooth() {
        return Err(Error::UnsupportedDerivative);
    }
    let plane = p.pixels();
    let scale = reduction_scale(reduction, plane);
    let mut grad = vec![0.0; p.data().len()];
    for (class, mask) in &d.masks {
        let l = *class as usize;
        let phi: Vec<f64> = p.class_map(l).iter().map(|v| v - 0.5).collect();
        let weights: Vec<f64> = phi.iter().map(|&z| h.heaviside(z)).collect();
        let m = weighted_means(mask.data(), &weights);
        for ((out, &gv), &z) in grad[l * plane..(l + 1) * plane]
            .iter_mut()
            .zip(mask.data())
            .zip(&phi)
        {
            let force = (gv - m.inside).powi(2) - (gv - m.outside).powi(2);
            *out = scale * h.delta(z)? * force;
        }
    }
    Ok(grad)
}

/// Chain rule through the per-pixel softmax: gradient wrt logits from gradient wrt probabilities.
pub fn softmax_backward(p: &ProbMaps, grad_p: &[f64]) -> Result<Vec<f64>> {
    if grad_p.len() != p.data().len() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} probabilities",
            grad_p.len(),
            p.data().len()
        )));
    }
    let plane = p.pixels();
    let k = p.classes();
    let probs = p.data();
    let mut out = vec![0.0; grad_p.len()];
    for px in 0..plane {
        let dot: f64 = (0..k).map(|l| grad_p[l * plane + px] * probs[l * plane + px]).sum();
        for l in 0..k {
            let i = l * plane + px;
            out[i] = probs[i] * (grad_p[i] - dot);
        }
    }
    Ok(out)
}

/// Mean pixel-wise cross-entropy and its gradient wrt the pre-softmax logits.
pub fn cross_entropy(p: &ProbMaps, gt: &LabelMap) -> Result<(f64, Vec<f64>)> {
    if (p.height(), p.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "probabilities {}x{} vs labels {}x{}",
            p.height(),
            p.width(),
            gt.height(),
            gt.width()
        )));
    }
    gt.validate(p.classes())?;
    let plane = p.pixels();
    let n = plane as f64;
    let loss = sum_f64(
        gt.data()
            .iter()
            .enumerate()
            .map(|(px, &l)| -p.class_map(l as usize)[px].max(PROB_FLOOR).ln()),
    ) / n;
    let mut grad: Vec<f64> = p.data().iter().map(|v| v / n).collect();
    for (px, &l) in gt.data().iter().enumerate() {
        grad[l as usize * plane + px] -= 1.0 / n;
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight on the level set term; zero gives plain cross-entropy.
    pub lambda_ls: f64,
    pub heaviside: HeavisideKind,
    pub reduction: LsReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ls: DEFAULT_LAMBDA,
            heaviside: HeavisideKind::default(),
            reduction: LsReduction::Sum,
        }
    }
}

impl LossWeights {
    pub fn cross_entropy_only() -> Self {
        LossWeights {
            lambda_ls: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ls >= 0.0) || !self.lambda_ls.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda_ls
            )));
        }
        self.heaviside.validated()?;
        if !self.heaviside.is_smooth() {
            return Err(Error::UnsupportedDerivative);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub ls: f64,
    pub total: f64,
    pub per_class_ls: BTreeMap<u16, f64>,
}

#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub report: LossReport,
    /// Gradient of `report.total` wrt the logits that produced `p`.
    pub logit_grad: Vec<f64>,
    /// Region means the level set gradient was taken at.
    pub means: BTreeMap<u16, RegionMeans>,
}

/// `ce + lambda * ls`, with the gradient wrt logits.
pub fn combined_loss(p: &ProbMaps, gt: &LabelMap, w: &LossWeights) -> Result<CombinedLoss> {
    w.validate()?;
    let (ce, mut logit_grad) = cross_entropy(p, gt)?;
    let d = decompose_ground_truth(gt);
    let energy = ls_energy_reduced(p, &d, w.heaviside, w.reduction)?;
    let ls_grad_p = ls_gradient_reduced(p, &d, w.heaviside, w.reduction)?;
    let ls_grad = softmax_backward(p, &ls_grad_p)?;
    for (g, l) in logit_grad.iter_mut().zip(&ls_grad) {
        *g += w.lambda_ls * l;
    }
    Ok(CombinedLoss {
        report: LossReport {
            ce,
            ls: energy.total,
            total: ce + w.lambda_ls * energy.total,
            per_class_ls: energy.per_class,
        },
        logit_grad,
        means: energy.means,
    })
}

/// Scalar total with region means held at `means`; the function the logit gradient differentiates.
pub fn combined_total_with_means(
    p: &ProbMaps,
    gt: &LabelMap,
    w: &LossWeights,
    means: &BTreeMap<u16, RegionMeans>,
) -> Result<f64> {
    let (ce, _) = cross_entropy(p, gt)?;
    let d = decompose_ground_truth(gt);
    let ls = ls_energy_with_means(p, &d, w.heaviside, w.reduction, means)?.total;
    Ok(ce + w.lambda_ls * ls)
}
