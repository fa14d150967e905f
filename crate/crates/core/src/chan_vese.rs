//! Classic two-region level set segmentation of a grayscale image.
//!
//! Only the fitting terms of the energy are supported (`mu = nu = 0`). With the
//! length and area terms off, the minimization alternates two exact steps:
//! region means for a fixed partition, then the pointwise best partition for
//! fixed means. Each step can only lower the energy, so traces are monotone.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::grid::{sum_f64, BinaryMask, Image};
use crate::heaviside::HeavisideKind;

/// Denominators below this mark a region as empty.
pub const EMPTY_REGION_THRESHOLD: f64 = 1e-12;

/// A level set function with values in `[-0.5, 0.5]`; the contour is its zero crossing.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LevelSetField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} level set",
                data.len()
            )));
        }
        if let Some(index) = data
            .iter()
            .position(|v| !v.is_finite() || !(-0.5..=0.5).contains(v))
        {
            return Err(Error::InvalidValue(format!(
                "level set value {} at index {index} outside [-0.5, 0.5]",
                data[index]
            )));
        }
        Ok(LevelSetField {
            height,
            width,
            data,
        })
    }

    pub fn from_fn<F: Fn(usize, usize) -> f64>(height: usize, width: usize, f: F) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::new(height, width, data)
    }

    /// `+0.5` inside `mask`, `-0.5` outside.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        LevelSetField {
            height: mask.height(),
            width: mask.width(),
            data: mask.data().iter().map(|&m| m - 0.5).collect(),
        }
    }

    /// Seeded random `±0.5` field.
    pub fn random_binary(height: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let data = (0..height * width)
            .map(|_| if rng.random::<bool>() { 0.5 } else { -0.5 })
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Interior (`phi >= 0`) as a mask.
    pub fn interior(&self) -> BinaryMask {
        let data = self
            .data
            .iter()
            .map(|&v| if v >= 0.0 { 1.0 } else { 0.0 })
            .collect();
        BinaryMask::new(self.height, self.width, data).expect("shape already validated")
    }

    pub fn negated(&self) -> LevelSetField {
        LevelSetField {
            data: self.data.iter().map(|v| -v).collect(),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvParams {
    pub mu: f64,
    pub nu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub heaviside: HeavisideKind,
    pub max_iters: usize,
    /// Stop once the energy changes by less than this.
    pub tol: f64,
}

impl Default for CvParams {
    fn default() -> Self {
        CvParams {
            mu: 0.0,
            nu: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            heaviside: HeavisideKind::Exact,
            max_iters: 100,
            tol: 1e-12,
        }
    }
}

impl CvParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.mu >= 0.0) || !(self.nu >= 0.0) {
            return bad(format!("mu and nu must be >= 0, got {} and {}", self.mu, self.nu));
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return bad(format!(
                "lambda1 and lambda2 must be > 0, got {} and {}",
                self.lambda1, self.lambda2
            ));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.tol >= 0.0) {
            return bad(format!("tol must be >= 0, got {}", self.tol));
        }
        self.heaviside.validated()?;
        if self.mu != 0.0 {
            return Err(Error::UnsupportedTerm("length term (mu != 0)"));
        }
        if self.nu != 0.0 {
            return Err(Error::UnsupportedTerm("area term (nu != 0)"));
        }
        Ok(())
    }
}

/// Mean intensities inside and outside the contour.
///
/// An empty region (weight below [`EMPTY_REGION_THRESHOLD`]) gets mean `0.0`
/// and its `*_empty` flag set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionMeans {
    pub inside: f64,
    pub outside: f64,
    pub inside_empty: bool,
    pub outside_empty: bool,
}

impl RegionMeans {
    pub fn is_degenerate(&self) -> bool {
        self.inside_empty || self.outside_empty
    }
}

fn check_single_channel(image: &Image, phi: &LevelSetField) -> Result<()> {
    if image.channels() != 1 {
        return Err(Error::Shape(format!(
            "expected a single-channel image, got {} channels",
            image.channels()
        )));
    }
    if (image.height(), image.width()) != (phi.height, phi.width) {
        return Err(Error::Shape(format!(
            "image {}x{} vs level set {}x{}",
            image.height(),
            image.width(),
            phi.height,
            phi.width
        )));
    }
    Ok(())
}

/// Heaviside-weighted means of `values` inside / outside; shared with the loss module.
pub(crate) fn weighted_means(values: &[f64], weights: &[f64]) -> RegionMeans {
    let w_in = sum_f64(weights.iter().copied());
    let w_out = sum_f64(weights.iter().map(|h| 1.0 - h));
    let num_in = sum_f64(values.iter().zip(weights).map(|(u, h)| u * h));
    let num_out = sum_f64(values.iter().zip(weights).map(|(u, h)| u * (1.0 - h)));
    let inside_empty = w_in < EMPTY_REGION_THRESHOLD;
    let outside_empty = w_out < EMPTY_REGION_THRESHOLD;
    RegionMeans {
        inside: if inside_empty { 0.0 } else { num_in / w_in },
        outside: if outside_empty { 0.0 } else { num_out / w_out },
        inside_empty,
        outside_empty,
    }
}

pub fn region_means(image: &Image, phi: &LevelSetField, h: HeavisideKind) -> Result<RegionMeans> {
    check_single_channel(image, phi)?;
    let weights: Vec<f64> = phi.data.iter().map(|&z| h.heaviside(z)).collect();
    Ok(weighted_means(image.data(), &weights))
}

fn fitting_energy(values: &[f64], weights: &[f64], means: &RegionMeans, l1: f64, l2: f64) -> f64 {
    let inside = sum_f64(
        values
            .iter()
            .zip(weights)
            .map(|(u, h)| (u - means.inside).powi(2) * h),
    );
    let outside = sum_f64(
        values
            .iter()
            .zip(weights)
            .map(|(u, h)| (u - means.outside).powi(2) * (1.0 - h)),
    );
    l1 * inside + l2 * outside
}

/// Region fitting energy with means recomputed from `phi`.
pub fn cv_energy(image: &Image, phi: &LevelSetField, p: &CvParams) -> Result<f64> {
    p.validate()?;
    check_single_channel(image, phi)?;
    let weights: Vec<f64> = phi.data.iter().map(|&z| p.heaviside.heaviside(z)).collect();
    let means = weighted_means(image.data(), &weights);
    Ok(fitting_energy(image.data(), &weights, &means, p.lambda1, p.lambda2))
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub phi: LevelSetField,
    /// Energy of the initial field followed by one entry per iteration.
    pub energy_trace: Vec<f64>,
    /// Every pixel ended up in one region.
    pub degenerate: bool,
}

impl CvOutcome {
    pub fn iterations(&self) -> usize {
        self.energy_trace.len() - 1
    }
}

/// Alternating minimization of the two-region energy.
///
/// Means are always taken with the exact step function and the energy trace
/// uses it too, since the alternation minimizes exactly that energy.
/// `p.heaviside` is ignored here.
pub fn cv_segment(image: &Image, p: &CvParams, init: &LevelSetField) -> Result<CvOutcome> {
    p.validate()?;
    check_single_channel(image, init)?;
    let exact = CvParams {
        heaviside: HeavisideKind::Exact,
        ..*p
    };
    let u = image.data();
    let mut phi = init.clone();
    let mut trace = vec![cv_energy(image, &phi, &exact)?];
    let mut single_region_streak = 0usize;
    let mut degenerate = false;

    for _ in 0..p.max_iters {
        let means = region_means(image, &phi, HeavisideKind::Exact)?;
        let next: Vec<f64> = u
            .iter()
            .map(|&v| {
                let inside = p.lambda1 * (v - means.inside).powi(2);
                let outside = p.lambda2 * (v - means.outside).powi(2);
                if inside <= outside {
                    0.5
                } else {
                    -0.5
                }
            })
            .collect();
        let unchanged = next == phi.data;
        phi.data = next;
        let energy = cv_energy(image, &phi, &exact)?;
        let previous = *trace.last().expect("trace starts non-empty");
        trace.push(energy);

        let inside_count = phi.data.iter().filter(|&&v| v > 0.0).count();
        let single_region = inside_count == 0 || inside_count == phi.data.len();
        single_region_streak = if single_region { single_region_streak + 1 } else { 0 };
        let converged = unchanged || (previous - energy).abs() < p.tol;
        if single_region_streak >= 2 || (single_region && converged) {
            degenerate = true;
            break;
        }
        if converged {
            break;
        }
    }

    Ok(CvOutcome {
        phi,
        energy_trace: trace,
        degenerate,
    })
}

/// Negates `phi` if needed so that the interior has the higher mean intensity.
pub fn orient_bright_inside(image: &Image, phi: &LevelSetField) -> Result<LevelSetField> {
    let m = region_means(image, phi, HeavisideKind::Exact)?;
    if !m.inside_empty && !m.outside_empty && m.inside < m.outside {
        Ok(phi.negated())
    } else {
        Ok(phi.clone())
    }
}
