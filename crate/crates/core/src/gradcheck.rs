//! Finite-difference checks of every analytic derivative used in training.
//!
//! Relative errors are `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`. The floor
//! keeps entries whose true derivative is near zero (deep in the flat tails of
//! a smooth step, where central differences are pure roundoff) from dominating.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::chan_vese::weighted_means;
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, ProbMaps};
use crate::heaviside::HeavisideKind;
use crate::ls_loss::{
    class_energy, combined_loss, cross_entropy, decompose_ground_truth, ls_energy, ls_energy_with_means,
    ls_gradient, softmax_backward, LossWeights, LsReduction,
};
use crate::tinynet::{NetConfig, TinyNet};

pub const REL_ERR_FLOOR: f64 = 1e-3;
pub const DELTA_TOLERANCE: f64 = 1e-5;
pub const LS_TOLERANCE: f64 = 1e-5;
pub const CE_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

const DELTA_STEP: f64 = 1e-6;
const PHI_STEP: f64 = 1e-5;
const LOGIT_STEP: f64 = 1e-6;
const PARAM_STEP: f64 = 1e-6;

/// Epsilons exercised by the level set checks.
pub const CHECK_EPSILONS: [f64; 2] = [1.0 / 20.0, 1.0];

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub cases: usize,
    /// Negates every analytic gradient; the checks must then fail.
    #[doc(hidden)]
    pub inject_sign_flip: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            cases: 10,
            inject_sign_flip: false,
        }
    }
}

impl GradcheckConfig {
    fn sign(&self) -> f64 {
        if self.inject_sign_flip {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub components: Vec<ComponentReport>,
    /// Level set gradient against differences that also move the region means; informational.
    pub ls_unfrozen_max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentReport::passed)
    }
}

fn random_labels(rng: &mut Xoshiro256PlusPlus, h: usize, w: usize, k: usize) -> LabelMap {
    let data = (0..h * w).map(|_| rng.random_range(0..k) as u16).collect();
    LabelMap::new(h, w, data).expect("positive size")
}

fn random_logits(rng: &mut Xoshiro256PlusPlus, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Smooth-step derivative against differences of the step itself, 1000 points per case.
pub fn check_delta(cfg: &GradcheckConfig) -> Result<ComponentReport> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for case in 0..cfg.cases {
        let eps = CHECK_EPSILONS[case % CHECK_EPSILONS.len()];
        let kind = HeavisideKind::tanh(eps)?;
        for _ in 0..1000 {
            let z: f64 = rng.random_range(-0.5..=0.5);
            let fd = (kind.heaviside(z + DELTA_STEP) - kind.heaviside(z - DELTA_STEP)) / (2.0 * DELTA_STEP);
            worst = worst.max(rel_err(cfg.sign() * kind.delta(z)?, fd));
            checked += 1;
        }
    }
    Ok(ComponentReport {
        name: "mahf-delta",
        checked,
        max_rel_err: worst,
        tolerance: DELTA_TOLERANCE,
    })
}

/// Level set gradient wrt each `phi_l` against differences of the energy with region means frozen.
pub fn check_ls_gradient(cfg: &GradcheckConfig) -> Result<(ComponentReport, f64)> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x4c53);
    let mut worst = 0.0f64;
    let mut worst_unfrozen = 0.0f64;
    let mut checked = 0;
    for case in 0..cfg.cases {
        let h = rng.random_range(4..=16);
        let w = rng.random_range(4..=16);
        let k = rng.random_range(2..=4);
        let eps = CHECK_EPSILONS[case % CHECK_EPSILONS.len()];
        let kind = HeavisideKind::tanh(eps)?;
        let logits = random_logits(&mut rng, k * h * w, 1.5);
        let p = ProbMaps::from_logits(k, h, w, &logits)?;
        let gt = random_labels(&mut rng, h, w, k);
        let d = decompose_ground_truth(&gt);
        let analytic = ls_gradient(&p, &d, kind)?;
        let means = ls_energy(&p, &d, kind)?.means;
        let plane = h * w;
        let mut numeric = vec![0.0; analytic.len()];
        let mut numeric_unfrozen = vec![0.0; analytic.len()];
        for (class, mask) in d.masks() {
            let l = *class as usize;
            let m = means[class];
            let mut phi: Vec<f64> = p.class_map(l).iter().map(|v| v - 0.5).collect();
            let energy = |phi: &[f64], frozen: bool| {
                let m = if frozen {
                    m
                } else {
                    let weights: Vec<f64> = phi.iter().map(|&z| kind.heaviside(z)).collect();
                    weighted_means(mask.data(), &weights)
                };
                class_energy(mask.data(), phi, kind, &m)
            };
            for px in 0..plane {
                let base = phi[px];
                phi[px] = base + PHI_STEP;
                let (up, up_free) = (energy(&phi, true), energy(&phi, false));
                phi[px] = base - PHI_STEP;
                let (down, down_free) = (energy(&phi, true), energy(&phi, false));
                phi[px] = base;
                numeric[l * plane + px] = (up - down) / (2.0 * PHI_STEP);
                numeric_unfrozen[l * plane + px] = (up_free - down_free) / (2.0 * PHI_STEP);
            }
        }
        let analytic: Vec<f64> = analytic.iter().map(|g| cfg.sign() * g).collect();
        worst = worst.max(max_rel_err(&analytic, &numeric));
        worst_unfrozen = worst_unfrozen.max(max_rel_err(&analytic, &numeric_unfrozen));
        checked += analytic.len();
    }
    Ok((
        ComponentReport {
            name: "ls-gradient",
            checked,
            max_rel_err: worst,
            tolerance: LS_TOLERANCE,
        },
        worst_unfrozen,
    ))
}

/// Cross-entropy gradient wrt logits.
pub fn check_ce_gradient(cfg: &GradcheckConfig) -> Result<ComponentReport> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x4345);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..cfg.cases {
        let h = rng.random_range(2..=8);
        let w = rng.random_range(2..=8);
        let k = rng.random_range(2..=4);
        let mut logits = random_logits(&mut rng, k * h * w, 2.0);
        let gt = random_labels(&mut rng, h, w, k);
        let (_, analytic) = cross_entropy(&ProbMaps::from_logits(k, h, w, &logits)?, &gt)?;
        let mut numeric = vec![0.0; logits.len()];
        for i in 0..logits.len() {
            let base = logits[i];
            logits[i] = base + LOGIT_STEP;
            let up = cross_entropy(&ProbMaps::from_logits(k, h, w, &logits)?, &gt)?.0;
            logits[i] = base - LOGIT_STEP;
            let down = cross_entropy(&ProbMaps::from_logits(k, h, w, &logits)?, &gt)?.0;
            logits[i] = base;
            numeric[i] = (up - down) / (2.0 * LOGIT_STEP);
        }
        let analytic: Vec<f64> = analytic.iter().map(|g| cfg.sign() * g).collect();
        worst = worst.max(max_rel_err(&analytic, &numeric));
        checked += analytic.len();
    }
    Ok(ComponentReport {
        name: "ce-gradient",
        checked,
        max_rel_err: worst,
        tolerance: CE_TOLERANCE,
    })
}

/// Network configuration used for the end-to-end check (under 5000 parameters).
pub fn end_to_end_net_config(num_classes: usize) -> NetConfig {
    NetConfig {
        in_channels: 1,
        width1: 8,
        width2: 16,
        num_classes,
    }
}

/// Parameter gradients through the network for cross-entropy alone, the level
/// set term alone (means frozen) and the combined loss (means free).
pub fn check_end_to_end(cfg: &GradcheckConfig) -> Result<ComponentReport> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x4532);
    let weights = LossWeights::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for case in 0..cfg.cases {
        let (h, w, k) = (8, 8, 3);
        let mut net = TinyNet::new(end_to_end_net_config(k), cfg.seed.wrapping_add(case as u64))?;
        let img = Image::new(h, w, 1, (0..h * w).map(|_| rng.random::<f64>()).collect())?;
        let gt = random_labels(&mut rng, h, w, k);
        let d = decompose_ground_truth(&gt);

        let pass = net.forward(&img)?;
        let (_, ce_logit) = cross_entropy(&pass.probs, &gt)?;
        let ls_p = ls_gradient(&pass.probs, &d, weights.heaviside)?;
        let ls_logit = softmax_backward(&pass.probs, &ls_p)?;
        let combined = combined_loss(&pass.probs, &gt, &weights)?;
        let means = combined.means.clone();
        let analytic: Vec<Vec<f64>> = [&ce_logit, &ls_logit, &combined.logit_grad]
            .iter()
            .map(|g| net.backward(&pass.cache, g).map(|n| n.flatten()))
            .collect::<Result<_>>()?;

        let losses = |net: &TinyNet| -> Result<[f64; 3]> {
            let probs = net.forward(&img)?.probs;
            let ce = cross_entropy(&probs, &gt)?.0;
            let ls = ls_energy_with_means(&probs, &d, weights.heaviside, LsReduction::Sum, &means)?.total;
            let total = combined_loss(&probs, &gt, &weights)?.report.total;
            Ok([ce, ls, total])
        };
        let mut params = net.parameters();
        let mut numeric = vec![vec![0.0; params.len()]; 3];
        for i in 0..params.len() {
            let base = params[i];
            params[i] = base + PARAM_STEP;
            net.set_parameters(&params)?;
            let up = losses(&net)?;
            params[i] = base - PARAM_STEP;
            net.set_parameters(&params)?;
            let down = losses(&net)?;
            params[i] = base;
            for v in 0..3 {
                numeric[v][i] = (up[v] - down[v]) / (2.0 * PARAM_STEP);
            }
        }
        for v in 0..3 {
            let a: Vec<f64> = analytic[v].iter().map(|g| cfg.sign() * g).collect();
            worst = worst.max(max_rel_err(&a, &numeric[v]));
            checked += a.len();
        }
    }
    Ok(ComponentReport {
        name: "end-to-end",
        checked,
        max_rel_err: worst,
        tolerance: END_TO_END_TOLERANCE,
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.cases == 0 {
        return Err(Error::InvalidParameter("gradcheck needs at least one case".into()));
    }
    let (ls, ls_unfrozen_max_rel_err) = check_ls_gradient(cfg)?;
    Ok(GradcheckReport {
        components: vec![
            check_delta(cfg)?,
            ls,
            check_ce_gradient(cfg)?,
            check_end_to_end(cfg)?,
        ],
        ls_unfrozen_max_rel_err,
    })
}
