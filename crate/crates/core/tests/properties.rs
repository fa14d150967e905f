use lsseg_core::chan_vese::{cv_energy, cv_segment, CvParams, LevelSetField};
use lsseg_core::data_synth::{generate_scene, SceneSpec};
use lsseg_core::heaviside::DEFAULT_TANH_EPSILON;
use lsseg_core::ls_loss::{combined_loss, decompose_ground_truth, ls_energy, ls_gradient, LossWeights, DEFAULT_LAMBDA};
use lsseg_core::metrics::{mean_iou, ConfusionMatrix};
use lsseg_core::{HeavisideKind, Image, LabelMap, ProbMaps};
use proptest::prelude::*;

const K: usize = 3;
const H: usize = 6;
const W: usize = 5;

fn probs_and_labels() -> impl Strategy<Value = (ProbMaps, LabelMap)> {
    (
        prop::collection::vec(-4.0f64..4.0, K * H * W),
        prop::collection::vec(0u16..K as u16, H * W),
    )
        .prop_map(|(logits, labels)| {
            (
                ProbMaps::from_logits(K, H, W, &logits).unwrap(),
                LabelMap::new(H, W, labels).unwrap(),
            )
        })
}

fn relabel(p: &ProbMaps, gt: &LabelMap, perm: &[usize]) -> (ProbMaps, LabelMap) {
    let mut data = vec![0.0; p.data().len()];
    for c in 0..K {
        data[perm[c] * H * W..(perm[c] + 1) * H * W].copy_from_slice(p.class_map(c));
    }
    let labels = gt.data().iter().map(|&l| perm[l as usize] as u16).collect();
    (ProbMaps::new(K, H, W, data).unwrap(), LabelMap::new(H, W, labels).unwrap())
}

#[test]
fn default_weights() {
    let w = LossWeights::default();
    assert_eq!(w.lambda_ls, 4e-4);
    assert_eq!(w.lambda_ls, DEFAULT_LAMBDA);
    assert_eq!(w.heaviside, HeavisideKind::tanh(1.0 / 20.0).unwrap());
    assert_eq!(DEFAULT_TANH_EPSILON, 0.05);
}

#[test]
fn tiny_epsilon_starves_the_gradient() {
    let logits: Vec<f64> = (0..K * H * W).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
    let p = ProbMaps::from_logits(K, H, W, &logits).unwrap();
    // labels follow the top scoring class on most pixels so region means differ
    let labels = (0..H * W)
        .map(|i| {
            let best = (0..K).max_by(|&a, &b| logits[a * H * W + i].total_cmp(&logits[b * H * W + i])).unwrap();
            if i % 5 == 0 { ((best + 1) % K) as u16 } else { best as u16 }
        })
        .collect();
    let gt = LabelMap::new(H, W, labels).unwrap();
    let d = decompose_ground_truth(&gt);
    let norm = |eps: f64| {
        let g = ls_gradient(&p, &d, HeavisideKind::tanh(eps).unwrap()).unwrap();
        g.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let wide = norm(DEFAULT_TANH_EPSILON);
    let sharp = norm(1e-8);
    assert!(wide > 1e-2, "{wide}");
    assert!(sharp < 1e-6 * wide, "{sharp} vs {wide}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ls_total_ignores_class_names((p, gt) in probs_and_labels(), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let h = HeavisideKind::default();
        let a = ls_energy(&p, &decompose_ground_truth(&gt), h).unwrap().total;
        let (q, gq) = relabel(&p, &gt, &perm);
        let b = ls_energy(&q, &decompose_ground_truth(&gq), h).unwrap().total;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ls_energy_is_non_negative((p, gt) in probs_and_labels(), eps in 1e-3f64..2.0) {
        let e = ls_energy(&p, &decompose_ground_truth(&gt), HeavisideKind::tanh(eps).unwrap()).unwrap();
        prop_assert!(e.total >= 0.0);
        for v in e.per_class.values() {
            prop_assert!(*v >= 0.0);
        }
    }

    #[test]
    fn combined_total_splits((p, gt) in probs_and_labels(), lambda in 0.0f64..1.0) {
        let w = LossWeights { lambda_ls: lambda, ..Default::default() };
        let r = combined_loss(&p, &gt, &w).unwrap().report;
        prop_assert!(r.ce >= 0.0);
        let expect = r.ce + lambda * r.ls;
        prop_assert!((r.total - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn miou_is_a_fraction(gt in prop::collection::vec(0u16..K as u16, H * W), pred in prop::collection::vec(0u16..K as u16, H * W)) {
        let mut cm = ConfusionMatrix::new(K);
        cm.accumulate(&LabelMap::new(H, W, gt).unwrap(), &LabelMap::new(H, W, pred).unwrap()).unwrap();
        let m = mean_iou(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.miou));
    }

    #[test]
    fn perfect_prediction_scores_one(gt in prop::collection::vec(0u16..K as u16, H * W)) {
        let labels = LabelMap::new(H, W, gt).unwrap();
        let mut cm = ConfusionMatrix::new(K);
        cm.accumulate(&labels, &labels).unwrap();
        prop_assert_eq!(mean_iou(&cm).unwrap().miou, 1.0);
    }

    #[test]
    fn cv_energy_never_rises(pixels in prop::collection::vec(0.0f64..1.0, 64), seed in any::<u64>()) {
        let image = Image::new(8, 8, 1, pixels).unwrap();
        let init = LevelSetField::random_binary(8, 8, seed).unwrap();
        let p = CvParams::default();
        let out = cv_segment(&image, &p, &init).unwrap();
        for w in out.energy_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(cv_energy(&image, &out.phi, &p).unwrap() >= 0.0);
    }

    #[test]
    fn scenes_are_reproducible(seed in any::<u64>(), index in 0u64..1000) {
        let spec = SceneSpec { height: 16, width: 16, seed, ..Default::default() };
        let a = generate_scene(&spec, index).unwrap();
        let b = generate_scene(&spec, index).unwrap();
        prop_assert_eq!(a.image.data(), b.image.data());
        prop_assert_eq!(a.labels.data(), b.labels.data());
        prop_assert!(a.labels.data().iter().all(|&l| (l as usize) < spec.num_classes));
    }
}
