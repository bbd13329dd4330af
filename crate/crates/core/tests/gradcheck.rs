//! Finite-difference verification of the analytic gradients through the
//! full model (tokenizer, encoder, both heads, both losses) at 64-bit
//! precision, plus the head-isolation and linearity contracts.

use ndarray::Array4;

use cofinetune_core::data::{BoxCoords, TaskKind, VideoClip};
use cofinetune_core::model::{
    backward, forward_with_cache, EncodeMode, HeadSpec, ModelConfig, ModelState, Prediction,
    TaskTicket,
};
use cofinetune_core::rng::{derive_rng, uniform};
use cofinetune_core::train::{classification_loss, classification_loss_grad, detection_loss, detection_loss_terms};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_t: 4,
        input_h: 16,
        input_w: 16,
        input_c: 1,
        tubelet: (2, 2, 2),
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 4,
        mlp_hidden: 32,
        stochastic_depth_rate: 0.0,
        roi_grid: (2, 2),
        heads: vec![
            HeadSpec {
                task: TaskKind::Classification,
                num_classes: 3,
            },
            HeadSpec {
                task: TaskKind::Detection,
                num_classes: 4,
            },
        ],
    }
}

fn random_clip(seed: u64, cfg: &ModelConfig) -> VideoClip<f64> {
    let mut rng = derive_rng(seed, "gradcheck-clip", 0, 0);
    VideoClip::new(
        "clip",
        Array4::from_shape_fn((cfg.input_t, cfg.input_h, cfg.input_w, cfg.input_c), |_| {
            uniform(&mut rng, 0.0, 1.0)
        }),
        1,
    )
    .unwrap()
}

fn classification_objective(state: &ModelState<f64>, clip: &VideoClip<f64>) -> f64 {
    let ticket = TaskTicket {
        dataset_index: 0,
        proposals: None,
    };
    let (pred, _) = forward_with_cache(clip, &ticket, state, EncodeMode::Eval, None).unwrap();
    let Prediction::Classification { logits } = pred else {
        panic!("classification expected")
    };
    classification_loss(&logits, 1, 0.1).unwrap()
}

fn detection_objective(
    state: &ModelState<f64>,
    clip: &VideoClip<f64>,
    boxes: &[BoxCoords],
    labels: &[std::collections::BTreeSet<u32>],
) -> f64 {
    let ticket = TaskTicket {
        dataset_index: 1,
        proposals: Some(boxes.to_vec()),
    };
    let (pred, _) = forward_with_cache(clip, &ticket, state, EncodeMode::Eval, None).unwrap();
    let Prediction::Detection { logits } = pred else {
        panic!("detection expected")
    };
    detection_loss(&logits, labels).unwrap()
}

fn max_relative_error(
    state: &ModelState<f64>,
    grads: &ModelState<f64>,
    head: usize,
    objective: impl Fn(&ModelState<f64>) -> f64,
) -> f64 {
    let eps = 1e-5;
    let analytic = grads.trainable_slices(head);
    let mut worst: f64 = 0.0;
    let n_arrays = analytic.len();
    for a in 0..n_arrays {
        for i in 0..analytic[a].len() {
            let mut plus = state.clone();
            plus.trainable_slices_mut(head)[a][i] += eps;
            let mut minus = state.clone();
            minus.trainable_slices_mut(head)[a][i] -= eps;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            let g = analytic[a][i];
            let denom = numeric.abs().max(g.abs()).max(1e-6);
            let rel = (numeric - g).abs() / denom;
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn classification_gradients_match_finite_differences() {
    let started = std::time::Instant::now();
    let cfg = tiny_config();
    let state = ModelState::<f64>::init(cfg.clone(), 11).unwrap();
    let clip = random_clip(1, &cfg);

    let ticket = TaskTicket {
        dataset_index: 0,
        proposals: None,
    };
    let (pred, cache) =
        forward_with_cache(&clip, &ticket, &state, EncodeMode::Eval, None).unwrap();
    let Prediction::Classification { logits } = pred else {
        panic!("classification expected")
    };
    let (_, dlogits) = classification_loss_grad(&logits, 1, 0.1).unwrap();
    let grads = backward(&state, &cache, Some(&dlogits), None).unwrap();

    // The detection head never participates: its gradient is exactly zero.
    for slice in grads.head_slices(1) {
        assert!(slice.iter().all(|&g| g == 0.0));
    }
    // The backbone gradient is generically nonzero.
    assert!(grads
        .backbone_slices()
        .iter()
        .any(|s| s.iter().any(|&g| g != 0.0)));

    let worst = max_relative_error(&state, &grads, 0, |s| classification_objective(s, &clip));
    assert!(
        worst < 1e-4,
        "classification max relative error {worst:.3e}"
    );
    eprintln!(
        "classification gradcheck: max rel err {worst:.3e} in {:.1?}",
        started.elapsed()
    );
}

#[test]
fn detection_gradients_match_finite_differences() {
    let started = std::time::Instant::now();
    let cfg = tiny_config();
    let state = ModelState::<f64>::init(cfg.clone(), 12).unwrap();
    let clip = random_clip(2, &cfg);
    let boxes = vec![
        BoxCoords::new(0.1, 0.15, 0.55, 0.6).unwrap(),
        BoxCoords::new(0.4, 0.35, 0.9, 0.85).unwrap(),
    ];
    let labels: Vec<std::collections::BTreeSet<u32>> = vec![
        [0u32, 2].into_iter().collect(),
        [3u32].into_iter().collect(),
    ];

    let ticket = TaskTicket {
        dataset_index: 1,
        proposals: Some(boxes.clone()),
    };
    let (pred, cache) =
        forward_with_cache(&clip, &ticket, &state, EncodeMode::Eval, None).unwrap();
    let Prediction::Detection { logits } = pred else {
        panic!("detection expected")
    };
    let (_, terms, mut dlogits) = detection_loss_terms(&logits, &labels).unwrap();
    dlogits.mapv_inplace(|g| g / terms as f64);
    let grads = backward(&state, &cache, None, Some(&dlogits)).unwrap();

    for slice in grads.head_slices(0) {
        assert!(slice.iter().all(|&g| g == 0.0));
    }

    let worst = max_relative_error(&state, &grads, 1, |s| {
        detection_objective(s, &clip, &boxes, &labels)
    });
    assert!(worst < 1e-4, "detection max relative error {worst:.3e}");
    eprintln!(
        "detection gradcheck: max rel err {worst:.3e} in {:.1?}",
        started.elapsed()
    );
}

#[test]
fn forward_head_isolation() {
    let cfg = tiny_config();
    let state = ModelState::<f64>::init(cfg.clone(), 20).unwrap();
    let clip = random_clip(5, &cfg);
    let ticket = TaskTicket {
        dataset_index: 0,
        proposals: None,
    };
    let (before, _) = forward_with_cache(&clip, &ticket, &state, EncodeMode::Eval, None).unwrap();

    // Perturbing the detection head leaves classification outputs unchanged.
    let mut perturbed = state.clone();
    for slice in perturbed.head_slices_mut(1) {
        for v in slice.iter_mut() {
            *v += 10.0;
        }
    }
    let (after, _) =
        forward_with_cache(&clip, &ticket, &perturbed, EncodeMode::Eval, None).unwrap();
    assert_eq!(before, after);
}

#[test]
fn identical_head_params_give_identical_logits() {
    let mut cfg = tiny_config();
    cfg.heads = vec![
        HeadSpec {
            task: TaskKind::Classification,
            num_classes: 3,
        },
        HeadSpec {
            task: TaskKind::Classification,
            num_classes: 3,
        },
    ];
    let mut state = ModelState::<f64>::init(cfg.clone(), 30).unwrap();
    let weights = state.head_slices(0)[0].to_vec();
    for (dst, src) in state.head_slices_mut(1)[0].iter_mut().zip(weights.iter()) {
        *dst = *src;
    }
    let clip = random_clip(6, &cfg);
    let p0 = forward_with_cache(
        &clip,
        &TaskTicket {
            dataset_index: 0,
            proposals: None,
        },
        &state,
        EncodeMode::Eval,
        None,
    )
    .unwrap()
    .0;
    let p1 = forward_with_cache(
        &clip,
        &TaskTicket {
            dataset_index: 1,
            proposals: None,
        },
        &state,
        EncodeMode::Eval,
        None,
    )
    .unwrap()
    .0;
    assert_eq!(p0, p1);
}

#[test]
fn forward_requires_proposals_for_detection() {
    let cfg = tiny_config();
    let state = ModelState::<f64>::init(cfg.clone(), 31).unwrap();
    let clip = random_clip(7, &cfg);
    let err = forward_with_cache(
        &clip,
        &TaskTicket {
            dataset_index: 1,
            proposals: None,
        },
        &state,
        EncodeMode::Eval,
        None,
    );
    assert!(err.is_err());
}

#[test]
fn detection_logits_have_one_row_per_proposal() {
    let cfg = tiny_config();
    let state = ModelState::<f64>::init(cfg.clone(), 32).unwrap();
    let clip = random_clip(8, &cfg);
    let boxes: Vec<BoxCoords> = (0..5)
        .map(|i| {
            let off = i as f64 * 0.05;
            BoxCoords::new(0.1 + off, 0.1, 0.5 + off, 0.6).unwrap()
        })
        .collect();
    let (pred, _) = forward_with_cache(
        &clip,
        &TaskTicket {
            dataset_index: 1,
            proposals: Some(boxes),
        },
        &state,
        EncodeMode::Eval,
        None,
    )
    .unwrap();
    let Prediction::Detection { logits } = pred else {
        panic!()
    };
    assert_eq!(logits.dim(), (5, 4));
}
