//! Training-loop invariants that only show up across whole runs: the frozen
//! encoder never drifts, and adding the alignment terms pays for itself on
//! the total-loss curve once warmup is past.

use capalign_core::mat::Mat;
use capalign_core::numio::RunConfig;
use capalign_core::toycap::{
    make_batch, make_dataset, train, train_with, SceneGenConfig, TrainMode, TrainOptions,
};

#[test]
fn alignment_terms_lower_the_total_loss_curve_after_warmup() {
    // Matched seeds and data, two 192-step runs compared as area under the
    // total-loss curve with the first 10% of steps skipped. The full
    // objective carries three extra nonnegative terms on the meter, so the
    // comparison only tips its way once the shaped bridge features pay off
    // in caption loss; the run is long enough to reach that regime (at 6
    // epochs the transient still dominates and the ordering is reversed).
    let scene = SceneGenConfig::default();
    let cfg = RunConfig::default();
    let dataset = make_dataset(&scene, cfg.seed, 8).unwrap();

    let full = train(&dataset, &cfg, 24).unwrap();
    let ce_only = train_with(
        &dataset,
        &cfg,
        24,
        &TrainOptions { mode: TrainMode::CaptionOnly, ..TrainOptions::default() },
    )
    .unwrap();

    assert_eq!(full.history.len(), ce_only.history.len());
    let steps = full.history.len();
    let skip = steps.div_ceil(10);
    let auc = |hist: &[capalign_core::toycap::StepMetrics]| {
        hist[skip..].iter().map(|m| m.losses.total).sum::<f64>()
    };
    let auc_full = auc(&full.history);
    let auc_ce = auc(&ce_only.history);
    assert!(
        auc_full <= auc_ce,
        "full-objective AUC {auc_full:.4} exceeds caption-only AUC {auc_ce:.4} over steps {skip}..{steps}"
    );
    // The caption term itself, not just the shrinking auxiliaries, should
    // end up ahead; otherwise the win above is an accounting artifact.
    let tail = steps - 8;
    let tail_ce = |hist: &[capalign_core::toycap::StepMetrics]| {
        hist[tail..].iter().map(|m| m.losses.ce).sum::<f64>() / 8.0
    };
    assert!(tail_ce(&full.history) < tail_ce(&ce_only.history));
}

#[test]
fn the_encoder_is_bitwise_frozen_across_training() {
    let scene = SceneGenConfig::default();
    let cfg = RunConfig::default();
    let dataset = make_dataset(&scene, cfg.seed, 4).unwrap();
    let probe = make_batch(&scene, 999, 0).unwrap();

    let before_model = capalign_core::toycap::ToyModel::new(Default::default(), cfg.seed).unwrap();
    let before: Vec<Mat> =
        (0..probe.batch()).map(|i| before_model.encoder.encode(probe.raw_real(i))).collect();

    let run = train(&dataset, &cfg, 2).unwrap();
    for (i, want) in before.iter().enumerate() {
        let got = run.model.encoder.encode(probe.raw_real(i));
        assert!(got.bits_eq(want), "encoder output for image {i} changed during training");
    }
}
