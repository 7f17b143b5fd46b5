use logan_core::objectives::{LossKind, ObjectiveSpec, PenaltyKind};
use logan_core::toydata::{LatentSpec, ToyDistribution};
use logan_core::trainer::{train, TrainConfig, METRICS_HEADER};

fn short(loss: LossKind, penalty: PenaltyKind) -> TrainConfig {
    let mut cfg = TrainConfig::new(ObjectiveSpec::new(loss, penalty));
    cfg.steps = 600;
    cfg.batch_size = 32;
    cfg.eval_every = 200;
    cfg.eval.n_samples = 2000;
    cfg
}

#[test]
fn ring8_run_records_a_coverage_trace() {
    let cfg = short(LossKind::Lol1, PenaltyKind::PairwiseGp);
    let art = train(&cfg, &ToyDistribution::default(), &LatentSpec::new(2).unwrap()).unwrap();
    let steps: Vec<usize> = art.metrics.iter().map(|r| r.step).collect();
    assert_eq!(steps, [0, 200, 400, 600]);
    assert_eq!(art.snapshots.len(), 4);
    for r in &art.metrics {
        assert!(r.modes_captured <= 8);
        assert!((0.0..=1.0).contains(&r.hq_fraction));
        assert!(r.loss_d.is_finite() && r.loss_eg.is_finite() && r.penalty >= 0.0);
        assert!(r.x_l2.is_finite() && r.z_l2.is_finite());
    }
    assert_eq!(art.loss_d.len(), 600);
    let csv = art.metrics_csv();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 5);
    let last = art.final_coverage.as_ref().unwrap();
    assert_eq!(last.modes_captured, art.metrics.last().unwrap().modes_captured);
}

#[test]
fn every_objective_trains_without_aborting() {
    let dist = ToyDistribution::Grid {
        side: 3,
        spacing: 1.0,
        sigma: 0.05,
    };
    for loss in [
        LossKind::Vanilla,
        LossKind::Wasserstein,
        LossKind::Lol1,
        LossKind::Lol2,
        LossKind::DirectModelMse,
    ] {
        for penalty in [PenaltyKind::None, PenaltyKind::UniformGp, PenaltyKind::PairwiseGp] {
            let mut cfg = short(loss, penalty);
            cfg.steps = 40;
            cfg.eval_every = 20;
            cfg.arch.hidden_width = 16;
            let art = train(&cfg, &dist, &LatentSpec::new(2).unwrap())
                .unwrap_or_else(|e| panic!("{loss:?}/{penalty:?}: {e}"));
            assert_eq!(art.metrics.len(), 3);
            let expect_d = 40 * cfg.objective.critic_updates_per_gen;
            assert_eq!(art.d_updates, expect_d, "{loss:?}/{penalty:?}");
        }
    }
}
