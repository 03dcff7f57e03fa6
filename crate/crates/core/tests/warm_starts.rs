// Slot-cached PDE evaluations must agree with cold solves.
use mlsvgd::ensemble::init_ensemble;
use mlsvgd::problems::{build_problem, CostMode, DiffusionReactionSpec, ProblemSpec};

#[test]
fn cached_and_cold_scores_agree() {
    let spec = ProblemSpec::DiffusionReaction(DiffusionReactionSpec {
        levels: 2,
        ..Default::default()
    });
    let problem = build_problem(&spec, CostMode::Analytic, None).unwrap();
    let warm = problem.fresh_levels().unwrap();
    let cold = problem.fresh_levels().unwrap();
    for (w, c) in warm.iter().zip(&cold) {
        w.begin_run();
        // a drifting ensemble: each slot sees a sequence of nearby points
        let mut ens = init_ensemble(6, &[0.8, 2.0], &[0.05, 0.05], 11).unwrap();
        for step in 0..5 {
            for i in 0..ens.count() {
                let theta = ens.particle(i).to_vec();
                let a = w.score_slot(i, &theta).unwrap();
                c.begin_run();
                let b = c.score(&theta).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "level {} step {step}: {a:?} vs {b:?}", w.level());
                }
                let la = w.log_density_slot(i, &theta).unwrap();
                let lb = c.log_density(&theta).unwrap();
                assert!((la - lb).abs() <= 1e-8 * lb.abs().max(1.0));
            }
            let moved: Vec<Vec<f64>> = ens
                .particles()
                .map(|p| vec![p[0] + 0.01 * (step as f64 + 1.0), p[1] - 0.02])
                .collect();
            ens = mlsvgd::ensemble::ParticleEnsemble::from_rows(&moved).unwrap();
        }
    }
}

#[test]
fn begin_run_makes_evaluations_history_free() {
    let spec = ProblemSpec::DiffusionReaction(DiffusionReactionSpec {
        levels: 1,
        ..Default::default()
    });
    let problem = build_problem(&spec, CostMode::Analytic, None).unwrap();
    let a = problem.fresh_levels().unwrap().remove(0);
    let b = problem.fresh_levels().unwrap().remove(0);
    // a has unrelated history in slot 0
    a.score_slot(0, &[2.5, 0.5]).unwrap();
    a.begin_run();
    b.begin_run();
    let x = a.score_slot(0, &[0.7, 1.9]).unwrap();
    let y = b.score_slot(0, &[0.7, 1.9]).unwrap();
    assert_eq!(x, y);
}
