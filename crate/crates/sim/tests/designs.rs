use rayon::prelude::*;
use tailfactor_sim::dgp::{factor_strengths, replication_seed, volatility_components};
use tailfactor_sim::{generate, reference_constant, run_experiment, DgpSpec, ExperimentConfig, LevelSpec, ModelKind, TailSettings};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median factor strengths over `draws` surfaces of a design.
fn strength_medians(spec: &DgpSpec, draws: usize) -> (f64, f64) {
    let (c, _) = reference_constant(spec, draws).unwrap();
    let strengths: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|rep| {
            let s = spec.with_seed(replication_seed(spec.seed, rep as u64));
            let (l, f) = volatility_components(&s).unwrap();
            factor_strengths(&l, &f, c)
        })
        .collect();
    (median(strengths.iter().map(|s| s[0]).collect()), median(strengths.iter().map(|s| s[1]).collect()))
}

#[test]
fn dgp3_strength_medians_match_reference_values() {
    let (s1, s2) = strength_medians(&DgpSpec::new(3, 200, 200, 3.0, 99), 1000);
    eprintln!("DGP3 (200,200): median sigma1 {s1:.4} sigma2 {s2:.4}");
    assert!((s1 - 0.824).abs() < 0.01, "{s1}");
    assert!((s2 - 0.041).abs() < 0.005, "{s2}");
}

#[test]
fn dgp2_strength_medians_match_reference_values() {
    let (s1, s2) = strength_medians(&DgpSpec::new(2, 100, 100, 1.0, 98), 1000);
    eprintln!("DGP2 (100,100): median sigma1 {s1:.4} sigma2 {s2:.4}");
    assert!((s1 - 1.111).abs() < 0.015, "{s1}");
    assert!((s2 - 0.003).abs() < 0.0015, "{s2}");
}

#[test]
fn generation_is_deterministic_for_every_design() {
    for dgp in 1..=5u8 {
        let spec = DgpSpec::new(dgp, 7, 9, 3.0, 5);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.panel.values(), b.panel.values(), "design {dgp}");
        assert_eq!(a.true_loadings, b.true_loadings);
        assert_eq!(a.true_factors, b.true_factors);
        assert_eq!(a.true_threshold, b.true_threshold);
        assert_eq!(a.covariates, b.covariates);
        let c = generate(&spec.with_seed(6)).unwrap();
        assert_ne!(a.panel.values(), c.panel.values(), "design {dgp}");
    }
}

fn small_experiment(dgp: u8, reps: usize, models: Vec<ModelKind>) -> ExperimentConfig {
    ExperimentConfig {
        dgp_spec: DgpSpec::new(dgp, 12, 12, 3.0, 17),
        tail: TailSettings::new(0.1),
        model_grid: models,
        reps,
        quantile_levels: vec![LevelSpec::Intermediate, LevelSpec::Extreme { p: 1e-3 }],
        selection: true,
        fit: tailfactor_core::FitOptions { n_restarts: 1, ..Default::default() },
        c_reps: 5,
    }
}

#[test]
fn longer_runs_extend_shorter_runs() {
    let models = vec![ModelKind::Degenerate, ModelKind::Ftvm { r: 1 }];
    let short = run_experiment(&small_experiment(1, 3, models.clone())).unwrap();
    let long = run_experiment(&small_experiment(1, 6, models)).unwrap();
    assert_eq!(short.c_ref, long.c_ref);
    for (a, b) in short.models.iter().zip(&long.models) {
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.values[..], lb.values[..3]);
        }
    }
    let (sa, sb) = (short.selection.unwrap(), long.selection.unwrap());
    assert_eq!(sa.r_hats[..], sb.r_hats[..3]);
    assert_eq!(sa.rejections[..], sb.rejections[..3]);
}

#[test]
fn experiments_repeat_exactly() {
    let cfg = small_experiment(4, 3, vec![ModelKind::Qfm { r: 1 }, ModelKind::Eotm1]);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.models, b.models);
    assert_eq!(a.selection, b.selection);
}
