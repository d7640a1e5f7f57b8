use debtrank::dynamics::PropagationRule;
use debtrank::experiment::{PreparedEnsemble, ScenarioConfig};
use debtrank::io;
use debtrank::model::build_leverage;
use debtrank::reconstruction::{
    calibrate_density, reconstruct_sample, ReconstructionError, ReconstructionOptions, RepairPolicy,
};
use debtrank::stability::{SpectralOptions, StabilityReport};
use debtrank::synthetic::{generate_synthetic, SyntheticParams};
use debtrank::Execution;

fn small(n: usize) -> debtrank::BankingSystem {
    generate_synthetic(&SyntheticParams {
        n,
        seed: 31,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn balance_sheets_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let system = small(50);
    let path = dir.path().join("banks.csv");
    io::save_balance_sheets(&system, &path).unwrap();
    let back = io::load_balance_sheets(&path).unwrap();
    assert_eq!(back.banks(), system.banks());
}

#[test]
fn saved_network_reproduces_the_ensemble_run() {
    let dir = tempfile::tempdir().unwrap();
    let system = small(50);
    let cfg = ScenarioConfig {
        p: 0.3,
        n_networks: 1,
        n_shock_realizations: 4,
        p_shock: 0.1,
        x_shock: 0.02,
        rule: PropagationRule::Nonlinear { alpha: 0.8 },
        base_seed: 3,
        ..ScenarioConfig::default()
    };
    let reconstructed = PreparedEnsemble::prepare(&system, &cfg, Execution::default()).unwrap();
    let net = &reconstructed.networks[0];
    let path = dir.path().join("net.csv");
    io::write_file(&path, |f| io::write_network(&net.sample.weights, f)).unwrap();
    let loaded = io::load_network(&path, system.len()).unwrap();
    assert_eq!(&loaded, &net.sample.weights);

    let fixed = PreparedEnsemble::from_network(&system, loaded, &cfg).unwrap();
    assert_eq!(fixed.networks[0].shock_sets, net.shock_sets);
    assert_eq!(fixed.networks[0].leverage, net.leverage);
    let a = reconstructed
        .run(
            &system,
            cfg.x_shock,
            cfg.rule,
            cfg.run_options(),
            Execution::Sequential,
        )
        .unwrap();
    let b = fixed
        .run(
            &system,
            cfg.x_shock,
            cfg.rule,
            cfg.run_options(),
            Execution::Sequential,
        )
        .unwrap();
    assert_eq!(a.runs, b.runs);
    assert_eq!(a.series, b.series);
}

#[test]
fn reconstructed_networks_have_the_calibrated_spectrum_scale() {
    // Leverage row sums are A_IB / E, so lambda_max lies between their extremes.
    let system = small(80);
    let cfg = ScenarioConfig {
        p: 0.2,
        n_networks: 3,
        ..ScenarioConfig::default()
    };
    let prepared = PreparedEnsemble::prepare(&system, &cfg, Execution::default()).unwrap();
    for net in &prepared.networks {
        let sums = net.leverage.row_sums();
        let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sums.iter().copied().fold(0.0, f64::max);
        let report = StabilityReport::analyse(&net.leverage, SpectralOptions::default());
        assert!(report.converged);
        assert!(report.lambda_max >= lo - 1e-9 && report.lambda_max <= hi + 1e-9);
        assert!((report.alpha_critical - report.lambda_max.ln()).abs() < 1e-15);
    }
}

#[test]
fn redraw_policies() {
    // Very sparse: a plain draw almost always leaves some bank without a
    // counterparty.
    let system = small(30);
    let calib = calibrate_density(&system, 0.05).unwrap();
    let never = ReconstructionOptions {
        max_attempts: 5,
        repair: RepairPolicy::Never,
        ..Default::default()
    };
    match reconstruct_sample(&system, &calib, 8, never) {
        Err(ReconstructionError::StructurallyInfeasible { .. }) => {}
        Ok(s) => assert!(s.repaired_edges == 0 && s.attempts <= 5),
        Err(e) => panic!("unexpected {e}"),
    }
    let always = ReconstructionOptions {
        max_attempts: 5,
        repair: RepairPolicy::Always,
        ..Default::default()
    };
    let s = reconstruct_sample(&system, &calib, 8, always).unwrap();
    assert!(s.repaired_edges > 0);
    for i in 0..system.len() {
        assert!(s.adjacency.out_degree(i) > 0 && s.adjacency.in_degree(i) > 0);
    }

    // Dense enough that the first draw is accepted.
    let calib = calibrate_density(&system, 0.5).unwrap();
    let s = reconstruct_sample(&system, &calib, 8, ReconstructionOptions::default()).unwrap();
    assert_eq!((s.attempts, s.repaired_edges), (1, 0));
    assert!(s.converged);
    let lev = build_leverage(&system, &s.weights).unwrap();
    assert_eq!(lev.nnz(), s.adjacency.edge_count());
}

#[test]
fn leverage_row_sums_follow_the_synthetic_ratios() {
    let system = generate_synthetic(&SyntheticParams {
        interbank_share: 0.2,
        equity_ratio: 0.05,
        ..Default::default()
    })
    .unwrap();
    let cfg = ScenarioConfig {
        p: 1.0,
        n_networks: 1,
        ..ScenarioConfig::default()
    };
    let prepared = PreparedEnsemble::prepare(&system, &cfg, Execution::default()).unwrap();
    let mut sums = prepared.networks[0].leverage.row_sums();
    sums.sort_by(f64::total_cmp);
    let median = sums[sums.len() / 2];
    assert!((median - 4.0).abs() < 0.4, "median {median}");
    assert!(sums.iter().all(|s| (2.5..6.0).contains(s)));
}

#[test]
fn null_shock_with_a_bank_already_insolvent() {
    // The last bank has zero equity: it starts defaulted, carries no equity
    // weight and, being priced in, does not propagate.
    let csv = "bank_id,total_assets,total_liabilities,interbank_assets,interbank_liabilities\n\
               a,100,90,20,10\n\
               b,100,90,10,20\n\
               c,50,45,10,10\n\
               d,40,40,10,10\n";
    let system = io::read_balance_sheets(csv.as_bytes()).unwrap();
    assert_eq!(system.defaulted_at_start(), vec![3]);
    let cfg = ScenarioConfig {
        p: 0.8,
        n_networks: 5,
        n_shock_realizations: 3,
        p_shock: 0.5,
        x_shock: 0.0,
        rule: PropagationRule::Linear,
        ..ScenarioConfig::default()
    };
    let result = debtrank::experiment::run_ensemble(&system, &cfg).unwrap();
    assert_eq!(result.h_inf.mean, 0.0);
    assert_eq!(result.h_inf.stderr, 0.0);
    for point in &result.series {
        assert_eq!(point.defaulted.mean, 0.25);
        assert_eq!(point.stressed.mean, 0.0);
    }
}

#[test]
fn stderr_halves_when_runs_quadruple() {
    let system = small(120);
    let base = ScenarioConfig {
        p: 0.2,
        n_networks: 5,
        n_shock_realizations: 10,
        p_shock: 0.1,
        x_shock: 0.02,
        rule: PropagationRule::Nonlinear { alpha: 3.0 },
        base_seed: 77,
        ..ScenarioConfig::default()
    };
    let few = debtrank::experiment::run_ensemble(&system, &base).unwrap();
    let many = debtrank::experiment::run_ensemble(
        &system,
        &ScenarioConfig {
            n_networks: 20,
            ..base
        },
    )
    .unwrap();
    assert_eq!((few.n_runs, many.n_runs), (50, 200));
    let ratio = few.h_inf.stderr / many.h_inf.stderr;
    // The standard error of a sample deviation over n runs is about
    // 1/sqrt(2n) relative, which gives a 3-sigma band of roughly +-0.67.
    assert!((ratio - 2.0).abs() < 0.67, "ratio {ratio}");
}
