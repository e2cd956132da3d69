mod common;

use std::time::Instant;

use rand::Rng;

use common::{linear_fit_cfg, LinearSystem};
use pnf_core::analysis::spearman;
use pnf_core::ensemble::{fit_ensemble, prediction_error, true_model_error, EnsembleCfg, UncertaintyMode};
use pnf_core::envdata::{generate_dataset, split_train_val, Behavior, EnvSpec, UniformPolicy};
use pnf_core::rng;

#[test]
fn linear_system_is_recovered() {
    let sys = LinearSystem::standard();
    let data = sys.sample(20_000, 1);
    let (train, val) = data.split_at(18_000);
    let t0 = Instant::now();
    let (model, fits) = fit_ensemble(train, val, &linear_fit_cfg()).unwrap();
    eprintln!("fit took {:.1}s, epochs {:?}", t0.elapsed().as_secs_f64(), fits.iter().map(|f| f.epochs_run).collect::<Vec<_>>());

    let held_out = sys.sample(1000, 2);
    let mut mae = [0.0; 4];
    let mut total_err = 0.0;
    for t in &held_out {
        let (sn, r) = model.mean_prediction(&t.s, &t.a).unwrap();
        let (true_sn, true_r) = sys.mean(&t.s, &t.a);
        for k in 0..3 {
            // Compare predicted and analytic state deltas.
            mae[k] += ((sn[k] - t.s[k]) - (true_sn[k] - t.s[k])).abs() / 1000.0;
        }
        mae[3] += (r - true_r).abs() / 1000.0;
        total_err += prediction_error(&model, &t.s, &t.a, &true_sn, true_r).unwrap() / 1000.0;
    }
    assert!(mae.iter().all(|m| *m <= 0.05), "{mae:?}");
    assert!(total_err <= 0.05);
}

#[test]
fn early_stopping_keeps_best_parameters() {
    let sys = LinearSystem::standard();
    let data = sys.sample(3000, 3);
    let (train, val) = data.split_at(2500);
    let cfg = EnsembleCfg { max_epochs: 15, hidden: vec![32, 32], n_members: 2, ..linear_fit_cfg() };
    let (model, fits) = fit_ensemble(train, val, &cfg).unwrap();
    for (i, f) in fits.iter().enumerate() {
        assert!(f.best_val_nll <= f.final_val_nll);
        let recomputed = model.member_nll(i, val).unwrap();
        assert!((recomputed - f.best_val_nll).abs() < 1e-9 * f.best_val_nll.abs().max(1.0));
    }
    assert_ne!(model.members()[0], model.members()[1]);
}

#[test]
fn error_probe_is_zero_at_own_prediction() {
    let sys = LinearSystem::standard();
    let data = sys.sample(1000, 5);
    let (model, _) = fit_ensemble(&data[..800], &data[800..], &EnsembleCfg { max_epochs: 2, ..linear_fit_cfg() }).unwrap();
    let (s, a) = (&data[0].s, &data[0].a);
    let (sn, r) = model.mean_prediction(s, a).unwrap();
    assert_eq!(prediction_error(&model, s, a, &sn, r).unwrap(), 0.0);
    assert!(prediction_error(&model, s, a, &data[0].s_next, data[0].r).unwrap() >= 0.0);
}

/// Disagreement should rank true one-step error on states visited by
/// model rollouts.
#[test]
fn disagreement_tracks_true_error_on_maze_rollouts() {
    let spec = EnvSpec::point_maze();
    let d = generate_dataset(&spec, Behavior::Medium, 10_000, 11).unwrap();
    let (train, val) = split_train_val(&d, 0.1, 11).unwrap();
    let cfg = EnsembleCfg { n_members: 5, hidden: vec![64, 64], max_epochs: 60, ..EnsembleCfg::default() };
    let (model, _) = fit_ensemble(train.transitions(), val.transitions(), &cfg).unwrap();
    let mut r = rng::stream(12);
    let (mut u, mut err) = (Vec::new(), Vec::new());
    while u.len() < 500 {
        let mut s = d.transitions()[r.random_range(0..d.len())].s.clone();
        for _ in 0..5 {
            let a = UniformPolicy.sample(2, &mut r);
            u.push(model.uncertainty(&s, &a, UncertaintyMode::DisagreementMaxDev).unwrap());
            err.push(true_model_error(&model, &spec, &s, &a).unwrap());
            s = model.sample_transition(&s, &a, &mut r).unwrap().0;
        }
    }
    let rho = spearman(&u[..500], &err[..500]).unwrap();
    eprintln!("spearman {rho}");
    assert!(rho >= 0.2, "{rho}");
}

