use driftcast::baselines::curvefit::{self, regressors, trapezoid};
use driftcast::baselines::{
    compose, curve_forecasts, fit_curve, persistence, persistence_forecasts, series_windows, stack_windows,
    step_examples, CurveFit, CurveFitCoeffs, Protocol, RnnArch, RnnConfig, RnnModel, StepArch, TcnArch, TcnConfig,
    TcnModel,
};
use driftcast::dataset::{prepare_fold, Fold, ObjectSeries, PipelineConfig};
use driftcast::metrics::evaluate;
use driftcast::physics::{default_catalog, EnvSample, Vec2, NUM_FEATURES};
use driftcast::simulator::{simulate_campaign, ScenarioConfig};
use driftcast::tensor::{finite_diff_check, Graph, ParamStore, Tensor};
use driftcast::text::HashingEncoder;
use driftcast::train::TrainConfig;
use driftcast::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const TRUE: [f64; 3] = [0.9, 0.03, 0.001];

/// Smooth, non-collinear wind and current records.
fn env(n: usize, seed: u64) -> Vec<EnvSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ph: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    (0..n)
        .map(|i| {
            let t = i as f64;
            EnvSample {
                t,
                v_a: [6.0 + 2.0 * (t / 37.0 + ph[0]).sin(), 3.0 * (t / 53.0 + ph[1]).cos() + (t / 11.0 + ph[2]).sin()],
                v_w: [0.3 * (t / 29.0 + ph[3]).sin() + 0.1, 0.2 * (t / 71.0 + ph[4]).cos() - 0.05 * (t / 7.0 + ph[5]).sin()],
            }
        })
        .collect()
}

/// Drift generated from the integral model, integrating with a
/// straightforward loop independent of the library.
fn drift_for(samples: &[EnvSample], c: [f64; 3]) -> Vec<Vec2> {
    let mut iw = [0.0; 2];
    let mut ia = [0.0; 2];
    let mut out = vec![[0.0; 2]];
    for w in samples.windows(2) {
        let dt = w[1].t - w[0].t;
        for j in 0..2 {
            iw[j] += dt * (w[0].v_w[j] + w[1].v_w[j]) / 2.0;
            ia[j] += dt * (w[0].v_a[j] + w[1].v_a[j]) / 2.0;
        }
        let t = w[1].t - samples[0].t;
        out.push([c[0] * iw[0] + c[1] * ia[0] + c[2] * t, c[0] * iw[1] + c[1] * ia[1] + c[2] * t]);
    }
    out
}

fn max_coeff_error(fit: &CurveFit, c: [f64; 3]) -> f64 {
    fit.coeffs.x.iter().chain(&fit.coeffs.y).zip(c.iter().chain(&c)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn curvefit_recovers_known_coefficients() {
    let s = env(1500, 1);
    let d = drift_for(&s, TRUE);
    let fit = CurveFit::fit([(s.as_slice(), d.as_slice())]).unwrap();
    assert!(max_coeff_error(&fit, TRUE) < 1e-6, "{:?}", fit.coeffs);
    assert_eq!(fit.rows, 1500);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn curvefit_recovery_any_record(seed in any::<u64>(), n in 50usize..600) {
        let s = env(n, seed);
        let d = drift_for(&s, TRUE);
        let fit = CurveFit::fit([(s.as_slice(), d.as_slice())]).unwrap();
        prop_assert!(max_coeff_error(&fit, TRUE) < 1e-6);
    }

    #[test]
    fn prediction_is_linear_in_coefficients(seed in any::<u64>(), a in -5.0..5.0f64) {
        let s = env(80, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.01..0.01)];
        let coeffs = CurveFitCoeffs { x: c(), y: c() };
        let scaled = CurveFitCoeffs { x: coeffs.x.map(|v| a * v), y: coeffs.y.map(|v| a * v) };
        let p = curvefit::predict(&coeffs, &s, [0.0, 0.0]);
        let q = curvefit::predict(&scaled, &s, [0.0, 0.0]);
        for (u, v) in p.iter().zip(&q) {
            prop_assert!((a * u[0] - v[0]).abs() < 1e-9 * (1.0 + v[0].abs()));
            prop_assert!((a * u[1] - v[1]).abs() < 1e-9 * (1.0 + v[1].abs()));
        }
    }

    #[test]
    fn rmse_at_least_mae(seed in any::<u64>(), n in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let m = evaluate(&p, &y).unwrap();
        prop_assert!(m.rmse >= m.mae - 1e-12);
        prop_assert!(m.mae >= 0.0 && m.mape >= 0.0);
    }
}

#[test]
fn trapezoid_of_constant() {
    let t: Vec<f64> = (0..100).map(|i| 0.37 * i as f64).collect();
    let v = vec![-2.5; 100];
    // exact up to the rounding of the accumulated sum
    for (i, x) in trapezoid(&t, &v).iter().enumerate() {
        assert!((x + 2.5 * t[i]).abs() <= 1e-13 * (1.0 + t[i]));
    }
}

#[test]
fn zero_drift_gives_zero_coefficients() {
    let s = env(300, 4);
    let d = vec![[0.0, 0.0]; 300];
    let fit = CurveFit::fit([(s.as_slice(), d.as_slice())]).unwrap();
    assert!(fit.coeffs.x.iter().chain(&fit.coeffs.y).all(|c| c.abs() < 1e-15));
}

#[test]
fn constant_fields_are_rank_deficient() {
    let s: Vec<EnvSample> = (0..200).map(|i| EnvSample { t: i as f64, v_a: [5.0, 1.0], v_w: [0.2, 0.1] }).collect();
    let d = drift_for(&s, TRUE);
    match CurveFit::fit([(s.as_slice(), d.as_slice())]) {
        Err(Error::RankDeficient { condition_number, .. }) => assert!(condition_number > 1e10),
        other => panic!("expected rank deficiency, got {other:?}"),
    }
}

#[test]
fn too_few_rows_rejected() {
    let s = env(2, 0);
    let d = drift_for(&s, TRUE);
    assert!(CurveFit::fit([(s.as_slice(), d.as_slice())]).is_err());
}

#[test]
fn noisy_recovery_improves_with_more_data() {
    let noise = Normal::new(0.0, 2.0).unwrap();
    let mut errors = Vec::new();
    for n in [100, 1000, 10000] {
        let mut total = 0.0;
        for rep in 0..20u64 {
            let s = env(n, rep);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let d: Vec<Vec2> =
                drift_for(&s, TRUE).iter().map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]).collect();
            let fit = CurveFit::fit([(s.as_slice(), d.as_slice())]).unwrap();
            total += (fit.coeffs.x[0] - TRUE[0]).abs() + (fit.coeffs.y[0] - TRUE[0]).abs();
        }
        errors.push(total / 40.0);
    }
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
}

#[test]
fn prediction_starts_at_origin_and_is_linear_in_t_without_fields() {
    let s: Vec<EnvSample> = (0..50).map(|i| EnvSample { t: 10.0 + i as f64, v_a: [0.0; 2], v_w: [0.0; 2] }).collect();
    let c = CurveFitCoeffs { x: [0.9, 0.03, 0.5], y: [0.9, 0.03, -0.25] };
    let p = curvefit::predict(&c, &s, [3.0, 4.0]);
    assert_eq!(p[0], [3.0, 4.0]);
    for (i, q) in p.iter().enumerate() {
        assert!((q[0] - 3.0 - 0.5 * i as f64).abs() < 1e-12);
        assert!((q[1] - 4.0 + 0.25 * i as f64).abs() < 1e-12);
    }
    let r = regressors(&s);
    assert_eq!(r[0][0], [0.0, 0.0, 0.0]);
}

#[test]
fn refit_reproduces_training_fit() {
    let s = env(400, 9);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d: Vec<Vec2> =
        drift_for(&s, TRUE).iter().map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]).collect();
    let a = CurveFit::fit([(s.as_slice(), d.as_slice())]).unwrap();
    let b = CurveFit::fit([(s.as_slice(), d.as_slice())]).unwrap();
    assert_eq!(a, b);
    let p = a.predict(&s, d[0]);
    let resid: f64 = p.iter().zip(&d).map(|(p, d)| (p[0] - d[0]) + (p[1] - d[1])).sum();
    // least squares residuals are orthogonal to the design; with the
    // regressors starting at zero their sum is small but not exactly zero
    assert!(resid.abs() / (p.len() as f64) < 1.0);
}

#[test]
fn persistence_is_exact_on_linear_drift() {
    let drift: Vec<Vec2> = (0..40).map(|i| [1.5 * i as f64 - 3.0, -0.5 * i as f64]).collect();
    for start in 0..20 {
        let p = persistence(&drift, start, 10, 10).unwrap();
        let truth: Vec<f64> = drift[start + 10..start + 20].iter().flatten().copied().collect();
        for (a, b) in p.data().iter().zip(&truth) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn compose_with_true_displacements_is_exact() {
    let drift: Vec<Vec2> = (0..30).map(|i| [(i as f64 * 0.3).sin() * 10.0, i as f64 * 0.7]).collect();
    let le = 4;
    let disp: Vec<Vec2> = (le..drift.len()).map(|r| [drift[r][0] - drift[r - 1][0], drift[r][1] - drift[r - 1][1]]).collect();
    let starts: Vec<usize> = (0..=drift.len() - le - 5).collect();
    for protocol in [Protocol::Rolled, Protocol::OneStep] {
        let f = compose(&disp, &drift, &starts, le, 5, protocol).unwrap();
        for (&i, p) in starts.iter().zip(&f) {
            for k in 0..5 {
                assert!((p.at2(k, 0) - drift[i + le + k][0]).abs() < 1e-9);
                assert!((p.at2(k, 1) - drift[i + le + k][1]).abs() < 1e-9);
            }
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn rnn_predicts_one_displacement() {
    let mut store = ParamStore::new();
    let arch = RnnArch::build(&RnnConfig::default(), NUM_FEATURES, &mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.constant(random(&[3, 10, NUM_FEATURES], &mut rng));
    let (y, stats) = arch.forward(&mut g, &store, x, true).unwrap();
    assert_eq!(g.shape(y), &[3, 2]);
    assert!(stats.is_empty());
    assert!(RnnArch::build(&RnnConfig { units: vec![], seed: 0 }, 3, &mut ParamStore::new()).is_err());
}

fn mini_tcn(seed: u64) -> (TcnArch, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = TcnConfig { filters: 3, kernel: 2, dilations: vec![2, 1], momentum: 0.9, seed };
    (TcnArch::build(&cfg, 2, &mut store).unwrap(), store)
}

#[test]
fn tcn_eval_outputs_are_causal() {
    let mut store = ParamStore::new();
    let arch = TcnArch::build(&TcnConfig::default(), NUM_FEATURES, &mut store).unwrap();
    perturb(&mut store, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = 40;
    for _ in 0..100 {
        let x = random(&[1, t, NUM_FEATURES], &mut rng);
        let cut = rng.random_range(0..t);
        let mut y = x.clone();
        for v in &mut y.data_mut()[cut * NUM_FEATURES..] {
            *v += rng.random_range(-3.0..3.0);
        }
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let x = g.constant(x);
            let (s, _) = arch.sequence(&mut g, &store, x, false).unwrap();
            g.value(s).clone()
        };
        let (a, b) = (run(x), run(y));
        let per = a.numel() / t;
        assert_eq!(a.data()[..cut * per], b.data()[..cut * per]);
        assert_ne!(a.data()[cut * per..], b.data()[cut * per..]);
    }
}

#[test]
fn tcn_training_mode_reports_batch_stats() {
    let (arch, store) = mini_tcn(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.constant(random(&[4, 6, 2], &mut rng));
    let (y, stats) = arch.forward(&mut g, &store, x, true).unwrap();
    assert_eq!(g.shape(y), &[4, 2]);
    assert_eq!(stats.len(), 2);
    assert!(stats.iter().all(|s| s.mean.len() == 3 && s.var.iter().all(|v| *v >= 0.0)));
}

#[test]
fn tcn_eval_with_batch_moments_matches_training_mode() {
    let (arch, mut store) = mini_tcn(3);
    perturb(&mut store, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[5, 7, 2], &mut rng);
    // one layer so the first block's statistics fully determine the output
    let cfg = TcnConfig { dilations: vec![2], ..arch.config().clone() };
    let mut s1 = ParamStore::new();
    let one = TcnArch::build(&cfg, 2, &mut s1).unwrap();
    perturb(&mut s1, 3);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (train_out, stats) = one.sequence(&mut g, &s1, xv, true).unwrap();
    let train_out = g.value(train_out).clone();
    s1.get_mut(one.blocks[0].running_mean).data_mut().copy_from_slice(&stats[0].mean);
    s1.get_mut(one.blocks[0].running_var).data_mut().copy_from_slice(&stats[0].var);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (eval_out, _) = one.sequence(&mut g, &s1, xv, false).unwrap();
    for (a, b) in train_out.data().iter().zip(g.value(eval_out).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn tcn_gradients_match_finite_differences(seed in any::<u64>()) {
        let (arch, mut store) = mini_tcn(seed);
        perturb(&mut store, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let x = random(&[3, 5, 2], &mut rng);
        let target = random(&[3, 2], &mut rng);
        let loss = |g: &mut Graph, s: &ParamStore| {
            let x = g.constant(x.clone());
            let (y, _) = arch.forward(g, s, x, true)?;
            let t = g.constant(target.clone());
            g.mse(y, t)
        };
        let mut g = Graph::new();
        loss(&mut g, &store).unwrap();
        prop_assume!(g.kink_margin() > 1e-3);
        let r = finite_diff_check(loss, &mut store, 1e-5, 1e-4).unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn rnn_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let arch = RnnArch::build(&RnnConfig { units: vec![4, 3], seed }, 2, &mut store).unwrap();
        perturb(&mut store, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let x = random(&[2, 4, 2], &mut rng);
        let target = random(&[2, 2], &mut rng);
        let r = finite_diff_check(
            |g, s| {
                let x = g.constant(x.clone());
                let (y, _) = arch.forward(g, s, x, false)?;
                let t = g.constant(target.clone());
                g.mse(y, t)
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }
}

fn small_fold() -> Fold {
    let cat = default_catalog();
    let cfg = ScenarioConfig { duration: 200.0, seed: 7, ..Default::default() };
    let series: Vec<ObjectSeries> = simulate_campaign(&cfg, &cat)
        .unwrap()
        .iter()
        .zip(&cat)
        .map(|(t, o)| ObjectSeries::from_trajectory(t, o).unwrap())
        .collect();
    let p = PipelineConfig { fuse_text: false, augment_factor: 0.0, ..Default::default() };
    prepare_fold(&series, &HashingEncoder, &p, &cat[0].id).unwrap()
}

#[test]
fn step_pairs_match_series_windows() {
    let fold = small_fold();
    let (xs, ys) = step_examples(&fold).unwrap();
    assert_eq!((xs.len(), ys.len()), (fold.train.len(), fold.train.len()));
    let s = fold.test_series();
    let windows = series_windows(&fold, s).unwrap();
    assert_eq!(windows.len(), s.len() - fold.config.enc_len + 1);
    // test windows were standardized the same way
    let (txs, tys) = driftcast::baselines::step_pairs(&fold, &fold.test).unwrap();
    for (e, (x, y)) in fold.test.iter().zip(txs.iter().zip(&tys)) {
        for (a, b) in x.data().iter().zip(windows[e.start].data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let a = e.start + fold.config.enc_len;
        let truth = [s.drift[a][0] - s.drift[a - 1][0], s.drift[a][1] - s.drift[a - 1][1]];
        assert!((y[0] - truth[0]).abs() < 1e-9 && (y[1] - truth[1]).abs() < 1e-9);
    }
    let unanchored = Fold { config: PipelineConfig { anchor_targets: false, ..fold.config.clone() }, ..fold };
    assert!(step_examples(&unanchored).is_err());
}

#[test]
fn fold_baselines_forecast_every_test_window() {
    let fold = small_fold();
    let fit = fit_curve(&fold).unwrap();
    let per = persistence_forecasts(&fold).unwrap();
    let rolled = curve_forecasts(&fit, &fold, Protocol::Rolled).unwrap();
    let one = curve_forecasts(&fit, &fold, Protocol::OneStep).unwrap();
    assert_eq!(per.len(), fold.test.len());
    assert_eq!(rolled.len(), fold.test.len());
    // rolled curve forecasts equal the fit re-anchored at the last observed row
    let s = fold.test_series();
    let le = fold.config.enc_len;
    for (e, p) in fold.test.iter().zip(&rolled) {
        let a = e.start + le - 1;
        let direct = fit.predict(&s.samples[a..=a + fold.config.dec_len], s.drift[a]);
        for k in 0..fold.config.dec_len {
            assert!((p.at2(k, 0) - direct[k + 1][0]).abs() < 1e-8);
            assert!((p.at2(k, 1) - direct[k + 1][1]).abs() < 1e-8);
        }
    }
    assert_eq!(one[0].shape(), &[fold.config.dec_len, 2]);
}

#[test]
fn step_models_train_predict_and_snapshot() {
    let fold = small_fold();
    let (xs, ys) = step_examples(&fold).unwrap();
    let cfg = TrainConfig { max_epochs: 3, batch_size: 64, learning_rate: 1e-3, ..Default::default() };

    let mut rnn = RnnModel::new(&RnnConfig { units: vec![8, 4], seed: 1 }, NUM_FEATURES).unwrap();
    assert!(matches!(rnn.predict(&xs[..1]), Err(Error::Untrained("rnn"))));
    rnn.fit(&xs, &ys, &cfg).unwrap();
    let f = rnn.forecast_fold(&fold, Protocol::Rolled).unwrap();
    assert_eq!(f.len(), fold.test.len());
    let back = RnnModel::from_snapshot(&rnn.snapshot().unwrap()).unwrap();
    assert_eq!(back.predict(&xs[..5]).unwrap(), rnn.predict(&xs[..5]).unwrap());

    let tcn_cfg = TcnConfig { filters: 4, kernel: 3, dilations: vec![4, 2], ..Default::default() };
    let mut tcn = TcnModel::new(&tcn_cfg, NUM_FEATURES).unwrap();
    let before = tcn.store.get(tcn.arch.blocks[0].running_var).clone();
    tcn.fit(&xs, &ys, &cfg).unwrap();
    assert_ne!(&before, tcn.store.get(tcn.arch.blocks[0].running_var));
    let snap = tcn.snapshot().unwrap();
    assert!(RnnModel::from_snapshot(&snap).is_err());
    let back = TcnModel::from_snapshot(&snap).unwrap();
    assert_eq!(back.predict(&xs[..5]).unwrap(), tcn.predict(&xs[..5]).unwrap());
    let stacked = stack_windows(&[&xs[0], &xs[1]]).unwrap();
    assert_eq!(stacked.shape(), &[2, fold.config.enc_len, NUM_FEATURES]);
}
