//! Acceptance criteria, run one after another in a single test so that the
//! runtime budgets are measured without competing threads. Every criterion
//! prints one PASS/FAIL line. The test fails when the set of failing
//! criteria differs from `KNOWN_RED`.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use driftcast::baselines::{CurveFit, StepArch, TcnArch, TcnConfig};
use driftcast::cnn::shapes::{synth_corpus, CORPUS_SIZE};
use driftcast::cnn::{CnnArch, CnnConfig, CnnModel, GeometryImage};
use driftcast::dataset::{make_windows, teacher_forcing_input, SequenceExample};
use driftcast::experiment::{run_experiment, ExperimentConfig, ModelKind, RunSummary, METRICS_FILE};
use driftcast::metrics::MetricsRow;
use driftcast::models::layers::{DotAttention, LstmLayer};
use driftcast::models::{unstack, InputLayout, LstmConfig, LstmModel, SeqArch, SeqBatch, TransformerConfig, TransformerModel};
use driftcast::physics::{drag_force, lift_force, wind_power_law, EnvSample, Vec2, RHO_AIR, RHO_WATER};
use driftcast::tensor::{finite_diff_check, Graph, ParamStore, Tensor};
use driftcast::train::TrainConfig;
use driftcast::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot be met as stated. The wind target 2.3486 m/s is
/// 1.4e-4 away from the power law's own value, 2 (10 / 2.0066)^0.1 =
/// 2.348464 m/s, which is outside the 1e-4 tolerance.
const KNOWN_RED: &[usize] = &[2];

fn say(line: &str) {
    // straight to the process stdout so the lines survive output capture
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn criterion(id: usize, name: &str, budget: Option<Duration>, run: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = run();
    report(id, name, budget, start.elapsed(), v)
}

fn report(id: usize, name: &str, budget: Option<Duration>, took: Duration, v: Verdict) -> bool {
    let in_time = budget.is_none_or(|b| took <= b);
    let pass = v.pass && in_time;
    let time = match budget {
        Some(b) if in_time => format!("{:.1}s of {:.0}s", took.as_secs_f64(), b.as_secs_f64()),
        Some(b) => format!("{:.1}s of {:.0}s, over budget", took.as_secs_f64(), b.as_secs_f64()),
        None => format!("{:.1}s", took.as_secs_f64()),
    };
    say(&format!("[{}] criterion {id:>2}: {name} ({}; {time})", if pass { "PASS" } else { "FAIL" }, v.detail));
    pass
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

fn forces() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut anti, mut perp, mut quad) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let v = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let (c, a) = (rng.random_range(0.01..3.0), rng.random_range(0.01..10.0));
        let rho = if rng.random_bool(0.5) { RHO_AIR } else { RHO_WATER };
        let d = drag_force(v, rho, c, a).unwrap();
        let l = lift_force(v, rho, c, a).unwrap();
        // unit vectors, so the dot products are scale free
        anti = anti.max((dot(d, v) / (norm(d) * norm(v)) + 1.0).abs());
        perp = perp.max((dot(l, v) / (norm(l) * norm(v))).abs());
        let v2 = [2.0 * v[0], 2.0 * v[1]];
        for (f, f2) in [(d, drag_force(v2, rho, c, a).unwrap()), (l, lift_force(v2, rho, c, a).unwrap())] {
            for k in 0..2 {
                quad = quad.max((f2[k] - 4.0 * f[k]).abs() / (4.0 * f[k]).abs().max(1e-300));
            }
        }
    }
    // 0.5 * 1.225 * 1.2 * 2 * |v| v and 0.5 * 1.225 * 0.5 * 2 * |v| (-v_y, v_x)
    let d = drag_force([3.0, 4.0], RHO_AIR, 1.2, 2.0).unwrap();
    let l = lift_force([3.0, 4.0], RHO_AIR, 0.5, 2.0).unwrap();
    let hand = (d[0] + 22.05).abs().max((d[1] + 29.40).abs()).max((l[0] + 12.25).abs()).max((l[1] - 9.1875).abs());
    verdict(
        anti <= 1e-12 && perp <= 1e-12 && quad <= 1e-9 && hand <= 1e-12,
        format!("antiparallel {anti:.1e}, perpendicular {perp:.1e}, quadratic {quad:.1e}, hand vectors {hand:.1e}"),
    )
}

fn power_law() -> Verdict {
    let v = wind_power_law(2.0, 2.0066, 10.0, 0.10).unwrap();
    let identity = (0..100).all(|i| {
        let (v0, z) = (0.1 + i as f64 * 0.3, 0.5 + i as f64 * 0.7);
        wind_power_law(v0, z, z, 0.1 + i as f64 * 0.003).unwrap() == v0
    });
    verdict(
        (v - 2.3486).abs() <= 1e-4 && identity,
        format!("v(10 m) = {v:.6} m/s, target 2.3486 +/- 0.0001, off by {:.2e}; identity exact: {identity}", (v - 2.3486).abs()),
    )
}

fn windowing() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = Vec::new();
    for case in 0..50 {
        let (le, ld) = (rng.random_range(1..16), rng.random_range(1..16));
        let t = le + ld + rng.random_range(0..60);
        let p = rng.random_range(1..6);
        let x = random(&[t, p], &mut rng);
        let y = random(&[t, 2], &mut rng);
        let windows = make_windows(&x, &y, le, ld).unwrap();
        // brute force: every offset whose encoder and decoder spans fit
        let offsets: Vec<usize> = (0..t).filter(|&i| i + le + ld <= t).collect();
        let contents_match = windows.len() == offsets.len()
            && windows.iter().zip(&offsets).all(|(w, &i)| {
                w.start == i
                    && w.x_e.data() == &x.data()[i * p..(i + le) * p]
                    && w.y_out.data() == &y.data()[(i + le) * 2..(i + le + ld) * 2]
            });
        let shifted = windows.iter().all(|w| {
            w.y_d.row(0) == [0.0, 0.0] && (1..ld).all(|k| w.y_d.row(k) == w.y_out.row(k - 1))
        });
        if !(contents_match && shifted && windows.len() == t - (le + ld) + 1) {
            bad.push(format!("case {case}: T={t} le={le} ld={ld}"));
        }
    }
    verdict(bad.is_empty(), if bad.is_empty() { "50 of 50 triples".into() } else { bad.join("; ") })
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

fn examples(n: usize, le: usize, ld: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<SequenceExample> {
    (0..n)
        .map(|i| {
            let y_out = random(&[ld, 2], rng);
            SequenceExample { x_e: random(&[le, p], rng), y_d: teacher_forcing_input(&y_out), y_out, start: i, anchor: [0.0; 2] }
        })
        .collect()
}

fn batch(ex: &[SequenceExample], layout: InputLayout) -> SeqBatch {
    SeqBatch::gather(&ex.iter().collect::<Vec<_>>(), layout).unwrap()
}

/// Worst relative error over `checks` smooth points, skipping points that
/// sit within 1e-3 of a ReLU or max-pool kink.
fn grad_component<F>(checks: usize, mut setup: F) -> (f64, usize)
where
    F: FnMut(u64) -> (ParamStore, Box<dyn Fn(&mut Graph, &ParamStore) -> Result<driftcast::Var>>),
{
    let (mut worst, mut done) = (0.0f64, 0);
    for seed in 0..200u64 {
        if done == checks {
            break;
        }
        let (mut store, loss) = setup(seed);
        let mut g = Graph::new();
        loss(&mut g, &store).unwrap();
        if g.kink_margin() <= 1e-3 {
            continue;
        }
        let r = finite_diff_check(&loss, &mut store, 1e-5, 1e-4).unwrap();
        worst = worst.max(r.max_rel_error);
        done += 1;
    }
    (worst, done)
}

fn gradients() -> Verdict {
    const CHECKS: usize = 4;
    let cell = grad_component(CHECKS, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = LstmLayer::new(&mut store, "l", 3, 0, 4, 1.0, &mut rng);
        let h0 = store.add("h0", random(&[2, 4], &mut rng));
        let c0 = store.add("c0", random(&[2, 4], &mut rng));
        let x = random(&[2, 3], &mut rng);
        perturb(&mut store, seed);
        let loss = move |g: &mut Graph, s: &ParamStore| {
            let x = g.constant(x.clone());
            let (h, c) = (g.param(s, h0), g.param(s, c0));
            let (h, c) = layer.cell(g, s, x, h, c)?;
            let (h, c) = layer.cell(g, s, x, h, c)?;
            let both = g.concat_last(&[h, c])?;
            Ok(g.sum(both))
        };
        (store, Box::new(loss) as Box<_>)
    });
    let attention = grad_component(CHECKS, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = DotAttention::new(&mut store, "a", 4, 5, 3, &mut rng);
        let q = store.add("q", random(&[2, 3, 4], &mut rng));
        let m = store.add("m", random(&[2, 6, 5], &mut rng));
        let w = random(&[2, 3, 3], &mut rng);
        let loss = move |g: &mut Graph, s: &ParamStore| {
            let (q, m) = (g.param(s, q), g.param(s, m));
            let (k, v) = att.memory(g, s, m)?;
            let (c, _) = att.attend(g, s, q, k, v)?;
            let w = g.constant(w.clone());
            let p = g.mul(c, w)?;
            Ok(g.sum(p))
        };
        (store, Box::new(loss) as Box<_>)
    });
    let seq_loss = |arch_forward: Box<dyn Fn(&mut Graph, &ParamStore, &SeqBatch) -> Result<driftcast::Var>>, b: SeqBatch| {
        move |g: &mut Graph, s: &ParamStore| {
            let out = arch_forward(g, s, &b)?;
            let y = g.constant(b.y_out.clone());
            g.mse(out, y)
        }
    };
    let lstm = grad_component(CHECKS, |seed| {
        let layout = InputLayout::new(3, 0);
        let cfg = LstmConfig { units: 3, d_k: 2, attention: true, seed, ..Default::default() };
        let mut m = LstmModel::new(&cfg, layout).unwrap();
        perturb(&mut m.store, seed);
        let b = batch(&examples(2, 4, 3, 3, &mut ChaCha8Rng::seed_from_u64(seed)), layout);
        let arch = m.arch.clone();
        let loss = seq_loss(Box::new(move |g, s, b| arch.teacher_forced(g, s, b)), b);
        (m.store, Box::new(loss) as Box<_>)
    });
    let transformer = grad_component(CHECKS, |seed| {
        let layout = InputLayout::new(3, 0);
        let cfg = TransformerConfig { d_model: 8, heads: 2, d_k: 4, ffn: 16, seed, ..Default::default() };
        let mut m = TransformerModel::new(&cfg, layout).unwrap();
        perturb(&mut m.store, seed);
        let b = batch(&examples(2, 4, 3, 3, &mut ChaCha8Rng::seed_from_u64(seed)), layout);
        let arch = m.arch.clone();
        let loss = seq_loss(Box::new(move |g, s, b| arch.teacher_forced(g, s, b)), b);
        (m.store, Box::new(loss) as Box<_>)
    });
    let cnn = grad_component(CHECKS, |seed| {
        let mut store = ParamStore::new();
        let arch = CnnArch::build(&CnnConfig::mini(seed), &mut store).unwrap();
        perturb(&mut store, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
        let imgs: Vec<GeometryImage> = (0..2)
            .map(|_| {
                let px = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
                GeometryImage::new(16, 16, px, Some([rng.random_range(0.0..1.5), rng.random_range(0.0..1.0)])).unwrap()
            })
            .collect();
        let x = arch.batch(&[&imgs[0], &imgs[1]]).unwrap();
        let y = Tensor::new(vec![2, 2], imgs.iter().flat_map(|i| i.label.unwrap()).collect()).unwrap();
        let loss = move |g: &mut Graph, s: &ParamStore| {
            let xv = g.constant(x.clone());
            let p = arch.forward(g, s, xv)?;
            let t = g.constant(y.clone());
            g.mse(p, t)
        };
        (store, Box::new(loss) as Box<_>)
    });
    let parts = [("lstm cell", cell), ("attention", attention), ("seq2seq-lstm", lstm), ("transformer", transformer), ("cnn 16x16", cnn)];
    let pass = parts.iter().all(|(_, (e, n))| *n == CHECKS && *e <= 1e-4);
    let detail = parts.iter().map(|(name, (e, n))| format!("{name} {e:.1e} x{n}")).collect::<Vec<_>>().join(", ");
    verdict(pass, format!("max rel error: {detail}"))
}

fn causality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = InputLayout::new(4, 0);
    let tf = TransformerModel::new(&TransformerConfig { seed: 5, ..Default::default() }, layout).unwrap();
    let ld = 8;
    let decode = |ex: &[SequenceExample]| {
        let mut g = Graph::new();
        let out = tf.arch.teacher_forced(&mut g, &tf.store, &batch(ex, layout)).unwrap();
        unstack(g.value(out))
    };
    let mut leaks = 0;
    for _ in 0..100 {
        let mut ex = examples(2, 6, ld, 4, &mut rng);
        let before = decode(&ex);
        let cut = rng.random_range(1..ld);
        for e in &mut ex {
            for v in &mut e.y_d.data_mut()[cut * 2..] {
                *v += rng.random_range(-5.0..5.0);
            }
        }
        let after = decode(&ex);
        for (a, b) in before.iter().zip(&after) {
            let bits = |t: &Tensor, r: std::ops::Range<usize>| t.data()[r].iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            // earlier rows untouched to the bit, the perturbed row itself moved
            if bits(a, 0..cut * 2) != bits(b, 0..cut * 2) || bits(a, cut * 2..cut * 2 + 2) == bits(b, cut * 2..cut * 2 + 2) {
                leaks += 1;
            }
        }
    }

    // receptive field 1 + (k - 1) * sum(d) = 15
    let cfg = TcnConfig { filters: 6, kernel: 3, dilations: vec![4, 2, 1], momentum: 0.9, seed: 7 };
    let rf = 1 + (cfg.kernel - 1) * cfg.dilations.iter().sum::<usize>();
    let mut store = ParamStore::new();
    let tcn = TcnArch::build(&cfg, 3, &mut store).unwrap();
    perturb(&mut store, 7);
    let (t, f) = (48, 3);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let x = g.constant(x.clone());
        let (s, _) = tcn.sequence(&mut g, &store, x, false).unwrap();
        g.value(s).clone()
    };
    let mut tcn_bad = 0;
    for _ in 0..100 {
        let x = random(&[1, t, f], &mut rng);
        let j = rng.random_range(0..t);
        let mut y = x.clone();
        for v in &mut y.data_mut()[j * f..(j + 1) * f] {
            *v += rng.random_range(1.0..4.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        let (a, b) = (run(&x), run(&y));
        let per = a.numel() / t;
        let row = |m: &Tensor, i: usize| m.data()[i * per..(i + 1) * per].iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let inside = j..(j + rf).min(t);
        let outside_same = (0..t).filter(|i| !inside.contains(i)).all(|i| row(&a, i) == row(&b, i));
        let reaches = inside.clone().any(|i| row(&a, i) != row(&b, i));
        if !(outside_same && reaches) {
            tcn_bad += 1;
        }
    }
    verdict(
        leaks == 0 && tcn_bad == 0,
        format!("transformer leaks in {leaks} of 200 sequences; tcn violations in {tcn_bad} of 100 (field {rf})"),
    )
}

/// Smooth, non-collinear wind and current records.
fn env(n: usize, seed: u64) -> Vec<EnvSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ph: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
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

fn curve_recovery() -> Verdict {
    let truth = [0.9, 0.03, 0.001];
    let s = env(1500, 11);
    // trapezoid integrals of the fields, accumulated directly
    let (mut iw, mut ia) = ([0.0f64; 2], [0.0f64; 2]);
    let mut drift = vec![[0.0; 2]];
    for w in s.windows(2) {
        let dt = w[1].t - w[0].t;
        for j in 0..2 {
            iw[j] += dt * (w[0].v_w[j] + w[1].v_w[j]) / 2.0;
            ia[j] += dt * (w[0].v_a[j] + w[1].v_a[j]) / 2.0;
        }
        let t = w[1].t - s[0].t;
        drift.push([0, 1].map(|j| truth[0] * iw[j] + truth[1] * ia[j] + truth[2] * t));
    }
    let fit = CurveFit::fit([(s.as_slice(), drift.as_slice())]).unwrap();
    let err = fit.coeffs.x.iter().chain(&fit.coeffs.y).zip(truth.iter().chain(&truth)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(err <= 1e-6, format!("x {:?}, y {:?}, max error {err:.1e}", fit.coeffs.x, fit.coeffs.y))
}

fn campaign_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        t_h: vec![1, 3, 5, 10],
        models: vec![ModelKind::Persistence, ModelKind::Curvefit, ModelKind::MmLstm, ModelKind::MmTransformer],
        out_dir: out.to_path_buf(),
        ..Default::default()
    }
}

fn rmse(rows: &[MetricsRow], object: &str, model: &str, t_h: usize) -> Option<f64> {
    rows.iter().find(|r| r.object == object && r.model == model && r.t_h == t_h).map(|r| r.metrics.rmse)
}

fn end_to_end(run: &RunSummary) -> Verdict {
    let mut notes = Vec::new();
    let mut pass = run.failed().count() == 0;
    for model in ["mm-lstm", "mm-transformer"] {
        let (mut vs_persistence, mut vs_curve, mut cells) = (0, 0, 0);
        for t_h in [1, 5] {
            for object in &run.manifest.objects {
                let m = rmse(&run.rows, object, model, t_h);
                let p = rmse(&run.rows, object, "persistence", t_h);
                let c = rmse(&run.rows, object, "curvefit", t_h);
                let (Some(m), Some(p), Some(c)) = (m, p, c) else { continue };
                cells += 1;
                vs_persistence += usize::from(m <= 0.8 * p);
                vs_curve += usize::from(m < c);
            }
        }
        pass &= cells == 10 && vs_persistence == 10 && vs_curve >= 8;
        notes.push(format!("{model}: 20% under persistence in {vs_persistence}/10, under curve fit in {vs_curve}/10"));
    }
    verdict(pass, notes.join("; "))
}

fn degradation(run: &RunSummary) -> Verdict {
    let mut pass = run.failed().count() == 0;
    let mut notes = Vec::new();
    for model in ["mm-lstm", "mm-transformer"] {
        let means: Vec<f64> = [1, 3, 5, 10]
            .iter()
            .map(|&t_h| {
                let v: Vec<f64> = run.rows.iter().filter(|r| r.model == model && r.t_h == t_h).map(|r| r.metrics.rmse).collect();
                if v.len() == 5 { v.iter().sum::<f64>() / 5.0 } else { f64::NAN }
            })
            .collect();
        pass &= means.windows(2).all(|w| w[1] >= w[0]);
        notes.push(format!("{model} {}", means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" <= ")));
    }
    verdict(pass, notes.join("; "))
}

/// Reruns a few cells from the campaign manifest alone and compares their
/// metrics files byte for byte.
fn reproducible(run: &RunSummary) -> Verdict {
    let base = ExperimentConfig::load(&run.out_dir.join("manifest.json")).unwrap();
    let objects = &run.manifest.objects;
    let picks = [
        (vec![1, 3, 5, 10], objects.clone(), vec![ModelKind::Persistence, ModelKind::Curvefit]),
        (vec![1], vec![objects[0].clone()], vec![ModelKind::MmLstm]),
        (vec![5], vec![objects[objects.len() - 1].clone()], vec![ModelKind::MmTransformer]),
    ];
    let (mut same, mut total) = (0, 0);
    for (t_h, holdout, models) in picks {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { t_h, holdout: Some(holdout), models, out_dir: dir.path().to_path_buf(), ..base.clone() };
        let again = run_experiment(&cfg).unwrap();
        for cell in &again.manifest.cells {
            let file = cell.dir().join(METRICS_FILE);
            total += 1;
            same += usize::from(std::fs::read(dir.path().join(&file)).ok() == std::fs::read(run.out_dir.join(&file)).ok());
        }
    }
    verdict(same == total && total == 42, format!("{same} of {total} rerun cells byte-identical"))
}

fn cnn() -> Verdict {
    let corpus: Vec<GeometryImage> = synth_corpus(CORPUS_SIZE, 32, 0).unwrap().into_iter().map(|(_, i)| i).collect();
    let small = CnnConfig { image_size: 32, channels: vec![8, 8, 8], kernels: vec![3, 3, 3], dense: 16, seed: 1 };

    let eight: Vec<&GeometryImage> = corpus.iter().take(8).collect();
    let mut m = CnnModel::new(&small).unwrap();
    let overfit = TrainConfig { max_epochs: 600, patience: 600, val_fraction: 0.0, batch_size: 8, learning_rate: 3e-3, ..Default::default() };
    m.fit(&eight, &overfit).unwrap();
    let eight_mse = m.evaluate(&eight).unwrap().mse;

    // 90/10 split of the corpus; the training share keeps its own 10% for
    // early stopping
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    let held = corpus.len() / 10;
    let test: Vec<&GeometryImage> = order[..held].iter().map(|&i| &corpus[i]).collect();
    let train: Vec<&GeometryImage> = order[held..].iter().map(|&i| &corpus[i]).collect();
    let mut m = CnnModel::new(&small).unwrap();
    m.fit(&train, &CnnModel::default_training(3)).unwrap();
    let (tr, te) = (m.evaluate(&train).unwrap().mae, m.evaluate(&test).unwrap().mae);
    verdict(
        eight_mse < 1e-3 && te <= 3.0 * tr,
        format!("8-image MSE {eight_mse:.1e}; MAE train {tr:.4}, held-out {te:.4} ({:.2}x)", te / tr),
    )
}

#[test]
fn acceptance_criteria() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut failed = Vec::new();
    let mut record = |id: usize, pass: bool| {
        if !pass {
            failed.push(id);
        }
    };
    record(1, criterion(1, "force model", secs(1), forces));
    record(2, criterion(2, "wind power law", secs(1), power_law));
    record(3, criterion(3, "windowing oracle", secs(5), windowing));
    record(4, criterion(4, "gradient suite", secs(60), gradients));
    record(5, criterion(5, "causality", secs(30), causality));
    record(6, criterion(6, "curve-fit recovery", secs(5), curve_recovery));

    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let run = run_experiment(&campaign_config(dir.path()));
    let took = start.elapsed();
    match &run {
        Ok(run) => {
            for r in run.rows.iter().filter(|r| !r.model.ends_with("-onestep")) {
                say(&format!("    t_h={:<2} {:<20} {:<15} rmse {:.4}", r.t_h, r.object, r.model, r.metrics.rmse));
            }
            record(7, report(7, "end-to-end learning", secs(15 * 60), took, end_to_end(run)));
            record(8, report(8, "degradation with t_h", secs(15 * 60), took, degradation(run)));
            record(10, criterion(10, "reproducibility", None, || reproducible(run)));
        }
        Err(e) => {
            for (id, name) in [(7, "end-to-end learning"), (8, "degradation with t_h"), (10, "reproducibility")] {
                record(id, report(id, name, None, took, verdict(false, format!("campaign failed: {e}"))));
            }
        }
    }
    record(9, criterion(9, "cnn overfit and generalization", secs(5 * 60), cnn));

    failed.sort();
    say(&format!("acceptance: {} of 10 pass; failing {failed:?}, expected {KNOWN_RED:?}", 10 - failed.len()));
    assert_eq!(failed, KNOWN_RED, "failing criteria differ from the known set");
}
