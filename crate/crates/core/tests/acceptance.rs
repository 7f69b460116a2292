//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers to run a subset.

use std::f64::consts::LN_2;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dff::analysis::{self, Histogram};
use dff::dataio::{self, Checkpoint, Provenance, Trajectory};
use dff::dynamics::{self, Driver, HarmonicForce, Integrator, LangevinConfig};
use dff::experiments::{self, AblationOptions, DoubleWellSetup, Tolerances};
use dff::sampler::ancestral_sample;
use dff::schedule::make_cosine_schedule;
use dff::scorenet::{random_rotation, ModelConfig, NoisePredictor, ScoreModel};
use dff::toyworlds::ToySystem;
use dff::trainer::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<(bool, String), String>;

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

fn c1_loss_equivalence() -> Outcome {
    let cfg = ModelConfig {
        n_features: 8,
        n_layers: 2,
        levels: 200,
        ..ModelConfig::new(3, 3)
    };
    let model = ScoreModel::new(cfg, make_cosine_schedule(200).map_err(e)?, 11).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let gap = experiments::loss_equivalence_gap(&model, 100, &mut rng).map_err(e)?;
    Ok((gap < 1e-10, format!("max gap {gap:.2e} (< 1e-10)")))
}

fn c2_gradients() -> Outcome {
    let model = experiments::gradcheck_model(21).map_err(e)?;
    let checks = experiments::gradcheck(&model, Tolerances::default(), 22).map_err(e)?;
    let ok = model.n_params() <= 100 && checks.len() == 4 && checks.iter().all(|c| c.passed());
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e}/{:.0e}", c.name, c.value, c.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, format!("{} params; {detail}", model.n_params())))
}

/// Conservative model on 5e4 samples of N(0, 1), shared by criteria 3 and 4.
fn gaussian_model() -> Result<ScoreModel, String> {
    let system = ToySystem::gaussian_well(1, 1.0, 1.0).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let train = system.boltzmann_sample(50_000, &mut rng).map_err(e)?;
    let val = system.boltzmann_sample(5_000, &mut rng).map_err(e)?;
    let model = ModelConfig {
        anchored: true,
        levels: 100,
        ..ModelConfig::new(1, 1)
    };
    let cfg = TrainConfig {
        iterations: 4000,
        learning_rate: 1e-3,
        validation_interval: 1000,
        validation_samples: 2000,
        seed: 32,
        ..TrainConfig::default()
    };
    experiments::train_model(&train, &val, &model, &cfg).map_err(e)
}

fn c3_gaussian_oracle(model: &ScoreModel) -> Outcome {
    let kt = 1.0;
    let sched = model.schedule();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for level in 1..=3 {
        let ab = sched.alpha_bar(level);
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..=200 {
            let x = -2.0 + 4.0 * k as f64 / 200.0;
            let exact = -kt * x / (ab + 1.0 - ab);
            let f = model.dff_force(&[x], level, kt).map_err(e)?[0];
            num += (f - exact).powi(2);
            den += exact * exact;
        }
        let rel = (num / den).sqrt();
        worst = worst.max(rel);
        parts.push(format!("level {level} {rel:.4}"));
    }
    Ok((worst < 0.05, format!("relative L2 {} (< 0.05)", parts.join(", "))))
}

fn c4_implicit_step(model: &ScoreModel) -> Outcome {
    // 100 replicas x 10^4 steps = 10^6 steps per integrator.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let init = gaussian(100, &mut rng);
    let (v_dd, v_bd) = experiments::paired_stationary_variance(model, &init, 1.0, 10_000, 3_000, 42).map_err(e)?;
    let rel = (v_dd - v_bd).abs() / v_bd;
    Ok((
        rel < 0.05,
        format!("diffuse-denoise var {v_dd:.4}, Brownian var {v_bd:.4}, relative gap {rel:.4} (< 0.05)"),
    ))
}

fn c5_double_well() -> Outcome {
    let mut setup = DoubleWellSetup::new(51).map_err(e)?;
    setup.n_train = 100_000;
    setup.n_val = 20_000;
    setup.train.iterations = 6000;
    let (train, val) = setup.data().map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let test = setup.system.boltzmann_sample(100_000, &mut rng).map_err(e)?;
    let model = setup.fit(&train, &val).map_err(e)?;
    let init = &train[..setup.sim.n_replicas];
    let (level, _) = setup.select_level(&model, &[1, 2, 5, 10, 20, 50], init, &val).map_err(e)?;
    let (js, occ) = setup.evaluate(&model, level, init, &test).map_err(e)?;
    Ok((
        js < 0.02 && (occ - 0.5).abs() <= 0.05,
        format!("level {level}: JS {js:.4} (< 0.02), right-well occupation {occ:.3} (0.5 +/- 0.05)"),
    ))
}

fn c6_harmonic_chain() -> Outcome {
    let setup = experiments::ChainSetup::new(61).map_err(e)?;
    let (train, val) = setup.data().map_err(e)?;
    let model = setup.fit(&train, &val).map_err(e)?;
    let iid = ancestral_sample(&model, setup.n_iid, 62).map_err(e)?;
    let sim = experiments::dff_langevin(&model, setup.level, &train[..setup.sim.n_replicas * 15], &setup.sim).map_err(e)?;
    let mut ok = iid.n_failed == 0;
    let mut parts = vec![format!("{} i.i.d. failures", iid.n_failed)];
    for (name, xs) in [("i.i.d.", &iid.samples), ("sim", &sim)] {
        let r = setup.compare(xs).map_err(e)?;
        ok &= r.pwd_js_mean < 0.02 && r.max_cov_error < 0.1;
        parts.push(format!(
            "{name}: PWD JS mean {:.4} (< 0.02), worst covariance error {:.3} (< 0.1)",
            r.pwd_js_mean, r.max_cov_error
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn c7_conservative_ablation() -> Outcome {
    let rows = experiments::ablate_conservative(&AblationOptions::default()).map_err(e)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for pair in rows.chunks(2) {
        let (c, n) = (&pair[0], &pair[1]);
        ok &= n.value > c.value;
        parts.push(format!("seed {}: {:.4} vs {:.4}", c.seed, n.value, c.value));
    }
    Ok((ok, format!("non-conservative vs conservative JS: {}", parts.join(", "))))
}

fn c8_equivariance() -> Outcome {
    let system = ToySystem::gaussian_well(2, 1.0, 1.0).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let train = system.boltzmann_sample(20_000, &mut rng).map_err(e)?;
    let test = system.boltzmann_sample(1000, &mut rng).map_err(e)?;
    let model_cfg = ModelConfig {
        anchored: true,
        ..ModelConfig::new(1, 2)
    };
    let cfg = TrainConfig {
        batch_size: 128,
        learning_rate: 1e-3,
        iterations: 8000,
        validation_interval: 8000,
        validation_samples: 1000,
        seed: 82,
        ..TrainConfig::default()
    };
    let model = experiments::train_model(&train, &test, &model_cfg, &cfg).map_err(e)?;
    let err = experiments::mean_equivariance_error(&model, &test, 1, 83).map_err(e)?;
    Ok((err < 1e-4, format!("mean equivariance error {err:.2e} (< 1e-4)")))
}

fn c9_integrators() -> Outcome {
    let ho = HarmonicForce { n_beads: 1, dim: 1, k: 1.0 };
    let cfg = LangevinConfig {
        friction: 0.0,
        kt: 0.0,
        dt: 1e-3,
        ..LangevinConfig::default()
    };
    let mut state = dynamics::DynState::at_rest(vec![1.0]);
    let e0 = 0.5;
    let mut drift = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for _ in 0..10_000 {
        dynamics::langevin_step(&mut state, &ho, &cfg, &mut rng).map_err(e)?;
        let energy = state.kinetic_energy(1.0) + 0.5 * state.x[0] * state.x[0];
        drift = drift.max((energy - e0).abs() / e0);
    }

    let init = gaussian(500, &mut rng);
    let mut vars = Vec::new();
    for (integrator, dt, steps) in [(Integrator::Langevin, 0.05, 2000), (Integrator::Brownian, 0.01, 4000)] {
        let cfg = LangevinConfig {
            dt,
            n_steps: steps,
            save_every: 10,
            n_replicas: 500,
            seed: 92,
            ..LangevinConfig::default()
        };
        let rep = dynamics::simulate(Driver::Force(&ho), integrator, &init, &cfg, |_, _| {}).map_err(e)?;
        vars.push(variance(&rep.trajectory.to_f64()));
    }
    let ok = drift < 1e-6 && vars.iter().all(|v| (v - 1.0).abs() < 0.03);
    Ok((
        ok,
        format!(
            "energy drift {drift:.2e} (< 1e-6); OU variance Langevin {:.4}, Brownian {:.4} (1 +/- 0.03)",
            vars[0], vars[1]
        ),
    ))
}

fn c10_analysis() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;

    let p = Histogram::new_1d(&[0.1; 10], 2, (0.0, 1.0)).map_err(e)?;
    let q = Histogram::new_1d(&[0.9; 10], 2, (0.0, 1.0)).map_err(e)?;
    let js = analysis::js_divergence(&p, &q).map_err(e)?;
    ok &= (js - LN_2).abs() < 1e-12;
    parts.push(format!("disjoint JS - ln 2 = {:.1e}", js - LN_2));

    let t = analysis::transition_matrix(&[&[0, 0, 1, 1, 0]], 2, 1).map_err(e)?;
    let hand = t.counts == vec![1, 1, 1, 1] && t.p == vec![0.5; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let labels: Vec<usize> = (0..5000).map(|_| rng.random_range(0..6)).collect();
    let t = analysis::transition_matrix(&[&labels], 6, 3).map_err(e)?;
    let stochastic = (0..6).all(|i| (t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    ok &= hand && stochastic;
    parts.push(format!("hand count {hand}, row-stochastic {stochastic}"));

    let n = 100_000;
    let (mut a, mut b) = (0.0, 0.0);
    let mut series = Vec::with_capacity(2 * n);
    for _ in 0..n {
        a = 0.9 * a + normal(&mut rng);
        b = 0.1 * b + normal(&mut rng);
        series.extend([a, b]);
    }
    let tica = analysis::tica_fit(&[&series], 2, 1, 1).map_err(e)?;
    let v = tica.components.column(0);
    let cos = v[0].abs() / v.norm();
    ok &= cos > 0.99;
    parts.push(format!("TICA |cos| {cos:.5}"));

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let frame = gaussian(15, &mut rng);
        let rot = random_rotation(3, &mut rng).map_err(e)?;
        let shift = gaussian(3, &mut rng);
        let mut moved = frame.clone();
        rot.apply(&mut moved);
        for (k, x) in moved.iter_mut().enumerate() {
            *x += shift[k % 3];
        }
        worst = worst.max(analysis::rmsd(&moved, &frame, 3).map_err(e)?);
    }
    ok &= worst < 1e-10;
    parts.push(format!("rigid RMSD {worst:.1e}"));
    Ok((ok, parts.join("; ")))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn c11_infrastructure() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let path = |n: &str| dir.path().join(n);
    let mut rng = ChaCha8Rng::seed_from_u64(111);

    let frames = gaussian(6 * 40, &mut rng);
    let traj = Trajectory::from_f64(2, 3, &frames, 0.7, Provenance::Simulation)
        .map_err(e)?
        .with_timing(0.01, 5)
        .with_segments(vec![10, 25])
        .map_err(e)?;
    dataio::write_trajectory(path("t.traj"), &traj).map_err(e)?;
    let back = dataio::read_trajectory(path("t.traj")).map_err(e)?;
    let traj_ok = back == traj && back.to_bytes() == traj.to_bytes();

    let data = gaussian(2 * 500, &mut rng);
    let cfg = TrainConfig {
        batch_size: 16,
        iterations: 40,
        validation_interval: 10,
        validation_samples: 100,
        seed: 112,
        patience: Some(100),
        ..TrainConfig::default()
    };
    let model = || {
        let mc = ModelConfig {
            n_features: 6,
            n_layers: 1,
            levels: 30,
            ..ModelConfig::new(2, 1)
        };
        ScoreModel::new(mc, make_cosine_schedule(30).expect("schedule"), 113)
    };
    let val = data[..200].to_vec();
    let mut straight = Trainer::new(model().map_err(e)?, data.clone(), val.clone(), cfg.clone()).map_err(e)?;
    straight.run().map_err(e)?;
    let mut first = Trainer::new(model().map_err(e)?, data.clone(), val.clone(), cfg.clone()).map_err(e)?;
    first.run_until(20).map_err(e)?;
    let ck = Checkpoint {
        model: first.raw_model(),
        ema_params: first.state().ema.clone(),
        training: Some((cfg.clone(), first.state().clone())),
    };
    dataio::write_checkpoint(path("c.ckpt"), &ck).map_err(e)?;
    let back = dataio::read_checkpoint(path("c.ckpt")).map_err(e)?;
    dataio::write_checkpoint(path("c2.ckpt"), &back).map_err(e)?;
    let ckpt_ok = std::fs::read(path("c.ckpt")).map_err(e)? == std::fs::read(path("c2.ckpt")).map_err(e)?
        && back.model.params() == ck.model.params()
        && back.ema_params == ck.ema_params;
    let (cfg2, state) = back.training.ok_or("checkpoint lost training state")?;
    let mut resumed = Trainer::resume(back.model, data, val, cfg2, state).map_err(e)?;
    resumed.run().map_err(e)?;
    let resume_ok = resumed.state() == straight.state();

    let cli_ok = cli_is_deterministic(dir.path())?;
    Ok((
        traj_ok && ckpt_ok && resume_ok && cli_ok,
        format!("trajectory {traj_ok}, checkpoint {ckpt_ok}, resume {resume_ok}, CLI {cli_ok}"),
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dff")).args(args).output().map_err(e)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("dff {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn cli_is_deterministic(dir: &std::path::Path) -> Result<bool, String> {
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model":{"n_beads":1,"dim":1,"anchored":true,"n_features":8,"n_layers":1,"levels":50},
            "train":{"iterations":60,"batch_size":32,"validation_interval":30,"validation_samples":100,"seed":4}}"#,
    )
    .map_err(e)?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let p = |n: &str| dir.join(format!("{run}_{n}")).to_string_lossy().into_owned();
        let cfg = cfg.to_string_lossy().into_owned();
        run_cli(&["gen-data", "--system", "double-well", "--n", "2000", "--seed", "5", "--out", &p("d.traj")])?;
        run_cli(&["train", "--data", &p("d.traj"), "--config", &cfg, "--out-checkpoint", &p("m.ckpt")])?;
        run_cli(&["sample", "--checkpoint", &p("m.ckpt"), "--n", "300", "--seed", "6", "--out", &p("s.traj")])?;
        run_cli(&[
            "simulate", "--checkpoint", &p("m.ckpt"), "--kt", "0.5", "--noise-level", "2", "--steps", "200",
            "--replicas", "3", "--seed", "7", "--out", &p("sim.traj"),
        ])?;
        let files = ["d.traj", "m.ckpt", "m.ckpt.loss.csv", "s.traj", "sim.traj"];
        outputs.push(files.iter().map(|f| std::fs::read(p(f)).map_err(e)).collect::<Result<Vec<_>, _>>()?);
    }
    Ok(outputs[0] == outputs[1])
}

/// Wall-clock limits for the criteria that state one.
fn runtime_budget(n: usize) -> Option<Duration> {
    let secs = match n {
        1 => 1,
        2 => 60,
        3 | 4 => 600,
        5 | 6 => 1800,
        _ => return None,
    };
    Some(Duration::from_secs(secs))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failures = 0;
    let mut report = |n: usize, name: &str, start: Instant, outcome: Outcome| {
        let elapsed: Duration = start.elapsed();
        let budget = runtime_budget(n);
        let timing = match budget {
            Some(b) => format!("[{elapsed:.1?}, budget {b:?}]"),
            None => format!("[{elapsed:.1?}]"),
        };
        let outcome = match outcome {
            Ok((_, detail)) if budget.is_some_and(|b| elapsed > b) => {
                Ok((false, format!("{detail}; over the runtime budget")))
            }
            other => other,
        };
        match outcome {
            Ok((true, detail)) => println!("criterion {n:>2} PASS  {name}: {detail} {timing}"),
            Ok((false, detail)) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} {timing}")
            }
            Err(err) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: error: {err} {timing}")
            }
        }
    };

    let t = Instant::now();
    if want(1) {
        report(1, "loss equivalence", t, c1_loss_equivalence());
    }
    let t = Instant::now();
    if want(2) {
        report(2, "conservativity and gradients", t, c2_gradients());
    }
    if want(3) || want(4) {
        let t = Instant::now();
        match gaussian_model() {
            Ok(model) => {
                if want(3) {
                    report(3, "Gaussian DFF oracle", t, c3_gaussian_oracle(&model));
                }
                if want(4) {
                    let t = Instant::now();
                    report(4, "Brownian vs diffuse-denoise", t, c4_implicit_step(&model));
                }
            }
            Err(err) => {
                for n in [3, 4].into_iter().filter(|&n| want(n)) {
                    report(n, "Gaussian model training", t, Err(err.clone()));
                }
            }
        }
    }
    let cases: [(usize, &str, fn() -> Outcome); 7] = [
        (5, "double-well equilibrium", c5_double_well),
        (6, "harmonic chain", c6_harmonic_chain),
        (7, "conservative ablation", c7_conservative_ablation),
        (8, "equivariance", c8_equivariance),
        (9, "integrator physics", c9_integrators),
        (10, "analysis oracles", c10_analysis),
        (11, "infrastructure", c11_infrastructure),
    ];
    for (n, name, f) in cases {
        if want(n) {
            let t = Instant::now();
            report(n, name, t, f());
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
