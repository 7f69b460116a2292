use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use dff::analysis::{self, report, Histogram};
use dff::dataio::{self, Checkpoint, Provenance, Trajectory};
use dff::dynamics::{self, DffForce, Driver, Integrator, LangevinConfig};
use dff::experiments::{self, AblationOptions, Tolerances};
use dff::sampler::ancestral_sample;
use dff::schedule::make_cosine_schedule;
use dff::scorenet::{ModelConfig, ScoreModel};
use dff::toyworlds;
use dff::trainer::{history_csv, TrainConfig, Trainer, TrainerState};
use dff::{DffError, Result};

#[derive(Parser)]
#[command(name = "dff", version, about = "Denoising force fields for coarse-grained dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw exact Boltzmann samples from a toy system.
    GenData(GenDataArgs),
    /// Fit a score model to a trajectory.
    Train(TrainArgs),
    /// Draw i.i.d. samples by ancestral sampling.
    Sample(SampleArgs),
    /// Run dynamics with a learned force field or a toy potential.
    Simulate(SimulateArgs),
    /// Compare a model trajectory against a reference.
    Analyze(AnalyzeArgs),
    /// Run an ablation sweep on toy systems.
    Ablate(AblateArgs),
    /// Finite-difference and identity checks on a model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    system: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    kt: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store CG coordinates for systems with a CG map.
    #[arg(long)]
    cg: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON with "model" and "train" objects.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Continue from a checkpoint holding training state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss history; defaults to the checkpoint path with a .loss.csv suffix.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Temperature recorded in the output header.
    #[arg(long, default_value_t = 1.0)]
    kt: f64,
    /// Use raw rather than averaged weights.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, conflicts_with = "system", required_unless_present = "system")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long, value_enum, default_value_t = Integrator::Langevin)]
    integrator: Integrator,
    #[arg(long)]
    noise_level: Option<usize>,
    /// Training-set size used to pick the default noise level.
    #[arg(long, default_value_t = 100_000)]
    train_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    dt: f64,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    save_every: usize,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    kt: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    mass: f64,
    #[arg(long, default_value_t = 1.0)]
    friction: f64,
    /// Starting frames; defaults to exact samples or model samples.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Tic,
    Pwd,
    Dihedral,
    Contact,
    Rmsd,
    Msm,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![Metric::Tic, Metric::Pwd])]
    metrics: Vec<Metric>,
    #[arg(long, default_value_t = analysis::DEFAULT_TICA_LAG)]
    lag: usize,
    #[arg(long, default_value_t = analysis::DEFAULT_BINS_2D)]
    bins: usize,
    /// Smallest bead-index offset for distance pairs.
    #[arg(long, default_value_t = analysis::DEFAULT_PWD_OFFSET)]
    pwd_offset: usize,
    #[arg(long, default_value_t = 1.0)]
    contact_threshold: f64,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationMode {
    Conservative,
    NoiseLevel,
    Equivariance,
    Features,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    mode: AblationMode,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 6000)]
    iterations: usize,
    #[arg(long, default_value_t = 12_000)]
    sim_steps: usize,
    #[arg(long, default_value_t = 5)]
    level: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 5, 10, 20, 50, 100])]
    levels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 16, 32, 64])]
    widths: Vec<usize>,
    /// CSV copy of the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, conflicts_with = "fresh", required_unless_present = "fresh")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    fresh: bool,
    /// Relative tolerance of the finite-difference checks.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => analyze(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("DFF_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DFF_NUM_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    dataio::write_file(path, text.as_bytes())
}

fn print_summary(traj: &Trajectory) {
    let c = traj.frame_len();
    let n = traj.n_frames().max(1) as f64;
    let x = traj.to_f64();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for f in x.chunks(c) {
        for k in 0..c {
            mean[k] += f[k] / n;
        }
    }
    for f in x.chunks(c) {
        for k in 0..c {
            var[k] += (f[k] - mean[k]).powi(2) / n;
        }
    }
    println!(
        "frames {} beads {} dim {} kT {}",
        traj.n_frames(),
        traj.n_beads(),
        traj.dim(),
        traj.kt
    );
    let show = c.min(6);
    println!("mean {:?}", &mean[..show]);
    println!("var  {:?}", &var[..show]);
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let system = toyworlds::system_by_name(&a.system, a.kt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut xs = system.boltzmann_sample(a.n, &mut rng)?;
    let (mut n_beads, dim) = system.frame_shape();
    if a.cg {
        let map = system
            .cg_map()
            .ok_or_else(|| DffError::Unsupported(format!("system {} has no CG map", system.name)))?;
        xs = xs.chunks(system.dim_total()).flat_map(|f| map.apply(f)).collect();
        n_beads = map.n_cg();
    }
    let traj = Trajectory::from_f64(n_beads, dim, &xs, system.kt, Provenance::Oracle)?;
    dataio::write_trajectory(&a.out, &traj)?;
    print_summary(&traj);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(&a.config)?)
        .map_err(|e| DffError::Format {
            path: a.config.clone(),
            detail: e.to_string(),
        })?;
    let data = dataio::read_trajectory(&a.data)?;
    if (data.n_beads(), data.dim()) != (cfg.model.n_beads, cfg.model.dim) {
        return Err(DffError::ShapeMismatch(format!(
            "data has {} beads x {} dims but the model expects {} x {}",
            data.n_beads(),
            data.dim(),
            cfg.model.n_beads,
            cfg.model.dim
        )));
    }
    let split = dataio::split_dataset(data.n_frames(), dataio::DEFAULT_SPLIT, cfg.train.seed)?;
    let train_x = data.select(&split.train)?.to_f64();
    let val_x = data.select(&split.validation)?.to_f64();

    let mut trainer = match &a.resume {
        None => {
            let model = ScoreModel::new(cfg.model.clone(), make_cosine_schedule(cfg.model.levels)?, cfg.train.seed)?;
            Trainer::new(model, train_x, val_x, cfg.train.clone())?
        }
        Some(path) => {
            let ck = dataio::read_checkpoint(path)?;
            let (_, state): (TrainConfig, TrainerState) = ck.training.ok_or_else(|| DffError::Incompatible {
                missing: vec!["training state".into()],
            })?;
            if ck.model.config() != &cfg.model {
                return Err(invalid_arg("resume checkpoint was trained with a different model config"));
            }
            Trainer::resume(ck.model, train_x, val_x, cfg.train.clone(), state)?
        }
    };
    let outcome = trainer.run();
    let ck = Checkpoint {
        model: trainer.raw_model(),
        ema_params: trainer.state().ema.clone(),
        training: Some((trainer.config().clone(), trainer.state().clone())),
    };
    dataio::write_checkpoint(&a.out_checkpoint, &ck)?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out_checkpoint.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_text(&csv_path, &history_csv(trainer.history()))?;
    if let Err(e) = outcome {
        eprintln!(
            "last good state (iteration {}) written to {}",
            trainer.state().iteration,
            a.out_checkpoint.display()
        );
        return Err(e);
    }
    let last = trainer.history().iter().rev().find_map(|r| r.val_loss);
    println!(
        "iterations {} params {} final validation loss {}",
        trainer.state().iteration,
        ck.model.n_params(),
        last.map_or("n/a".to_string(), |v| format!("{v:.6}"))
    );
    Ok(())
}

fn invalid_arg(msg: &str) -> DffError {
    DffError::InvalidArgument(msg.to_string())
}

fn load_model(path: &Path, raw: bool) -> Result<ScoreModel> {
    let ck = dataio::read_checkpoint(path)?;
    if raw {
        Ok(ck.model)
    } else {
        ck.ema_model()
    }
}

fn sample(a: SampleArgs) -> Result<()> {
    let model = load_model(&a.checkpoint, a.raw)?;
    let set = ancestral_sample(&model, a.n, a.seed)?;
    if set.n_failed > 0 {
        eprintln!("warning: {} of {} samples diverged and were dropped", set.n_failed, a.n);
    }
    let cfg = model.config();
    let traj = Trajectory::from_f64(cfg.n_beads, cfg.dim, &set.samples, a.kt, Provenance::Iid)?;
    dataio::write_trajectory(&a.out, &traj)?;
    print_summary(&traj);
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let model = a.checkpoint.as_deref().map(|p| load_model(p, a.raw)).transpose()?;
    let system = a.system.as_deref().map(|s| toyworlds::system_by_name(s, a.kt)).transpose()?;
    let kt = match (&system, a.kt) {
        (Some(s), _) => s.kt,
        (None, Some(kt)) => kt,
        (None, None) => return Err(invalid_arg("--kt is required with --checkpoint")),
    };
    let mut cfg = LangevinConfig {
        mass: a.mass,
        friction: a.friction,
        kt,
        dt: a.dt,
        n_steps: a.steps,
        save_every: a.save_every,
        n_replicas: a.replicas,
        noise_level: None,
        seed: a.seed,
        save_initial: false,
    };
    let initial = match &a.init {
        Some(p) => dataio::read_trajectory(p)?.to_f64(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x1417);
            match (&system, &model) {
                (Some(s), _) => s.boltzmann_sample(a.replicas, &mut rng)?,
                (None, Some(m)) => ancestral_sample(m, a.replicas, a.seed ^ 0x1417)?.samples,
                _ => unreachable!("clap enforces one source"),
            }
        }
    };
    let report = match (&system, &model) {
        (Some(s), _) => dynamics::simulate(Driver::Force(s), a.integrator, &initial, &cfg, |_, _| {})?,
        (None, Some(m)) => {
            let level = a
                .noise_level
                .unwrap_or_else(|| dynamics::default_noise_level(a.train_size, m.config().levels));
            cfg.noise_level = Some(level);
            match a.integrator {
                Integrator::DiffuseDenoise => {
                    dynamics::simulate(Driver::Chain(m), a.integrator, &initial, &cfg, |_, _| {})?
                }
                _ => {
                    let force = DffForce::new(m, level, kt)?;
                    dynamics::simulate(Driver::Force(&force), a.integrator, &initial, &cfg, |_, _| {})?
                }
            }
        }
        _ => unreachable!("clap enforces one source"),
    };
    for (r, step) in &report.diverged {
        eprintln!("warning: replica {r} diverged at step {step}");
    }
    dataio::write_trajectory(&a.out, &report.trajectory)?;
    print_summary(&report.trajectory);
    Ok(())
}

fn segments_of(x: &[f64], width: usize, ranges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    ranges.iter().map(|&(s, e)| x[s * width..e * width].to_vec()).collect()
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let reference = dataio::read_trajectory(&a.reference)?;
    let model = dataio::read_trajectory(&a.model)?;
    if (reference.n_beads(), reference.dim()) != (model.n_beads(), model.dim()) {
        return Err(DffError::ShapeMismatch(format!(
            "reference frames are {} beads x {} dims but model frames are {} beads x {} dims",
            reference.n_beads(),
            reference.dim(),
            model.n_beads(),
            model.dim()
        )));
    }
    fs::create_dir_all(&a.out_dir)?;
    let out = |name: &str| a.out_dir.join(name);
    let mut metrics = Map::new();
    let mut tica: Option<(analysis::TicaModel, Vec<f64>, Vec<f64>, usize)> = None;

    let mut need_tica = |metrics: &mut Map<String, Value>| -> Result<(analysis::TicaModel, Vec<f64>, Vec<f64>, usize)> {
        if let Some(t) = &tica {
            return Ok(t.clone());
        }
        let (w, rf) = analysis::tica_features(&reference);
        let (_, mf) = analysis::tica_features(&model);
        let segs = segments_of(&rf, w, &reference.segment_ranges());
        let refs: Vec<&[f64]> = segs.iter().map(|s| s.as_slice()).collect();
        let nc = w.min(2);
        let fit = analysis::tica_fit(&refs, w, a.lag, nc)?;
        let rp = analysis::tica_transform(&fit, &rf)?;
        let mp = analysis::tica_transform(&fit, &mf)?;
        metrics.insert("tica_eigenvalues".into(), json!(fit.eigenvalues));
        tica = Some((fit, rp, mp, nc));
        Ok(tica.clone().expect("just set"))
    };

    for metric in &a.metrics {
        match metric {
            Metric::Tic => {
                let (_, rp, mp, nc) = need_tica(&mut metrics)?;
                let col = |x: &[f64], k: usize| x.iter().skip(k).step_by(nc).copied().collect::<Vec<_>>();
                let (r0, m0) = (col(&rp, 0), col(&mp, 0));
                metrics.insert("tic1_js".into(), json!(analysis::sample_js(&r0, &m0, a.bins)?));
                let range = analysis::joint_range(&r0, &m0)?;
                let hr = Histogram::new_1d(&r0, a.bins, range)?;
                let hm = Histogram::new_1d(&m0, a.bins, range)?;
                let (fr, fm) = (analysis::free_energy(&hr), analysis::free_energy(&hm));
                let rows: Vec<Vec<f64>> = (0..a.bins)
                    .map(|b| {
                        let e = &hr.edges()[0];
                        vec![0.5 * (e[b] + e[b + 1]), fr[b].unwrap_or(f64::NAN), fm[b].unwrap_or(f64::NAN)]
                    })
                    .collect();
                write_text(&out("tic1_free_energy.csv"), &report::csv(&["tic1", "reference", "model"], &rows))?;
                if nc == 2 {
                    metrics.insert("tic2d_js".into(), json!(analysis::sample_js_2d(&rp, &mp, a.bins)?));
                    let (r1, m1) = (col(&rp, 1), col(&mp, 1));
                    let xr = analysis::joint_range(&r0, &m0)?;
                    let yr = analysis::joint_range(&r1, &m1)?;
                    for (name, pts) in [("reference", &rp), ("model", &mp)] {
                        let h = Histogram::new_2d(pts, (a.bins, a.bins), xr, yr)?;
                        let svg = report::heatmap_svg(&analysis::free_energy(&h), a.bins, a.bins, &format!("TIC free energy ({name})"));
                        write_text(&out(&format!("tic2d_{name}.svg")), &svg)?;
                    }
                }
            }
            Metric::Pwd => {
                let per_pair = analysis::pwd_js(&reference, &model, a.pwd_offset, a.bins)?;
                let vals: Vec<f64> = per_pair.iter().map(|(_, v)| *v).collect();
                let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
                metrics.insert("pwd_js_mean".into(), json!(mean));
                let rows: Vec<Vec<f64>> = per_pair.iter().map(|((j, k), v)| vec![*j as f64, *k as f64, *v]).collect();
                write_text(&out("pwd_js.csv"), &report::csv(&["bead_j", "bead_k", "js"], &rows))?;
            }
            Metric::Dihedral => {
                let dr = analysis::dihedral_angles(&reference)?;
                let dm = analysis::dihedral_angles(&model)?;
                let n_t = dr.first().map_or(0, |r| r.len());
                let range = (-std::f64::consts::PI, std::f64::consts::PI);
                let mut js = Vec::with_capacity(n_t);
                for t in 0..n_t {
                    let r: Vec<f64> = dr.iter().map(|row| row[t]).collect();
                    let m: Vec<f64> = dm.iter().map(|row| row[t]).collect();
                    js.push(analysis::js_divergence(
                        &Histogram::new_1d(&r, a.bins, range)?,
                        &Histogram::new_1d(&m, a.bins, range)?,
                    )?);
                }
                metrics.insert("dihedral_js".into(), json!(js));
            }
            Metric::Contact => {
                let n = reference.n_beads();
                let cr = analysis::contact_probability_map(&reference, a.contact_threshold);
                let cm = analysis::contact_probability_map(&model, a.contact_threshold);
                let mae = cr.iter().zip(&cm).map(|(x, y)| (x - y).abs()).sum::<f64>() / (n * n) as f64;
                metrics.insert("contact_mean_abs_diff".into(), json!(mae));
                write_text(&out("contact_reference.csv"), &report::matrix_csv(&cr, n))?;
                write_text(&out("contact_model.csv"), &report::matrix_csv(&cm, n))?;
                // Upper triangle shows the reference, lower triangle the model.
                let merged: Vec<Option<f64>> = (0..n * n)
                    .map(|i| {
                        let (r, c) = (i / n, i % n);
                        if r < c {
                            Some(cr[i])
                        } else if r > c {
                            Some(cm[i])
                        } else {
                            None
                        }
                    })
                    .collect();
                write_text(&out("contact_map.svg"), &report::heatmap_svg(&merged, n, n, "contact probability"))?;
            }
            Metric::Rmsd => {
                let r0: Vec<f64> = reference.frame(0).iter().map(|&v| v as f64).collect();
                let series = |t: &Trajectory| -> Result<Vec<f64>> {
                    (0..t.n_frames())
                        .map(|i| {
                            let f: Vec<f64> = t.frame(i).iter().map(|&v| v as f64).collect();
                            analysis::rmsd(&f, &r0, t.dim())
                        })
                        .collect()
                };
                let (rr, rm) = (series(&reference)?, series(&model)?);
                metrics.insert("rmsd_js".into(), json!(analysis::sample_js(&rr, &rm, a.bins)?));
                let rows: Vec<Vec<f64>> = rm.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
                write_text(&out("rmsd_model.csv"), &report::csv(&["frame", "rmsd"], &rows))?;
            }
            Metric::Msm => {
                let (_, rp, mp, nc) = need_tica(&mut metrics)?;
                let km = analysis::kmeans(&rp, nc, a.clusters, a.seed)?;
                let lr = km.labels.clone();
                let lm = analysis::assign(&mp, &km.centroids, nc);
                let lab_segs = |labels: &[usize], t: &Trajectory| -> Vec<Vec<usize>> {
                    t.segment_ranges().iter().map(|&(s, e)| labels[s..e].to_vec()).collect()
                };
                let sr = lab_segs(&lr, &reference);
                let sm = lab_segs(&lm, &model);
                let tr = analysis::transition_matrix(&sr.iter().map(|s| s.as_slice()).collect::<Vec<_>>(), a.clusters, a.lag)?;
                let tm = analysis::transition_matrix(&sm.iter().map(|s| s.as_slice()).collect::<Vec<_>>(), a.clusters, a.lag)?;
                let (avg, weighted) = analysis::transition_js(&tm, &tr)?;
                metrics.insert("msm_js_mean".into(), json!(avg));
                metrics.insert("msm_js_weighted".into(), json!(weighted));
                write_text(&out("msm_reference.csv"), &report::matrix_csv(&tr.p, a.clusters))?;
                write_text(&out("msm_model.csv"), &report::matrix_csv(&tm.p, a.clusters))?;
            }
        }
    }
    let text = serde_json::to_string_pretty(&Value::Object(metrics)).expect("plain JSON values");
    write_text(&out("metrics.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let opts = AblationOptions {
        seeds: a.seeds,
        iterations: a.iterations,
        sim_steps: a.sim_steps,
        level: a.level,
    };
    let rows = match a.mode {
        AblationMode::Conservative => experiments::ablate_conservative(&opts)?,
        AblationMode::NoiseLevel => experiments::ablate_noise_level(&opts, &a.levels)?,
        AblationMode::Equivariance => experiments::ablate_equivariance(&opts)?,
        AblationMode::Features => experiments::ablate_features(&opts, &a.widths)?,
    };
    print!("{}", experiments::format_table(&rows));
    if let Some(path) = &a.out {
        let mut s = String::from("variant,seed,metric,value\n");
        for r in &rows {
            s.push_str(&format!("{},{},{},{}\n", r.variant, r.seed, r.metric, r.value));
        }
        write_text(path, &s)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => load_model(p, true)?,
        None => experiments::gradcheck_model(a.seed)?,
    };
    let tol = Tolerances {
        relative: a.tolerance,
        ..Tolerances::default()
    };
    let checks = experiments::gradcheck(&model, tol, a.seed)?;
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<30} {:.3e} (tolerance {:.1e})", c.name, c.value, c.tolerance);
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        return Err(DffError::Numerical(format!("{failed} check(s) failed")));
    }
    Ok(())
}
