//! Python bindings. Configurations cross the boundary as flat lists of
//! floats, `n_beads * dim` values per frame.

use dff::dataio::{read_checkpoint, write_checkpoint, Checkpoint};
use dff::dynamics::{simulate as run_simulation, DffForce, Driver, Integrator, LangevinConfig};
use dff::schedule::{make_cosine_schedule, NoiseSchedule};
use dff::scorenet::{ModelConfig, ScoreModel};
use dff::toyworlds::{system_by_name, ToySystem};
use dff::trainer::TrainConfig;
use dff::DffError;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: DffError) -> PyErr {
    match e {
        DffError::Io(_) => PyIOError::new_err(e.to_string()),
        DffError::TrainingDiverged { .. } | DffError::SimulationDiverged { .. } | DffError::Numerical(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Cosine noise schedule with levels numbered from 1.
#[pyclass(name = "Schedule", frozen)]
struct PySchedule(NoiseSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    fn new(levels: usize) -> PyResult<Self> {
        make_cosine_schedule(levels).map(Self).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn beta(&self, level: usize) -> PyResult<f64> {
        self.0.check_level(level).map_err(py_err)?;
        Ok(self.0.beta(level))
    }

    fn alpha_bar(&self, level: usize) -> PyResult<f64> {
        self.0.check_level(level).map_err(py_err)?;
        Ok(self.0.alpha_bar(level))
    }

    fn sigma(&self, level: usize) -> PyResult<f64> {
        self.0.check_level(level).map_err(py_err)?;
        Ok(self.0.sigma(level))
    }
}

/// Built-in toy system with exact samples and forces.
#[pyclass(name = "ToySystem", frozen)]
struct PyToySystem(ToySystem);

#[pymethods]
impl PyToySystem {
    #[new]
    #[pyo3(signature = (name, kt=None))]
    fn new(name: &str, kt: Option<f64>) -> PyResult<Self> {
        system_by_name(name, kt).map(Self).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn kt(&self) -> f64 {
        self.0.kt
    }

    #[getter]
    fn frame_shape(&self) -> (usize, usize) {
        self.0.frame_shape()
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.0.boltzmann_sample(n, &mut rng).map_err(py_err)
    }

    fn potential(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.potential(&x).map_err(py_err)
    }

    fn force(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.force(&x).map_err(py_err)
    }
}

/// Noise-prediction network. `eps` and `dff_force` take one frame.
#[pyclass(name = "ScoreModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScoreModel(ScoreModel);

#[pymethods]
impl PyScoreModel {
    #[new]
    #[pyo3(signature = (n_beads, dim, levels=1000, n_layers=2, n_features=32, conservative=true, anchored=false, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_beads: usize,
        dim: usize,
        levels: usize,
        n_layers: usize,
        n_features: usize,
        conservative: bool,
        anchored: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            levels,
            n_layers,
            n_features,
            conservative,
            anchored,
            ..ModelConfig::new(n_beads, dim)
        };
        let schedule = make_cosine_schedule(levels).map_err(py_err)?;
        ScoreModel::new(config, schedule, seed).map(Self).map_err(py_err)
    }

    /// Loads the EMA parameters of a checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = read_checkpoint(path).map_err(py_err)?;
        ckpt.ema_model().map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_checkpoint(path, &Checkpoint::from_model(self.0.clone())).map_err(py_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.n_params()
    }

    #[getter]
    fn levels(&self) -> usize {
        self.0.config().levels
    }

    #[getter]
    fn frame_shape(&self) -> (usize, usize) {
        (self.0.config().n_beads, self.0.config().dim)
    }

    fn energy(&self, x: Vec<f64>, level: usize) -> PyResult<f64> {
        self.0.energy(&x, level).map_err(py_err)
    }

    fn eps(&self, x: Vec<f64>, level: usize) -> PyResult<Vec<f64>> {
        use dff::scorenet::NoisePredictor;
        self.0.predict_noise(&x, level).map_err(py_err)
    }

    fn score(&self, x: Vec<f64>, level: usize) -> PyResult<Vec<f64>> {
        self.0.score(&x, level).map_err(py_err)
    }

    #[pyo3(signature = (x, level, kt=1.0))]
    fn dff_force(&self, x: Vec<f64>, level: usize, kt: f64) -> PyResult<Vec<f64>> {
        self.0.dff_force(&x, level, kt).map_err(py_err)
    }
}

/// Trains `model` on flattened frames and returns the EMA model.
#[pyfunction]
#[pyo3(signature = (model, train, val, iterations=1000, batch_size=128, learning_rate=1e-3, seed=0, augment_rotations=true))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    model: &PyScoreModel,
    train: Vec<f64>,
    val: Vec<f64>,
    iterations: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    augment_rotations: bool,
) -> PyResult<PyScoreModel> {
    let config = TrainConfig {
        iterations,
        batch_size,
        learning_rate,
        seed,
        augment_rotations,
        validation_interval: iterations.max(1),
        ..TrainConfig::default()
    };
    let model = model.0.clone();
    let outcome = py
        .detach(|| dff::trainer::train(model, train, val, config))
        .map_err(py_err)?;
    Ok(PyScoreModel(outcome.ema))
}

/// Ancestral samples as `(frames, n_failed)`.
#[pyfunction]
fn ancestral_sample(py: Python<'_>, model: &PyScoreModel, n: usize, seed: u64) -> PyResult<(Vec<f64>, usize)> {
    let set = py
        .detach(|| dff::sampler::ancestral_sample(&model.0, n, seed))
        .map_err(py_err)?;
    Ok((set.samples, set.n_failed))
}

/// Langevin, Brownian or diffuse-denoise simulation driven by the model.
/// Returns the saved frames of all replicas back to back.
#[pyfunction]
#[pyo3(signature = (model, init, level=1, integrator="langevin", dt=0.01, n_steps=1000, save_every=10, kt=1.0, friction=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    model: &PyScoreModel,
    init: Vec<f64>,
    level: usize,
    integrator: &str,
    dt: f64,
    n_steps: usize,
    save_every: usize,
    kt: f64,
    friction: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let integrator = match integrator {
        "langevin" => Integrator::Langevin,
        "brownian" => Integrator::Brownian,
        "diffuse-denoise" => Integrator::DiffuseDenoise,
        other => return Err(PyValueError::new_err(format!("unknown integrator {other:?}"))),
    };
    let coords = model.0.config().n_beads * model.0.config().dim;
    if init.is_empty() || !init.len().is_multiple_of(coords) {
        return Err(PyValueError::new_err("init must hold whole frames"));
    }
    let cfg = LangevinConfig {
        kt,
        dt,
        friction,
        n_steps,
        save_every,
        n_replicas: init.len() / coords,
        noise_level: Some(level),
        seed,
        ..LangevinConfig::default()
    };
    py.detach(|| {
        let rep = if integrator == Integrator::DiffuseDenoise {
            run_simulation(Driver::Chain(&model.0), integrator, &init, &cfg, |_, _| {})?
        } else {
            let force = DffForce::new(&model.0, level, kt)?;
            run_simulation(Driver::Force(&force), integrator, &init, &cfg, |_, _| {})?
        };
        Ok(rep.trajectory.to_f64())
    })
    .map_err(py_err)
}

/// Jensen-Shannon divergence (nats) between two scalar samples on a shared grid.
#[pyfunction]
#[pyo3(signature = (a, b, bins=64))]
fn sample_js(a: Vec<f64>, b: Vec<f64>, bins: usize) -> PyResult<f64> {
    dff::analysis::sample_js(&a, &b, bins).map_err(py_err)
}

/// Minimum RMSD over proper rotations and translations.
#[pyfunction]
fn rmsd(frame: Vec<f64>, reference: Vec<f64>, dim: usize) -> PyResult<f64> {
    dff::analysis::rmsd(&frame, &reference, dim).map_err(py_err)
}

#[pymodule]
fn dff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyToySystem>()?;
    m.add_class::<PyScoreModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ancestral_sample, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sample_js, m)?)?;
    m.add_function(wrap_pyfunction!(rmsd, m)?)?;
    Ok(())
}
