//! Python bindings over the core pipeline: dataset generation, the two
//! training stages, embedding, and 10-fold verification.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fspfm_core::checkpoint::Checkpoint;
use fspfm_core::config::Config;
use fspfm_core::eval;
use fspfm_core::pipeline;
use fspfm_core::synth::{self, Dataset, Split};
use fspfm_core::train;

fn err(e: fspfm_core::Error) -> PyErr {
    PyValueError::new_err(format!("[{}] {e}", e.class()))
}

#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    /// Parse a "key = value" configuration text over the defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: Config::parse(text).map_err(err)? })
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn lambda_weight(&self) -> f64 {
        self.inner.lambda
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, digest={})", self.inner.seed, &self.inner.digest()[..12])
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn identity(&self, index: usize) -> PyResult<usize> {
        self.sample(index).map(|s| s.identity)
    }

    fn pose(&self, index: usize) -> PyResult<(f64, f64, f64)> {
        self.sample(index).map(|s| (s.pose.yaw, s.pose.pitch, s.pose.roll))
    }

    fn observation(&self, index: usize) -> PyResult<Vec<f64>> {
        self.sample(index).map(|s| s.observation.data().to_vec())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        synth::save_dataset(&self.inner, std::path::Path::new(path)).map_err(err)
    }
}

impl PyDataset {
    fn sample(&self, index: usize) -> PyResult<&synth::Sample> {
        self.inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sample index {index} out of range")))
    }
}

#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: Checkpoint,
    cfg: Config,
}

#[pymethods]
impl PyCheckpoint {
    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(err)
    }

    fn stage(&self) -> String {
        format!("{:?}", self.inner.meta.stage).to_lowercase()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.store.names().map(str::to_string).collect()
    }

    /// Embedding of one dataset sample, optionally frontalized.
    #[pyo3(signature = (dataset, index, use_fspfm = true))]
    fn embed(&self, dataset: &PyDataset, index: usize, use_fspfm: bool) -> PyResult<Vec<f64>> {
        let sample = dataset.sample(index)?;
        let nets = match self.inner.meta.stage {
            fspfm_core::Stage::Pretrain => eval::EvalNets::stage1(),
            fspfm_core::Stage::Finetune => eval::EvalNets::stage2(),
        };
        let world = dataset.inner.world();
        eval::embed(&self.inner.store, nets.pick(sample), &world, &self.cfg, sample, use_fspfm)
            .map(|t| t.data().to_vec())
            .map_err(err)
    }

    /// Mean 10-fold verification accuracy on the given split of a dataset.
    #[pyo3(signature = (dataset, split, use_fspfm = true))]
    fn verify(&self, dataset: &PyDataset, split: &str, use_fspfm: bool) -> PyResult<f64> {
        let split = match split {
            "frontal" => Split::FrontalFrontal,
            "cross-pose" => Split::CrossPose,
            other => {
                return Err(PyValueError::new_err(format!(
                    "split must be 'frontal' or 'cross-pose', got '{other}'"
                )))
            }
        };
        let nets = match self.inner.meta.stage {
            fspfm_core::Stage::Pretrain => eval::EvalNets::stage1(),
            fspfm_core::Stage::Finetune => eval::EvalNets::stage2(),
        };
        let world = dataset.inner.world();
        let pairs = synth::make_verification_pairs(
            &dataset.inner,
            split,
            self.cfg.n_pairs,
            fspfm_core::rng::mix(self.cfg.seed, 0xEE),
        )
        .map_err(err)?;
        let scores = eval::score_pairs(
            &self.inner.store,
            &nets,
            &world,
            &self.cfg,
            &dataset.inner,
            &pairs,
            use_fspfm,
        )
        .map_err(err)?;
        let result = eval::verify_10fold(
            &pairs,
            &scores,
            fspfm_core::rng::mix(self.cfg.seed, 0xFD),
            "py",
        )
        .map_err(err)?;
        Ok(result.mean_accuracy)
    }
}

#[pyfunction]
fn make_train_dataset(config: &PyConfig) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: synth::make_dataset(&config.inner.train_spec()).map_err(err)? })
}

#[pyfunction]
fn make_eval_dataset(config: &PyConfig) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: synth::make_dataset(&config.inner.eval_spec()).map_err(err)? })
}

#[pyfunction]
fn load_dataset(path: &str) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: synth::load_dataset(std::path::Path::new(path)).map_err(err)? })
}

#[pyfunction]
fn pretrain(dataset: &PyDataset, config: &PyConfig) -> PyResult<PyCheckpoint> {
    let (ckpt, _) = train::pretrain(&dataset.inner, &config.inner, train::PretrainOptions::default())
        .map_err(err)?;
    Ok(PyCheckpoint { inner: ckpt, cfg: config.inner.clone() })
}

#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, config, attention = true))]
fn finetune(
    checkpoint: &PyCheckpoint,
    dataset: &PyDataset,
    config: &PyConfig,
    attention: bool,
) -> PyResult<PyCheckpoint> {
    let store = train::clone_nets(&checkpoint.inner, &config.inner).map_err(err)?;
    let pairs = synth::make_finetune_pairs(&dataset.inner, synth::PROFILE_MIN_ANGLE).map_err(err)?;
    let (ckpt, _) = train::finetune(
        store,
        &dataset.inner,
        &pairs,
        &config.inner,
        train::FinetuneOptions { attention_enabled: attention },
    )
    .map_err(err)?;
    Ok(PyCheckpoint { inner: ckpt, cfg: config.inner.clone() })
}

#[pyfunction]
fn load_checkpoint(path: &str, config: &PyConfig) -> PyResult<PyCheckpoint> {
    Ok(PyCheckpoint {
        inner: Checkpoint::load(std::path::Path::new(path)).map_err(err)?,
        cfg: config.inner.clone(),
    })
}

/// Max relative finite-difference error per trainable composite.
#[pyfunction]
#[pyo3(signature = (seed = 42))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64)>> {
    Ok(fspfm_core::gradcheck::gradcheck_all(seed)
        .map_err(err)?
        .into_iter()
        .map(|r| (r.name, r.max_rel_err))
        .collect())
}

/// Run one ablation arm end to end; returns (frontal, cross-pose) accuracy.
#[pyfunction]
fn run_arm(config: &PyConfig, arm: &str) -> PyResult<(f64, f64)> {
    let arm = pipeline::Arm::ALL
        .iter()
        .copied()
        .find(|a| a.name() == arm)
        .ok_or_else(|| {
            let names: Vec<&str> = pipeline::Arm::ALL.iter().map(|a| a.name()).collect();
            PyValueError::new_err(format!("unknown arm '{arm}'; one of {names:?}"))
        })?;
    let result = pipeline::run_arm(&config.inner, arm).map_err(err)?;
    Ok((result.frontal.mean_accuracy, result.cross_pose.mean_accuracy))
}

#[pymodule]
fn fspfm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(make_train_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(make_eval_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_arm, m)?)?;
    Ok(())
}
