//! Python view of the adapter library.
//!
//! Matrices cross the boundary as row-major nested lists and vectors as flat
//! lists — at desk scale the copy is free and nothing here needs numpy.
//! Method names mirror the Rust API: `forward` is the adapter's own
//! contribution, `layer_forward` adds the frozen base output.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sora::model::dataset_loss0;
use sora::task::{gen_planted_task, planted_model};
use sora::train::{train_epoch, OptimizerKind, OptimizerState, TrainConfig};
use sora::{count_nonzero_params, effective_rank, prune_model, Matrix, SeededRng, Vector};

fn err(e: sora::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(err)
}

fn from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect())
        .collect()
}

fn to_vector(data: Vec<f64>) -> PyResult<Vector> {
    Vector::new(data).map_err(err)
}

/// Shrink every coordinate toward zero by `xi`; anything inside the dead
/// zone lands on an exact 0.0.
#[pyfunction]
fn soft_threshold(x: Vec<f64>, xi: f64) -> PyResult<Vec<f64>> {
    let v = to_vector(x)?;
    Ok(sora::soft_threshold(&v, xi).map_err(err)?.data().to_vec())
}

/// One proximal gate step: gradient move by `eta * d_gate`, then
/// soft-threshold at `eta * lambda`.
#[pyfunction(name = "prox_gate_update")]
fn prox_gate_update_py(
    gate: Vec<f64>,
    d_gate: Vec<f64>,
    eta: f64,
    lambda: f64,
) -> PyResult<Vec<f64>> {
    let g = to_vector(gate)?;
    let d = to_vector(d_gate)?;
    Ok(sora::prox_gate_update(&g, &d, eta, lambda)
        .map_err(err)?
        .data()
        .to_vec())
}

/// Singular values in descending order.
#[pyfunction]
fn svd_values(m: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let m = to_matrix(&m)?;
    Ok(sora::svd_values(&m).map_err(err)?.data().to_vec())
}

/// Count of singular values above `rel_tol` times the largest.
#[pyfunction]
#[pyo3(signature = (m, rel_tol = 1e-8))]
fn numeric_rank(m: Vec<Vec<f64>>, rel_tol: f64) -> PyResult<usize> {
    let m = to_matrix(&m)?;
    sora::numeric_rank(&m, rel_tol).map_err(err)
}

/// A frozen base weight plus a gated low-rank trainable increment.
#[pyclass(name = "SoraAdapter")]
struct PySoraAdapter {
    inner: sora::SoraAdapter,
}

#[pymethods]
impl PySoraAdapter {
    /// Fresh adapter: the down factor is seeded Gaussian, the up factor is
    /// zero, every gate starts at 1.0. `w0` defaults to the zero matrix, so
    /// the module is a pure increment until a base weight is supplied.
    #[new]
    #[pyo3(signature = (p, q, r_max, seed, w0 = None))]
    fn new(p: usize, q: usize, r_max: usize, seed: u64, w0: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let w0 = match w0 {
            Some(rows) => {
                let m = to_matrix(&rows)?;
                if m.rows() != p || m.cols() != q {
                    return Err(PyValueError::new_err(format!(
                        "w0 must be {p}x{q}, got {}x{}",
                        m.rows(),
                        m.cols()
                    )));
                }
                m
            }
            None => Matrix::zeros(p, q),
        };
        let mut rng = SeededRng::new(seed);
        Ok(Self {
            inner: sora::SoraAdapter::init(w0, r_max, &mut rng).map_err(err)?,
        })
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    #[getter]
    fn r_max(&self) -> usize {
        self.inner.r_max()
    }

    /// The adapter's contribution `W_u (g * (W_d x))` for a `q x n` batch.
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(&x)?;
        let (inc, _) = self.inner.forward(&x).map_err(err)?;
        Ok(from_matrix(&inc))
    }

    /// Full layer output `W0 x` plus the adapter contribution.
    fn layer_forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(&x)?;
        let (out, _) = self.inner.layer_forward(&x).map_err(err)?;
        Ok(from_matrix(&out))
    }

    fn gate(&self) -> Vec<f64> {
        self.inner.gate().data().to_vec()
    }

    fn set_gate(&mut self, gate: Vec<f64>) -> PyResult<()> {
        self.inner.set_gate(to_vector(gate)?).map_err(err)
    }

    /// Number of nonzero gates — the rank the increment can actually use.
    fn effective_rank(&self) -> usize {
        effective_rank(&self.inner)
    }

    /// Fold zero gates away into a compact inference-only module.
    fn prune(&self) -> PyPrunedAdapter {
        PyPrunedAdapter {
            inner: sora::prune(&self.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "SoraAdapter(p={}, q={}, r_max={}, effective_rank={})",
            self.inner.p(),
            self.inner.q(),
            self.inner.r_max(),
            effective_rank(&self.inner)
        )
    }
}

/// The compact module produced by pruning: surviving gates folded into the
/// factors, zero rows and columns dropped.
#[pyclass(name = "PrunedAdapter")]
struct PyPrunedAdapter {
    inner: sora::PrunedAdapter,
}

#[pymethods]
impl PyPrunedAdapter {
    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    #[getter]
    fn retained_rank(&self) -> usize {
        self.inner.retained_rank()
    }

    /// The module's contribution for a `q x n` batch (the frozen base output
    /// is not included — it lives with the layer, not the pruned module).
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(&x)?;
        Ok(from_matrix(&self.inner.forward(&x).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "PrunedAdapter(p={}, q={}, retained_rank={})",
            self.inner.p(),
            self.inner.q(),
            self.inner.retained_rank()
        )
    }
}

/// Generate a planted low-rank regression task, train a gated adapter on it,
/// prune, and return the run's metrics in one call.
///
/// Returns a dict with the final train/eval losses, the gate vector, the
/// retained rank, parameter counts before and after pruning, and the task's
/// noise floor for calibration.
#[pyfunction]
#[pyo3(signature = (
    p, q, true_rank, r_max,
    epochs = 300, seed = 0, noise_sigma = 0.01, n_train = 256, n_eval = 256,
    learning_rate = None, lambda_ = None, eta_t = None, batch_size = None,
    optimizer = None, freeze_gates = false,
))]
#[allow(clippy::too_many_arguments)]
fn run_planted(
    py: Python<'_>,
    p: usize,
    q: usize,
    true_rank: usize,
    r_max: usize,
    epochs: usize,
    seed: u64,
    noise_sigma: f64,
    n_train: usize,
    n_eval: usize,
    learning_rate: Option<f64>,
    lambda_: Option<f64>,
    eta_t: Option<f64>,
    batch_size: Option<usize>,
    optimizer: Option<&str>,
    freeze_gates: bool,
) -> PyResult<Py<PyDict>> {
    let mut cfg = TrainConfig {
        epochs,
        seed,
        freeze_gates,
        ..TrainConfig::default()
    };
    if let Some(v) = learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = lambda_ {
        cfg.lambda = v;
    }
    if let Some(v) = eta_t {
        cfg.eta_t = v;
    }
    if let Some(v) = batch_size {
        cfg.batch_size = v;
    }
    if let Some(name) = optimizer {
        cfg.optimizer = match name {
            "plain-sgd" => OptimizerKind::PlainSgd,
            "adaptive-moment" => OptimizerKind::AdaptiveMoment,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown optimizer `{other}` (expected plain-sgd or adaptive-moment)"
                )))
            }
        };
    }
    cfg.validate().map_err(err)?;

    let mut rng = SeededRng::new(seed);
    let task = gen_planted_task(p, q, true_rank, n_train, n_eval, noise_sigma, &mut rng)
        .map_err(err)?;
    let mut model = planted_model(&task, r_max, &mut rng).map_err(err)?;
    let mut opt = OptimizerState::new(&model, cfg.optimizer);

    let mut last_train_loss = f64::NAN;
    for _ in 0..epochs {
        let reports = train_epoch(&mut model, &task.train, &cfg, &mut opt).map_err(err)?;
        if let Some(r) = reports.last() {
            last_train_loss = r.loss0;
        }
    }

    let train_loss = dataset_loss0(&model, &task.train).map_err(err)?;
    let eval_loss = dataset_loss0(&model, &task.eval).map_err(err)?;
    let params_before = count_nonzero_params(&model);
    let pruned = prune_model(&model).map_err(err)?;
    let params_after = count_nonzero_params(&pruned);

    let adapter = match &model.layers()[0].adapter {
        sora::LayerAdapter::Sora(a) => a,
        _ => unreachable!("planted models hold a single gated adapter"),
    };

    let out = PyDict::new(py);
    out.set_item("train_loss", train_loss)?;
    out.set_item("eval_loss", eval_loss)?;
    out.set_item("last_minibatch_loss", last_train_loss)?;
    out.set_item("noise_floor", task.noise_floor())?;
    out.set_item("gate", adapter.gate().data().to_vec())?;
    out.set_item("effective_rank", effective_rank(adapter))?;
    out.set_item("true_rank", true_rank)?;
    out.set_item("nonzero_params", params_before)?;
    out.set_item("nonzero_params_pruned", params_after)?;
    out.set_item("epochs", epochs)?;
    Ok(out.into())
}

#[pymodule]
fn sora_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(prox_gate_update_py, m)?)?;
    m.add_function(wrap_pyfunction!(svd_values, m)?)?;
    m.add_function(wrap_pyfunction!(numeric_rank, m)?)?;
    m.add_function(wrap_pyfunction!(run_planted, m)?)?;
    m.add_class::<PySoraAdapter>()?;
    m.add_class::<PyPrunedAdapter>()?;
    Ok(())
}
