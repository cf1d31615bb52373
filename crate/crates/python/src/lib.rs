//! Python bindings: synthetic data, training, model IO, inference, sampling
//! and metrics. Matrices cross the boundary as lists of rows.

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ltvae::datagen::{ancestral_sample, generate_synthetic as gen, SyntheticSpec};
use ltvae::evaluation::{clustering_accuracy as acc, facet_assignments, facet_nmi as nmi, importance_loglik};
use ltvae::neural::Head;
use ltvae::rng::seeded;
use ltvae::search::bic_score;
use ltvae::training::{encode_means, train as train_model, TrainConfig};
use ltvae::{CliqueTree, LtvaeModel};

fn to_py_err(e: ltvae::Error) -> PyErr {
    match e {
        ltvae::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// A trained model: latent tree plus encoder and decoder.
#[pyclass(name = "Model", module = "ltvae_py")]
struct PyModel {
    inner: LtvaeModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        LtvaeModel::load(std::path::Path::new(path))
            .map(|inner| PyModel { inner })
            .map_err(to_py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(to_py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        LtvaeModel::from_json(text).map(|inner| PyModel { inner }).map_err(to_py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Facet summary such as `0:2<->[0, 1] 3:2<0>[2, 3]`.
    #[getter]
    fn structure(&self) -> String {
        self.inner.structure.describe()
    }

    /// `(id, cardinality, parent id or None)` per latent.
    #[getter]
    fn latents(&self) -> Vec<(u32, usize, Option<u32>)> {
        self.inner
            .structure
            .latents
            .iter()
            .map(|l| (l.id.0, l.card, l.parent.map(|p| p.0)))
            .collect()
    }

    /// `(id, code dimensions, parent id)` per pouch.
    #[getter]
    fn pouches(&self) -> Vec<(u32, Vec<usize>, u32)> {
        self.inner
            .structure
            .pouches
            .iter()
            .map(|p| (p.id.0, p.vars.clone(), p.parent.0))
            .collect()
    }

    #[getter]
    fn z_dim(&self) -> usize {
        self.inner.vae.z_dim()
    }

    /// Encoder means.
    fn encode(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x)?;
        if x.ncols() != self.inner.vae.x_dim() {
            return Err(PyValueError::new_err("wrong number of columns"));
        }
        Ok(rows(&encode_means(&self.inner.vae, x.view())))
    }

    /// Decoder outputs on the data scale.
    fn decode(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let z = matrix(z)?;
        if z.ncols() != self.inner.vae.z_dim() {
            return Err(PyValueError::new_err("wrong number of columns"));
        }
        Ok(rows(&self.inner.vae.decode_mean(z.view())))
    }

    /// `log p_S(z)` per row.
    fn loglik_z(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let ct = CliqueTree::new(&self.inner.structure);
        z.iter()
            .map(|row| ct.loglik(&self.inner.params, row).map_err(to_py_err))
            .collect()
    }

    /// BIC of the latent tree on the given codes.
    fn bic(&self, z: Vec<Vec<f64>>) -> PyResult<f64> {
        let z = matrix(z)?;
        bic_score(&self.inner.structure, &self.inner.params, z.view()).map_err(to_py_err)
    }

    /// Hard facet assignments of the data, `{latent id: labels}`.
    fn cluster<'py>(&self, py: Python<'py>, x: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let z = matrix(self.encode(x)?)?;
        let facets = facet_assignments(&self.inner.structure, &self.inner.params, z.view()).map_err(to_py_err)?;
        let out = PyDict::new(py);
        for f in facets {
            out.set_item(f.latent.0, f.hard)?;
        }
        Ok(out)
    }

    /// Per-row importance-sampled loglikelihood `L_k`.
    #[pyo3(signature = (x, k=5000, seed=0))]
    fn importance_loglik(&self, x: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Vec<f64>> {
        let x = matrix(x)?;
        let mut rng = seeded(seed);
        importance_loglik(&self.inner, x.view(), k, &mut rng).map_err(to_py_err)
    }

    /// Ancestral samples as `(z, x)`.
    #[pyo3(signature = (n, seed=0))]
    fn sample(&self, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = seeded(seed);
        let s = ancestral_sample(&self.inner, n, &mut rng);
        (rows(&s.z), rows(&s.x))
    }

    fn __repr__(&self) -> String {
        format!("Model({})", self.inner.structure.describe())
    }
}

/// The two-facet synthetic benchmark as a dict with `x`, `z`, `labels1`
/// and `labels2`.
#[pyfunction]
#[pyo3(signature = (n=5000, seed=0))]
fn generate_synthetic(py: Python<'_>, n: usize, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let data = gen(&SyntheticSpec {
        n_samples: n,
        seed,
        ..SyntheticSpec::default()
    });
    let out = PyDict::new(py);
    out.set_item("x", rows(&data.x))?;
    out.set_item("z", rows(&data.z))?;
    out.set_item("labels1", data.labels1)?;
    out.set_item("labels2", data.labels2)?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (
    x, z_dim=4, seed=0, hidden=vec![64, 32], head="bernoulli", epochs_per_round=5,
    max_rounds=20, pretrain_epochs=50, structure_search=true
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    z_dim: usize,
    seed: u64,
    hidden: Vec<usize>,
    head: &str,
    epochs_per_round: usize,
    max_rounds: usize,
    pretrain_epochs: usize,
    structure_search: bool,
) -> PyResult<PyModel> {
    let x = matrix(x)?;
    let head: Head = head.parse().map_err(to_py_err)?;
    let config = TrainConfig {
        z_dim,
        hidden,
        head,
        epochs_per_round,
        max_rounds,
        pretrain_epochs,
        structure_search,
        seed,
        ..TrainConfig::default()
    };
    let state = py.detach(|| train_model(x.view(), &config)).map_err(to_py_err)?;
    Ok(PyModel { inner: state.model })
}

#[pyfunction]
fn clustering_accuracy(pred: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    acc(&pred, &truth).map_err(to_py_err)
}

/// NMI between two facets from per-datum soft posteriors.
#[pyfunction]
fn facet_nmi(post1: Vec<Vec<f64>>, post2: Vec<Vec<f64>>) -> PyResult<f64> {
    if post1.len() != post2.len() {
        return Err(PyValueError::new_err("posterior lists differ in length"));
    }
    Ok(nmi(&post1, &post2))
}

#[pymodule]
fn ltvae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(clustering_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(facet_nmi, m)?)?;
    Ok(())
}
