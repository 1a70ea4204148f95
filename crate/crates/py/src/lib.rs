//! Python bindings: partition and budget arithmetic, prompt composition,
//! synthetic tasks and metrics.

use accept_core::factorization::{self as fz, BudgetSpec, PromptDims, ScaleSpec};
use accept_core::taskbench::{self as tb, Label, MetricName, TaskKind};
use num_bigint::BigUint;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: accept_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Width `t = d / K` of each subspace; raises when K does not divide d.
#[pyfunction]
fn validate_partition(d: usize, k: usize) -> PyResult<usize> {
    fz::validate_partition(d, k).map_err(py_err)
}

/// Trainable parameters of one component: `r*d + r*positions*K`.
#[pyfunction]
fn param_count(r: u64, d: u64, positions: u64, k: u64) -> u64 {
    fz::param_count(r, d, positions, k)
}

/// Largest codebook size whose parameter count fits the budget.
#[pyfunction]
fn solve_rank(budget: u64, d: u64, positions: u64, k: u64) -> PyResult<u64> {
    Ok(fz::solve_rank(&BudgetSpec::new(budget, d, positions, k).map_err(py_err)?))
}

#[pyfunction]
fn codeword_capacity(r: u64, k: u32) -> BigUint {
    fz::codeword_capacity(r, k)
}

/// `K` codebooks of `r` codewords, each of width `t`.
#[pyclass(frozen, skip_from_py_object)]
struct Codebook(fz::Codebook<f64>);

#[pymethods]
impl Codebook {
    #[new]
    fn new(k: usize, r: usize, t: usize, entries: Vec<f64>) -> PyResult<Self> {
        fz::Codebook::new(k, r, t, entries).map(Self).map_err(py_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn r(&self) -> usize {
        self.0.r()
    }

    #[getter]
    fn t(&self) -> usize {
        self.0.t()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    /// Flat entries in `(K, r, t)` order.
    #[getter]
    fn entries(&self) -> Vec<f64> {
        self.0.entries().to_vec()
    }

    fn codeword(&self, k: usize, j: usize) -> PyResult<Vec<f64>> {
        if k >= self.0.k() || j >= self.0.r() {
            return Err(PyValueError::new_err(format!("codeword ({k}, {j}) out of range")));
        }
        Ok(self.0.codeword(k, j).to_vec())
    }

    fn __len__(&self) -> usize {
        self.0.num_params()
    }

    fn __repr__(&self) -> String {
        format!("Codebook(K={}, r={}, t={})", self.0.k(), self.0.r(), self.0.t())
    }
}

/// Combination weights of shape `(positions, K, r)`.
#[pyclass(frozen, skip_from_py_object)]
struct WeightSet(fz::WeightSet<f64>);

#[pymethods]
impl WeightSet {
    #[new]
    fn new(positions: usize, k: usize, r: usize, entries: Vec<f64>) -> PyResult<Self> {
        fz::WeightSet::new(positions, k, r, entries).map(Self).map_err(py_err)
    }

    /// Weights selecting codeword `i` for position `i` in every subspace (`r == positions`).
    #[staticmethod]
    fn one_hot(positions: usize, k: usize) -> Self {
        Self(fz::WeightSet::one_hot(positions, k))
    }

    #[getter]
    fn positions(&self) -> usize {
        self.0.positions()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn r(&self) -> usize {
        self.0.r()
    }

    #[getter]
    fn entries(&self) -> Vec<f64> {
        self.0.entries().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.num_params()
    }

    fn __repr__(&self) -> String {
        format!("WeightSet(positions={}, K={}, r={})", self.0.positions(), self.0.k(), self.0.r())
    }
}

/// Gaussian codebook and weights whose composed entries have std `target_std`.
#[pyfunction]
#[pyo3(signature = (positions, d, k, r, seed, target_std = 0.5))]
fn init_random(
    positions: usize,
    d: usize,
    k: usize,
    r: usize,
    seed: u64,
    target_std: f64,
) -> PyResult<(Codebook, WeightSet)> {
    let dims = PromptDims { positions, d, k, r };
    let (c, w) = fz::init_random::<f64>(&dims, seed, &ScaleSpec { target_std }).map_err(py_err)?;
    Ok((Codebook(c), WeightSet(w)))
}

/// Composed prompt rows, one list of length `d` per position.
#[pyfunction]
fn compose(codebook: &Codebook, weights: &WeightSet) -> PyResult<Vec<Vec<f64>>> {
    let p = fz::compose(&codebook.0, &weights.0).map_err(py_err)?;
    Ok((0..p.positions()).map(|i| p.row(i).to_vec()).collect())
}

fn task_kind(name: &str) -> PyResult<TaskKind> {
    TaskKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown task {name:?}")))
}

/// `(tokens, label)` pairs; labels are ints for classification, floats for regression.
#[pyfunction]
fn gen_task(
    py: Python<'_>,
    kind: &str,
    vocab_size: usize,
    length: usize,
    n: usize,
    seed: u64,
) -> PyResult<Vec<(Vec<usize>, Py<PyAny>)>> {
    let ds = tb::gen_task(task_kind(kind)?, vocab_size, length, n, seed).map_err(py_err)?;
    ds.examples
        .into_iter()
        .map(|ex| {
            let label = match ex.label {
                Label::Class(c) => c.into_pyobject(py)?.into_any().unbind(),
                Label::Value(v) => v.into_pyobject(py)?.into_any().unbind(),
            };
            Ok((ex.tokens, label))
        })
        .collect()
}

/// One of `accuracy`, `f1_binary`, `matthews`, `pearson`.
#[pyfunction]
fn metric(name: &str, predictions: Vec<f64>, golds: Vec<f64>) -> PyResult<f64> {
    let name = MetricName::parse(name).map_err(py_err)?;
    tb::metric(name, &predictions, &golds).map_err(py_err)
}

/// `(mean, population std, n)` over per-seed results.
#[pyfunction]
fn fewshot_report(values: Vec<f64>) -> PyResult<(f64, f64, usize)> {
    let s = tb::fewshot_report(&values).map_err(py_err)?;
    Ok((s.mean, s.std, s.n))
}

#[pymodule(name = "accept")]
fn accept_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Codebook>()?;
    m.add_class::<WeightSet>()?;
    m.add_function(wrap_pyfunction!(validate_partition, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(solve_rank, m)?)?;
    m.add_function(wrap_pyfunction!(codeword_capacity, m)?)?;
    m.add_function(wrap_pyfunction!(init_random, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(gen_task, m)?)?;
    m.add_function(wrap_pyfunction!(metric, m)?)?;
    m.add_function(wrap_pyfunction!(fewshot_report, m)?)?;
    Ok(())
}
