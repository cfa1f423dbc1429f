use critembed_core::embedding::{
    sample_compatible, validate_compatibility, EmbeddingSpec, IndexMapping,
};
use critembed_core::experiment::{run_two_stage, TwoStageConfig};
use critembed_core::landscape::{analyze_point, dof_verify, truly_bad_screen};
use critembed_core::network::{
    forward, Activation, Dataset, EmpiricalRisk, Mse, NetShape, ParamFile, ParamTuple,
};
use critembed_core::numerics::seeded_rng;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn activation(name: &str) -> PyResult<Activation> {
    name.parse().map_err(err)
}

/// Serializes through JSON into plain Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn dataset(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<Dataset> {
    Dataset::new(inputs, targets).map_err(err)
}

/// Parameters of a fully connected network together with its activation.
#[pyclass(module = "critembed", from_py_object)]
#[derive(Clone)]
struct Network {
    theta: ParamTuple,
    activation: Activation,
}

#[pymethods]
impl Network {
    /// Gaussian parameters with standard deviation `scale`.
    #[staticmethod]
    #[pyo3(signature = (widths, scale = 1.0, seed = 0, activation = "tanh"))]
    fn random(widths: Vec<usize>, scale: f64, seed: u64, activation: &str) -> PyResult<Self> {
        let shape = NetShape::new(widths).map_err(err)?;
        let theta = ParamTuple::random_normal(&shape, scale, &mut seeded_rng(seed));
        Ok(Network {
            theta,
            activation: self::activation(activation)?,
        })
    }

    /// Parses a parameter file (`{"widths", "activation", "layers"}`).
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let file: ParamFile = serde_json::from_str(text).map_err(err)?;
        let (theta, activation) = file.into_parts().map_err(err)?;
        Ok(Network { theta, activation })
    }

    #[staticmethod]
    #[pyo3(signature = (widths, vector, activation = "tanh"))]
    fn from_vector(widths: Vec<usize>, vector: Vec<f64>, activation: &str) -> PyResult<Self> {
        let shape = NetShape::new(widths).map_err(err)?;
        let theta = ParamTuple::from_vector(&shape, &vector).map_err(err)?;
        Ok(Network {
            theta,
            activation: self::activation(activation)?,
        })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ParamFile::new(&self.theta, self.activation))
            .expect("serializable")
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.theta.shape().widths().to_vec()
    }

    #[getter]
    fn activation(&self) -> &'static str {
        self.activation.name()
    }

    fn param_count(&self) -> usize {
        self.theta.shape().param_count()
    }

    fn to_vector(&self) -> Vec<f64> {
        self.theta.to_vector()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        forward(&self.theta, self.activation, &x).map_err(err)
    }

    /// Mean squared error over the samples.
    fn risk(&self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<f64> {
        let data = dataset(inputs, targets)?;
        EmpiricalRisk::new(self.activation, &Mse, &data)
            .risk(&self.theta)
            .map_err(err)
    }

    fn gradient(&self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let data = dataset(inputs, targets)?;
        EmpiricalRisk::new(self.activation, &Mse, &data)
            .gradient(&self.theta)
            .map_err(err)
    }

    /// Applies an embedding spec given as JSON text.
    fn embed(&self, spec: &str) -> PyResult<Network> {
        let spec: EmbeddingSpec = serde_json::from_str(spec).map_err(err)?;
        Ok(Network {
            theta: spec.apply(&self.theta).map_err(err)?,
            activation: self.activation,
        })
    }

    /// Hessian spectrum, inertia, classification and `H⁽²⁾` norms.
    fn analyze<'py>(
        &self,
        py: Python<'py>,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let data = dataset(inputs, targets)?;
        let risk = EmpiricalRisk::new(self.activation, &Mse, &data);
        let rec = analyze_point(&risk, &self.theta).map_err(err)?;
        let summary = serde_json::json!({
            "risk": rec.risk,
            "gradient_inf_norm": rec.gradient_inf_norm,
            "zero_tol": rec.zero_tol,
            "eigenvalues": rec.hessian.eigenvalues,
            "inertia": rec.hessian.inertia,
            "classification": rec.classification,
            "h2_max": rec.hessian.h2.max_abs(),
            "h2_upper_max": rec.hessian.h2_upper.max_abs(),
        });
        to_py(py, &summary)
    }

    /// Truly-bad screen; a strict-saddle witness is included when found.
    #[pyo3(signature = (inputs, targets, h2_tol = 1e-6))]
    fn screen<'py>(
        &self,
        py: Python<'py>,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        h2_tol: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let data = dataset(inputs, targets)?;
        let risk = EmpiricalRisk::new(self.activation, &Mse, &data);
        let rec = analyze_point(&risk, &self.theta).map_err(err)?;
        to_py(py, &truly_bad_screen(&risk, &rec, h2_tol).map_err(err)?)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(widths={}, activation={})",
            self.theta.shape(),
            self.activation
        )
    }
}

/// A general compatible embedding for an index map, as spec JSON text.
#[pyfunction]
#[pyo3(signature = (index_map, activation = "tanh", seed = 0))]
fn sample_embedding(index_map: Vec<Vec<usize>>, activation: &str, seed: u64) -> PyResult<String> {
    let map = IndexMapping::new(index_map).map_err(err)?;
    let emb = sample_compatible(&map, self::activation(activation)?, seed).map_err(err)?;
    serde_json::to_string(&EmbeddingSpec::General(emb)).map_err(err)
}

/// Residuals of the compatibility conditions for a spec applied to `widths`.
#[pyfunction]
#[pyo3(signature = (spec, widths, activation = "tanh", tol = 1e-8))]
fn check_compatibility<'py>(
    py: Python<'py>,
    spec: &str,
    widths: Vec<usize>,
    activation: &str,
    tol: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let spec: EmbeddingSpec = serde_json::from_str(spec).map_err(err)?;
    let narrow = NetShape::new(widths).map_err(err)?;
    let emb = spec.presentation(&narrow).map_err(err)?;
    to_py(
        py,
        &validate_compatibility(&emb, self::activation(activation)?, tol).map_err(err)?,
    )
}

#[pyfunction]
#[pyo3(signature = (index_map, activation = "tanh", seeds = vec![0, 1, 2]))]
fn dof<'py>(
    py: Python<'py>,
    index_map: Vec<Vec<usize>>,
    activation: &str,
    seeds: Vec<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let map = IndexMapping::new(index_map).map_err(err)?;
    to_py(
        py,
        &dof_verify(&map, self::activation(activation)?, &seeds).map_err(err)?,
    )
}

/// Runs the two-stage experiment; `config` is JSON text, missing fields take
/// their defaults.
#[pyfunction]
#[pyo3(signature = (config = "{}"))]
fn two_stage<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TwoStageConfig = serde_json::from_str(config).map_err(err)?;
    let rep = py.detach(|| run_two_stage(&cfg)).map_err(err)?;
    to_py(py, &rep)
}

#[pymodule]
#[pyo3(name = "critembed")]
fn critembed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(sample_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(check_compatibility, m)?)?;
    m.add_function(wrap_pyfunction!(dof, m)?)?;
    m.add_function(wrap_pyfunction!(two_stage, m)?)?;
    Ok(())
}
