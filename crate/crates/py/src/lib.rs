//! Python bindings. Results cross the boundary as JSON-shaped dicts.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::rtensor::pdg::build;
use ::rtensor::frontend::dsl::parse_program;
use ::rtensor::pipeline::{compile as compile_src, run, CompileOptions, Compiled, Error};
use ::rtensor::polysched::dump::dump_schedule;
use ::rtensor::runtime::exec::{CpuBackend, ExecOptions};
use ::rtensor::runtime::oracle::{reference_execute, OracleOptions};

fn to_py(e: Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn from_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A compiled program.
#[pyclass(frozen)]
struct Program {
    inner: Compiled,
}

#[pymethods]
impl Program {
    /// Execute and return `{"bounds": .., "values": ..}`.
    #[pyo3(signature = (bindings=None, seed=0, device_bytes=None))]
    fn run<'py>(&self, py: Python<'py>, bindings: Option<BTreeMap<String, i64>>, seed: u64, device_bytes: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let eo = ExecOptions { bindings: bindings.unwrap_or_default(), seed, device_bytes, ..Default::default() };
        let ex = run(&self.inner, &CpuBackend, &eo).map_err(to_py)?;
        from_json(py, &ex.outputs.to_json().to_string())
    }

    /// Execute and return the run statistics.
    #[pyo3(signature = (bindings=None, seed=0, device_bytes=None))]
    fn stats<'py>(&self, py: Python<'py>, bindings: Option<BTreeMap<String, i64>>, seed: u64, device_bytes: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let eo = ExecOptions { bindings: bindings.unwrap_or_default(), seed, device_bytes, ..Default::default() };
        let ex = run(&self.inner, &CpuBackend, &eo).map_err(to_py)?;
        from_json(py, &ex.stats.to_json())
    }

    fn schedule(&self) -> String {
        dump_schedule(&self.inner.pdg, &self.inner.schedule)
    }

    #[getter]
    fn log(&self) -> Vec<String> {
        self.inner.log.clone()
    }

    #[getter]
    fn phases(&self) -> usize {
        self.inner.schedule.phase_count()
    }
}

#[pyfunction]
#[pyo3(signature = (src, bindings=None, vectorize=true, incrementalize=true, fuse=true, swap_threshold=Some(1 << 20), block_bytes=None))]
fn compile(
    src: &str,
    bindings: Option<BTreeMap<String, i64>>,
    vectorize: bool,
    incrementalize: bool,
    fuse: bool,
    swap_threshold: Option<u64>,
    block_bytes: Option<u64>,
) -> PyResult<Program> {
    let mut o = CompileOptions { bindings: bindings.unwrap_or_default(), swap_threshold, ..Default::default() };
    o.transforms.vectorize = vectorize;
    o.transforms.incrementalize = incrementalize;
    o.transforms.fuse = fuse;
    o.transforms.block_bytes = block_bytes;
    Ok(Program { inner: compile_src(src, &o).map_err(to_py)? })
}

/// Run the reference interpreter on the uncompiled program.
#[pyfunction]
#[pyo3(signature = (src, bindings=None, seed=0))]
fn oracle<'py>(py: Python<'py>, src: &str, bindings: Option<BTreeMap<String, i64>>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let g = parse_program(src).map_err(Error::from).and_then(|p| build(&p).map_err(Error::from)).map_err(to_py)?;
    let o = OracleOptions { bindings: bindings.unwrap_or_default(), seed, ..Default::default() };
    let out = reference_execute(&g, &o).map_err(|e| to_py(Error::from(e)))?;
    from_json(py, &out.to_json().to_string())
}

#[pymodule(name = "rtensor")]
fn rtensor_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Program>()?;
    m.add_function(wrap_pyfunction!(compile, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    Ok(())
}
