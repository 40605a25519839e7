use pyo3::prelude::*;

#[pymodule]
fn lftk_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
