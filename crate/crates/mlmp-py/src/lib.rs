//! Python bindings for the test-time adaptation library: the toy backbone,
//! text banks, the core probability/entropy/fusion operations, and the
//! adapt/predict loop.

use numpy::{PyArray1, PyArray2, PyReadonlyArray1, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mlmp_core::adapt::{Adapter, AdaptConfig, DEFAULT_TEMPLATES};
use mlmp_core::backbone::{
    encode_texts, restore, snapshot, BackboneSpec, ImageTensor, ParamSnapshot, TextBank,
    ToyBackbone as CoreToyBackbone, ToyTextEncoder, VisionBackbone,
};
use mlmp_core::objective;
use mlmp_core::tensor::Mat;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type PredictOutput<'py> = (Bound<'py, PyArray2<u8>>, Bound<'py, PyArray1<f64>>);

fn mat_from_py(a: &PyReadonlyArray2<f64>) -> PyResult<Mat> {
    let arr = a.as_array();
    let (rows, cols) = (arr.nrows(), arr.ncols());
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(arr[[r, c]]);
        }
    }
    Mat::from_vec(rows, cols, data).map_err(err)
}

fn mat_to_py<'py>(py: Python<'py>, m: &Mat) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let rows: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
    PyArray2::from_vec2(py, &rows).map_err(err)
}

fn image_from_py(a: &PyReadonlyArray3<f64>) -> PyResult<ImageTensor> {
    let arr = a.as_array();
    let shape = arr.shape();
    if shape[2] != 3 {
        return Err(PyValueError::new_err("image must be (H, W, 3)"));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(arr[[y, x, c]]);
            }
        }
    }
    ImageTensor::new(h, w, data).map_err(err)
}

/// The seven default prompt templates.
#[pyfunction]
fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

/// Softmax over classes of cosine similarity / tau; rows sum to 1.
#[pyfunction]
fn probability_map<'py>(
    py: Python<'py>,
    features: PyReadonlyArray2<'py, f64>,
    text: PyReadonlyArray2<'py, f64>,
    tau: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let f = mat_from_py(&features)?;
    let t = mat_from_py(&text)?;
    let p = objective::probability_map(&f, &t, tau).map_err(err)?;
    mat_to_py(py, p.probs())
}

/// Mean row entropy in nats (0 log 0 = 0).
#[pyfunction]
fn batch_entropy(probs: PyReadonlyArray2<f64>, tau: f64) -> PyResult<f64> {
    let p = mat_from_py(&probs)?;
    let pm = objective::ProbabilityMap::from_probs(p, tau).map_err(err)?;
    Ok(objective::batch_entropy(&pm))
}

/// Softmax of -beta * entropies; uniform at beta = 0.
#[pyfunction]
fn confidence_weights<'py>(
    py: Python<'py>,
    entropies: PyReadonlyArray1<'py, f64>,
    beta: f64,
) -> PyResult<Bound<'py, PyArray1<f64>>> {
    let h = entropies.as_array().to_vec();
    let fw = objective::confidence_weights(&h, beta).map_err(err)?;
    Ok(PyArray1::from_vec(py, fw.weights().to_vec()))
}

/// Weighted elementwise sum of same-shape token matrices.
#[pyfunction]
fn fuse_layers<'py>(
    py: Python<'py>,
    layers: Vec<PyReadonlyArray2<'py, f64>>,
    weights: PyReadonlyArray1<'py, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let mats: Vec<Mat> = layers
        .iter()
        .map(mat_from_py)
        .collect::<PyResult<_>>()?;
    let w = weights.as_array().to_vec();
    let fused = objective::fuse_layers(&mats, &w).map_err(err)?;
    mat_to_py(py, &fused)
}

/// Precomputed (template, class) text embeddings.
#[pyclass(name = "TextBank")]
struct PyTextBank {
    inner: TextBank,
}

#[pymethods]
impl PyTextBank {
    #[getter]
    fn num_templates(&self) -> usize {
        self.inner.num_templates()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names().to_vec()
    }

    #[getter]
    fn templates(&self) -> Vec<String> {
        self.inner.templates().to_vec()
    }

    /// K x D embedding matrix for one template.
    fn template_matrix<'py>(&self, py: Python<'py>, t: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
        if t >= self.inner.num_templates() {
            return Err(PyValueError::new_err(format!("template {t} out of range")));
        }
        mat_to_py(py, self.inner.template_matrix(t))
    }
}

/// Encodes every (template, class) pair once with the seeded toy text
/// encoder.
#[pyfunction]
#[pyo3(signature = (class_names, templates, embed_dim, seed = 0))]
fn encode_text_bank(
    class_names: Vec<String>,
    templates: Vec<String>,
    embed_dim: usize,
    seed: u64,
) -> PyResult<PyTextBank> {
    let encoder = ToyTextEncoder::new(embed_dim, seed);
    let bank = encode_texts(&encoder, &class_names, &templates).map_err(err)?;
    Ok(PyTextBank { inner: bank })
}

fn adapt_config_from_kwargs(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<AdaptConfig> {
    let mut cfg = AdaptConfig::default();
    let Some(kw) = kwargs else { return Ok(cfg) };
    for (key, value) in kw.iter() {
        let key: String = key.extract()?;
        match key.as_str() {
            "steps" => cfg.steps = value.extract()?,
            "learning_rate" => cfg.learning_rate = value.extract()?,
            "batch_size" => cfg.batch_size = value.extract()?,
            "layer_range" => cfg.layer_range = Some(value.extract()?),
            "tau" => cfg.tau = value.extract()?,
            "beta_adapt" => cfg.beta_adapt = value.extract()?,
            "beta_eval" => cfg.beta_eval = value.extract()?,
            "reset_per_batch" => cfg.reset_per_batch = value.extract()?,
            "seed" => cfg.seed = value.extract()?,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown adaptation option {other:?}"
                )))
            }
        }
    }
    Ok(cfg)
}

/// Seeded deterministic toy vision encoder with adaptable normalization
/// parameters.
#[pyclass(name = "ToyBackbone", unsendable)]
struct PyToyBackbone {
    model: CoreToyBackbone,
    pristine: ParamSnapshot,
}

#[pymethods]
impl PyToyBackbone {
    #[new]
    #[pyo3(signature = (depth = 4, token_dim = 16, embed_dim = 8, patch_size = 4, input_side = 32, seed = 0))]
    fn new(
        depth: usize,
        token_dim: usize,
        embed_dim: usize,
        patch_size: usize,
        input_side: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = BackboneSpec {
            depth,
            token_dim,
            embed_dim,
            patch_size,
            input_side,
        };
        let model = CoreToyBackbone::new(spec, seed).map_err(err)?;
        let pristine = snapshot(&model);
        Ok(PyToyBackbone { model, pristine })
    }

    #[getter]
    fn depth(&self) -> usize {
        self.model.spec().depth
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.model.spec().num_patches()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.model.spec().embed_dim
    }

    fn checksum(&self) -> String {
        self.model.checksum()
    }

    /// Per-block token matrices, each (N+1) x token_dim, CLS in row 0.
    fn encode_image<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f64>,
    ) -> PyResult<Vec<Bound<'py, PyArray2<f64>>>> {
        let img = image_from_py(&image)?;
        let tokens = self.model.encode_image(&img).map_err(err)?;
        (0..tokens.num_layers())
            .map(|l| mat_to_py(py, tokens.layer(l)))
            .collect()
    }

    /// Shared projection head (final norm + linear map).
    fn project<'py>(
        &self,
        py: Python<'py>,
        rows: PyReadonlyArray2<'py, f64>,
    ) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let q = mat_from_py(&rows)?;
        let f = self.model.project(&q).map_err(err)?;
        mat_to_py(py, f.as_mat())
    }

    /// Names of the adaptable normalization tensors.
    fn adaptable_param_names(&self) -> PyResult<Vec<String>> {
        Ok(self
            .model
            .adaptable_params()
            .map_err(err)?
            .names()
            .iter()
            .map(|s| s.to_string())
            .collect())
    }

    fn adaptable_param_count(&self) -> PyResult<usize> {
        Ok(self.model.adaptable_params().map_err(err)?.total_len())
    }

    fn total_param_count(&self) -> usize {
        self.model.total_param_count()
    }

    /// Restores the pristine (construction-time) parameters.
    fn reset(&mut self) -> PyResult<()> {
        restore(&mut self.model, &self.pristine).map_err(err)
    }

    /// Runs one adapted batch (reset, then entropy-descent steps) and
    /// returns the per-step loss trace. Keyword options: steps,
    /// learning_rate, batch_size, layer_range, tau, beta_adapt, beta_eval,
    /// reset_per_batch, seed.
    #[pyo3(signature = (images, bank, **kwargs))]
    fn adapt_batch(
        &mut self,
        images: Vec<PyReadonlyArray3<f64>>,
        bank: &PyTextBank,
        kwargs: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Vec<f64>> {
        let cfg = adapt_config_from_kwargs(kwargs)?;
        let tensors: Vec<ImageTensor> = images
            .iter()
            .map(image_from_py)
            .collect::<PyResult<_>>()?;
        restore(&mut self.model, &self.pristine).map_err(err)?;
        let mut adapter = Adapter::new(&mut self.model);
        let trace = adapter
            .adapt_batch(&tensors, &bank.inner, &cfg, 0)
            .map_err(err)?;
        if trace.aborted {
            return Err(PyValueError::new_err("batch aborted on non-finite loss"));
        }
        Ok(trace.losses)
    }

    /// Predicts one image: returns (class_map uint8 HxW, alpha).
    #[pyo3(signature = (image, bank, **kwargs))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f64>,
        bank: &PyTextBank,
        kwargs: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<PredictOutput<'py>> {
        let cfg = adapt_config_from_kwargs(kwargs)?;
        let img = image_from_py(&image)?;
        let pred = mlmp_core::adapt::predict_with(&self.model, &img, &bank.inner, &cfg)
            .map_err(err)?;
        let rows: Vec<Vec<u8>> = (0..pred.height)
            .map(|y| pred.class_map[y * pred.width..(y + 1) * pred.width].to_vec())
            .collect();
        let class_map = PyArray2::from_vec2(py, &rows).map_err(err)?;
        let alpha = PyArray1::from_vec(py, pred.alpha);
        Ok((class_map, alpha))
    }
}

#[pymodule]
fn mlmp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyToyBackbone>()?;
    m.add_class::<PyTextBank>()?;
    m.add_function(wrap_pyfunction!(default_templates, m)?)?;
    m.add_function(wrap_pyfunction!(probability_map, m)?)?;
    m.add_function(wrap_pyfunction!(batch_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_weights, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_layers, m)?)?;
    m.add_function(wrap_pyfunction!(encode_text_bank, m)?)?;
    Ok(())
}
