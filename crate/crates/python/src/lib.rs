//! Python bindings: tensors, attention post-processing, losses, metrics, and the
//! train/evaluate entry points.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hiermine::data::manifest::{load_manifest, save_manifest};
use hiermine::data::{generate_synthetic, BinaryMask, BoxAnnotation, LabelSet, SyntheticConfig};
use hiermine::evaluation::{self, LocalizationCriterion};
use hiermine::losses;
use hiermine::model::heads::{self as heads_mod, AttentionMap, AttentionStage};
use hiermine::numerics::{self, Tape};
use hiermine::pipeline::{self, load_checkpoint, TrainConfig};

fn to_py(e: hiermine::Error) -> PyErr {
    match e {
        hiermine::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn labels_from(rows: Vec<Vec<u8>>) -> PyResult<Vec<LabelSet>> {
    rows.into_iter().map(|y| LabelSet::new(y).map_err(to_py)).collect()
}

/// Dense f64 array with an explicit shape.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: numerics::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: numerics::Tensor::new(&shape, data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let file = std::fs::File::open(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self {
            inner: numerics::Tensor::read_htsr(std::io::BufReader::new(file)).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, self.inner.to_htsr_bytes()).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Binary pixel region on an `height x width` grid.
#[pyclass(name = "Region", from_py_object)]
#[derive(Clone)]
pub struct PyRegion {
    inner: hiermine::data::Region,
}

#[pymethods]
impl PyRegion {
    #[new]
    fn new(height: usize, width: usize, pixels: Vec<bool>) -> PyResult<Self> {
        Ok(Self {
            inner: hiermine::data::Region::from_pixels(height, width, pixels).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_box(x: usize, y: usize, w: usize, h: usize, height: usize, width: usize) -> Self {
        let b = BoxAnnotation { class_id: 0, x, y, w, h };
        Self {
            inner: hiermine::data::Region::from_box(&b, height, width),
        }
    }

    #[getter]
    fn area(&self) -> usize {
        self.inner.area()
    }

    #[getter]
    fn pixels(&self) -> Vec<bool> {
        self.inner.pixels().to_vec()
    }

    fn iou(&self, other: &PyRegion) -> f64 {
        evaluation::iou(&self.inner, &other.inner)
    }

    /// Intersection over this (predicted) region.
    fn ior(&self, truth: &PyRegion) -> f64 {
        evaluation::ior(&self.inner, &truth.inner)
    }
}

fn attention(t: &PyTensor, stage: AttentionStage) -> PyResult<AttentionMap> {
    let s = t.inner.shape();
    if s.len() != 3 {
        return Err(PyValueError::new_err(format!("expected [K,H,W], got {s:?}")));
    }
    let spatial = (s[1], s[2]);
    AttentionMap::new(t.inner.clone(), stage, spatial, spatial).map_err(to_py)
}

/// Per-class min-max rescale of raw `[K,H,W]` maps.
#[pyfunction]
fn normalize_map(raw: &PyTensor) -> PyResult<PyTensor> {
    let m = attention(raw, AttentionStage::Raw)?.normalize().map_err(to_py)?;
    Ok(PyTensor { inner: m.maps().clone() })
}

#[pyfunction]
#[pyo3(signature = (normalized, alpha = heads_mod::SOFT_MASK_ALPHA, beta = heads_mod::SOFT_MASK_BETA))]
fn soft_mask(normalized: &PyTensor, alpha: f64, beta: f64) -> PyResult<PyTensor> {
    let m = attention(normalized, AttentionStage::Normalized)?.soft_mask(alpha, beta).map_err(to_py)?;
    Ok(PyTensor { inner: m.maps().clone() })
}

/// Boxes `(x, y, w, h)` and the union region of components above the threshold.
#[pyfunction]
#[pyo3(signature = (map, class_id = 0, bin_threshold = evaluation::DEFAULT_BIN_THRESHOLD, min_area = evaluation::DEFAULT_MIN_AREA))]
fn attention_to_regions(
    map: &PyTensor,
    class_id: usize,
    bin_threshold: f64,
    min_area: usize,
) -> PyResult<(Vec<(usize, usize, usize, usize)>, PyRegion)> {
    let r = evaluation::attention_to_regions(&map.inner, class_id, bin_threshold, min_area).map_err(to_py)?;
    let boxes = r.boxes.iter().map(|b| (b.x, b.y, b.w, b.h)).collect();
    Ok((boxes, PyRegion { inner: r.mask }))
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    evaluation::auc(&scores, &labels).map_err(to_py)
}

fn map_pair_loss(
    m_p: &PyTensor,
    m_a: &PyTensor,
    labels: Vec<Vec<u8>>,
    f: fn(&mut Tape, numerics::Var, numerics::Var, &[LabelSet], f64, f64) -> hiermine::Result<numerics::Var>,
) -> PyResult<f64> {
    let labels = labels_from(labels)?;
    let mut t = Tape::new();
    let p = t.constant(m_p.inner.clone());
    let a = t.constant(m_a.inner.clone());
    let l = f(&mut t, p, a, &labels, heads_mod::SOFT_MASK_ALPHA, heads_mod::SOFT_MASK_BETA).map_err(to_py)?;
    Ok(t.value(l).item())
}

/// Bound loss over normalized `m_p: [N,1,h,w]`, `m_a: [N,D,h,w]`.
#[pyfunction]
fn bound_loss(m_p: &PyTensor, m_a: &PyTensor, labels: Vec<Vec<u8>>) -> PyResult<f64> {
    map_pair_loss(m_p, m_a, labels, losses::bound_loss)
}

#[pyfunction]
fn union_loss(m_p: &PyTensor, m_a: &PyTensor, labels: Vec<Vec<u8>>) -> PyResult<f64> {
    map_pair_loss(m_p, m_a, labels, losses::union_loss)
}

/// AMSE over soft-masked maps `[N,D,H,W]` with `masks[n][k]` optional regions.
#[pyfunction]
fn amse_loss(soft: &PyTensor, masks: Vec<Vec<Option<PyRegion>>>, labels: Vec<Vec<u8>>) -> PyResult<f64> {
    let labels = labels_from(labels)?;
    let masks: Vec<Vec<Option<BinaryMask>>> = masks
        .into_iter()
        .map(|row| {
            row.into_iter()
                .enumerate()
                .map(|(k, r)| r.map(|r| BinaryMask { class_id: k, region: r.inner }))
                .collect()
        })
        .collect();
    let mut t = Tape::new();
    let s = t.constant(soft.inner.clone());
    let l = losses::amse_loss_soft(&mut t, s, &masks, &labels).map_err(to_py)?;
    Ok(t.value(l).item())
}

/// A trained network loaded from a checkpoint directory.
#[pyclass(name = "Model")]
pub struct PyModel {
    model: hiermine::model::Model,
    flags: hiermine::model::ArchFlags,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (model, manifest) = load_checkpoint(&checkpoint).map_err(to_py)?;
        Ok(Self {
            model,
            flags: manifest.config.ablation_flags.arch(),
        })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    /// Per image: class probabilities and soft-masked `[D,H,W]` attention at image size.
    fn predict(&self, images: &PyTensor) -> PyResult<Vec<(Vec<f64>, PyTensor)>> {
        let outs = self.model.predict(&images.inner, self.flags).map_err(to_py)?;
        outs.into_iter()
            .map(|h| {
                let att = h
                    .abnormality_attention
                    .upsample_to_image()
                    .and_then(|m| m.soft_mask(heads_mod::SOFT_MASK_ALPHA, heads_mod::SOFT_MASK_BETA))
                    .map_err(to_py)?;
                Ok((h.abnormality_probabilities(), PyTensor { inner: att.maps().clone() }))
            })
            .collect()
    }
}

/// Writes a synthetic manifest and returns the number of samples.
#[pyfunction]
#[pyo3(signature = (out, count, seed = 0, annotated_fraction = 0.1, positive_fraction = 0.6))]
fn generate_data(out: PathBuf, count: usize, seed: u64, annotated_fraction: f64, positive_fraction: f64) -> PyResult<usize> {
    let samples = generate_synthetic(&SyntheticConfig {
        count,
        seed,
        annotated_fraction,
        positive_fraction,
        ..SyntheticConfig::default()
    })
    .map_err(to_py)?;
    save_manifest(&out, &samples).map_err(to_py)?;
    Ok(samples.len())
}

/// Trains on a manifest with a JSON config (defaults fill missing fields); returns
/// the per-step total loss.
#[pyfunction]
#[pyo3(signature = (manifest, out, config_json = "{}"))]
fn train(manifest: PathBuf, out: PathBuf, config_json: &str) -> PyResult<Vec<f64>> {
    let cfg: TrainConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let samples = load_manifest(&manifest).map_err(to_py)?;
    let outcome = pipeline::train(&samples, &cfg, Some(&out)).map_err(to_py)?;
    Ok(outcome.log.iter().map(|s| s.breakdown.total).collect())
}

/// Report CSV for a checkpoint on a manifest.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, tiou = vec![0.1], tior = vec![0.25], bin_threshold = evaluation::DEFAULT_BIN_THRESHOLD))]
fn evaluate(checkpoint: PathBuf, manifest: PathBuf, tiou: Vec<f64>, tior: Vec<f64>, bin_threshold: f64) -> PyResult<String> {
    let (model, cp) = load_checkpoint(&checkpoint).map_err(to_py)?;
    let samples = load_manifest(&manifest).map_err(to_py)?;
    let mut criteria = Vec::new();
    for t in tiou {
        criteria.push(LocalizationCriterion::iou(t).map_err(to_py)?);
    }
    for t in tior {
        criteria.push(LocalizationCriterion::ior(t).map_err(to_py)?);
    }
    let rep = evaluation::evaluate(&model, cp.config.ablation_flags.arch(), &samples, &criteria, bin_threshold, None)
        .map_err(to_py)?;
    Ok(rep.to_csv())
}

#[pymodule]
fn hiermine_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyRegion>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(normalize_map, m)?)?;
    m.add_function(wrap_pyfunction!(soft_mask, m)?)?;
    m.add_function(wrap_pyfunction!(attention_to_regions, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(bound_loss, m)?)?;
    m.add_function(wrap_pyfunction!(union_loss, m)?)?;
    m.add_function(wrap_pyfunction!(amse_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
