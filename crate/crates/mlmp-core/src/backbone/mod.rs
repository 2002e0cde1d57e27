//! Encoder contract shared by every vision-language backbone.
//!
//! A backbone exposes per-block token matrices (CLS token in row 0), a single
//! projection head applied identically to every block's tokens, and the set
//! of normalization scale/shift vectors that test-time adaptation is allowed
//! to update. The text encoder is a separate frozen component whose output is
//! cached in a [`TextBank`] before any adaptation starts.

mod toy;

pub use toy::{make_toy, prototype_text_bank, ToyBackbone, ToyTextEncoder};

use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{MlmpError, Result};
use crate::tensor::Mat;

/// Static geometry of a vision encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneSpec {
    /// Number of transformer blocks.
    pub depth: usize,
    /// Pre-projection token width.
    pub token_dim: usize,
    /// Post-projection embedding width (shared with the text encoder).
    pub embed_dim: usize,
    /// Patch side in pixels.
    pub patch_size: usize,
    /// Expected square input side in pixels.
    pub input_side: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.token_dim < 1 || self.embed_dim < 1 || self.patch_size < 1 {
            return Err(MlmpError::invalid(
                "backbone spec requires depth, token_dim, embed_dim, patch_size >= 1",
            ));
        }
        if self.input_side < self.patch_size {
            return Err(MlmpError::invalid(format!(
                "input side {} smaller than patch size {}",
                self.input_side, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid_side(&self) -> usize {
        self.input_side / self.patch_size
    }

    /// Spatial token count N; every block emits N+1 tokens (CLS first).
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

/// A square RGB input in the backbone's normalization range ([0, 1] for the
/// toy encoder), channel-last.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(MlmpError::shape(
                format!("{height}x{width}x3 = {} values", height * width * 3),
                format!("{} values", data.len()),
            ));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        ImageTensor {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-block token matrices, shallowest block first. Every entry is
/// (N+1) x token_dim with the CLS token in row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTokens {
    layers: Vec<Mat>,
}

impl LayerTokens {
    pub fn new(layers: Vec<Mat>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| MlmpError::invalid("LayerTokens needs at least one layer"))?
            .shape();
        for (i, l) in layers.iter().enumerate() {
            if l.shape() != first {
                return Err(MlmpError::shape(
                    format!("{first:?} for every layer"),
                    format!("{:?} at layer {i}", l.shape()),
                ));
            }
            if !l.is_finite() {
                return Err(MlmpError::NonFinite {
                    context: format!("layer {i} tokens"),
                });
            }
        }
        Ok(LayerTokens { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Full (N+1) x D' token matrix of a block (0-indexed from the shallowest).
    pub fn layer(&self, idx: usize) -> &Mat {
        &self.layers[idx]
    }

    /// Spatial rows of a block (CLS excluded).
    pub fn spatial(&self, idx: usize) -> Mat {
        let l = &self.layers[idx];
        l.slice_rows(1, l.rows() - 1).expect("layer has N+1 rows")
    }

    /// CLS row of a block as a 1 x D' matrix.
    pub fn cls(&self, idx: usize) -> Mat {
        self.layers[idx].slice_rows(0, 1).expect("layer has rows")
    }
}

/// Output of the shared projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTokens(pub Mat);

impl ProjectedTokens {
    pub fn as_mat(&self) -> &Mat {
        &self.0
    }
}

/// Frozen text encoder interface. Encoders must be deterministic.
pub trait TextEncoder {
    fn embed_dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Precomputed text embeddings indexed by (template, class). Immutable after
/// construction; the text encoder is never consulted again.
#[derive(Debug, Clone)]
pub struct TextBank {
    templates: Vec<String>,
    class_names: Vec<String>,
    per_template: Vec<Mat>,
}

impl TextBank {
    /// Validating constructor: every (template, class) pair present and no
    /// zero vectors.
    pub fn new(
        templates: Vec<String>,
        class_names: Vec<String>,
        per_template: Vec<Mat>,
    ) -> Result<Self> {
        if templates.is_empty() || class_names.is_empty() {
            return Err(MlmpError::invalid("text bank needs templates and classes"));
        }
        if per_template.len() != templates.len() {
            return Err(MlmpError::shape(
                format!("{} template matrices", templates.len()),
                format!("{}", per_template.len()),
            ));
        }
        let dim = per_template[0].cols();
        for (t, m) in per_template.iter().enumerate() {
            if m.rows() != class_names.len() || m.cols() != dim {
                return Err(MlmpError::shape(
                    format!("{}x{dim} embeddings", class_names.len()),
                    format!("{:?} at template {t}", m.shape()),
                ));
            }
            for k in 0..m.rows() {
                if m.row(k).iter().map(|v| v * v).sum::<f64>() == 0.0 {
                    return Err(MlmpError::invalid(format!(
                        "zero embedding at template {t}, class {k}"
                    )));
                }
            }
        }
        Ok(TextBank {
            templates,
            class_names,
            per_template,
        })
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.per_template[0].cols()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// K x D embedding matrix for one template.
    pub fn template_matrix(&self, t: usize) -> &Mat {
        &self.per_template[t]
    }

    pub fn embedding(&self, t: usize, k: usize) -> &[f64] {
        self.per_template[t].row(k)
    }

    /// Restricts the bank to a single template (used by the TENT baseline).
    pub fn single_template(&self, t: usize) -> TextBank {
        TextBank {
            templates: vec![self.templates[t].clone()],
            class_names: self.class_names.clone(),
            per_template: vec![self.per_template[t].clone()],
        }
    }
}

/// Fills each template's `{class}` slot with the lowercase class name and
/// encodes every (template, class) pair once.
pub fn encode_texts(
    encoder: &dyn TextEncoder,
    class_names: &[String],
    templates: &[String],
) -> Result<TextBank> {
    if class_names.is_empty() {
        return Err(MlmpError::invalid("class list must be nonempty"));
    }
    if templates.is_empty() {
        return Err(MlmpError::invalid("template list must be nonempty"));
    }
    let mut seen = std::collections::HashSet::new();
    for name in class_names {
        if !seen.insert(name.as_str()) {
            return Err(MlmpError::invalid(format!("duplicate class name {name:?}")));
        }
    }
    let dim = encoder.embed_dim();
    let mut per_template = Vec::with_capacity(templates.len());
    for template in templates {
        if !template.contains("{class}") {
            return Err(MlmpError::invalid(format!(
                "template {template:?} has no {{class}} slot"
            )));
        }
        let mut m = Mat::zeros(class_names.len(), dim);
        for (k, name) in class_names.iter().enumerate() {
            let prompt = template.replace("{class}", &name.to_lowercase());
            let v = encoder.encode(&prompt)?;
            if v.len() != dim {
                return Err(MlmpError::shape(
                    format!("{dim}-dim text embedding"),
                    format!("{}-dim", v.len()),
                ));
            }
            if v.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                return Err(MlmpError::invalid(format!(
                    "text encoder produced a zero vector for {prompt:?}"
                )));
            }
            m.row_mut(k).copy_from_slice(&v);
        }
        per_template.push(m);
    }
    Ok(TextBank {
        templates: templates.to_vec(),
        class_names: class_names.to_vec(),
        per_template,
    })
}

/// Loads a [`TextBank`] from `cache_dir` if a matching entry exists,
/// otherwise encodes and writes it. `encoder_id` must change whenever the
/// encoder's weights change.
pub fn encode_texts_cached(
    cache_dir: Option<&Path>,
    encoder_id: &str,
    encoder: &dyn TextEncoder,
    class_names: &[String],
    templates: &[String],
) -> Result<TextBank> {
    let dir = match cache_dir {
        Some(d) => d,
        None => return encode_texts(encoder, class_names, templates),
    };
    let key = bank_cache_key(encoder_id, encoder.embed_dim(), class_names, templates);
    let path = dir.join(format!("textbank-{key}.json"));
    if let Ok(bytes) = std::fs::read(&path) {
        if let Ok(bank) = bank_from_json(&bytes) {
            return Ok(bank);
        }
    }
    let bank = encode_texts(encoder, class_names, templates)?;
    std::fs::create_dir_all(dir).map_err(|e| MlmpError::io(dir.display().to_string(), e))?;
    std::fs::write(&path, bank_to_json(&bank))
        .map_err(|e| MlmpError::io(path.display().to_string(), e))?;
    Ok(bank)
}

fn bank_cache_key(
    encoder_id: &str,
    dim: usize,
    class_names: &[String],
    templates: &[String],
) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(encoder_id.as_bytes());
    h.update(dim.to_le_bytes());
    for s in templates.iter().chain(class_names) {
        h.update([0xff]);
        h.update(s.as_bytes());
    }
    hex_prefix(&h.finalize(), 16)
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().take(n).map(|b| format!("{b:02x}")).collect()
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BankRepr {
    templates: Vec<String>,
    class_names: Vec<String>,
    embed_dim: usize,
    data: Vec<Vec<f64>>,
}

fn bank_to_json(bank: &TextBank) -> Vec<u8> {
    let repr = BankRepr {
        templates: bank.templates.clone(),
        class_names: bank.class_names.clone(),
        embed_dim: bank.embed_dim(),
        data: bank.per_template.iter().map(|m| m.data().to_vec()).collect(),
    };
    serde_json::to_vec(&repr).expect("bank serializes")
}

fn bank_from_json(bytes: &[u8]) -> Result<TextBank> {
    let repr: BankRepr =
        serde_json::from_slice(bytes).map_err(|e| MlmpError::Serialization(e.to_string()))?;
    let k = repr.class_names.len();
    let mut per_template = Vec::with_capacity(repr.data.len());
    for d in repr.data {
        per_template.push(Mat::from_vec(k, repr.embed_dim, d)?);
    }
    if per_template.len() != repr.templates.len() {
        return Err(MlmpError::Serialization("template count mismatch".into()));
    }
    Ok(TextBank {
        templates: repr.templates,
        class_names: repr.class_names,
        per_template,
    })
}

/// Descriptor of the adaptable normalization parameters: names and lengths in
/// the flattened order used by `read_adaptable` / `write_adaptable`.
#[derive(Debug, Clone)]
pub struct AdaptableParams {
    entries: Vec<(String, usize)>,
}

impl AdaptableParams {
    pub fn new(entries: Vec<(String, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(MlmpError::invalid(
                "model exposes no normalization layers to adapt",
            ));
        }
        Ok(AdaptableParams { entries })
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, l)| l).sum()
    }
}

/// Bit-exact copy of the adaptable parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    values: Vec<f64>,
}

impl ParamSnapshot {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Traced encoding of a batch: per-image, per-block token vars plus the
/// parameter leaves, for gradient computation on a [`Tape`].
pub struct TracedEncoding {
    /// Adaptable parameter leaves, aligned with the `AdaptableParams` entries.
    pub param_vars: Vec<Var>,
    /// `layer_tokens[image][block]` is an (N+1) x D' var.
    pub layer_tokens: Vec<Vec<Var>>,
    /// Backbone-private vars needed by `project_traced` (frozen constants).
    pub aux_vars: Vec<Var>,
}

/// Contract every vision backbone satisfies. Blocks are ordered shallowest
/// first and all share the (N+1) x token_dim shape; `project` applies the
/// final pre-projection normalization followed by the linear head —
/// identical parameters regardless of which block the rows came from.
pub trait VisionBackbone {
    fn spec(&self) -> &BackboneSpec;

    /// Runs the frozen forward pass, returning every block's tokens.
    fn encode_image(&self, image: &ImageTensor) -> Result<LayerTokens>;

    /// Shared projection head on rows of width token_dim.
    fn project(&self, rows: &Mat) -> Result<ProjectedTokens>;

    /// Descriptor of the normalization scale/shift parameters.
    fn adaptable_params(&self) -> Result<AdaptableParams>;

    /// Flattened adaptable values in descriptor order.
    fn read_adaptable(&self) -> Vec<f64>;

    fn write_adaptable(&mut self, values: &[f64]) -> Result<()>;

    fn total_param_count(&self) -> usize;

    /// Forward pass on a tape with the adaptable parameters as gradient
    /// leaves; everything else enters as constants.
    fn forward_traced(&self, tape: &mut Tape, images: &[ImageTensor]) -> Result<TracedEncoding>;

    /// Traced projection head using the same parameter leaves as
    /// `forward_traced` produced in `enc`.
    fn project_traced(&self, tape: &mut Tape, enc: &TracedEncoding, x: Var) -> Result<Var>;
}

pub fn snapshot(model: &dyn VisionBackbone) -> ParamSnapshot {
    ParamSnapshot {
        values: model.read_adaptable(),
    }
}

pub fn restore(model: &mut dyn VisionBackbone, snap: &ParamSnapshot) -> Result<()> {
    model.write_adaptable(&snap.values)
}

/// Projection-only view used by the pure loss/entropy operations.
pub trait Projector {
    fn project_rows(&self, rows: &Mat) -> Result<Mat>;
}

impl Projector for ToyBackbone {
    fn project_rows(&self, rows: &Mat) -> Result<Mat> {
        Ok(self.project(rows)?.0)
    }
}

/// Adapts any closure into a [`Projector`]; handy for oracles in tests.
pub struct FnProjector<F: Fn(&Mat) -> Result<Mat>>(pub F);

impl<F: Fn(&Mat) -> Result<Mat>> Projector for FnProjector<F> {
    fn project_rows(&self, rows: &Mat) -> Result<Mat> {
        (self.0)(rows)
    }
}
