//! Desk-scale transformer backbone with seeded deterministic weights.
//!
//! Structure: linear patch embedding with a learned CLS token and positional
//! table, `depth` pre-norm blocks (single-head attention + GELU MLP), a final
//! norm and a linear projection to the shared embedding width. The whole
//! forward pass is built on the autodiff tape so the plain and traced paths
//! cannot drift apart; `encode_image` simply discards the tape.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{MlmpError, Result};
use crate::tensor::Mat;

use super::{
    AdaptableParams, BackboneSpec, ImageTensor, LayerTokens, ProjectedTokens, TextEncoder,
    TracedEncoding, VisionBackbone,
};

const LN_EPS: f64 = 1e-5;
const MAGIC: &[u8; 8] = b"MLMPTOY1";

#[derive(Debug, Clone)]
struct NormPair {
    gamma: Mat, // 1 x D'
    beta: Mat,  // 1 x D'
}

impl NormPair {
    fn identity(dim: usize) -> Self {
        NormPair {
            gamma: Mat::from_fn(1, dim, |_, _| 1.0),
            beta: Mat::zeros(1, dim),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: NormPair,
    ln2: NormPair,
    wq: Mat,
    bq: Mat,
    wk: Mat,
    bk: Mat,
    wv: Mat,
    bv: Mat,
    wo: Mat,
    bo: Mat,
    w1: Mat,
    b1: Mat,
    w2: Mat,
    b2: Mat,
}

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    spec: BackboneSpec,
    patch_weight: Mat, // (3*s*s) x D'
    patch_bias: Mat,   // 1 x D'
    cls_token: Mat,    // 1 x D'
    pos_embed: Mat,    // (N+1) x D'
    blocks: Vec<Block>,
    final_norm: NormPair,
    proj_weight: Mat, // D' x D
    proj_bias: Mat,   // 1 x D
}

impl ToyBackbone {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dp = spec.token_dim;
        let d = spec.embed_dim;
        let patch_in = 3 * spec.patch_size * spec.patch_size;
        let n = spec.num_patches();
        let hidden = 2 * dp;

        let mut randn = |rows: usize, cols: usize, scale: f64| {
            Mat::from_fn(rows, cols, |_, _| {
                let v: f64 = rng.sample(StandardNormal);
                v * scale
            })
        };

        // residual-dominated blocks: attention and MLP outputs enter the
        // stream at a small scale, so the stream keeps a stable relationship
        // to the patch embedding and normalization parameters retain a
        // well-conditioned, statistics-like role
        let out_scale = 0.1;
        let blocks = (0..spec.depth)
            .map(|_| Block {
                ln1: NormPair::identity(dp),
                ln2: NormPair::identity(dp),
                wq: randn(dp, dp, 1.0 / (dp as f64).sqrt()),
                bq: Mat::zeros(1, dp),
                wk: randn(dp, dp, 1.0 / (dp as f64).sqrt()),
                bk: Mat::zeros(1, dp),
                wv: randn(dp, dp, 1.0 / (dp as f64).sqrt()),
                bv: Mat::zeros(1, dp),
                wo: randn(dp, dp, out_scale / (dp as f64).sqrt()),
                bo: Mat::zeros(1, dp),
                w1: randn(dp, hidden, 1.0 / (dp as f64).sqrt()),
                b1: Mat::zeros(1, hidden),
                w2: randn(hidden, dp, out_scale / (hidden as f64).sqrt()),
                b2: Mat::zeros(1, dp),
            })
            .collect();

        Ok(ToyBackbone {
            patch_weight: randn(patch_in, dp, 1.0 / (patch_in as f64).sqrt()),
            patch_bias: Mat::zeros(1, dp),
            cls_token: randn(1, dp, 0.02),
            pos_embed: randn(n + 1, dp, 0.02),
            blocks,
            final_norm: NormPair::identity(dp),
            proj_weight: randn(dp, d, 1.0 / (dp as f64).sqrt()),
            proj_bias: Mat::zeros(1, d),
            spec,
        })
    }

    /// Flattened patch pixels, row-major over the patch grid; each patch is
    /// [y, x, rgb] in scan order. Shape N x (3*s*s).
    fn patch_matrix(&self, image: &ImageTensor) -> Result<Mat> {
        let side = self.spec.input_side;
        if image.height != side || image.width != side {
            return Err(MlmpError::shape(
                format!("{side}x{side} image"),
                format!("{}x{}", image.height, image.width),
            ));
        }
        let s = self.spec.patch_size;
        let g = self.spec.grid_side();
        let mut m = Mat::zeros(g * g, 3 * s * s);
        for py in 0..g {
            for px in 0..g {
                let row = m.row_mut(py * g + px);
                let mut i = 0;
                for dy in 0..s {
                    for dx in 0..s {
                        for c in 0..3 {
                            row[i] = image.get(py * s + dy, px * s + dx, c);
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(m)
    }

    fn trace_image(&self, tape: &mut Tape, image: &ImageTensor, params: &[Var]) -> Result<Vec<Var>> {
        let patches = self.patch_matrix(image)?;
        let patches = tape.constant(patches);
        let pw = tape.constant(self.patch_weight.clone());
        let pb = tape.constant(self.patch_bias.clone());
        let embedded = tape.matmul(patches, pw)?;
        let embedded = tape.add_row(embedded, pb)?;
        let cls = tape.constant(self.cls_token.clone());
        let tokens = tape.vstack(&[cls, embedded])?;
        let pos = tape.constant(self.pos_embed.clone());
        let mut x = tape.add(tokens, pos)?;

        let scale = 1.0 / (self.spec.token_dim as f64).sqrt();
        let mut layer_vars = Vec::with_capacity(self.spec.depth);
        for (i, block) in self.blocks.iter().enumerate() {
            let (g1, b1n, g2, b2n) = (params[4 * i], params[4 * i + 1], params[4 * i + 2], params[4 * i + 3]);
            let normed = tape.layer_norm(x, g1, b1n, LN_EPS)?;
            let wq = tape.constant(block.wq.clone());
            let bq = tape.constant(block.bq.clone());
            let wk = tape.constant(block.wk.clone());
            let bk = tape.constant(block.bk.clone());
            let wv = tape.constant(block.wv.clone());
            let bv = tape.constant(block.bv.clone());
            let wo = tape.constant(block.wo.clone());
            let bo = tape.constant(block.bo.clone());
            let q = tape.matmul(normed, wq)?;
            let q = tape.add_row(q, bq)?;
            let k = tape.matmul(normed, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul(normed, wv)?;
            let v = tape.add_row(v, bv)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale);
            let att = tape.softmax_rows(scores);
            let ctx = tape.matmul(att, v)?;
            let out = tape.matmul(ctx, wo)?;
            let out = tape.add_row(out, bo)?;
            x = tape.add(x, out)?;

            let normed2 = tape.layer_norm(x, g2, b2n, LN_EPS)?;
            let w1 = tape.constant(block.w1.clone());
            let b1 = tape.constant(block.b1.clone());
            let w2 = tape.constant(block.w2.clone());
            let b2 = tape.constant(block.b2.clone());
            let h = tape.matmul(normed2, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.gelu(h);
            let m = tape.matmul(h, w2)?;
            let m = tape.add_row(m, b2)?;
            x = tape.add(x, m)?;

            layer_vars.push(x);
        }
        Ok(layer_vars)
    }

    /// Every parameter tensor in serialization order.
    fn tensors(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = vec![
            &self.patch_weight,
            &self.patch_bias,
            &self.cls_token,
            &self.pos_embed,
        ];
        for b in &self.blocks {
            v.extend([
                &b.ln1.gamma,
                &b.ln1.beta,
                &b.wq,
                &b.bq,
                &b.wk,
                &b.bk,
                &b.wv,
                &b.bv,
                &b.wo,
                &b.bo,
                &b.ln2.gamma,
                &b.ln2.beta,
                &b.w1,
                &b.b1,
                &b.w2,
                &b.b2,
            ]);
        }
        v.extend([
            &self.final_norm.gamma,
            &self.final_norm.beta,
            &self.proj_weight,
            &self.proj_bias,
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1.gamma,
                &mut b.ln1.beta,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2.gamma,
                &mut b.ln2.beta,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        v.extend([
            &mut self.final_norm.gamma,
            &mut self.final_norm.beta,
            &mut self.proj_weight,
            &mut self.proj_bias,
        ]);
        v
    }

    /// Serializes as a 32-byte header (magic + five u32 spec fields + a
    /// reserved u32) followed by every tensor as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| MlmpError::io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| MlmpError::io(path.display().to_string(), e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for field in [
            self.spec.depth,
            self.spec.token_dim,
            self.spec.embed_dim,
            self.spec.patch_size,
            self.spec.input_side,
        ] {
            out.extend_from_slice(&(field as u32).to_le_bytes());
        }
        out.extend_from_slice(&0u32.to_le_bytes());
        debug_assert_eq!(out.len(), 32);
        for t in self.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f =
            std::fs::File::open(path).map_err(|e| MlmpError::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)
            .map_err(|e| MlmpError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 || &bytes[..8] != MAGIC {
            return Err(MlmpError::Serialization(
                "missing MLMPTOY1 header".into(),
            ));
        }
        let u32_at = |i: usize| {
            u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize
        };
        let spec = BackboneSpec {
            depth: u32_at(0),
            token_dim: u32_at(1),
            embed_dim: u32_at(2),
            patch_size: u32_at(3),
            input_side: u32_at(4),
        };
        let mut model = ToyBackbone::new(spec, 0)?;
        let body = &bytes[32..];
        let mut offset = 0;
        for t in model.tensors_mut() {
            for v in t.data_mut() {
                let end = offset + 8;
                if end > body.len() {
                    return Err(MlmpError::Serialization("truncated weight payload".into()));
                }
                *v = f64::from_le_bytes(body[offset..end].try_into().unwrap());
                offset = end;
            }
        }
        if offset != body.len() {
            return Err(MlmpError::Serialization(format!(
                "payload has {} trailing bytes",
                body.len() - offset
            )));
        }
        Ok(model)
    }

    /// SHA-256 of the serialized form; used for determinism checks.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        super::hex_prefix(&digest, 32)
    }

    fn norm_pairs(&self) -> Vec<(String, &NormPair)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("blocks.{i}.ln1"), &b.ln1));
            v.push((format!("blocks.{i}.ln2"), &b.ln2));
        }
        v.push(("final_norm".to_string(), &self.final_norm));
        v
    }

    fn norm_pairs_mut(&mut self) -> Vec<&mut NormPair> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.ln1);
            v.push(&mut b.ln2);
        }
        v.push(&mut self.final_norm);
        v
    }
}

impl VisionBackbone for ToyBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn encode_image(&self, image: &ImageTensor) -> Result<LayerTokens> {
        let mut tape = Tape::new();
        let enc = self.forward_traced(&mut tape, std::slice::from_ref(image))?;
        let layers = enc.layer_tokens[0]
            .iter()
            .map(|v| tape.value(*v).clone())
            .collect();
        LayerTokens::new(layers)
    }

    fn project(&self, rows: &Mat) -> Result<ProjectedTokens> {
        if rows.cols() != self.spec.token_dim {
            return Err(MlmpError::shape(
                format!("{} token width", self.spec.token_dim),
                format!("{}", rows.cols()),
            ));
        }
        let normed = crate::tensor::layer_norm_rows(
            rows,
            &self.final_norm.gamma,
            &self.final_norm.beta,
            LN_EPS,
        )?;
        let projected = normed.matmul(&self.proj_weight)?.add_row(&self.proj_bias)?;
        Ok(ProjectedTokens(projected))
    }

    fn adaptable_params(&self) -> Result<AdaptableParams> {
        let mut entries = Vec::new();
        for (name, pair) in self.norm_pairs() {
            entries.push((format!("{name}.weight"), pair.gamma.data().len()));
            entries.push((format!("{name}.bias"), pair.beta.data().len()));
        }
        AdaptableParams::new(entries)
    }

    fn read_adaptable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, pair) in self.norm_pairs() {
            out.extend_from_slice(pair.gamma.data());
            out.extend_from_slice(pair.beta.data());
        }
        out
    }

    fn write_adaptable(&mut self, values: &[f64]) -> Result<()> {
        let expected: usize = self
            .norm_pairs()
            .iter()
            .map(|(_, p)| p.gamma.data().len() + p.beta.data().len())
            .sum();
        if values.len() != expected {
            return Err(MlmpError::shape(
                format!("{expected} adaptable values"),
                format!("{}", values.len()),
            ));
        }
        let mut offset = 0;
        for pair in self.norm_pairs_mut() {
            let g = pair.gamma.data_mut();
            g.copy_from_slice(&values[offset..offset + g.len()]);
            offset += g.len();
            let b = pair.beta.data_mut();
            b.copy_from_slice(&values[offset..offset + b.len()]);
            offset += b.len();
        }
        Ok(())
    }

    fn total_param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    fn forward_traced(&self, tape: &mut Tape, images: &[ImageTensor]) -> Result<TracedEncoding> {
        if images.is_empty() {
            return Err(MlmpError::invalid("traced forward needs at least one image"));
        }
        let mut param_vars = Vec::new();
        for b in &self.blocks {
            param_vars.push(tape.param(b.ln1.gamma.clone()));
            param_vars.push(tape.param(b.ln1.beta.clone()));
            param_vars.push(tape.param(b.ln2.gamma.clone()));
            param_vars.push(tape.param(b.ln2.beta.clone()));
        }
        let final_gamma = tape.param(self.final_norm.gamma.clone());
        let final_beta = tape.param(self.final_norm.beta.clone());
        param_vars.push(final_gamma);
        param_vars.push(final_beta);

        let proj_w = tape.constant(self.proj_weight.clone());
        let proj_b = tape.constant(self.proj_bias.clone());

        let mut layer_tokens = Vec::with_capacity(images.len());
        for image in images {
            layer_tokens.push(self.trace_image(tape, image, &param_vars)?);
        }
        Ok(TracedEncoding {
            param_vars,
            layer_tokens,
            aux_vars: vec![proj_w, proj_b],
        })
    }

    fn project_traced(&self, tape: &mut Tape, enc: &TracedEncoding, x: Var) -> Result<Var> {
        let n = enc.param_vars.len();
        let (gamma, beta) = (enc.param_vars[n - 2], enc.param_vars[n - 1]);
        let normed = tape.layer_norm(x, gamma, beta, LN_EPS)?;
        let projected = tape.matmul(normed, enc.aux_vars[0])?;
        tape.add_row(projected, enc.aux_vars[1])
    }
}

/// Deterministic hash-to-vector text encoder. Each prompt string is digested
/// together with the seed and expanded into a unit-scale gaussian vector, so
/// distinct prompts get distinct, reproducible embeddings. Counts every
/// invocation so tests can assert the bank is reused.
pub struct ToyTextEncoder {
    embed_dim: usize,
    seed: u64,
    calls: AtomicUsize,
}

impl ToyTextEncoder {
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        ToyTextEncoder {
            embed_dim,
            seed,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Identifier for the text-bank cache; changes with seed or width.
    pub fn encoder_id(&self) -> String {
        format!("toy-text-{}-{}", self.seed, self.embed_dim)
    }
}

impl TextEncoder for ToyTextEncoder {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha20Rng::from_seed(seed);
        Ok((0..self.embed_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect())
    }
}

/// Builds the seeded toy backbone together with its matching text encoder.
pub fn make_toy(spec: BackboneSpec, seed: u64) -> Result<(ToyBackbone, ToyTextEncoder)> {
    let model = ToyBackbone::new(spec, seed)?;
    let text = ToyTextEncoder::new(spec.embed_dim, seed);
    Ok((model, text))
}

/// Builds an aligned text bank from labeled clean samples: each class
/// embedding is the mean projected patch feature of that class under the
/// uniform multi-level fusion of `layer_range`, and each extra template adds
/// a small seeded perturbation. This is the desk-scale stand-in for the
/// vision-text alignment a pretrained VLM brings, so the toy model produces
/// meaningful zero-shot predictions.
pub fn prototype_text_bank(
    model: &ToyBackbone,
    samples: &[crate::data::SegSample],
    class_names: &[String],
    layer_range: (usize, usize),
    num_templates: usize,
    jitter: f64,
    seed: u64,
) -> Result<super::TextBank> {
    use super::VisionBackbone;
    if samples.is_empty() || num_templates == 0 {
        return Err(MlmpError::invalid(
            "prototype bank needs samples and at least one template",
        ));
    }
    let spec = *model.spec();
    let k_count = class_names.len();
    let dim = spec.embed_dim;
    let s = spec.patch_size as u32;
    let g = spec.grid_side() as u32;
    let (lo, hi) = layer_range;

    let mut sums = Mat::zeros(k_count, dim);
    let mut counts = vec![0usize; k_count];
    for sample in samples {
        if sample.image.width() as usize != spec.input_side
            || sample.image.height() as usize != spec.input_side
        {
            return Err(MlmpError::shape(
                format!("{0}x{0} samples", spec.input_side),
                format!("{:?}", sample.image.dimensions()),
            ));
        }
        let tokens = model.encode_image(&super::ImageTensor::from_rgb(&sample.image))?;
        let layers: Vec<Mat> = ((lo - 1)..hi).map(|l| tokens.spatial(l)).collect();
        let uniform = vec![1.0 / layers.len() as f64; layers.len()];
        let fused = crate::objective::fuse_layers(&layers, &uniform)?;
        let projected = model.project(&fused)?.0;
        for py in 0..g {
            for px in 0..g {
                // majority label over the patch footprint, ignore excluded
                let mut votes = vec![0usize; k_count];
                for dy in 0..s {
                    for dx in 0..s {
                        let v = sample.label.get_pixel(px * s + dx, py * s + dy).0[0];
                        if (v as usize) < k_count {
                            votes[v as usize] += 1;
                        }
                    }
                }
                let (class, &n) = votes
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &n)| n)
                    .expect("nonempty votes");
                if n == 0 {
                    continue;
                }
                let row = projected.row((py * g + px) as usize);
                for (acc, &v) in sums.row_mut(class).iter_mut().zip(row) {
                    *acc += v;
                }
                counts[class] += 1;
            }
        }
    }
    for k in 0..k_count {
        if counts[k] == 0 {
            return Err(MlmpError::invalid(format!(
                "class {:?} never appears in the prototype samples",
                class_names[k]
            )));
        }
        for v in sums.row_mut(k) {
            *v /= counts[k] as f64;
        }
    }

    let mut per_template = Vec::with_capacity(num_templates);
    let mut templates = Vec::with_capacity(num_templates);
    for t in 0..num_templates {
        templates.push(format!("prototype:{t}"));
        if t == 0 {
            per_template.push(sums.clone());
            continue;
        }
        let mut m = sums.clone();
        for k in 0..k_count {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update((t as u64).to_le_bytes());
            h.update((k as u64).to_le_bytes());
            let digest = h.finalize();
            let mut rng_seed = [0u8; 32];
            rng_seed.copy_from_slice(&digest);
            let mut rng = ChaCha20Rng::from_seed(rng_seed);
            let norm = m.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in m.row_mut(k) {
                let n: f64 = rng.sample(StandardNormal);
                *v += jitter * norm * n;
            }
        }
        per_template.push(m);
    }
    super::TextBank::new(templates, class_names.to_vec(), per_template)
}
