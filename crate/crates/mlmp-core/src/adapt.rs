//! Test-time adaptation engine: per-batch reset, entropy-descent steps on the
//! normalization parameters, and adapted prediction (plain and sliding
//! window).
//!
//! Each batch starts from the pristine parameter snapshot with fresh
//! optimizer state, so batches are fully independent. The adaptation loss is
//! built on the autodiff tape through the backbone's traced forward pass; a
//! non-finite loss aborts the batch and restores the snapshot, never leaving
//! a corrupted model behind.

use crate::autodiff::{Tape, Var};
use crate::backbone::{
    restore, snapshot, ImageTensor, ParamSnapshot, TextBank, VisionBackbone,
};
use crate::error::{MlmpError, Result};
use crate::imgproc::bilinear_upsample;
use crate::objective::{batch_entropy, confidence_weights, probability_map};
use crate::tensor::Mat;

/// The seven general-purpose prompt templates used by default.
pub const DEFAULT_TEMPLATES: [&str; 7] = [
    "itap of a {class}",
    "a bad photo of the {class}.",
    "a origami {class}.",
    "a photo of the large {class}.",
    "a {class} in a video game.",
    "art of the {class}.",
    "a photo of the small {class}.",
];

/// Template used when a method needs exactly one prompt (the TENT baseline).
pub const SINGLE_TEMPLATE: &str = "a photo of a {class}";

/// Full adaptation recipe. Defaults follow the evaluation protocol: 10 Adam
/// steps at a constant 1e-3 on batches of 2, the 7 default templates, logit
/// scale 100 (tau = 0.01), uniform layer weighting during adaptation
/// (beta = 0) and entropy-sharpened weighting at evaluation (beta = 1).
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Inclusive 1-indexed block interval; `None` selects the last 75% of
    /// blocks (`ceil(L/4)+1 ..= L`).
    pub layer_range: Option<(usize, usize)>,
    pub templates: Vec<String>,
    pub tau: f64,
    pub beta_adapt: f64,
    pub beta_eval: f64,
    pub reset_per_batch: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 10,
            learning_rate: 1e-3,
            batch_size: 2,
            layer_range: None,
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
            tau: 0.01,
            beta_adapt: 0.0,
            beta_eval: 1.0,
            reset_per_batch: true,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(MlmpError::invalid("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(MlmpError::invalid("batch_size must be >= 1"));
        }
        if self.tau <= 0.0 {
            return Err(MlmpError::invalid("tau must be > 0"));
        }
        if self.templates.is_empty() {
            return Err(MlmpError::invalid("templates must be nonempty"));
        }
        if let Some((lo, hi)) = self.layer_range {
            if lo < 1 || hi > depth || lo > hi {
                return Err(MlmpError::invalid(format!(
                    "layer range {lo}..={hi} outside [1, {depth}]"
                )));
            }
        }
        Ok(())
    }

    /// Resolved 1-indexed inclusive block interval.
    pub fn resolved_layer_range(&self, depth: usize) -> (usize, usize) {
        match self.layer_range {
            Some(r) => r,
            None => ((depth.div_ceil(4) + 1).min(depth), depth),
        }
    }
}

/// Adam with the protocol's fixed moment decay (0.9, 0.999) and eps 1e-8.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grads[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Which entropy objective drives the gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    /// Fused multi-level spatial entropy plus image-level entropy, averaged
    /// over all templates.
    MultiLevelMultiPrompt,
    /// Final-layer spatial entropy only, single template (TENT adapted to
    /// spatial tokens).
    FinalLayerOnly,
}

/// Per-batch adaptation record: the loss value before each step plus one
/// final evaluation, and whether the batch was aborted on a non-finite loss.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub batch_id: usize,
    pub losses: Vec<f64>,
    pub aborted: bool,
}

/// Dense prediction for one image: per-pixel class indices, the per-class
/// score volume that produced them, and the layer weights used.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Row-major H x W class indices.
    pub class_map: Vec<u8>,
    /// Class-major K x H x W mean class probabilities.
    pub scores: Vec<f64>,
    /// Evaluation-time layer weights (sums to 1).
    pub alpha: Vec<f64>,
}

impl Prediction {
    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        self.class_map[y * self.width + x]
    }

    pub fn score_plane(&self, k: usize) -> &[f64] {
        &self.scores[k * self.height * self.width..(k + 1) * self.height * self.width]
    }
}

/// Owns a model for the duration of a run, holding the pristine parameter
/// snapshot that every batch resets to.
pub struct Adapter<'m, B: VisionBackbone> {
    model: &'m mut B,
    pristine: ParamSnapshot,
}

impl<'m, B: VisionBackbone> Adapter<'m, B> {
    pub fn new(model: &'m mut B) -> Self {
        let pristine = snapshot(model);
        Adapter { model, pristine }
    }

    pub fn model(&self) -> &B {
        self.model
    }

    pub fn pristine(&self) -> &ParamSnapshot {
        &self.pristine
    }

    /// Adapts on one batch with the full multi-level multi-prompt objective.
    pub fn adapt_batch(
        &mut self,
        images: &[ImageTensor],
        bank: &TextBank,
        cfg: &AdaptConfig,
        batch_id: usize,
    ) -> Result<BatchTrace> {
        self.run_adaptation(images, bank, cfg, batch_id, Objective::MultiLevelMultiPrompt)
    }

    /// TENT baseline: entropy of the final layer's spatial tokens only.
    /// Requires a single-template bank.
    pub fn tent_adapt_batch(
        &mut self,
        images: &[ImageTensor],
        bank: &TextBank,
        cfg: &AdaptConfig,
        batch_id: usize,
    ) -> Result<BatchTrace> {
        if bank.num_templates() != 1 {
            return Err(MlmpError::invalid(
                "the final-layer-only objective takes exactly one template",
            ));
        }
        self.run_adaptation(images, bank, cfg, batch_id, Objective::FinalLayerOnly)
    }

    fn run_adaptation(
        &mut self,
        images: &[ImageTensor],
        bank: &TextBank,
        cfg: &AdaptConfig,
        batch_id: usize,
        objective: Objective,
    ) -> Result<BatchTrace> {
        let depth = self.model.spec().depth;
        cfg.validate(depth)?;
        if images.is_empty() {
            return Err(MlmpError::invalid("empty batch"));
        }
        if cfg.reset_per_batch {
            restore(self.model, &self.pristine)?;
        }
        let layer_range = match objective {
            Objective::MultiLevelMultiPrompt => cfg.resolved_layer_range(depth),
            Objective::FinalLayerOnly => (depth, depth),
        };

        let mut params = self.model.read_adaptable();
        let mut adam = Adam::new(cfg.learning_rate, params.len());
        let mut losses = Vec::with_capacity(cfg.steps + 1);

        for _ in 0..cfg.steps {
            let mut tape = Tape::new();
            let enc = self.model.forward_traced(&mut tape, images)?;
            let loss_var =
                self.traced_loss(&mut tape, &enc, bank, cfg, layer_range, objective)?;
            let loss = tape.scalar(loss_var);
            if !loss.is_finite() {
                restore(self.model, &self.pristine)?;
                return Ok(BatchTrace {
                    batch_id,
                    losses,
                    aborted: true,
                });
            }
            losses.push(loss);

            let grads = tape.backward(loss_var)?;
            let mut grad_flat = Vec::with_capacity(params.len());
            for pv in &enc.param_vars {
                let g = grads.get(*pv, tape.value(*pv));
                grad_flat.extend_from_slice(g.data());
            }
            adam.step(&mut params, &grad_flat);
            self.model.write_adaptable(&params)?;
        }

        // closing evaluation at the adapted parameters
        let mut tape = Tape::new();
        let enc = self.model.forward_traced(&mut tape, images)?;
        let loss_var = self.traced_loss(&mut tape, &enc, bank, cfg, layer_range, objective)?;
        let final_loss = tape.scalar(loss_var);
        if !final_loss.is_finite() {
            restore(self.model, &self.pristine)?;
            return Ok(BatchTrace {
                batch_id,
                losses,
                aborted: true,
            });
        }
        losses.push(final_loss);

        Ok(BatchTrace {
            batch_id,
            losses,
            aborted: false,
        })
    }

    /// Builds the adaptation loss on the tape.
    ///
    /// Per template: the batch entropy of the fused spatial tokens (layers
    /// weighted by confidence at `beta_adapt`), plus — for the full
    /// objective — the image-level entropy of the final-layer CLS token.
    /// The per-template losses are averaged.
    fn traced_loss(
        &self,
        tape: &mut Tape,
        enc: &crate::backbone::TracedEncoding,
        bank: &TextBank,
        cfg: &AdaptConfig,
        layer_range: (usize, usize),
        objective: Objective,
    ) -> Result<Var> {
        let n = self.model.spec().num_patches();
        let b = enc.layer_tokens.len();
        let depth = self.model.spec().depth;
        let (lo, hi) = layer_range;
        let n_layers = hi - lo + 1;

        // normalized text matrices enter the tape as constants
        let texts: Vec<Var> = (0..bank.num_templates())
            .map(|t| {
                let normed = bank.template_matrix(t).l2_normalize_rows()?;
                Ok(tape.constant(normed))
            })
            .collect::<Result<_>>()?;

        // spatial token slices, projected lazily per template as needed
        let mut spatial: Vec<Vec<Var>> = Vec::with_capacity(b);
        for tokens in &enc.layer_tokens {
            let mut per_layer = Vec::with_capacity(n_layers);
            for &layer in &tokens[(lo - 1)..hi] {
                per_layer.push(tape.slice_rows(layer, 1, n)?);
            }
            spatial.push(per_layer);
        }

        let mut template_losses = Vec::with_capacity(bank.num_templates());
        for &text in &texts {
            // fusion weights for this template
            let alpha: FusionAlpha = if cfg.beta_adapt == 0.0 {
                FusionAlpha::Uniform(1.0 / n_layers as f64)
            } else {
                let mut hs = Vec::with_capacity(n_layers);
                for l in 0..n_layers {
                    let mut sums = Vec::with_capacity(b);
                    for img in spatial.iter() {
                        let f = self.model.project_traced(tape, enc, img[l])?;
                        let fn_ = tape.l2_normalize_rows(f)?;
                        let logits = tape.matmul_nt(fn_, text)?;
                        let logits = tape.scale(logits, 1.0 / cfg.tau);
                        sums.push(tape.softmax_entropy_sum(logits));
                    }
                    let total = tape.add_many(&sums)?;
                    hs.push(tape.scale(total, 1.0 / (b * n) as f64));
                }
                FusionAlpha::OnTape(softmax_scalars(tape, &hs, -cfg.beta_adapt)?)
            };

            // fused spatial entropy over the batch
            let mut spatial_sums = Vec::with_capacity(b);
            for img in spatial.iter() {
                let fused = match &alpha {
                    FusionAlpha::Uniform(w) => {
                        let scaled: Vec<Var> = img.iter().map(|&q| tape.scale(q, *w)).collect();
                        tape.add_many(&scaled)?
                    }
                    FusionAlpha::OnTape(ws) => {
                        let weighted: Result<Vec<Var>> = img
                            .iter()
                            .zip(ws)
                            .map(|(&q, &w)| tape.scalar_mul(w, q))
                            .collect();
                        tape.add_many(&weighted?)?
                    }
                };
                let f = self.model.project_traced(tape, enc, fused)?;
                let fn_ = tape.l2_normalize_rows(f)?;
                let logits = tape.matmul_nt(fn_, text)?;
                let logits = tape.scale(logits, 1.0 / cfg.tau);
                spatial_sums.push(tape.softmax_entropy_sum(logits));
            }
            let spatial_total = tape.add_many(&spatial_sums)?;
            let mut loss_t = tape.scale(spatial_total, 1.0 / (b * n) as f64);

            if objective == Objective::MultiLevelMultiPrompt {
                // image-level entropy of the final-layer CLS token
                let mut cls_sums = Vec::with_capacity(b);
                for tokens in &enc.layer_tokens {
                    let cls = tape.slice_rows(tokens[depth - 1], 0, 1)?;
                    let f = self.model.project_traced(tape, enc, cls)?;
                    let fn_ = tape.l2_normalize_rows(f)?;
                    let logits = tape.matmul_nt(fn_, text)?;
                    let logits = tape.scale(logits, 1.0 / cfg.tau);
                    cls_sums.push(tape.softmax_entropy_sum(logits));
                }
                let cls_total = tape.add_many(&cls_sums)?;
                let ile = tape.scale(cls_total, 1.0 / b as f64);
                loss_t = tape.add(loss_t, ile)?;
            }
            template_losses.push(loss_t);
        }
        let total = tape.add_many(&template_losses)?;
        Ok(tape.scale(total, 1.0 / bank.num_templates() as f64))
    }

    /// Predicts a batch with shared batch-wise layer weights (Eq.-style
    /// batch entropies at `beta_eval`); for a single image this degenerates
    /// to per-image weights.
    pub fn predict_batch(
        &self,
        images: &[ImageTensor],
        bank: &TextBank,
        cfg: &AdaptConfig,
    ) -> Result<Vec<Prediction>> {
        predict_batch_with(self.model, images, bank, cfg)
    }

    pub fn predict(
        &self,
        image: &ImageTensor,
        bank: &TextBank,
        cfg: &AdaptConfig,
    ) -> Result<Prediction> {
        predict_with(self.model, image, bank, cfg)
    }

    pub fn sliding_window_predict(
        &self,
        image: &ImageTensor,
        bank: &TextBank,
        cfg: &AdaptConfig,
        window: usize,
        stride: usize,
    ) -> Result<Prediction> {
        sliding_window_predict_with(self.model, image, bank, cfg, window, stride)
    }
}

enum FusionAlpha {
    Uniform(f64),
    OnTape(Vec<Var>),
}

/// Softmax over 1x1 scalar vars, `exp(scale * h_i) / sum`, with a
/// value-level max shift (shift invariance keeps gradients exact).
fn softmax_scalars(tape: &mut Tape, hs: &[Var], scale: f64) -> Result<Vec<Var>> {
    let scaled: Vec<Var> = hs.iter().map(|&h| tape.scale(h, scale)).collect();
    let max = scaled
        .iter()
        .map(|&s| tape.scalar(s))
        .fold(f64::NEG_INFINITY, f64::max);
    let shift = tape.constant(Mat::from_vec(1, 1, vec![-max])?);
    let exps: Vec<Var> = scaled
        .iter()
        .map(|&s| {
            let sh = tape.add(s, shift)?;
            Ok(tape.exp(sh))
        })
        .collect::<Result<_>>()?;
    let sum = tape.add_many(&exps)?;
    let inv = tape.recip(sum);
    exps.iter().map(|&e| tape.mul(e, inv)).collect()
}

/// Free-function prediction on a frozen model (no adaptation state needed).
pub fn predict_with<B: VisionBackbone + ?Sized>(
    model: &B,
    image: &ImageTensor,
    bank: &TextBank,
    cfg: &AdaptConfig,
) -> Result<Prediction> {
    let mut out = predict_batch_with(model, std::slice::from_ref(image), bank, cfg)?;
    Ok(out.pop().expect("one prediction per image"))
}

pub fn predict_batch_with<B: VisionBackbone + ?Sized>(
    model: &B,
    images: &[ImageTensor],
    bank: &TextBank,
    cfg: &AdaptConfig,
) -> Result<Vec<Prediction>> {
    let depth = model.spec().depth;
    cfg.validate(depth)?;
    if images.is_empty() {
        return Err(MlmpError::invalid("empty batch"));
    }
    let k = bank.num_classes();
    if k > 255 {
        return Err(MlmpError::invalid(format!(
            "{k} classes exceed the u8 class-map limit"
        )));
    }
    let (lo, hi) = cfg.resolved_layer_range(depth);
    let n_layers = hi - lo + 1;
    let t_count = bank.num_templates();

    let encodings: Vec<_> = images
        .iter()
        .map(|img| model.encode_image(img))
        .collect::<Result<_>>()?;

    // batch-stacked spatial tokens per selected layer
    let mut stacked: Vec<Mat> = Vec::with_capacity(n_layers);
    for l in (lo - 1)..hi {
        let per_image: Vec<Mat> = encodings.iter().map(|e| e.spatial(l)).collect();
        let refs: Vec<&Mat> = per_image.iter().collect();
        stacked.push(Mat::vstack(&refs)?);
    }

    // batch-wise layer entropies, averaged over templates
    let mut entropies = vec![0.0; n_layers];
    for (l, q) in stacked.iter().enumerate() {
        let f = model.project(q)?.0;
        for t in 0..t_count {
            let p = probability_map(&f, bank.template_matrix(t), cfg.tau)?;
            entropies[l] += batch_entropy(&p);
        }
        entropies[l] /= t_count as f64;
    }
    let fw = confidence_weights(&entropies, cfg.beta_eval)?;
    let alpha = fw.weights().to_vec();

    let mut predictions = Vec::with_capacity(images.len());
    for (img, enc) in images.iter().zip(&encodings) {
        let per_layer: Vec<Mat> = ((lo - 1)..hi).map(|l| enc.spatial(l)).collect();
        let fused = crate::objective::fuse_layers(&per_layer, &alpha)?;
        let f = model.project(&fused)?.0;
        let n = f.rows();
        let mut scores = Mat::zeros(n, k);
        for t in 0..t_count {
            let p = probability_map(&f, bank.template_matrix(t), cfg.tau)?;
            for (acc, &v) in scores.data_mut().iter_mut().zip(p.probs().data()) {
                *acc += v / t_count as f64;
            }
        }
        predictions.push(scores_to_prediction(
            model,
            img.height,
            img.width,
            &scores,
            alpha.clone(),
        )?);
    }
    Ok(predictions)
}

fn scores_to_prediction<B: VisionBackbone + ?Sized>(
    model: &B,
    height: usize,
    width: usize,
    patch_scores: &Mat,
    alpha: Vec<f64>,
) -> Result<Prediction> {
    let g = model.spec().grid_side();
    let k = patch_scores.cols();
    if patch_scores.rows() != g * g {
        return Err(MlmpError::shape(
            format!("{} patch rows", g * g),
            format!("{}", patch_scores.rows()),
        ));
    }
    let mut scores = Vec::with_capacity(k * height * width);
    for class in 0..k {
        let plane: Vec<f64> = (0..g * g).map(|i| patch_scores.get(i, class)).collect();
        scores.extend(bilinear_upsample(&plane, g, g, height, width));
    }
    let class_map = argmax_class_map(&scores, k, height * width);
    Ok(Prediction {
        height,
        width,
        num_classes: k,
        class_map,
        scores,
        alpha,
    })
}

/// Per-pixel argmax over class planes; ties break toward the lowest index.
fn argmax_class_map(scores: &[f64], k: usize, pixels: usize) -> Vec<u8> {
    let mut out = vec![0u8; pixels];
    for (p, slot) in out.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = scores[p];
        for class in 1..k {
            let v = scores[class * pixels + p];
            if v > best_v {
                best_v = v;
                best = class;
            }
        }
        *slot = best as u8;
    }
    out
}

/// Tile origins along one axis: multiples of `stride` plus a right-aligned
/// final tile when the last stride does not land flush.
pub fn tile_positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut pos = Vec::new();
    let mut p = 0;
    while p + window <= extent {
        pos.push(p);
        p += stride;
    }
    let last = extent - window;
    if pos.last() != Some(&last) {
        pos.push(last);
    }
    pos
}

/// How many tiles cover each pixel for a given layout; exposed for
/// verification against enumeration.
pub fn coverage_counts(height: usize, width: usize, window: usize, stride: usize) -> Vec<u32> {
    let mut cov = vec![0u32; height * width];
    for &y0 in &tile_positions(height, window, stride) {
        for &x0 in &tile_positions(width, window, stride) {
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    cov[y * width + x] += 1;
                }
            }
        }
    }
    cov
}

/// Tiles a large image, predicts each window, and averages the per-class
/// score volumes in overlapped regions before the final argmax.
pub fn sliding_window_predict_with<B: VisionBackbone + ?Sized>(
    model: &B,
    image: &ImageTensor,
    bank: &TextBank,
    cfg: &AdaptConfig,
    window: usize,
    stride: usize,
) -> Result<Prediction> {
    if stride == 0 {
        return Err(MlmpError::invalid("stride must be >= 1"));
    }
    if image.height < window || image.width < window {
        return Err(MlmpError::invalid(format!(
            "image {}x{} smaller than window {window}; use plain predict",
            image.height, image.width
        )));
    }
    if window != model.spec().input_side {
        return Err(MlmpError::invalid(format!(
            "window {window} must equal the backbone input side {}",
            model.spec().input_side
        )));
    }
    let k = bank.num_classes();
    let (h, w) = (image.height, image.width);
    let mut sums = vec![0.0f64; k * h * w];
    let mut cov = vec![0u32; h * w];
    let mut alpha_sum: Vec<f64> = Vec::new();
    let mut tiles = 0usize;

    for &y0 in &tile_positions(h, window, stride) {
        for &x0 in &tile_positions(w, window, stride) {
            let tile = crop_image(image, y0, x0, window);
            let pred = predict_with(model, &tile, bank, cfg)?;
            if alpha_sum.is_empty() {
                alpha_sum = vec![0.0; pred.alpha.len()];
            }
            for (a, &v) in alpha_sum.iter_mut().zip(&pred.alpha) {
                *a += v;
            }
            tiles += 1;
            for class in 0..k {
                let plane = pred.score_plane(class);
                for ty in 0..window {
                    for tx in 0..window {
                        sums[class * h * w + (y0 + ty) * w + (x0 + tx)] +=
                            plane[ty * window + tx];
                    }
                }
            }
            for ty in 0..window {
                for tx in 0..window {
                    cov[(y0 + ty) * w + (x0 + tx)] += 1;
                }
            }
        }
    }

    for class in 0..k {
        for p in 0..h * w {
            sums[class * h * w + p] /= cov[p] as f64;
        }
    }
    let class_map = argmax_class_map(&sums, k, h * w);
    for a in alpha_sum.iter_mut() {
        *a /= tiles as f64;
    }
    Ok(Prediction {
        height: h,
        width: w,
        num_classes: k,
        class_map,
        scores: sums,
        alpha: alpha_sum,
    })
}

fn crop_image(image: &ImageTensor, y0: usize, x0: usize, side: usize) -> ImageTensor {
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                data.push(image.get(y0 + y, x0 + x, c));
            }
        }
    }
    ImageTensor::new(side, side, data).expect("crop inside bounds")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{encode_texts, BackboneSpec, ToyBackbone, ToyTextEncoder};
    use crate::objective::final_loss;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn small_spec() -> BackboneSpec {
        BackboneSpec {
            depth: 4,
            token_dim: 16,
            embed_dim: 8,
            patch_size: 8,
            input_side: 32,
        }
    }

    fn toy_setup(seed: u64, classes: usize) -> (ToyBackbone, TextBank) {
        let model = ToyBackbone::new(small_spec(), seed).unwrap();
        let enc = ToyTextEncoder::new(8, seed);
        let names: Vec<String> = (0..classes).map(|i| format!("thing{i}")).collect();
        let templates: Vec<String> = DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
        let bank = encode_texts(&enc, &names, &templates).unwrap();
        (model, bank)
    }

    fn test_image(seed: u64, side: usize) -> ImageTensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..side * side * 3).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(side, side, data).unwrap()
    }

    #[test]
    fn default_layer_range_is_last_three_quarters() {
        let cfg = AdaptConfig::default();
        assert_eq!(cfg.resolved_layer_range(24), (7, 24));
        assert_eq!(cfg.resolved_layer_range(4), (2, 4));
        assert_eq!(cfg.resolved_layer_range(1), (1, 1));
    }

    #[test]
    fn traced_loss_matches_plain_final_loss() {
        let (mut model, bank) = toy_setup(3, 3);
        let images = vec![test_image(1, 32), test_image(2, 32)];
        let cfg = AdaptConfig::default();
        let (lo, hi) = cfg.resolved_layer_range(4);

        // taped value
        let mut tape = Tape::new();
        let enc = model.forward_traced(&mut tape, &images).unwrap();
        let adapter = Adapter::new(&mut model);
        let loss_var = adapter
            .traced_loss(&mut tape, &enc, &bank, &cfg, (lo, hi), Objective::MultiLevelMultiPrompt)
            .unwrap();
        let taped = tape.scalar(loss_var);

        // plain composition of the public ops
        let model = adapter.model();
        let mut layers = Vec::new();
        let encs: Vec<_> = images
            .iter()
            .map(|i| model.encode_image(i).unwrap())
            .collect();
        for l in (lo - 1)..hi {
            let per: Vec<Mat> = encs.iter().map(|e| e.spatial(l)).collect();
            let refs: Vec<&Mat> = per.iter().collect();
            layers.push(Mat::vstack(&refs).unwrap());
        }
        let cls_rows: Vec<Mat> = encs
            .iter()
            .map(|e| model.project(&e.cls(3)).unwrap().0)
            .collect();
        let cls_refs: Vec<&Mat> = cls_rows.iter().collect();
        let cls = Mat::vstack(&cls_refs).unwrap();
        let plain = final_loss(&layers, &cls, model, &bank, cfg.tau, cfg.beta_adapt).unwrap();

        assert!(
            (taped - plain).abs() < 1e-10,
            "taped {taped} vs plain {plain}"
        );
    }

    #[test]
    fn traced_gradient_spot_check_against_finite_differences() {
        let (mut model, bank) = toy_setup(5, 3);
        let images = vec![test_image(7, 32)];
        let cfg = AdaptConfig::default();
        let range = cfg.resolved_layer_range(4);

        let loss_and_grad = |m: &mut ToyBackbone| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let enc = m.forward_traced(&mut tape, &images).unwrap();
            let adapter = Adapter::new(m);
            let lv = adapter
                .traced_loss(&mut tape, &enc, &bank, &cfg, range, Objective::MultiLevelMultiPrompt)
                .unwrap();
            let loss = tape.scalar(lv);
            let grads = tape.backward(lv).unwrap();
            let mut flat = Vec::new();
            for pv in &enc.param_vars {
                flat.extend_from_slice(grads.get(*pv, tape.value(*pv)).data());
            }
            (loss, flat)
        };
        let (_, analytic) = loss_and_grad(&mut model);

        let base = model.read_adaptable();
        let step = 1e-5;
        // probe a scattered subset of coordinates
        for &i in &[0usize, 5, 17, 40, 63, 100, 170, 250, base.len() - 1] {
            let mut plus = base.clone();
            plus[i] += step;
            model.write_adaptable(&plus).unwrap();
            let (lp, _) = loss_and_grad(&mut model);
            let mut minus = base.clone();
            minus[i] -= step;
            model.write_adaptable(&minus).unwrap();
            let (lm, _) = loss_and_grad(&mut model);
            model.write_adaptable(&base).unwrap();
            let fd = (lp - lm) / (2.0 * step);
            assert!(
                (analytic[i] - fd).abs() <= 1e-8 + 1e-4 * fd.abs().max(analytic[i].abs()),
                "coord {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn zero_steps_leaves_model_unchanged_and_prediction_identical() {
        let (mut model, bank) = toy_setup(11, 3);
        let before = model.read_adaptable();
        let img = test_image(20, 32);
        let cfg = AdaptConfig {
            steps: 0,
            ..AdaptConfig::default()
        };
        let baseline = predict_with(&model, &img, &bank, &cfg).unwrap();

        let mut adapter = Adapter::new(&mut model);
        let trace = adapter
            .adapt_batch(std::slice::from_ref(&img), &bank, &cfg, 0)
            .unwrap();
        assert!(!trace.aborted);
        assert_eq!(trace.losses.len(), 1);
        let after_pred = adapter.predict(&img, &bank, &cfg).unwrap();
        assert_eq!(adapter.model().read_adaptable(), before);
        assert_eq!(baseline.class_map, after_pred.class_map);
        assert_eq!(baseline.scores, after_pred.scores);
    }

    #[test]
    fn adaptation_reduces_loss_on_seeded_batch() {
        let (mut model, bank) = toy_setup(13, 3);
        let images = vec![test_image(30, 32), test_image(31, 32)];
        let cfg = AdaptConfig::default();
        let mut adapter = Adapter::new(&mut model);
        let trace = adapter.adapt_batch(&images, &bank, &cfg, 0).unwrap();
        assert!(!trace.aborted);
        assert_eq!(trace.losses.len(), 11);
        assert!(trace.losses.iter().all(|l| l.is_finite()));
        assert!(
            trace.losses[10] < trace.losses[0],
            "loss went {} -> {}",
            trace.losses[0],
            trace.losses[10]
        );
    }

    #[test]
    fn reset_restores_identical_parameters_each_batch() {
        let (mut model, bank) = toy_setup(17, 3);
        let cfg = AdaptConfig {
            steps: 3,
            ..AdaptConfig::default()
        };
        let mut adapter = Adapter::new(&mut model);
        let pristine = adapter.pristine().values().to_vec();
        for b in 0..3 {
            let images = vec![test_image(40 + b, 32), test_image(50 + b, 32)];
            // peek at the parameters right after reset by running a 0-step batch
            let cfg0 = AdaptConfig {
                steps: 0,
                ..cfg.clone()
            };
            adapter.adapt_batch(&images, &bank, &cfg0, b as usize).unwrap();
            assert_eq!(adapter.model().read_adaptable(), pristine);
            // now actually adapt; parameters move away from pristine
            adapter.adapt_batch(&images, &bank, &cfg, b as usize).unwrap();
            assert_ne!(adapter.model().read_adaptable(), pristine);
        }
    }

    #[test]
    fn only_norm_parameters_move() {
        let (mut model, bank) = toy_setup(19, 3);
        let checksum_all_before = model.checksum();
        let norm_before = model.read_adaptable();
        let images = vec![test_image(60, 32), test_image(61, 32)];
        let mut adapter = Adapter::new(&mut model);
        adapter
            .adapt_batch(&images, &bank, &AdaptConfig::default(), 0)
            .unwrap();
        let norm_after = model.read_adaptable();
        assert_ne!(norm_before, norm_after);
        // restoring just the norm parameters brings the full checksum back
        model.write_adaptable(&norm_before).unwrap();
        assert_eq!(model.checksum(), checksum_all_before);
    }

    #[test]
    fn tent_uses_final_layer_entropy_only() {
        let (mut model, bank) = toy_setup(23, 3);
        let single = {
            let enc = ToyTextEncoder::new(8, 23);
            let names: Vec<String> = (0..3).map(|i| format!("thing{i}")).collect();
            encode_texts(&enc, &names, &[SINGLE_TEMPLATE.to_string()]).unwrap()
        };
        let images = vec![test_image(70, 32), test_image(71, 32)];
        let cfg = AdaptConfig::default();

        // definitional check: initial TENT loss equals the plain batch
        // entropy of the final layer's spatial tokens under that template
        let encs: Vec<_> = images
            .iter()
            .map(|i| model.encode_image(i).unwrap())
            .collect();
        let per: Vec<Mat> = encs.iter().map(|e| e.spatial(3)).collect();
        let refs: Vec<&Mat> = per.iter().collect();
        let stacked = Mat::vstack(&refs).unwrap();
        let f = model.project(&stacked).unwrap().0;
        let plain = batch_entropy(
            &probability_map(&f, single.template_matrix(0), cfg.tau).unwrap(),
        );

        let mut adapter = Adapter::new(&mut model);
        let trace = adapter.tent_adapt_batch(&images, &single, &cfg, 0).unwrap();
        assert!((trace.losses[0] - plain).abs() < 1e-10);

        // trace is finite and mostly monotone over 10 steps
        assert!(trace.losses.iter().all(|l| l.is_finite()));
        let violations = trace
            .losses
            .windows(2)
            .filter(|w| w[1] > w[0] + 1e-12)
            .count();
        assert!(violations <= 2, "{violations} non-monotone steps");

        // rejects multi-template banks
        assert!(adapter.tent_adapt_batch(&images, &bank, &cfg, 1).is_err());
    }

    #[test]
    fn prediction_composes_public_ops() {
        let (model, bank) = toy_setup(29, 3);
        let img = test_image(80, 32);
        let cfg = AdaptConfig::default();
        let pred = predict_with(&model, &img, &bank, &cfg).unwrap();

        // oracle: compose layer entropies, weights, fusion, probability maps
        // and upsampling step by step
        let enc = model.encode_image(&img).unwrap();
        let (lo, hi) = cfg.resolved_layer_range(4);
        let mut hs = Vec::new();
        for l in (lo - 1)..hi {
            let mut h = 0.0;
            for t in 0..bank.num_templates() {
                h += crate::objective::layer_entropy(
                    &enc.spatial(l),
                    &model,
                    bank.template_matrix(t),
                    cfg.tau,
                )
                .unwrap();
            }
            hs.push(h / bank.num_templates() as f64);
        }
        let fw = confidence_weights(&hs, cfg.beta_eval).unwrap();
        let layers: Vec<Mat> = ((lo - 1)..hi).map(|l| enc.spatial(l)).collect();
        let fused = crate::objective::fuse_layers(&layers, fw.weights()).unwrap();
        let f = model.project(&fused).unwrap().0;
        let mut scores = Mat::zeros(f.rows(), 3);
        for t in 0..bank.num_templates() {
            let p = probability_map(&f, bank.template_matrix(t), cfg.tau).unwrap();
            for (acc, &v) in scores.data_mut().iter_mut().zip(p.probs().data()) {
                *acc += v / bank.num_templates() as f64;
            }
        }
        let g = model.spec().grid_side();
        for k in 0..3 {
            let plane: Vec<f64> = (0..g * g).map(|i| scores.get(i, k)).collect();
            let up = bilinear_upsample(&plane, g, g, 32, 32);
            assert_eq!(pred.score_plane(k), &up[..], "class {k} plane");
        }
        let alpha_sum: f64 = pred.alpha.iter().sum();
        assert!((alpha_sum - 1.0).abs() < 1e-12);
        assert_eq!(pred.alpha, fw.weights());
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_class() {
        let scores = vec![
            // class 0 plane
            0.5, 0.2, //
            // class 1 plane (exact tie at pixel 0, higher at pixel 1)
            0.5, 0.7,
        ];
        let map = argmax_class_map(&scores, 2, 2);
        assert_eq!(map, vec![0, 1]);
    }

    #[test]
    fn tile_positions_cover_and_align() {
        assert_eq!(tile_positions(8, 4, 2), vec![0, 2, 4]);
        assert_eq!(tile_positions(224, 224, 112), vec![0]);
        assert_eq!(tile_positions(230, 224, 112), vec![0, 6]);

        // hand-enumerated coverage for the 8x8 window-4 stride-2 case:
        // positions {0,2,4} per axis; pixel coverage by 1-D position:
        // cols 0-1 -> 1 tile, 2-3 -> 2, 4-5 -> 2 (wait: tiles [0,4),[2,6),[4,8))
        let cov = coverage_counts(8, 8, 4, 2);
        let expect_1d = [1u32, 1, 2, 2, 2, 2, 1, 1];
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(
                    cov[y * 8 + x],
                    expect_1d[y] * expect_1d[x],
                    "pixel ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn sliding_window_degenerates_to_plain_predict() {
        let (model, bank) = toy_setup(31, 3);
        let img = test_image(90, 32);
        let cfg = AdaptConfig::default();
        let plain = predict_with(&model, &img, &bank, &cfg).unwrap();
        let tiled = sliding_window_predict_with(&model, &img, &bank, &cfg, 32, 16).unwrap();
        assert_eq!(plain.class_map, tiled.class_map);
        assert_eq!(plain.scores, tiled.scores);

        // constant-color input: every tile predicts the same label and the
        // stitched map is that constant
        let flat = ImageTensor::new(64, 64, vec![0.31; 64 * 64 * 3]).unwrap();
        let stitched = sliding_window_predict_with(&model, &flat, &bank, &cfg, 32, 16).unwrap();
        let first = stitched.class_map[0];
        assert!(stitched.class_map.iter().all(|&c| c == first));

        // undersized image is routed back to plain predict
        let small = test_image(91, 16);
        let err = sliding_window_predict_with(&model, &small, &bank, &cfg, 32, 16).unwrap_err();
        assert!(err.to_string().contains("plain predict"), "{err}");
    }

    #[test]
    fn deterministic_traces_across_runs() {
        let run = || {
            let (mut model, bank) = toy_setup(37, 3);
            let images = vec![test_image(100, 32), test_image(101, 32)];
            let mut adapter = Adapter::new(&mut model);
            let trace = adapter
                .adapt_batch(&images, &bank, &AdaptConfig::default(), 0)
                .unwrap();
            let pred = adapter
                .predict(&images[0], &bank, &AdaptConfig::default())
                .unwrap();
            (trace.losses, pred.class_map, pred.scores)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }
}
