//! The adaptation objective, written as pure functions.
//!
//! Class probabilities come from temperature-scaled cosine similarities
//! between unit-normalized visual and text embeddings. The batch entropy of
//! those probabilities is the signal everything else builds on: per-layer
//! entropies drive confidence weights, the weighted token average feeds the
//! spatial loss, the final-layer CLS token feeds the image-level loss, and
//! the per-template losses are averaged into the final objective.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::backbone::{Projector, TextBank};
use crate::error::{MlmpError, Result};
use crate::tensor::Mat;

/// Row-stochastic class probabilities with the temperature that produced
/// them. Rows are tokens (or images at CLS level), columns are classes.
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    probs: Mat,
    tau: f64,
}

impl ProbabilityMap {
    /// Validating constructor for externally supplied probabilities.
    pub fn from_probs(probs: Mat, tau: f64) -> Result<Self> {
        for r in 0..probs.rows() {
            let mut sum = 0.0;
            for &p in probs.row(r) {
                if !(0.0..=1.0).contains(&p) {
                    return Err(MlmpError::invalid(format!(
                        "probability {p} out of [0,1] in row {r}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(MlmpError::invalid(format!(
                    "row {r} sums to {sum}, not 1"
                )));
            }
        }
        Ok(ProbabilityMap { probs, tau })
    }

    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_rows(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }
}

/// Softmax over classes of `cos(f_i, t_k) / tau`, row per token.
///
/// Both inputs are unit-normalized internally; a zero-norm row is an error
/// naming the offending row. Softmax subtracts the row max, so the logit
/// scale of 100 (`tau = 0.01`) stays comfortably inside f64 range.
pub fn probability_map(features: &Mat, text: &Mat, tau: f64) -> Result<ProbabilityMap> {
    if tau <= 0.0 {
        return Err(MlmpError::invalid(format!("temperature {tau} must be > 0")));
    }
    if features.cols() != text.cols() {
        return Err(MlmpError::shape(
            format!("embedding width {}", text.cols()),
            format!("{}", features.cols()),
        ));
    }
    let f = features.l2_normalize_rows()?;
    let t = text.l2_normalize_rows()?;
    let logits = f.matmul_nt(&t)?.scale(1.0 / tau);
    ProbabilityMap::from_probs(logits.softmax_rows(), tau)
}

/// Mean Shannon entropy over rows, in nats, with the `0 * ln 0 = 0`
/// convention so one-hot rows contribute exactly zero.
pub fn batch_entropy(p: &ProbabilityMap) -> f64 {
    let m = p.probs();
    let mut total = 0.0;
    for r in 0..m.rows() {
        for &v in m.row(r) {
            if v > 0.0 {
                total -= v * v.ln();
            }
        }
    }
    total / m.rows() as f64
}

/// Batch entropy of one layer's spatial tokens after projection.
pub fn layer_entropy(
    q_spatial: &Mat,
    proj: &dyn Projector,
    text: &Mat,
    tau: f64,
) -> Result<f64> {
    let f = proj.project_rows(q_spatial)?;
    Ok(batch_entropy(&probability_map(&f, text, tau)?))
}

/// Per-layer entropies with their softmax confidence weights at sharpness
/// `beta`. `beta = 0` gives the exact uniform distribution; larger `beta`
/// shifts weight onto lower-entropy layers.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    entropies: Vec<f64>,
    weights: Vec<f64>,
    beta: f64,
}

impl FusionWeights {
    pub fn entropies(&self) -> &[f64] {
        &self.entropies
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

pub fn confidence_weights(entropies: &[f64], beta: f64) -> Result<FusionWeights> {
    if entropies.is_empty() {
        return Err(MlmpError::invalid("no layer entropies supplied"));
    }
    if beta < 0.0 || !beta.is_finite() {
        return Err(MlmpError::invalid(format!("sharpness {beta} must be >= 0")));
    }
    for &h in entropies {
        if !h.is_finite() {
            return Err(MlmpError::NonFinite {
                context: "layer entropy".into(),
            });
        }
    }
    let weights = if beta == 0.0 {
        vec![1.0 / entropies.len() as f64; entropies.len()]
    } else {
        let scores: Vec<f64> = entropies.iter().map(|&h| -beta * h).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / sum).collect()
    };
    Ok(FusionWeights {
        entropies: entropies.to_vec(),
        weights,
        beta,
    })
}

/// Weighted elementwise sum of same-shape token matrices. Projection is
/// applied to the result by the caller, never before fusing.
pub fn fuse_layers(layers: &[Mat], weights: &[f64]) -> Result<Mat> {
    if layers.len() != weights.len() {
        return Err(MlmpError::shape(
            format!("{} weights", layers.len()),
            format!("{}", weights.len()),
        ));
    }
    let first = layers
        .first()
        .ok_or_else(|| MlmpError::invalid("no layers to fuse"))?;
    let mut fused = Mat::zeros(first.rows(), first.cols());
    for (layer, &w) in layers.iter().zip(weights) {
        if layer.shape() != first.shape() {
            return Err(MlmpError::shape(
                format!("{:?}", first.shape()),
                format!("{:?}", layer.shape()),
            ));
        }
        for (o, &v) in fused.data_mut().iter_mut().zip(layer.data()) {
            *o += w * v;
        }
    }
    Ok(fused)
}

/// Fuses then projects: the uncertainty-weighted multi-level features.
pub fn fused_features(layers: &[Mat], weights: &[f64], proj: &dyn Projector) -> Result<Mat> {
    proj.project_rows(&fuse_layers(layers, weights)?)
}

/// Spatial entropy loss on the fused multi-level features for one template.
/// `layers` holds each selected block's spatial tokens, batch-stacked to
/// (B*N) x D'.
pub fn uaml_loss(
    layers: &[Mat],
    proj: &dyn Projector,
    text: &Mat,
    tau: f64,
    beta: f64,
) -> Result<f64> {
    let mut entropies = Vec::with_capacity(layers.len());
    for q in layers {
        entropies.push(layer_entropy(q, proj, text, tau)?);
    }
    let fw = confidence_weights(&entropies, beta)?;
    let fused = fused_features(layers, fw.weights(), proj)?;
    Ok(batch_entropy(&probability_map(&fused, text, tau)?))
}

/// Image-level entropy of the projected final-layer CLS tokens (B x D).
pub fn ile_loss(cls_features: &Mat, text: &Mat, tau: f64) -> Result<f64> {
    Ok(batch_entropy(&probability_map(cls_features, text, tau)?))
}

/// Mean over templates of the spatial and image-level entropy losses.
pub fn final_loss(
    layers: &[Mat],
    cls_features: &Mat,
    proj: &dyn Projector,
    bank: &TextBank,
    tau: f64,
    beta: f64,
) -> Result<f64> {
    let t_count = bank.num_templates();
    let mut total = 0.0;
    for t in 0..t_count {
        let text = bank.template_matrix(t);
        // per-template loss is rounded once before accumulation, keeping
        // duplicated-template averages exactly degenerate
        let per_template = uaml_loss(layers, proj, text, tau, beta)? + ile_loss(cls_features, text, tau)?;
        total += per_template;
    }
    Ok(total / t_count as f64)
}

/// Empirical check of the ensemble-gradient statistics: the mean of the
/// per-template gradients, a bootstrap estimate of the ensemble gradient's
/// per-coordinate variance, and the per-coordinate variance bound
/// (per-template variance divided by the template count).
#[derive(Debug, Clone)]
pub struct GradientProbeReport {
    pub per_template: Vec<Vec<f64>>,
    pub ensemble_mean: Vec<f64>,
    pub resampled_variance: Vec<f64>,
    pub variance_bound: Vec<f64>,
}

pub fn gradient_variance_probe(
    gradients: &[Vec<f64>],
    resamples: usize,
    seed: u64,
) -> Result<GradientProbeReport> {
    let t_count = gradients.len();
    if t_count == 0 {
        return Err(MlmpError::invalid("no gradient vectors supplied"));
    }
    let dim = gradients[0].len();
    for (i, g) in gradients.iter().enumerate() {
        if g.len() != dim {
            return Err(MlmpError::shape(
                format!("{dim}-dim gradient"),
                format!("{}-dim at template {i}", g.len()),
            ));
        }
    }

    let mut mean = vec![0.0; dim];
    for g in gradients {
        for (m, &v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= t_count as f64;
    }

    // per-coordinate population variance across templates, then /T
    let mut bound = vec![0.0; dim];
    for g in gradients {
        for (b, (&v, &m)) in bound.iter_mut().zip(g.iter().zip(&mean)) {
            *b += (v - m) * (v - m);
        }
    }
    for b in bound.iter_mut() {
        *b /= (t_count * t_count) as f64;
    }

    // bootstrap: resample T templates with replacement, average, measure the
    // spread of those averages
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut boot_means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut bm = vec![0.0; dim];
        for _ in 0..t_count {
            let pick = rng.random_range(0..t_count);
            for (b, &v) in bm.iter_mut().zip(&gradients[pick]) {
                *b += v;
            }
        }
        for b in bm.iter_mut() {
            *b /= t_count as f64;
        }
        boot_means.push(bm);
    }
    let mut boot_center = vec![0.0; dim];
    for bm in &boot_means {
        for (c, &v) in boot_center.iter_mut().zip(bm) {
            *c += v;
        }
    }
    for c in boot_center.iter_mut() {
        *c /= resamples.max(1) as f64;
    }
    let mut resampled_variance = vec![0.0; dim];
    if resamples > 0 {
        for bm in &boot_means {
            for (rv, (&v, &c)) in resampled_variance.iter_mut().zip(bm.iter().zip(&boot_center)) {
                *rv += (v - c) * (v - c);
            }
        }
        for rv in resampled_variance.iter_mut() {
            *rv /= resamples as f64;
        }
    }

    Ok(GradientProbeReport {
        per_template: gradients.to_vec(),
        ensemble_mean: mean,
        resampled_variance,
        variance_bound: bound,
    })
}
