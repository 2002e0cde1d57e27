//! Config-driven experiment execution: (dataset x corruption x method x
//! repeat) cells run in a worker pool, each with its own model replica, and
//! the merged results land in `report.json` / `report.csv` plus a
//! newline-delimited run log.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::adapt::{
    predict_batch_with, sliding_window_predict_with, AdaptConfig, Adapter, BatchTrace,
    SINGLE_TEMPLATE,
};
use crate::backbone::{
    encode_texts_cached, BackboneSpec, ImageTensor, TextBank, ToyBackbone, ToyTextEncoder,
    VisionBackbone,
};
use crate::corrupt::{corrupt, file_seed, CorruptionKind, CorruptionSpec};
use crate::data::{batches, registry, SegSample};
use crate::error::{MlmpError, Result};
use crate::eval::{
    build_report, write_report_csv, write_report_json, write_run_log, ConfusionMatrix, RunRecord,
    RunReport, ScenarioResult, ORIGINAL,
};

/// Adaptation method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// No adaptation; prediction still uses the full evaluation pipeline.
    NoAdapt,
    /// Entropy minimization on the final layer with a single prompt.
    Tent,
    /// Multi-level multi-prompt adaptation.
    Mlmp,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::NoAdapt => "none",
            Method::Tent => "tent",
            Method::Mlmp => "mlmp",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Method::NoAdapt),
            "tent" => Ok(Method::Tent),
            "mlmp" => Ok(Method::Mlmp),
            other => Err(MlmpError::UnknownName {
                name: other.to_string(),
                valid: "none, tent, mlmp".into(),
            }),
        }
    }
}

/// Where class embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BankKind {
    /// The frozen text encoder fills the prompt templates (hash-based for
    /// the toy backbone).
    Text,
    /// Class prototypes measured on the clean samples, one jittered variant
    /// per template; gives the toy backbone genuine zero-shot alignment.
    Prototype { jitter: f64 },
}

impl BankKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "text" => Ok(BankKind::Text),
            "prototype" => Ok(BankKind::Prototype { jitter: 0.05 }),
            other => Err(MlmpError::UnknownName {
                name: other.to_string(),
                valid: "text, prototype".into(),
            }),
        }
    }
}

/// Default toy geometry used when no checkpoint is given.
pub fn default_toy_spec() -> BackboneSpec {
    BackboneSpec {
        depth: 4,
        token_dim: 16,
        embed_dim: 8,
        patch_size: 4,
        input_side: 32,
    }
}

/// Full experiment description, the CLI's single source of truth.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// "toy" or a path to a serialized toy-format checkpoint.
    pub backbone: String,
    pub backbone_seed: u64,
    pub dataset: String,
    pub root: PathBuf,
    /// Corruption names to evaluate; `original` means the clean data.
    pub corruptions: Vec<String>,
    pub method: Method,
    pub adapt: AdaptConfig,
    pub repeats: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub exclude_background: bool,
    pub cache_dir: Option<PathBuf>,
    pub emit_overlays: bool,
    pub bank: BankKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backbone: "toy".into(),
            backbone_seed: 0,
            dataset: "toy".into(),
            root: PathBuf::from("."),
            corruptions: vec![ORIGINAL.to_string()],
            method: Method::Mlmp,
            adapt: AdaptConfig::default(),
            repeats: 3,
            out_dir: PathBuf::from("out"),
            seed: 0,
            exclude_background: false,
            cache_dir: None,
            emit_overlays: false,
            bank: BankKind::Text,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(MlmpError::invalid("repeats must be >= 1"));
        }
        registry(&self.dataset)?;
        for c in &self.corruptions {
            if c != ORIGINAL {
                CorruptionKind::from_name(c)?;
            }
        }
        Ok(())
    }

    /// Stable digest of every protocol-relevant field.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let canon = format!(
            "backbone={};bseed={};dataset={};corruptions={};method={};steps={};lr={};batch={};range={:?};templates={:?};tau={};ba={};be={};reset={};repeats={};seed={};xbg={}",
            self.backbone,
            self.backbone_seed,
            self.dataset,
            self.corruptions.join("+"),
            self.method.name(),
            self.adapt.steps,
            self.adapt.learning_rate,
            self.adapt.batch_size,
            self.adapt.layer_range,
            self.adapt.templates,
            self.adapt.tau,
            self.adapt.beta_adapt,
            self.adapt.beta_eval,
            self.adapt.reset_per_batch,
            self.repeats,
            self.seed,
            self.exclude_background
        );
        let canon = format!("{canon};bank={:?}", self.bank);
        h.update(canon.as_bytes());
        crate::backbone::hex_prefix(&h.finalize(), 16)
    }
}

/// Builds the configured backbone; errors here are environment/model
/// failures (CLI exit 3).
pub fn build_backbone(config: &ExperimentConfig) -> Result<ToyBackbone> {
    if config.backbone == "toy" {
        ToyBackbone::new(default_toy_spec(), config.backbone_seed)
    } else {
        ToyBackbone::load(Path::new(&config.backbone))
    }
}

/// Checks the dataset root before any work; errors are user/config failures
/// (CLI exit 2).
pub fn validate_dataset(config: &ExperimentConfig) -> Result<()> {
    let images = config.root.join("images");
    if !images.is_dir() {
        return Err(MlmpError::Dataset {
            path: config.root.display().to_string(),
            message: "dataset root has no images/ directory".into(),
        });
    }
    Ok(())
}

pub struct RunSummary {
    pub report: RunReport,
    pub records: Vec<RunRecord>,
    pub any_aborted: bool,
}

struct Cell {
    corruption: String,
    repeat: usize,
}

struct CellOutcome {
    miou: Option<f64>,
    records: Vec<RunRecord>,
    aborted: bool,
}

/// Runs the whole grid and writes `report.json`, `report.csv`, and
/// `runlog.ndjson` into `out_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    validate_dataset(config)?;
    let reference_model = build_backbone(config)?;
    let spec = *reference_model.spec();
    let space = registry(&config.dataset)?;
    if space.num_classes() != 0 && space.num_classes() > 255 {
        return Err(MlmpError::invalid("label space too large"));
    }

    // native resolution for oversized inputs (sliding window), otherwise
    // resized to the backbone input side
    let resize_to = if config.dataset == "cityscapes" {
        None
    } else {
        Some(spec.input_side as u32)
    };
    let base_samples = crate::data::load(&config.root, resize_to)?;
    if base_samples.is_empty() {
        return Err(MlmpError::Dataset {
            path: config.root.display().to_string(),
            message: "dataset is empty".into(),
        });
    }

    // class embeddings are computed once and shared read-only across cells
    let (bank, tent_bank) = match config.bank {
        BankKind::Text => {
            let encoder = ToyTextEncoder::new(spec.embed_dim, config.backbone_seed);
            let bank = encode_texts_cached(
                config.cache_dir.as_deref(),
                &encoder.encoder_id(),
                &encoder,
                &space.classes,
                &config.adapt.templates,
            )?;
            let tent = encode_texts_cached(
                config.cache_dir.as_deref(),
                &encoder.encoder_id(),
                &encoder,
                &space.classes,
                &[SINGLE_TEMPLATE.to_string()],
            )?;
            (bank, tent)
        }
        BankKind::Prototype { jitter } => {
            let bank = crate::backbone::prototype_text_bank(
                &reference_model,
                &base_samples,
                &space.classes,
                config.adapt.resolved_layer_range(spec.depth),
                config.adapt.templates.len(),
                jitter,
                config.seed,
            )?;
            let tent = bank.single_template(0);
            (bank, tent)
        }
    };

    let mut cells = Vec::new();
    for corruption in &config.corruptions {
        for repeat in 0..config.repeats {
            cells.push(Cell {
                corruption: corruption.clone(),
                repeat,
            });
        }
    }

    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|cell| run_cell(config, &spec, &space, &bank, &tent_bank, &base_samples, cell))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut any_aborted = false;
    let mut grouped: std::collections::BTreeMap<String, Vec<Option<f64>>> =
        std::collections::BTreeMap::new();
    for (cell, outcome) in cells.iter().zip(outcomes) {
        grouped
            .entry(cell.corruption.clone())
            .or_insert_with(|| vec![None; config.repeats])[cell.repeat] = outcome.miou;
        any_aborted |= outcome.aborted;
        records.extend(outcome.records);
    }
    let scenarios: Vec<ScenarioResult> = grouped
        .into_iter()
        .map(|(corruption, repeats)| {
            ScenarioResult::from_repeats(
                config.dataset.clone(),
                corruption,
                config.method.name(),
                repeats,
            )
        })
        .collect();

    let report = build_report(config.fingerprint(), scenarios);
    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| MlmpError::io(config.out_dir.display().to_string(), e))?;
    write_report_json(&report, &config.out_dir.join("report.json"))?;
    write_report_csv(&report, &config.out_dir.join("report.csv"))?;
    write_run_log(&config.out_dir.join("runlog.ndjson"), &records)?;

    Ok(RunSummary {
        report,
        records,
        any_aborted,
    })
}

// method deliberately excluded: different methods must see identical
// corrupted inputs for a fair comparison
fn cell_seed(config: &ExperimentConfig, cell: &Cell) -> u64 {
    let mut h = Sha256::new();
    h.update(config.seed.to_le_bytes());
    h.update(config.dataset.as_bytes());
    h.update(cell.corruption.as_bytes());
    h.update(cell.repeat.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn run_cell(
    config: &ExperimentConfig,
    spec: &BackboneSpec,
    space: &crate::data::LabelSpace,
    bank: &TextBank,
    tent_bank: &TextBank,
    base_samples: &[SegSample],
    cell: &Cell,
) -> Result<CellOutcome> {
    let seed = cell_seed(config, cell);
    let mut model = build_backbone(config)?;

    // per-method adaptation recipe
    let mut cfg = config.adapt.clone();
    cfg.seed = seed;
    let (adapt_bank, eval_bank) = match config.method {
        Method::Tent => {
            cfg.layer_range = Some((spec.depth, spec.depth));
            cfg.templates = vec![SINGLE_TEMPLATE.to_string()];
            (tent_bank, tent_bank)
        }
        _ => (bank, bank),
    };
    if config.method == Method::NoAdapt {
        cfg.steps = 0;
    }

    // corrupt on the fly at working resolution, one derived seed per file
    let samples: Vec<SegSample> = if cell.corruption == ORIGINAL {
        base_samples.to_vec()
    } else {
        let kind = CorruptionKind::from_name(&cell.corruption)?;
        base_samples
            .iter()
            .map(|s| {
                let spec = CorruptionSpec::new(
                    kind,
                    5,
                    file_seed(seed, &format!("{}/{}", cell.corruption, s.id)),
                )?;
                Ok(SegSample {
                    image: corrupt(&s.image, &spec)?,
                    label: s.label.clone(),
                    id: s.id.clone(),
                })
            })
            .collect::<Result<_>>()?
    };

    let mut cm = ConfusionMatrix::new(space.num_classes());
    let mut records = Vec::new();
    let mut aborted = false;
    let mut adapter = Adapter::new(&mut model);
    let mut overlay_written = false;

    for (batch_id, batch) in batches(&samples, cfg.batch_size).iter().enumerate() {
        let start = Instant::now();
        let window = spec.input_side;
        let oversized = batch
            .iter()
            .any(|s| s.image.width() as usize > window || s.image.height() as usize > window);

        // oversized inputs adapt on their tiles, keeping batch independence
        let adapt_inputs: Vec<ImageTensor> = if oversized {
            let mut tiles = Vec::new();
            for s in batch.iter() {
                let img = ImageTensor::from_rgb(&s.image);
                for &y0 in &crate::adapt::tile_positions(img.height, window, window / 2) {
                    for &x0 in &crate::adapt::tile_positions(img.width, window, window / 2) {
                        tiles.push(crop_tensor(&img, y0, x0, window));
                    }
                }
            }
            tiles
        } else {
            batch
                .iter()
                .map(|s| ImageTensor::from_rgb(&s.image))
                .collect()
        };

        let trace: BatchTrace = match config.method {
            Method::Tent => adapter.tent_adapt_batch(&adapt_inputs, adapt_bank, &cfg, batch_id)?,
            _ => adapter.adapt_batch(&adapt_inputs, adapt_bank, &cfg, batch_id)?,
        };
        aborted |= trace.aborted;

        // predict the batch with the adapted state
        let mut alpha_acc: Vec<f64> = Vec::new();
        if oversized {
            for s in batch.iter() {
                let img = ImageTensor::from_rgb(&s.image);
                let pred = sliding_window_predict_with(
                    adapter.model(),
                    &img,
                    eval_bank,
                    &cfg,
                    window,
                    window / 2,
                )?;
                cm.accumulate(s.label.as_raw(), &pred.class_map)?;
                accumulate_alpha(&mut alpha_acc, &pred.alpha);
                maybe_overlay(config, cell, s, &pred.class_map, &mut overlay_written)?;
            }
        } else {
            let tensors: Vec<ImageTensor> =
                batch.iter().map(|s| ImageTensor::from_rgb(&s.image)).collect();
            let preds = predict_batch_with(adapter.model(), &tensors, eval_bank, &cfg)?;
            for (s, pred) in batch.iter().zip(&preds) {
                cm.accumulate(s.label.as_raw(), &pred.class_map)?;
                accumulate_alpha(&mut alpha_acc, &pred.alpha);
                maybe_overlay(config, cell, s, &pred.class_map, &mut overlay_written)?;
            }
        }
        let n_preds = batch.len() as f64;
        for a in alpha_acc.iter_mut() {
            *a /= n_preds;
        }

        records.push(RunRecord {
            dataset: config.dataset.clone(),
            corruption: cell.corruption.clone(),
            method: config.method.name().to_string(),
            repeat: cell.repeat,
            batch_id,
            losses: trace.losses,
            alpha: alpha_acc,
            first_layer: cfg.resolved_layer_range(spec.depth).0,
            aborted: trace.aborted,
            duration_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let exclude = if config.exclude_background && space.has_background {
        Some(0)
    } else {
        None
    };
    let miou = cm.miou_with(exclude).ok().map(|r| r.mean);
    Ok(CellOutcome {
        miou,
        records,
        aborted,
    })
}

fn accumulate_alpha(acc: &mut Vec<f64>, alpha: &[f64]) {
    if acc.is_empty() {
        *acc = vec![0.0; alpha.len()];
    }
    for (a, &v) in acc.iter_mut().zip(alpha) {
        *a += v;
    }
}

fn maybe_overlay(
    config: &ExperimentConfig,
    cell: &Cell,
    sample: &SegSample,
    class_map: &[u8],
    written: &mut bool,
) -> Result<()> {
    if !config.emit_overlays || *written || cell.repeat != 0 {
        return Ok(());
    }
    let dir = config.out_dir.join("overlays");
    std::fs::create_dir_all(&dir).map_err(|e| MlmpError::io(dir.display().to_string(), e))?;
    let path = dir.join(format!(
        "{}_{}_{}.png",
        config.dataset, cell.corruption, sample.id
    ));
    crate::plot::write_overlay(&sample.image, class_map, &path)?;
    *written = true;
    Ok(())
}

fn crop_tensor(image: &ImageTensor, y0: usize, x0: usize, side: usize) -> ImageTensor {
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

    fn toy_config(root: &Path, out: &Path, method: Method) -> ExperimentConfig {
        ExperimentConfig {
            backbone: "toy".into(),
            backbone_seed: 0,
            dataset: "toy".into(),
            root: root.to_path_buf(),
            corruptions: vec![ORIGINAL.to_string()],
            method,
            adapt: AdaptConfig {
                steps: 2,
                ..AdaptConfig::default()
            },
            repeats: 1,
            out_dir: out.to_path_buf(),
            seed: 7,
            exclude_background: false,
            cache_dir: None,
            emit_overlays: false,
            bank: BankKind::Text,
        }
    }

    #[test]
    fn run_produces_report_and_log() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        crate::data::make_toy_dataset(data.path(), 4, 0).unwrap();
        let config = toy_config(data.path(), out.path(), Method::Mlmp);
        let summary = run(&config).unwrap();
        assert!(!summary.any_aborted);
        assert_eq!(summary.report.scenarios.len(), 1);
        assert!(summary.report.scenarios[0].miou_mean.is_some());
        assert!(out.path().join("report.json").exists());
        assert!(out.path().join("report.csv").exists());
        assert!(out.path().join("runlog.ndjson").exists());
        // 4 images, batch 2 -> 2 batches
        assert_eq!(summary.records.len(), 2);
        for r in &summary.records {
            assert_eq!(r.losses.len(), 3); // 2 steps + closing evaluation
            let alpha_sum: f64 = r.alpha.iter().sum();
            assert!((alpha_sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn none_equals_mlmp_with_zero_steps() {
        let data = tempfile::tempdir().unwrap();
        crate::data::make_toy_dataset(data.path(), 4, 1).unwrap();

        let out_none = tempfile::tempdir().unwrap();
        let cfg_none = toy_config(data.path(), out_none.path(), Method::NoAdapt);
        let summary_none = run(&cfg_none).unwrap();

        let out_zero = tempfile::tempdir().unwrap();
        let mut cfg_zero = toy_config(data.path(), out_zero.path(), Method::Mlmp);
        cfg_zero.adapt.steps = 0;
        let summary_zero = run(&cfg_zero).unwrap();

        assert_eq!(
            summary_none.report.scenarios[0].miou_mean,
            summary_zero.report.scenarios[0].miou_mean
        );
    }

    #[test]
    fn deterministic_reports_byte_identical() {
        let data = tempfile::tempdir().unwrap();
        crate::data::make_toy_dataset(data.path(), 4, 2).unwrap();
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        let mut c1 = toy_config(data.path(), out1.path(), Method::Mlmp);
        c1.corruptions = vec!["gaussian_noise".to_string()];
        let mut c2 = toy_config(data.path(), out2.path(), Method::Mlmp);
        c2.corruptions = vec!["gaussian_noise".to_string()];
        run(&c1).unwrap();
        run(&c2).unwrap();
        let b1 = std::fs::read(out1.path().join("report.json")).unwrap();
        let b2 = std::fs::read(out2.path().join("report.json")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn tent_runs_with_single_template() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        crate::data::make_toy_dataset(data.path(), 2, 3).unwrap();
        let config = toy_config(data.path(), out.path(), Method::Tent);
        let summary = run(&config).unwrap();
        assert!(summary.report.scenarios[0].miou_mean.is_some());
        // final-layer-only evaluation: alpha is the single layer's weight
        assert_eq!(summary.records[0].alpha, vec![1.0]);
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let out = tempfile::tempdir().unwrap();
        let config = toy_config(Path::new("/nonexistent"), out.path(), Method::Mlmp);
        let err = match run(&config) {
            Err(e) => e,
            Ok(_) => panic!("expected a dataset error"),
        };
        assert!(matches!(err, MlmpError::Dataset { .. }));
    }
}
