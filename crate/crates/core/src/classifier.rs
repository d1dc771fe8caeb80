//! Tile classification: a deterministic multinomial logistic reference model
//! over 30 summary features, its RMSProp trainer, and a byte protocol for
//! delegating to an external model runner.
//!
//! The reference model stands in for a CNN at desk scale; the pipeline
//! properties under test (determinism, aggregation, evaluation) do not
//! depend on classifier capacity, and the runner protocol is the escape
//! hatch for a real network.

pub mod runner;

use crate::canon::{self, ObjectWriter};
use crate::class::Class;
use crate::digest::sha256_hex;
use crate::evaluation::{aggregate_slide, auc_ovr, EvalError};
use crate::rng::{fisher_yates, SplitMix64};
use crate::tiling::TileImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_DIM: usize = 30;
pub const NUM_CLASSES: usize = 3;

/// A 3-way probability vector over (normal, LUAD, LSCC).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities(pub [f64; 3]);

impl ClassProbabilities {
    /// Checks the type invariants: non-negative entries summing to 1 within
    /// 1e-9.
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(ClassifierError::NonProbabilisticOutput {
                detail: format!("{:?} (sum {sum})", self.0),
            });
        }
        Ok(())
    }

    /// Predicted class: argmax with the lowest index winning ties.
    pub fn argmax(&self) -> Class {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Class::from_index(best).unwrap()
    }
}

/// Per-tile feature vector: per-channel mean and standard deviation of the
/// pixels scaled to [0,1], then a normalized 8-bin histogram per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileFeatures(pub [f64; FEATURE_DIM]);

/// Layout: `[mean_r, mean_g, mean_b, std_r, std_g, std_b, hist_r[0..8],
/// hist_g[0..8], hist_b[0..8]]`. Standard deviations are population ones.
pub fn extract_features(tile: &TileImage) -> TileFeatures {
    extract_features_from_pixels(&tile.pixels)
}

pub fn extract_features_from_pixels(pixels: &[u8]) -> TileFeatures {
    debug_assert!(!pixels.is_empty() && pixels.len().is_multiple_of(3));
    let n = (pixels.len() / 3) as f64;
    // Integer accumulation is exact; constant tiles get a std of exactly 0.
    let mut sums = [0u64; 3];
    let mut sq_sums = [0u64; 3];
    let mut hist = [[0u32; 8]; 3];
    for px in pixels.chunks_exact(3) {
        for c in 0..3 {
            let v = u64::from(px[c]);
            sums[c] += v;
            sq_sums[c] += v * v;
            hist[c][(px[c] / 32) as usize] += 1;
        }
    }
    let mut out = [0.0f64; FEATURE_DIM];
    let count = (pixels.len() / 3) as u128;
    for c in 0..3 {
        out[c] = sums[c] as f64 / n / 255.0;
        // n²·Var(v) = n·Σv² − (Σv)² is an exact integer.
        let var_num = count * u128::from(sq_sums[c]) - u128::from(sums[c]) * u128::from(sums[c]);
        out[3 + c] = (var_num as f64).sqrt() / (n * 255.0);
        for bin in 0..8 {
            out[6 + c * 8 + bin] = f64::from(hist[c][bin]) / n;
        }
    }
    TileFeatures(out)
}

/// Multinomial logistic model: 3×30 weights plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ReferenceModel {
    pub fn zeros() -> Self {
        Self {
            weights: vec![vec![0.0; FEATURE_DIM]; NUM_CLASSES],
            bias: vec![0.0; NUM_CLASSES],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bias.iter().all(|b| b.is_finite())
            && self.weights.iter().flatten().all(|w| w.is_finite())
    }

    fn validate_shape(&self) -> Result<(), ClassifierError> {
        if self.weights.len() != NUM_CLASSES
            || self.weights.iter().any(|row| row.len() != FEATURE_DIM)
            || self.bias.len() != NUM_CLASSES
        {
            return Err(ClassifierError::MalformedModel(format!(
                "expected {NUM_CLASSES}x{FEATURE_DIM} weights and {NUM_CLASSES} biases"
            )));
        }
        Ok(())
    }

    /// Content hash of the parameters; any mutation changes it.
    pub fn version_digest(&self) -> String {
        sha256_hex(self.to_canonical_json().as_bytes())
    }

    /// Canonical JSON with exact (17 significant digit) float formatting, so
    /// save/load preserves every bit.
    pub fn to_canonical_json(&self) -> String {
        let row = |r: &[f64]| canon::array(r.iter().map(|w| canon::fmt_f64_exact(*w)));
        let mut w = ObjectWriter::new();
        w.field_raw(
            "bias",
            &canon::array(self.bias.iter().map(|b| canon::fmt_f64_exact(*b))),
        )
        .field_raw(
            "weights",
            &canon::array(self.weights.iter().map(|r| row(r))),
        );
        w.finish()
    }

    pub fn from_json(text: &str) -> Result<Self, ClassifierError> {
        let model: ReferenceModel = serde_json::from_str(text)
            .map_err(|e| ClassifierError::MalformedModel(e.to_string()))?;
        model.validate_shape()?;
        if !model.is_finite() {
            return Err(ClassifierError::NonFiniteModel);
        }
        Ok(model)
    }
}

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("model contains non-finite parameters")]
    NonFiniteModel,
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("no training tiles for class {0}")]
    EmptyClass(Class),
    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: u32 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no epoch metrics to select from")]
    NoEpochs,
    #[error("external runner crashed after {completed} completed tiles: {detail}")]
    RunnerCrashed { completed: usize, detail: String },
    #[error("runner protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("runner output is not a probability vector: {detail}")]
    NonProbabilisticOutput { detail: String },
    #[error(transparent)]
    Evaluation(#[from] EvalError),
}

/// Numerically stabilized softmax of `W·x + b`.
pub fn classify_features(
    model: &ReferenceModel,
    features: &TileFeatures,
) -> Result<ClassProbabilities, ClassifierError> {
    model.validate_shape()?;
    if !model.is_finite() {
        return Err(ClassifierError::NonFiniteModel);
    }
    Ok(softmax(&logits(model, features)))
}

pub fn classify_tile(
    model: &ReferenceModel,
    tile: &TileImage,
) -> Result<ClassProbabilities, ClassifierError> {
    classify_features(model, &extract_features(tile))
}

fn logits(model: &ReferenceModel, features: &TileFeatures) -> [f64; NUM_CLASSES] {
    let mut z = [0.0f64; NUM_CLASSES];
    for (c, z_c) in z.iter_mut().enumerate() {
        let mut acc = model.bias[c];
        for (w, x) in model.weights[c].iter().zip(features.0.iter()) {
            acc += w * x;
        }
        *z_c = acc;
    }
    z
}

fn softmax(z: &[f64; NUM_CLASSES]) -> ClassProbabilities {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exp = [0.0f64; NUM_CLASSES];
    let mut sum = 0.0;
    for (e, z_c) in exp.iter_mut().zip(z) {
        *e = (z_c - max).exp();
        sum += *e;
    }
    for e in &mut exp {
        *e /= sum;
    }
    ClassProbabilities(exp)
}

/// A tile ready for training: provenance, features, and its slide's label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTile {
    pub slide_uid: String,
    pub tile_index: u32,
    pub features: TileFeatures,
    pub label: Class,
}

/// Labels every kept tile of a slide with the slide's reference class.
pub fn label_tiles_by_slide(slide_uid: &str, tiles: &[TileImage], class: Class) -> Vec<TrainTile> {
    tiles
        .iter()
        .map(|tile| TrainTile {
            slide_uid: slide_uid.to_string(),
            tile_index: tile.index,
            features: extract_features(tile),
            label: class,
        })
        .collect()
}

/// A validation slide: ground truth plus the features of its kept tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct ValSlide {
    pub sop_instance_uid: String,
    pub true_class: Class,
    pub tile_features: Vec<TileFeatures>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.001,
            rmsprop_rho: 0.9,
            rmsprop_epsilon: 1e-7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ClassifierError> {
        if self.epochs == 0 {
            return Err(ClassifierError::InvalidConfig("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::InvalidConfig(
                "batch_size must be ≥ 1".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("rmsprop_rho", self.rmsprop_rho),
            ("rmsprop_epsilon", self.rmsprop_epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ClassifierError::InvalidConfig(format!(
                    "{name} must be finite and positive"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_auc_macro: f64,
    pub val_auc_per_class: [f64; 3],
}

/// RMSProp accumulators, one cell per parameter.
struct RmsPropState {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// Trains the reference model with mini-batch RMSProp on categorical
/// cross-entropy, starting from all-zero weights (fixed initialization keeps
/// training deterministic).
///
/// Tiles are first brought into canonical (slide uid, tile index) order, so
/// the result is invariant under permutations of the input. Each epoch's
/// batch order comes from `SplitMix64(seed ^ epoch)`. After every epoch the
/// model is scored on the validation slides (slide-level macro one-vs-rest
/// AUC); the returned model is the snapshot of the best epoch, earliest on
/// ties.
pub fn train_reference(
    train_tiles: &[TrainTile],
    val_slides: &[ValSlide],
    cfg: &TrainConfig,
) -> Result<(ReferenceModel, Vec<EpochMetrics>), ClassifierError> {
    cfg.validate()?;
    for class in Class::ALL {
        if !train_tiles.iter().any(|t| t.label == class) {
            return Err(ClassifierError::EmptyClass(class));
        }
        if !val_slides.iter().any(|s| s.true_class == class) {
            return Err(ClassifierError::EmptyClass(class));
        }
    }

    let mut tiles: Vec<&TrainTile> = train_tiles.iter().collect();
    tiles.sort_by(|a, b| {
        a.slide_uid
            .cmp(&b.slide_uid)
            .then(a.tile_index.cmp(&b.tile_index))
    });

    let mut model = ReferenceModel::zeros();
    let mut state = RmsPropState {
        weights: vec![vec![0.0; FEATURE_DIM]; NUM_CLASSES],
        bias: vec![0.0; NUM_CLASSES],
    };

    let mut metrics = Vec::with_capacity(cfg.epochs as usize);
    let mut best: Option<(usize, ReferenceModel)> = None;
    let mut order: Vec<usize> = (0..tiles.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        let mut rng = SplitMix64::new(cfg.seed ^ u64::from(epoch));
        fisher_yates(&mut order, &mut rng);

        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size as usize) {
            loss_sum += rmsprop_step(&mut model, &mut state, &tiles, batch, cfg);
        }
        let train_loss = loss_sum / tiles.len() as f64;
        if !train_loss.is_finite() {
            return Err(ClassifierError::DivergedLoss { epoch });
        }

        let (val_auc_per_class, val_auc_macro) = validation_auc(&model, val_slides)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_auc_macro,
            val_auc_per_class,
        });
        let is_better = match &best {
            None => true,
            Some((best_epoch, _)) => val_auc_macro > metrics[*best_epoch].val_auc_macro,
        };
        if is_better {
            best = Some((epoch as usize, model.clone()));
        }
    }

    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, metrics))
}

/// One mini-batch update; returns the summed cross-entropy loss of the batch
/// (computed from the pre-update model).
fn rmsprop_step(
    model: &mut ReferenceModel,
    state: &mut RmsPropState,
    tiles: &[&TrainTile],
    batch: &[usize],
    cfg: &TrainConfig,
) -> f64 {
    let mut grad_w = vec![[0.0f64; FEATURE_DIM]; NUM_CLASSES];
    let mut grad_b = [0.0f64; NUM_CLASSES];
    let mut loss_sum = 0.0f64;

    for &idx in batch {
        let tile = tiles[idx];
        let probs = softmax(&logits(model, &tile.features));
        let label = tile.label.index();
        loss_sum += -probs.0[label].max(f64::MIN_POSITIVE).ln();
        for c in 0..NUM_CLASSES {
            // d(cross-entropy)/d(logit_c) = p_c - 1[c == label]
            let delta = probs.0[c] - if c == label { 1.0 } else { 0.0 };
            grad_b[c] += delta;
            for (g, x) in grad_w[c].iter_mut().zip(tile.features.0.iter()) {
                *g += delta * x;
            }
        }
    }

    let inv_batch = 1.0 / batch.len() as f64;
    for c in 0..NUM_CLASSES {
        let gb = grad_b[c] * inv_batch;
        state.bias[c] = cfg.rmsprop_rho * state.bias[c] + (1.0 - cfg.rmsprop_rho) * gb * gb;
        model.bias[c] -= cfg.learning_rate * gb / (state.bias[c] + cfg.rmsprop_epsilon).sqrt();
        for ((grad, acc), weight) in grad_w[c]
            .iter()
            .zip(state.weights[c].iter_mut())
            .zip(model.weights[c].iter_mut())
        {
            let g = grad * inv_batch;
            *acc = cfg.rmsprop_rho * *acc + (1.0 - cfg.rmsprop_rho) * g * g;
            *weight -= cfg.learning_rate * g / (*acc + cfg.rmsprop_epsilon).sqrt();
        }
    }
    loss_sum
}

/// Slide-level one-vs-rest AUC per class on the validation set, plus the
/// macro average used for epoch selection.
fn validation_auc(
    model: &ReferenceModel,
    val_slides: &[ValSlide],
) -> Result<([f64; 3], f64), ClassifierError> {
    let mut aggregated = Vec::with_capacity(val_slides.len());
    for slide in val_slides {
        let probs: Vec<ClassProbabilities> = slide
            .tile_features
            .iter()
            .map(|f| softmax(&logits(model, f)))
            .collect();
        aggregated.push((slide.true_class, aggregate_slide(&probs)?));
    }
    let mut per_class = [0.0f64; 3];
    for class in Class::ALL {
        let scores: Vec<f64> = aggregated.iter().map(|(_, p)| p.0[class.index()]).collect();
        let flags: Vec<bool> = aggregated.iter().map(|(t, _)| *t == class).collect();
        per_class[class.index()] = auc_ovr(&scores, &flags)?;
    }
    let macro_auc = per_class.iter().sum::<f64>() / 3.0;
    Ok((per_class, macro_auc))
}

/// Index of the epoch with the highest validation macro AUC; earliest wins
/// ties.
pub fn select_best_epoch(metrics: &[EpochMetrics]) -> Result<usize, ClassifierError> {
    if metrics.is_empty() {
        return Err(ClassifierError::NoEpochs);
    }
    let mut best = 0usize;
    for (i, m) in metrics.iter().enumerate().skip(1) {
        if m.val_auc_macro > metrics[best].val_auc_macro {
            best = i;
        }
    }
    Ok(best)
}
