//! Downstream training and evaluation: forecasting and classification.
//!
//! The standard transfer protocol is linear probing (encoder frozen, head
//! trained) followed by full fine-tuning for twice as many epochs.
//! Supervised training reuses the same loop from a random initialization
//! with overlapping patches (stride = floor(P/2)).

use crate::data::{
    denormalize, instance_normalize, patchify, ForecastWindow, LabeledSet, NormStats, PadMode,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{
    encode_one, encode_one_backward, flatten_repr, Aggregate, DownstreamHead, ModelParams,
    ReprLayer,
};
use crate::ops::{dropout_backward, dropout_forward, linear_backward, linear_forward};
use crate::pretrain::{adam_step, AdamConfig, AdamState};
use crate::rng::RngStream;

/// Number of patches a window of length `l` yields, accounting for padding.
pub fn padded_num_patches(l: usize, patch_len: usize, stride: usize, pad: PadMode) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::InvalidArg("patch_len and stride must be positive".into()));
    }
    let l_eff = match pad {
        PadMode::None => {
            if l < patch_len {
                return Err(Error::InvalidArg(format!(
                    "window length {l} shorter than patch length {patch_len}"
                )));
            }
            l
        }
        PadMode::ReplicateLast => {
            let base = l.max(patch_len);
            let over = (base - patch_len) % stride;
            if over == 0 {
                base
            } else {
                base + (stride - over)
            }
        }
    };
    Ok((l_eff - patch_len) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct HeadTrainConfig {
    pub patch_len: usize,
    /// Patch stride; supervised training conventionally uses floor(P/2).
    pub stride: usize,
    pub pad_mode: PadMode,
    /// Which encoder layer feeds the head.
    pub repr_layer: ReprLayer,
    pub head_dropout: f64,
    pub batch_size: usize,
    /// Linear-probing epochs; full fine-tuning runs `finetune_epochs`.
    pub probe_epochs: usize,
    /// Defaults to 2 * probe_epochs when None.
    pub finetune_epochs: Option<usize>,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            patch_len: 12,
            stride: 12,
            pad_mode: PadMode::None,
            repr_layer: ReprLayer::Z2,
            head_dropout: 0.2,
            batch_size: 64,
            probe_epochs: 10,
            finetune_epochs: None,
            lr: 1e-4,
            seed: 0,
        }
    }
}

impl HeadTrainConfig {
    pub fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(2 * self.probe_epochs)
    }

    pub fn supervised_stride(patch_len: usize) -> usize {
        (patch_len / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "patch_len, stride, batch_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!(
                "head_dropout must be in [0,1), got {}",
                self.head_dropout
            )));
        }
        Ok(())
    }
}

/// A forecasting window in model space: per-channel patches, normalized
/// target, and the stats needed to map predictions back.
#[derive(Debug, Clone)]
pub struct PreparedForecast {
    /// One N x P matrix per channel.
    pub patches: Vec<Matrix>,
    /// H x C in normalized space.
    pub target_norm: Matrix,
    /// H x C in the original units.
    pub target_raw: Matrix,
    pub stats: NormStats,
}

pub fn prepare_forecast_windows(
    windows: &[ForecastWindow],
    cfg: &HeadTrainConfig,
) -> Result<Vec<PreparedForecast>> {
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let (norm, stats) = instance_normalize(&w.input);
        let patches = patchify(&norm, cfg.patch_len, cfg.stride, cfg.pad_mode)?;
        let target_norm = crate::data::normalize_with(&stats, &w.target);
        out.push(PreparedForecast {
            patches,
            target_norm,
            target_raw: w.target.clone(),
            stats,
        });
    }
    Ok(out)
}

fn forecast_head_of(params: &ModelParams) -> Result<(&Matrix, &Matrix, usize, usize)> {
    match &params.downstream {
        Some(DownstreamHead::Forecast(h)) => Ok((&h.w, &h.b, h.num_patches, h.horizon)),
        _ => Err(Error::InvalidArg("no forecast head attached".into())),
    }
}

fn repr_of<'a>(cache: &'a crate::model::EncCache, layer: ReprLayer) -> &'a Matrix {
    match layer {
        ReprLayer::Z1 => &cache.z1,
        ReprLayer::Z2 => &cache.z2,
    }
}

/// Forecast MSE (normalized space) and gradients for a mini-batch.
///
/// When `train_encoder` is false only head gradients are produced, which
/// keeps the encoder bitwise frozen under Adam.
pub fn forecast_loss_grad(
    params: &ModelParams,
    items: &[&PreparedForecast],
    cfg: &HeadTrainConfig,
    train_encoder: bool,
    training: bool,
    dropout_rng: &mut RngStream,
) -> Result<(f64, ModelParams)> {
    let (hw, hb, head_n, horizon) = forecast_head_of(params)?;
    if items.is_empty() {
        return Err(Error::InvalidArg("empty forecast batch".into()));
    }
    let channels = items[0].patches.len();
    let denom = (items.len() * horizon * channels) as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for item in items {
        for (c, x) in item.patches.iter().enumerate() {
            if x.rows != head_n {
                return Err(Error::shape("forecast_loss", x.shape_str(), head_n));
            }
            let cache = encode_one(params, x)?;
            let z = repr_of(&cache, cfg.repr_layer);
            let (zd, dmask) = dropout_forward(z, cfg.head_dropout, training, dropout_rng)?;
            let flat = flatten_repr(&zd);
            let y = linear_forward(&flat, hw, hb)?;
            let mut dy = Matrix::zeros(1, horizon);
            for h in 0..horizon {
                let r = y.data[h] - item.target_norm.at(h, c);
                loss += r * r / denom;
                dy.data[h] = 2.0 * r / denom;
            }
            let g = linear_backward(&flat, hw, &dy)?;
            if let Some(DownstreamHead::Forecast(gh)) = &mut grads.downstream {
                gh.w.add_assign(&g.dw)?;
                gh.b.add_assign(&g.db)?;
            }
            if train_encoder {
                let dzd = Matrix {
                    rows: z.rows,
                    cols: z.cols,
                    data: g.dx.data,
                };
                let dz = dropout_backward(&dzd, &dmask);
                let (dz1, dz2) = match cfg.repr_layer {
                    ReprLayer::Z1 => (Some(&dz), None),
                    ReprLayer::Z2 => (None, Some(&dz)),
                };
                encode_one_backward(params, x, &cache, dz1, dz2, &mut grads)?;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("forecast loss".into()));
    }
    Ok((loss, grads))
}

/// The shared mini-batch loop for forecasting heads.
fn run_forecast_epochs(
    params: &mut ModelParams,
    prepared: &[PreparedForecast],
    cfg: &HeadTrainConfig,
    epochs: usize,
    train_encoder: bool,
    stage: &str,
    on_epoch: &mut impl FnMut(&str, usize, f64),
) -> Result<()> {
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut state = AdamState::new(params);
    let shuffle_root = RngStream::substream(cfg.seed, "ft-shuffle");
    let dropout_root = RngStream::substream(cfg.seed, "ft-dropout");
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..epochs {
        let mut shuffle_rng = shuffle_root.split(epoch as u64);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&PreparedForecast> = chunk.iter().map(|&i| &prepared[i]).collect();
            let mut dr = dropout_root.split((epoch * 1_000_000 + step) as u64);
            let (loss, grads) =
                forecast_loss_grad(params, &items, cfg, train_encoder, true, &mut dr)?;
            adam_step(params, &grads, &mut state, &adam_cfg)?;
            epoch_loss += loss;
            batches += 1;
        }
        on_epoch(stage, epoch, epoch_loss / batches as f64);
    }
    Ok(())
}

/// Linear probing: train only the forecast head.
pub fn linear_probe_forecast(
    params: &mut ModelParams,
    prepared: &[PreparedForecast],
    cfg: &HeadTrainConfig,
    on_epoch: &mut impl FnMut(&str, usize, f64),
) -> Result<()> {
    cfg.validate()?;
    run_forecast_epochs(params, prepared, cfg, cfg.probe_epochs, false, "probe", on_epoch)
}

/// Full fine-tuning: train encoder and head together.
pub fn full_finetune_forecast(
    params: &mut ModelParams,
    prepared: &[PreparedForecast],
    cfg: &HeadTrainConfig,
    on_epoch: &mut impl FnMut(&str, usize, f64),
) -> Result<()> {
    cfg.validate()?;
    run_forecast_epochs(
        params,
        prepared,
        cfg,
        cfg.finetune_epochs(),
        true,
        "finetune",
        on_epoch,
    )
}

/// Attach a fresh head and run the probe-then-finetune schedule.
pub fn finetune_forecast(
    params: &mut ModelParams,
    windows: &[ForecastWindow],
    horizon: usize,
    cfg: &HeadTrainConfig,
    mut on_epoch: impl FnMut(&str, usize, f64),
) -> Result<()> {
    cfg.validate()?;
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidArg("no training windows".into()))?;
    let n = padded_num_patches(first.input.rows, cfg.patch_len, cfg.stride, cfg.pad_mode)?;
    let mut head_rng = RngStream::substream(cfg.seed, "head");
    params.attach_forecast_head(n, horizon, &mut head_rng);
    let prepared = prepare_forecast_windows(windows, cfg)?;
    linear_probe_forecast(params, &prepared, cfg, &mut on_epoch)?;
    full_finetune_forecast(params, &prepared, cfg, &mut on_epoch)
}

/// Forecast errors in the original units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastMetrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Evaluate in the original units: predict in normalized space, denormalize
/// with the per-window stats, compare against the raw target.
pub fn evaluate_forecast(
    params: &ModelParams,
    windows: &[ForecastWindow],
    cfg: &HeadTrainConfig,
) -> Result<ForecastMetrics> {
    let (hw, hb, head_n, horizon) = forecast_head_of(params)?;
    if windows.is_empty() {
        return Err(Error::InvalidArg("no evaluation windows".into()));
    }
    let prepared = prepare_forecast_windows(windows, cfg)?;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    for item in &prepared {
        let channels = item.patches.len();
        let mut pred_norm = Matrix::zeros(horizon, channels);
        for (c, x) in item.patches.iter().enumerate() {
            if x.rows != head_n {
                return Err(Error::shape("evaluate_forecast", x.shape_str(), head_n));
            }
            let cache = encode_one(params, x)?;
            let flat = flatten_repr(repr_of(&cache, cfg.repr_layer));
            let y = linear_forward(&flat, hw, hb)?;
            for h in 0..horizon {
                *pred_norm.at_mut(h, c) = y.data[h];
            }
        }
        let pred = denormalize(&pred_norm, &item.stats);
        for (p, t) in pred.data.iter().zip(&item.target_raw.data) {
            let d = p - t;
            se += d * d;
            ae += d.abs();
            count += 1;
        }
    }
    Ok(ForecastMetrics {
        mse: se / count as f64,
        mae: ae / count as f64,
        windows: windows.len(),
    })
}

/// Repeat-last-value baseline in the original units.
pub fn naive_last_value_forecast(windows: &[ForecastWindow]) -> Result<ForecastMetrics> {
    if windows.is_empty() {
        return Err(Error::InvalidArg("no evaluation windows".into()));
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    for w in windows {
        let last = w.input.rows - 1;
        for c in 0..w.input.cols {
            let v = w.input.at(last, c);
            for h in 0..w.target.rows {
                let d = v - w.target.at(h, c);
                se += d * d;
                ae += d.abs();
                count += 1;
            }
        }
    }
    Ok(ForecastMetrics {
        mse: se / count as f64,
        mae: ae / count as f64,
        windows: windows.len(),
    })
}

/// A labeled series in model space.
#[derive(Debug, Clone)]
pub struct PreparedSeries {
    /// One N x P matrix per channel.
    pub patches: Vec<Matrix>,
    pub label: usize,
}

pub fn prepare_labeled_set(set: &LabeledSet, cfg: &HeadTrainConfig) -> Result<Vec<PreparedSeries>> {
    let mut out = Vec::with_capacity(set.len());
    for (series, &label) in set.series.iter().zip(&set.labels) {
        let (norm, _) = instance_normalize(series);
        let patches = patchify(&norm, cfg.patch_len, cfg.stride, cfg.pad_mode)?;
        out.push(PreparedSeries { patches, label });
    }
    Ok(out)
}

fn classifier_head_of(params: &ModelParams) -> Result<(&Matrix, &Matrix, Aggregate, usize)> {
    match &params.downstream {
        Some(DownstreamHead::Classifier(h)) => Ok((&h.w, &h.b, h.agg, h.num_classes)),
        _ => Err(Error::InvalidArg("no classifier head attached".into())),
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Mean cross-entropy and gradients for a mini-batch of labeled series.
pub fn classify_loss_grad(
    params: &ModelParams,
    items: &[&PreparedSeries],
    cfg: &HeadTrainConfig,
    train_encoder: bool,
    training: bool,
    dropout_rng: &mut RngStream,
) -> Result<(f64, ModelParams)> {
    let (hw, hb, agg, num_classes) = classifier_head_of(params)?;
    if items.is_empty() {
        return Err(Error::InvalidArg("empty classification batch".into()));
    }
    let denom = items.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for item in items {
        if item.label >= num_classes {
            return Err(Error::InvalidArg(format!(
                "label {} out of range for {} classes",
                item.label, num_classes
            )));
        }
        let channels = item.patches.len();
        let mut caches = Vec::with_capacity(channels);
        let mut argmaxes = Vec::with_capacity(channels);
        let mut pooled: Option<Matrix> = None;
        for x in &item.patches {
            let cache = encode_one(params, x)?;
            let (v, arg) = crate::model::aggregate_repr(repr_of(&cache, cfg.repr_layer), agg);
            match &mut pooled {
                Some(p) => p.add_assign(&v)?,
                None => pooled = Some(v),
            }
            caches.push(cache);
            argmaxes.push(arg);
        }
        let mut pooled = pooled.unwrap();
        pooled.scale(1.0 / channels as f64);
        let (pd, dmask) = dropout_forward(&pooled, cfg.head_dropout, training, dropout_rng)?;
        let logits = linear_forward(&pd, hw, hb)?;
        let probs = softmax_row(&logits.data);
        loss += -probs[item.label].max(1e-300).ln() / denom;

        let mut dlogits = Matrix::zeros(1, num_classes);
        for k in 0..num_classes {
            dlogits.data[k] =
                (probs[k] - if k == item.label { 1.0 } else { 0.0 }) / denom;
        }
        let g = linear_backward(&pd, hw, &dlogits)?;
        if let Some(DownstreamHead::Classifier(gh)) = &mut grads.downstream {
            gh.w.add_assign(&g.dw)?;
            gh.b.add_assign(&g.db)?;
        }
        if train_encoder {
            let mut dpooled = dropout_backward(&g.dx, &dmask);
            dpooled.scale(1.0 / channels as f64);
            for (c, cache) in caches.iter().enumerate() {
                let z = repr_of(cache, cfg.repr_layer);
                let mut dz = Matrix::zeros(z.rows, z.cols);
                match agg {
                    Aggregate::Max => {
                        for d in 0..z.cols {
                            *dz.at_mut(argmaxes[c][d], d) += dpooled.data[d];
                        }
                    }
                    Aggregate::Avg => {
                        let s = 1.0 / z.rows as f64;
                        for n in 0..z.rows {
                            for d in 0..z.cols {
                                *dz.at_mut(n, d) += dpooled.data[d] * s;
                            }
                        }
                    }
                    Aggregate::Concat => {
                        dz.data.copy_from_slice(&dpooled.data);
                    }
                }
                let (dz1, dz2) = match cfg.repr_layer {
                    ReprLayer::Z1 => (Some(&dz), None),
                    ReprLayer::Z2 => (None, Some(&dz)),
                };
                encode_one_backward(params, &item.patches[c], cache, dz1, dz2, &mut grads)?;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("classification loss".into()));
    }
    Ok((loss, grads))
}

fn run_classify_epochs(
    params: &mut ModelParams,
    prepared: &[PreparedSeries],
    cfg: &HeadTrainConfig,
    epochs: usize,
    train_encoder: bool,
    stage: &str,
    on_epoch: &mut impl FnMut(&str, usize, f64),
) -> Result<()> {
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut state = AdamState::new(params);
    let shuffle_root = RngStream::substream(cfg.seed, "ft-shuffle");
    let dropout_root = RngStream::substream(cfg.seed, "ft-dropout");
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..epochs {
        let mut shuffle_rng = shuffle_root.split(epoch as u64);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&PreparedSeries> = chunk.iter().map(|&i| &prepared[i]).collect();
            let mut dr = dropout_root.split((epoch * 1_000_000 + step) as u64);
            let (loss, grads) =
                classify_loss_grad(params, &items, cfg, train_encoder, true, &mut dr)?;
            adam_step(params, &grads, &mut state, &adam_cfg)?;
            epoch_loss += loss;
            batches += 1;
        }
        on_epoch(stage, epoch, epoch_loss / batches as f64);
    }
    Ok(())
}

pub fn linear_probe_classifier(
    params: &mut ModelParams,
    prepared: &[PreparedSeries],
    cfg: &HeadTrainConfig,
    on_epoch: &mut impl FnMut(&str, usize, f64),
) -> Result<()> {
    cfg.validate()?;
    run_classify_epochs(params, prepared, cfg, cfg.probe_epochs, false, "probe", on_epoch)
}

pub fn full_finetune_classifier(
    params: &mut ModelParams,
    prepared: &[PreparedSeries],
    cfg: &HeadTrainConfig,
    on_epoch: &mut impl FnMut(&str, usize, f64),
) -> Result<()> {
    cfg.validate()?;
    run_classify_epochs(
        params,
        prepared,
        cfg,
        cfg.finetune_epochs(),
        true,
        "finetune",
        on_epoch,
    )
}

/// Attach a fresh classifier head and run the probe-then-finetune schedule.
pub fn finetune_classifier(
    params: &mut ModelParams,
    set: &LabeledSet,
    agg: Aggregate,
    cfg: &HeadTrainConfig,
    mut on_epoch: impl FnMut(&str, usize, f64),
) -> Result<()> {
    cfg.validate()?;
    let first = set
        .series
        .first()
        .ok_or_else(|| Error::InvalidArg("empty labeled set".into()))?;
    let n = padded_num_patches(first.rows, cfg.patch_len, cfg.stride, cfg.pad_mode)?;
    let mut head_rng = RngStream::substream(cfg.seed, "head");
    params.attach_classifier_head(agg, n, set.num_classes, &mut head_rng);
    let prepared = prepare_labeled_set(set, cfg)?;
    linear_probe_classifier(params, &prepared, cfg, &mut on_epoch)?;
    full_finetune_classifier(params, &prepared, cfg, &mut on_epoch)
}

/// Predicted class per series (argmax logits, first index wins ties).
pub fn predict_classes(
    params: &ModelParams,
    prepared: &[PreparedSeries],
    cfg: &HeadTrainConfig,
) -> Result<Vec<usize>> {
    let (hw, hb, agg, _) = classifier_head_of(params)?;
    let mut out = Vec::with_capacity(prepared.len());
    for item in prepared {
        let channels = item.patches.len();
        let mut pooled: Option<Matrix> = None;
        for x in &item.patches {
            let cache = encode_one(params, x)?;
            let (v, _) = crate::model::aggregate_repr(repr_of(&cache, cfg.repr_layer), agg);
            match &mut pooled {
                Some(p) => p.add_assign(&v)?,
                None => pooled = Some(v),
            }
        }
        let mut pooled = pooled.unwrap();
        pooled.scale(1.0 / channels as f64);
        let logits = linear_forward(&pooled, hw, hb)?;
        let mut best = 0usize;
        for k in 1..logits.cols {
            if logits.data[k] > logits.data[best] {
                best = k;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Row = true class, column = predicted class.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != pred.len() {
        return Err(Error::shape("confusion_matrix", truth.len(), pred.len()));
    }
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::InvalidArg(format!(
                "class index out of range: true {t}, pred {p}, K {num_classes}"
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Macro-averaged metrics from a confusion matrix. Degenerate classes
/// (zero denominator) contribute 0 to the average.
pub fn metrics_from_confusion(confusion: Vec<Vec<usize>>) -> ClassificationMetrics {
    let k = confusion.len();
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    let mut f1_sum = 0.0;
    for c in 0..k {
        correct += confusion[c][c];
        let tp = confusion[c][c] as f64;
        let mut pred_c = 0usize;
        let mut true_c = 0usize;
        for r in 0..k {
            pred_c += confusion[r][c];
            true_c += confusion[c][r];
        }
        total += true_c;
        let prec = if pred_c > 0 { tp / pred_c as f64 } else { 0.0 };
        let rec = if true_c > 0 { tp / true_c as f64 } else { 0.0 };
        let f1 = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
        prec_sum += prec;
        rec_sum += rec;
        f1_sum += f1;
    }
    ClassificationMetrics {
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        macro_precision: prec_sum / k as f64,
        macro_recall: rec_sum / k as f64,
        macro_f1: f1_sum / k as f64,
        confusion,
    }
}

pub fn evaluate_classification(
    params: &ModelParams,
    prepared: &[PreparedSeries],
    cfg: &HeadTrainConfig,
    num_classes: usize,
) -> Result<ClassificationMetrics> {
    let pred = predict_classes(params, prepared, cfg)?;
    let truth: Vec<usize> = prepared.iter().map(|p| p.label).collect();
    Ok(metrics_from_confusion(confusion_matrix(&truth, &pred, num_classes)?))
}
