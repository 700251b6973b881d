//! Packaged analysis experiments on synthetic data.
//!
//! The shift study trains a PI-task model and a PD-task model on the same
//! toy series, probes a forecast head on each, and measures test MSE over a
//! grid of distribution-shifted variants. The class study pretrains on
//! labeled toy series and compares a linear probe on the pretrained encoder
//! against one on a frozen random encoder.

use crate::data::{
    chronological_split, gen_class_toy, gen_shift_toy, instance_normalize, make_forecast_windows,
    ForecastWindow, LabeledSet, PadMode, ShiftGrid, ShiftToyConfig, SplitName,
};
use crate::error::{Error, Result};
use crate::finetune::{
    evaluate_classification, evaluate_forecast, linear_probe_classifier, linear_probe_forecast,
    padded_num_patches, prepare_forecast_windows, prepare_labeled_set, HeadTrainConfig,
};
use crate::matrix::Matrix;
use crate::model::{Aggregate, EncoderKind, ModelParams, ReprLayer};
use crate::pretrain::{train_task_in_place, ClLevelReduce, PretrainConfig, Task};
use crate::rng::RngStream;

/// Sliding forecast windows over a whole series, ignoring splits.
pub fn windows_over_series(
    values: &Matrix,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<ForecastWindow>> {
    if values.rows < input_len + horizon {
        return Err(Error::InvalidArg(format!(
            "series has {} steps, needs at least {}",
            values.rows,
            input_len + horizon
        )));
    }
    let c = values.cols;
    let count = (values.rows - input_len - horizon) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let s = k * stride;
        let mut input = Matrix::zeros(input_len, c);
        let mut target = Matrix::zeros(horizon, c);
        for t in 0..input_len {
            input.row_mut(t).copy_from_slice(values.row(s + t));
        }
        for t in 0..horizon {
            target.row_mut(t).copy_from_slice(values.row(s + input_len + t));
        }
        out.push(ForecastWindow {
            input,
            target,
            origin: s,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ShiftExperimentConfig {
    pub toy: ShiftToyConfig,
    pub grid: ShiftGrid,
    pub seeds: Vec<u64>,
    pub input_len: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub dim: usize,
    pub dropout: f64,
    /// Encoder for the patch-independent task.
    pub pi_kind: EncoderKind,
    /// Encoder for the patch-dependent (masked prediction) task.
    pub pd_kind: EncoderKind,
    pub pretrain_epochs: usize,
    pub probe_epochs: usize,
    pub pretrain_lr: f64,
    pub probe_lr: f64,
    pub batch_size: usize,
}

impl Default for ShiftExperimentConfig {
    fn default() -> Self {
        let toy = ShiftToyConfig::default();
        let grid = ShiftGrid::default_for(&toy);
        ShiftExperimentConfig {
            toy,
            grid,
            seeds: vec![0],
            input_len: 64,
            horizon: 16,
            patch_len: 8,
            dim: 16,
            dropout: 0.2,
            pi_kind: EncoderKind::Mlp,
            pd_kind: EncoderKind::Mixer,
            pretrain_epochs: 30,
            probe_epochs: 20,
            pretrain_lr: 1e-2,
            probe_lr: 1e-2,
            batch_size: 32,
        }
    }
}

/// One grid point of the shift study, averaged over seeds.
#[derive(Debug, Clone)]
pub struct ShiftPoint {
    pub slope: f64,
    pub amp: f64,
    pub mse_pi: f64,
    pub mse_pd: f64,
    /// mse_pd - mse_pi
    pub gap: f64,
    /// Normalized distance of (slope, amp) from the training parameters.
    pub shift_score: f64,
}

fn pretrain_on_windows(
    task: Task,
    kind: EncoderKind,
    cfg: &ShiftExperimentConfig,
    normalized: &[Matrix],
    seed: u64,
) -> Result<ModelParams> {
    let pcfg = PretrainConfig {
        task,
        kind,
        input_len: cfg.input_len,
        patch_len: cfg.patch_len,
        stride: cfg.patch_len,
        dim: cfg.dim,
        dropout: cfg.dropout,
        cl_level_reduce: ClLevelReduce::Mean,
        batch_size: cfg.batch_size,
        epochs: cfg.pretrain_epochs,
        lr: cfg.pretrain_lr,
        seed,
        window_stride: cfg.patch_len,
    };
    pcfg.validate()?;
    let mut init_rng = RngStream::substream(seed, "init");
    let mut params = ModelParams::init(
        kind,
        cfg.patch_len,
        cfg.dim,
        pcfg.num_patches(),
        cfg.dropout,
        &mut init_rng,
    )?;
    train_task_in_place(&pcfg, normalized, &mut params, &mut |_| {})?;
    Ok(params)
}

fn probe_cfg(cfg: &ShiftExperimentConfig, seed: u64) -> HeadTrainConfig {
    HeadTrainConfig {
        patch_len: cfg.patch_len,
        stride: cfg.patch_len,
        pad_mode: PadMode::None,
        repr_layer: ReprLayer::Z2,
        head_dropout: 0.0,
        batch_size: cfg.batch_size,
        probe_epochs: cfg.probe_epochs,
        finetune_epochs: None,
        lr: cfg.probe_lr,
        seed,
    }
}

fn probe_forecast_head(
    params: &mut ModelParams,
    train_windows: &[ForecastWindow],
    horizon: usize,
    hcfg: &HeadTrainConfig,
) -> Result<()> {
    let n = padded_num_patches(
        train_windows[0].input.rows,
        hcfg.patch_len,
        hcfg.stride,
        hcfg.pad_mode,
    )?;
    let mut head_rng = RngStream::substream(hcfg.seed, "head");
    params.attach_forecast_head(n, horizon, &mut head_rng);
    let prepared = prepare_forecast_windows(train_windows, hcfg)?;
    linear_probe_forecast(params, &prepared, hcfg, &mut |_, _, _| {})
}

/// Distance of a grid point from the training parameters, each axis scaled
/// by its largest deviation on the grid.
fn shift_scores(grid_points: &[(f64, f64)], toy: &ShiftToyConfig) -> Vec<f64> {
    let s_scale = grid_points
        .iter()
        .map(|(s, _)| (s - toy.train_slope).abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let a_scale = grid_points
        .iter()
        .map(|(_, a)| (a - toy.train_amp).abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    grid_points
        .iter()
        .map(|(s, a)| (s - toy.train_slope).abs() / s_scale + (a - toy.train_amp).abs() / a_scale)
        .collect()
}

pub fn run_shift_experiment(cfg: &ShiftExperimentConfig) -> Result<Vec<ShiftPoint>> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArg("shift experiment needs at least one seed".into()));
    }
    let points = cfg.grid.points();
    let scores = shift_scores(&points, &cfg.toy);
    let mut mse_pi = vec![0.0; points.len()];
    let mut mse_pd = vec![0.0; points.len()];

    for &seed in &cfg.seeds {
        let mut toy_rng = RngStream::substream(seed, "shift-toy");
        let (mut train_ds, tests) = gen_shift_toy(&cfg.toy, &cfg.grid, &mut toy_rng)?;
        chronological_split(&mut train_ds, (0.7, 0.15, 0.15))?;

        // pretraining windows from the train split
        let windows = crate::data::make_input_windows(
            &train_ds,
            SplitName::Train,
            cfg.input_len,
            cfg.patch_len,
        )?;
        let normalized: Vec<Matrix> = windows.iter().map(|w| instance_normalize(w).0).collect();

        let mut pi = pretrain_on_windows(Task::Pi, cfg.pi_kind, cfg, &normalized, seed)?;
        let mut pd = pretrain_on_windows(Task::Pd, cfg.pd_kind, cfg, &normalized, seed)?;

        let train_windows = make_forecast_windows(
            &train_ds,
            SplitName::Train,
            cfg.input_len,
            cfg.horizon,
            cfg.horizon,
        )?;
        let hcfg = probe_cfg(cfg, seed);
        probe_forecast_head(&mut pi, &train_windows, cfg.horizon, &hcfg)?;
        probe_forecast_head(&mut pd, &train_windows, cfg.horizon, &hcfg)?;

        for (k, (_, _, test_ds)) in tests.iter().enumerate() {
            let test_windows =
                windows_over_series(&test_ds.values, cfg.input_len, cfg.horizon, cfg.horizon)?;
            mse_pi[k] += evaluate_forecast(&pi, &test_windows, &hcfg)?.mse;
            mse_pd[k] += evaluate_forecast(&pd, &test_windows, &hcfg)?.mse;
        }
    }

    let ns = cfg.seeds.len() as f64;
    Ok(points
        .iter()
        .enumerate()
        .map(|(k, &(slope, amp))| {
            let pi = mse_pi[k] / ns;
            let pd = mse_pd[k] / ns;
            ShiftPoint {
                slope,
                amp,
                mse_pi: pi,
                mse_pd: pd,
                gap: pd - pi,
                shift_score: scores[k],
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ClassToyConfig {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub series_len: usize,
    pub noise_std: f64,
    pub patch_len: usize,
    pub dim: usize,
    pub dropout: f64,
    pub agg: Aggregate,
    pub pretrain_epochs: usize,
    pub probe_epochs: usize,
    pub pretrain_lr: f64,
    pub probe_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassToyConfig {
    fn default() -> Self {
        ClassToyConfig {
            num_classes: 10,
            per_class_train: 40,
            per_class_test: 20,
            series_len: 64,
            noise_std: 0.15,
            patch_len: 8,
            dim: 16,
            dropout: 0.2,
            agg: Aggregate::Max,
            pretrain_epochs: 30,
            probe_epochs: 20,
            pretrain_lr: 1e-3,
            probe_lr: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassToyResult {
    pub pretrained_accuracy: f64,
    pub random_accuracy: f64,
    pub train: LabeledSet,
    pub test: LabeledSet,
    /// Encoder after PI pretraining (probe head attached).
    pub pretrained: ModelParams,
}

fn probe_classifier_accuracy(
    params: &mut ModelParams,
    train: &LabeledSet,
    test: &LabeledSet,
    cfg: &ClassToyConfig,
) -> Result<f64> {
    let hcfg = HeadTrainConfig {
        patch_len: cfg.patch_len,
        stride: cfg.patch_len,
        pad_mode: PadMode::None,
        repr_layer: ReprLayer::Z2,
        head_dropout: 0.0,
        batch_size: cfg.batch_size,
        probe_epochs: cfg.probe_epochs,
        finetune_epochs: None,
        lr: cfg.probe_lr,
        seed: cfg.seed,
    };
    let n = padded_num_patches(cfg.series_len, cfg.patch_len, cfg.patch_len, PadMode::None)?;
    let mut head_rng = RngStream::substream(cfg.seed, "head");
    params.attach_classifier_head(cfg.agg, n, train.num_classes, &mut head_rng);
    let prepared_train = prepare_labeled_set(train, &hcfg)?;
    linear_probe_classifier(params, &prepared_train, &hcfg, &mut |_, _, _| {})?;
    let prepared_test = prepare_labeled_set(test, &hcfg)?;
    let metrics = evaluate_classification(params, &prepared_test, &hcfg, test.num_classes)?;
    Ok(metrics.accuracy)
}

/// PI pretraining on the labeled toy, then linear probes on the pretrained
/// and on a frozen randomly initialized encoder.
pub fn run_class_probe(cfg: &ClassToyConfig) -> Result<ClassToyResult> {
    let mut train_rng = RngStream::substream(cfg.seed, "class-train");
    let train = gen_class_toy(
        cfg.num_classes,
        cfg.per_class_train,
        cfg.series_len,
        cfg.noise_std,
        &mut train_rng,
    )?;
    let mut test_rng = RngStream::substream(cfg.seed, "class-test");
    let test = gen_class_toy(
        cfg.num_classes,
        cfg.per_class_test,
        cfg.series_len,
        cfg.noise_std,
        &mut test_rng,
    )?;

    // each labeled series is one pretraining window
    let normalized: Vec<Matrix> = train.series.iter().map(|s| instance_normalize(s).0).collect();
    let pcfg = PretrainConfig {
        task: Task::PiCl,
        kind: EncoderKind::Mlp,
        input_len: cfg.series_len,
        patch_len: cfg.patch_len,
        stride: cfg.patch_len,
        dim: cfg.dim,
        dropout: cfg.dropout,
        cl_level_reduce: ClLevelReduce::Mean,
        batch_size: cfg.batch_size,
        epochs: cfg.pretrain_epochs,
        lr: cfg.pretrain_lr,
        seed: cfg.seed,
        window_stride: cfg.patch_len,
    };
    pcfg.validate()?;
    let n = pcfg.num_patches();
    let mut init_rng = RngStream::substream(cfg.seed, "init");
    let mut pretrained = ModelParams::init(
        EncoderKind::Mlp,
        cfg.patch_len,
        cfg.dim,
        n,
        cfg.dropout,
        &mut init_rng,
    )?;
    let mut random = pretrained.clone();
    train_task_in_place(&pcfg, &normalized, &mut pretrained, &mut |_| {})?;

    let pretrained_accuracy = probe_classifier_accuracy(&mut pretrained, &train, &test, cfg)?;
    let random_accuracy = probe_classifier_accuracy(&mut random, &train, &test, cfg)?;
    Ok(ClassToyResult {
        pretrained_accuracy,
        random_accuracy,
        train,
        test,
        pretrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_over_series_counts() {
        let values = Matrix::from_vec(20, 1, (0..20).map(|v| v as f64).collect()).unwrap();
        let w = windows_over_series(&values, 8, 4, 4).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].input.at(0, 0), 8.0);
        assert!(windows_over_series(&values, 18, 4, 4).is_err());
    }

    #[test]
    fn shift_scores_order() {
        let toy = ShiftToyConfig::default();
        let points = vec![
            (toy.train_slope, toy.train_amp),
            (toy.train_slope * 2.0, toy.train_amp),
            (-toy.train_slope, toy.train_amp * 3.0),
        ];
        let scores = shift_scores(&points, &toy);
        assert_eq!(scores[0], 0.0);
        assert!(scores[1] < scores[2]);
    }

    #[test]
    fn tiny_shift_experiment_runs() {
        let toy = ShiftToyConfig {
            len: 240,
            ..Default::default()
        };
        let cfg = ShiftExperimentConfig {
            grid: ShiftGrid {
                slopes: vec![toy.train_slope, toy.train_slope * -2.0],
                amps: vec![toy.train_amp],
            },
            toy,
            seeds: vec![1],
            input_len: 32,
            horizon: 8,
            patch_len: 8,
            dim: 8,
            pretrain_epochs: 3,
            probe_epochs: 3,
            ..Default::default()
        };
        let points = run_shift_experiment(&cfg).unwrap();
        assert_eq!(points.len(), 2);
        for p in &points {
            assert!(p.mse_pi.is_finite() && p.mse_pd.is_finite());
            assert!((p.gap - (p.mse_pd - p.mse_pi)).abs() < 1e-12);
        }
        assert!(points[0].shift_score < points[1].shift_score);
    }

    #[test]
    fn tiny_class_probe_runs() {
        let cfg = ClassToyConfig {
            num_classes: 3,
            per_class_train: 6,
            per_class_test: 6,
            series_len: 32,
            pretrain_epochs: 5,
            probe_epochs: 5,
            ..Default::default()
        };
        let res = run_class_probe(&cfg).unwrap();
        assert!(res.pretrained_accuracy >= 0.0 && res.pretrained_accuracy <= 1.0);
        assert_eq!(res.test.len(), 18);
    }
}
