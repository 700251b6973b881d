//! Subcommand implementations.
//!
//! Every command follows the same shape: read all config keys, reject
//! unknown keys, compute, then write outputs. Nothing is written before the
//! compute succeeds, and every artifact carries the config hash and seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use patchcast_core::data::{
    chronological_split, complementary_masks, gen_class_toy, gen_shift_toy, load_csv,
    make_forecast_windows, patchify, patchify_batch, write_csv, CsvSchema, LabeledSet, PadMode,
    ShiftGrid, ShiftToyConfig, SplitName, TimeSeriesDataset,
};
use patchcast_core::experiments::{
    run_class_probe, run_shift_experiment, ClassToyConfig, ShiftExperimentConfig,
};
use patchcast_core::finetune::{
    evaluate_forecast, full_finetune_forecast, linear_probe_forecast, padded_num_patches,
    prepare_forecast_windows, HeadTrainConfig,
};
use patchcast_core::gradcheck::finite_difference_report;
use patchcast_core::matrix::Matrix;
use patchcast_core::model::{
    encode_one, load_params, save_params, Aggregate, EncoderKind, ModelParams, ReprLayer,
    WEIGHT_FORMAT_VERSION,
};
use patchcast_core::pretrain::{
    run_pretraining, task_loss_grad, ClLevelReduce, LossConfig, PretrainConfig, StepLog, Task,
};
use patchcast_core::RngStream;

use crate::config::ConfigMap;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "PATCHCAST_OUT";

fn out_dir(cfg: &ConfigMap, command: &str) -> PathBuf {
    match cfg.get("out") {
        Some(dir) => PathBuf::from(dir),
        None => {
            let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".to_string());
            Path::new(&root).join(command)
        }
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    format_version: u32,
    config: &'a BTreeMap<String, String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_run_meta(dir: &Path, command: &str, cfg: &ConfigMap, seed: u64) -> Result<()> {
    write_json(
        &dir.join("run.json"),
        &RunMeta {
            command,
            config_hash: cfg.content_hash(),
            seed,
            format_version: WEIGHT_FORMAT_VERSION,
            config: cfg.resolved(),
        },
    )
}

fn load_dataset(cfg: &ConfigMap) -> Result<TimeSeriesDataset> {
    let path = PathBuf::from(cfg.require("data")?);
    let timestamp_col = match cfg.get_str("timestamp_col", "").as_str() {
        "" => None,
        s => Some(s.to_string()),
    };
    let value_cols: Vec<String> = match cfg.get_str("value_cols", "").as_str() {
        "" => Vec::new(),
        s => s.split(',').map(|v| v.trim().to_string()).collect(),
    };
    let schema = CsvSchema {
        timestamp_col,
        value_cols,
    };
    let mut ds = load_csv(&path, &schema)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    let ratios = (
        cfg.get_parse("split_train", 0.6)?,
        cfg.get_parse("split_val", 0.2)?,
        cfg.get_parse("split_test", 0.2)?,
    );
    chronological_split(&mut ds, ratios)?;
    Ok(ds)
}

pub fn cmd_pretrain(cfg: &ConfigMap) -> Result<()> {
    let patch_len = cfg.get_parse("patch_len", 12usize)?;
    let pcfg = PretrainConfig {
        task: cfg.get_str("task", "pi+cl").parse()?,
        kind: cfg.get_str("kind", "mlp").parse()?,
        input_len: cfg.get_parse("input_len", 512usize)?,
        patch_len,
        stride: cfg.get_parse("stride", patch_len)?,
        dim: cfg.get_parse("dim", 128usize)?,
        dropout: cfg.get_parse("dropout", 0.2)?,
        cl_level_reduce: cfg.get_str("cl_level_reduce", "mean").parse()?,
        batch_size: cfg.get_parse("batch_size", 64usize)?,
        epochs: cfg.get_parse("epochs", 10usize)?,
        lr: cfg.get_parse("lr", 1e-4)?,
        seed: cfg.get_parse("seed", 0u64)?,
        window_stride: cfg.get_parse("window_stride", patch_len)?,
    };
    let out = out_dir(cfg, "pretrain");
    let ds = load_dataset(cfg)?;
    cfg.finish()?;
    pcfg.validate()?;

    let mut logs: Vec<StepLog> = Vec::new();
    let params = run_pretraining(&pcfg, &ds, |log| logs.push(log.clone()))?;

    fs::create_dir_all(&out)?;
    save_params(&params, pcfg.seed, &out.join("weights.json"))?;
    let mut log_file = fs::File::create(out.join("log.jsonl"))?;
    for log in &logs {
        writeln!(log_file, "{}", serde_json::to_string(log)?)?;
    }
    write_run_meta(&out, "pretrain", cfg, pcfg.seed)?;

    let last = logs.last();
    println!(
        "pretrain: task={} kind={:?} num_patches={} steps={} final_recon={}",
        pcfg.task.as_str(),
        pcfg.kind,
        pcfg.num_patches(),
        logs.len(),
        last.map(|l| l.recon).unwrap_or(f64::NAN),
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitMetrics {
    mse: f64,
    mae: f64,
    windows: usize,
}

#[derive(Serialize)]
struct ForecastReport {
    command: String,
    config_hash: String,
    seed: u64,
    val: SplitMetrics,
    test: SplitMetrics,
}

fn eval_split(
    params: &ModelParams,
    ds: &TimeSeriesDataset,
    split: SplitName,
    input_len: usize,
    horizon: usize,
    stride: usize,
    hcfg: &HeadTrainConfig,
) -> Result<SplitMetrics> {
    let windows = make_forecast_windows(ds, split, input_len, horizon, stride)?;
    let m = evaluate_forecast(params, &windows, hcfg)?;
    Ok(SplitMetrics {
        mse: m.mse,
        mae: m.mae,
        windows: m.windows,
    })
}

/// Shared driver for `finetune` (pretrained weights in) and `supervised`
/// (random init). Probes the head, optionally fine-tunes end to end, then
/// evaluates on the validation and test splits.
fn train_forecast_command(cfg: &ConfigMap, command: &str) -> Result<()> {
    let supervised = command == "supervised";
    let out = out_dir(cfg, command);
    let seed = cfg.get_parse("seed", 0u64)?;
    let input_len = cfg.get_parse("input_len", 512usize)?;
    let horizon = cfg.get_parse("horizon", 96usize)?;
    let pad: PadMode = match cfg.get_str("pad", "none").as_str() {
        "none" => PadMode::None,
        "replicate" => PadMode::ReplicateLast,
        other => bail!("unknown pad mode {other:?}"),
    };

    let (mut params, patch_len) = if supervised {
        let kind: EncoderKind = cfg.get_str("kind", "mlp").parse()?;
        let patch_len = cfg.get_parse("patch_len", 12usize)?;
        let dim = cfg.get_parse("dim", 128usize)?;
        let mut init_rng = RngStream::substream(seed, "init");
        let stride_for_n = cfg.get_parse("stride", HeadTrainConfig::supervised_stride(patch_len))?;
        let n = padded_num_patches(input_len, patch_len, stride_for_n, pad)?;
        (
            ModelParams::init(kind, patch_len, dim, n, 0.0, &mut init_rng)?,
            patch_len,
        )
    } else {
        let weights = PathBuf::from(cfg.require("weights")?);
        let saved = load_params(&weights)
            .with_context(|| format!("loading weights {}", weights.display()))?;
        let patch_len = saved.header.patch_len;
        (saved.params, patch_len)
    };

    let default_stride = if supervised {
        HeadTrainConfig::supervised_stride(patch_len)
    } else {
        patch_len
    };
    let probe_epochs = cfg.get_parse("probe_epochs", if supervised { 0 } else { 10usize })?;
    let hcfg = HeadTrainConfig {
        patch_len,
        stride: cfg.get_parse("stride", default_stride)?,
        pad_mode: pad,
        repr_layer: cfg.get_str("repr", "z2").parse()?,
        head_dropout: cfg.get_parse("head_dropout", 0.2)?,
        batch_size: cfg.get_parse("batch_size", 64usize)?,
        probe_epochs,
        finetune_epochs: if supervised {
            Some(cfg.get_parse("epochs", 20usize)?)
        } else {
            cfg.get_parse_opt("finetune_epochs")?
        },
        lr: cfg.get_parse("lr", 1e-4)?,
        seed,
    };
    let lp_only = if supervised { false } else { cfg.get_bool("lp_only", false)? };
    let train_stride = cfg.get_parse("train_stride", 1usize)?;
    let eval_stride = cfg.get_parse("eval_stride", 1usize)?;
    let ds = load_dataset(cfg)?;
    cfg.finish()?;
    hcfg.validate()?;

    let train_windows =
        make_forecast_windows(&ds, SplitName::Train, input_len, horizon, train_stride)?;
    let n = padded_num_patches(input_len, hcfg.patch_len, hcfg.stride, hcfg.pad_mode)?;
    let mut head_rng = RngStream::substream(seed, "head");
    params.attach_forecast_head(n, horizon, &mut head_rng);
    let prepared = prepare_forecast_windows(&train_windows, &hcfg)?;
    let mut log = |stage: &str, epoch: usize, loss: f64| {
        println!("{command}: stage={stage} epoch={epoch} loss={loss}");
    };
    if hcfg.probe_epochs > 0 {
        linear_probe_forecast(&mut params, &prepared, &hcfg, &mut log)?;
    }
    if !lp_only {
        full_finetune_forecast(&mut params, &prepared, &hcfg, &mut log)?;
    }

    let report = ForecastReport {
        command: command.to_string(),
        config_hash: cfg.content_hash(),
        seed,
        val: eval_split(&params, &ds, SplitName::Val, input_len, horizon, eval_stride, &hcfg)?,
        test: eval_split(&params, &ds, SplitName::Test, input_len, horizon, eval_stride, &hcfg)?,
    };

    fs::create_dir_all(&out)?;
    save_params(&params, seed, &out.join("weights.json"))?;
    write_json(&out.join("metrics.json"), &report)?;
    write_run_meta(&out, command, cfg, seed)?;
    println!(
        "{command}: val_mse={} test_mse={} test_mae={}",
        report.val.mse, report.test.mse, report.test.mae
    );
    Ok(())
}

pub fn cmd_finetune(cfg: &ConfigMap) -> Result<()> {
    train_forecast_command(cfg, "finetune")
}

pub fn cmd_supervised(cfg: &ConfigMap) -> Result<()> {
    train_forecast_command(cfg, "supervised")
}

pub fn cmd_eval(cfg: &ConfigMap) -> Result<()> {
    let out = out_dir(cfg, "eval");
    let weights = PathBuf::from(cfg.require("weights")?);
    let input_len = cfg.get_parse("input_len", 512usize)?;
    let horizon = cfg.get_parse("horizon", 96usize)?;
    let split: SplitName = cfg.get_str("split", "test").parse()?;
    let eval_stride = cfg.get_parse("eval_stride", 1usize)?;
    let saved = load_params(&weights)
        .with_context(|| format!("loading weights {}", weights.display()))?;
    let patch_len = saved.header.patch_len;
    let hcfg = HeadTrainConfig {
        patch_len,
        stride: cfg.get_parse("stride", patch_len)?,
        pad_mode: match cfg.get_str("pad", "none").as_str() {
            "none" => PadMode::None,
            "replicate" => PadMode::ReplicateLast,
            other => bail!("unknown pad mode {other:?}"),
        },
        repr_layer: cfg.get_str("repr", "z2").parse()?,
        ..Default::default()
    };
    let ds = load_dataset(cfg)?;
    cfg.finish()?;

    let windows = make_forecast_windows(&ds, split, input_len, horizon, eval_stride)?;
    let m = evaluate_forecast(&saved.params, &windows, &hcfg)?;

    #[derive(Serialize)]
    struct EvalReport {
        command: String,
        config_hash: String,
        seed: u64,
        metrics: SplitMetrics,
    }
    let report = EvalReport {
        command: "eval".into(),
        config_hash: cfg.content_hash(),
        seed: saved.header.seed,
        metrics: SplitMetrics {
            mse: m.mse,
            mae: m.mae,
            windows: m.windows,
        },
    };
    fs::create_dir_all(&out)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_run_meta(&out, "eval", cfg, saved.header.seed)?;
    println!("eval: mse={} mae={} windows={}", m.mse, m.mae, m.windows);
    Ok(())
}

fn write_labeled_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    let len = set.series.first().map(|s| s.rows).unwrap_or(0);
    let mut f = fs::File::create(path)?;
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..len).map(|t| format!("v{t}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (series, label) in set.series.iter().zip(&set.labels) {
        if series.cols != 1 {
            bail!("labeled toy export expects single-channel series");
        }
        let mut row = vec![label.to_string()];
        row.extend(series.data.iter().map(|v| format!("{v}")));
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn cmd_toygen(cfg: &ConfigMap) -> Result<()> {
    let mode = cfg.get_str("mode", "shift");
    let out = out_dir(cfg, "toygen");
    let seed = cfg.get_parse("seed", 0u64)?;
    match mode.as_str() {
        "shift" => {
            let toy = ShiftToyConfig {
                train_slope: cfg.get_parse("train_slope", 0.01)?,
                train_amp: cfg.get_parse("train_amp", 1.0)?,
                period: cfg.get_parse("period", 24.0)?,
                len: cfg.get_parse("len", 480usize)?,
                noise_std: cfg.get_parse("noise_std", 0.1)?,
            };
            cfg.finish()?;
            let grid = ShiftGrid::default_for(&toy);
            let mut rng = RngStream::substream(seed, "shift-toy");
            let (train, tests) = gen_shift_toy(&toy, &grid, &mut rng)?;
            fs::create_dir_all(&out)?;
            write_csv(&train, &out.join("shift_train.csv"))?;
            let mut grid_file = fs::File::create(out.join("grid.csv"))?;
            writeln!(grid_file, "index,slope,amp,slope_delta,amp_delta,file")?;
            for (k, (slope, amp, ds)) in tests.iter().enumerate() {
                let file = format!("shift_test_{k:03}.csv");
                write_csv(ds, &out.join(&file))?;
                writeln!(
                    grid_file,
                    "{k},{slope},{amp},{},{},{file}",
                    slope - toy.train_slope,
                    amp - toy.train_amp
                )?;
            }
            write_run_meta(&out, "toygen", cfg, seed)?;
            println!("toygen: wrote shift_train.csv and {} test series", tests.len());
        }
        "classtoy" => {
            let num_classes = cfg.get_parse("num_classes", 10usize)?;
            let per_class = cfg.get_parse("per_class", 20usize)?;
            let series_len = cfg.get_parse("series_len", 64usize)?;
            let noise_std = cfg.get_parse("noise_std", 0.3)?;
            cfg.finish()?;
            let mut train_rng = RngStream::substream(seed, "class-train");
            let train = gen_class_toy(num_classes, per_class, series_len, noise_std, &mut train_rng)?;
            let mut test_rng = RngStream::substream(seed, "class-test");
            let test = gen_class_toy(num_classes, per_class, series_len, noise_std, &mut test_rng)?;
            fs::create_dir_all(&out)?;
            write_labeled_csv(&out.join("classtoy_train.csv"), &train)?;
            write_labeled_csv(&out.join("classtoy_test.csv"), &test)?;
            write_run_meta(&out, "toygen", cfg, seed)?;
            println!(
                "toygen: wrote {} train and {} test labeled series",
                train.len(),
                test.len()
            );
        }
        other => bail!("unknown toygen mode {other:?} (expected shift or classtoy)"),
    }
    Ok(())
}

/// Embeddings CSV: one row per (series, channel, patch).
fn write_embeddings(
    path: &Path,
    params: &ModelParams,
    series: &[Matrix],
    patch_len: usize,
    stride: usize,
    pad: PadMode,
    repr: ReprLayer,
) -> Result<usize> {
    let mut f = fs::File::create(path)?;
    let header: Vec<String> = ["series_id", "channel", "patch_index"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..params.dim).map(|d| format!("d{d}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    let mut rows = 0usize;
    for (sid, s) in series.iter().enumerate() {
        let (norm, _) = patchcast_core::data::instance_normalize(s);
        let per_channel = patchify(&norm, patch_len, stride, pad)?;
        for (ch, x) in per_channel.iter().enumerate() {
            let cache = encode_one(params, x)?;
            let z = match repr {
                ReprLayer::Z1 => &cache.z1,
                ReprLayer::Z2 => &cache.z2,
            };
            for p in 0..z.rows {
                let mut row = vec![sid.to_string(), ch.to_string(), p.to_string()];
                row.extend(z.row(p).iter().map(|v| format!("{v}")));
                writeln!(f, "{}", row.join(","))?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

pub fn cmd_experiment(mode: &str, cfg: &ConfigMap) -> Result<()> {
    match mode {
        "shift" => cmd_experiment_shift(cfg),
        "classtoy" => cmd_experiment_classtoy(cfg),
        other => bail!("unknown experiment {other:?} (expected shift or classtoy)"),
    }
}

fn cmd_experiment_shift(cfg: &ConfigMap) -> Result<()> {
    let out = out_dir(cfg, "experiment-shift");
    let defaults = ShiftExperimentConfig::default();
    let toy = ShiftToyConfig {
        train_slope: cfg.get_parse("train_slope", defaults.toy.train_slope)?,
        train_amp: cfg.get_parse("train_amp", defaults.toy.train_amp)?,
        period: cfg.get_parse("period", defaults.toy.period)?,
        len: cfg.get_parse("len", defaults.toy.len)?,
        noise_std: cfg.get_parse("noise_std", defaults.toy.noise_std)?,
    };
    let ecfg = ShiftExperimentConfig {
        grid: ShiftGrid::default_for(&toy),
        toy,
        seeds: cfg.get_list("seeds", &[0u64])?,
        input_len: cfg.get_parse("input_len", defaults.input_len)?,
        horizon: cfg.get_parse("horizon", defaults.horizon)?,
        patch_len: cfg.get_parse("patch_len", defaults.patch_len)?,
        dim: cfg.get_parse("dim", defaults.dim)?,
        dropout: cfg.get_parse("dropout", defaults.dropout)?,
        pi_kind: cfg.get_str("pi_kind", "mlp").parse()?,
        pd_kind: cfg.get_str("pd_kind", "mixer").parse()?,
        pretrain_epochs: cfg.get_parse("pretrain_epochs", defaults.pretrain_epochs)?,
        probe_epochs: cfg.get_parse("probe_epochs", defaults.probe_epochs)?,
        pretrain_lr: cfg.get_parse("pretrain_lr", defaults.pretrain_lr)?,
        probe_lr: cfg.get_parse("probe_lr", defaults.probe_lr)?,
        batch_size: cfg.get_parse("batch_size", defaults.batch_size)?,
    };
    let seed = *ecfg.seeds.first().unwrap_or(&0);
    cfg.finish()?;

    let points = run_shift_experiment(&ecfg)?;

    fs::create_dir_all(&out)?;
    let mut f = fs::File::create(out.join("shift_grid.csv"))?;
    writeln!(f, "slope_delta,amp_delta,mse_pi,mse_pd,gap")?;
    for p in &points {
        writeln!(
            f,
            "{},{},{},{},{}",
            p.slope - ecfg.toy.train_slope,
            p.amp - ecfg.toy.train_amp,
            p.mse_pi,
            p.mse_pd,
            p.gap
        )?;
    }
    write_run_meta(&out, "experiment-shift", cfg, seed)?;

    let nonneg = points.iter().filter(|p| p.gap >= 0.0).count();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].shift_score.total_cmp(&points[b].shift_score));
    let k = 10.min(points.len());
    let least: f64 = order[..k].iter().map(|&i| points[i].gap).sum::<f64>() / k as f64;
    let most: f64 =
        order[points.len() - k..].iter().map(|&i| points[i].gap).sum::<f64>() / k as f64;
    println!(
        "experiment shift: points={} gap_nonneg={} least_shifted_gap={} most_shifted_gap={}",
        points.len(),
        nonneg,
        least,
        most
    );
    Ok(())
}

fn cmd_experiment_classtoy(cfg: &ConfigMap) -> Result<()> {
    let out = out_dir(cfg, "experiment-classtoy");
    let defaults = ClassToyConfig::default();
    let ccfg = ClassToyConfig {
        num_classes: cfg.get_parse("num_classes", defaults.num_classes)?,
        per_class_train: cfg.get_parse("per_class_train", defaults.per_class_train)?,
        per_class_test: cfg.get_parse("per_class_test", defaults.per_class_test)?,
        series_len: cfg.get_parse("series_len", defaults.series_len)?,
        noise_std: cfg.get_parse("noise_std", defaults.noise_std)?,
        patch_len: cfg.get_parse("patch_len", defaults.patch_len)?,
        dim: cfg.get_parse("dim", defaults.dim)?,
        dropout: cfg.get_parse("dropout", defaults.dropout)?,
        agg: cfg.get_str("agg", "max").parse::<Aggregate>()?,
        pretrain_epochs: cfg.get_parse("pretrain_epochs", defaults.pretrain_epochs)?,
        probe_epochs: cfg.get_parse("probe_epochs", defaults.probe_epochs)?,
        pretrain_lr: cfg.get_parse("pretrain_lr", defaults.pretrain_lr)?,
        probe_lr: cfg.get_parse("probe_lr", defaults.probe_lr)?,
        batch_size: cfg.get_parse("batch_size", defaults.batch_size)?,
        seed: cfg.get_parse("seed", defaults.seed)?,
    };
    cfg.finish()?;

    let res = run_class_probe(&ccfg)?;

    fs::create_dir_all(&out)?;
    let rows = write_embeddings(
        &out.join("embeddings.csv"),
        &res.pretrained,
        &res.test.series,
        ccfg.patch_len,
        ccfg.patch_len,
        PadMode::None,
        ReprLayer::Z2,
    )?;
    let mut labels = fs::File::create(out.join("labels.csv"))?;
    writeln!(labels, "series_id,label")?;
    for (sid, label) in res.test.labels.iter().enumerate() {
        writeln!(labels, "{sid},{label}")?;
    }
    #[derive(Serialize)]
    struct ClassReport {
        command: String,
        config_hash: String,
        seed: u64,
        pretrained_accuracy: f64,
        random_accuracy: f64,
        embedding_rows: usize,
    }
    write_json(
        &out.join("result.json"),
        &ClassReport {
            command: "experiment-classtoy".into(),
            config_hash: cfg.content_hash(),
            seed: ccfg.seed,
            pretrained_accuracy: res.pretrained_accuracy,
            random_accuracy: res.random_accuracy,
            embedding_rows: rows,
        },
    )?;
    write_run_meta(&out, "experiment-classtoy", cfg, ccfg.seed)?;
    println!(
        "experiment classtoy: pretrained_accuracy={} random_accuracy={}",
        res.pretrained_accuracy, res.random_accuracy
    );
    Ok(())
}

pub fn cmd_export_embeddings(cfg: &ConfigMap) -> Result<()> {
    let out = out_dir(cfg, "embeddings");
    let weights = PathBuf::from(cfg.require("weights")?);
    let input_len = cfg.get_parse("input_len", 512usize)?;
    let window_stride = cfg.get_parse("window_stride", input_len)?;
    let split: SplitName = cfg.get_str("split", "train").parse()?;
    let repr: ReprLayer = cfg.get_str("repr", "z2").parse()?;
    let saved = load_params(&weights)
        .with_context(|| format!("loading weights {}", weights.display()))?;
    let patch_len = saved.header.patch_len;
    let stride = cfg.get_parse("stride", patch_len)?;
    let pad = match cfg.get_str("pad", "none").as_str() {
        "none" => PadMode::None,
        "replicate" => PadMode::ReplicateLast,
        other => bail!("unknown pad mode {other:?}"),
    };
    let ds = load_dataset(cfg)?;
    cfg.finish()?;

    let windows =
        patchcast_core::data::make_input_windows(&ds, split, input_len, window_stride)?;
    fs::create_dir_all(&out)?;
    let rows = write_embeddings(
        &out.join("embeddings.csv"),
        &saved.params,
        &windows,
        patch_len,
        stride,
        pad,
        repr,
    )?;
    write_run_meta(&out, "export-embeddings", cfg, saved.header.seed)?;
    println!("export-embeddings: series={} rows={rows}", windows.len());
    Ok(())
}

pub fn cmd_gradcheck(cfg: &ConfigMap) -> Result<()> {
    let instances = cfg.get_parse("instances", 2usize)?;
    let channels = cfg.get_parse("channels", 2usize)?;
    let num_patches = cfg.get_parse("num_patches", 4usize)?;
    let patch_len = cfg.get_parse("patch_len", 3usize)?;
    let dim = cfg.get_parse("dim", 5usize)?;
    let eps = cfg.get_parse("eps", 1e-4)?;
    let threshold = cfg.get_parse("threshold", 1e-4)?;
    let seed = cfg.get_parse("seed", 0u64)?;
    // negative-control hook: corrupt one analytic gradient entry
    let corrupt = cfg.get_bool("corrupt", false)?;
    let tasks: Vec<Task> = cfg
        .get_str("tasks", "pi,pi+cl,pd")
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<patchcast_core::Result<_>>()?;
    let kinds: Vec<EncoderKind> = cfg
        .get_str("kinds", "linear,mlp,mixer")
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<patchcast_core::Result<_>>()?;
    cfg.finish()?;

    let mut data_rng = RngStream::substream(seed, "gradcheck-data");
    let windows: Vec<Matrix> = (0..instances)
        .map(|_| Matrix::uniform_init(num_patches * patch_len, channels, 1.0, &mut data_rng))
        .collect();
    let batch = patchify_batch(&windows, patch_len, patch_len, PadMode::None)?;
    let mut mask_rng = RngStream::substream(seed, "masking");
    let masks = complementary_masks(instances, channels, num_patches, &mut mask_rng)?;

    let mut failures = Vec::new();
    for &task in &tasks {
        for &kind in &kinds {
            let mut init_rng = RngStream::substream(seed, "init");
            let mut params =
                ModelParams::init(kind, patch_len, dim, num_patches, 0.0, &mut init_rng)?;
            // zero-initialized biases put ReLU inputs exactly on the kink for
            // zero patches, where central differences disagree with the
            // subgradient; jitter all parameters off that set
            let mut jitter_rng = RngStream::substream(seed, "jitter");
            for t in params.tensors_mut() {
                for v in &mut t.data {
                    *v += jitter_rng.uniform(-0.05, 0.05);
                }
            }
            let loss_cfg = LossConfig {
                task,
                cl_level_reduce: ClLevelReduce::Mean,
                training: false,
            };
            let mut dr = RngStream::substream(seed, "dropout");
            let (_, mut grads) = task_loss_grad(&params, &batch, &masks, &loss_cfg, &mut dr)?;
            if corrupt {
                grads.encoder.w1.data[0] += 1.0;
            }
            let analytic = grads.flatten();
            let mut theta = params.flatten();
            let template = params.clone();
            let report = finite_difference_report(
                |t| {
                    let mut p = template.clone();
                    p.unflatten(t)?;
                    let mut r = RngStream::substream(seed, "dropout");
                    Ok(task_loss_grad(&p, &batch, &masks, &loss_cfg, &mut r)?.0.total)
                },
                &mut theta,
                &analytic,
                eps,
            )?;
            let pass = report.max_rel_err < threshold;
            let where_str = if pass {
                String::new()
            } else {
                match params.locate_flat_index(report.worst_index) {
                    Some((name, off)) => format!(" worst_param={name}[{off}]"),
                    None => String::new(),
                }
            };
            println!(
                "gradcheck: task={} kind={:?} max_rel_err={:e} {}{where_str}",
                task.as_str(),
                kind,
                report.max_rel_err,
                if pass { "pass" } else { "FAIL" },
            );
            if !pass {
                failures.push(format!("{}/{:?}{where_str}", task.as_str(), kind));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("gradient check failed for: {}", failures.join(", ")))
    }
}
