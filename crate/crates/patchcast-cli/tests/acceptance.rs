//! Acceptance gate: one test (and one printed pass/fail line) per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use patchcast_core::data::{
    chronological_split, complementary_masks, instance_normalize, make_forecast_windows,
    patchify_batch, PadMode, ShiftToyConfig, SplitName, TimeSeriesDataset,
};
use patchcast_core::experiments::{
    run_class_probe, run_shift_experiment, ClassToyConfig, ShiftExperimentConfig,
};
use patchcast_core::finetune::{
    confusion_matrix, evaluate_forecast, linear_probe_forecast, metrics_from_confusion,
    padded_num_patches, prepare_forecast_windows, HeadTrainConfig,
};
use patchcast_core::gradcheck::finite_difference_check;
use patchcast_core::model::{encode, EncoderKind, ModelParams, ReprLayer};
use patchcast_core::pretrain::{
    contrastive_level_loss, level_sizes, run_pretraining, task_loss_grad, ClLevelReduce,
    LossConfig, PretrainConfig, Task,
};
use patchcast_core::{Matrix, RngStream};

fn report(criterion: u32, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn random_windows(instances: usize, rows: usize, channels: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = RngStream::substream(seed, "acceptance-data");
    (0..instances)
        .map(|_| Matrix::uniform_init(rows, channels, 1.0, &mut rng))
        .collect()
}

/// Criterion 1: analytic gradients match finite differences for every
/// (task, encoder kind) combination on B=2, C=2, N=4, P=3, D=5.
#[test]
fn criterion_01_gradient_fidelity() {
    let start = Instant::now();
    let (instances, channels, n, p, d) = (2usize, 2usize, 4usize, 3usize, 5usize);
    let windows = random_windows(instances, n * p, channels, 1);
    let batch = patchify_batch(&windows, p, p, PadMode::None).unwrap();
    let mut mask_rng = RngStream::substream(1, "masking");
    let masks = complementary_masks(instances, channels, n, &mut mask_rng).unwrap();

    let mut worst: f64 = 0.0;
    for task in [Task::Pi, Task::PiCl, Task::Pd] {
        for kind in [EncoderKind::Linear, EncoderKind::Mlp, EncoderKind::Mixer] {
            let mut init_rng = RngStream::substream(1, "init");
            let mut params = ModelParams::init(kind, p, d, n, 0.0, &mut init_rng).unwrap();
            // keep ReLU inputs off the kink (zero biases + zero patches sit
            // exactly on it, where finite differences are one-sided)
            let mut jitter = RngStream::substream(1, "jitter");
            for t in params.tensors_mut() {
                for v in &mut t.data {
                    *v += jitter.uniform(-0.05, 0.05);
                }
            }
            let cfg = LossConfig {
                task,
                cl_level_reduce: ClLevelReduce::Mean,
                training: false,
            };
            let mut dr = RngStream::substream(1, "dropout");
            let (_, grads) = task_loss_grad(&params, &batch, &masks, &cfg, &mut dr).unwrap();
            let analytic = grads.flatten();
            let mut theta = params.flatten();
            let template = params.clone();
            let err = finite_difference_check(
                |t| {
                    let mut q = template.clone();
                    q.unflatten(t)?;
                    let mut r = RngStream::substream(1, "dropout");
                    Ok(task_loss_grad(&q, &batch, &masks, &cfg, &mut r)?.0.total)
                },
                &mut theta,
                &analytic,
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
            assert!(err < 1e-4, "task {:?} kind {kind:?}: rel err {err}", task);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst < 1e-4 && secs < 30.0,
        &format!("max rel err {worst:.3e} over 9 combinations in {secs:.1}s"),
    );
}

/// Criterion 2: masked plus complementary squared error equals the full sum.
#[test]
fn criterion_02_masking_identity() {
    let mut rng = RngStream::substream(2, "acceptance");
    let rows = 64usize;
    let cols = 6usize;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = Matrix::uniform_init(rows, cols, 1.0, &mut rng);
        let y = Matrix::uniform_init(rows, cols, 1.0, &mut rng);
        let mask: Vec<u8> = (0..rows).map(|_| (rng.next_f64() < 0.5) as u8).collect();
        let mut full = 0.0;
        let mut masked = 0.0;
        let mut comp = 0.0;
        for r in 0..rows {
            let mut e = 0.0;
            for c in 0..cols {
                let dv = x.at(r, c) - y.at(r, c);
                e += dv * dv;
            }
            full += e;
            if mask[r] == 1 {
                masked += e;
            } else {
                comp += e;
            }
        }
        let rel = ((masked + comp) - full).abs() / full.max(1e-300);
        worst = worst.max(rel);
    }
    report(2, worst <= 1e-12, &format!("worst relative gap {worst:.3e} over 100 masks"));
}

/// Brute-force softmax-pair contrastive loss over a 2N x D stack.
fn brute_force_cl(stack: &Matrix) -> f64 {
    let two_n = stack.rows;
    let half = two_n / 2;
    let dot = |a: usize, b: usize| -> f64 {
        stack.row(a).iter().zip(stack.row(b)).map(|(x, y)| x * y).sum()
    };
    let mut total = 0.0;
    for n in 0..two_n {
        let pos = (n + half) % two_n;
        let mut den = 0.0;
        for s in 0..two_n {
            if s != n {
                den += dot(n, s).exp();
            }
        }
        total += -(dot(n, pos).exp() / den).ln();
    }
    total / (2.0 * half as f64)
}

/// Criterion 3: contrastive loss matches enumeration; all-equal embeddings
/// give log(2N-1); the N=1 level is exactly zero.
#[test]
fn criterion_03_contrastive_correctness() {
    let mut rng = RngStream::substream(3, "acceptance");
    // B = C = 1, N = 2 against brute force
    let v1 = Matrix::uniform_init(2, 5, 1.0, &mut rng);
    let v2 = Matrix::uniform_init(2, 5, 1.0, &mut rng);
    let got = contrastive_level_loss(std::slice::from_ref(&v1), std::slice::from_ref(&v2)).unwrap();
    let mut stack_data = v1.data.clone();
    stack_data.extend_from_slice(&v2.data);
    let stack = Matrix::from_vec(4, 5, stack_data).unwrap();
    let want = brute_force_cl(&stack);
    let brute_err = (got - want).abs();

    // all-equal embeddings -> log(2N - 1)
    let mut equal_err: f64 = 0.0;
    for n in [2usize, 4, 7] {
        let mut m = Matrix::zeros(n, 3);
        m.fill(0.9);
        let loss =
            contrastive_level_loss(std::slice::from_ref(&m), std::slice::from_ref(&m)).unwrap();
        equal_err = equal_err.max((loss - ((2 * n - 1) as f64).ln()).abs());
    }

    // N = 1 -> exactly zero
    let a = Matrix::uniform_init(1, 5, 1.0, &mut rng);
    let b = Matrix::uniform_init(1, 5, 1.0, &mut rng);
    let single = contrastive_level_loss(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();

    report(
        3,
        brute_err < 1e-10 && equal_err < 1e-10 && single == 0.0,
        &format!("brute-force err {brute_err:.3e}, all-equal err {equal_err:.3e}, N=1 loss {single}"),
    );
}

/// Criterion 4: the pooling hierarchy for N=42.
#[test]
fn criterion_04_hierarchy_shape() {
    let sizes = level_sizes(42);
    report(
        4,
        sizes == vec![42, 21, 10, 5, 2, 1],
        &format!("level sizes for N=42: {sizes:?}"),
    );
}

/// Criterion 5: PI kinds are bitwise patch- and channel-independent; the
/// mixer is patch-dependent.
#[test]
fn criterion_05_independence() {
    let (n, p, d) = (4usize, 3usize, 5usize);
    let w = random_windows(1, n * p, 2, 5).pop().unwrap();
    let mut perturbed = w.clone();
    *perturbed.at_mut(0, 0) += 1.0; // inside patch 0 of channel 0
    let batch = patchify_batch(std::slice::from_ref(&w), p, p, PadMode::None).unwrap();
    let batch_p = patchify_batch(std::slice::from_ref(&perturbed), p, p, PadMode::None).unwrap();

    let mut pass = true;
    for kind in [EncoderKind::Linear, EncoderKind::Mlp] {
        let mut init_rng = RngStream::substream(5, "init");
        let params = ModelParams::init(kind, p, d, n, 0.0, &mut init_rng).unwrap();
        let (z1a, z2a) = encode(&params, &batch).unwrap();
        let (z1b, z2b) = encode(&params, &batch_p).unwrap();
        // untouched patches of channel 0: bitwise equal
        for row in 1..n {
            pass &= z1a[0].row(row) == z1b[0].row(row) && z2a[0].row(row) == z2b[0].row(row);
        }
        // untouched channel 1: bitwise equal
        pass &= z1a[1] == z1b[1] && z2a[1] == z2b[1];
        pass &= z2a[0].row(0) != z2b[0].row(0);
    }

    let mut init_rng = RngStream::substream(5, "init");
    let mixer = ModelParams::init(EncoderKind::Mixer, p, d, n, 0.0, &mut init_rng).unwrap();
    let (_, z2a) = encode(&mixer, &batch).unwrap();
    let (_, z2b) = encode(&mixer, &batch_p).unwrap();
    let mixer_dependent = z2a[0].row(n - 1) != z2b[0].row(n - 1);

    report(
        5,
        pass && mixer_dependent,
        &format!("PI bitwise independence {pass}, mixer patch dependence {mixer_dependent}"),
    );
}

fn toy_train_dataset(seed: u64) -> TimeSeriesDataset {
    let toy = ShiftToyConfig::default();
    let grid = patchcast_core::data::ShiftGrid {
        slopes: vec![toy.train_slope],
        amps: vec![toy.train_amp],
    };
    let mut rng = RngStream::substream(seed, "shift-toy");
    let (mut train, _) = patchcast_core::data::gen_shift_toy(&toy, &grid, &mut rng).unwrap();
    chronological_split(&mut train, (0.7, 0.15, 0.15)).unwrap();
    train
}

fn downstream_probe_mse(ds: &TimeSeriesDataset, dropout: f64, seed: u64) -> f64 {
    let (input_len, horizon, p, d) = (48usize, 12usize, 12usize, 32usize);
    let pcfg = PretrainConfig {
        task: Task::Pi,
        kind: EncoderKind::Mlp,
        input_len,
        patch_len: p,
        stride: p,
        dim: d,
        dropout,
        cl_level_reduce: ClLevelReduce::Mean,
        batch_size: 64,
        epochs: 200,
        lr: 1e-3,
        seed,
        window_stride: p,
    };
    let mut params = run_pretraining(&pcfg, ds, |_| {}).unwrap();
    let hcfg = HeadTrainConfig {
        patch_len: p,
        stride: p,
        pad_mode: PadMode::None,
        repr_layer: ReprLayer::Z2,
        head_dropout: 0.0,
        batch_size: 64,
        probe_epochs: 20,
        finetune_epochs: None,
        lr: 1e-2,
        seed,
    };
    let train_windows =
        make_forecast_windows(ds, SplitName::Train, input_len, horizon, 6).unwrap();
    let n = padded_num_patches(input_len, p, p, PadMode::None).unwrap();
    let mut head_rng = RngStream::substream(seed, "head");
    params.attach_forecast_head(n, horizon, &mut head_rng);
    let prepared = prepare_forecast_windows(&train_windows, &hcfg).unwrap();
    linear_probe_forecast(&mut params, &prepared, &hcfg, &mut |_, _, _| {}).unwrap();
    let test_windows =
        make_forecast_windows(ds, SplitName::Test, input_len, horizon, 1).unwrap();
    evaluate_forecast(&params, &test_windows, &hcfg).unwrap().mse
}

/// Longer toy series for the dropout comparison, split 6:2:2.
fn dropout_study_dataset() -> TimeSeriesDataset {
    let toy = patchcast_core::data::ShiftToyConfig {
        len: 960,
        ..Default::default()
    };
    let grid = patchcast_core::data::ShiftGrid::default_for(&toy);
    let mut rng = RngStream::substream(0, "shift-toy");
    let (mut train, _) = patchcast_core::data::gen_shift_toy(&toy, &grid, &mut rng).unwrap();
    chronological_split(&mut train, (0.6, 0.2, 0.2)).unwrap();
    train
}

/// Criterion 6: the trivial solution is reachable without dropout, and
/// dropout improves the downstream value of wide representations.
#[test]
fn criterion_06_trivial_solution() {
    // part a: linear encoder, D = P = 12, dropout 0, loss -> ~0 fast
    let ds = toy_train_dataset(6);
    let pcfg = PretrainConfig {
        task: Task::Pi,
        kind: EncoderKind::Linear,
        input_len: 48,
        patch_len: 12,
        stride: 12,
        dim: 12,
        dropout: 0.0,
        cl_level_reduce: ClLevelReduce::Mean,
        batch_size: 64,
        epochs: 2000,
        lr: 1e-2,
        seed: 6,
        window_stride: 12,
    };
    let mut best = f64::INFINITY;
    let mut steps = 0usize;
    let mut steps_to_target = None;
    run_pretraining(&pcfg, &ds, |log| {
        steps += 1;
        if log.recon < best {
            best = log.recon;
        }
        if best < 1e-3 && steps_to_target.is_none() {
            steps_to_target = Some(steps);
        }
    })
    .unwrap();
    let part_a = steps_to_target.map(|s| s <= 2000).unwrap_or(false);

    // part b: with D = 32, dropout 0.2 beats dropout 0 downstream,
    // averaged over seeds 0, 1, 2 (the per-seed gap is small and noisy,
    // so the directional claim is asserted on the seed mean)
    let study = dropout_study_dataset();
    let mut mean_with = 0.0;
    let mut mean_without = 0.0;
    let mut detail_b = String::new();
    for seed in [0u64, 1, 2] {
        let with = downstream_probe_mse(&study, 0.2, seed);
        let without = downstream_probe_mse(&study, 0.0, seed);
        detail_b.push_str(&format!(" seed{seed}: {with:.4} vs {without:.4}"));
        mean_with += with / 3.0;
        mean_without += without / 3.0;
    }
    let part_b = mean_with < mean_without;
    detail_b.push_str(&format!(" mean: {mean_with:.4} vs {mean_without:.4}"));
    report(
        6,
        part_a && part_b,
        &format!(
            "trivial recon {best:.2e} after {:?} steps; dropout-vs-none MSE{}",
            steps_to_target, detail_b
        ),
    );
}

/// Criterion 7: on the 98-point shift grid the PI task beats the PD task
/// almost everywhere, more so under stronger shift.
#[test]
fn criterion_07_distribution_shift() {
    let start = Instant::now();
    let cfg = ShiftExperimentConfig {
        seeds: vec![0, 1, 2],
        ..Default::default()
    };
    let points = run_shift_experiment(&cfg).unwrap();
    assert_eq!(points.len(), 98);
    let nonneg = points.iter().filter(|p| p.gap >= 0.0).count();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].shift_score.total_cmp(&points[b].shift_score));
    let least: f64 = order[..10].iter().map(|&i| points[i].gap).sum::<f64>() / 10.0;
    let most: f64 = order[88..].iter().map(|&i| points[i].gap).sum::<f64>() / 10.0;
    let secs = start.elapsed().as_secs_f64();
    report(
        7,
        nonneg * 100 >= 80 * points.len() && most > least && secs < 600.0,
        &format!(
            "gap >= 0 on {nonneg}/98 points; most-shifted mean gap {most:.3} vs least-shifted {least:.3}; {secs:.1}s"
        ),
    );
}

/// Criterion 8: a linear probe on PI-pretrained embeddings beats one on a
/// frozen random encoder by at least 10 points on the 10-class toy.
#[test]
fn criterion_08_class_structure() {
    let mut pass = true;
    let mut detail = String::new();
    for seed in [0u64, 1, 2] {
        let cfg = ClassToyConfig {
            seed,
            ..Default::default()
        };
        let res = run_class_probe(&cfg).unwrap();
        let gap_pp = (res.pretrained_accuracy - res.random_accuracy) * 100.0;
        detail.push_str(&format!(
            " seed{seed}: {:.1}% vs {:.1}% (gap {gap_pp:.1}pp)",
            res.pretrained_accuracy * 100.0,
            res.random_accuracy * 100.0
        ));
        pass &= gap_pp >= 10.0;
    }
    report(8, pass, detail.trim());
}

/// Criterion 9: metrics match independent recomputation on small fixtures.
#[test]
fn criterion_09_metric_oracles() {
    // classification: confusion [[1,1],[0,2]]
    let truth = vec![0usize, 0, 1, 1];
    let pred = vec![0usize, 1, 1, 1];
    let conf = confusion_matrix(&truth, &pred, 2).unwrap();
    let m = metrics_from_confusion(conf.clone());
    let class_ok = conf == vec![vec![1, 1], vec![0, 2]]
        && m.accuracy == 0.75
        && m.macro_precision == (1.0 + 2.0 / 3.0) / 2.0
        && m.macro_recall == 0.75;

    // forecasting: a zero head predicts each window's channel mean after
    // denormalization; recompute MSE/MAE over 5 fixture windows by hand
    let ds = toy_train_dataset(9);
    let windows: Vec<_> = make_forecast_windows(&ds, SplitName::Train, 24, 6, 7)
        .unwrap()
        .into_iter()
        .take(5)
        .collect();
    assert_eq!(windows.len(), 5);
    let mut init_rng = RngStream::substream(9, "init");
    let mut params = ModelParams::init(EncoderKind::Mlp, 12, 8, 2, 0.0, &mut init_rng).unwrap();
    params.attach_forecast_head(2, 6, &mut init_rng);
    if let Some(patchcast_core::model::DownstreamHead::Forecast(h)) = &mut params.downstream {
        h.w.fill(0.0);
        h.b.fill(0.0);
    }
    let hcfg = HeadTrainConfig {
        patch_len: 12,
        stride: 12,
        head_dropout: 0.0,
        ..Default::default()
    };
    let got = evaluate_forecast(&params, &windows, &hcfg).unwrap();
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    for w in &windows {
        let (_, stats) = instance_normalize(&w.input);
        for c in 0..w.target.cols {
            for h in 0..w.target.rows {
                let dv = stats.mean[c] - w.target.at(h, c);
                se += dv * dv;
                ae += dv.abs();
                count += 1;
            }
        }
    }
    let forecast_ok = got.mse == se / count as f64 && got.mae == ae / count as f64;

    report(
        9,
        class_ok && forecast_ok,
        &format!("classification fixture exact: {class_ok}, forecast fixture exact: {forecast_ok}"),
    );
}

fn run_cli(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_patchcast"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("failed to run patchcast binary")
}

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

/// Criterion 10: identical config and seed reproduce outputs bitwise.
#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let gen = run_cli(
        &["toygen", "--set", "mode=shift", "--set", "len=600", "--set", "out=toy"],
        dir,
    );
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let pretrain_args = [
        "pretrain",
        "--set", "data=toy/shift_train.csv",
        "--set", "input_len=48",
        "--set", "patch_len=8",
        "--set", "dim=8",
        "--set", "epochs=3",
        "--set", "dropout=0.2",
        "--set", "out=pre",
    ];
    let first = run_cli(&pretrain_args, dir);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let weights1 = read_bytes(&dir.join("pre/weights.json"));
    let log1 = read_bytes(&dir.join("pre/log.jsonl"));
    let meta1 = read_bytes(&dir.join("pre/run.json"));
    let second = run_cli(&pretrain_args, dir);
    assert!(second.status.success());
    let pretrain_ok = weights1 == read_bytes(&dir.join("pre/weights.json"))
        && log1 == read_bytes(&dir.join("pre/log.jsonl"))
        && meta1 == read_bytes(&dir.join("pre/run.json"))
        && first.stdout == second.stdout;

    let finetune_args = [
        "finetune",
        "--set", "weights=pre/weights.json",
        "--set", "data=toy/shift_train.csv",
        "--set", "input_len=48",
        "--set", "horizon=8",
        "--set", "probe_epochs=2",
        "--set", "out=ft",
    ];
    let f1 = run_cli(&finetune_args, dir);
    assert!(f1.status.success(), "{}", String::from_utf8_lossy(&f1.stderr));
    let metrics1 = read_bytes(&dir.join("ft/metrics.json"));
    let fweights1 = read_bytes(&dir.join("ft/weights.json"));
    let f2 = run_cli(&finetune_args, dir);
    assert!(f2.status.success());
    let finetune_ok = metrics1 == read_bytes(&dir.join("ft/metrics.json"))
        && fweights1 == read_bytes(&dir.join("ft/weights.json"))
        && f1.stdout == f2.stdout;

    report(
        10,
        pretrain_ok && finetune_ok,
        &format!("pretrain bitwise {pretrain_ok}, finetune bitwise {finetune_ok}"),
    );
}

/// Criterion 11 (stretch, non-gating): full-scale replication on ETTh1.
/// Skips when the dataset is not present.
#[test]
fn criterion_11_etth1_replication() {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/ETTh1.csv");
    if !data.exists() {
        println!("criterion 11: SKIP - data/ETTh1.csv not present (stretch, non-gating)");
        return;
    }
    let schema = patchcast_core::data::CsvSchema {
        timestamp_col: Some("date".into()),
        value_cols: Vec::new(),
    };
    let mut ds = patchcast_core::data::load_csv(&data, &schema).unwrap();
    chronological_split(&mut ds, (0.6, 0.2, 0.2)).unwrap();
    let (input_len, horizon, p, d) = (512usize, 96usize, 12usize, 128usize);
    let pcfg = PretrainConfig {
        task: Task::PiCl,
        kind: EncoderKind::Mlp,
        input_len,
        patch_len: p,
        stride: p,
        dim: d,
        dropout: 0.2,
        cl_level_reduce: ClLevelReduce::Mean,
        batch_size: 64,
        epochs: 10,
        lr: 1e-4,
        seed: 0,
        window_stride: p,
    };
    let mut params = run_pretraining(&pcfg, &ds, |_| {}).unwrap();
    let hcfg = HeadTrainConfig {
        patch_len: p,
        stride: p,
        probe_epochs: 5,
        finetune_epochs: Some(10),
        seed: 0,
        ..Default::default()
    };
    let train_windows =
        make_forecast_windows(&ds, SplitName::Train, input_len, horizon, 1).unwrap();
    let n = padded_num_patches(input_len, p, p, PadMode::None).unwrap();
    let mut head_rng = RngStream::substream(0, "head");
    params.attach_forecast_head(n, horizon, &mut head_rng);
    let prepared = prepare_forecast_windows(&train_windows, &hcfg).unwrap();
    linear_probe_forecast(&mut params, &prepared, &hcfg, &mut |_, _, _| {}).unwrap();
    patchcast_core::finetune::full_finetune_forecast(&mut params, &prepared, &hcfg, &mut |_, _, _| {})
        .unwrap();
    let test_windows =
        make_forecast_windows(&ds, SplitName::Test, input_len, horizon, 1).unwrap();
    let mse = evaluate_forecast(&params, &test_windows, &hcfg).unwrap().mse;
    report(
        11,
        (mse - 0.367).abs() <= 0.03,
        &format!("ETTh1 H=96 fine-tuned MSE {mse:.4} (target 0.367 +- 0.03)"),
    );
}
