//! Pretraining objectives and the optimization loop.
//!
//! The patch-independent (PI) task autoencodes every patch through the
//! encoder and a patch-wise reconstruction head. Complementary masking
//! splits patches into two views that form positive pairs for a
//! hierarchical contrastive loss computed on layer-1 embeddings, with
//! adjacent max-pooling between levels. The patch-dependent (PD) task and
//! the two zero-input tasks are ablation baselines.

use serde::Serialize;

use crate::data::{
    instance_normalize, make_input_windows, patchify_batch, MaskPair, PadMode, PatchBatch,
    SplitName, TimeSeriesDataset,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{encode_one, encode_one_backward, EncCache, EncoderKind, ModelParams};
use crate::ops::{
    dropout_backward, dropout_forward, linear_backward, linear_forward, maxpool_adjacent,
    maxpool_adjacent_backward,
};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Autoencode unmasked patches (reconstruction of every patch).
    Pi,
    /// PI reconstruction plus hierarchical contrastive learning.
    PiCl,
    /// Predict masked patches from the zero-filled sequence.
    Pd,
    /// Predict unmasked patches from zero inputs.
    ZeroToXu,
    /// Autoencode zero inputs.
    ZeroToZero,
}

impl Task {
    pub fn uses_masks(self) -> bool {
        !matches!(self, Task::Pi | Task::ZeroToZero)
    }

    pub fn with_cl(self) -> bool {
        matches!(self, Task::PiCl)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Pi => "pi",
            Task::PiCl => "pi+cl",
            Task::Pd => "pd",
            Task::ZeroToXu => "zero-xu",
            Task::ZeroToZero => "zero-zero",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pi" => Ok(Task::Pi),
            "pi+cl" | "pi_cl" => Ok(Task::PiCl),
            "pd" => Ok(Task::Pd),
            "zero-xu" | "zero_xu" => Ok(Task::ZeroToXu),
            "zero-zero" | "zero_zero" => Ok(Task::ZeroToZero),
            other => Err(Error::InvalidArg(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClLevelReduce {
    Mean,
    Sum,
}

impl std::str::FromStr for ClLevelReduce {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ClLevelReduce::Mean),
            "sum" => Ok(ClLevelReduce::Sum),
            other => Err(Error::InvalidArg(format!("unknown cl_level_reduce {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    /// Summed squared reconstruction error over all selected patches.
    pub recon: f64,
    /// recon divided by B*C*N*P, for logging.
    pub recon_normalized: f64,
    pub cl_per_level: Vec<f64>,
    pub cl_total: f64,
    /// recon + cl_total
    pub total: f64,
}

/// Sizes of the contrastive hierarchy: N, floor(N/2), ... down to 1.
pub fn level_sizes(mut n: usize) -> Vec<usize> {
    let mut out = vec![n];
    while n > 1 {
        n /= 2;
        out.push(n);
    }
    out
}

/// Summed squared error between patch tensors (all positions).
pub fn recon_loss(x: &[Matrix], xhat: &[Matrix]) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::shape("recon_loss", x.len(), xhat.len()));
    }
    let mut total = 0.0;
    for (a, b) in x.iter().zip(xhat) {
        if a.shape() != b.shape() {
            return Err(Error::shape("recon_loss", a.shape_str(), b.shape_str()));
        }
        for (u, v) in a.data.iter().zip(&b.data) {
            let d = u - v;
            total += d * d;
        }
    }
    Ok(total)
}

/// One level of the contrastive loss for a single (instance, channel).
///
/// `stack` holds the 2N embeddings (view 1 rows then view 2 rows). The
/// positive partner of row n is row (n + N) mod 2N; similarity is the raw
/// dot product, normalized with per-anchor max subtraction. `factor`
/// multiplies both the returned loss and the gradient accumulated in `dz`.
fn cl_level(stack: &Matrix, factor: f64, dz: Option<&mut Matrix>) -> Result<f64> {
    let two_n = stack.rows;
    let half = two_n / 2;
    let sims = stack.matmul_nt(stack)?;
    let mut loss = 0.0;
    let mut grad = dz;
    for n in 0..two_n {
        let pos = (n + half) % two_n;
        let mut mx = f64::NEG_INFINITY;
        for s in 0..two_n {
            if s != n {
                mx = mx.max(sims.at(n, s));
            }
        }
        let mut denom = 0.0;
        for s in 0..two_n {
            if s != n {
                denom += (sims.at(n, s) - mx).exp();
            }
        }
        loss += -(sims.at(n, pos) - mx) + denom.ln();
        if let Some(dz) = grad.as_deref_mut() {
            for s in 0..two_n {
                if s == n {
                    continue;
                }
                let p = (sims.at(n, s) - mx).exp() / denom;
                let g = factor * (p - if s == pos { 1.0 } else { 0.0 });
                // d sim(n, s) / d z_n = z_s and vice versa
                for c in 0..stack.cols {
                    *dz.at_mut(n, c) += g * stack.at(s, c);
                    *dz.at_mut(s, c) += g * stack.at(n, c);
                }
            }
        }
    }
    Ok(loss * factor)
}

fn stack_views(v1: &Matrix, v2: &Matrix) -> Result<Matrix> {
    if v1.shape() != v2.shape() {
        return Err(Error::shape("stack_views", v1.shape_str(), v2.shape_str()));
    }
    let mut data = Vec::with_capacity(2 * v1.data.len());
    data.extend_from_slice(&v1.data);
    data.extend_from_slice(&v2.data);
    Matrix::from_vec(2 * v1.rows, v1.cols, data)
}

/// Single-level contrastive loss over a batch of view pairs (one pair per
/// (instance, channel)), normalized by 1/(2*B*C*N).
pub fn contrastive_level_loss(view1: &[Matrix], view2: &[Matrix]) -> Result<f64> {
    if view1.len() != view2.len() || view1.is_empty() {
        return Err(Error::shape("contrastive_level_loss", view1.len(), view2.len()));
    }
    let n = view1[0].rows;
    let factor = 1.0 / (2.0 * view1.len() as f64 * n as f64);
    let mut total = 0.0;
    for (a, b) in view1.iter().zip(view2) {
        let stack = stack_views(a, b)?;
        total += cl_level(&stack, factor, None)?;
    }
    Ok(total)
}

/// Hierarchical contrastive loss (forward only): per-level losses and their
/// reduction across levels.
pub fn hierarchical_cl_loss(
    view1: &[Matrix],
    view2: &[Matrix],
    reduce: ClLevelReduce,
) -> Result<(f64, Vec<f64>)> {
    let mut per_level = Vec::new();
    let mut grads: Vec<(Matrix, Matrix)> = Vec::new();
    hierarchical_cl(view1, view2, reduce, false, &mut per_level, &mut grads)?;
    let total = reduce_levels(&per_level, reduce);
    Ok((total, per_level))
}

fn reduce_levels(per_level: &[f64], reduce: ClLevelReduce) -> f64 {
    let sum: f64 = per_level.iter().sum();
    match reduce {
        ClLevelReduce::Sum => sum,
        ClLevelReduce::Mean => sum / per_level.len() as f64,
    }
}

/// Shared forward(+backward) over the pooling hierarchy.
///
/// Per-level losses come back unweighted (each already carries its
/// 1/(2*B*C*N_l) normalization); the level weight for gradients is 1 for
/// `Sum` and 1/num_levels for `Mean`. When `with_grad` is set, `grads`
/// receives (dview1, dview2) at level 0 for every (instance, channel).
fn hierarchical_cl(
    view1: &[Matrix],
    view2: &[Matrix],
    reduce: ClLevelReduce,
    with_grad: bool,
    per_level: &mut Vec<f64>,
    grads: &mut Vec<(Matrix, Matrix)>,
) -> Result<()> {
    let bc = view1.len();
    if bc == 0 || bc != view2.len() {
        return Err(Error::shape("hierarchical_cl", view1.len(), view2.len()));
    }
    let n0 = view1[0].rows;
    let sizes = level_sizes(n0);
    let num_levels = sizes.len();
    let level_weight = match reduce {
        ClLevelReduce::Sum => 1.0,
        ClLevelReduce::Mean => 1.0 / num_levels as f64,
    };
    per_level.clear();
    per_level.resize(num_levels, 0.0);

    for (v1, v2) in view1.iter().zip(view2) {
        // forward through the pooling pyramid
        let mut lv1 = vec![v1.clone()];
        let mut lv2 = vec![v2.clone()];
        let mut args1 = Vec::new();
        let mut args2 = Vec::new();
        for _ in 1..num_levels {
            let (p1, a1) = maxpool_adjacent(lv1.last().unwrap())?;
            let (p2, a2) = maxpool_adjacent(lv2.last().unwrap())?;
            lv1.push(p1);
            lv2.push(p2);
            args1.push(a1);
            args2.push(a2);
        }

        let mut dz_levels: Vec<Option<Matrix>> = vec![None; num_levels];
        for (l, n_l) in sizes.iter().enumerate() {
            let norm = 1.0 / (2.0 * bc as f64 * *n_l as f64);
            let stack = stack_views(&lv1[l], &lv2[l])?;
            if with_grad {
                let mut dz = Matrix::zeros(stack.rows, stack.cols);
                per_level[l] += cl_level(&stack, norm, Some(&mut dz))?;
                // gradient carries the level weight; loss values stay unweighted
                dz.scale(level_weight);
                dz_levels[l] = Some(dz);
            } else {
                per_level[l] += cl_level(&stack, norm, None)?;
            }
        }

        if with_grad {
            // pull gradients down the pyramid to level 0
            let cols = v1.cols;
            let mut dv1 = Matrix::zeros(sizes[num_levels - 1], cols);
            let mut dv2 = Matrix::zeros(sizes[num_levels - 1], cols);
            for l in (0..num_levels).rev() {
                let n_l = sizes[l];
                if let Some(dz) = &dz_levels[l] {
                    for r in 0..n_l {
                        for c in 0..cols {
                            *dv1.at_mut(r, c) += dz.at(r, c);
                            *dv2.at_mut(r, c) += dz.at(n_l + r, c);
                        }
                    }
                }
                if l > 0 {
                    dv1 = maxpool_adjacent_backward(&dv1, &args1[l - 1], sizes[l - 1]);
                    dv2 = maxpool_adjacent_backward(&dv2, &args2[l - 1], sizes[l - 1]);
                }
            }
            grads.push((dv1, dv2));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub task: Task,
    pub cl_level_reduce: ClLevelReduce,
    pub training: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            task: Task::PiCl,
            cl_level_reduce: ClLevelReduce::Mean,
            training: true,
        }
    }
}

fn zero_filled(x: &Matrix, mask_row: &[u8], keep: u8) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for n in 0..x.rows {
        if mask_row[n] == keep {
            out.row_mut(n).copy_from_slice(x.row(n));
        }
    }
    out
}

/// Full pretraining objective with analytic gradients.
///
/// Dropout masks are drawn from `dropout_rng`; pass the same stream state
/// twice to get a bitwise-identical (frozen) evaluation.
pub fn task_loss_grad(
    params: &ModelParams,
    batch: &PatchBatch,
    masks: &MaskPair,
    cfg: &LossConfig,
    dropout_rng: &mut RngStream,
) -> Result<(LossBreakdown, ModelParams)> {
    if batch.instances != masks.instances
        || batch.channels != masks.channels
        || batch.num_patches != masks.num_patches
    {
        return Err(Error::shape(
            "task_loss_grad",
            format!("{}x{}x{}", batch.instances, batch.channels, batch.num_patches),
            format!("{}x{}x{}", masks.instances, masks.channels, masks.num_patches),
        ));
    }
    let mut grads = params.zeros_like();
    let kind = params.encoder.kind;
    let pi = kind.is_patch_independent();
    let n = batch.num_patches;
    let p = batch.patch_len;
    let bc = batch.instances * batch.channels;
    let dropout_rate = params.encoder.dropout_rate;

    // --- reconstruction path ---
    let mut recon_total = 0.0;
    // per-(i,c) caches for the recon input sequence
    let mut recon_inputs: Vec<Matrix> = Vec::with_capacity(bc);
    let mut recon_caches: Vec<EncCache> = Vec::with_capacity(bc);
    let mut dz2_list: Vec<Matrix> = Vec::with_capacity(bc);

    for i in 0..batch.instances {
        for c in 0..batch.channels {
            let x = batch.slice(i, c);
            let mrow = masks.row(i, c);
            let input = match cfg.task {
                Task::Pi | Task::PiCl => x.clone(),
                Task::Pd => zero_filled(x, mrow, 1),
                Task::ZeroToXu | Task::ZeroToZero => Matrix::zeros(n, p),
            };
            let cache = encode_one(params, &input)?;
            let (z2d, dmask) =
                dropout_forward(&cache.z2, dropout_rate, cfg.training, dropout_rng)?;
            let xhat = linear_forward(&z2d, &params.recon.w, &params.recon.b)?;

            // residuals over the rows this task scores
            let mut dxhat = Matrix::zeros(n, p);
            for row in 0..n {
                let scored = match cfg.task {
                    Task::Pi | Task::PiCl | Task::ZeroToZero => true,
                    Task::Pd => mrow[row] == 0,
                    Task::ZeroToXu => mrow[row] == 1,
                };
                if !scored {
                    continue;
                }
                for k in 0..p {
                    let target = match cfg.task {
                        Task::ZeroToZero => 0.0,
                        _ => x.at(row, k),
                    };
                    let d = xhat.at(row, k) - target;
                    recon_total += d * d;
                    *dxhat.at_mut(row, k) = 2.0 * d;
                }
            }

            let g = linear_backward(&z2d, &params.recon.w, &dxhat)?;
            grads.recon.w.add_assign(&g.dw)?;
            grads.recon.b.add_assign(&g.db)?;
            let dz2 = dropout_backward(&g.dx, &dmask);

            recon_inputs.push(input);
            recon_caches.push(cache);
            dz2_list.push(dz2);
        }
    }

    // --- contrastive path (layer-1 views under complementary masking) ---
    let mut cl_per_level = Vec::new();
    let mut cl_total = 0.0;
    // gradients destined for the recon-path z1 (PI kinds share the encode pass)
    let mut dz1_list: Vec<Option<Matrix>> = vec![None; bc];

    if cfg.task.with_cl() {
        let mut view1: Vec<Matrix> = Vec::with_capacity(bc);
        let mut view2: Vec<Matrix> = Vec::with_capacity(bc);
        // PI kinds: masked positions carry the zero-patch embedding,
        // computed with a single extra patch evaluation.
        let zero_patch = Matrix::zeros(1, p);
        let zero_cache = if pi { Some(encode_one(params, &zero_patch)?) } else { None };
        // mixer: the two zero-filled sequences each need a full pass
        let mut view_caches: Vec<(EncCache, EncCache, Matrix, Matrix)> = Vec::new();

        for i in 0..batch.instances {
            for c in 0..batch.channels {
                let x = batch.slice(i, c);
                let mrow = masks.row(i, c);
                if pi {
                    let idx = i * batch.channels + c;
                    let z1 = &recon_caches[idx].z1;
                    let zrow = zero_cache.as_ref().unwrap().z1.row(0);
                    let mut v1 = Matrix::zeros(n, params.dim);
                    let mut v2 = Matrix::zeros(n, params.dim);
                    for row in 0..n {
                        if mrow[row] == 1 {
                            v1.row_mut(row).copy_from_slice(z1.row(row));
                            v2.row_mut(row).copy_from_slice(zrow);
                        } else {
                            v1.row_mut(row).copy_from_slice(zrow);
                            v2.row_mut(row).copy_from_slice(z1.row(row));
                        }
                    }
                    view1.push(v1);
                    view2.push(v2);
                } else {
                    let x1 = zero_filled(x, mrow, 1);
                    let x2 = zero_filled(x, mrow, 0);
                    let c1 = encode_one(params, &x1)?;
                    let c2 = encode_one(params, &x2)?;
                    view1.push(c1.z1.clone());
                    view2.push(c2.z1.clone());
                    view_caches.push((c1, c2, x1, x2));
                }
            }
        }

        let mut view_grads: Vec<(Matrix, Matrix)> = Vec::new();
        hierarchical_cl(
            &view1,
            &view2,
            cfg.cl_level_reduce,
            true,
            &mut cl_per_level,
            &mut view_grads,
        )?;
        cl_total = reduce_levels(&cl_per_level, cfg.cl_level_reduce);

        if pi {
            let mut dzero = Matrix::zeros(1, params.dim);
            for i in 0..batch.instances {
                for c in 0..batch.channels {
                    let idx = i * batch.channels + c;
                    let mrow = masks.row(i, c);
                    let (dv1, dv2) = &view_grads[idx];
                    let mut dz1 = Matrix::zeros(n, params.dim);
                    for row in 0..n {
                        let (real, zero) = if mrow[row] == 1 {
                            (dv1.row(row), dv2.row(row))
                        } else {
                            (dv2.row(row), dv1.row(row))
                        };
                        dz1.row_mut(row).copy_from_slice(real);
                        for (a, b) in dzero.row_mut(0).iter_mut().zip(zero) {
                            *a += b;
                        }
                    }
                    dz1_list[idx] = Some(dz1);
                }
            }
            encode_one_backward(
                params,
                &zero_patch,
                zero_cache.as_ref().unwrap(),
                Some(&dzero),
                None,
                &mut grads,
            )?;
        } else {
            for (idx, (c1, c2, x1, x2)) in view_caches.iter().enumerate() {
                let (dv1, dv2) = &view_grads[idx];
                encode_one_backward(params, x1, c1, Some(dv1), None, &mut grads)?;
                encode_one_backward(params, x2, c2, Some(dv2), None, &mut grads)?;
            }
        }
    }

    // --- encoder backward for the reconstruction pass ---
    for idx in 0..bc {
        encode_one_backward(
            params,
            &recon_inputs[idx],
            &recon_caches[idx],
            dz1_list[idx].as_ref(),
            Some(&dz2_list[idx]),
            &mut grads,
        )?;
    }

    let breakdown = LossBreakdown {
        recon: recon_total,
        recon_normalized: recon_total / (bc * n * p) as f64,
        cl_per_level,
        cl_total,
        total: recon_total + cl_total,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("pretraining loss".into()));
    }
    Ok((breakdown, grads))
}

/// Scalar PD-task loss (ablation baseline).
pub fn pd_task_loss(
    params: &ModelParams,
    batch: &PatchBatch,
    masks: &MaskPair,
) -> Result<f64> {
    let cfg = LossConfig {
        task: Task::Pd,
        training: false,
        ..Default::default()
    };
    let mut rng = RngStream::substream(0, "unused");
    let (breakdown, _) = task_loss_grad(params, batch, masks, &cfg, &mut rng)?;
    Ok(breakdown.recon)
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Fails fast on non-finite gradients.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for g in grads.tensors() {
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let mut p_tensors = params.tensors_mut();
    let g_tensors = grads.tensors();
    let mut m_tensors = state.m.tensors_mut();
    let mut v_tensors = state.v.tensors_mut();
    for i in 0..p_tensors.len() {
        let p = &mut p_tensors[i];
        let g = g_tensors[i];
        let m = &mut m_tensors[i];
        let v = &mut v_tensors[i];
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = cfg.beta1 * m.data[k] + (1.0 - cfg.beta1) * gk;
            v.data[k] = cfg.beta2 * v.data[k] + (1.0 - cfg.beta2) * gk * gk;
            let mhat = m.data[k] / bc1;
            let vhat = v.data[k] / bc2;
            p.data[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub task: Task,
    pub kind: EncoderKind,
    pub input_len: usize,
    pub patch_len: usize,
    /// Patch stride; defaults to patch_len (non-overlapping) for pretraining.
    pub stride: usize,
    pub dim: usize,
    pub dropout: f64,
    pub cl_level_reduce: ClLevelReduce,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stride between pretraining windows taken from the train split.
    pub window_stride: usize,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 || self.dim == 0 {
            return Err(Error::Config("patch_len, stride, dim must be positive".into()));
        }
        if self.input_len < self.patch_len {
            return Err(Error::Config(format!(
                "input_len {} shorter than patch_len {}",
                self.input_len, self.patch_len
            )));
        }
        if self.batch_size == 0 || self.window_stride == 0 {
            return Err(Error::Config("batch_size and window_stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        let n = (self.input_len - self.patch_len) / self.stride + 1;
        if self.task.uses_masks() && n < 2 {
            return Err(Error::Config(format!(
                "task {} needs at least 2 patches, config yields {n}",
                self.task.as_str()
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.input_len - self.patch_len) / self.stride + 1
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub recon: f64,
    pub cl_total: f64,
    pub cl_levels: Vec<f64>,
    pub total: f64,
}

/// Mini-batch pretraining over windows of the train split.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    ds: &TimeSeriesDataset,
    mut on_log: impl FnMut(&StepLog),
) -> Result<ModelParams> {
    cfg.validate()?;
    let windows = make_input_windows(ds, SplitName::Train, cfg.input_len, cfg.window_stride)?;
    let normalized: Vec<Matrix> = windows.iter().map(|w| instance_normalize(w).0).collect();

    let mut init_rng = RngStream::substream(cfg.seed, "init");
    let mut params = ModelParams::init(
        cfg.kind,
        cfg.patch_len,
        cfg.dim,
        cfg.num_patches(),
        cfg.dropout,
        &mut init_rng,
    )?;
    train_task_in_place(cfg, &normalized, &mut params, &mut on_log)?;
    Ok(params)
}

/// The epoch/batch loop, reusable on pre-normalized windows.
pub fn train_task_in_place(
    cfg: &PretrainConfig,
    normalized: &[Matrix],
    params: &mut ModelParams,
    on_log: &mut impl FnMut(&StepLog),
) -> Result<()> {
    let loss_cfg = LossConfig {
        task: cfg.task,
        cl_level_reduce: cfg.cl_level_reduce,
        training: true,
    };
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut state = AdamState::new(params);
    let shuffle_root = RngStream::substream(cfg.seed, "shuffle");
    let mask_root = RngStream::substream(cfg.seed, "masking");
    let dropout_root = RngStream::substream(cfg.seed, "dropout");

    let mut order: Vec<usize> = (0..normalized.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = shuffle_root.split(epoch as u64);
        shuffle_rng.shuffle(&mut order);
        let mut step = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_windows: Vec<Matrix> =
                chunk.iter().map(|&i| normalized[i].clone()).collect();
            let batch = patchify_batch(&batch_windows, cfg.patch_len, cfg.stride, PadMode::None)?;
            let counter = (epoch * 1_000_000 + step) as u64;
            let mut mask_rng = mask_root.split(counter);
            let masks = if cfg.task.uses_masks() || batch.num_patches >= 2 {
                crate::data::complementary_masks(
                    batch.instances,
                    batch.channels,
                    batch.num_patches,
                    &mut mask_rng,
                )?
            } else {
                MaskPair {
                    instances: batch.instances,
                    channels: batch.channels,
                    num_patches: batch.num_patches,
                    m: vec![1; batch.instances * batch.channels * batch.num_patches],
                }
            };
            let mut dropout_rng = dropout_root.split(counter);
            let (breakdown, grads) =
                task_loss_grad(params, &batch, &masks, &loss_cfg, &mut dropout_rng)?;
            adam_step(params, &grads, &mut state, &adam_cfg)?;
            on_log(&StepLog {
                epoch,
                step,
                recon: breakdown.recon_normalized,
                cl_total: breakdown.cl_total,
                cl_levels: breakdown.cl_per_level.clone(),
                total: breakdown.total,
            });
            step += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::complementary_masks;

    fn rng() -> RngStream {
        RngStream::substream(7, "test")
    }

    fn random_batch(b: usize, c: usize, n: usize, p: usize, seed: u64) -> PatchBatch {
        let mut r = RngStream::substream(seed, "data");
        let windows: Vec<Matrix> = (0..b)
            .map(|_| Matrix::uniform_init(n * p, c, 1.0, &mut r))
            .collect();
        patchify_batch(&windows, p, p, PadMode::None).unwrap()
    }

    #[test]
    fn level_sizes_for_42() {
        assert_eq!(level_sizes(42), vec![42, 21, 10, 5, 2, 1]);
        assert_eq!(level_sizes(1), vec![1]);
    }

    #[test]
    fn recon_loss_basics() {
        let x = vec![Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap()];
        let xhat = vec![Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap()];
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_loss(&x, &xhat).unwrap(), 5.0);
    }

    #[test]
    fn masked_split_identity() {
        // sum of masked + complementary-masked squared errors equals the full sum
        let mut r = rng();
        let x = Matrix::uniform_init(8, 3, 1.0, &mut r);
        let xhat = Matrix::uniform_init(8, 3, 1.0, &mut r);
        let full = recon_loss(
            std::slice::from_ref(&x),
            std::slice::from_ref(&xhat),
        )
        .unwrap();
        for _ in 0..5 {
            let m: Vec<u8> = (0..8).map(|_| (r.next_f64() < 0.5) as u8).collect();
            let mut masked = 0.0;
            let mut comp = 0.0;
            for row in 0..8 {
                let mut e = 0.0;
                for c in 0..3 {
                    let d = x.at(row, c) - xhat.at(row, c);
                    e += d * d;
                }
                if m[row] == 1 {
                    masked += e;
                } else {
                    comp += e;
                }
            }
            assert!(((masked + comp) - full).abs() <= 1e-12 * full.abs().max(1.0));
        }
    }

    #[test]
    fn cl_single_pair_is_zero() {
        // N = 1: the softmax denominator has one term, p = 1, loss = 0 exactly
        let mut r = rng();
        let v1 = vec![Matrix::uniform_init(1, 4, 1.0, &mut r)];
        let v2 = vec![Matrix::uniform_init(1, 4, 1.0, &mut r)];
        assert_eq!(contrastive_level_loss(&v1, &v2).unwrap(), 0.0);
    }

    #[test]
    fn cl_identical_embeddings_log_2n_minus_1() {
        for n in [2usize, 3, 4] {
            let mut m = Matrix::zeros(n, 3);
            for v in &mut m.data {
                *v = 0.7;
            }
            let loss = contrastive_level_loss(
                std::slice::from_ref(&m),
                std::slice::from_ref(&m),
            )
            .unwrap();
            let want = ((2 * n - 1) as f64).ln();
            assert!((loss - want).abs() < 1e-10, "n={n}: {loss} vs {want}");
        }
    }

    /// Brute-force evaluation of the softmax-pair loss for one (i, c).
    fn brute_force_cl(stack: &Matrix) -> f64 {
        let two_n = stack.rows;
        let half = two_n / 2;
        let dot = |a: usize, b: usize| -> f64 {
            stack.row(a).iter().zip(stack.row(b)).map(|(x, y)| x * y).sum()
        };
        let mut total = 0.0;
        for n in 0..two_n {
            let pos = (n + half) % two_n;
            let num = dot(n, pos).exp();
            let mut den = 0.0;
            for s in 0..two_n {
                if s != n {
                    den += dot(n, s).exp();
                }
            }
            total += -(num / den).ln();
        }
        total / (2.0 * half as f64)
    }

    #[test]
    fn cl_matches_brute_force() {
        let mut r = rng();
        let v1 = Matrix::uniform_init(2, 5, 1.0, &mut r);
        let v2 = Matrix::uniform_init(2, 5, 1.0, &mut r);
        let got = contrastive_level_loss(
            std::slice::from_ref(&v1),
            std::slice::from_ref(&v2),
        )
        .unwrap();
        let want = brute_force_cl(&stack_views(&v1, &v2).unwrap());
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn cl_softmax_rows_sum_to_one() {
        let mut r = rng();
        let stack = Matrix::uniform_init(8, 4, 1.5, &mut r);
        let sims = stack.matmul_nt(&stack).unwrap();
        for n in 0..8 {
            let mx = (0..8)
                .filter(|s| *s != n)
                .map(|s| sims.at(n, s))
                .fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = (0..8)
                .filter(|s| *s != n)
                .map(|s| (sims.at(n, s) - mx).exp())
                .sum();
            let total: f64 = (0..8)
                .filter(|s| *s != n)
                .map(|s| (sims.at(n, s) - mx).exp() / den)
                .sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hierarchical_level_count_and_final_zero() {
        let mut r = rng();
        let v1 = vec![Matrix::uniform_init(6, 4, 1.0, &mut r)];
        let v2 = vec![Matrix::uniform_init(6, 4, 1.0, &mut r)];
        let (_, per_level) = hierarchical_cl_loss(&v1, &v2, ClLevelReduce::Mean).unwrap();
        assert_eq!(per_level.len(), 3); // 6 -> 3 -> 1
        assert_eq!(*per_level.last().unwrap(), 0.0);
    }

    #[test]
    fn hierarchical_identical_embeddings_n2() {
        let mut m = Matrix::zeros(2, 3);
        for v in &mut m.data {
            *v = 0.4;
        }
        let (total, per_level) =
            hierarchical_cl_loss(&[m.clone()], &[m], ClLevelReduce::Mean).unwrap();
        assert!((per_level[0] - 3f64.ln()).abs() < 1e-10);
        assert_eq!(per_level[1], 0.0);
        assert!((total - 3f64.ln() / 2.0).abs() < 1e-10);
    }

    #[test]
    fn cl_invariant_under_batch_permutation() {
        let mut r = rng();
        let v1: Vec<Matrix> = (0..3).map(|_| Matrix::uniform_init(4, 3, 1.0, &mut r)).collect();
        let v2: Vec<Matrix> = (0..3).map(|_| Matrix::uniform_init(4, 3, 1.0, &mut r)).collect();
        let (a, _) = hierarchical_cl_loss(&v1, &v2, ClLevelReduce::Mean).unwrap();
        let v1p = vec![v1[2].clone(), v1[0].clone(), v1[1].clone()];
        let v2p = vec![v2[2].clone(), v2[0].clone(), v2[1].clone()];
        let (b, _) = hierarchical_cl_loss(&v1p, &v2p, ClLevelReduce::Mean).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn pi_total_equals_recon_without_cl() {
        let batch = random_batch(2, 2, 4, 3, 1);
        let mut mask_rng = RngStream::substream(1, "masking");
        let masks = complementary_masks(2, 2, 4, &mut mask_rng).unwrap();
        let params = ModelParams::init(EncoderKind::Mlp, 3, 5, 4, 0.0, &mut rng()).unwrap();
        let cfg = LossConfig {
            task: Task::Pi,
            training: false,
            ..Default::default()
        };
        let mut dr = RngStream::substream(1, "dropout");
        let (breakdown, _) = task_loss_grad(&params, &batch, &masks, &cfg, &mut dr).unwrap();
        assert_eq!(breakdown.cl_total, 0.0);
        assert_eq!(breakdown.total, breakdown.recon);
    }

    #[test]
    fn loss_is_seed_deterministic() {
        let batch = random_batch(2, 1, 4, 3, 2);
        let mut mask_rng = RngStream::substream(2, "masking");
        let masks = complementary_masks(2, 1, 4, &mut mask_rng).unwrap();
        let params = ModelParams::init(EncoderKind::Mlp, 3, 5, 4, 0.3, &mut rng()).unwrap();
        let cfg = LossConfig::default();
        let mut d1 = RngStream::substream(5, "dropout");
        let mut d2 = RngStream::substream(5, "dropout");
        let (a, _) = task_loss_grad(&params, &batch, &masks, &cfg, &mut d1).unwrap();
        let (b, _) = task_loss_grad(&params, &batch, &masks, &cfg, &mut d2).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.cl_per_level, b.cl_per_level);
    }

    #[test]
    fn pd_no_masked_patches_is_zero() {
        let batch = random_batch(1, 1, 4, 3, 3);
        let masks = MaskPair {
            instances: 1,
            channels: 1,
            num_patches: 4,
            m: vec![1; 4],
        };
        let params = ModelParams::init(EncoderKind::Mlp, 3, 5, 4, 0.0, &mut rng()).unwrap();
        assert_eq!(pd_task_loss(&params, &batch, &masks).unwrap(), 0.0);
    }

    #[test]
    fn pd_pi_encoder_ignores_unmasked_content() {
        // with a PI encoder the PD loss depends only on masked targets and
        // the zero-patch embedding
        let mut r = RngStream::substream(4, "data");
        let w1 = Matrix::uniform_init(12, 1, 1.0, &mut r);
        let mut w2 = w1.clone();
        // change an unmasked patch (patch 0)
        for t in 0..3 {
            *w2.at_mut(t, 0) += 0.7;
        }
        let b1 = patchify_batch(std::slice::from_ref(&w1), 3, 3, PadMode::None).unwrap();
        let b2 = patchify_batch(std::slice::from_ref(&w2), 3, 3, PadMode::None).unwrap();
        let masks = MaskPair {
            instances: 1,
            channels: 1,
            num_patches: 4,
            m: vec![1, 0, 1, 0],
        };
        let params = ModelParams::init(EncoderKind::Mlp, 3, 5, 4, 0.0, &mut rng()).unwrap();
        let a = pd_task_loss(&params, &b1, &masks).unwrap();
        let b = pd_task_loss(&params, &b2, &masks).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pd_mixer_uses_unmasked_context() {
        let mut r = RngStream::substream(4, "data");
        let w1 = Matrix::uniform_init(12, 1, 1.0, &mut r);
        let mut w2 = w1.clone();
        for t in 0..3 {
            *w2.at_mut(t, 0) += 0.7;
        }
        let b1 = patchify_batch(std::slice::from_ref(&w1), 3, 3, PadMode::None).unwrap();
        let b2 = patchify_batch(std::slice::from_ref(&w2), 3, 3, PadMode::None).unwrap();
        let masks = MaskPair {
            instances: 1,
            channels: 1,
            num_patches: 4,
            m: vec![1, 0, 1, 0],
        };
        let params = ModelParams::init(EncoderKind::Mixer, 3, 5, 4, 0.0, &mut rng()).unwrap();
        let a = pd_task_loss(&params, &b1, &masks).unwrap();
        let b = pd_task_loss(&params, &b2, &masks).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn adam_zero_grads_keep_params() {
        let mut params = ModelParams::init(EncoderKind::Mlp, 3, 4, 0, 0.0, &mut rng()).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = ModelParams::init(EncoderKind::Linear, 1, 1, 0, 0.0, &mut rng()).unwrap();
        let w0 = params.encoder.w1.data[0];
        let mut grads = params.zeros_like();
        grads.encoder.w1.data[0] = 1.0;
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let delta = params.encoder.w1.data[0] - w0;
        assert!((delta + 0.01).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn adam_rejects_nonfinite_grads() {
        let mut params = ModelParams::init(EncoderKind::Linear, 1, 1, 0, 0.0, &mut rng()).unwrap();
        let mut grads = params.zeros_like();
        grads.encoder.w1.data[0] = f64::NAN;
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).is_err());
    }

    fn sine_ds(t: usize) -> TimeSeriesDataset {
        let values: Vec<f64> = (0..t)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 16.0).sin())
            .collect();
        let mut ds = TimeSeriesDataset {
            name: "sine".into(),
            values: Matrix::from_vec(t, 1, values).unwrap(),
            timestamps: None,
            split: None,
        };
        crate::data::chronological_split(&mut ds, (0.6, 0.2, 0.2)).unwrap();
        ds
    }

    fn base_config() -> PretrainConfig {
        PretrainConfig {
            task: Task::Pi,
            kind: EncoderKind::Mlp,
            input_len: 32,
            patch_len: 8,
            stride: 8,
            dim: 8,
            dropout: 0.0,
            cl_level_reduce: ClLevelReduce::Mean,
            batch_size: 8,
            epochs: 0,
            lr: 1e-2,
            seed: 3,
            window_stride: 8,
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let ds = sine_ds(200);
        let cfg = base_config();
        let mut logs = 0;
        let params = run_pretraining(&cfg, &ds, |_| logs += 1).unwrap();
        let mut init_rng = RngStream::substream(cfg.seed, "init");
        let want = ModelParams::init(cfg.kind, 8, 8, cfg.num_patches(), 0.0, &mut init_rng).unwrap();
        assert_eq!(params, want);
        assert_eq!(logs, 0);
    }

    #[test]
    fn training_descends_on_sine() {
        let ds = sine_ds(200);
        let mut cfg = base_config();
        cfg.epochs = 40;
        let mut first = None;
        let mut last = 0.0;
        run_pretraining(&cfg, &ds, |log| {
            if first.is_none() {
                first = Some(log.recon);
            }
            last = log.recon;
        })
        .unwrap();
        assert!(last < first.unwrap(), "no descent: {last} vs {first:?}");
    }

    #[test]
    fn pretraining_is_deterministic() {
        let ds = sine_ds(160);
        let mut cfg = base_config();
        cfg.task = Task::PiCl;
        cfg.dropout = 0.2;
        cfg.epochs = 3;
        let mut logs_a = Vec::new();
        let a = run_pretraining(&cfg, &ds, |l| logs_a.push(l.total)).unwrap();
        let mut logs_b = Vec::new();
        let b = run_pretraining(&cfg, &ds, |l| logs_b.push(l.total)).unwrap();
        assert_eq!(a, b);
        assert_eq!(logs_a, logs_b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = base_config();
        cfg.patch_len = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.input_len = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.task = Task::PiCl;
        cfg.input_len = 8; // one patch only
        assert!(cfg.validate().is_err());
    }
}
