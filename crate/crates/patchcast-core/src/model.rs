//! Parameter containers and forward/backward passes for the encoders and heads.
//!
//! Patch-independent (PI) encoders map every patch through the same weights
//! with no interaction across patches; the mixer variant adds a time-mixing
//! layer over the patch axis and is the patch-dependent (PD) ablation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PatchBatch;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ops::{linear_backward, linear_forward, relu, relu_backward};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Linear,
    Mlp,
    Mixer,
}

impl EncoderKind {
    /// PI kinds embed each patch independently.
    pub fn is_patch_independent(self) -> bool {
        !matches!(self, EncoderKind::Mixer)
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(EncoderKind::Linear),
            "mlp" => Ok(EncoderKind::Mlp),
            "mixer" => Ok(EncoderKind::Mixer),
            other => Err(Error::InvalidArg(format!("unknown encoder kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub kind: EncoderKind,
    /// P x D
    pub w1: Matrix,
    /// 1 x D
    pub b1: Matrix,
    /// D x D (mlp, mixer)
    pub w2: Option<Matrix>,
    /// 1 x D
    pub b2: Option<Matrix>,
    /// N x N time-mixing map, applied before the patch-wise layers (mixer only)
    pub wt: Option<Matrix>,
    /// N x 1
    pub bt: Option<Matrix>,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconHead {
    /// D x P
    pub w: Matrix,
    /// 1 x P
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastHead {
    /// (N*D) x H, shared across channels
    pub w: Matrix,
    /// 1 x H
    pub b: Matrix,
    pub num_patches: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Max,
    Avg,
    Concat,
}

impl std::str::FromStr for Aggregate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregate::Max),
            "avg" => Ok(Aggregate::Avg),
            "concat" => Ok(Aggregate::Concat),
            other => Err(Error::InvalidArg(format!("unknown aggregate {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub agg: Aggregate,
    /// D_agg x K where D_agg = D (max/avg) or N*D (concat)
    pub w: Matrix,
    /// 1 x K
    pub b: Matrix,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DownstreamHead {
    Forecast(ForecastHead),
    Classifier(ClassifierHead),
}

/// Which encoder layer feeds downstream heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprLayer {
    Z1,
    Z2,
}

impl std::str::FromStr for ReprLayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z1" => Ok(ReprLayer::Z1),
            "z2" => Ok(ReprLayer::Z2),
            other => Err(Error::InvalidArg(format!("unknown repr layer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub recon: ReconHead,
    pub downstream: Option<DownstreamHead>,
    pub patch_len: usize,
    pub dim: usize,
}

impl ModelParams {
    /// Fan-in uniform init for encoder and reconstruction head; biases zero.
    pub fn init(
        kind: EncoderKind,
        patch_len: usize,
        dim: usize,
        num_patches: usize,
        dropout_rate: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if patch_len == 0 || dim == 0 {
            return Err(Error::InvalidArg("patch_len and dim must be positive".into()));
        }
        let mut r = rng.clone();
        let w1 = Matrix::uniform_init(patch_len, dim, 1.0 / (patch_len as f64).sqrt(), &mut r);
        let (w2, b2) = if matches!(kind, EncoderKind::Mlp | EncoderKind::Mixer) {
            (
                Some(Matrix::uniform_init(dim, dim, 1.0 / (dim as f64).sqrt(), &mut r)),
                Some(Matrix::zeros(1, dim)),
            )
        } else {
            (None, None)
        };
        let (wt, bt) = if matches!(kind, EncoderKind::Mixer) {
            (
                Some(Matrix::uniform_init(
                    num_patches,
                    num_patches,
                    1.0 / (num_patches as f64).sqrt(),
                    &mut r,
                )),
                Some(Matrix::zeros(num_patches, 1)),
            )
        } else {
            (None, None)
        };
        let recon_w = Matrix::uniform_init(dim, patch_len, 1.0 / (dim as f64).sqrt(), &mut r);
        Ok(ModelParams {
            encoder: EncoderParams {
                kind,
                w1,
                b1: Matrix::zeros(1, dim),
                w2,
                b2,
                wt,
                bt,
                dropout_rate,
            },
            recon: ReconHead {
                w: recon_w,
                b: Matrix::zeros(1, patch_len),
            },
            downstream: None,
            patch_len,
            dim,
        })
    }

    pub fn attach_forecast_head(
        &mut self,
        num_patches: usize,
        horizon: usize,
        rng: &mut RngStream,
    ) {
        let fan_in = num_patches * self.dim;
        self.downstream = Some(DownstreamHead::Forecast(ForecastHead {
            w: Matrix::uniform_init(fan_in, horizon, 1.0 / (fan_in as f64).sqrt(), rng),
            b: Matrix::zeros(1, horizon),
            num_patches,
            horizon,
        }));
    }

    pub fn attach_classifier_head(
        &mut self,
        agg: Aggregate,
        num_patches: usize,
        num_classes: usize,
        rng: &mut RngStream,
    ) {
        let d_agg = match agg {
            Aggregate::Max | Aggregate::Avg => self.dim,
            Aggregate::Concat => num_patches * self.dim,
        };
        self.downstream = Some(DownstreamHead::Classifier(ClassifierHead {
            agg,
            w: Matrix::uniform_init(d_agg, num_classes, 1.0 / (d_agg as f64).sqrt(), rng),
            b: Matrix::zeros(1, num_classes),
            num_classes,
        }));
    }

    /// A same-shaped parameter set with every entry zeroed (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// All present tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.encoder.w1, &self.encoder.b1];
        if let Some(t) = &self.encoder.w2 {
            out.push(t);
        }
        if let Some(t) = &self.encoder.b2 {
            out.push(t);
        }
        if let Some(t) = &self.encoder.wt {
            out.push(t);
        }
        if let Some(t) = &self.encoder.bt {
            out.push(t);
        }
        out.push(&self.recon.w);
        out.push(&self.recon.b);
        match &self.downstream {
            Some(DownstreamHead::Forecast(h)) => {
                out.push(&h.w);
                out.push(&h.b);
            }
            Some(DownstreamHead::Classifier(h)) => {
                out.push(&h.w);
                out.push(&h.b);
            }
            None => {}
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.encoder.w1, &mut self.encoder.b1];
        if let Some(t) = &mut self.encoder.w2 {
            out.push(t);
        }
        if let Some(t) = &mut self.encoder.b2 {
            out.push(t);
        }
        if let Some(t) = &mut self.encoder.wt {
            out.push(t);
        }
        if let Some(t) = &mut self.encoder.bt {
            out.push(t);
        }
        out.push(&mut self.recon.w);
        out.push(&mut self.recon.b);
        match &mut self.downstream {
            Some(DownstreamHead::Forecast(h)) => {
                out.push(&mut h.w);
                out.push(&mut h.b);
            }
            Some(DownstreamHead::Classifier(h)) => {
                out.push(&mut h.w);
                out.push(&mut h.b);
            }
            None => {}
        }
        out
    }

    /// Tensor names matching the order of `tensors()`.
    pub fn tensor_names(&self) -> Vec<&'static str> {
        let mut out = vec!["encoder.w1", "encoder.b1"];
        if self.encoder.w2.is_some() {
            out.push("encoder.w2");
        }
        if self.encoder.b2.is_some() {
            out.push("encoder.b2");
        }
        if self.encoder.wt.is_some() {
            out.push("encoder.wt");
        }
        if self.encoder.bt.is_some() {
            out.push("encoder.bt");
        }
        out.push("recon.w");
        out.push("recon.b");
        match &self.downstream {
            Some(DownstreamHead::Forecast(_)) => {
                out.push("head.w");
                out.push("head.b");
            }
            Some(DownstreamHead::Classifier(_)) => {
                out.push("head.w");
                out.push("head.b");
            }
            None => {}
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.tensors() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn unflatten(&mut self, theta: &[f64]) -> Result<()> {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            if offset + n > theta.len() {
                return Err(Error::shape("unflatten", "params", theta.len()));
            }
            t.data.copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        if offset != theta.len() {
            return Err(Error::shape("unflatten", offset, theta.len()));
        }
        Ok(())
    }

    /// Per-component parameter counts: (name, count).
    pub fn component_counts(&self) -> Vec<(&'static str, usize)> {
        self.tensor_names()
            .into_iter()
            .zip(self.tensors())
            .map(|(n, t)| (n, t.data.len()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Map a flat parameter index (as used by `flatten`) to its tensor name
    /// and offset within that tensor.
    pub fn locate_flat_index(&self, index: usize) -> Option<(&'static str, usize)> {
        let mut offset = 0;
        for (name, t) in self.tensor_names().into_iter().zip(self.tensors()) {
            if index < offset + t.data.len() {
                return Some((name, index - offset));
            }
            offset += t.data.len();
        }
        None
    }
}

/// Per-(instance, channel) forward cache.
#[derive(Debug, Clone)]
pub struct EncCache {
    /// Mixer only: the time-mixed input fed to the patch-wise layers.
    pub x_mixed: Option<Matrix>,
    /// Pre-activation of layer 1 (mlp/mixer); equals z1 for the linear kind.
    pub a1: Matrix,
    pub z1: Matrix,
    pub z2: Matrix,
}

/// Forward pass for one N x P patch matrix.
pub fn encode_one(params: &ModelParams, x: &Matrix) -> Result<EncCache> {
    if x.cols != params.patch_len {
        return Err(Error::shape("encode", x.shape_str(), params.patch_len));
    }
    let enc = &params.encoder;
    match enc.kind {
        EncoderKind::Linear => {
            let z1 = linear_forward(x, &enc.w1, &enc.b1)?;
            Ok(EncCache {
                x_mixed: None,
                a1: z1.clone(),
                z1: z1.clone(),
                z2: z1,
            })
        }
        EncoderKind::Mlp => {
            let a1 = linear_forward(x, &enc.w1, &enc.b1)?;
            let z1 = relu(&a1);
            let z2 = linear_forward(&z1, enc.w2.as_ref().unwrap(), enc.b2.as_ref().unwrap())?;
            Ok(EncCache {
                x_mixed: None,
                a1,
                z1,
                z2,
            })
        }
        EncoderKind::Mixer => {
            let wt = enc.wt.as_ref().unwrap();
            let bt = enc.bt.as_ref().unwrap();
            if wt.rows != x.rows {
                return Err(Error::shape("encode(mixer)", wt.shape_str(), x.shape_str()));
            }
            let mut xm = wt.matmul(x)?;
            for n in 0..xm.rows {
                let b = bt.data[n];
                for v in xm.row_mut(n) {
                    *v += b;
                }
            }
            let a1 = linear_forward(&xm, &enc.w1, &enc.b1)?;
            let z1 = relu(&a1);
            let z2 = linear_forward(&z1, enc.w2.as_ref().unwrap(), enc.b2.as_ref().unwrap())?;
            Ok(EncCache {
                x_mixed: Some(xm),
                a1,
                z1,
                z2,
            })
        }
    }
}

/// Accumulate encoder gradients for one slice given upstream dz1 and dz2.
/// Either gradient may be zero-sized (meaning absent).
pub fn encode_one_backward(
    params: &ModelParams,
    x: &Matrix,
    cache: &EncCache,
    dz1: Option<&Matrix>,
    dz2: Option<&Matrix>,
    grads: &mut ModelParams,
) -> Result<()> {
    let enc = &params.encoder;
    match enc.kind {
        EncoderKind::Linear => {
            // z2 is an alias of z1
            let mut dz = match (dz1, dz2) {
                (Some(a), Some(b)) => {
                    let mut m = a.clone();
                    m.add_assign(b)?;
                    m
                }
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b.clone(),
                (None, None) => return Ok(()),
            };
            let g = linear_backward(x, &enc.w1, &dz)?;
            grads.encoder.w1.add_assign(&g.dw)?;
            grads.encoder.b1.add_assign(&g.db)?;
            dz.fill(0.0);
            Ok(())
        }
        EncoderKind::Mlp | EncoderKind::Mixer => {
            let x_in = cache.x_mixed.as_ref().unwrap_or(x);
            let mut dz1_total = match dz1 {
                Some(d) => d.clone(),
                None => Matrix::zeros(cache.z1.rows, cache.z1.cols),
            };
            if let Some(d2) = dz2 {
                let g2 = linear_backward(&cache.z1, enc.w2.as_ref().unwrap(), d2)?;
                grads.encoder.w2.as_mut().unwrap().add_assign(&g2.dw)?;
                grads.encoder.b2.as_mut().unwrap().add_assign(&g2.db)?;
                dz1_total.add_assign(&g2.dx)?;
            }
            let da1 = relu_backward(&cache.a1, &dz1_total);
            let g1 = linear_backward(x_in, &enc.w1, &da1)?;
            grads.encoder.w1.add_assign(&g1.dw)?;
            grads.encoder.b1.add_assign(&g1.db)?;
            if matches!(enc.kind, EncoderKind::Mixer) {
                // x_mixed = Wt x + bt
                let dxm = g1.dx;
                let dwt = dxm.matmul_nt(x)?;
                grads.encoder.wt.as_mut().unwrap().add_assign(&dwt)?;
                grads.encoder.bt.as_mut().unwrap().add_assign(&dxm.row_sum())?;
            }
            Ok(())
        }
    }
}

/// Batch encode: layer-1 and layer-2 embeddings per (instance, channel).
pub fn encode(params: &ModelParams, patches: &PatchBatch) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mut z1 = Vec::with_capacity(patches.slices().len());
    let mut z2 = Vec::with_capacity(patches.slices().len());
    for x in patches.slices() {
        let cache = encode_one(params, x)?;
        z1.push(cache.z1);
        z2.push(cache.z2);
    }
    Ok((z1, z2))
}

/// Patch-wise linear reconstruction from z2.
pub fn reconstruct_one(params: &ModelParams, z2: &Matrix) -> Result<Matrix> {
    linear_forward(z2, &params.recon.w, &params.recon.b)
}

/// Flatten an N x D representation row-major into 1 x (N*D).
pub fn flatten_repr(z: &Matrix) -> Matrix {
    Matrix {
        rows: 1,
        cols: z.rows * z.cols,
        data: z.data.clone(),
    }
}

/// Forecast per channel: flatten, then shared linear map to the horizon.
/// `z` holds one N x D matrix per (instance, channel), instance-major.
/// Returns one H x C matrix per instance.
pub fn forecast(params: &ModelParams, z: &[Matrix], channels: usize) -> Result<Vec<Matrix>> {
    let head = match &params.downstream {
        Some(DownstreamHead::Forecast(h)) => h,
        _ => return Err(Error::InvalidArg("no forecast head attached".into())),
    };
    let instances = z.len() / channels;
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let mut pred = Matrix::zeros(head.horizon, channels);
        for c in 0..channels {
            let zc = &z[i * channels + c];
            if zc.rows != head.num_patches {
                return Err(Error::shape("forecast", zc.shape_str(), head.num_patches));
            }
            let flat = flatten_repr(zc);
            let y = linear_forward(&flat, &head.w, &head.b)?;
            for h in 0..head.horizon {
                *pred.at_mut(h, c) = y.data[h];
            }
        }
        out.push(pred);
    }
    Ok(out)
}

/// Aggregate an N x D representation along N.
pub fn aggregate_repr(z: &Matrix, agg: Aggregate) -> (Matrix, Vec<usize>) {
    match agg {
        Aggregate::Max => {
            let mut out = Matrix::zeros(1, z.cols);
            let mut arg = vec![0usize; z.cols];
            for c in 0..z.cols {
                let mut best = z.at(0, c);
                for n in 1..z.rows {
                    if z.at(n, c) > best {
                        best = z.at(n, c);
                        arg[c] = n;
                    }
                }
                out.data[c] = best;
            }
            (out, arg)
        }
        Aggregate::Avg => {
            let mut out = z.col_sum();
            out.scale(1.0 / z.rows as f64);
            (out, Vec::new())
        }
        Aggregate::Concat => (flatten_repr(z), Vec::new()),
    }
}

/// Class logits: aggregate over patches per channel, average channels, linear map.
pub fn classify(params: &ModelParams, z: &[Matrix], channels: usize) -> Result<Matrix> {
    let head = match &params.downstream {
        Some(DownstreamHead::Classifier(h)) => h,
        _ => return Err(Error::InvalidArg("no classifier head attached".into())),
    };
    let instances = z.len() / channels;
    let mut logits = Matrix::zeros(instances, head.num_classes);
    for i in 0..instances {
        let mut pooled: Option<Matrix> = None;
        for c in 0..channels {
            let (v, _) = aggregate_repr(&z[i * channels + c], head.agg);
            match &mut pooled {
                Some(p) => p.add_assign(&v)?,
                None => pooled = Some(v),
            }
        }
        let mut v = pooled.unwrap();
        v.scale(1.0 / channels as f64);
        let y = linear_forward(&v, &head.w, &head.b)?;
        logits.row_mut(i).copy_from_slice(&y.data);
    }
    Ok(logits)
}

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightHeader {
    pub format_version: u32,
    pub kind: EncoderKind,
    pub patch_len: usize,
    pub dim: usize,
    pub dropout_rate: f64,
    /// Root seed the weights were produced under.
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub header: WeightHeader,
    pub params: ModelParams,
}

/// Write weights as JSON. f64 values serialize via shortest round-trip
/// representation, so save -> load is bitwise exact.
pub fn save_params(params: &ModelParams, seed: u64, path: &Path) -> Result<()> {
    let saved = SavedModel {
        header: WeightHeader {
            format_version: WEIGHT_FORMAT_VERSION,
            kind: params.encoder.kind,
            patch_len: params.patch_len,
            dim: params.dim,
            dropout_rate: params.encoder.dropout_rate,
            seed,
        },
        params: params.clone(),
    };
    let json = serde_json::to_string(&saved)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<SavedModel> {
    let json = fs::read_to_string(path)?;
    let saved: SavedModel = serde_json::from_str(&json)?;
    if saved.header.format_version != WEIGHT_FORMAT_VERSION {
        return Err(Error::WeightFile(format!(
            "unsupported format version {} (expected {})",
            saved.header.format_version, WEIGHT_FORMAT_VERSION
        )));
    }
    for t in saved.params.tensors() {
        if !t.is_finite() {
            return Err(Error::WeightFile("non-finite weight entry".into()));
        }
    }
    Ok(saved)
}

impl SavedModel {
    /// Validate compatibility with an expected configuration.
    pub fn require(&self, kind: EncoderKind, patch_len: usize, dim: usize) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::WeightFile(format!(
                "encoder kind mismatch: expected {kind:?}, file has {:?}",
                self.header.kind
            )));
        }
        if self.header.patch_len != patch_len {
            return Err(Error::WeightFile(format!(
                "patch length mismatch: expected {patch_len}, file has {}",
                self.header.patch_len
            )));
        }
        if self.header.dim != dim {
            return Err(Error::WeightFile(format!(
                "dimension mismatch: expected {dim}, file has {}",
                self.header.dim
            )));
        }
        Ok(())
    }
}
