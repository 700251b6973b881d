//! Patchification and complementary masking.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    None,
    ReplicateLast,
}

/// Per-instance, per-channel patch tensor.
///
/// Stored as one N x P matrix per (instance, channel), instance-major.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub instances: usize,
    pub channels: usize,
    pub num_patches: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub pad_mode: PadMode,
    patches: Vec<Matrix>,
}

impl PatchBatch {
    pub fn slice(&self, instance: usize, channel: usize) -> &Matrix {
        &self.patches[instance * self.channels + channel]
    }

    pub fn slices(&self) -> &[Matrix] {
        &self.patches
    }
}

/// Split each channel of a normalized L x C window into N patches of length P.
pub fn patchify(
    normalized: &Matrix,
    patch_len: usize,
    stride: usize,
    pad_mode: PadMode,
) -> Result<Vec<Matrix>> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::InvalidArg("patch_len and stride must be positive".into()));
    }
    let (l, c) = normalized.shape();
    let l_eff = match pad_mode {
        PadMode::None => {
            if l < patch_len {
                return Err(Error::InvalidArg(format!(
                    "series length {l} is shorter than patch length {patch_len}"
                )));
            }
            l
        }
        PadMode::ReplicateLast => {
            // pad so the last patch ends exactly at the padded tail
            let base = l.max(patch_len);
            let over = (base - patch_len) % stride;
            if over == 0 {
                base
            } else {
                base + (stride - over)
            }
        }
    };
    let n = (l_eff - patch_len) / stride + 1;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut m = Matrix::zeros(n, patch_len);
        for p in 0..n {
            for k in 0..patch_len {
                let t = p * stride + k;
                let v = if t < l {
                    normalized.at(t, ch)
                } else {
                    normalized.at(l - 1, ch)
                };
                *m.at_mut(p, k) = v;
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Patchify a batch of already-normalized L x C windows into a PatchBatch.
pub fn patchify_batch(
    windows: &[Matrix],
    patch_len: usize,
    stride: usize,
    pad_mode: PadMode,
) -> Result<PatchBatch> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidArg("empty window batch".into()))?;
    let channels = first.cols;
    let mut patches = Vec::with_capacity(windows.len() * channels);
    let mut num_patches = 0;
    for w in windows {
        if w.cols != channels {
            return Err(Error::shape("patchify_batch", channels, w.cols));
        }
        let per_channel = patchify(w, patch_len, stride, pad_mode)?;
        num_patches = per_channel[0].rows;
        patches.extend(per_channel);
    }
    Ok(PatchBatch {
        instances: windows.len(),
        channels,
        num_patches,
        patch_len,
        stride,
        pad_mode,
        patches,
    })
}

/// Complementary binary patch masks: view 1 keeps `m == 1`, view 2 keeps `m == 0`.
///
/// Exactly floor(N/2) entries of each (instance, channel) row are 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub instances: usize,
    pub channels: usize,
    pub num_patches: usize,
    /// instances x channels x num_patches, instance-major.
    pub m: Vec<u8>,
}

impl MaskPair {
    pub fn row(&self, instance: usize, channel: usize) -> &[u8] {
        let start = (instance * self.channels + channel) * self.num_patches;
        &self.m[start..start + self.num_patches]
    }
}

pub fn complementary_masks(
    instances: usize,
    channels: usize,
    num_patches: usize,
    rng: &mut RngStream,
) -> Result<MaskPair> {
    if num_patches < 2 {
        return Err(Error::InvalidArg(format!(
            "complementary masking needs at least 2 patches, got {num_patches}"
        )));
    }
    let zeros_per_row = num_patches / 2;
    let mut m = vec![1u8; instances * channels * num_patches];
    for i in 0..instances {
        for c in 0..channels {
            let start = (i * channels + c) * num_patches;
            for idx in rng.subset(num_patches, zeros_per_row) {
                m[start + idx] = 0;
            }
        }
    }
    Ok(MaskPair {
        instances,
        channels,
        num_patches,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(l: usize, c: usize) -> Matrix {
        Matrix::from_vec(l, c, (0..l * c).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn patch_counts() {
        // 512 steps, P=12, stride 12 -> 42 patches, last 8 steps dropped
        let w = ramp(512, 1);
        let p = patchify(&w, 12, 12, PadMode::None).unwrap();
        assert_eq!(p[0].rows, 42);

        let w2 = ramp(24, 1);
        let p2 = patchify(&w2, 12, 6, PadMode::None).unwrap();
        assert_eq!(p2[0].rows, 3);

        assert!(patchify(&ramp(10, 1), 12, 12, PadMode::None).is_err());
    }

    #[test]
    fn patch_reassembly_bitwise() {
        let w = ramp(50, 2);
        let p = patchify(&w, 7, 7, PadMode::None).unwrap();
        let n = p[0].rows;
        for ch in 0..2 {
            let mut rebuilt = Vec::new();
            for row in 0..n {
                rebuilt.extend_from_slice(p[ch].row(row));
            }
            for (t, v) in rebuilt.iter().enumerate() {
                assert_eq!(*v, w.at(t, ch));
            }
        }
    }

    #[test]
    fn replicate_last_covers_tail() {
        let w = ramp(10, 1);
        let p = patchify(&w, 4, 4, PadMode::ReplicateLast).unwrap();
        // padded to 12 -> 3 patches; last patch is [8, 9, 9, 9]
        assert_eq!(p[0].rows, 3);
        assert_eq!(p[0].row(2), &[8.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn mask_counts_and_partition() {
        let mut rng = RngStream::substream(0, "masking");
        let mp = complementary_masks(3, 2, 4, &mut rng).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let row = mp.row(i, c);
                let zeros = row.iter().filter(|v| **v == 0).count();
                assert_eq!(zeros, 2);
                for v in row {
                    assert!(*v == 0 || *v == 1);
                }
            }
        }
        let mp5 = complementary_masks(1, 1, 5, &mut rng).unwrap();
        let zeros = mp5.row(0, 0).iter().filter(|v| **v == 0).count();
        assert_eq!(zeros, 2); // complement has 3 zeros

        assert!(complementary_masks(1, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn masks_are_seed_deterministic() {
        let mut a = RngStream::substream(17, "masking");
        let mut b = RngStream::substream(17, "masking");
        assert_eq!(
            complementary_masks(4, 3, 8, &mut a).unwrap(),
            complementary_masks(4, 3, 8, &mut b).unwrap()
        );
    }
}
