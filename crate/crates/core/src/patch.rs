//! Patchify, random masking and the scatter used to build decoder inputs.
//!
//! Patches are ordered row-major over the patch grid. Masked patches are
//! dropped before the encoder, never zeroed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// An image cut into non-overlapping `P x P` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<S: Scalar = f32> {
    /// `[rows * cols, P * P * C]`, each row a flattened `P x P x C` block.
    pub tokens: Tensor<S>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
}

impl<S: Scalar> PatchSequence<S> {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Splits an `[H, W, C]` image into row-major patches.
pub fn patchify<S: Scalar>(image: &Tensor<S>, p: usize) -> Result<PatchSequence<S>> {
    ensure!(image.rank() == 3, "patchify expects [H, W, C], got {:?}", image.shape());
    ensure!(p > 0, "patch size must be positive");
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", image.shape(), &[p, p]));
    }
    let (rows, cols) = (h / p, w / p);
    let dim = p * p * c;
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gr in 0..rows {
        for gc in 0..cols {
            for y in 0..p {
                let start = ((gr * p + y) * w + gc * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Ok(PatchSequence { tokens: Tensor::from_parts(vec![rows * cols, dim], out), grid: (rows, cols), patch_size: p, channels: c })
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(seq: &PatchSequence<S>) -> Result<Tensor<S>> {
    let (rows, cols) = seq.grid;
    let (p, c) = (seq.patch_size, seq.channels);
    ensure!(
        seq.tokens.shape() == [rows * cols, p * p * c],
        "token tensor {:?} does not match grid {rows}x{cols}, P={p}, C={c}",
        seq.tokens.shape()
    );
    let (h, w) = (rows * p, cols * p);
    let mut out = vec![S::zero(); h * w * c];
    for (t, token) in seq.tokens.data().chunks_exact(p * p * c).enumerate() {
        let (gr, gc) = (t / cols, t % cols);
        for y in 0..p {
            let dst = ((gr * p + y) * w + gc * p) * c;
            out[dst..dst + p * c].copy_from_slice(&token[y * p * c..(y + 1) * p * c]);
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Number of patches kept visible at `ratio`: `max(1, floor(n (1 - ratio)))`.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * (1.0 - ratio)).floor() as usize).clamp(1, n.max(1))
}

/// A partition of patch indices into visible and masked sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub ratio_bits: u64,
    pub seed: u64,
}

impl MaskPlan {
    /// Uniformly random plan, deterministic in `seed`.
    pub fn sample(n: usize, ratio: f64, seed: u64) -> Result<Self> {
        ensure!(n >= 1, "cannot mask an empty sequence");
        ensure!((0.0..1.0).contains(&ratio), "mask ratio must lie in [0, 1), got {ratio}");
        let keep = visible_count(n, ratio);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut visible = rand::seq::index::sample(&mut rng, n, keep).into_vec();
        visible.sort_unstable();
        Ok(Self::from_visible(n, visible, ratio, seed))
    }

    /// Plan with an explicit visible set; everything else is masked.
    pub fn from_visible(n: usize, mut visible: Vec<usize>, ratio: f64, seed: u64) -> Self {
        visible.sort_unstable();
        visible.dedup();
        let mut is_vis = vec![false; n];
        for &v in &visible {
            is_vis[v] = true;
        }
        let masked = (0..n).filter(|&i| !is_vis[i]).collect();
        Self { visible_idx: visible, masked_idx: masked, ratio_bits: ratio.to_bits(), seed }
    }

    /// Every patch visible.
    pub fn unmasked(n: usize) -> Self {
        Self::from_visible(n, (0..n).collect(), 0.0, 0)
    }

    pub fn ratio(&self) -> f64 {
        f64::from_bits(self.ratio_bits)
    }

    pub fn len(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// For each position, the row of `[visible; mask_token]` that fills it.
    pub fn restore_order(&self) -> Vec<usize> {
        let n_vis = self.visible_idx.len();
        let mut order = vec![n_vis; self.len()];
        for (rank, &pos) in self.visible_idx.iter().enumerate() {
            order[pos] = rank;
        }
        order
    }
}

/// Splits a sequence into visible tokens and masked reconstruction targets.
pub fn apply_mask<S: Scalar>(seq: &PatchSequence<S>, plan: &MaskPlan) -> Result<(Tensor<S>, Tensor<S>)> {
    ensure!(plan.len() == seq.len(), "mask plan covers {} patches but the sequence has {}", plan.len(), seq.len());
    let take = |idx: &[usize]| {
        if idx.is_empty() {
            Ok(Tensor::from_parts(vec![0, seq.token_dim()], Vec::new()))
        } else {
            seq.tokens.gather_rows(idx)
        }
    };
    Ok((take(&plan.visible_idx)?, take(&plan.masked_idx)?))
}

/// Places visible outputs back at their positions and `mask_token` everywhere else.
pub fn scatter_restore<S: Scalar>(visible_out: &Tensor<S>, mask_token: &[S], plan: &MaskPlan) -> Result<Tensor<S>> {
    ensure!(
        visible_out.rank() == 2 && visible_out.shape()[0] == plan.visible_idx.len(),
        "expected {} visible rows, got {:?}",
        plan.visible_idx.len(),
        visible_out.shape()
    );
    let d = visible_out.shape()[1];
    ensure!(mask_token.len() == d, "mask token has {} dims, tokens have {d}", mask_token.len());
    let token = Tensor::from_parts(vec![1, d], mask_token.to_vec());
    Tensor::concat(&[visible_out, &token], 0)?.gather_rows(&plan.restore_order())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(h: usize, w: usize, c: usize) -> Tensor<f32> {
        Tensor::from_fn(&[h, w, c], |i| i as f32)
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patchify(&image(224, 224, 3), 16).unwrap().len(), 196);
        let img = image(4, 4, 3);
        let one = patchify(&img, 4).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.tokens.data(), img.data());
        assert!(patchify(&image(10, 8, 1), 4).is_err());
    }

    #[test]
    fn hand_enumerated_blocks() {
        // 8x8 single-channel image with value = 10*row + col.
        let img = Tensor::from_fn(&[8, 8, 1], |i| (10 * (i / 8) + i % 8) as f32);
        let seq = patchify(&img, 4).unwrap();
        let block = |r0: usize, c0: usize| -> Vec<f32> {
            let mut v = Vec::new();
            for r in r0..r0 + 4 {
                for c in c0..c0 + 4 {
                    v.push((10 * r + c) as f32);
                }
            }
            v
        };
        assert_eq!(seq.tokens.row(0), block(0, 0).as_slice());
        assert_eq!(seq.tokens.row(1), block(0, 4).as_slice());
        assert_eq!(seq.tokens.row(2), block(4, 0).as_slice());
        assert_eq!(seq.tokens.row(3), block(4, 4).as_slice());
    }

    #[test]
    fn visible_counts_follow_floor_rule() {
        assert_eq!(MaskPlan::sample(196, 0.0, 1).unwrap().visible_idx.len(), 196);
        let p = MaskPlan::sample(196, 0.90, 1).unwrap();
        assert_eq!((p.visible_idx.len(), p.masked_idx.len()), (19, 177));
        assert_eq!(MaskPlan::sample(196, 0.985, 1).unwrap().visible_idx.len(), 2);
        assert_eq!(visible_count(4, 0.99), 1);
        assert!(MaskPlan::sample(10, 1.0, 0).is_err());
        assert!(MaskPlan::sample(0, 0.5, 0).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut hits = [0usize; 10];
        let draws = 10_000;
        for s in 0..draws {
            for &i in &MaskPlan::sample(10, 0.5, s as u64).unwrap().visible_idx {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / draws as f64;
            assert!((f - 0.5).abs() < 0.03, "frequency {f}");
        }
    }

    #[test]
    fn apply_mask_cases() {
        let seq = patchify(&image(8, 8, 1), 4).unwrap();
        let (vis, masked) = apply_mask(&seq, &MaskPlan::unmasked(4)).unwrap();
        assert_eq!(vis, seq.tokens);
        assert_eq!(masked.shape(), &[0, 16]);

        let plan = MaskPlan::from_visible(4, vec![0], 0.75, 0);
        let (vis, masked) = apply_mask(&seq, &plan).unwrap();
        assert_eq!(vis.data(), seq.tokens.row(0));
        assert_eq!(masked.data(), &seq.tokens.data()[16..]);

        assert!(apply_mask(&seq, &MaskPlan::unmasked(5)).is_err());
    }

    #[test]
    fn scatter_restore_cases() {
        let vis = Tensor::from_fn(&[3, 2], |i| i as f32 + 1.0);
        let all = MaskPlan::unmasked(3);
        assert_eq!(scatter_restore(&vis, &[9.0, 9.0], &all).unwrap(), vis);

        let one = Tensor::new(vec![1, 2], vec![5.0f32, 6.0]).unwrap();
        let plan = MaskPlan::from_visible(4, vec![2], 0.75, 0);
        let out = scatter_restore(&one, &[-1.0, -2.0], &plan).unwrap();
        assert_eq!(out.data(), &[-1.0, -2.0, -1.0, -2.0, 5.0, 6.0, -1.0, -2.0]);
        assert!(scatter_restore(&vis, &[0.0, 0.0], &plan).is_err());
    }

    #[test]
    fn scatter_restore_matches_hand_scatter() {
        let plan = MaskPlan::sample(12, 0.6, 42).unwrap();
        let vis = Tensor::from_fn(&[plan.visible_idx.len(), 3], |i| i as f32);
        let mask = [0.5f32, -0.5, 7.0];
        let out = scatter_restore(&vis, &mask, &plan).unwrap();
        let mut hand = vec![mask.to_vec(); 12];
        for (k, &pos) in plan.visible_idx.iter().enumerate() {
            hand[pos] = vis.row(k).to_vec();
        }
        for pos in 0..12 {
            assert_eq!(out.row(pos), hand[pos].as_slice());
        }
    }

    proptest! {
        #[test]
        fn patchify_round_trips(gr in 1usize..5, gc in 1usize..5, p in 1usize..5, c in 1usize..4) {
            let img = image(gr * p, gc * p, c);
            let seq = patchify(&img, p).unwrap();
            prop_assert_eq!(seq.len(), gr * gc);
            prop_assert_eq!(unpatchify(&seq).unwrap(), img);
        }

        #[test]
        fn plan_partitions(n in 1usize..300, ratio in 0.0f64..0.999, seed in any::<u64>()) {
            let plan = MaskPlan::sample(n, ratio, seed).unwrap();
            let mut all: Vec<usize> = plan.visible_idx.iter().chain(&plan.masked_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let want = ((n as f64 * (1.0 - ratio)).floor() as usize).max(1);
            prop_assert_eq!(plan.visible_idx.len(), want);
            prop_assert_eq!(&plan, &MaskPlan::sample(n, ratio, seed).unwrap());
        }

        #[test]
        fn gather_partition_reconstructs(seed in any::<u64>(), ratio in 0.0f64..0.95) {
            let seq = patchify(&image(12, 8, 2), 4).unwrap();
            let plan = MaskPlan::sample(seq.len(), ratio, seed).unwrap();
            let (vis, masked) = apply_mask(&seq, &plan).unwrap();
            for (k, &i) in plan.visible_idx.iter().enumerate() {
                prop_assert_eq!(vis.row(k), seq.tokens.row(i));
            }
            for (k, &i) in plan.masked_idx.iter().enumerate() {
                prop_assert_eq!(masked.row(k), seq.tokens.row(i));
            }
        }
    }
}
