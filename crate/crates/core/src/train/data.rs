use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::synth::{gen_views, read_bag, write_bag, SceneSpec, ViewBag};
use crate::tensor::Tensor;

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser over (seed, index)
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bags of views plus the per-image descriptors used for nearest-neighbour pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct BagDataset {
    pub bags: Vec<ViewBag>,
}

impl BagDataset {
    pub fn generate(num_bags: usize, image_size: usize, m: usize, strength: f64, seed: u64) -> Result<Self> {
        let bags = (0..num_bags)
            .map(|i| gen_views(&SceneSpec::random(scene_seed(seed, i), image_size), m, strength))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bags })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.bags[0].real.shape()
    }

    /// Writes `bag_0000`, `bag_0001`, ... under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (i, bag) in self.bags.iter().enumerate() {
            write_bag(&dir.join(format!("bag_{i:04}")), bag)?;
        }
        Ok(())
    }

    /// Reads every `bag_*` directory under `dir` in name order.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("bag_") && e.path().is_dir())
            .map(|e| e.path())
            .collect();
        names.sort();
        ensure!(!names.is_empty(), "no bag_* directories under {}", dir.display());
        let bags = names.iter().map(|p| read_bag(p)).collect::<Result<Vec<_>>>()?;
        let shape = bags[0].real.shape().to_vec();
        ensure!(
            bags.iter().all(|b| b.real.shape() == shape && b.m() == bags[0].m()),
            "bags under {} differ in image shape or size",
            dir.display()
        );
        Ok(Self { bags })
    }

    /// Average-pooled (2x2) pixels of every real image: a fixed descriptor
    /// for nearest-neighbour pairing that does not depend on the model.
    pub fn pixel_descriptors(&self) -> Vec<Vec<f32>> {
        self.bags.iter().map(|b| pooled(&b.real)).collect()
    }
}

fn pooled(img: &Tensor<f32>) -> Vec<f32> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![0.0f32; ph * pw * c];
    for y in 0..ph * 2 {
        for x in 0..pw * 2 {
            for ch in 0..c {
                out[((y / 2) * pw + x / 2) * c + ch] += 0.25 * img.data()[(y * w + x) * c + ch];
            }
        }
    }
    // Centre so that cosine similarity compares structure, not overall brightness.
    let mean = out.iter().sum::<f32>() / out.len() as f32;
    out.iter_mut().for_each(|v| *v -= mean);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_on_the_fly_equals_loaded_from_disk() {
        let data = BagDataset::generate(3, 16, 2, 0.5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        assert_eq!(BagDataset::load(dir.path()).unwrap(), data);
        assert_eq!(data, BagDataset::generate(3, 16, 2, 0.5, 9).unwrap());
        assert_ne!(scene_seed(9, 0), scene_seed(9, 1));
        assert_eq!(data.pixel_descriptors()[0].len(), 8 * 8 * 3);
    }
}
