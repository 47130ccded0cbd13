//! Bags of views: one real render plus M re-renders with perturbed object poses.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{SceneObject, SceneSpec};
use crate::config::KeyValues;
use crate::error::{ensure, Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

const MAX_RETRIES: usize = 10;

/// Rigid perturbation applied to one object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectTransform {
    pub rotation: f64,
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    /// Number of rejected draws before this one; `MAX_RETRIES` means the centre was clamped.
    pub retries: usize,
}

impl ObjectTransform {
    pub const IDENTITY: Self = Self { rotation: 0.0, dx: 0.0, dy: 0.0, scale: 1.0, retries: 0 };

    pub fn apply(&self, o: &SceneObject) -> SceneObject {
        SceneObject {
            center: (o.center.0 + self.dx, o.center.1 + self.dy),
            scale: o.scale * self.scale,
            orientation: o.orientation + self.rotation,
            ..o.clone()
        }
    }
}

/// Global colour jitter: `out = clamp((x - 0.5) * contrast + 0.5 + brightness) * gain[c]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
    pub gain: [f64; 3],
}

impl Photometric {
    pub const IDENTITY: Self = Self { brightness: 0.0, contrast: 1.0, gain: [1.0; 3] };

    pub fn apply(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let x = (*v as f64 - 0.5) * self.contrast + 0.5 + self.brightness;
            *v = (x * self.gain[i % 3]).clamp(0.0, 1.0) as f32;
        }
        out
    }

    /// Largest per-pixel change this jitter can cause on a `[0, 1]` image.
    pub fn max_deviation(&self) -> f64 {
        let g = self.gain.iter().map(|g| (g - 1.0).abs()).fold(0.0, f64::max);
        let g_max = self.gain.iter().copied().fold(1.0, f64::max);
        (0.5 * (self.contrast - 1.0).abs() + self.brightness.abs()) * g_max + g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMeta {
    pub objects: Vec<ObjectTransform>,
    pub photometric: Photometric,
}

/// The real image and its generated views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBag {
    pub seed: u64,
    pub strength: f64,
    pub real: Tensor<f32>,
    pub views: Vec<Tensor<f32>>,
    pub meta: Vec<ViewMeta>,
}

impl ViewBag {
    pub fn m(&self) -> usize {
        self.views.len()
    }

    /// Image `i` of the bag where 0 is the real image and `1..=M` are views.
    pub fn image(&self, i: usize) -> &Tensor<f32> {
        if i == 0 {
            &self.real
        } else {
            &self.views[i - 1]
        }
    }

    pub fn len(&self) -> usize {
        self.views.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn view_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn sample_transform(o: &SceneObject, size: f64, strength: f64, rng: &mut impl Rng) -> ObjectTransform {
    let rot = strength * PI / 4.0;
    let shift = strength * 0.2 * size;
    let zoom = strength * 0.2;
    let mut t = ObjectTransform::IDENTITY;
    for attempt in 0..=MAX_RETRIES {
        t = ObjectTransform {
            rotation: rng.gen_range(-rot..=rot),
            dx: rng.gen_range(-shift..=shift),
            dy: rng.gen_range(-shift..=shift),
            scale: 1.0 + rng.gen_range(-zoom..=zoom),
            retries: attempt,
        };
        let (cx, cy) = (o.center.0 + t.dx, o.center.1 + t.dy);
        if (0.0..size).contains(&cx) && (0.0..size).contains(&cy) {
            return t;
        }
    }
    t.dx = (o.center.0 + t.dx).clamp(0.0, size) - o.center.0;
    t.dy = (o.center.1 + t.dy).clamp(0.0, size) - o.center.1;
    t
}

/// Renders `m` views of `scene`, each with independently perturbed object
/// poses and a global photometric jitter, all scaled by `strength`.
pub fn gen_views(scene: &SceneSpec, m: usize, strength: f64) -> Result<ViewBag> {
    ensure!(m >= 1, "a bag needs at least one view");
    ensure!(strength > 0.0 && strength <= 1.0, "view strength {strength} outside (0, 1]");
    let size = scene.size as f64;
    let mut views = Vec::with_capacity(m);
    let mut meta = Vec::with_capacity(m);
    for v in 0..m {
        let mut rng = view_rng(scene.seed, v);
        let transforms: Vec<_> = scene.objects.iter().map(|o| sample_transform(o, size, strength, &mut rng)).collect();
        let photometric = Photometric {
            brightness: rng.gen_range(-0.1..=0.1) * strength,
            contrast: 1.0 + rng.gen_range(-0.2..=0.2) * strength,
            gain: [0.0; 3].map(|_| 1.0 + rng.gen_range(-0.05..=0.05) * strength),
        };
        let moved: Vec<_> = scene.objects.iter().zip(&transforms).map(|(o, t)| t.apply(o)).collect();
        views.push(photometric.apply(&scene.render_with(&moved)));
        meta.push(ViewMeta { objects: transforms, photometric });
    }
    Ok(ViewBag { seed: scene.seed, strength, real: scene.render(), views, meta })
}

pub const BAG_METADATA: &str = "metadata.txt";

fn view_name(i: usize) -> String {
    format!("view_{i:02}")
}

/// Writes `real.cdgt`, `view_XX.cdgt` and `metadata.txt` under `dir`.
pub fn write_bag(dir: &Path, bag: &ViewBag) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensor(dir.join("real.cdgt"), &bag.real)?;
    let mut kv = KeyValues::new();
    kv.set("seed", bag.seed);
    kv.set("strength", bag.strength);
    kv.set("views", bag.m());
    for (i, (img, meta)) in bag.views.iter().zip(&bag.meta).enumerate() {
        write_tensor(dir.join(format!("{}.cdgt", view_name(i))), img)?;
        let p = &meta.photometric;
        kv.set(
            format!("{}.photometric", view_name(i)),
            format!("{} {} {} {} {}", p.brightness, p.contrast, p.gain[0], p.gain[1], p.gain[2]),
        );
        for (k, t) in meta.objects.iter().enumerate() {
            kv.set(format!("{}.object_{k}", view_name(i)), format!("{} {} {} {} {}", t.rotation, t.dx, t.dy, t.scale, t.retries));
        }
    }
    crate::io::atomic_write(&dir.join(BAG_METADATA), kv.render().as_bytes())
}

fn parse_floats(path: &Path, s: &str, n: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("bad number list {s:?}")))?;
    if vals.len() != n {
        return Err(Error::format(path, format!("expected {n} numbers in {s:?}")));
    }
    Ok(vals)
}

pub fn read_bag(dir: &Path) -> Result<ViewBag> {
    let meta_path = dir.join(BAG_METADATA);
    let kv = KeyValues::load(&meta_path)?;
    let need = |key: &str| kv.get_str(key).ok_or_else(|| Error::format(&meta_path, format!("missing `{key}`")));
    let bad = |key: &str| Error::format(&meta_path, format!("invalid `{key}`"));
    let seed: u64 = need("seed")?.parse().map_err(|_| bad("seed"))?;
    let strength: f64 = need("strength")?.parse().map_err(|_| bad("strength"))?;
    let m: usize = need("views")?.parse().map_err(|_| bad("views"))?;
    let real = read_tensor(dir.join("real.cdgt"))?;
    let mut views = Vec::with_capacity(m);
    let mut meta = Vec::with_capacity(m);
    for i in 0..m {
        let img = read_tensor(dir.join(format!("{}.cdgt", view_name(i))))?;
        if img.shape() != real.shape() {
            return Err(Error::format(dir, format!("{} has shape {:?}, real has {:?}", view_name(i), img.shape(), real.shape())));
        }
        views.push(img);
        let p = parse_floats(&meta_path, need(&format!("{}.photometric", view_name(i)))?, 5)?;
        let mut objects = Vec::new();
        while let Some(s) = kv.get_str(&format!("{}.object_{}", view_name(i), objects.len())) {
            let t = parse_floats(&meta_path, s, 5)?;
            objects.push(ObjectTransform { rotation: t[0], dx: t[1], dy: t[2], scale: t[3], retries: t[4] as usize });
        }
        meta.push(ViewMeta { objects, photometric: Photometric { brightness: p[0], contrast: p[1], gain: [p[2], p[3], p[4]] } });
    }
    Ok(ViewBag { seed, strength, real, views, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bag_shape_and_determinism() {
        let scene = SceneSpec::random(11, 32);
        let bag = gen_views(&scene, 4, 0.5).unwrap();
        assert_eq!(bag.len(), 5);
        assert!(bag.views.iter().all(|v| v.shape() == bag.real.shape()));
        assert_eq!(bag, gen_views(&scene, 4, 0.5).unwrap());
        assert_ne!(bag.views[0], bag.views[1]);
        // View i does not depend on how many views were requested.
        assert_eq!(gen_views(&scene, 2, 0.5).unwrap().views[1], bag.views[1]);
        assert!(gen_views(&scene, 0, 0.5).is_err());
        assert!(gen_views(&scene, 1, 0.0).is_err());
        assert!(gen_views(&scene, 1, 1.5).is_err());
    }

    #[test]
    fn transforms_respect_strength_bounds() {
        for seed in 0..50 {
            let scene = SceneSpec::random(seed, 32);
            let s = 0.7;
            let bag = gen_views(&scene, 3, s).unwrap();
            for meta in &bag.meta {
                assert_eq!(meta.objects.len(), scene.objects.len());
                for (t, o) in meta.objects.iter().zip(&scene.objects) {
                    assert!(t.rotation.abs() <= s * PI / 4.0 + 1e-12);
                    assert!(t.dx.abs() <= s * 0.2 * 32.0 + 1e-12);
                    assert!((t.scale - 1.0).abs() <= s * 0.2 + 1e-12);
                    let moved = t.apply(o);
                    assert!((0.0..=32.0).contains(&moved.center.0));
                    assert!((0.0..=32.0).contains(&moved.center.1));
                    assert_eq!(moved.kind, o.kind);
                    assert_eq!(moved.color, o.color);
                }
            }
        }
    }

    #[test]
    fn vanishing_strength_converges_to_real() {
        let scene = SceneSpec::random(5, 32);
        let bag = gen_views(&scene, 2, 1e-6).unwrap();
        for (v, meta) in bag.views.iter().zip(&bag.meta) {
            assert!(v.max_abs_diff(&bag.real) <= meta.photometric.max_deviation() + 1e-3);
            assert!(v.max_abs_diff(&bag.real) < 1e-3);
        }
    }

    #[test]
    fn disk_round_trip() {
        let scene = SceneSpec::random(8, 16);
        let bag = gen_views(&scene, 3, 0.8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bag(dir.path(), &bag).unwrap();
        assert!(dir.path().join("view_02.cdgt").exists());
        assert_eq!(read_bag(dir.path()).unwrap(), bag);
    }
}
