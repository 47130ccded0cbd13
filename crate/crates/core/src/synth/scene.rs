//! Scenes of textured 2-D shapes over a textured background, rendered with
//! signed-distance anti-aliasing.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Bar];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Bar => "bar",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Radius of the bounding circle for unit scale.
    pub fn bound(self) -> f64 {
        match self {
            ShapeKind::Disk | ShapeKind::Triangle => 1.0,
            ShapeKind::Square => std::f64::consts::SQRT_2,
            ShapeKind::Bar => (1.0f64 + 0.25).sqrt(),
        }
    }
}

/// One object: `scale` is its radius in pixels, `orientation` in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub center: (f64, f64),
    pub scale: f64,
    pub orientation: f64,
    /// Frequency and phase of the stripe texture in object coordinates.
    pub texture: (f64, f64),
}

impl SceneObject {
    /// Maps an image point into the object's unit frame.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.center.0) / self.scale, (y - self.center.1) / self.scale);
        let (s, c) = self.orientation.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Signed distance in pixels; negative inside.
    pub fn sdf(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(x, y);
        let d = match self.kind {
            ShapeKind::Disk => (u * u + v * v).sqrt() - 1.0,
            ShapeKind::Square => box_sdf(u, v, 1.0, 1.0),
            ShapeKind::Bar => box_sdf(u, v, 1.0, 0.5),
            ShapeKind::Triangle => triangle_sdf(u, v),
        };
        d * self.scale
    }

    /// Which of four parts (quadrants in the object frame) a point belongs to.
    pub fn part(&self, x: f64, y: f64) -> usize {
        let (u, v) = self.local(x, y);
        (usize::from(u >= 0.0)) + 2 * usize::from(v >= 0.0)
    }

    fn shade(&self, x: f64, y: f64) -> [f64; 3] {
        let (u, v) = self.local(x, y);
        let (freq, phase) = self.texture;
        let t = 0.8 + 0.2 * (freq * (u + 0.5 * v) + phase).sin();
        let q = if self.part(x, y) % 3 == 0 { 1.0 } else { 0.85 };
        self.color.map(|c| (c * t * q).clamp(0.0, 1.0))
    }

    /// Points inside the object: its center and four points 60% of the way to
    /// the corners of its bounding square (in its own frame).
    pub fn keypoints(&self) -> Vec<(f64, f64)> {
        let (s, c) = self.orientation.sin_cos();
        let reach = match self.kind {
            ShapeKind::Disk => 0.6 * std::f64::consts::FRAC_1_SQRT_2,
            ShapeKind::Square => 0.6,
            ShapeKind::Triangle => 0.2,
            ShapeKind::Bar => 0.3,
        };
        let mut pts = vec![self.center];
        for (u, v) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            let (u, v) = (u * reach, v * reach);
            let v = if self.kind == ShapeKind::Triangle { v + 0.1 } else { v };
            let dx = (c * u - s * v) * self.scale;
            let dy = (s * u + c * v) * self.scale;
            pts.push((self.center.0 + dx, self.center.1 + dy));
        }
        pts
    }
}

fn box_sdf(u: f64, v: f64, hx: f64, hy: f64) -> f64 {
    let (qx, qy) = (u.abs() - hx, v.abs() - hy);
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

/// Equilateral triangle with circumradius 1, apex up.
fn triangle_sdf(u: f64, v: f64) -> f64 {
    // Maximum over the three edge half-planes; exact inside, conservative outside.
    let normals = [(0.0, 1.0), (0.866_025_403_784_438_6, -0.5), (-0.866_025_403_784_438_6, -0.5)];
    normals.iter().map(|&(nx, ny)| nx * u + ny * v - 0.5).fold(f64::NEG_INFINITY, f64::max)
}

/// Static background: base colour modulated by a tilted sinusoidal pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub frequency: f64,
    pub angle: f64,
    pub phase: f64,
}

impl Background {
    fn shade(&self, x: f64, y: f64) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let t = 0.5 + 0.5 * (self.frequency * (c * x + s * y) + self.phase).sin();
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = self.base[ch] * (1.0 - t) + self.accent[ch] * t;
        }
        out
    }
}

/// Everything needed to re-render a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub background: Background,
    /// Back to front.
    pub objects: Vec<SceneObject>,
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    // Saturated colours: one channel high, one low, one random.
    let mut c = [rng.gen_range(0.75..1.0), rng.gen_range(0.0..0.25), rng.gen_range(0.0..1.0)];
    let r = rng.gen_range(0..3);
    c.rotate_left(r);
    if rng.gen_bool(0.5) {
        c.swap(0, 1);
    }
    c
}

impl SceneSpec {
    /// Random scene with 1 to 5 objects fully inside a `size x size` canvas.
    pub fn random(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let background = Background {
            base: [0.0; 3].map(|_| rng.gen_range(0.15..0.45)),
            accent: [0.0; 3].map(|_| rng.gen_range(0.15..0.45)),
            frequency: rng.gen_range(0.6..2.0) * 2.0 * PI / s,
            angle: rng.gen_range(0.0..PI),
            phase: rng.gen_range(0.0..2.0 * PI),
        };
        let count = rng.gen_range(1..=5);
        let objects = (0..count)
            .map(|_| {
                let kind = ShapeKind::ALL[rng.gen_range(0..4)];
                let scale = s * rng.gen_range(0.12..0.22);
                let margin = scale * kind.bound() + 0.5;
                let center = (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
                SceneObject {
                    kind,
                    color: random_color(&mut rng),
                    center,
                    scale,
                    orientation: rng.gen_range(0.0..2.0 * PI),
                    texture: (rng.gen_range(2.0..6.0), rng.gen_range(0.0..2.0 * PI)),
                }
            })
            .collect();
        Self { seed, size, background, objects }
    }

    /// `[size, size, 3]` image in `[0, 1]`, objects composited back to front.
    pub fn render(&self) -> Tensor<f32> {
        self.render_with(&self.objects)
    }

    pub(crate) fn render_with(&self, objects: &[SceneObject]) -> Tensor<f32> {
        let n = self.size;
        let mut data = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = self.background.shade(px, py);
                for o in objects {
                    let alpha = (0.5 - o.sdf(px, py)).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        let c = o.shade(px, py);
                        for ch in 0..3 {
                            rgb[ch] = rgb[ch] * (1.0 - alpha) + c[ch] * alpha;
                        }
                    }
                }
                data.extend(rgb.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
            }
        }
        Tensor::from_parts(vec![n, n, 3], data)
    }

    /// Per-pixel index of the topmost object covering the pixel centre, 0 for background.
    pub(crate) fn label_map(&self, objects: &[SceneObject], parts: bool) -> Tensor<f32> {
        let n = self.size;
        Tensor::from_fn(&[n, n], |i| {
            let (px, py) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
            let mut label = 0usize;
            for (k, o) in objects.iter().enumerate() {
                if o.sdf(px, py) < 0.0 {
                    label = if parts { 1 + 4 * k + o.part(px, py) } else { k + 1 };
                }
            }
            label as f32
        })
    }
}

/// Renders a random scene: deterministic in `seed`.
pub fn gen_scene(seed: u64, size: usize) -> Result<(Tensor<f32>, SceneSpec)> {
    ensure!(size >= 4 && size % 4 == 0, "canvas size {size} must be a positive multiple of 4");
    let spec = SceneSpec::random(seed, size);
    Ok((spec.render(), spec))
}
