//! Annotated videos of moving shapes: frames, instance masks, part labels and
//! keypoints.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{SceneObject, SceneSpec};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Static,
    /// Every object translates by `(vx, vy)` pixels per frame.
    Linear {
        vx: f64,
        vy: f64,
    },
    /// Per-object drift with speed up to `speed` px/frame, slow spin and a
    /// small size oscillation; objects bounce off the canvas border.
    Random {
        speed: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    /// Zero-based object index; the object's mask label is `object + 1`.
    pub object: usize,
    pub x: f64,
    pub y: f64,
    /// False when another object covers the point.
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Vec<Tensor<f32>>,
    /// `[H, W]` label maps: 0 background, `k + 1` for object `k`.
    pub masks: Vec<Tensor<f32>>,
    /// `[H, W]` label maps: 0 background, `1 + 4k + q` for quadrant `q` of object `k`.
    pub parts: Vec<Tensor<f32>>,
    pub keypoints: Vec<Vec<Keypoint>>,
    /// Object placements per frame.
    pub poses: Vec<Vec<SceneObject>>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.poses.first().map_or(0, Vec::len)
    }
}

/// Reflects `x` into `[lo, hi]`.
fn bounce(x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let t = (x - lo).rem_euclid(2.0 * span);
    lo + if t > span { 2.0 * span - t } else { t }
}

struct Trajectory {
    velocity: (f64, f64),
    spin: f64,
    pulse: (f64, f64),
}

fn poses_at(scene: &SceneSpec, motion: Motion, traj: &[Trajectory], t: f64) -> Vec<SceneObject> {
    let size = scene.size as f64;
    scene
        .objects
        .iter()
        .zip(traj)
        .map(|(o, tr)| match motion {
            Motion::Static => o.clone(),
            Motion::Linear { vx, vy } => SceneObject { center: (o.center.0 + vx * t, o.center.1 + vy * t), ..o.clone() },
            Motion::Random { .. } => {
                let scale = o.scale * (1.0 + tr.pulse.0 * (tr.pulse.1 * t).sin());
                let margin = scale * o.kind.bound();
                SceneObject {
                    center: (
                        bounce(o.center.0 + tr.velocity.0 * t, margin, size - margin),
                        bounce(o.center.1 + tr.velocity.1 * t, margin, size - margin),
                    ),
                    scale,
                    orientation: o.orientation + tr.spin * t,
                    ..o.clone()
                }
            }
        })
        .collect()
}

/// Renders `frames` frames of `scene` under `motion`.
pub fn gen_video(scene: &SceneSpec, frames: usize, motion: Motion) -> Result<Video> {
    ensure!(frames >= 2, "a video needs at least 2 frames, got {frames}");
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(u64::MAX);
    let speed = match motion {
        Motion::Random { speed } => speed,
        _ => 0.0,
    };
    let traj: Vec<Trajectory> = scene
        .objects
        .iter()
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let v = rng.gen_range(0.5..=1.0) * speed;
            Trajectory {
                velocity: (v * angle.cos(), v * angle.sin()),
                spin: rng.gen_range(-0.05..=0.05),
                pulse: (rng.gen_range(0.0..0.1), rng.gen_range(0.1..0.3)),
            }
        })
        .collect();

    let mut video = Video {
        frames: Vec::with_capacity(frames),
        masks: Vec::with_capacity(frames),
        parts: Vec::with_capacity(frames),
        keypoints: Vec::with_capacity(frames),
        poses: Vec::with_capacity(frames),
    };
    let n = scene.size;
    for f in 0..frames {
        let objects = poses_at(scene, motion, &traj, f as f64);
        let mask = scene.label_map(&objects, false);
        let keypoints = objects
            .iter()
            .enumerate()
            .flat_map(|(k, o)| {
                let mask = &mask;
                o.keypoints().into_iter().map(move |(x, y)| {
                    let (px, py) = (x.floor(), y.floor());
                    let inside = px >= 0.0 && py >= 0.0 && (px as usize) < n && (py as usize) < n;
                    let visible = inside && mask.data()[py as usize * n + px as usize] as usize == k + 1;
                    Keypoint { object: k, x, y, visible }
                })
            })
            .collect();
        video.frames.push(scene.render_with(&objects));
        video.parts.push(scene.label_map(&objects, true));
        video.masks.push(mask);
        video.keypoints.push(keypoints);
        video.poses.push(objects);
    }
    Ok(video)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid(mask: &Tensor<f32>, label: f32) -> (f64, f64) {
        let n = mask.shape()[1];
        let (mut sx, mut sy, mut c) = (0.0, 0.0, 0.0);
        for (i, &v) in mask.data().iter().enumerate() {
            if v == label {
                sx += (i % n) as f64;
                sy += (i / n) as f64;
                c += 1.0;
            }
        }
        (sx / c, sy / c)
    }

    #[test]
    fn static_video_is_constant() {
        let scene = SceneSpec::random(2, 32);
        let v = gen_video(&scene, 4, Motion::Static).unwrap();
        assert_eq!(v.len(), 4);
        for f in 1..4 {
            assert_eq!(v.frames[f], v.frames[0]);
            assert_eq!(v.masks[f], v.masks[0]);
        }
        assert_eq!(v.frames[0], scene.render());
        assert!(gen_video(&scene, 1, Motion::Static).is_err());
    }

    #[test]
    fn linear_motion_moves_centroids() {
        let mut tested = 0;
        for seed in 0..40 {
            let mut scene = SceneSpec::random(seed, 48);
            scene.objects.truncate(1);
            let o = &mut scene.objects[0];
            o.center = (16.0, 18.0);
            o.scale = 5.0;
            let (vx, vy) = (1.5, -0.75);
            let v = gen_video(&scene, 6, Motion::Linear { vx, vy }).unwrap();
            for f in 1..v.len() {
                let (x0, y0) = centroid(&v.masks[f - 1], 1.0);
                let (x1, y1) = centroid(&v.masks[f], 1.0);
                assert!(((x1 - x0) - vx).abs() <= 0.5, "seed {seed} frame {f}: dx {}", x1 - x0);
                assert!(((y1 - y0) - vy).abs() <= 0.5, "seed {seed} frame {f}: dy {}", y1 - y0);
            }
            tested += 1;
        }
        assert_eq!(tested, 40);
    }

    #[test]
    fn masks_partition_and_keypoints_agree() {
        for seed in 0..20 {
            let scene = SceneSpec::random(seed, 32);
            let v = gen_video(&scene, 5, Motion::Random { speed: 1.5 }).unwrap();
            for f in 0..v.len() {
                let mask = &v.masks[f];
                let parts = &v.parts[f];
                for (i, (&m, &p)) in mask.data().iter().zip(parts.data()).enumerate() {
                    let (px, py) = ((i % 32) as f64 + 0.5, (i / 32) as f64 + 0.5);
                    let covering: Vec<_> = v.poses[f].iter().enumerate().filter(|(_, o)| o.sdf(px, py) < 0.0).map(|(k, _)| k).collect();
                    // No gaps: covered pixels carry the topmost covering object.
                    assert_eq!(m as usize, covering.last().map_or(0, |k| k + 1));
                    // Part labels refine instance labels.
                    assert_eq!(m == 0.0, p == 0.0);
                    if m > 0.0 {
                        assert_eq!((p as usize - 1) / 4 + 1, m as usize);
                    }
                }
                for kp in &v.keypoints[f] {
                    assert!(v.poses[f][kp.object].sdf(kp.x, kp.y) < 0.0);
                    if kp.visible {
                        let idx = kp.y.floor() as usize * 32 + kp.x.floor() as usize;
                        assert_eq!(mask.data()[idx] as usize, kp.object + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn bounce_reflects() {
        assert_eq!(bounce(5.0, 0.0, 10.0), 5.0);
        assert_eq!(bounce(12.0, 0.0, 10.0), 8.0);
        assert_eq!(bounce(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(bounce(23.0, 0.0, 10.0), 3.0);
    }
}
