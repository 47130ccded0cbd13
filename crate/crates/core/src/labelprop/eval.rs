use std::path::Path;

use super::propagate::{hard_labels, one_hot, propagate_frame, PropagationConfig, PropagationContext};
use super::scores::{boundary_f, boundary_tolerance, jaccard, miou, pck};
use crate::error::{ensure, Error, Result};
use crate::io::{atomic_write, fmt6, render_records, render_table, Record};
use crate::model::{extract_features, ModelParams};
use crate::synth::Video;
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Produces one feature row per patch, row-major over the patch grid.
pub trait FeatureExtractor: Sync {
    fn patch_size(&self) -> usize;
    fn features(&self, frame: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl FeatureExtractor for ModelParams {
    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn features(&self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(extract_features(self, frame)?.1)
    }
}

/// Stub encoder whose feature for patch `i` is the `i`-th unit vector,
/// independent of the pixels.
#[derive(Clone, Copy, Debug)]
pub struct IdentityFeatures {
    pub patch_size: usize,
}

impl FeatureExtractor for IdentityFeatures {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn features(&self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (rows, cols) = grid_of(frame, self.patch_size)?;
        Ok(Tensor::eye(rows * cols))
    }
}

fn grid_of(frame: &Tensor<f32>, p: usize) -> Result<(usize, usize)> {
    ensure!(frame.rank() >= 2, "frame must be at least 2-D, got {:?}", frame.shape());
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    ensure!(p > 0 && h % p == 0 && w % p == 0, "{h}x{w} frame is not divisible by patch size {p}");
    Ok((h / p, w / p))
}

/// Majority label of every `p x p` block; ties go to the smaller label.
pub fn downsample_labels(labels: &[usize], height: usize, width: usize, p: usize) -> Vec<usize> {
    let (rows, cols) = (height / p, width / p);
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            counts.iter_mut().for_each(|n| *n = 0);
            for y in r * p..(r + 1) * p {
                for x in c * p..(c + 1) * p {
                    counts[labels[y * width + x]] += 1;
                }
            }
            let best = (0..=max).fold(0, |b, l| if counts[l] > counts[b] { l } else { b });
            out.push(best);
        }
    }
    out
}

/// Nearest-neighbour upsampling of patch labels to pixels.
pub fn upsample_labels(patches: &[usize], rows: usize, cols: usize, p: usize) -> Vec<usize> {
    let (h, w) = (rows * p, cols * p);
    (0..h * w).map(|i| patches[(i / w / p) * cols + (i % w) / p]).collect()
}

/// A video with its annotations, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalVideo {
    pub name: String,
    pub frames: Vec<Tensor<f32>>,
    /// Instance label maps, `[H, W]`.
    pub masks: Vec<Vec<usize>>,
    /// Part label maps, `[H, W]`; empty when not annotated.
    pub parts: Vec<Vec<usize>>,
    /// Keypoints per frame in a fixed order; empty when not annotated.
    pub keypoints: Vec<Vec<(f64, f64)>>,
}

fn labels_of(t: &Tensor<f32>) -> Vec<usize> {
    t.data().iter().map(|&v| v.max(0.0).round() as usize).collect()
}

fn label_tensor(labels: &[usize], h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_parts(vec![h, w], labels.iter().map(|&v| v as f32).collect())
}

impl EvalVideo {
    pub fn from_synth(name: impl Into<String>, video: &Video) -> Self {
        Self {
            name: name.into(),
            frames: video.frames.clone(),
            masks: video.masks.iter().map(labels_of).collect(),
            parts: video.parts.iter().map(labels_of).collect(),
            keypoints: video.keypoints.iter().map(|k| k.iter().map(|p| (p.x, p.y)).collect()).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[1]
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.frames.len() >= 2, "video `{}` needs at least two frames", self.name);
        let (h, w) = (self.height(), self.width());
        ensure!(self.frames.iter().all(|f| f.shape()[..2] == [h, w]), "frames of `{}` differ in size", self.name);
        for (what, maps) in [("masks", &self.masks), ("parts", &self.parts)] {
            ensure!(
                maps.is_empty() || (maps.len() == self.frames.len() && maps.iter().all(|m| m.len() == h * w)),
                "{what} of `{}` do not match its frames",
                self.name
            );
        }
        ensure!(
            self.keypoints.is_empty() || self.keypoints.len() == self.frames.len(),
            "keypoints of `{}` do not cover every frame",
            self.name
        );
        Ok(())
    }

    /// Writes `frame_XXX.cdgt`, `mask_XXX.cdgt`, `part_XXX.cdgt` and `keypoints.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (h, w) = (self.height(), self.width());
        for (i, f) in self.frames.iter().enumerate() {
            write_tensor(dir.join(format!("frame_{i:03}.cdgt")), f)?;
        }
        for (i, m) in self.masks.iter().enumerate() {
            write_tensor(dir.join(format!("mask_{i:03}.cdgt")), &label_tensor(m, h, w))?;
        }
        for (i, m) in self.parts.iter().enumerate() {
            write_tensor(dir.join(format!("part_{i:03}.cdgt")), &label_tensor(m, h, w))?;
        }
        if !self.keypoints.is_empty() {
            let mut text = String::from("# frame x y\n");
            for (f, kps) in self.keypoints.iter().enumerate() {
                for (x, y) in kps {
                    text.push_str(&format!("{f} {x:?} {y:?}\n"));
                }
            }
            atomic_write(&dir.join("keypoints.txt"), text.as_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let series = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            let mut out = Vec::new();
            loop {
                let p = dir.join(format!("{prefix}_{:03}.cdgt", out.len()));
                if !p.exists() {
                    return Ok(out);
                }
                out.push(read_tensor(&p)?);
            }
        };
        let frames = series("frame")?;
        if frames.is_empty() {
            return Err(Error::format(dir, "no frame_000.cdgt"));
        }
        let masks = series("mask")?.iter().map(labels_of).collect();
        let parts = series("part")?.iter().map(labels_of).collect();
        let kp_path = dir.join("keypoints.txt");
        let mut keypoints: Vec<Vec<(f64, f64)>> = Vec::new();
        if kp_path.exists() {
            keypoints = vec![Vec::new(); frames.len()];
            for (lineno, line) in crate::io::read_to_string(&kp_path)?.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let bad = || Error::format(&kp_path, format!("line {}: expected `frame x y`", lineno + 1));
                let mut it = line.split_whitespace();
                let f: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let x: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let y: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                keypoints.get_mut(f).ok_or_else(bad)?.push((x, y));
            }
        }
        let video = Self { name, frames, masks, parts, keypoints };
        video.validate().map_err(|e| Error::format(dir, e.to_string()))?;
        Ok(video)
    }
}

/// Writes each video under `dir/<name>`.
pub fn save_videos(dir: &Path, videos: &[EvalVideo]) -> Result<()> {
    videos.iter().try_for_each(|v| v.save(&dir.join(&v.name)))
}

/// Loads every sub-directory of `dir` holding a `frame_000.cdgt`, in name order.
pub fn load_videos(dir: &Path) -> Result<Vec<EvalVideo>> {
    let mut dirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frame_000.cdgt").exists())
        .collect();
    dirs.sort();
    ensure!(!dirs.is_empty(), "no videos under {}", dir.display());
    dirs.iter().map(|d| EvalVideo::load(d)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Instance masks scored by J and F.
    Segmentation,
    /// Part labels scored by mIoU.
    Parts,
    /// Keypoints scored by PCK.
    Pose,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" | "davis" => Ok(Task::Segmentation),
            "parts" | "vip" => Ok(Task::Parts),
            "pose" | "jhmdb" => Ok(Task::Pose),
            other => Err(Error::Config(format!("unknown task `{other}` (segmentation, parts or pose)"))),
        }
    }
}

/// Scores for one video; fields a task does not produce are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoScores {
    pub name: String,
    pub j: Option<f64>,
    pub f: Option<f64>,
    pub miou: Option<f64>,
    pub pck10: Option<f64>,
    pub pck20: Option<f64>,
}

impl VideoScores {
    pub fn jf(&self) -> Option<f64> {
        Some((self.j? + self.f?) / 2.0)
    }

    pub fn record(&self) -> Record {
        let mut r = Record::new().text("video", &self.name);
        for (k, v) in [("j", self.j), ("f", self.f), ("jf", self.jf()), ("miou", self.miou), ("pck10", self.pck10), ("pck20", self.pck20)] {
            if let Some(v) = v {
                r = r.num(k, v);
            }
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub videos: Vec<VideoScores>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn j_mean(&self) -> Option<f64> {
        mean_of(self.videos.iter().map(|v| v.j))
    }

    pub fn f_mean(&self) -> Option<f64> {
        mean_of(self.videos.iter().map(|v| v.f))
    }

    pub fn jf_mean(&self) -> Option<f64> {
        Some((self.j_mean()? + self.f_mean()?) / 2.0)
    }

    pub fn miou_mean(&self) -> Option<f64> {
        mean_of(self.videos.iter().map(|v| v.miou))
    }

    pub fn pck_mean(&self) -> (Option<f64>, Option<f64>) {
        (mean_of(self.videos.iter().map(|v| v.pck10)), mean_of(self.videos.iter().map(|v| v.pck20)))
    }

    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), fmt6);
        let mut rows: Vec<Vec<String>> = self
            .videos
            .iter()
            .map(|v| vec![v.name.clone(), cell(v.j), cell(v.f), cell(v.jf()), cell(v.miou), cell(v.pck10), cell(v.pck20)])
            .collect();
        let (p10, p20) = self.pck_mean();
        rows.push(vec![
            "mean".into(),
            cell(self.j_mean()),
            cell(self.f_mean()),
            cell(self.jf_mean()),
            cell(self.miou_mean()),
            cell(p10),
            cell(p20),
        ]);
        render_table(&["video", "J", "F", "J&F", "mIoU", "PCK@0.1", "PCK@0.2"], &rows)
    }

    /// Writes `<stem>.txt` (table) and `<stem>.records` (one line per video).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        atomic_write(&dir.join(format!("{stem}.txt")), self.table().as_bytes())?;
        let records: Vec<Record> = self.videos.iter().map(VideoScores::record).collect();
        atomic_write(&dir.join(format!("{stem}.records")), render_records(&records).as_bytes())
    }
}

/// Propagates first-frame patch labels through the video; returns patch labels per frame (frame 0 included).
fn propagate_video(feats: &[Tensor<f32>], grid: (usize, usize), first: Tensor<f32>, cfg: &PropagationConfig) -> Result<Vec<Tensor<f32>>> {
    let mut ctx = PropagationContext::new(grid, &feats[0], &first)?;
    let mut out = vec![first];
    for f in &feats[1..] {
        out.push(propagate_frame(&mut ctx, f, cfg)?);
    }
    Ok(out)
}

/// Propagation-based scores of one video.
pub fn evaluate_video(extractor: &dyn FeatureExtractor, video: &EvalVideo, task: Task, cfg: &PropagationConfig) -> Result<VideoScores> {
    video.validate()?;
    let p = extractor.patch_size();
    let (h, w) = (video.height(), video.width());
    let (rows, cols) = grid_of(&video.frames[0], p)?;
    let feats = video.frames.iter().map(|f| extractor.features(f)).collect::<Result<Vec<_>>>()?;
    for f in &feats {
        ensure!(f.rank() == 2 && f.rows() == rows * cols, "extractor returned {:?} for a {rows}x{cols} grid", f.shape());
    }
    let mut scores = VideoScores { name: video.name.clone(), ..Default::default() };
    match task {
        Task::Segmentation | Task::Parts => {
            let maps = if task == Task::Segmentation { &video.masks } else { &video.parts };
            ensure!(!maps.is_empty(), "video `{}` has no {task:?} annotations", video.name);
            let classes = maps.iter().flatten().copied().max().unwrap_or(0);
            let first = one_hot(&downsample_labels(&maps[0], h, w, p), classes.max(1));
            let soft = propagate_video(&feats, (rows, cols), first, cfg)?;
            let pred: Vec<Vec<usize>> = soft[1..].iter().map(|s| upsample_labels(&hard_labels(s), rows, cols, p)).collect();
            let gt = &maps[1..];
            if task == Task::Parts {
                scores.miou = Some(miou(&pred, gt, classes + 1)?);
            } else {
                let objects: Vec<usize> = (1..=classes).filter(|k| maps[0].contains(k)).collect();
                ensure!(!objects.is_empty(), "first frame of `{}` has no annotated object", video.name);
                let tol = boundary_tolerance(h, w);
                let (mut js, mut fs) = (Vec::new(), Vec::new());
                for &k in &objects {
                    for (pm, gm) in pred.iter().zip(gt) {
                        let a: Vec<bool> = pm.iter().map(|&l| l == k).collect();
                        let b: Vec<bool> = gm.iter().map(|&l| l == k).collect();
                        js.push(jaccard(&a, &b)?);
                        fs.push(boundary_f(&a, &b, h, w, tol)?);
                    }
                }
                scores.j = Some(js.iter().sum::<f64>() / js.len() as f64);
                scores.f = Some(fs.iter().sum::<f64>() / fs.len() as f64);
            }
        }
        Task::Pose => {
            ensure!(!video.keypoints.is_empty() && !video.keypoints[0].is_empty(), "video `{}` has no keypoints", video.name);
            let kps = &video.keypoints;
            let n = kps[0].len();
            ensure!(kps.iter().all(|k| k.len() == n), "keypoint count changes within `{}`", video.name);
            let cell = |(x, y): (f64, f64)| {
                let r = ((y / p as f64).floor().max(0.0) as usize).min(rows - 1);
                let c = ((x / p as f64).floor().max(0.0) as usize).min(cols - 1);
                r * cols + c
            };
            let mut first = Tensor::zeros(&[rows * cols, n]);
            for (k, &pt) in kps[0].iter().enumerate() {
                first.data_mut()[cell(pt) * n + k] = 1.0;
            }
            for row in first.data_mut().chunks_exact_mut(n) {
                let mass: f32 = row.iter().sum();
                if mass > 1.0 {
                    row.iter_mut().for_each(|v| *v /= mass);
                }
            }
            let soft = propagate_video(&feats, (rows, cols), first, cfg)?;
            let pred: Vec<Vec<(f64, f64)>> = soft[1..]
                .iter()
                .map(|s| {
                    (0..n)
                        .map(|k| {
                            let best = (0..rows * cols).fold(0, |b, i| if s.data()[i * n + k] > s.data()[b * n + k] { i } else { b });
                            (((best % cols) as f64 + 0.5) * p as f64, ((best / cols) as f64 + 0.5) * p as f64)
                        })
                        .collect()
                })
                .collect();
            let gt = &kps[1..];
            let boxes: Vec<(f64, f64)> = gt
                .iter()
                .map(|k| {
                    let (xs, ys): (Vec<f64>, Vec<f64>) = k.iter().copied().unzip();
                    let span =
                        |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
                    (span(&xs).max(1.0), span(&ys).max(1.0))
                })
                .collect();
            scores.pck10 = Some(pck(&pred, gt, &boxes, 0.1)?);
            scores.pck20 = Some(pck(&pred, gt, &boxes, 0.2)?);
        }
    }
    Ok(scores)
}

/// Evaluates every video, in parallel across videos.
pub fn run_eval(extractor: &dyn FeatureExtractor, videos: &[EvalVideo], task: Task, cfg: &PropagationConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).clamp(1, videos.len().max(1));
    let chunk = videos.len().div_ceil(workers).max(1);
    let results: Vec<Result<VideoScores>> = std::thread::scope(|s| {
        let handles: Vec<_> = videos
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|v| evaluate_video(extractor, v, task, cfg)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    Ok(MetricsReport { task, videos: results.into_iter().collect::<Result<_>>()? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_video, Motion, SceneSpec};

    #[test]
    fn block_aligned_labels_survive_down_and_up_sampling() {
        let patches: Vec<usize> = vec![0, 1, 2, 1, 0, 3];
        let pixels = upsample_labels(&patches, 2, 3, 4);
        assert_eq!(pixels.len(), 8 * 12);
        assert_eq!(downsample_labels(&pixels, 8, 12, 4), patches);
        // Ties go to the smaller label; majorities win.
        assert_eq!(downsample_labels(&[2, 1, 1, 2], 2, 2, 2), vec![1]);
        assert_eq!(downsample_labels(&[2, 2, 0, 2], 2, 2, 2), vec![2]);
    }

    #[test]
    fn identity_stub_is_perfect_on_a_static_video() {
        let scene = SceneSpec::random(4, 16);
        let mut video = EvalVideo::from_synth("static", &gen_video(&scene, 4, Motion::Static).unwrap());
        // Decoded keypoints sit at patch centres.
        for kps in &mut video.keypoints {
            kps.iter_mut().for_each(|p| *p = (p.0.floor() + 0.5, p.1.floor() + 0.5));
        }
        let stub = IdentityFeatures { patch_size: 1 };
        let cfg = PropagationConfig::default();
        let seg = evaluate_video(&stub, &video, Task::Segmentation, &cfg).unwrap();
        assert_eq!((seg.j, seg.f, seg.jf()), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(evaluate_video(&stub, &video, Task::Parts, &cfg).unwrap().miou, Some(1.0));
        let pose = evaluate_video(&stub, &video, Task::Pose, &cfg).unwrap();
        assert_eq!((pose.pck10, pose.pck20), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn dataset_round_trip_and_report() {
        let scene = SceneSpec::random(6, 16);
        let video = EvalVideo::from_synth("v0", &gen_video(&scene, 3, Motion::Random { speed: 1.0 }).unwrap());
        let dir = tempfile::tempdir().unwrap();
        save_videos(dir.path(), std::slice::from_ref(&video)).unwrap();
        let back = load_videos(dir.path()).unwrap();
        assert_eq!(back, vec![video.clone()]);
        let report = run_eval(&IdentityFeatures { patch_size: 4 }, &back, Task::Segmentation, &PropagationConfig::default()).unwrap();
        let jf = report.jf_mean().unwrap();
        assert!((jf - (report.j_mean().unwrap() + report.f_mean().unwrap()) / 2.0).abs() < 1e-15);
        report.write(dir.path(), "seg").unwrap();
        let recs = crate::io::read_records(&dir.path().join("seg.records")).unwrap();
        assert_eq!(recs[0].get("video"), Some("v0"));
        assert!(std::fs::read_to_string(dir.path().join("seg.txt")).unwrap().contains("mean"));
    }
}
