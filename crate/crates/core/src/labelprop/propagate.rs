use std::collections::VecDeque;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationConfig {
    pub top_k: usize,
    /// Past frames kept besides the pinned first frame.
    pub queue_length: usize,
    /// Chebyshev radius on the patch grid.
    pub neighborhood: usize,
    pub temperature: f64,
    pub include_first_frame: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { top_k: 7, queue_length: 20, neighborhood: 20, temperature: 0.1, include_first_frame: true }
    }
}

impl PropagationConfig {
    /// No spatial or temporal restriction.
    pub fn unrestricted(top_k: usize) -> Self {
        Self { top_k, queue_length: usize::MAX, neighborhood: usize::MAX, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.top_k >= 1, "top_k must be at least 1");
        ensure!(self.temperature > 0.0 && self.temperature.is_finite(), "temperature must be positive");
        Ok(())
    }
}

/// Unit-normalised patch features with their soft labels.
#[derive(Clone, Debug)]
struct Entry {
    feats: Vec<f64>,
    labels: Tensor<f32>,
}

/// Reference frames available to the next query, oldest first.
#[derive(Clone, Debug)]
pub struct PropagationContext {
    grid: (usize, usize),
    dim: usize,
    classes: usize,
    first: Option<Entry>,
    queue: VecDeque<Entry>,
}

/// Rows of `feats` scaled to unit length; zero rows stay zero.
pub fn normalize_rows(feats: &Tensor<f32>) -> Vec<f64> {
    let d = feats.cols();
    let mut out: Vec<f64> = feats.data().iter().map(|&v| v as f64).collect();
    for row in out.chunks_exact_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PropagationContext {
    /// Starts from the annotated first frame.
    pub fn new(grid: (usize, usize), first_feats: &Tensor<f32>, first_labels: &Tensor<f32>) -> Result<Self> {
        let l = grid.0 * grid.1;
        ensure!(
            first_feats.rank() == 2 && first_feats.rows() == l,
            "first-frame features {:?} do not cover a {}x{} grid",
            first_feats.shape(),
            grid.0,
            grid.1
        );
        ensure!(
            first_labels.rank() == 2 && first_labels.rows() == l,
            "first-frame labels {:?} do not cover a {}x{} grid",
            first_labels.shape(),
            grid.0,
            grid.1
        );
        check_labels(first_labels)?;
        Ok(Self {
            grid,
            dim: first_feats.cols(),
            classes: first_labels.cols(),
            first: Some(Entry { feats: normalize_rows(first_feats), labels: first_labels.clone() }),
            queue: VecDeque::new(),
        })
    }

    /// Number of reference frames, pinned first frame included.
    pub fn len(&self) -> usize {
        self.queue.len() + usize::from(self.first.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.first.iter().chain(self.queue.iter())
    }

    /// Adds a propagated frame; evicts the oldest queued frame beyond
    /// `queue_length`, and drops the pinned first frame if it is not to be kept.
    pub fn push(&mut self, feats: &Tensor<f32>, labels: Tensor<f32>, cfg: &PropagationConfig) {
        if !cfg.include_first_frame {
            if let Some(first) = self.first.take() {
                self.queue.push_front(first);
            }
        }
        self.queue.push_back(Entry { feats: normalize_rows(feats), labels });
        while self.queue.len() > cfg.queue_length {
            self.queue.pop_front();
        }
    }

    /// Soft labels `[L, C]` for a query frame, leaving the context unchanged.
    pub fn predict(&self, query: &Tensor<f32>, cfg: &PropagationConfig) -> Result<Tensor<f32>> {
        cfg.validate()?;
        ensure!(!self.is_empty(), "propagation context is empty");
        let (rows, cols) = self.grid;
        let l = rows * cols;
        ensure!(
            query.rank() == 2 && query.rows() == l && query.cols() == self.dim,
            "query features {:?} do not match the context ({l} patches of dim {})",
            query.shape(),
            self.dim
        );
        let q = normalize_rows(query);
        let d = self.dim;
        let c = self.classes;
        let r = cfg.neighborhood;
        let mut out = vec![0.0f32; l * c];
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..l {
            let (yi, xi) = (i / cols, i % cols);
            let qi = &q[i * d..(i + 1) * d];
            cand.clear();
            let (y0, y1) = (yi.saturating_sub(r), yi.saturating_add(r).min(rows - 1));
            let (x0, x1) = (xi.saturating_sub(r), xi.saturating_add(r).min(cols - 1));
            for (f, e) in self.entries().enumerate() {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let j = y * cols + x;
                        cand.push((dot(qi, &e.feats[j * d..(j + 1) * d]), f, j));
                    }
                }
            }
            let k = cfg.top_k.min(cand.len());
            // Stable: equal affinities keep (frame, patch) order.
            cand.sort_by(|a, b| b.0.total_cmp(&a.0));
            let top = &cand[..k];
            let max = top[0].0;
            let weights: Vec<f64> = top.iter().map(|t| ((t.0 - max) / cfg.temperature).exp()).collect();
            let z: f64 = weights.iter().sum();
            let entries: Vec<&Entry> = self.entries().collect();
            let row = &mut out[i * c..(i + 1) * c];
            let mut acc = vec![0.0f64; c];
            for (w, &(_, f, j)) in weights.iter().zip(top) {
                for (a, &v) in acc.iter_mut().zip(entries[f].labels.row(j)) {
                    *a += w / z * v as f64;
                }
            }
            for (o, a) in row.iter_mut().zip(acc) {
                *o = a as f32;
            }
        }
        Ok(Tensor::from_parts(vec![l, c], out))
    }
}

fn check_labels(labels: &Tensor<f32>) -> Result<()> {
    for (i, row) in labels.data().chunks_exact(labels.cols().max(1)).enumerate() {
        let mass: f32 = row.iter().sum();
        ensure!(row.iter().all(|&v| v >= 0.0) && mass <= 1.0 + 1e-5, "soft labels of patch {i} must be non-negative with mass at most 1");
    }
    Ok(())
}

/// Predicts the query frame's soft labels, then appends the frame to the context.
pub fn propagate_frame(ctx: &mut PropagationContext, query: &Tensor<f32>, cfg: &PropagationConfig) -> Result<Tensor<f32>> {
    let labels = ctx.predict(query, cfg)?;
    ctx.push(query, labels.clone(), cfg);
    Ok(labels)
}

/// Hard labels from soft labels: channel `c` wins as label `c + 1` when its
/// mass beats every other channel and the implicit background `1 - sum`.
pub fn hard_labels(soft: &Tensor<f32>) -> Vec<usize> {
    soft.data()
        .chunks_exact(soft.cols().max(1))
        .map(|row| {
            let mut best = (1.0 - row.iter().sum::<f32>(), 0usize);
            for (c, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, c + 1);
                }
            }
            best.1
        })
        .collect()
}

/// One-hot soft labels for hard labels in `0..=classes` (0 is background).
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor<f32> {
    let mut out = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 && l <= classes {
            out[i * classes + l - 1] = 1.0;
        }
    }
    Tensor::from_parts(vec![labels.len(), classes], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot_feats(l: usize) -> Tensor<f32> {
        Tensor::eye(l)
    }

    #[test]
    fn static_identity_features_copy_labels() {
        let grid = (4, 4);
        let labels: Vec<usize> = (0..16).map(|i| [0, 1, 2][i % 3]).collect();
        let feats = onehot_feats(16);
        let mut ctx = PropagationContext::new(grid, &feats, &one_hot(&labels, 2)).unwrap();
        let cfg = PropagationConfig::default();
        for _ in 0..8 {
            let soft = propagate_frame(&mut ctx, &feats, &cfg).unwrap();
            assert_eq!(hard_labels(&soft), labels);
        }
    }

    #[test]
    fn label_follows_a_moved_feature() {
        let grid = (3, 3);
        let l = 9;
        // Patch 4 (centre) is labelled; in frame 2 its feature appears at patch 5
        // and patch 4 gets a direction orthogonal to everything in frame 1.
        let mut f2 = Tensor::<f32>::zeros(&[l, l + 1]);
        let f1 = Tensor::from_fn(&[l, l + 1], |i| if i / (l + 1) == i % (l + 1) { 1.0 } else { 0.0 });
        for j in 0..l {
            let src = match j {
                5 => 4,
                4 => l,
                _ => j,
            };
            f2.data_mut()[j * (l + 1) + src] = 1.0;
        }
        let mut labels = vec![0; l];
        labels[4] = 1;
        let mut ctx = PropagationContext::new(grid, &f1, &one_hot(&labels, 1)).unwrap();
        let cfg = PropagationConfig { top_k: 1, ..Default::default() };
        let soft = propagate_frame(&mut ctx, &f2, &cfg).unwrap();
        let hard = hard_labels(&soft);
        assert_eq!(hard[5], 1);
        assert_eq!(hard.iter().filter(|&&h| h == 1).count(), 1);
    }

    #[test]
    fn top1_copies_the_nearest_label_exactly() {
        let feats = Tensor::from_fn(&[6, 3], |i| ((i * 7 % 11) as f32 - 5.0) / 3.0);
        let soft = Tensor::from_fn(&[6, 2], |i| (i % 5) as f32 * 0.1);
        let ctx = PropagationContext::new((2, 3), &feats, &soft).unwrap();
        let q = Tensor::from_fn(&[6, 3], |i| ((i * 5 % 13) as f32 - 6.0) / 4.0);
        let cfg = PropagationConfig::unrestricted(1);
        let out = ctx.predict(&q, &cfg).unwrap();
        let qn = normalize_rows(&q);
        let fnm = normalize_rows(&feats);
        for i in 0..6 {
            let best = (0..6)
                .max_by(|&a, &b| {
                    dot(&qn[i * 3..i * 3 + 3], &fnm[a * 3..a * 3 + 3])
                        .total_cmp(&dot(&qn[i * 3..i * 3 + 3], &fnm[b * 3..b * 3 + 3]))
                        .then(b.cmp(&a))
                })
                .unwrap();
            assert_eq!(out.row(i), soft.row(best));
        }
    }

    #[test]
    fn queue_is_bounded_and_first_frame_pinned() {
        let feats = onehot_feats(4);
        let labels = one_hot(&[1, 0, 1, 0], 1);
        let cfg = PropagationConfig { queue_length: 3, ..Default::default() };
        let mut ctx = PropagationContext::new((2, 2), &feats, &labels).unwrap();
        for _ in 0..10 {
            let soft = propagate_frame(&mut ctx, &feats, &cfg).unwrap();
            assert!(soft.data().iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
            assert!(ctx.queue_len() <= 3);
        }
        assert_eq!(ctx.len(), 4);
        let unpinned = PropagationConfig { include_first_frame: false, ..cfg };
        let mut ctx = PropagationContext::new((2, 2), &feats, &labels).unwrap();
        for _ in 0..10 {
            propagate_frame(&mut ctx, &feats, &unpinned).unwrap();
        }
        assert_eq!(ctx.len(), 3);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let ctx = PropagationContext::new((2, 2), &onehot_feats(4), &one_hot(&[0, 1, 0, 1], 1)).unwrap();
        assert!(ctx.predict(&Tensor::zeros(&[4, 3]), &PropagationConfig::default()).is_err());
        assert!(ctx.predict(&Tensor::zeros(&[5, 4]), &PropagationConfig::default()).is_err());
        assert!(PropagationContext::new((2, 2), &onehot_feats(4), &Tensor::full(&[4, 2], 0.7)).is_err());
    }
}
