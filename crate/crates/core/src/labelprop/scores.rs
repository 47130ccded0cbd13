//! Region, contour, part and keypoint scores.

use crate::error::{ensure, Result};

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn jaccard(pred: &[bool], gt: &[bool]) -> Result<f64> {
    ensure!(pred.len() == gt.len(), "mask sizes differ: {} vs {}", pred.len(), gt.len());
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with at least one 4-neighbour (inside the image) in the background.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |y: usize, x: usize| mask[y * width + x];
    (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            at(y, x)
                && ((y > 0 && !at(y - 1, x))
                    || (y + 1 < height && !at(y + 1, x))
                    || (x > 0 && !at(y, x - 1))
                    || (x + 1 < width && !at(y, x + 1)))
        })
        .collect()
}

/// Marks pixels within Euclidean distance `tol` of any set pixel.
fn dilate(bmap: &[bool], height: usize, width: usize, tol: usize) -> Vec<bool> {
    let mut out = vec![false; bmap.len()];
    let t = tol as isize;
    for (i, _) in bmap.iter().enumerate().filter(|(_, b)| **b) {
        let (y, x) = ((i / width) as isize, (i % width) as isize);
        for dy in -t..=t {
            for dx in -t..=t {
                let (yy, xx) = (y + dy, x + dx);
                if dy * dy + dx * dx <= t * t && yy >= 0 && xx >= 0 && (yy as usize) < height && (xx as usize) < width {
                    out[yy as usize * width + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Contour F-measure with a pixel tolerance.
pub fn boundary_f(pred: &[bool], gt: &[bool], height: usize, width: usize, tol: usize) -> Result<f64> {
    ensure!(pred.len() == height * width && gt.len() == height * width, "masks must both be {height}x{width}");
    let bp = boundary(pred, height, width);
    let bg = boundary(gt, height, width);
    let (np, ng) = (bp.iter().filter(|b| **b).count(), bg.iter().filter(|b| **b).count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let near_gt = dilate(&bg, height, width, tol);
    let near_pred = dilate(&bp, height, width, tol);
    let precision = bp.iter().zip(&near_gt).filter(|(b, n)| **b && **n).count() as f64 / np as f64;
    let recall = bg.iter().zip(&near_pred).filter(|(b, n)| **b && **n).count() as f64 / ng as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// Default contour tolerance for an image: ceil(0.0075 * diagonal).
pub fn boundary_tolerance(height: usize, width: usize) -> usize {
    (0.0075 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

/// Per-class IoU accumulated over every frame, averaged over classes that occur in the ground truth.
pub fn miou(pred: &[Vec<usize>], gt: &[Vec<usize>], num_classes: usize) -> Result<f64> {
    ensure!(pred.len() == gt.len(), "{} predicted frames vs {} annotated", pred.len(), gt.len());
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    let mut present = vec![false; num_classes];
    for (p, g) in pred.iter().zip(gt) {
        ensure!(p.len() == g.len(), "label map sizes differ");
        for (&a, &b) in p.iter().zip(g) {
            ensure!(a < num_classes && b < num_classes, "label out of range for {num_classes} classes");
            present[b] = true;
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let ious: Vec<f64> = (0..num_classes).filter(|&c| present[c]).map(|c| inter[c] as f64 / union[c] as f64).collect();
    ensure!(!ious.is_empty(), "no annotated pixels");
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Fraction of keypoints within `alpha * max(bbox_w, bbox_h)` of the truth.
/// `bbox[f]` is the (width, height) of the reference box in frame `f`.
pub fn pck(pred: &[Vec<(f64, f64)>], gt: &[Vec<(f64, f64)>], bbox: &[(f64, f64)], alpha: f64) -> Result<f64> {
    ensure!(pred.len() == gt.len() && gt.len() == bbox.len(), "pck needs one prediction list and box per frame");
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, g), &(w, h)) in pred.iter().zip(gt).zip(bbox) {
        ensure!(p.len() == g.len(), "keypoint counts differ: {} vs {}", p.len(), g.len());
        let thr = alpha * w.max(h);
        for (a, b) in p.iter().zip(g) {
            total += 1;
            hit += usize::from(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= thr);
        }
    }
    ensure!(total > 0, "no keypoints to score");
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Vec<bool> {
        (0..h * w).map(|i| (y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))).collect()
    }

    #[test]
    fn jaccard_cases() {
        let a = rect(8, 8, 0, 0, 4, 4);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &rect(8, 8, 4, 4, 8, 8)).unwrap(), 0.0);
        assert!((jaccard(&a, &rect(8, 8, 0, 2, 4, 6)).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(jaccard(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(jaccard(&a, &[true; 3]).is_err());
    }

    fn brute_f(pred: &[bool], gt: &[bool], h: usize, w: usize, tol: f64) -> f64 {
        let pts = |m: &[bool]| -> Vec<(f64, f64)> {
            boundary(m, h, w).iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| ((i / w) as f64, (i % w) as f64)).collect()
        };
        let (p, g) = (pts(pred), pts(gt));
        let within = |a: &[(f64, f64)], b: &[(f64, f64)]| {
            a.iter().filter(|x| b.iter().any(|y| ((x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).sqrt() <= tol)).count() as f64 / a.len() as f64
        };
        let (pr, rc) = (within(&p, &g), within(&g, &p));
        if pr + rc == 0.0 {
            0.0
        } else {
            2.0 * pr * rc / (pr + rc)
        }
    }

    #[test]
    fn boundary_f_cases() {
        let (h, w) = (12, 12);
        let a = rect(h, w, 2, 2, 8, 8);
        assert_eq!(boundary_f(&a, &a, h, w, 0).unwrap(), 1.0);
        let shifted = rect(h, w, 2, 3, 8, 9);
        assert_eq!(boundary_f(&shifted, &a, h, w, 1).unwrap(), 1.0);
        let f0 = boundary_f(&shifted, &a, h, w, 0).unwrap();
        assert!((f0 - brute_f(&shifted, &a, h, w, 0.0)).abs() < 1e-12);
        assert!(f0 < 1.0 && f0 > 0.0);
        let far = rect(h, w, 9, 9, 12, 12);
        assert_eq!(boundary_f(&far, &rect(h, w, 0, 0, 3, 3), h, w, 2).unwrap(), 0.0);
        assert_eq!(boundary_f(&[false; 144], &[false; 144], h, w, 1).unwrap(), 1.0);
        assert_eq!(boundary_tolerance(480, 854), 8);
        for tol in 0..3 {
            let b = rect(h, w, 1, 4, 10, 7);
            assert!((boundary_f(&b, &a, h, w, tol).unwrap() - brute_f(&b, &a, h, w, tol as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn miou_cases() {
        let gt = vec![vec![0, 0, 1, 1]];
        assert_eq!(miou(&gt, &gt, 2).unwrap(), 1.0);
        // Class 1 never predicted: class 0 IoU = 2/4, class 1 IoU = 0.
        assert_eq!(miou(&[vec![0, 0, 0, 0]], &gt, 2).unwrap(), 0.25);
        // Background never annotated: only classes 1 and 2 count.
        assert_eq!(miou(&[vec![1, 1, 0, 0]], &[vec![1, 1, 2, 2]], 3).unwrap(), 0.5);
        // 4x4 hand count.
        let g = vec![vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2]];
        let p = vec![vec![0, 1, 1, 1, 0, 0, 1, 2, 2, 2, 2, 2, 2, 2, 0, 2]];
        // class 0: inter 3, union 5; class 1: inter 3, union 5; class 2: inter 7, union 9
        let expect = (3.0 / 5.0 + 3.0 / 5.0 + 7.0 / 9.0) / 3.0;
        assert!((miou(&p, &g, 3).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn miou_ignores_relabelling() {
        let g = vec![vec![0, 1, 2, 2, 1, 0]];
        let p = vec![vec![0, 2, 2, 1, 1, 0]];
        let perm = [2, 0, 1];
        let rl = |v: &Vec<Vec<usize>>| vec![v[0].iter().map(|&c| perm[c]).collect::<Vec<_>>()];
        assert!((miou(&p, &g, 3).unwrap() - miou(&rl(&p), &rl(&g), 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pck_cases() {
        let gt = vec![vec![(0.0, 0.0), (10.0, 10.0), (5.0, 5.0), (2.0, 8.0)]];
        assert_eq!(pck(&gt, &gt, &[(10.0, 20.0)], 0.1).unwrap(), 1.0);
        let far: Vec<Vec<(f64, f64)>> = vec![gt[0].iter().map(|p| (p.0 + 3.0, p.1)).collect()];
        assert_eq!(pck(&far, &gt, &[(10.0, 20.0)], 0.1).unwrap(), 0.0);
        let half = vec![vec![(0.0, 1.0), (10.0, 15.0), (5.0, 6.5), (2.0, 3.0)]];
        assert_eq!(pck(&half, &gt, &[(10.0, 20.0)], 0.1).unwrap(), 0.5);
    }
}
