use rand::seq::index::sample;
use rand::Rng;

use super::config::Strategy;
use crate::error::{ensure, Result};
use crate::tensor::cosine_sim;

/// Bag positions of the target and its anchors; 0 is the real image, `1..=M` the views.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub target: usize,
    pub anchors: Vec<usize>,
}

/// Picks a target and `n` distinct anchors from a bag of one real image and `m` views.
///
/// `random_choice` flips a fair coin between the real image and a uniformly
/// chosen view. Anchors are drawn without replacement from the remaining images.
pub fn select_views(m: usize, strategy: Strategy, n: usize, rng: &mut impl Rng) -> Result<Selection> {
    ensure!(m >= 1, "bag has no generated views");
    ensure!(strategy != Strategy::KnnPair, "knn_pair selects across bags, use knn_pair_select");
    let target = match strategy {
        Strategy::AlwaysReal => 0,
        Strategy::AlwaysGenerated => rng.gen_range(1..=m),
        _ => {
            if rng.gen_bool(0.5) {
                0
            } else {
                rng.gen_range(1..=m)
            }
        }
    };
    ensure!(n <= m, "{n} anchors requested but only {m} images remain besides the target");
    let rest: Vec<usize> = (0..=m).filter(|&i| i != target).collect();
    let anchors = sample(rng, rest.len(), n).into_iter().map(|i| rest[i]).collect();
    Ok(Selection { target, anchors })
}

/// Indices of the `k` images most cosine-similar to `features[query]`, best first.
/// Ties go to the lower index.
pub fn nearest_neighbors(features: &[Vec<f32>], query: usize, k: usize) -> Result<Vec<usize>> {
    ensure!(features.len() > k, "dataset of {} images is too small for k = {k}", features.len());
    ensure!(query < features.len(), "query {query} out of range");
    let mut scored = Vec::with_capacity(features.len() - 1);
    for (i, f) in features.iter().enumerate() {
        if i != query {
            scored.push((cosine_sim(&features[query], f)?, i));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Uniform draw of `n` distinct anchors among the `k` nearest neighbours of `target`.
pub fn knn_pair_select(features: &[Vec<f32>], target: usize, k: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    ensure!(n <= k, "{n} anchors requested from {k} neighbours");
    let nn = nearest_neighbors(features, target, k)?;
    Ok(sample(rng, k, n).into_iter().map(|i| nn[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn always_real_uses_every_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = select_views(4, Strategy::AlwaysReal, 4, &mut rng).unwrap();
        assert_eq!(s.target, 0);
        let mut a = s.anchors.clone();
        a.sort();
        assert_eq!(a, vec![1, 2, 3, 4]);
        assert!(select_views(4, Strategy::AlwaysReal, 5, &mut rng).is_err());
    }

    #[test]
    fn target_never_an_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for strategy in [Strategy::AlwaysReal, Strategy::AlwaysGenerated, Strategy::RandomChoice] {
            for _ in 0..10_000 {
                let s = select_views(4, strategy, 3, &mut rng).unwrap();
                assert!(!s.anchors.contains(&s.target));
                assert!(s.anchors.iter().all(|&a| a <= 4));
                let mut a = s.anchors.clone();
                a.dedup();
                assert_eq!(a.len(), 3);
                if strategy == Strategy::AlwaysGenerated {
                    assert_ne!(s.target, 0);
                }
            }
        }
    }

    #[test]
    fn random_choice_is_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let real = (0..10_000).filter(|_| select_views(4, Strategy::RandomChoice, 2, &mut rng).unwrap().target == 0).count();
        assert!((real as f64 / 1e4 - 0.5).abs() <= 0.03, "{real}");
    }

    #[test]
    fn knn_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let two = vec![vec![1.0, 0.0], vec![0.3, 0.7]];
        assert_eq!(knn_pair_select(&two, 0, 1, 1, &mut rng).unwrap(), vec![1]);
        assert!(knn_pair_select(&two, 0, 2, 1, &mut rng).is_err());
        let dup = vec![vec![1.0, 2.0, 0.5], vec![0.0, 1.0, 1.0], vec![1.0, 2.0, 0.5], vec![2.0, 0.1, 0.0]];
        assert_eq!(nearest_neighbors(&dup, 0, 1).unwrap(), vec![2]);
    }

    #[test]
    fn knn_ranking_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<Vec<f32>> = (0..10).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        for q in 0..10 {
            // Count, for each candidate, how many others beat it.
            let sim = |a: &[f32], b: &[f32]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
                let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            let mut expect = vec![0; 9];
            for i in (0..10).filter(|&i| i != q) {
                let rank = (0..10).filter(|&j| j != q && j != i && sim(&feats[q], &feats[j]) > sim(&feats[q], &feats[i])).count();
                expect[rank] = i;
            }
            assert_eq!(nearest_neighbors(&feats, q, 9).unwrap(), expect);
        }
    }
}
