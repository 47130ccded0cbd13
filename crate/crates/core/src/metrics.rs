//! View-pair consistency measures over encoder features: global similarity of
//! class tokens, position-wise local similarity, and nearest-patch similarity.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::io::{atomic_write, fmt6, render_records, render_table, Record};
use crate::tensor::{cosine_sim, read_tensor, Tensor};

/// Class token plus patch embeddings of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub cls: Vec<f32>,
    /// `[L, D]`, one row per spatial location.
    pub patches: Tensor<f32>,
    pub grid: (usize, usize),
    pub source_id: String,
}

impl FeatureSet {
    pub fn new(cls: Vec<f32>, patches: Tensor<f32>, grid: (usize, usize), source_id: impl Into<String>) -> Result<Self> {
        ensure!(patches.rank() == 2, "patch features must be [L, D], got {:?}", patches.shape());
        let (l, d) = (patches.shape()[0], patches.shape()[1]);
        ensure!(l == grid.0 * grid.1, "{l} patches do not fill a {}x{} grid", grid.0, grid.1);
        ensure!(cls.len() == d, "class token has {} dims, patches have {d}", cls.len());
        for i in 0..l {
            if patches.row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::Degenerate(format!("patch {i} has a zero feature vector")));
            }
        }
        Ok(Self { cls, patches, grid, source_id: source_id.into() })
    }

    /// Reads a `[1 + L, D]` tensor file whose first row is the class token and
    /// whose `L` patch rows form a square grid.
    pub fn load(path: &Path) -> Result<Self> {
        let t = read_tensor(path)?;
        let bad = |m: String| Error::format(path, m);
        if t.rank() != 2 || t.shape()[0] < 2 {
            return Err(bad(format!("expected [1 + L, D] features, got {:?}", t.shape())));
        }
        let l = t.shape()[0] - 1;
        let side = (l as f64).sqrt().round() as usize;
        if side * side != l {
            return Err(bad(format!("{l} patch rows do not form a square grid")));
        }
        let cls = t.row(0).to_vec();
        let patches = t.slice(0, 1, l + 1)?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(cls, patches, (side, side), id)
    }

    /// Inverse of [`FeatureSet::load`]'s layout.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let cls = Tensor::from_parts(vec![1, self.cls.len()], self.cls.clone());
        Tensor::concat(&[&cls, &self.patches], 0).expect("matching widths")
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.patches.shape()[1]
    }
}

fn check_dims(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape("feature width", a.patches.shape(), b.patches.shape()));
    }
    Ok(())
}

/// Cosine similarity of the two class tokens.
pub fn global_similarity(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_dims(a, b)?;
    cosine_sim(&a.cls, &b.cls)
}

/// Mean cosine similarity of patches at the same location.
pub fn local_similarity(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_dims(a, b)?;
    ensure!(a.len() == b.len(), "local similarity needs equal patch counts, got {} and {}", a.len(), b.len());
    let mut total = 0.0;
    for i in 0..a.len() {
        total += cosine_sim(a.patches.row(i), b.patches.row(i))?;
    }
    Ok(total / a.len() as f64)
}

fn row_norms(t: &Tensor<f32>) -> Result<Vec<f64>> {
    (0..t.shape()[0])
        .map(|i| {
            let n = t.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if n <= 1e-12 {
                return Err(Error::Degenerate(format!("patch {i} has a zero feature vector")));
            }
            Ok(n)
        })
        .collect()
}

/// For each patch of `a`, the best cosine match among all patches of `b`,
/// averaged over `a`. Not symmetric. Every pair is scored with the same
/// arithmetic as [`cosine_sim`], so the result is exactly invariant to the
/// order of `b`'s patches and never below [`local_similarity`].
pub fn nearest_patch_similarity(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_dims(a, b)?;
    ensure!(!a.is_empty() && !b.is_empty(), "nearest patch similarity of an empty set");
    let (na, nb) = (row_norms(&a.patches)?, row_norms(&b.patches)?);
    let mut total = 0.0;
    for (i, ni) in na.iter().enumerate() {
        let x = a.patches.row(i);
        let mut best = f64::NEG_INFINITY;
        for (j, nj) in nb.iter().enumerate() {
            let dot: f64 = x.iter().zip(b.patches.row(j)).map(|(&p, &q)| p as f64 * q as f64).sum();
            best = best.max((dot / (ni * nj)).clamp(-1.0, 1.0));
        }
        total += best;
    }
    Ok(total / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairReport {
    pub first: String,
    pub second: String,
    pub gs: f64,
    pub ls: f64,
    pub nps: f64,
    /// Nearest-patch similarity from the second view to the first, when requested.
    pub nps_reverse: Option<f64>,
}

impl PairReport {
    pub fn record(&self) -> Record {
        let r = Record::new()
            .text("first", &self.first)
            .text("second", &self.second)
            .num("gs", self.gs)
            .num("ls", self.ls)
            .num("nps", self.nps);
        match self.nps_reverse {
            Some(v) => r.num("nps_rev", v),
            None => r,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairsSummary {
    pub pairs: Vec<PairReport>,
    pub mean_gs: f64,
    pub mean_ls: f64,
    pub mean_nps: f64,
}

pub fn evaluate_pair(a: &FeatureSet, b: &FeatureSet, both_directions: bool) -> Result<PairReport> {
    Ok(PairReport {
        first: a.source_id.clone(),
        second: b.source_id.clone(),
        gs: global_similarity(a, b)?,
        ls: local_similarity(a, b)?,
        nps: nearest_patch_similarity(a, b)?,
        nps_reverse: if both_directions { Some(nearest_patch_similarity(b, a)?) } else { None },
    })
}

/// Per-pair measures and their means, aggregated in input order.
pub fn evaluate_pairs(pairs: &[(FeatureSet, FeatureSet)], both_directions: bool) -> Result<PairsSummary> {
    ensure!(!pairs.is_empty(), "no pairs to evaluate");
    let reports = pairs.iter().map(|(a, b)| evaluate_pair(a, b, both_directions)).collect::<Result<Vec<_>>>()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&PairReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(PairsSummary { mean_gs: mean(|r| r.gs), mean_ls: mean(|r| r.ls), mean_nps: mean(|r| r.nps), pairs: reports })
}

impl PairsSummary {
    pub fn table(&self, label: &str) -> String {
        render_table(
            &["pairs", "n", "global_sim", "local_sim", "nearest_patch_sim"],
            &[vec![label.to_string(), self.pairs.len().to_string(), fmt6(self.mean_gs), fmt6(self.mean_ls), fmt6(self.mean_nps)]],
        )
    }

    /// Writes `<stem>.txt` (table) and `<stem>.records` (one line per pair).
    pub fn write(&self, dir: &Path, stem: &str, label: &str) -> Result<()> {
        atomic_write(&dir.join(format!("{stem}.txt")), self.table(label).as_bytes())?;
        let recs: Vec<Record> = self.pairs.iter().map(PairReport::record).collect();
        atomic_write(&dir.join(format!("{stem}.records")), render_records(&recs).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(l_side: usize, d: usize, rng: &mut ChaCha8Rng, id: &str) -> FeatureSet {
        let l = l_side * l_side;
        let patches = Tensor::from_fn(&[l, d], |_| rng.gen_range(-1.0..1.0));
        let cls = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureSet::new(cls, patches, (l_side, l_side), id).unwrap()
    }

    fn set_from(cls: &[f32], rows: &[Vec<f32>], grid: (usize, usize)) -> FeatureSet {
        FeatureSet::new(cls.to_vec(), Tensor::from_rows(rows).unwrap(), grid, "x").unwrap()
    }

    #[test]
    fn global_cases() {
        let a = set_from(&[1.0, 0.0], &[vec![1.0, 2.0]], (1, 1));
        let b = set_from(&[1.0, 1.0], &[vec![1.0, 2.0]], (1, 1));
        let neg = set_from(&[-1.0, 0.0], &[vec![1.0, 2.0]], (1, 1));
        assert!((global_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((global_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((global_similarity(&a, &b).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        let zero = FeatureSet { cls: vec![0.0, 0.0], ..a.clone() };
        assert!(matches!(global_similarity(&zero, &a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn local_average() {
        let a = set_from(&[1.0, 0.0], &[vec![1.0, 0.0], vec![1.0, 0.0]], (1, 2));
        let b = set_from(&[1.0, 0.0], &[vec![2.0, 0.0], vec![0.0, 3.0]], (1, 2));
        assert!((local_similarity(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        let c = set_from(&[1.0, 0.0], &[vec![1.0, 0.0]], (1, 1));
        assert!(local_similarity(&a, &c).is_err());
    }

    #[test]
    fn local_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_set(2, 5, &mut rng, "a");
        let b = random_set(2, 5, &mut rng, "b");
        let mut want = 0.0;
        for i in 0..4 {
            let (x, y) = (a.patches.row(i), b.patches.row(i));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum();
            let nx: f64 = x.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
            want += dot / (nx * ny) / 4.0;
        }
        assert!((local_similarity(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn nps_brute_force_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_set(3, 6, &mut rng, "a");
        let b = random_set(3, 6, &mut rng, "b");
        let mut want = 0.0;
        for i in 0..9 {
            let best = (0..9).map(|j| cosine_sim(a.patches.row(i), b.patches.row(j)).unwrap()).fold(f64::NEG_INFINITY, f64::max);
            want += best / 9.0;
        }
        assert!((nearest_patch_similarity(&a, &b).unwrap() - want).abs() < 1e-6);

        let perm = [4usize, 0, 8, 2, 1, 7, 3, 5, 6];
        let shuffled = FeatureSet { patches: a.patches.gather_rows(&perm).unwrap(), ..a.clone() };
        assert!((nearest_patch_similarity(&a, &shuffled).unwrap() - 1.0).abs() < 1e-12);
        assert!(local_similarity(&a, &shuffled).unwrap() < 1.0);
        let b_shuffled = FeatureSet { patches: b.patches.gather_rows(&perm).unwrap(), ..b.clone() };
        assert_eq!(nearest_patch_similarity(&a, &b).unwrap(), nearest_patch_similarity(&a, &b_shuffled).unwrap());
        assert!((nearest_patch_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nps_allows_unequal_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_set(2, 4, &mut rng, "a");
        let b = random_set(3, 4, &mut rng, "b");
        let v = nearest_patch_similarity(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn aggregate_is_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_set(2, 4, &mut rng, "a");
        let b = random_set(2, 4, &mut rng, "b");
        let single = evaluate_pairs(&[(a.clone(), a.clone())], false).unwrap();
        for v in [single.mean_gs, single.mean_ls, single.mean_nps] {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let both = evaluate_pairs(&[(a.clone(), a.clone()), (a.clone(), b.clone())], true).unwrap();
        let ab = evaluate_pair(&a, &b, false).unwrap();
        assert!((both.mean_gs - (1.0 + ab.gs) / 2.0).abs() < 1e-12);
        assert!((both.mean_nps - (1.0 + ab.nps) / 2.0).abs() < 1e-12);
        assert!(both.pairs[1].nps_reverse.is_some());
        assert!(evaluate_pairs(&[], false).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_set(3, 4, &mut rng, "view");
        let path = dir.path().join("view.cdgt");
        crate::tensor::write_tensor(&path, &a.to_tensor()).unwrap();
        assert_eq!(FeatureSet::load(&path).unwrap(), a);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_set(2, 4, &mut rng, "a");
        let s = evaluate_pairs(&[(a.clone(), a)], false).unwrap();
        s.write(dir.path(), "pairs", "self").unwrap();
        let recs = crate::io::read_records(&dir.path().join("pairs.records")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].get("gs"), Some("1.00000"));
    }
}
