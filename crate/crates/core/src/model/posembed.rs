//! Fixed 2-D sine-cosine positional tables.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{Scalar, Tensor};

/// Tables keyed by `(dim, rows, cols)`.
type TableCache = HashMap<(usize, usize, usize), Rc<Vec<f64>>>;

/// `[len, dim]` table of `sin(pos * w_i)` then `cos(pos * w_i)` with
/// `w_i = 1 / 10000^(i / (dim/2))`.
fn sincos_1d(dim: usize, positions: &[f64]) -> Vec<Vec<f64>> {
    let half = dim / 2;
    positions
        .iter()
        .map(|&p| {
            let mut row = Vec::with_capacity(dim);
            let freqs: Vec<f64> = (0..half).map(|i| 1.0 / 10000f64.powf(i as f64 / half as f64)).collect();
            row.extend(freqs.iter().map(|w| (p * w).sin()));
            row.extend(freqs.iter().map(|w| (p * w).cos()));
            row
        })
        .collect()
}

/// `[rows * cols, dim]` table: the first half encodes the row, the second the column.
/// `dim` must be a multiple of 4. Tables are memoised per thread.
pub fn sincos_2d<S: Scalar>(dim: usize, grid: (usize, usize)) -> Tensor<S> {
    assert!(dim % 4 == 0, "positional width {dim} must be a multiple of 4");
    thread_local! {
        static CACHE: RefCell<TableCache> = RefCell::new(HashMap::new());
    }
    let (rows, cols) = grid;
    let table = CACHE.with(|c| c.borrow_mut().entry((dim, rows, cols)).or_insert_with(|| Rc::new(build_2d(dim, rows, cols))).clone());
    Tensor::from_parts(vec![rows * cols, dim], table.iter().map(|&v| S::of(v)).collect())
}

fn build_2d(dim: usize, rows: usize, cols: usize) -> Vec<f64> {
    let row_pos: Vec<f64> = (0..rows).map(|r| r as f64).collect();
    let col_pos: Vec<f64> = (0..cols).map(|c| c as f64).collect();
    let er = sincos_1d(dim / 2, &row_pos);
    let ec = sincos_1d(dim / 2, &col_pos);
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            data.extend(er[r].iter().chain(&ec[c]));
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_zero_sin_unit_cos() {
        let t = sincos_2d::<f64>(8, (3, 3));
        assert_eq!(t.shape(), &[9, 8]);
        assert_eq!(t.row(0), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn rows_are_distinct() {
        let t = sincos_2d::<f32>(16, (4, 4));
        for a in 0..16 {
            for b in a + 1..16 {
                assert_ne!(t.row(a), t.row(b));
            }
        }
    }
}
