//! Rotary position embeddings.
//!
//! Channels `(2i, 2i+1)` of every head are rotated by `pos · base^(-2i/d_head)`.
//! Rows are laid out `[L × heads·d_head]` with heads contiguous.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub cos: Array2<f64>,
    pub sin: Array2<f64>,
    pub base: f64,
}

impl RopeTable {
    pub fn new(max_position: usize, d_head: usize, base: f64) -> Result<Self> {
        if d_head % 2 != 0 || d_head == 0 {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head width, got {d_head}"
            )));
        }
        let half = d_head / 2;
        let angle = |p: usize, i: usize| p as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
        Ok(Self {
            cos: Array2::from_shape_fn((max_position, half), |(p, i)| angle(p, i).cos()),
            sin: Array2::from_shape_fn((max_position, half), |(p, i)| angle(p, i).sin()),
            base,
        })
    }

    pub fn max_position(&self) -> usize {
        self.cos.nrows()
    }

    pub fn d_head(&self) -> usize {
        2 * self.cos.ncols()
    }

    /// Rotates each row by its position. `inverse` rotates by the negative
    /// angle, which is also the transpose used in the backward pass.
    fn apply(&self, x: ArrayView2<f64>, heads: usize, positions: &[usize], inverse: bool) -> Array2<f64> {
        let d_head = self.d_head();
        assert_eq!(x.ncols(), heads * d_head, "row width must be heads * d_head");
        assert_eq!(x.nrows(), positions.len(), "one position per row");
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut out = x.to_owned();
        for (mut row, &p) in out.rows_mut().into_iter().zip(positions) {
            assert!(p < self.max_position(), "position {p} beyond rotary table");
            let cos = self.cos.row(p);
            let sin = self.sin.row(p);
            for h in 0..heads {
                for i in 0..d_head / 2 {
                    let a = h * d_head + 2 * i;
                    let (x0, x1) = (row[a], row[a + 1]);
                    let (c, s) = (cos[i], sign * sin[i]);
                    row[a] = x0 * c - x1 * s;
                    row[a + 1] = x0 * s + x1 * c;
                }
            }
        }
        out
    }

    pub fn rotate(&self, x: ArrayView2<f64>, heads: usize, positions: &[usize]) -> Array2<f64> {
        self.apply(x, heads, positions, false)
    }

    pub fn rotate_back(&self, x: ArrayView2<f64>, heads: usize, positions: &[usize]) -> Array2<f64> {
        self.apply(x, heads, positions, true)
    }
}

pub fn rope_rotate(x: ArrayView2<f64>, heads: usize, positions: &[usize], table: &RopeTable) -> Array2<f64> {
    table.rotate(x, heads, positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn position_zero_is_identity() {
        let t = RopeTable::new(16, 8, ROPE_BASE).unwrap();
        let x = random(3, 16, 1);
        assert_eq!(t.rotate(x.view(), 2, &[0, 0, 0]), x);
    }

    #[test]
    fn norms_are_preserved() {
        let t = RopeTable::new(300, 16, ROPE_BASE).unwrap();
        let x = random(5, 32, 2);
        let y = t.rotate(x.view(), 2, &[1, 7, 42, 250, 299]);
        for (a, b) in x.rows().into_iter().zip(y.rows()) {
            assert!((a.dot(&a) - b.dot(&b)).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_products_depend_on_offset_only() {
        let t = RopeTable::new(64, 8, ROPE_BASE).unwrap();
        let q = random(1, 8, 3);
        let k = random(1, 8, 4);
        for (m, n, shift) in [(2usize, 9usize, 5usize), (0, 30, 33), (17, 3, 11)] {
            let a = t
                .rotate(q.view(), 1, &[m])
                .row(0)
                .dot(&t.rotate(k.view(), 1, &[n]).row(0));
            let b = t
                .rotate(q.view(), 1, &[m + shift])
                .row(0)
                .dot(&t.rotate(k.view(), 1, &[n + shift]).row(0));
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn inverse_undoes_rotation() {
        let t = RopeTable::new(32, 4, ROPE_BASE).unwrap();
        let x = random(4, 8, 5);
        let pos = [3, 9, 27, 31];
        let back = t.rotate_back(t.rotate(x.view(), 2, &pos).view(), 2, &pos);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn table_is_bounded_and_odd_width_rejected() {
        let t = RopeTable::new(251, 64, ROPE_BASE).unwrap();
        assert!(t.cos.iter().chain(t.sin.iter()).all(|v| v.abs() <= 1.0));
        assert_eq!(t.cos.row(0), Array1::<f64>::ones(32));
        assert!(RopeTable::new(4, 7, ROPE_BASE).is_err());
    }
}
