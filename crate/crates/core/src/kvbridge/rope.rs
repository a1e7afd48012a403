//! Rotary position embedding on key/query rows.
//!
//! Row `p` of a `d`-dim key is rotated pairwise: dimension `i` of the first
//! half pairs with dimension `i + d/2`, and the pair turns by the angle
//! `p * base^(-2i/d)`. The rotation is orthogonal, so it preserves row norms
//! and is exactly invertible, which is what lets cached keys be edited in the
//! unrotated frame and re-rotated afterwards.

use thiserror::Error;

use crate::scalar::{sc, Scalar};
use crate::tensorkit::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RopeError {
    #[error("rotary dimension {0} must be even and positive")]
    OddDim(usize),
    #[error("rows start at position {start} but the table covers {count} positions")]
    PositionRange { start: usize, count: usize },
    #[error("rows are already in the {0} frame")]
    WrongFrame(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether key rows currently carry the positional rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeFrame {
    /// No rotation applied; the frame cached deltas are accumulated in.
    Pre,
    /// Rotation applied; the frame attention scores are computed in.
    Post,
}

/// Precomputed cos/sin factors for positions `0..num_positions`.
///
/// Each table row is laid out like a key row: the factor for pair `i` is
/// duplicated at columns `i` and `i + d/2`, so application is elementwise.
#[derive(Debug, Clone)]
pub struct RotaryTable<S: Scalar> {
    cos: Tensor<S>,
    sin: Tensor<S>,
}

/// `[-x2, x1]` for rows split as `[x1, x2]`.
fn rotate_half<S: Scalar>(rows: &Tensor<S>) -> Tensor<S> {
    let (r, d) = rows.shape();
    let half = d / 2;
    let mut out = Tensor::zeros(r, d);
    for i in 0..r {
        for j in 0..half {
            out.set(i, j, -rows.get(i, half + j));
            out.set(i, half + j, rows.get(i, j));
        }
    }
    out
}

/// Elementwise rotation kernel shared by the table paths:
/// `rows * cos + rotate_half(rows) * sin`, or with the sign flipped when
/// `invert` undoes a prior rotation. `cos`/`sin` must match `rows` in shape.
pub fn rope_rotate<S: Scalar>(
    rows: &Tensor<S>,
    cos: &Tensor<S>,
    sin: &Tensor<S>,
    invert: bool,
) -> Result<Tensor<S>, RopeError> {
    if cos.shape() != rows.shape() || sin.shape() != rows.shape() {
        return Err(RopeError::Tensor(TensorError::Invalid {
            op: "rope_rotate",
            detail: format!(
                "rows {:?} vs cos {:?} / sin {:?}",
                rows.shape(),
                cos.shape(),
                sin.shape()
            ),
        }));
    }
    let rotated = rotate_half(rows);
    let sign = if invert { -S::one() } else { S::one() };
    let mut out = rows.clone();
    for (o, (&c, (&s, &h))) in out.data_mut().iter_mut().zip(
        cos.data()
            .iter()
            .zip(sin.data().iter().zip(rotated.data().iter())),
    ) {
        *o = *o * c + sign * h * s;
    }
    Ok(out)
}

impl<S: Scalar> RotaryTable<S> {
    pub fn new(num_positions: usize, dim: usize, base: f64) -> Result<RotaryTable<S>, RopeError> {
        if dim == 0 || dim % 2 != 0 {
            return Err(RopeError::OddDim(dim));
        }
        let half = dim / 2;
        let mut cos = Tensor::zeros(num_positions, dim);
        let mut sin = Tensor::zeros(num_positions, dim);
        for p in 0..num_positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-((2 * i) as f64) / dim as f64);
                for col in [i, half + i] {
                    cos.set(p, col, sc(theta.cos()));
                    sin.set(p, col, sc(theta.sin()));
                }
            }
        }
        Ok(RotaryTable { cos, sin })
    }

    pub fn num_positions(&self) -> usize {
        self.cos.rows()
    }

    pub fn dim(&self) -> usize {
        self.cos.cols()
    }

    /// cos/sin factor rows for positions `start .. start + count`.
    pub fn window(&self, start: usize, count: usize) -> Result<(Tensor<S>, Tensor<S>), RopeError> {
        if start + count > self.num_positions() {
            return Err(RopeError::PositionRange {
                start,
                count: self.num_positions(),
            });
        }
        let idx: Vec<usize> = (start..start + count).collect();
        Ok((self.cos.take_rows(&idx), self.sin.take_rows(&idx)))
    }

    /// Rotate rows into the positional frame; row `r` gets position
    /// `start + r`.
    pub fn apply(&self, rows: &Tensor<S>, start: usize) -> Result<Tensor<S>, RopeError> {
        let (cos, sin) = self.window(start, rows.rows())?;
        rope_rotate(rows, &cos, &sin, false)
    }

    /// Exact inverse of [`RotaryTable::apply`] at the same start position.
    pub fn invert(&self, rows: &Tensor<S>, start: usize) -> Result<Tensor<S>, RopeError> {
        let (cos, sin) = self.window(start, rows.rows())?;
        rope_rotate(rows, &cos, &sin, true)
    }
}

/// Key rows tagged with the frame they live in, so a cache cannot be rotated
/// twice or edited in the wrong frame.
#[derive(Debug, Clone)]
pub struct FramedKeys<S: Scalar> {
    pub rows: Tensor<S>,
    pub frame: RopeFrame,
}

impl<S: Scalar> FramedKeys<S> {
    pub fn pre(rows: Tensor<S>) -> Self {
        FramedKeys {
            rows,
            frame: RopeFrame::Pre,
        }
    }

    pub fn post(rows: Tensor<S>) -> Self {
        FramedKeys {
            rows,
            frame: RopeFrame::Post,
        }
    }

    pub fn to_post(&self, table: &RotaryTable<S>) -> Result<FramedKeys<S>, RopeError> {
        match self.frame {
            RopeFrame::Post => Err(RopeError::WrongFrame("post")),
            RopeFrame::Pre => Ok(FramedKeys::post(table.apply(&self.rows, 0)?)),
        }
    }

    pub fn to_pre(&self, table: &RotaryTable<S>) -> Result<FramedKeys<S>, RopeError> {
        match self.frame {
            RopeFrame::Pre => Err(RopeError::WrongFrame("pre")),
            RopeFrame::Post => Ok(FramedKeys::pre(table.invert(&self.rows, 0)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn quarter_turn_maps_pair_to_minus_y_x() {
        // At theta = pi/2 the pair (x, y) must land exactly on (-y, x).
        let (x, y) = (0.42, -1.3);
        let rows = Tensor::from_f64_vec(1, 2, &[x, y]).unwrap();
        let cos = Tensor::from_f64_vec(1, 2, &[0.0, 0.0]).unwrap();
        let sin = Tensor::from_f64_vec(1, 2, &[1.0, 1.0]).unwrap();
        let out = rope_rotate(&rows, &cos, &sin, false).unwrap();
        assert_eq!((out.get(0, 0), out.get(0, 1)), (-y, x));
        let back = rope_rotate(&out, &cos, &sin, true).unwrap();
        assert_eq!((back.get(0, 0), back.get(0, 1)), (x, y));
    }

    #[test]
    fn table_position_one_rotates_pair_zero_by_one_radian() {
        let table: RotaryTable<f64> = RotaryTable::new(4, 2, 10000.0).unwrap();
        let rows = Tensor::from_f64_vec(2, 2, &[0.3, -0.7, 0.3, -0.7]).unwrap();
        let out = table.apply(&rows, 0).unwrap();
        // Position 0 is the identity.
        assert_eq!(out.row(0), rows.row(0));
        // Pair 0 has unit base frequency, so position 1 turns it 1 radian.
        let (c, s) = (1.0f64.cos(), 1.0f64.sin());
        assert!((out.get(1, 0) - (0.3 * c - -0.7 * s)).abs() < 1e-15);
        assert!((out.get(1, 1) - (-0.7 * c + 0.3 * s)).abs() < 1e-15);
    }

    #[test]
    fn high_frequency_pairs_rotate_slower() {
        let table: RotaryTable<f64> = RotaryTable::new(8, 8, 10000.0).unwrap();
        // Pair 0 at position p has angle p; the last pair's angle shrinks by
        // base^(-2i/d).
        let (cos, _) = table.window(3, 1).unwrap();
        assert!((cos.get(0, 0) - 3.0f64.cos()).abs() < 1e-12);
        let slow = 3.0 * 10000f64.powf(-6.0 / 8.0);
        assert!((cos.get(0, 3) - slow.cos()).abs() < 1e-12);
    }

    #[test]
    fn apply_then_invert_is_exact_on_random_keys() {
        let table: RotaryTable<f64> = RotaryTable::new(16, 8, 10000.0).unwrap();
        let mut rng = stream(5, "rope_test", 0);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let rows = Tensor::randn(&mut rng, 16, 8, 1.0);
            let round = table.invert(&table.apply(&rows, 0).unwrap(), 0).unwrap();
            for (a, b) in rows.data().iter().zip(round.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-12, "round-trip error {worst}");
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(
            RotaryTable::<f64>::new(4, 7, 10000.0),
            Err(RopeError::OddDim(7))
        ));
    }

    #[test]
    fn window_out_of_range_rejected() {
        let table: RotaryTable<f64> = RotaryTable::new(4, 4, 10000.0).unwrap();
        let rows = Tensor::<f64>::zeros(3, 4);
        assert!(matches!(
            table.apply(&rows, 2),
            Err(RopeError::PositionRange { .. })
        ));
    }

    #[test]
    fn frame_discipline_blocks_double_rotation() {
        let table: RotaryTable<f64> = RotaryTable::new(4, 4, 10000.0).unwrap();
        let keys = FramedKeys::pre(Tensor::<f64>::filled(4, 4, 1.0));
        let post = keys.to_post(&table).unwrap();
        assert!(matches!(
            post.to_post(&table),
            Err(RopeError::WrongFrame("post"))
        ));
        assert!(matches!(
            keys.to_pre(&table),
            Err(RopeError::WrongFrame("pre"))
        ));
        let back = post.to_pre(&table).unwrap();
        for (a, b) in back.rows.data().iter().zip(keys.rows.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rotation_preserves_row_norms(seed in 0u64..500, start in 0usize..8) {
            let table: RotaryTable<f64> = RotaryTable::new(16, 8, 10000.0).unwrap();
            let rows = Tensor::randn(&mut stream(seed, "rope_prop", 0), 8, 8, 1.0);
            let out = table.apply(&rows, start).unwrap();
            for r in 0..8 {
                let n0: f64 = rows.row(r).iter().map(|v| v * v).sum();
                let n1: f64 = out.row(r).iter().map(|v| v * v).sum();
                prop_assert!((n0 - n1).abs() < 1e-10);
            }
        }
    }
}
