//! Fractional sinusoidal positions and learned modality conditions.
//!
//! Streams of different rates share one sinusoidal table whose length is the
//! longest stream in the window. Frame `t` of a stream with `T_j` frames uses
//! row `r * t` with `r = floor(max_T / T_j)`, so frames recorded at the same
//! instant in streams whose rates divide evenly get the same row.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// Fixed sinusoidal table with `max_T` rows. Not a learnable leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    rows: Array2<f64>,
}

impl PositionTable {
    pub fn max_len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, index: usize) -> ndarray::ArrayView1<'_, f64> {
        self.rows.row(index)
    }
}

/// Channel `2i` holds `sin(p / 10000^(2i/d))`, channel `2i+1` the cosine.
pub fn build_sinusoidal_table(max_len: usize, dim: usize) -> Result<PositionTable> {
    if max_len == 0 {
        return Err(Error::Config("position table needs at least one row".into()));
    }
    if dim == 0 || dim % 2 == 1 {
        return Err(Error::Config(format!("position table width must be even and positive, got {dim}")));
    }
    let inv_freq: Vec<f64> = (0..dim / 2)
        .map(|i| 1.0 / 10000f64.powf((2 * i) as f64 / dim as f64))
        .collect();
    let rows = Array2::from_shape_fn((max_len, dim), |(p, c)| {
        let angle = p as f64 * inv_freq[c / 2];
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    });
    Ok(PositionTable { rows })
}

/// Position row of frame `t` in a stream of `len` frames.
pub fn fractional_index(max_len: usize, len: usize, t: usize) -> Result<usize> {
    if len == 0 || len > max_len {
        return Err(Error::Contract(format!("stream of {len} frames against a table of {max_len}")));
    }
    if t >= len {
        return Err(Error::Contract(format!("frame {t} outside a stream of {len} frames")));
    }
    Ok((max_len / len) * t)
}

/// Adds the condition row and the fractional position rows to `x` in place.
/// Absent rows are augmented too; attention masking hides them later.
pub fn apply_conditions(
    x: &mut ArrayViewMut2<'_, f64>,
    condition: ndarray::ArrayView1<'_, f64>,
    positions: &PositionTable,
) -> Result<Vec<usize>> {
    let len = x.nrows();
    if x.ncols() != positions.dim() || condition.len() != positions.dim() {
        return Err(Error::Contract(format!(
            "widths differ: embeddings {}, condition {}, positions {}",
            x.ncols(),
            condition.len(),
            positions.dim()
        )));
    }
    let mut indices = Vec::with_capacity(len);
    for (t, mut row) in x.rows_mut().into_iter().enumerate() {
        let index = fractional_index(positions.max_len(), len, t)?;
        row += &condition;
        row += &positions.row(index);
        indices.push(index);
    }
    Ok(indices)
}

/// Checks a modality index against the number of condition rows.
pub fn condition_row<'a>(table: ArrayView2<'a, f64>, modality: usize) -> Result<ndarray::ArrayView1<'a, f64>> {
    if modality >= table.nrows() {
        return Err(Error::Contract(format!(
            "modality index {modality} outside {} condition rows",
            table.nrows()
        )));
    }
    Ok(table.index_axis_move(ndarray::Axis(0), modality))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_rows_have_closed_form_values() {
        let table = build_sinusoidal_table(4, 6).unwrap();
        for c in 0..6 {
            assert_eq!(table.row(0)[c], if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((table.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((table.row(1)[0] - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(matches!(build_sinusoidal_table(10, 7), Err(Error::Config(_))));
    }

    #[test]
    fn table_matches_independent_recomputation() {
        let table = build_sinusoidal_table(600, 256).unwrap();
        for p in 0..600 {
            for i in 0..128 {
                // exp/ln form of the frequency instead of powf.
                let freq = (-(2.0 * i as f64 / 256.0) * 10000f64.ln()).exp();
                let angle = p as f64 * freq;
                assert!((table.row(p)[2 * i] - angle.sin()).abs() <= 1e-7);
                assert!((table.row(p)[2 * i + 1] - angle.cos()).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn fractional_index_examples() {
        assert_eq!(fractional_index(600, 150, 37).unwrap(), 148);
        assert_eq!(fractional_index(600, 150, 149).unwrap(), 596);
        assert_eq!(fractional_index(600, 600, 123).unwrap(), 123);
        assert!(matches!(fractional_index(150, 600, 0), Err(Error::Contract(_))));
        assert!(matches!(fractional_index(600, 150, 150), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_inputs_give_position_rows() {
        let table = build_sinusoidal_table(600, 8).unwrap();
        let mut x = Array2::zeros((150, 8));
        let cond = Array1::zeros(8);
        let idx = apply_conditions(&mut x.view_mut(), cond.view(), &table).unwrap();
        assert_eq!(idx.len(), 150);
        for (t, &i) in idx.iter().enumerate() {
            assert_eq!(i, 4 * t);
            assert_eq!(x.row(t), table.row(4 * t));
        }
    }

    #[test]
    fn aligned_frames_share_position_rows() {
        let table = build_sinusoidal_table(600, 8).unwrap();
        let mut audio = Array2::zeros((600, 8));
        let mut video = Array2::zeros((150, 8));
        let cond = Array1::zeros(8);
        apply_conditions(&mut audio.view_mut(), cond.view(), &table).unwrap();
        apply_conditions(&mut video.view_mut(), cond.view(), &table).unwrap();
        for k in 0..150 {
            assert_eq!(audio.row(4 * k), video.row(k));
        }
    }

    #[test]
    fn augmentation_matches_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = build_sinusoidal_table(90, 6).unwrap();
        let x = Array2::from_shape_simple_fn((30, 6), || rng.random::<f64>() - 0.5);
        let cond = Array2::from_shape_simple_fn((3, 6), || rng.random::<f64>() - 0.5);
        let mut out = x.clone();
        apply_conditions(&mut out.view_mut(), condition_row(cond.view(), 2).unwrap(), &table).unwrap();
        for t in 0..30 {
            for c in 0..6 {
                let want = x[[t, c]] + cond[[2, c]] + table.row(3 * t)[c];
                assert!((out[[t, c]] - want).abs() < 1e-7);
            }
        }
        assert!(matches!(condition_row(cond.view(), 3), Err(Error::Contract(_))));
    }
}
