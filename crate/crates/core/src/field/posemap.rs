use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{flat_f64, DEVICE};
use crate::se3::Pose;

/// A rendered feature grid, `height × width × channels`, channel-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseMapImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub source_pose: Pose,
}

impl PoseMapImage {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
        source_pose: Pose,
    ) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid("feature grid size mismatch"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            source_pose,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            source_pose: Pose::identity(),
        }
    }

    /// From a `[gh, gw, C]` tensor.
    pub fn from_tensor(t: &Tensor, source_pose: Pose) -> Result<Self> {
        let (h, w, c) = t.dims3()?;
        Self::new(w, h, c, flat_f64(t)?, source_pose)
    }

    /// `[gh, gw, C]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.height, self.width, self.channels),
            &DEVICE,
        )?
        .to_dtype(dtype)?)
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_distance(&self, other: &PoseMapImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Output grid `(rows, cols)` with `rows · cols = cells`, shaped as close
/// to the input aspect ratio as the divisors of `cells` allow.
pub fn adaptive_pool_grid(h: usize, w: usize, cells: usize) -> (usize, usize) {
    let ideal = (cells as f64 * h as f64 / w as f64).sqrt();
    let rows = (1..=cells)
        .filter(|d| cells % d == 0)
        .min_by(|a, b| {
            let da = (*a as f64 - ideal).abs();
            let db = (*b as f64 - ideal).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    (rows, cells / rows)
}

/// Row-major `[cells, h·w]` averaging matrix. Output cell `(i, j)` averages
/// input rows `⌊i h / oh⌋ .. ⌈(i+1) h / oh⌉` and likewise for columns, so
/// windows overlap when the grid is upsampled.
pub fn adaptive_pool_matrix(h: usize, w: usize, cells: usize) -> Result<Vec<f64>> {
    if cells == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("empty pooling grid"));
    }
    let (oh, ow) = adaptive_pool_grid(h, w, cells);
    let span = |i: usize, n: usize, o: usize| (i * n / o, ((i + 1) * n).div_ceil(o));
    let mut m = vec![0.0; cells * h * w];
    for i in 0..oh {
        let (r0, r1) = span(i, h, oh);
        for j in 0..ow {
            let (c0, c1) = span(j, w, ow);
            let area = ((r1 - r0) * (c1 - c0)) as f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    m[(i * ow + j) * h * w + r * w + c] = 1.0 / area;
                }
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(adaptive_pool_grid(4, 4, 16), (4, 4));
        assert_eq!(adaptive_pool_grid(30, 53, 6), (2, 3));
        assert_eq!(adaptive_pool_grid(4, 4, 6), (2, 3));
        assert_eq!(adaptive_pool_grid(8, 2, 4), (4, 1));
    }

    #[test]
    fn pooling_rows_sum_to_one() {
        for (h, w, g) in [(4, 4, 16), (4, 4, 6), (3, 5, 4), (2, 2, 16)] {
            let m = adaptive_pool_matrix(h, w, g).unwrap();
            for row in m.chunks(h * w) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let m = adaptive_pool_matrix(4, 4, 16).unwrap();
        for (i, row) in m.chunks(16).enumerate() {
            assert_eq!(row[i], 1.0);
        }
        let m = adaptive_pool_matrix(4, 4, 4).unwrap();
        assert_eq!(&m[..8], &[0.25, 0.25, 0.0, 0.0, 0.25, 0.25, 0.0, 0.0]);
    }
}
