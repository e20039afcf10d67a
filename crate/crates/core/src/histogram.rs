//! Joint intensity/gradient-magnitude histograms.
//!
//! The 2D histogram of a volume is the classifier's input representation:
//! rows bin the gradient magnitude, columns bin the intensity, counts are
//! log-compressed to `[0,1]` so sparse high-gradient arcs stay visible, and
//! the grid can be rebinned down by powers of two. The raw count grid is kept
//! alongside the normalized values so that rebinning composes exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::volume_io::{intensity_range, Volume};

#[derive(Debug, Error)]
pub enum HistogramError {
    #[error("bin count {0} is not a power of two in [8, 256]")]
    BadBins(usize),
    #[error("reduction factor {factor} exceeds histogram size {size}")]
    BadFactor { factor: u32, size: usize },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Gradient magnitude at every voxel: central differences scaled by
/// `1/(2*spacing)` on interior voxels, one-sided differences scaled by
/// `1/spacing` at the boundary. An axis of extent 1 contributes zero.
pub fn gradient_magnitude_field(volume: &Volume) -> Vec<f64> {
    let (nx, ny, nz) = volume.dims();
    let (sx, sy, sz) = volume.spacing();
    let mut field = vec![0.0; nx * ny * nz];

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let dx = axis_difference(x, nx, sx, |i| volume.at(i, y, z));
                let dy = axis_difference(y, ny, sy, |j| volume.at(x, j, z));
                let dz = axis_difference(z, nz, sz, |k| volume.at(x, y, k));
                field[volume.index(x, y, z)] = (dx * dx + dy * dy + dz * dz).sqrt();
            }
        }
    }
    field
}

#[inline]
fn axis_difference(i: usize, n: usize, spacing: f64, f: impl Fn(usize) -> f64) -> f64 {
    if n == 1 {
        0.0
    } else if i == 0 {
        (f(1) - f(0)) / spacing
    } else if i == n - 1 {
        (f(n - 1) - f(n - 2)) / spacing
    } else {
        (f(i + 1) - f(i - 1)) / (2.0 * spacing)
    }
}

/// B x B joint histogram with log-normalized values in `[0,1]`.
///
/// Row index = gradient-magnitude bin (0 = lowest), column index = intensity
/// bin (0 = lowest). `values` are derived from `counts` via
/// `log(1+c) / log(1+c_max)`, so the maximum cell is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    bins: usize,
    counts: Vec<u64>,
    values: Vec<f64>,
    intensity_range: (f64, f64),
    gmag_max: f64,
}

impl Histogram2D {
    fn from_counts(
        bins: usize,
        counts: Vec<u64>,
        intensity_range: (f64, f64),
        gmag_max: f64,
    ) -> Self {
        debug_assert_eq!(counts.len(), bins * bins);
        let values = normalize_counts(&counts);
        Histogram2D {
            bins,
            counts,
            values,
            intensity_range,
            gmag_max,
        }
    }

    /// Bins per axis.
    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Raw counts, row-major.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Normalized values in `[0,1]`, row-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.bins + col]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.bins + col]
    }

    /// Source intensity interval mapped onto the column axis.
    pub fn intensity_range(&self) -> (f64, f64) {
        self.intensity_range
    }

    /// Top of the gradient-magnitude axis.
    pub fn gmag_max(&self) -> f64 {
        self.gmag_max
    }

    /// Rebin down by `2^factor` per axis. Each output cell sums its
    /// `2^factor x 2^factor` block of raw counts; values are re-normalized
    /// from the summed counts, so `downscale(a)` then `downscale(b)` equals
    /// `downscale(a+b)` exactly.
    pub fn downscale(&self, factor: u32) -> Result<Histogram2D, HistogramError> {
        let step = 1usize
            .checked_shl(factor)
            .filter(|&s| s <= self.bins)
            .ok_or(HistogramError::BadFactor {
                factor,
                size: self.bins,
            })?;
        if step == 1 {
            return Ok(self.clone());
        }
        let out_bins = self.bins / step;
        let mut counts = vec![0u64; out_bins * out_bins];
        for row in 0..self.bins {
            for col in 0..self.bins {
                counts[(row / step) * out_bins + col / step] += self.count(row, col);
            }
        }
        Ok(Histogram2D::from_counts(
            out_bins,
            counts,
            self.intensity_range,
            self.gmag_max,
        ))
    }

    /// Row-major flattening of the normalized values; length `bins^2`.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Write an 8-bit binary PGM with pixel `round(255 * value)`. Row 0 of
    /// the histogram sits at the bottom of the image, so gradient magnitude
    /// increases upward.
    pub fn write_pgm(&self, path: &Path) -> Result<(), HistogramError> {
        let mut out = Vec::with_capacity(self.bins * self.bins + 32);
        write!(out, "P5\n{} {}\n255\n", self.bins, self.bins)?;
        for row in (0..self.bins).rev() {
            for col in 0..self.bins {
                out.push((255.0 * self.value(row, col)).round() as u8);
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Write raw counts as CSV, one `row,col,count` line per cell.
    pub fn write_csv(&self, path: &Path) -> Result<(), HistogramError> {
        let mut out = String::from("row,col,count\n");
        for row in 0..self.bins {
            for col in 0..self.bins {
                out.push_str(&format!("{},{},{}\n", row, col, self.count(row, col)));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }
}

fn normalize_counts(counts: &[u64]) -> Vec<f64> {
    let c_max = counts.iter().copied().max().unwrap_or(0);
    if c_max == 0 {
        return vec![0.0; counts.len()];
    }
    let denom = (1.0 + c_max as f64).ln();
    counts
        .iter()
        .map(|&c| (1.0 + c as f64).ln() / denom)
        .collect()
}

/// Compute the B x B joint intensity/gradient-magnitude histogram of a
/// volume. `bins` must be a power of two in `[8, 256]`.
///
/// The intensity axis maps the volume's `[min, max]` linearly onto columns
/// (max lands in the last bin; a constant volume puts all mass in column 0);
/// the gradient axis maps `[0, gmag_max]` onto rows the same way. A value
/// exactly on an interior bin boundary goes to the higher bin.
pub fn compute_histogram(volume: &Volume, bins: usize) -> Result<Histogram2D, HistogramError> {
    if !(8..=256).contains(&bins) || !bins.is_power_of_two() {
        return Err(HistogramError::BadBins(bins));
    }

    let (lo, hi) = intensity_range(volume);
    let gmag = gradient_magnitude_field(volume);
    let gmag_max = gmag.iter().fold(0.0f64, |m, &g| m.max(g));

    let mut counts = vec![0u64; bins * bins];
    for (&v, &g) in volume.voxels().iter().zip(gmag.iter()) {
        let col = bin_index(v, lo, hi, bins);
        let row = bin_index(g, 0.0, gmag_max, bins);
        counts[row * bins + col] += 1;
    }

    Ok(Histogram2D::from_counts(bins, counts, (lo, hi), gmag_max))
}

#[inline]
fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = (v - lo) * bins as f64 / (hi - lo);
    (t.floor() as usize).min(bins - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::{VolumeMeta, VoxelType};
    use proptest::prelude::*;

    fn volume(dims: (usize, usize, usize), voxels: Vec<f64>) -> Volume {
        Volume::from_voxels(VolumeMeta::new(dims, VoxelType::F32), voxels).unwrap()
    }

    fn volume_spaced(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        voxels: Vec<f64>,
    ) -> Volume {
        let mut meta = VolumeMeta::new(dims, VoxelType::F32);
        meta.spacing = spacing;
        Volume::from_voxels(meta, voxels).unwrap()
    }

    /// Straight re-evaluation of the difference stencil, kept independent of
    /// the production loop.
    fn gradient_oracle(v: &Volume) -> Vec<f64> {
        let (nx, ny, nz) = v.dims();
        let (sx, sy, sz) = v.spacing();
        let mut out = vec![0.0; nx * ny * nz];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let dx = if nx == 1 {
                        0.0
                    } else if x == 0 {
                        (v.at(1, y, z) - v.at(0, y, z)) / sx
                    } else if x == nx - 1 {
                        (v.at(nx - 1, y, z) - v.at(nx - 2, y, z)) / sx
                    } else {
                        (v.at(x + 1, y, z) - v.at(x - 1, y, z)) / (2.0 * sx)
                    };
                    let dy = if ny == 1 {
                        0.0
                    } else if y == 0 {
                        (v.at(x, 1, z) - v.at(x, 0, z)) / sy
                    } else if y == ny - 1 {
                        (v.at(x, ny - 1, z) - v.at(x, ny - 2, z)) / sy
                    } else {
                        (v.at(x, y + 1, z) - v.at(x, y - 1, z)) / (2.0 * sy)
                    };
                    let dz = if nz == 1 {
                        0.0
                    } else if z == 0 {
                        (v.at(x, y, 1) - v.at(x, y, 0)) / sz
                    } else if z == nz - 1 {
                        (v.at(x, y, nz - 1) - v.at(x, y, nz - 2)) / sz
                    } else {
                        (v.at(x, y, z + 1) - v.at(x, y, z - 1)) / (2.0 * sz)
                    };
                    out[v.index(x, y, z)] = (dx * dx + dy * dy + dz * dz).sqrt();
                }
            }
        }
        out
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let v = volume((4, 4, 4), vec![3.5; 64]);
        assert!(gradient_magnitude_field(&v).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_of_x_ramp_interior_is_one() {
        let (nx, ny, nz) = (8, 4, 4);
        let mut voxels = Vec::new();
        for _z in 0..nz {
            for _y in 0..ny {
                for x in 0..nx {
                    voxels.push(x as f64);
                }
            }
        }
        let v = volume((nx, ny, nz), voxels);
        let g = gradient_magnitude_field(&v);
        for z in 0..nz {
            for y in 0..ny {
                for x in 1..nx - 1 {
                    assert_eq!(g[v.index(x, y, z)], 1.0);
                }
                // one-sided boundary also sees slope 1 on a linear ramp
                assert_eq!(g[v.index(0, y, z)], 1.0);
                assert_eq!(g[v.index(nx - 1, y, z)], 1.0);
            }
        }
    }

    #[test]
    fn gradient_of_linear_field_matches_stencil_oracle() {
        // f(x,y,z) = x + 2y: brute-force stencil gives sqrt(5) at every
        // interior voxel of an 8^3 grid.
        let n = 8;
        let mut voxels = Vec::new();
        for _z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    voxels.push(x as f64 + 2.0 * y as f64);
                }
            }
        }
        let v = volume((n, n, n), voxels);
        let g = gradient_magnitude_field(&v);
        let oracle = gradient_oracle(&v);
        assert_eq!(g, oracle);
        for z in 0..n {
            for y in 1..n - 1 {
                for x in 1..n - 1 {
                    assert_eq!(g[v.index(x, y, z)], 5.0f64.sqrt());
                }
            }
        }
    }

    #[test]
    fn gradient_respects_spacing() {
        let mut voxels = Vec::new();
        for _z in 0..2 {
            for _y in 0..2 {
                for x in 0..4 {
                    voxels.push(x as f64);
                }
            }
        }
        let v = volume_spaced((4, 2, 2), (0.5, 1.0, 1.0), voxels);
        let g = gradient_magnitude_field(&v);
        // slope 1 per voxel over spacing 0.5 => physical slope 2
        assert_eq!(g[v.index(1, 0, 0)], 2.0);
    }

    #[test]
    fn constant_volume_histogram_is_single_cell() {
        let v = volume((4, 4, 4), vec![9.0; 64]);
        let h = compute_histogram(&v, 8).unwrap();
        assert_eq!(h.value(0, 0), 1.0);
        assert_eq!(h.count(0, 0), 64);
        for row in 0..8 {
            for col in 0..8 {
                if (row, col) != (0, 0) {
                    assert_eq!(h.value(row, col), 0.0);
                }
            }
        }
    }

    #[test]
    fn histogram_max_value_is_one() {
        let voxels: Vec<f64> = (0..64).map(|i| f64::from(i % 13)).collect();
        let v = volume((4, 4, 4), voxels);
        let h = compute_histogram(&v, 16).unwrap();
        let max = h.values().iter().fold(0.0f64, |m, &x| m.max(x));
        assert_eq!(max, 1.0);
    }

    #[test]
    fn two_value_volume_has_two_unit_cells() {
        // 4x1x1 volume (a,a,b,b): enumerate the stencil by hand.
        // gradients: |b-a|/2 at indices 1,2 and 0 at 0,3 (one-sided equal
        // neighbors). Intensity bins: a -> 0, b -> B-1. So cells
        // (row 0, col 0) and (row 0, col B-1) get 1 voxel each from the flat
        // ends, and the two middle voxels land in the top gradient row.
        let (a, b) = (10.0, 20.0);
        let v = volume((4, 1, 1), vec![a, a, b, b]);
        let g = gradient_magnitude_field(&v);
        assert_eq!(g, vec![0.0, 5.0, 5.0, 0.0]);

        let h = compute_histogram(&v, 8).unwrap();
        assert_eq!(h.count(0, 0), 1);
        assert_eq!(h.count(0, 7), 1);
        assert_eq!(h.count(7, 0), 1);
        assert_eq!(h.count(7, 7), 1);
        assert_eq!(h.counts().iter().sum::<u64>(), 4);
        // equal counts normalize to equal unit values
        assert_eq!(h.value(0, 0), 1.0);
        assert_eq!(h.value(7, 7), 1.0);
    }

    #[test]
    fn bad_bins_rejected() {
        let v = volume((2, 2, 2), vec![0.0; 8]);
        assert!(matches!(
            compute_histogram(&v, 7),
            Err(HistogramError::BadBins(7))
        ));
        assert!(matches!(
            compute_histogram(&v, 4),
            Err(HistogramError::BadBins(4))
        ));
        assert!(matches!(
            compute_histogram(&v, 512),
            Err(HistogramError::BadBins(512))
        ));
    }

    #[test]
    fn downscale_identity_and_shape() {
        let voxels: Vec<f64> = (0..512).map(|i| f64::from(i % 97)).collect();
        let v = volume((8, 8, 8), voxels);
        let h = compute_histogram(&v, 256).unwrap();
        assert_eq!(h.downscale(0).unwrap(), h);
        assert_eq!(h.downscale(3).unwrap().bins(), 32);
        assert!(matches!(
            h.downscale(9),
            Err(HistogramError::BadFactor {
                factor: 9,
                size: 256
            })
        ));
    }

    #[test]
    fn downscale_uniform_counts_stay_uniform() {
        // Synthesize a histogram with uniform counts through from_counts.
        let h = Histogram2D::from_counts(64, vec![3u64; 64 * 64], (0.0, 1.0), 1.0);
        let d = h.downscale(2).unwrap();
        assert_eq!(d.bins(), 16);
        assert!(d.counts().iter().all(|&c| c == 48));
        assert!(d.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn flatten_is_row_major() {
        let mut counts = vec![0u64; 64];
        counts[0] = 5; // row 0, col 0
        let h = Histogram2D::from_counts(8, counts, (0.0, 1.0), 1.0);
        let flat = h.flatten();
        assert_eq!(flat.len(), 64);
        assert_eq!(flat[0], 1.0);
        assert!(flat[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_lengths_match_bin_squares() {
        let voxels: Vec<f64> = (0..512).map(|i| f64::from(i % 31)).collect();
        let v = volume((8, 8, 8), voxels);
        assert_eq!(compute_histogram(&v, 256).unwrap().flatten().len(), 65536);
        assert_eq!(
            compute_histogram(&v, 256)
                .unwrap()
                .downscale(3)
                .unwrap()
                .flatten()
                .len(),
            1024
        );
    }

    #[test]
    fn pgm_export_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pgm");

        let mut counts = vec![0u64; 32 * 32];
        counts[5 * 32 + 7] = 9;
        let h = Histogram2D::from_counts(32, counts, (0.0, 1.0), 1.0);
        h.write_pgm(&path).unwrap();

        let bytes = fs::read(&path).unwrap();
        let header: Vec<&str> = std::str::from_utf8(&bytes[..13])
            .unwrap()
            .split_ascii_whitespace()
            .collect();
        assert_eq!(header, ["P5", "32", "32", "255"]);
        let pixels = &bytes[bytes.len() - 32 * 32..];
        assert_eq!(pixels.iter().filter(|&&p| p == 255).count(), 1);
        assert_eq!(pixels.iter().filter(|&&p| p == 0).count(), 32 * 32 - 1);
        // row 5 from the bottom => image row 26
        assert_eq!(pixels[(31 - 5) * 32 + 7], 255);
    }

    #[test]
    fn pgm_uniform_histogram_is_all_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.pgm");
        let h = Histogram2D::from_counts(8, vec![2u64; 64], (0.0, 1.0), 1.0);
        h.write_pgm(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes[bytes.len() - 64..].iter().all(|&p| p == 255));
    }

    #[test]
    fn csv_export_lists_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let mut counts = vec![0u64; 64];
        counts[2 * 8 + 3] = 4;
        let h = Histogram2D::from_counts(8, counts, (0.0, 1.0), 1.0);
        h.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("row,col,count"));
        assert!(text.lines().any(|l| l == "2,3,4"));
        assert_eq!(text.lines().count(), 65);
    }

    proptest! {
        #[test]
        fn gradient_matches_oracle_bit_exactly(
            values in proptest::collection::vec(0.0f64..255.0, 512),
            sx in 0.25f64..4.0,
        ) {
            let v = volume_spaced((8, 8, 8), (sx, 1.0, 2.0), values);
            prop_assert_eq!(gradient_magnitude_field(&v), gradient_oracle(&v));
        }

        #[test]
        fn histogram_conserves_mass(
            values in proptest::collection::vec(0.0f64..100.0, 256),
            bins_pow in 3u32..=8,
        ) {
            let v = volume((8, 8, 4), values);
            let h = compute_histogram(&v, 1 << bins_pow).unwrap();
            prop_assert_eq!(h.counts().iter().sum::<u64>(), 256);
            let max = h.values().iter().fold(0.0f64, |m, &x| m.max(x));
            prop_assert_eq!(max, 1.0);
            prop_assert!(h.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn downscale_composes_exactly(
            values in proptest::collection::vec(0.0f64..50.0, 1000),
            a in 0u32..=2,
            b in 0u32..=2,
        ) {
            let v = volume((10, 10, 10), values);
            let h = compute_histogram(&v, 64).unwrap();
            let two_steps = h.downscale(a).unwrap().downscale(b).unwrap();
            let one_step = h.downscale(a + b).unwrap();
            prop_assert_eq!(two_steps, one_step);
        }

        #[test]
        fn doubling_counts_preserves_unit_cell(
            values in proptest::collection::vec(0.0f64..20.0, 128),
        ) {
            // duplicating every voxel's contribution keeps the argmax cell at 1
            let v = volume((8, 4, 4), values.clone());
            let h = compute_histogram(&v, 16).unwrap();
            let doubled: Vec<u64> = h.counts().iter().map(|&c| 2 * c).collect();
            let h2 = Histogram2D::from_counts(16, doubled, h.intensity_range(), h.gmag_max());
            let argmax = |hh: &Histogram2D| {
                hh.values()
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                    .map(|(i, _)| i)
            };
            prop_assert_eq!(argmax(&h), argmax(&h2));
            let unit_cells = |hh: &Histogram2D| -> Vec<usize> {
                hh.values()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == 1.0)
                    .map(|(i, _)| i)
                    .collect()
            };
            prop_assert_eq!(unit_cells(&h), unit_cells(&h2));
        }
    }
}
