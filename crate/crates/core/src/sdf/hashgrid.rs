//! Multi-resolution hash-grid feature lookup with trilinear interpolation.

use serde::{Deserialize, Serialize};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Geometry of one grid level: vertex resolution, table size and where its
/// features start in the flat feature buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLevel {
    pub resolution: u32,
    pub table_size: usize,
    pub offset: usize,
    /// Coarse levels whose full lattice fits the table are indexed densely.
    pub dense: bool,
}

impl GridLevel {
    #[inline]
    pub fn index(&self, x: u32, y: u32, z: u32) -> usize {
        if self.dense {
            let n = (self.resolution + 1) as usize;
            x as usize + n * (y as usize + n * z as usize)
        } else {
            let h = x.wrapping_mul(PRIMES[0]) ^ y.wrapping_mul(PRIMES[1]) ^ z.wrapping_mul(PRIMES[2]);
            (h as usize) & (self.table_size - 1)
        }
    }
}

pub fn build_levels(levels: usize, base_resolution: u32, growth: f64, log2_table_size: u32, features: usize) -> Vec<GridLevel> {
    let max_table = 1usize << log2_table_size;
    let mut out = Vec::with_capacity(levels);
    let mut offset = 0;
    for l in 0..levels {
        let resolution = (base_resolution as f64 * growth.powi(l as i32)).floor() as u32;
        let dense_entries = ((resolution + 1) as usize).pow(3);
        let (table_size, dense) = if dense_entries <= max_table {
            (dense_entries, true)
        } else {
            (max_table, false)
        };
        out.push(GridLevel {
            resolution,
            table_size,
            offset,
            dense,
        });
        offset += table_size * features;
    }
    out
}

/// One of the eight corners touched by a lookup.
#[derive(Debug, Clone, Copy, Default)]
pub struct Corner {
    /// Index of the corner's first feature in the flat buffer.
    pub feature_index: usize,
    pub weight: f64,
    /// Derivative of `weight` w.r.t. the normalized coordinate.
    pub dweight: [f64; 3],
}

/// Trilinear corners of `p` on `level`, written into `out` (length 8).
pub fn corners(level: &GridLevel, features: usize, p: [f64; 3], out: &mut [Corner]) {
    let res = level.resolution as f64;
    let mut cell = [0u32; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let pos = p[a] * res;
        let c = pos.floor().clamp(0.0, res - 1.0);
        cell[a] = c as u32;
        frac[a] = pos - c;
    }
    for (k, corner) in out.iter_mut().enumerate().take(8) {
        let bits = [(k & 1) as u32, ((k >> 1) & 1) as u32, ((k >> 2) & 1) as u32];
        let mut w = [0.0; 3];
        let mut dw = [0.0; 3];
        for a in 0..3 {
            if bits[a] == 1 {
                w[a] = frac[a];
                dw[a] = res;
            } else {
                w[a] = 1.0 - frac[a];
                dw[a] = -res;
            }
        }
        let idx = level.index(cell[0] + bits[0], cell[1] + bits[1], cell[2] + bits[2]);
        *corner = Corner {
            feature_index: level.offset + idx * features,
            weight: w[0] * w[1] * w[2],
            dweight: [dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2]],
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_strictly_increase_and_tables_are_bounded() {
        let levels = build_levels(8, 16, 1.5, 15, 2);
        let res: Vec<u32> = levels.iter().map(|l| l.resolution).collect();
        assert_eq!(res, vec![16, 24, 36, 54, 81, 121, 182, 273]);
        for w in levels.windows(2) {
            assert!(w[1].resolution > w[0].resolution);
            assert_eq!(w[1].offset, w[0].offset + w[0].table_size * 2);
        }
        for l in &levels {
            assert!(l.table_size <= 1 << 15);
            if !l.dense {
                assert!(l.table_size.is_power_of_two());
            }
        }
    }

    #[test]
    fn weights_form_partition_of_unity() {
        let levels = build_levels(3, 16, 1.5, 15, 2);
        let mut cs = [Corner::default(); 8];
        corners(&levels[2], 2, [0.137, 0.52, 0.913], &mut cs);
        let total: f64 = cs.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for a in 0..3 {
            let dsum: f64 = cs.iter().map(|c| c.dweight[a]).sum();
            assert!(dsum.abs() < 1e-9);
        }
    }

    #[test]
    fn hashed_indices_stay_in_table() {
        let levels = build_levels(8, 16, 1.5, 15, 2);
        let top = levels.last().unwrap();
        assert!(!top.dense);
        for &(x, y, z) in &[(0, 0, 0), (273, 273, 273), (17, 200, 3)] {
            assert!(top.index(x, y, z) < top.table_size);
        }
    }
}
