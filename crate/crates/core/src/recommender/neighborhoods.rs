use crate::error::Result;
use crate::kde::SampleMatrix;
use crate::neighbors::k_nearest;

/// The `k_nn` nearest other sample points of one reference point, translated
/// so the reference sits at the origin, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodMatrix {
    k_nn: usize,
    d: usize,
    rows: Vec<f64>,
}

impl NeighborhoodMatrix {
    pub fn k_nn(&self) -> usize {
        self.k_nn
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.rows[l * self.d..(l + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.rows.chunks_exact(self.d)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.rows
    }

    /// Root-mean-square neighbour distance.
    pub fn rms_distance(&self) -> f64 {
        (self.rows.iter().map(|v| v * v).sum::<f64>() / self.k_nn as f64).sqrt()
    }
}

pub fn extract_neighborhoods(sample: &SampleMatrix, k_nn: usize) -> Result<Vec<NeighborhoodMatrix>> {
    let d = sample.d();
    Ok(k_nearest(sample, k_nn)?
        .into_iter()
        .enumerate()
        .map(|(i, nn)| {
            let center = sample.row(i);
            let mut rows = Vec::with_capacity(k_nn * d);
            for nb in nn {
                rows.extend(sample.row(nb.index).iter().zip(center).map(|(a, b)| a - b));
            }
            NeighborhoodMatrix { k_nn, d, rows }
        })
        .collect())
}
