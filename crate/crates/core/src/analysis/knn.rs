use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::PixelField;

/// Stacks fields as the rows of a matrix.
pub fn stack_fields(fields: &[PixelField]) -> Result<Array2<f64>> {
    let d = fields.first().map_or(0, |f| f.len());
    let mut out = Array2::zeros((fields.len(), d));
    for (mut row, f) in out.rows_mut().into_iter().zip(fields) {
        f.check_len(d)?;
        row.assign(f.data());
    }
    Ok(out)
}

fn dist_sq(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance of each row to its `k`-th nearest other row.
fn knn_radii(points: ArrayView2<f64>, k: usize) -> Vec<f64> {
    (0..points.nrows())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> =
                (0..points.nrows()).filter(|&j| j != i).map(|j| dist_sq(points.row(i), points.row(j))).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

/// Fraction of `queries` inside at least one ball around `support`.
fn coverage(support: ArrayView2<f64>, radii: &[f64], queries: ArrayView2<f64>) -> f64 {
    let inside = (0..queries.nrows())
        .into_par_iter()
        .filter(|&q| (0..support.nrows()).any(|i| dist_sq(queries.row(q), support.row(i)) <= radii[i]))
        .count();
    inside as f64 / queries.nrows() as f64
}

/// k-NN precision and recall in pixel space: precision is the fraction of
/// generated points inside the union of the real points' k-NN balls, recall
/// the fraction of real points inside the generated points' balls.
pub fn knn_precision_recall(real: ArrayView2<f64>, gen: ArrayView2<f64>, k: usize) -> Result<(f64, f64)> {
    if real.ncols() != gen.ncols() {
        return Err(Error::ShapeMismatch { expected: real.ncols(), got: gen.ncols() });
    }
    let smallest = real.nrows().min(gen.nrows());
    if k == 0 || k >= smallest {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..{smallest}")));
    }
    let precision = coverage(real, &knn_radii(real, k), gen);
    let recall = coverage(gen, &knn_radii(gen, k), real);
    Ok((precision, recall))
}
