//! Set-to-set and distribution metrics between point sets.
//!
//! `jsd` and `mmd` both work on the three axis-aligned 2D projections (xy, xz,
//! yz) of the inputs and average over views. The MMD construction (Gaussian
//! kernel on raw projected points, median-heuristic bandwidth, unbiased
//! estimate) is this crate's own convention; it operates on points, not on
//! histograms.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const HIST_BINS: usize = 50;
pub const HIST_RANGE: (f64, f64) = (-1.0, 1.0);
const JSD_SMOOTHING: f64 = 1e-12;
const VIEWS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

fn check_dims(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidInput("point sets must be nonempty".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For each row of `a`, the index of its nearest row in `b` (ties: lowest).
pub fn nearest_indices(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<usize> {
    a.rows()
        .into_iter()
        .map(|ra| {
            let mut best = (f64::INFINITY, 0);
            for (j, rb) in b.rows().into_iter().enumerate() {
                let d = sq_dist(ra, rb);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Symmetric squared-L2 Chamfer distance with both directions mean-normalized.
pub fn chamfer(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_dims(a, b)?;
    let one_way = |x: ArrayView2<f64>, y: ArrayView2<f64>| -> f64 {
        let total: f64 = x
            .rows()
            .into_iter()
            .map(|rx| {
                y.rows()
                    .into_iter()
                    .map(|ry| sq_dist(rx, ry))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / x.nrows() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// Differentiable Chamfer distance between point sets shaped (..., m, d) and
/// (..., m', d) with identical leading dims; averaged over the leading dims.
pub fn chamfer_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let nd = sa.len();
    if nd < 2
        || sb.len() != nd
        || sa[nd - 1] != sb[nd - 1]
        || sa[..nd - 2] != sb[..nd - 2]
        || sa[nd - 2] == 0
        || sb[nd - 2] == 0
    {
        return Err(Error::shape("chamfer", sa, sb));
    }
    // (..., m, 1, d) - (..., 1, m', d) -> (..., m, m')
    let d2 = a
        .unsqueeze(nd - 1)?
        .sub(&b.unsqueeze(nd - 2)?)?
        .square()
        .sum_axis(-1, false)?;
    let a_to_b = d2.min_axis(-1, false)?.mean_axis(-1, false)?;
    let b_to_a = d2.min_axis(-2, false)?.mean_axis(-1, false)?;
    Ok(a_to_b.add(&b_to_a)?.mean())
}

/// Three 2D occupancy histograms (xy, xz, yz) over a fixed square range.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHistogram {
    pub grids: [Array2<f64>; 3],
    pub range: (f64, f64),
}

impl ProjectionHistogram {
    /// Points outside the range land in the edge bins.
    pub fn new(points: ArrayView2<f64>, bins: usize, range: (f64, f64)) -> Result<Self> {
        if points.ncols() != 3 {
            return Err(Error::InvalidInput(format!(
                "projection histograms need 3D points, got {} columns",
                points.ncols()
            )));
        }
        if bins == 0 || !(range.1 > range.0) {
            return Err(Error::InvalidInput("empty histogram range".into()));
        }
        let bin = |v: f64| -> usize {
            let t = ((v - range.0) / (range.1 - range.0) * bins as f64).floor();
            if t.is_nan() || t < 0.0 {
                0
            } else {
                (t as usize).min(bins - 1)
            }
        };
        let grids = VIEWS.map(|(u, v)| {
            let mut g = Array2::zeros((bins, bins));
            for row in points.rows() {
                g[[bin(row[u]), bin(row[v])]] += 1.0;
            }
            g
        });
        Ok(ProjectionHistogram { grids, range })
    }
}

fn normalized(grid: &Array2<f64>) -> Array2<f64> {
    let smoothed = grid + JSD_SMOOTHING;
    let total = smoothed.sum();
    smoothed / total
}

fn kl(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Jensen-Shannon divergence (nats) between two smoothed histograms.
pub fn jsd_grids(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let p = normalized(p);
    let q = normalized(q);
    let m = (&p + &q) * 0.5;
    (0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)).clamp(0.0, std::f64::consts::LN_2)
}

/// View-averaged JSD of the projection histograms of two 3D point sets.
pub fn jsd(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    check_dims(p, q)?;
    let hp = ProjectionHistogram::new(p, HIST_BINS, HIST_RANGE)?;
    let hq = ProjectionHistogram::new(q, HIST_BINS, HIST_RANGE)?;
    Ok(hp
        .grids
        .iter()
        .zip(&hq.grids)
        .map(|(a, b)| jsd_grids(a, b))
        .sum::<f64>()
        / 3.0)
}

fn project(points: ArrayView2<f64>, (u, v): (usize, usize)) -> Array2<f64> {
    points.select(Axis(1), &[u, v])
}

/// Median of all pairwise distances within the pooled sample.
pub fn median_pairwise_distance(pooled: ArrayView2<f64>) -> f64 {
    let n = pooled.nrows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(pooled.row(i), pooled.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

fn kernel_mean(a: ArrayView2<f64>, b: ArrayView2<f64>, gamma: f64, skip_diagonal: bool) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            total += (-gamma * sq_dist(ra, rb)).exp();
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        total / count as f64
    }
}

/// Squared MMD between two 2D samples with a Gaussian kernel
/// `exp(-|x - y|^2 / (2 h^2))`. The unbiased form drops i == j terms from the
/// within-sample means.
pub fn mmd2_with_bandwidth(
    p: ArrayView2<f64>,
    q: ArrayView2<f64>,
    bandwidth: f64,
    unbiased: bool,
) -> f64 {
    let gamma = 1.0 / (2.0 * bandwidth.max(1e-12).powi(2));
    kernel_mean(p, p, gamma, unbiased) + kernel_mean(q, q, gamma, unbiased)
        - 2.0 * kernel_mean(p, q, gamma, false)
}

fn mmd_views(p: ArrayView2<f64>, q: ArrayView2<f64>, unbiased: bool) -> Result<f64> {
    check_dims(p, q)?;
    if p.ncols() != 3 {
        return Err(Error::InvalidInput("mmd expects 3D point sets".into()));
    }
    let mut total = 0.0;
    for view in VIEWS {
        let pp = project(p, view);
        let qp = project(q, view);
        let pooled = ndarray::concatenate(Axis(0), &[pp.view(), qp.view()]).unwrap();
        let h = median_pairwise_distance(pooled.view());
        total += mmd2_with_bandwidth(pp.view(), qp.view(), h, unbiased);
    }
    Ok((total / 3.0).max(0.0))
}

/// View-averaged unbiased squared MMD, clamped at zero.
pub fn mmd(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    mmd_views(p, q, true)
}

/// Biased (V-statistic) variant; exactly zero for identical samples.
pub fn mmd_biased(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    mmd_views(p, q, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cloud(seed: u64, n: usize, std: f64, shift: [f64; 3]) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).unwrap();
        Array2::from_shape_fn((n, 3), |(_, j)| shift[j] + normal.sample(&mut rng))
    }

    #[test]
    fn chamfer_basics() {
        let a = array![[0.0, 0.0, 0.0]];
        let b = array![[1.0, 0.0, 0.0]];
        assert_eq!(chamfer(a.view(), b.view()).unwrap(), 2.0);
        let c = cloud(1, 10, 1.0, [0.0; 3]);
        assert_eq!(chamfer(c.view(), c.view()).unwrap(), 0.0);
        assert!(chamfer(a.view(), array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn chamfer_tensor_agrees_and_differentiates() {
        let a = cloud(2, 6, 1.0, [0.0; 3]);
        let b = cloud(3, 5, 1.0, [0.2, 0.0, 0.0]);
        let t = chamfer_tensor(
            &Tensor::constant(a.clone().into_dyn()),
            &Tensor::constant(b.clone().into_dyn()),
        )
        .unwrap();
        assert_abs_diff_eq!(t.item(), chamfer(a.view(), b.view()).unwrap(), epsilon = 1e-12);
        let bt = Tensor::constant(b.into_dyn());
        let err = grad_check(|x| chamfer_tensor(x, &bt), &a.into_dyn(), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn jsd_identity_and_disjoint() {
        let p = cloud(4, 300, 0.3, [0.0; 3]);
        assert_eq!(jsd(p.view(), p.view()).unwrap(), 0.0);
        let left = Array2::from_elem((10, 3), -0.9);
        let right = Array2::from_elem((10, 3), 0.9);
        assert_abs_diff_eq!(
            jsd(left.view(), right.view()).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-6
        );
    }

    #[test]
    fn out_of_range_points_clip_to_edges() {
        let pts = array![[-5.0, 0.0, 5.0], [0.999, 1.0, 2.0]];
        let h = ProjectionHistogram::new(pts.view(), 50, (-1.0, 1.0)).unwrap();
        for g in &h.grids {
            assert_eq!(g.sum(), 2.0);
        }
        assert_eq!(h.grids[1][[0, 49]], 1.0);
    }

    #[test]
    fn mmd_identity() {
        let p = cloud(5, 200, 0.4, [0.0; 3]);
        assert!(mmd_biased(p.view(), p.view()).unwrap().abs() < 1e-9);
        assert_eq!(mmd(p.view(), p.view()).unwrap(), 0.0);
    }

    #[test]
    fn mmd_separated_clouds_saturate() {
        let a = cloud(6, 100, 0.005, [0.0; 3]);
        let b = cloud(7, 100, 0.005, [10.0, 0.0, 0.0]);
        let (a2, b2) = (project(a.view(), (0, 1)), project(b.view(), (0, 1)));
        let v = mmd2_with_bandwidth(a2.view(), b2.view(), 1.0, true);
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-3);
    }

    #[test]
    fn median_distance_of_a_line() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        // distances 1, 2, 3
        assert_eq!(median_pairwise_distance(pts.view()), 2.0);
    }
}
