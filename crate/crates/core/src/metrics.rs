//! Point-set distances on xyz channels: squared-L2 Chamfer and L2 Earth
//! Mover's distance, plus resampling for equal-size comparison.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Largest size solved exactly by the Hungarian method.
pub const EXACT_EMD_LIMIT: usize = 1024;
/// Final auction tolerance; the approximate mean cost is within this of the optimum.
pub const AUCTION_EPSILON: f64 = 1e-4;
/// Tables report CD and EMD multiplied by this.
pub const REPORT_SCALE: f64 = 1e3;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn check_nonempty(x: &PointCloud, y: &PointCloud) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("metrics need non-empty point sets"));
    }
    Ok(())
}

/// Static 3-d tree over a point set, split at the median of alternating axes.
struct KdTree {
    points: Vec<[f64; 3]>,
    // Permutation of point indices; each subslice is a subtree with its
    // median at the midpoint.
    order: Vec<usize>,
}

impl KdTree {
    fn new(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::build(&points, &mut order, 0);
        Self { points, order }
    }

    fn build(points: &[[f64; 3]], order: &mut [usize], axis: usize) {
        if order.len() <= 1 {
            return;
        }
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let (left, right) = order.split_at_mut(mid);
        Self::build(points, left, (axis + 1) % 3);
        Self::build(points, &mut right[1..], (axis + 1) % 3);
    }

    /// Smallest squared distance from `q` to the set.
    fn nearest(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(&self.order, 0, q, &mut best);
        best
    }

    fn search(&self, order: &[usize], axis: usize, q: &[f64; 3], best: &mut f64) {
        if order.is_empty() {
            return;
        }
        let mid = order.len() / 2;
        let p = &self.points[order[mid]];
        let d = dist2(p, q);
        if d < *best {
            *best = d;
        }
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (&order[..mid], &order[mid + 1..])
        } else {
            (&order[mid + 1..], &order[..mid])
        };
        let next = (axis + 1) % 3;
        self.search(near, next, q, best);
        if diff * diff <= *best {
            self.search(far, next, q, best);
        }
    }
}

fn directed_mean(from: &[[f64; 3]], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest(p)).sum::<f64>() / from.len() as f64
}

/// Mean nearest-neighbour squared distance in both directions, summed.
pub fn chamfer_l2(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    check_nonempty(x, y)?;
    let (px, py) = (x.positions(), y.positions());
    let tx = KdTree::new(px.clone());
    let ty = KdTree::new(py.clone());
    Ok(directed_mean(&px, &ty) + directed_mean(&py, &tx))
}

/// Quadratic reference implementation of [`chamfer_l2`].
pub fn chamfer_l2_brute(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    check_nonempty(x, y)?;
    let (px, py) = (x.positions(), y.positions());
    let directed = |a: &[[f64; 3]], b: &[[f64; 3]]| {
        a.iter()
            .map(|p| b.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(directed(&px, &py) + directed(&py, &px))
}

fn cost_matrix(x: &PointCloud, y: &PointCloud) -> Result<(usize, Vec<f64>)> {
    check_nonempty(x, y)?;
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "EMD needs equal-size sets, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (px, py) = (x.positions(), y.positions());
    let n = px.len();
    let mut c = Vec::with_capacity(n * n);
    for p in &px {
        c.extend(py.iter().map(|q| dist2(p, q).sqrt()));
    }
    Ok((n, c))
}

fn mean_cost(n: usize, cost: &[f64], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64
}

/// Exact minimum-cost perfect matching (shortest augmenting paths with
/// potentials, `O(n^3)`). Returns `assignment[i] = j`.
pub fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// Forward auction with ε-scaling down to `final_eps`. The total cost is
/// within `n * final_eps` of the optimum.
pub fn auction(n: usize, cost: &[f64], final_eps: f64) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let mut eps = (max_cost / 4.0).max(final_eps);
    let mut prices = vec![0.0; n];
    let mut assignment = vec![usize::MAX; n];
    loop {
        let mut owner = vec![usize::MAX; n];
        assignment.iter_mut().for_each(|a| *a = usize::MAX);
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            let row = &cost[i * n..(i + 1) * n];
            let (mut best, mut best_j, mut second) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
            for (j, (&c, &p)) in row.iter().zip(&prices).enumerate() {
                let value = -c - p;
                if value > best {
                    second = best;
                    best = value;
                    best_j = j;
                } else if value > second {
                    second = value;
                }
            }
            let increment = if second.is_finite() { best - second } else { 0.0 };
            prices[best_j] += increment + eps;
            if owner[best_j] != usize::MAX {
                let evicted = owner[best_j];
                assignment[evicted] = usize::MAX;
                queue.push(evicted);
            }
            owner[best_j] = i;
            assignment[i] = best_j;
        }
        if eps <= final_eps {
            return assignment;
        }
        eps = (eps / 5.0).max(final_eps);
    }
}

/// Optimal matching used by [`emd`], `assignment[i] = j`.
pub fn emd_matching(x: &PointCloud, y: &PointCloud) -> Result<(f64, Vec<usize>)> {
    let (n, c) = cost_matrix(x, y)?;
    let assignment = if n <= EXACT_EMD_LIMIT {
        hungarian(n, &c)
    } else {
        auction(n, &c, AUCTION_EPSILON)
    };
    Ok((mean_cost(n, &c, &assignment), assignment))
}

/// Mean unsquared L2 cost of the optimal bijection between equal-size sets.
pub fn emd(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    Ok(emd_matching(x, y)?.0)
}

/// Exhaustive minimum over all permutations; for tiny oracle checks only.
pub fn emd_brute(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    let (n, c) = cost_matrix(x, y)?;
    if n > 9 {
        return Err(Error::invalid("exhaustive EMD is limited to 9 points"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| best = best.min(mean_cost(n, &c, p)));
    Ok(best)
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// Mean absolute RGB difference under the EMD matching; `None` without color.
pub fn color_error(x: &PointCloud, y: &PointCloud) -> Result<Option<f64>> {
    if !x.has_color() || !y.has_color() {
        return Ok(None);
    }
    let (_, matching) = emd_matching(x, y)?;
    let total: f64 = matching
        .iter()
        .enumerate()
        .map(|(i, &j)| (3..6).map(|k| (x.point(i)[k] - y.point(j)[k]).abs()).sum::<f64>() / 3.0)
        .sum();
    Ok(Some(total / x.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMode {
    /// Uniform with replacement.
    #[default]
    Uniform,
    /// Farthest-point sampling, padded uniformly beyond the input size.
    Fps,
}

/// Draws `m` points from `x`.
pub fn resample<R: Rng + ?Sized>(x: &PointCloud, m: usize, rng: &mut R, mode: ResampleMode) -> Result<PointCloud> {
    if x.is_empty() {
        return Err(Error::invalid("cannot resample an empty point set"));
    }
    let n = x.len();
    let indices: Vec<usize> = match mode {
        ResampleMode::Uniform => (0..m).map(|_| rng.gen_range(0..n)).collect(),
        ResampleMode::Fps => {
            let pts = x.positions();
            let mut chosen = Vec::with_capacity(m);
            let mut nearest = vec![f64::INFINITY; n];
            let mut current = rng.gen_range(0..n);
            for _ in 0..m.min(n) {
                chosen.push(current);
                nearest[current] = f64::NEG_INFINITY;
                let mut far = (f64::NEG_INFINITY, current);
                for (i, p) in pts.iter().enumerate() {
                    if nearest[i] != f64::NEG_INFINITY {
                        nearest[i] = nearest[i].min(dist2(p, &pts[current]));
                        if nearest[i] > far.0 {
                            far = (nearest[i], i);
                        }
                    }
                }
                current = far.1;
            }
            chosen.extend((n..m).map(|_| rng.gen_range(0..n)));
            chosen
        }
    };
    Ok(x.select(&indices))
}

/// CD and EMD for one prediction; values are raw, use [`MetricReport::scaled`]
/// for the ×10³ table convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub emd: f64,
    pub points: usize,
    pub color_error: Option<f64>,
}

impl MetricReport {
    /// Compares equal-size clouds; colors are ignored by CD and EMD.
    pub fn compare(prediction: &PointCloud, truth: &PointCloud) -> Result<Self> {
        Ok(Self {
            cd: chamfer_l2(prediction, truth)?,
            emd: emd(prediction, truth)?,
            points: prediction.len(),
            color_error: color_error(prediction, truth)?,
        })
    }

    pub fn scaled(&self) -> (f64, f64) {
        (self.cd * REPORT_SCALE, self.emd * REPORT_SCALE)
    }

    /// Entry-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::invalid("no reports to aggregate"));
        }
        let n = reports.len() as f64;
        let colors: Option<Vec<f64>> = reports.iter().map(|r| r.color_error).collect();
        Ok(MetricReport {
            cd: reports.iter().map(|r| r.cd).sum::<f64>() / n,
            emd: reports.iter().map(|r| r.emd).sum::<f64>() / n,
            points: reports[0].points,
            color_error: colors.map(|c| c.iter().sum::<f64>() / n),
        })
    }
}
