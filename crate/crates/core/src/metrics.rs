//! Set-level evaluation metrics for point clouds and clustering scores.
//!
//! Clouds are `[M, d]` tensors, one point per row.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest cloud size solved exactly by [`emd`].
pub const EXACT_EMD_MAX: usize = 512;
/// Histogram bins per axis for [`jsd`].
pub const JSD_BINS: usize = 28;

const AUCTION_BID_BUDGET: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distance {
    Emd,
    Chamfer,
}

impl Distance {
    pub fn name(self) -> &'static str {
        match self {
            Distance::Emd => "EMD",
            Distance::Chamfer => "CD",
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "emd" => Ok(Distance::Emd),
            "cd" | "chamfer" => Ok(Distance::Chamfer),
            other => Err(Error::InvalidArgument(format!("unknown distance `{other}`"))),
        }
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::InvalidArgument("point clouds must be [M, d] tensors".into()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Empty("point cloud"));
    }
    if a.cols() != b.cols() {
        return Err(Error::SizeMismatch {
            what: "point dimension",
            left: a.cols(),
            right: b.cols(),
        });
    }
    Ok(())
}

fn sq_dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn cost_matrix(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let m = a.rows();
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            c[i * m + j] = sq_dist(a.row(i), b.row(j)).sqrt();
        }
    }
    c
}

/// Earth mover's distance with its solver flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmdValue {
    pub value: f64,
    /// False when the auction approximation was used.
    pub exact: bool,
}

/// `min_φ Σ ‖x − φ(x)‖₂` over bijections. Exact up to [`EXACT_EMD_MAX`]
/// points, auction approximation above.
pub fn emd(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(emd_detailed(a, b)?.value)
}

pub fn emd_detailed(a: &Tensor, b: &Tensor) -> Result<EmdValue> {
    check_pair(a, b)?;
    if a.rows() != b.rows() {
        return Err(Error::SizeMismatch {
            what: "EMD cloud sizes",
            left: a.rows(),
            right: b.rows(),
        });
    }
    let m = a.rows();
    let cost = cost_matrix(a, b);
    if m <= EXACT_EMD_MAX {
        let assign = hungarian(&cost, m);
        Ok(EmdValue {
            value: assign.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum(),
            exact: true,
        })
    } else {
        let assign = auction(&cost, m);
        Ok(EmdValue {
            value: assign.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum(),
            exact: false,
        })
    }
}

/// Minimum-cost assignment of rows to columns of a square `m × m` cost
/// matrix (shortest augmenting paths with potentials, O(m³)). Returns the
/// column of every row.
pub fn hungarian(cost: &[f64], m: usize) -> Vec<usize> {
    assert_eq!(cost.len(), m * m);
    // 1-based arrays; column 0 is a sentinel.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
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
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; m];
    for j in 1..=m {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// ε-scaling forward auction for a square cost matrix with a fixed bid
/// budget per phase. The final assignment is within `m·ε_final` of optimal
/// when every phase converges.
pub fn auction(cost: &[f64], m: usize) -> Vec<usize> {
    let max_cost = cost.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let eps_final = max_cost * 1e-6 / m as f64;
    let mut eps = max_cost / 4.0;
    let mut price = vec![0.0; m];
    let mut owner: Vec<Option<usize>> = vec![None; m];
    let mut assigned: Vec<Option<usize>> = vec![None; m];
    loop {
        owner.iter_mut().for_each(|o| *o = None);
        assigned.iter_mut().for_each(|a| *a = None);
        let mut queue: std::collections::VecDeque<usize> = (0..m).collect();
        let mut bids = 0;
        while let Some(i) = queue.pop_front() {
            if bids >= AUCTION_BID_BUDGET * m {
                queue.push_front(i);
                break;
            }
            bids += 1;
            let row = &cost[i * m..(i + 1) * m];
            let (mut best, mut best_v, mut second_v) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..m {
                let v = -row[j] - price[j];
                if v > best_v {
                    second_v = best_v;
                    best_v = v;
                    best = j;
                } else if v > second_v {
                    second_v = v;
                }
            }
            let inc = if second_v.is_finite() { best_v - second_v } else { 0.0 };
            price[best] += inc + eps;
            if let Some(prev) = owner[best] {
                assigned[prev] = None;
                queue.push_back(prev);
            }
            owner[best] = Some(i);
            assigned[i] = Some(best);
        }
        if !queue.is_empty() || eps <= eps_final {
            // Budget exhausted or done: complete greedily with free columns.
            let mut free: Vec<usize> = (0..m).filter(|&j| owner[j].is_none()).collect();
            let mut out = Vec::with_capacity(m);
            for a in &assigned {
                out.push(match a {
                    Some(j) => *j,
                    None => free.pop().expect("as many free columns as free rows"),
                });
            }
            return out;
        }
        eps = (eps / 5.0).max(eps_final);
    }
}

/// `Σ_{x∈A} min_{ξ∈B} ‖x−ξ‖² + Σ_{x∈B} min_{ξ∈A} ‖x−ξ‖²`.
pub fn chamfer(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let one_way = |p: &Tensor, q: &Tensor| -> f64 {
        (0..p.rows())
            .map(|i| {
                (0..q.rows())
                    .map(|j| sq_dist(p.row(i), q.row(j)))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    Ok(one_way(a, b) + one_way(b, a))
}

pub fn distance(kind: Distance, a: &Tensor, b: &Tensor) -> Result<f64> {
    match kind {
        Distance::Emd => emd(a, b),
        Distance::Chamfer => chamfer(a, b),
    }
}

/// `D[i][j] = distance(left[i], right[j])`, computed in parallel.
pub fn distance_matrix(kind: Distance, left: &[Tensor], right: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    left.par_iter()
        .map(|a| right.iter().map(|b| distance(kind, a, b)).collect())
        .collect()
}

fn argmin_lowest(values: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// EMD needs one cardinality across every cloud involved.
fn check_equal_sizes(sets: &[&[Tensor]], kind: Distance) -> Result<()> {
    if kind != Distance::Emd {
        return Ok(());
    }
    let mut clouds = sets.iter().flat_map(|s| s.iter());
    let Some(first) = clouds.next() else { return Ok(()) };
    for c in clouds {
        if c.rows() != first.rows() {
            return Err(Error::SizeMismatch {
                what: "cloud cardinality",
                left: first.rows(),
                right: c.rows(),
            });
        }
    }
    Ok(())
}

/// 1-nearest-neighbour two-sample accuracy, in percent. Each cloud's
/// nearest neighbour in the union minus itself decides; ties go to the
/// lowest union index (first set first).
pub fn one_nn_accuracy(first: &[Tensor], second: &[Tensor], kind: Distance) -> Result<f64> {
    if first.is_empty() {
        return Err(Error::Empty("1-NNA sample set"));
    }
    if first.len() != second.len() {
        return Err(Error::SizeMismatch {
            what: "1-NNA set sizes",
            left: first.len(),
            right: second.len(),
        });
    }
    check_equal_sizes(&[first, second], kind)?;
    let union: Vec<Tensor> = first.iter().chain(second).cloned().collect();
    let d = distance_matrix(kind, &union, &union)?;
    let n = first.len();
    let correct = (0..2 * n)
        .filter(|&i| {
            let nn = argmin_lowest((0..2 * n).filter(|&j| j != i).map(|j| (j, d[i][j]))).expect("two or more clouds");
            (nn < n) == (i < n)
        })
        .count();
    Ok(100.0 * correct as f64 / (2 * n) as f64)
}

/// Minimum matching distance and coverage (a fraction in `[0, 1]`).
pub fn mmd_cov(generated: &[Tensor], reference: &[Tensor], kind: Distance) -> Result<(f64, f64)> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Empty("MMD/COV cloud set"));
    }
    check_equal_sizes(&[generated, reference], kind)?;
    let d = distance_matrix(kind, reference, generated)?;
    let mmd = d
        .iter()
        .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / reference.len() as f64;
    let mut covered = vec![false; reference.len()];
    for g in 0..generated.len() {
        let r = argmin_lowest((0..reference.len()).map(|r| (r, d[r][g]))).expect("nonempty reference");
        covered[r] = true;
    }
    let cov = covered.iter().filter(|&&c| c).count() as f64 / reference.len() as f64;
    Ok((mmd, cov))
}

/// Jensen-Shannon divergence of voxel occupancy with the number of points
/// that fell outside `[-1, 1]^d` and were clipped to a boundary bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JsdValue {
    pub value: f64,
    pub clipped: usize,
}

fn histogram(set: &[Tensor], dim: usize, clipped: &mut usize) -> Vec<f64> {
    let mut h = vec![0.0; JSD_BINS.pow(dim as u32)];
    for c in set {
        for r in 0..c.rows() {
            let mut idx = 0;
            let mut outside = false;
            for &v in c.row(r) {
                outside |= !(-1.0..=1.0).contains(&v);
                let b = ((v + 1.0) / 2.0 * JSD_BINS as f64).floor();
                let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(JSD_BINS - 1) };
                idx = idx * JSD_BINS + b;
            }
            *clipped += outside as usize;
            h[idx] += 1.0;
        }
    }
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// `JSD(P₁ ‖ P₂)` over a `28^d` grid on `[-1, 1]^d`, natural log.
pub fn jsd(first: &[Tensor], second: &[Tensor]) -> Result<JsdValue> {
    let dim = first
        .first()
        .or(second.first())
        .map(|c| c.cols())
        .ok_or(Error::Empty("JSD cloud set"))?;
    if first.is_empty() || second.is_empty() {
        return Err(Error::Empty("JSD cloud set"));
    }
    if !(1..=3).contains(&dim) {
        return Err(Error::InvalidArgument(format!("JSD supports 1 to 3 dimensions, got {dim}")));
    }
    for c in first.iter().chain(second) {
        if c.cols() != dim {
            return Err(Error::SizeMismatch {
                what: "point dimension",
                left: c.cols(),
                right: dim,
            });
        }
        if c.rows() == 0 {
            return Err(Error::Empty("point cloud"));
        }
    }
    let mut clipped = 0;
    let p = histogram(first, dim, &mut clipped);
    let q = histogram(second, dim, &mut clipped);
    let mut value = 0.0;
    for (&a, &b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            value += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            value += 0.5 * b * (b / m).ln();
        }
    }
    Ok(JsdValue {
        value: value.clamp(0.0, std::f64::consts::LN_2),
        clipped,
    })
}

fn label_entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(Y; Ŷ) / (H(Y) + H(Ŷ))` and purity.
/// Two single-cluster labelings have NMI 1.
pub fn clustering_scores(predicted: &[usize], truth: &[usize]) -> Result<(f64, f64)> {
    if predicted.len() != truth.len() {
        return Err(Error::SizeMismatch {
            what: "label counts",
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::Empty("label list"));
    }
    let n = predicted.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pc: HashMap<usize, usize> = HashMap::new();
    let mut tc: HashMap<usize, usize> = HashMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1;
        *pc.entry(p).or_default() += 1;
        *tc.entry(t).or_default() += 1;
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for (&(p, _), &c) in &joint {
        let e = best.entry(p).or_default();
        *e = (*e).max(c);
    }
    let purity = best.values().sum::<usize>() as f64 / n;
    let hp = label_entropy(pc.values().copied(), n);
    let ht = label_entropy(tc.values().copied(), n);
    let mut mi = 0.0;
    for (&(p, t), &c) in &joint {
        let pxy = c as f64 / n;
        mi += pxy * (pxy * n * n / (pc[&p] as f64 * tc[&t] as f64)).ln();
    }
    let nmi = if hp + ht == 0.0 {
        1.0
    } else {
        (2.0 * mi / (hp + ht)).clamp(0.0, 1.0)
    };
    Ok((nmi, purity))
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    /// Distance used, or empty for distance-free metrics.
    pub distance: String,
    pub value: f64,
    pub exact: bool,
}

pub fn write_report(rows: &[MetricRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "metric,distance,value,exact")?;
    for r in rows {
        writeln!(w, "{},{},{:?},{}", r.metric, r.distance, r.value, r.exact)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::{prop_assert, proptest};

    fn cloud(rng: &mut Rng, m: usize, d: usize, shift: f64) -> Tensor {
        Tensor::new(vec![m, d], (0..m * d).map(|_| rng.uniform_range(-1.0, 1.0) + shift).collect()).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn emd_brute(a: &Tensor, b: &Tensor) -> f64 {
        permutations(a.rows())
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| sq_dist(a.row(i), b.row(j)).sqrt()).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn emd_examples() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(emd(&a, &b).unwrap(), 5.0);
        let mut rng = Rng::new(0);
        let c = cloud(&mut rng, 30, 3, 0.0);
        assert!(emd(&c, &c).unwrap().abs() < 1e-12);
        let short = cloud(&mut rng, 29, 3, 0.0);
        assert!(emd(&c, &short).is_err());
    }

    #[test]
    fn emd_matches_permutation_brute_force() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let a = cloud(&mut rng, 6, 2, 0.0);
            let b = cloud(&mut rng, 6, 2, 0.3);
            assert!((emd(&a, &b).unwrap() - emd_brute(&a, &b)).abs() < 1e-9);
        }
        for trial in 0..200 {
            let m = 1 + trial % 7;
            let a = cloud(&mut rng, m, 3, 0.0);
            let b = cloud(&mut rng, m, 3, 0.0);
            assert!((emd(&a, &b).unwrap() - emd_brute(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn emd_is_symmetric_and_satisfies_the_triangle_inequality() {
        let mut rng = Rng::new(2);
        for _ in 0..30 {
            let a = cloud(&mut rng, 20, 2, 0.0);
            let b = cloud(&mut rng, 20, 2, 0.5);
            let c = cloud(&mut rng, 20, 2, -0.2);
            let ab = emd(&a, &b).unwrap();
            assert!((ab - emd(&b, &a).unwrap()).abs() < 1e-9);
            assert!(ab <= emd(&a, &c).unwrap() + emd(&c, &b).unwrap() + 1e-9);
        }
    }

    #[test]
    fn auction_is_close_to_exact_and_flagged() {
        let mut rng = Rng::new(3);
        let a = cloud(&mut rng, 120, 2, 0.0);
        let b = cloud(&mut rng, 120, 2, 0.1);
        let cost = cost_matrix(&a, &b);
        let exact = emd(&a, &b).unwrap();
        let assign = auction(&cost, 120);
        let mut seen = assign.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..120).collect::<Vec<_>>());
        let approx: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * 120 + j]).sum();
        assert!(approx >= exact - 1e-9 && approx <= exact * 1.01, "{approx} vs {exact}");

        let a = cloud(&mut rng, EXACT_EMD_MAX + 1, 2, 0.0);
        let r = emd_detailed(&a, &a).unwrap();
        assert!(!r.exact);
        assert!(r.value < 1e-6);
    }

    #[test]
    fn chamfer_matches_double_loop() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &Tensor::zeros(&[0, 2])).is_err());
        let mut rng = Rng::new(4);
        for _ in 0..10 {
            let p = cloud(&mut rng, 20, 3, 0.0);
            let q = cloud(&mut rng, 20, 3, 0.2);
            let mut expect = 0.0;
            for i in 0..20 {
                let mut best = f64::INFINITY;
                for j in 0..20 {
                    let d: f64 = (0..3).map(|k| (p.row(i)[k] - q.row(j)[k]).powi(2)).sum();
                    best = best.min(d);
                }
                expect += best;
            }
            for j in 0..20 {
                let mut best = f64::INFINITY;
                for i in 0..20 {
                    let d: f64 = (0..3).map(|k| (p.row(i)[k] - q.row(j)[k]).powi(2)).sum();
                    best = best.min(d);
                }
                expect += best;
            }
            assert!((chamfer(&p, &q).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn one_nn_examples() {
        let mut rng = Rng::new(5);
        let s1: Vec<Tensor> = (0..5).map(|_| cloud(&mut rng, 8, 2, 0.0)).collect();
        let s2: Vec<Tensor> = (0..5).map(|_| cloud(&mut rng, 8, 2, 100.0)).collect();
        for kind in [Distance::Emd, Distance::Chamfer] {
            assert_eq!(one_nn_accuracy(&s1, &s2, kind).unwrap(), 100.0);
        }
        let c = cloud(&mut rng, 8, 2, 0.0);
        assert_eq!(one_nn_accuracy(&[c.clone()], &[c], Distance::Emd).unwrap(), 0.0);
        assert!(one_nn_accuracy(&s1, &s2[..4], Distance::Emd).is_err());
    }

    #[test]
    fn one_nn_matches_full_matrix_oracle() {
        let mut rng = Rng::new(6);
        for kind in [Distance::Emd, Distance::Chamfer] {
            let s1: Vec<Tensor> = (0..10).map(|_| cloud(&mut rng, 10, 2, 0.0)).collect();
            let s2: Vec<Tensor> = (0..10).map(|_| cloud(&mut rng, 10, 2, 0.15)).collect();
            let all: Vec<&Tensor> = s1.iter().chain(&s2).collect();
            let mut correct = 0;
            for i in 0..20 {
                let mut best = (usize::MAX, f64::INFINITY);
                for j in 0..20 {
                    if i != j {
                        let d = distance(kind, all[i], all[j]).unwrap();
                        if d < best.1 {
                            best = (j, d);
                        }
                    }
                }
                if (best.0 < 10) == (i < 10) {
                    correct += 1;
                }
            }
            assert_eq!(one_nn_accuracy(&s1, &s2, kind).unwrap(), correct as f64 * 5.0);
        }
    }

    #[test]
    fn one_nn_of_one_distribution_is_near_chance() {
        let mut rng = Rng::new(7);
        let sample = |rng: &mut Rng| {
            let rows: Vec<Vec<f64>> = (0..64)
                .map(|_| {
                    let a = rng.uniform_range(0.0, std::f64::consts::TAU);
                    let r = 0.8 + 0.05 * rng.normal();
                    vec![r * a.cos(), r * a.sin()]
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let s1: Vec<Tensor> = (0..100).map(|_| sample(&mut rng)).collect();
        let s2: Vec<Tensor> = (0..100).map(|_| sample(&mut rng)).collect();
        let acc = one_nn_accuracy(&s1, &s2, Distance::Chamfer).unwrap();
        assert!((40.0..=60.0).contains(&acc), "{acc}");
    }

    #[test]
    fn mmd_cov_examples_and_oracle() {
        let mut rng = Rng::new(8);
        let s: Vec<Tensor> = (0..8).map(|_| cloud(&mut rng, 6, 2, 0.0)).collect();
        for kind in [Distance::Emd, Distance::Chamfer] {
            assert_eq!(mmd_cov(&s, &s, kind).unwrap(), (0.0, 1.0));
            assert_eq!(mmd_cov(&s[..1], &s, kind).unwrap().1, 1.0 / 8.0);
            let g: Vec<Tensor> = (0..8).map(|_| cloud(&mut rng, 6, 2, 0.1)).collect();
            let (mmd, cov) = mmd_cov(&g, &s, kind).unwrap();
            let mut total = 0.0;
            for r in &s {
                total += g.iter().map(|x| distance(kind, r, x).unwrap()).fold(f64::INFINITY, f64::min);
            }
            let mut hit = [false; 8];
            for x in &g {
                let ds: Vec<f64> = s.iter().map(|r| distance(kind, r, x).unwrap()).collect();
                let mut best = 0;
                for (i, &d) in ds.iter().enumerate() {
                    if d < ds[best] {
                        best = i;
                    }
                }
                hit[best] = true;
            }
            assert!((mmd - total / 8.0).abs() < 1e-12);
            assert!((cov - hit.iter().filter(|&&h| h).count() as f64 / 8.0).abs() < 1e-12);
        }
        assert!(mmd_cov(&[], &s, Distance::Emd).is_err());
    }

    #[test]
    fn jsd_examples_and_oracle() {
        let mut rng = Rng::new(9);
        let s: Vec<Tensor> = (0..3).map(|_| cloud(&mut rng, 50, 3, 0.0)).collect();
        assert_eq!(jsd(&s, &s).unwrap().value, 0.0);
        let left = Tensor::full(&[10, 2], -0.9);
        let right = Tensor::full(&[10, 2], 0.9);
        assert!((jsd(&[left], &[right]).unwrap().value - std::f64::consts::LN_2).abs() < 1e-12);

        let outside = Tensor::from_rows(&[vec![1.5, 0.0], vec![0.0, 0.0]]).unwrap();
        let r = jsd(&[outside.clone()], &[outside]).unwrap();
        assert_eq!(r.clipped, 2);

        for _ in 0..5 {
            let a: Vec<Tensor> = (0..2).map(|_| cloud(&mut rng, 40, 2, 0.0)).collect();
            let b: Vec<Tensor> = (0..2).map(|_| cloud(&mut rng, 40, 2, 0.2)).collect();
            let bins = |set: &[Tensor]| {
                let mut h = vec![0.0; 28 * 28];
                let mut n = 0.0;
                for c in set {
                    for r in 0..c.rows() {
                        let i = ((((c.row(r)[0] + 1.0) * 14.0).floor()).clamp(0.0, 27.0)) as usize;
                        let j = ((((c.row(r)[1] + 1.0) * 14.0).floor()).clamp(0.0, 27.0)) as usize;
                        h[i * 28 + j] += 1.0;
                        n += 1.0;
                    }
                }
                h.into_iter().map(|v| v / n).collect::<Vec<f64>>()
            };
            let (p, q) = (bins(&a), bins(&b));
            let m: Vec<f64> = p.iter().zip(&q).map(|(x, y)| (x + y) / 2.0).collect();
            let kl = |x: &[f64]| -> f64 {
                x.iter().zip(&m).filter(|(v, _)| **v > 0.0).map(|(v, w)| v * (v / w).ln()).sum()
            };
            let expect = 0.5 * kl(&p) + 0.5 * kl(&q);
            assert!((jsd(&a, &b).unwrap().value - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn clustering_examples() {
        let y = [0, 0, 1, 1, 2, 2];
        assert_eq!(clustering_scores(&y, &y).unwrap(), (1.0, 1.0));
        let relabeled = [5, 5, 3, 3, 9, 9];
        assert!((clustering_scores(&relabeled, &y).unwrap().0 - 1.0).abs() < 1e-12);
        let (nmi, pur) = clustering_scores(&[0; 6], &[0, 0, 0, 1, 1, 2]).unwrap();
        assert_eq!(nmi, 0.0);
        assert_eq!(pur, 0.5);
        assert!(clustering_scores(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn clustering_matches_contingency_hand_computation() {
        // Predicted clusters a, b, c over 12 points with true classes.
        let pred = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let truth = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 0, 0];
        // Contingency rows (pred) × cols (truth): [3,1,0], [0,3,1], [2,0,2].
        let table = [[3.0, 1.0, 0.0], [0.0, 3.0, 1.0], [2.0, 0.0, 2.0]];
        let n = 12.0;
        let rs: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let cs: Vec<f64> = (0..3).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        let mut mi = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if table[i][j] > 0.0 {
                    let p = table[i][j] / n;
                    mi += p * (p / (rs[i] / n * cs[j] / n)).ln();
                }
            }
        }
        let h = |v: &[f64]| -> f64 { v.iter().map(|c| -(c / n) * (c / n).ln()).sum() };
        let nmi = 2.0 * mi / (h(&rs) + h(&cs));
        let purity = (3.0 + 3.0 + 2.0) / n;
        let (a, b) = clustering_scores(&pred, &truth).unwrap();
        assert!((a - nmi).abs() < 1e-12);
        assert!((b - purity).abs() < 1e-12);
    }

    #[test]
    fn report_has_one_row_per_metric() {
        let rows = vec![
            MetricRow {
                metric: "MMD".into(),
                distance: "EMD".into(),
                value: 0.5,
                exact: true,
            },
            MetricRow {
                metric: "JSD".into(),
                distance: String::new(),
                value: 0.25,
                exact: true,
            },
        ];
        let mut out = Vec::new();
        write_report(&rows, &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "metric,distance,value,exact\nMMD,EMD,0.5,true\nJSD,,0.25,true\n"
        );
    }

    proptest! {
        #[test]
        fn fuzzed_metrics_stay_in_range(seed in 0u64..1000, m in 1usize..12, k in 1usize..5) {
            let mut rng = Rng::new(seed);
            let a: Vec<Tensor> = (0..3).map(|_| cloud(&mut rng, m, 2, 0.0)).collect();
            let b: Vec<Tensor> = (0..3).map(|_| cloud(&mut rng, m, 2, 0.3)).collect();
            prop_assert!(chamfer(&a[0], &a[0]).unwrap() == 0.0);
            let j = jsd(&a, &b).unwrap().value;
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&j));
            let (_, cov) = mmd_cov(&a, &b, Distance::Chamfer).unwrap();
            prop_assert!(cov > 0.0 && cov <= 1.0);
            let pred: Vec<usize> = (0..20).map(|_| rng.below(k)).collect();
            let truth: Vec<usize> = (0..20).map(|_| rng.below(3)).collect();
            let (nmi, pur) = clustering_scores(&pred, &truth).unwrap();
            prop_assert!((0.0..=1.0).contains(&nmi) && (0.0..=1.0).contains(&pur));
        }
    }
}
