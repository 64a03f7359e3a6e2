//! Source-to-target permutations: PIT at `t = 0`, Euclidean matching and the
//! conditional mini-batch OT coupling.

use std::fmt;

use crate::error::{Error, Result};
use crate::flowpath::{wrap_drift, FlowPair, FlowState, VelocityField};
use crate::geometry::{MeanStack, Stack};

/// A bijection on `0..K`. Applied to a stack, row `i` of the result is row
/// `perm[i]` of the input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::invalid(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(Self(perm))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }

    /// `self` after `other`: `(self ∘ other)[i] = self[other[i]]`.
    pub fn compose(&self, other: &Permutation) -> Self {
        Self(other.0.iter().map(|&i| self.0[i]).collect())
    }

    pub fn apply(&self, x: &Stack) -> Stack {
        x.permute_rows(&self.0)
    }

    /// Every permutation of `0..k` in lexicographic order.
    pub fn all(k: usize) -> Vec<Permutation> {
        let mut out = Vec::new();
        let mut cur: Vec<usize> = (0..k).collect();
        loop {
            out.push(Permutation(cur.clone()));
            // next lexicographic permutation
            let Some(i) = (0..k.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
                break;
            };
            let j = (i + 1..k).rev().find(|&j| cur[j] > cur[i]).unwrap();
            cur.swap(i, j);
            cur[i + 1..].reverse();
        }
        out
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// Minimum-cost perfect matching on a square cost matrix (row `i` is matched to
/// column `result[i]`). Shortest augmenting paths with dual potentials, `O(n^3)`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual start.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
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
    let mut result = vec![0usize; n];
    for j in 1..=n {
        result[p[j] - 1] = j - 1;
    }
    result
}

fn matching_cost(cost: &[f64], n: usize, m: &[usize]) -> f64 {
    m.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

/// Largest problem size on which optimal matchings are refined to the
/// lexicographically smallest one.
const LEX_REFINE_MAX: usize = 8;

/// Optimal matching; among optimal matchings the lexicographically smallest is
/// returned for `n <= 8` (ties within a relative `1e-12` of the optimum).
pub fn optimal_matching(cost: &[f64], n: usize) -> Vec<usize> {
    let best = hungarian(cost, n);
    if n > LEX_REFINE_MAX || n < 2 {
        return best;
    }
    let opt = matching_cost(cost, n, &best);
    let scale = cost.iter().fold(0.0f64, |a, c| a.max(c.abs())) * n as f64;
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);

    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    for row in 0..n {
        let free_cols: Vec<usize> = (0..n).filter(|c| !fixed.contains(c)).collect();
        let mut chosen = None;
        for &col in &free_cols {
            let rest_rows: Vec<usize> = (row + 1..n).collect();
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != col).collect();
            let m = rest_rows.len();
            let mut sub = Vec::with_capacity(m * m);
            for &r in &rest_rows {
                for &c in &rest_cols {
                    sub.push(cost[r * n + c]);
                }
            }
            let sub_match = hungarian(&sub, m);
            let total = fixed_cost + cost[row * n + col] + matching_cost(&sub, m, &sub_match);
            if total <= opt + tol {
                chosen = Some(col);
                break;
            }
        }
        let col = chosen.unwrap_or(best[row]);
        fixed_cost += cost[row * n + col];
        fixed.push(col);
    }
    fixed
}

/// Squared distances between every row of `a` and every row of `b`.
fn row_cost_matrix(a: &Stack, b: &Stack) -> Vec<f64> {
    let k = a.k();
    let mut cost = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            cost[i * k + j] =
                a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    cost
}

/// `argmin_pi ||x0 - pi x1||^2`.
pub fn euclidean_assign(x0: &Stack, x1: &Stack) -> Result<Permutation> {
    x0.check_same_shape(x1)?;
    let k = x0.k();
    Ok(Permutation(optimal_matching(&row_cost_matrix(x0, x1), k)))
}

/// The PIT permutation: the ordering of `x1` that minimizes the flow-matching
/// loss at `t = 0`.
///
/// At `t = 0` the network input is `x0` whatever the ordering, so the drift is
/// evaluated once and the `K!` candidate targets are compared against it.
/// Ties resolve to the lexicographically smallest permutation.
pub fn pit_assign<V: VelocityField + ?Sized>(
    model: &V,
    pair: &FlowPair,
    pit_max: usize,
) -> Result<Permutation> {
    let k = pair.k();
    if k > pit_max {
        return Err(Error::invalid(format!(
            "PIT over {k} sources needs {k}! loss evaluations (limit {pit_max}); \
             use the euclidean assignment instead"
        )));
    }
    let state = FlowState { t: 0.0, x: pair.x0.clone() };
    let v = wrap_drift(model, &state, &pair.cond)?;
    Ok(pit_from_drift(&v, pair))
}

/// PIT given the drift evaluated at `t = 0`.
pub fn pit_from_drift(v0: &Stack, pair: &FlowPair) -> Permutation {
    // ||v - (pi x1 - x0)||^2 separates into per-row terms
    let k = pair.k();
    let l = pair.x0.l();
    let mut cost = vec![0.0; k * k];
    for i in 0..k {
        let (v, x0) = (v0.row(i), pair.x0.row(i));
        for j in 0..k {
            let x1 = pair.x1.row(j);
            let mut acc = 0.0;
            for n in 0..l {
                let d = v[n] - (x1[n] - x0[n]);
                acc += d * d;
            }
            cost[i * k + j] = acc;
        }
    }
    let mut best = Permutation::identity(k);
    let mut best_cost = f64::INFINITY;
    for perm in Permutation::all(k) {
        let c: f64 = perm.0.iter().enumerate().map(|(i, &j)| cost[i * k + j]).sum();
        if c < best_cost {
            best_cost = c;
            best = perm;
        }
    }
    best
}

/// A coupling of a batch of start points to a batch of endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct OtBatchPlan {
    /// `(i, j, perm)`: start point `i` is paired with `perm` applied to endpoint `j`.
    pub pairs: Vec<(usize, usize, Permutation)>,
    /// Row-major `B x B` cost matrix.
    pub cost: Vec<f64>,
    pub beta: f64,
}

impl OtBatchPlan {
    pub fn total_cost(&self) -> f64 {
        let b = self.pairs.len();
        self.pairs.iter().map(|(i, j, _)| self.cost[i * b + j]).sum()
    }
}

/// Conditional OT coupling with cost
/// `C_ij = min_pi ||x0_i - pi x1_j||^2 + beta ||c_i - c_j||^2`.
pub fn ot_couple(
    x0_batch: &[Stack],
    x1_batch: &[Stack],
    cond_batch: &[MeanStack],
    beta: f64,
) -> Result<OtBatchPlan> {
    let b = x0_batch.len();
    if x1_batch.len() != b || cond_batch.len() != b {
        return Err(Error::shape(format!(
            "batch sizes differ: {b} starts, {} ends, {} conditionings",
            x1_batch.len(),
            cond_batch.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let mut cost = vec![0.0; b * b];
    let mut inner = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            let perm = euclidean_assign(&x0_batch[i], &x1_batch[j])?;
            let d = x0_batch[i].dist_sq(&perm.apply(&x1_batch[j]));
            let c: f64 = cond_batch[i]
                .mean()
                .iter()
                .zip(cond_batch[j].mean())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            cost[i * b + j] = d + beta * c;
            inner.push(perm);
        }
    }
    let matching = optimal_matching(&cost, b);
    let pairs = matching
        .iter()
        .enumerate()
        .map(|(i, &j)| (i, j, inner[i * b + j].clone()))
        .collect();
    Ok(OtBatchPlan { pairs, cost, beta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowpath::FlowPair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(rng: &mut ChaCha8Rng, k: usize, l: usize) -> Stack {
        Stack::new(k, l, (0..k * l).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn permutations_enumerate_in_order() {
        let all = Permutation::all(3);
        let raw: Vec<Vec<usize>> = all.iter().map(|p| p.as_slice().to_vec()).collect();
        assert_eq!(
            raw,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(Permutation::all(4).len(), 24);
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![1, 2]).is_err());
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.compose(&p.inverse()), Permutation::identity(3));
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=6 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect();
                let h = hungarian(&cost, n);
                let best = Permutation::all(n)
                    .iter()
                    .map(|p| matching_cost(&cost, n, p.as_slice()))
                    .fold(f64::INFINITY, f64::min);
                assert!((matching_cost(&cost, n, &h) - best).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // all-zero cost: every matching is optimal
        assert_eq!(optimal_matching(&[0.0; 9], 3), vec![0, 1, 2]);
        // [1,0,2] and [2,0,1] are both optimal
        let cost = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(optimal_matching(&cost, 3), vec![1, 0, 2]);
    }

    #[test]
    fn euclidean_examples() {
        let x0 = Stack::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let swapped = x0.permute_rows(&[1, 0]);
        assert_eq!(euclidean_assign(&x0, &swapped).unwrap().as_slice(), &[1, 0]);
        assert_eq!(euclidean_assign(&x0, &x0).unwrap().as_slice(), &[0, 1]);
    }

    #[test]
    fn euclidean_matches_brute_force_and_relabels() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let k = rng.random_range(2..=4);
            let x0 = random_stack(&mut rng, k, 6);
            let x1 = random_stack(&mut rng, k, 6);
            let fast = euclidean_assign(&x0, &x1).unwrap();
            let mut best = (f64::INFINITY, Permutation::identity(k));
            for p in Permutation::all(k) {
                let c = x0.dist_sq(&p.apply(&x1));
                if c < best.0 {
                    best = (c, p);
                }
            }
            assert_eq!(fast, best.1);

            let sigma = Permutation::all(k)[rng.random_range(0..Permutation::all(k).len())].clone();
            let relabeled = euclidean_assign(&x0, &sigma.apply(&x1)).unwrap();
            assert_eq!(relabeled, sigma.inverse().compose(&fast));
        }
    }

    #[test]
    fn pit_with_zero_model_is_euclidean() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let zero = |_: f64, x: &Stack, _: &[f64]| Ok(Stack::zeros(x.k(), x.l()));
        for _ in 0..20 {
            let x1 = random_stack(&mut rng, 2, 8);
            let z = random_stack(&mut rng, 2, 8);
            let pair = FlowPair::from_noise(x1, z).unwrap();
            let pit = pit_assign(&zero, &pair, 4).unwrap();
            assert_eq!(pit, euclidean_assign(&pair.x0, &pair.x1).unwrap());
        }
    }

    #[test]
    fn pit_limit_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = FlowPair::from_noise(random_stack(&mut rng, 5, 4), random_stack(&mut rng, 5, 4)).unwrap();
        let zero = |_: f64, x: &Stack, _: &[f64]| Ok(Stack::zeros(x.k(), x.l()));
        assert!(pit_assign(&zero, &pair, 4).is_err());
    }

    #[test]
    fn ot_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = vec![random_stack(&mut rng, 2, 5)];
        let x1 = vec![random_stack(&mut rng, 2, 5)];
        let c = vec![MeanStack::from_mean(x1[0].column_mean(), 2)];
        let plan = ot_couple(&x0, &x1, &c, 1e4).unwrap();
        assert_eq!(plan.pairs.len(), 1);
        assert_eq!(plan.pairs[0].0, 0);
        assert_eq!(plan.pairs[0].1, 0);
        assert_eq!(plan.pairs[0].2, euclidean_assign(&x0[0], &x1[0]).unwrap());

        // dominant conditioning term pins the diagonal
        let b = 5;
        let x1: Vec<Stack> = (0..b).map(|_| random_stack(&mut rng, 2, 5)).collect();
        let x0: Vec<Stack> = (0..b).map(|_| random_stack(&mut rng, 2, 5)).collect();
        let c: Vec<MeanStack> = x1.iter().map(|s| MeanStack::from_mean(s.column_mean(), 2)).collect();
        let plan = ot_couple(&x0, &x1, &c, 1e9).unwrap();
        assert!(plan.pairs.iter().all(|(i, j, _)| i == j));
        assert!(ot_couple(&x0, &x1, &c, 0.0).is_err());
    }
}
