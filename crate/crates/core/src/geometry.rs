//! Linear algebra of K-source stacks.
//!
//! A [`Stack`] is a `K x L` row-major matrix whose rows are signals. The mean
//! projector `P = 11^T / K` and the centering projector `P_perp = I - P` act on
//! the source axis and are always applied as a column-mean computation, never as
//! an explicit `K x K` product.

use crate::error::{Error, Result};

/// A `K x L` matrix of samples, one signal per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    k: usize,
    l: usize,
    data: Vec<f64>,
}

impl Stack {
    pub fn new(k: usize, l: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || l == 0 {
            return Err(Error::shape(format!("stack must be non-empty, got {k}x{l}")));
        }
        if data.len() != k * l {
            return Err(Error::shape(format!(
                "stack {k}x{l} needs {} values, got {}",
                k * l,
                data.len()
            )));
        }
        Ok(Self { k, l, data })
    }

    pub fn zeros(k: usize, l: usize) -> Self {
        Self { k, l, data: vec![0.0; k * l] }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let k = rows.len();
        let l = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(k * l);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != l {
                return Err(Error::shape(format!(
                    "row {i} has length {}, expected {l}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(k, l, data)
    }

    /// Number of rows (sources).
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of samples per row.
    pub fn l(&self) -> usize {
        self.l
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.l..(i + 1) * self.l]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.l..(i + 1) * self.l]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.l)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Stack) -> Result<()> {
        if self.k != other.k || self.l != other.l {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.k, self.l, other.k, other.l
            )));
        }
        Ok(())
    }

    /// Row permutation: row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Stack {
        assert_eq!(perm.len(), self.k, "permutation length must equal K");
        let mut out = Vec::with_capacity(self.data.len());
        for &p in perm {
            out.extend_from_slice(self.row(p));
        }
        Stack { k: self.k, l: self.l, data: out }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Stack {
        Stack { k: self.k, l: self.l, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Stack, f: impl Fn(f64, f64) -> f64) -> Result<Stack> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Stack { k: self.k, l: self.l, data })
    }

    pub fn add(&self, other: &Stack) -> Result<Stack> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Stack) -> Result<Stack> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Stack {
        self.map(|v| c * v)
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Stack) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dist_sq(&self, other: &Stack) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Column-wise mean across rows, i.e. one row of `P x`.
    pub fn column_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.l];
        for row in self.rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv = 1.0 / self.k as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

/// The mixture mean `s_bar = y / K`, implicitly stacked `K` times.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanStack {
    k: usize,
    mean: Vec<f64>,
}

impl MeanStack {
    /// Builds the mean stack of a mixture `y` for `k` sources.
    pub fn from_mixture(y: &[f64], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 sources, got {k}")));
        }
        if y.is_empty() {
            return Err(Error::shape("empty mixture"));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mixture sample {i}")));
        }
        let inv = 1.0 / k as f64;
        Ok(Self { k, mean: y.iter().map(|v| v * inv).collect() })
    }

    pub fn from_mean(mean: Vec<f64>, k: usize) -> Self {
        Self { k, mean }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.mean.len()
    }

    /// The row `s_bar`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// The mixture `y = K s_bar`.
    pub fn mixture(&self) -> Vec<f64> {
        let k = self.k as f64;
        self.mean.iter().map(|v| v * k).collect()
    }

    pub fn to_stack(&self) -> Stack {
        let mut data = Vec::with_capacity(self.k * self.mean.len());
        for _ in 0..self.k {
            data.extend_from_slice(&self.mean);
        }
        Stack { k: self.k, l: self.mean.len(), data }
    }

    /// Largest deviation between the column mean of `x` and `s_bar`, relative
    /// to the peak magnitude of `s_bar` (absolute when the mixture is silent).
    pub fn consistency_error(&self, x: &Stack) -> f64 {
        let m = x.column_mean();
        let peak = self.mean.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let dev = m.iter().zip(&self.mean).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        if peak > 0.0 {
            dev / peak
        } else {
            dev
        }
    }
}

/// Sums the rows of a source stack into the mixture `y`.
pub fn mix(s: &Stack) -> Result<Vec<f64>> {
    if let Some(i) = s.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "source {} sample {}",
            i / s.l(),
            i % s.l()
        )));
    }
    let mut y = vec![0.0; s.l()];
    for row in s.rows() {
        for (acc, &v) in y.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(y)
}

/// `P x`: every row replaced by the column mean.
pub fn project_mean(x: &Stack) -> Stack {
    MeanStack::from_mean(x.column_mean(), x.k()).to_stack()
}

/// `P_perp x`: the column mean subtracted from every row.
pub fn project_perp(x: &Stack) -> Stack {
    let mut out = x.clone();
    project_perp_in_place(&mut out);
    out
}

pub fn project_perp_in_place(x: &mut Stack) {
    let mean = x.column_mean();
    let l = x.l();
    for row in x.as_mut_slice().chunks_exact_mut(l) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &Stack, b: &Stack) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn mix_examples() {
        let s = Stack::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]).unwrap();
        assert_eq!(mix(&s).unwrap(), vec![4.0, 4.0, 4.0]);
        assert_eq!(mix(&Stack::zeros(3, 5)).unwrap(), vec![0.0; 5]);

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rows: Vec<Vec<f64>> =
            (0..2).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let s = Stack::from_rows(&rows).unwrap();
        let y = mix(&s).unwrap();
        for n in 0..64 {
            let mut acc = 0.0;
            for r in &rows {
                acc += r[n];
            }
            assert_eq!(y[n], acc);
        }
        let ms = MeanStack::from_mixture(&y, 2).unwrap();
        assert_eq!(project_mean(&s).as_slice(), ms.to_stack().as_slice());
    }

    #[test]
    fn mix_rejects_non_finite() {
        let s = Stack::from_rows(&[vec![1.0, f64::NAN], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(mix(&s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn projector_examples() {
        let x = Stack::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(project_mean(&x).as_slice(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(project_perp(&x).as_slice(), &[1.0, -1.0, -1.0, 1.0]);

        let x = Stack::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(project_mean(&x).as_slice(), &[2.0, 4.0, 2.0, 4.0, 2.0, 4.0]);

        let c = Stack::from_rows(&[vec![0.3, -1.0], vec![0.3, -1.0]]).unwrap();
        assert!(project_perp(&c).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        assert!(Stack::new(2, 3, vec![0.0; 5]).is_err());
        assert!(Stack::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(MeanStack::from_mixture(&[1.0], 1).is_err());
    }

    fn stack_strategy() -> impl Strategy<Value = Stack> {
        (2usize..6, 1usize..24).prop_flat_map(|(k, l)| {
            prop::collection::vec(-1.0f64..1.0, k * l)
                .prop_map(move |d| Stack::new(k, l, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn projector_algebra(x in stack_strategy()) {
            let p = project_mean(&x);
            let q = project_perp(&x);
            prop_assert!(max_abs_diff(&p.add(&q).unwrap(), &x) <= 1e-12);
            prop_assert!(max_abs_diff(&project_mean(&p), &p) <= 1e-12);
            prop_assert!(max_abs_diff(&project_perp(&q), &q) <= 1e-12);
            prop_assert!(project_mean(&q).as_slice().iter().all(|v| v.abs() <= 1e-12));
            prop_assert!(project_perp(&p).as_slice().iter().all(|v| v.abs() <= 1e-12));
            prop_assert!(mix(&q).unwrap().iter().all(|v| v.abs() <= 1e-10));
        }

        #[test]
        fn projectors_are_equivariant(x in stack_strategy(), seed in any::<u64>()) {
            let mut perm: Vec<usize> = (0..x.k()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let lhs = project_perp(&x.permute_rows(&perm));
            let rhs = project_perp(&x).permute_rows(&perm);
            prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-12);
            let lhs = project_mean(&x.permute_rows(&perm));
            prop_assert!(max_abs_diff(&lhs, &project_mean(&x)) <= 1e-12);
        }
    }
}
