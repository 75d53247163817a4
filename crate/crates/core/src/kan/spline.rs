//! B-spline edge functions.
//!
//! An edge computes `base_weight * silu(x) + spline_weight * sum_k c_k B_k(x)`.
//! The spline argument is clamped to the grid; the silu branch sees the raw input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{silu, silu_derivative, Scalar};

/// Highest spline order supported by the fixed-size basis scratch arrays.
pub const MAX_ORDER: usize = 7;

type Basis<T> = [T; MAX_ORDER + 1];

/// Nonzero basis values (and their x-derivatives) at one point.
#[derive(Clone, Copy, Debug)]
pub struct BasisEval<T> {
    /// Index of the first nonzero basis function.
    pub first: usize,
    pub values: Basis<T>,
    pub derivs: Basis<T>,
    /// False when the input was clamped, in which case the spline derivative is zero.
    pub inside: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EdgeRepr<T>", into = "EdgeRepr<T>", bound = "T: Scalar")]
pub struct SplineEdge<T: Scalar> {
    grid: Vec<T>,
    order: usize,
    pub coefficients: Vec<T>,
    pub base_weight: T,
    pub spline_weight: T,
    knots: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct EdgeRepr<T: Scalar> {
    grid: Vec<T>,
    order: usize,
    coefficients: Vec<T>,
    base_weight: T,
    spline_weight: T,
}

impl<T: Scalar> TryFrom<EdgeRepr<T>> for SplineEdge<T> {
    type Error = Error;

    fn try_from(r: EdgeRepr<T>) -> Result<Self> {
        let mut edge = SplineEdge::new(r.grid, r.order)?;
        if r.coefficients.len() != edge.coefficients.len() {
            return Err(Error::domain(format!(
                "edge has {} coefficients, grid needs {}",
                r.coefficients.len(),
                edge.coefficients.len()
            )));
        }
        edge.coefficients = r.coefficients;
        edge.base_weight = r.base_weight;
        edge.spline_weight = r.spline_weight;
        Ok(edge)
    }
}

impl<T: Scalar> From<SplineEdge<T>> for EdgeRepr<T> {
    fn from(e: SplineEdge<T>) -> Self {
        EdgeRepr {
            grid: e.grid,
            order: e.order,
            coefficients: e.coefficients,
            base_weight: e.base_weight,
            spline_weight: e.spline_weight,
        }
    }
}

/// `n + 1` evenly spaced points on `[lo, hi]`.
pub fn uniform_grid<T: Scalar>(lo: T, hi: T, intervals: usize) -> Vec<T> {
    let n = T::of_usize(intervals);
    (0..=intervals)
        .map(|i| {
            if i == intervals {
                hi
            } else {
                lo + (hi - lo) * T::of_usize(i) / n
            }
        })
        .collect()
}

impl<T: Scalar> SplineEdge<T> {
    /// Zero-valued edge over `grid` with spline `order` (3 = cubic).
    pub fn new(grid: Vec<T>, order: usize) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return Err(Error::domain(format!("spline order {order} outside 1..={MAX_ORDER}")));
        }
        if grid.len() < 2 {
            return Err(Error::domain("grid needs at least two points"));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::domain("grid must be strictly increasing"));
        }
        let last = grid.len() - 1;
        if grid[0] > -T::one() || grid[last] < T::one() {
            return Err(Error::domain("grid must span [-1, 1]"));
        }
        let left_step = grid[1] - grid[0];
        let right_step = grid[last] - grid[last - 1];
        let mut knots = Vec::with_capacity(grid.len() + 2 * order);
        for i in (1..=order).rev() {
            knots.push(grid[0] - left_step * T::of_usize(i));
        }
        knots.extend_from_slice(&grid);
        for i in 1..=order {
            knots.push(grid[last] + right_step * T::of_usize(i));
        }
        let n_coef = last + order;
        Ok(SplineEdge {
            grid,
            order,
            coefficients: vec![T::zero(); n_coef],
            base_weight: T::zero(),
            spline_weight: T::one(),
            knots,
        })
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of trainable scalars: coefficients plus the two weights.
    pub fn param_count(&self) -> usize {
        self.coefficients.len() + 2
    }

    pub fn domain(&self) -> (T, T) {
        (self.grid[0], self.grid[self.grid.len() - 1])
    }

    fn span(&self, x: T) -> usize {
        let k = self.order;
        let hi = self.knots.len() - k - 2;
        // knots[k..=hi+1] is the base grid; find i with knots[i] <= x < knots[i+1]
        if x >= self.knots[hi] {
            return hi;
        }
        let (mut lo, mut up) = (k, hi);
        while up - lo > 1 {
            let mid = (lo + up) / 2;
            if x < self.knots[mid] {
                up = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero B-spline basis values and derivatives at `x` (clamped to the grid).
    pub fn basis(&self, x: T) -> BasisEval<T> {
        let (lo, hi) = self.domain();
        let inside = x >= lo && x <= hi;
        let xc = if x < lo {
            lo
        } else if x > hi {
            hi
        } else {
            x
        };
        let p = self.order;
        let i = self.span(xc);
        let u = &self.knots;
        let mut n: Basis<T> = [T::zero(); MAX_ORDER + 1];
        let mut low: Basis<T> = [T::zero(); MAX_ORDER + 1];
        let mut left: Basis<T> = [T::zero(); MAX_ORDER + 1];
        let mut right: Basis<T> = [T::zero(); MAX_ORDER + 1];
        n[0] = T::one();
        for j in 1..=p {
            if j == p {
                low[..p].copy_from_slice(&n[..p]);
            }
            left[j] = xc - u[i + 1 - j];
            right[j] = u[i + j] - xc;
            let mut saved = T::zero();
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let first = i - p;
        let mut d: Basis<T> = [T::zero(); MAX_ORDER + 1];
        let pf = T::of_usize(p);
        for r in 0..=p {
            let m = first + r;
            let mut v = T::zero();
            if r >= 1 {
                v = v + low[r - 1] / (u[m + p] - u[m]);
            }
            if r < p {
                v = v - low[r] / (u[m + p + 1] - u[m + 1]);
            }
            d[r] = pf * v;
        }
        BasisEval {
            first,
            values: n,
            derivs: d,
            inside,
        }
    }

    /// `sum_k c_k B_k(x)` for a precomputed basis.
    #[inline]
    pub fn spline_sum(&self, b: &BasisEval<T>) -> T {
        let c = &self.coefficients[b.first..=b.first + self.order];
        c.iter().zip(&b.values).map(|(&c, &v)| c * v).sum()
    }

    #[inline]
    fn spline_slope(&self, b: &BasisEval<T>) -> T {
        if !b.inside {
            return T::zero();
        }
        let c = &self.coefficients[b.first..=b.first + self.order];
        c.iter().zip(&b.derivs).map(|(&c, &v)| c * v).sum()
    }

    /// Edge value at `x`.
    pub fn eval(&self, x: T) -> T {
        let b = self.basis(x);
        self.base_weight * silu(x) + self.spline_weight * self.spline_sum(&b)
    }

    /// Edge value together with `d/dx`, the spline sum, and the basis used.
    pub fn eval_full(&self, x: T) -> EdgeEval<T> {
        let basis = self.basis(x);
        let spline = self.spline_sum(&basis);
        let value = self.base_weight * silu(x) + self.spline_weight * spline;
        let slope =
            self.base_weight * silu_derivative(x) + self.spline_weight * self.spline_slope(&basis);
        EdgeEval {
            value,
            slope,
            spline,
            basis,
        }
    }

    /// Least-squares fit of the spline coefficients to `f` over a dense sample,
    /// with `base_weight = 0` and `spline_weight = 1`.
    pub fn fit_to<F: Fn(T) -> T>(&mut self, f: F, samples: usize) -> Result<()> {
        let (lo, hi) = self.domain();
        let xs = uniform_grid(lo, hi, samples.max(self.coefficients.len()) - 1);
        let nc = self.coefficients.len();
        let mut ata = vec![0.0f64; nc * nc];
        let mut atb = vec![0.0f64; nc];
        for &x in &xs {
            let b = self.basis(x);
            let y = f(x).as_f64();
            for r in 0..=self.order {
                let row = b.first + r;
                let vr = b.values[r].as_f64();
                atb[row] += vr * y;
                for c in 0..=self.order {
                    ata[row * nc + b.first + c] += vr * b.values[c].as_f64();
                }
            }
        }
        let sol = crate::linalg::solve_spd(&mut ata, &mut atb, nc)
            .ok_or_else(|| Error::domain("singular spline fit"))?;
        self.coefficients = sol.into_iter().map(T::of).collect();
        self.base_weight = T::zero();
        self.spline_weight = T::one();
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeEval<T> {
    pub value: T,
    pub slope: T,
    pub spline: T,
    pub basis: BasisEval<T>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic() -> SplineEdge<f64> {
        SplineEdge::new(uniform_grid(-1.0, 1.0, 5), 3).unwrap()
    }

    // Cox-de Boor recursion, independent of the triangular evaluation above.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, x);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - x) / d2 * cox_de_boor(knots, i + 1, p - 1, x);
        }
        v
    }

    #[test]
    fn coefficient_count_matches_intervals_plus_order() {
        let e = cubic();
        assert_eq!(e.coefficients.len(), 8);
        assert_eq!(e.knots.len(), 6 + 6);
    }

    #[test]
    fn zero_parameters_give_zero() {
        let mut e = cubic();
        e.spline_weight = 1.0;
        for x in [-3.0, -1.0, 0.0, 0.37, 1.0, 4.0] {
            assert_eq!(e.eval(x), 0.0);
        }
    }

    #[test]
    fn silu_at_origin() {
        let mut e = cubic();
        e.base_weight = 1.0;
        e.spline_weight = 0.0;
        assert_eq!(e.eval(0.0), 0.0);
    }

    #[test]
    fn partition_of_unity_at_zero() {
        let mut e = cubic();
        e.coefficients = vec![1.0; 8];
        assert!((e.eval(0.0) - 1.0).abs() < 1e-12);
        // direct basis summation oracle
        let total: f64 = (0..8).map(|i| cox_de_boor(&e.knots, i, 3, 0.0)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn basis_matches_cox_de_boor() {
        let e = cubic();
        for k in 0..=40 {
            let x = -1.0 + 2.0 * k as f64 / 40.0;
            let b = e.basis(x);
            for idx in 0..8 {
                let expected = cox_de_boor(&e.knots, idx, 3, x);
                let got = if idx >= b.first && idx <= b.first + 3 { b.values[idx - b.first] } else { 0.0 };
                assert!((got - expected).abs() < 1e-12, "x={x} idx={idx} {got} vs {expected}");
            }
        }
    }

    #[test]
    fn slope_matches_finite_difference() {
        let mut e = cubic();
        e.coefficients = vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.2, -0.1];
        e.base_weight = 0.6;
        e.spline_weight = 1.3;
        let h = 1e-6;
        for x in [-0.93, -0.5, -0.11, 0.25, 0.61, 0.88] {
            let fd = (e.eval(x + h) - e.eval(x - h)) / (2.0 * h);
            let an = e.eval_full(x).slope;
            assert!((fd - an).abs() < 1e-6, "x={x}: {fd} vs {an}");
        }
    }

    #[test]
    fn clamping_is_continuous_at_endpoints() {
        let mut e = cubic();
        e.coefficients = vec![0.9, -0.4, 0.3, 0.8, -0.2, 0.5, -0.6, 0.7];
        e.base_weight = 0.0;
        for end in [-1.0f64, 1.0] {
            let inside = e.eval(end - end.signum() * 1e-12);
            let at = e.eval(end);
            let outside = e.eval(end + end.signum() * 1e-12);
            assert!((inside - at).abs() < 1e-9);
            assert!((outside - at).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(SplineEdge::<f64>::new(vec![-1.0, 0.0, 0.0, 1.0], 3).is_err());
        assert!(SplineEdge::<f64>::new(vec![-0.5, 1.0], 3).is_err());
        assert!(SplineEdge::<f64>::new(uniform_grid(-1.0, 1.0, 5), 0).is_err());
    }

    #[test]
    fn least_squares_fit_reproduces_quadratic() {
        let mut e = cubic();
        e.fit_to(|x| x * x, 200).unwrap();
        for k in 0..=20 {
            let x = -1.0 + k as f64 / 10.0;
            assert!((e.eval(x) - x * x).abs() < 1e-10);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let mut e: SplineEdge<f32> = SplineEdge::new(uniform_grid(-1.0, 1.0, 5), 3).unwrap();
        e.coefficients = vec![1.0; 8];
        assert!((e.eval(0.3) - 1.0).abs() < 1e-6);
    }
}
