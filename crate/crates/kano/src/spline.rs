//! B-spline bases and the learnable univariate spline-plus-SiLU function.
//!
//! Basis evaluation uses the standard Cox-de Boor triangular scheme over a
//! uniform knot grid extended by `degree` knots on each side of the base
//! interval. On the base interval the basis is a partition of unity.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{KanoError, Result};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// d/dx SiLU(x)
pub fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Uniform knot grid over `[lo, hi]` with `intervals` base intervals,
/// extended by `degree` knots per side. Yields `intervals + degree` basis
/// functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub intervals: usize,
    pub degree: usize,
}

impl GridSpec {
    pub fn uniform(lo: f64, hi: f64, intervals: usize, degree: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(KanoError::Grid(format!("bad base interval [{lo}, {hi}]")));
        }
        if intervals == 0 {
            return Err(KanoError::Grid("need at least one interval".into()));
        }
        Ok(GridSpec {
            lo,
            hi,
            intervals,
            degree,
        })
    }

    /// Default grid: `[-1, 1]`, 5 intervals, cubic.
    pub fn default_unit() -> Self {
        GridSpec {
            lo: -1.0,
            hi: 1.0,
            intervals: 5,
            degree: 3,
        }
    }

    pub fn n_basis(&self) -> usize {
        self.intervals + self.degree
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    /// Knot `t_i` of the extended grid, `i` in `0..intervals + 2*degree + 1`.
    pub fn knot(&self, i: isize) -> f64 {
        self.lo + (i - self.degree as isize) as f64 * self.step()
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    /// Base-interval index of a clamped x, in `0..intervals`.
    fn interval_index(&self, xc: f64) -> usize {
        let j = ((xc - self.lo) / self.step()).floor() as isize;
        (j.max(0) as usize).min(self.intervals - 1)
    }

    /// All `n_basis()` basis values at `x` (clamped into the base interval).
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_basis()];
        self.basis_into(x, &mut out);
        out
    }

    pub fn basis_into(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_basis());
        out.iter_mut().for_each(|v| *v = 0.0);
        let xc = self.clamp(x);
        let j = self.interval_index(xc);
        if self.degree == 3 {
            let (v, _) = self.local_cubic(xc, j);
            out[j..j + 4].copy_from_slice(&v);
            return;
        }
        let local = self.local_basis(xc, j, self.degree);
        for (k, v) in local.iter().enumerate() {
            out[j + k] = *v;
        }
    }

    /// Closed-form values and x-derivatives of the four nonzero cubic basis
    /// functions on base interval `j` of a uniform grid, as polynomials in
    /// the local coordinate `t = (x - t_j) / h`.
    #[inline]
    fn local_cubic(&self, xc: f64, j: usize) -> ([f64; 4], [f64; 4]) {
        let h = self.step();
        let t = (xc - (self.lo + j as f64 * h)) / h;
        let s = 1.0 - t;
        let t2 = t * t;
        let s2 = s * s;
        let vals = [
            s2 * s * (1.0 / 6.0),
            (3.0 * t2 * t - 6.0 * t2 + 4.0) * (1.0 / 6.0),
            (-3.0 * t2 * t + 3.0 * t2 + 3.0 * t + 1.0) * (1.0 / 6.0),
            t2 * t * (1.0 / 6.0),
        ];
        let inv_h = 1.0 / h;
        let ders = [
            -0.5 * s2 * inv_h,
            (1.5 * t2 - 2.0 * t) * inv_h,
            (-1.5 * t2 + t + 0.5) * inv_h,
            0.5 * t2 * inv_h,
        ];
        (vals, ders)
    }

    /// Basis values and derivatives w.r.t. x. The derivative is zero for
    /// inputs strictly outside the base interval (clamp convention: boundary
    /// counts as inside).
    pub fn basis_and_deriv_into(&self, x: f64, vals: &mut [f64], derivs: &mut [f64]) {
        self.basis_into(x, vals);
        derivs.iter_mut().for_each(|v| *v = 0.0);
        if x < self.lo || x > self.hi {
            return;
        }
        let p = self.degree;
        if p == 0 {
            return;
        }
        let j = self.interval_index(x);
        if p == 3 {
            let (_, d) = self.local_cubic(x, j);
            derivs[j..j + 4].copy_from_slice(&d);
            return;
        }
        let span = j as isize + p as isize;
        // degree p-1 basis on the same span: functions span-p+1 ..= span
        let lower = self.local_basis(x, j, p - 1);
        let np1 = |i: isize| -> f64 {
            let k = i - (span - p as isize + 1);
            if (0..p as isize).contains(&k) {
                lower[k as usize]
            } else {
                0.0
            }
        };
        let pf = p as f64;
        for k in 0..=p {
            let i = j as isize + k as isize; // global function index
            let d1 = self.knot(i + p as isize) - self.knot(i);
            let d2 = self.knot(i + p as isize + 1) - self.knot(i + 1);
            derivs[j + k] = pf * (np1(i) / d1 - np1(i + 1) / d2);
        }
    }

    pub fn basis_and_deriv(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let mut v = vec![0.0; self.n_basis()];
        let mut d = vec![0.0; self.n_basis()];
        self.basis_and_deriv_into(x, &mut v, &mut d);
        (v, d)
    }

    /// Nonzero basis values of the given degree at `xc` (already clamped),
    /// for base interval `j`. Returns `deg + 1` values for global functions
    /// `j ..= j + deg` of that degree (indexed against this grid's knots).
    fn local_basis(&self, xc: f64, j: usize, deg: usize) -> Vec<f64> {
        // Knot span in the extended knot vector: t_span <= x < t_span+1.
        // For degree `deg` evaluated against the same knot vector the
        // nonzero functions are span-deg ..= span with span = j + self.degree.
        let span = j as isize + self.degree as isize;
        let mut n = vec![0.0; deg + 1];
        n[0] = 1.0;
        let mut left = vec![0.0; deg + 1];
        let mut right = vec![0.0; deg + 1];
        for r in 1..=deg {
            left[r] = xc - self.knot(span + 1 - r as isize);
            right[r] = self.knot(span + r as isize) - xc;
            let mut saved = 0.0;
            for k in 0..r {
                let tmp = n[k] / (right[k + 1] + left[r - k]);
                n[k] = saved + right[k + 1] * tmp;
                saved = left[r - k] * tmp;
            }
            n[r] = saved;
        }
        // n[k] corresponds to function span - deg + k. Shift so the caller
        // sees functions j ..= j + deg of THIS degree: for deg == degree the
        // first nonzero is span - degree = j. For lower degrees the caller
        // re-indexes explicitly.
        n
    }
}

/// General Cox-de Boor evaluation over an arbitrary knot vector. Returns
/// `knots.len() - degree - 1` basis values at `x`.
pub fn bspline_basis(x: f64, knots: &[f64], degree: usize) -> Result<Vec<f64>> {
    if knots.len() < degree + 2 {
        return Err(KanoError::Grid("too few knots".into()));
    }
    for w in knots.windows(2) {
        if !(w[1] > w[0]) {
            return Err(KanoError::Grid(format!(
                "knots must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let n = knots.len() - degree - 1;
    let mut prev = vec![0.0; knots.len() - 1];
    // degree 0: right-continuous indicator; last interval closed on the right
    for (i, v) in prev.iter_mut().enumerate() {
        let last = i == knots.len() - 2;
        if (x >= knots[i] && x < knots[i + 1]) || (last && x == knots[i + 1]) {
            *v = 1.0;
        }
    }
    for p in 1..=degree {
        let mut cur = vec![0.0; knots.len() - 1 - p];
        for (i, v) in cur.iter_mut().enumerate() {
            let a = (x - knots[i]) / (knots[i + p] - knots[i]);
            let b = (knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1]);
            *v = a * prev[i] + b * prev[i + 1];
        }
        prev = cur;
    }
    prev.truncate(n);
    Ok(prev)
}

/// One learnable edge function: `w_b * SiLU(x) + w_s * sum_i c_i B_i(clamp x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineFunction {
    pub grid: GridSpec,
    pub coef: Array1<f64>,
    pub w_b: f64,
    pub w_s: f64,
}

impl SplineFunction {
    pub fn new(grid: GridSpec, coef: Array1<f64>, w_b: f64, w_s: f64) -> Result<Self> {
        if coef.len() != grid.n_basis() {
            return Err(KanoError::Invalid(format!(
                "coefficient count {} != {} (intervals + degree)",
                coef.len(),
                grid.n_basis()
            )));
        }
        if !(coef.iter().all(|c| c.is_finite()) && w_b.is_finite() && w_s.is_finite()) {
            return Err(KanoError::Invalid("non-finite spline parameter".into()));
        }
        Ok(SplineFunction {
            grid,
            coef,
            w_b,
            w_s,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let basis = self.grid.basis(x);
        let spline: f64 = basis
            .iter()
            .zip(self.coef.iter())
            .map(|(b, c)| b * c)
            .sum();
        self.w_b * silu(x) + self.w_s * spline
    }
}

/// Basis values for every element of an `(n, d)` matrix, flattened to
/// `(n, d * n_basis)` with the layout `col = i * n_basis + k` for input
/// column `i` and basis index `k`. Also returns the per-element derivative
/// in the same layout.
pub fn basis_expand(x: &Array2<f64>, grid: &GridSpec) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let nb = grid.n_basis();
    let mut vals = Array2::zeros((n, d * nb));
    let mut ders = Array2::zeros((n, d * nb));
    if grid.degree == 3 {
        for r in 0..n {
            let mut vrow = vals.row_mut(r);
            let vs = vrow.as_slice_mut().unwrap();
            let mut drow = ders.row_mut(r);
            let ds = drow.as_slice_mut().unwrap();
            for i in 0..d {
                let xe = x[[r, i]];
                let xc = grid.clamp(xe);
                let j = grid.interval_index(xc);
                let (v, dv) = grid.local_cubic(xc, j);
                let inside = xe >= grid.lo && xe <= grid.hi;
                let off = i * nb + j;
                vs[off..off + 4].copy_from_slice(&v);
                if inside {
                    ds[off..off + 4].copy_from_slice(&dv);
                }
            }
        }
        return (vals, ders);
    }
    let mut vbuf = vec![0.0; nb];
    let mut dbuf = vec![0.0; nb];
    for r in 0..n {
        for i in 0..d {
            grid.basis_and_deriv_into(x[[r, i]], &mut vbuf, &mut dbuf);
            for k in 0..nb {
                vals[[r, i * nb + k]] = vbuf[k];
                ders[[r, i * nb + k]] = dbuf[k];
            }
        }
    }
    (vals, ders)
}
