//! Workload matrices, factorizations, datasets and histograms, plus the
//! exact (non-private) evaluation of quadratic forms and linear queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// A real workload `W`. Square for quadratic forms.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadMatrix {
    entries: Matrix,
    symmetric: bool,
}

impl WorkloadMatrix {
    pub fn new(entries: Matrix) -> Result<Self> {
        if !entries.is_finite() {
            return Err(Error::InvalidArgument("workload has non-finite entries".into()));
        }
        let symmetric = entries.is_symmetric();
        Ok(Self { entries, symmetric })
    }

    pub fn from_fn(k: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(Matrix::from_fn(k, k, f))
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn into_entries(self) -> Matrix {
        self.entries
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Number of columns (the input domain size).
    pub fn k(&self) -> usize {
        self.entries.cols()
    }

    pub fn inf_norm(&self) -> f64 {
        self.entries.inf_norm()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let d = self.entries.rows().min(self.entries.cols());
        (0..d).map(|i| self.entries[(i, i)]).collect()
    }

    /// Shifts every entry by `-c` with `c = (max + min) / 2`, centring the
    /// entry range on zero. Since `hᵀ𝟏𝟏ᵀh = 1` the caller adds `c` back to
    /// any quadratic-form estimate.
    pub fn mean_shift(&self) -> (WorkloadMatrix, f64) {
        let (lo, hi) = self
            .entries
            .as_slice()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let c = (hi + lo) / 2.0;
        let shifted = Matrix::from_fn(self.entries.rows(), self.entries.cols(), |i, j| {
            self.entries[(i, j)] - c
        });
        (
            WorkloadMatrix {
                entries: shifted,
                symmetric: self.symmetric,
            },
            c,
        )
    }
}

/// `‖W‖∞`, the largest absolute entry.
pub fn inf_norm(w: &Matrix) -> f64 {
    w.inf_norm()
}

/// `‖M‖₁→₂`, the largest column l2 norm.
pub fn one_to_two_norm(m: &Matrix) -> f64 {
    m.one_to_two_norm()
}

/// A pair `(L, R)` of `ℓ×k` matrices with `LᵀR ≈ W`, together with the
/// declared entrywise slack `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    l: Matrix,
    r: Matrix,
    alpha: f64,
}

impl Factorization {
    pub fn new(l: Matrix, r: Matrix, alpha: f64) -> Result<Self> {
        if l.shape() != r.shape() {
            return Err(Error::DimensionMismatch(format!(
                "L is {:?} but R is {:?}",
                l.shape(),
                r.shape()
            )));
        }
        if l.rows() == 0 || l.cols() == 0 {
            return Err(Error::InvalidArgument("factorization needs ℓ ≥ 1 and k ≥ 1".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and ≥ 0, got {alpha}"
            )));
        }
        if !l.is_finite() || !r.is_finite() {
            return Err(Error::InvalidArgument("factorization has non-finite entries".into()));
        }
        Ok(Self { l, r, alpha })
    }

    pub fn exact(l: Matrix, r: Matrix) -> Result<Self> {
        Self::new(l, r, 0.0)
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of rows `ℓ`.
    pub fn rank(&self) -> usize {
        self.l.rows()
    }

    /// Domain size `k`.
    pub fn k(&self) -> usize {
        self.l.cols()
    }

    /// `LᵀR`.
    pub fn product(&self) -> Matrix {
        self.l.tr_matmul(&self.r).expect("shapes checked at construction")
    }

    pub fn norm_product(&self) -> f64 {
        self.l.one_to_two_norm() * self.r.one_to_two_norm()
    }

    /// Common column bound `C = max(‖L‖₁→₂, ‖R‖₁→₂)`; equals
    /// `sqrt(norm_product)` once balanced.
    pub fn column_bound(&self) -> f64 {
        self.l.one_to_two_norm().max(self.r.one_to_two_norm())
    }

    pub fn l_column(&self, b: usize) -> Vec<f64> {
        self.l.column(b)
    }

    pub fn r_column(&self, b: usize) -> Vec<f64> {
        self.r.column(b)
    }

    /// Swaps the roles of `L` and `R`, factorizing `Wᵀ`.
    pub fn transposed(&self) -> Factorization {
        Factorization {
            l: self.r.clone(),
            r: self.l.clone(),
            alpha: self.alpha,
        }
    }

    /// Drops domain columns past `k`; used after padding a domain.
    pub fn restrict_domain(&self, k: usize) -> Factorization {
        Factorization {
            l: self.l.truncate_cols(k),
            r: self.r.truncate_cols(k),
            alpha: self.alpha,
        }
    }
}

/// `‖LᵀR − W‖∞`.
pub fn factorization_residual(f: &Factorization, w: &WorkloadMatrix) -> Result<f64> {
    let target = w.entries();
    if target.shape() != (f.k(), f.k()) {
        return Err(Error::DimensionMismatch(format!(
            "factorization is over k={} but workload is {:?}",
            f.k(),
            target.shape()
        )));
    }
    Ok(f.product().sub(target)?.inf_norm())
}

/// Rescales to `(cL, R/c)` so both 1→2 norms equal `sqrt(‖L‖₁→₂‖R‖₁→₂)`.
pub fn fact_balance(f: &Factorization) -> Result<Factorization> {
    let nl = f.l.one_to_two_norm();
    let nr = f.r.one_to_two_norm();
    if nl == 0.0 || nr == 0.0 {
        return Err(Error::InvalidArgument("cannot balance a zero factor".into()));
    }
    let c = (nr / nl).sqrt();
    Factorization::new(f.l.scale(c), f.r.scale(1.0 / c), f.alpha)
}

/// Stacks rows so that `LᵀR = A + B`.
pub fn fact_sum(a: &Factorization, b: &Factorization) -> Result<Factorization> {
    if a.k() != b.k() {
        return Err(Error::DimensionMismatch(format!(
            "cannot add factorizations over k={} and k={}",
            a.k(),
            b.k()
        )));
    }
    Factorization::new(a.l.vstack(&b.l)?, a.r.vstack(&b.r)?, a.alpha + b.alpha)
}

/// Kronecker product so that `LᵀR = A ⊗ B`. Column `(y, z)` of the result
/// is `y·k_B + z`.
pub fn fact_kron(a: &Factorization, b: &Factorization) -> Result<Factorization> {
    let alpha = if a.alpha == 0.0 && b.alpha == 0.0 {
        0.0
    } else {
        a.alpha * b.product().inf_norm() + b.alpha * a.product().inf_norm() + a.alpha * b.alpha
    };
    Factorization::new(a.l.kron(&b.l), a.r.kron(&b.r), alpha)
}

/// Multiplies `L` by `c`, leaving `R` unchanged.
pub fn fact_scale(f: &Factorization, c: f64) -> Result<Factorization> {
    Factorization::new(f.l.scale(c), f.r.clone(), c.abs() * f.alpha)
}

/// Factorization of the symmetric part `(LᵀR + RᵀL)/2`, obtained by stacking
/// `[L; R]/√2` against `[R; L]/√2`. Column norms never grow past the larger
/// of the two original bounds.
pub fn fact_symmetrize(f: &Factorization) -> Result<Factorization> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Factorization::new(f.l.vstack(&f.r)?.scale(s), f.r.vstack(&f.l)?.scale(s), f.alpha)
}

/// User inputs `x ∈ [k]ⁿ`, stored one-based as in `{1, …, k}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    values: Vec<usize>,
    k: usize,
}

impl Dataset {
    pub fn new(values: Vec<usize>, k: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("dataset needs n ≥ 1".into()));
        }
        if let Some(&bad) = values.iter().find(|&&v| v == 0 || v > k) {
            return Err(Error::InvalidArgument(format!("value {bad} outside [1, {k}]")));
        }
        Ok(Self { values, k })
    }

    /// Builds from zero-based symbols in `0..k`.
    pub fn from_symbols(symbols: impl IntoIterator<Item = usize>, k: usize) -> Result<Self> {
        Self::new(symbols.into_iter().map(|s| s + 1).collect(), k)
    }

    pub fn constant(value: usize, n: usize, k: usize) -> Result<Self> {
        Self::new(vec![value; n], k)
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    /// Zero-based symbols.
    pub fn symbols(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().map(|v| v - 1)
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Concatenation `x ∪ y`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.k != other.k {
            return Err(Error::DimensionMismatch("datasets over different domains".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Dataset::new(values, self.k)
    }
}

/// Normalized histogram `h ∈ simplex(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    weights: Vec<f64>,
}

impl Histogram {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("histogram weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("histogram sums to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn point_mass(k: usize, b: usize) -> Result<Self> {
        if b == 0 || b > k {
            return Err(Error::InvalidArgument(format!("point mass at {b} outside [1, {k}]")));
        }
        let mut w = vec![0.0; k];
        w[b - 1] = 1.0;
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }
}

pub fn histogram_of(data: &Dataset) -> Histogram {
    let mut counts = vec![0usize; data.k()];
    for s in data.symbols() {
        counts[s] += 1;
    }
    let n = data.n() as f64;
    Histogram {
        weights: counts.into_iter().map(|c| c as f64 / n).collect(),
    }
}

/// `hᵀWh`, accumulated row by row.
pub fn quadratic_form_exact(w: &Matrix, h: &Histogram) -> Result<f64> {
    if w.shape() != (h.k(), h.k()) {
        return Err(Error::DimensionMismatch(format!(
            "workload {:?} vs histogram of length {}",
            w.shape(),
            h.k()
        )));
    }
    let hw = h.weights();
    let mut total = 0.0;
    for (i, &hi) in hw.iter().enumerate() {
        if hi != 0.0 {
            total += hi * dot(w.row(i), hw);
        }
    }
    Ok(total)
}

/// `Wh`.
pub fn linear_queries_exact(w: &Matrix, h: &Histogram) -> Result<Vec<f64>> {
    w.matvec(h.weights())
}
