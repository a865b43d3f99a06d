//! Explicit factorizations for the built-in kernels, the random-projection
//! rank restriction, and discretization of continuous Lipschitz kernels.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::workload::{fact_balance, fact_kron, fact_scale, fact_sum, fact_symmetrize, Factorization, WorkloadMatrix};

/// `L = R = I_k`.
pub fn identity_fact(k: usize) -> Result<Factorization> {
    check_size(k, 1)?;
    Factorization::exact(Matrix::identity(k), Matrix::identity(k))
}

/// `L = R = 𝟏ᵀ`, a single all-ones row.
pub fn all_ones_fact(k: usize) -> Result<Factorization> {
    check_size(k, 1)?;
    Factorization::exact(Matrix::filled(1, k, 1.0), Matrix::filled(1, k, 1.0))
}

/// `W[i][j] = 𝟏[i ≠ j]` as `𝟏𝟏ᵀ − I`; norm product at most 2.
pub fn gini_diversity_fact(k: usize) -> Result<Factorization> {
    check_size(k, 2)?;
    let f = fact_sum(&all_ones_fact(k)?, &fact_scale(&identity_fact(k)?, -1.0)?)?;
    fact_balance(&f)
}

pub fn gini_diversity_target(k: usize) -> WorkloadMatrix {
    WorkloadMatrix::from_fn(k, |i, j| if i == j { 0.0 } else { 1.0 }).expect("finite")
}

/// Aligned dyadic intervals `[a·2^s, (a+1)·2^s)` (zero-based, half-open)
/// that fit inside `[0, m)`, largest first.
fn dyadic_intervals(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut size = m.next_power_of_two();
    while size >= 1 {
        let mut start = 0;
        while start + size <= m {
            out.push((start, start + size));
            start += size;
        }
        size /= 2;
    }
    out
}

/// Upper-triangular all-ones `T_m` (`T[i][j] = 𝟏[i ≤ j]`) through the
/// dyadic decomposition of prefixes: rows are dyadic intervals, `L` marks
/// membership of `i` and `R` marks the intervals that tile `{1..j}`.
pub fn prefix_tree_fact(m: usize) -> Result<Factorization> {
    check_size(m, 1)?;
    let intervals = dyadic_intervals(m);
    let row_of = |iv: (usize, usize)| intervals.iter().position(|&x| x == iv).expect("aligned interval");
    let mut l = Matrix::zeros(intervals.len(), m);
    let mut r = Matrix::zeros(intervals.len(), m);
    for (p, &(a, b)) in intervals.iter().enumerate() {
        for i in a..b {
            l[(p, i)] = 1.0;
        }
    }
    for j in 0..m {
        // Prefix [0, j] has length j + 1; one interval per set bit, high first.
        let len = j + 1;
        let mut start = 0;
        for s in (0..usize::BITS).rev() {
            let size = 1usize << s;
            if len & size != 0 {
                r[(row_of((start, start + size)), j)] = 1.0;
                start += size;
            }
        }
    }
    Factorization::exact(l, r)
}

pub fn prefix_tree_target(m: usize) -> WorkloadMatrix {
    WorkloadMatrix::from_fn(m, |i, j| if i <= j { 1.0 } else { 0.0 }).expect("finite")
}

/// `U_m = 2·T_m − 𝟏𝟏ᵀ`: `+1` on and above the diagonal, `−1` below.
pub fn sign_comparison_fact(m: usize) -> Result<Factorization> {
    check_size(m, 1)?;
    let doubled = fact_balance(&fact_scale(&prefix_tree_fact(m)?, 2.0)?)?;
    let f = fact_sum(&doubled, &fact_scale(&all_ones_fact(m)?, -1.0)?)?;
    fact_balance(&f)
}

pub fn sign_comparison_target(m: usize) -> WorkloadMatrix {
    WorkloadMatrix::from_fn(m, |i, j| if i <= j { 1.0 } else { -1.0 }).expect("finite")
}

/// `U_A ⊗ U_B` over the flattened domain `(y, z) ↦ (y−1)·k_B + z`.
///
/// The symmetric part of the product equals the Kendall kernel matrix
/// `sgn(y−y')·sgn(z−z')` off the diagonal, and its diagonal is constantly
/// `+1` where the kernel is `0`. Quadratic forms only see the symmetric
/// part, so `hᵀ(LᵀR)h = hᵀW^f h + 1`.
pub fn kendall_fact(k_a: usize, k_b: usize) -> Result<Factorization> {
    check_size(k_a, 1)?;
    check_size(k_b, 1)?;
    fact_balance(&fact_kron(&sign_comparison_fact(k_a)?, &sign_comparison_fact(k_b)?)?)
}

/// Exact factorization of the Kendall kernel matrix itself:
/// `sym(U_A ⊗ U_B − I)`. The unit diagonal of the symmetric part is
/// removed with an identity block and the result symmetrized, so the
/// product has the zero diagonal `sgn(0)·sgn(0)` even for repeated inputs.
pub fn kendall_kernel_fact(k_a: usize, k_b: usize) -> Result<Factorization> {
    let k = k_a * k_b;
    let shifted = fact_sum(&kendall_fact(k_a, k_b)?, &fact_scale(&identity_fact(k)?, -1.0)?)?;
    fact_symmetrize(&fact_balance(&shifted)?)
}

/// `U_A ⊗ U_B`, the exact target of [`kendall_fact`].
pub fn kendall_product_target(k_a: usize, k_b: usize) -> WorkloadMatrix {
    let u = sign_comparison_target(k_a)
        .into_entries()
        .kron(sign_comparison_target(k_b).entries());
    WorkloadMatrix::new(u).expect("finite")
}

pub fn sgn(x: i64) -> f64 {
    match x.cmp(&0) {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Less => -1.0,
        std::cmp::Ordering::Equal => 0.0,
    }
}

/// Kendall kernel matrix `W^f` on the flattened domain, with `sgn(0) = 0`.
pub fn kendall_kernel_matrix(k_a: usize, k_b: usize) -> WorkloadMatrix {
    WorkloadMatrix::from_fn(k_a * k_b, |p, q| {
        let (y, z) = ((p / k_b) as i64, (p % k_b) as i64);
        let (y2, z2) = ((q / k_b) as i64, (q % k_b) as i64);
        sgn(y - y2) * sgn(z - z2)
    })
    .expect("finite")
}

/// In-order labelled balanced binary search tree on `{1, …, 2^q − 1}`,
/// rooted at `2^{q−1}`.
#[derive(Clone, Copy, Debug)]
pub struct BalancedBst {
    levels: u32,
}

impl BalancedBst {
    /// Smallest tree with at least `k` nodes.
    pub fn covering(k: usize) -> Self {
        let mut levels = 1;
        while (1usize << levels) - 1 < k {
            levels += 1;
        }
        BalancedBst { levels }
    }

    pub fn size(&self) -> usize {
        (1usize << self.levels) - 1
    }

    pub fn root(&self) -> usize {
        1usize << (self.levels - 1)
    }

    /// Root has depth 0, leaves (odd labels) depth `q − 1`.
    pub fn depth(&self, node: usize) -> u32 {
        self.levels - 1 - node.trailing_zeros()
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        if node == self.root() {
            return None;
        }
        let t = node.trailing_zeros();
        let step = 1usize << t;
        Some(if (node >> (t + 1)) & 1 == 1 {
            node - step
        } else {
            node + step
        })
    }

    /// Path from `node` up to the root, inclusive.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut out = vec![node];
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            out.push(p);
            cur = p;
        }
        out
    }
}

/// Factorization of `W^f` for a symmetric `f` on `[k]` (one-based) through a
/// balanced search tree:
/// `R[t][j] = (5/6)^{depth t}·𝟏[t ∈ path(j)]` and
/// `L[t][i] = (6/5)^{depth t}·(f(i, t) − f(i, parent t))` with
/// `f(i, ⊥) = 0`. The sums telescope along root paths, so `LᵀR = W^f` for
/// any `f`; `‖R‖₁→₂² ≤ 36/11` and `‖L‖₁→₂` is `O(Gk)` for `G`-Lipschitz `f`.
///
/// When `k` is not of the form `2^q − 1` the tree is padded and `f` is
/// evaluated at clamped indices; the padded columns are dropped afterwards.
pub fn lipschitz_bst_fact(f: impl Fn(usize, usize) -> f64, k: usize) -> Result<Factorization> {
    check_size(k, 1)?;
    for i in 1..=k {
        for j in 1..i {
            if f(i, j) != f(j, i) {
                return Err(Error::NotSymmetric);
            }
        }
    }
    let tree = BalancedBst::covering(k);
    let size = tree.size();
    let g = |i: usize, j: usize| f(i.min(k), j.min(k));
    let mut l = Matrix::zeros(size, size);
    let mut r = Matrix::zeros(size, size);
    for t in 1..=size {
        let depth = tree.depth(t) as i32;
        let up = (6.0f64 / 5.0).powi(depth);
        let parent = tree.parent(t);
        for i in 1..=size {
            let above = parent.map_or(0.0, |p| g(i, p));
            l[(t - 1, i - 1)] = up * (g(i, t) - above);
        }
    }
    for j in 1..=size {
        for t in tree.path(j) {
            r[(t - 1, j - 1)] = (5.0f64 / 6.0).powi(tree.depth(t) as i32);
        }
    }
    Ok(Factorization::exact(l, r)?.restrict_domain(k))
}

/// Knobs for [`jl_reduce`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JlConfig {
    /// Constant `c_JL` in `ℓ' = ⌈c_JL·β⁻²·ln(4k+2)⌉`.
    pub constant: f64,
    pub max_retries: usize,
}

impl Default for JlConfig {
    fn default() -> Self {
        JlConfig {
            constant: 8.0,
            max_retries: 20,
        }
    }
}

/// `ℓ' = ⌈c_JL·β⁻²·ln(4k+2)⌉`.
pub fn jl_target_rows(constant: f64, beta: f64, k: usize) -> usize {
    (constant / (beta * beta) * (4.0 * k as f64 + 2.0).ln()).ceil() as usize
}

/// Outcome of a verified random projection.
#[derive(Clone, Debug)]
pub struct JlReduction {
    pub factorization: Factorization,
    pub rows: usize,
    pub beta: f64,
    /// Number of projection matrices drawn, including the accepted one.
    pub draws: usize,
    /// `‖(AL)ᵀ(AR) − LᵀR‖∞` of the accepted draw.
    pub residual: f64,
}

/// Replaces a balanced `(L, R)` by `(AL, AR)` for a Gaussian `A` with
/// `ℓ'` rows and entries of variance `1/ℓ'`, where `β = ½·α/C²`.
///
/// Every draw is verified: the product may move by at most `target_alpha`
/// entrywise and no column norm may grow past `sqrt(1+β)` times its
/// original; failing draws are replaced, up to `max_retries` draws.
pub fn jl_reduce<R: Rng + ?Sized>(
    f: &Factorization,
    target_alpha: f64,
    config: JlConfig,
    rng: &mut R,
) -> Result<JlReduction> {
    let (nl, nr) = (f.l().one_to_two_norm(), f.r().one_to_two_norm());
    if (nl - nr).abs() > 1e-9 * nl.max(nr) {
        return Err(Error::Unbalanced {
            norm: nl.max(nr),
            bound: nl.min(nr),
        });
    }
    let c_sq = nl * nr;
    if !(target_alpha > 0.0 && target_alpha < c_sq) {
        return Err(Error::InvalidArgument(format!(
            "target alpha must lie in (0, C²) = (0, {c_sq}), got {target_alpha}"
        )));
    }
    let beta = 0.5 * target_alpha / c_sq;
    let (ell, k) = (f.rank(), f.k());
    let rows = jl_target_rows(config.constant, beta, k);
    let original = f.product();
    let l_norms = f.l().column_norms_sq();
    let r_norms = f.r().column_norms_sq();
    let grow = 1.0 + beta;
    let sd = 1.0 / (rows as f64).sqrt();

    // Both routes need a dense product with `rows` as the inner dimension;
    // the Gram route pays `ℓ²` per row, the direct one `k²`.
    let use_gram = ell < k;

    for draw in 1..=config.max_retries {
        let mut a = Matrix::zeros(rows, ell);
        for q in 0..rows {
            for p in 0..ell {
                a[(q, p)] = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let (residual, ok_norms, projected) = if use_gram {
            let gram = a.dense_tr_matmul(&a)?;
            let gr = gram.matmul(f.r())?;
            let gl = gram.matmul(f.l())?;
            let residual = f.l().tr_matmul(&gr)?.sub(&original)?.inf_norm();
            let ok = (0..k).all(|i| {
                let li = dot(&f.l().column(i), &gl.column(i));
                let ri = dot(&f.r().column(i), &gr.column(i));
                li <= grow * l_norms[i] && ri <= grow * r_norms[i]
            });
            (residual, ok, None)
        } else {
            let (al, ar) = (a.matmul(f.l())?, a.matmul(f.r())?);
            let residual = al.dense_tr_matmul(&ar)?.sub(&original)?.inf_norm();
            let (nl, nr) = (al.column_norms_sq(), ar.column_norms_sq());
            let ok = (0..k).all(|i| nl[i] <= grow * l_norms[i] && nr[i] <= grow * r_norms[i]);
            (residual, ok, Some((al, ar)))
        };
        if residual <= target_alpha && ok_norms {
            let (l, r) = match projected {
                Some(pair) => pair,
                None => (a.matmul(f.l())?, a.matmul(f.r())?),
            };
            return Ok(JlReduction {
                factorization: Factorization::new(l, r, f.alpha() + target_alpha)?,
                rows,
                beta,
                draws: draw,
                residual,
            });
        }
    }
    Err(Error::RetriesExhausted {
        retries: config.max_retries,
    })
}

/// Built-in 1-Lipschitz kernels on `[0, 1]²` with constant diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LipschitzFn {
    /// `|x − y|`
    AbsDiff,
    /// `(x − y)²/2`
    HalfSqDiff,
    /// `cos(x − y)`
    CosDiff,
}

impl LipschitzFn {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "abs_diff" => Ok(LipschitzFn::AbsDiff),
            "half_sq_diff" => Ok(LipschitzFn::HalfSqDiff),
            "cos_diff" => Ok(LipschitzFn::CosDiff),
            other => Err(Error::UnknownName(format!("lipschitz function {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LipschitzFn::AbsDiff => "abs_diff",
            LipschitzFn::HalfSqDiff => "half_sq_diff",
            LipschitzFn::CosDiff => "cos_diff",
        }
    }

    pub fn eval(self, x: f64, y: f64) -> f64 {
        match self {
            LipschitzFn::AbsDiff => (x - y).abs(),
            LipschitzFn::HalfSqDiff => 0.5 * (x - y) * (x - y),
            LipschitzFn::CosDiff => (x - y).cos(),
        }
    }
}

/// Default ceiling on the discretization grid. Factors are dense `k×k`.
pub const DEFAULT_MAX_GRID: usize = (1 << 10) - 1;

/// A continuous kernel restricted to a `k`-point grid on `[0, 1]`.
///
/// Grid point `i ∈ [k]` sits at the cell midpoint `(i − ½)/k`, so every
/// input is within `1/(2k)` of its grid point and a `G`-Lipschitz kernel
/// moves by at most `G/k` per pair.
#[derive(Clone, Debug)]
pub struct Discretization {
    pub k: usize,
    pub kernel: WorkloadMatrix,
}

impl Discretization {
    pub fn grid_point(&self, i: usize) -> f64 {
        grid_point(i, self.k)
    }

    /// Round-half-up to the nearest grid point, clamped to `[1, k]`.
    pub fn map_input(&self, x: f64) -> usize {
        map_to_grid(x, self.k)
    }
}

pub fn grid_point(i: usize, k: usize) -> f64 {
    (i as f64 - 0.5) / k as f64
}

pub fn map_to_grid(x: f64, k: usize) -> usize {
    let cell = (x * k as f64).floor();
    if cell.is_nan() || cell < 0.0 {
        1
    } else {
        (cell as usize + 1).min(k)
    }
}

/// Grid size `k = ⌈ε·n²⌉`, clamped to `max_grid` and padded up to the next
/// `2^q − 1`, then `g(i, j) = f(x_i, x_j)`.
pub fn discretize_lipschitz(
    f: impl Fn(f64, f64) -> f64,
    lipschitz: f64,
    n: usize,
    epsilon: f64,
    max_grid: usize,
) -> Result<Discretization> {
    if !(lipschitz > 0.0) || n == 0 || !(epsilon > 0.0) || max_grid == 0 {
        return Err(Error::InvalidArgument(
            "discretization needs G > 0, n ≥ 1, ε > 0".into(),
        ));
    }
    let raw = (epsilon * (n as f64) * (n as f64)).ceil().min(max_grid as f64) as usize;
    let k = BalancedBst::covering(raw.max(1)).size();
    let kernel = WorkloadMatrix::from_fn(k, |i, j| f(grid_point(i + 1, k), grid_point(j + 1, k)))?;
    Ok(Discretization { k, kernel })
}

/// Exact factorization of an arbitrary square matrix through its SVD:
/// `L = Σ^{1/2}Uᵀ`, `R = Σ^{1/2}Vᵀ`, negligible singular values dropped.
pub fn svd_fact(w: &WorkloadMatrix) -> Result<Factorization> {
    let m = w.entries();
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(Error::DimensionMismatch(format!(
            "workload must be square, got {rows}x{cols}"
        )));
    }
    let svd = DMatrix::from_row_slice(rows, cols, m.as_slice()).svd(true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&s| svd.singular_values[s] > 1e-12 * smax.max(f64::MIN_POSITIVE))
        .collect();
    if keep.is_empty() {
        // Zero workload: a single zero row still factorizes it.
        return Factorization::exact(Matrix::zeros(1, cols), Matrix::zeros(1, cols));
    }
    let l = Matrix::from_fn(keep.len(), cols, |p, i| {
        svd.singular_values[keep[p]].sqrt() * u[(i, keep[p])]
    });
    let r = Matrix::from_fn(keep.len(), cols, |p, j| {
        svd.singular_values[keep[p]].sqrt() * vt[(keep[p], j)]
    });
    fact_balance(&Factorization::exact(l, r)?)
}

/// A workload ready for the protocols: the target `W`, a factorization of
/// `W − offset·𝟏𝟏ᵀ`, and the `offset` to add back to every estimate.
#[derive(Clone, Debug)]
pub struct BuiltWorkload {
    pub name: String,
    pub target: WorkloadMatrix,
    pub factorization: Factorization,
    pub offset: f64,
}

impl BuiltWorkload {
    pub fn k(&self) -> usize {
        self.target.k()
    }
}

/// Workload constructions addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub enum WorkloadSpec {
    Identity,
    AllOnes,
    GiniDiversity,
    PrefixTree,
    SignComparison,
    Kendall { k_a: usize, k_b: usize },
    Lipschitz { func: LipschitzFn, lipschitz: f64 },
    File(String),
}

impl WorkloadSpec {
    pub fn parse(name: &str) -> Result<Self> {
        let mut parts = name.splitn(2, ':');
        let head = parts.next().unwrap_or_default();
        let rest = parts.next();
        match (head, rest) {
            ("identity", None) => Ok(WorkloadSpec::Identity),
            ("all_ones", None) => Ok(WorkloadSpec::AllOnes),
            ("gini_diversity", None) => Ok(WorkloadSpec::GiniDiversity),
            ("prefix_tree", None) => Ok(WorkloadSpec::PrefixTree),
            ("sign_comparison", None) => Ok(WorkloadSpec::SignComparison),
            ("kendall", Some(dims)) => {
                let (a, b) = dims
                    .split_once('x')
                    .ok_or_else(|| Error::Parse(format!("expected kendall:<kA>x<kB>, got {name:?}")))?;
                let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("{name:?}: {e}")));
                Ok(WorkloadSpec::Kendall {
                    k_a: parse(a)?,
                    k_b: parse(b)?,
                })
            }
            ("lipschitz", Some(args)) => {
                let (func, g) = args
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("expected lipschitz:<fn>:<G>, got {name:?}")))?;
                let lipschitz: f64 = g.parse().map_err(|e| Error::Parse(format!("{name:?}: {e}")))?;
                if !(lipschitz > 0.0) {
                    return Err(Error::InvalidArgument(format!("{name:?}: G must be > 0")));
                }
                Ok(WorkloadSpec::Lipschitz {
                    func: LipschitzFn::parse(func)?,
                    lipschitz,
                })
            }
            ("file", Some(path)) => Ok(WorkloadSpec::File(path.to_string())),
            _ => Err(Error::UnknownName(format!("workload {name:?}"))),
        }
    }

    /// Domain size implied by the spec itself, if any.
    pub fn fixed_k(&self) -> Option<usize> {
        match self {
            WorkloadSpec::Kendall { k_a, k_b } => Some(k_a * k_b),
            _ => None,
        }
    }

    /// Builds target and balanced factorization over a domain of size `k`
    /// (ignored where the spec fixes it; file workloads bring their own).
    pub fn build(&self, name: &str, k: usize) -> Result<BuiltWorkload> {
        let exact = |target: WorkloadMatrix, factorization: Factorization| BuiltWorkload {
            name: name.to_string(),
            target,
            factorization,
            offset: 0.0,
        };
        Ok(match self {
            WorkloadSpec::Identity => exact(WorkloadMatrix::new(Matrix::identity(k))?, identity_fact(k)?),
            WorkloadSpec::AllOnes => exact(WorkloadMatrix::new(Matrix::filled(k, k, 1.0))?, all_ones_fact(k)?),
            WorkloadSpec::GiniDiversity => exact(gini_diversity_target(k), gini_diversity_fact(k)?),
            WorkloadSpec::PrefixTree => exact(prefix_tree_target(k), fact_balance(&prefix_tree_fact(k)?)?),
            WorkloadSpec::SignComparison => exact(sign_comparison_target(k), sign_comparison_fact(k)?),
            WorkloadSpec::Kendall { k_a, k_b } => {
                exact(kendall_kernel_matrix(*k_a, *k_b), kendall_kernel_fact(*k_a, *k_b)?)
            }
            WorkloadSpec::Lipschitz { func, lipschitz } => {
                check_size(k, 1)?;
                let target = WorkloadMatrix::from_fn(k, |i, j| {
                    lipschitz * func.eval(grid_point(i + 1, k), grid_point(j + 1, k))
                })?;
                let (shifted, offset) = target.mean_shift();
                let e = shifted.entries();
                let f = lipschitz_bst_fact(|i, j| e[(i - 1, j - 1)], k)?;
                BuiltWorkload {
                    name: name.to_string(),
                    target,
                    factorization: fact_balance(&f)?,
                    offset,
                }
            }
            WorkloadSpec::File(path) => {
                let target = WorkloadMatrix::new(Matrix::from_text(&std::fs::read_to_string(Path::new(path))?)?)?;
                let f = svd_fact(&target)?;
                exact(target, f)
            }
        })
    }
}

/// Parses and builds a named workload.
pub fn build_workload(name: &str, k: usize) -> Result<BuiltWorkload> {
    WorkloadSpec::parse(name)?.build(name, k)
}

fn check_size(k: usize, min: usize) -> Result<()> {
    if k < min {
        Err(Error::InvalidArgument(format!("size must be ≥ {min}, got {k}")))
    } else {
        Ok(())
    }
}
