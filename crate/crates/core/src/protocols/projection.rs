use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::randomizers::{BudgetLedger, MechanismId, VectorRandomizer};
use crate::rng::{Round, SeedPath};
use crate::workload::Dataset;

use super::{accumulate_vrand, check_dataset, RunParams};

/// Re-derive the incremental state from the weights every this many steps.
const REFRESH_EVERY: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionOptions {
    pub max_iters: usize,
    /// Stop once the Frank–Wolfe duality gap is at most this.
    pub gap_tol: f64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            max_iters: 2000,
            gap_tol: 1e-8,
        }
    }
}

/// Point of `R^Δ = conv{0, ±R₁, …, ±R_k}` near the noisy mean.
///
/// `weights[0]` belongs to the origin, `weights[j]` to `+R_j` and
/// `weights[k + j]` to `−R_j` (one-based `j`); `mu` is rebuilt from them, so
/// membership holds by construction.
#[derive(Clone, Debug)]
pub struct ProjectionResult {
    pub mu: Vec<f64>,
    pub weights: Vec<f64>,
    pub fw_gap: f64,
    pub iterations: usize,
    pub noisy_mean: Vec<f64>,
    pub ledger: BudgetLedger,
}

impl ProjectionResult {
    /// `Σ_v w_v · v`.
    pub fn reconstruct(&self, r: &Matrix) -> Vec<f64> {
        combine(r, &self.weights)
    }
}

fn combine(r: &Matrix, weights: &[f64]) -> Vec<f64> {
    let k = r.cols();
    let signed: Vec<f64> = (0..k).map(|j| weights[1 + j] - weights[1 + k + j]).collect();
    r.matvec(&signed).expect("length k")
}

/// Sign and column of vertex `v`, or `None` for the origin.
fn vertex(v: usize, k: usize) -> Option<(f64, usize)> {
    match v {
        0 => None,
        v if v <= k => Some((1.0, v - 1)),
        v => Some((-1.0, v - 1 - k)),
    }
}

/// Euclidean projection of `y` onto `R^Δ` by away-step Frank–Wolfe with
/// exact line search, working entirely through `RᵀR` and `Rᵀy`.
pub fn project_onto_hull(r: &Matrix, y: &[f64], opts: ProjectionOptions) -> Result<ProjectionResult> {
    if y.len() != r.rows() {
        return Err(Error::DimensionMismatch(format!(
            "point has length {} but R has {} rows",
            y.len(),
            r.rows()
        )));
    }
    let k = r.cols();
    let gram = r.tr_matmul(r)?;
    let ry = r.tr_matvec(y)?;
    let mut w = vec![0.0; 2 * k + 1];
    w[0] = 1.0;
    // g = Rᵀμ, mm = ‖μ‖², my = ⟨μ, y⟩.
    let mut g = vec![0.0; k];
    let (mut mm, mut my) = (0.0, 0.0);

    let refresh = |w: &[f64], g: &mut [f64]| -> (f64, f64) {
        let signed: Vec<f64> = (0..k).map(|j| w[1 + j] - w[1 + k + j]).collect();
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = dot(gram.row(i), &signed);
        }
        (dot(&signed, g), dot(&signed, &ry))
    };
    // ⟨∇, v⟩ with ∇ = μ − y.
    let grad_at = |v: usize, g: &[f64]| vertex(v, k).map_or(0.0, |(s, j)| s * (g[j] - ry[j]));

    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..=opts.max_iters {
        if it > 0 && it % REFRESH_EVERY == 0 {
            (mm, my) = refresh(&w, &mut g);
        }
        let grad_mu = mm - my;
        let mut fw = 0;
        let mut fw_val = 0.0;
        for v in 1..=2 * k {
            let val = grad_at(v, &g);
            if val < fw_val {
                fw = v;
                fw_val = val;
            }
        }
        gap = grad_mu - fw_val;
        if gap <= opts.gap_tol || it == opts.max_iters {
            break;
        }
        iterations = it + 1;
        let mut away = usize::MAX;
        let mut away_val = f64::NEG_INFINITY;
        for (v, &wv) in w.iter().enumerate() {
            if wv > 0.0 {
                let val = grad_at(v, &g);
                if val > away_val {
                    away = v;
                    away_val = val;
                }
            }
        }
        let away_gap = away_val - grad_mu;
        // ⟨v, μ⟩ and ‖v‖² for a vertex.
        let vm = |v: usize, g: &[f64]| vertex(v, k).map_or(0.0, |(s, j)| s * g[j]);
        let vv = |v: usize| vertex(v, k).map_or(0.0, |(_, j)| gram[(j, j)]);
        let vy = |v: usize| vertex(v, k).map_or(0.0, |(s, j)| s * ry[j]);

        // Step μ ← μ + γ·d with d = v − μ (toward) or d = μ − a (away).
        let (toward, v, slope, dd, gamma_max) = if gap >= away_gap {
            (true, fw, fw_val - grad_mu, vv(fw) - 2.0 * vm(fw, &g) + mm, 1.0)
        } else {
            let wa = w[away];
            let gmax = if wa >= 1.0 { f64::INFINITY } else { wa / (1.0 - wa) };
            (
                false,
                away,
                grad_mu - away_val,
                mm - 2.0 * vm(away, &g) + vv(away),
                gmax,
            )
        };
        if dd <= 0.0 {
            break;
        }
        let gamma = (-slope / dd).clamp(0.0, gamma_max);
        if gamma == 0.0 {
            break;
        }
        let (a, b) = if toward {
            (1.0 - gamma, gamma)
        } else {
            (1.0 + gamma, -gamma)
        };
        // μ' = a·μ + b·v.
        let (v_mu, v_sq, v_y) = (vm(v, &g), vv(v), vy(v));
        mm = a * a * mm + 2.0 * a * b * v_mu + b * b * v_sq;
        my = a * my + b * v_y;
        for gi in g.iter_mut() {
            *gi *= a;
        }
        if let Some((s, j)) = vertex(v, k) {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += b * s * gram[(i, j)];
            }
        }
        for wv in w.iter_mut() {
            *wv *= a;
        }
        w[v] += b;
        if !toward && gamma == gamma_max {
            w[v] = 0.0;
        }
        for wv in w.iter_mut() {
            if *wv < 0.0 {
                *wv = 0.0;
            }
        }
    }
    let mu = combine(r, &w);
    Ok(ProjectionResult {
        mu,
        weights: w,
        fw_gap: gap.max(0.0),
        iterations,
        noisy_mean: y.to_vec(),
        ledger: BudgetLedger::default(),
    })
}

/// Users send `VRand_ε(R·e_{x_i})` with `C = ‖R‖₁→₂`; the analyst
/// projects the mean onto `R^Δ`.
pub fn projection_mechanism(
    r: &Matrix,
    data: &Dataset,
    params: RunParams,
    opts: ProjectionOptions,
) -> Result<ProjectionResult> {
    projection_round(
        r,
        data,
        params.seed,
        params.epsilon,
        params.noise_off,
        opts,
        Round::Projection,
    )
}

pub(crate) fn projection_round(
    r: &Matrix,
    data: &Dataset,
    seed: SeedPath,
    epsilon: f64,
    noise_off: bool,
    opts: ProjectionOptions,
    round: Round,
) -> Result<ProjectionResult> {
    check_dataset(data, r.cols())?;
    let c = r.one_to_two_norm();
    let ell = r.rows();
    let rt = r.transpose();
    let mut sum = vec![0.0; ell];
    let mut scratch = vec![0.0; ell];
    if c > 0.0 {
        let randomizer = VectorRandomizer::new(c, epsilon, ell)?;
        for (i, b) in data.symbols().enumerate() {
            accumulate_vrand(
                &randomizer,
                rt.row(b),
                seed,
                i,
                round,
                noise_off,
                &mut scratch,
                &mut sum,
            )?;
        }
    }
    let n = data.n() as f64;
    let y: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut result = project_onto_hull(r, &y, opts)?;
    result.ledger.record("projection message", MechanismId::Vrand, epsilon);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gini_diversity_fact;
    use crate::matrix::norm2;
    use crate::workload::histogram_of;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn vertex_and_interior_points_are_fixed() {
        let f = gini_diversity_fact(6).unwrap();
        let r = f.r();
        for b in 1..=6 {
            let data = Dataset::constant(b, 5, 6).unwrap();
            let res = projection_mechanism(
                r,
                &data,
                RunParams::new(1.0, SeedPath::root(0)).noise_off(true),
                ProjectionOptions::default(),
            )
            .unwrap();
            assert!(dist(&res.mu, &r.column(b - 1)) <= 1e-6);
        }
        let data = Dataset::new(vec![1, 2, 2, 5, 6, 6], 6).unwrap();
        let rh = r.matvec(histogram_of(&data).weights()).unwrap();
        let res = project_onto_hull(r, &rh, ProjectionOptions::default()).unwrap();
        assert!(dist(&res.mu, &rh) <= 1e-6);
    }

    #[test]
    fn weights_reconstruct_mu_and_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Matrix::from_fn(5, 9, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..20 {
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let res = project_onto_hull(&r, &y, ProjectionOptions::default()).unwrap();
            assert!(res.weights.iter().all(|&w| w >= 0.0));
            assert!((res.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(dist(&res.reconstruct(&r), &res.mu) <= 1e-9);
        }
    }

    #[test]
    fn projection_matches_optimality_conditions() {
        // Projection p of y: ⟨y − p, v − p⟩ ≤ 0 for every vertex v.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Matrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let y = vec![3.0, -2.0, 1.0];
        let res = project_onto_hull(&r, &y, ProjectionOptions::default()).unwrap();
        let resid: Vec<f64> = y.iter().zip(&res.mu).map(|(a, b)| a - b).collect();
        let mut vertices = vec![vec![0.0; 3]];
        for j in 0..4 {
            let c = r.column(j);
            vertices.push(c.iter().map(|v| -v).collect());
            vertices.push(c);
        }
        for v in vertices {
            let d: Vec<f64> = v.iter().zip(&res.mu).map(|(a, b)| a - b).collect();
            assert!(dot(&resid, &d) <= 1e-6 * (1.0 + norm2(&resid)));
        }
        assert!(res.fw_gap <= 1e-8 || res.iterations == 2000);
    }

    #[test]
    fn origin_handles_zero_mean() {
        let r = Matrix::identity(3);
        let res = project_onto_hull(&r, &[0.0, 0.0, 0.0], ProjectionOptions::default()).unwrap();
        assert_eq!(res.mu, vec![0.0, 0.0, 0.0]);
        assert_eq!(res.iterations, 0);
    }
}
