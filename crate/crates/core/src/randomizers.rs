//! ε-local-DP building blocks: the bounded-ℓ₂ vector randomizer, Laplace
//! noise, binary randomized response and clipping, plus privacy budget
//! bookkeeping.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::matrix::{dot, norm2};

/// Calibrated constant `c_v` in the vector randomizer's sub-Gaussian proxy
/// `σ = c_v·C / min(ε, 1)`.
///
/// The per-direction standard deviation of `Y − x` is at most `B/√d`,
/// measured at `d = 32`, `ε = 1`, `C = 1` as about 2.69. `B/√d` creeps up
/// with `d` towards `coth(½)·sqrt(π/2) ≈ 2.712`, hence 2.72. It is
/// decreasing in `ε`, so larger `ε` reuse the `ε = 1` bound.
pub const VRAND_SIGMA_CONSTANT: f64 = 2.72;

/// Relative slack on `‖x‖ ≤ C` absorbed by renormalization.
const NORM_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismId {
    Vrand,
    Laplace,
    Rr,
    Projection,
}

impl MechanismId {
    pub fn as_str(self) -> &'static str {
        match self {
            MechanismId::Vrand => "vrand",
            MechanismId::Laplace => "laplace",
            MechanismId::Rr => "rr",
            MechanismId::Projection => "projection",
        }
    }
}

impl fmt::Display for MechanismId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Total `ε` with named sub-budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    epsilon: f64,
    allocation: Vec<(String, f64)>,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, allocation: Vec<(String, f64)>) -> Result<Self> {
        check_epsilon(epsilon)?;
        if allocation.is_empty() || allocation.iter().any(|(_, e)| !(*e > 0.0)) {
            return Err(Error::InvalidArgument("sub-budgets must be positive".into()));
        }
        let total: f64 = allocation.iter().map(|(_, e)| e).sum();
        if (total - epsilon).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "sub-budgets sum to {total}, expected {epsilon}"
            )));
        }
        Ok(Self { epsilon, allocation })
    }

    pub fn whole(epsilon: f64, label: &str) -> Result<Self> {
        Self::new(epsilon, vec![(label.to_string(), epsilon)])
    }

    /// Equal split across `labels`.
    pub fn split_even(epsilon: f64, labels: &[&str]) -> Result<Self> {
        check_epsilon(epsilon)?;
        let part = epsilon / labels.len() as f64;
        Self::new(epsilon, labels.iter().map(|l| (l.to_string(), part)).collect())
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn allocation(&self) -> &[(String, f64)] {
        &self.allocation
    }

    pub fn part(&self, label: &str) -> Option<f64> {
        self.allocation.iter().find(|(l, _)| l == label).map(|(_, e)| *e)
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && !epsilon.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")))
    }
}

/// One use of a user's input by an `ε`-DP randomizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetTouch {
    pub label: String,
    pub mechanism: MechanismId,
    pub epsilon: f64,
}

/// Per-user record of every randomizer applied to that user's input.
/// Basic composition: the user's total loss is the sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    touches: Vec<BudgetTouch>,
}

impl BudgetLedger {
    pub fn record(&mut self, label: impl Into<String>, mechanism: MechanismId, epsilon: f64) {
        self.touches.push(BudgetTouch {
            label: label.into(),
            mechanism,
            epsilon,
        });
    }

    pub fn extend(&mut self, other: &BudgetLedger) {
        self.touches.extend(other.touches.iter().cloned());
    }

    pub fn touches(&self) -> &[BudgetTouch] {
        &self.touches
    }

    pub fn total(&self) -> f64 {
        self.touches.iter().map(|t| t.epsilon).sum()
    }
}

impl fmt::Display for BudgetLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.touches {
            writeln!(f, "  {:<24} {:<10} eps={}", t.label, t.mechanism, t.epsilon)?;
        }
        write!(f, "  total eps={}", self.total())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomizerOutput {
    pub vector: Vec<f64>,
    pub mechanism_id: MechanismId,
    /// Declared sub-Gaussian parameter of `vector − x`.
    pub sigma_bound: f64,
}

/// `E[|u₁|]` for `u` uniform on the unit sphere in `ℝ^d`:
/// `Γ(d/2) / (√π · Γ((d+1)/2))`.
pub fn sphere_mean_abs_coordinate(d: usize) -> f64 {
    assert!(d >= 1);
    let d = d as f64;
    (ln_gamma(d / 2.0) - ln_gamma((d + 1.0) / 2.0)).exp() / std::f64::consts::PI.sqrt()
}

/// Unbiased `ε`-DP randomizer for vectors with `‖x‖₂ ≤ C`.
///
/// Three stages: the direction `v = x/‖x‖` is kept with probability
/// `½ + ‖x‖/(2C)` and negated otherwise; a uniform unit vector `u` is
/// reported from the hemisphere around the chosen direction with
/// probability `e^ε/(1+e^ε)` and from the opposite one otherwise; the
/// result is scaled by `B = C·(e^ε+1)/(e^ε−1)/m_d`. Every output lies on the
/// sphere of radius `B` and its density under any input lies in
/// `[2(1−π), 2π]/area`, so the likelihood ratio is at most `e^ε`.
#[derive(Clone, Debug)]
pub struct VectorRandomizer {
    bound: f64,
    epsilon: f64,
    dim: usize,
    keep_prob: f64,
    radius: f64,
}

impl VectorRandomizer {
    pub fn new(bound: f64, epsilon: f64, dim: usize) -> Result<Self> {
        check_epsilon(epsilon)?;
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidArgument(format!("bound C must be > 0, got {bound}")));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be ≥ 1".into()));
        }
        let e = epsilon.exp();
        let keep_prob = if e.is_infinite() { 1.0 } else { e / (1.0 + e) };
        // (e+1)/(e−1) = coth(ε/2), stable for small and large ε.
        let radius = bound / (epsilon / 2.0).tanh() / sphere_mean_abs_coordinate(dim);
        Ok(Self {
            bound,
            epsilon,
            dim,
            keep_prob,
            radius,
        })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Radius `B` of the output sphere.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn sigma_bound(&self) -> f64 {
        VRAND_SIGMA_CONSTANT * self.bound / self.epsilon.min(1.0)
    }

    /// Validated norm ratio `‖x‖/C`, clamped to 1 within floating slack.
    fn norm_ratio(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "randomizer dimension {} vs input length {}",
                self.dim,
                x.len()
            )));
        }
        let norm = norm2(x);
        if !norm.is_finite() || norm > self.bound * (1.0 + NORM_SLACK) {
            return Err(Error::NormExceedsBound {
                norm,
                bound: self.bound,
            });
        }
        Ok((norm / self.bound).min(1.0))
    }

    /// Writes the privatized vector into `out`.
    pub fn randomize_into<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) -> Result<()> {
        let ratio = self.norm_ratio(x)?;
        assert_eq!(out.len(), self.dim);
        let toward: bool = rng.random::<f64>() < 0.5 + 0.5 * ratio;

        let mut sq = 0.0;
        for o in out.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *o = g;
            sq += g * g;
        }
        // Alignment of u with ±v; for x = 0 the reference direction is e₁.
        let along = if ratio > 0.0 { dot(out, x) } else { out[0] };
        let aligned = (along >= 0.0) == toward;
        let report_aligned = rng.random::<f64>() < self.keep_prob;
        let sign = if aligned == report_aligned { 1.0 } else { -1.0 };
        let scale = sign * self.radius / sq.sqrt();
        for o in out.iter_mut() {
            *o *= scale;
        }
        Ok(())
    }

    pub fn randomize<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<RandomizerOutput> {
        let mut vector = vec![0.0; self.dim];
        self.randomize_into(x, rng, &mut vector)?;
        Ok(RandomizerOutput {
            vector,
            mechanism_id: MechanismId::Vrand,
            sigma_bound: self.sigma_bound(),
        })
    }

    /// For `d = 1`: `P[output = +B]` on input `x`, in closed form
    /// `½ + x(e^ε−1)/(2C(e^ε+1))`.
    pub fn plus_probability_1d(&self, x: f64) -> f64 {
        assert_eq!(self.dim, 1);
        let x = x.clamp(-self.bound, self.bound);
        0.5 + 0.5 * (x / self.bound) * (2.0 * self.keep_prob - 1.0)
    }
}

/// `VRand_{ε,C}(x)`.
pub fn vrand<R: Rng + ?Sized>(x: &[f64], bound: f64, epsilon: f64, rng: &mut R) -> Result<RandomizerOutput> {
    VectorRandomizer::new(bound, epsilon, x.len())?.randomize(x, rng)
}

/// Uniform in the open interval `(0, 1)` from 53 random bits.
#[inline]
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Draws from `Lap(b)` by inverse CDF.
pub fn laplace_noise<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "Laplace scale must be > 0, got {scale}"
        )));
    }
    let v = open_unit(rng) - 0.5;
    Ok(-scale * v.signum() * (1.0 - 2.0 * v.abs()).ln())
}

/// `value + Lap(b)`.
pub fn laplace<R: Rng + ?Sized>(value: f64, scale: f64, rng: &mut R) -> Result<f64> {
    Ok(value + laplace_noise(scale, rng)?)
}

pub fn laplace_density(x: f64, location: f64, scale: f64) -> f64 {
    (-(x - location).abs() / scale).exp() / (2.0 * scale)
}

/// Flip probability `1/(1+e^ε)`.
pub fn rr_flip_probability(epsilon: f64) -> f64 {
    let e = epsilon.exp();
    if e.is_infinite() {
        0.0
    } else {
        1.0 / (1.0 + e)
    }
}

pub fn randomized_response_bit<R: Rng + ?Sized>(bit: bool, epsilon: f64, rng: &mut R) -> Result<bool> {
    check_epsilon(epsilon)?;
    let flip = open_unit(rng) < rr_flip_probability(epsilon);
    Ok(bit ^ flip)
}

/// Unbiased count estimate from `count` reported ones out of `n`.
pub fn rr_debias(count: f64, n: f64, epsilon: f64) -> f64 {
    let p = rr_flip_probability(epsilon);
    (count - n * p) / (1.0 - 2.0 * p)
}

/// `clip_τ(x) = min(max(x, −τ), τ)`.
pub fn clip(x: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    x.clamp(-tau, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedPath;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_constant_matches_closed_forms_and_monte_carlo() {
        assert!((sphere_mean_abs_coordinate(1) - 1.0).abs() < 1e-12);
        assert!((sphere_mean_abs_coordinate(2) - 2.0 / std::f64::consts::PI).abs() < 1e-12);
        assert!((sphere_mean_abs_coordinate(3) - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [1usize, 2, 8, 32] {
            let t = 200_000;
            let mut acc = 0.0;
            for _ in 0..t {
                let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                acc += g[0].abs() / norm2(&g);
            }
            let mc = acc / t as f64;
            let m = sphere_mean_abs_coordinate(d);
            assert!((mc - m).abs() < 5.0 / (t as f64).sqrt(), "d={d}: {mc} vs {m}");
        }
    }

    #[test]
    fn vrand_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            vrand(&[2.0, 0.0], 1.0, 1.0, &mut rng),
            Err(Error::NormExceedsBound { .. })
        ));
        assert!(vrand(&[0.5], 1.0, 0.0, &mut rng).is_err());
        assert!(vrand(&[0.5], 1.0, -1.0, &mut rng).is_err());
        // Floating overshoot within the slack is accepted.
        assert!(vrand(&[1.0 + 1e-12], 1.0, 1.0, &mut rng).is_ok());
    }

    #[test]
    fn vrand_output_lies_on_sphere() {
        let r = VectorRandomizer::new(2.0, 0.7, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let y = r.randomize(&[0.3, -0.2, 1.0, 0.0, 0.5], &mut rng).unwrap();
            assert!((norm2(&y.vector) - r.radius()).abs() < 1e-9 * r.radius());
            assert_eq!(y.mechanism_id, MechanismId::Vrand);
        }
    }

    #[test]
    fn vrand_zero_input_is_centred() {
        let d = 4;
        let r = VectorRandomizer::new(1.0, 1.0, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 100_000;
        let mut mean = vec![0.0; d];
        for _ in 0..t {
            let y = r.randomize(&vec![0.0; d], &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&y.vector) {
                *m += v / t as f64;
            }
        }
        let tol = 4.0 * (r.radius() / (d as f64).sqrt()) / (t as f64).sqrt();
        for m in mean {
            assert!(m.abs() < tol, "{m} vs {tol}");
        }
    }

    #[test]
    fn vrand_one_dimensional_closed_form() {
        let e = 1f64.exp();
        let r = VectorRandomizer::new(1.0, 1.0, 1).unwrap();
        assert!((r.radius() - (e + 1.0) / (e - 1.0)).abs() < 1e-12);
        let x = 0.4;
        let p = r.plus_probability_1d(x);
        assert!((p - (0.5 + x * (e - 1.0) / (2.0 * (e + 1.0)))).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 200_000;
        let mut plus = 0usize;
        let mut mean = 0.0;
        for _ in 0..t {
            let y = r.randomize(&[x], &mut rng).unwrap().vector[0];
            assert!((y.abs() - r.radius()).abs() < 1e-12);
            if y > 0.0 {
                plus += 1;
            }
            mean += y / t as f64;
        }
        let freq = plus as f64 / t as f64;
        assert!((freq - p).abs() < 5.0 * (p * (1.0 - p) / t as f64).sqrt());
        assert!((mean - x).abs() < 5.0 * r.radius() / (t as f64).sqrt());
    }

    #[test]
    fn vrand_one_dimensional_ratio_is_bounded() {
        for eps in [0.1, 0.5, 1.0, 3.0] {
            let r = VectorRandomizer::new(1.0, eps, 1).unwrap();
            let grid: Vec<f64> = (0..100).map(|i| -1.0 + 2.0 * i as f64 / 99.0).collect();
            let mut worst: f64 = 0.0;
            for &a in &grid {
                for &b in &grid {
                    let (pa, pb) = (r.plus_probability_1d(a), r.plus_probability_1d(b));
                    worst = worst.max(pa / pb).max((1.0 - pa) / (1.0 - pb));
                }
            }
            assert!(worst <= eps.exp() * (1.0 + 1e-12));
            // The extremes ±C attain the bound.
            assert!((worst - eps.exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn sigma_constant_calibration() {
        // Empirical per-direction std of Y − x at the calibration point.
        let d = 32;
        let r = VectorRandomizer::new(1.0, 1.0, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..d).map(|i| if i == 0 { 0.6 } else { 0.0 }).collect();
        let t = 100_000;
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        for _ in 0..t {
            let y = r.randomize(&x, &mut rng).unwrap().vector;
            // θ = e₁ (along x) and θ = e₂ (orthogonal).
            for (k, v) in [y[0] - x[0], y[1]].into_iter().enumerate() {
                sum[k] += v;
                sum_sq[k] += v * v;
            }
        }
        let exact = r.radius() / (d as f64).sqrt();
        for k in 0..2 {
            let var = sum_sq[k] / t as f64 - (sum[k] / t as f64).powi(2);
            assert!(var.sqrt() <= VRAND_SIGMA_CONSTANT);
            assert!(var.sqrt() <= exact * 1.02);
        }
        assert!(exact <= VRAND_SIGMA_CONSTANT && exact > 0.98 * VRAND_SIGMA_CONSTANT);
        assert_eq!(r.sigma_bound(), VRAND_SIGMA_CONSTANT);
    }

    #[test]
    fn laplace_moments() {
        let b = 1.5;
        let mut rng = SeedPath::root(6).rng();
        let t = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..t {
            let z = laplace_noise(b, &mut rng).unwrap();
            s += z;
            s2 += z * z;
        }
        let mean = s / t as f64;
        let var = s2 / t as f64 - mean * mean;
        assert!(mean.abs() < 5.0 * b * 2f64.sqrt() / 1e3);
        assert!((var / (2.0 * b * b) - 1.0).abs() < 0.05);
        assert!(laplace(0.0, 0.0, &mut rng).is_err());
        assert!(laplace(0.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn laplace_density_ratio() {
        let (delta, eps) = (2.0, 0.8);
        let b = delta / eps;
        for i in 0..200 {
            let o = -10.0 + 0.1 * i as f64;
            let ratio = laplace_density(o, 0.0, b) / laplace_density(o, delta, b);
            assert!(ratio <= eps.exp() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn randomized_response_examples() {
        assert_eq!(rr_flip_probability(f64::INFINITY), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert!(randomized_response_bit(true, 800.0, &mut rng).unwrap());
        }
        let eps = 1.3;
        let p = rr_flip_probability(eps);
        let ratio = ((1.0 - p) / p).max(p / (1.0 - p));
        assert!((ratio - eps.exp()).abs() < 1e-12);

        let (n, truth, eps) = (100_000usize, 30_000usize, 1.0);
        let mut count = 0usize;
        for i in 0..n {
            if randomized_response_bit(i < truth, eps, &mut rng).unwrap() {
                count += 1;
            }
        }
        let p = rr_flip_probability(eps);
        let est = rr_debias(count as f64, n as f64, eps);
        let tol = 4.0 * (n as f64 * p * (1.0 - p)).sqrt() / (1.0 - 2.0 * p);
        assert!((est - truth as f64).abs() < tol);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(5.0, 2.0), 2.0);
        assert_eq!(clip(-5.0, 2.0), -2.0);
        assert_eq!(clip(1.5, 2.0), 1.5);
    }

    #[test]
    fn budget_validation() {
        let b = PrivacyBudget::split_even(1.0, &["a", "b", "c", "d"]).unwrap();
        assert_eq!(b.part("c"), Some(0.25));
        assert!(PrivacyBudget::new(1.0, vec![("a".into(), 0.6)]).is_err());
        assert!(PrivacyBudget::whole(0.0, "a").is_err());
    }
}
