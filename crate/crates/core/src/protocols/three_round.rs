use crate::error::{Error, Result};
use crate::matrix::dot;
use crate::randomizers::{clip, laplace_noise, BudgetLedger, MechanismId, VectorRandomizer};
use crate::rng::{user_stream, Round};
use crate::workload::{Dataset, Factorization};

use super::projection::{projection_round, ProjectionOptions};
use super::{accumulate_vrand, check_balanced, check_dataset, Estimate, ProtocolEstimate, RoundStats, RunParams};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ThreeRoundOptions {
    pub projection: ProjectionOptions,
    /// Replaces the round-one projection by a fixed `μ_R` (testing only;
    /// the round's budget is still charged).
    pub mu_override: Option<Vec<f64>>,
}

fn noise(scale: f64, rng: &mut impl rand::Rng, noise_off: bool) -> Result<f64> {
    if noise_off || scale == 0.0 {
        Ok(0.0)
    } else {
        laplace_noise(scale, rng)
    }
}

/// Three-round protocol with `ε̄ = ε/4` per round message:
/// 1. the projection mechanism on `R` yields `μ_R ∈ R^Δ`;
/// 2. users send `yᴸ = VRand_ε̄(L·e_x)` and
///    `a_i = ⟨L·e_x, μ_R⟩ + Lap(2W∞/ε̄)`;
/// 3. users send `v_i = clip_τ(⟨Yᴸ, R·e_x − μ_R⟩) + Lap(2τ/ε̄)` with
///    `τ = 4W∞`, where `Yᴸ` is the mean of the `yᴸ`.
///
/// The estimate is `mean(a) + mean(v)`, which telescopes to `⟨Lh, Rh⟩`
/// when noise is off, whatever `μ_R ∈ R^Δ` is.
pub fn quadratic_form_three_round(
    f: &Factorization,
    data: &Dataset,
    params: RunParams,
    opts: &ThreeRoundOptions,
) -> Result<ProtocolEstimate> {
    let c = check_balanced(f)?;
    check_dataset(data, f.k())?;
    let (ell, n) = (f.rank(), data.n());
    let eps_bar = params.epsilon / 4.0;
    let w_inf = f.product().inf_norm();
    let tau = 4.0 * w_inf;
    let seed = params.seed;

    let mu = match &opts.mu_override {
        Some(mu) if mu.len() != ell => {
            return Err(Error::DimensionMismatch(format!(
                "μ_R has length {} but ℓ = {ell}",
                mu.len()
            )))
        }
        Some(mu) => mu.clone(),
        None => {
            projection_round(
                f.r(),
                data,
                seed,
                eps_bar,
                params.noise_off,
                opts.projection,
                Round::Projection,
            )?
            .mu
        }
    };

    // Round 2.
    let randomizer = VectorRandomizer::new(c, eps_bar, ell)?;
    let lt = f.l().transpose();
    let l_mu = f.l().tr_matvec(&mu)?;
    let mut y_sum = vec![0.0; ell];
    let mut scratch = vec![0.0; ell];
    let mut a_sum = 0.0;
    let a_scale = 2.0 * w_inf / eps_bar;
    for (i, b) in data.symbols().enumerate() {
        accumulate_vrand(
            &randomizer,
            lt.row(b),
            seed,
            i,
            Round::LeftMessage,
            params.noise_off,
            &mut scratch,
            &mut y_sum,
        )?;
        let mut rng = user_stream(seed, i, Round::InnerProductNoise);
        a_sum += l_mu[b] + noise(a_scale, &mut rng, params.noise_off)?;
    }
    let y_left: Vec<f64> = y_sum.iter().map(|s| s / n as f64).collect();

    // Round 3.
    let r_y = f.r().tr_matvec(&y_left)?;
    let y_mu = dot(&y_left, &mu);
    let v_scale = 2.0 * tau / eps_bar;
    let mut v_sum = 0.0;
    for (i, b) in data.symbols().enumerate() {
        let mut rng = user_stream(seed, i, Round::ClippedNoise);
        v_sum += clip(r_y[b] - y_mu, tau) + noise(v_scale, &mut rng, params.noise_off)?;
    }

    let mut ledger = BudgetLedger::default();
    ledger.record("projection message", MechanismId::Vrand, eps_bar);
    ledger.record("left message", MechanismId::Vrand, eps_bar);
    ledger.record("inner product", MechanismId::Laplace, eps_bar);
    ledger.record("clipped correction", MechanismId::Laplace, eps_bar);
    let stats = |round: &str, message_len| RoundStats {
        round: round.into(),
        messages: n,
        message_len,
    };
    Ok(ProtocolEstimate {
        value: Estimate::Scalar((a_sum + v_sum) / n as f64),
        transcript: vec![
            stats("projection", ell),
            stats("left message", ell),
            stats("inner product", 1),
            stats("clipped correction", 1),
        ],
        ledger,
        aggregates: vec![
            ("mu_r".into(), mu),
            ("mean_left".into(), y_left),
            ("mean_a".into(), vec![a_sum / n as f64]),
            ("mean_v".into(), vec![v_sum / n as f64]),
        ],
    })
}
