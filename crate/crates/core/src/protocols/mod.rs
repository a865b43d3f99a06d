//! Simulated local-DP protocols: the matrix mechanism for linear queries,
//! the non-interactive and three-round quadratic-form protocols, the
//! projection mechanism, and the quadratic-form to linear-query reduction.
//!
//! Every protocol is a pure function of its inputs and a [`SeedPath`];
//! user `i` draws from `user_stream(seed, i, round)`, so runs are
//! reproducible regardless of scheduling. `noise_off` zeroes every noise
//! draw but keeps all deterministic arithmetic, clipping included.

mod projection;
mod reduction;
mod three_round;

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::{jl_reduce, jl_target_rows, BuiltWorkload, JlConfig};
use crate::matrix::{dot, Matrix};
use crate::randomizers::{BudgetLedger, MechanismId, VectorRandomizer};
use crate::rng::{user_stream, Round, SeedPath};
use crate::workload::{fact_balance, Dataset, Factorization, WorkloadMatrix};

pub use projection::{project_onto_hull, projection_mechanism, ProjectionOptions, ProjectionResult};
pub use reduction::lq_from_qf_reduction;
pub use three_round::{quadratic_form_three_round, ThreeRoundOptions};

/// Relative tolerance on `‖L‖₁→₂ = ‖R‖₁→₂`.
const BALANCE_TOL: f64 = 1e-9;

/// Per-run knobs shared by all protocols.
#[derive(Clone, Copy, Debug)]
pub struct RunParams {
    pub epsilon: f64,
    pub seed: SeedPath,
    pub noise_off: bool,
}

impl RunParams {
    pub fn new(epsilon: f64, seed: SeedPath) -> Self {
        RunParams {
            epsilon,
            seed,
            noise_off: false,
        }
    }

    pub fn noise_off(mut self, on: bool) -> Self {
        self.noise_off = on;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Estimate {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Estimate {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Estimate::Scalar(v) => Some(*v),
            Estimate::Vector(_) => None,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Estimate::Scalar(v) => std::slice::from_ref(v),
            Estimate::Vector(v) => v,
        }
    }

    fn shifted(self, offset: f64) -> Estimate {
        match self {
            Estimate::Scalar(v) => Estimate::Scalar(v + offset),
            Estimate::Vector(v) => Estimate::Vector(v.into_iter().map(|x| x + offset).collect()),
        }
    }
}

/// Message counts for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundStats {
    pub round: String,
    pub messages: usize,
    /// Reals per message.
    pub message_len: usize,
}

#[derive(Clone, Debug)]
pub struct ProtocolEstimate {
    pub value: Estimate,
    pub transcript: Vec<RoundStats>,
    /// Budget spent by each real user.
    pub ledger: BudgetLedger,
    /// Analyst-side aggregates per round, for transcript dumps.
    pub aggregates: Vec<(String, Vec<f64>)>,
}

impl ProtocolEstimate {
    /// Writes the per-round aggregates: a name line, then the vector as a
    /// `1 × d` matrix, then a blank line.
    pub fn dump_transcript(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (name, v) in &self.aggregates {
            let m = Matrix::new(1, v.len(), v.clone())?;
            let _ = writeln!(out, "{name}\n{}", m.to_text());
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Returns the common column bound `C` of a balanced factorization.
pub(crate) fn check_balanced(f: &Factorization) -> Result<f64> {
    let (nl, nr) = (f.l().one_to_two_norm(), f.r().one_to_two_norm());
    if (nl - nr).abs() > BALANCE_TOL * nl.max(nr) {
        return Err(Error::Unbalanced {
            norm: nl.max(nr),
            bound: nl.min(nr),
        });
    }
    Ok(nl.max(nr))
}

pub(crate) fn check_dataset(data: &Dataset, k: usize) -> Result<()> {
    if data.k() != k {
        return Err(Error::DimensionMismatch(format!(
            "dataset over k={} but workload over k={k}",
            data.k()
        )));
    }
    if data.n() == 0 {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    Ok(())
}

/// Adds user `user`'s privatized copy of `x` to `acc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_vrand(
    randomizer: &VectorRandomizer,
    x: &[f64],
    seed: SeedPath,
    user: usize,
    round: Round,
    noise_off: bool,
    scratch: &mut [f64],
    acc: &mut [f64],
) -> Result<()> {
    if noise_off {
        for (a, v) in acc.iter_mut().zip(x) {
            *a += v;
        }
        return Ok(());
    }
    let mut rng = user_stream(seed, user, round);
    randomizer.randomize_into(x, &mut rng, scratch)?;
    for (a, v) in acc.iter_mut().zip(scratch.iter()) {
        *a += v;
    }
    Ok(())
}

/// Matrix mechanism: user `i` sends `VRand_ε(R·e_{x_i})`, the analyst
/// returns `Lᵀ` times the mean message.
pub fn linear_query_protocol(f: &Factorization, data: &Dataset, params: RunParams) -> Result<ProtocolEstimate> {
    let c = check_balanced(f)?;
    check_dataset(data, f.k())?;
    let ell = f.rank();
    let randomizer = VectorRandomizer::new(c, params.epsilon, ell)?;
    let rt = f.r().transpose();
    let mut sum = vec![0.0; ell];
    let mut scratch = vec![0.0; ell];
    for (i, b) in data.symbols().enumerate() {
        accumulate_vrand(
            &randomizer,
            rt.row(b),
            params.seed,
            i,
            Round::RightMessage,
            params.noise_off,
            &mut scratch,
            &mut sum,
        )?;
    }
    let n = data.n() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let value = f.l().tr_matvec(&mean)?;
    let mut ledger = BudgetLedger::default();
    ledger.record("right message", MechanismId::Vrand, params.epsilon);
    Ok(ProtocolEstimate {
        value: Estimate::Vector(value),
        transcript: vec![RoundStats {
            round: "messages".into(),
            messages: data.n(),
            message_len: ell,
        }],
        ledger,
        aggregates: vec![("mean_right".into(), mean)],
    })
}

/// Sums of left and right messages from a group of users.
#[derive(Clone, Debug, PartialEq)]
pub struct QfAccumulator {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub count: usize,
}

impl QfAccumulator {
    pub fn new(dim: usize) -> Self {
        QfAccumulator {
            left: vec![0.0; dim],
            right: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn merged(&self, other: &QfAccumulator) -> QfAccumulator {
        QfAccumulator {
            left: self.left.iter().zip(&other.left).map(|(a, b)| a + b).collect(),
            right: self.right.iter().zip(&other.right).map(|(a, b)| a + b).collect(),
            count: self.count + other.count,
        }
    }
}

/// Non-interactive quadratic-form protocol split into its local randomizer
/// and its analyst-side estimator. Each user spends `ε/2` on `VRand(L·e_x)`
/// and `ε/2` on `VRand(R·e_x)`; the estimate is
/// `⟨mean yᴸ, mean yᴿ⟩`.
#[derive(Clone, Debug)]
pub struct NonInteractiveQf {
    lt: Matrix,
    rt: Matrix,
    randomizer: VectorRandomizer,
    epsilon: f64,
}

impl NonInteractiveQf {
    pub fn new(f: &Factorization, epsilon: f64) -> Result<Self> {
        let c = check_balanced(f)?;
        Ok(NonInteractiveQf {
            lt: f.l().transpose(),
            rt: f.r().transpose(),
            randomizer: VectorRandomizer::new(c, epsilon / 2.0, f.rank())?,
            epsilon,
        })
    }

    pub fn k(&self) -> usize {
        self.lt.rows()
    }

    pub fn message_dim(&self) -> usize {
        self.lt.cols()
    }

    /// Runs the local randomizer for users `first_user, first_user+1, …`
    /// holding `data` and sums their messages.
    pub fn collect(&self, data: &Dataset, seed: SeedPath, first_user: usize, noise_off: bool) -> Result<QfAccumulator> {
        check_dataset(data, self.k())?;
        let mut acc = QfAccumulator::new(self.message_dim());
        let mut scratch = vec![0.0; self.message_dim()];
        for (i, b) in data.symbols().enumerate() {
            let user = first_user + i;
            accumulate_vrand(
                &self.randomizer,
                self.lt.row(b),
                seed,
                user,
                Round::LeftMessage,
                noise_off,
                &mut scratch,
                &mut acc.left,
            )?;
            accumulate_vrand(
                &self.randomizer,
                self.rt.row(b),
                seed,
                user,
                Round::RightMessage,
                noise_off,
                &mut scratch,
                &mut acc.right,
            )?;
        }
        acc.count = data.n();
        Ok(acc)
    }

    pub fn estimate(&self, acc: &QfAccumulator) -> f64 {
        let n = acc.count as f64;
        dot(&acc.left, &acc.right) / (n * n)
    }

    pub fn ledger(&self) -> BudgetLedger {
        let mut ledger = BudgetLedger::default();
        ledger.record("left message", MechanismId::Vrand, self.epsilon / 2.0);
        ledger.record("right message", MechanismId::Vrand, self.epsilon / 2.0);
        ledger
    }

    pub fn run(&self, data: &Dataset, params: RunParams) -> Result<ProtocolEstimate> {
        let acc = self.collect(data, params.seed, 0, params.noise_off)?;
        let n = acc.count as f64;
        Ok(ProtocolEstimate {
            value: Estimate::Scalar(self.estimate(&acc)),
            transcript: vec![RoundStats {
                round: "messages".into(),
                messages: 2 * data.n(),
                message_len: self.message_dim(),
            }],
            ledger: self.ledger(),
            aggregates: vec![
                ("mean_left".into(), acc.left.iter().map(|v| v / n).collect()),
                ("mean_right".into(), acc.right.iter().map(|v| v / n).collect()),
            ],
        })
    }
}

pub fn quadratic_form_noninteractive(f: &Factorization, data: &Dataset, params: RunParams) -> Result<ProtocolEstimate> {
    NonInteractiveQf::new(f, params.epsilon)?.run(data, params)
}

/// Which quadratic-form protocol a pipeline runs.
#[derive(Clone, Debug, PartialEq)]
pub enum QfProtocol {
    NonInteractive,
    ThreeRound(ThreeRoundOptions),
}

impl QfProtocol {
    pub fn run(&self, f: &Factorization, data: &Dataset, params: RunParams) -> Result<ProtocolEstimate> {
        match self {
            QfProtocol::NonInteractive => quadratic_form_noninteractive(f, data, params),
            QfProtocol::ThreeRound(opts) => quadratic_form_three_round(f, data, params, opts),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JlPolicy {
    None,
    /// Rank-restrict to `α = γ/(ε√n)` when that shrinks `ℓ`.
    #[serde(alias = "paper")]
    Restrict,
}

/// A workload prepared for a given `(ε, n)`, with the applied reduction.
#[derive(Clone, Debug)]
pub struct QfPipeline {
    pub workload: BuiltWorkload,
    /// Rows of the projection when one was applied.
    pub jl_rows: Option<usize>,
}

impl QfPipeline {
    pub fn rank(&self) -> usize {
        self.workload.factorization.rank()
    }

    pub fn alpha(&self) -> f64 {
        self.workload.factorization.alpha()
    }

    pub fn column_bound(&self) -> f64 {
        self.workload.factorization.column_bound()
    }

    /// Quadratic-form estimate of `hᵀWh`, offset restored.
    pub fn run(&self, protocol: &QfProtocol, data: &Dataset, params: RunParams) -> Result<ProtocolEstimate> {
        let mut est = protocol.run(&self.workload.factorization, data, params)?;
        est.value = est.value.shifted(self.workload.offset);
        Ok(est)
    }

    /// Linear-query estimate of `Wh` via the matrix mechanism.
    pub fn run_linear(&self, data: &Dataset, params: RunParams) -> Result<ProtocolEstimate> {
        let mut est = linear_query_protocol(&self.workload.factorization, data, params)?;
        est.value = est.value.shifted(self.workload.offset);
        Ok(est)
    }

    pub fn run_reduction(&self, protocol: &QfProtocol, data: &Dataset, params: RunParams) -> Result<ProtocolEstimate> {
        lq_from_qf_reduction(protocol, &self.workload, data, params)
    }
}

/// Balances the workload's factorization and, under [`JlPolicy::Restrict`],
/// projects it to rank `ℓ'` at `α = γ/(ε√n)` unless `ℓ ≤ ℓ'` already.
pub fn quadratic_form_pipeline(
    mut workload: BuiltWorkload,
    epsilon: f64,
    n: usize,
    policy: JlPolicy,
    jl_seed: SeedPath,
) -> Result<QfPipeline> {
    workload.factorization = fact_balance(&workload.factorization)?;
    let mut jl_rows = None;
    if policy == JlPolicy::Restrict {
        let f = &workload.factorization;
        let gamma = f.norm_product();
        let target_alpha = gamma / (epsilon * (n as f64).sqrt());
        let rows = jl_target_rows(JlConfig::default().constant, 0.5 * target_alpha / gamma, f.k());
        if rows < f.rank() && target_alpha < gamma {
            let reduced = jl_reduce(f, target_alpha, JlConfig::default(), &mut jl_seed.rng())?;
            jl_rows = Some(reduced.rows);
            workload.factorization = fact_balance(&reduced.factorization)?;
        }
    }
    Ok(QfPipeline { workload, jl_rows })
}

/// Runs an inner protocol on a surrogate `W̃` while the quantity of
/// interest is `hᵀWh`; the extra bias is at most `‖W̃ − W‖∞`.
#[derive(Clone, Debug)]
pub struct ApproximateWorkload {
    pub target: WorkloadMatrix,
    pub surrogate: WorkloadMatrix,
    pub bias_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApproximateOutcome {
    pub estimate: f64,
    /// Exact `hᵀWh` on the real target.
    pub target_value: f64,
    pub bias_bound: f64,
}

impl ApproximateWorkload {
    pub fn new(target: WorkloadMatrix, surrogate: WorkloadMatrix) -> Result<Self> {
        let bias_bound = surrogate.entries().sub(target.entries())?.inf_norm();
        Ok(ApproximateWorkload {
            target,
            surrogate,
            bias_bound,
        })
    }

    pub fn run(&self, data: &Dataset, inner: impl FnOnce(&Dataset) -> Result<f64>) -> Result<ApproximateOutcome> {
        let h = crate::workload::histogram_of(data);
        Ok(ApproximateOutcome {
            estimate: inner(data)?,
            target_value: crate::workload::quadratic_form_exact(self.target.entries(), &h)?,
            bias_bound: self.bias_bound,
        })
    }
}

pub fn approximate_workload_protocol(target: WorkloadMatrix, surrogate: WorkloadMatrix) -> Result<ApproximateWorkload> {
    ApproximateWorkload::new(target, surrogate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_workload, gini_diversity_fact, identity_fact};
    use crate::workload::{histogram_of, linear_queries_exact, quadratic_form_exact};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut impl Rng, n: usize, k: usize) -> Dataset {
        Dataset::from_symbols((0..n).map(|_| rng.random_range(0..k)), k).unwrap()
    }

    #[test]
    fn linear_queries_noise_off_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = gini_diversity_fact(6).unwrap();
        let data = random_dataset(&mut rng, 40, 6);
        let est = linear_query_protocol(&f, &data, RunParams::new(1.0, SeedPath::root(1)).noise_off(true)).unwrap();
        let exact = linear_queries_exact(&f.product(), &histogram_of(&data)).unwrap();
        for (a, b) in est.value.as_slice().iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert_eq!(est.ledger.total(), 1.0);
    }

    #[test]
    fn noninteractive_noise_off_exact_and_ledger() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = gini_diversity_fact(9).unwrap();
        let data = random_dataset(&mut rng, 100, 9);
        let est =
            quadratic_form_noninteractive(&f, &data, RunParams::new(0.7, SeedPath::root(2)).noise_off(true)).unwrap();
        let exact = quadratic_form_exact(&f.product(), &histogram_of(&data)).unwrap();
        assert!((est.value.scalar().unwrap() - exact).abs() <= 1e-10);
        assert_eq!(est.ledger.total(), 0.7);
        assert_eq!(est.ledger.touches().len(), 2);
    }

    #[test]
    fn protocols_are_seed_deterministic() {
        let f = identity_fact(4).unwrap();
        let data = Dataset::new(vec![1, 2, 2, 4, 3], 4).unwrap();
        let run = |s| {
            quadratic_form_noninteractive(&f, &data, RunParams::new(1.0, SeedPath::root(s)))
                .unwrap()
                .value
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn unbalanced_factorization_rejected() {
        let f = crate::workload::fact_scale(&identity_fact(3).unwrap(), 2.0).unwrap();
        let data = Dataset::new(vec![1], 3).unwrap();
        let p = RunParams::new(1.0, SeedPath::root(0));
        assert!(matches!(
            linear_query_protocol(&f, &data, p),
            Err(Error::Unbalanced { .. })
        ));
        assert!(matches!(
            quadratic_form_noninteractive(&f, &data, p),
            Err(Error::Unbalanced { .. })
        ));
    }

    #[test]
    fn noninteractive_is_unbiased() {
        let f = gini_diversity_fact(4).unwrap();
        let data = Dataset::new(vec![1, 1, 2, 3, 4, 4, 4, 2], 4).unwrap();
        let exact = quadratic_form_exact(&f.product(), &histogram_of(&data)).unwrap();
        let proto = NonInteractiveQf::new(&f, 1.0).unwrap();
        let t = 4000;
        let errs: Vec<f64> = (0..t)
            .map(|s| {
                proto
                    .run(&data, RunParams::new(1.0, SeedPath::root(9).child(s)))
                    .unwrap()
                    .value
                    .scalar()
                    .unwrap()
                    - exact
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / t as f64;
        let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (t - 1) as f64).sqrt();
        assert!(mean.abs() <= 5.0 * sd / (t as f64).sqrt(), "mean {mean} sd {sd}");
    }

    #[test]
    fn pipeline_policies() {
        let w = build_workload("gini_diversity", 256).unwrap();
        let none = quadratic_form_pipeline(w.clone(), 1.0, 10_000, JlPolicy::None, SeedPath::root(3)).unwrap();
        assert_eq!(none.rank(), 257);
        // The JL target is far above ℓ = 257 here, so no projection happens.
        let restricted = quadratic_form_pipeline(w, 1.0, 10_000, JlPolicy::Restrict, SeedPath::root(3)).unwrap();
        assert_eq!(restricted.jl_rows, None);
        assert_eq!(restricted.alpha(), 0.0);
    }

    #[test]
    fn pipeline_restores_offset() {
        let w = build_workload("lipschitz:abs_diff:1", 7).unwrap();
        let p = quadratic_form_pipeline(w.clone(), 1.0, 10, JlPolicy::None, SeedPath::root(0)).unwrap();
        let data = Dataset::new(vec![1, 7, 3, 3], 7).unwrap();
        let est = p
            .run(
                &QfProtocol::NonInteractive,
                &data,
                RunParams::new(1.0, SeedPath::root(4)).noise_off(true),
            )
            .unwrap();
        let exact = quadratic_form_exact(w.target.entries(), &histogram_of(&data)).unwrap();
        assert!((est.value.scalar().unwrap() - exact).abs() <= 1e-12);
        let lq = p
            .run_linear(&data, RunParams::new(1.0, SeedPath::root(4)).noise_off(true))
            .unwrap();
        let exact = linear_queries_exact(w.target.entries(), &histogram_of(&data)).unwrap();
        for (a, b) in lq.value.as_slice().iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn approximate_workload_bias() {
        let k = 5;
        let w = WorkloadMatrix::from_fn(k, |i, j| (i * j) as f64 / 10.0).unwrap();
        let data = Dataset::new(vec![1, 2, 5, 5], k).unwrap();
        let h = histogram_of(&data);
        let same = approximate_workload_protocol(w.clone(), w.clone()).unwrap();
        let out = same
            .run(&data, |d| quadratic_form_exact(w.entries(), &histogram_of(d)))
            .unwrap();
        assert_eq!(out.estimate, out.target_value);
        assert_eq!(out.bias_bound, 0.0);
        let alpha = 0.25;
        let shifted = WorkloadMatrix::new(w.entries().add(&Matrix::filled(k, k, alpha)).unwrap()).unwrap();
        let wrapped = approximate_workload_protocol(w.clone(), shifted.clone()).unwrap();
        let out = wrapped
            .run(&data, |_| quadratic_form_exact(shifted.entries(), &h))
            .unwrap();
        assert!((out.estimate - out.target_value - alpha).abs() < 1e-12);
        assert!((out.bias_bound - alpha).abs() < 1e-15);
        assert!(approximate_workload_protocol(w, WorkloadMatrix::new(Matrix::identity(3)).unwrap()).is_err());
    }

    #[test]
    fn transcript_dump_round_trips() {
        let f = identity_fact(3).unwrap();
        let data = Dataset::new(vec![1, 2, 3], 3).unwrap();
        let est = linear_query_protocol(&f, &data, RunParams::new(1.0, SeedPath::root(0))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        est.dump_transcript(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let body: String = text.lines().skip(1).collect::<Vec<_>>().join("\n");
        let m = Matrix::from_text(&body).unwrap();
        assert_eq!(m.as_slice(), est.aggregates[0].1.as_slice());
    }
}
