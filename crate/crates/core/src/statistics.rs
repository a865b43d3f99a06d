//! Pairwise statistics (degree-two U-statistics) estimated through
//! quadratic forms: Gini diversity, Kendall's τ, AUC, Gini mean difference
//! and other Lipschitz kernels.
//!
//! With `n` users and histogram `h`, `n²·hᵀWh = Σ_i W[x_i][x_i] + 2·S`
//! where `S` sums the kernel over unordered pairs, so
//! `F = S / C(n, 2) = (n·hᵀWh − d)/(n − 1)` with `d = Σ_b h_b·W[b][b]`.

use crate::error::{Error, Result};
use crate::kernels::{
    discretize_lipschitz, map_to_grid, sgn, BuiltWorkload, Discretization, LipschitzFn, WorkloadSpec, DEFAULT_MAX_GRID,
};
use crate::protocols::{quadratic_form_pipeline, JlPolicy, QfPipeline, QfProtocol, RunParams};
use crate::randomizers::{randomized_response_bit, rr_debias, BudgetLedger, MechanismId};
use crate::rng::{user_stream, Round, SeedPath};
use crate::workload::{Dataset, WorkloadMatrix};

/// A symmetric kernel `f` on `[k] × [k]` with its materialized matrix `W^f`.
#[derive(Clone, Debug)]
pub struct PairwiseKernel {
    pub name: String,
    pub workload: WorkloadMatrix,
    pub zero_diagonal: bool,
}

impl PairwiseKernel {
    pub fn from_fn(name: &str, k: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        Self::new(name, WorkloadMatrix::from_fn(k, |i, j| f(i + 1, j + 1))?)
    }

    pub fn new(name: &str, workload: WorkloadMatrix) -> Result<Self> {
        if !workload.is_symmetric() {
            return Err(Error::NotSymmetric);
        }
        let zero_diagonal = workload.diagonal().iter().all(|&d| d == 0.0);
        Ok(PairwiseKernel {
            name: name.to_string(),
            workload,
            zero_diagonal,
        })
    }

    pub fn k(&self) -> usize {
        self.workload.k()
    }

    /// `f(i, j)` for one-based `i, j`.
    pub fn eval(&self, i: usize, j: usize) -> f64 {
        self.workload.entries()[(i - 1, j - 1)]
    }

    /// Data-independent value of `Σ_b h_b·W[b][b]`, available when the
    /// diagonal is constant.
    pub fn diagonal_correction(&self) -> Option<f64> {
        let diag = self.workload.diagonal();
        let first = diag[0];
        diag.iter().all(|&d| d == first).then_some(first)
    }
}

/// `C(n, 2)⁻¹ · Σ_{i<j} f(x_i, x_j)` by a double loop.
pub fn pairwise_statistic_exact(kernel: &PairwiseKernel, data: &Dataset) -> Result<f64> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "a pairwise statistic needs n ≥ 2, got {n}"
        )));
    }
    let x = data.values();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += kernel.eval(x[i], x[j]);
        }
    }
    Ok(sum / (n as f64 * (n - 1) as f64 / 2.0))
}

/// `F = (n·qf − d)/(n − 1)`, with `d = 0` for zero-diagonal kernels and
/// `d` the supplied diagonal term otherwise.
pub fn ustat_from_qf(qf_value: f64, n: usize, kernel: &PairwiseKernel, diagonal: Option<f64>) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "a pairwise statistic needs n ≥ 2, got {n}"
        )));
    }
    let d = match (kernel.zero_diagonal, diagonal) {
        (true, _) => 0.0,
        (false, Some(d)) => d,
        (false, None) => return Err(Error::MissingDiagonalCorrection),
    };
    let n = n as f64;
    Ok((n * qf_value - d) / (n - 1.0))
}

/// Statistics addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub enum StatisticSpec {
    GiniDiversity,
    Kendall { k_a: usize, k_b: usize },
    Auc { k_a: usize },
    GiniMeanDifference,
    Lipschitz { func: LipschitzFn, lipschitz: f64 },
}

impl StatisticSpec {
    pub fn parse(name: &str) -> Result<Self> {
        if name == "gini_mean_difference" {
            return Ok(StatisticSpec::GiniMeanDifference);
        }
        if let Some(k) = name.strip_prefix("auc:") {
            let k_a = k.parse().map_err(|e| Error::Parse(format!("{name:?}: {e}")))?;
            return Ok(StatisticSpec::Auc { k_a });
        }
        match WorkloadSpec::parse(name)? {
            WorkloadSpec::GiniDiversity => Ok(StatisticSpec::GiniDiversity),
            WorkloadSpec::Kendall { k_a, k_b } => Ok(StatisticSpec::Kendall { k_a, k_b }),
            WorkloadSpec::Lipschitz { func, lipschitz } => Ok(StatisticSpec::Lipschitz { func, lipschitz }),
            _ => Err(Error::UnknownName(format!("statistic {name:?}"))),
        }
    }

    /// The kernel's workload name and the domain size it runs over.
    fn workload(&self, k: usize) -> (String, usize) {
        match self {
            StatisticSpec::GiniDiversity => ("gini_diversity".into(), k),
            StatisticSpec::Kendall { k_a, k_b } => (format!("kendall:{k_a}x{k_b}"), k_a * k_b),
            StatisticSpec::Auc { k_a } => (format!("kendall:{k_a}x2"), 2 * k_a),
            StatisticSpec::GiniMeanDifference => ("lipschitz:abs_diff:1".into(), k),
            StatisticSpec::Lipschitz { func, lipschitz } => (format!("lipschitz:{}:{lipschitz}", func.name()), k),
        }
    }
}

/// Outcome of a private statistic estimate.
#[derive(Clone, Debug)]
pub struct StatisticEstimate {
    pub value: f64,
    pub quadratic_form: f64,
    pub ledger: BudgetLedger,
    /// Estimate outside the statistic's natural range (reported as is).
    pub out_of_range: bool,
    /// AUC only: a debiased label count was not positive.
    pub degenerate: bool,
}

/// A statistic bound to a factorized kernel and a protocol configuration.
#[derive(Clone, Debug)]
pub struct PairwiseSetup {
    pub spec: StatisticSpec,
    pub kernel: PairwiseKernel,
    pub pipeline: QfPipeline,
}

impl PairwiseSetup {
    /// `k` is the domain size for kernels that do not fix their own.
    pub fn new(
        spec: StatisticSpec,
        k: usize,
        epsilon: f64,
        n: usize,
        policy: JlPolicy,
        jl_seed: SeedPath,
    ) -> Result<Self> {
        let (name, domain) = spec.workload(k);
        let built = WorkloadSpec::parse(&name)?.build(&name, domain)?;
        Self::from_built(spec, built, epsilon, n, policy, jl_seed)
    }

    fn from_built(
        spec: StatisticSpec,
        built: BuiltWorkload,
        epsilon: f64,
        n: usize,
        policy: JlPolicy,
        jl_seed: SeedPath,
    ) -> Result<Self> {
        let kernel = PairwiseKernel::new(&built.name, built.target.clone())?;
        let qf_epsilon = match spec {
            StatisticSpec::Auc { .. } => epsilon / 2.0,
            _ => epsilon,
        };
        let pipeline = quadratic_form_pipeline(built, qf_epsilon, n, policy, jl_seed)?;
        Ok(PairwiseSetup { spec, kernel, pipeline })
    }

    pub fn domain(&self) -> usize {
        self.kernel.k()
    }

    /// Brute-force value of the statistic on flattened data.
    pub fn exact(&self, data: &Dataset) -> Result<f64> {
        match self.spec {
            StatisticSpec::Auc { .. } => {
                let (scores, labels) = decode_auc(data);
                auc_exact(&scores, &labels)
            }
            _ => pairwise_statistic_exact(&self.kernel, data),
        }
    }

    pub fn run(&self, protocol: &QfProtocol, data: &Dataset, params: RunParams) -> Result<StatisticEstimate> {
        let n = data.n();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "a pairwise statistic needs n ≥ 2, got {n}"
            )));
        }
        let diagonal = self.kernel.diagonal_correction();
        match self.spec {
            StatisticSpec::Auc { .. } => {
                let half = RunParams {
                    epsilon: params.epsilon / 2.0,
                    ..params
                };
                let qf = self.pipeline.run(protocol, data, half)?;
                let q = qf.value.scalar().expect("scalar protocol");
                let f = ustat_from_qf(q, n, &self.kernel, diagonal)?;
                let (_, labels) = decode_auc(data);
                let mut ledger = qf.ledger;
                let positives = private_positive_count(&labels, half, &mut ledger)?;
                let pairs = n as f64 * (n - 1) as f64 / 2.0;
                let mut out = auc_from_parts(f * pairs, positives, n as f64);
                out.quadratic_form = q;
                out.ledger = ledger;
                Ok(out)
            }
            _ => {
                let qf = self.pipeline.run(protocol, data, params)?;
                let q = qf.value.scalar().expect("scalar protocol");
                let value = ustat_from_qf(q, n, &self.kernel, diagonal)?;
                let out_of_range = matches!(self.spec, StatisticSpec::Kendall { .. }) && value.abs() > 1.0;
                Ok(StatisticEstimate {
                    value,
                    quadratic_form: q,
                    ledger: qf.ledger,
                    out_of_range,
                    degenerate: false,
                })
            }
        }
    }
}

/// Flattens `(y, z)` with one-based `y ∈ [k_A]`, `z ∈ [k_B]` to `(y−1)·k_B + z`.
pub fn flatten_pairs(pairs: &[(usize, usize)], k_a: usize, k_b: usize) -> Result<Dataset> {
    Dataset::new(pairs.iter().map(|&(y, z)| (y - 1) * k_b + z).collect(), k_a * k_b)
}

/// Kendall's τ over `(y, z)` pairs, ties scoring 0.
pub fn kendall_tau_exact(pairs: &[(usize, usize)]) -> Result<f64> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("Kendall's τ needs n ≥ 2, got {n}")));
    }
    let sgn = |a: usize, b: usize| sgn(a as i64 - b as i64);
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += sgn(pairs[i].0, pairs[j].0) * sgn(pairs[i].1, pairs[j].1);
        }
    }
    Ok(s / (n as f64 * (n - 1) as f64 / 2.0))
}

pub fn kendall_tau_protocol(
    pairs: &[(usize, usize)],
    k_a: usize,
    k_b: usize,
    protocol: &QfProtocol,
    params: RunParams,
) -> Result<StatisticEstimate> {
    let data = flatten_pairs(pairs, k_a, k_b)?;
    let setup = PairwiseSetup::new(
        StatisticSpec::Kendall { k_a, k_b },
        0,
        params.epsilon,
        data.n(),
        JlPolicy::None,
        params.seed,
    )?;
    setup.run(protocol, &data, params)
}

/// AUC with ½ credit for ties:
/// `(1/(n⁺n⁻))·Σ_{pos, neg}(𝟏[y > y'] + ½·𝟏[y = y'])`.
pub fn auc_exact(scores: &[usize], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch("scores and labels differ in length".into()));
    }
    let (mut credit, mut pos, mut neg) = (0.0, 0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1.0;
        } else {
            neg += 1.0;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                credit += match scores[i].cmp(&scores[j]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::InvalidArgument("AUC needs both labels present".into()));
    }
    Ok(credit / (pos * neg))
}

/// Score and label of each user from the `A × {0, 1}` flattening.
pub fn decode_auc(data: &Dataset) -> (Vec<usize>, Vec<bool>) {
    data.symbols().map(|s| (s / 2 + 1, s % 2 == 1)).unzip()
}

pub fn encode_auc(scores: &[usize], labels: &[bool], k_a: usize) -> Result<Dataset> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch("scores and labels differ in length".into()));
    }
    let pairs: Vec<(usize, usize)> = scores
        .iter()
        .zip(labels)
        .map(|(&y, &l)| (y, usize::from(l) + 1))
        .collect();
    flatten_pairs(&pairs, k_a, 2)
}

/// Debiased count of positive labels under randomized response.
fn private_positive_count(labels: &[bool], params: RunParams, ledger: &mut BudgetLedger) -> Result<f64> {
    let mut reported = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let bit = if params.noise_off {
            l
        } else {
            randomized_response_bit(
                l,
                params.epsilon,
                &mut user_stream(params.seed, i, Round::LabelResponse),
            )?
        };
        reported += usize::from(bit);
    }
    ledger.record("label response", MechanismId::Rr, params.epsilon);
    Ok(if params.noise_off {
        reported as f64
    } else {
        rr_debias(reported as f64, labels.len() as f64, params.epsilon)
    })
}

/// `½ + S/(2·n̂⁺·n̂⁻)`. When a count is not positive the counts are floored
/// at 1 and the result clamped to `[0, 1]`.
pub fn auc_from_parts(pair_sum: f64, positives: f64, n: f64) -> StatisticEstimate {
    let negatives = n - positives;
    let degenerate = !(positives > 0.0 && negatives > 0.0);
    let value = if degenerate {
        (0.5 + pair_sum / (2.0 * positives.max(1.0) * negatives.max(1.0))).clamp(0.0, 1.0)
    } else {
        0.5 + pair_sum / (2.0 * positives * negatives)
    };
    StatisticEstimate {
        value,
        quadratic_form: f64::NAN,
        ledger: BudgetLedger::default(),
        out_of_range: !(0.0..=1.0).contains(&value),
        degenerate,
    }
}

/// Private AUC: `ε/2` for the sign-kernel quadratic form over
/// `A × {0, 1}`, `ε/2` for randomized response on the labels.
pub fn auc_protocol(
    scores: &[usize],
    labels: &[bool],
    k_a: usize,
    protocol: &QfProtocol,
    params: RunParams,
) -> Result<StatisticEstimate> {
    let data = encode_auc(scores, labels, k_a)?;
    let setup = PairwiseSetup::new(
        StatisticSpec::Auc { k_a },
        0,
        params.epsilon,
        data.n(),
        JlPolicy::None,
        params.seed,
    )?;
    setup.run(protocol, &data, params)
}

/// Gini mean difference `|x − y|` for inputs in `[0, 1]`, discretized to a
/// grid of `k = ⌈εn²⌉` points (clamped, padded to `2^q − 1`).
#[derive(Clone, Debug)]
pub struct GiniMeanDifference {
    pub discretization: Discretization,
    pub setup: PairwiseSetup,
}

pub fn gini_mean_difference_setup(
    n: usize,
    epsilon: f64,
    lipschitz: f64,
    max_grid: Option<usize>,
) -> Result<GiniMeanDifference> {
    let func = LipschitzFn::AbsDiff;
    let discretization = discretize_lipschitz(
        |x, y| lipschitz * func.eval(x, y),
        lipschitz,
        n,
        epsilon,
        max_grid.unwrap_or(DEFAULT_MAX_GRID),
    )?;
    let spec = StatisticSpec::Lipschitz { func, lipschitz };
    let setup = PairwiseSetup::new(spec, discretization.k, epsilon, n, JlPolicy::None, SeedPath::root(0))?;
    Ok(GiniMeanDifference { discretization, setup })
}

impl GiniMeanDifference {
    pub fn to_dataset(&self, xs: &[f64]) -> Result<Dataset> {
        let k = self.discretization.k;
        Dataset::new(xs.iter().map(|&x| map_to_grid(x, k)).collect(), k)
    }

    pub fn run(&self, xs: &[f64], protocol: &QfProtocol, params: RunParams) -> Result<StatisticEstimate> {
        self.setup.run(protocol, &self.to_dataset(xs)?, params)
    }

    /// Brute-force value on the grid-mapped inputs.
    pub fn exact_discretized(&self, xs: &[f64]) -> Result<f64> {
        self.setup.exact(&self.to_dataset(xs)?)
    }
}

/// Mean of `|x_i − x_j|` over unordered pairs of the raw inputs.
pub fn gini_mean_difference_exact(xs: &[f64]) -> Result<f64> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("needs n ≥ 2, got {n}")));
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (xs[i] - xs[j]).abs();
        }
    }
    Ok(s / (n as f64 * (n - 1) as f64 / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{histogram_of, quadratic_form_exact};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn off(seed: u64) -> RunParams {
        RunParams::new(1.0, SeedPath::root(seed)).noise_off(true)
    }

    fn gini(k: usize) -> PairwiseKernel {
        PairwiseKernel::from_fn("gini", k, |i, j| f64::from(u8::from(i != j))).unwrap()
    }

    #[test]
    fn exact_statistic_examples() {
        let g = gini(5);
        assert_eq!(
            pairwise_statistic_exact(&g, &Dataset::constant(3, 6, 5).unwrap()).unwrap(),
            0.0
        );
        let data = Dataset::new(vec![1, 1, 4, 4], 5).unwrap();
        assert!((pairwise_statistic_exact(&g, &data).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(pairwise_statistic_exact(&g, &Dataset::new(vec![1], 5).unwrap()).is_err());
    }

    #[test]
    fn ustat_conversion_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let g = gini(6);
        assert_eq!(ustat_from_qf(0.25, 2, &g, None).unwrap(), 0.5);
        let c = 0.7;
        let constant = PairwiseKernel::from_fn("c", 6, |i, j| if i == j { c } else { (i + j) as f64 / 10.0 }).unwrap();
        assert!(!constant.zero_diagonal);
        assert_eq!(constant.diagonal_correction(), Some(c));
        for _ in 0..100 {
            let n = rng.random_range(2..40);
            let data = Dataset::from_symbols((0..n).map(|_| rng.random_range(0..6)), 6).unwrap();
            let h = histogram_of(&data);
            for kernel in [&g, &constant] {
                let qf = quadratic_form_exact(kernel.workload.entries(), &h).unwrap();
                let f = ustat_from_qf(qf, n, kernel, kernel.diagonal_correction()).unwrap();
                assert!((f - pairwise_statistic_exact(kernel, &data).unwrap()).abs() < 1e-10);
            }
        }
        assert!(matches!(
            ustat_from_qf(0.1, 5, &constant, None),
            Err(Error::MissingDiagonalCorrection)
        ));
    }

    #[test]
    fn kendall_noise_off() {
        let p = QfProtocol::NonInteractive;
        let concordant: Vec<_> = (1..=5).map(|i| (i, i)).collect();
        assert!((kendall_tau_protocol(&concordant, 5, 5, &p, off(0)).unwrap().value - 1.0).abs() < 1e-10);
        let discordant: Vec<_> = (1..=5).map(|i| (i, 6 - i)).collect();
        assert!((kendall_tau_protocol(&discordant, 5, 5, &p, off(0)).unwrap().value + 1.0).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let pairs: Vec<_> = (0..30)
                .map(|_| (rng.random_range(1..=3), rng.random_range(1..=4)))
                .collect();
            let est = kendall_tau_protocol(&pairs, 3, 4, &p, off(1)).unwrap();
            assert!((est.value - kendall_tau_exact(&pairs).unwrap()).abs() < 1e-10);
            assert!(!est.out_of_range);
        }
    }

    #[test]
    fn auc_noise_off() {
        let p = QfProtocol::NonInteractive;
        let scores = [1, 2, 3, 4, 5, 6];
        let labels = [false, false, false, true, true, true];
        let est = auc_protocol(&scores, &labels, 6, &p, off(0)).unwrap();
        assert!((est.value - 1.0).abs() < 1e-10);
        assert_eq!(est.ledger.total(), 1.0);
        let same = auc_protocol(&[2, 5, 2, 5], &[true, true, false, false], 6, &p, off(0)).unwrap();
        assert!((same.value - 0.5).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let scores: Vec<usize> = (0..40).map(|_| rng.random_range(1..=5)).collect();
            let mut labels: Vec<bool> = (0..40).map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            let est = auc_protocol(&scores, &labels, 5, &p, off(2)).unwrap();
            assert!((est.value - auc_exact(&scores, &labels).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn auc_degenerate_counts_are_flagged() {
        let out = auc_from_parts(3.0, -2.0, 10.0);
        assert!(out.degenerate);
        assert!((0.0..=1.0).contains(&out.value));
        assert!(!auc_from_parts(3.0, 4.0, 10.0).degenerate);
    }

    #[test]
    fn gini_mean_difference_noise_off() {
        let gmd = gini_mean_difference_setup(20, 1.0, 1.0, Some(63)).unwrap();
        assert_eq!(gmd.discretization.k, 63);
        let p = QfProtocol::NonInteractive;
        let same = vec![0.3; 20];
        assert!(gmd.run(&same, &p, off(0)).unwrap().value.abs() < 1e-9);
        let halves: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        let est = gmd.run(&halves, &p, off(0)).unwrap().value;
        assert!((est - gmd.exact_discretized(&halves).unwrap()).abs() < 1e-9);
        // Grid ends sit 1/(2k) inside [0, 1].
        let raw = gini_mean_difference_exact(&halves).unwrap();
        assert!((est - raw).abs() <= 1.0 / 63.0 + 1e-12);
    }

    #[test]
    fn statistics_parse() {
        assert_eq!(StatisticSpec::parse("auc:7").unwrap(), StatisticSpec::Auc { k_a: 7 });
        assert_eq!(
            StatisticSpec::parse("gini_diversity").unwrap(),
            StatisticSpec::GiniDiversity
        );
        assert!(StatisticSpec::parse("prefix_tree").is_err());
        assert!(StatisticSpec::parse("auc:x").is_err());
    }
}
