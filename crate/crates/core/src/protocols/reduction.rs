use crate::error::{Error, Result};
use crate::kernels::BuiltWorkload;
use crate::matrix::dot;
use crate::workload::Dataset;

use super::{check_dataset, Estimate, NonInteractiveQf, ProtocolEstimate, QfProtocol, RoundStats, RunParams};

/// Answers the linear queries `Wh` with a non-interactive quadratic-form
/// protocol at budget `ε/2`.
///
/// One instance on the real data gives `ẑ ≈ hᵀWh`. A second, independent
/// batch of real messages is pooled with `n` simulated messages from the
/// constant dataset `(j, …, j)`, so the estimator sees the histogram
/// `½(h + e_j)` and returns `z'_j`. Then
/// `ẑ_j = 2z'_j − ½ẑ − ½W_jj`. Each real user runs the randomizer twice.
pub fn lq_from_qf_reduction(
    protocol: &QfProtocol,
    workload: &BuiltWorkload,
    data: &Dataset,
    params: RunParams,
) -> Result<ProtocolEstimate> {
    if !matches!(protocol, QfProtocol::NonInteractive) {
        return Err(Error::InvalidArgument(
            "the reduction needs a standalone local randomizer; interactive protocols are not supported".into(),
        ));
    }
    if !workload.target.is_symmetric() {
        return Err(Error::NotSymmetric);
    }
    let f = &workload.factorization;
    check_dataset(data, f.k())?;
    let half = NonInteractiveQf::new(f, params.epsilon / 2.0)?;
    let (k, n) = (f.k(), data.n());
    let seed = params.seed;

    let whole = half.collect(data, seed.child(0), 0, params.noise_off)?;
    let z_hat = half.estimate(&whole);
    let real = half.collect(data, seed.child(1), 0, params.noise_off)?;
    let simulated_seed = seed.child(2);
    let mut value = Vec::with_capacity(k);
    for j in 0..k {
        let constant = Dataset::constant(j + 1, n, k)?;
        let sim = half.collect(&constant, simulated_seed.child(j as u64), n, params.noise_off)?;
        let z_j = half.estimate(&real.merged(&sim));
        let diag = dot(&f.l().column(j), &f.r().column(j));
        value.push(2.0 * z_j - 0.5 * z_hat - 0.5 * diag + workload.offset);
    }

    let mut ledger = half.ledger();
    ledger.extend(&half.ledger());
    Ok(ProtocolEstimate {
        value: Estimate::Vector(value),
        transcript: vec![
            RoundStats {
                round: "quadratic form".into(),
                messages: 2 * n,
                message_len: half.message_dim(),
            },
            RoundStats {
                round: "pooled real".into(),
                messages: 2 * n,
                message_len: half.message_dim(),
            },
            RoundStats {
                round: "simulated".into(),
                messages: 2 * n * k,
                message_len: half.message_dim(),
            },
        ],
        ledger,
        aggregates: vec![("z_hat".into(), vec![z_hat])],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_workload, svd_fact, BuiltWorkload};
    use crate::matrix::Matrix;
    use crate::protocols::ThreeRoundOptions;
    use crate::rng::SeedPath;
    use crate::workload::{histogram_of, linear_queries_exact, WorkloadMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn built(w: WorkloadMatrix) -> BuiltWorkload {
        BuiltWorkload {
            name: "test".into(),
            factorization: svd_fact(&w).unwrap(),
            target: w,
            offset: 0.0,
        }
    }

    #[test]
    fn two_symbol_example() {
        let w = WorkloadMatrix::new(Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        let data = Dataset::new(vec![1, 1], 2).unwrap();
        let est = lq_from_qf_reduction(
            &QfProtocol::NonInteractive,
            &built(w),
            &data,
            RunParams::new(1.0, SeedPath::root(0)).noise_off(true),
        )
        .unwrap();
        let v = est.value.as_slice();
        assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        assert_eq!(est.ledger.total(), 1.0);
    }

    #[test]
    fn noise_off_exact_on_random_symmetric_workloads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let k = rng.random_range(2..=8);
            let a = Matrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
            let w = WorkloadMatrix::new(a.add(&a.transpose()).unwrap()).unwrap();
            let data = Dataset::from_symbols((0..30).map(|_| rng.random_range(0..k)), k).unwrap();
            let exact = linear_queries_exact(w.entries(), &histogram_of(&data)).unwrap();
            let est = lq_from_qf_reduction(
                &QfProtocol::NonInteractive,
                &built(w),
                &data,
                RunParams::new(1.0, SeedPath::root(1)).noise_off(true),
            )
            .unwrap();
            for (a, b) in est.value.as_slice().iter().zip(&exact) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_interactive_and_asymmetric() {
        let data = Dataset::new(vec![1], 3).unwrap();
        let p = RunParams::new(1.0, SeedPath::root(0));
        let gini = build_workload("gini_diversity", 3).unwrap();
        let three = QfProtocol::ThreeRound(ThreeRoundOptions::default());
        assert!(matches!(
            lq_from_qf_reduction(&three, &gini, &data, p),
            Err(Error::InvalidArgument(_))
        ));
        let prefix = build_workload("prefix_tree", 3).unwrap();
        assert!(matches!(
            lq_from_qf_reduction(&QfProtocol::NonInteractive, &prefix, &data, p),
            Err(Error::NotSymmetric)
        ));
    }
}
