use std::path::PathBuf;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SeedPath;
use crate::workload::Dataset;

/// Synthetic (or file-backed) input generators.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    PointMass(usize),
    Uniform,
    /// `b1` with probability `p`, otherwise `b2`.
    TwoPoint {
        b1: usize,
        b2: usize,
        p: f64,
    },
    /// `⌈n/2⌉` users at 1 and the rest at `k`.
    HalvesExtremes,
    /// Whitespace-separated one-based symbols; `n` must not exceed the count.
    File(PathBuf),
}

impl DatasetSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("dataset {spec:?}: {e}"));
        match spec.split_once(':') {
            None if spec == "uniform" => Ok(DatasetSpec::Uniform),
            None if spec == "halves_extremes" => Ok(DatasetSpec::HalvesExtremes),
            Some(("point_mass", b)) => Ok(DatasetSpec::PointMass(b.parse().map_err(|e| bad(&e))?)),
            Some(("two_point", args)) => {
                let parts: Vec<&str> = args.split(',').collect();
                if parts.len() != 3 {
                    return Err(bad(&"expected two_point:<b1>,<b2>,<p>"));
                }
                let p: f64 = parts[2].parse().map_err(|e| bad(&e))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(bad(&"p must lie in [0, 1]"));
                }
                Ok(DatasetSpec::TwoPoint {
                    b1: parts[0].parse().map_err(|e| bad(&e))?,
                    b2: parts[1].parse().map_err(|e| bad(&e))?,
                    p,
                })
            }
            Some(("file", path)) => Ok(DatasetSpec::File(PathBuf::from(path))),
            _ => Err(Error::UnknownName(format!("dataset generator {spec:?}"))),
        }
    }

    pub fn generate(&self, k: usize, n: usize, seed: SeedPath) -> Result<Dataset> {
        let mut rng = seed.rng();
        let values = match self {
            DatasetSpec::PointMass(b) => vec![*b; n],
            DatasetSpec::Uniform => (0..n).map(|_| rng.random_range(1..=k)).collect(),
            DatasetSpec::TwoPoint { b1, b2, p } => (0..n)
                .map(|_| if rng.random::<f64>() < *p { *b1 } else { *b2 })
                .collect(),
            DatasetSpec::HalvesExtremes => (0..n).map(|i| if i < n.div_ceil(2) { 1 } else { k }).collect(),
            DatasetSpec::File(path) => {
                let text = std::fs::read_to_string(path)?;
                let all = text
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|e| Error::Parse(format!("{}: {t:?}: {e}", path.display())))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if all.len() < n {
                    return Err(Error::Parse(format!(
                        "{} holds {} values, need {n}",
                        path.display(),
                        all.len()
                    )));
                }
                all[..n].to_vec()
            }
        };
        Dataset::new(values, k)
    }
}

pub fn generate_dataset(spec: &str, k: usize, n: usize, seed: SeedPath) -> Result<Dataset> {
    DatasetSpec::parse(spec)?.generate(k, n, seed)
}
