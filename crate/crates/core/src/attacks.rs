//! Bias injection on outgoing PDC messages.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::admm::{ConsensusMsg, TruthRecord};
use crate::error::{Error, Result};

/// Constant bias given either as a scalar times the all-ones vector or as a full vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BiasValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BiasGenerator {
    /// Same vector at every iteration.
    Constant { value: BiasValue },
    /// Fresh draw per iteration, uniform on `[0, scale)` per coordinate.
    IidRandom { scale: f64, seed: u64 },
    /// `value` at each listed coordinate (0-based), zero elsewhere.
    Sparse { indices: Vec<usize>, value: f64 },
}

impl BiasGenerator {
    fn validate(&self, dim: usize) -> Result<()> {
        let finite = |v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite("bias value".into()))
            }
        };
        match self {
            BiasGenerator::Constant { value: BiasValue::Scalar(v) } => finite(*v),
            BiasGenerator::Constant { value: BiasValue::Vector(v) } => {
                if v.len() != dim {
                    return Err(Error::Dimension(format!("bias vector has {} entries, expected {dim}", v.len())));
                }
                v.iter().try_for_each(|x| finite(*x))
            }
            BiasGenerator::IidRandom { scale, .. } => finite(*scale),
            BiasGenerator::Sparse { indices, value } => {
                if let Some(i) = indices.iter().find(|&&i| i >= dim) {
                    return Err(Error::Dimension(format!("sparse index {i} out of range for dimension {dim}")));
                }
                finite(*value)
            }
        }
    }

    /// Output for `pdc` at iteration `k`; random draws depend only on `(seed, pdc, k)`.
    fn generate(&self, pdc: usize, k: usize, dim: usize) -> DVector<f64> {
        match self {
            BiasGenerator::Constant { value: BiasValue::Scalar(v) } => DVector::from_element(dim, *v),
            BiasGenerator::Constant { value: BiasValue::Vector(v) } => DVector::from_column_slice(v),
            BiasGenerator::IidRandom { scale, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(pdc as u64);
                // one f64 consumes one u64, i.e. two 32-bit words
                rng.set_word_pos(2 * (k as u128) * (dim as u128));
                DVector::from_fn(dim, |_, _| scale * rng.gen::<f64>())
            }
            BiasGenerator::Sparse { indices, value } => {
                let mut d = DVector::zeros(dim);
                for &i in indices {
                    d[i] = *value;
                }
                d
            }
        }
    }
}

/// Compromised PDCs and their bias generators. PDC ids are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub attacked: BTreeSet<usize>,
    pub generators: BTreeMap<usize, BiasGenerator>,
    #[serde(default = "one")]
    pub start_iteration: usize,
    #[serde(default)]
    pub corrupt_dual: bool,
}

fn one() -> usize {
    1
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            attacked: BTreeSet::new(),
            generators: BTreeMap::new(),
            start_iteration: 1,
            corrupt_dual: false,
        }
    }

    /// Same generator on every listed PDC.
    pub fn uniform(attacked: &[usize], generator: BiasGenerator) -> Self {
        Self {
            attacked: attacked.iter().copied().collect(),
            generators: attacked.iter().map(|&i| (i, generator.clone())).collect(),
            start_iteration: 1,
            corrupt_dual: false,
        }
    }

    pub fn validate(&self, n_pdcs: usize, dim: usize) -> Result<()> {
        if let Some(i) = self.attacked.iter().find(|&&i| i == 0 || i > n_pdcs) {
            return Err(Error::InvalidArgument(format!("attacked PDC {i} outside 1..={n_pdcs}")));
        }
        if !self.attacked.is_empty() && self.attacked.len() >= n_pdcs {
            return Err(Error::InvalidArgument("at least one PDC must be unattacked".into()));
        }
        for (pdc, g) in &self.generators {
            if !self.attacked.contains(pdc) {
                return Err(Error::InvalidArgument(format!("generator for unattacked PDC {pdc}")));
            }
            g.validate(dim)?;
        }
        if let Some(i) = self.attacked.iter().find(|i| !self.generators.contains_key(i)) {
            return Err(Error::InvalidArgument(format!("attacked PDC {i} has no generator")));
        }
        Ok(())
    }
}

pub fn bias_at(spec: &AttackSpec, pdc: usize, k: usize, dim: usize) -> DVector<f64> {
    if k < spec.start_iteration || !spec.attacked.contains(&pdc) {
        return DVector::zeros(dim);
    }
    match spec.generators.get(&pdc) {
        Some(g) => g.generate(pdc, k, dim),
        None => DVector::zeros(dim),
    }
}

/// Adds the sender's bias to the reported primal, and to the reported dual when
/// `corrupt_dual` is set.
pub fn apply_attack(msg: ConsensusMsg, spec: &AttackSpec) -> ConsensusMsg {
    let bias = bias_at(spec, msg.sender, msg.iteration, msg.a_reported.len());
    if bias.iter().all(|&b| b == 0.0) {
        return msg;
    }
    let w_reported = if spec.corrupt_dual { &msg.w_reported + &bias } else { msg.w_reported };
    ConsensusMsg {
        a_reported: &msg.a_reported + &bias,
        w_reported,
        ..msg
    }
}

/// Which localization requirements hold at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementCheck {
    pub k: usize,
    /// Attacked estimates separate from the unbiased group (gap condition).
    pub separation: bool,
    /// Attacked estimates exceed the second-minimum threshold.
    pub second_minimum: bool,
    /// Unattacked estimates stay within one group.
    pub cohesion: bool,
}

impl RequirementCheck {
    pub fn guaranteed(&self) -> bool {
        self.separation && self.second_minimum && self.cohesion
    }
}

/// Evaluates the localization requirements on ground-truth estimates and biases.
///
/// Norms are used exactly as the inequalities are written: the bias and the
/// attacked estimate enter through infinity norms, everything else through
/// Euclidean norms. The first two conditions are false when no active PDC is
/// attacked.
pub fn check_bias_requirements(truth: &[TruthRecord], attacked: &BTreeSet<usize>) -> Vec<RequirementCheck> {
    truth
        .iter()
        .map(|rec| {
            let active: Vec<usize> = (1..=rec.a.len()).filter(|&i| rec.a[i - 1].is_some()).collect();
            let n = active.len() as f64;
            let est = |i: usize| rec.a[i - 1].as_ref().expect("active PDC");
            let bias_inf = |i: usize| rec.bias[i - 1].as_ref().map_or(0.0, |d| d.amax());
            let norms: Vec<(usize, f64)> = active.iter().map(|&i| (i, est(i).norm())).collect();
            let mut sorted: Vec<f64> = norms.iter().map(|p| p.1).collect();
            sorted.sort_by(f64::total_cmp);
            let a_min = sorted.first().copied().unwrap_or(0.0);
            let a_min2 = sorted.get(1).copied().unwrap_or(a_min);
            let a_max = sorted.last().copied().unwrap_or(0.0);
            let argmax = norms
                .iter()
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .map(|p| p.0);
            let a_max_inf = argmax.map_or(0.0, |i| est(i).amax());
            let bad: Vec<usize> = active.iter().copied().filter(|i| attacked.contains(i)).collect();
            let good: Vec<usize> = active.iter().copied().filter(|i| !attacked.contains(i)).collect();
            let delta_max = bad.iter().map(|&i| bias_inf(i)).fold(0.0, f64::max);

            let pairs = || bad.iter().flat_map(|&i| good.iter().map(move |&j| (i, j)));
            let separation = !bad.is_empty()
                && pairs().all(|(i, j)| {
                    bias_inf(i) - delta_max / n > (a_max - a_min) / n + est(j).norm() - est(i).amax()
                });
            let second_minimum = !bad.is_empty()
                && pairs().all(|(i, j)| {
                    bias_inf(i) > n * (a_min2 - a_min) + est(j).norm() - est(i).amax()
                });
            let cohesion = good.iter().all(|&i| {
                good.iter().all(|&j| {
                    i == j || delta_max > n * (est(i).norm() - est(j).norm()) + a_min - a_max_inf
                })
            });
            RequirementCheck { k: rec.k, separation, second_minimum, cohesion }
        })
        .collect()
}
