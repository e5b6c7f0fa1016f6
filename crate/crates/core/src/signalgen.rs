//! Synthetic multi-channel ringdown signals with known modes.
//!
//! Each channel is a sum of damped sinusoids, one per mode, sampled at a
//! uniform period. Channels are grouped into areas, one per local PDC.

use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_PERIOD: f64 = 0.05;
pub const DEFAULT_NUM_SAMPLES: usize = 300;

/// Ground-truth inter-area modes of the 68-bus reference system.
pub const REFERENCE_MODES: [(f64, f64); 4] = [
    (0.32557, 2.2262),
    (0.31429, 3.2505),
    (0.43118, 3.5809),
    (0.43011, 4.9836),
];

/// One continuous-time mode. `omega > 0` stands for the pair `-sigma ± j*omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub sigma: f64,
    pub omega: f64,
}

impl Mode {
    pub fn new(sigma: f64, omega: f64) -> Self {
        Self { sigma, omega }
    }

    /// Continuous-time eigenvalue with non-negative imaginary part.
    pub fn lambda(&self) -> Complex<f64> {
        Complex::new(-self.sigma, self.omega)
    }
}

pub fn reference_modes() -> Vec<Mode> {
    REFERENCE_MODES.iter().map(|&(s, w)| Mode::new(s, w)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    /// One residue per mode.
    pub residues: Vec<Complex<f64>>,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub modes: Vec<Mode>,
    pub channels: Vec<ChannelSpec>,
    pub sample_period: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl SignalSpec {
    /// Builds a noiseless spec with `p` channels whose residues are drawn from
    /// the seeded RNG: magnitudes uniform in [0.5, 1.5], phases uniform in [0, 2pi).
    pub fn with_random_residues(
        modes: Vec<Mode>,
        p: usize,
        sample_period: f64,
        num_samples: usize,
        seed: u64,
    ) -> Self {
        let channels = default_residues(modes.len(), p, seed)
            .into_iter()
            .map(|residues| ChannelSpec { residues, noise_std: 0.0 })
            .collect();
        Self { modes, channels, sample_period, num_samples, seed }
    }

    /// Number of conjugate pairs `n`; the characteristic polynomial has degree `2n`.
    pub fn pair_count(&self) -> usize {
        self.modes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.sample_period;
        if !t.is_finite() || t <= 0.0 {
            return Err(Error::NonFinite(format!("sample_period = {t}")));
        }
        for (k, m) in self.modes.iter().enumerate() {
            if !m.sigma.is_finite() || !m.omega.is_finite() {
                return Err(Error::NonFinite(format!("mode {k}")));
            }
            if m.omega < 0.0 {
                return Err(Error::InvalidArgument(format!("mode {k} has negative omega")));
            }
        }
        let max_omega = self.modes.iter().map(|m| m.omega).fold(0.0, f64::max);
        if t * max_omega >= PI {
            return Err(Error::Aliasing { product: t * max_omega });
        }
        let n = self.pair_count();
        if self.num_samples < 2 * n + 2 {
            return Err(Error::InvalidArgument(format!(
                "num_samples = {} is below 2n+2 = {}",
                self.num_samples,
                2 * n + 2
            )));
        }
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.residues.len() != n {
                return Err(Error::Dimension(format!(
                    "channel {i} has {} residues for {n} modes",
                    ch.residues.len()
                )));
            }
            if ch.residues.iter().any(|r| !r.re.is_finite() || !r.im.is_finite()) {
                return Err(Error::NonFinite(format!("residue in channel {i}")));
            }
            if !ch.noise_std.is_finite() || ch.noise_std < 0.0 {
                return Err(Error::NonFinite(format!("noise_std of channel {i}")));
            }
        }
        Ok(())
    }
}

/// Sampled signal, one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RingdownSignal {
    pub samples: DMatrix<f64>,
    pub sample_period: f64,
}

impl RingdownSignal {
    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn channel(&self, i: usize) -> Vec<f64> {
        self.samples.row(i).iter().copied().collect()
    }
}

/// Residues for `p` channels and `n` modes, drawn in channel-major order.
pub fn default_residues(n: usize, p: usize, seed: u64) -> Vec<Vec<Complex<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let mag: f64 = rng.gen_range(0.5..1.5);
                    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
                    Complex::from_polar(mag, phase)
                })
                .collect()
        })
        .collect()
}

/// Evaluates the ringdown model on the sample grid and adds Gaussian noise.
///
/// Noise comes from a separate RNG stream so toggling it never shifts other draws.
pub fn synth_ringdown(spec: &SignalSpec) -> Result<RingdownSignal> {
    spec.validate()?;
    let p = spec.channels.len();
    let m_len = spec.num_samples;
    let t = spec.sample_period;
    let mut samples = DMatrix::zeros(p, m_len);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    for (i, ch) in spec.channels.iter().enumerate() {
        let noise = if ch.noise_std > 0.0 {
            Some(Normal::new(0.0, ch.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?)
        } else {
            None
        };
        for m in 0..m_len {
            let time = m as f64 * t;
            let mut v = 0.0;
            for (mode, r) in spec.modes.iter().zip(&ch.residues) {
                v += 2.0 * r.norm() * (-mode.sigma * time).exp() * (mode.omega * time + r.arg()).cos();
            }
            if let Some(dist) = &noise {
                v += dist.sample(&mut noise_rng);
            }
            samples[(i, m)] = v;
        }
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("synthesized sample".into()));
    }
    Ok(RingdownSignal { samples, sample_period: t })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionPolicy {
    RoundRobin,
    Contiguous,
}

/// Disjoint cover of the channel indices, one list per area.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AreaPartition {
    pub assignment: Vec<Vec<usize>>,
}

impl AreaPartition {
    pub fn areas(&self) -> usize {
        self.assignment.len()
    }
}

pub fn partition_channels(p: usize, n_areas: usize, policy: PartitionPolicy) -> Result<AreaPartition> {
    if n_areas == 0 || n_areas > p {
        return Err(Error::InvalidArgument(format!(
            "cannot split {p} channels into {n_areas} areas"
        )));
    }
    let assignment = match policy {
        PartitionPolicy::RoundRobin => (0..n_areas)
            .map(|a| (a..p).step_by(n_areas).collect())
            .collect(),
        PartitionPolicy::Contiguous => {
            let base = p / n_areas;
            let extra = p % n_areas;
            let mut start = 0;
            (0..n_areas)
                .map(|a| {
                    let size = base + usize::from(a < extra);
                    let area = (start..start + size).collect();
                    start += size;
                    area
                })
                .collect()
        }
    };
    Ok(AreaPartition { assignment })
}
