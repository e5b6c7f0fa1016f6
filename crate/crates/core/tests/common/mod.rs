#![allow(dead_code)]

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use pdcguard::harness::ScenarioConfig;
use pdcguard::prony::HankelBlock;
use pdcguard::signalgen::Mode;

pub fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn scenario(name: &str) -> ScenarioConfig {
    let path = scenarios_dir().join(format!("{name}.toml"));
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Dense block with i.i.d. uniform entries on `[-1, 1)`.
pub fn random_block(rows: usize, cols: usize, seed: u64) -> HankelBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HankelBlock {
        h: DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)),
        c: DVector::from_fn(rows, |_, _| rng.gen_range(-1.0..1.0)),
        area_id: 0,
    }
}

/// Largest entry-wise relative error, each entry scaled by `max(|want|, floor)`.
pub fn rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(floor))
        .fold(0.0, f64::max)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Monomial coefficients of `prod (z - r)`, leading 1 dropped.
pub fn expand(roots: &[Complex<f64>]) -> Vec<f64> {
    let mut c = vec![Complex::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex::new(0.0, 0.0); c.len() + 1];
        for (i, v) in c.iter().enumerate() {
            next[i] += v;
            next[i + 1] -= v * r;
        }
        c = next;
    }
    c[1..].iter().map(|v| v.re).collect()
}

/// `exp(λT)` and its conjugate for every mode.
pub fn poles(modes: &[Mode], t: f64) -> Vec<Complex<f64>> {
    modes
        .iter()
        .flat_map(|m| {
            let z = (Complex::new(-m.sigma, m.omega) * t).exp();
            [z, z.conj()]
        })
        .collect()
}
