//! Scenario configs, end-to-end runs, and trace export.
//!
//! A scenario is a TOML document. Running it synthesizes the signal, builds
//! one regression block per area, iterates the consensus loop with the
//! configured attack, runs detection and mitigation, and recovers modes from
//! the final consensus vector.

use nalgebra::{Complex, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::admm::{ConsensusLoop, IterationRecord, Protocol, RoundOrder, DEFAULT_RHO};
use crate::attacks::{AttackSpec, BiasGenerator};
use crate::detection::{
    run_detection, DetectionConfig, DetectionReport, Method, Status, DEFAULT_DUAL_TOL, DEFAULT_PRESENCE_TOL,
    DEFAULT_RHO_REDUCED, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::prony::{
    build_area_block, default_window, modes_from_coeffs, solve_regression, stack_blocks, CharPolyCoeffs,
    HankelBlock, ModeComparison, compare_modes,
};
use crate::signalgen::{
    default_residues, partition_channels, synth_ringdown, ChannelSpec, Mode, PartitionPolicy, SignalSpec,
    DEFAULT_NUM_SAMPLES, DEFAULT_SAMPLE_PERIOD,
};

pub const DEFAULT_ITERS: usize = 500;

/// Largest seed a scenario file can hold.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalConfig {
    pub modes: Vec<Mode>,
    pub channels: usize,
    #[serde(default = "default_sample_period")]
    pub sample_period: f64,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default)]
    pub noise_std: f64,
    /// Common factor on every residue, drawn or explicit.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Explicit `[re, im]` residues per channel; drawn from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residues: Option<Vec<Vec<[f64; 2]>>>,
    /// Hankel window `ℓ`; defaults to using every sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

fn default_sample_period() -> f64 {
    DEFAULT_SAMPLE_PERIOD
}

fn default_num_samples() -> usize {
    DEFAULT_NUM_SAMPLES
}

fn default_amplitude() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub areas: usize,
    #[serde(default = "default_policy")]
    pub policy: PartitionPolicy,
}

fn default_policy() -> PartitionPolicy {
    PartitionPolicy::Contiguous
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmConfig {
    /// Protocol used when no detection method switches it.
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Round-robin permutations, one per period and cycled; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_orders: Option<Vec<Vec<usize>>>,
}

fn default_protocol() -> Protocol {
    Protocol::Average
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

fn default_iters() -> usize {
    DEFAULT_ITERS
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEntry {
    pub pdc: usize,
    #[serde(flatten)]
    pub generator: BiasGenerator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub attacked: Vec<usize>,
    #[serde(default = "default_start")]
    pub start_iteration: usize,
    #[serde(default)]
    pub corrupt_dual: bool,
    pub generators: Vec<GeneratorEntry>,
}

fn default_start() -> usize {
    1
}

impl AttackConfig {
    pub fn to_spec(&self) -> AttackSpec {
        AttackSpec {
            attacked: self.attacked.iter().copied().collect(),
            generators: self.generators.iter().map(|g| (g.pdc, g.generator.clone())).collect(),
            start_iteration: self.start_iteration,
            corrupt_dual: self.corrupt_dual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSection {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_window_s")]
    pub window: usize,
    #[serde(default = "default_presence_tol")]
    pub presence_tol: f64,
    #[serde(default = "default_dual_tol")]
    pub dual_tol: f64,
    #[serde(default = "default_rho_reduced")]
    pub rho_reduced: f64,
}

impl Default for DetectionSection {
    fn default() -> Self {
        Self {
            method: Method::None,
            window: DEFAULT_WINDOW,
            presence_tol: DEFAULT_PRESENCE_TOL,
            dual_tol: DEFAULT_DUAL_TOL,
            rho_reduced: DEFAULT_RHO_REDUCED,
        }
    }
}

fn default_method() -> Method {
    Method::None
}

fn default_window_s() -> usize {
    DEFAULT_WINDOW
}

fn default_presence_tol() -> f64 {
    DEFAULT_PRESENCE_TOL
}

fn default_dual_tol() -> f64 {
    DEFAULT_DUAL_TOL
}

fn default_rho_reduced() -> f64 {
    DEFAULT_RHO_REDUCED
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default)]
    pub format: Format,
}

/// Assertions checked by `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<Status>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identified: Option<Vec<usize>>,
    /// The identified set must differ from this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identified_not: Option<Vec<usize>>,
    /// Confirmation no later than this iteration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmed_by: Option<usize>,
    /// Bound on `‖z − x*‖/‖x*‖` against the oracle over the active blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_consensus_error: Option<f64>,
    /// Bound on the worst mode error against the planted modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_mode_error: Option<f64>,
    /// Lower bound on `‖z‖` at the last iteration (divergence check).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_final_z_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Seeds residue draws and measurement noise.
    pub seed: u64,
    pub signal: SignalConfig,
    pub partition: PartitionConfig,
    pub admm: AdmmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub detection: DetectionSection,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expectations>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::from_toml(&text)
    }

    pub fn signal_spec(&self) -> Result<SignalSpec> {
        let s = &self.signal;
        let n = s.modes.len();
        let residues: Vec<Vec<Complex<f64>>> = match &s.residues {
            Some(rows) => {
                if rows.len() != s.channels {
                    return Err(Error::Config(format!(
                        "{} residue rows for {} channels",
                        rows.len(),
                        s.channels
                    )));
                }
                rows.iter()
                    .map(|r| r.iter().map(|&[re, im]| Complex::new(re, im)).collect())
                    .collect()
            }
            None => default_residues(n, s.channels, self.seed),
        };
        if !(s.amplitude.is_finite() && s.amplitude > 0.0) {
            return Err(Error::Config(format!("signal.amplitude must be positive, got {}", s.amplitude)));
        }
        Ok(SignalSpec {
            modes: s.modes.clone(),
            channels: residues
                .into_iter()
                .map(|r| ChannelSpec {
                    residues: r.into_iter().map(|c| c * s.amplitude).collect(),
                    noise_std: s.noise_std,
                })
                .collect(),
            sample_period: s.sample_period,
            num_samples: s.num_samples,
            seed: self.seed,
        })
    }

    pub fn round_order(&self) -> RoundOrder {
        let n = self.partition.areas;
        RoundOrder {
            period_orders: self.admm.period_orders.clone().unwrap_or_else(|| vec![(1..=n).collect()]),
            alpha: self.admm.alpha,
        }
    }

    pub fn attack_spec(&self) -> AttackSpec {
        self.attack.as_ref().map_or_else(AttackSpec::none, AttackConfig::to_spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.admm.iters == 0 {
            return Err(Error::Config("admm.iters must be positive".into()));
        }
        if self.detection.window == 0 {
            return Err(Error::Config("detection.window must be positive".into()));
        }
        self.round_order().validate(self.partition.areas)?;
        let generator_seeds = self.attack.iter().flat_map(|a| &a.generators).filter_map(|g| match g.generator {
            BiasGenerator::IidRandom { seed, .. } => Some(seed),
            _ => None,
        });
        // TOML integers are signed, so larger seeds could not be written back.
        if let Some(seed) = std::iter::once(self.seed).chain(generator_seeds).find(|&s| s > MAX_SEED) {
            return Err(Error::Config(format!("seed {seed} exceeds {MAX_SEED}")));
        }
        Ok(())
    }

    /// Regression blocks, one per area.
    pub fn blocks(&self) -> Result<Vec<HankelBlock>> {
        let spec = self.signal_spec()?;
        let signal = synth_ringdown(&spec)?;
        let n = spec.pair_count();
        let ell = self.signal.window.unwrap_or_else(|| default_window(spec.num_samples, n));
        let partition = partition_channels(self.signal.channels, self.partition.areas, self.partition.policy)?;
        partition
            .assignment
            .iter()
            .enumerate()
            .map(|(i, chans)| build_area_block(&signal, chans, n, ell, i + 1))
            .collect()
    }
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub scenario: String,
    pub seed: u64,
    pub pdcs: usize,
    pub order: usize,
    pub sample_period: f64,
    pub records: Vec<IterationRecord>,
    pub report: DetectionReport,
    pub planted_modes: Vec<Mode>,
    pub recovered_modes: Vec<Mode>,
    pub oracle_modes: Vec<Mode>,
    pub mode_comparison: ModeComparison,
    /// `‖z − x*‖/‖x*‖` against the least-squares solution over the active blocks.
    pub consensus_error: f64,
}

impl RunTrace {
    pub fn final_z(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.z.as_slice())
    }
}

fn with_context(name: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Scenario { scenario: name.to_string(), source: Box::new(e) }
}

/// Prepared loop plus the pieces needed to finish a run.
pub struct Prepared {
    pub blocks: Vec<HankelBlock>,
    pub lp: ConsensusLoop,
}

pub fn prepare(config: &ScenarioConfig) -> Result<Prepared> {
    config.validate()?;
    let blocks = config.blocks()?;
    let lp = ConsensusLoop::new(&blocks, config.admm.rho, config.attack_spec())?;
    Ok(Prepared { blocks, lp })
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<RunTrace> {
    let ctx = with_context(&config.name);
    let Prepared { blocks, mut lp } = prepare(config).map_err(&ctx)?;
    let det = &config.detection;
    if det.method == Method::None && config.admm.protocol == Protocol::RoundRobin {
        lp.switch_to_round_robin(config.round_order()).map_err(&ctx)?;
    }
    let cfg = DetectionConfig {
        method: det.method,
        window: det.window,
        presence_tol: det.presence_tol,
        dual_tol: det.dual_tol,
        rho_reduced: det.rho_reduced,
        order: Some(config.round_order()),
    };
    let report = if config.admm.iters >= 2 || det.method != Method::None {
        run_detection(&mut lp, &cfg).map_err(&ctx)?
    } else {
        DetectionReport::not_invoked(det.method)
    };
    if lp.iteration() < config.admm.iters {
        lp.run(config.admm.iters - lp.iteration()).map_err(&ctx)?;
    }
    finish(config, &blocks, lp, report).map_err(&ctx)
}

fn finish(config: &ScenarioConfig, blocks: &[HankelBlock], lp: ConsensusLoop, report: DetectionReport) -> Result<RunTrace> {
    let active: Vec<HankelBlock> = lp.active().iter().map(|&i| blocks[i - 1].clone()).collect();
    let x_star = solve_regression(&stack_blocks(&active)?, 0.0)?;
    let z = lp.z().clone();
    let consensus_error = (&z - &x_star).norm() / x_star.norm();
    let t = config.signal.sample_period;
    let recovered_modes = modes_or_empty(&z, t);
    let oracle_modes = modes_or_empty(&x_star, t);
    let mode_comparison = compare_modes(&recovered_modes, &config.signal.modes);
    Ok(RunTrace {
        scenario: config.name.clone(),
        seed: config.seed,
        pdcs: lp.pdc_count(),
        order: lp.dim(),
        sample_period: t,
        records: lp.records().to_vec(),
        report,
        planted_modes: config.signal.modes.clone(),
        recovered_modes,
        oracle_modes,
        mode_comparison,
        consensus_error,
    })
}

fn modes_or_empty(x: &DVector<f64>, t: f64) -> Vec<Mode> {
    CharPolyCoeffs::from_regression(x)
        .and_then(|c| modes_from_coeffs(&c, t))
        .unwrap_or_default()
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), message: e.to_string() }
}

pub const CSV_HEADER: [&str; 5] = ["iteration", "pdc_id", "variable", "coordinate_index", "value"];

/// Long-format CSV: per record, each PDC's `a` then `w` coordinates, then the
/// supervisor's `z`.
pub fn trace_to_csv(trace: &RunTrace) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io { path: "<csv>".into(), message: e.to_string() };
    wtr.write_record(CSV_HEADER).map_err(csv_err)?;
    for rec in &trace.records {
        let k = rec.k.to_string();
        for (i, (a, w)) in rec.a.iter().zip(&rec.w).enumerate() {
            let id = (i + 1).to_string();
            for (var, vals) in [("a", a), ("w", w)] {
                for (j, v) in vals.iter().flatten().enumerate() {
                    wtr.write_record([k.as_str(), &id, var, &j.to_string(), &v.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        for (j, v) in rec.z.iter().enumerate() {
            wtr.write_record([k.as_str(), "supervisor", "z", &j.to_string(), &v.to_string()])
                .map_err(csv_err)?;
        }
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io { path: "<csv>".into(), message: e.to_string() })?;
    String::from_utf8(bytes).map_err(|e| Error::Io { path: "<csv>".into(), message: e.to_string() })
}

pub fn trace_to_json(trace: &RunTrace) -> Result<String> {
    serde_json::to_string_pretty(trace).map_err(|e| Error::Io { path: "<json>".into(), message: e.to_string() })
}

pub fn trace_from_json(text: &str) -> Result<RunTrace> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

/// Writes `trace.csv` or `trace.json`, plus `report.json`, into `dir`.
pub fn export_trace(trace: &RunTrace, format: Format, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let (name, body) = match format {
        Format::Csv => ("trace.csv", trace_to_csv(trace)?),
        Format::Json => ("trace.json", trace_to_json(trace)?),
    };
    let trace_path = dir.join(name);
    fs::write(&trace_path, body).map_err(|e| io_error(&trace_path, e))?;
    let summary = serde_json::json!({
        "scenario": trace.scenario,
        "report": trace.report,
        "recovered_modes": trace.recovered_modes,
        "oracle_modes": trace.oracle_modes,
        "mode_comparison": trace.mode_comparison,
        "consensus_error": trace.consensus_error,
    });
    let report_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io {
        path: report_path.display().to_string(),
        message: e.to_string(),
    })?;
    fs::write(&report_path, text).map_err(|e| io_error(&report_path, e))?;
    Ok(vec![trace_path, report_path])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Evaluates the scenario's `[expect]` table against a finished run.
pub fn check_expectations(config: &ScenarioConfig, trace: &RunTrace) -> Vec<Check> {
    let Some(exp) = &config.expect else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        out.push(Check { name: name.into(), passed, detail });
    };
    let rep = &trace.report;
    if let Some(p) = exp.presence {
        push("presence", rep.presence == p, format!("got {}", rep.presence));
    }
    if let Some(s) = exp.status {
        push("status", rep.status == s, format!("got {:?}", rep.status));
    }
    if let Some(ids) = &exp.identified {
        let want: BTreeSet<usize> = ids.iter().copied().collect();
        push("identified", rep.identified_malicious == want, format!("got {:?}", rep.identified_malicious));
    }
    if let Some(ids) = &exp.identified_not {
        let avoid: BTreeSet<usize> = ids.iter().copied().collect();
        push("identified_not", rep.identified_malicious != avoid, format!("got {:?}", rep.identified_malicious));
    }
    if let Some(k) = exp.confirmed_by {
        let ok = rep.confirmed_at_iteration.is_some_and(|c| c <= k);
        push("confirmed_by", ok, format!("got {:?}", rep.confirmed_at_iteration));
    }
    if let Some(tol) = exp.max_consensus_error {
        push("consensus_error", trace.consensus_error < tol, format!("got {:e}", trace.consensus_error));
    }
    if let Some(tol) = exp.max_mode_error {
        let cmp = &trace.mode_comparison;
        let ok = cmp.unmatched_truth.is_empty() && cmp.max_error < tol;
        push("mode_error", ok, format!("got {:e}, {} unmatched", cmp.max_error, cmp.unmatched_truth.len()));
    }
    if let Some(min) = exp.min_final_z_norm {
        let z = trace.final_z().map_or(0.0, |z| z.iter().map(|v| v * v).sum::<f64>().sqrt());
        push("final_z_norm", z > min, format!("got {z:e}"));
    }
    out
}

/// Scenario files (`*.toml`) in `dir`, sorted by file name.
pub fn list_scenarios(dir: &Path) -> Result<Vec<(PathBuf, ScenarioConfig)>> {
    let entries = fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| ScenarioConfig::load(&p).map(|c| (p, c)))
        .collect()
}
