//! Presence detection, identification of biased PDCs, and mitigation.
//!
//! Analysis functions read only the supervisor trace ([`IterationRecord`]).
//! [`run_detection`] drives a [`ConsensusLoop`] through the iterations each
//! method needs, then hands confirmed sets to [`mitigate`].

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::admm::{compensated_mean, ConsensusLoop, IterationRecord, Protocol, RoundOrder};
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_PRESENCE_TOL: f64 = 1e-12;
pub const DEFAULT_DUAL_TOL: f64 = 1e-12;
pub const DEFAULT_RHO_REDUCED: f64 = 1e-9;

/// First iteration inspected by the grouping algorithms.
pub const FIRST_GROUPING_ITERATION: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    Alg1,
    Alg2,
    RrRandom,
    Alg3,
    Alg4,
}

impl Method {
    pub fn uses_round_robin(self) -> bool {
        matches!(self, Method::Alg2 | Method::RrRandom | Method::Alg4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    /// Identification was not run (no presence, or no method).
    NotInvoked,
    Confirmed,
    Unconfirmed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Evidence {
    Grouping {
        k: usize,
        gamma: f64,
        norms: Vec<(usize, f64)>,
        groups: Vec<Vec<usize>>,
        suspects: Vec<usize>,
    },
    ZNorm {
        period: usize,
        k_min: usize,
        k_ref: usize,
        gamma: f64,
        /// `(k, source PDC, ||z^k||)` over the comparison window.
        window: Vec<(usize, usize, f64)>,
        flagged: Vec<usize>,
    },
    DualDifference {
        k: usize,
        pdc: usize,
        difference: Vec<f64>,
        tolerance: f64,
        flagged: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: Method,
    pub presence: bool,
    /// Mean of the first-iteration duals; equals `−ρΔ¹` under attack.
    pub presence_evidence: Vec<f64>,
    pub status: Status,
    pub identified_malicious: BTreeSet<usize>,
    pub confirmed_at_iteration: Option<usize>,
    pub evidence: Vec<Evidence>,
}

impl DetectionReport {
    pub fn not_invoked(method: Method) -> Self {
        Self {
            method,
            presence: false,
            presence_evidence: Vec::new(),
            status: Status::NotInvoked,
            identified_malicious: BTreeSet::new(),
            confirmed_at_iteration: None,
            evidence: Vec::new(),
        }
    }

    fn empty(method: Method, presence: &Presence) -> Self {
        Self {
            method,
            presence: presence.flag,
            presence_evidence: presence.mean_dual.clone(),
            status: Status::NotInvoked,
            identified_malicious: BTreeSet::new(),
            confirmed_at_iteration: None,
            evidence: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Presence {
    pub flag: bool,
    pub mean_dual: Vec<f64>,
    /// `−mean/ρ`, the implied average bias.
    pub implied_bias: Vec<f64>,
}

/// Flags an attack when the mean first-iteration dual exceeds `tol` in any entry.
pub fn detect_presence(duals: &[Vec<f64>], rho: f64, tol: f64) -> Result<Presence> {
    let first = duals
        .first()
        .ok_or_else(|| Error::InvalidArgument("no dual vectors".into()))?;
    if duals.iter().any(|w| w.len() != first.len()) {
        return Err(Error::Dimension("dual vectors differ in length".into()));
    }
    let rows: Vec<&[f64]> = duals.iter().map(Vec::as_slice).collect();
    let mean = compensated_mean(&rows, first.len());
    let flag = mean.iter().any(|m| m.abs() > tol);
    let implied_bias = mean.iter().map(|m| -m / rho).collect();
    Ok(Presence { flag, mean_dual: mean, implied_bias })
}

/// Presence check on the duals `w^1`, which arrive with the iteration-2 messages.
pub fn presence_from_trace(records: &[IterationRecord], tol: f64) -> Result<Presence> {
    let rec = records
        .iter()
        .find(|r| r.k == 2)
        .ok_or_else(|| Error::InvalidArgument("presence check needs iteration 2".into()))?;
    let duals: Vec<Vec<f64>> = rec.w.iter().flatten().cloned().collect();
    detect_presence(&duals, rec.rho, tol)
}

/// `min{(max − min)/N, N(min2 − min)}` over the supplied norms.
pub fn threshold_gamma_a(norms: &[f64]) -> Result<f64> {
    let n = norms.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("threshold needs N >= 2, got {n}")));
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    Ok(((sorted[n - 1] - sorted[0]) / nf).min(nf * (sorted[1] - sorted[0])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingResult {
    /// Groups in ascending norm order; ids ascending within a group.
    pub groups: Vec<Vec<usize>>,
    pub representative_norms: Vec<f64>,
    pub unbiased_group: usize,
}

/// Connected components of the relation `|‖ā_i‖ − ‖ā_j‖| ≤ γ`.
///
/// In one dimension these are the maximal runs of sorted norms whose
/// consecutive gaps stay within `γ`.
pub fn group_estimates(norms: &[(usize, f64)], gamma: f64) -> Result<GroupingResult> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma = {gamma}")));
    }
    if norms.is_empty() {
        return Err(Error::InvalidArgument("no norms to group".into()));
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    let mut groups: Vec<Vec<usize>> = vec![vec![sorted[0].0]];
    let mut reps = vec![sorted[0].1];
    for pair in sorted.windows(2) {
        if pair[1].1 - pair[0].1 <= gamma {
            groups.last_mut().expect("non-empty").push(pair[1].0);
        } else {
            groups.push(vec![pair[1].0]);
            reps.push(pair[1].1);
        }
    }
    groups.iter_mut().for_each(|g| g.sort_unstable());
    Ok(GroupingResult { groups, representative_norms: reps, unbiased_group: 0 })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn grouping_evidence(rec: &IterationRecord) -> Result<Evidence> {
    let norms: Vec<(usize, f64)> = rec
        .a
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.as_ref().map(|v| (i + 1, norm(v))))
        .collect();
    let values: Vec<f64> = norms.iter().map(|p| p.1).collect();
    let gamma = threshold_gamma_a(&values)?;
    let grouping = group_estimates(&norms, gamma)?;
    let suspects = grouping
        .groups
        .iter()
        .enumerate()
        .filter(|(g, _)| *g != grouping.unbiased_group)
        .flat_map(|(_, ids)| ids.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(Evidence::Grouping { k: rec.k, gamma, norms, groups: grouping.groups, suspects })
}

fn confirm(sets: &[BTreeSet<usize>], s: usize) -> Option<BTreeSet<usize>> {
    let first = sets.first()?;
    (sets.len() == s && !first.is_empty() && sets.iter().all(|x| x == first)).then(|| first.clone())
}

/// Grouping identification over the `s` consecutive averaging iterations
/// starting at `start_k`. Confirms only when every iteration yields the same
/// non-empty suspect set.
pub fn identify_grouping(records: &[IterationRecord], s: usize, start_k: usize, method: Method) -> Result<DetectionReport> {
    let window: Vec<&IterationRecord> = records
        .iter()
        .filter(|r| r.k >= start_k && r.protocol == Protocol::Average)
        .take(s)
        .collect();
    let mut evidence = Vec::with_capacity(window.len());
    let mut sets = Vec::with_capacity(window.len());
    for rec in &window {
        let ev = grouping_evidence(rec)?;
        if let Evidence::Grouping { suspects, .. } = &ev {
            sets.push(suspects.iter().copied().collect::<BTreeSet<_>>());
        }
        evidence.push(ev);
    }
    let confirmed = confirm(&sets, s);
    Ok(DetectionReport {
        method,
        presence: true,
        presence_evidence: Vec::new(),
        status: if confirmed.is_some() { Status::Confirmed } else { Status::Unconfirmed },
        confirmed_at_iteration: confirmed.as_ref().and(window.last().map(|r| r.k)),
        identified_malicious: confirmed.unwrap_or_default(),
        evidence,
    })
}

pub fn identify_alg1(records: &[IterationRecord], s: usize) -> Result<DetectionReport> {
    identify_grouping(records, s, FIRST_GROUPING_ITERATION, Method::Alg1)
}

/// Records of the most recent round-robin stretch, indexed by position − 1.
fn rr_segment(records: &[IterationRecord]) -> Vec<&IterationRecord> {
    let start = records
        .iter()
        .rposition(|r| r.rr_position == Some(1))
        .unwrap_or(records.len());
    records[start..]
        .iter()
        .take_while(|r| r.protocol == Protocol::RoundRobin)
        .collect()
}

/// Shared z-norm search. `reference` picks the comparison iteration for a
/// period given `(segment, k_min position)`; `source` names the PDC behind a
/// position.
fn znorm_identify(
    records: &[IterationRecord],
    n: usize,
    s: usize,
    method: Method,
    reference: impl Fn(&[&IterationRecord], usize) -> Option<usize>,
    source: impl Fn(&IterationRecord) -> Option<usize>,
) -> Result<DetectionReport> {
    if n < 2 {
        return Err(Error::InvalidArgument("round robin needs N >= 2".into()));
    }
    let seg = rr_segment(records);
    let znorm = |pos: usize| norm(&seg[pos].z);
    let mut evidence = Vec::new();
    let mut sets = Vec::new();
    let mut last_k = None;
    let mut failed = false;
    for period in 0..s {
        let lo = period * n;
        if lo + n > seg.len() {
            failed = true;
            break;
        }
        let k_min = (lo..lo + n)
            .min_by(|&x, &y| znorm(x).total_cmp(&znorm(y)).then(x.cmp(&y)))
            .expect("non-empty period");
        let (Some(k_ref), true) = (reference(&seg, k_min), k_min + n <= seg.len()) else {
            failed = true;
            break;
        };
        let base = znorm(k_min);
        let gamma = znorm(k_ref) - base;
        let window: Vec<(usize, usize, f64)> = (k_min..k_min + n)
            .map(|p| (seg[p].k, source(seg[p]).unwrap_or(0), znorm(p)))
            .collect();
        let flagged: BTreeSet<usize> = if gamma < 0.0 {
            failed = true;
            BTreeSet::new()
        } else {
            window.iter().filter(|w| w.2 > base + gamma).map(|w| w.1).collect()
        };
        last_k = Some(seg[k_ref.max(k_min + n - 1)].k);
        evidence.push(Evidence::ZNorm {
            period: period + 1,
            k_min: seg[k_min].k,
            k_ref: seg[k_ref].k,
            gamma,
            window,
            flagged: flagged.iter().copied().collect(),
        });
        sets.push(flagged);
        if failed {
            break;
        }
    }
    let confirmed = if failed { None } else { confirm(&sets, s) };
    Ok(DetectionReport {
        method,
        presence: true,
        presence_evidence: Vec::new(),
        status: if confirmed.is_some() { Status::Confirmed } else { Status::Unconfirmed },
        confirmed_at_iteration: confirmed.as_ref().and(last_k),
        identified_malicious: confirmed.unwrap_or_default(),
        evidence,
    })
}

/// Fixed-schedule z-norm identification: per period, `k_min` minimizes `‖z‖`,
/// `γ_z = ‖z^{k_min+N}‖ − ‖z^{k_min}‖`, and the PDCs scheduled in
/// `[k_min, k_min+N−1]` whose `‖z‖` exceeds `‖z^{k_min}‖ + γ_z` are flagged.
pub fn identify_alg2(records: &[IterationRecord], n: usize, order: &RoundOrder, s: usize) -> Result<DetectionReport> {
    order.validate(n)?;
    znorm_identify(
        records,
        n,
        s,
        Method::Alg2,
        |seg, k_min| (k_min + n < seg.len()).then_some(k_min + n),
        |r| r.rr_position.map(|p| order.selected(p)),
    )
}

/// Schedule-agnostic variant: PDC sources come from the trace, and the
/// reference iteration is where the `k_min` source next feeds `z`.
pub fn identify_rr_random(records: &[IterationRecord], n: usize, s: usize) -> Result<DetectionReport> {
    znorm_identify(
        records,
        n,
        s,
        Method::RrRandom,
        |seg, k_min| {
            let m = seg[k_min].rr_source?;
            let next = (k_min / n + 1) * n;
            (next..(next + n).min(seg.len())).find(|&p| seg[p].rr_source == Some(m))
        },
        |r| r.rr_source,
    )
}

/// Dual-difference identification under round robin. For each of `s` periods,
/// the PDC feeding `z^k` must satisfy `w^k − w^{k−1} = 0` when honest; any
/// entry above `tol·max(1, ‖w^k‖∞)` marks it malicious. The difference for
/// iteration `k` becomes available with the iteration-`k+1` messages.
pub fn identify_alg4(records: &[IterationRecord], n: usize, tol: f64, s: usize) -> Result<DetectionReport> {
    if n < 2 {
        return Err(Error::InvalidArgument("round robin needs N >= 2".into()));
    }
    let seg = rr_segment(records);
    let next_of = |pos: usize| -> Option<&IterationRecord> {
        let k = seg.get(pos)?.k;
        records.iter().find(|r| r.k == k + 1)
    };
    let mut evidence = Vec::new();
    let mut sets = Vec::new();
    let mut last_k = None;
    let mut failed = false;
    'periods: for period in 0..s {
        let mut flagged = BTreeSet::new();
        for pos in period * n..(period + 1) * n {
            let (Some(rec), Some(next)) = (seg.get(pos), next_of(pos)) else {
                failed = true;
                break 'periods;
            };
            let Some(pdc) = rec.rr_source else {
                failed = true;
                break 'periods;
            };
            let (Some(before), Some(after)) = (&rec.w[pdc - 1], &next.w[pdc - 1]) else {
                failed = true;
                break 'periods;
            };
            let difference: Vec<f64> = after.iter().zip(before).map(|(x, y)| x - y).collect();
            let scale = after.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let tolerance = tol * scale;
            let bad = difference.iter().any(|d| d.abs() > tolerance);
            if bad {
                flagged.insert(pdc);
            }
            evidence.push(Evidence::DualDifference { k: rec.k, pdc, difference, tolerance, flagged: bad });
            last_k = Some(next.k);
        }
        sets.push(flagged);
    }
    let confirmed = if failed { None } else { confirm(&sets, s) };
    Ok(DetectionReport {
        method: Method::Alg4,
        presence: true,
        presence_evidence: Vec::new(),
        status: if confirmed.is_some() { Status::Confirmed } else { Status::Unconfirmed },
        confirmed_at_iteration: confirmed.as_ref().and(last_k),
        identified_malicious: confirmed.unwrap_or_default(),
        evidence,
    })
}

/// Switches every PDC to `ρ'`, clears the duals accumulated under the old
/// penalty, and runs grouping on the next `s` iterations. The caller restores
/// ρ through [`mitigate`].
pub fn identify_alg3(lp: &mut ConsensusLoop, rho_reduced: f64, s: usize) -> Result<DetectionReport> {
    lp.set_rho(rho_reduced)?;
    lp.reset_duals();
    let start = lp.iteration() + 1;
    lp.run(s)?;
    identify_grouping(lp.records(), s, start, Method::Alg3)
}

/// Drops `malicious` from aggregation, returns to averaging with ρ restored,
/// zeroes the remaining duals, and restarts their primals from the last `z`.
/// An empty set leaves the loop untouched.
pub fn mitigate(lp: &mut ConsensusLoop, malicious: &BTreeSet<usize>, rho: f64) -> Result<()> {
    if malicious.is_empty() {
        return Ok(());
    }
    lp.exclude(malicious)?;
    lp.switch_to_average();
    lp.set_rho(rho)?;
    lp.reset_duals();
    lp.reset_primals_to_z();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub method: Method,
    pub window: usize,
    pub presence_tol: f64,
    pub dual_tol: f64,
    pub rho_reduced: f64,
    pub order: Option<RoundOrder>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            method: Method::Alg1,
            window: DEFAULT_WINDOW,
            presence_tol: DEFAULT_PRESENCE_TOL,
            dual_tol: DEFAULT_DUAL_TOL,
            rho_reduced: DEFAULT_RHO_REDUCED,
            order: None,
        }
    }
}

/// Runs two averaging iterations, checks presence, then executes the chosen
/// identification method and mitigates a confirmed set.
pub fn run_detection(lp: &mut ConsensusLoop, cfg: &DetectionConfig) -> Result<DetectionReport> {
    if lp.iteration() < 2 {
        lp.run(2 - lp.iteration())?;
    }
    let presence = presence_from_trace(lp.records(), cfg.presence_tol)?;
    if !presence.flag || cfg.method == Method::None {
        return Ok(DetectionReport::empty(cfg.method, &presence));
    }
    let rho = lp.rho();
    let n = lp.active().len();
    let s = cfg.window;
    let order = cfg.order.clone().unwrap_or_else(|| RoundOrder::fixed(n, 1.0));
    let mut report = match cfg.method {
        Method::None => unreachable!(),
        Method::Alg1 => {
            lp.run(s)?;
            identify_alg1(lp.records(), s)?
        }
        Method::Alg3 => identify_alg3(lp, cfg.rho_reduced, s)?,
        Method::Alg2 | Method::RrRandom => {
            lp.switch_to_round_robin(order.clone())?;
            lp.run((s + 1) * n)?;
            if cfg.method == Method::Alg2 {
                identify_alg2(lp.records(), n, &order, s)?
            } else {
                identify_rr_random(lp.records(), n, s)?
            }
        }
        Method::Alg4 => {
            if order.alpha != 1.0 {
                return Err(Error::InvalidArgument("dual-difference identification needs alpha = 1".into()));
            }
            lp.switch_to_round_robin(order)?;
            lp.run(s * n + 1)?;
            identify_alg4(lp.records(), n, cfg.dual_tol, s)?
        }
    };
    report.presence_evidence = presence.mean_dual;
    if report.status == Status::Confirmed {
        mitigate(lp, &report.identified_malicious, rho)?;
    } else if lp.protocol() == Protocol::RoundRobin || lp.rho() != rho {
        lp.switch_to_average();
        lp.set_rho(rho)?;
    }
    Ok(report)
}
