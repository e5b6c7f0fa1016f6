//! Consensus ADMM over per-area regression blocks.
//!
//! Every PDC holds a primal estimate `a_i` of the regression vector `x = -a`
//! and a dual `w_i`. One iteration `k` runs:
//!
//! 1. primal update `a_i^k = (H_iᵀH_i + ρI)⁻¹(H_iᵀc_i − w_i^{k−1} + ρ z^{k−1})`;
//! 2. transmit `(ā_i^k, w̄_i^{k−1})`, where the bar marks a possibly biased value;
//! 3. aggregate `z^k`, either as the average of active PDCs or, under round
//!    robin, as `α ā_σ(k)` for the PDC selected at that position;
//! 4. dual update `w_i^k = w_i^{k−1} + ρ(a_i^k − z^k)`.
//!
//! All of `a⁰`, `w⁰`, `z⁰` start at zero. PDC ids are 1-based.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::attacks::{apply_attack, bias_at, AttackSpec};
use crate::error::{Error, Result};
use crate::prony::HankelBlock;

pub const DEFAULT_RHO: f64 = 1e-6;

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")))
    }
}

fn check_dim(got: usize, want: usize, what: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what} has length {got}, expected {want}")))
    }
}

/// Local estimator of one PDC.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub a: DVector<f64>,
    pub w: DVector<f64>,
    rho: f64,
    gram: DMatrix<f64>,
    moment: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl EstimatorState {
    pub fn new(block: &HankelBlock, rho: f64) -> Result<Self> {
        let gram = block.h.tr_mul(&block.h);
        let moment = block.h.tr_mul(&block.c);
        Self::from_normal_equations(gram, moment, rho)
    }

    /// State from a precomputed Gram matrix `HᵀH` and moment `Hᵀc`.
    pub fn from_normal_equations(gram: DMatrix<f64>, moment: DVector<f64>, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        let d = moment.len();
        if gram.nrows() != d || gram.ncols() != d {
            return Err(Error::Dimension(format!("gram is {}x{}, moment has {d}", gram.nrows(), gram.ncols())));
        }
        let factor = Self::factorize(&gram, rho)?;
        Ok(Self { a: DVector::zeros(d), w: DVector::zeros(d), rho, gram, moment, factor })
    }

    fn factorize(gram: &DMatrix<f64>, rho: f64) -> Result<Cholesky<f64, Dyn>> {
        let d = gram.nrows();
        Cholesky::new(gram + DMatrix::<f64>::identity(d, d) * rho)
            .ok_or_else(|| Error::InvalidArgument("HᵀH + ρI is not positive definite".into()))
    }

    pub fn dim(&self) -> usize {
        self.moment.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn moment(&self) -> &DVector<f64> {
        &self.moment
    }

    /// Changes ρ and rebuilds the cached factorization.
    pub fn set_rho(&mut self, rho: f64) -> Result<()> {
        check_rho(rho)?;
        if rho != self.rho {
            self.factor = Self::factorize(&self.gram, rho)?;
            self.rho = rho;
        }
        Ok(())
    }

    /// `w ← w + ρ(a − z)`.
    pub fn dual_update(&mut self, z: &DVector<f64>) -> Result<&DVector<f64>> {
        check_dim(z.len(), self.dim(), "z")?;
        self.w += (&self.a - z) * self.rho;
        Ok(&self.w)
    }

    /// `a ← (HᵀH + ρI)⁻¹(Hᵀc − w + ρz)` through the cached factorization.
    pub fn primal_update(&mut self, z: &DVector<f64>) -> Result<&DVector<f64>> {
        check_dim(z.len(), self.dim(), "z")?;
        let rhs = &self.moment - &self.w + z * self.rho;
        self.a = self.factor.solve(&rhs);
        Ok(&self.a)
    }
}

pub fn local_dual_update(state: &mut EstimatorState, z: &DVector<f64>) -> Result<DVector<f64>> {
    state.dual_update(z).cloned()
}

pub fn local_primal_update(state: &mut EstimatorState, z: &DVector<f64>) -> Result<DVector<f64>> {
    state.primal_update(z).cloned()
}

/// Message sent to the supervisor at iteration `k`: `ā^k` and `w̄^{k−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMsg {
    pub sender: usize,
    pub iteration: usize,
    pub a_reported: DVector<f64>,
    pub w_reported: DVector<f64>,
}

/// Round-robin schedule: one permutation of `1..=N` per period, cycled, and
/// the scaling constant α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOrder {
    pub period_orders: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl RoundOrder {
    /// Visits PDCs `1..=N` in index order every period.
    pub fn fixed(n: usize, alpha: f64) -> Self {
        Self { period_orders: vec![(1..=n).collect()], alpha }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.alpha == 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha = {}", self.alpha)));
        }
        if self.period_orders.is_empty() {
            return Err(Error::InvalidArgument("round order has no periods".into()));
        }
        for perm in &self.period_orders {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (1..=n).collect::<Vec<_>>() {
                return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of 1..={n}")));
            }
        }
        Ok(())
    }

    /// Permutation used in `period` (0-based).
    pub fn period(&self, period: usize) -> &[usize] {
        &self.period_orders[period % self.period_orders.len()]
    }

    /// PDC selected at RR position `position` (1-based, counted from the switch).
    pub fn selected(&self, position: usize) -> usize {
        let n = self.period_orders[0].len();
        let p = position - 1;
        self.period(p / n)[p % n]
    }
}

fn collect_by_sender<'m>(
    msgs: &'m [ConsensusMsg],
    active: &BTreeSet<usize>,
    k: usize,
) -> Result<Vec<&'m ConsensusMsg>> {
    let mut seen = BTreeSet::new();
    for m in msgs {
        if !active.contains(&m.sender) {
            return Err(Error::UnexpectedSender { pdc: m.sender, k });
        }
        if !seen.insert(m.sender) {
            return Err(Error::DuplicateMessage { pdc: m.sender, k });
        }
    }
    if let Some(&pdc) = active.iter().find(|i| !seen.contains(i)) {
        return Err(Error::MissingMessage { pdc, k });
    }
    let mut out: Vec<&ConsensusMsg> = msgs.iter().collect();
    out.sort_by_key(|m| m.sender);
    Ok(out)
}

/// Mean of the reported primals; exactly one message per active PDC is required.
pub fn average_consensus(msgs: &[ConsensusMsg], active: &BTreeSet<usize>) -> Result<DVector<f64>> {
    let k = msgs.first().map_or(0, |m| m.iteration);
    let ordered = collect_by_sender(msgs, active, k)?;
    let first = ordered
        .first()
        .ok_or_else(|| Error::InvalidArgument("no active PDCs".into()))?;
    let dim = first.a_reported.len();
    for m in &ordered {
        check_dim(m.a_reported.len(), dim, "reported estimate")?;
    }
    let rows: Vec<&[f64]> = ordered.iter().map(|m| m.a_reported.as_slice()).collect();
    Ok(DVector::from_vec(compensated_mean(&rows, dim)))
}

/// Entry-wise mean with Neumaier-compensated summation. Rows must have length `dim`.
pub(crate) fn compensated_mean(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..dim)
        .map(|j| {
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for r in rows {
                let v = r[j];
                let t = sum + v;
                comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
                sum = t;
            }
            (sum + comp) / n
        })
        .collect()
}

/// `α ā_σ` for the PDC selected at RR `position` (1-based).
pub fn rr_consensus(msgs: &[ConsensusMsg], position: usize, order: &RoundOrder) -> Result<DVector<f64>> {
    if position == 0 {
        return Err(Error::InvalidArgument("RR positions start at 1".into()));
    }
    let pdc = order.selected(position);
    let k = msgs.first().map_or(position, |m| m.iteration);
    msgs.iter()
        .find(|m| m.sender == pdc)
        .map(|m| &m.a_reported * order.alpha)
        .ok_or(Error::MissingMessage { pdc, k })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Average,
    RoundRobin,
}

/// What the supervisor saw at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub z: Vec<f64>,
    /// `ā_i^k` per PDC (index `i − 1`); `None` when excluded or not received.
    pub a: Vec<Option<Vec<f64>>>,
    /// `w̄_i^{k−1}` as transmitted alongside `ā_i^k`.
    pub w: Vec<Option<Vec<f64>>>,
    pub protocol: Protocol,
    pub excluded: Vec<usize>,
    /// PDC feeding `z^k` under round robin.
    pub rr_source: Option<usize>,
    /// 1-based position since the last switch to round robin.
    pub rr_position: Option<usize>,
    pub rho: f64,
}

/// Unbiased estimates and injected biases. Never visible to the supervisor.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    pub k: usize,
    pub a: Vec<Option<DVector<f64>>>,
    pub bias: Vec<Option<DVector<f64>>>,
}

/// The iterating system: local estimators, supervisor state, attacker and logs.
#[derive(Debug, Clone)]
pub struct ConsensusLoop {
    estimators: Vec<EstimatorState>,
    z: DVector<f64>,
    k: usize,
    protocol: Protocol,
    order: RoundOrder,
    rr_start: usize,
    rr_working: Vec<usize>,
    excluded: BTreeSet<usize>,
    attack: AttackSpec,
    drops: BTreeSet<(usize, usize)>,
    records: Vec<IterationRecord>,
    truth: Vec<TruthRecord>,
}

impl ConsensusLoop {
    pub fn new(blocks: &[HankelBlock], rho: f64, attack: AttackSpec) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one block is required".into()))?;
        let dim = first.order();
        let estimators = blocks
            .iter()
            .map(|b| {
                check_dim(b.order(), dim, "block order")?;
                EstimatorState::new(b, rho)
            })
            .collect::<Result<Vec<_>>>()?;
        attack.validate(estimators.len(), dim)?;
        let n = estimators.len();
        Ok(Self {
            estimators,
            z: DVector::zeros(dim),
            k: 0,
            protocol: Protocol::Average,
            order: RoundOrder::fixed(n, 1.0),
            rr_start: 1,
            rr_working: Vec::new(),
            excluded: BTreeSet::new(),
            attack,
            drops: BTreeSet::new(),
            records: Vec::new(),
            truth: Vec::new(),
        })
    }

    pub fn pdc_count(&self) -> usize {
        self.estimators.len()
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    /// Last completed iteration.
    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn excluded(&self) -> &BTreeSet<usize> {
        &self.excluded
    }

    pub fn active(&self) -> BTreeSet<usize> {
        (1..=self.pdc_count()).filter(|i| !self.excluded.contains(i)).collect()
    }

    pub fn estimator(&self, pdc: usize) -> &EstimatorState {
        &self.estimators[pdc - 1]
    }

    pub fn rho(&self) -> f64 {
        self.estimators[0].rho()
    }

    /// Supervisor-visible trace.
    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// Ground-truth log for analysis and tests.
    pub fn truth(&self) -> &[TruthRecord] {
        &self.truth
    }

    pub fn attack(&self) -> &AttackSpec {
        &self.attack
    }

    /// Marks the message of `pdc` at iteration `k` as lost.
    pub fn drop_message(&mut self, k: usize, pdc: usize) {
        self.drops.insert((k, pdc));
    }

    /// Switches to round robin from the next iteration; the schedule restarts
    /// at position 1.
    pub fn switch_to_round_robin(&mut self, order: RoundOrder) -> Result<()> {
        order.validate(self.pdc_count())?;
        self.order = order;
        self.protocol = Protocol::RoundRobin;
        self.rr_start = self.k + 1;
        self.rr_working.clear();
        Ok(())
    }

    pub fn switch_to_average(&mut self) {
        self.protocol = Protocol::Average;
    }

    pub fn round_order(&self) -> &RoundOrder {
        &self.order
    }

    /// Broadcasts a new penalty factor to every PDC.
    pub fn set_rho(&mut self, rho: f64) -> Result<()> {
        self.estimators.iter_mut().try_for_each(|e| e.set_rho(rho))
    }

    pub fn exclude(&mut self, pdcs: &BTreeSet<usize>) -> Result<()> {
        if let Some(i) = pdcs.iter().find(|&&i| i == 0 || i > self.pdc_count()) {
            return Err(Error::InvalidArgument(format!("PDC {i} out of range")));
        }
        let mut next = self.excluded.clone();
        next.extend(pdcs.iter().copied());
        if next.len() >= self.pdc_count() {
            return Err(Error::InvalidArgument("cannot exclude every PDC".into()));
        }
        self.excluded = next;
        Ok(())
    }

    /// Zeroes the duals of active PDCs.
    pub fn reset_duals(&mut self) {
        for i in self.active() {
            self.estimators[i - 1].w.fill(0.0);
        }
    }

    /// Sets the primal of every active PDC to the last broadcast `z`.
    pub fn reset_primals_to_z(&mut self) {
        for i in self.active() {
            self.estimators[i - 1].a = self.z.clone();
        }
    }

    fn select_rr_source(&mut self, position: usize, received: &BTreeSet<usize>) -> Result<usize> {
        let n = self.pdc_count();
        let idx = (position - 1) % n;
        if idx == 0 {
            self.rr_working = self.order.period((position - 1) / n).to_vec();
        }
        if !received.contains(&self.rr_working[idx]) {
            // swap in the next unvisited PDC of this period
            let alt = (idx + 1..n).find(|&j| received.contains(&self.rr_working[j]));
            match alt {
                Some(j) => self.rr_working.swap(idx, j),
                None => return Err(Error::MissingMessage { pdc: self.rr_working[idx], k: self.k + 1 }),
            }
        }
        Ok(self.rr_working[idx])
    }

    /// Runs one iteration and returns its supervisor record.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let k = self.k + 1;
        let n = self.pdc_count();
        let dim = self.dim();
        let active = self.active();
        let mut msgs = Vec::with_capacity(active.len());
        let mut truth_a = vec![None; n];
        let mut truth_bias = vec![None; n];
        for &i in &active {
            let est = &mut self.estimators[i - 1];
            let w_prev = est.w.clone();
            let a = est.primal_update(&self.z)?.clone();
            truth_bias[i - 1] = Some(bias_at(&self.attack, i, k, dim));
            truth_a[i - 1] = Some(a.clone());
            if self.drops.contains(&(k, i)) {
                continue;
            }
            let msg = ConsensusMsg { sender: i, iteration: k, a_reported: a, w_reported: w_prev };
            msgs.push(apply_attack(msg, &self.attack));
        }
        let received: BTreeSet<usize> = msgs.iter().map(|m| m.sender).collect();
        let (z, rr_source, rr_position) = match self.protocol {
            Protocol::Average => (average_consensus(&msgs, &active)?, None, None),
            Protocol::RoundRobin => {
                let position = k - self.rr_start + 1;
                let src = self.select_rr_source(position, &received)?;
                let msg = msgs.iter().find(|m| m.sender == src).expect("received");
                (&msg.a_reported * self.order.alpha, Some(src), Some(position))
            }
        };
        self.z = z;
        for &i in &active {
            self.estimators[i - 1].dual_update(&self.z)?;
        }
        self.k = k;
        let mut a_rep = vec![None; n];
        let mut w_rep = vec![None; n];
        for m in msgs {
            a_rep[m.sender - 1] = Some(m.a_reported.as_slice().to_vec());
            w_rep[m.sender - 1] = Some(m.w_reported.as_slice().to_vec());
        }
        self.truth.push(TruthRecord { k, a: truth_a, bias: truth_bias });
        self.records.push(IterationRecord {
            k,
            z: self.z.as_slice().to_vec(),
            a: a_rep,
            w: w_rep,
            protocol: self.protocol,
            excluded: self.excluded.iter().copied().collect(),
            rr_source,
            rr_position,
            rho: self.rho(),
        });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn run(&mut self, iters: usize) -> Result<()> {
        for _ in 0..iters {
            self.step()?;
        }
        Ok(())
    }
}

/// One-shot loop run returning the supervisor trace.
pub fn run_loop(
    blocks: &[HankelBlock],
    rho: f64,
    protocol: Protocol,
    order: Option<RoundOrder>,
    iters: usize,
    attack: Option<AttackSpec>,
    exclusions: &BTreeSet<usize>,
) -> Result<ConsensusLoop> {
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let mut lp = ConsensusLoop::new(blocks, rho, attack.unwrap_or_else(AttackSpec::none))?;
    lp.exclude(exclusions)?;
    if protocol == Protocol::RoundRobin {
        let n = lp.pdc_count();
        lp.switch_to_round_robin(order.unwrap_or_else(|| RoundOrder::fixed(n, 1.0)))?;
    }
    lp.run(iters)?;
    Ok(lp)
}

/// Stacked linear model of the averaging loop.
///
/// With `A_i = (H_iᵀH_i + ρI)⁻¹` and average bias `Δ^k`, the estimates obey
/// `[a^{k+1}; a^k] = L [a^k; a^{k−1}] + [P; 0] u^k` with `u^k = 2Δ^k − Δ^{k−1}`,
/// which is `PΔ` for a constant bias. It holds from `k = 1` with `a⁰ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateModel {
    pub l: DMatrix<f64>,
    pub p: DMatrix<f64>,
    dim: usize,
    pdcs: usize,
}

pub fn build_state_model(blocks: &[HankelBlock], rho: f64) -> Result<StateModel> {
    check_rho(rho)?;
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one block is required".into()))?;
    let d = first.order();
    let n = blocks.len();
    let nf = n as f64;
    let mut l = DMatrix::zeros(2 * n * d, 2 * n * d);
    let mut p = DMatrix::zeros(n * d, d);
    for (i, b) in blocks.iter().enumerate() {
        check_dim(b.order(), d, "block order")?;
        let gram = b.h.tr_mul(&b.h) + DMatrix::<f64>::identity(d, d) * rho;
        let a_i = gram
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("singular HᵀH + ρI".into()))?;
        let ra = &a_i * rho;
        for j in 0..n {
            let blk = if i == j {
                DMatrix::<f64>::identity(d, d) + &ra * ((2.0 - nf) / nf)
            } else {
                &ra * (2.0 / nf)
            };
            l.view_mut((i * d, j * d), (d, d)).copy_from(&blk);
            l.view_mut((i * d, (n + j) * d), (d, d)).copy_from(&(&ra * (-1.0 / nf)));
        }
        p.view_mut((i * d, 0), (d, d)).copy_from(&ra);
    }
    for r in 0..n * d {
        l[(n * d + r, r)] = 1.0;
    }
    Ok(StateModel { l, p, dim: d, pdcs: n })
}

impl StateModel {
    /// Propagates from `a¹` (stacked first primal iterate) and `a⁰ = 0`.
    /// `bias[k−1]` is the average bias `Δ^k`. Returns stacked `a^1..=a^{iters}`.
    pub fn simulate(&self, a1: &DVector<f64>, bias: &[DVector<f64>], iters: usize) -> Vec<DVector<f64>> {
        let nd = self.pdcs * self.dim;
        let mut state = DVector::zeros(2 * nd);
        state.rows_mut(0, nd).copy_from(a1);
        let mut out = vec![a1.clone()];
        let zero = DVector::zeros(self.dim);
        let at = |k: usize| if k >= 1 && k <= bias.len() { &bias[k - 1] } else { &zero };
        for k in 1..iters {
            let u = at(k) * 2.0 - at(k - 1);
            let mut next = &self.l * &state;
            let drive = &self.p * u;
            next.rows_mut(0, nd).zip_apply(&drive, |x, y| *x += y);
            state = next;
            out.push(state.rows(0, nd).into_owned());
        }
        out
    }
}
