//! Health-aware EV charging over an hourly $/kWh signal.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::health::HealthSignal;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("session {id} is infeasible: {reason}")]
    InfeasibleSession { id: String, reason: String },
    #[error("window of {0} slots is too large for enumeration (max {MAX_BRUTE_FORCE_WINDOW})")]
    WindowTooLarge(usize),
    #[error("signal covers {len} slots but session {id} ends at slot {departure}")]
    SignalCoverageGap { id: String, departure: usize, len: usize },
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("unknown strategy '{0}'")]
    UnknownStrategy(String),
    #[error("malformed sessions file: {0}")]
    Malformed(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub const MAX_BRUTE_FORCE_WINDOW: usize = 20;

/// kWh per MWh; converts $/MWh signals to $/kWh slot prices.
pub const KWH_PER_MWH: f64 = 1000.0;

/// Relative tolerance under which a slot remainder counts as empty or full.
pub const WHOLE_SLOT_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChargingSession {
    pub id: String,
    /// First usable slot (inclusive).
    pub arrival: usize,
    /// Last usable slot (inclusive).
    pub departure: usize,
    pub demand_kwh: f64,
    /// Energy delivered by one full slot, kWh.
    pub rate_kw: f64,
}

impl ChargingSession {
    pub fn window_len(&self) -> usize {
        self.departure - self.arrival + 1
    }

    fn infeasible(&self, reason: impl Into<String>) -> SchedulerError {
        SchedulerError::InfeasibleSession {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.arrival > self.departure {
            return Err(self.infeasible("arrival after departure"));
        }
        if !(self.rate_kw > 0.0) || !self.rate_kw.is_finite() {
            return Err(self.infeasible("rate must be positive"));
        }
        if !(self.demand_kwh >= 0.0) || !self.demand_kwh.is_finite() {
            return Err(self.infeasible("demand must be non-negative"));
        }
        if self.demand_kwh > self.rate_kw * self.window_len() as f64 {
            return Err(self.infeasible(format!(
                "{} kWh exceeds {} slots at {} kW",
                self.demand_kwh,
                self.window_len(),
                self.rate_kw
            )));
        }
        Ok(())
    }

    /// Slots needed and the energy of the one partially used slot.
    /// Remainders within [`WHOLE_SLOT_RTOL`] of zero or of a full slot are
    /// snapped, so a demand that is a whole number of slots up to rounding
    /// has no sliver slot whose placement is an arbitrary tie.
    pub fn slots_needed(&self) -> (usize, f64) {
        if self.demand_kwh == 0.0 {
            return (0, 0.0);
        }
        let n = ((self.demand_kwh / self.rate_kw).ceil() as usize).clamp(1, self.window_len());
        let remainder = self.demand_kwh - (n - 1) as f64 * self.rate_kw;
        let tol = WHOLE_SLOT_RTOL * self.rate_kw;
        if n > 1 && remainder <= tol {
            return (n - 1, self.rate_kw);
        }
        if self.rate_kw - remainder <= tol {
            return (n, self.rate_kw);
        }
        (n, remainder)
    }
}

/// Per-slot energy over the session window; a slot is "on" when its energy
/// is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub start: usize,
    pub energy: Vec<f64>,
}

impl Schedule {
    pub fn bits(&self) -> Vec<bool> {
        self.energy.iter().map(|&e| e > 0.0).collect()
    }

    pub fn delivered(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// `Σ energy_t · h_t` in chronological order. `h` is indexed by absolute
    /// slot.
    pub fn cost(&self, h: &[f64]) -> f64 {
        self.energy
            .iter()
            .enumerate()
            .filter(|(_, e)| **e > 0.0)
            .map(|(i, e)| e * h[self.start + i])
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Optimal,
    FirstHours,
    LatestHours,
    Continuous,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Optimal,
        Strategy::FirstHours,
        Strategy::LatestHours,
        Strategy::Continuous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Optimal => "optimal",
            Strategy::FirstHours => "first_hours",
            Strategy::LatestHours => "latest_hours",
            Strategy::Continuous => "continuous",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SchedulerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| SchedulerError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub total_cost: f64,
    pub schedule: Schedule,
}

fn check_signal(session: &ChargingSession, h: &[f64]) -> Result<(), SchedulerError> {
    if session.departure >= h.len() {
        return Err(SchedulerError::SignalCoverageGap {
            id: session.id.clone(),
            departure: session.departure,
            len: h.len(),
        });
    }
    Ok(())
}

/// Full slots at rate, the partial remainder on `partial`.
fn build(session: &ChargingSession, slots: &[usize], partial: Option<usize>) -> Schedule {
    let (_, remainder) = session.slots_needed();
    let mut energy = vec![0.0; session.window_len()];
    for &s in slots {
        energy[s - session.arrival] = session.rate_kw;
    }
    if let Some(p) = partial {
        energy[p - session.arrival] = remainder;
    }
    Schedule {
        start: session.arrival,
        energy,
    }
}

/// Exact minimizer: the `n` cheapest slots (earliest wins ties), with any
/// partial remainder placed on the dearest of them.
pub fn optimal_schedule(session: &ChargingSession, h: &[f64]) -> Result<Schedule, SchedulerError> {
    session.validate()?;
    check_signal(session, h)?;
    let (n, _) = session.slots_needed();
    let mut slots: Vec<usize> = (session.arrival..=session.departure).collect();
    slots.sort_by(|a, b| h[*a].total_cmp(&h[*b]).then(a.cmp(b)));
    slots.truncate(n);
    let partial = slots.last().copied();
    slots.sort_unstable();
    Ok(build(session, &slots, partial))
}

/// Exhaustive search over every set of `n` slots and every placement of the
/// partial remainder within it.
pub fn brute_force_schedule(session: &ChargingSession, h: &[f64]) -> Result<Schedule, SchedulerError> {
    session.validate()?;
    check_signal(session, h)?;
    let w = session.window_len();
    if w > MAX_BRUTE_FORCE_WINDOW {
        return Err(SchedulerError::WindowTooLarge(w));
    }
    let (n, remainder) = session.slots_needed();
    if n == 0 {
        return Ok(build(session, &[], None));
    }
    let prices = &h[session.arrival..=session.departure];
    let c = session.rate_kw;
    let mut best: Option<(f64, u32, usize)> = None;
    for mask in 0u32..(1u32 << w) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let full: f64 = (0..w).filter(|i| mask >> i & 1 == 1).map(|i| c * prices[i]).sum();
        for p in (0..w).filter(|i| mask >> i & 1 == 1) {
            let cost = full - c * prices[p] + remainder * prices[p];
            if best.is_none_or(|(b, _, _)| cost < b) {
                best = Some((cost, mask, p));
            }
        }
    }
    let (_, mask, p) = best.expect("at least one subset");
    let slots: Vec<usize> = (0..w)
        .filter(|i| mask >> i & 1 == 1)
        .map(|i| session.arrival + i)
        .collect();
    Ok(build(session, &slots, Some(session.arrival + p)))
}

/// First-hours, latest-hours or cheapest contiguous block; the remainder
/// goes on the block's final slot.
pub fn baseline_schedule(session: &ChargingSession, h: &[f64], strategy: Strategy) -> Result<Schedule, SchedulerError> {
    session.validate()?;
    check_signal(session, h)?;
    let (n, _) = session.slots_needed();
    if n == 0 {
        return Ok(build(session, &[], None));
    }
    let block_start = match strategy {
        Strategy::FirstHours => session.arrival,
        Strategy::LatestHours => session.departure + 1 - n,
        Strategy::Continuous => {
            let mut best: Option<(f64, usize)> = None;
            for s in session.arrival..=session.departure + 1 - n {
                let cost = block(session, s, n).cost(h);
                if best.is_none_or(|(b, _)| cost < b) {
                    best = Some((cost, s));
                }
            }
            best.expect("window holds at least one block").1
        }
        Strategy::Optimal => return optimal_schedule(session, h),
    };
    Ok(block(session, block_start, n))
}

fn block(session: &ChargingSession, start: usize, n: usize) -> Schedule {
    let slots: Vec<usize> = (start..start + n).collect();
    build(session, &slots, Some(start + n - 1))
}

pub fn schedule_for(session: &ChargingSession, h: &[f64], strategy: Strategy) -> Result<Schedule, SchedulerError> {
    match strategy {
        Strategy::Optimal => optimal_schedule(session, h),
        other => baseline_schedule(session, h, other),
    }
}

/// $/kWh per slot from a $/MWh signal.
pub fn slot_prices(signal: &[HealthSignal]) -> Vec<f64> {
    signal.iter().map(|s| s.total() / KWH_PER_MWH).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FleetResult {
    pub totals: IndexMap<Strategy, f64>,
}

impl FleetResult {
    /// Percent reduction of `strategy` relative to `baseline`.
    pub fn reduction_pct(&self, strategy: Strategy, baseline: Strategy) -> Option<f64> {
        let (s, b) = (self.totals.get(&strategy)?, self.totals.get(&baseline)?);
        Some(if *b == 0.0 { 0.0 } else { (b - s) / b * 100.0 })
    }

    /// `strategy,total_usd,reduction_vs_first_pct,reduction_vs_latest_pct,reduction_vs_continuous_pct`
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("strategy,total_usd,reduction_vs_first_pct,reduction_vs_latest_pct,reduction_vs_continuous_pct\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (st, total) in &self.totals {
            out.push_str(&format!(
                "{},{:.6},{},{},{}\n",
                st,
                total,
                cell(self.reduction_pct(*st, Strategy::FirstHours)),
                cell(self.reduction_pct(*st, Strategy::LatestHours)),
                cell(self.reduction_pct(*st, Strategy::Continuous)),
            ));
        }
        out
    }
}

/// Schedules every session with each strategy against `signal` and sums
/// the costs. With `cost_signal`, the chosen schedules are re-costed
/// against it instead (for example oracle labels behind a forecast).
pub fn evaluate_fleet(
    sessions: &[ChargingSession],
    signal: &[HealthSignal],
    strategies: &[Strategy],
    cost_signal: Option<&[HealthSignal]>,
) -> Result<FleetResult, SchedulerError> {
    let h = slot_prices(signal);
    let cost_h = cost_signal.map(slot_prices);
    let mut totals: IndexMap<Strategy, f64> = strategies.iter().map(|s| (*s, 0.0)).collect();
    for session in sessions {
        if let Some(ch) = &cost_h {
            check_signal(session, ch)?;
        }
        for (st, total) in totals.iter_mut() {
            let schedule = schedule_for(session, &h, *st)?;
            *total += schedule.cost(cost_h.as_deref().unwrap_or(&h));
        }
    }
    Ok(FleetResult { totals })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandDistribution {
    Empirical { values: Vec<f64> },
    Uniform { min: f64, max: f64 },
    /// Normal restricted to `[min, max]` by rejection.
    Normal { mean: f64, std: f64, min: f64, max: f64 },
}

/// Session sampling settings. Arrival bins are hours of the session's
/// start day; departure bins count hours from the same midnight and may run
/// into the next day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionDistributions {
    pub arrival_hist: Vec<f64>,
    pub departure_hist: Vec<f64>,
    pub demand: DemandDistribution,
    pub rate_kw: f64,
    /// Start days are drawn uniformly from `0..day_span`.
    pub day_span: usize,
    /// Slot index of the first day's midnight.
    #[serde(default)]
    pub first_slot: usize,
}

fn weighted(hist: &[f64], what: &str) -> Result<WeightedIndex<f64>, SchedulerError> {
    if hist.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(SchedulerError::DegenerateDistribution(format!("{what} has invalid weights")));
    }
    WeightedIndex::new(hist).map_err(|e| SchedulerError::DegenerateDistribution(format!("{what}: {e}")))
}

pub fn sample_sessions(count: usize, dists: &SessionDistributions, seed: u64) -> Result<Vec<ChargingSession>, SchedulerError> {
    let arrivals = weighted(&dists.arrival_hist, "arrival histogram")?;
    let departures = weighted(&dists.departure_hist, "departure histogram")?;
    if dists.day_span == 0 {
        return Err(SchedulerError::DegenerateDistribution("day_span must be positive".into()));
    }
    if !(dists.rate_kw > 0.0) {
        return Err(SchedulerError::DegenerateDistribution("rate must be positive".into()));
    }
    let last_departure = dists.departure_hist.iter().rposition(|w| *w > 0.0).unwrap_or(0);
    if let Some(a) = dists.arrival_hist.iter().rposition(|w| *w > 0.0) {
        if a >= last_departure {
            return Err(SchedulerError::DegenerateDistribution(format!(
                "arrival hour {a} has no later departure"
            )));
        }
    }
    match &dists.demand {
        DemandDistribution::Empirical { values } if values.is_empty() || values.iter().any(|v| !(*v >= 0.0)) => {
            return Err(SchedulerError::DegenerateDistribution("empirical demand needs non-negative values".into()));
        }
        DemandDistribution::Uniform { min, max } if !(0.0 <= *min && min <= max) => {
            return Err(SchedulerError::DegenerateDistribution("uniform demand needs 0 <= min <= max".into()));
        }
        DemandDistribution::Normal { std, min, max, .. } if !(*std >= 0.0 && 0.0 <= *min && min <= max) => {
            return Err(SchedulerError::DegenerateDistribution("normal demand needs std >= 0 and 0 <= min <= max".into()));
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let day = rng.random_range(0..dists.day_span);
        let a = arrivals.sample(&mut rng);
        let d = loop {
            let d = departures.sample(&mut rng);
            if d > a {
                break d;
            }
        };
        let base = dists.first_slot + day * 24;
        let window = (d - a + 1) as f64;
        let demand = sample_demand(&dists.demand, &mut rng).min(dists.rate_kw * window);
        out.push(ChargingSession {
            id: format!("s{i:05}"),
            arrival: base + a,
            departure: base + d,
            demand_kwh: demand,
            rate_kw: dists.rate_kw,
        });
    }
    Ok(out)
}

fn sample_demand(dist: &DemandDistribution, rng: &mut ChaCha8Rng) -> f64 {
    match dist {
        DemandDistribution::Empirical { values } => values[rng.random_range(0..values.len())],
        DemandDistribution::Uniform { min, max } => {
            if min == max {
                *min
            } else {
                rng.random_range(*min..*max)
            }
        }
        DemandDistribution::Normal { mean, std, min, max } => {
            let n = Normal::new(*mean, *std).expect("validated std");
            for _ in 0..1000 {
                let v = n.sample(rng);
                if (*min..=*max).contains(&v) {
                    return v;
                }
            }
            mean.clamp(*min, *max)
        }
    }
}

/// `session_id,arrival,departure,demand_kwh,rate_kw`
pub fn write_sessions(sessions: &[ChargingSession]) -> String {
    let mut out = String::from("session_id,arrival,departure,demand_kwh,rate_kw\n");
    for s in sessions {
        out.push_str(&format!("{},{},{},{},{}\n", s.id, s.arrival, s.departure, s.demand_kwh, s.rate_kw));
    }
    out
}

pub fn read_sessions<R: Read>(reader: R) -> Result<Vec<ChargingSession>, SchedulerError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(SchedulerError::Malformed(format!("expected 5 fields, found {}", rec.len())));
        }
        let bad = |what: &str, v: &str| SchedulerError::Malformed(format!("bad {what} '{v}' in session {}", &rec[0]));
        let s = ChargingSession {
            id: rec[0].to_string(),
            arrival: rec[1].parse().map_err(|_| bad("arrival", &rec[1]))?,
            departure: rec[2].parse().map_err(|_| bad("departure", &rec[2]))?,
            demand_kwh: rec[3].parse().map_err(|_| bad("demand", &rec[3]))?,
            rate_kw: rec[4].parse().map_err(|_| bad("rate", &rec[4]))?,
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as Strategy2;
    use rand::{Rng, SeedableRng};

    fn session(arrival: usize, departure: usize, demand: f64, rate: f64) -> ChargingSession {
        ChargingSession {
            id: "x".into(),
            arrival,
            departure,
            demand_kwh: demand,
            rate_kw: rate,
        }
    }

    const H: [f64; 4] = [3.0, 1.0, 2.0, 5.0];

    #[test]
    fn optimal_picks_cheapest_slots() {
        let s = session(0, 3, 2.0, 1.0);
        let sched = optimal_schedule(&s, &H).unwrap();
        assert_eq!(sched.bits(), vec![false, true, true, false]);
        assert_eq!(sched.cost(&H), 3.0);
        assert_eq!(brute_force_schedule(&s, &H).unwrap().cost(&H), 3.0);
    }

    #[test]
    fn rounding_slivers_are_snapped() {
        // 5 · 3.362960712382063 rounds one ulp below five full slots
        let rate = 3.362960712382063;
        let s = session(0, 9, 16.814803561910313, rate);
        assert_eq!(s.slots_needed(), (5, rate));
        let s = session(0, 9, 3.0 * rate + 1e-15, rate);
        assert_eq!(s.slots_needed(), (3, rate));
        assert_eq!(session(0, 9, 2.5, 1.0).slots_needed(), (3, 0.5));
    }

    #[test]
    fn full_window_is_forced() {
        let s = session(0, 3, 4.0, 1.0);
        for st in Strategy::ALL {
            assert_eq!(schedule_for(&s, &H, st).unwrap().bits(), vec![true; 4]);
        }
    }

    #[test]
    fn constant_prices_take_the_first_slots() {
        let h = [2.0; 6];
        let s = session(0, 5, 3.0, 1.0);
        assert_eq!(optimal_schedule(&s, &h).unwrap().bits(), vec![true, true, true, false, false, false]);
    }

    #[test]
    fn baselines_on_the_worked_example() {
        let s = session(0, 3, 2.0, 1.0);
        let cost = |st| baseline_schedule(&s, &H, st).unwrap().cost(&H);
        assert_eq!(cost(Strategy::FirstHours), 4.0);
        assert_eq!(cost(Strategy::LatestHours), 7.0);
        assert_eq!(cost(Strategy::Continuous), 3.0);
        assert_eq!(baseline_schedule(&s, &H, Strategy::Continuous).unwrap().bits(), vec![false, true, true, false]);
    }

    #[test]
    fn increasing_prices_make_continuous_equal_first() {
        let h: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let s = session(1, 7, 3.0, 1.0);
        assert_eq!(
            baseline_schedule(&s, &h, Strategy::Continuous).unwrap(),
            baseline_schedule(&s, &h, Strategy::FirstHours).unwrap()
        );
    }

    #[test]
    fn brute_force_edge_cases() {
        let s = session(2, 2, 1.0, 1.0);
        assert_eq!(brute_force_schedule(&s, &H).unwrap().bits(), vec![true]);
        let empty = session(0, 3, 0.0, 1.0);
        let sched = brute_force_schedule(&empty, &H).unwrap();
        assert_eq!(sched.cost(&H), 0.0);
        assert!(sched.bits().iter().all(|b| !b));
        let big = session(0, 25, 1.0, 1.0);
        assert!(matches!(brute_force_schedule(&big, &[0.0; 30]), Err(SchedulerError::WindowTooLarge(26))));
    }

    #[test]
    fn partial_slot_preserves_demand() {
        let s = session(0, 3, 2.5, 1.0);
        let sched = optimal_schedule(&s, &H).unwrap();
        assert_eq!(sched.delivered(), 2.5);
        assert_eq!(sched.energy, vec![0.5, 1.0, 1.0, 0.0]);
        assert_eq!(sched.cost(&H), brute_force_schedule(&s, &H).unwrap().cost(&H));
    }

    #[test]
    fn infeasible_and_gap_errors() {
        assert!(matches!(
            optimal_schedule(&session(0, 1, 5.0, 1.0), &H),
            Err(SchedulerError::InfeasibleSession { .. })
        ));
        assert!(matches!(
            optimal_schedule(&session(2, 6, 1.0, 1.0), &H),
            Err(SchedulerError::SignalCoverageGap { .. })
        ));
    }

    fn signal(h: &[f64]) -> Vec<HealthSignal> {
        h.iter()
            .enumerate()
            .map(|(t, v)| HealthSignal {
                timestamp: t as i64,
                internal_cost: v * 400.0,
                external_cost: v * 600.0,
            })
            .collect()
    }

    #[test]
    fn fleet_examples() {
        let sig = signal(&H);
        let s = session(0, 3, 2.0, 1.0);
        let r = evaluate_fleet(std::slice::from_ref(&s), &sig, &[Strategy::FirstHours], None).unwrap();
        assert_eq!(r.totals[&Strategy::FirstHours], 4.0);
        let empty = evaluate_fleet(&[], &sig, &Strategy::ALL, None).unwrap();
        assert!(empty.totals.values().all(|&v| v == 0.0));
        let r = evaluate_fleet(&[s], &sig, &Strategy::ALL, None).unwrap();
        assert!((r.reduction_pct(Strategy::Optimal, Strategy::LatestHours).unwrap() - (7.0 - 3.0) / 7.0 * 100.0).abs() < 1e-12);
    }

    #[test]
    fn recosting_uses_the_second_signal() {
        let predicted = signal(&H);
        let oracle = signal(&[1.0, 1.0, 1.0, 1.0]);
        let s = session(0, 3, 2.0, 1.0);
        let r = evaluate_fleet(&[s], &predicted, &[Strategy::Optimal], Some(&oracle)).unwrap();
        assert_eq!(r.totals[&Strategy::Optimal], 2.0);
    }

    fn dists(arrival: Vec<f64>, departure: Vec<f64>) -> SessionDistributions {
        SessionDistributions {
            arrival_hist: arrival,
            departure_hist: departure,
            demand: DemandDistribution::Uniform { min: 5.0, max: 30.0 },
            rate_kw: 7.0,
            day_span: 10,
            first_slot: 0,
        }
    }

    #[test]
    fn point_masses_give_identical_sessions() {
        let mut a = vec![0.0; 24];
        a[18] = 1.0;
        let mut d = vec![0.0; 48];
        d[31] = 1.0;
        let mut cfg = dists(a, d);
        cfg.day_span = 1;
        cfg.demand = DemandDistribution::Empirical { values: vec![12.0] };
        let fleet = sample_sessions(50, &cfg, 3).unwrap();
        assert!(fleet.iter().all(|s| (s.arrival, s.departure, s.demand_kwh) == (18, 31, 12.0)));
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = dists(vec![1.0; 24], vec![1.0; 48]);
        assert_eq!(sample_sessions(200, &cfg, 9).unwrap(), sample_sessions(200, &cfg, 9).unwrap());
        assert_ne!(sample_sessions(200, &cfg, 9).unwrap(), sample_sessions(200, &cfg, 10).unwrap());
    }

    #[test]
    fn arrival_frequencies_follow_the_histogram() {
        let hist: Vec<f64> = (0..24).map(|h| 1.0 + ((h as f64) / 3.0).sin().abs() * 4.0).collect();
        let total: f64 = hist.iter().sum();
        let cfg = dists(hist.clone(), vec![1.0; 48]);
        let fleet = sample_sessions(10_000, &cfg, 1).unwrap();
        let mut counts = [0usize; 24];
        for s in &fleet {
            counts[s.arrival % 24] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&hist)
            .map(|(c, w)| (*c as f64 / 10_000.0 - w / total).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "{tv}");
        assert!(fleet.iter().all(|s| s.departure > s.arrival && s.validate().is_ok()));
    }

    #[test]
    fn degenerate_distributions() {
        let mut d = vec![0.0; 48];
        d[3] = 1.0;
        let mut a = vec![0.0; 24];
        a[10] = 1.0;
        assert!(matches!(sample_sessions(1, &dists(a, d), 0), Err(SchedulerError::DegenerateDistribution(_))));
        assert!(matches!(
            sample_sessions(1, &dists(vec![0.0; 24], vec![1.0; 48]), 0),
            Err(SchedulerError::DegenerateDistribution(_))
        ));
    }

    #[test]
    fn sessions_csv_roundtrip() {
        let cfg = dists(vec![1.0; 24], vec![1.0; 48]);
        let fleet = sample_sessions(20, &cfg, 4).unwrap();
        assert_eq!(read_sessions(write_sessions(&fleet).as_bytes()).unwrap(), fleet);
    }

    fn arb_case() -> impl Strategy2<Value = (ChargingSession, Vec<f64>)> {
        (1usize..=12, 0usize..3, 0.5f64..11.0, any::<u64>()).prop_map(|(w, off, rate, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = (0..off + w).map(|_| rng.random_range(0.0..1.0)).collect();
            let demand = rng.random_range(0.0..=rate * w as f64);
            (session(off, off + w - 1, demand, rate), h)
        })
    }

    proptest! {
        #[test]
        fn optimal_matches_brute_force((s, h) in arb_case()) {
            let opt = optimal_schedule(&s, &h).unwrap();
            let brute = brute_force_schedule(&s, &h).unwrap();
            prop_assert_eq!(opt.cost(&h), brute.cost(&h));
        }

        #[test]
        fn optimal_dominates_and_delivers((s, h) in arb_case()) {
            let opt = optimal_schedule(&s, &h).unwrap();
            prop_assert!((opt.delivered() - s.demand_kwh).abs() <= 1e-9 * s.demand_kwh.max(1.0));
            for st in [Strategy::FirstHours, Strategy::LatestHours, Strategy::Continuous] {
                let b = baseline_schedule(&s, &h, st).unwrap();
                prop_assert!(opt.cost(&h) <= b.cost(&h));
                prop_assert!((b.delivered() - s.demand_kwh).abs() <= 1e-9 * s.demand_kwh.max(1.0));
            }
        }

        #[test]
        fn integral_demand_is_exact(w in 1usize..10, n in 0usize..10, seed in any::<u64>()) {
            let n = n.min(w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = (0..w).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = session(0, w - 1, 3.0 * n as f64, 3.0);
            for st in Strategy::ALL {
                let sched = schedule_for(&s, &h, st).unwrap();
                prop_assert_eq!(sched.delivered(), s.demand_kwh);
                prop_assert_eq!(sched.bits().iter().filter(|b| **b).count(), n);
            }
        }

        #[test]
        fn shifting_prices_shifts_costs(w in 1usize..10, n in 0usize..10, k in 0u32..64, seed in any::<u64>()) {
            let n = n.min(w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = (0..w).map(|_| rng.random_range(0u32..256) as f64 / 256.0).collect();
            let shifted: Vec<f64> = h.iter().map(|v| v + k as f64).collect();
            let s = session(0, w - 1, 2.0 * n as f64, 2.0);
            for st in Strategy::ALL {
                let a = schedule_for(&s, &h, st).unwrap();
                let b = schedule_for(&s, &shifted, st).unwrap();
                prop_assert_eq!(&a, &b);
                prop_assert_eq!(b.cost(&shifted), a.cost(&h) + 2.0 * n as f64 * k as f64);
            }
        }
    }
}
