//! Deterministic multi-group worm interaction model.
//!
//! State per group `n` is (S*_n, S′_n, I_An, I_Bn) plus the shared removed
//! pool R. With force terms `A_n = Σ_m β_nm I_Am` and `B_n = Σ_m β_nm I_Bm`:
//!
//! ```text
//! dS*_n = −p S*_n (K^SA_n A_n + K^SB_n B_n) + λ-flows − γ_S S*_n + α (I_An + (1−i) I_Bn)
//! dS′_n = −p K^S′B_n S′_n B_n              + λ-flows − γ_S S′_n + α i I_Bn
//! dI_An =  p (K^SA_n S*_n A_n − K^AB_n I_An B_n) + λ-flows − (α+γ) I_An
//! dI_Bn =  p B_n (K^SB_n S*_n + K^S′B_n S′_n + K^AB_n I_An) + λ-flows − (α+γ) I_Bn
//! dR    =  γ_S Σ(S* + S′) + γ Σ(I_A + I_B)
//! ```
//!
//! Batch arrivals and the delayed predator injection are instantaneous
//! jumps applied between RK4 steps.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Censoring, Metrics};
use crate::model::{
    init_state, join_violations, validate_scenario, Compartment, InteractionType, ModelError,
    Scenario, StateVector, TransitionIndicators, Violation,
};
use crate::scalar::Scalar;
use crate::CsvError;

/// Compartments below this are clamped to zero; further below is an error.
pub const UNDERSHOOT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeSettings {
    /// Fixed RK4 step, seconds.
    pub step: f64,
    /// Record one sample every `output_stride` grid steps.
    pub output_stride: usize,
    /// Populations below this count as extinct when locating TA and TR.
    pub extinction_threshold: f64,
}

impl Default for OdeSettings {
    fn default() -> Self {
        OdeSettings {
            step: 1.0,
            output_stride: 1,
            extinction_threshold: 0.5,
        }
    }
}

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("invalid scenario: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("compartment reached {value} at t={t}s; reduce the integration step")]
    StepTooLarge { t: f64, value: f64 },
    #[error("batch schedule is not sorted by time")]
    UnsortedEvents,
    #[error("invalid integration settings: {0}")]
    Settings(String),
    #[error("{0}")]
    Unsupported(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarkerKind {
    /// Delayed predator seeding; `applied` nodes actually moved to I_B.
    PredatorInjection { group: usize, applied: f64 },
    Batch { index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventMarker {
    pub t: f64,
    pub kind: MarkerKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub state: StateVector<T>,
    /// Cumulative count of nodes ever prey-infected.
    pub ever_prey: T,
    /// Cumulative ∫ Σ I_A dt.
    pub prey_time: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub samples: Vec<Sample<T>>,
    pub events: Vec<EventMarker>,
    /// Maximum Σ I_A seen at any integration step.
    pub peak_prey: T,
    /// Time the predator enters (the delay).
    pub predator_start: f64,
    /// Time of the last batch arrival inside the horizon.
    pub last_batch: f64,
}

impl<T: Scalar> Trajectory<T> {
    pub fn last(&self) -> &Sample<T> {
        self.samples.last().expect("trajectory always holds t=0")
    }
}

/// Scenario parameters laid out for fast evaluation of the right-hand side.
struct OdeModel<T> {
    g: usize,
    beta: Vec<T>,
    prey: Vec<bool>,
    vacc_s: Vec<bool>,
    vacc_sp: Vec<bool>,
    term: Vec<bool>,
    p: T,
    alpha: T,
    gamma: T,
    gamma_s: T,
    immune: T,
    lambda: Option<[Vec<T>; 4]>,
}

// Flat state: 4 compartments per group, then R, then the two accumulators.
const EXTRA: usize = 3;

impl<T: Scalar> OdeModel<T> {
    fn new(scn: &Scenario, flags: TransitionIndicators, alpha: f64) -> Self {
        let g = scn.num_groups();
        let mut beta = Vec::with_capacity(g * g);
        for n in 0..g {
            for m in 0..g {
                beta.push(T::lit(scn.rate(n, m)));
            }
        }
        let lambda = (!scn.group_transitions.is_zero()).then(|| {
            Compartment::ALL.map(|c| {
                let mut v = Vec::with_capacity(g * g);
                for n in 0..g {
                    for m in 0..g {
                        v.push(T::lit(scn.group_transitions.rate(c, n, m)));
                    }
                }
                v
            })
        });
        OdeModel {
            g,
            beta,
            prey: (0..g).map(|n| flags.prey_infects(n)).collect(),
            vacc_s: (0..g).map(|n| flags.vaccinates_susceptible(n)).collect(),
            vacc_sp: (0..g).map(|n| flags.vaccinates_immune(n)).collect(),
            term: (0..g).map(|n| flags.terminates(n)).collect(),
            p: T::lit(scn.on_prob),
            alpha: T::lit(alpha),
            gamma: T::lit(scn.manual_removal_rate),
            gamma_s: T::lit(scn.manual_vaccination_rate),
            immune: T::lit(scn.immunization),
            lambda,
        }
    }

    fn len(&self) -> usize {
        4 * self.g + EXTRA
    }

    fn eval(&self, y: &[T], dy: &mut [T]) {
        let g = self.g;
        let zero = T::zero();
        let one = T::one();
        let mut dr = zero;
        let mut d_ever = zero;
        let mut d_prey_time = zero;
        for n in 0..g {
            let mut force_a = zero;
            let mut force_b = zero;
            for m in 0..g {
                let b = self.beta[n * g + m];
                force_a = force_a + b * y[4 * m + 2];
                force_b = force_b + b * y[4 * m + 3];
            }
            let (s, sp, a, b) = (y[4 * n], y[4 * n + 1], y[4 * n + 2], y[4 * n + 3]);
            let infect = if self.prey[n] { self.p * s * force_a } else { zero };
            let vacc_s = if self.vacc_s[n] { self.p * s * force_b } else { zero };
            let vacc_sp = if self.vacc_sp[n] { self.p * sp * force_b } else { zero };
            let term = if self.term[n] { self.p * a * force_b } else { zero };
            let out = self.alpha + self.gamma;
            dy[4 * n] = -infect - vacc_s - self.gamma_s * s
                + self.alpha * (a + (one - self.immune) * b);
            dy[4 * n + 1] = -vacc_sp - self.gamma_s * sp + self.alpha * self.immune * b;
            dy[4 * n + 2] = infect - term - out * a;
            dy[4 * n + 3] = vacc_s + vacc_sp + term - out * b;
            dr = dr + self.gamma_s * (s + sp) + self.gamma * (a + b);
            d_ever = d_ever + infect;
            d_prey_time = d_prey_time + a;
        }
        if let Some(lambda) = &self.lambda {
            for (c, rates) in lambda.iter().enumerate() {
                for n in 0..g {
                    for m in 0..g {
                        if n == m {
                            continue;
                        }
                        let flow = rates[n * g + m] * y[4 * n + c];
                        dy[4 * n + c] = dy[4 * n + c] - flow;
                        dy[4 * m + c] = dy[4 * m + c] + flow;
                    }
                }
            }
        }
        dy[4 * g] = dr;
        dy[4 * g + 1] = d_ever;
        dy[4 * g + 2] = d_prey_time;
    }
}

/// Instantaneous derivative of every compartment. The returned `t` field is
/// dt/dt = 1.
pub fn rhs<T: Scalar>(
    state: &StateVector<T>,
    scn: &Scenario,
    flags: &TransitionIndicators,
    _t: T,
) -> StateVector<T> {
    let model = OdeModel::new(scn, *flags, scn.effective_alpha());
    let mut y = state.to_flat();
    y.extend([T::zero(); EXTRA - 1]);
    let mut dy = vec![T::zero(); model.len()];
    model.eval(&y, &mut dy);
    StateVector::from_flat(T::one(), &dy, model.g)
}

struct Rk4<T> {
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    tmp: Vec<T>,
}

impl<T: Scalar> Rk4<T> {
    fn new(len: usize) -> Self {
        let z = vec![T::zero(); len];
        Rk4 {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z,
        }
    }

    fn step(&mut self, model: &OdeModel<T>, y: &mut [T], h: T) {
        let half = h / T::lit(2.0);
        model.eval(y, &mut self.k1);
        for (t, (&yi, &k)) in self.tmp.iter_mut().zip(y.iter().zip(&self.k1)) {
            *t = yi + half * k;
        }
        model.eval(&self.tmp, &mut self.k2);
        for (t, (&yi, &k)) in self.tmp.iter_mut().zip(y.iter().zip(&self.k2)) {
            *t = yi + half * k;
        }
        model.eval(&self.tmp, &mut self.k3);
        for (t, (&yi, &k)) in self.tmp.iter_mut().zip(y.iter().zip(&self.k3)) {
            *t = yi + h * k;
        }
        model.eval(&self.tmp, &mut self.k4);
        let sixth = h / T::lit(6.0);
        let two = T::lit(2.0);
        for i in 0..y.len() {
            y[i] = y[i] + sixth * (self.k1[i] + two * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }
}

enum Pending {
    Injection,
    Batch(usize),
}

fn prey_of<T: Scalar>(y: &[T], g: usize) -> T {
    (0..g).fold(T::zero(), |acc, n| acc + y[4 * n + 2])
}

/// Fixed-step RK4 from t=0 to the horizon. Steps are shortened so every
/// scheduled event lands exactly on a step boundary.
pub fn integrate<T: Scalar>(scn: &Scenario, settings: &OdeSettings) -> Result<Trajectory<T>, OdeError> {
    if !(settings.step > 0.0 && settings.step.is_finite()) {
        return Err(OdeError::Settings(format!("step must be positive, got {}", settings.step)));
    }
    if settings.output_stride == 0 {
        return Err(OdeError::Settings("output_stride must be at least 1".into()));
    }
    if !(settings.extinction_threshold > 0.0) {
        return Err(OdeError::Settings(format!(
            "extinction_threshold must be positive, got {}",
            settings.extinction_threshold
        )));
    }
    let violations = validate_scenario(scn);
    if violations
        .iter()
        .any(|v| matches!(v, Violation::UnsortedBatchSchedule { .. }))
    {
        return Err(OdeError::UnsortedEvents);
    }
    if !violations.is_empty() {
        return Err(OdeError::Invalid(violations));
    }
    let init = init_state::<T>(scn)?;
    let model = OdeModel::<T>::new(scn, scn.flags(), scn.effective_alpha());
    let g = model.g;
    let horizon = scn.horizon;
    let h = settings.step;
    let tolerance = UNDERSHOOT_TOLERANCE.max(64.0 * T::epsilon().to_f64_lossy() * scn.total_nodes() as f64);

    let mut pending: Vec<(f64, Pending)> = Vec::new();
    if scn.delay > 0.0 && scn.initial_predator.iter().any(|&c| c > 0) {
        pending.push((scn.delay, Pending::Injection));
    }
    pending.extend(
        scn.batch_schedule
            .iter()
            .enumerate()
            .map(|(i, b)| (b.time, Pending::Batch(i))),
    );
    pending.sort_by(|a, b| a.0.total_cmp(&b.0));
    pending.retain(|(t, _)| *t <= horizon);

    let mut y = init.to_flat();
    y.push(init.prey());
    y.push(T::zero());
    let mut rk = Rk4::new(model.len());
    let mut events = Vec::new();
    let mut peak = prey_of(&y, g);
    let mut next_event = 0;

    let mut apply_due = |t: f64, y: &mut [T], next_event: &mut usize, peak: &mut T| {
        while *next_event < pending.len() && pending[*next_event].0 <= t {
            let (time, ref what) = pending[*next_event];
            match *what {
                Pending::Injection => {
                    for (n, &count) in scn.initial_predator.iter().enumerate() {
                        if count == 0 {
                            continue;
                        }
                        let mut remaining = T::lit(f64::from(count));
                        for idx in [4 * n + 1, 4 * n, 4 * n + 2] {
                            let take = remaining.min(y[idx]).max(T::zero());
                            y[idx] = y[idx] - take;
                            remaining = remaining - take;
                        }
                        let applied = T::lit(f64::from(count)) - remaining;
                        y[4 * n + 3] = y[4 * n + 3] + applied;
                        events.push(EventMarker {
                            t: time,
                            kind: MarkerKind::PredatorInjection {
                                group: n,
                                applied: applied.to_f64_lossy(),
                            },
                        });
                    }
                }
                Pending::Batch(index) => {
                    for d in &scn.batch_schedule[index].deltas {
                        let idx = 4 * d.group + d.compartment.index();
                        let before = y[idx];
                        y[idx] = (before + T::lit(d.count as f64)).max(T::zero());
                        if d.compartment == Compartment::PreyInfected && y[idx] > before {
                            y[4 * g + 1] = y[4 * g + 1] + (y[idx] - before);
                        }
                    }
                    events.push(EventMarker {
                        t: time,
                        kind: MarkerKind::Batch { index },
                    });
                }
            }
            *peak = peak.max(prey_of(y, g));
            *next_event += 1;
        }
    };

    let snapshot = |t: f64, y: &[T]| Sample {
        state: StateVector::from_flat(T::lit(t), y, g),
        ever_prey: y[4 * g + 1],
        prey_time: y[4 * g + 2],
    };

    apply_due(0.0, &mut y, &mut next_event, &mut peak);
    let mut samples = vec![snapshot(0.0, &y)];
    let mut t = 0.0;
    let mut k: u64 = 0;
    while t < horizon {
        let next_grid = (k + 1) as f64 * h;
        let mut target = next_grid.min(horizon);
        if let Some(&(te, _)) = pending.get(next_event) {
            target = target.min(te);
        }
        rk.step(&model, &mut y, T::lit(target - t));
        for v in &mut y[..=4 * g] {
            if *v < T::zero() {
                if v.to_f64_lossy() < -tolerance {
                    return Err(OdeError::StepTooLarge {
                        t: target,
                        value: v.to_f64_lossy(),
                    });
                }
                *v = T::zero();
            }
        }
        t = target;
        let on_grid = target == next_grid;
        if on_grid {
            k += 1;
        }
        peak = peak.max(prey_of(&y, g));
        apply_due(t, &mut y, &mut next_event, &mut peak);
        if (on_grid && k.is_multiple_of(settings.output_stride as u64)) || t >= horizon {
            samples.push(snapshot(t, &y));
        }
    }

    Ok(Trajectory {
        samples,
        events,
        peak_prey: peak,
        predator_start: scn.delay,
        last_batch: scn.last_batch_time(),
    })
}

/// First time at or after `from` where `value` drops below `threshold`,
/// linearly interpolated between samples.
fn first_below<T: Scalar>(
    samples: &[Sample<T>],
    from: f64,
    threshold: f64,
    value: impl Fn(&StateVector<T>) -> T,
) -> Option<f64> {
    let mut prev: Option<(f64, f64)> = None;
    for s in samples {
        let t = s.state.t.to_f64_lossy();
        let v = value(&s.state).to_f64_lossy();
        if t >= from && v < threshold {
            return Some(match prev {
                Some((tp, vp)) if vp >= threshold => {
                    let frac = (vp - threshold) / (vp - v);
                    (tp + frac * (t - tp)).max(from)
                }
                _ => from,
            });
        }
        prev = Some((t, v));
    }
    None
}

/// The six metrics read off a trajectory.
///
/// TI and TL come from quadratures accumulated by the integrator itself, MI
/// from the running maximum at every step. TR is the first time after the
/// last batch that Σ I_A falls below the extinction threshold; TA the first
/// time after both the last batch and the predator start that Σ(S*+S′+I_A)
/// does. Either is `None` when it does not happen before the horizon.
pub fn trajectory_metrics<T: Scalar>(traj: &Trajectory<T>, scn: &Scenario, settings: &OdeSettings) -> Metrics {
    let eps = settings.extinction_threshold;
    let last = traj.last();
    let tr = first_below(&traj.samples, traj.last_batch, eps, |s| s.prey());
    let ta = if scn.flags().can_vaccinate() {
        first_below(
            &traj.samples,
            traj.last_batch.max(traj.predator_start),
            eps,
            |s| s.unsecured(),
        )
        .map(|ta| ta.max(tr.unwrap_or(0.0)))
    } else {
        None
    };
    Metrics {
        ti: last.ever_prey.to_f64_lossy(),
        mi: traj.peak_prey.to_f64_lossy(),
        tl: last.prey_time.to_f64_lossy(),
        al: None,
        ta,
        tr,
        censored: Censoring {
            tl: tr.is_none(),
            al: tr.is_none(),
            ta: ta.is_none(),
            tr: tr.is_none(),
        },
    }
    .with_average_lifespan()
}

/// Per-group test of whether prey growth is non-positive at t=0 under the
/// aggressive one-sided interaction:
/// `S*_n(0) Σ_m β_nm I_Am(0) ≤ I_An(0) Σ_m β_nm I_Bm(0)`.
pub fn suppression_condition(scn: &Scenario) -> Result<Vec<bool>, OdeError> {
    if scn.interaction != InteractionType::AggressiveOneSided {
        return Err(OdeError::Unsupported(
            "suppression condition applies to the aggressive one-sided interaction",
        ));
    }
    let st = init_state::<f64>(scn)?;
    let g = scn.num_groups();
    Ok((0..g)
        .map(|n| {
            let (fa, fb) = (0..g).fold((0.0, 0.0), |(fa, fb), m| {
                let b = scn.rate(n, m);
                (fa + b * st.groups[m].i_a, fb + b * st.groups[m].i_b)
            });
            st.groups[n].s_star * fa <= st.groups[n].i_a * fb
        })
        .collect())
}

/// Expected time for a message from a random source to reach all `n` nodes
/// under uniform pairwise contact rate `beta`: (2 ln N + 0.5772) / (N β).
pub fn broadcast_time_estimate(n: u64, beta: f64) -> Result<f64, OdeError> {
    if n < 2 {
        return Err(OdeError::Domain(format!("need at least two nodes, got {n}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(OdeError::Domain(format!("contact rate must be positive, got {beta}")));
    }
    let n = n as f64;
    Ok((2.0 * n.ln() + 0.5772) / (n * beta))
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    group: usize,
    s_star: f64,
    s_prime: f64,
    i_a: f64,
    i_b: f64,
    r: f64,
}

/// Writes `t,group,s_star,s_prime,i_a,i_b,r`, one row per sample and group
/// (groups numbered from 0, R repeated on every row).
pub fn write_trajectory_csv<T: Scalar, W: Write>(traj: &Trajectory<T>, w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    for s in &traj.samples {
        for (group, gs) in s.state.groups.iter().enumerate() {
            wr.serialize(TrajectoryRow {
                t: s.state.t.to_f64_lossy(),
                group,
                s_star: gs.s_star.to_f64_lossy(),
                s_prime: gs.s_prime.to_f64_lossy(),
                i_a: gs.i_a.to_f64_lossy(),
                i_b: gs.i_b.to_f64_lossy(),
                r: s.state.r.to_f64_lossy(),
            })?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Reads a trajectory CSV back into states (one per distinct `t`).
pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Vec<StateVector<f64>>, CsvError> {
    let mut out: Vec<StateVector<f64>> = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: TrajectoryRow = row?;
        let gs = crate::model::GroupState {
            s_star: row.s_star,
            s_prime: row.s_prime,
            i_a: row.i_a,
            i_b: row.i_b,
        };
        match out.last_mut() {
            Some(last) if last.t == row.t && row.group == last.groups.len() => last.groups.push(gs),
            _ if row.group == 0 => out.push(StateVector {
                t: row.t,
                groups: vec![gs],
                r: row.r,
            }),
            _ => {
                return Err(CsvError::Field(format!(
                    "group {} at t={} is out of order",
                    row.group, row.t
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BatchDelta, BatchEvent, GroupParams, GroupState};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(n: u32, beta: f64, prey: u32, predator: u32, horizon: f64) -> Scenario {
        Scenario::uniform(n, beta, prey, predator, horizon)
    }

    fn two_group() -> Scenario {
        let mut s = single(600, 6e-5, 1, 0, 2000.0);
        s.groups.push(GroupParams {
            n_nodes: 400,
            intra_rate: 9e-5,
        });
        s.inter_rates = vec![vec![0.0, 3e-5], vec![3e-5, 0.0]];
        s.initial_predator = vec![0, 1];
        s.initial_prey = vec![1, 0];
        s
    }

    #[test]
    fn zero_on_probability_freezes_everything() {
        let mut s = single(1000, 5e-5, 3, 2, 100.0);
        s.on_prob = 0.0;
        let st = init_state::<f64>(&s).unwrap();
        let d = rhs(&st, &s, &s.flags(), 0.0);
        assert_eq!(d.groups[0], GroupState::default());
        assert_eq!(d.r, 0.0);
    }

    #[test]
    fn prey_only_reduces_to_si() {
        let mut s = single(1000, 5e-5, 1, 0, 100.0);
        s.interaction = InteractionType::Custom(TransitionIndicators {
            k_s1_a: true,
            ..TransitionIndicators::NONE
        });
        let st = init_state::<f64>(&s).unwrap();
        let d = rhs(&st, &s, &s.flags(), 0.0);
        assert_relative_eq!(d.groups[0].i_a, 5e-5 * 999.0 * 1.0, max_relative = 1e-12);
        assert_relative_eq!(d.groups[0].s_star, -5e-5 * 999.0, max_relative = 1e-12);
    }

    #[test]
    fn aggressive_prey_rate_by_hand() {
        let s = single(1000, 5e-5, 1, 1, 100.0);
        let st = init_state::<f64>(&s).unwrap();
        let d = rhs(&st, &s, &s.flags(), 0.0);
        assert_relative_eq!(d.groups[0].i_a, 0.049850, max_relative = 1e-9);
        assert_relative_eq!(d.groups[0].i_b, 5e-5 * 1.0 * (998.0 + 1.0), max_relative = 1e-9);
    }

    #[test]
    fn horizon_zero_gives_initial_state() {
        let s = single(1000, 5e-5, 1, 1, 0.0);
        let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
        assert_eq!(traj.samples.len(), 1);
        assert_eq!(traj.samples[0].state, init_state::<f64>(&s).unwrap());
    }

    #[test]
    fn two_sided_is_monotone_and_fills_population() {
        let mut s = single(1000, 5e-5, 1, 1, 3000.0);
        s.interaction = InteractionType::AggressiveTwoSided;
        let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
        for w in traj.samples.windows(2) {
            assert!(w[1].state.prey() >= w[0].state.prey() - 1e-12);
            assert!(w[1].state.predator() >= w[0].state.predator() - 1e-12);
        }
        let last = &traj.last().state;
        assert_relative_eq!(last.prey() + last.predator(), 1000.0, max_relative = 1e-6);
        let m = trajectory_metrics(&traj, &s, &OdeSettings::default());
        assert_eq!(m.tr, None);
        assert_eq!(m.ta, None);
        assert!(m.censored.tl && m.censored.al);
    }

    #[test]
    fn no_prey_metrics() {
        let s = single(1000, 5e-5, 0, 1, 2000.0);
        let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
        let m = trajectory_metrics(&traj, &s, &OdeSettings::default());
        assert_eq!((m.ti, m.mi, m.tl), (0.0, 0.0, 0.0));
        assert_eq!(m.al, None);
        assert_eq!(m.tr, Some(0.0));
        assert!(m.ta.is_some());
    }

    #[test]
    fn conservative_never_secures() {
        let mut s = single(1000, 5e-5, 1, 1, 5000.0);
        s.interaction = InteractionType::ConservativeOneSided;
        let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
        let m = trajectory_metrics(&traj, &s, &OdeSettings::default());
        assert_eq!(m.ta, None);
        assert!(m.tr.is_some());
    }

    #[test]
    fn suppression_examples() {
        let mut s = single(10, 5e-5, 1, 9, 10.0);
        s.initial_predator = vec![9];
        // S* = 0
        assert_eq!(suppression_condition(&s).unwrap(), vec![true]);
        let s = single(1000, 5e-5, 1, 1, 10.0);
        assert_eq!(suppression_condition(&s).unwrap(), vec![false]);
        let s = single(1009, 5e-5, 1, 1000, 10.0);
        assert_eq!(init_state::<f64>(&s).unwrap().groups[0].s_star, 8.0);
        assert_eq!(suppression_condition(&s).unwrap(), vec![true]);
        let mut s = single(1000, 5e-5, 1, 1, 10.0);
        s.interaction = InteractionType::ConservativeOneSided;
        assert!(suppression_condition(&s).is_err());
    }

    #[test]
    fn suppressed_scenario_metrics() {
        let s = single(1009, 5e-5, 1, 1000, 2000.0);
        let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
        let m = trajectory_metrics(&traj, &s, &OdeSettings::default());
        assert!((m.ti - 1.0).abs() < 0.05, "ti={}", m.ti);
        assert!((m.mi - 1.0).abs() < 0.05);
    }

    #[test]
    fn broadcast_time() {
        assert_relative_eq!(broadcast_time_estimate(1000, 5e-5).unwrap(), 287.8542, max_relative = 1e-5);
        assert_relative_eq!(broadcast_time_estimate(2, 1.0).unwrap(), 0.98175, max_relative = 1e-4);
        let a = broadcast_time_estimate(500, 1e-4).unwrap();
        assert_relative_eq!(broadcast_time_estimate(500, 2e-4).unwrap(), a / 2.0, max_relative = 1e-12);
        assert!(broadcast_time_estimate(1, 1.0).is_err());
        assert!(broadcast_time_estimate(10, 0.0).is_err());
    }

    #[test]
    fn events_land_on_step_boundaries() {
        let mut s = single(100, 1e-4, 1, 1, 50.0);
        s.delay = 10.25;
        s.batch_schedule = vec![BatchEvent {
            time: 20.5,
            deltas: vec![BatchDelta {
                group: 0,
                compartment: Compartment::SStar,
                count: 30,
            }],
        }];
        let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
        assert_eq!(traj.events.len(), 2);
        assert_eq!(traj.events[0].t, 10.25);
        assert_eq!(traj.events[1].t, 20.5);
        let last = &traj.last().state;
        assert_relative_eq!(last.total(), 130.0, max_relative = 1e-9);
        for w in traj.samples.windows(2) {
            assert!(w[1].state.t > w[0].state.t);
        }
        assert_eq!(traj.last().state.t, 50.0);
    }

    #[test]
    fn departures_are_capped() {
        let mut s = single(100, 1e-4, 1, 1, 50.0);
        s.batch_schedule = vec![BatchEvent {
            time: 5.0,
            deltas: vec![BatchDelta {
                group: 0,
                compartment: Compartment::PredatorInfected,
                count: -1000,
            }],
        }];
        let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
        assert!(traj.samples.iter().all(|s| s.state.groups[0].i_b >= 0.0));
    }

    #[test]
    fn unsorted_events_error() {
        let mut s = single(100, 1e-4, 1, 1, 50.0);
        let ev = |time| BatchEvent {
            time,
            deltas: vec![],
        };
        s.batch_schedule = vec![ev(10.0), ev(5.0)];
        assert!(matches!(
            integrate::<f64>(&s, &OdeSettings::default()),
            Err(OdeError::UnsortedEvents)
        ));
    }

    #[test]
    fn oversized_step_is_reported() {
        let s = single(1000, 5e-3, 1, 1, 100.0);
        let settings = OdeSettings {
            step: 50.0,
            ..Default::default()
        };
        assert!(matches!(
            integrate::<f64>(&s, &settings),
            Err(OdeError::StepTooLarge { .. })
        ));
    }

    #[test]
    fn stride_and_csv_round_trip() {
        let s = two_group();
        let settings = OdeSettings {
            output_stride: 100,
            ..Default::default()
        };
        let traj = integrate::<f64>(&s, &settings).unwrap();
        assert_eq!(traj.samples.len(), 21);
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        assert!(buf.starts_with(b"t,group,s_star,s_prime,i_a,i_b,r\n"));
        let back = read_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), traj.samples.len());
        assert_eq!(back[5], traj.samples[5].state);
    }

    #[test]
    fn f32_tracks_f64() {
        let s = two_group();
        let a = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
        let b = integrate::<f32>(&s, &OdeSettings::default()).unwrap();
        let ma = trajectory_metrics(&a, &s, &OdeSettings::default());
        let mb = trajectory_metrics(&b, &s, &OdeSettings::default());
        assert_relative_eq!(ma.ti, mb.ti, max_relative = 1e-3);
        assert_relative_eq!(ma.tl, mb.tl, max_relative = 1e-3);
    }

    #[test]
    fn group_transitions_conserve() {
        let mut s = two_group();
        s.group_transitions.s_star = vec![vec![0.0, 1e-3], vec![2e-3, 0.0]];
        s.group_transitions.i_a = vec![vec![0.0, 5e-4], vec![0.0, 0.0]];
        s.manual_removal_rate = 1e-4;
        s.manual_vaccination_rate = 1e-5;
        let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
        for smp in &traj.samples {
            assert_relative_eq!(smp.state.total(), 1000.0, max_relative = 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conservation(
            n in 50u32..500,
            beta in 1e-5f64..1e-4,
            c in 0.5f64..=1.0,
            i in 0.0f64..0.5,
            alpha in 0.0f64..1e-3,
            gamma in 0.0f64..1e-3,
            gamma_s in 0.0f64..1e-4,
            arrivals in 0i64..50,
        ) {
            let mut s = single(n, beta, 1, 1, 400.0);
            s.cooperation = c;
            s.immunization = i;
            s.interaction = InteractionType::Custom(TransitionIndicators::ALL);
            s.resusceptible_rate = alpha;
            s.manual_removal_rate = gamma;
            s.manual_vaccination_rate = gamma_s;
            s.batch_schedule = vec![BatchEvent { time: 123.4, deltas: vec![BatchDelta { group: 0, compartment: Compartment::SPrime, count: arrivals }] }];
            let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
            let start = traj.samples[0].state.total();
            for smp in &traj.samples {
                let t = smp.state.t;
                let expected = start + if t >= 123.4 { arrivals as f64 } else { 0.0 };
                prop_assert!((smp.state.total() - expected).abs() <= 1e-6 * expected);
            }
        }

        #[test]
        fn on_probability_equals_scaled_rates(p in 0.05f64..1.0) {
            let mut a = single(400, 1e-4, 2, 3, 600.0);
            a.on_prob = p;
            let b = single(400, 1e-4 * p, 2, 3, 600.0);
            let ta = integrate::<f64>(&a, &OdeSettings::default()).unwrap();
            let tb = integrate::<f64>(&b, &OdeSettings::default()).unwrap();
            for (x, y) in ta.samples.iter().zip(&tb.samples) {
                prop_assert!((x.state.prey() - y.state.prey()).abs() < 1e-9);
            }
        }

        #[test]
        fn metric_ordering(n in 100u32..600, prey in 1u32..4, predator in 1u32..10) {
            let s = single(n, 1e-4, prey, predator, 20_000.0);
            let traj = integrate::<f64>(&s, &OdeSettings::default()).unwrap();
            let m = trajectory_metrics(&traj, &s, &OdeSettings::default());
            prop_assert!(f64::from(prey) <= m.mi + 1e-9);
            prop_assert!(m.mi <= m.ti + 1e-9);
            if let Some(al) = m.al { prop_assert!(al <= m.tl + 1e-9); }
            if let (Some(tr), Some(ta)) = (m.tr, m.ta) { prop_assert!(tr <= ta); }
        }
    }
}
