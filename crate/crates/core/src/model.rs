//! Scenario parameters, interaction flags and initial conditions shared by
//! every engine.
//!
//! A [`Scenario`] is the complete description of one experiment. It is
//! loaded from TOML (unknown keys rejected), validated with
//! [`validate_scenario`], and turned into a starting population with
//! [`init_state`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Default length of an on-off resampling interval, seconds.
pub const DEFAULT_ON_OFF_INTERVAL: f64 = 600.0;

mod flag01 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!(
                "transition indicator must be 0 or 1, got {other}"
            ))),
        }
    }
}

/// The eight state-transition indicators of the two-group model.
///
/// Index `1` flags apply to the first group, index `2` flags to every other
/// group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionIndicators {
    /// S*₁ → I_A
    #[serde(with = "flag01")]
    pub k_s1_a: bool,
    /// S*₂ → I_A
    #[serde(with = "flag01")]
    pub k_s2_a: bool,
    /// S*₁ → I_B
    #[serde(with = "flag01")]
    pub k_s1_b: bool,
    /// S*₂ → I_B
    #[serde(with = "flag01")]
    pub k_s2_b: bool,
    /// S′₁ → I_B
    #[serde(with = "flag01")]
    pub k_sp1_b: bool,
    /// S′₂ → I_B
    #[serde(with = "flag01")]
    pub k_sp2_b: bool,
    /// I_A1 → I_B
    #[serde(with = "flag01")]
    pub k_a1_b: bool,
    /// I_A2 → I_B
    #[serde(with = "flag01")]
    pub k_a2_b: bool,
}

impl TransitionIndicators {
    pub const ALL: Self = Self {
        k_s1_a: true,
        k_s2_a: true,
        k_s1_b: true,
        k_s2_b: true,
        k_sp1_b: true,
        k_sp2_b: true,
        k_a1_b: true,
        k_a2_b: true,
    };

    pub const NONE: Self = Self {
        k_s1_a: false,
        k_s2_a: false,
        k_s1_b: false,
        k_s2_b: false,
        k_sp1_b: false,
        k_sp2_b: false,
        k_a1_b: false,
        k_a2_b: false,
    };

    /// Flags in declaration order, as 0/1.
    pub fn as_array(&self) -> [u8; 8] {
        [
            self.k_s1_a,
            self.k_s2_a,
            self.k_s1_b,
            self.k_s2_b,
            self.k_sp1_b,
            self.k_sp2_b,
            self.k_a1_b,
            self.k_a2_b,
        ]
        .map(u8::from)
    }

    /// Prey may infect a fully susceptible node of `group`.
    pub fn prey_infects(&self, group: usize) -> bool {
        if group == 0 {
            self.k_s1_a
        } else {
            self.k_s2_a
        }
    }

    /// Predator may vaccinate a fully susceptible node of `group`.
    pub fn vaccinates_susceptible(&self, group: usize) -> bool {
        if group == 0 {
            self.k_s1_b
        } else {
            self.k_s2_b
        }
    }

    /// Predator may vaccinate a prey-immune node of `group`.
    pub fn vaccinates_immune(&self, group: usize) -> bool {
        if group == 0 {
            self.k_sp1_b
        } else {
            self.k_sp2_b
        }
    }

    /// Predator may terminate prey on a node of `group`.
    pub fn terminates(&self, group: usize) -> bool {
        if group == 0 {
            self.k_a1_b
        } else {
            self.k_a2_b
        }
    }

    /// Whether the predator can reach susceptible nodes at all. Without
    /// this the time to secure all nodes is unbounded.
    pub fn can_vaccinate(&self) -> bool {
        self.k_s1_b || self.k_s2_b || self.k_sp1_b || self.k_sp2_b
    }
}

/// Worm interaction regime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionType {
    /// Predator terminates prey and vaccinates susceptibles.
    #[default]
    AggressiveOneSided,
    /// Predator terminates prey but never vaccinates.
    ConservativeOneSided,
    /// Both worms vaccinate and block each other; nobody terminates.
    AggressiveTwoSided,
    Custom(TransitionIndicators),
}

/// Maps an interaction type to its indicator set and, for the named
/// regimes, the re-susceptibility rate they imply (zero).
pub fn build_interaction_flags(itype: InteractionType) -> (TransitionIndicators, Option<f64>) {
    match itype {
        InteractionType::AggressiveOneSided => (TransitionIndicators::ALL, Some(0.0)),
        InteractionType::ConservativeOneSided => (
            TransitionIndicators {
                k_s1_b: false,
                k_s2_b: false,
                k_sp1_b: false,
                k_sp2_b: false,
                ..TransitionIndicators::ALL
            },
            Some(0.0),
        ),
        InteractionType::AggressiveTwoSided => (
            TransitionIndicators {
                k_a1_b: false,
                k_a2_b: false,
                ..TransitionIndicators::ALL
            },
            Some(0.0),
        ),
        InteractionType::Custom(flags) => (flags, None),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupParams {
    pub n_nodes: u32,
    /// Per-pair contact rate inside the group, s⁻¹.
    pub intra_rate: f64,
}

/// Per-compartment group transition rates. Each matrix is `g × g` with
/// entry `[n][m]` the per-node rate of moving from group `n` to `m`.
/// Empty matrices mean "no transitions".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupTransitions {
    #[serde(default)]
    pub s_star: Vec<Vec<f64>>,
    #[serde(default)]
    pub s_prime: Vec<Vec<f64>>,
    #[serde(default)]
    pub i_a: Vec<Vec<f64>>,
    #[serde(default)]
    pub i_b: Vec<Vec<f64>>,
}

impl GroupTransitions {
    pub fn matrix(&self, c: Compartment) -> &[Vec<f64>] {
        match c {
            Compartment::SStar => &self.s_star,
            Compartment::SPrime => &self.s_prime,
            Compartment::PreyInfected => &self.i_a,
            Compartment::PredatorInfected => &self.i_b,
        }
    }

    /// Rate from group `from` to group `to` for compartment class `c`.
    pub fn rate(&self, c: Compartment, from: usize, to: usize) -> f64 {
        if from == to {
            return 0.0;
        }
        self.matrix(c)
            .get(from)
            .and_then(|row| row.get(to))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        Compartment::ALL
            .iter()
            .all(|&c| self.matrix(c).iter().flatten().all(|&v| v == 0.0))
    }
}

/// The four live compartments a node can occupy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compartment {
    /// S*: susceptible to prey and predator.
    SStar,
    /// S′: immune to prey, susceptible to predator.
    SPrime,
    /// I_A
    #[serde(rename = "i_a")]
    PreyInfected,
    /// I_B
    #[serde(rename = "i_b")]
    PredatorInfected,
}

impl Compartment {
    pub const ALL: [Compartment; 4] = [
        Compartment::SStar,
        Compartment::SPrime,
        Compartment::PreyInfected,
        Compartment::PredatorInfected,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Compartment::SStar => "s_star",
            Compartment::SPrime => "s_prime",
            Compartment::PreyInfected => "i_a",
            Compartment::PredatorInfected => "i_b",
        }
    }
}

impl fmt::Display for Compartment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One signed population jump of a batch event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchDelta {
    pub group: usize,
    pub compartment: Compartment,
    /// Positive counts join, negative counts leave (never more than present).
    pub count: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchEvent {
    pub time: f64,
    pub deltas: Vec<BatchDelta>,
}

fn one() -> f64 {
    1.0
}

fn default_on_off_interval() -> f64 {
    DEFAULT_ON_OFF_INTERVAL
}

/// Complete parameterization of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub groups: Vec<GroupParams>,
    /// Full `g × g` symmetric matrix; the diagonal is ignored (intra rates
    /// live in `groups`). May be empty for a single group.
    #[serde(default)]
    pub inter_rates: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub cooperation: f64,
    #[serde(default)]
    pub immunization: f64,
    #[serde(default = "one")]
    pub on_prob: f64,
    #[serde(default = "default_on_off_interval")]
    pub on_off_interval: f64,
    #[serde(default)]
    pub delay: f64,
    #[serde(default)]
    pub resusceptible_rate: f64,
    #[serde(default)]
    pub manual_removal_rate: f64,
    #[serde(default)]
    pub manual_vaccination_rate: f64,
    #[serde(default)]
    pub group_transitions: GroupTransitions,
    pub initial_prey: Vec<u32>,
    pub initial_predator: Vec<u32>,
    #[serde(default)]
    pub interaction: InteractionType,
    #[serde(default)]
    pub batch_schedule: Vec<BatchEvent>,
    pub horizon: f64,
    /// Trace replay only: node ids forced to start prey-infected.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pinned_prey: Vec<String>,
    /// Trace replay only: node ids forced to start predator-infected.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pinned_predator: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
}

impl Scenario {
    /// Single uniform group with every node cooperative and on.
    pub fn uniform(n_nodes: u32, beta: f64, prey: u32, predator: u32, horizon: f64) -> Self {
        Scenario {
            groups: vec![GroupParams {
                n_nodes,
                intra_rate: beta,
            }],
            inter_rates: Vec::new(),
            cooperation: 1.0,
            immunization: 0.0,
            on_prob: 1.0,
            on_off_interval: DEFAULT_ON_OFF_INTERVAL,
            delay: 0.0,
            resusceptible_rate: 0.0,
            manual_removal_rate: 0.0,
            manual_vaccination_rate: 0.0,
            group_transitions: GroupTransitions::default(),
            initial_prey: vec![prey],
            initial_predator: vec![predator],
            interaction: InteractionType::AggressiveOneSided,
            batch_schedule: Vec::new(),
            horizon,
            pinned_prey: Vec::new(),
            pinned_predator: Vec::new(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Contact rate β_nm (β_nn for `n == m`).
    pub fn rate(&self, n: usize, m: usize) -> f64 {
        if n == m {
            self.groups[n].intra_rate
        } else {
            self.inter_rates
                .get(n)
                .and_then(|row| row.get(m))
                .copied()
                .unwrap_or(0.0)
        }
    }

    pub fn total_nodes(&self) -> u64 {
        self.groups.iter().map(|g| u64::from(g.n_nodes)).sum()
    }

    pub fn flags(&self) -> TransitionIndicators {
        build_interaction_flags(self.interaction).0
    }

    /// Re-susceptibility rate after the interaction type's override.
    pub fn effective_alpha(&self) -> f64 {
        build_interaction_flags(self.interaction)
            .1
            .unwrap_or(self.resusceptible_rate)
    }

    /// Time of the last scheduled batch arrival (0 without batches).
    pub fn last_batch_time(&self) -> f64 {
        self.batch_schedule
            .iter()
            .map(|b| b.time)
            .filter(|&t| t <= self.horizon)
            .fold(0.0, f64::max)
    }

    /// Integer node counts per group used by the node-level engines.
    pub fn node_counts(&self) -> Vec<NodeCounts> {
        self.groups
            .iter()
            .map(|g| {
                let n = f64::from(g.n_nodes);
                let cooperative = (self.cooperation * n).round().min(n) as u32;
                let immune = (self.cooperation * self.immunization * n)
                    .round()
                    .min(f64::from(cooperative)) as u32;
                NodeCounts {
                    non_cooperative: g.n_nodes - cooperative,
                    susceptible: cooperative - immune,
                    immune,
                }
            })
            .collect()
    }
}

/// Integer split of one group's nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeCounts {
    pub non_cooperative: u32,
    /// Cooperative, not immune (S* pool before seeding).
    pub susceptible: u32,
    /// Cooperative and immune to prey (S′ pool before seeding).
    pub immune: u32,
}

/// Populations of one group.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GroupState<T> {
    pub s_star: T,
    pub s_prime: T,
    pub i_a: T,
    pub i_b: T,
}

impl<T: Scalar> GroupState<T> {
    pub fn get(&self, c: Compartment) -> T {
        match c {
            Compartment::SStar => self.s_star,
            Compartment::SPrime => self.s_prime,
            Compartment::PreyInfected => self.i_a,
            Compartment::PredatorInfected => self.i_b,
        }
    }

    pub fn get_mut(&mut self, c: Compartment) -> &mut T {
        match c {
            Compartment::SStar => &mut self.s_star,
            Compartment::SPrime => &mut self.s_prime,
            Compartment::PreyInfected => &mut self.i_a,
            Compartment::PredatorInfected => &mut self.i_b,
        }
    }

    pub fn total(&self) -> T {
        self.s_star + self.s_prime + self.i_a + self.i_b
    }
}

/// Continuous population state of every group plus the removed pool.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector<T> {
    pub t: T,
    pub groups: Vec<GroupState<T>>,
    pub r: T,
}

impl<T: Scalar> StateVector<T> {
    pub fn zeros(groups: usize) -> Self {
        StateVector {
            t: T::zero(),
            groups: vec![GroupState::default(); groups],
            r: T::zero(),
        }
    }

    pub fn total(&self) -> T {
        self.groups.iter().fold(self.r, |acc, g| acc + g.total())
    }

    pub fn prey(&self) -> T {
        self.groups.iter().fold(T::zero(), |acc, g| acc + g.i_a)
    }

    pub fn predator(&self) -> T {
        self.groups.iter().fold(T::zero(), |acc, g| acc + g.i_b)
    }

    /// S* + S′ + I_A over all groups: nodes the predator has yet to secure.
    pub fn unsecured(&self) -> T {
        self.groups
            .iter()
            .fold(T::zero(), |acc, g| acc + g.s_star + g.s_prime + g.i_a)
    }

    /// Flat layout `[s*, s′, i_a, i_b] × groups, r`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.groups.len() * 4 + 1);
        for g in &self.groups {
            v.extend_from_slice(&[g.s_star, g.s_prime, g.i_a, g.i_b]);
        }
        v.push(self.r);
        v
    }

    pub fn from_flat(t: T, flat: &[T], groups: usize) -> Self {
        let gs = (0..groups)
            .map(|n| GroupState {
                s_star: flat[4 * n],
                s_prime: flat[4 * n + 1],
                i_a: flat[4 * n + 2],
                i_b: flat[4 * n + 3],
            })
            .collect();
        StateVector {
            t,
            groups: gs,
            r: flat[4 * groups],
        }
    }

    /// Moves up to `count` nodes of `group` into I_B, drawing from S′, then
    /// S*, then I_A. Returns the amount actually moved.
    pub fn seed_predator(&mut self, group: usize, count: T) -> T {
        let g = &mut self.groups[group];
        let mut remaining = count;
        for pool in [&mut g.s_prime, &mut g.s_star, &mut g.i_a] {
            let take = remaining.min(*pool).max(T::zero());
            *pool = *pool - take;
            remaining = remaining - take;
        }
        let moved = count - remaining;
        g.i_b = g.i_b + moved;
        moved
    }
}

/// A single failed scenario invariant.
#[derive(Clone, Debug, PartialEq, Error)]
pub enum Violation {
    #[error("groups: at least one group is required")]
    NoGroups,
    #[error("{field}: rate must be a non-negative finite number, got {value}")]
    NegativeRate { field: String, value: f64 },
    #[error("{field}: expected a {expected}x{expected} matrix")]
    RateMatrixShape { field: String, expected: usize },
    #[error("inter_rates: asymmetric entries [{n}][{m}] and [{m}][{n}]")]
    AsymmetricRates { n: usize, m: usize },
    #[error("{field}: probability must lie in [0, 1], got {value}")]
    ProbabilityOutOfRange { field: String, value: f64 },
    #[error("{field}: must be a non-negative finite number of seconds, got {value}")]
    NegativeDuration { field: String, value: f64 },
    #[error("{field}: must be positive, got {value}")]
    NonPositive { field: String, value: f64 },
    #[error("{field}: expected {expected} entries (one per group), found {found}")]
    LengthMismatch {
        field: String,
        expected: usize,
        found: usize,
    },
    #[error("group {group}: initial {compartment} would be {value}, below zero")]
    NegativeCompartment {
        group: usize,
        compartment: Compartment,
        value: f64,
    },
    #[error("batch_schedule[{index}]: times must be sorted ascending")]
    UnsortedBatchSchedule { index: usize },
    #[error("batch_schedule[{index}]: group {group} does not exist")]
    BatchGroupOutOfRange { index: usize, group: usize },
}

fn check_rate(field: impl Into<String>, value: f64, out: &mut Vec<Violation>) {
    if !(value >= 0.0 && value.is_finite()) {
        out.push(Violation::NegativeRate {
            field: field.into(),
            value,
        });
    }
}

fn check_probability(field: &str, value: f64, out: &mut Vec<Violation>) {
    if !(0.0..=1.0).contains(&value) {
        out.push(Violation::ProbabilityOutOfRange {
            field: field.to_string(),
            value,
        });
    }
}

fn check_square(field: &str, m: &[Vec<f64>], g: usize, allow_empty: bool, out: &mut Vec<Violation>) -> bool {
    if m.is_empty() && allow_empty {
        return true;
    }
    if m.len() != g || m.iter().any(|row| row.len() != g) {
        out.push(Violation::RateMatrixShape {
            field: field.to_string(),
            expected: g,
        });
        return false;
    }
    true
}

/// Checks every scenario invariant. Empty result means the scenario is valid.
pub fn validate_scenario(scn: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let g = scn.groups.len();
    if g == 0 {
        out.push(Violation::NoGroups);
        return out;
    }
    for (n, grp) in scn.groups.iter().enumerate() {
        check_rate(format!("groups[{n}].intra_rate"), grp.intra_rate, &mut out);
    }
    // A single group needs no inter rates; more groups need the full matrix.
    if check_square("inter_rates", &scn.inter_rates, g, g == 1, &mut out) {
        for n in 0..scn.inter_rates.len() {
            for m in 0..g {
                if n == m {
                    continue;
                }
                let v = scn.inter_rates[n][m];
                check_rate(format!("inter_rates[{n}][{m}]"), v, &mut out);
                if m > n && v != scn.inter_rates[m][n] {
                    out.push(Violation::AsymmetricRates { n, m });
                }
            }
        }
    }
    check_probability("cooperation", scn.cooperation, &mut out);
    check_probability("immunization", scn.immunization, &mut out);
    check_probability("on_prob", scn.on_prob, &mut out);
    if !(scn.on_off_interval > 0.0 && scn.on_off_interval.is_finite()) {
        out.push(Violation::NonPositive {
            field: "on_off_interval".into(),
            value: scn.on_off_interval,
        });
    }
    for (field, v) in [("delay", scn.delay), ("horizon", scn.horizon)] {
        if !(v >= 0.0 && v.is_finite()) {
            out.push(Violation::NegativeDuration {
                field: field.into(),
                value: v,
            });
        }
    }
    check_rate("resusceptible_rate", scn.resusceptible_rate, &mut out);
    check_rate("manual_removal_rate", scn.manual_removal_rate, &mut out);
    check_rate("manual_vaccination_rate", scn.manual_vaccination_rate, &mut out);
    for c in Compartment::ALL {
        let field = format!("group_transitions.{c}");
        let m = scn.group_transitions.matrix(c);
        if check_square(&field, m, g, true, &mut out) {
            for (n, row) in m.iter().enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    check_rate(format!("{field}[{n}][{k}]"), v, &mut out);
                }
            }
        }
    }
    let mut lengths_ok = true;
    for (field, v) in [
        ("initial_prey", &scn.initial_prey),
        ("initial_predator", &scn.initial_predator),
    ] {
        if v.len() != g {
            lengths_ok = false;
            out.push(Violation::LengthMismatch {
                field: field.into(),
                expected: g,
                found: v.len(),
            });
        }
    }
    if lengths_ok {
        if let Err(ModelError::NegativeCompartment {
            group,
            compartment,
            value,
        }) = initial_pools(scn)
        {
            out.push(Violation::NegativeCompartment {
                group,
                compartment,
                value,
            });
        }
    }
    let mut prev = f64::NEG_INFINITY;
    for (index, b) in scn.batch_schedule.iter().enumerate() {
        if !(b.time >= 0.0 && b.time.is_finite()) {
            out.push(Violation::NegativeDuration {
                field: format!("batch_schedule[{index}].time"),
                value: b.time,
            });
        } else if b.time < prev {
            out.push(Violation::UnsortedBatchSchedule { index });
        }
        prev = prev.max(b.time);
        for d in &b.deltas {
            if d.group >= g {
                out.push(Violation::BatchGroupOutOfRange {
                    index,
                    group: d.group,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ModelError {
    #[error("group {group}: initial {compartment} would be {value}, below zero")]
    NegativeCompartment {
        group: usize,
        compartment: Compartment,
        value: f64,
    },
    #[error("invalid scenario: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

pub(crate) fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Initial compartments in f64, with predators seeded at t=0 only when
/// there is no delay.
fn initial_pools(scn: &Scenario) -> Result<Vec<GroupState<f64>>, ModelError> {
    let c = scn.cooperation;
    let i = scn.immunization;
    scn.groups
        .iter()
        .enumerate()
        .map(|(n, grp)| {
            let nn = f64::from(grp.n_nodes);
            let prey = f64::from(scn.initial_prey[n]);
            let predator = f64::from(scn.initial_predator[n]);
            let mut s_star = c * (1.0 - i) * nn - prey;
            let mut s_prime = c * i * nn;
            let mut i_b = 0.0;
            if scn.delay == 0.0 {
                let from_immune = predator.min(s_prime).max(0.0);
                s_prime -= from_immune;
                s_star -= predator - from_immune;
                i_b = predator;
            } else if predator > s_star + s_prime + prey {
                // Not even the whole cooperative pool could host them at t=d.
                return Err(ModelError::NegativeCompartment {
                    group: n,
                    compartment: Compartment::SPrime,
                    value: s_star + s_prime + prey - predator,
                });
            }
            // Tolerate float dust from c(1-i)N products.
            for (comp, v) in [
                (Compartment::SStar, &mut s_star),
                (Compartment::SPrime, &mut s_prime),
            ] {
                if *v < -1e-9 {
                    return Err(ModelError::NegativeCompartment {
                        group: n,
                        compartment: comp,
                        value: *v,
                    });
                }
                *v = v.max(0.0);
            }
            Ok(GroupState {
                s_star,
                s_prime,
                i_a: prey,
                i_b,
            })
        })
        .collect()
}

/// Starting populations at t = 0.
///
/// Non-cooperative nodes are left out of every compartment. Initial
/// predators come out of the prey-immune pool first and the fully
/// susceptible pool second; with a positive delay they are injected later
/// by the engine instead.
pub fn init_state<T: Scalar>(scn: &Scenario) -> Result<StateVector<T>, ModelError> {
    let violations: Vec<_> = validate_scenario(scn)
        .into_iter()
        .filter(|v| !matches!(v, Violation::NegativeCompartment { .. }))
        .collect();
    if !violations.is_empty() {
        return Err(ModelError::Invalid(violations));
    }
    let pools = initial_pools(scn)?;
    Ok(StateVector {
        t: T::zero(),
        groups: pools
            .into_iter()
            .map(|g| GroupState {
                s_star: T::lit(g.s_star),
                s_prime: T::lit(g.s_prime),
                i_a: T::lit(g.i_a),
                i_b: T::lit(g.i_b),
            })
            .collect(),
        r: T::zero(),
    })
}
