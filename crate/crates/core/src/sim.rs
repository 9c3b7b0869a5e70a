//! Stochastic node-level simulation.
//!
//! Every cooperative node carries its own compartment. Pairwise contacts
//! come either from independent Poisson processes (rate β_nm per pair) or
//! from a recorded encounter list. Only contacts that can change a state are
//! sampled: the engine draws the next productive contact from the summed
//! rates of the active (target, source) channels, which has the same law as
//! running one exponential clock per pair.
//!
//! A contact transfers a worm when the receiving node is on. The sender's
//! on-off state does not matter, so the effective rate is p·β, the same
//! product the compartment model uses.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use thiserror::Error;

use crate::events::{EventKind, EventLog, Pool, Worm};
use crate::metrics::{metrics_from_log, Metrics, MetricsRow};
use crate::model::{join_violations, validate_scenario, Compartment, Scenario, Violation};
use crate::CsvError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeCompartment {
    SStar,
    SPrime,
    PreyInfected,
    PredatorInfected,
    Removed,
    NonCooperative,
    NotYetArrived,
    Departed,
}

impl NodeCompartment {
    fn live(self) -> Option<usize> {
        match self {
            NodeCompartment::SStar => Some(0),
            NodeCompartment::SPrime => Some(1),
            NodeCompartment::PreyInfected => Some(2),
            NodeCompartment::PredatorInfected => Some(3),
            _ => None,
        }
    }

    fn from_live(c: Compartment) -> Self {
        match c {
            Compartment::SStar => NodeCompartment::SStar,
            Compartment::SPrime => NodeCompartment::SPrime,
            Compartment::PreyInfected => NodeCompartment::PreyInfected,
            Compartment::PredatorInfected => NodeCompartment::PredatorInfected,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub node_id: u32,
    pub group: usize,
    pub compartment: NodeCompartment,
    pub is_on: bool,
    /// Entry time into the current prey episode.
    pub infection_start: Option<f64>,
    /// Immune to prey: returns to S′ rather than S* after re-susceptibility.
    pub immune: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("runs must be at least 1")]
    NoRuns,
}

/// Static description of one node before the run starts.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NodeSpec {
    pub group: usize,
    pub cooperative: bool,
    pub immune: bool,
    pub arrival: f64,
}

pub(crate) enum Contacts<'a> {
    Poisson,
    /// Time-sorted `(t, node_a, node_b)`.
    Trace(&'a [(f64, u32, u32)]),
}

pub(crate) enum Seeding {
    /// Counts per group, drawn from the live pools when they fire.
    Pooled { prey: Vec<u32>, predator: Vec<u32>, predator_at: f64 },
    /// Fixed nodes. Prey fire at the node's arrival.
    Nodes { prey: Vec<u32>, predator: Vec<(u32, f64)> },
}

pub(crate) struct Setup<'a> {
    pub scn: &'a Scenario,
    pub groups: usize,
    pub nodes: Vec<NodeSpec>,
    pub contacts: Contacts<'a>,
    pub seeding: Seeding,
    pub horizon: f64,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Action {
    Resample,
    Arrive(u32),
    InjectNode(u32, Worm),
    InjectPooled,
    Batch(usize),
}

#[derive(Clone, Copy, Debug)]
struct Scheduled {
    t: f64,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event, ties by insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Copy, Debug)]
enum Channel {
    /// kind: 0 prey infect, 1 vaccinate S*, 2 vaccinate S′, 3 terminate.
    Transfer { kind: usize, target: usize, source: usize },
    RemoveSusceptible,
    RemoveInfected,
    Resusceptible,
    Migrate { comp: usize, from: usize, to: usize },
}

// (target compartment, source compartment) of each transfer kind.
const TRANSFERS: [(usize, usize); 4] = [(0, 2), (0, 3), (1, 3), (2, 3)];

struct Engine<'a> {
    scn: &'a Scenario,
    g: usize,
    flags: Vec<[bool; 4]>,
    beta: Vec<f64>,
    lambda: Vec<[f64; 4]>,
    p: f64,
    alpha: f64,
    gamma: f64,
    gamma_s: f64,
    nodes: Vec<NodeState>,
    pos: Vec<usize>,
    buckets: Vec<Vec<u32>>,
    rng: ChaCha8Rng,
    log: EventLog,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    pending: usize,
    t: f64,
    horizon: f64,
    encounters: &'a [(f64, u32, u32)],
    next_encounter: usize,
    poisson: bool,
    predator_plan: Vec<u32>,
    channels: Vec<(f64, Channel)>,
}

impl<'a> Engine<'a> {
    fn new(setup: Setup<'a>) -> Self {
        let scn = setup.scn;
        let g = setup.groups;
        let f = scn.flags();
        let flags = (0..g)
            .map(|n| {
                [
                    f.prey_infects(n),
                    f.vaccinates_susceptible(n),
                    f.vaccinates_immune(n),
                    f.terminates(n),
                ]
            })
            .collect();
        let poisson = matches!(setup.contacts, Contacts::Poisson);
        let mut beta = vec![0.0; g * g];
        let mut lambda = vec![[0.0; 4]; g * g];
        if poisson {
            for n in 0..g {
                for m in 0..g {
                    beta[n * g + m] = scn.rate(n, m);
                    for c in Compartment::ALL {
                        lambda[n * g + m][c.index()] = scn.group_transitions.rate(c, n, m);
                    }
                }
            }
        }
        let encounters = match setup.contacts {
            Contacts::Poisson => &[][..],
            Contacts::Trace(e) => e,
        };
        let nodes = setup
            .nodes
            .iter()
            .enumerate()
            .map(|(i, spec)| NodeState {
                node_id: i as u32,
                group: spec.group,
                compartment: if !spec.cooperative {
                    NodeCompartment::NonCooperative
                } else {
                    NodeCompartment::NotYetArrived
                },
                is_on: true,
                infection_start: None,
                immune: spec.immune,
            })
            .collect::<Vec<_>>();
        let mut e = Engine {
            scn,
            g,
            flags,
            beta,
            lambda,
            p: scn.on_prob,
            alpha: scn.effective_alpha(),
            gamma: scn.manual_removal_rate,
            gamma_s: scn.manual_vaccination_rate,
            pos: vec![usize::MAX; nodes.len()],
            nodes,
            buckets: vec![Vec::new(); g * 8],
            rng: setup.rng,
            log: EventLog::new(setup.horizon),
            heap: BinaryHeap::new(),
            seq: 0,
            pending: 0,
            t: 0.0,
            horizon: setup.horizon,
            encounters,
            next_encounter: 0,
            poisson,
            predator_plan: Vec::new(),
            channels: Vec::with_capacity(4 * g * g + 3),
        };

        // Everything present at t=0 arrives first, in id order.
        for (i, spec) in setup.nodes.iter().enumerate() {
            if !spec.cooperative {
                continue;
            }
            if spec.arrival <= 0.0 {
                e.arrive(i as u32);
            } else {
                e.schedule(spec.arrival, Action::Arrive(i as u32));
            }
        }
        match setup.seeding {
            Seeding::Pooled {
                prey,
                predator,
                predator_at,
            } => {
                for (n, &count) in prey.iter().enumerate() {
                    for _ in 0..count {
                        let Some(node) = e.pick_live(n, 0) else { break };
                        e.inject(node, Worm::Prey);
                    }
                }
                e.predator_plan = predator;
                if e.predator_plan.iter().any(|&c| c > 0) {
                    if predator_at <= 0.0 {
                        e.inject_pooled();
                    } else {
                        e.schedule(predator_at, Action::InjectPooled);
                    }
                }
            }
            Seeding::Nodes { prey, predator } => {
                for node in prey {
                    let at = setup.nodes[node as usize].arrival;
                    if at <= 0.0 {
                        e.inject(node, Worm::Prey);
                    } else {
                        e.schedule(at, Action::InjectNode(node, Worm::Prey));
                    }
                }
                for (node, at) in predator {
                    if at <= 0.0 {
                        e.inject(node, Worm::Predator);
                    } else {
                        e.schedule(at, Action::InjectNode(node, Worm::Predator));
                    }
                }
            }
        }
        if poisson {
            for (i, b) in scn.batch_schedule.iter().enumerate() {
                if b.time <= 0.0 {
                    e.apply_batch(i);
                } else {
                    e.schedule(b.time, Action::Batch(i));
                }
            }
        }
        if e.p < 1.0 {
            e.resample_all(false);
            e.schedule_resample(1);
        }
        e
    }

    fn bucket(&self, group: usize, comp: usize, on: bool) -> usize {
        (group * 4 + comp) * 2 + usize::from(on)
    }

    fn on_count(&self, group: usize, comp: usize) -> usize {
        self.buckets[self.bucket(group, comp, true)].len()
    }

    fn count(&self, group: usize, comp: usize) -> usize {
        self.buckets[self.bucket(group, comp, true)].len() + self.buckets[self.bucket(group, comp, false)].len()
    }

    fn detach(&mut self, node: u32) {
        let st = &self.nodes[node as usize];
        if let Some(c) = st.compartment.live() {
            let b = self.bucket(st.group, c, st.is_on);
            let at = self.pos[node as usize];
            self.buckets[b].swap_remove(at);
            if let Some(&moved) = self.buckets[b].get(at) {
                self.pos[moved as usize] = at;
            }
            self.pos[node as usize] = usize::MAX;
        }
    }

    fn attach(&mut self, node: u32) {
        let st = &self.nodes[node as usize];
        if let Some(c) = st.compartment.live() {
            let b = self.bucket(st.group, c, st.is_on);
            self.pos[node as usize] = self.buckets[b].len();
            self.buckets[b].push(node);
        }
    }

    fn set_compartment(&mut self, node: u32, to: NodeCompartment) {
        self.detach(node);
        let t = self.t;
        let st = &mut self.nodes[node as usize];
        st.compartment = to;
        st.infection_start = (to == NodeCompartment::PreyInfected).then_some(t);
        self.attach(node);
    }

    fn schedule(&mut self, t: f64, action: Action) {
        if t > self.horizon {
            return;
        }
        if action != Action::Resample {
            self.pending += 1;
        }
        self.heap.push(Scheduled {
            t,
            seq: self.seq,
            action,
        });
        self.seq += 1;
    }

    fn schedule_resample(&mut self, k: u64) {
        let t = k as f64 * self.scn.on_off_interval;
        self.schedule(t, Action::Resample);
    }

    fn draw_on(&mut self) -> bool {
        self.p >= 1.0 || self.rng.random_bool(self.p)
    }

    fn arrive(&mut self, node: u32) {
        let on = self.draw_on();
        let st = &mut self.nodes[node as usize];
        if st.compartment != NodeCompartment::NotYetArrived {
            return;
        }
        st.is_on = on;
        let pool = if st.immune { Pool::SPrime } else { Pool::SStar };
        let to = if st.immune {
            NodeCompartment::SPrime
        } else {
            NodeCompartment::SStar
        };
        self.set_compartment(node, to);
        self.log.push(self.t, EventKind::Arrive(pool), node, None);
    }

    fn inject(&mut self, node: u32, worm: Worm) {
        let c = self.nodes[node as usize].compartment;
        if c.live().is_none() {
            return;
        }
        let to = match worm {
            Worm::Prey => NodeCompartment::PreyInfected,
            Worm::Predator => NodeCompartment::PredatorInfected,
        };
        if c == to {
            return;
        }
        self.set_compartment(node, to);
        self.log.push(self.t, EventKind::Inject(worm), node, None);
    }

    fn pick_live(&mut self, group: usize, comp: usize) -> Option<u32> {
        let total = self.count(group, comp);
        if total == 0 {
            return None;
        }
        let k = self.rng.random_range(0..total);
        let on = &self.buckets[self.bucket(group, comp, true)];
        Some(if k < on.len() {
            on[k]
        } else {
            self.buckets[self.bucket(group, comp, false)][k - on.len()]
        })
    }

    fn pick_on(&mut self, group: usize, comp: usize) -> u32 {
        let b = self.bucket(group, comp, true);
        let k = self.rng.random_range(0..self.buckets[b].len());
        self.buckets[b][k]
    }

    /// Uniform over all nodes in the given compartments of every group.
    fn pick_any(&mut self, comps: &[usize]) -> u32 {
        let total: usize = (0..self.g)
            .flat_map(|n| comps.iter().map(move |&c| (n, c)))
            .map(|(n, c)| self.count(n, c))
            .sum();
        let mut k = self.rng.random_range(0..total);
        for n in 0..self.g {
            for &c in comps {
                let here = self.count(n, c);
                if k < here {
                    let on = &self.buckets[self.bucket(n, c, true)];
                    return if k < on.len() {
                        on[k]
                    } else {
                        self.buckets[self.bucket(n, c, false)][k - on.len()]
                    };
                }
                k -= here;
            }
        }
        unreachable!("index within total")
    }

    fn inject_pooled(&mut self) {
        let plan = std::mem::take(&mut self.predator_plan);
        for (n, &count) in plan.iter().enumerate() {
            for _ in 0..count {
                let node = [1, 0, 2].into_iter().find_map(|c| self.pick_live(n, c));
                match node {
                    Some(node) => self.inject(node, Worm::Predator),
                    None => break,
                }
            }
        }
    }

    fn apply_batch(&mut self, index: usize) {
        let batch = &self.scn.batch_schedule[index];
        for d in &batch.deltas {
            let comp = d.compartment.index();
            if d.count >= 0 {
                for _ in 0..d.count {
                    let id = self.nodes.len() as u32;
                    let immune = d.compartment == Compartment::SPrime;
                    let on = self.draw_on();
                    self.nodes.push(NodeState {
                        node_id: id,
                        group: d.group,
                        compartment: NodeCompartment::NotYetArrived,
                        is_on: on,
                        infection_start: None,
                        immune,
                    });
                    self.pos.push(usize::MAX);
                    self.set_compartment(id, NodeCompartment::from_live(d.compartment));
                    let kind = match d.compartment {
                        Compartment::SStar => EventKind::Arrive(Pool::SStar),
                        Compartment::SPrime => EventKind::Arrive(Pool::SPrime),
                        Compartment::PreyInfected => EventKind::Inject(Worm::Prey),
                        Compartment::PredatorInfected => EventKind::Inject(Worm::Predator),
                    };
                    self.log.push(self.t, kind, id, None);
                }
            } else {
                for _ in 0..d.count.unsigned_abs() {
                    let Some(node) = self.pick_live(d.group, comp) else { break };
                    self.set_compartment(node, NodeCompartment::Departed);
                    self.log.push(self.t, EventKind::Depart, node, None);
                }
            }
        }
    }

    fn resample_all(&mut self, log: bool) {
        for node in 0..self.nodes.len() as u32 {
            if self.nodes[node as usize].compartment.live().is_none() {
                continue;
            }
            let on = self.draw_on();
            if on != self.nodes[node as usize].is_on {
                self.detach(node);
                self.nodes[node as usize].is_on = on;
                self.attach(node);
                if log {
                    self.log.push(self.t, EventKind::OnOffToggle, node, None);
                }
            }
        }
    }

    /// Fills `channels` with the current rates and returns their sum. With
    /// `potential`, every node counts as on and every trace pair as
    /// connected; a zero result then means nothing can ever change.
    fn rates(&mut self, potential: bool) -> f64 {
        let mut channels = std::mem::take(&mut self.channels);
        channels.clear();
        let g = self.g;
        if self.poisson || potential {
            for target in 0..g {
                for (kind, &(tc, sc)) in TRANSFERS.iter().enumerate() {
                    if !self.flags[target][kind] {
                        continue;
                    }
                    let receivers = if potential {
                        self.count(target, tc)
                    } else {
                        self.on_count(target, tc)
                    };
                    if receivers == 0 {
                        continue;
                    }
                    for source in 0..g {
                        let b = if self.poisson { self.beta[target * g + source] } else { 1.0 };
                        let r = b * receivers as f64 * self.count(source, sc) as f64;
                        if r > 0.0 {
                            channels.push((r, Channel::Transfer { kind, target, source }));
                        }
                    }
                }
            }
        }
        let sum = |e: &Self, comps: &[usize]| -> f64 {
            (0..g)
                .map(|n| comps.iter().map(|&c| e.count(n, c)).sum::<usize>())
                .sum::<usize>() as f64
        };
        if self.gamma_s > 0.0 {
            let r = self.gamma_s * sum(self, &[0, 1]);
            if r > 0.0 {
                channels.push((r, Channel::RemoveSusceptible));
            }
        }
        if self.gamma > 0.0 || self.alpha > 0.0 {
            let infected = sum(self, &[2, 3]);
            if self.gamma * infected > 0.0 {
                channels.push((self.gamma * infected, Channel::RemoveInfected));
            }
            if self.alpha * infected > 0.0 {
                channels.push((self.alpha * infected, Channel::Resusceptible));
            }
        }
        for from in 0..g {
            for to in 0..g {
                for comp in 0..4 {
                    let l = self.lambda[from * g + to][comp];
                    if l > 0.0 && self.count(from, comp) > 0 {
                        channels.push((l * self.count(from, comp) as f64, Channel::Migrate { comp, from, to }));
                    }
                }
            }
        }
        let total = channels.iter().map(|c| c.0).sum();
        self.channels = channels;
        total
    }

    fn fire(&mut self, total: f64) {
        let mut u = self.rng.random::<f64>() * total;
        let mut chosen = self.channels[self.channels.len() - 1].1;
        for &(r, ch) in &self.channels {
            if u < r {
                chosen = ch;
                break;
            }
            u -= r;
        }
        match chosen {
            Channel::Transfer { kind, target, source } => {
                let (tc, sc) = TRANSFERS[kind];
                let to = self.pick_on(target, tc);
                let from = self.pick_live(source, sc).expect("channel has sources");
                self.transfer(kind, to, from);
            }
            Channel::RemoveSusceptible => {
                let node = self.pick_any(&[0, 1]);
                self.set_compartment(node, NodeCompartment::Removed);
                self.log.push(self.t, EventKind::Remove, node, None);
            }
            Channel::RemoveInfected => {
                let node = self.pick_any(&[2, 3]);
                self.set_compartment(node, NodeCompartment::Removed);
                self.log.push(self.t, EventKind::Remove, node, None);
            }
            Channel::Resusceptible => {
                let node = self.pick_any(&[2, 3]);
                let immune = self.nodes[node as usize].immune;
                let (to, pool) = if immune {
                    (NodeCompartment::SPrime, Pool::SPrime)
                } else {
                    (NodeCompartment::SStar, Pool::SStar)
                };
                self.set_compartment(node, to);
                self.log.push(self.t, EventKind::Resusceptible(pool), node, None);
            }
            Channel::Migrate { comp, from, to } => {
                let node = self.pick_live(from, comp).expect("channel has nodes");
                self.detach(node);
                self.nodes[node as usize].group = to;
                self.attach(node);
                self.log.push(self.t, EventKind::Migrate, node, Some(to as u32));
            }
        }
    }

    fn transfer(&mut self, kind: usize, to: u32, from: u32) {
        let (next, ev) = match kind {
            0 => (NodeCompartment::PreyInfected, EventKind::PreyInfect),
            1 | 2 => (NodeCompartment::PredatorInfected, EventKind::Vaccinate),
            _ => (NodeCompartment::PredatorInfected, EventKind::Terminate),
        };
        self.set_compartment(to, next);
        self.log.push(self.t, ev, to, Some(from));
    }

    /// Applies one recorded encounter in whichever direction is productive.
    fn encounter(&mut self, a: u32, b: u32) {
        for (src, dst) in [(a, b), (b, a)] {
            let s = &self.nodes[src as usize];
            let d = &self.nodes[dst as usize];
            let (Some(sc), Some(dc)) = (s.compartment.live(), d.compartment.live()) else {
                return;
            };
            if !d.is_on {
                continue;
            }
            let kind = TRANSFERS.iter().position(|&(tc, scc)| tc == dc && scc == sc);
            if let Some(kind) = kind {
                if self.flags[d.group][kind] {
                    self.transfer(kind, dst, src);
                    return;
                }
            }
        }
    }

    fn run(mut self) -> EventLog {
        loop {
            let total = self.rates(false);
            let next_sched = self.heap.peek().map_or(f64::INFINITY, |s| s.t);
            let next_enc = self
                .encounters
                .get(self.next_encounter)
                .map_or(f64::INFINITY, |e| e.0);
            let t_stoch = if total > 0.0 {
                self.t + self.rng.sample::<f64, _>(Exp1) / total
            } else {
                f64::INFINITY
            };
            let t_next = t_stoch.min(next_sched).min(next_enc);
            if t_next > self.horizon {
                break;
            }
            self.t = t_next;
            if next_sched <= t_next {
                let s = self.heap.pop().expect("peeked");
                if s.action != Action::Resample {
                    self.pending -= 1;
                }
                match s.action {
                    Action::Resample => {
                        self.resample_all(true);
                        let k = (s.t / self.scn.on_off_interval).round() as u64;
                        self.schedule_resample(k + 1);
                    }
                    Action::Arrive(node) => self.arrive(node),
                    Action::InjectNode(node, worm) => self.inject(node, worm),
                    Action::InjectPooled => self.inject_pooled(),
                    Action::Batch(i) => self.apply_batch(i),
                }
            } else if next_enc <= t_next {
                let (_, a, b) = self.encounters[self.next_encounter];
                self.next_encounter += 1;
                self.encounter(a, b);
            } else {
                self.fire(total);
            }
            if self.pending == 0 && self.rates(true) == 0.0 {
                break;
            }
        }
        self.log
    }
}

pub(crate) fn run_setup(setup: Setup<'_>) -> EventLog {
    Engine::new(setup).run()
}

/// One stochastic run of `scn`. Identical `(scn, seed)` pairs give identical
/// logs.
pub fn simulate_run(scn: &Scenario, seed: u64) -> Result<(EventLog, RunMetrics), SimError> {
    let violations = validate_scenario(scn);
    if !violations.is_empty() {
        return Err(SimError::Invalid(violations));
    }
    let mut nodes = Vec::with_capacity(scn.total_nodes() as usize);
    for (group, counts) in scn.node_counts().into_iter().enumerate() {
        let spec = |cooperative, immune| NodeSpec {
            group,
            cooperative,
            immune,
            arrival: 0.0,
        };
        nodes.extend(std::iter::repeat_n(spec(false, false), counts.non_cooperative as usize));
        nodes.extend(std::iter::repeat_n(spec(true, false), counts.susceptible as usize));
        nodes.extend(std::iter::repeat_n(spec(true, true), counts.immune as usize));
    }
    let log = run_setup(Setup {
        scn,
        groups: scn.num_groups(),
        nodes,
        contacts: Contacts::Poisson,
        seeding: Seeding::Pooled {
            prey: scn.initial_prey.clone(),
            predator: scn.initial_predator.clone(),
            predator_at: scn.delay,
        },
        horizon: scn.horizon,
        rng: ChaCha8Rng::seed_from_u64(seed),
    });
    let metrics = metrics_from_log(&log, scn);
    Ok((log, RunMetrics { seed, metrics }))
}

/// `runs` independent runs with seeds `base_seed..base_seed + runs`, in
/// seed order regardless of how rayon schedules them.
pub fn run_many(scn: &Scenario, runs: usize, base_seed: u64) -> Result<Vec<RunMetrics>, SimError> {
    if runs == 0 {
        return Err(SimError::NoRuns);
    }
    let violations = validate_scenario(scn);
    if !violations.is_empty() {
        return Err(SimError::Invalid(violations));
    }
    (0..runs as u64)
        .into_par_iter()
        .map(|k| simulate_run(scn, base_seed.wrapping_add(k)).map(|(_, m)| m))
        .collect()
}

pub fn monte_carlo(scn: &Scenario, runs: usize, base_seed: u64) -> Result<MetricsSummary, SimError> {
    let results = run_many(scn, runs, base_seed)?;
    Ok(summarize(results.iter().map(|r| &r.metrics)))
}

/// Median and quartiles. `None` marks a quantile that falls on a run where
/// the metric was not reached.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Quantiles {
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

impl Quantiles {
    /// Linear-interpolation quantiles over `values`, where `None` sorts
    /// above every number.
    pub fn of(values: &[Option<f64>]) -> Self {
        let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| -> Option<f64> {
            if v.is_empty() {
                return None;
            }
            let h = (v.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            let frac = h - lo as f64;
            let x = if frac == 0.0 {
                v[lo]
            } else {
                v[lo] + frac * (v[hi] - v[lo])
            };
            x.is_finite().then_some(x)
        };
        Quantiles {
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsSummary {
    pub runs: usize,
    pub ti: Quantiles,
    pub mi: Quantiles,
    pub tl: Quantiles,
    pub al: Quantiles,
    pub ta: Quantiles,
    pub tr: Quantiles,
    /// Runs where TL ran into the horizon with prey still alive.
    pub tl_censored: usize,
    pub al_not_reached: usize,
    pub ta_not_reached: usize,
    pub tr_not_reached: usize,
}

impl MetricsSummary {
    /// `(name, quantiles, not-reached count)` in output order.
    pub fn rows(&self) -> [(&'static str, Quantiles, usize); 6] {
        [
            ("ti", self.ti, 0),
            ("mi", self.mi, 0),
            ("tl", self.tl, self.tl_censored),
            ("al", self.al, self.al_not_reached),
            ("ta", self.ta, self.ta_not_reached),
            ("tr", self.tr, self.tr_not_reached),
        ]
    }
}

/// Aggregates per-run metrics. Censored TL and AL count as unbounded.
/// Runs with no prey at all have no AL and are left out of its quantiles.
pub fn summarize<'m>(metrics: impl IntoIterator<Item = &'m Metrics>) -> MetricsSummary {
    let ms: Vec<&Metrics> = metrics.into_iter().collect();
    let col = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Vec<Option<f64>> { ms.iter().map(|m| f(m)).collect() };
    let tl = col(&|m| (!m.censored.tl).then_some(m.tl));
    let al: Vec<Option<f64>> = ms
        .iter()
        .filter(|m| m.al.is_some())
        .map(|m| if m.censored.al { None } else { m.al })
        .collect();
    MetricsSummary {
        runs: ms.len(),
        ti: Quantiles::of(&col(&|m| Some(m.ti))),
        mi: Quantiles::of(&col(&|m| Some(m.mi))),
        tl: Quantiles::of(&tl),
        al: Quantiles::of(&al),
        ta: Quantiles::of(&col(&|m| m.ta)),
        tr: Quantiles::of(&col(&|m| m.tr)),
        tl_censored: ms.iter().filter(|m| m.censored.tl).count(),
        al_not_reached: ms.iter().filter(|m| m.al.is_none() || m.censored.al).count(),
        ta_not_reached: ms.iter().filter(|m| m.ta.is_none()).count(),
        tr_not_reached: ms.iter().filter(|m| m.tr.is_none()).count(),
    }
}

#[derive(serde::Serialize)]
struct RunRow {
    seed: u64,
    ti: f64,
    mi: f64,
    tl: f64,
    al: Option<f64>,
    ta: Option<f64>,
    tr: Option<f64>,
    ti_rel: Option<f64>,
    mi_rel: Option<f64>,
    y: Option<f64>,
    censored_flags: String,
}

/// One metrics row per run, prefixed with its seed.
pub fn write_runs_csv<W: Write>(runs: &[RunMetrics], scn: &Scenario, w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in runs {
        let m = MetricsRow::new(&r.metrics, scn);
        wr.serialize(RunRow {
            seed: r.seed,
            ti: m.ti,
            mi: m.mi,
            tl: m.tl,
            al: m.al,
            ta: m.ta,
            tr: m.tr,
            ti_rel: m.ti_rel,
            mi_rel: m.mi_rel,
            y: m.y,
            censored_flags: m.censored_flags,
        })?;
    }
    wr.flush()?;
    Ok(())
}

/// `metric,median,q1,q3,not_reached,runs`; empty cells mark quantiles that
/// fall on unreached runs.
pub fn write_summary_csv<W: Write>(s: &MetricsSummary, w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["metric", "median", "q1", "q3", "not_reached", "runs"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, q, nr) in s.rows() {
        wr.write_record([
            name.to_string(),
            cell(q.median),
            cell(q.q1),
            cell(q.q3),
            nr.to_string(),
            s.runs.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
