//! WLAN association traces: parsing, encounter derivation, measurement
//! statistics, group estimation and trace-driven replay.
//!
//! Two nodes encounter each other while associated with the same access
//! point at the same time. Replay treats each encounter as one transfer
//! opportunity at its start time; the duration is kept but unused.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventLog;
use crate::metrics::metrics_from_log;
use crate::model::{join_violations, validate_scenario, GroupParams, Scenario, Violation};
use crate::sim::{run_setup, Contacts, NodeSpec, RunMetrics, Seeding, Setup};
use crate::CsvError;

/// Default single-linkage window for batch arrivals: one day.
pub const DEFAULT_BATCH_WINDOW: f64 = 86_400.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub node_id: String,
    pub ap_id: String,
    pub start_ts: f64,
    pub end_ts: f64,
}

/// A pairwise contact with `node_a < node_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncounterEvent {
    pub t_start: f64,
    pub t_end: f64,
    pub node_a: String,
    pub node_b: String,
}

impl EncounterEvent {
    /// Orders the endpoints canonically.
    pub fn new(t_start: f64, t_end: f64, a: &str, b: &str) -> Self {
        let (node_a, node_b) = if a <= b { (a, b) } else { (b, a) };
        EncounterEvent {
            t_start,
            t_end,
            node_a: node_a.to_string(),
            node_b: node_b.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reject {
    /// 1-based line in the input.
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("input contains no records")]
    EmptyInput,
    #[error("{malformed} of {total} lines are malformed (first: line {first_line}: {first_reason})")]
    Format {
        malformed: usize,
        total: usize,
        first_line: u64,
        first_reason: String,
    },
    #[error("node `{0}` does not appear in the trace")]
    UnknownNode(String),
    #[error("scenario has {scenario} groups but the trace has {trace}")]
    GroupMismatch { scenario: usize, trace: usize },
    #[error("invalid scenario: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] CsvError),
}

fn parse_rows<T>(
    input: impl Read,
    header_first: &str,
    parse: impl Fn(&csv::StringRecord) -> Result<T, String>,
) -> Result<Parsed<T>, TraceError> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut first = true;
    let mut raw = csv::StringRecord::new();
    loop {
        let line = rd.position().line();
        match rd.read_record(&mut raw) {
            Ok(false) => break,
            Ok(true) => {
                if raw.iter().all(str::is_empty) {
                    continue;
                }
                if std::mem::take(&mut first) && raw.get(0) == Some(header_first) {
                    continue;
                }
                match parse(&raw) {
                    Ok(r) => records.push(r),
                    Err(reason) => rejects.push(Reject { line, reason }),
                }
            }
            Err(e) => {
                first = false;
                rejects.push(Reject {
                    line: e.position().map_or(line, |p| p.line()),
                    reason: e.to_string(),
                });
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    break;
                }
            }
        }
    }
    let total = records.len() + rejects.len();
    if total == 0 {
        return Err(TraceError::EmptyInput);
    }
    if rejects.len() * 2 > total {
        return Err(TraceError::Format {
            malformed: rejects.len(),
            total,
            first_line: rejects[0].line,
            first_reason: rejects[0].reason.clone(),
        });
    }
    Ok(Parsed { records, rejects })
}

fn field<'r>(r: &'r csv::StringRecord, i: usize, name: &str) -> Result<&'r str, String> {
    match r.get(i) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(format!("missing {name}")),
    }
}

fn time(r: &csv::StringRecord, i: usize, name: &str) -> Result<f64, String> {
    let v = field(r, i, name)?;
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("{name} `{v}` is not a number")),
    }
}

/// Parses `node_id,ap_id,start_ts,end_ts` (header optional). Records come
/// back sorted by `start_ts`; bad lines are reported, not fatal, unless
/// they are the majority.
pub fn parse_associations(input: impl Read) -> Result<Parsed<AssociationRecord>, TraceError> {
    let mut parsed = parse_rows(input, "node_id", |r| {
        if r.len() != 4 {
            return Err(format!("expected 4 fields, found {}", r.len()));
        }
        let start_ts = time(r, 2, "start_ts")?;
        let end_ts = time(r, 3, "end_ts")?;
        if start_ts >= end_ts {
            return Err(format!("start_ts {start_ts} is not before end_ts {end_ts}"));
        }
        Ok(AssociationRecord {
            node_id: field(r, 0, "node_id")?.to_string(),
            ap_id: field(r, 1, "ap_id")?.to_string(),
            start_ts,
            end_ts,
        })
    })?;
    parsed.records.sort_by(|a, b| a.start_ts.total_cmp(&b.start_ts));
    Ok(parsed)
}

/// Parses a direct encounter list `t_start,t_end,node_a,node_b`.
pub fn parse_encounters(input: impl Read) -> Result<Parsed<EncounterEvent>, TraceError> {
    let mut parsed = parse_rows(input, "t_start", |r| {
        if r.len() != 4 {
            return Err(format!("expected 4 fields, found {}", r.len()));
        }
        let t_start = time(r, 0, "t_start")?;
        let t_end = time(r, 1, "t_end")?;
        if t_start >= t_end {
            return Err(format!("t_start {t_start} is not before t_end {t_end}"));
        }
        let a = field(r, 2, "node_a")?;
        let b = field(r, 3, "node_b")?;
        if a == b {
            return Err(format!("node `{a}` meets itself"));
        }
        Ok(EncounterEvent::new(t_start, t_end, a, b))
    })?;
    sort_encounters(&mut parsed.records);
    Ok(parsed)
}

fn sort_encounters(e: &mut [EncounterEvent]) {
    e.sort_by(|x, y| {
        x.t_start
            .total_cmp(&y.t_start)
            .then_with(|| x.node_a.cmp(&y.node_a))
            .then_with(|| x.node_b.cmp(&y.node_b))
            .then_with(|| x.t_end.total_cmp(&y.t_end))
    });
}

/// All encounters implied by shared access points.
///
/// Each access point is swept in start order against its currently open
/// associations. Intersections of zero length do not count. Intervals of
/// the same pair that overlap (from several access points or repeated
/// associations) are merged into one encounter.
pub fn derive_encounters(assocs: &[AssociationRecord]) -> Vec<EncounterEvent> {
    let mut by_ap: HashMap<&str, Vec<&AssociationRecord>> = HashMap::new();
    for r in assocs {
        by_ap.entry(&r.ap_id).or_default().push(r);
    }
    let mut per_pair: HashMap<(&str, &str), Vec<(f64, f64)>> = HashMap::new();
    for recs in by_ap.values_mut() {
        recs.sort_by(|a, b| a.start_ts.total_cmp(&b.start_ts));
        let mut open: Vec<&AssociationRecord> = Vec::new();
        for r in recs.iter() {
            open.retain(|o| o.end_ts > r.start_ts);
            for o in &open {
                if o.node_id == r.node_id {
                    continue;
                }
                let lo = o.start_ts.max(r.start_ts);
                let hi = o.end_ts.min(r.end_ts);
                if hi > lo {
                    let key = if o.node_id < r.node_id {
                        (o.node_id.as_str(), r.node_id.as_str())
                    } else {
                        (r.node_id.as_str(), o.node_id.as_str())
                    };
                    per_pair.entry(key).or_default().push((lo, hi));
                }
            }
            open.push(r);
        }
    }
    let mut out = Vec::new();
    for ((a, b), mut iv) in per_pair {
        iv.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut cur = iv[0];
        for &(lo, hi) in &iv[1..] {
            if lo < cur.1 {
                cur.1 = cur.1.max(hi);
            } else {
                out.push(EncounterEvent::new(cur.0, cur.1, a, b));
                cur = (lo, hi);
            }
        }
        out.push(EncounterEvent::new(cur.0, cur.1, a, b));
    }
    sort_encounters(&mut out);
    out
}

/// First appearance of every node in an association trace.
pub fn arrivals_from_associations(assocs: &[AssociationRecord]) -> HashMap<String, f64> {
    let mut out: HashMap<String, f64> = HashMap::new();
    for r in assocs {
        out.entry(r.node_id.clone())
            .and_modify(|t| *t = t.min(r.start_ts))
            .or_insert(r.start_ts);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeStats {
    pub node: String,
    pub arrival: f64,
    pub total_encounters: usize,
    pub unique_peers: usize,
    /// Encounters per peer per second of presence.
    pub contact_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchCluster {
    pub start: f64,
    pub end: f64,
    pub members: Vec<String>,
}

impl BatchCluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupEstimate {
    /// Member ids of each group, in arrival order of the groups.
    pub groups: Vec<Vec<String>>,
    pub assignment: HashMap<String, usize>,
    /// Estimated β_nm, symmetric.
    pub rates: Vec<Vec<f64>>,
    /// Only one batch was found, so there is one group.
    pub single_batch: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStats {
    /// Sorted by node id.
    pub nodes: Vec<NodeStats>,
    pub batches: Vec<BatchCluster>,
    /// `(top percent of nodes, share of all encounter endpoints)` for 1..=100.
    pub top_share: Vec<(u32, f64)>,
    pub groups: GroupEstimate,
    pub start: f64,
    pub end: f64,
}

impl TraceStats {
    /// Share of encounters held by the top `percent` of nodes.
    pub fn share_of_top(&self, percent: u32) -> f64 {
        self.top_share[(percent.clamp(1, 100) - 1) as usize].1
    }
}

/// Single-linkage clusters of arrival times: a gap wider than `window`
/// starts a new batch.
pub fn batch_clusters(arrivals: &HashMap<String, f64>, window: f64) -> Vec<BatchCluster> {
    let mut sorted: Vec<(&String, f64)> = arrivals.iter().map(|(k, &v)| (k, v)).collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let mut out: Vec<BatchCluster> = Vec::new();
    for (node, t) in sorted {
        match out.last_mut() {
            Some(c) if t - c.end <= window => {
                c.end = t;
                c.members.push(node.clone());
            }
            _ => out.push(BatchCluster {
                start: t,
                end: t,
                members: vec![node.clone()],
            }),
        }
    }
    out
}

/// Pairwise contact rates between node classes: encounters between members
/// divided by the summed time both members of each pair were present.
pub fn estimate_rates(
    encs: &[EncounterEvent],
    arrivals: &HashMap<String, f64>,
    groups: &[Vec<String>],
    end: f64,
) -> Vec<Vec<f64>> {
    let g = groups.len();
    let assignment: HashMap<&str, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(n, m)| m.iter().map(move |id| (id.as_str(), n)))
        .collect();
    let mut counts = vec![vec![0usize; g]; g];
    for e in encs {
        if let (Some(&x), Some(&y)) = (assignment.get(e.node_a.as_str()), assignment.get(e.node_b.as_str())) {
            counts[x][y] += 1;
            if x != y {
                counts[y][x] += 1;
            }
        }
    }
    let presence = |id: &String| (end - arrivals.get(id).copied().unwrap_or(end)).max(0.0);
    let mut exposure = vec![vec![0.0f64; g]; g];
    for n in 0..g {
        for m in n..g {
            let mut sum = 0.0;
            for (i, a) in groups[n].iter().enumerate() {
                let others: &[String] = if n == m { &groups[m][i + 1..] } else { &groups[m] };
                let pa = presence(a);
                for b in others {
                    sum += pa.min(presence(b));
                }
            }
            exposure[n][m] = sum;
            exposure[m][n] = sum;
        }
    }
    (0..g)
        .map(|n| {
            (0..g)
                .map(|m| {
                    if exposure[n][m] > 0.0 {
                        counts[n][m] as f64 / exposure[n][m]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// One group per arrival batch, with rates from [`estimate_rates`].
pub fn estimate_groups(
    encs: &[EncounterEvent],
    arrivals: &HashMap<String, f64>,
    batches: &[BatchCluster],
    end: f64,
) -> GroupEstimate {
    let groups: Vec<Vec<String>> = batches.iter().map(|b| b.members.clone()).collect();
    let assignment = groups
        .iter()
        .enumerate()
        .flat_map(|(n, m)| m.iter().map(move |id| (id.clone(), n)))
        .collect();
    let rates = estimate_rates(encs, arrivals, &groups, end);
    GroupEstimate {
        single_batch: groups.len() <= 1,
        groups,
        assignment,
        rates,
    }
}

fn encounter_arrivals(encs: &[EncounterEvent]) -> HashMap<String, f64> {
    let mut out: HashMap<String, f64> = HashMap::new();
    for e in encs {
        for id in [&e.node_a, &e.node_b] {
            out.entry(id.clone())
                .and_modify(|t| *t = t.min(e.t_start))
                .or_insert(e.t_start);
        }
    }
    out
}

/// Statistics with arrivals taken from each node's first encounter.
pub fn trace_stats(encs: &[EncounterEvent], window: f64) -> Result<TraceStats, TraceError> {
    trace_stats_with_arrivals(encs, &encounter_arrivals(encs), None, window)
}

/// Statistics with explicit arrival times (first association). Nodes that
/// never meet anyone still count toward batches and groups. The observation
/// ends at `end` when given, else at the last encounter end.
pub fn trace_stats_with_arrivals(
    encs: &[EncounterEvent],
    arrivals: &HashMap<String, f64>,
    end: Option<f64>,
    window: f64,
) -> Result<TraceStats, TraceError> {
    if encs.is_empty() {
        return Err(TraceError::EmptyInput);
    }
    let mut arrivals = arrivals.clone();
    for (id, t) in encounter_arrivals(encs) {
        arrivals.entry(id).and_modify(|a| *a = a.min(t)).or_insert(t);
    }
    let end = end.unwrap_or_else(|| encs.iter().map(|e| e.t_end).fold(f64::NEG_INFINITY, f64::max));
    let start = arrivals.values().copied().fold(f64::INFINITY, f64::min);
    let n = arrivals.len();

    let mut totals: HashMap<&str, usize> = HashMap::new();
    let mut peers: HashMap<&str, HashSet<&str>> = HashMap::new();
    for e in encs {
        *totals.entry(&e.node_a).or_default() += 1;
        *totals.entry(&e.node_b).or_default() += 1;
        peers.entry(&e.node_a).or_default().insert(&e.node_b);
        peers.entry(&e.node_b).or_default().insert(&e.node_a);
    }
    let mut nodes: Vec<NodeStats> = arrivals
        .iter()
        .map(|(id, &arrival)| {
            let total = totals.get(id.as_str()).copied().unwrap_or(0);
            let span = end - arrival;
            NodeStats {
                node: id.clone(),
                arrival,
                total_encounters: total,
                unique_peers: peers.get(id.as_str()).map_or(0, HashSet::len),
                contact_rate: if span > 0.0 && n > 1 {
                    total as f64 / ((n - 1) as f64 * span)
                } else {
                    0.0
                },
            }
        })
        .collect();
    nodes.sort_by(|a, b| a.node.cmp(&b.node));

    let mut ranked: Vec<usize> = nodes.iter().map(|s| s.total_encounters).collect();
    ranked.sort_unstable_by(|a, b| b.cmp(a));
    let all: usize = ranked.iter().sum();
    let top_share = (1..=100u32)
        .map(|k| {
            let take = (n as f64 * f64::from(k) / 100.0).ceil() as usize;
            let s: usize = ranked[..take.min(n)].iter().sum();
            (k, s as f64 / all as f64)
        })
        .collect();

    let batches = batch_clusters(&arrivals, window);
    let groups = estimate_groups(encs, &arrivals, &batches, end);
    Ok(TraceStats {
        nodes,
        batches,
        top_share,
        groups,
        start,
        end,
    })
}

/// A trace prepared for replay: dense node indices, times relative to the
/// first arrival, and group membership.
#[derive(Clone, Debug)]
pub struct TraceNetwork {
    pub node_ids: Vec<String>,
    index: HashMap<String, u32>,
    pub groups: Vec<usize>,
    pub group_sizes: Vec<u32>,
    pub rates: Vec<Vec<f64>>,
    /// Relative arrival of each node.
    pub arrivals: Vec<f64>,
    pub encounters: Vec<(f64, u32, u32)>,
    /// Absolute time of t=0.
    pub origin: f64,
    /// Relative end of the observation.
    pub end: f64,
}

impl TraceNetwork {
    pub fn new(encs: &[EncounterEvent], stats: &TraceStats) -> Self {
        let mut node_ids: Vec<String> = stats.nodes.iter().map(|s| s.node.clone()).collect();
        node_ids.sort_by(|a, b| {
            stats.groups.assignment[a]
                .cmp(&stats.groups.assignment[b])
                .then_with(|| a.cmp(b))
        });
        let index: HashMap<String, u32> = node_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        let arrival: HashMap<&str, f64> = stats.nodes.iter().map(|s| (s.node.as_str(), s.arrival)).collect();
        let origin = stats.start;
        let mut encounters: Vec<(f64, u32, u32)> = encs
            .iter()
            .map(|e| (e.t_start - origin, index[&e.node_a], index[&e.node_b]))
            .collect();
        encounters.sort_by(|a, b| a.0.total_cmp(&b.0));
        TraceNetwork {
            groups: node_ids.iter().map(|id| stats.groups.assignment[id]).collect(),
            group_sizes: stats.groups.groups.iter().map(|m| m.len() as u32).collect(),
            rates: stats.groups.rates.clone(),
            arrivals: node_ids.iter().map(|id| arrival[id.as_str()] - origin).collect(),
            node_ids,
            index,
            encounters,
            origin,
            end: stats.end - origin,
        }
    }

    /// Parses nothing; derives encounters, arrivals and groups from
    /// association records.
    pub fn from_associations(assocs: &[AssociationRecord], window: f64) -> Result<(Self, TraceStats), TraceError> {
        let encs = derive_encounters(assocs);
        let arrivals = arrivals_from_associations(assocs);
        let end = assocs.iter().map(|r| r.end_ts).fold(f64::NEG_INFINITY, f64::max);
        let stats = trace_stats_with_arrivals(&encs, &arrivals, Some(end), window)?;
        Ok((TraceNetwork::new(&encs, &stats), stats))
    }

    pub fn num_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn node_index(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    /// Scenario carrying the trace's groups, estimated rates and horizon;
    /// worm placement and node characteristics keep their defaults.
    pub fn scenario_template(&self) -> Scenario {
        let g = self.num_groups();
        let mut s = Scenario::uniform(0, 0.0, 0, 0, self.end);
        s.groups = (0..g)
            .map(|n| GroupParams {
                n_nodes: self.group_sizes[n],
                intra_rate: self.rates[n][n],
            })
            .collect();
        s.inter_rates = if g > 1 { self.rates.clone() } else { Vec::new() };
        s.initial_prey = vec![0; g];
        s.initial_predator = vec![0; g];
        s
    }

    /// `scn` with its groups, rates and horizon replaced by the trace's.
    fn adapt(&self, scn: &Scenario) -> Result<Scenario, TraceError> {
        let g = self.num_groups();
        if scn.initial_prey.len() != g || scn.initial_predator.len() != g {
            return Err(TraceError::GroupMismatch {
                scenario: scn.initial_prey.len(),
                trace: g,
            });
        }
        let t = self.scenario_template();
        let mut s = scn.clone();
        s.groups = t.groups;
        s.inter_rates = t.inter_rates;
        s.horizon = self.end;
        s.batch_schedule.clear();
        let violations: Vec<Violation> = validate_scenario(&s)
            .into_iter()
            .filter(|v| !matches!(v, Violation::NegativeCompartment { .. } | Violation::AsymmetricRates { .. }))
            .collect();
        if !violations.is_empty() {
            return Err(TraceError::Invalid(violations));
        }
        Ok(s)
    }
}

/// Replays worm interactions over the trace.
///
/// Cooperation and immunity are drawn per node from `c` and `i`. Initial
/// prey land on cooperative non-immune nodes of each group at the node's
/// arrival; initial predators on cooperative nodes (immune ones first) at
/// the later of the delay and the node's arrival. Pinned ids override the
/// random choice. The horizon is the end of the trace.
pub fn replay_sim(net: &TraceNetwork, scn: &Scenario, seed: u64) -> Result<(EventLog, RunMetrics), TraceError> {
    let s = net.adapt(scn)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<NodeSpec> = (0..net.node_ids.len())
        .map(|i| {
            let cooperative = rng.random_bool(s.cooperation);
            let immune = cooperative && rng.random_bool(s.immunization);
            NodeSpec {
                group: net.groups[i],
                cooperative,
                immune,
                arrival: net.arrivals[i],
            }
        })
        .collect();

    let mut taken: HashSet<u32> = HashSet::new();
    let mut prey = Vec::new();
    for id in &s.pinned_prey {
        let n = net.node_index(id).ok_or_else(|| TraceError::UnknownNode(id.clone()))?;
        nodes[n as usize].cooperative = true;
        nodes[n as usize].immune = false;
        taken.insert(n);
        prey.push(n);
    }
    let mut predator = Vec::new();
    for id in &s.pinned_predator {
        let n = net.node_index(id).ok_or_else(|| TraceError::UnknownNode(id.clone()))?;
        nodes[n as usize].cooperative = true;
        taken.insert(n);
        predator.push(n);
    }
    for group in 0..net.num_groups() {
        let pinned = prey.iter().filter(|&&n| nodes[n as usize].group == group).count() as u32;
        let mut pool: Vec<u32> = (0..nodes.len() as u32)
            .filter(|n| {
                let spec = &nodes[*n as usize];
                spec.group == group && spec.cooperative && !spec.immune && !taken.contains(n)
            })
            .collect();
        for _ in pinned..s.initial_prey[group] {
            if pool.is_empty() {
                break;
            }
            let n = pool.swap_remove(rng.random_range(0..pool.len()));
            taken.insert(n);
            prey.push(n);
        }
    }
    for group in 0..net.num_groups() {
        let pinned = predator.iter().filter(|&&n| nodes[n as usize].group == group).count() as u32;
        let candidates = |immune: bool| -> Vec<u32> {
            (0..nodes.len() as u32)
                .filter(|n| {
                    let spec = &nodes[*n as usize];
                    spec.group == group && spec.cooperative && spec.immune == immune && !taken.contains(n)
                })
                .collect()
        };
        let mut pools = [candidates(true), candidates(false)];
        for _ in pinned..s.initial_predator[group] {
            let Some(pool) = pools.iter_mut().find(|p| !p.is_empty()) else { break };
            let n = pool.swap_remove(rng.random_range(0..pool.len()));
            taken.insert(n);
            predator.push(n);
        }
    }
    let predator = predator
        .into_iter()
        .map(|n| (n, s.delay.max(nodes[n as usize].arrival)))
        .collect();

    let log = run_setup(Setup {
        scn: &s,
        groups: net.num_groups(),
        nodes,
        contacts: Contacts::Trace(&net.encounters),
        seeding: Seeding::Nodes { prey, predator },
        horizon: net.end,
        rng,
    });
    let metrics = metrics_from_log(&log, &s);
    Ok((log, RunMetrics { seed, metrics }))
}

/// `runs` replays with seeds `base_seed..`, in seed order.
pub fn replay_many(net: &TraceNetwork, scn: &Scenario, runs: usize, base_seed: u64) -> Result<Vec<RunMetrics>, TraceError> {
    (0..runs as u64)
        .into_par_iter()
        .map(|k| replay_sim(net, scn, base_seed.wrapping_add(k)).map(|(_, m)| m))
        .collect()
}

/// Scenario whose relative metrics use the trace's group sizes.
pub fn replay_scenario(net: &TraceNetwork, scn: &Scenario) -> Result<Scenario, TraceError> {
    net.adapt(scn)
}

/// Parameters of a synthetic multi-group encounter trace.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPlan {
    pub group_sizes: Vec<u32>,
    /// Symmetric per-pair contact rates, diagonal included.
    pub rates: Vec<Vec<f64>>,
    /// Arrival offset of each group from `origin`.
    pub arrivals: Vec<f64>,
    pub origin: f64,
    /// Length of the trace from `origin`.
    pub duration: f64,
    /// Length of each generated encounter.
    pub encounter_len: f64,
}

pub const DAY: f64 = 86_400.0;

impl SyntheticPlan {
    /// Two groups of 90 and 10 nodes over 62 days, the second arriving
    /// 8.7 days after the first, with β₁₁ = 3.6e-6, β₂₂ = 3.3e-6 and
    /// β₁₂ = 4e-7 s⁻¹.
    pub fn two_batch() -> Self {
        SyntheticPlan {
            group_sizes: vec![90, 10],
            rates: vec![vec![3.6e-6, 4e-7], vec![4e-7, 3.3e-6]],
            arrivals: vec![0.0, 8.7 * DAY],
            origin: 1_136_073_600.0,
            duration: 62.0 * DAY,
            encounter_len: 60.0,
        }
    }

    pub fn node_id(&self, group: usize, k: u32) -> String {
        format!("g{}n{:03}", group + 1, k)
    }

    fn members(&self) -> Vec<(usize, String)> {
        self.group_sizes
            .iter()
            .enumerate()
            .flat_map(|(g, &n)| (0..n).map(move |k| (g, k)))
            .map(|(g, k)| (g, self.node_id(g, k)))
            .collect()
    }

    /// Independent Poisson encounters for every pair while both are present.
    pub fn encounters(&self, seed: u64) -> Vec<EncounterEvent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = self.members();
        let end = self.origin + self.duration;
        let mut out = Vec::new();
        for (i, (ga, a)) in members.iter().enumerate() {
            for (gb, b) in &members[i + 1..] {
                let beta = self.rates[*ga][*gb];
                if beta <= 0.0 {
                    continue;
                }
                let mut t = self.origin + self.arrivals[*ga].max(self.arrivals[*gb]);
                loop {
                    t += rng.sample::<f64, _>(Exp1) / beta;
                    if t >= end {
                        break;
                    }
                    out.push(EncounterEvent::new(t, t + self.encounter_len, a, b));
                }
            }
        }
        sort_encounters(&mut out);
        out
    }

    /// Association records realizing [`Self::encounters`]: each encounter
    /// becomes two associations on a fresh access point, and every node
    /// gets a short presence record on its own access point at arrival.
    pub fn associations(&self, seed: u64) -> Vec<AssociationRecord> {
        let mut out = Vec::new();
        for (g, id) in self.members() {
            let t = self.origin + self.arrivals[g];
            out.push(AssociationRecord {
                node_id: id.clone(),
                ap_id: format!("home-{id}"),
                start_ts: t,
                end_ts: t + self.encounter_len,
            });
        }
        for (k, e) in self.encounters(seed).into_iter().enumerate() {
            for node in [e.node_a, e.node_b] {
                out.push(AssociationRecord {
                    node_id: node,
                    ap_id: format!("ap{k}"),
                    start_ts: e.t_start,
                    end_ts: e.t_end,
                });
            }
        }
        let last = self.origin + self.duration;
        if let Some((_, id)) = self.members().first() {
            out.push(AssociationRecord {
                node_id: id.clone(),
                ap_id: format!("home-{id}"),
                start_ts: last - self.encounter_len,
                end_ts: last,
            });
        }
        out.sort_by(|a, b| a.start_ts.total_cmp(&b.start_ts));
        out
    }
}

pub fn write_associations_csv<W: Write>(recs: &[AssociationRecord], w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in recs {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_encounters_csv<W: Write>(encs: &[EncounterEvent], w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    for e in encs {
        wr.serialize(e)?;
    }
    wr.flush()?;
    Ok(())
}

/// `node,group,arrival,total_encounters,unique_peers,contact_rate`
pub fn write_node_stats_csv<W: Write>(stats: &TraceStats, w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["node", "group", "arrival", "total_encounters", "unique_peers", "contact_rate"])?;
    for s in &stats.nodes {
        wr.write_record([
            s.node.clone(),
            stats.groups.assignment[&s.node].to_string(),
            s.arrival.to_string(),
            s.total_encounters.to_string(),
            s.unique_peers.to_string(),
            s.contact_rate.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// `batch,start,end,size`
pub fn write_batches_csv<W: Write>(stats: &TraceStats, w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["batch", "start", "end", "size"])?;
    for (i, b) in stats.batches.iter().enumerate() {
        wr.write_record([i.to_string(), b.start.to_string(), b.end.to_string(), b.size().to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// `group_a,group_b,size_a,size_b,rate`
pub fn write_rates_csv<W: Write>(stats: &TraceStats, w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["group_a", "group_b", "size_a", "size_b", "rate"])?;
    let g = &stats.groups;
    for (n, row) in g.rates.iter().enumerate() {
        for (m, rate) in row.iter().enumerate() {
            wr.write_record([
                n.to_string(),
                m.to_string(),
                g.groups[n].len().to_string(),
                g.groups[m].len().to_string(),
                rate.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// `metric,bin_lo,bin_hi,count` for total and unique encounters per node,
/// 20 equal-width bins each.
pub fn write_histogram_csv<W: Write>(stats: &TraceStats, w: W) -> Result<(), CsvError> {
    const BINS: usize = 20;
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["metric", "bin_lo", "bin_hi", "count"])?;
    let columns: [(&str, Vec<usize>); 2] = [
        ("total_encounters", stats.nodes.iter().map(|s| s.total_encounters).collect()),
        ("unique_peers", stats.nodes.iter().map(|s| s.unique_peers).collect()),
    ];
    for (name, values) in columns {
        let max = values.iter().copied().max().unwrap_or(0);
        let width = (max / BINS + 1).max(1);
        let mut counts = [0usize; BINS];
        for v in values {
            counts[(v / width).min(BINS - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            wr.write_record([
                name.to_string(),
                (b * width).to_string(),
                ((b + 1) * width).to_string(),
                c.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// `top_percent,share`
pub fn write_top_share_csv<W: Write>(stats: &TraceStats, w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["top_percent", "share"])?;
    for (k, s) in &stats.top_share {
        wr.write_record([k.to_string(), s.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(node: &str, ap: &str, s: f64, e: f64) -> AssociationRecord {
        AssociationRecord {
            node_id: node.into(),
            ap_id: ap.into(),
            start_ts: s,
            end_ts: e,
        }
    }

    #[test]
    fn parse_simple() {
        let p = parse_associations("n1,ap1,0,100\nn2,ap1,50,150".as_bytes()).unwrap();
        assert_eq!(p.records.len(), 2);
        assert!(p.rejects.is_empty());
        let p = parse_associations("node_id,ap_id,start_ts,end_ts\nn2,ap1,50,150\nn1,ap1,0,100\n".as_bytes()).unwrap();
        assert_eq!(p.records[0].node_id, "n1");
    }

    #[test]
    fn parse_rejects() {
        let p = parse_associations("n1,ap1,0,100\nn2,ap1,150,150\nn3,ap1,1,2\n".as_bytes()).unwrap();
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.rejects.len(), 1);
        assert_eq!(p.rejects[0].line, 2);
        assert!(p.rejects[0].reason.contains("not before"));
        assert!(matches!(parse_associations("".as_bytes()), Err(TraceError::EmptyInput)));
        assert!(matches!(
            parse_associations("a,b\nc,d,e,f\nn1,ap1,0,1\n".as_bytes()),
            Err(TraceError::Format { malformed: 2, total: 3, .. })
        ));
    }

    #[test]
    fn encounter_examples() {
        let e = derive_encounters(&[rec("n1", "ap1", 0.0, 100.0), rec("n2", "ap1", 50.0, 150.0)]);
        assert_eq!(e, vec![EncounterEvent::new(50.0, 100.0, "n1", "n2")]);
        assert!(derive_encounters(&[rec("n1", "ap1", 0.0, 100.0), rec("n2", "ap2", 0.0, 100.0)]).is_empty());
        assert!(derive_encounters(&[rec("n1", "ap1", 0.0, 10.0), rec("n2", "ap1", 10.0, 20.0)]).is_empty());
    }

    #[test]
    fn multi_ap_duplicates_merge() {
        let e = derive_encounters(&[
            rec("b", "ap1", 0.0, 100.0),
            rec("a", "ap1", 10.0, 60.0),
            rec("a", "ap2", 40.0, 90.0),
            rec("b", "ap2", 50.0, 120.0),
            rec("a", "ap1", 200.0, 300.0),
            rec("b", "ap1", 250.0, 260.0),
        ]);
        assert_eq!(
            e,
            vec![
                EncounterEvent::new(10.0, 90.0, "a", "b"),
                EncounterEvent::new(250.0, 260.0, "a", "b"),
            ]
        );
    }

    #[test]
    fn stats_single_pair() {
        let encs: Vec<_> = (0..10)
            .map(|k| EncounterEvent::new(k as f64 * 100.0, k as f64 * 100.0 + 10.0, "x", "y"))
            .collect();
        let st = trace_stats(&encs, DEFAULT_BATCH_WINDOW).unwrap();
        assert_eq!(st.batches.len(), 1);
        assert_eq!(st.batches[0].size(), 2);
        assert!(st.groups.single_batch);
        assert!((st.groups.rates[0][0] - 10.0 / 910.0).abs() < 1e-12);
        assert_eq!(st.nodes[0].total_encounters, 10);
        assert_eq!(st.nodes[0].unique_peers, 1);
        assert_eq!(st.share_of_top(20), 0.5);
        assert!(matches!(trace_stats(&[], 1.0), Err(TraceError::EmptyInput)));
    }

    #[test]
    fn batches_split_on_gaps() {
        let arr: HashMap<String, f64> = [("a", 0.0), ("b", 100.0), ("c", 10_000.0), ("d", 10_050.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let b = batch_clusters(&arr, 1000.0);
        assert_eq!(b.iter().map(BatchCluster::size).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(batch_clusters(&arr, 1e9).len(), 1);
    }

    #[test]
    fn replay_empty_and_unknown() {
        let encs = vec![EncounterEvent::new(0.0, 10.0, "a", "b")];
        let st = trace_stats(&encs, DAY).unwrap();
        let net = TraceNetwork::new(&encs, &st);
        let mut scn = net.scenario_template();
        scn.initial_prey = vec![1];
        scn.initial_predator = vec![1];
        let (_, m) = replay_sim(&net, &scn, 1).unwrap();
        assert_eq!(m.metrics.ti, 1.0);
        scn.pinned_prey = vec!["zz".into()];
        assert!(matches!(replay_sim(&net, &scn, 1), Err(TraceError::UnknownNode(id)) if id == "zz"));
    }

    #[test]
    fn replay_follows_encounter_order() {
        let encs = vec![
            EncounterEvent::new(5.0, 6.0, "p", "s"),
            EncounterEvent::new(10.0, 11.0, "q", "s"),
            EncounterEvent::new(20.0, 21.0, "p", "q"),
        ];
        let st = trace_stats(&encs, DAY).unwrap();
        let net = TraceNetwork::new(&encs, &st);
        let mut scn = net.scenario_template();
        scn.initial_prey = vec![1];
        scn.initial_predator = vec![1];
        scn.pinned_prey = vec!["p".into()];
        scn.pinned_predator = vec!["q".into()];
        let (log, m) = replay_sim(&net, &scn, 4).unwrap();
        // Times start at the first encounter: p infects s at 0, q
        // terminates s at 5 and p at 15.
        assert_eq!(m.metrics.ti, 2.0);
        assert_eq!(m.metrics.tr, Some(15.0));
        assert_eq!(m.metrics.tl, 5.0 + 15.0);
        assert_eq!(replay_sim(&net, &scn, 4).unwrap().0, log);
    }

    #[test]
    fn synthetic_associations_round_trip() {
        let plan = SyntheticPlan {
            group_sizes: vec![6, 3],
            rates: vec![vec![1e-3, 1e-4], vec![1e-4, 2e-3]],
            arrivals: vec![0.0, 5000.0],
            origin: 1000.0,
            duration: 20_000.0,
            encounter_len: 1.0,
        };
        let assocs = plan.associations(3);
        let mut buf = Vec::new();
        write_associations_csv(&assocs, &mut buf).unwrap();
        let parsed = parse_associations(&buf[..]).unwrap();
        assert_eq!(parsed.records, assocs);
        let encs = derive_encounters(&parsed.records);
        assert_eq!(encs, plan.encounters(3));
        let (net, st) = TraceNetwork::from_associations(&parsed.records, 1000.0).unwrap();
        assert_eq!(net.group_sizes, vec![6, 3]);
        assert_eq!(st.batches[1].start, 6000.0);
        assert_eq!(net.end, 20_000.0);
    }
}
