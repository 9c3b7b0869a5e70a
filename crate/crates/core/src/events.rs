//! Event logs produced by the node-level engines.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::CsvError;

/// Pool a susceptible node lands in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pool {
    SStar,
    SPrime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Worm {
    Prey,
    Predator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    /// S* → I_A; `node_b` is the prey source.
    PreyInfect,
    /// S* or S′ → I_B; `node_b` is the predator source.
    Vaccinate,
    /// I_A → I_B; `node_b` is the predator source.
    Terminate,
    /// A node enters the network as a susceptible.
    Arrive(Pool),
    OnOffToggle,
    /// A node is seeded with a worm, whatever it held before.
    Inject(Worm),
    /// Manual removal or manual vaccination into R.
    Remove,
    /// An infected node becomes susceptible again.
    Resusceptible(Pool),
    /// A node leaves the network.
    Depart,
    /// Group transition; `node_b` holds the new group index.
    Migrate,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::PreyInfect => "prey_infect",
            EventKind::Vaccinate => "vaccinate",
            EventKind::Terminate => "terminate",
            EventKind::Arrive(Pool::SStar) => "arrive_s_star",
            EventKind::Arrive(Pool::SPrime) => "arrive_s_prime",
            EventKind::OnOffToggle => "on_off_toggle",
            EventKind::Inject(Worm::Prey) => "inject_prey",
            EventKind::Inject(Worm::Predator) => "inject_predator",
            EventKind::Remove => "remove",
            EventKind::Resusceptible(Pool::SStar) => "resusceptible_s_star",
            EventKind::Resusceptible(Pool::SPrime) => "resusceptible_s_prime",
            EventKind::Depart => "depart",
            EventKind::Migrate => "migrate",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "prey_infect" => EventKind::PreyInfect,
            "vaccinate" => EventKind::Vaccinate,
            "terminate" => EventKind::Terminate,
            "arrive_s_star" => EventKind::Arrive(Pool::SStar),
            "arrive_s_prime" => EventKind::Arrive(Pool::SPrime),
            "on_off_toggle" => EventKind::OnOffToggle,
            "inject_prey" => EventKind::Inject(Worm::Prey),
            "inject_predator" => EventKind::Inject(Worm::Predator),
            "remove" => EventKind::Remove,
            "resusceptible_s_star" => EventKind::Resusceptible(Pool::SStar),
            "resusceptible_s_prime" => EventKind::Resusceptible(Pool::SPrime),
            "depart" => EventKind::Depart,
            "migrate" => EventKind::Migrate,
            other => return Err(format!("unknown event kind `{other}`")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventRecord {
    pub t: f64,
    pub kind: EventKind,
    pub node_a: u32,
    pub node_b: Option<u32>,
}

/// Time-ordered record of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
    /// End of the observation window; open prey episodes are closed here.
    pub horizon: f64,
}

#[derive(Serialize, Deserialize)]
struct Row {
    t: f64,
    event: String,
    node_a: u32,
    node_b: Option<u32>,
}

impl EventLog {
    pub fn new(horizon: f64) -> Self {
        EventLog {
            records: Vec::new(),
            horizon,
        }
    }

    pub fn push(&mut self, t: f64, kind: EventKind, node_a: u32, node_b: Option<u32>) {
        debug_assert!(self.records.last().is_none_or(|r| r.t <= t));
        self.records.push(EventRecord {
            t,
            kind,
            node_a,
            node_b,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes `t,event,node_a,node_b`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CsvError> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(Row {
                t: r.t,
                event: r.kind.name().to_string(),
                node_a: r.node_a,
                node_b: r.node_b,
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, horizon: f64) -> Result<Self, CsvError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut log = EventLog::new(horizon);
        for row in rd.deserialize() {
            let row: Row = row?;
            let kind = row.event.parse().map_err(CsvError::Field)?;
            log.push(row.t, kind, row.node_a, row.node_b);
        }
        Ok(log)
    }
}
