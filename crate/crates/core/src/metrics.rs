//! The six evaluation metrics, the predator/prey seed ratio and
//! normalization by the cooperative-susceptible population.
//!
//! - TI: nodes ever prey-infected
//! - MI: peak simultaneous prey-infected nodes
//! - TL: summed prey lifespan over all nodes, seconds
//! - AL: TL / TI
//! - TA: time until no susceptible or prey-infected node remains
//! - TR: time until no prey-infected node remains
//!
//! Time metrics that never happen inside the observation window are `None`
//! ("not reached"). TL is always a number but is flagged censored when prey
//! episodes were still open at the horizon.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EventKind, EventLog, Worm};
use crate::model::Scenario;
use crate::CsvError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Censoring {
    pub tl: bool,
    pub al: bool,
    pub ta: bool,
    pub tr: bool,
}

impl Censoring {
    /// Pipe-separated names of the censored metrics, empty when none.
    pub fn flags(&self) -> String {
        [
            (self.tl, "tl"),
            (self.al, "al"),
            (self.ta, "ta"),
            (self.tr, "tr"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect::<Vec<_>>()
        .join("|")
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let mut c = Censoring::default();
        for part in s.split('|').filter(|p| !p.is_empty()) {
            match part {
                "tl" => c.tl = true,
                "al" => c.al = true,
                "ta" => c.ta = true,
                "tr" => c.tr = true,
                other => return Err(format!("unknown censored metric `{other}`")),
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub ti: f64,
    pub mi: f64,
    pub tl: f64,
    pub al: Option<f64>,
    pub ta: Option<f64>,
    pub tr: Option<f64>,
    pub censored: Censoring,
}

impl Metrics {
    /// Fills AL from TL and TI.
    pub(crate) fn with_average_lifespan(mut self) -> Self {
        self.al = (self.ti > 0.0).then(|| self.tl / self.ti);
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no initial prey-infected nodes: Y is undefined")]
    DivisionByZero,
    #[error("no cooperative prey-susceptible nodes: relative metrics are undefined")]
    DegenerateDenominator,
}

/// Ratio of initial predator-infected to initial prey-infected nodes.
pub fn compute_y(scn: &Scenario) -> Result<f64, MetricsError> {
    let prey: u64 = scn.initial_prey.iter().map(|&v| u64::from(v)).sum();
    let predator: u64 = scn.initial_predator.iter().map(|&v| u64::from(v)).sum();
    if prey == 0 {
        return Err(MetricsError::DivisionByZero);
    }
    Ok(predator as f64 / prey as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeMetrics {
    /// N* = c(1−i)ΣN_n
    pub n_star: f64,
    pub ti: f64,
    pub mi: f64,
}

/// TI and MI as fractions of the cooperative prey-susceptible population.
pub fn relative_metrics(m: &Metrics, scn: &Scenario) -> Result<RelativeMetrics, MetricsError> {
    let n_star = scn.cooperation * (1.0 - scn.immunization) * scn.total_nodes() as f64;
    if !(n_star > 0.0) {
        return Err(MetricsError::DegenerateDenominator);
    }
    Ok(RelativeMetrics {
        n_star,
        ti: m.ti / n_star,
        mi: m.mi / n_star,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tracked {
    Susceptible,
    Prey,
    Predator,
    Gone,
}

/// Single pass over a time-ordered event log.
///
/// The last batch time t_B is the latest arrival of a new node after t=0;
/// TR and TA never precede it. TA is not reached when the interaction gives
/// the predator no way to vaccinate.
pub fn metrics_from_log(log: &EventLog, scn: &Scenario) -> Metrics {
    let can_vaccinate = scn.flags().can_vaccinate();
    let mut state: HashMap<u32, Tracked> = HashMap::new();
    let mut episode_start: HashMap<u32, f64> = HashMap::new();
    let mut ever_prey: HashSet<u32> = HashSet::new();
    let mut prey = 0u64;
    let mut unsecured = 0u64;
    let mut peak = 0u64;
    let mut tl = 0.0;
    let mut t_b = 0.0f64;
    let mut prey_cleared_at = None;
    let mut secured_at = None;

    for rec in &log.records {
        let next = match rec.kind {
            EventKind::PreyInfect | EventKind::Inject(Worm::Prey) => Tracked::Prey,
            EventKind::Vaccinate | EventKind::Terminate | EventKind::Inject(Worm::Predator) => {
                Tracked::Predator
            }
            EventKind::Arrive(_) | EventKind::Resusceptible(_) => Tracked::Susceptible,
            EventKind::Remove | EventKind::Depart => Tracked::Gone,
            EventKind::OnOffToggle | EventKind::Migrate => continue,
        };
        let t = rec.t;
        let previous = state.insert(rec.node_a, next);
        let new_node = matches!(rec.kind, EventKind::Arrive(_) | EventKind::Inject(_))
            && previous.is_none_or(|p| p == Tracked::Gone);
        if new_node && t > 0.0 {
            t_b = t_b.max(t);
        }
        match previous {
            Some(Tracked::Prey) => {
                prey -= 1;
                unsecured -= 1;
                if let Some(start) = episode_start.remove(&rec.node_a) {
                    tl += t - start;
                }
            }
            Some(Tracked::Susceptible) => unsecured -= 1,
            _ => {}
        }
        match next {
            Tracked::Prey => {
                prey += 1;
                unsecured += 1;
                ever_prey.insert(rec.node_a);
                episode_start.insert(rec.node_a, t);
                peak = peak.max(prey);
            }
            Tracked::Susceptible => unsecured += 1,
            _ => {}
        }
        if previous == Some(Tracked::Prey) && prey == 0 {
            prey_cleared_at = Some(t);
        }
        if prey > 0 {
            prey_cleared_at = None;
        }
        if matches!(previous, Some(Tracked::Prey | Tracked::Susceptible)) && unsecured == 0 {
            secured_at = Some(t);
        }
        if unsecured > 0 {
            secured_at = None;
        }
    }

    let open = episode_start.len();
    for start in episode_start.values() {
        tl += (log.horizon - start).max(0.0);
    }
    let tr = if prey > 0 {
        None
    } else {
        Some(prey_cleared_at.unwrap_or(0.0).max(t_b))
    };
    let ta = if !can_vaccinate || unsecured > 0 {
        None
    } else {
        Some(secured_at.unwrap_or(0.0).max(t_b).max(tr.unwrap_or(0.0)))
    };
    Metrics {
        ti: ever_prey.len() as f64,
        mi: peak as f64,
        tl,
        al: None,
        ta,
        tr,
        censored: Censoring {
            tl: open > 0,
            al: open > 0,
            ta: ta.is_none(),
            tr: tr.is_none(),
        },
    }
    .with_average_lifespan()
}

/// One line of the metrics CSV shared by every engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub ti: f64,
    pub mi: f64,
    pub tl: f64,
    pub al: Option<f64>,
    pub ta: Option<f64>,
    pub tr: Option<f64>,
    pub ti_rel: Option<f64>,
    pub mi_rel: Option<f64>,
    pub y: Option<f64>,
    pub censored_flags: String,
}

impl MetricsRow {
    pub fn new(m: &Metrics, scn: &Scenario) -> Self {
        let rel = relative_metrics(m, scn).ok();
        MetricsRow {
            ti: m.ti,
            mi: m.mi,
            tl: m.tl,
            al: m.al,
            ta: m.ta,
            tr: m.tr,
            ti_rel: rel.map(|r| r.ti),
            mi_rel: rel.map(|r| r.mi),
            y: compute_y(scn).ok(),
            censored_flags: m.censored.flags(),
        }
    }

    pub fn metrics(&self) -> Result<Metrics, String> {
        Ok(Metrics {
            ti: self.ti,
            mi: self.mi,
            tl: self.tl,
            al: self.al,
            ta: self.ta,
            tr: self.tr,
            censored: Censoring::parse(&self.censored_flags)?,
        })
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<(), CsvError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>, CsvError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(CsvError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Pool;
    use crate::model::InteractionType;
    use proptest::prelude::*;

    fn scn() -> Scenario {
        Scenario::uniform(1000, 5e-5, 1, 1, 100.0)
    }

    #[test]
    fn y_ratio() {
        assert_eq!(compute_y(&scn()).unwrap(), 1.0);
        let mut s = scn();
        s.initial_predator = vec![1000];
        assert_eq!(compute_y(&s).unwrap(), 1000.0);
        s.initial_prey = vec![2, 3];
        s.initial_predator = vec![3, 7];
        assert_eq!(compute_y(&s).unwrap(), 2.0);
        s.initial_prey = vec![0, 0];
        assert_eq!(compute_y(&s), Err(MetricsError::DivisionByZero));
    }

    #[test]
    fn relative_normalization() {
        let m = Metrics {
            ti: 500.0,
            mi: 100.0,
            ..Default::default()
        };
        let r = relative_metrics(&m, &scn()).unwrap();
        assert_eq!((r.ti, r.mi), (0.5, 0.1));

        let mut s = scn();
        s.cooperation = 0.5;
        s.immunization = 0.2;
        assert!((relative_metrics(&m, &s).unwrap().n_star - 400.0).abs() < 1e-9);
        s.immunization = 1.0;
        assert_eq!(
            relative_metrics(&m, &s),
            Err(MetricsError::DegenerateDenominator)
        );
    }

    #[test]
    fn single_episode() {
        let mut log = EventLog::new(100.0);
        log.push(0.0, EventKind::Inject(Worm::Prey), 0, None);
        log.push(5.0, EventKind::Terminate, 0, Some(1));
        let m = metrics_from_log(&log, &scn());
        assert_eq!((m.ti, m.mi, m.tl), (1.0, 1.0, 5.0));
        assert_eq!(m.al, Some(5.0));
        assert_eq!(m.tr, Some(5.0));
        assert_eq!(m.ta, Some(5.0));
        assert_eq!(m.censored, Censoring::default());
    }

    #[test]
    fn empty_log() {
        let m = metrics_from_log(&EventLog::new(100.0), &scn());
        assert_eq!((m.ti, m.mi, m.tl), (0.0, 0.0, 0.0));
        assert_eq!(m.al, None);
        assert_eq!(m.tr, Some(0.0));
    }

    #[test]
    fn open_episode_is_censored() {
        let mut log = EventLog::new(50.0);
        log.push(0.0, EventKind::Arrive(Pool::SStar), 1, None);
        log.push(0.0, EventKind::Inject(Worm::Prey), 0, None);
        log.push(10.0, EventKind::PreyInfect, 1, Some(0));
        let m = metrics_from_log(&log, &scn());
        assert_eq!(m.tl, 50.0 + 40.0);
        assert_eq!(m.tr, None);
        assert_eq!(m.ta, None);
        assert_eq!(m.censored.flags(), "tl|al|ta|tr");
        assert_eq!(m.al, Some(45.0));
    }

    #[test]
    fn conservative_never_secures() {
        let mut s = scn();
        s.interaction = InteractionType::ConservativeOneSided;
        let mut log = EventLog::new(100.0);
        log.push(0.0, EventKind::Inject(Worm::Prey), 0, None);
        log.push(5.0, EventKind::Terminate, 0, Some(1));
        let m = metrics_from_log(&log, &s);
        assert_eq!(m.tr, Some(5.0));
        assert_eq!(m.ta, None);
    }

    #[test]
    fn late_arrival_bounds_tr() {
        let mut log = EventLog::new(100.0);
        log.push(0.0, EventKind::Inject(Worm::Prey), 0, None);
        log.push(5.0, EventKind::Terminate, 0, Some(1));
        log.push(30.0, EventKind::Arrive(Pool::SPrime), 7, None);
        log.push(40.0, EventKind::Vaccinate, 7, Some(1));
        let m = metrics_from_log(&log, &scn());
        assert_eq!(m.tr, Some(30.0));
        assert_eq!(m.ta, Some(40.0));
    }

    #[test]
    fn csv_round_trip() {
        let m = Metrics {
            ti: 3.0,
            mi: 2.0,
            tl: 7.5,
            al: Some(2.5),
            ta: None,
            tr: Some(9.0),
            censored: Censoring {
                ta: true,
                ..Default::default()
            },
        };
        let row = MetricsRow::new(&m, &scn());
        let mut buf = Vec::new();
        write_metrics_csv(std::slice::from_ref(&row), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("ti,mi,tl,al,ta,tr,ti_rel,mi_rel,y,censored_flags\n"));
        let back = read_metrics_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![row]);
        assert_eq!(back[0].metrics().unwrap(), m);
    }

    proptest! {
        #[test]
        fn toggles_do_not_change_metrics(toggle_at in proptest::collection::vec(0.0f64..20.0, 0..10)) {
            let mut base = vec![
                (0.0, EventKind::Inject(Worm::Prey), 0),
                (0.0, EventKind::Arrive(Pool::SStar), 1),
                (3.0, EventKind::PreyInfect, 1),
                (8.0, EventKind::Terminate, 0),
                (12.0, EventKind::Terminate, 1),
            ];
            let plain = {
                let mut log = EventLog::new(20.0);
                for &(t, k, n) in &base { log.push(t, k, n, None); }
                metrics_from_log(&log, &scn())
            };
            for t in toggle_at { base.push((t, EventKind::OnOffToggle, 1)); }
            base.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut log = EventLog::new(20.0);
            for &(t, k, n) in &base { log.push(t, k, n, None); }
            prop_assert_eq!(metrics_from_log(&log, &scn()), plain);
        }
    }
}
