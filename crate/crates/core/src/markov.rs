//! Exact expected TI and TL for tiny single-group populations.
//!
//! With p = 1 and no manual or re-susceptibility rates, the count vector
//! (S*, S′, I_A, I_B) is itself a continuous-time Markov chain. Every
//! transition either moves a node into I_B or turns an S* into I_A, so the
//! chain is acyclic and first-step analysis terminates.

use std::collections::HashMap;

use num_traits::{FromPrimitive, Num};
use thiserror::Error;

use crate::model::{validate_scenario, join_violations, Scenario, Violation};

/// Largest population the oracle enumerates.
pub const MAX_NODES: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedMetrics<T> {
    /// E[TI], counting the initial prey nodes.
    pub ti: T,
    /// E[TL] in seconds; `None` when prey can survive forever with
    /// positive probability.
    pub tl: Option<T>,
}

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("{nodes} nodes exceed the exact oracle bound of {MAX_NODES}")]
    TooLarge { nodes: u64 },
    #[error("exact oracle requires {0}")]
    Unsupported(&'static str),
    #[error("invalid scenario: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

type Counts = (u32, u32, u32, u32);

struct Chain<T> {
    flags: [bool; 4],
    memo: HashMap<Counts, (T, Option<T>)>,
}

impl<T: Clone + Num + FromPrimitive> Chain<T> {
    fn int(v: u32) -> T {
        T::from_u32(v).expect("small integers are representable")
    }

    /// Expected further prey infections and further prey lifetime (in units
    /// of 1/β) starting from `x`.
    fn solve(&mut self, x: Counts) -> (T, Option<T>) {
        if let Some(v) = self.memo.get(&x) {
            return v.clone();
        }
        let (s, sp, a, b) = x;
        let [infect, vacc_s, vacc_sp, term] = self.flags;
        let mut moves: Vec<(u32, Counts, bool)> = Vec::with_capacity(4);
        if infect && s * a > 0 {
            moves.push((s * a, (s - 1, sp, a + 1, b), true));
        }
        if vacc_s && s * b > 0 {
            moves.push((s * b, (s - 1, sp, a, b + 1), false));
        }
        if vacc_sp && sp * b > 0 {
            moves.push((sp * b, (s, sp - 1, a, b + 1), false));
        }
        if term && a * b > 0 {
            moves.push((a * b, (s, sp, a - 1, b + 1), false));
        }
        let result = if moves.is_empty() {
            (T::zero(), (a == 0).then(T::zero))
        } else {
            let q = Self::int(moves.iter().map(|m| m.0).sum());
            let mut ti = T::zero();
            let mut tl = Some(Self::int(a) / q.clone());
            for (rate, next, is_infection) in moves {
                let w = Self::int(rate) / q.clone();
                let (nti, ntl) = self.solve(next);
                let gain = if is_infection { T::one() + nti } else { nti };
                ti = ti + w.clone() * gain;
                tl = match (tl, ntl) {
                    (Some(acc), Some(v)) => Some(acc + w * v),
                    _ => None,
                };
            }
            (ti, tl)
        };
        self.memo.insert(x, result.clone());
        result
    }
}

/// Exact E[TI] and E[TL] by first-step analysis over the count chain.
///
/// Accepts a single group with at most [`MAX_NODES`] nodes, `on_prob = 1`,
/// no manual or re-susceptibility rates, no batches and no delay. Node
/// counts follow the same integer rounding as the stochastic engine.
pub fn exact_small_markov<T>(scn: &Scenario) -> Result<ExpectedMetrics<T>, MarkovError>
where
    T: Clone + Num + FromPrimitive,
{
    let violations = validate_scenario(scn);
    if !violations.is_empty() {
        return Err(MarkovError::Invalid(violations));
    }
    if scn.num_groups() != 1 {
        return Err(MarkovError::Unsupported("a single group"));
    }
    if scn.total_nodes() > MAX_NODES {
        return Err(MarkovError::TooLarge {
            nodes: scn.total_nodes(),
        });
    }
    if scn.on_prob != 1.0 {
        return Err(MarkovError::Unsupported("on_prob = 1"));
    }
    if scn.manual_removal_rate != 0.0 || scn.manual_vaccination_rate != 0.0 || scn.effective_alpha() != 0.0 {
        return Err(MarkovError::Unsupported("zero manual and re-susceptibility rates"));
    }
    if !scn.batch_schedule.is_empty() {
        return Err(MarkovError::Unsupported("no batch arrivals"));
    }
    if scn.delay != 0.0 {
        return Err(MarkovError::Unsupported("zero predator delay"));
    }
    let beta = scn.groups[0].intra_rate;
    if !(beta > 0.0) {
        return Err(MarkovError::Unsupported("a positive contact rate"));
    }
    let counts = scn.node_counts()[0];
    let prey = scn.initial_prey[0];
    let predator = scn.initial_predator[0];
    let from_immune = predator.min(counts.immune);
    let sp = counts.immune - from_immune;
    let s = counts
        .susceptible
        .checked_sub(prey + (predator - from_immune))
        .ok_or(MarkovError::Unsupported("room for the initial infections"))?;

    let f = scn.flags();
    let mut chain = Chain::<T> {
        flags: [
            f.prey_infects(0),
            f.vaccinates_susceptible(0),
            f.vaccinates_immune(0),
            f.terminates(0),
        ],
        memo: HashMap::new(),
    };
    let (ti, tl) = chain.solve((s, sp, prey, predator));
    let beta = T::from_f64(beta).ok_or(MarkovError::Unsupported("a representable contact rate"))?;
    Ok(ExpectedMetrics {
        ti: ti + Chain::<T>::int(prey),
        tl: tl.map(|v| v / beta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InteractionType;
    use crate::Exact;
    use num_bigint::BigInt;

    fn rational(n: i64, d: i64) -> Exact {
        Exact::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn three_node_race() {
        let scn = Scenario::uniform(3, 1.0, 1, 1, 100.0);
        let m = exact_small_markov::<Exact>(&scn).unwrap();
        assert_eq!(m.ti, rational(4, 3));
        let f = exact_small_markov::<f64>(&scn).unwrap();
        assert!((f.ti - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lone_prey_is_terminated_at_rate_beta() {
        let scn = Scenario::uniform(2, 0.25, 1, 1, 100.0);
        let m = exact_small_markov::<Exact>(&scn).unwrap();
        assert_eq!(m.ti, rational(1, 1));
        assert_eq!(m.tl, Some(rational(4, 1)));
    }

    #[test]
    fn no_prey_means_no_infections() {
        let scn = Scenario::uniform(5, 1.0, 0, 1, 100.0);
        let m = exact_small_markov::<Exact>(&scn).unwrap();
        assert_eq!(m.ti, rational(0, 1));
        assert_eq!(m.tl, Some(rational(0, 1)));
    }

    #[test]
    fn two_sided_prey_never_dies() {
        let mut scn = Scenario::uniform(4, 1.0, 1, 1, 100.0);
        scn.interaction = InteractionType::AggressiveTwoSided;
        let m = exact_small_markov::<f64>(&scn).unwrap();
        assert_eq!(m.tl, None);
        assert!(m.ti >= 1.0);
    }

    #[test]
    fn preconditions() {
        let scn = Scenario::uniform(9, 1.0, 1, 1, 100.0);
        assert!(matches!(
            exact_small_markov::<f64>(&scn),
            Err(MarkovError::TooLarge { nodes: 9 })
        ));
        let mut scn = Scenario::uniform(4, 1.0, 1, 1, 100.0);
        scn.on_prob = 0.5;
        assert!(matches!(exact_small_markov::<f64>(&scn), Err(MarkovError::Unsupported(_))));
        let mut scn = Scenario::uniform(4, 1.0, 1, 1, 100.0);
        scn.delay = 3.0;
        assert!(matches!(exact_small_markov::<f64>(&scn), Err(MarkovError::Unsupported(_))));
    }

    #[test]
    fn exact_and_float_agree() {
        for n in 2..=8 {
            for predator in 1..n {
                let mut scn = Scenario::uniform(n, 0.5, 1, predator.min(n - 1), 100.0);
                scn.immunization = 0.25;
                if let (Ok(e), Ok(f)) = (exact_small_markov::<Exact>(&scn), exact_small_markov::<f64>(&scn)) {
                    let ti: f64 = num_traits::ToPrimitive::to_f64(&e.ti).unwrap();
                    assert!((ti - f.ti).abs() < 1e-12);
                }
            }
        }
    }
}
