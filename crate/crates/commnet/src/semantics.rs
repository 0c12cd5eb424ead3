//! Finite token-game semantics for open communication nets. The
//! environment may inject into and withdraw from free places under a
//! budget; internal firings are silent. Channel contents are tracked with
//! a saturating counter abstraction so the transition system stays finite.

use std::collections::HashMap;
use std::fmt;

use crate::net::CommNet;

/// Finitization knobs. The defaults are the smallest parameters that
/// exhibit both the inequivalence without losers and the equivalence up to
/// loss of the shipped broadcast pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbstractionParams {
    /// Maximum number of environment injections.
    pub env_budget: u32,
    /// Counts above this saturate (saturating mode) or disable the step
    /// (hard mode).
    pub cap: u32,
    pub mode: Mode,
    /// Number of distinct packet values.
    pub colors: u16,
    /// Exploration guard; exceeding it aborts construction.
    pub state_limit: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Counts above the cap collapse to ⊤; decrementing ⊤ may stay ⊤ or
    /// drop to the cap (over-approximation).
    Saturating,
    /// Steps that would exceed the cap are disabled (under-approximation).
    Hard,
}

impl Default for AbstractionParams {
    fn default() -> Self {
        AbstractionParams {
            env_budget: 1,
            cap: 1,
            mode: Mode::Saturating,
            colors: 1,
            state_limit: 1_000_000,
        }
    }
}

/// Abstracted token count of one (place, color).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Count {
    Fin(u32),
    Top,
}

impl fmt::Display for Count {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Count::Fin(n) => write!(f, "{n}"),
            Count::Top => f.write_str("T"),
        }
    }
}

/// A marking plus the remaining environment budget. Counts are indexed by
/// `place * colors + color`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Config {
    pub counts: Vec<Count>,
    pub budget_left: u32,
}

impl Config {
    pub fn initial(net: &CommNet, params: &AbstractionParams) -> Config {
        Config {
            counts: vec![Count::Fin(0); net.places.len() * params.colors as usize],
            budget_left: params.env_budget,
        }
    }

}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    /// Environment injects a packet into a free place.
    EnvIn(usize, u16),
    /// Environment withdraws a packet from a free place.
    EnvOut(usize, u16),
    Tau,
}

impl Label {
    pub fn display<'a>(&'a self, net: &'a CommNet) -> LabelDisplay<'a> {
        LabelDisplay { label: self, net }
    }
}

pub struct LabelDisplay<'a> {
    label: &'a Label,
    net: &'a CommNet,
}

impl fmt::Display for LabelDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ch = |p: &usize| self.net.places[*p].id.as_str();
        match self.label {
            Label::EnvIn(p, 0) => write!(f, "in({})", ch(p)),
            Label::EnvIn(p, c) => write!(f, "in({}#{})", ch(p), c),
            Label::EnvOut(p, 0) => write!(f, "out({})", ch(p)),
            Label::EnvOut(p, c) => write!(f, "out({}#{})", ch(p), c),
            Label::Tau => f.write_str("tau"),
        }
    }
}

/// Finite LTS over abstracted configurations. State 0 is the initial
/// configuration (empty marking, full budget).
#[derive(Clone, Debug)]
pub struct Lts {
    pub net: CommNet,
    pub params: AbstractionParams,
    pub states: Vec<Config>,
    /// Outgoing edges per state, sorted and deduplicated.
    pub edges: Vec<Vec<(Label, usize)>>,
}

impl Lts {
    pub fn initial(&self) -> usize {
        0
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(|e| e.len()).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExploreError {
    #[error("state limit of {limit} exceeded while building the transition system; the abstraction parameters are too large")]
    StateLimit { limit: usize },
}

fn increment(c: Count, cap: u32, mode: Mode) -> Option<Count> {
    match (c, mode) {
        (Count::Fin(n), Mode::Saturating) => {
            Some(if n + 1 > cap { Count::Top } else { Count::Fin(n + 1) })
        }
        (Count::Top, Mode::Saturating) => Some(Count::Top),
        (Count::Fin(n), Mode::Hard) => {
            if n + 1 > cap {
                None
            } else {
                Some(Count::Fin(n + 1))
            }
        }
        (Count::Top, Mode::Hard) => unreachable!("top counts cannot arise in hard mode"),
    }
}

/// Decrement outcomes; decrementing ⊤ is nondeterministic.
fn decrements(c: Count, cap: u32) -> Vec<Count> {
    match c {
        Count::Fin(0) => vec![],
        Count::Fin(n) => vec![Count::Fin(n - 1)],
        Count::Top => vec![Count::Top, Count::Fin(cap)],
    }
}

/// All enabled steps from a configuration, sorted and deduplicated.
pub fn successors(
    net: &CommNet,
    config: &Config,
    params: &AbstractionParams,
) -> Vec<(Label, Config)> {
    let colors = params.colors;
    let mut out: Vec<(Label, Config)> = Vec::new();

    // Environment injections.
    if config.budget_left > 0 {
        for (place, _) in net.free_places() {
            for color in 0..colors {
                let slot = place * colors as usize + color as usize;
                if let Some(next) = increment(config.counts[slot], params.cap, params.mode) {
                    let mut c = config.clone();
                    c.counts[slot] = next;
                    c.budget_left -= 1;
                    out.push((Label::EnvIn(place, color), c));
                }
            }
        }
    }

    // Environment withdrawals.
    for (place, _) in net.free_places() {
        for color in 0..colors {
            let slot = place * colors as usize + color as usize;
            for next in decrements(config.counts[slot], params.cap) {
                let mut c = config.clone();
                c.counts[slot] = next;
                out.push((Label::EnvOut(place, color), c));
            }
        }
    }

    // Internal firings: consume one token from the input place, produce
    // one token per output occurrence.
    for t in &net.transitions {
        for color in 0..colors {
            let in_slot = t.input * colors as usize + color as usize;
            for after_in in decrements(config.counts[in_slot], params.cap) {
                let mut c = config.clone();
                c.counts[in_slot] = after_in;
                let mut ok = true;
                for &o in &t.outputs {
                    let slot = o * colors as usize + color as usize;
                    match increment(c.counts[slot], params.cap, params.mode) {
                        Some(next) => c.counts[slot] = next,
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    out.push((Label::Tau, c));
                }
            }
        }
    }

    out.sort();
    out.dedup();
    out
}

/// Exhaustive reachability closure from the initial configuration.
pub fn build_lts(net: &CommNet, params: &AbstractionParams) -> Result<Lts, ExploreError> {
    let initial = Config::initial(net, params);
    let mut states = vec![initial.clone()];
    let mut index: HashMap<Config, usize> = HashMap::new();
    index.insert(initial, 0);
    let mut edges: Vec<Vec<(Label, usize)>> = Vec::new();
    let mut frontier = 0;
    while frontier < states.len() {
        let succ = successors(net, &states[frontier], params);
        let mut outgoing = Vec::with_capacity(succ.len());
        for (label, config) in succ {
            let id = match index.get(&config) {
                Some(&id) => id,
                None => {
                    let id = states.len();
                    if id >= params.state_limit {
                        return Err(ExploreError::StateLimit { limit: params.state_limit });
                    }
                    states.push(config.clone());
                    index.insert(config, id);
                    id
                }
            };
            outgoing.push((label, id));
        }
        outgoing.dedup();
        edges.push(outgoing);
        frontier += 1;
    }
    Ok(Lts {
        net: net.clone(),
        params: params.clone(),
        states,
        edges,
    })
}

/// The weak transition system of a finite LTS: an edge `(s, l, t)` exists
/// iff `s` reaches `t` by `tau* l tau*` (for visible `l`) or by `tau*`
/// (for `l = Tau`, which includes the reflexive pairs).
pub fn weak_closure(lts: &Lts) -> Lts {
    let n = lts.states.len();
    // Tau-reachability sets, reflexive.
    let mut reach: Vec<Vec<usize>> = Vec::with_capacity(n);
    for s in 0..n {
        let mut seen = vec![false; n];
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(u) = stack.pop() {
            for &(label, v) in &lts.edges[u] {
                if label == Label::Tau && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        reach.push((0..n).filter(|&v| seen[v]).collect());
    }

    let mut edges: Vec<Vec<(Label, usize)>> = vec![Vec::new(); n];
    for s in 0..n {
        for &u in &reach[s] {
            edges[s].push((Label::Tau, u));
            for &(label, v) in &lts.edges[u] {
                if label != Label::Tau {
                    for &t in &reach[v] {
                        edges[s].push((label, t));
                    }
                }
            }
        }
        edges[s].sort();
        edges[s].dedup();
    }
    Lts {
        net: lts.net.clone(),
        params: lts.params.clone(),
        states: lts.states.clone(),
        edges,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{ChannelId, Process};
    use crate::net::to_net;

    fn c(name: &str) -> ChannelId {
        ChannelId::new(name)
    }

    fn params(budget: u32, cap: u32) -> AbstractionParams {
        AbstractionParams {
            env_budget: budget,
            cap,
            ..AbstractionParams::default()
        }
    }

    fn config(counts: &[Count], budget: u32) -> Config {
        Config { counts: counts.to_vec(), budget_left: budget }
    }

    #[test]
    fn bridge_successors() {
        let net = to_net(&Process::Bridge(c("a"), c("b")));
        let a = net.place_index(&c("a")).unwrap();
        let b = net.place_index(&c("b")).unwrap();
        let mut counts = vec![Count::Fin(0); 2];
        counts[a] = Count::Fin(1);
        let got = successors(&net, &config(&counts, 0), &params(0, 1));
        let mut want = vec![
            (Label::EnvOut(a, 0), config(&[Count::Fin(0), Count::Fin(0)], 0)),
            (Label::Tau, {
                let mut cs = vec![Count::Fin(0); 2];
                cs[b] = Count::Fin(1);
                config(&cs, 0)
            }),
        ];
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn loser_firing_consumes_without_producing() {
        let net = to_net(&Process::Loser(c("a")));
        let got = successors(&net, &config(&[Count::Fin(1)], 0), &params(0, 1));
        let mut want = vec![
            (Label::EnvOut(0, 0), config(&[Count::Fin(0)], 0)),
            (Label::Tau, config(&[Count::Fin(0)], 0)),
        ];
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn duplicator_saturates() {
        let net = to_net(&Process::Duplicator(c("a")));
        let got = successors(&net, &config(&[Count::Fin(1)], 0), &params(0, 1));
        assert!(got.contains(&(Label::Tau, config(&[Count::Top], 0))));
    }

    #[test]
    fn top_decrement_is_nondeterministic() {
        let net = to_net(&Process::Bridge(c("a"), c("b")));
        let a = net.place_index(&c("a")).unwrap();
        let mut counts = vec![Count::Fin(0); 2];
        counts[a] = Count::Top;
        let got = successors(&net, &config(&counts, 0), &params(0, 1));
        let outs: Vec<_> = got
            .iter()
            .filter(|(l, _)| *l == Label::EnvOut(a, 0))
            .collect();
        assert_eq!(outs.len(), 2);
    }

    #[test]
    fn hard_mode_disables_at_cap() {
        let net = to_net(&Process::Duplicator(c("a")));
        let p = AbstractionParams { mode: Mode::Hard, ..params(0, 1) };
        let got = successors(&net, &config(&[Count::Fin(1)], 0), &p);
        assert!(got.iter().all(|(l, _)| *l != Label::Tau));
    }

    #[test]
    fn bridge_lts_has_four_states() {
        let net = to_net(&Process::Bridge(c("a"), c("b")));
        let lts = build_lts(&net, &params(1, 1)).unwrap();
        assert_eq!(lts.states.len(), 4);
    }

    #[test]
    fn stop_lts() {
        let net = to_net(&Process::Stop);
        let lts = build_lts(&net, &params(0, 1)).unwrap();
        assert_eq!(lts.states.len(), 1);
        assert_eq!(lts.num_edges(), 0);
    }

    #[test]
    fn lossy_d_is_small() {
        let p = crate::dsl::builtin("lossyD").unwrap();
        let lts = build_lts(&to_net(&p), &params(1, 1)).unwrap();
        assert!(lts.states.len() < 10_000, "{} states", lts.states.len());
    }

    #[test]
    fn state_limit_guard() {
        let p = crate::dsl::builtin("lossyD").unwrap();
        let mut pr = params(1, 1);
        pr.state_limit = 3;
        assert!(build_lts(&to_net(&p), &pr).is_err());
    }

    #[test]
    fn budget_monotone_and_weak_edges() {
        let net = to_net(&Process::Bridge(c("a"), c("b")));
        let lts = build_lts(&net, &params(1, 1)).unwrap();
        for (s, outgoing) in lts.edges.iter().enumerate() {
            for &(label, t) in outgoing {
                assert!(lts.states[t].budget_left <= lts.states[s].budget_left);
                if let Label::EnvIn(..) = label {
                    assert_eq!(lts.states[t].budget_left + 1, lts.states[s].budget_left);
                }
            }
        }
        let weak = weak_closure(&lts);
        // After injecting on a, a weak out(b) edge exists.
        let b = net.place_index(&c("b")).unwrap();
        let a = net.place_index(&c("a")).unwrap();
        let after_in = lts.edges[0]
            .iter()
            .find_map(|&(l, t)| (l == Label::EnvIn(a, 0)).then_some(t))
            .unwrap();
        assert!(weak.edges[after_in]
            .iter()
            .any(|&(l, _)| l == Label::EnvOut(b, 0)));
        // Idempotence of the closure.
        let again = weak_closure(&weak);
        assert_eq!(again.edges, weak.edges);
    }
}
