//! Communication nets: open Petri nets with exactly one input place per
//! transition, and the flattening correspondence with core processes.

use std::collections::BTreeMap;

use crate::ast::{self, Atom, ChannelId, Flattened, Process};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Place {
    pub id: ChannelId,
    /// True iff the channel is restricted in the originating process.
    pub local: bool,
}

/// A distributor occurrence. Outputs form a multiset; the stored order is
/// the written target order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transition {
    pub input: usize,
    pub outputs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommNet {
    pub places: Vec<Place>,
    pub transitions: Vec<Transition>,
}

/// Unreliability glyph recognized on a place, for rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Marker {
    None,
    Loser,
    Duplicator,
    Duploser,
}

impl CommNet {
    pub fn place_index(&self, id: &ChannelId) -> Option<usize> {
        self.places.iter().position(|p| p.id == *id)
    }

    pub fn free_places(&self) -> impl Iterator<Item = (usize, &Place)> {
        self.places.iter().enumerate().filter(|(_, p)| !p.local)
    }

    fn from_flat(flat: &Flattened) -> CommNet {
        let mut places: Vec<Place> = Vec::new();
        let mut index: BTreeMap<ChannelId, usize> = BTreeMap::new();
        let locals: std::collections::BTreeSet<&ChannelId> = flat.locals.iter().collect();
        for ch in flat.channels() {
            let local = locals.contains(&ch);
            index.insert(ch.clone(), places.len());
            places.push(Place { id: ch, local });
        }
        let transitions = flat
            .atoms
            .iter()
            .map(|a| Transition {
                input: index[&a.source],
                outputs: a.targets.iter().map(|t| index[t]).collect(),
            })
            .collect();
        CommNet { places, transitions }
    }

    fn to_flat(&self) -> Flattened {
        Flattened {
            locals: self
                .places
                .iter()
                .filter(|p| p.local)
                .map(|p| p.id.clone())
                .collect(),
            atoms: self
                .transitions
                .iter()
                .map(|t| Atom {
                    source: self.places[t.input].id.clone(),
                    targets: t.outputs.iter().map(|&o| self.places[o].id.clone()).collect(),
                })
                .collect(),
        }
    }
}

/// Flattens a process (sugar included) to its communication net. One place
/// per distinct channel of the normalized term, one transition per
/// distributor occurrence; places are listed in sorted id order.
pub fn to_net(p: &Process) -> CommNet {
    CommNet::from_flat(&ast::canonical_flat(&ast::flatten(p)))
}

/// Like [`to_net`] but keeps the written channel names for local places
/// (freshened only on clashes) instead of the canonical `_k` scheme.
/// Rendering uses this so figures keep their labels.
pub fn to_net_named(p: &Process) -> CommNet {
    CommNet::from_flat(&ast::flatten(p).sorted())
}

/// Inverse of the correspondence: local places become an outer restriction
/// block around the parallel composition of one distributor per transition.
pub fn to_process(n: &CommNet) -> Process {
    n.to_flat().sorted().to_process()
}

/// Recognizes the loser/duplicator/duploser transition patterns attached
/// to each place. Used only for rendering glyphs.
pub fn unreliability_profile(n: &CommNet) -> BTreeMap<ChannelId, Marker> {
    let mut out = BTreeMap::new();
    for (i, place) in n.places.iter().enumerate() {
        let mut loser = false;
        let mut dup = false;
        for t in &n.transitions {
            if t.input != i {
                continue;
            }
            if t.outputs.is_empty() {
                loser = true;
            } else if t.outputs == [i, i] {
                dup = true;
            }
        }
        let marker = match (loser, dup) {
            (true, true) => Marker::Duploser,
            (true, false) => Marker::Loser,
            (false, true) => Marker::Duplicator,
            (false, false) => Marker::None,
        };
        out.insert(place.id.clone(), marker);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::normalize;
    use crate::dsl::builtin;

    fn c(name: &str) -> ChannelId {
        ChannelId::new(name)
    }

    #[test]
    fn bridge_net() {
        let n = to_net(&Process::Bridge(c("a"), c("b")));
        assert_eq!(n.places.len(), 2);
        assert!(n.places.iter().all(|p| !p.local));
        assert_eq!(n.transitions.len(), 1);
        let a = n.place_index(&c("a")).unwrap();
        let b = n.place_index(&c("b")).unwrap();
        assert_eq!(n.transitions[0], Transition { input: a, outputs: vec![b] });
    }

    #[test]
    fn builtin_counts() {
        let d = to_net(&builtin("D").unwrap());
        assert_eq!(d.places.len(), 9);
        assert_eq!(d.places.iter().filter(|p| p.local).count(), 1);
        assert_eq!(d.transitions.len(), 10);
        assert_eq!(d.transitions.iter().filter(|t| t.outputs.len() == 1).count(), 8);
        assert_eq!(d.transitions.iter().filter(|t| t.outputs.is_empty()).count(), 1);
        assert_eq!(
            d.transitions
                .iter()
                .filter(|t| t.outputs.len() == 2 && t.outputs[0] == t.input)
                .count(),
            1
        );

        let m = to_net(&builtin("M").unwrap());
        assert_eq!(m.places.len(), 13);
        assert_eq!(m.places.iter().filter(|p| !p.local).count(), 8);
        assert_eq!(m.transitions.len(), 19);
    }

    #[test]
    fn roundtrip_is_normalize() {
        for src in ["a -> b", "new m in { *m | a -> m | m -> b }", "0", "a => [a, b, a]"] {
            let p = crate::dsl::parse_process(src).unwrap();
            assert_eq!(to_process(&to_net(&p)), normalize(&p));
        }
        let empty = to_net(&Process::Stop);
        assert_eq!(to_process(&empty), Process::Stop);
    }

    #[test]
    fn duplicate_transitions_are_kept() {
        let p = crate::dsl::parse_process("a -> b | a -> b").unwrap();
        assert_eq!(to_net(&p).transitions.len(), 2);
    }

    #[test]
    fn profiles() {
        let n = to_net(&Process::Duploser(c("a")));
        assert_eq!(unreliability_profile(&n)[&c("a")], Marker::Duploser);
        let n = to_net(&Process::Bridge(c("a"), c("b")));
        let prof = unreliability_profile(&n);
        assert_eq!(prof[&c("a")], Marker::None);
        assert_eq!(prof[&c("b")], Marker::None);
        let m = to_net(&builtin("M").unwrap());
        for (ch, marker) in unreliability_profile(&m) {
            if m.places[m.place_index(&ch).unwrap()].local {
                assert_eq!(marker, Marker::Duploser, "{ch}");
            } else {
                assert_eq!(marker, Marker::None, "{ch}");
            }
        }
    }
}
