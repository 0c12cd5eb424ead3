//! Renders communication nets to DOT and PNML. Output is deterministic
//! (places in sorted id order, transitions in net order) so renderings can
//! be pinned as golden files; layout is left to the consumer.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::net::{CommNet, Marker, unreliability_profile};

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    /// Fold loser/duplicator/duploser transition groups into a ?/+/*
    /// glyph inside the place node instead of drawing them explicitly.
    pub sugar_glyphs: bool,
    /// Annotate places with their (initially empty) token count.
    pub include_marking: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { sugar_glyphs: true, include_marking: false }
    }
}

fn glyph(marker: Marker) -> Option<&'static str> {
    match marker {
        Marker::None => None,
        Marker::Loser => Some("?"),
        Marker::Duplicator => Some("+"),
        Marker::Duploser => Some("*"),
    }
}

/// Transition instances hidden by a glyph: one loser and/or one duplicator
/// per marked place. Extra copies stay visible.
fn folded_transitions(net: &CommNet) -> Vec<bool> {
    let profile = unreliability_profile(net);
    let mut skip = vec![false; net.transitions.len()];
    for (i, place) in net.places.iter().enumerate() {
        let marker = profile[&place.id];
        let (fold_loser, fold_dup) = match marker {
            Marker::None => (false, false),
            Marker::Loser => (true, false),
            Marker::Duplicator => (false, true),
            Marker::Duploser => (true, true),
        };
        let mut find = |pred: &dyn Fn(&[usize]) -> bool| {
            if let Some(j) = net
                .transitions
                .iter()
                .position(|t| t.input == i && pred(&t.outputs))
            {
                skip[j] = true;
            }
        };
        if fold_loser {
            find(&|outputs| outputs.is_empty());
        }
        if fold_dup {
            find(&|outputs| outputs == [i, i]);
        }
    }
    skip
}

pub fn to_dot(net: &CommNet, opts: &RenderOptions) -> String {
    let mut out = String::from("digraph commnet {\n  rankdir=LR;\n");
    let profile = unreliability_profile(net);
    let skip = if opts.sugar_glyphs {
        folded_transitions(net)
    } else {
        vec![false; net.transitions.len()]
    };
    for place in &net.places {
        let mut label = place.id.to_string();
        if opts.sugar_glyphs {
            if let Some(g) = glyph(profile[&place.id]) {
                label.push(' ');
                label.push_str(g);
            }
        }
        if opts.include_marking {
            label.push_str(" [0]");
        }
        let _ = write!(out, "  \"{}\" [shape=circle, label=\"{label}\"", place.id);
        if place.local {
            out.push_str(", style=dashed");
        }
        out.push_str("];\n");
    }
    for i in 0..net.transitions.len() {
        if skip[i] {
            continue;
        }
        let _ = writeln!(out, "  t{i} [shape=box, style=filled, label=\"\"];");
    }
    for (i, t) in net.transitions.iter().enumerate() {
        if skip[i] {
            continue;
        }
        let _ = writeln!(out, "  \"{}\" -> t{i};", net.places[t.input].id);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &o in &t.outputs {
            *counts.entry(o).or_insert(0) += 1;
        }
        for (o, count) in counts {
            if count > 1 {
                let _ = writeln!(
                    out,
                    "  t{i} -> \"{}\" [label=\"{count}\"];",
                    net.places[o].id
                );
            } else {
                let _ = writeln!(out, "  t{i} -> \"{}\";", net.places[o].id);
            }
        }
    }
    out.push_str("}\n");
    out
}

/// Place/transition PNML, one page. Output arc weights carry the output
/// multiplicities; local places get a toolspecific annotation.
pub fn to_pnml(net: &CommNet) -> String {
    let mut out = String::from(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <pnml xmlns=\"http://www.pnml.org/version-2009/grammar/pnml\">\n\
         \x20 <net id=\"net0\" type=\"http://www.pnml.org/version-2009/grammar/ptnet\">\n\
         \x20   <page id=\"page0\">\n",
    );
    for place in &net.places {
        let _ = write!(
            out,
            "      <place id=\"p_{0}\">\n        <name><text>{0}</text></name>\n",
            place.id
        );
        if place.local {
            out.push_str(
                "        <toolspecific tool=\"commnet\" version=\"1\"><local/></toolspecific>\n",
            );
        }
        out.push_str("      </place>\n");
    }
    for (i, _) in net.transitions.iter().enumerate() {
        let _ = writeln!(out, "      <transition id=\"t{i}\"/>");
    }
    let mut arc = 0usize;
    for (i, t) in net.transitions.iter().enumerate() {
        let _ = writeln!(
            out,
            "      <arc id=\"a{arc}\" source=\"p_{}\" target=\"t{i}\"/>",
            net.places[t.input].id
        );
        arc += 1;
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &o in &t.outputs {
            *counts.entry(o).or_insert(0) += 1;
        }
        for (o, count) in counts {
            let _ = write!(
                out,
                "      <arc id=\"a{arc}\" source=\"t{i}\" target=\"p_{}\"",
                net.places[o].id
            );
            arc += 1;
            if count > 1 {
                let _ = write!(
                    out,
                    ">\n        <inscription><text>{count}</text></inscription>\n      </arc>\n"
                );
            } else {
                out.push_str("/>\n");
            }
        }
    }
    out.push_str("    </page>\n  </net>\n</pnml>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{ChannelId, Process};
    use crate::dsl::builtin;
    use crate::net::{to_net, to_net_named};

    #[test]
    fn empty_net_is_a_valid_digraph() {
        let net = to_net(&Process::Stop);
        let dot = to_dot(&net, &RenderOptions::default());
        assert_eq!(dot, "digraph commnet {\n  rankdir=LR;\n}\n");
    }

    #[test]
    fn bridge_pnml_counts() {
        let net = to_net(&Process::Bridge(ChannelId::new("a"), ChannelId::new("b")));
        let pnml = to_pnml(&net);
        assert_eq!(pnml.matches("<place ").count(), 2);
        assert_eq!(pnml.matches("<transition ").count(), 1);
        assert_eq!(pnml.matches("<arc ").count(), 2);
    }

    #[test]
    fn duploser_rendering_modes() {
        let net = to_net(&Process::Duploser(ChannelId::new("a")));
        let explicit = to_dot(
            &net,
            &RenderOptions { sugar_glyphs: false, include_marking: false },
        );
        assert_eq!(explicit.matches("shape=box").count(), 2);
        let folded = to_dot(&net, &RenderOptions::default());
        assert_eq!(folded.matches("shape=box").count(), 0);
        assert!(folded.contains("label=\"a *\""));
    }

    #[test]
    fn duplicate_losers_fold_only_once() {
        let p = crate::dsl::parse_process("?a | ?a").unwrap();
        let dot = to_dot(&to_net(&p), &RenderOptions::default());
        assert_eq!(dot.matches("shape=box").count(), 1);
        assert!(dot.contains("label=\"a ?\""));
    }

    #[test]
    fn direct_broadcast_dot_golden() {
        let net = to_net_named(&builtin("D").unwrap());
        let dot = to_dot(&net, &RenderOptions::default());
        assert_eq!(dot, include_str!("../tests_data/d.dot"));
        // Regenerating must be byte-identical.
        assert_eq!(dot, to_dot(&net, &RenderOptions::default()));
    }

    #[test]
    fn multiplicity_labels() {
        let p = crate::dsl::parse_process("a => [b, b, c]").unwrap();
        let dot = to_dot(&to_net(&p), &RenderOptions::default());
        assert!(dot.contains("[label=\"2\"]"), "{dot}");
        let pnml = to_pnml(&to_net(&p));
        assert!(pnml.contains("<inscription><text>2</text></inscription>"), "{pnml}");
        // Arcs: one input, one weighted output, one plain output.
        assert_eq!(pnml.matches("<arc ").count(), 3);
    }

    #[test]
    fn pnml_counts_match_net() {
        let m = to_net_named(&builtin("M").unwrap());
        let pnml = to_pnml(&m);
        assert_eq!(pnml.matches("<place ").count(), 13);
        assert_eq!(pnml.matches("<transition ").count(), 19);
        assert_eq!(pnml.matches("<toolspecific ").count(), 5);
    }
}
