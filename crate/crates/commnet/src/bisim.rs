//! Weak-bisimilarity checking with counterexample extraction, and the
//! "up to loss" wrapper.
//!
//! The checker saturates each transition system (tau-cycle states are
//! merged first, then tau-closure reach sets are computed) and runs
//! partition refinement over the disjoint union. An `Equivalent` verdict
//! carries the partition, which `audit_witness` re-checks independently;
//! an `Inequivalent` verdict carries a minimal-depth attacker strategy,
//! which `audit_counterexample` replays against the defender's full weak
//! move set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::ast::{free_channels, ChannelId, Process};
use crate::net::to_net;
use crate::semantics::{build_lts, AbstractionParams, Config, ExploreError, Label, Lts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Labels shared between the two compared systems, keyed by channel name.
/// The derived order (inputs, then outputs, then tau, channels
/// alphabetical) is the tie-break order for counterexample moves.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GLabel {
    In(ChannelId, u16),
    Out(ChannelId, u16),
    Tau,
}

impl std::fmt::Display for GLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GLabel::In(ch, 0) => write!(f, "in({ch})"),
            GLabel::In(ch, c) => write!(f, "in({ch}#{c})"),
            GLabel::Out(ch, 0) => write!(f, "out({ch})"),
            GLabel::Out(ch, c) => write!(f, "out({ch}#{c})"),
            GLabel::Tau => f.write_str("tau"),
        }
    }
}

/// One attacker move with the defender's full weak reply set underneath.
/// Empty `replies` means the defender is stuck.
#[derive(Clone, Debug)]
pub struct StrategyNode {
    pub side: Side,
    pub label: GLabel,
    /// Quotient state of the moving side after the move.
    pub successor: usize,
    /// One subtree per defender weak reply. Subtrees are shared (the
    /// strategy is positional), so the unfolded tree can be much larger
    /// than the node count.
    pub replies: Vec<(usize, std::rc::Rc<StrategyNode>)>,
}

#[derive(Clone, Debug)]
pub struct Counterexample {
    pub root: StrategyNode,
}

impl Counterexample {
    /// All labels used anywhere in the strategy tree. Visits each shared
    /// node once, keyed by address.
    pub fn labels(&self) -> BTreeSet<GLabel> {
        fn walk(
            node: &StrategyNode,
            seen: &mut std::collections::HashSet<*const StrategyNode>,
            out: &mut BTreeSet<GLabel>,
        ) {
            if !seen.insert(node as *const StrategyNode) {
                return;
            }
            out.insert(node.label.clone());
            for (_, child) in &node.replies {
                walk(child, seen, out);
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.root, &mut std::collections::HashSet::new(), &mut out);
        out
    }

    /// Depth of the unfolded strategy tree; shared nodes are measured once.
    pub fn depth(&self) -> usize {
        fn walk(
            node: &StrategyNode,
            memo: &mut HashMap<*const StrategyNode, usize>,
        ) -> usize {
            let key = node as *const StrategyNode;
            if let Some(&d) = memo.get(&key) {
                return d;
            }
            let d = 1 + node
                .replies
                .iter()
                .map(|(_, c)| walk(c, memo))
                .max()
                .unwrap_or(0);
            memo.insert(key, d);
            d
        }
        walk(&self.root, &mut HashMap::new())
    }
}

/// Blocks of the joint partition; state ids are quotient states of the
/// respective side.
#[derive(Clone, Debug)]
pub struct Partition {
    pub blocks_left: Vec<usize>,
    pub blocks_right: Vec<usize>,
    pub num_blocks: usize,
}

#[derive(Clone, Debug)]
pub enum BisimResult {
    Equivalent(Partition),
    Inequivalent(Counterexample),
}

impl BisimResult {
    pub fn is_equivalent(&self) -> bool {
        matches!(self, BisimResult::Equivalent(_))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BisimError {
    #[error("the compared systems must use identical abstraction parameters (budget {0} vs {1})")]
    BudgetMismatch(u32, u32),
    #[error("channel {0} is not free in the process")]
    NotFree(ChannelId),
    #[error(transparent)]
    Explore(#[from] ExploreError),
}

/// Saturated view of one side: tau-cycle quotient, strong quotient edges,
/// tau-closure reach sets and materialized weak visible edges.
struct Analysis {
    lts: Lts,
    scc_of: Vec<usize>,
    nq: usize,
    /// Least original configuration per quotient state; used for digests.
    repr: Vec<usize>,
    /// Quotient strong edges (tau self-loops dropped), labels interned.
    strong: Vec<Vec<(usize, usize)>>,
    /// Reflexive-transitive tau closure over quotient states.
    reach: Vec<Vec<usize>>,
    /// Per quotient state: (label, sorted weak targets) for visible labels.
    weak_vis: Vec<Vec<(usize, Vec<usize>)>>,
}

fn to_glabel(label: Label, lts: &Lts) -> GLabel {
    match label {
        Label::Tau => GLabel::Tau,
        Label::EnvIn(p, c) => GLabel::In(lts.net.places[p].id.clone(), c),
        Label::EnvOut(p, c) => GLabel::Out(lts.net.places[p].id.clone(), c),
    }
}

/// Iterative Tarjan over the tau edges.
fn tau_sccs(lts: &Lts) -> (Vec<usize>, usize) {
    let n = lts.states.len();
    let mut index_of = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut scc_of = vec![usize::MAX; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut next_index = 0usize;
    let mut next_scc = 0usize;

    #[derive(Clone, Copy)]
    struct Frame {
        v: usize,
        edge: usize,
    }

    for root in 0..n {
        if index_of[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<Frame> = vec![Frame { v: root, edge: 0 }];
        index_of[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(frame) = call.last_mut() {
            let v = frame.v;
            let mut advanced = false;
            while frame.edge < lts.edges[v].len() {
                let (label, w) = lts.edges[v][frame.edge];
                frame.edge += 1;
                if label != Label::Tau {
                    continue;
                }
                if index_of[w] == usize::MAX {
                    index_of[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push(Frame { v: w, edge: 0 });
                    advanced = true;
                    break;
                } else if on_stack[w] {
                    low[v] = low[v].min(index_of[w]);
                }
            }
            if advanced {
                continue;
            }
            if low[v] == index_of[v] {
                loop {
                    let w = stack.pop().unwrap();
                    on_stack[w] = false;
                    scc_of[w] = next_scc;
                    if w == v {
                        break;
                    }
                }
                next_scc += 1;
            }
            call.pop();
            if let Some(parent) = call.last() {
                let p = parent.v;
                low[p] = low[p].min(low[v]);
            }
        }
    }
    (scc_of, next_scc)
}

struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Bits {
        Bits(vec![0; n.div_ceil(64)])
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }

    fn union_with(&mut self, other: &Bits) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }

    fn is_subset(&self, other: &Bits) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a & !b == 0)
    }

    fn ones(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|&i| self.get(i)).collect()
    }
}

impl Analysis {
    fn build(lts: Lts, intern: &mut BTreeMap<GLabel, usize>) -> Analysis {
        let (scc_of, nq) = tau_sccs(&lts);

        let mut repr = vec![usize::MAX; nq];
        for s in 0..lts.states.len() {
            let q = scc_of[s];
            if repr[q] == usize::MAX || lts.states[s] < lts.states[repr[q]] {
                repr[q] = s;
            }
        }

        let mut strong: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nq];
        for s in 0..lts.states.len() {
            for &(label, t) in &lts.edges[s] {
                let (qs, qt) = (scc_of[s], scc_of[t]);
                if label == Label::Tau && qs == qt {
                    continue;
                }
                let g = to_glabel(label, &lts);
                let next = intern.len();
                let id = *intern.entry(g).or_insert(next);
                strong[qs].push((id, qt));
            }
        }
        for edges in &mut strong {
            edges.sort_unstable();
            edges.dedup();
        }

        // Tau closure over the quotient (a DAG): process in reverse
        // topological order by repeated passes.
        let mut reach_bits: Vec<Bits> = (0..nq)
            .map(|q| {
                let mut b = Bits::new(nq);
                b.set(q);
                b
            })
            .collect();
        // Kahn-style ordering over quotient tau edges.
        let mut order: Vec<usize> = Vec::with_capacity(nq);
        {
            let mut indeg = vec![0usize; nq];
            let mut tau_succ: Vec<Vec<usize>> = vec![Vec::new(); nq];
            for (q, edges) in strong.iter().enumerate() {
                for &(_, qt) in edges.iter().filter(|&&(l, _)| is_tau_id(l, intern)) {
                    tau_succ[q].push(qt);
                    indeg[qt] += 1;
                }
            }
            let mut queue: Vec<usize> = (0..nq).filter(|&q| indeg[q] == 0).collect();
            while let Some(q) = queue.pop() {
                order.push(q);
                for &t in &tau_succ[q] {
                    indeg[t] -= 1;
                    if indeg[t] == 0 {
                        queue.push(t);
                    }
                }
            }
            debug_assert_eq!(order.len(), nq, "quotient tau graph must be acyclic");
        }
        for &q in order.iter().rev() {
            let succ: Vec<usize> = strong[q]
                .iter()
                .filter(|&&(l, _)| is_tau_id(l, intern))
                .map(|&(_, t)| t)
                .collect();
            for t in succ {
                let (a, b) = if q < t {
                    let (lo, hi) = reach_bits.split_at_mut(t);
                    (&mut lo[q], &hi[0])
                } else {
                    let (lo, hi) = reach_bits.split_at_mut(q);
                    (&mut hi[0], &lo[t])
                };
                a.union_with(b);
            }
        }
        let reach: Vec<Vec<usize>> = reach_bits.iter().map(|b| b.ones(nq)).collect();

        // Weak visible edges.
        let mut weak_vis: Vec<Vec<(usize, Vec<usize>)>> = Vec::with_capacity(nq);
        for q in 0..nq {
            let mut acc: BTreeMap<usize, Bits> = BTreeMap::new();
            for &u in &reach[q] {
                for &(l, v) in &strong[u] {
                    if is_tau_id(l, intern) {
                        continue;
                    }
                    acc.entry(l)
                        .or_insert_with(|| Bits::new(nq))
                        .union_with(&reach_bits[v]);
                }
            }
            weak_vis.push(acc.into_iter().map(|(l, bits)| (l, bits.ones(nq))).collect());
        }

        Analysis {
            lts,
            scc_of,
            nq,
            repr,
            strong,
            reach,
            weak_vis,
        }
    }

    fn initial_q(&self) -> usize {
        self.scc_of[self.lts.initial()]
    }

    fn weak_targets(&self, q: usize, label: usize, tau_id: usize) -> &[usize] {
        if label == tau_id {
            &self.reach[q]
        } else {
            self.weak_vis[q]
                .iter()
                .find(|(l, _)| *l == label)
                .map(|(_, ts)| ts.as_slice())
                .unwrap_or(&[])
        }
    }

    /// Human-readable digest of the representative marking.
    fn digest(&self, q: usize) -> String {
        let config = &self.lts.states[self.repr[q]];
        config_digest(config, &self.lts)
    }
}

fn config_digest(config: &Config, lts: &Lts) -> String {
    let colors = lts.params.colors as usize;
    let mut parts = Vec::new();
    for (i, count) in config.counts.iter().enumerate() {
        if *count == crate::semantics::Count::Fin(0) {
            continue;
        }
        let place = &lts.net.places[i / colors].id;
        if colors > 1 {
            parts.push(format!("{place}#{}:{count}", i % colors));
        } else {
            parts.push(format!("{place}:{count}"));
        }
    }
    format!("{{{}}}/{}", parts.join(","), config.budget_left)
}

fn is_tau_id(id: usize, intern: &BTreeMap<GLabel, usize>) -> bool {
    intern.get(&GLabel::Tau) == Some(&id)
}

/// Outcome of a check, keeping the saturated systems around so that the
/// verdict can be audited and serialized.
pub struct BisimOutcome {
    left: Analysis,
    right: Analysis,
    labels: Vec<GLabel>,
    tau_id: usize,
    pub result: BisimResult,
}

impl BisimOutcome {
    pub fn is_equivalent(&self) -> bool {
        self.result.is_equivalent()
    }

    pub fn state_counts(&self) -> (usize, usize) {
        (self.left.lts.states.len(), self.right.lts.states.len())
    }

    /// States after merging mutually tau-reachable configurations — the
    /// state count the refinement loop actually works on.
    pub fn quotient_counts(&self) -> (usize, usize) {
        (self.left.nq, self.right.nq)
    }

    pub fn counterexample(&self) -> Option<&Counterexample> {
        match &self.result {
            BisimResult::Inequivalent(cex) => Some(cex),
            _ => None,
        }
    }

    /// Independent validity check of an `Equivalent` verdict: the returned
    /// partition must be a weak bisimulation (every strong step of any
    /// state is matched by a weak step of every same-block state into the
    /// same target block).
    pub fn audit_witness(&self) -> bool {
        let partition = match &self.result {
            BisimResult::Equivalent(p) => p,
            _ => return false,
        };
        let sides = [
            (&self.left, &partition.blocks_left),
            (&self.right, &partition.blocks_right),
        ];
        // Obligations: block -> label -> target blocks required by some
        // member's strong edges.
        let mut need: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for (analysis, blocks) in sides {
            for q in 0..analysis.nq {
                for &(label, t) in &analysis.strong[q] {
                    let target_block = blocks[t];
                    need.entry((blocks[q], label)).or_default().insert(target_block);
                }
            }
        }
        for (analysis, blocks) in sides {
            for q in 0..analysis.nq {
                for ((block, label), targets) in &need {
                    if *block != blocks[q] {
                        continue;
                    }
                    let have: BTreeSet<usize> = analysis
                        .weak_targets(q, *label, self.tau_id)
                        .iter()
                        .map(|&t| blocks[t])
                        .collect();
                    if !targets.is_subset(&have) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Replays an `Inequivalent` strategy against the defender's full
    /// weak move set; true iff every branch ends with a stuck defender.
    pub fn audit_counterexample(&self) -> bool {
        let cex = match &self.result {
            BisimResult::Inequivalent(c) => c,
            _ => return false,
        };
        let mut seen = std::collections::HashSet::new();
        self.replay_node(&cex.root, self.left.initial_q(), self.right.initial_q(), &mut seen)
    }

    fn replay_node(
        &self,
        node: &StrategyNode,
        qa: usize,
        qb: usize,
        seen: &mut std::collections::HashSet<(usize, usize)>,
    ) -> bool {
        // Strategy construction is deterministic per game position, so a
        // position already verified carries an identical subtree.
        if !seen.insert((qa, qb)) {
            return true;
        }
        let (attacker, defender, att_state, def_state) = match node.side {
            Side::Left => (&self.left, &self.right, qa, qb),
            Side::Right => (&self.right, &self.left, qb, qa),
        };
        let label_id = match self.labels.iter().position(|l| *l == node.label) {
            Some(id) => id,
            None => return false,
        };
        if !attacker.strong[att_state].contains(&(label_id, node.successor)) {
            return false;
        }
        let replies: BTreeSet<usize> = defender
            .weak_targets(def_state, label_id, self.tau_id)
            .iter()
            .copied()
            .collect();
        let covered: BTreeSet<usize> = node.replies.iter().map(|(r, _)| *r).collect();
        if replies != covered {
            return false;
        }
        for (reply, child) in &node.replies {
            let (next_a, next_b) = match node.side {
                Side::Left => (node.successor, *reply),
                Side::Right => (*reply, node.successor),
            };
            if !self.replay_node(child, next_a, next_b, seen) {
                return false;
            }
        }
        true
    }

    /// Indented text form: one move per line (side, label, marking digest
    /// of the moving side's successor), defender replies nested below.
    pub fn counterexample_text(&self) -> Option<String> {
        self.counterexample_text_capped(usize::MAX)
    }

    /// Like [`Self::counterexample_text`] but stops after `max_lines`
    /// lines; wide reply fan-outs can make the full tree enormous.
    pub fn counterexample_text_capped(&self, max_lines: usize) -> Option<String> {
        let cex = self.counterexample()?;
        let mut out = String::new();
        let mut budget = max_lines;
        self.write_node(&cex.root, 0, &mut out, &mut budget);
        if budget == 0 {
            out.push_str("... (output truncated)\n");
        }
        Some(out)
    }

    fn write_node(&self, node: &StrategyNode, depth: usize, out: &mut String, budget: &mut usize) {
        if *budget == 0 {
            return;
        }
        *budget -= 1;
        let attacker = match node.side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        };
        let defender_side = node.side.other();
        let defender = match defender_side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        };
        let pad = "  ".repeat(depth);
        let _ = writeln!(
            out,
            "{pad}{} {} {}",
            node.side.name(),
            node.label,
            attacker.digest(node.successor)
        );
        if node.replies.is_empty() {
            if *budget > 0 {
                *budget -= 1;
                let _ = writeln!(out, "{pad}  {} stuck", defender_side.name());
            }
            return;
        }
        for (reply, child) in &node.replies {
            if *budget == 0 {
                return;
            }
            *budget -= 1;
            let _ = writeln!(
                out,
                "{pad}  {} {}",
                defender_side.name(),
                defender.digest(*reply)
            );
            self.write_node(child, depth + 2, out, budget);
        }
    }
}

/// Decides weak bisimilarity of two finite transition systems.
pub fn weak_bisim(a: &Lts, b: &Lts) -> Result<BisimOutcome, BisimError> {
    if a.params.env_budget != b.params.env_budget {
        return Err(BisimError::BudgetMismatch(
            a.params.env_budget,
            b.params.env_budget,
        ));
    }
    let mut intern: BTreeMap<GLabel, usize> = BTreeMap::new();
    let left = Analysis::build(a.clone(), &mut intern);
    let right = Analysis::build(b.clone(), &mut intern);
    let next = intern.len();
    let tau_id = *intern.entry(GLabel::Tau).or_insert(next);
    let mut labels: Vec<GLabel> = vec![GLabel::Tau; intern.len()];
    for (label, id) in &intern {
        labels[*id] = label.clone();
    }

    let (blocks_left, blocks_right, num_blocks) = refine(&left, &right, tau_id);

    let result = if blocks_left[left.initial_q()] == blocks_right[right.initial_q()] {
        BisimResult::Equivalent(Partition {
            blocks_left,
            blocks_right,
            num_blocks,
        })
    } else {
        let cex = extract_counterexample(
            &left,
            &right,
            &blocks_left,
            &blocks_right,
            tau_id,
            &labels,
        );
        BisimResult::Inequivalent(cex)
    };
    Ok(BisimOutcome {
        left,
        right,
        labels,
        tau_id,
        result,
    })
}

/// Partition refinement over the disjoint union of the weak systems.
fn refine(left: &Analysis, right: &Analysis, tau_id: usize) -> (Vec<usize>, Vec<usize>, usize) {
    let na = left.nq;
    let n = na + right.nq;
    let mut blocks = vec![0usize; n];
    let mut num_blocks = 1usize;
    loop {
        let mut table: HashMap<(usize, Vec<(usize, usize)>), usize> = HashMap::new();
        let mut next = vec![0usize; n];
        for u in 0..n {
            let (analysis, q) = if u < na {
                (left, u)
            } else {
                (right, u - na)
            };
            let block_of = |t: usize| {
                if u < na {
                    blocks[t]
                } else {
                    blocks[na + t]
                }
            };
            let mut sig: Vec<(usize, usize)> = Vec::new();
            for &t in &analysis.reach[q] {
                sig.push((tau_id, block_of(t)));
            }
            for (label, targets) in &analysis.weak_vis[q] {
                for &t in targets {
                    sig.push((*label, block_of(t)));
                }
            }
            sig.sort_unstable();
            sig.dedup();
            let id = table.len();
            next[u] = *table.entry((blocks[u], sig)).or_insert(id);
        }
        let new_count = table.len();
        if new_count == num_blocks {
            break;
        }
        blocks = next;
        num_blocks = new_count;
    }
    let blocks_right = blocks.split_off(na);
    (blocks, blocks_right, num_blocks)
}

#[derive(Clone, Copy)]
struct Move {
    side: Side,
    label: usize,
    successor: usize,
}

/// The game state of counterexample extraction. Pairs of quotient states
/// are addressed as `qa * nqr + qb`; `rank[pair]` is the attacker's
/// winning depth once assigned.
struct Extractor<'a> {
    left: &'a Analysis,
    right: &'a Analysis,
    blocks_left: &'a [usize],
    blocks_right: &'a [usize],
    tau_id: usize,
    labels: &'a [GLabel],
    nqr: usize,
    /// Per (defender state, label): partition blocks the defender's weak
    /// replies land in. A strong attacker move is usable iff its successor's
    /// block is absent here, i.e. every reply stays distinguishable.
    blk_left: Vec<Bits>,
    blk_right: Vec<Bits>,
    /// Per (defender state, label): the weak reply set itself, for O(words)
    /// "all replies already ranked" checks during the rank fixpoint.
    tgt_left: Vec<Bits>,
    tgt_right: Vec<Bits>,
    rank: Vec<Option<u32>>,
}

impl<'a> Extractor<'a> {
    fn pair(&self, qa: usize, qb: usize) -> usize {
        qa * self.nqr + qb
    }

    fn distinct(&self, qa: usize, qb: usize) -> bool {
        self.blocks_left[qa] != self.blocks_right[qb]
    }

    /// Valid attacker moves from a pair: strong edges (left side first,
    /// then right) whose defender weak replies all stay distinguishable.
    fn valid_moves(&self, qa: usize, qb: usize) -> Vec<Move> {
        let nl = self.labels.len();
        let mut list = Vec::new();
        for &(label, successor) in &self.left.strong[qa] {
            if !self.blk_right[qb * nl + label].get(self.blocks_left[successor]) {
                list.push(Move { side: Side::Left, label, successor });
            }
        }
        for &(label, successor) in &self.right.strong[qb] {
            if !self.blk_left[qa * nl + label].get(self.blocks_right[successor]) {
                list.push(Move { side: Side::Right, label, successor });
            }
        }
        list
    }

    /// The defender's weak reply set for a move from `(qa, qb)`.
    fn replies(&self, qa: usize, qb: usize, mv: &Move) -> &[usize] {
        match mv.side {
            Side::Left => self.right.weak_targets(qb, mv.label, self.tau_id),
            Side::Right => self.left.weak_targets(qa, mv.label, self.tau_id),
        }
    }

    fn child(&self, mv: &Move, reply: usize) -> usize {
        match mv.side {
            Side::Left => self.pair(mv.successor, reply),
            Side::Right => self.pair(reply, mv.successor),
        }
    }

    fn build(
        &self,
        qa: usize,
        qb: usize,
        memo: &mut HashMap<(usize, usize), std::rc::Rc<StrategyNode>>,
    ) -> std::rc::Rc<StrategyNode> {
        if let Some(node) = memo.get(&(qa, qb)) {
            return node.clone();
        }
        let budget = self.rank[self.pair(qa, qb)].expect("strategy stays in ranked pairs");
        let list = self.valid_moves(qa, qb);
        let mut best: Option<&Move> = None;
        for mv in &list {
            let complete = self.replies(qa, qb, mv).iter().all(|&r| {
                self.rank[self.child(mv, r)].map(|k| k < budget).unwrap_or(false)
            });
            if !complete {
                continue;
            }
            let key = |m: &Move| {
                let analysis = match m.side {
                    Side::Left => self.left,
                    Side::Right => self.right,
                };
                (
                    &self.labels[m.label],
                    m.side,
                    &analysis.lts.states[analysis.repr[m.successor]],
                )
            };
            let better = match best {
                None => true,
                Some(cur) => key(mv) < key(cur),
            };
            if better {
                best = Some(mv);
            }
        }
        let mv = best.expect("ranked pair has a rank-consistent move");
        let replies = self
            .replies(qa, qb, mv)
            .iter()
            .map(|&r| {
                let (na, nb) = match mv.side {
                    Side::Left => (mv.successor, r),
                    Side::Right => (r, mv.successor),
                };
                (r, self.build(na, nb, memo))
            })
            .collect();
        let node = std::rc::Rc::new(StrategyNode {
            side: mv.side,
            label: self.labels[mv.label].clone(),
            successor: mv.successor,
            replies,
        });
        memo.insert((qa, qb), node.clone());
        node
    }
}

/// Solves the bisimulation game over all distinguishable pairs and extracts
/// a minimal-depth winning attacker strategy. Among equally deep moves the
/// tie-break is label order, then side, then the successor's marking.
fn extract_counterexample(
    left: &Analysis,
    right: &Analysis,
    blocks_left: &[usize],
    blocks_right: &[usize],
    tau_id: usize,
    labels: &[GLabel],
) -> Counterexample {
    let (nql, nqr) = (left.nq, right.nq);
    let nl = labels.len();
    let nb = 1 + blocks_left
        .iter()
        .chain(blocks_right)
        .copied()
        .max()
        .unwrap_or(0);
    let root = (left.initial_q(), right.initial_q());

    let reply_data = |a: &Analysis, blocks: &[usize]| {
        let mut tgt = Vec::with_capacity(a.nq * nl);
        let mut blk = Vec::with_capacity(a.nq * nl);
        for q in 0..a.nq {
            for l in 0..nl {
                let mut t = Bits::new(a.nq);
                let mut b = Bits::new(nb);
                for &r in a.weak_targets(q, l, tau_id) {
                    t.set(r);
                    b.set(blocks[r]);
                }
                tgt.push(t);
                blk.push(b);
            }
        }
        (tgt, blk)
    };
    let (tgt_left, blk_left) = reply_data(left, blocks_left);
    let (tgt_right, blk_right) = reply_data(right, blocks_right);

    let mut ex = Extractor {
        left,
        right,
        blocks_left,
        blocks_right,
        tau_id,
        labels,
        nqr,
        blk_left,
        blk_right,
        tgt_left,
        tgt_right,
        rank: vec![None; nql * nqr],
    };
    assert!(ex.distinct(root.0, root.1));

    // Backward ranking in strict rounds (so ranks are minimal and do not
    // depend on iteration order): round k assigns rank k to every pair
    // with a move whose defender replies are all already ranked. Row/column
    // bitsets make the "all ranked" test a subset check.
    let mut ranked_rows: Vec<Bits> = (0..nql).map(|_| Bits::new(nqr)).collect();
    let mut ranked_cols: Vec<Bits> = (0..nqr).map(|_| Bits::new(nql)).collect();
    loop {
        let mut round: Vec<(usize, usize)> = Vec::new();
        for qa in 0..nql {
            for qb in 0..nqr {
                if ex.rank[ex.pair(qa, qb)].is_some() || !ex.distinct(qa, qb) {
                    continue;
                }
                let winnable = ex.valid_moves(qa, qb).iter().any(|mv| match mv.side {
                    Side::Left => ex.tgt_right[qb * nl + mv.label]
                        .is_subset(&ranked_rows[mv.successor]),
                    Side::Right => ex.tgt_left[qa * nl + mv.label]
                        .is_subset(&ranked_cols[mv.successor]),
                });
                if winnable {
                    round.push((qa, qb));
                }
            }
        }
        if round.is_empty() {
            break;
        }
        for (qa, qb) in round {
            let mut best: Option<u32> = None;
            for mv in ex.valid_moves(qa, qb) {
                let mut worst = 0u32;
                let mut complete = true;
                for &r in ex.replies(qa, qb, &mv) {
                    match ex.rank[ex.child(&mv, r)] {
                        Some(k) => worst = worst.max(k),
                        None => {
                            complete = false;
                            break;
                        }
                    }
                }
                if complete {
                    best = Some(best.map_or(worst + 1, |b| b.min(worst + 1)));
                }
            }
            let best = best.expect("pair was marked winnable");
            let p = ex.pair(qa, qb);
            ex.rank[p] = Some(best);
            ranked_rows[qa].set(qb);
            ranked_cols[qb].set(qa);
        }
        if ex.rank[ex.pair(root.0, root.1)].is_some() {
            break;
        }
    }
    assert!(
        ex.rank[ex.pair(root.0, root.1)].is_some(),
        "initial states are in different blocks, so a winning strategy must exist"
    );

    let mut memo = HashMap::new();
    let root_node = ex.build(root.0, root.1, &mut memo);
    Counterexample {
        root: (*root_node).clone(),
    }
}

/// Composes `p` with losers on the given free channels, in the written
/// order: `?r1 | ... | ?rn | p`.
pub fn up_to_loss(p: &Process, spec: &LossSpec) -> Result<Process, BisimError> {
    let free = free_channels(p);
    for ch in &spec.channels {
        if !free.contains(ch) {
            return Err(BisimError::NotFree(ch.clone()));
        }
    }
    Ok(spec
        .channels
        .iter()
        .rev()
        .fold(p.clone(), |acc, ch| {
            Process::par(Process::Loser(ch.clone()), acc)
        }))
}

/// Channels made lossy on both sides of a comparison.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LossSpec {
    pub channels: Vec<ChannelId>,
}

impl LossSpec {
    pub fn new(channels: Vec<ChannelId>) -> Self {
        LossSpec { channels }
    }
}

/// Full pipeline: wrap both processes with losers, flatten to nets, build
/// the abstracted transition systems and decide weak bisimilarity.
pub fn check_up_to_loss(
    p: &Process,
    q: &Process,
    spec: &LossSpec,
    params: &AbstractionParams,
) -> Result<BisimOutcome, BisimError> {
    let left = build_lts(&to_net(&up_to_loss(p, spec)?), params)?;
    let right = build_lts(&to_net(&up_to_loss(q, spec)?), params)?;
    weak_bisim(&left, &right)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_process;

    fn check(a: &str, b: &str, params: &AbstractionParams) -> BisimOutcome {
        let pa = parse_process(a).unwrap();
        let pb = parse_process(b).unwrap();
        check_up_to_loss(&pa, &pb, &LossSpec::default(), params).unwrap()
    }

    #[test]
    fn reflexive() {
        for src in ["a -> b", "?a | +a", "new m in { *m | a -> m }"] {
            let outcome = check(src, src, &AbstractionParams::default());
            assert!(outcome.is_equivalent(), "{src}");
            assert!(outcome.audit_witness());
        }
    }

    #[test]
    fn bridge_chain_equivalent() {
        let outcome = check(
            "a -> b",
            "new c in { a -> c | c -> b }",
            &AbstractionParams::default(),
        );
        assert!(outcome.is_equivalent());
        assert!(outcome.audit_witness());
    }

    #[test]
    fn distributor_vs_split_bridges_inequivalent() {
        let outcome = check(
            "a => [b, c]",
            "a -> b | a -> c",
            &AbstractionParams::default(),
        );
        assert!(!outcome.is_equivalent());
        assert!(outcome.audit_counterexample());
        let text = outcome.counterexample_text().unwrap();
        assert!(text.contains("in(a)"), "{text}");
    }

    #[test]
    fn budget_mismatch_rejected() {
        let p = parse_process("a -> b").unwrap();
        let l1 = build_lts(&to_net(&p), &AbstractionParams::default()).unwrap();
        let l2 = build_lts(
            &to_net(&p),
            &AbstractionParams { env_budget: 2, ..AbstractionParams::default() },
        )
        .unwrap();
        assert!(weak_bisim(&l1, &l2).is_err());
    }

    #[test]
    fn up_to_loss_shape_and_errors() {
        let p = parse_process("a -> r").unwrap();
        let spec = LossSpec::new(vec![ChannelId::new("r")]);
        let wrapped = up_to_loss(&p, &spec).unwrap();
        assert_eq!(
            wrapped,
            Process::par(Process::Loser(ChannelId::new("r")), p.clone())
        );
        assert_eq!(up_to_loss(&p, &LossSpec::default()).unwrap(), p);
        let err = up_to_loss(&Process::Stop, &spec).unwrap_err();
        assert!(matches!(err, BisimError::NotFree(_)));
    }

    #[test]
    fn verdicts_are_symmetric() {
        let pairs = [
            ("a -> b", "new c in { a -> c | c -> b }"),
            ("a => [b, c]", "a -> b | a -> c"),
        ];
        for (a, b) in pairs {
            let fwd = check(a, b, &AbstractionParams::default()).is_equivalent();
            let bwd = check(b, a, &AbstractionParams::default()).is_equivalent();
            assert_eq!(fwd, bwd, "{a} vs {b}");
        }
    }

    #[test]
    fn congruence_spot_check() {
        // A known equivalent pair stays equivalent under parallel context
        // and restriction of a free channel.
        let p = "a -> b";
        let q = "new c in { a -> c | c -> b }";
        let ctx_par = |t: &str| format!("{t} | x -> y");
        let ctx_new = |t: &str| format!("new b in {{ {t} | b -> z }}");
        for ctx in [&ctx_par as &dyn Fn(&str) -> String, &ctx_new] {
            let outcome = check(&ctx(p), &ctx(q), &AbstractionParams::default());
            assert!(outcome.is_equivalent());
        }
    }

    #[test]
    fn colors_agree_on_small_cases() {
        for (a, b) in [
            ("a -> b", "new c in { a -> c | c -> b }"),
            ("a => [b, c]", "a -> b | a -> c"),
        ] {
            let one = check(a, b, &AbstractionParams::default()).is_equivalent();
            let two = check(
                a,
                b,
                &AbstractionParams { colors: 2, ..AbstractionParams::default() },
            )
            .is_equivalent();
            assert_eq!(one, two, "{a} vs {b}");
        }
    }
}
