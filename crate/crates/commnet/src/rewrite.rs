//! Schematic rewriting modulo the structural congruence: a small library
//! of equivalence-preserving rules, associative-commutative matching over
//! the flattened atom multiset, proof scripts, and replay with optional
//! per-step model checking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::ast::{
    flatten, fresh_channel, normalize, Atom, ChannelId, Flattened, Process,
};
use crate::bisim::{weak_bisim, BisimError, BisimOutcome};
use crate::net::to_net;
use crate::semantics::{build_lts, AbstractionParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn flip(self) -> Direction {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
        })
    }
}

/// Value bound to a metavariable. List values are kept sorted; list
/// metavariables stand for multisets, so the order carries no meaning.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BindVal {
    Chan(ChannelId),
    List(Vec<ChannelId>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Binding(pub BTreeMap<String, BindVal>);

impl Binding {
    pub fn chan(&self, var: &str) -> Option<&ChannelId> {
        match self.0.get(var) {
            Some(BindVal::Chan(c)) => Some(c),
            _ => None,
        }
    }

    pub fn list(&self, var: &str) -> Option<&[ChannelId]> {
        match self.0.get(var) {
            Some(BindVal::List(l)) => Some(l),
            _ => None,
        }
    }

    fn channels(&self) -> Vec<ChannelId> {
        let mut out = Vec::new();
        for val in self.0.values() {
            match val {
                BindVal::Chan(c) => out.push(c.clone()),
                BindVal::List(l) => out.extend(l.iter().cloned()),
            }
        }
        out
    }

    /// True if every assignment of `self` also appears in `other`.
    pub fn subsumed_by(&self, other: &Binding) -> bool {
        self.0.iter().all(|(k, v)| other.0.get(k) == Some(v))
    }
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match v {
                BindVal::Chan(c) => write!(f, "{k}={c}")?,
                BindVal::List(l) => {
                    write!(f, "{k}=[")?;
                    for (j, c) in l.iter().enumerate() {
                        if j > 0 {
                            f.write_str(", ")?;
                        }
                        write!(f, "{c}")?;
                    }
                    f.write_str("]")?;
                }
            }
        }
        f.write_str("}")
    }
}

/// A channel position in a pattern atom: a scalar metavariable or the
/// current element of the list variable the enclosing group ranges over.
#[derive(Clone, Debug, PartialEq, Eq)]
enum PV {
    Var(&'static str),
    Elem,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum PTargets {
    Fixed(Vec<PV>),
    /// The whole target list is a list metavariable (matched as a multiset).
    ListVar(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct PatAtom {
    source: PV,
    targets: PTargets,
}

/// A bundle of pattern atoms, optionally replicated over every element of
/// a list metavariable.
#[derive(Clone, Debug)]
struct Group {
    over: Option<&'static str>,
    atoms: Vec<PatAtom>,
}

#[derive(Clone, Debug)]
struct SidePattern {
    /// Metavariables restricted on this side. Matching such a side
    /// requires the bound channel to be local and used nowhere else;
    /// producing it introduces a fresh binder.
    binders: Vec<&'static str>,
    groups: Vec<Group>,
}

#[derive(Clone, Debug)]
pub struct RewriteRule {
    pub name: &'static str,
    lhs: SidePattern,
    rhs: SidePattern,
    /// All bound channels (scalars and list elements) pairwise distinct.
    distinct: bool,
    /// Minimum length of any list-metavariable binding.
    list_min: usize,
}

impl RewriteRule {
    fn sides(&self, direction: Direction) -> (&SidePattern, &SidePattern) {
        match direction {
            Direction::Forward => (&self.lhs, &self.rhs),
            Direction::Reverse => (&self.rhs, &self.lhs),
        }
    }

    fn scalar_vars(&self) -> BTreeSet<&'static str> {
        let mut out = BTreeSet::new();
        for side in [&self.lhs, &self.rhs] {
            for group in &side.groups {
                for atom in &group.atoms {
                    if let PV::Var(v) = atom.source {
                        out.insert(v);
                    }
                    if let PTargets::Fixed(ts) = &atom.targets {
                        for t in ts {
                            if let PV::Var(v) = t {
                                out.insert(v);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn list_vars(&self) -> BTreeSet<&'static str> {
        let mut out = BTreeSet::new();
        for side in [&self.lhs, &self.rhs] {
            for group in &side.groups {
                if let Some(v) = group.over {
                    out.insert(v);
                }
                for atom in &group.atoms {
                    if let PTargets::ListVar(v) = atom.targets {
                        out.insert(v);
                    }
                }
            }
        }
        out
    }
}

fn pv(name: &'static str) -> PV {
    PV::Var(name)
}

fn bridge(a: PV, b: PV) -> PatAtom {
    PatAtom { source: a, targets: PTargets::Fixed(vec![b]) }
}

fn loser(a: PV) -> PatAtom {
    PatAtom { source: a, targets: PTargets::Fixed(vec![]) }
}

fn duplicator(a: PV) -> PatAtom {
    let b = a.clone();
    PatAtom { source: a, targets: PTargets::Fixed(vec![b.clone(), b]) }
}

fn distributor(a: PV, list: &'static str) -> PatAtom {
    PatAtom { source: a, targets: PTargets::ListVar(list) }
}

fn side(binders: Vec<&'static str>, groups: Vec<Group>) -> SidePattern {
    SidePattern { binders, groups }
}

fn plain(atoms: Vec<PatAtom>) -> Group {
    Group { over: None, atoms }
}

fn each(list: &'static str, atoms: Vec<PatAtom>) -> Group {
    Group { over: Some(list), atoms }
}

/// The rule library: the five key equivalences plus the idempotency laws.
pub fn builtin_rules() -> Vec<RewriteRule> {
    vec![
        // +a | ?b1 | .. | ?bn | a => [b1..bn]   <=>   +a | ?b1 | .. | ?bn | a->b1 | .. | a->bn
        RewriteRule {
            name: "distributor-split",
            lhs: side(
                vec![],
                vec![
                    plain(vec![duplicator(pv("a")), distributor(pv("a"), "b")]),
                    each("b", vec![loser(PV::Elem)]),
                ],
            ),
            rhs: side(
                vec![],
                vec![
                    plain(vec![duplicator(pv("a"))]),
                    each("b", vec![loser(PV::Elem), bridge(pv("a"), PV::Elem)]),
                ],
            ),
            distinct: true,
            list_min: 1,
        },
        // a->b | b->c | a->c   <=>   a->b | b->c
        RewriteRule {
            name: "bridge-shortcut-redundancy",
            lhs: side(
                vec![],
                vec![plain(vec![
                    bridge(pv("a"), pv("b")),
                    bridge(pv("b"), pv("c")),
                    bridge(pv("a"), pv("c")),
                ])],
            ),
            rhs: side(
                vec![],
                vec![plain(vec![
                    bridge(pv("a"), pv("b")),
                    bridge(pv("b"), pv("c")),
                ])],
            ),
            distinct: true,
            list_min: 0,
        },
        // *c | a => [b1..bn] | (b1->c | c->b1 | ..)   <=>   *c | a->c | (b1->c | c->b1 | ..)
        RewriteRule {
            name: "distributor-target-fusion",
            lhs: side(
                vec![],
                vec![
                    plain(vec![
                        loser(pv("c")),
                        duplicator(pv("c")),
                        distributor(pv("a"), "b"),
                    ]),
                    each("b", vec![bridge(PV::Elem, pv("c")), bridge(pv("c"), PV::Elem)]),
                ],
            ),
            rhs: side(
                vec![],
                vec![
                    plain(vec![
                        loser(pv("c")),
                        duplicator(pv("c")),
                        bridge(pv("a"), pv("c")),
                    ]),
                    each("b", vec![bridge(PV::Elem, pv("c")), bridge(pv("c"), PV::Elem)]),
                ],
            ),
            distinct: true,
            list_min: 1,
        },
        // a1->a2 | a2->a1 | a1->b   <=>   a1->a2 | a2->a1 | a2->b
        RewriteRule {
            name: "bridge-source-switch",
            lhs: side(
                vec![],
                vec![plain(vec![
                    bridge(pv("a1"), pv("a2")),
                    bridge(pv("a2"), pv("a1")),
                    bridge(pv("a1"), pv("b")),
                ])],
            ),
            rhs: side(
                vec![],
                vec![plain(vec![
                    bridge(pv("a1"), pv("a2")),
                    bridge(pv("a2"), pv("a1")),
                    bridge(pv("a2"), pv("b")),
                ])],
            ),
            distinct: true,
            list_min: 0,
        },
        // new b in { *b | a->b | b->a }   <=>   *a
        RewriteRule {
            name: "duploss-detour-collapse",
            lhs: side(
                vec!["b"],
                vec![plain(vec![
                    loser(pv("b")),
                    duplicator(pv("b")),
                    bridge(pv("a"), pv("b")),
                    bridge(pv("b"), pv("a")),
                ])],
            ),
            rhs: side(
                vec![],
                vec![plain(vec![loser(pv("a")), duplicator(pv("a"))])],
            ),
            distinct: true,
            list_min: 0,
        },
        // ?a | ?a <=> ?a
        RewriteRule {
            name: "loser-idempotency",
            lhs: side(vec![], vec![plain(vec![loser(pv("a")), loser(pv("a"))])]),
            rhs: side(vec![], vec![plain(vec![loser(pv("a"))])]),
            distinct: false,
            list_min: 0,
        },
        // +a | +a <=> +a
        RewriteRule {
            name: "duplicator-idempotency",
            lhs: side(
                vec![],
                vec![plain(vec![duplicator(pv("a")), duplicator(pv("a"))])],
            ),
            rhs: side(vec![], vec![plain(vec![duplicator(pv("a"))])]),
            distinct: false,
            list_min: 0,
        },
        // *a | *a <=> *a
        RewriteRule {
            name: "duploser-idempotency",
            lhs: side(
                vec![],
                vec![plain(vec![
                    loser(pv("a")),
                    duplicator(pv("a")),
                    loser(pv("a")),
                    duplicator(pv("a")),
                ])],
            ),
            rhs: side(
                vec![],
                vec![plain(vec![loser(pv("a")), duplicator(pv("a"))])],
            ),
            distinct: false,
            list_min: 0,
        },
        // a=>t | a=>t <=> a=>t   (equal target multisets)
        RewriteRule {
            name: "distributor-idempotency",
            lhs: side(
                vec![],
                vec![plain(vec![
                    distributor(pv("a"), "t"),
                    distributor(pv("a"), "t"),
                ])],
            ),
            rhs: side(vec![], vec![plain(vec![distributor(pv("a"), "t")])]),
            distinct: false,
            list_min: 0,
        },
    ]
}

/// Distributor-split with the duplicator context dropped. Unsound: a lone
/// distributor races its token to one target, so splitting it changes
/// behavior. Exists so [`validate_rule`] has a known-bad rule to refute.
pub fn distributor_split_without_duplicator() -> RewriteRule {
    RewriteRule {
        name: "distributor-split-no-duplicator",
        lhs: side(
            vec![],
            vec![
                plain(vec![distributor(pv("a"), "b")]),
                each("b", vec![loser(PV::Elem)]),
            ],
        ),
        rhs: side(
            vec![],
            vec![each("b", vec![loser(PV::Elem), bridge(pv("a"), PV::Elem)])],
        ),
        distinct: true,
        list_min: 1,
    }
}

pub fn rule_by_name(name: &str) -> Option<RewriteRule> {
    builtin_rules().into_iter().find(|r| r.name == name)
}

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error("no such rule: {0}")]
    UnknownRule(String),
    #[error("unbound metavariable {var} for rule {rule}")]
    Unbound { rule: &'static str, var: String },
    #[error("binding violates the side conditions of {rule}: {why}")]
    SideCondition { rule: &'static str, why: String },
    #[error("pattern does not match: missing {missing} (found {found} of {needed} required atoms)")]
    NoMatch {
        missing: String,
        found: usize,
        needed: usize,
    },
}

type Counter = BTreeMap<Atom, usize>;

/// Counter keyed by atoms with sorted target lists, so that target order
/// never blocks a match (outputs form a multiset).
fn atom_counter(atoms: &[Atom]) -> Counter {
    let mut counter = Counter::new();
    for atom in atoms {
        counter
            .entry(sort_targets(atom.clone()))
            .and_modify(|c| *c += 1)
            .or_insert(1);
    }
    counter
}

fn sort_targets(mut atom: Atom) -> Atom {
    atom.targets.sort();
    atom
}

fn counter_atoms(counter: &Counter) -> Vec<Atom> {
    let mut out = Vec::new();
    for (atom, &count) in counter {
        for _ in 0..count {
            out.push(atom.clone());
        }
    }
    out
}

fn resolve_pv(p: &PV, binding: &Binding, elem: Option<&ChannelId>) -> Option<ChannelId> {
    match p {
        PV::Var(v) => binding.chan(v).cloned(),
        PV::Elem => elem.cloned(),
    }
}

/// Instantiates one pattern atom under a (complete) binding.
fn instantiate_atom(
    pat: &PatAtom,
    binding: &Binding,
    elem: Option<&ChannelId>,
) -> Option<Atom> {
    let source = resolve_pv(&pat.source, binding, elem)?;
    let targets = match &pat.targets {
        PTargets::Fixed(ts) => ts
            .iter()
            .map(|t| resolve_pv(t, binding, elem))
            .collect::<Option<Vec<_>>>()?,
        PTargets::ListVar(v) => binding.list(v)?.to_vec(),
    };
    Some(sort_targets(Atom { source, targets }))
}

/// Instantiates a full side. Returns the required atoms; the caller deals
/// with the side's binders.
fn instantiate_side(
    side: &SidePattern,
    binding: &Binding,
    rule: &'static str,
) -> Result<Vec<Atom>, RewriteError> {
    let mut atoms = Vec::new();
    for group in &side.groups {
        match group.over {
            None => {
                for pat in &group.atoms {
                    atoms.push(instantiate_atom(pat, binding, None).ok_or_else(|| {
                        RewriteError::Unbound { rule, var: format!("{pat:?}") }
                    })?);
                }
            }
            Some(list) => {
                let elems = binding.list(list).ok_or_else(|| RewriteError::Unbound {
                    rule,
                    var: list.to_string(),
                })?;
                for elem in elems {
                    for pat in &group.atoms {
                        atoms.push(instantiate_atom(pat, binding, Some(elem)).ok_or_else(
                            || RewriteError::Unbound { rule, var: format!("{pat:?}") },
                        )?);
                    }
                }
            }
        }
    }
    Ok(atoms)
}

/// Side-condition check for a complete binding of `rule` matched with
/// `src` as the consumed side, given the leftover counter.
fn check_side_conditions(
    rule: &RewriteRule,
    src: &SidePattern,
    binding: &Binding,
    flat: &Flattened,
    leftover: &Counter,
) -> Result<(), String> {
    if rule.distinct {
        let channels = binding.channels();
        let unique: BTreeSet<&ChannelId> = channels.iter().collect();
        if unique.len() != channels.len() {
            return Err("bound channels must be pairwise distinct".into());
        }
    }
    for list in rule.list_vars() {
        if let Some(vals) = binding.list(list) {
            if vals.len() < rule.list_min {
                return Err(format!(
                    "list variable {list} needs at least {} element(s)",
                    rule.list_min
                ));
            }
        }
    }
    for var in &src.binders {
        let ch = binding
            .chan(var)
            .ok_or_else(|| format!("binder variable {var} is unbound"))?;
        if !flat.locals.contains(ch) {
            return Err(format!("{ch} must be a restricted channel"));
        }
        let used_elsewhere = leftover.iter().any(|(atom, &count)| {
            count > 0 && (atom.source == *ch || atom.targets.contains(ch))
        });
        if used_elsewhere {
            return Err(format!("{ch} must occur only in the matched atoms"));
        }
    }
    Ok(())
}

/// All bindings under which `p` contains the source side of the rule as a
/// parallel sub-collection (modulo the structural congruence). Sorted and
/// deduplicated, so the order is lexicographic in the bound channels.
pub fn find_matches(rule: &RewriteRule, direction: Direction, p: &Process) -> Vec<Binding> {
    let flat = flatten(p);
    find_matches_flat(rule, direction, &flat)
}

fn find_matches_flat(rule: &RewriteRule, direction: Direction, flat: &Flattened) -> Vec<Binding> {
    let (src, _) = rule.sides(direction);
    let counter = atom_counter(&flat.atoms);
    let channels: Vec<ChannelId> = flat.channels().into_iter().collect();
    let mut results: BTreeSet<Binding> = BTreeSet::new();

    // Work items: a single atom obligation, or a whole group iterated over
    // an unbound list variable (subset enumeration).
    struct Search<'a> {
        rule: &'a RewriteRule,
        src: &'a SidePattern,
        flat: &'a Flattened,
        channels: &'a [ChannelId],
        results: &'a mut BTreeSet<Binding>,
    }

    enum Item<'a> {
        Atom(&'a PatAtom, Option<ChannelId>),
        OpenGroup(&'a Group),
    }

    impl<'a> Search<'a> {
        fn go(&mut self, items: &mut Vec<Item<'a>>, counter: &mut Counter, binding: &mut Binding) {
            let item = match items.pop() {
                None => {
                    if check_side_conditions(self.rule, self.src, binding, self.flat, counter)
                        .is_ok()
                    {
                        self.results.insert(binding.clone());
                    }
                    return;
                }
                Some(item) => item,
            };
            match &item {
                Item::Atom(pat, elem) => {
                    let candidates: Vec<Atom> = counter
                        .iter()
                        .filter(|&(_, &c)| c > 0)
                        .map(|(a, _)| a.clone())
                        .collect();
                    for atom in candidates {
                        if let Some(extra) = unify(pat, &atom, binding, elem.as_ref()) {
                            let added: Vec<String> = extra.0.keys().cloned().collect();
                            binding.0.extend(extra.0);
                            *counter.get_mut(&atom).unwrap() -= 1;
                            self.go(items, counter, binding);
                            *counter.get_mut(&atom).unwrap() += 1;
                            for k in added {
                                binding.0.remove(&k);
                            }
                        }
                    }
                }
                Item::OpenGroup(group) => {
                    let list = group.over.unwrap();
                    if let Some(bound) = binding.list(list).map(<[ChannelId]>::to_vec) {
                        let pushed = self.push_group(items, group, &bound);
                        self.go(items, counter, binding);
                        items.truncate(items.len() - pushed);
                    } else {
                        // Candidate elements: channels for which every atom
                        // of the group can individually be found right now.
                        let mut candidates: Vec<&ChannelId> = self
                            .channels
                            .iter()
                            .filter(|c| {
                                group.atoms.iter().all(|pat| {
                                    counter.iter().any(|(atom, &count)| {
                                        count > 0 && unify(pat, atom, binding, Some(c)).is_some()
                                    })
                                })
                            })
                            .collect();
                        candidates.truncate(16); // guard against subset blowup
                        let n = candidates.len();
                        for mask in 0u32..(1 << n) {
                            let subset: Vec<ChannelId> = (0..n)
                                .filter(|i| mask & (1 << i) != 0)
                                .map(|i| candidates[i].clone())
                                .collect();
                            if subset.len() < self.rule.list_min {
                                continue;
                            }
                            binding
                                .0
                                .insert(list.to_string(), BindVal::List(subset.clone()));
                            let pushed = self.push_group(items, group, &subset);
                            self.go(items, counter, binding);
                            items.truncate(items.len() - pushed);
                            binding.0.remove(list);
                        }
                    }
                }
            }
            items.push(item);
        }

        fn push_group(
            &self,
            items: &mut Vec<Item<'a>>,
            group: &'a Group,
            elems: &[ChannelId],
        ) -> usize {
            let mut pushed = 0;
            for elem in elems {
                for pat in &group.atoms {
                    items.push(Item::Atom(pat, Some(elem.clone())));
                    pushed += 1;
                }
            }
            pushed
        }
    }

    // Build the work list: plain groups first (they bind the scalar and
    // whole-list variables), then bound-list groups, then open groups.
    // Items are popped from the back.
    let mut plain_items: Vec<Item> = Vec::new();
    let mut group_items: Vec<Item> = Vec::new();
    for group in &src.groups {
        match group.over {
            None => {
                for pat in &group.atoms {
                    plain_items.push(Item::Atom(pat, None));
                }
            }
            Some(_) => group_items.push(Item::OpenGroup(group)),
        }
    }
    let mut items: Vec<Item> = Vec::new();
    items.extend(group_items);
    plain_items.reverse();
    items.extend(plain_items);

    let mut search = Search {
        rule,
        src,
        flat,
        channels: &channels,
        results: &mut results,
    };
    let mut counter = counter;
    let mut binding = Binding::default();
    search.go(&mut items, &mut counter, &mut binding);
    results.into_iter().collect()
}

/// Tries to match one pattern atom against one concrete atom; on success
/// returns the bindings this match adds.
fn unify(
    pat: &PatAtom,
    atom: &Atom,
    binding: &Binding,
    elem: Option<&ChannelId>,
) -> Option<Binding> {
    let mut extra = Binding::default();
    let bind_pv = |p: &PV, ch: &ChannelId, extra: &mut Binding| -> bool {
        match p {
            PV::Elem => elem == Some(ch),
            PV::Var(v) => match binding.chan(v).or_else(|| extra.chan(v)) {
                Some(bound) => bound == ch,
                None => {
                    extra.0.insert(v.to_string(), BindVal::Chan(ch.clone()));
                    true
                }
            },
        }
    };
    if !bind_pv(&pat.source, &atom.source, &mut extra) {
        return None;
    }
    match &pat.targets {
        PTargets::ListVar(v) => {
            let mut sorted = atom.targets.clone();
            sorted.sort();
            match binding.list(v).or_else(|| extra.list(v)) {
                Some(bound) => {
                    if bound != sorted.as_slice() {
                        return None;
                    }
                }
                None => {
                    extra.0.insert(v.to_string(), BindVal::List(sorted));
                }
            }
        }
        PTargets::Fixed(ts) => {
            if ts.len() != atom.targets.len() {
                return None;
            }
            // Counter atoms keep sorted targets; fixed pattern targets are
            // matched positionally against the sorted list. All builtin
            // patterns have at most one distinct target channel per atom,
            // so positional matching is complete here.
            for (p, ch) in ts.iter().zip(&atom.targets) {
                if !bind_pv(p, ch, &mut extra) {
                    return None;
                }
            }
        }
    }
    Some(extra)
}

/// Applies a rule at a given (complete) binding and returns the result,
/// normalized.
pub fn apply(
    rule: &RewriteRule,
    direction: Direction,
    binding: &Binding,
    p: &Process,
) -> Result<Process, RewriteError> {
    let flat = apply_flat(rule, direction, binding, &flatten(p))?;
    Ok(normalize(&flat.to_process()))
}

/// Like [`apply`] but on the flattened form, preserving channel names so
/// that later script steps can keep referring to them.
fn apply_flat(
    rule: &RewriteRule,
    direction: Direction,
    binding: &Binding,
    flat: &Flattened,
) -> Result<Flattened, RewriteError> {
    let (src, dst) = rule.sides(direction);
    let required = instantiate_side(src, binding, rule.name)?;
    let mut counter = atom_counter(&flat.atoms);
    let needed = required.len();
    for (i, atom) in required.iter().enumerate() {
        match counter.get_mut(atom) {
            Some(c) if *c > 0 => *c -= 1,
            _ => {
                return Err(RewriteError::NoMatch {
                    missing: atom_display(atom),
                    found: i,
                    needed,
                })
            }
        }
    }
    check_side_conditions(rule, src, binding, flat, &counter)
        .map_err(|why| RewriteError::SideCondition { rule: rule.name, why })?;

    let src_binder_chans: BTreeSet<ChannelId> = src
        .binders
        .iter()
        .filter_map(|v| binding.chan(v).cloned())
        .collect();
    let mut locals: Vec<ChannelId> = flat
        .locals
        .iter()
        .filter(|c| !src_binder_chans.contains(c))
        .cloned()
        .collect();

    // Fresh binders introduced by the produced side: honor the binding's
    // choice when the name is unused, otherwise freshen it.
    let mut dst_binding = binding.clone();
    let mut in_use: BTreeSet<ChannelId> = flat.channels();
    in_use.extend(flat.locals.iter().cloned());
    for var in &dst.binders {
        let wanted = dst_binding
            .chan(var)
            .cloned()
            .unwrap_or_else(|| ChannelId::new(*var));
        let fresh = if in_use.contains(&wanted) {
            fresh_channel(&wanted, &in_use)
        } else {
            wanted
        };
        in_use.insert(fresh.clone());
        dst_binding
            .0
            .insert(var.to_string(), BindVal::Chan(fresh.clone()));
        locals.push(fresh);
    }

    let produced = instantiate_side(dst, &dst_binding, rule.name)?;
    let mut atoms = counter_atoms(&counter);
    atoms.extend(produced);
    locals.sort();
    atoms.sort();
    Ok(Flattened { locals, atoms })
}

fn atom_display(atom: &Atom) -> String {
    let targets: Vec<String> = atom.targets.iter().map(|c| c.to_string()).collect();
    format!("{} => [{}]", atom.source, targets.join(", "))
}

/// Hex digest of the canonical pretty form; pins replay results.
pub fn term_digest(p: &Process) -> String {
    let text = normalize(p).to_string();
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
pub struct ProofStep {
    pub index: usize,
    pub rule: String,
    pub direction: Direction,
    /// Possibly partial; resolved against `find_matches` during replay.
    pub binding: Binding,
    pub expect: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ProofScript {
    pub steps: Vec<ProofStep>,
}

#[derive(Debug, thiserror::Error)]
#[error("script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

/// Parses the one-step-per-line script format:
/// `step <n>: <rule> <forward|reverse> {x=a, y=[b, c]} [expect sha256:<hex>]`
pub fn parse_script(text: &str) -> Result<ProofScript, ScriptError> {
    let mut steps = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let err = |message: String| ScriptError { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let rest = content
            .strip_prefix("step")
            .ok_or_else(|| err("expected `step <n>:`".into()))?
            .trim_start();
        let (num, rest) = rest
            .split_once(':')
            .ok_or_else(|| err("expected `:` after the step number".into()))?;
        let index: usize = num
            .trim()
            .parse()
            .map_err(|_| err(format!("bad step number {:?}", num.trim())))?;
        if index != steps.len() + 1 {
            return Err(err(format!(
                "step numbers must be sequential; expected {}",
                steps.len() + 1
            )));
        }
        let rest = rest.trim_start();
        let (rule, rest) = rest
            .split_once(char::is_whitespace)
            .ok_or_else(|| err("expected rule name and direction".into()))?;
        let rest = rest.trim_start();
        let (dir_word, rest) = match rest.split_once(char::is_whitespace) {
            Some((d, r)) => (d, r.trim_start()),
            None => (rest, ""),
        };
        let direction = match dir_word {
            "forward" => Direction::Forward,
            "reverse" => Direction::Reverse,
            other => return Err(err(format!("bad direction {other:?}"))),
        };
        let (binding_text, rest) = if let Some(open) = rest.strip_prefix('{') {
            let (inner, after) = open
                .split_once('}')
                .ok_or_else(|| err("unterminated binding".into()))?;
            (inner, after.trim())
        } else {
            ("", rest)
        };
        let mut binding = Binding::default();
        for part in split_binding_items(binding_text) {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| err(format!("bad binding item {part:?}")))?;
            let key = key.trim().to_string();
            let val = val.trim();
            let bound = if let Some(list) = val.strip_prefix('[') {
                let list = list
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated list in {part:?}")))?;
                let mut chans: Vec<ChannelId> = list
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(ChannelId::new)
                    .collect();
                chans.sort();
                BindVal::List(chans)
            } else {
                BindVal::Chan(ChannelId::new(val))
            };
            binding.0.insert(key, bound);
        }
        let expect = if rest.is_empty() {
            None
        } else {
            let digest = rest
                .strip_prefix("expect")
                .map(str::trim)
                .and_then(|r| r.strip_prefix("sha256:"))
                .ok_or_else(|| err(format!("trailing junk {rest:?}")))?;
            Some(digest.trim().to_string())
        };
        steps.push(ProofStep {
            index,
            rule: rule.to_string(),
            direction,
            binding,
            expect,
        });
    }
    Ok(ProofScript { steps })
}

/// Splits `a=x, b=[y, z]` at top-level commas only.
fn split_binding_items(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, ch) in text.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                out.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&text[start..]);
    out
}

pub fn builtin_script(name: &str) -> Option<ProofScript> {
    match name {
        "paper-proof" => {
            Some(parse_script(include_str!("../assets/paper_proof.cnproof")).expect("shipped script parses"))
        }
        _ => None,
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub index: usize,
    pub rule: String,
    pub direction: Direction,
    pub binding: Binding,
    pub before: Process,
    pub after: Process,
    /// Set when per-step model checking was requested.
    pub validated: Option<bool>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("step {index}: no such rule {rule:?}")]
    UnknownRule { index: usize, rule: String },
    #[error("step {index} ({rule}): no match for binding {binding}")]
    NoMatch {
        index: usize,
        rule: String,
        binding: Binding,
    },
    #[error("step {index}: {source}")]
    Apply {
        index: usize,
        source: RewriteError,
    },
    #[error("step {index}: result digest {actual} does not match expected {expected}")]
    DigestMismatch {
        index: usize,
        expected: String,
        actual: String,
    },
    #[error("step {index} ({rule}): the rewritten sub-collection is not weakly bisimilar at the given parameters")]
    NotBisimilar { index: usize, rule: String },
    #[error("step {index}: validation failed: {source}")]
    Validation {
        index: usize,
        source: BisimError,
    },
}

/// Replays a proof script from `start`. Partial step bindings are resolved
/// against `find_matches` (first match in deterministic order). With
/// `validate` set, each step's matched sub-collection is model checked.
pub fn replay(
    script: &ProofScript,
    start: &Process,
    validate: bool,
    params: &AbstractionParams,
) -> Result<(Process, Vec<StepReport>), ReplayError> {
    let mut flat = flatten(start);
    flat.locals.sort();
    flat.atoms.sort();
    let mut reports = Vec::new();
    for step in &script.steps {
        let index = step.index;
        let rule = rule_by_name(&step.rule).ok_or_else(|| ReplayError::UnknownRule {
            index,
            rule: step.rule.clone(),
        })?;
        let matches = find_matches_flat(&rule, step.direction, &flat);
        let resolved = matches
            .into_iter()
            .find(|m| step.binding.subsumed_by(m))
            .map(|mut full| {
                // Keep extra assignments from the script (e.g. the name
                // for a binder the produced side introduces).
                for (k, v) in &step.binding.0 {
                    full.0.entry(k.clone()).or_insert_with(|| v.clone());
                }
                full
            });
        let binding = match resolved {
            Some(b) => b,
            None => {
                return Err(ReplayError::NoMatch {
                    index,
                    rule: step.rule.clone(),
                    binding: step.binding.clone(),
                })
            }
        };
        let before = normalize(&flat.to_process());
        let next = apply_flat(&rule, step.direction, &binding, &flat)
            .map_err(|source| ReplayError::Apply { index, source })?;
        let after = normalize(&next.to_process());
        let validated = if validate {
            let verdict = validate_step(&rule, step.direction, &binding, params)
                .map_err(|source| ReplayError::Validation { index, source })?;
            if !verdict {
                return Err(ReplayError::NotBisimilar {
                    index,
                    rule: step.rule.clone(),
                });
            }
            Some(true)
        } else {
            None
        };
        if let Some(expected) = &step.expect {
            let actual = term_digest(&after);
            if actual != *expected {
                return Err(ReplayError::DigestMismatch {
                    index,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        reports.push(StepReport {
            index,
            rule: step.rule.clone(),
            direction: step.direction,
            binding,
            before,
            after,
            validated,
        });
        flat = next;
    }
    Ok((normalize(&flat.to_process()), reports))
}

/// Model checks one rule instance: the two instantiated sides, with every
/// channel free except the sides' own binders.
fn validate_step(
    rule: &RewriteRule,
    direction: Direction,
    binding: &Binding,
    params: &AbstractionParams,
) -> Result<bool, BisimError> {
    let (src, dst) = rule.sides(direction);
    let left = side_process(src, binding, rule.name);
    let right = side_process(dst, binding, rule.name);
    let (left, right) = match (left, right) {
        (Ok(l), Ok(r)) => (l, r),
        // An unbound variable here means the binding was incomplete, which
        // apply would already have rejected.
        _ => return Ok(false),
    };
    let la = build_lts(&to_net(&left), params)?;
    let lb = build_lts(&to_net(&right), params)?;
    Ok(weak_bisim(&la, &lb)?.is_equivalent())
}

fn side_process(
    side: &SidePattern,
    binding: &Binding,
    rule: &'static str,
) -> Result<Process, RewriteError> {
    let atoms = instantiate_side(side, binding, rule)?;
    let locals = side
        .binders
        .iter()
        .map(|v| {
            binding.chan(v).cloned().ok_or(RewriteError::Unbound {
                rule,
                var: v.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Flattened { locals, atoms }.to_process())
}

/// Bounded model check of a rule itself: instantiate both sides with fresh
/// free channels (list variables at each requested size) and compare.
pub fn validate_rule(
    rule: &RewriteRule,
    sizes: &[usize],
    params: &AbstractionParams,
) -> Result<Vec<BisimOutcome>, BisimError> {
    let mut out = Vec::new();
    for &n in sizes {
        let mut binding = Binding::default();
        for (i, var) in rule.scalar_vars().into_iter().enumerate() {
            binding
                .0
                .insert(var.to_string(), BindVal::Chan(ChannelId::new(format!("x{i}"))));
        }
        for var in rule.list_vars() {
            let list: Vec<ChannelId> =
                (0..n).map(|i| ChannelId::new(format!("y{i}"))).collect();
            binding.0.insert(var.to_string(), BindVal::List(list));
        }
        let left = side_process(&rule.lhs, &binding, rule.name)
            .map_err(|_| BisimError::NotFree(ChannelId::new("?")))?;
        let right = side_process(&rule.rhs, &binding, rule.name)
            .map_err(|_| BisimError::NotFree(ChannelId::new("?")))?;
        let la = build_lts(&to_net(&left), params)?;
        let lb = build_lts(&to_net(&right), params)?;
        out.push(weak_bisim(&la, &lb)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_process;

    fn rule(name: &str) -> RewriteRule {
        rule_by_name(name).unwrap()
    }

    #[test]
    fn split_matches_and_applies() {
        let p = parse_process("+a | ?b | ?c | a => [b, c]").unwrap();
        let r = rule("distributor-split");
        let ms = find_matches(&r, Direction::Forward, &p);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].chan("a"), Some(&ChannelId::new("a")));
        assert_eq!(
            ms[0].list("b"),
            Some(&[ChannelId::new("b"), ChannelId::new("c")][..])
        );
        let q = apply(&r, Direction::Forward, &ms[0], &p).unwrap();
        let expect = parse_process("+a | ?b | ?c | a -> b | a -> c").unwrap();
        assert_eq!(q, normalize(&expect));
    }

    #[test]
    fn forward_then_reverse_is_identity() {
        let cases = [
            ("distributor-split", "+a | ?b | ?c | a => [b, c]"),
            ("bridge-shortcut-redundancy", "a -> b | b -> c | a -> c"),
            (
                "distributor-target-fusion",
                "*c | a => [b] | b -> c | c -> b",
            ),
            ("bridge-source-switch", "a -> b | b -> a | a -> d"),
            ("duploss-detour-collapse", "new b in { *b | a -> b | b -> a }"),
        ];
        for (name, src) in cases {
            let r = rule(name);
            let p = parse_process(src).unwrap();
            let ms = find_matches(&r, Direction::Forward, &p);
            assert!(!ms.is_empty(), "{name}");
            let q = apply(&r, Direction::Forward, &ms[0], &p).unwrap();
            let back = apply(&r, Direction::Reverse, &ms[0], &q).unwrap();
            assert_eq!(back, normalize(&p), "{name}");
        }
    }

    #[test]
    fn side_conditions_reject_clashes() {
        // Shortcut rule with a = b has no match.
        let p = parse_process("a -> a | a -> c").unwrap();
        let r = rule("bridge-shortcut-redundancy");
        assert!(find_matches(&r, Direction::Forward, &p).is_empty());
        // Split with a in the target list has no match.
        let p = parse_process("+a | ?b | a => [a, b]").unwrap();
        let r = rule("distributor-split");
        assert!(find_matches(&r, Direction::Forward, &p).is_empty());
    }

    #[test]
    fn no_rule_matches_stop() {
        for r in builtin_rules() {
            for dir in [Direction::Forward, Direction::Reverse] {
                assert!(find_matches(&r, dir, &Process::Stop).is_empty(), "{}", r.name);
            }
        }
    }

    #[test]
    fn detour_collapse_removes_binder() {
        let p = parse_process("x -> a | new b in { *b | a -> b | b -> a }").unwrap();
        let r = rule("duploss-detour-collapse");
        let ms = find_matches(&r, Direction::Forward, &p);
        assert_eq!(ms.len(), 1);
        let q = apply(&r, Direction::Forward, &ms[0], &p).unwrap();
        assert_eq!(q, normalize(&parse_process("x -> a | *a").unwrap()));
    }

    #[test]
    fn detour_collapse_needs_exclusive_binder() {
        // b leaks into another atom: no match.
        let p = parse_process("new b in { *b | a -> b | b -> a | b -> x }").unwrap();
        let r = rule("duploss-detour-collapse");
        assert!(find_matches(&r, Direction::Forward, &p).is_empty());
        // b free: no match either.
        let p = parse_process("*b | a -> b | b -> a").unwrap();
        assert!(find_matches(&r, Direction::Forward, &p).is_empty());
    }

    #[test]
    fn idempotency_variants() {
        let cases = [
            ("loser-idempotency", "?a | ?a", "?a"),
            ("duplicator-idempotency", "+a | +a", "+a"),
            ("duploser-idempotency", "*a | *a", "*a"),
            ("distributor-idempotency", "a => [b, c] | a => [c, b]", "a => [b, c]"),
        ];
        for (name, from, to) in cases {
            let r = rule(name);
            let p = parse_process(from).unwrap();
            let ms = find_matches(&r, Direction::Forward, &p);
            assert!(!ms.is_empty(), "{name}");
            let q = apply(&r, Direction::Forward, &ms[0], &p).unwrap();
            assert_eq!(q, normalize(&parse_process(to).unwrap()), "{name}");
        }
    }

    #[test]
    fn apply_with_bogus_binding_reports_missing_atom() {
        let p = parse_process("a -> b").unwrap();
        let r = rule("bridge-shortcut-redundancy");
        let mut binding = Binding::default();
        for (k, v) in [("a", "a"), ("b", "b"), ("c", "z")] {
            binding.0.insert(k.into(), BindVal::Chan(ChannelId::new(v)));
        }
        let err = apply(&r, Direction::Forward, &binding, &p).unwrap_err();
        assert!(matches!(err, RewriteError::NoMatch { .. }), "{err}");
    }

    #[test]
    fn script_parse_and_errors() {
        let script = parse_script(
            "# comment\n\
             step 1: distributor-split forward {a=l01, b=[r1, l13]}\n\
             step 2: bridge-shortcut-redundancy reverse {a=l01, b=l13, c=l30} expect sha256:00ff\n",
        )
        .unwrap();
        assert_eq!(script.steps.len(), 2);
        assert_eq!(
            script.steps[0].binding.list("b"),
            Some(&[ChannelId::new("l13"), ChannelId::new("r1")][..])
        );
        assert_eq!(script.steps[1].expect.as_deref(), Some("00ff"));
        assert!(parse_script("step 2: x forward").is_err());
        assert!(parse_script("step 1: x sideways").is_err());
    }

    #[test]
    fn empty_script_normalizes() {
        let p = parse_process("b -> c | a -> b").unwrap();
        let (q, reports) =
            replay(&ProofScript::default(), &p, false, &AbstractionParams::default()).unwrap();
        assert_eq!(q, normalize(&p));
        assert!(reports.is_empty());
    }

    #[test]
    fn replay_wrong_binding_fails_without_mutation() {
        let script = parse_script("step 1: bridge-shortcut-redundancy forward {a=z}").unwrap();
        let p = parse_process("a -> b | b -> c | a -> c").unwrap();
        let err = replay(&script, &p, false, &AbstractionParams::default()).unwrap_err();
        assert!(matches!(err, ReplayError::NoMatch { index: 1, .. }), "{err}");
    }

    #[test]
    fn shortcut_reverse_introduces_edge() {
        let p = parse_process("l01 -> l13 | l13 -> l30 | l30 -> l01").unwrap();
        let r = rule("bridge-shortcut-redundancy");
        let ms = find_matches(&r, Direction::Reverse, &p);
        let want: Binding = {
            let mut b = Binding::default();
            b.0.insert("a".into(), BindVal::Chan(ChannelId::new("l01")));
            b.0.insert("b".into(), BindVal::Chan(ChannelId::new("l13")));
            b.0.insert("c".into(), BindVal::Chan(ChannelId::new("l30")));
            b
        };
        assert!(ms.contains(&want));
        let q = apply(&r, Direction::Reverse, &want, &p).unwrap();
        let expect =
            parse_process("l01 -> l13 | l13 -> l30 | l30 -> l01 | l01 -> l30").unwrap();
        assert_eq!(q, normalize(&expect));
    }
}
