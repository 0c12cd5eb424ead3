//! Abstract syntax of the communication language: core forms plus the
//! unreliability sugar, desugaring, substitution, and normalization modulo
//! the structural laws that the net notation leaves implicit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// A channel name. Free channels carry their surface name; bound channels
/// are renamed on demand (`x_1`, `x_2`, ...) to avoid capture, and
/// normalization assigns canonical names `_0`, `_1`, ... to local channels.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId(pub String);

impl ChannelId {
    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        assert!(!name.is_empty(), "channel names must be nonempty");
        ChannelId(name)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Process terms. `Stop`, `Par`, `Restrict` and `Distribute` are the core;
/// the remaining constructors are sugar that `desugar` removes.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Process {
    Stop,
    Par(Box<Process>, Box<Process>),
    Restrict(ChannelId, Box<Process>),
    /// `a => [b1, ..., bn]`. The target list may be empty, may repeat
    /// channels, and may contain the source.
    Distribute(ChannelId, Vec<ChannelId>),
    /// `a -> b`
    Bridge(ChannelId, ChannelId),
    /// `?a`
    Loser(ChannelId),
    /// `+a`
    Duplicator(ChannelId),
    /// `*a`
    Duploser(ChannelId),
}

impl Process {
    pub fn par(left: Process, right: Process) -> Process {
        Process::Par(Box::new(left), Box::new(right))
    }

    pub fn restrict(channel: ChannelId, body: Process) -> Process {
        Process::Restrict(channel, Box::new(body))
    }

    /// True if the term contains only Stop, Par, Restrict and Distribute.
    pub fn is_core(&self) -> bool {
        match self {
            Process::Stop | Process::Distribute(..) => true,
            Process::Par(l, r) => l.is_core() && r.is_core(),
            Process::Restrict(_, b) => b.is_core(),
            _ => false,
        }
    }
}

/// Renaming of free channels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Substitution(pub BTreeMap<ChannelId, ChannelId>);

impl Substitution {
    pub fn single(from: ChannelId, to: ChannelId) -> Self {
        let mut map = BTreeMap::new();
        map.insert(from, to);
        Substitution(map)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Expands the sugar constructs into their distributor definitions.
/// Idempotent; core forms are fixed points.
pub fn desugar(p: &Process) -> Process {
    match p {
        Process::Stop => Process::Stop,
        Process::Par(l, r) => Process::par(desugar(l), desugar(r)),
        Process::Restrict(a, b) => Process::restrict(a.clone(), desugar(b)),
        Process::Distribute(a, ts) => Process::Distribute(a.clone(), ts.clone()),
        Process::Bridge(a, b) => Process::Distribute(a.clone(), vec![b.clone()]),
        Process::Loser(a) => Process::Distribute(a.clone(), vec![]),
        Process::Duplicator(a) => Process::Distribute(a.clone(), vec![a.clone(), a.clone()]),
        Process::Duploser(a) => Process::par(
            Process::Distribute(a.clone(), vec![]),
            Process::Distribute(a.clone(), vec![a.clone(), a.clone()]),
        ),
    }
}

/// Channels occurring outside any enclosing binder for them.
pub fn free_channels(p: &Process) -> BTreeSet<ChannelId> {
    fn go(p: &Process, bound: &mut Vec<ChannelId>, out: &mut BTreeSet<ChannelId>) {
        match p {
            Process::Stop => {}
            Process::Par(l, r) => {
                go(l, bound, out);
                go(r, bound, out);
            }
            Process::Restrict(a, b) => {
                bound.push(a.clone());
                go(b, bound, out);
                bound.pop();
            }
            Process::Distribute(a, ts) => {
                for c in std::iter::once(a).chain(ts.iter()) {
                    if !bound.contains(c) {
                        out.insert(c.clone());
                    }
                }
            }
            Process::Bridge(a, b) => {
                for c in [a, b] {
                    if !bound.contains(c) {
                        out.insert(c.clone());
                    }
                }
            }
            Process::Loser(a) | Process::Duplicator(a) | Process::Duploser(a) => {
                if !bound.contains(a) {
                    out.insert(a.clone());
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    go(p, &mut Vec::new(), &mut out);
    out
}

/// Picks a name of the form `base_k` that is not in `avoid`.
pub fn fresh_channel(base: &ChannelId, avoid: &BTreeSet<ChannelId>) -> ChannelId {
    let stem = base.0.split("_").next().unwrap_or(&base.0);
    let stem = if stem.is_empty() { base.0.as_str() } else { stem };
    for k in 1u64.. {
        let cand = ChannelId(format!("{stem}_{k}"));
        if !avoid.contains(&cand) {
            return cand;
        }
    }
    unreachable!()
}

/// Capture-avoiding renaming of free channels. Bound channels are
/// freshened when they would capture a substituted name.
pub fn substitute(p: &Process, sub: &Substitution) -> Process {
    fn ch(active: &BTreeMap<ChannelId, ChannelId>, c: &ChannelId) -> ChannelId {
        active.get(c).cloned().unwrap_or_else(|| c.clone())
    }

    fn go(p: &Process, active: &BTreeMap<ChannelId, ChannelId>) -> Process {
        match p {
            Process::Stop => Process::Stop,
            Process::Par(l, r) => Process::par(go(l, active), go(r, active)),
            Process::Restrict(a, body) => {
                let mut inner: BTreeMap<ChannelId, ChannelId> = active.clone();
                inner.remove(a);
                let body_free = free_channels(body);
                inner.retain(|from, _| body_free.contains(from));
                let captures = inner.values().any(|to| to == a);
                if captures {
                    let mut avoid: BTreeSet<ChannelId> = body_free.clone();
                    avoid.extend(inner.values().cloned());
                    avoid.insert(a.clone());
                    let a2 = fresh_channel(a, &avoid);
                    inner.insert(a.clone(), a2.clone());
                    Process::restrict(a2, go(body, &inner))
                } else if inner.is_empty() {
                    Process::restrict(a.clone(), body.as_ref().clone())
                } else {
                    Process::restrict(a.clone(), go(body, &inner))
                }
            }
            Process::Distribute(a, ts) => Process::Distribute(
                ch(active, a),
                ts.iter().map(|t| ch(active, t)).collect(),
            ),
            Process::Bridge(a, b) => Process::Bridge(ch(active, a), ch(active, b)),
            Process::Loser(a) => Process::Loser(ch(active, a)),
            Process::Duplicator(a) => Process::Duplicator(ch(active, a)),
            Process::Duploser(a) => Process::Duploser(ch(active, a)),
        }
    }
    go(p, &sub.0)
}

/// Replicated parallel composition: `template[b1/binder] | ... | template[bn/binder]`.
/// The empty list yields `Stop`.
pub fn par_over(binder: &ChannelId, channels: &[ChannelId], template: &Process) -> Process {
    let mut parts = channels
        .iter()
        .map(|b| substitute(template, &Substitution::single(binder.clone(), b.clone())))
        .collect::<Vec<_>>();
    match parts.len() {
        0 => Process::Stop,
        _ => {
            let last = parts.pop().unwrap();
            parts.into_iter().rev().fold(last, |acc, p| Process::par(p, acc))
        }
    }
}

/// One distributor occurrence of a flattened core process.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    pub source: ChannelId,
    /// Target list as written; compared as a multiset where matching
    /// requires it, but the written order is preserved.
    pub targets: Vec<ChannelId>,
}

/// A core process with all binders floated to the outside and the parallel
/// spine flattened. Local channel names are kept (freshened only to avoid
/// clashes); unused binders are dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Flattened {
    pub locals: Vec<ChannelId>,
    pub atoms: Vec<Atom>,
}

impl Flattened {
    pub fn channels(&self) -> BTreeSet<ChannelId> {
        let mut set: BTreeSet<ChannelId> = self.locals.iter().cloned().collect();
        for a in &self.atoms {
            set.insert(a.source.clone());
            set.extend(a.targets.iter().cloned());
        }
        set
    }

    pub fn free(&self) -> BTreeSet<ChannelId> {
        let locals: BTreeSet<_> = self.locals.iter().cloned().collect();
        self.channels().difference(&locals).cloned().collect()
    }

    /// Rebuilds a term: binders in `locals` order around a right-nested
    /// parallel composition of the atoms.
    pub fn to_process(&self) -> Process {
        let mut atoms: Vec<Process> = self
            .atoms
            .iter()
            .map(|a| Process::Distribute(a.source.clone(), a.targets.clone()))
            .collect();
        let body = match atoms.len() {
            0 => Process::Stop,
            _ => {
                let last = atoms.pop().unwrap();
                atoms.into_iter().rev().fold(last, |acc, p| Process::par(p, acc))
            }
        };
        self.locals
            .iter()
            .rev()
            .fold(body, |acc, l| Process::restrict(l.clone(), acc))
    }

    /// Deterministic presentation: binders sorted by name, atoms sorted.
    pub fn sorted(mut self) -> Flattened {
        self.locals.sort();
        self.atoms.sort();
        self
    }
}

/// Desugars and flattens: floats binders outward (alpha-renaming them when
/// their name clashes with a free channel or another binder), drops `Stop`
/// and unused binders, and collects the distributor atoms.
pub fn flatten(p: &Process) -> Flattened {
    let core = desugar(p);
    let mut used: BTreeSet<ChannelId> = free_channels(&core);
    let mut locals = Vec::new();
    let mut atoms = Vec::new();

    fn go(
        p: &Process,
        ren: &BTreeMap<ChannelId, ChannelId>,
        used: &mut BTreeSet<ChannelId>,
        locals: &mut Vec<ChannelId>,
        atoms: &mut Vec<Atom>,
    ) {
        match p {
            Process::Stop => {}
            Process::Par(l, r) => {
                go(l, ren, used, locals, atoms);
                go(r, ren, used, locals, atoms);
            }
            Process::Restrict(a, body) => {
                let name = if used.contains(a) {
                    fresh_channel(a, used)
                } else {
                    a.clone()
                };
                used.insert(name.clone());
                locals.push(name.clone());
                let mut inner = ren.clone();
                inner.insert(a.clone(), name);
                go(body, &inner, used, locals, atoms);
            }
            Process::Distribute(a, ts) => {
                let ch = |c: &ChannelId| ren.get(c).cloned().unwrap_or_else(|| c.clone());
                atoms.push(Atom {
                    source: ch(a),
                    targets: ts.iter().map(ch).collect(),
                });
            }
            _ => unreachable!("flatten runs on desugared terms"),
        }
    }
    go(&core, &BTreeMap::new(), &mut used, &mut locals, &mut atoms);

    let mut occurring = BTreeSet::new();
    for a in &atoms {
        occurring.insert(a.source.clone());
        occurring.extend(a.targets.iter().cloned());
    }
    locals.retain(|l| occurring.contains(l));
    Flattened { locals, atoms }
}

/// Canonical representative modulo the structural laws: unit laws for
/// `Stop`, associativity/commutativity of parallel, scope mobility, unused
/// binder removal and alpha-renaming. Local channels are renamed to a
/// deterministic `_0`, `_1`, ... scheme chosen purely from the structure,
/// so any two terms related by those laws normalize to identical terms.
pub fn normalize(p: &Process) -> Process {
    canonical_flat(&flatten(p)).to_process()
}

/// Canonicalizes a flattened process: renames locals to `_k` names (chosen
/// by structural refinement, ties resolved by trying the remaining orders
/// and keeping the least result) and sorts the atoms.
pub fn canonical_flat(flat: &Flattened) -> Flattened {
    let free = flat.free();
    // Canonical names, skipping any `_k` that happens to occur free.
    let mut names = Vec::new();
    let mut k = 0u64;
    while names.len() < flat.locals.len() {
        let cand = ChannelId(format!("_{k}"));
        if !free.contains(&cand) {
            names.push(cand);
        }
        k += 1;
    }

    if flat.locals.is_empty() {
        let mut atoms = flat.atoms.clone();
        atoms.sort();
        return Flattened { locals: vec![], atoms };
    }

    // Partition locals by iterated structural signatures.
    let locals: Vec<ChannelId> = flat.locals.clone();
    let index: BTreeMap<&ChannelId, usize> =
        locals.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let mut colors: Vec<u64> = vec![0; locals.len()];
    loop {
        let mut keys: Vec<String> = Vec::with_capacity(locals.len());
        for (i, l) in locals.iter().enumerate() {
            let mut views: Vec<String> = Vec::new();
            for atom in &flat.atoms {
                let involves = atom.source == *l || atom.targets.contains(l);
                if !involves {
                    continue;
                }
                let repr = |c: &ChannelId| -> String {
                    if c == l {
                        "@self".to_string()
                    } else if let Some(&j) = index.get(c) {
                        format!("@loc{}", colors[j])
                    } else {
                        format!("free:{}", c.0)
                    }
                };
                let mut ts: Vec<String> = atom.targets.iter().map(repr).collect();
                ts.sort();
                views.push(format!("{}>[{}]", repr(&atom.source), ts.join(",")));
            }
            views.sort();
            keys.push(format!("{}|{}", colors[i], views.join(";")));
        }
        let mut sorted_keys: Vec<&String> = keys.iter().collect();
        sorted_keys.sort();
        sorted_keys.dedup();
        let new_colors: Vec<u64> = keys
            .iter()
            .map(|key| sorted_keys.binary_search(&key).unwrap() as u64)
            .collect();
        if new_colors == colors {
            break;
        }
        colors = new_colors;
    }

    // Candidate orders: locals sorted by color; ambiguous classes are
    // permuted and the least renamed atom list wins.
    let mut classes: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, c) in colors.iter().enumerate() {
        classes.entry(*c).or_default().push(i);
    }
    let class_lists: Vec<Vec<usize>> = classes.into_values().collect();

    let mut best: Option<(Vec<Atom>, Vec<usize>)> = None;
    let mut perms: Vec<Vec<usize>> = vec![vec![]];
    for class in &class_lists {
        let mut next = Vec::new();
        for prefix in &perms {
            for perm in permutations(class) {
                let mut p = prefix.clone();
                p.extend(perm);
                next.push(p);
            }
        }
        perms = next;
    }
    for order in &perms {
        let ren: BTreeMap<&ChannelId, &ChannelId> = order
            .iter()
            .enumerate()
            .map(|(pos, &i)| (&locals[i], &names[pos]))
            .collect();
        let ch = |c: &ChannelId| ren.get(c).map(|n| (*n).clone()).unwrap_or_else(|| c.clone());
        let mut atoms: Vec<Atom> = flat
            .atoms
            .iter()
            .map(|a| Atom {
                source: ch(&a.source),
                targets: a.targets.iter().map(ch).collect(),
            })
            .collect();
        atoms.sort();
        if best.as_ref().map(|(b, _)| atoms < *b).unwrap_or(true) {
            best = Some((atoms, order.clone()));
        }
    }
    let (atoms, order) = best.unwrap();
    Flattened {
        locals: names[..order.len()].to_vec(),
        atoms,
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, x);
            out.push(tail);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(name: &str) -> ChannelId {
        ChannelId::new(name)
    }

    #[test]
    fn desugar_bridge() {
        let p = Process::Bridge(c("a"), c("b"));
        assert_eq!(desugar(&p), Process::Distribute(c("a"), vec![c("b")]));
    }

    #[test]
    fn desugar_duploser() {
        let p = Process::Duploser(c("a"));
        assert_eq!(
            desugar(&p),
            Process::par(
                Process::Distribute(c("a"), vec![]),
                Process::Distribute(c("a"), vec![c("a"), c("a")]),
            )
        );
    }

    #[test]
    fn desugar_fixed_points_and_idempotent() {
        assert_eq!(desugar(&Process::Stop), Process::Stop);
        let p = Process::par(Process::Duploser(c("a")), Process::Bridge(c("a"), c("b")));
        assert_eq!(desugar(&desugar(&p)), desugar(&p));
    }

    #[test]
    fn free_channels_respects_binders() {
        let p = Process::restrict(
            c("m"),
            Process::par(Process::Bridge(c("s0"), c("m")), Process::Bridge(c("m"), c("r0"))),
        );
        assert_eq!(free_channels(&p), [c("s0"), c("r0")].into_iter().collect());
        assert!(free_channels(&Process::Stop).is_empty());
        assert_eq!(
            free_channels(&Process::Duplicator(c("a"))),
            [c("a")].into_iter().collect()
        );
    }

    #[test]
    fn substitute_examples() {
        let sub = Substitution::single(c("a"), c("b"));
        assert_eq!(
            substitute(&Process::Bridge(c("a"), c("c")), &sub),
            Process::Bridge(c("b"), c("c"))
        );
        let bound = Process::restrict(c("a"), Process::Bridge(c("a"), c("c")));
        assert_eq!(substitute(&bound, &sub), bound);
        // Capture avoidance forces freshening.
        let p = Process::restrict(c("x"), Process::Bridge(c("a"), c("x")));
        let sub = Substitution::single(c("a"), c("x"));
        let got = substitute(&p, &sub);
        match got {
            Process::Restrict(x2, body) => {
                assert_ne!(x2, c("x"));
                assert_eq!(*body, Process::Bridge(c("x"), x2.clone()));
            }
            other => panic!("expected a restriction, got {other:?}"),
        }
    }

    #[test]
    fn par_over_examples() {
        let got = par_over(&c("a"), &[c("r1"), c("l13")], &Process::Loser(c("a")));
        assert_eq!(
            got,
            Process::par(Process::Loser(c("r1")), Process::Loser(c("l13")))
        );
        assert_eq!(par_over(&c("a"), &[], &Process::Loser(c("a"))), Process::Stop);
        assert_eq!(
            par_over(&c("a"), &[c("b")], &Process::Bridge(c("c"), c("a"))),
            Process::Bridge(c("c"), c("b"))
        );
    }

    #[test]
    fn normalize_unit_and_scope_laws() {
        let p = Process::Bridge(c("a"), c("b"));
        assert_eq!(
            normalize(&Process::par(Process::Stop, p.clone())),
            normalize(&p)
        );
        assert_eq!(normalize(&Process::restrict(c("a"), Process::Stop)), Process::Stop);

        // Scope extrusion: P | new a { Q }  ==  new a { P | Q } when a not free in P.
        let q = Process::Bridge(c("x"), c("z"));
        let lhs = Process::par(
            p.clone(),
            Process::restrict(c("z"), q.clone()),
        );
        let rhs = Process::restrict(c("z"), Process::par(p.clone(), q));
        assert_eq!(normalize(&lhs), normalize(&rhs));
    }

    #[test]
    fn normalize_commutative_associative() {
        let p = Process::Bridge(c("a"), c("b"));
        let q = Process::Loser(c("x"));
        let r = Process::Duplicator(c("y"));
        assert_eq!(
            normalize(&Process::par(p.clone(), q.clone())),
            normalize(&Process::par(q.clone(), p.clone()))
        );
        assert_eq!(
            normalize(&Process::par(Process::par(p.clone(), q.clone()), r.clone())),
            normalize(&Process::par(p, Process::par(q, r)))
        );
    }

    #[test]
    fn normalize_alpha_invariant() {
        let lhs = Process::restrict(c("u"), Process::Bridge(c("a"), c("u")));
        let rhs = Process::restrict(c("v"), Process::Bridge(c("a"), c("v")));
        assert_eq!(normalize(&lhs), normalize(&rhs));
    }

    #[test]
    fn normalize_symmetric_locals() {
        // Two structurally symmetric binders; canonical naming must not
        // depend on binder order.
        let mk = |x: &str, y: &str| {
            Process::restrict(
                c(x),
                Process::restrict(
                    c(y),
                    Process::par(
                        Process::Bridge(c("a"), c(x)),
                        Process::par(
                            Process::Bridge(c("a"), c(y)),
                            Process::par(Process::Bridge(c(x), c("b")), Process::Bridge(c(y), c("b"))),
                        ),
                    ),
                ),
            )
        };
        assert_eq!(normalize(&mk("u", "v")), normalize(&mk("v", "u")));
    }

    #[test]
    fn flatten_renames_clashing_binder() {
        // A local `a` beside a free `a` must not be merged.
        let p = Process::par(
            Process::restrict(c("a"), Process::Loser(c("a"))),
            Process::Loser(c("a")),
        );
        let f = flatten(&p);
        assert_eq!(f.locals.len(), 1);
        assert_ne!(f.locals[0], c("a"));
        assert_eq!(f.atoms.len(), 2);
    }
}
