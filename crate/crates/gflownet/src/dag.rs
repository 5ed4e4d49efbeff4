//! Enumerated state DAGs, trajectories, and the topological-order DP
//! primitives everything else is built on.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

/// Index of a state in an enumerated DAG. Index 0 is always the initial state.
pub type StateId = usize;

/// An explicitly enumerated DAG of states.
///
/// Nonterminal states have children; terminal states are sinks. Each state
/// carries a fixed-length numeric encoding used as input to function
/// approximators.
#[derive(Debug, Clone, PartialEq)]
pub struct DagSpec {
    pub num_states: usize,
    pub children: Vec<Vec<StateId>>,
    pub parents: Vec<Vec<StateId>>,
    pub terminal: Vec<bool>,
    pub encoding: Vec<Vec<f64>>,
    /// Flat edge index: edge (s, k-th child of s) has id `edge_offset[s] + k`.
    edge_offset: Vec<usize>,
    num_edges: usize,
    /// For each state, edge ids of incoming edges, parallel to `parents`.
    parent_edge_ids: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Cycle { state: StateId },
    ExtraSource { state: StateId },
    InitialHasParents,
    TerminalWithChildren { state: StateId },
    NonterminalSink { state: StateId },
    InconsistentAdjacency { from: StateId, to: StateId },
    EncodingLengthMismatch { state: StateId },
    OutOfRange { state: StateId },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Cycle { state } => write!(f, "cycle through state {state}"),
            Violation::ExtraSource { state } => {
                write!(f, "state {state} has no parents but is not state 0")
            }
            Violation::InitialHasParents => write!(f, "state 0 has parents"),
            Violation::TerminalWithChildren { state } => {
                write!(f, "terminal state {state} has children")
            }
            Violation::NonterminalSink { state } => {
                write!(f, "nonterminal state {state} has no children")
            }
            Violation::InconsistentAdjacency { from, to } => {
                write!(f, "adjacency lists disagree on edge {from}->{to}")
            }
            Violation::EncodingLengthMismatch { state } => {
                write!(f, "encoding length differs at state {state}")
            }
            Violation::OutOfRange { state } => {
                write!(f, "state index {state} out of range")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum DagError {
    #[error("invalid dag: {0}")]
    Invalid(String),
    #[error("cycle detected through state {0}")]
    Cycle(StateId),
    #[error("trajectory count {count} exceeds cap {cap}")]
    TooManyTrajectories { count: u128, cap: u128 },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl DagSpec {
    /// Build a spec from adjacency data. Parents lists are derived from the
    /// children lists; the result is not checked for acyclicity (use
    /// [`validate_dag`]).
    pub fn from_children(
        children: Vec<Vec<StateId>>,
        terminal: Vec<bool>,
        encoding: Vec<Vec<f64>>,
    ) -> Self {
        let num_states = children.len();
        let mut parents = vec![Vec::new(); num_states];
        for (s, kids) in children.iter().enumerate() {
            for &c in kids {
                if c < num_states {
                    parents[c].push(s);
                }
            }
        }
        for p in &mut parents {
            p.sort_unstable();
        }
        Self::assemble(children, parents, terminal, encoding)
    }

    fn assemble(
        children: Vec<Vec<StateId>>,
        parents: Vec<Vec<StateId>>,
        terminal: Vec<bool>,
        encoding: Vec<Vec<f64>>,
    ) -> Self {
        let num_states = children.len();
        let mut edge_offset = vec![0usize; num_states];
        let mut num_edges = 0;
        for s in 0..num_states {
            edge_offset[s] = num_edges;
            num_edges += children[s].len();
        }
        let mut parent_edge_ids = vec![Vec::new(); num_states];
        for s in 0..num_states {
            parent_edge_ids[s] = parents[s]
                .iter()
                .map(|&p| {
                    let slot = children[p].iter().position(|&c| c == s).unwrap_or(0);
                    edge_offset[p] + slot
                })
                .collect();
        }
        DagSpec {
            num_states,
            children,
            parents,
            terminal,
            encoding,
            edge_offset,
            num_edges,
            parent_edge_ids,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Edge id of the `slot`-th outgoing edge of `s`.
    pub fn edge_id(&self, s: StateId, slot: usize) -> usize {
        self.edge_offset[s] + slot
    }

    /// Edge ids of incoming edges of `s`, parallel to `parents[s]`.
    pub fn parent_edge_ids(&self, s: StateId) -> &[usize] {
        &self.parent_edge_ids[s]
    }

    /// Edge id of edge `from -> to`, if it exists.
    pub fn find_edge(&self, from: StateId, to: StateId) -> Option<usize> {
        self.children[from]
            .iter()
            .position(|&c| c == to)
            .map(|slot| self.edge_offset[from] + slot)
    }

    pub fn terminal_states(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.num_states).filter(|&s| self.terminal[s])
    }

    pub fn encoding_dim(&self) -> usize {
        self.encoding.first().map_or(0, |e| e.len())
    }

    pub fn max_out_degree(&self) -> usize {
        self.children.iter().map(|c| c.len()).max().unwrap_or(0)
    }

    pub fn max_in_degree(&self) -> usize {
        self.parents.iter().map(|p| p.len()).max().unwrap_or(0)
    }

    /// True when every noninitial state has exactly one parent.
    pub fn is_tree(&self) -> bool {
        (1..self.num_states).all(|s| self.parents[s].len() == 1)
    }

    /// Serialize to the line-oriented `.dag` text format:
    /// a `states N` header, then one line per state
    /// `<id> <terminal 0|1> <parent_count> <children...>`, then one
    /// `enc <id> <values...>` line per state.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "states {}", self.num_states);
        for s in 0..self.num_states {
            let _ = write!(
                out,
                "{} {} {}",
                s,
                if self.terminal[s] { 1 } else { 0 },
                self.parents[s].len()
            );
            for c in &self.children[s] {
                let _ = write!(out, " {c}");
            }
            let _ = writeln!(out);
        }
        for s in 0..self.num_states {
            let _ = write!(out, "enc {s}");
            for v in &self.encoding[s] {
                let _ = write!(out, " {v}");
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DagError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (lno, header) = lines.next().ok_or(DagError::Parse {
            line: 0,
            msg: "empty file".into(),
        })?;
        let n: usize = header
            .strip_prefix("states ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or(DagError::Parse {
                line: lno,
                msg: "expected `states N` header".into(),
            })?;
        let mut children = vec![Vec::new(); n];
        let mut terminal = vec![false; n];
        let mut declared_parents = vec![0usize; n];
        for expect in 0..n {
            let (lno, line) = lines.next().ok_or(DagError::Parse {
                line: 0,
                msg: format!("missing state line {expect}"),
            })?;
            let mut toks = line.split_whitespace();
            let parse_err = |msg: &str| DagError::Parse {
                line: lno,
                msg: msg.into(),
            };
            let id: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err("bad state id"))?;
            if id != expect {
                return Err(parse_err("state lines out of order"));
            }
            let t: u8 = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err("bad terminal flag"))?;
            terminal[id] = t != 0;
            declared_parents[id] = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err("bad parent count"))?;
            for tok in toks {
                let c: usize = tok.parse().map_err(|_| parse_err("bad child id"))?;
                children[id].push(c);
            }
        }
        let mut encoding = vec![Vec::new(); n];
        for _ in 0..n {
            let (lno, line) = lines.next().ok_or(DagError::Parse {
                line: 0,
                msg: "missing encoding line".into(),
            })?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some("enc") {
                return Err(DagError::Parse {
                    line: lno,
                    msg: "expected `enc` line".into(),
                });
            }
            let id: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .filter(|&i| i < n)
                .ok_or(DagError::Parse {
                    line: lno,
                    msg: "bad enc state id".into(),
                })?;
            encoding[id] = toks
                .map(|t| {
                    t.parse().map_err(|_| DagError::Parse {
                        line: lno,
                        msg: "bad encoding value".into(),
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        let spec = DagSpec::from_children(children, terminal, encoding);
        for s in 0..n {
            if spec.parents[s].len() != declared_parents[s] {
                return Err(DagError::Parse {
                    line: 0,
                    msg: format!(
                        "state {s}: declared parent count {} but adjacency gives {}",
                        declared_parents[s],
                        spec.parents[s].len()
                    ),
                });
            }
        }
        Ok(spec)
    }
}

/// A complete trajectory from the initial state to a terminal state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub states: Vec<StateId>,
}

impl Trajectory {
    pub fn terminal(&self) -> StateId {
        *self.states.last().expect("trajectory is nonempty")
    }

    pub fn edges(&self) -> impl Iterator<Item = (StateId, StateId)> + '_ {
        self.states.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn is_valid(&self, spec: &DagSpec) -> bool {
        !self.states.is_empty()
            && self.states[0] == 0
            && spec.terminal[self.terminal()]
            && self
                .edges()
                .all(|(a, b)| spec.children[a].contains(&b))
    }
}

/// A trajectory segment; need not start at the initial state nor end terminal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialTrajectory {
    pub states: Vec<StateId>,
}

impl PartialTrajectory {
    pub fn edges(&self) -> impl Iterator<Item = (StateId, StateId)> + '_ {
        self.states.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Collect every invariant violation in `spec`. An empty list means valid.
pub fn validate_dag(spec: &DagSpec) -> Vec<Violation> {
    let n = spec.num_states;
    let mut out = Vec::new();
    for s in 0..n {
        for &c in &spec.children[s] {
            if c >= n {
                out.push(Violation::OutOfRange { state: c });
            } else if !spec.parents[c].contains(&s) {
                out.push(Violation::InconsistentAdjacency { from: s, to: c });
            }
        }
        for &p in &spec.parents[s] {
            if p >= n {
                out.push(Violation::OutOfRange { state: p });
            } else if !spec.children[p].contains(&s) {
                out.push(Violation::InconsistentAdjacency { from: p, to: s });
            }
        }
        if spec.terminal[s] && !spec.children[s].is_empty() {
            out.push(Violation::TerminalWithChildren { state: s });
        }
        if !spec.terminal[s] && spec.children[s].is_empty() {
            out.push(Violation::NonterminalSink { state: s });
        }
        if s == 0 && !spec.parents[s].is_empty() {
            out.push(Violation::InitialHasParents);
        }
        if s != 0 && spec.parents[s].is_empty() {
            out.push(Violation::ExtraSource { state: s });
        }
        if spec.encoding[s].len() != spec.encoding[0].len() {
            out.push(Violation::EncodingLengthMismatch { state: s });
        }
    }
    if let Err(DagError::Cycle(s)) = topological_order(spec) {
        out.push(Violation::Cycle { state: s });
    }
    out
}

/// Topological order with ties broken by ascending state index (Kahn's
/// algorithm with an ordered frontier).
pub fn topological_order(spec: &DagSpec) -> Result<Vec<StateId>, DagError> {
    let n = spec.num_states;
    // In-degrees from the children lists (the actual edges) so the sort is
    // robust to inconsistent parents lists during validation.
    let mut indeg = vec![0usize; n];
    for kids in &spec.children {
        for &c in kids {
            if c < n {
                indeg[c] += 1;
            }
        }
    }
    // Ordered frontier: a min-ordered ready list gives the ascending-index
    // tie-break. States are pushed in increasing order per step, so a sorted
    // insertion queue suffices; use a BinaryHeap-free approach with a BTreeSet.
    let mut ready: std::collections::BTreeSet<StateId> =
        (0..n).filter(|&s| indeg[s] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&s) = ready.iter().next() {
        ready.remove(&s);
        order.push(s);
        for &c in &spec.children[s] {
            if c < n {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
    }
    if order.len() != n {
        let on_cycle = (0..n).find(|&s| indeg[s] > 0).unwrap_or(0);
        return Err(DagError::Cycle(on_cycle));
    }
    Ok(order)
}

/// Number of distinct complete trajectories ending at each terminal state,
/// by path-count DP over the topological order.
pub fn count_trajectories(spec: &DagSpec) -> Result<Vec<u128>, DagError> {
    let order = topological_order(spec)?;
    let mut paths = vec![0u128; spec.num_states];
    paths[0] = 1;
    for &s in &order {
        if paths[s] == 0 {
            continue;
        }
        for &c in &spec.children[s] {
            paths[c] += paths[s];
        }
    }
    Ok((0..spec.num_states)
        .map(|s| if spec.terminal[s] { paths[s] } else { 0 })
        .collect())
}

/// All complete trajectories, each exactly once, in deterministic
/// (lexicographic by child slot) order. Refuses if the total count exceeds
/// `cap`.
pub fn enumerate_trajectories(spec: &DagSpec, cap: u128) -> Result<Vec<Trajectory>, DagError> {
    let total: u128 = count_trajectories(spec)?.iter().sum();
    if total > cap {
        return Err(DagError::TooManyTrajectories { count: total, cap });
    }
    let mut out = Vec::with_capacity(total as usize);
    // DFS emits trajectories in child-slot order.
    fn dfs(spec: &DagSpec, path: &mut Vec<StateId>, out: &mut Vec<Trajectory>) {
        let s = *path.last().unwrap();
        if spec.terminal[s] {
            out.push(Trajectory {
                states: path.clone(),
            });
            return;
        }
        for &c in &spec.children[s] {
            path.push(c);
            dfs(spec, path, out);
            path.pop();
        }
    }
    let mut path = vec![0usize];
    dfs(spec, &mut path, &mut out);
    Ok(out)
}

/// States reachable from the initial state.
pub fn reachable_from_initial(spec: &DagSpec) -> Vec<bool> {
    let mut seen = vec![false; spec.num_states];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(s) = queue.pop_front() {
        for &c in &spec.children[s] {
            if !seen[c] {
                seen[c] = true;
                queue.push_back(c);
            }
        }
    }
    seen
}

/// Random layered DAG with at most `max_states` states, every state reachable
/// from the source and co-reachable to a sink. Used by verification suites.
pub fn random_dag<R: rand::Rng>(rng: &mut R, max_states: usize) -> DagSpec {
    use rand::seq::SliceRandom;
    let max_states = max_states.max(4);
    let num_layers = rng.gen_range(2..=4usize);
    let mut layers: Vec<Vec<StateId>> = vec![vec![0]];
    let mut next_id = 1usize;
    for l in 0..num_layers {
        let remaining = max_states - next_id;
        if remaining == 0 {
            break;
        }
        let width = rng.gen_range(1..=remaining.min(if l + 1 == num_layers { 6 } else { 5 }));
        layers.push((next_id..next_id + width).collect());
        next_id += width;
    }
    let n = next_id;
    let mut children: Vec<Vec<StateId>> = vec![Vec::new(); n];
    for li in 0..layers.len() - 1 {
        let below: Vec<StateId> = layers[li + 1..].concat();
        for &s in &layers[li] {
            let k = rng.gen_range(1..=below.len().min(3));
            let mut picks: Vec<StateId> = below
                .choose_multiple(rng, k)
                .copied()
                .collect();
            picks.sort_unstable();
            children[s] = picks;
        }
        // Every state in the next layer needs a parent; attach orphans.
        for &t in &layers[li + 1] {
            let has_parent = layers[..=li]
                .iter()
                .flatten()
                .any(|&p| children[p].contains(&t));
            if !has_parent {
                let &p = layers[li].choose(rng).unwrap();
                children[p].push(t);
                children[p].sort_unstable();
            }
        }
    }
    let terminal: Vec<bool> = (0..n).map(|s| children[s].is_empty()).collect();
    let encoding: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            let mut e = vec![0.0; n];
            e[s] = 1.0;
            e
        })
        .collect();
    DagSpec::from_children(children, terminal, encoding)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain2() -> DagSpec {
        DagSpec::from_children(
            vec![vec![1], vec![]],
            vec![false, true],
            vec![vec![0.0], vec![1.0]],
        )
    }

    pub(crate) fn diamond() -> DagSpec {
        DagSpec::from_children(
            vec![vec![1, 2], vec![3], vec![3], vec![]],
            vec![false, false, false, true],
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
        )
    }

    #[test]
    fn minimal_chain_is_valid() {
        assert!(validate_dag(&chain2()).is_empty());
    }

    #[test]
    fn cycle_is_reported() {
        let mut children = vec![vec![1], vec![0]];
        children[1].sort_unstable();
        let spec = DagSpec::from_children(
            children,
            vec![false, false],
            vec![vec![0.0], vec![1.0]],
        );
        let v = validate_dag(&spec);
        assert!(v.iter().any(|x| matches!(x, Violation::Cycle { .. })), "{v:?}");
    }

    #[test]
    fn adjacency_inconsistency_is_reported() {
        // children(0)={1} but parents(1) emptied by hand.
        let mut spec = chain2();
        spec.parents[1].clear();
        let v = validate_dag(&spec);
        assert!(
            v.iter()
                .any(|x| matches!(x, Violation::InconsistentAdjacency { from: 0, to: 1 })),
            "{v:?}"
        );
    }

    #[test]
    fn topo_order_chain_and_diamond() {
        let chain3 = DagSpec::from_children(
            vec![vec![1], vec![2], vec![]],
            vec![false, false, true],
            vec![vec![0.0]; 3],
        );
        assert_eq!(topological_order(&chain3).unwrap(), vec![0, 1, 2]);
        assert_eq!(topological_order(&diamond()).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn topo_order_cycle_errors() {
        let spec = DagSpec::from_children(
            vec![vec![1], vec![2], vec![1]],
            vec![false, false, false],
            vec![vec![0.0]; 3],
        );
        assert!(matches!(topological_order(&spec), Err(DagError::Cycle(_))));
    }

    #[test]
    fn count_chain_diamond() {
        let chain3 = DagSpec::from_children(
            vec![vec![1], vec![2], vec![]],
            vec![false, false, true],
            vec![vec![0.0]; 3],
        );
        assert_eq!(count_trajectories(&chain3).unwrap()[2], 1);
        assert_eq!(count_trajectories(&diamond()).unwrap()[3], 2);
    }

    #[test]
    fn enumerate_agrees_with_count() {
        let spec = diamond();
        let trajs = enumerate_trajectories(&spec, 1000).unwrap();
        assert_eq!(trajs.len(), 2);
        assert!(trajs.iter().all(|t| t.is_valid(&spec)));
        let counts = count_trajectories(&spec).unwrap();
        assert_eq!(counts[3] as usize, trajs.len());
    }

    #[test]
    fn enumerate_refuses_over_cap() {
        let err = enumerate_trajectories(&diamond(), 1).unwrap_err();
        assert!(matches!(
            err,
            DagError::TooManyTrajectories { count: 2, cap: 1 }
        ));
    }

    #[test]
    fn text_round_trip() {
        let spec = diamond();
        let text = spec.to_text();
        let back = DagSpec::from_text(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn random_dags_are_valid() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let spec = random_dag(&mut rng, 50);
            assert!(validate_dag(&spec).is_empty());
            assert!(spec.num_states <= 50);
            let order = topological_order(&spec).unwrap();
            assert_eq!(order.len(), spec.num_states);
        }
    }
}
