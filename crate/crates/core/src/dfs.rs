//! Recursive state query benchmark: simulate `k` steps of depth-first search
//! on an undirected graph and report the current node, the stack (path from
//! the start) and the visited set.
//!
//! A step is a single push (descend to the smallest-id unvisited neighbor)
//! or a single pop (backtrack when no unvisited neighbor remains). A full
//! traversal of a connected graph with `V` nodes therefore takes exactly
//! `2(V − 1)` steps and ends with the stack holding only the start node.
//!
//! # Prompt and answer format
//!
//! [`render_prompt`] produces:
//!
//! ```text
//! Simulate depth-first search on an undirected graph.
//! Nodes: 0 to {V-1} ({V} nodes)
//! Edges: {a}-{b}, {a}-{b}, ...        (sorted, a < b)
//! Start node: {start}
//! Rules: keep a stack holding the path from the start node to the current node. At each step, if the current node has an unvisited neighbor, move to the smallest-numbered one and push it; otherwise pop the current node and return to the previous one. Each push or pop counts as one step.
//! Steps: {k}
//! Report the state after exactly {k} steps as a single line:
//! current: <id>; stack: <id,id,...>; visited: <id,id,...>
//! ```
//!
//! [`parse_answer`] reads the last line of a response that begins with
//! `current:` and follows `current: <id>; stack: <ids>; visited: <ids>`,
//! where `<ids>` is a nonempty comma-separated list of decimal ids and
//! whitespace around tokens is ignored.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Parameters an instance was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub edge_density: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfsInstance {
    pub num_nodes: u32,
    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub edges: Vec<(u32, u32)>,
    pub start: u32,
    /// Steps to simulate, after clamping.
    pub steps: usize,
    /// Steps asked for; differs from `steps` when clamped.
    pub requested_steps: usize,
    pub generation: Option<GenerationParams>,
}

/// Largest number of steps a connected graph with `num_nodes` nodes admits.
pub fn max_steps(num_nodes: u32) -> usize {
    2 * (num_nodes as usize).saturating_sub(1)
}

impl DfsInstance {
    /// Builds an instance from explicit edges; edges are normalized to
    /// `a < b`, sorted and deduplicated. `steps` beyond [`max_steps`] is
    /// clamped.
    pub fn new(num_nodes: u32, edges: &[(u32, u32)], start: u32, steps: usize) -> Result<Self> {
        let mut normalized: Vec<(u32, u32)> =
            edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        normalized.sort_unstable();
        normalized.dedup();
        let instance = Self {
            num_nodes,
            edges: normalized,
            start,
            steps: steps.min(max_steps(num_nodes)),
            requested_steps: steps,
            generation: None,
        };
        instance.validate()?;
        Ok(instance)
    }

    pub fn clamped(&self) -> bool {
        self.steps != self.requested_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.num_nodes < 2 {
            return bad(format!("need at least 2 nodes, got {}", self.num_nodes));
        }
        if self.start >= self.num_nodes {
            return bad(format!("start node {} out of range", self.start));
        }
        if self.steps > max_steps(self.num_nodes) {
            return bad(format!(
                "{} steps exceeds the realizable maximum",
                self.steps
            ));
        }
        for &(a, b) in &self.edges {
            if a == b {
                return bad(format!("self-loop on node {a}"));
            }
            if a > b || b >= self.num_nodes {
                return bad(format!("edge {a}-{b} is not normalized or out of range"));
            }
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return bad("duplicate or unsorted edges".into());
        }
        if !is_connected(self.num_nodes, &self.edges) {
            return bad("graph is not connected".into());
        }
        Ok(())
    }

    /// Sorted neighbor lists.
    pub fn adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.num_nodes as usize];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        adj.iter_mut().for_each(|n| n.sort_unstable());
        adj
    }
}

/// Connectivity check by union-find.
pub fn is_connected(num_nodes: u32, edges: &[(u32, u32)]) -> bool {
    let mut parent: Vec<usize> = (0..num_nodes as usize).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = num_nodes as usize;
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a as usize), find(&mut parent, b as usize));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components == 1
}

/// Random connected graph: a random spanning tree plus every other pair
/// independently with probability `edge_density`. The start node is drawn
/// uniformly; `steps` is clamped to `2(V − 1)`.
pub fn generate_instance(
    num_nodes: u32,
    edge_density: f64,
    steps: usize,
    seed: u64,
) -> Result<DfsInstance> {
    if num_nodes < 2 {
        return Err(Error::Generation(format!(
            "need at least 2 nodes, got {num_nodes}"
        )));
    }
    if !(0.0..=1.0).contains(&edge_density) {
        return Err(Error::Generation(format!(
            "edge density must lie in [0, 1], got {edge_density}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<u32> = (0..num_nodes).collect();
    order.shuffle(&mut rng);
    let mut edges = BTreeSet::new();
    for i in 1..order.len() {
        let parent = order[rng.random_range(0..i)];
        let child = order[i];
        edges.insert((parent.min(child), parent.max(child)));
    }
    for a in 0..num_nodes {
        for b in a + 1..num_nodes {
            let draw = rng.random::<f64>();
            if draw < edge_density {
                edges.insert((a, b));
            }
        }
    }
    let start = rng.random_range(0..num_nodes);
    let edges: Vec<_> = edges.into_iter().collect();
    let mut instance = DfsInstance::new(num_nodes, &edges, start, steps)?;
    instance.generation = Some(GenerationParams { edge_density, seed });
    Ok(instance)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfsState {
    pub current: u32,
    pub stack: Vec<u32>,
    pub visited: BTreeSet<u32>,
}

impl DfsState {
    pub fn initial(start: u32) -> Self {
        Self {
            current: start,
            stack: vec![start],
            visited: BTreeSet::from([start]),
        }
    }
}

/// States after steps `0..=instance.steps`.
pub fn dfs_trace(instance: &DfsInstance) -> Vec<DfsState> {
    let adj = instance.adjacency();
    let mut state = DfsState::initial(instance.start);
    let mut out = Vec::with_capacity(instance.steps + 1);
    out.push(state.clone());
    for _ in 0..instance.steps {
        let top = *state.stack.last().expect("stack never empties");
        match adj[top as usize]
            .iter()
            .find(|n| !state.visited.contains(n))
        {
            Some(&next) => {
                state.stack.push(next);
                state.visited.insert(next);
            }
            None if state.stack.len() > 1 => {
                state.stack.pop();
            }
            // traversal complete; validated instances never get here
            None => break,
        }
        state.current = *state.stack.last().unwrap();
        out.push(state.clone());
    }
    out
}

/// State after the instance's final step.
pub fn ground_truth(instance: &DfsInstance) -> DfsState {
    dfs_trace(instance).pop().expect("trace includes step 0")
}

/// Per-field exact-match flags (0 or 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub stack_exact: u8,
    pub current_exact: u8,
    pub visited_exact: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAnswer {
    State(DfsState),
    ParseFailure,
}

pub fn score_answer(truth: &DfsState, answer: &ParsedAnswer) -> AnswerScore {
    match answer {
        ParsedAnswer::State(a) => AnswerScore {
            stack_exact: (a.stack == truth.stack) as u8,
            current_exact: (a.current == truth.current) as u8,
            visited_exact: (a.visited == truth.visited) as u8,
        },
        ParsedAnswer::ParseFailure => AnswerScore {
            stack_exact: 0,
            current_exact: 0,
            visited_exact: 0,
        },
    }
}

fn join_ids<'a>(ids: impl IntoIterator<Item = &'a u32>) -> String {
    ids.into_iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Task description for one instance; see the module docs for the template.
pub fn render_prompt(instance: &DfsInstance) -> String {
    let edges = instance
        .edges
        .iter()
        .map(|(a, b)| format!("{a}-{b}"))
        .collect::<Vec<_>>()
        .join(", ");
    let v = instance.num_nodes;
    let k = instance.steps;
    format!(
        "Simulate depth-first search on an undirected graph.\n\
         Nodes: 0 to {last} ({v} nodes)\n\
         Edges: {edges}\n\
         Start node: {start}\n\
         Rules: keep a stack holding the path from the start node to the current node. \
         At each step, if the current node has an unvisited neighbor, move to the smallest-numbered one and push it; \
         otherwise pop the current node and return to the previous one. Each push or pop counts as one step.\n\
         Steps: {k}\n\
         Report the state after exactly {k} steps as a single line:\n\
         current: <id>; stack: <id,id,...>; visited: <id,id,...>\n",
        last = v - 1,
        start = instance.start,
    )
}

/// `current: <id>; stack: <ids>; visited: <ids>` with visited ascending.
pub fn render_answer(state: &DfsState) -> String {
    format!(
        "current: {}; stack: {}; visited: {}",
        state.current,
        join_ids(&state.stack),
        join_ids(&state.visited)
    )
}

fn parse_ids(s: &str) -> Option<Vec<u32>> {
    let ids: Option<Vec<u32>> = s.split(',').map(|t| t.trim().parse().ok()).collect();
    ids.filter(|v| !v.is_empty())
}

fn parse_field<'a>(part: &'a str, name: &str) -> Option<&'a str> {
    let (key, value) = part.split_once(':')?;
    (key.trim() == name).then_some(value)
}

fn parse_line(line: &str) -> Option<DfsState> {
    let parts: Vec<&str> = line.split(';').collect();
    if parts.len() != 3 {
        return None;
    }
    let current: u32 = parse_field(parts[0], "current")?.trim().parse().ok()?;
    let stack = parse_ids(parse_field(parts[1], "stack")?)?;
    let visited = parse_ids(parse_field(parts[2], "visited")?)?;
    Some(DfsState {
        current,
        stack,
        visited: visited.into_iter().collect(),
    })
}

/// Total parser: anything not matching the grammar is a
/// [`ParsedAnswer::ParseFailure`].
pub fn parse_answer(text: &str) -> ParsedAnswer {
    text.lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with("current:"))
        .and_then(parse_line)
        .map_or(ParsedAnswer::ParseFailure, ParsedAnswer::State)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchParams {
    pub num_nodes: u32,
    pub edge_density: f64,
    pub steps_min: usize,
    pub steps_max: usize,
    pub per_step: usize,
    pub seed: u64,
}

impl Default for BatchParams {
    fn default() -> Self {
        Self {
            num_nodes: 16,
            edge_density: 0.2,
            steps_min: 6,
            steps_max: 20,
            per_step: 80,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: String,
    pub instance: DfsInstance,
    pub truth: DfsState,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfsBatch {
    pub params: BatchParams,
    pub items: Vec<BatchItem>,
}

/// `per_step` instances for every step count in `steps_min..=steps_max`.
/// Instance seeds are successive `next_u64` draws of a ChaCha20 stream
/// seeded with `params.seed`.
pub fn generate_batch(params: &BatchParams) -> Result<DfsBatch> {
    if params.steps_min > params.steps_max {
        return Err(Error::Generation(format!(
            "steps_min {} exceeds steps_max {}",
            params.steps_min, params.steps_max
        )));
    }
    let mut seeds = ChaCha20Rng::seed_from_u64(params.seed);
    let mut items = Vec::new();
    for steps in params.steps_min..=params.steps_max {
        for i in 0..params.per_step {
            let instance = generate_instance(
                params.num_nodes,
                params.edge_density,
                steps,
                seeds.next_u64(),
            )?;
            items.push(BatchItem {
                id: format!("k{steps:02}-{i:03}"),
                truth: ground_truth(&instance),
                prompt: render_prompt(&instance),
                instance,
            });
        }
    }
    Ok(DfsBatch {
        params: params.clone(),
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub steps: usize,
    pub n: usize,
    pub stack_exact: f64,
    pub current_exact: f64,
    pub visited_exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub overall: ScoreRow,
    /// Items with no answer or an unparseable one.
    pub parse_failures: usize,
}

/// Scores answers (by item id) against a batch. Items without an answer
/// count as parse failures. Rows are keyed by the instance's clamped step
/// count; `overall.steps` is 0.
pub fn score_batch(batch: &DfsBatch, answers: &BTreeMap<String, String>) -> ScoreTable {
    let mut by_steps: BTreeMap<usize, [usize; 4]> = BTreeMap::new();
    let mut failures = 0;
    for item in &batch.items {
        let parsed = answers
            .get(&item.id)
            .map_or(ParsedAnswer::ParseFailure, |t| parse_answer(t));
        if parsed == ParsedAnswer::ParseFailure {
            failures += 1;
        }
        let s = score_answer(&item.truth, &parsed);
        let e = by_steps.entry(item.instance.steps).or_default();
        e[0] += 1;
        e[1] += s.stack_exact as usize;
        e[2] += s.current_exact as usize;
        e[3] += s.visited_exact as usize;
    }
    let row = |steps: usize, c: [usize; 4]| {
        let n = c[0].max(1) as f64;
        ScoreRow {
            steps,
            n: c[0],
            stack_exact: c[1] as f64 / n,
            current_exact: c[2] as f64 / n,
            visited_exact: c[3] as f64 / n,
        }
    };
    let mut total = [0usize; 4];
    let rows = by_steps
        .into_iter()
        .map(|(k, c)| {
            (0..4).for_each(|i| total[i] += c[i]);
            row(k, c)
        })
        .collect();
    ScoreTable {
        rows,
        overall: row(0, total),
        parse_failures: failures,
    }
}
