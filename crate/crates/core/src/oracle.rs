//! Exact shortest paths on explicit step-reverse graphs.
//!
//! Nodes are timesteps. An edge `(k, t)` with `k < t` carries a signed weight
//! and lets a walk descend from `t` to `k`. Every node also carries `dist0`,
//! the cost of jumping from that node straight to the clean end. The cost of a
//! descending walk `t -> ... -> m -> 0` is the sum of its edge weights plus
//! `dist0(m)`. Because edges always point to smaller timesteps the graph is a
//! DAG, so shortest walks exist even with negative weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepGraph {
    dist0: BTreeMap<usize, f64>,
    edges: BTreeMap<(usize, usize), f64>,
}

impl StepGraph {
    /// A graph containing only the clean node `0` with `dist0 = 0`.
    pub fn new() -> Self {
        let mut g = Self::default();
        g.dist0.insert(0, 0.0);
        g
    }

    pub fn add_node(&mut self, t: usize, dist0: f64) -> Result<()> {
        if !dist0.is_finite() {
            return Err(Error::Domain(format!("dist0 of node {t} is not finite")));
        }
        self.dist0.insert(t, dist0);
        Ok(())
    }

    /// Edge from `t` down to `k`.
    pub fn add_edge(&mut self, k: usize, t: usize, weight: f64) -> Result<()> {
        if k >= t {
            return Err(Error::Domain(format!("edge ({k}, {t}) must satisfy k < t")));
        }
        if !weight.is_finite() {
            return Err(Error::Domain(format!("edge ({k}, {t}) weight is not finite")));
        }
        for n in [k, t] {
            if !self.dist0.contains_key(&n) {
                return Err(Error::Domain(format!("edge ({k}, {t}) references unknown node {n}")));
            }
        }
        self.edges.insert((k, t), weight);
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.dist0.iter().map(|(&t, &d)| (t, d))
    }

    pub fn edges(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.edges.iter().map(|(&e, &w)| (e, w))
    }

    pub fn node_count(&self) -> usize {
        self.dist0.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Text form: `node <t> <dist0>` and `edge <k> <t> <weight>` lines.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut g = StepGraph::default();
        let mut pending_edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = || format!("graph line {}", lineno + 1);
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["node", t, d] => {
                    let t = parse_field::<usize>(t, &ctx)?;
                    let d = parse_field::<f64>(d, &ctx)?;
                    if g.dist0.insert(t, d).is_some() {
                        return Err(Error::format(ctx(), format!("duplicate node {t}")));
                    }
                    if !d.is_finite() {
                        return Err(Error::format(ctx(), "dist0 is not finite"));
                    }
                }
                ["edge", k, t, w] => pending_edges.push((
                    lineno,
                    parse_field::<usize>(k, &ctx)?,
                    parse_field::<usize>(t, &ctx)?,
                    parse_field::<f64>(w, &ctx)?,
                )),
                _ => return Err(Error::format(ctx(), format!("unrecognized line `{line}`"))),
            }
        }
        g.dist0.entry(0).or_insert(0.0);
        for (lineno, k, t, w) in pending_edges {
            if g.edges.contains_key(&(k, t)) {
                return Err(Error::format(
                    format!("graph line {}", lineno + 1),
                    format!("duplicate edge ({k}, {t})"),
                ));
            }
            g.add_edge(k, t, w)
                .map_err(|e| Error::format(format!("graph line {}", lineno + 1), e))?;
        }
        Ok(g)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, d) in self.nodes() {
            let _ = writeln!(out, "node {t} {d}");
        }
        for ((k, t), w) in self.edges() {
            let _ = writeln!(out, "edge {k} {t} {w}");
        }
        out
    }
}

fn parse_field<T: FromStr>(s: &str, ctx: &dyn Fn() -> String) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>()
        .map_err(|e| Error::format(ctx(), format!("`{s}`: {e}")))
}

/// Shortest distances plus, for every node, the next node on a shortest walk
/// (`None` means "jump to the clean end directly").
#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPaths {
    pub dist: BTreeMap<usize, f64>,
    pub next: BTreeMap<usize, Option<usize>>,
}

impl ShortestPaths {
    /// Node sequence of a shortest walk from `t`, ending with `0`.
    pub fn path_to_clean(&self, t: usize) -> Option<Vec<usize>> {
        let mut path = vec![t];
        let mut cur = t;
        while let Some(step) = self.next.get(&cur)? {
            path.push(*step);
            cur = *step;
        }
        if cur != 0 {
            path.push(0);
        }
        Some(path)
    }
}

/// Dynamic programming in increasing timestep order:
/// `D(t) = min(dist0(t), min_k edge(k, t) + D(k))`.
pub fn exact_shortest(graph: &StepGraph) -> ShortestPaths {
    let mut incoming: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for ((k, t), w) in graph.edges() {
        incoming.entry(t).or_default().push((k, w));
    }
    let mut dist = BTreeMap::new();
    let mut next = BTreeMap::new();
    for (t, d0) in graph.nodes() {
        let mut best = d0;
        let mut via = None;
        for &(k, w) in incoming.get(&t).map(Vec::as_slice).unwrap_or(&[]) {
            let cand = dist[&k] + w;
            if cand < best {
                best = cand;
                via = Some(k);
            }
        }
        dist.insert(t, best);
        next.insert(t, via);
    }
    ShortestPaths { dist, next }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepOrder {
    /// Edges sorted by their upper node.
    Topological,
    /// A fresh seeded shuffle of the edges on every sweep.
    Random { seed: u64 },
}

/// One fired relaxation: `dist(t)` went from `before` to `after` via `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxUpdate {
    pub k: usize,
    pub t: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixpoint {
    pub dist: BTreeMap<usize, f64>,
    /// Sweeps executed, including the final sweep that changed nothing.
    pub sweeps: usize,
    pub updates: Vec<RelaxUpdate>,
}

/// Starts from `dist = dist0` and applies
/// `if dist(t) > dist(k) + edge(k, t) { dist(t) = dist(k) + edge(k, t) }`
/// over all edges until a full sweep changes nothing.
pub fn relaxation_fixpoint(
    graph: &StepGraph,
    order: SweepOrder,
    max_sweeps: usize,
) -> Result<Fixpoint> {
    let mut dist: BTreeMap<usize, f64> = graph.nodes().collect();
    let mut edges: Vec<((usize, usize), f64)> = graph.edges().collect();
    let mut shuffler = match order {
        SweepOrder::Topological => {
            edges.sort_by_key(|&((k, t), _)| (t, k));
            None
        }
        SweepOrder::Random { seed } => Some(stream_rng(seed, Stream::Data)),
    };
    let mut updates = Vec::new();
    for sweep in 1..=max_sweeps {
        if let Some(rng) = shuffler.as_mut() {
            edges.shuffle(rng);
        }
        let mut changed = false;
        for &((k, t), w) in &edges {
            let cand = dist[&k] + w;
            let cur = dist[&t];
            if cur > cand {
                dist.insert(t, cand);
                updates.push(RelaxUpdate {
                    k,
                    t,
                    before: cur,
                    after: cand,
                });
                changed = true;
            }
        }
        if !changed {
            return Ok(Fixpoint {
                dist,
                sweeps: sweep,
                updates,
            });
        }
    }
    Err(Error::NonConvergence { max_sweeps })
}

/// Random step graph: node `0` plus up to `max_nodes - 1` distinct timesteps
/// in `[1, 1000]`, each pair connected with probability 1/2, weights in
/// `[-1, 1]`, `dist0` in `[0, 2]`.
pub fn random_step_graph<R: Rng>(rng: &mut R, max_nodes: usize) -> StepGraph {
    let n = rng.random_range(1..=max_nodes.max(1));
    let mut steps: Vec<usize> = (1..=1000).collect();
    steps.shuffle(rng);
    let mut chosen: Vec<usize> = steps.into_iter().take(n - 1).collect();
    chosen.sort_unstable();
    let mut g = StepGraph::new();
    for &t in &chosen {
        g.add_node(t, rng.random_range(0.0..=2.0))
            .expect("finite dist0");
    }
    let all: Vec<usize> = g.nodes().map(|(t, _)| t).collect();
    for (i, &t) in all.iter().enumerate() {
        for &k in &all[..i] {
            if rng.random_bool(0.5) {
                g.add_edge(k, t, rng.random_range(-1.0..=1.0))
                    .expect("valid edge");
            }
        }
    }
    g
}

/// Outcome of comparing relaxation against dynamic programming on random graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTest {
    pub graphs: usize,
    pub matched: usize,
    pub max_abs_diff: f64,
}

/// Runs relaxation (alternating topological and random sweep orders) and the
/// exact solver on `graphs` random graphs; a graph matches when every node
/// agrees within `tol`.
pub fn self_test(graphs: usize, max_nodes: usize, seed: u64, tol: f64) -> Result<SelfTest> {
    let mut rng = stream_rng(seed, Stream::Dataset);
    let mut matched = 0;
    let mut max_abs_diff = 0.0f64;
    for i in 0..graphs {
        let g = random_step_graph(&mut rng, max_nodes);
        let order = if i % 2 == 0 {
            SweepOrder::Topological
        } else {
            SweepOrder::Random {
                seed: seed.wrapping_add(i as u64),
            }
        };
        let fix = relaxation_fixpoint(&g, order, g.edge_count() + 2)?;
        let exact = exact_shortest(&g);
        let diff = exact
            .dist
            .iter()
            .map(|(t, d)| (d - fix.dist[t]).abs())
            .fold(0.0, f64::max);
        max_abs_diff = max_abs_diff.max(diff);
        if diff <= tol {
            matched += 1;
        }
    }
    Ok(SelfTest {
        graphs,
        matched,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> StepGraph {
        let mut g = StepGraph::new();
        g.add_node(2, 0.3).unwrap();
        g.add_node(10, 1.0).unwrap();
        g.add_edge(2, 10, 0.2).unwrap();
        g
    }

    #[test]
    fn no_edges_returns_dist0() {
        let mut g = StepGraph::new();
        g.add_node(5, 0.7).unwrap();
        g.add_node(9, 1.2).unwrap();
        let sp = exact_shortest(&g);
        assert_eq!(sp.dist[&5], 0.7);
        assert_eq!(sp.dist[&9], 1.2);
        let fix = relaxation_fixpoint(&g, SweepOrder::Topological, 3).unwrap();
        assert_eq!(fix.sweeps, 1);
        assert!(fix.updates.is_empty());
    }

    #[test]
    fn triangle_takes_the_detour() {
        let g = triangle();
        let sp = exact_shortest(&g);
        assert!((sp.dist[&10] - 0.5).abs() < 1e-15);
        assert_eq!(sp.path_to_clean(10).unwrap(), vec![10, 2, 0]);
        for order in [SweepOrder::Topological, SweepOrder::Random { seed: 3 }] {
            let fix = relaxation_fixpoint(&g, order, 5).unwrap();
            assert_eq!(fix.dist[&10], sp.dist[&10]);
        }
    }

    #[test]
    fn topological_order_needs_one_updating_sweep() {
        let mut rng = stream_rng(9, Stream::Dataset);
        for _ in 0..50 {
            let g = random_step_graph(&mut rng, 30);
            let fix = relaxation_fixpoint(&g, SweepOrder::Topological, 2).unwrap();
            assert!(fix.sweeps <= 2);
        }
    }

    #[test]
    fn random_order_can_run_out_of_sweeps() {
        // the first sweep always fires here, so one sweep cannot certify a fixpoint
        let mut g = StepGraph::new();
        for t in 1..=40 {
            g.add_node(t, 2.0).unwrap();
        }
        for t in 1..=40 {
            g.add_edge(t - 1, t, -1.0).unwrap();
        }
        assert!(matches!(
            relaxation_fixpoint(&g, SweepOrder::Random { seed: 0 }, 1),
            Err(Error::NonConvergence { max_sweeps: 1 })
        ));
        let fix = relaxation_fixpoint(&g, SweepOrder::Random { seed: 0 }, 100).unwrap();
        assert_eq!(fix.dist[&40], -40.0);
    }

    #[test]
    fn rejects_invalid_edges() {
        let mut g = triangle();
        assert!(g.add_edge(10, 2, 0.1).is_err());
        assert!(g.add_edge(5, 5, 0.1).is_err());
        assert!(g.add_edge(2, 11, 0.1).is_err());
        assert!(g.add_edge(0, 10, f64::NAN).is_err());
    }

    #[test]
    fn text_round_trip() {
        let g = triangle();
        let text = g.to_text();
        assert_eq!(StepGraph::parse(&text).unwrap(), g);
        let parsed = StepGraph::parse(
            "# comment\nnode 2 0.3\nnode 10 1.0 # trailing\n\nedge 2 10 0.2\n",
        )
        .unwrap();
        assert_eq!(parsed, g);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = StepGraph::parse("node 1 0.5\nedge 1 0 0.1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = StepGraph::parse("node 1 abc\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = StepGraph::parse("vertex 1 0.5\n").unwrap_err();
        assert!(err.to_string().contains("unrecognized"), "{err}");
    }
}
