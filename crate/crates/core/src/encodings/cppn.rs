//! Compositional pattern-producing networks.
//!
//! Node ids `0..4` are the fixed inputs `(x, y, r, bias)`, ids
//! `4..4+channels` are the outputs, hidden nodes follow. Each pixel feeds
//! `x, y ∈ [-1, 1]` (centered), `r = sqrt(x² + y²)` and `bias = 1`; output
//! sums pass through the node activation and then a sigmoid.

use std::collections::{HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const NUM_INPUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sine,
    Sigmoid,
    Gaussian,
    Identity,
    Abs,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Sine,
        Activation::Sigmoid,
        Activation::Gaussian,
        Activation::Identity,
        Activation::Abs,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sine => x.sin(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gaussian => (-x * x).exp(),
            Activation::Identity => x,
            Activation::Abs => x.abs(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Input,
    Hidden,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub role: NodeRole,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    pub enabled: bool,
    pub innovation: u64,
}

/// Mutation probabilities. Weight perturbation is drawn per connection;
/// the structural operators fire at most once per call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationParams {
    pub weight_perturb_prob: f64,
    pub weight_sigma: f64,
    pub add_connection_prob: f64,
    pub add_node_prob: f64,
    pub toggle_enable_prob: f64,
    pub activation_swap_prob: f64,
}

impl Default for MutationParams {
    fn default() -> Self {
        MutationParams {
            weight_perturb_prob: 0.8,
            weight_sigma: 0.5,
            add_connection_prob: 0.05,
            add_node_prob: 0.03,
            toggle_enable_prob: 0.01,
            activation_swap_prob: 0.05,
        }
    }
}

impl MutationParams {
    pub fn none() -> Self {
        MutationParams {
            weight_perturb_prob: 0.0,
            weight_sigma: 0.0,
            add_connection_prob: 0.0,
            add_node_prob: 0.0,
            toggle_enable_prob: 0.0,
            activation_swap_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.weight_perturb_prob,
            self.add_connection_prob,
            self.add_node_prob,
            self.toggle_enable_prob,
            self.activation_swap_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(format!("mutation probabilities must lie in [0,1]: {self:?}")));
        }
        if !(self.weight_sigma.is_finite() && self.weight_sigma >= 0.0) {
            return Err(Error::Validation("weight sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CppnGenome {
    pub nodes: Vec<Node>,
    pub connections: Vec<Connection>,
    /// Next innovation number to hand out.
    pub next_innovation: u64,
}

impl CppnGenome {
    /// Inputs fully connected to `channels` identity outputs, weights `N(0,1)`.
    pub fn minimal(channels: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut nodes: Vec<Node> = (0..NUM_INPUTS)
            .map(|id| Node {
                id,
                role: NodeRole::Input,
                activation: Activation::Identity,
            })
            .collect();
        nodes.extend((0..channels).map(|k| Node {
            id: NUM_INPUTS + k,
            role: NodeRole::Output,
            activation: Activation::Identity,
        }));
        let mut connections = Vec::with_capacity(NUM_INPUTS * channels);
        for src in 0..NUM_INPUTS {
            for k in 0..channels {
                connections.push(Connection {
                    src,
                    dst: NUM_INPUTS + k,
                    weight: normal.sample(rng),
                    enabled: true,
                    innovation: connections.len() as u64,
                });
            }
        }
        CppnGenome {
            nodes,
            next_innovation: connections.len() as u64,
            connections,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.nodes.iter().filter(|n| n.role == NodeRole::Output).count()
    }

    pub fn num_hidden(&self) -> usize {
        self.nodes.iter().filter(|n| n.role == NodeRole::Hidden).count()
    }

    fn next_node_id(&self) -> usize {
        self.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0)
    }

    /// Output node ids in channel order.
    fn output_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| n.role == NodeRole::Output)
            .map(|n| n.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Structural checks; returns a topological order over all connections
    /// (enabled or not).
    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut roles = HashMap::new();
        for n in &self.nodes {
            if roles.insert(n.id, n.role).is_some() {
                return Err(Error::Genome(format!("duplicate node id {}", n.id)));
            }
        }
        for id in 0..NUM_INPUTS {
            if roles.get(&id) != Some(&NodeRole::Input) {
                return Err(Error::Genome(format!("node {id} must be an input")));
            }
        }
        if roles.values().filter(|r| **r == NodeRole::Input).count() != NUM_INPUTS {
            return Err(Error::Genome("exactly four input nodes are required".into()));
        }
        let mut innovations = HashSet::new();
        let mut edges = HashSet::new();
        for c in &self.connections {
            let (Some(src), Some(dst)) = (roles.get(&c.src), roles.get(&c.dst)) else {
                return Err(Error::Genome(format!("connection {}→{} names a missing node", c.src, c.dst)));
            };
            if *dst == NodeRole::Input || *src == NodeRole::Output {
                return Err(Error::Genome(format!("connection {}→{} runs against the feed-forward direction", c.src, c.dst)));
            }
            if !c.weight.is_finite() {
                return Err(Error::Genome(format!("connection {}→{} has a non-finite weight", c.src, c.dst)));
            }
            if !innovations.insert(c.innovation) {
                return Err(Error::Genome(format!("duplicate innovation number {}", c.innovation)));
            }
            if c.innovation >= self.next_innovation {
                return Err(Error::Genome(format!("innovation {} not below counter {}", c.innovation, self.next_innovation)));
            }
            if !edges.insert((c.src, c.dst)) {
                return Err(Error::Genome(format!("duplicate connection {}→{}", c.src, c.dst)));
            }
        }
        topological_order(&self.nodes, &self.connections)
            .ok_or_else(|| Error::Genome("connection graph has a cycle".into()))
    }

    /// Renders one image; every output is squashed through a sigmoid.
    pub fn render(&self, height: usize, width: usize, channels: usize) -> Result<Image> {
        let order = self.validate()?;
        let outputs = self.output_ids();
        if outputs.len() != channels {
            return Err(Error::Genome(format!(
                "genome has {} outputs, image needs {channels} channels",
                outputs.len()
            )));
        }
        let slot: HashMap<usize, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        // incoming enabled edges per node slot
        let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.nodes.len()];
        for c in self.connections.iter().filter(|c| c.enabled) {
            incoming[slot[&c.dst]].push((slot[&c.src], c.weight));
        }
        let order: Vec<usize> = order.into_iter().map(|id| slot[&id]).collect();
        let output_slots: Vec<usize> = outputs.iter().map(|id| slot[id]).collect();

        let coord = |i: usize, n: usize| {
            if n == 1 {
                0.0
            } else {
                2.0 * i as f64 / (n - 1) as f64 - 1.0
            }
        };
        let plane = height * width;
        let mut data = vec![0.0f32; channels * plane];
        let mut values = vec![0.0f64; self.nodes.len()];
        for row in 0..height {
            let y = coord(row, height);
            for col in 0..width {
                let x = coord(col, width);
                values[0] = x;
                values[1] = y;
                values[2] = (x * x + y * y).sqrt();
                values[3] = 1.0;
                for &s in &order {
                    if self.nodes[s].role == NodeRole::Input {
                        continue;
                    }
                    let sum: f64 = incoming[s].iter().map(|&(src, w)| values[src] * w).sum();
                    values[s] = self.nodes[s].activation.apply(sum);
                }
                for (k, &s) in output_slots.iter().enumerate() {
                    data[k * plane + row * width + col] = sigmoid(values[s]) as f32;
                }
            }
        }
        Image::from_vec(channels, height, width, data)
    }

    fn successors(&self) -> HashMap<usize, Vec<usize>> {
        let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
        for c in &self.connections {
            adj.entry(c.src).or_default().push(c.dst);
        }
        adj
    }

    /// Adding `src→dst` keeps the graph acyclic.
    fn edge_is_safe(&self, src: &Node, dst: &Node, adj: &HashMap<usize, Vec<usize>>) -> bool {
        src.id != dst.id
            && src.role != NodeRole::Output
            && dst.role != NodeRole::Input
            && !adj.get(&src.id).is_some_and(|d| d.contains(&dst.id))
            && !reaches(adj, dst.id, src.id)
    }

    fn push_connection(&mut self, src: usize, dst: usize, weight: f64) {
        self.connections.push(Connection {
            src,
            dst,
            weight,
            enabled: true,
            innovation: self.next_innovation,
        });
        self.next_innovation += 1;
    }

    /// Returns a mutated copy; inapplicable operators are skipped.
    pub fn mutate(&self, params: &MutationParams, rng: &mut impl Rng) -> CppnGenome {
        let mut g = self.clone();
        let perturb = Normal::new(0.0, params.weight_sigma.max(0.0)).expect("valid sigma");
        for c in &mut g.connections {
            if rng.random_bool(params.weight_perturb_prob) {
                c.weight += perturb.sample(rng);
            }
        }
        if rng.random_bool(params.add_connection_prob) {
            g.add_connection(rng);
        }
        if rng.random_bool(params.add_node_prob) {
            g.add_node(rng);
        }
        if rng.random_bool(params.toggle_enable_prob) && !g.connections.is_empty() {
            let i = rng.random_range(0..g.connections.len());
            g.connections[i].enabled = !g.connections[i].enabled;
        }
        if rng.random_bool(params.activation_swap_prob) {
            let hidden: Vec<usize> = (0..g.nodes.len())
                .filter(|&i| g.nodes[i].role == NodeRole::Hidden)
                .collect();
            if let Some(&i) = hidden.choose(rng) {
                g.nodes[i].activation = *Activation::ALL.choose(rng).expect("non-empty");
            }
        }
        g
    }

    /// Adds an edge between a random unconnected pair that keeps the graph
    /// acyclic. A few random pairs are tried first; only when they all fail is
    /// every pair enumerated, so a legal edge is found whenever one exists.
    pub fn add_connection(&mut self, rng: &mut impl Rng) -> bool {
        const RANDOM_TRIES: usize = 32;
        let adj = self.successors();
        let mut chosen = None;
        for _ in 0..RANDOM_TRIES {
            let src = self.nodes.choose(rng).expect("inputs exist");
            let dst = self.nodes.choose(rng).expect("inputs exist");
            if self.edge_is_safe(src, dst, &adj) {
                chosen = Some((src.id, dst.id));
                break;
            }
        }
        if chosen.is_none() {
            let mut candidates = Vec::new();
            for src in &self.nodes {
                for dst in &self.nodes {
                    if self.edge_is_safe(src, dst, &adj) {
                        candidates.push((src.id, dst.id));
                    }
                }
            }
            chosen = candidates.choose(rng).copied();
        }
        match chosen {
            Some((src, dst)) => {
                let weight = Normal::new(0.0, 1.0).expect("valid").sample(rng);
                self.push_connection(src, dst, weight);
                true
            }
            None => false,
        }
    }

    /// Splits a random enabled connection `a→b` into `a→new` (weight 1) and
    /// `new→b` (old weight), disabling the original.
    pub fn add_node(&mut self, rng: &mut impl Rng) -> bool {
        let enabled: Vec<usize> = (0..self.connections.len())
            .filter(|&i| self.connections[i].enabled)
            .collect();
        let Some(&i) = enabled.choose(rng) else {
            return false;
        };
        let (src, dst, weight) = {
            let c = &mut self.connections[i];
            c.enabled = false;
            (c.src, c.dst, c.weight)
        };
        let id = self.next_node_id();
        self.nodes.push(Node {
            id,
            role: NodeRole::Hidden,
            activation: *Activation::ALL.choose(rng).expect("non-empty"),
        });
        self.push_connection(src, id, 1.0);
        self.push_connection(id, dst, weight);
        true
    }
}

fn reaches(adj: &HashMap<usize, Vec<usize>>, from: usize, to: usize) -> bool {
    let mut stack = vec![from];
    let mut seen = HashSet::new();
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        if seen.insert(n) {
            if let Some(next) = adj.get(&n) {
                stack.extend(next);
            }
        }
    }
    false
}

/// Kahn's algorithm over node ids; `None` on a cycle.
fn topological_order(nodes: &[Node], connections: &[Connection]) -> Option<Vec<usize>> {
    let mut indegree: HashMap<usize, usize> = nodes.iter().map(|n| (n.id, 0)).collect();
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for c in connections {
        *indegree.get_mut(&c.dst)? += 1;
        adj.entry(c.src).or_default().push(c.dst);
    }
    let mut ready: Vec<usize> = nodes.iter().filter(|n| indegree[&n.id] == 0).map(|n| n.id).collect();
    ready.sort_unstable_by(|a, b| b.cmp(a));
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(n) = ready.pop() {
        order.push(n);
        for dst in adj.get(&n).into_iter().flatten() {
            let d = indegree.get_mut(dst).expect("checked");
            *d -= 1;
            if *d == 0 {
                ready.push(*dst);
            }
        }
    }
    (order.len() == nodes.len()).then_some(order)
}
