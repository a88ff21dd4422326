//! Communication topologies: random geometric graphs, connectivity, and
//! time-varying schedules with their accumulated union graph.
//!
//! Client ids are 0-based in the Rust API and 1-based in JSON.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rng::{keyed, Domain};

pub const DEFAULT_ATTEMPT_CAP: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("client count must be positive")]
    EmptyGraph,
    #[error("radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("client id {id} out of range for m = {m}")]
    OutOfRange { id: usize, m: usize },
    #[error("invalid edge ({0}, {1})")]
    BadEdge(usize, usize),
    #[error("no connected RGG after {attempts} attempts (m = {m}, radius = {radius})")]
    NotConnected { m: usize, radius: f64, attempts: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub m: usize,
    pub radius: Option<f64>,
    pub seed: Option<u64>,
    pub coordinates: Option<Vec<[f64; 2]>>,
    /// Sorted, each pair stored once with `i < j`.
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
}

impl Topology {
    pub fn from_edges(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        if m == 0 {
            return Err(GraphError::EmptyGraph);
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j || i >= m || j >= m {
                return Err(GraphError::BadEdge(i, j));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adj = vec![Vec::new(); m];
        for &(i, j) in &edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        Ok(Topology { m, radius: None, seed: None, coordinates: None, edges, adj })
    }

    pub fn complete(m: usize) -> Result<Self, GraphError> {
        Self::from_edges(m, (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))))
    }

    pub fn path(m: usize) -> Result<Self, GraphError> {
        Self::from_edges(m, (1..m).map(|i| (i - 1, i)))
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        self.edges.binary_search(&key).ok()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.edge_index(i, j).is_some()
    }

    /// Sorted neighbor list of `i`, excluding `i`.
    pub fn neighbors(&self, i: usize) -> Result<&[usize], GraphError> {
        self.adj.get(i).map(|v| v.as_slice()).ok_or(GraphError::OutOfRange { id: i, m: self.m })
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.m];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.m
    }
}

/// Place `m` clients uniformly in the unit square and connect pairs at
/// distance `<= radius`.
pub fn generate_rgg(m: usize, radius: f64, seed: u64) -> Result<Topology, GraphError> {
    rgg_attempt(m, radius, seed, 0)
}

fn rgg_attempt(m: usize, radius: f64, seed: u64, attempt: u64) -> Result<Topology, GraphError> {
    if m == 0 {
        return Err(GraphError::EmptyGraph);
    }
    if !(radius > 0.0) {
        return Err(GraphError::BadRadius(radius));
    }
    let mut rng = keyed(seed, Domain::Topology, attempt, 0);
    let coords: Vec<[f64; 2]> = (0..m).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
    let mut edges = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            if (dx * dx + dy * dy).sqrt() <= radius {
                edges.push((i, j));
            }
        }
    }
    let mut t = Topology::from_edges(m, edges)?;
    t.radius = Some(radius);
    t.seed = Some(seed);
    t.coordinates = Some(coords);
    Ok(t)
}

/// Redraw with fresh sub-seeds until the graph is connected. Returns the
/// accepted topology and the number of attempts used.
pub fn regenerate_connected_rgg(
    m: usize,
    radius: f64,
    seed: u64,
    attempt_cap: usize,
) -> Result<(Topology, usize), GraphError> {
    for attempt in 0..attempt_cap.max(1) {
        let t = rgg_attempt(m, radius, seed, attempt as u64)?;
        if t.is_connected() {
            return Ok((t, attempt + 1));
        }
    }
    Err(GraphError::NotConnected { m, radius, attempts: attempt_cap })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyMode {
    #[default]
    Static,
    PerIteration,
}

/// A topology per iteration plus the union of every edge realized so far.
#[derive(Debug, Clone)]
pub struct TopologySchedule {
    pub base: Topology,
    pub mode: TopologyMode,
    pub attempt_cap: usize,
    union_edges: BTreeSet<(usize, usize)>,
}

impl TopologySchedule {
    pub fn new(base: Topology, mode: TopologyMode) -> Self {
        let union_edges = base.edges.iter().copied().collect();
        TopologySchedule { base, mode, attempt_cap: DEFAULT_ATTEMPT_CAP, union_edges }
    }

    /// Topology in force at iteration `k`. Regenerated graphs are keyed on
    /// the base seed and `k`, so any iteration can be re-materialized.
    pub fn at(&self, k: u64) -> Result<Topology, GraphError> {
        match self.mode {
            TopologyMode::Static => Ok(self.base.clone()),
            TopologyMode::PerIteration => {
                let radius = self.base.radius.unwrap_or(std::f64::consts::SQRT_2);
                let seed = self.base.seed.unwrap_or(0) ^ (k.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                regenerate_connected_rgg(self.base.m, radius, seed, self.attempt_cap).map(|(t, _)| t)
            }
        }
    }

    pub fn observe(&mut self, t: &Topology) {
        self.union_edges.extend(t.edges.iter().copied());
    }

    pub fn union_edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.union_edges
    }
}

#[derive(Serialize, Deserialize)]
struct TopologyJson {
    m: usize,
    radius: Option<f64>,
    seed: Option<u64>,
    coordinates: Option<Vec<[f64; 2]>>,
    edges: Vec<[usize; 2]>,
}

impl Serialize for Topology {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TopologyJson {
            m: self.m,
            radius: self.radius,
            seed: self.seed,
            coordinates: self.coordinates.clone(),
            edges: self.edges.iter().map(|&(i, j)| [i + 1, j + 1]).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Topology {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = TopologyJson::deserialize(d)?;
        if j.edges.iter().any(|e| e[0] == 0 || e[1] == 0) {
            return Err(serde::de::Error::custom("edge ids are 1-based"));
        }
        let mut t = Topology::from_edges(j.m, j.edges.iter().map(|e| (e[0] - 1, e[1] - 1)))
            .map_err(serde::de::Error::custom)?;
        t.radius = j.radius;
        t.seed = j.seed;
        t.coordinates = j.coordinates;
        Ok(t)
    }
}
