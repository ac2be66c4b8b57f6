//! Homogeneous directed dependency graph over node/service/pod entities.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("call references unknown service {0:?}")]
    DanglingCall(String),
    #[error("unknown entity id {0:?}")]
    UnknownEntity(String),
    #[error("duplicate entity id {0:?}")]
    DuplicateEntity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Node,
    Service,
    Pod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Call,
    Membership,
    Placement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub level: Level,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parent_service: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub host_node: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub relation: Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
}

/// Topology spec file schema: services with replica counts, a node pool, and
/// service-call pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySpec {
    pub services: Vec<ServiceSpec>,
    pub nodes: Vec<String>,
    pub calls: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub replicas: usize,
}

/// Edge weights and node scores from a trained localizer; weights are
/// attention mass normalized per source node.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Saliency {
    pub edge: BTreeMap<(String, String), f64>,
    pub node: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGraph {
    entities: Vec<Entity>,
    edges: Vec<Edge>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    #[serde(skip)]
    out_adj: Vec<Vec<usize>>,
    #[serde(skip)]
    in_adj: Vec<Vec<usize>>,
}

impl DependencyGraph {
    pub fn from_parts(entities: Vec<Entity>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let mut index = BTreeMap::new();
        for (i, e) in entities.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateEntity(e.id.clone()));
            }
        }
        for e in &edges {
            if !index.contains_key(&e.src) {
                return Err(GraphError::UnknownEntity(e.src.clone()));
            }
            if !index.contains_key(&e.dst) {
                return Err(GraphError::UnknownEntity(e.dst.clone()));
            }
        }
        let mut g = Self {
            entities,
            edges,
            index,
            out_adj: Vec::new(),
            in_adj: Vec::new(),
        };
        g.rebuild_adjacency();
        Ok(g)
    }

    /// Rebuilds the skipped adjacency caches; call after deserialization.
    pub fn rebuild_adjacency(&mut self) {
        self.index = self
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        self.out_adj = vec![Vec::new(); self.entities.len()];
        self.in_adj = vec![Vec::new(); self.entities.len()];
        for (k, e) in self.edges.iter().enumerate() {
            self.out_adj[self.index[&e.src]].push(k);
            self.in_adj[self.index[&e.dst]].push(k);
        }
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn entity(&self, id: &str) -> Result<&Entity, GraphError> {
        self.index
            .get(id)
            .map(|&i| &self.entities[i])
            .ok_or_else(|| GraphError::UnknownEntity(id.to_string()))
    }

    /// Stable position of an entity in `entities()` order.
    pub fn position(&self, id: &str) -> Result<usize, GraphError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownEntity(id.to_string()))
    }

    pub fn has_call_edge(&self, src: &str, dst: &str) -> bool {
        self.edges
            .iter()
            .any(|e| e.relation == Relation::Call && e.src == src && e.dst == dst)
    }

    /// In- or out-neighbors over all relation kinds, sorted by id.
    pub fn neighbors(&self, id: &str, direction: Direction) -> Result<Vec<String>, GraphError> {
        let i = self.position(id)?;
        let adj = match direction {
            Direction::Out => &self.out_adj[i],
            Direction::In => &self.in_adj[i],
        };
        let mut out: Vec<String> = adj
            .iter()
            .map(|&k| match direction {
                Direction::Out => self.edges[k].dst.clone(),
                Direction::In => self.edges[k].src.clone(),
            })
            .collect();
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Induced subgraph over all entities within `hops` undirected hops of any
    /// seed, with all induced edges.
    pub fn khop_subgraph(&self, seeds: &[String], hops: usize) -> Result<DependencyGraph, GraphError> {
        if seeds.is_empty() {
            return Err(GraphError::UnknownEntity("<empty seed set>".into()));
        }
        let mut dist: BTreeMap<usize, usize> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for s in seeds {
            let i = self.position(s)?;
            dist.entry(i).or_insert(0);
            queue.push_back(i);
        }
        while let Some(i) = queue.pop_front() {
            let d = dist[&i];
            if d == hops {
                continue;
            }
            let mut adj: Vec<usize> = Vec::new();
            for &k in self.out_adj[i].iter().chain(&self.in_adj[i]) {
                let e = &self.edges[k];
                let other = if self.index[&e.src] == i {
                    self.index[&e.dst]
                } else {
                    self.index[&e.src]
                };
                adj.push(other);
            }
            for j in adj {
                if let std::collections::btree_map::Entry::Vacant(v) = dist.entry(j) {
                    v.insert(d + 1);
                    queue.push_back(j);
                }
            }
        }
        let keep: BTreeSet<usize> = dist.keys().copied().collect();
        let entities: Vec<Entity> = self
            .entities
            .iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, e)| e.clone())
            .collect();
        let edges: Vec<Edge> = self
            .edges
            .iter()
            .filter(|e| keep.contains(&self.index[&e.src]) && keep.contains(&self.index[&e.dst]))
            .cloned()
            .collect();
        DependencyGraph::from_parts(entities, edges)
    }

    /// All simple directed call-edge paths `src -> dst` of length `<= max_len`,
    /// ordered by descending mean edge saliency, then lexicographically.
    pub fn enumerate_paths(
        &self,
        src: &str,
        dst: &str,
        max_len: usize,
        saliency: Option<&Saliency>,
    ) -> Result<Vec<Vec<String>>, GraphError> {
        self.position(src)?;
        self.position(dst)?;
        let mut paths = Vec::new();
        let mut stack = vec![src.to_string()];
        self.dfs_paths(src, dst, max_len, &mut stack, &mut paths);
        let score = |p: &[String]| -> f64 {
            if p.len() < 2 {
                return 0.0;
            }
            let s: f64 = p
                .windows(2)
                .map(|w| {
                    saliency
                        .and_then(|sal| sal.edge.get(&(w[0].clone(), w[1].clone())))
                        .copied()
                        .unwrap_or(0.0)
                })
                .sum();
            s / (p.len() - 1) as f64
        };
        paths.sort_by(|a, b| {
            score(b)
                .partial_cmp(&score(a))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.cmp(b))
        });
        Ok(paths)
    }

    fn dfs_paths(
        &self,
        cur: &str,
        dst: &str,
        max_len: usize,
        stack: &mut Vec<String>,
        paths: &mut Vec<Vec<String>>,
    ) {
        if cur == dst {
            paths.push(stack.clone());
            if stack.len() == 1 {
                return; // zero-length path found; still explore cycles back? no: simple paths only
            }
            return;
        }
        if stack.len() > max_len {
            return;
        }
        let i = self.index[cur];
        let mut nexts: Vec<&Edge> = self.out_adj[i]
            .iter()
            .map(|&k| &self.edges[k])
            .filter(|e| e.relation == Relation::Call)
            .collect();
        nexts.sort_by(|a, b| a.dst.cmp(&b.dst));
        for e in nexts {
            if stack.contains(&e.dst) {
                continue;
            }
            stack.push(e.dst.clone());
            self.dfs_paths(&e.dst, dst, max_len, stack, paths);
            stack.pop();
        }
    }
}

/// Short pod prefix: capitalized first character of the service name.
pub fn pod_id(service: &str, replica: usize) -> String {
    let initial = service
        .chars()
        .next()
        .map(|c| c.to_ascii_uppercase())
        .unwrap_or('X');
    format!("{service}/{initial}{replica}")
}

/// Flatten a topology spec into the homogeneous graph: one entity per node,
/// service, and pod; call edges at both service and pod level; membership and
/// placement edges for every pod. Pods are placed round-robin, with the start
/// offset rotated by `seed`.
pub fn build_graph(spec: &TopologySpec, seed: u64) -> Result<DependencyGraph, GraphError> {
    let service_names: BTreeSet<&str> = spec.services.iter().map(|s| s.name.as_str()).collect();
    for (src, dst) in &spec.calls {
        if !service_names.contains(src.as_str()) {
            return Err(GraphError::DanglingCall(src.clone()));
        }
        if !service_names.contains(dst.as_str()) {
            return Err(GraphError::DanglingCall(dst.clone()));
        }
    }

    let mut entities = Vec::new();
    let mut edges = Vec::new();
    for node in &spec.nodes {
        entities.push(Entity {
            id: node.clone(),
            level: Level::Node,
            parent_service: None,
            host_node: None,
        });
    }
    for svc in &spec.services {
        entities.push(Entity {
            id: svc.name.clone(),
            level: Level::Service,
            parent_service: None,
            host_node: None,
        });
    }
    let mut pods_of: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut global_idx = 0usize;
    for svc in &spec.services {
        for r in 0..svc.replicas {
            let id = pod_id(&svc.name, r);
            let host = spec.nodes[(global_idx + seed as usize) % spec.nodes.len().max(1)].clone();
            entities.push(Entity {
                id: id.clone(),
                level: Level::Pod,
                parent_service: Some(svc.name.clone()),
                host_node: Some(host.clone()),
            });
            edges.push(Edge {
                src: id.clone(),
                dst: svc.name.clone(),
                relation: Relation::Membership,
            });
            edges.push(Edge {
                src: id.clone(),
                dst: host,
                relation: Relation::Placement,
            });
            pods_of.entry(&svc.name).or_default().push(id);
            global_idx += 1;
        }
    }
    for (src, dst) in &spec.calls {
        edges.push(Edge {
            src: src.clone(),
            dst: dst.clone(),
            relation: Relation::Call,
        });
        for ps in pods_of.get(src.as_str()).into_iter().flatten() {
            for pd in pods_of.get(dst.as_str()).into_iter().flatten() {
                edges.push(Edge {
                    src: ps.clone(),
                    dst: pd.clone(),
                    relation: Relation::Call,
                });
            }
        }
    }
    DependencyGraph::from_parts(entities, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_graph() -> DependencyGraph {
        let entities = ["a", "b", "c", "d"]
            .iter()
            .map(|id| Entity {
                id: id.to_string(),
                level: Level::Service,
                parent_service: None,
                host_node: None,
            })
            .collect();
        let edges = [("a", "b"), ("b", "c"), ("c", "d")]
            .iter()
            .map(|(s, d)| Edge {
                src: s.to_string(),
                dst: d.to_string(),
                relation: Relation::Call,
            })
            .collect();
        DependencyGraph::from_parts(entities, edges).unwrap()
    }

    #[test]
    fn sizes_match_dataset_topologies() {
        let spec = TopologySpec {
            services: (0..10)
                .map(|i| ServiceSpec {
                    name: format!("svc{i}"),
                    replicas: 4,
                })
                .collect(),
            nodes: (0..6).map(|i| format!("node{i}")).collect(),
            calls: vec![],
        };
        let g = build_graph(&spec, 0).unwrap();
        assert_eq!(g.len(), 10 + 40 + 6);
    }

    #[test]
    fn minimal_topology() {
        let spec = TopologySpec {
            services: vec![ServiceSpec {
                name: "solo".into(),
                replicas: 1,
            }],
            nodes: vec!["n0".into()],
            calls: vec![],
        };
        let g = build_graph(&spec, 0).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.edges().len(), 2);
    }

    #[test]
    fn membership_edge_count() {
        let spec = TopologySpec {
            services: (0..12)
                .map(|i| ServiceSpec {
                    name: format!("svc{i}"),
                    replicas: 4,
                })
                .collect(),
            nodes: (0..6).map(|i| format!("node{i}")).collect(),
            calls: vec![],
        };
        let g = build_graph(&spec, 0).unwrap();
        let member = g
            .edges()
            .iter()
            .filter(|e| e.relation == Relation::Membership)
            .count();
        assert_eq!(member, 48);
    }

    #[test]
    fn dangling_call_named() {
        let spec = TopologySpec {
            services: vec![ServiceSpec {
                name: "a".into(),
                replicas: 1,
            }],
            nodes: vec!["n0".into()],
            calls: vec![("a".into(), "ghost".into())],
        };
        let err = build_graph(&spec, 0).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn neighbors_directions() {
        let g = chain_graph();
        assert_eq!(g.neighbors("a", Direction::Out).unwrap(), vec!["b"]);
        assert_eq!(g.neighbors("a", Direction::In).unwrap(), Vec::<String>::new());
        assert!(g.neighbors("zzz", Direction::Out).is_err());
    }

    #[test]
    fn pod_has_two_out_neighbors() {
        let spec = TopologySpec {
            services: vec![ServiceSpec {
                name: "solo".into(),
                replicas: 1,
            }],
            nodes: vec!["n0".into()],
            calls: vec![],
        };
        let g = build_graph(&spec, 0).unwrap();
        let pod = pod_id("solo", 0);
        assert_eq!(g.neighbors(&pod, Direction::Out).unwrap().len(), 2);
    }

    #[test]
    fn khop_chain() {
        let g = chain_graph();
        let sub = g.khop_subgraph(&["a".into()], 1).unwrap();
        let ids: Vec<&str> = sub.entities().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        let sub0 = g.khop_subgraph(&["a".into()], 0).unwrap();
        assert_eq!(sub0.len(), 1);
    }

    #[test]
    fn khop_monotone() {
        let g = chain_graph();
        for h in 0..3 {
            let small: BTreeSet<String> = g
                .khop_subgraph(&["b".into()], h)
                .unwrap()
                .entities()
                .iter()
                .map(|e| e.id.clone())
                .collect();
            let big: BTreeSet<String> = g
                .khop_subgraph(&["b".into()], h + 1)
                .unwrap()
                .entities()
                .iter()
                .map(|e| e.id.clone())
                .collect();
            assert!(small.is_subset(&big));
        }
    }

    #[test]
    fn paths_zero_length_and_chain() {
        let g = chain_graph();
        let p = g.enumerate_paths("a", "a", 3, None).unwrap();
        assert_eq!(p, vec![vec!["a".to_string()]]);
        let p = g.enumerate_paths("a", "c", 3, None).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0], vec!["a", "b", "c"]);
    }

    #[test]
    fn paths_diamond() {
        let entities = ["a", "b", "c", "d"]
            .iter()
            .map(|id| Entity {
                id: id.to_string(),
                level: Level::Service,
                parent_service: None,
                host_node: None,
            })
            .collect();
        let edges = [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")]
            .iter()
            .map(|(s, d)| Edge {
                src: s.to_string(),
                dst: d.to_string(),
                relation: Relation::Call,
            })
            .collect();
        let g = DependencyGraph::from_parts(entities, edges).unwrap();
        let p = g.enumerate_paths("a", "d", 3, None).unwrap();
        assert_eq!(p.len(), 2);
    }
}
