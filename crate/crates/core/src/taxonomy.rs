//! Shortest-path class similarity over a taxonomy graph and threshold-based
//! selection of pre-training classes.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use crate::data::{toy_taxonomy_edges, LabeledDataset};
use crate::error::{Error, Result};

/// Undirected view of a parent/child hierarchy plus an optional mapping from
/// class identifiers to one or more nodes.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    nodes: Vec<String>,
    node_index: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
    class_map: HashMap<String, Vec<usize>>,
}

/// Builtin toy hierarchy name accepted by [`load_taxonomy`].
pub const BUILTIN_TOY: &str = "builtin:toy";

impl Taxonomy {
    /// Builds the graph and checks that it is connected.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self> {
        let mut t = Self {
            nodes: Vec::new(),
            node_index: HashMap::new(),
            adjacency: Vec::new(),
            class_map: HashMap::new(),
        };
        for (p, c) in edges {
            let (a, b) = (t.intern(p.as_ref()), t.intern(c.as_ref()));
            if a != b && !t.adjacency[a].contains(&b) {
                t.adjacency[a].push(b);
                t.adjacency[b].push(a);
            }
        }
        if t.nodes.is_empty() {
            return Err(Error::invalid("taxonomy has no edges"));
        }
        t.check_connected()?;
        Ok(t)
    }

    pub fn builtin_toy() -> Self {
        Self::from_edges(&toy_taxonomy_edges()).expect("toy taxonomy is connected")
    }

    /// Parses `parent child` lines. Blank lines and `#` comments are skipped.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(p), Some(c), None) => edges.push((p.to_string(), c.to_string())),
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected `parent child`, got `{line}`"),
                    })
                }
            }
        }
        Self::from_edges(&edges)
    }

    /// Reads `class_id synset_id` lines. A class may appear on several lines;
    /// every listed synset must be a node of the graph.
    pub fn parse_class_mapping(&mut self, text: &str) -> Result<()> {
        let mut map: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(class), Some(synset), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `class_id synset_id`, got `{line}`"),
                });
            };
            let node = *self.node_index.get(synset).ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("unknown node `{synset}`"),
            })?;
            let entry = map.entry(class.to_string()).or_default();
            if !entry.contains(&node) {
                entry.push(node);
            }
        }
        self.class_map.extend(map);
        Ok(())
    }

    pub fn load_class_mapping(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.parse_class_mapping(&text)
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.node_index.get(name) {
            return i;
        }
        self.nodes.push(name.to_string());
        self.adjacency.push(Vec::new());
        self.node_index.insert(name.to_string(), self.nodes.len() - 1);
        self.nodes.len() - 1
    }

    fn check_connected(&self) -> Result<()> {
        let mut component = vec![usize::MAX; self.nodes.len()];
        let mut members: Vec<Vec<usize>> = Vec::new();
        for start in 0..self.nodes.len() {
            if component[start] != usize::MAX {
                continue;
            }
            let id = members.len();
            let mut list = Vec::new();
            let mut queue = VecDeque::from([start]);
            component[start] = id;
            while let Some(u) = queue.pop_front() {
                list.push(u);
                for &v in &self.adjacency[u] {
                    if component[v] == usize::MAX {
                        component[v] = id;
                        queue.push_back(v);
                    }
                }
            }
            members.push(list);
        }
        if members.len() == 1 {
            return Ok(());
        }
        let main = (0..members.len()).max_by_key(|&i| (members[i].len(), usize::MAX - i)).unwrap();
        let orphans: Vec<String> = members
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != main)
            .take(10)
            .map(|(_, m)| {
                let names: Vec<&str> = m.iter().take(5).map(|&n| self.nodes[n].as_str()).collect();
                let more = if m.len() > 5 { format!(", ... ({} nodes)", m.len()) } else { String::new() };
                format!("{{{}{more}}}", names.join(", "))
            })
            .collect();
        Err(Error::invalid(format!(
            "taxonomy is disconnected ({} components); orphan components: {}",
            members.len(),
            orphans.join(" ")
        )))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn contains(&self, id: &str) -> bool {
        self.node_index.contains_key(id) || self.class_map.contains_key(id)
    }

    /// Nodes an identifier stands for: its mapped synsets if it has a
    /// mapping, otherwise the node of the same name.
    pub fn resolve(&self, id: &str) -> Result<&[usize]> {
        if let Some(v) = self.class_map.get(id) {
            return Ok(v);
        }
        self.node_index
            .get(id)
            .map(std::slice::from_ref)
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }

    /// Breadth-first distances from a set of start nodes.
    fn distances(&self, starts: &[usize]) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.nodes.len()];
        let mut queue = VecDeque::new();
        for &s in starts {
            dist[s] = 0;
            queue.push_back(s);
        }
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Shortest edge count between any node of `a` and any node of `b`.
    pub fn shortest_path(&self, a: &str, b: &str) -> Result<usize> {
        let (na, nb) = (self.resolve(a)?, self.resolve(b)?);
        let dist = self.distances(na);
        Ok(nb.iter().map(|&n| dist[n]).min().expect("resolved ids are non-empty"))
    }
}

pub fn load_taxonomy(source: &str) -> Result<Taxonomy> {
    if source == BUILTIN_TOY {
        return Ok(Taxonomy::builtin_toy());
    }
    let path = Path::new(source);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Taxonomy::parse_edge_list(&text)
}

fn similarity_from_distance(d: usize) -> f64 {
    1.0 / (1.0 + d as f64)
}

/// `1 / (1 + d)` with `d` the shortest path, maximized over synset pairs.
pub fn path_similarity(tax: &Taxonomy, c1: &str, c2: &str) -> Result<f64> {
    Ok(similarity_from_distance(tax.shortest_path(c1, c2)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Sorted by descending score, then identifier.
    pub selected: Vec<String>,
    /// Best target match and score for every candidate pre-training class.
    pub best_match: BTreeMap<String, (String, f64)>,
    pub tau: f64,
}

impl SelectionResult {
    pub fn score(&self, class: &str) -> Option<f64> {
        self.best_match.get(class).map(|m| m.1)
    }

    /// CSV with columns `class,best_match,score`, one row per selected class.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "best_match", "score"])?;
        for c in &self.selected {
            let (t, s) = &self.best_match[c];
            w.write_record([c.as_str(), t.as_str(), &format!("{s}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv()?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Keeps every pre-training class whose best similarity to a target class is
/// strictly above `tau`.
pub fn select_pretrain_classes<S: AsRef<str>, T: AsRef<str>>(
    tax: &Taxonomy,
    pretrain_classes: &[S],
    target_classes: &[T],
    tau: f64,
) -> Result<SelectionResult> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1), got {tau}")));
    }
    let pretrain: Vec<&[usize]> = pretrain_classes
        .iter()
        .map(|c| tax.resolve(c.as_ref()))
        .collect::<Result<_>>()?;
    let mut best: Vec<Option<(usize, usize)>> = vec![None; pretrain_classes.len()];
    for (ti, t) in target_classes.iter().enumerate() {
        let dist = tax.distances(tax.resolve(t.as_ref())?);
        for (pi, nodes) in pretrain.iter().enumerate() {
            let d = nodes.iter().map(|&n| dist[n]).min().expect("resolved ids are non-empty");
            if d != usize::MAX && best[pi].is_none_or(|(bd, _)| d < bd) {
                best[pi] = Some((d, ti));
            }
        }
    }
    let mut best_match = BTreeMap::new();
    let mut selected = Vec::new();
    for (pi, b) in best.iter().enumerate() {
        let Some((d, ti)) = *b else { continue };
        let name = pretrain_classes[pi].as_ref().to_string();
        let score = similarity_from_distance(d);
        if score > tau {
            selected.push((score, name.clone()));
        }
        best_match.insert(name, (target_classes[ti].as_ref().to_string(), score));
    }
    selected.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    selected.dedup_by(|a, b| a.1 == b.1);
    if selected.is_empty() {
        log::warn!("no pre-training class exceeds tau = {tau}");
    }
    Ok(SelectionResult {
        selected: selected.into_iter().map(|s| s.1).collect(),
        best_match,
        tau,
    })
}

/// Restricts `dataset` to the selected classes, relabeled in selection
/// order, keeping at most `per_class_cap` samples per class.
pub fn build_pretrain_subset(dataset: &LabeledDataset, selection: &SelectionResult, per_class_cap: Option<usize>) -> Result<LabeledDataset> {
    dataset.filter_classes(&selection.selected, per_class_cap)
}
