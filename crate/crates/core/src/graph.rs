//! Graph data model and on-disk dataset format.
//!
//! A dataset directory holds five text files: `meta` (key=value), and one
//! line per node or per edge in `features.txt`, `labels.txt`, `edges.txt`,
//! `split.txt`. The format is deliberately plain so fixtures diff cleanly
//! and converters can be written in a few lines of any language.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("dataset error in {file} (line {line}): {message}")]
    Ingestion { file: String, line: usize, message: String },
    #[error("dataset error in {file}: {message}")]
    FileLevel { file: String, message: String },
    #[error("config error: {0}")]
    Config(String),
}

fn ingest(file: &Path, line: usize, message: impl Into<String>) -> GraphError {
    GraphError::Ingestion { file: file.display().to_string(), line, message: message.into() }
}

fn file_err(file: &Path, message: impl Into<String>) -> GraphError {
    GraphError::FileLevel { file: file.display().to_string(), message: message.into() }
}

/// Which split a node belongs to. `None` covers nodes the source data
/// leaves out of all three sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Valid,
    Test,
    None,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::Test => "test",
            SplitTag::None => "none",
        }
    }
}

/// An attributed, labelled graph with train/valid/test masks.
#[derive(Clone, Debug)]
pub struct Graph {
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Ordered pairs (src, dst). Undirected graphs store each edge twice.
    pub edges: Vec<(usize, usize)>,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub splits: Vec<SplitTag>,
    pub undirected: bool,
}

impl Graph {
    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes_in(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.num_nodes).filter(|&i| self.splits[i] == tag).collect()
    }

    /// Out-neighbour lists following the stored edge direction.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(s, d) in &self.edges {
            adj[s].push(d);
        }
        adj
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.num_nodes;
        if self.num_features() < 1 {
            return Err(GraphError::Config("feature dimension must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(GraphError::Config("class count must be >= 2".into()));
        }
        if self.features.rows() != n || self.labels.len() != n || self.splits.len() != n {
            return Err(GraphError::Config(format!(
                "node-aligned fields disagree: {n} nodes, {} feature rows, {} labels, {} split tags",
                self.features.rows(),
                self.labels.len(),
                self.splits.len()
            )));
        }
        for (i, &(s, d)) in self.edges.iter().enumerate() {
            if s >= n || d >= n {
                return Err(GraphError::Config(format!("edge {i} ({s},{d}) out of range for {n} nodes")));
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.num_classes {
                return Err(GraphError::Config(format!(
                    "label {l} of node {i} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        if !self.features.is_finite() {
            return Err(GraphError::Config("non-finite feature value".into()));
        }
        Ok(())
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, GraphError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, format!("cannot read: {e}")))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Loads the five-file dataset directory. Undirected datasets are stored
/// and returned with both orientations of every edge; missing reverses are
/// appended, exact duplicates dropped.
pub fn load_dataset(dir: &Path) -> Result<Graph, GraphError> {
    let meta_path = dir.join("meta");
    let meta_lines = read_lines(&meta_path)?;
    let mut meta: HashMap<String, String> = HashMap::new();
    for (idx, line) in meta_lines.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ingest(&meta_path, idx + 1, "expected key=value"))?;
        match k.trim() {
            "nodes" | "features" | "classes" | "undirected" => {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            other => return Err(ingest(&meta_path, idx + 1, format!("unknown meta key `{other}`"))),
        }
    }
    let get_meta = |key: &str| -> Result<String, GraphError> {
        meta.get(key)
            .cloned()
            .ok_or_else(|| file_err(&meta_path, format!("missing meta key `{key}`")))
    };
    let n: usize = get_meta("nodes")?
        .parse()
        .map_err(|_| file_err(&meta_path, "nodes is not a count"))?;
    let d: usize = get_meta("features")?
        .parse()
        .map_err(|_| file_err(&meta_path, "features is not a count"))?;
    let m: usize = get_meta("classes")?
        .parse()
        .map_err(|_| file_err(&meta_path, "classes is not a count"))?;
    let undirected: bool = get_meta("undirected")?
        .parse()
        .map_err(|_| file_err(&meta_path, "undirected is not true/false"))?;

    // features
    let feat_path = dir.join("features.txt");
    let feat_lines = read_lines(&feat_path)?;
    if feat_lines.len() != n {
        return Err(file_err(&feat_path, format!("expected {n} lines, found {}", feat_lines.len())));
    }
    let mut features = Matrix::zeros(n, d);
    for (i, line) in feat_lines.iter().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let sparse = tokens.iter().any(|t| t.contains(':'));
        if sparse {
            for tok in &tokens {
                let (is, vs) = tok
                    .split_once(':')
                    .ok_or_else(|| ingest(&feat_path, i + 1, "mixed dense/sparse tokens"))?;
                let idx: usize = is
                    .parse()
                    .map_err(|_| ingest(&feat_path, i + 1, format!("bad feature index `{is}`")))?;
                if idx >= d {
                    return Err(ingest(&feat_path, i + 1, format!("feature index {idx} >= {d}")));
                }
                let val: f64 = vs
                    .parse()
                    .map_err(|_| ingest(&feat_path, i + 1, format!("bad feature value `{vs}`")))?;
                features.set(i, idx, val);
            }
        } else {
            if tokens.len() != d {
                return Err(ingest(
                    &feat_path,
                    i + 1,
                    format!("expected {d} dense values, found {}", tokens.len()),
                ));
            }
            for (c, tok) in tokens.iter().enumerate() {
                let val: f64 = tok
                    .parse()
                    .map_err(|_| ingest(&feat_path, i + 1, format!("bad feature value `{tok}`")))?;
                features.set(i, c, val);
            }
        }
    }

    // labels
    let label_path = dir.join("labels.txt");
    let label_lines = read_lines(&label_path)?;
    if label_lines.len() != n {
        return Err(file_err(&label_path, format!("expected {n} lines, found {}", label_lines.len())));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, line) in label_lines.iter().enumerate() {
        let l: usize = line
            .trim()
            .parse()
            .map_err(|_| ingest(&label_path, i + 1, format!("bad class id `{}`", line.trim())))?;
        if l >= m {
            return Err(ingest(&label_path, i + 1, format!("class id {l} >= {m}")));
        }
        labels.push(l);
    }

    // edges
    let edge_path = dir.join("edges.txt");
    let edge_lines = read_lines(&edge_path)?;
    let mut edges = Vec::with_capacity(edge_lines.len());
    for (i, line) in edge_lines.iter().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse_end = |tok: Option<&str>| -> Result<usize, GraphError> {
            let t = tok.ok_or_else(|| ingest(&edge_path, i + 1, "expected `src dst`"))?;
            let v: usize = t
                .parse()
                .map_err(|_| ingest(&edge_path, i + 1, format!("bad node id `{t}`")))?;
            if v >= n {
                return Err(ingest(&edge_path, i + 1, format!("node id {v} >= {n}")));
            }
            Ok(v)
        };
        let s = parse_end(it.next())?;
        let dst = parse_end(it.next())?;
        if it.next().is_some() {
            return Err(ingest(&edge_path, i + 1, "expected exactly `src dst`"));
        }
        edges.push((s, dst));
    }
    if undirected {
        let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(edges.len() * 2);
        let mut closed = Vec::with_capacity(edges.len() * 2);
        for &e in &edges {
            if seen.insert(e) {
                closed.push(e);
            }
        }
        for &(s, dst) in &edges {
            if seen.insert((dst, s)) {
                closed.push((dst, s));
            }
        }
        edges = closed;
    }

    // split
    let split_path = dir.join("split.txt");
    let split_lines = read_lines(&split_path)?;
    if split_lines.len() != n {
        return Err(file_err(&split_path, format!("expected {n} lines, found {}", split_lines.len())));
    }
    let mut splits = Vec::with_capacity(n);
    for (i, line) in split_lines.iter().enumerate() {
        let tag = match line.trim() {
            "train" => SplitTag::Train,
            "valid" => SplitTag::Valid,
            "test" => SplitTag::Test,
            "none" => SplitTag::None,
            other => return Err(ingest(&split_path, i + 1, format!("unknown split tag `{other}`"))),
        };
        splits.push(tag);
    }

    let graph = Graph { num_nodes: n, num_classes: m, edges, features, labels, splits, undirected };
    graph.validate().map_err(|e| file_err(dir, e.to_string()))?;
    Ok(graph)
}

/// Writes a graph in the dataset directory format; inverse of [`load_dataset`].
pub fn save_dataset(graph: &Graph, dir: &Path) -> Result<(), GraphError> {
    graph.validate()?;
    fs::create_dir_all(dir).map_err(|e| file_err(dir, format!("cannot create: {e}")))?;
    let write = |name: &str, content: String| -> Result<(), GraphError> {
        let path = dir.join(name);
        fs::write(&path, content).map_err(|e| file_err(&path, format!("cannot write: {e}")))
    };

    write(
        "meta",
        format!(
            "nodes={}\nfeatures={}\nclasses={}\nundirected={}\n",
            graph.num_nodes,
            graph.num_features(),
            graph.num_classes,
            graph.undirected
        ),
    )?;

    let total = graph.num_nodes * graph.num_features();
    let nnz = graph.features.data().iter().filter(|v| **v != 0.0).count();
    let sparse = total > 0 && (nnz as f64) < 0.4 * total as f64;
    let mut feat = String::new();
    for i in 0..graph.num_nodes {
        let row = graph.features.row(i);
        if sparse {
            let mut first = true;
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    if !first {
                        feat.push(' ');
                    }
                    feat.push_str(&format!("{c}:{v}"));
                    first = false;
                }
            }
        } else {
            for (c, &v) in row.iter().enumerate() {
                if c > 0 {
                    feat.push(' ');
                }
                feat.push_str(&format!("{v}"));
            }
        }
        feat.push('\n');
    }
    write("features.txt", feat)?;

    let mut labels = String::new();
    for &l in &graph.labels {
        labels.push_str(&format!("{l}\n"));
    }
    write("labels.txt", labels)?;

    let mut edges = String::new();
    for &(s, d) in &graph.edges {
        edges.push_str(&format!("{s} {d}\n"));
    }
    write("edges.txt", edges)?;

    let mut split = String::new();
    for &t in &graph.splits {
        split.push_str(t.as_str());
        split.push('\n');
    }
    write("split.txt", split)?;
    Ok(())
}

/// Symmetric self-loop-augmented normalization coefficients.
///
/// `edge_coeff[e] = 1/sqrt(deg(src)*deg(dst))` and `self_coeff[i] =
/// 1/deg(i)`, where `deg` counts outgoing edges plus the implicit self-loop.
#[derive(Clone, Debug)]
pub struct EdgeNormalization {
    pub edge_coeff: Vec<f64>,
    pub self_coeff: Vec<f64>,
}

/// Normalization for an arbitrary edge list over `n` nodes (used both for a
/// whole graph and for per-epoch kept-edge subsets).
pub fn edge_normalization(n: usize, edges: &[(usize, usize)]) -> EdgeNormalization {
    let mut deg = vec![1.0f64; n];
    for &(s, _) in edges {
        deg[s] += 1.0;
    }
    let edge_coeff = edges.iter().map(|&(s, d)| 1.0 / (deg[s] * deg[d]).sqrt()).collect();
    let self_coeff = (0..n).map(|i| 1.0 / deg[i]).collect();
    EdgeNormalization { edge_coeff, self_coeff }
}

pub fn normalization_coefficients(graph: &Graph) -> EdgeNormalization {
    edge_normalization(graph.num_nodes, &graph.edges)
}

/// Indices into `graph.edges` that survive an edge-dropping draw.
#[derive(Clone, Debug)]
pub struct EdgeSubset {
    pub kept: Vec<usize>,
}

/// Keeps each undirected edge independently with probability `1 - rate`;
/// both orientations of an edge are kept or dropped together.
pub fn drop_edges(graph: &Graph, rate: f64, seed: u64) -> Result<EdgeSubset, GraphError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GraphError::Config(format!("edges drop rate {rate} outside [0,1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut group_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (idx, &(s, d)) in graph.edges.iter().enumerate() {
        let key = (s.min(d), s.max(d));
        match group_of.get(&key) {
            Some(&g) => groups[g].push(idx),
            None => {
                group_of.insert(key, groups.len());
                groups.push(vec![idx]);
            }
        }
    }
    let mut kept = Vec::with_capacity(graph.edges.len());
    for group in &groups {
        if rng.random::<f64>() >= rate {
            kept.extend_from_slice(group);
        }
    }
    kept.sort_unstable();
    Ok(EdgeSubset { kept })
}

/// Random graph whose edges connect same-class endpoints with probability
/// `homophily`; features are a per-class mean plus Gaussian noise. The test
/// oracle for the compliance and knowledge-layer suites.
pub fn synthetic_homophilous(
    n: usize,
    m: usize,
    d: usize,
    homophily: f64,
    avg_degree: f64,
    seed: u64,
) -> Result<Graph, GraphError> {
    if m < 2 || n < m {
        return Err(GraphError::Config(format!("need n >= m >= 2, got n={n}, m={m}")));
    }
    if d < 1 {
        return Err(GraphError::Config("feature dimension must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&homophily) {
        return Err(GraphError::Config(format!("homophily {homophily} outside [0,1]")));
    }
    if avg_degree <= 0.0 {
        return Err(GraphError::Config("average degree must be positive".into()));
    }
    let target_pairs = ((n as f64) * avg_degree / 2.0).round() as usize;
    if target_pairs > n * (n - 1) / 2 {
        return Err(GraphError::Config(format!(
            "average degree {avg_degree} needs more than the {} possible undirected edges",
            n * (n - 1) / 2
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let noise = 0.3;
    let mut means = Vec::with_capacity(m);
    for _ in 0..m {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x = *x / norm * 2.0;
        }
        means.push(v);
    }
    let mut features = Matrix::zeros(n, d);
    for i in 0..n {
        for c in 0..d {
            let v = means[labels[i]][c] + noise * rng.sample::<f64, _>(StandardNormal);
            features.set(i, c, v);
        }
    }

    let mut pair_set: HashSet<(usize, usize)> = HashSet::new();
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(target_pairs);
    let mut attempts = 0usize;
    let max_attempts = 200 * target_pairs.max(1);
    while pairs.len() < target_pairs && attempts < max_attempts {
        attempts += 1;
        let u = rng.random_range(0..n);
        let same = rng.random::<f64>() < homophily;
        let v = if same {
            let pool = &by_class[labels[u]];
            if pool.len() < 2 {
                continue;
            }
            pool[rng.random_range(0..pool.len())]
        } else {
            let w = rng.random_range(0..n);
            if labels[w] == labels[u] {
                continue;
            }
            w
        };
        if u == v {
            continue;
        }
        let key = (u.min(v), u.max(v));
        if pair_set.insert(key) {
            pairs.push(key);
        }
    }

    let mut edges = Vec::with_capacity(pairs.len() * 2);
    for &(a, b) in &pairs {
        edges.push((a, b));
        edges.push((b, a));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![SplitTag::Test; n];
    let train_end = (n * 6) / 10;
    let valid_end = (n * 8) / 10;
    for (rank, &node) in order.iter().enumerate() {
        splits[node] = if rank < train_end {
            SplitTag::Train
        } else if rank < valid_end {
            SplitTag::Valid
        } else {
            SplitTag::Test
        };
    }

    let graph = Graph { num_nodes: n, num_classes: m, edges, features, labels, splits, undirected: true };
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_graph() -> Graph {
        Graph {
            num_nodes: 2,
            num_classes: 2,
            edges: vec![(0, 1), (1, 0)],
            features: Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.5, 0.0, 2.0, 0.0]),
            labels: vec![0, 1],
            splits: vec![SplitTag::Train, SplitTag::Test],
            undirected: true,
        }
    }

    #[test]
    fn minimal_fixture_round_trips_through_save_and_load() {
        let dir = tempdir().unwrap();
        let g = tiny_graph();
        save_dataset(&g, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.num_nodes, g.num_nodes);
        assert_eq!(loaded.edges, g.edges);
        assert_eq!(loaded.features, g.features);
        assert_eq!(loaded.labels, g.labels);
        assert_eq!(loaded.splits, g.splits);
        assert_eq!(loaded.undirected, g.undirected);
    }

    #[test]
    fn load_save_identity_on_random_synthetic_graphs() {
        for seed in 0..5 {
            let g = synthetic_homophilous(40, 3, 6, 0.7, 4.0, seed).unwrap();
            let dir = tempdir().unwrap();
            save_dataset(&g, dir.path()).unwrap();
            let loaded = load_dataset(dir.path()).unwrap();
            assert_eq!(loaded.edges, g.edges);
            assert_eq!(loaded.features, g.features);
            assert_eq!(loaded.labels, g.labels);
            assert_eq!(loaded.splits, g.splits);
        }
    }

    #[test]
    fn loader_symmetrizes_undirected_edge_lists() {
        let dir = tempdir().unwrap();
        let mut g = tiny_graph();
        g.edges = vec![(0, 1)]; // half an undirected edge on disk
        save_dataset(&g, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.edges, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn loader_errors_name_file_and_line() {
        let dir = tempdir().unwrap();
        save_dataset(&tiny_graph(), dir.path()).unwrap();
        fs::write(dir.path().join("labels.txt"), "0\n7\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("labels.txt") && err.contains("line 2"), "{err}");

        fs::write(dir.path().join("labels.txt"), "0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("labels.txt") && err.contains("expected 2 lines"), "{err}");
    }

    #[test]
    fn loader_rejects_missing_file_and_bad_split_tag() {
        let dir = tempdir().unwrap();
        save_dataset(&tiny_graph(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("edges.txt")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("edges.txt"), "{err}");

        save_dataset(&tiny_graph(), dir.path()).unwrap();
        fs::write(dir.path().join("split.txt"), "train\nvalidation\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("split.txt") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn mixed_sparse_dense_feature_line_is_rejected() {
        let dir = tempdir().unwrap();
        save_dataset(&tiny_graph(), dir.path()).unwrap();
        fs::write(dir.path().join("features.txt"), "0:1.0 2.0 1:3.0\n1:2.0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("features.txt") && err.contains("line 1"), "{err}");
    }

    #[test]
    fn normalization_isolated_node_and_mutual_pair() {
        let mut g = tiny_graph();
        g.num_nodes = 3;
        g.features = Matrix::zeros(3, 3);
        g.labels = vec![0, 1, 0];
        g.splits = vec![SplitTag::Train, SplitTag::Valid, SplitTag::Test];
        let norm = normalization_coefficients(&g);
        // node 2 is isolated: self coefficient 1.0
        assert_eq!(norm.self_coeff[2], 1.0);
        // mutual pair: every coefficient 0.5
        assert_eq!(norm.edge_coeff, vec![0.5, 0.5]);
        assert_eq!(norm.self_coeff[0], 0.5);
        assert_eq!(norm.self_coeff[1], 0.5);
    }

    #[test]
    fn normalization_star_graph_hand_value() {
        // K_{1,3}: center 0 with leaves 1,2,3, symmetric edges
        let edges = vec![(0, 1), (1, 0), (0, 2), (2, 0), (0, 3), (3, 0)];
        let norm = edge_normalization(4, &edges);
        let expected = 1.0 / (4.0f64 * 2.0).sqrt();
        assert!((norm.edge_coeff[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn normalization_matches_dense_brute_force() {
        for seed in 0..10 {
            let g = synthetic_homophilous(15, 3, 4, 0.5, 3.0, 100 + seed).unwrap();
            let n = g.num_nodes;
            let mut a = vec![vec![0.0f64; n]; n];
            for &(s, d) in &g.edges {
                a[s][d] = 1.0;
            }
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += 1.0;
            }
            let deg: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
            let norm = normalization_coefficients(&g);
            for (e, &(s, d)) in g.edges.iter().enumerate() {
                let dense = a[s][d] / (deg[s] * deg[d]).sqrt();
                assert!((norm.edge_coeff[e] - dense).abs() < 1e-12);
            }
            for i in 0..n {
                let dense = a[i][i] / deg[i];
                assert!((norm.self_coeff[i] - dense).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn drop_edges_zero_rate_and_determinism() {
        let g = synthetic_homophilous(50, 3, 4, 0.6, 6.0, 1).unwrap();
        let all = drop_edges(&g, 0.0, 9).unwrap();
        assert_eq!(all.kept.len(), g.num_edges());

        let a = drop_edges(&g, 0.999, 42).unwrap();
        let b = drop_edges(&g, 0.999, 42).unwrap();
        assert_eq!(a.kept, b.kept);
        assert!(a.kept.len() < g.num_edges() / 10);

        assert!(drop_edges(&g, 1.0, 0).is_err());
        assert!(drop_edges(&g, -0.1, 0).is_err());
    }

    #[test]
    fn drop_edges_keeps_both_directions_together() {
        let g = synthetic_homophilous(60, 3, 4, 0.6, 6.0, 7).unwrap();
        let sub = drop_edges(&g, 0.5, 3).unwrap();
        let kept: HashSet<(usize, usize)> = sub.kept.iter().map(|&i| g.edges[i]).collect();
        for &(s, d) in &kept {
            assert!(kept.contains(&(d, s)), "orientation ({d},{s}) missing");
        }
    }

    #[test]
    fn drop_edges_kept_fraction_near_expectation() {
        // 10000 undirected edges at rate 0.5: kept fraction within [0.45, 0.55]
        let g = synthetic_homophilous(4000, 4, 3, 0.5, 5.0, 11).unwrap();
        assert!(g.num_edges() / 2 >= 9900, "generator fell short: {}", g.num_edges());
        let sub = drop_edges(&g, 0.5, 123).unwrap();
        let frac = sub.kept.len() as f64 / g.num_edges() as f64;
        assert!((0.45..=0.55).contains(&frac), "kept fraction {frac}");
    }

    #[test]
    fn synthetic_generator_respects_parameter_ranges() {
        assert!(synthetic_homophilous(5, 6, 3, 0.5, 2.0, 0).is_err());
        assert!(synthetic_homophilous(10, 3, 0, 0.5, 2.0, 0).is_err());
        assert!(synthetic_homophilous(10, 3, 3, 1.5, 2.0, 0).is_err());
        assert!(synthetic_homophilous(10, 3, 3, 0.5, 0.0, 0).is_err());
        let g = synthetic_homophilous(100, 4, 8, 0.9, 6.0, 3).unwrap();
        assert_eq!(g.num_nodes, 100);
        assert!(g.undirected);
        let same = g.edges.iter().filter(|&&(s, d)| g.labels[s] == g.labels[d]).count();
        let frac = same as f64 / g.num_edges() as f64;
        assert!(frac > 0.8, "same-class edge fraction {frac} too low for homophily 0.9");
    }

    #[test]
    fn synthetic_generator_is_deterministic_per_seed() {
        let a = synthetic_homophilous(30, 3, 4, 0.7, 4.0, 5).unwrap();
        let b = synthetic_homophilous(30, 3, 4, 0.7, 4.0, 5).unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.splits, b.splits);
    }
}
