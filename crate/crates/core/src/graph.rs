//! Graph bundles: in-memory representation, the on-disk bundle directory,
//! split construction, GCN normalization and synthetic block-model graphs.
//!
//! Bundle directory layout (all integers little-endian):
//!
//! ```text
//! meta.json          {"num_nodes", "num_features", "num_classes", "edges_stored": "both"|"once"}
//! edges.bin          u64 count, then count × (u32 src, u32 dst)
//! features.bin       N·d f32, row-major
//! labels.bin         N u16, 0xFFFF = unknown
//! splits/train.idx   u64 count, then count × u32   (same for val.idx, test.idx)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::sparse::SparseMatrix;

pub type ClassId = usize;

/// On-disk marker for a node without a known label.
pub const UNKNOWN_LABEL: u16 = u16::MAX;

/// Undirected adjacency stored in both directions, neighbors sorted, no self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl Adjacency {
    /// Builds a symmetric adjacency from undirected pairs. Duplicate pairs
    /// collapse; self-loops are rejected.
    pub fn from_undirected(num_nodes: usize, pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut directed = Vec::new();
        for (a, b) in pairs {
            if a as usize >= num_nodes || b as usize >= num_nodes {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a},{b}) out of range for {num_nodes} nodes"
                )));
            }
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop at node {a}")));
            }
            directed.push((a, b));
            directed.push((b, a));
        }
        Ok(Self::from_directed_sorted(num_nodes, directed))
    }

    fn from_directed_sorted(num_nodes: usize, mut directed: Vec<(u32, u32)>) -> Self {
        directed.sort_unstable();
        directed.dedup();
        let mut offsets = vec![0usize; num_nodes + 1];
        for &(a, _) in &directed {
            offsets[a as usize + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        Self {
            offsets,
            neighbors: directed.into_iter().map(|(_, b)| b).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&(j as u32)).is_ok()
    }

    /// Every stored (src, dst) pair, row by row.
    pub fn directed_edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.num_nodes()).flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i as u32, j)))
    }
}

/// Disjoint, sorted node index lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitSpec {
    fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = vec![false; num_nodes];
        for (name, idx) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "{name} split is not strictly increasing"
                )));
            }
            for &i in idx.iter() {
                let i = i as usize;
                if i >= num_nodes {
                    return Err(Error::InvalidArgument(format!("{name} index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!(
                        "node {i} appears in more than one split"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Immutable graph with features, labels and splits.
#[derive(Debug, Clone)]
pub struct GraphBundle {
    num_classes: usize,
    num_features: usize,
    adjacency: Adjacency,
    features: Vec<f32>,
    labels: Vec<Option<ClassId>>,
    splits: SplitSpec,
    provenance: Option<serde_json::Value>,
    feature_matrix: OnceLock<Arc<SparseMatrix>>,
}

impl PartialEq for GraphBundle {
    fn eq(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes
            && self.num_features == other.num_features
            && self.adjacency == other.adjacency
            && self.features.len() == other.features.len()
            && self
                .features
                .iter()
                .zip(&other.features)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.labels == other.labels
            && self.splits == other.splits
            && self.provenance == other.provenance
    }
}

impl GraphBundle {
    pub fn new(
        num_classes: usize,
        num_features: usize,
        adjacency: Adjacency,
        features: Vec<f32>,
        labels: Vec<Option<ClassId>>,
        splits: SplitSpec,
    ) -> Result<Self> {
        let n = adjacency.num_nodes();
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!("{} labels for {n} nodes", labels.len())));
        }
        if features.len() != n * num_features {
            return Err(Error::InvalidArgument(format!(
                "{} feature values for {n}x{num_features}",
                features.len()
            )));
        }
        if let Some(k) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {k}")));
        }
        if let Some((i, c)) = labels
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.filter(|&c| c >= num_classes).map(|c| (i, c)))
        {
            return Err(Error::InvalidArgument(format!(
                "node {i} has class {c} >= {num_classes}"
            )));
        }
        let bundle = Self {
            num_classes,
            num_features,
            adjacency,
            features,
            labels,
            splits: SplitSpec::default(),
            provenance: None,
            feature_matrix: OnceLock::new(),
        };
        bundle.with_splits(splits)
    }

    /// Replaces the splits after checking that train/val nodes are labeled.
    pub fn with_splits(mut self, splits: SplitSpec) -> Result<Self> {
        splits.validate(self.num_nodes())?;
        for (name, idx) in [("train", &splits.train), ("val", &splits.val)] {
            if let Some(&i) = idx.iter().find(|&&i| self.labels[i as usize].is_none()) {
                return Err(Error::InvalidArgument(format!("{name} node {i} has no label")));
            }
        }
        self.splits = splits;
        Ok(self)
    }

    pub fn with_provenance(mut self, provenance: serde_json::Value) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.num_nodes()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[Option<ClassId>] {
        &self.labels
    }

    pub fn splits(&self) -> &SplitSpec {
        &self.splits
    }

    pub fn provenance(&self) -> Option<&serde_json::Value> {
        self.provenance.as_ref()
    }

    /// Labels visible to the model: train nodes only. Validation labels are
    /// held out for model selection and queue priorities.
    pub fn observed_labels(&self) -> Vec<Option<ClassId>> {
        let mut out = vec![None; self.num_nodes()];
        for &i in &self.splits.train {
            out[i as usize] = self.labels[i as usize];
        }
        out
    }

    /// Features as a 64-bit sparse matrix, built on first use.
    pub fn feature_matrix(&self) -> Arc<SparseMatrix> {
        self.feature_matrix
            .get_or_init(|| {
                Arc::new(SparseMatrix::from_dense_rows(
                    self.num_nodes(),
                    self.num_features,
                    self.features.iter().map(|&v| v as f64),
                ))
            })
            .clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgesStored {
    Both,
    Once,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMeta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
    edges_stored: EdgesStored,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

struct ByteReader<'a> {
    file: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(file: &'a Path, bytes: &'a [u8]) -> Self {
        Self { file, bytes, pos: 0 }
    }

    fn take<const K: usize>(&mut self) -> Result<[u8; K]> {
        let end = self.pos + K;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.file, self.pos as u64, "unexpected end of file"))?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u16(&mut self) -> Result<u16> {
        self.take::<2>().map(u16::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.take::<4>().map(f32::from_le_bytes)
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.file, self.pos as u64, "trailing bytes"));
        }
        Ok(())
    }

    fn count(&mut self, max: usize) -> Result<usize> {
        let at = self.offset();
        let n = self.u64()?;
        if n > max as u64 {
            return Err(Error::format(self.file, at, format!("count {n} exceeds file capacity")));
        }
        Ok(n as usize)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_index_file(path: &Path, num_nodes: usize) -> Result<Vec<u32>> {
    let bytes = read(path)?;
    let mut r = ByteReader::new(path, &bytes);
    let n = r.count(bytes.len() / 4)?;
    let mut idx = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let i = r.u32()?;
        if i as usize >= num_nodes {
            return Err(Error::format(path, at, format!("index {i} out of range")));
        }
        if idx.last().is_some_and(|&prev| prev >= i) {
            return Err(Error::format(path, at, "indices not strictly increasing"));
        }
        idx.push(i);
    }
    r.finish()?;
    Ok(idx)
}

fn index_file_bytes(idx: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * idx.len());
    out.extend_from_slice(&(idx.len() as u64).to_le_bytes());
    for &i in idx {
        out.extend_from_slice(&i.to_le_bytes());
    }
    out
}

/// Reads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraphBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: BundleMeta = serde_json::from_slice(&read(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.column() as u64, e.to_string()))?;
    let n = meta.num_nodes;
    let d = meta.num_features;

    let edges_path = dir.join("edges.bin");
    let bytes = read(&edges_path)?;
    let mut r = ByteReader::new(&edges_path, &bytes);
    let m = r.count(bytes.len() / 8)?;
    let mut directed = Vec::with_capacity(m * 2);
    for _ in 0..m {
        let at = r.offset();
        let (a, b) = (r.u32()?, r.u32()?);
        if a as usize >= n || b as usize >= n {
            return Err(Error::format(&edges_path, at, format!("edge ({a},{b}) out of range")));
        }
        if a == b {
            return Err(Error::format(&edges_path, at, format!("self-loop at node {a}")));
        }
        directed.push((a, b));
        if meta.edges_stored == EdgesStored::Once {
            directed.push((b, a));
        }
    }
    r.finish()?;
    let adjacency = Adjacency::from_directed_sorted(n, directed);
    if meta.edges_stored == EdgesStored::Both {
        if let Some((a, b)) = adjacency
            .directed_edges()
            .find(|&(a, b)| !adjacency.has_edge(b as usize, a as usize))
        {
            return Err(Error::format(&edges_path, 8, format!("edge ({a},{b}) has no reverse")));
        }
    }

    let feat_path = dir.join("features.bin");
    let bytes = read(&feat_path)?;
    if bytes.len() != n * d * 4 {
        return Err(Error::format(
            &feat_path,
            0,
            format!("expected {} bytes for {n}x{d} f32, found {}", n * d * 4, bytes.len()),
        ));
    }
    let mut r = ByteReader::new(&feat_path, &bytes);
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let at = r.offset();
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(Error::format(&feat_path, at, "non-finite feature"));
        }
        features.push(v);
    }

    let labels_path = dir.join("labels.bin");
    let bytes = read(&labels_path)?;
    if bytes.len() != n * 2 {
        return Err(Error::format(
            &labels_path,
            0,
            format!("expected {} bytes, found {}", n * 2, bytes.len()),
        ));
    }
    let mut r = ByteReader::new(&labels_path, &bytes);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let raw = r.u16()?;
        labels.push(match raw {
            UNKNOWN_LABEL => None,
            c if (c as usize) < meta.num_classes => Some(c as usize),
            c => return Err(Error::format(&labels_path, at, format!("class {c} out of range"))),
        });
    }

    let splits_dir = dir.join("splits");
    let splits = SplitSpec {
        train: read_index_file(&splits_dir.join("train.idx"), n)?,
        val: read_index_file(&splits_dir.join("val.idx"), n)?,
        test: read_index_file(&splits_dir.join("test.idx"), n)?,
    };

    let mut bundle = GraphBundle::new(meta.num_classes, d, adjacency, features, labels, splits)?;
    bundle.provenance = meta.provenance;
    Ok(bundle)
}

/// Writes a bundle directory. Edges are stored in both directions.
pub fn save_bundle(g: &GraphBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let splits_dir = dir.join("splits");
    fs::create_dir_all(&splits_dir).map_err(|e| Error::io(&splits_dir, e))?;

    let meta = BundleMeta {
        num_nodes: g.num_nodes(),
        num_features: g.num_features,
        num_classes: g.num_classes,
        edges_stored: EdgesStored::Both,
        provenance: g.provenance.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    json.push(b'\n');
    write(&dir.join("meta.json"), &json)?;

    let mut edges = Vec::with_capacity(8 + g.adjacency.neighbors.len() * 8);
    edges.extend_from_slice(&(g.adjacency.neighbors.len() as u64).to_le_bytes());
    for (a, b) in g.adjacency.directed_edges() {
        edges.extend_from_slice(&a.to_le_bytes());
        edges.extend_from_slice(&b.to_le_bytes());
    }
    write(&dir.join("edges.bin"), &edges)?;

    let features: Vec<u8> = g.features.iter().flat_map(|v| v.to_le_bytes()).collect();
    write(&dir.join("features.bin"), &features)?;

    let labels: Vec<u8> = g
        .labels
        .iter()
        .flat_map(|l| l.map_or(UNKNOWN_LABEL, |c| c as u16).to_le_bytes())
        .collect();
    write(&dir.join("labels.bin"), &labels)?;

    for (name, idx) in [
        ("train", &g.splits.train),
        ("val", &g.splits.val),
        ("test", &g.splits.test),
    ] {
        write(&splits_dir.join(format!("{name}.idx")), &index_file_bytes(idx))?;
    }
    Ok(())
}

/// Files making up a bundle, relative to its directory.
pub fn bundle_files() -> [PathBuf; 7] {
    [
        "meta.json".into(),
        "edges.bin".into(),
        "features.bin".into(),
        "labels.bin".into(),
        "splits/train.idx".into(),
        "splits/val.idx".into(),
        "splits/test.idx".into(),
    ]
}

/// `D̃^{-1/2}(A+I)D̃^{-1/2}` with `D̃` the degree of `A+I`.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    matrix: Arc<SparseMatrix>,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Arc<SparseMatrix> {
        &self.matrix
    }

    /// Wraps an arbitrary square propagation matrix (tests, ablations).
    pub fn from_matrix(matrix: SparseMatrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::shape("normalized adjacency", "matrix must be square"));
        }
        Ok(Self {
            matrix: Arc::new(matrix),
        })
    }
}

pub fn normalize_adjacency(g: &GraphBundle) -> NormalizedAdjacency {
    let adj = &g.adjacency;
    let n = adj.num_nodes();
    let deg: Vec<f64> = (0..n).map(|i| (adj.degree(i) + 1) as f64).collect();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut indices = Vec::with_capacity(adj.neighbors.len() + n);
    let mut values = Vec::with_capacity(adj.neighbors.len() + n);
    for i in 0..n {
        let nb = adj.neighbors(i);
        let split = nb.partition_point(|&j| (j as usize) < i);
        let cols = nb[..split]
            .iter()
            .copied()
            .chain(std::iter::once(i as u32))
            .chain(nb[split..].iter().copied());
        for j in cols {
            indices.push(j);
            values.push(1.0 / (deg[i] * deg[j as usize]).sqrt());
        }
        offsets.push(indices.len());
    }
    let matrix = SparseMatrix::from_csr(n, n, offsets, indices, values).expect("normalized adjacency is valid CSR");
    NormalizedAdjacency {
        matrix: Arc::new(matrix),
    }
}

/// Samples `per_class_train` training and `per_class_val` validation nodes
/// from each class; every other labeled node becomes a test node.
pub fn make_paper_split(g: &GraphBundle, per_class_train: usize, per_class_val: usize, seed: u64) -> Result<SplitSpec> {
    let mut rng = rng::stream(seed, Stream::Split);
    let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); g.num_classes];
    for (i, l) in g.labels.iter().enumerate() {
        if let Some(c) = l {
            by_class[*c].push(i as u32);
        }
    }
    let mut split = SplitSpec::default();
    for (class, mut nodes) in by_class.into_iter().enumerate() {
        let required = per_class_train + per_class_val;
        if nodes.len() < required {
            return Err(Error::ClassTooSmall {
                class,
                available: nodes.len(),
                required,
            });
        }
        nodes.shuffle(&mut rng);
        split.train.extend_from_slice(&nodes[..per_class_train]);
        split.val.extend_from_slice(&nodes[per_class_train..required]);
        split.test.extend_from_slice(&nodes[required..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Stochastic block model parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub n_per_class: usize,
    pub num_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    pub feat_noise: f64,
    pub seed: u64,
}

/// Block-model graph: node `i` belongs to block `i / n_per_class`; features
/// are the one-hot block centroid plus isotropic Gaussian noise. Splits are empty.
pub fn generate_sbm(spec: &SbmSpec) -> Result<GraphBundle> {
    let SbmSpec {
        n_per_class,
        num_classes,
        p_in,
        p_out,
        feat_dim,
        feat_noise,
        seed,
    } = *spec;
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=p_in).contains(&p_out) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }
    if feat_dim == 0 || num_classes == 0 {
        return Err(Error::InvalidArgument(
            "feat_dim and num_classes must be positive".into(),
        ));
    }
    let n = n_per_class * num_classes;
    let mut rng = rng::stream(seed, Stream::Synth);
    let block = |i: usize| i / n_per_class.max(1);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block(i) == block(j) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                pairs.push((i as u32, j as u32));
            }
        }
    }
    let adjacency = Adjacency::from_undirected(n, pairs)?;
    let mut features = Vec::with_capacity(n * feat_dim);
    for i in 0..n {
        let hot = block(i) % feat_dim;
        for k in 0..feat_dim {
            let noise: f64 = rng.sample(StandardNormal);
            let centroid = if k == hot { 1.0 } else { 0.0 };
            features.push((centroid + feat_noise * noise) as f32);
        }
    }
    let labels = (0..n).map(|i| Some(block(i))).collect();
    GraphBundle::new(num_classes, feat_dim, adjacency, features, labels, SplitSpec::default())
}

/// Disjoint node pairs `(2p, 2p+1)` joined by one edge. Both nodes of a pair
/// share the pair's class; classes are balanced within each split. Every
/// node has the same single feature, so only the pair structure carries
/// information. The first `train_pairs` pairs are training nodes, the next
/// `val_pairs` validation nodes and the rest test nodes.
pub fn generate_label_pairs(num_pairs: usize, train_pairs: usize, val_pairs: usize, seed: u64) -> Result<GraphBundle> {
    if train_pairs + val_pairs > num_pairs {
        return Err(Error::InvalidArgument("more train/val pairs than pairs".into()));
    }
    let mut rng = rng::stream(seed, Stream::Synth);
    let mut pair_class = Vec::with_capacity(num_pairs);
    for segment in [train_pairs, val_pairs, num_pairs - train_pairs - val_pairs] {
        let mut classes: Vec<usize> = (0..segment).map(|k| k % 2).collect();
        classes.shuffle(&mut rng);
        pair_class.extend(classes);
    }
    let n = 2 * num_pairs;
    let adjacency = Adjacency::from_undirected(n, (0..num_pairs as u32).map(|p| (2 * p, 2 * p + 1)))?;
    let labels = (0..n).map(|i| Some(pair_class[i / 2])).collect();
    let nodes = |from: usize, to: usize| (2 * from as u32..2 * to as u32).collect::<Vec<_>>();
    let splits = SplitSpec {
        train: nodes(0, train_pairs),
        val: nodes(train_pairs, train_pairs + val_pairs),
        test: nodes(train_pairs + val_pairs, num_pairs),
    };
    GraphBundle::new(2, 1, adjacency, vec![1.0; n], labels, splits)
}
