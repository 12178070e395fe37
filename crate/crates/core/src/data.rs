//! Road-network datasets: on-disk layout, validation, and a synthetic generator.
//!
//! A dataset directory holds
//!
//! ```text
//! nodes.csv                  id,x,y,has_config
//! edges.csv                  src,dst            (undirected, one line per edge)
//! features.{csv|grnm}        X, n × f'
//! config.{csv|grnm}          C, n × c
//! labels_function.csv        id,class
//! labels_traffic.csv         id,speed
//! queries.{csv|grnm}         q × c query vectors
//! queries_truth.csv          row,node_id
//! ```
//!
//! Matrix files are either CSV (first line `rows,cols`, then one row per line)
//! or binary: magic `GRNM`, `u32` rows, `u32` cols, little-endian `f32`
//! payload in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GarnerError, Result};
use crate::graph::{ensure_finite, DenseMatrix, SparseGraph};

const GRNM_MAGIC: &[u8; 4] = b"GRNM";

/// Number of road-function classes in the labelled task.
pub const FUNCTION_CLASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatrixFormat {
    #[default]
    Csv,
    Grnm,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Grnm => "grnm",
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(MatrixFormat::Csv),
            Some("grnm") => Ok(MatrixFormat::Grnm),
            _ => Err(GarnerError::format(
                path,
                "matrix files must end in .csv or .grnm",
            )),
        }
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)>> {
    let file = fs::File::open(path).map_err(|e| GarnerError::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| GarnerError::io(&owned, e)))))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| GarnerError::format(path, format!("line {line}: cannot parse {field:?}")))
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let m = match MatrixFormat::from_path(path)? {
        MatrixFormat::Csv => read_matrix_csv(path)?,
        MatrixFormat::Grnm => read_matrix_grnm(path)?,
    };
    ensure_finite(&m, &path.display().to_string())?;
    Ok(m)
}

fn read_matrix_csv(path: &Path) -> Result<DenseMatrix> {
    let mut lines = open_lines(path)?;
    let (_, header) = lines
        .next()
        .ok_or_else(|| GarnerError::format(path, "empty matrix file"))?;
    let header = header?;
    let dims: Vec<&str> = header.split(',').collect();
    if dims.len() != 2 {
        return Err(GarnerError::format(path, "line 1: expected `rows,cols`"));
    }
    let rows: usize = parse_field(path, 1, dims[0])?;
    let cols: usize = parse_field(path, 1, dims[1])?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (line_no, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            data.push(parse_field::<f64>(path, line_no, field)?);
        }
        if data.len() - before != cols {
            return Err(GarnerError::format(
                path,
                format!("line {line_no}: expected {cols} values, got {}", data.len() - before),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(GarnerError::format(
            path,
            format!("header declares {rows} rows, found {seen}"),
        ));
    }
    Ok(DenseMatrix::from_row_slice(rows, cols, &data))
}

fn read_matrix_grnm(path: &Path) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| GarnerError::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != GRNM_MAGIC {
        return Err(GarnerError::format(path, "missing GRNM header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != rows * cols * 4 {
        return Err(GarnerError::format(
            path,
            format!(
                "payload of {} bytes does not match {rows}x{cols} f32",
                payload.len()
            ),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(DenseMatrix::from_row_slice(rows, cols, &data))
}

/// Serializes `m` in the binary matrix layout (values narrowed to `f32`).
pub fn encode_grnm(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.len() * 4);
    out.extend_from_slice(GRNM_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    match MatrixFormat::from_path(path)? {
        MatrixFormat::Grnm => fs::write(path, encode_grnm(m)).map_err(|e| GarnerError::io(path, e)),
        MatrixFormat::Csv => {
            let mut s = format!("{},{}\n", m.nrows(), m.ncols());
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
                s.push_str(&row.join(","));
                s.push('\n');
            }
            fs::write(path, s).map_err(|e| GarnerError::io(path, e))
        }
    }
}

/// Reads a headed CSV of `N` columns, skipping the header line.
fn read_table(path: &Path, columns: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rows = Vec::new();
    for (line_no, line) in open_lines(path)?.skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if fields.len() != columns {
            return Err(GarnerError::format(
                path,
                format!("line {line_no}: expected {columns} fields, got {}", fields.len()),
            ));
        }
        rows.push((line_no, fields));
    }
    Ok(rows)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| GarnerError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| GarnerError::io(path, e))
}

/// Locates `<stem>.csv` or `<stem>.grnm` in `dir`.
pub fn find_matrix(dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["csv", "grnm"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(GarnerError::format(
        dir.join(stem),
        "neither .csv nor .grnm matrix file found",
    ))
}

/// The ingested road network: topology, basic road features `X`,
/// geographic configurations `C`, positions and the has-config mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadDataset {
    pub graph: SparseGraph,
    pub features: DenseMatrix,
    pub config: DenseMatrix,
    pub positions: Vec<(f64, f64)>,
    pub has_config: Vec<bool>,
}

impl RoadDataset {
    /// Validates shapes and replaces every row without a configuration by the
    /// mean of the rows that have one.
    pub fn new(
        graph: SparseGraph,
        features: DenseMatrix,
        mut config: DenseMatrix,
        positions: Vec<(f64, f64)>,
        has_config: Vec<bool>,
    ) -> Result<Self> {
        let n = graph.n();
        if !graph.is_symmetric() {
            return Err(GarnerError::Structural(
                "topology graph must be undirected".into(),
            ));
        }
        for (what, rows) in [
            ("features", features.nrows()),
            ("config", config.nrows()),
            ("positions", positions.len()),
            ("has_config", has_config.len()),
        ] {
            if rows != n {
                return Err(GarnerError::DimensionMismatch {
                    context: "RoadDataset",
                    expected: format!("{n} rows"),
                    actual: format!("{rows} {what} rows"),
                });
            }
        }
        ensure_finite(&features, "features")?;
        ensure_finite(&config, "config")?;
        if positions.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(GarnerError::NonFinite("positions".into()));
        }

        let present = has_config.iter().filter(|&&b| b).count();
        if present < n {
            if present == 0 {
                return Err(GarnerError::InvalidArgument(
                    "no road has a geographic configuration".into(),
                ));
            }
            let mut mean = vec![0.0; config.ncols()];
            for i in (0..n).filter(|&i| has_config[i]) {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += config[(i, j)];
                }
            }
            mean.iter_mut().for_each(|m| *m /= present as f64);
            for i in (0..n).filter(|&i| !has_config[i]) {
                for (j, m) in mean.iter().enumerate() {
                    config[(i, j)] = *m;
                }
            }
        }

        Ok(RoadDataset {
            graph,
            features,
            config,
            positions,
            has_config,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn config_dim(&self) -> usize {
        self.config.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Writes the dataset in the directory layout described at module level.
    pub fn save(&self, dir: &Path, format: MatrixFormat) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GarnerError::io(dir, e))?;
        let mut nodes = String::from("id,x,y,has_config\n");
        for (i, (&(x, y), &has)) in self.positions.iter().zip(&self.has_config).enumerate() {
            nodes.push_str(&format!("{i},{x},{y},{}\n", u8::from(has)));
        }
        write_text(&dir.join("nodes.csv"), &nodes)?;

        let mut edges = String::from("src,dst\n");
        for (u, v, _) in self.graph.undirected_edges() {
            edges.push_str(&format!("{u},{v}\n"));
        }
        write_text(&dir.join("edges.csv"), &edges)?;

        let ext = format.extension();
        write_matrix(&dir.join(format!("features.{ext}")), &self.features)?;
        write_matrix(&dir.join(format!("config.{ext}")), &self.config)
    }
}

/// Input features `H⁽⁰⁾ = [C W_c | X W_x]`.
pub fn project_inputs(
    ds: &RoadDataset,
    w_c: &DenseMatrix,
    w_x: &DenseMatrix,
) -> Result<DenseMatrix> {
    project_blocks(&ds.config, &ds.features, w_c, w_x)
}

pub(crate) fn project_blocks(
    config: &DenseMatrix,
    features: &DenseMatrix,
    w_c: &DenseMatrix,
    w_x: &DenseMatrix,
) -> Result<DenseMatrix> {
    if w_c.nrows() != config.ncols() {
        return Err(GarnerError::dims("project_inputs W_c rows", config.ncols(), w_c.nrows()));
    }
    if w_x.nrows() != features.ncols() {
        return Err(GarnerError::dims("project_inputs W_x rows", features.ncols(), w_x.nrows()));
    }
    if w_c.ncols() != w_x.ncols() {
        return Err(GarnerError::dims("project_inputs projection width", w_c.ncols(), w_x.ncols()));
    }
    if config.nrows() != features.nrows() {
        return Err(GarnerError::dims("project_inputs rows", config.nrows(), features.nrows()));
    }
    let p = w_c.ncols();
    let mut h = DenseMatrix::zeros(config.nrows(), 2 * p);
    h.columns_mut(0, p).copy_from(&(config * w_c));
    h.columns_mut(p, p).copy_from(&(features * w_x));
    Ok(h)
}

/// Reads a dataset directory; see the module docs for the layout.
pub fn load_dataset(dir: &Path) -> Result<RoadDataset> {
    let nodes_path = dir.join("nodes.csv");
    let nodes = read_table(&nodes_path, 4)?;
    let n = nodes.len();
    let mut positions = vec![(0.0, 0.0); n];
    let mut has_config = vec![false; n];
    let mut seen = vec![false; n];
    for (line, fields) in &nodes {
        let id: usize = parse_field(&nodes_path, *line, &fields[0])?;
        if id >= n || seen[id] {
            return Err(GarnerError::format(
                &nodes_path,
                format!("line {line}: node ids must be a permutation of 0..{n}"),
            ));
        }
        seen[id] = true;
        positions[id] = (
            parse_field(&nodes_path, *line, &fields[1])?,
            parse_field(&nodes_path, *line, &fields[2])?,
        );
        has_config[id] = match fields[3].as_str() {
            "1" => true,
            "0" => false,
            other => {
                return Err(GarnerError::format(
                    &nodes_path,
                    format!("line {line}: has_config must be 0 or 1, got {other:?}"),
                ))
            }
        };
    }

    let edges_path = dir.join("edges.csv");
    let mut edges = Vec::new();
    for (line, fields) in read_table(&edges_path, 2)? {
        let u: usize = parse_field(&edges_path, line, &fields[0])?;
        let v: usize = parse_field(&edges_path, line, &fields[1])?;
        if u >= n || v >= n {
            return Err(GarnerError::format(
                &edges_path,
                format!("line {line}: edge ({u}, {v}) references a node id >= {n}"),
            ));
        }
        edges.push((u, v));
    }
    let graph = SparseGraph::from_undirected_edges(n, &edges)?;
    let features = read_matrix(&find_matrix(dir, "features")?)?;
    let config = read_matrix(&find_matrix(dir, "config")?)?;
    RoadDataset::new(graph, features, config, positions, has_config)
}

/// Supervision for one downstream task.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSet {
    /// Road function class per node, in `[0, FUNCTION_CLASSES)`.
    Function(Vec<usize>),
    /// Average traffic speed per node.
    Traffic(Vec<f64>),
    /// Query vectors in configuration space with the node each should retrieve.
    Retrieval {
        queries: DenseMatrix,
        truth: Vec<usize>,
    },
}

impl LabelSet {
    pub fn task_name(&self) -> &'static str {
        match self {
            LabelSet::Function(_) => "function",
            LabelSet::Traffic(_) => "traffic",
            LabelSet::Retrieval { .. } => "retrieval",
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            LabelSet::Function(classes) => {
                if classes.len() != n {
                    return Err(GarnerError::dims("function labels", n, classes.len()));
                }
                if let Some(c) = classes.iter().find(|&&c| c >= FUNCTION_CLASSES) {
                    return Err(GarnerError::InvalidArgument(format!(
                        "class id {c} outside [0, {FUNCTION_CLASSES})"
                    )));
                }
            }
            LabelSet::Traffic(speeds) => {
                if speeds.len() != n {
                    return Err(GarnerError::dims("traffic labels", n, speeds.len()));
                }
                if speeds.iter().any(|s| !s.is_finite()) {
                    return Err(GarnerError::NonFinite("traffic labels".into()));
                }
            }
            LabelSet::Retrieval { queries, truth } => {
                if queries.nrows() != truth.len() {
                    return Err(GarnerError::dims(
                        "retrieval queries",
                        truth.len(),
                        queries.nrows(),
                    ));
                }
                if let Some(t) = truth.iter().find(|&&t| t >= n) {
                    return Err(GarnerError::InvalidArgument(format!(
                        "query truth node {t} outside [0, {n})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, format: MatrixFormat) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GarnerError::io(dir, e))?;
        match self {
            LabelSet::Function(classes) => {
                let mut s = String::from("id,class\n");
                for (i, c) in classes.iter().enumerate() {
                    s.push_str(&format!("{i},{c}\n"));
                }
                write_text(&dir.join("labels_function.csv"), &s)
            }
            LabelSet::Traffic(speeds) => {
                let mut s = String::from("id,speed\n");
                for (i, v) in speeds.iter().enumerate() {
                    s.push_str(&format!("{i},{v}\n"));
                }
                write_text(&dir.join("labels_traffic.csv"), &s)
            }
            LabelSet::Retrieval { queries, truth } => {
                write_matrix(&dir.join(format!("queries.{}", format.extension())), queries)?;
                let mut s = String::from("row,node_id\n");
                for (i, t) in truth.iter().enumerate() {
                    s.push_str(&format!("{i},{t}\n"));
                }
                write_text(&dir.join("queries_truth.csv"), &s)
            }
        }
    }
}

fn read_indexed<T: std::str::FromStr + Clone>(path: &Path, n: Option<usize>) -> Result<Vec<T>> {
    let rows = read_table(path, 2)?;
    let len = n.unwrap_or(rows.len());
    let mut out: Vec<Option<T>> = vec![None; len];
    for (line, fields) in rows {
        let id: usize = parse_field(path, line, &fields[0])?;
        if id >= len {
            return Err(GarnerError::format(
                path,
                format!("line {line}: id {id} outside [0, {len})"),
            ));
        }
        out[id] = Some(parse_field(path, line, &fields[1])?);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| GarnerError::format(path, format!("no entry for id {i}"))))
        .collect()
}

/// Loads the labels for `task` (`function`, `traffic` or `retrieval`) from `dir`.
pub fn load_labels(dir: &Path, task: &str) -> Result<LabelSet> {
    match task {
        "function" => Ok(LabelSet::Function(read_indexed(
            &dir.join("labels_function.csv"),
            None,
        )?)),
        "traffic" => Ok(LabelSet::Traffic(read_indexed(
            &dir.join("labels_traffic.csv"),
            None,
        )?)),
        "retrieval" => {
            let queries = read_matrix(&find_matrix(dir, "queries")?)?;
            let truth = read_indexed(&dir.join("queries_truth.csv"), Some(queries.nrows()))?;
            Ok(LabelSet::Retrieval { queries, truth })
        }
        other => Err(GarnerError::InvalidArgument(format!(
            "unknown task {other:?}; expected function, traffic or retrieval"
        ))),
    }
}

/// Knobs of the synthetic road-network generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub clusters: usize,
    pub seed: u64,
    /// Spatial neighbours per road for the mutual-kNN road topology.
    pub k_spatial: usize,
    pub config_dim: usize,
    /// Configuration noise std as a fraction of the minimum centroid spacing.
    pub noise: f64,
    /// Query noise std as a fraction of the minimum centroid spacing.
    pub query_noise: f64,
    /// Number of retrieval queries; `None` means `max(1, n / 10)`.
    pub queries: Option<usize>,
    /// Fraction of roads without a matched configuration.
    pub missing_config: f64,
}

impl SyntheticConfig {
    pub fn new(n: usize, clusters: usize, seed: u64) -> Self {
        SyntheticConfig {
            n,
            clusters,
            seed,
            k_spatial: 4,
            config_dim: 16,
            noise: 0.1,
            query_noise: 0.02,
            queries: None,
            missing_config: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: RoadDataset,
    pub function: LabelSet,
    pub traffic: LabelSet,
    pub retrieval: LabelSet,
    /// Planted cluster per road (equals the function label).
    pub clusters: Vec<usize>,
}

impl SyntheticData {
    pub fn save(&self, dir: &Path, format: MatrixFormat) -> Result<()> {
        self.dataset.save(dir, format)?;
        self.function.save(dir, format)?;
        self.traffic.save(dir, format)?;
        self.retrieval.save(dir, format)
    }
}

/// Desk-scale synthetic road network with default generator settings.
pub fn generate_synthetic(n: usize, clusters: usize, seed: u64) -> Result<SyntheticData> {
    generate_synthetic_with(&SyntheticConfig::new(n, clusters, seed))
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Mutual k-nearest spatial neighbours joined with the Euclidean minimum
/// spanning tree, so the topology is always connected.
fn spatial_topology(points: &[(f64, f64)], k: usize) -> Result<SparseGraph> {
    let n = points.len();
    let mut knn: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq_dist(points[i], points[j]), j))
            .collect();
        let k = k.min(others.len());
        if k > 0 {
            others.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let mut nearest: Vec<usize> = others[..k].iter().map(|&(_, j)| j).collect();
        nearest.sort_unstable();
        knn.push(nearest);
    }
    let mut edges = std::collections::BTreeSet::new();
    for i in 0..n {
        for &j in &knn[i] {
            if i < j && knn[j].binary_search(&i).is_ok() {
                edges.insert((i, j));
            }
        }
    }

    // Prim's algorithm on the complete Euclidean graph.
    if n > 1 {
        let mut in_tree = vec![false; n];
        let mut best = vec![(f64::INFINITY, usize::MAX); n];
        in_tree[0] = true;
        for j in 1..n {
            best[j] = (sq_dist(points[0], points[j]), 0);
        }
        for _ in 1..n {
            let next = (0..n)
                .filter(|&j| !in_tree[j])
                .min_by(|&a, &b| best[a].0.total_cmp(&best[b].0).then(a.cmp(&b)))
                .expect("a node remains outside the tree");
            in_tree[next] = true;
            let parent = best[next].1;
            edges.insert((parent.min(next), parent.max(next)));
            for j in 0..n {
                if !in_tree[j] {
                    let d = sq_dist(points[next], points[j]);
                    if d < best[j].0 {
                        best[j] = (d, next);
                    }
                }
            }
        }
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    SparseGraph::from_undirected_edges(n, &edges)
}

/// Synthetic road network whose configuration clusters are scattered over
/// space, so configuration similarity is independent of distance.
///
/// Function labels are the cluster ids, traffic speed is a noisy linear map of
/// the configuration, and retrieval queries are noisy copies of configuration
/// rows whose ground truth is the source road.
pub fn generate_synthetic_with(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    let SyntheticConfig { n, clusters, .. } = *cfg;
    if clusters < 2 || n < clusters {
        return Err(GarnerError::InvalidArgument(format!(
            "synthetic generator needs n >= clusters >= 2, got n={n}, clusters={clusters}"
        )));
    }
    if clusters > FUNCTION_CLASSES {
        return Err(GarnerError::InvalidArgument(format!(
            "at most {FUNCTION_CLASSES} clusters are supported, got {clusters}"
        )));
    }
    if cfg.k_spatial == 0 || cfg.config_dim == 0 {
        return Err(GarnerError::InvalidArgument(
            "k_spatial and config_dim must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.missing_config) || cfg.noise < 0.0 || cfg.query_noise < 0.0 {
        return Err(GarnerError::InvalidArgument(
            "noise levels must be >= 0 and missing_config in [0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.config_dim;

    let positions: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let graph = spatial_topology(&positions, cfg.k_spatial)?;

    // Balanced cluster sizes, ids shuffled over space.
    let mut assignment: Vec<usize> = (0..n).map(|i| i % clusters).collect();
    assignment.shuffle(&mut rng);

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centroids = DenseMatrix::from_fn(clusters, c, |_, _| std_normal.sample(&mut rng));
    let mut spacing = f64::INFINITY;
    for a in 0..clusters {
        for b in (a + 1)..clusters {
            spacing = spacing.min((centroids.row(a) - centroids.row(b)).norm());
        }
    }
    let sigma = cfg.noise * spacing;
    let mut config = DenseMatrix::zeros(n, c);
    for i in 0..n {
        for j in 0..c {
            config[(i, j)] = centroids[(assignment[i], j)] + sigma * std_normal.sample(&mut rng);
        }
    }

    let mut has_config = vec![true; n];
    let missing = (cfg.missing_config * n as f64).floor() as usize;
    if missing > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..missing] {
            has_config[i] = false;
        }
    }

    // Basic road attributes: normalized degree, mean incident segment length,
    // a road-type code and an unstructured attribute. None carry the cluster.
    let mut features = DenseMatrix::zeros(n, 4);
    for i in 0..n {
        let nbrs = graph.neighbors(i);
        let deg = nbrs.len() as f64;
        let mean_len = if nbrs.is_empty() {
            0.0
        } else {
            nbrs.iter()
                .map(|&j| sq_dist(positions[i], positions[j]).sqrt())
                .sum::<f64>()
                / deg
        };
        features[(i, 0)] = deg / cfg.k_spatial as f64;
        features[(i, 1)] = mean_len * (n as f64).sqrt();
        features[(i, 2)] = rng.random_range(0..3) as f64 / 2.0;
        features[(i, 3)] = std_normal.sample(&mut rng);
    }

    let dataset = RoadDataset::new(graph, features, config.clone(), positions, has_config)?;

    let coef: Vec<f64> = (0..c)
        .map(|_| std_normal.sample(&mut rng) / (c as f64).sqrt())
        .collect();
    let speeds: Vec<f64> = (0..n)
        .map(|i| {
            let lin: f64 = (0..c).map(|j| coef[j] * dataset.config[(i, j)]).sum();
            40.0 + 8.0 * lin + 1.5 * std_normal.sample(&mut rng)
        })
        .collect();

    let mut candidates: Vec<usize> = (0..n).filter(|&i| dataset.has_config[i]).collect();
    candidates.shuffle(&mut rng);
    let q = cfg.queries.unwrap_or((n / 10).max(1)).min(candidates.len());
    let mut truth: Vec<usize> = candidates[..q].to_vec();
    truth.sort_unstable();
    let q_sigma = cfg.query_noise * spacing;
    let queries = DenseMatrix::from_fn(q, c, |r, j| config[(truth[r], j)])
        + DenseMatrix::from_fn(q, c, |_, _| q_sigma * std_normal.sample(&mut rng));

    Ok(SyntheticData {
        dataset,
        function: LabelSet::Function(assignment.clone()),
        traffic: LabelSet::Traffic(speeds),
        retrieval: LabelSet::Retrieval { queries, truth },
        clusters: assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_dir(dir: &Path) {
        fs::write(dir.join("nodes.csv"), "id,x,y,has_config\n0,0,0,1\n1,1,0,1\n2,2,0,0\n").unwrap();
        fs::write(dir.join("edges.csv"), "src,dst\n0,1\n1,2\n").unwrap();
        fs::write(dir.join("features.csv"), "3,1\n1\n2\n3\n").unwrap();
        fs::write(dir.join("config.csv"), "3,2\n0,2\n2,0\n9,9\n").unwrap();
    }

    #[test]
    fn missing_config_gets_mean() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_dir(tmp.path());
        let ds = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds.config.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        assert_eq!(ds.graph.undirected_edges().len(), 2);
    }

    #[test]
    fn edge_out_of_range_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_dir(tmp.path());
        fs::write(tmp.path().join("edges.csv"), "src,dst\n0,3\n").unwrap();
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("node id >= 3"), "{err}");
    }

    #[test]
    fn missing_file_and_bad_dims() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_dir(tmp.path());
        fs::remove_file(tmp.path().join("features.csv")).unwrap();
        assert!(load_dataset(tmp.path()).is_err());
        tiny_dir(tmp.path());
        fs::write(tmp.path().join("features.csv"), "2,1\n1\n2\n").unwrap();
        assert!(matches!(
            load_dataset(tmp.path()),
            Err(GarnerError::DimensionMismatch { .. })
        ));
        fs::write(tmp.path().join("features.csv"), "3,1\n1\nNaN\n2\n").unwrap();
        assert!(matches!(load_dataset(tmp.path()), Err(GarnerError::NonFinite(_))));
    }

    #[test]
    fn csv_save_load_is_bit_exact() {
        let data = generate_synthetic(60, 3, 9).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        data.save(tmp.path(), MatrixFormat::Csv).unwrap();
        let back = load_dataset(tmp.path()).unwrap();
        assert_eq!(back, data.dataset);
        assert_eq!(load_labels(tmp.path(), "function").unwrap(), data.function);
        assert_eq!(load_labels(tmp.path(), "traffic").unwrap(), data.traffic);
        assert_eq!(load_labels(tmp.path(), "retrieval").unwrap(), data.retrieval);
    }

    #[test]
    fn grnm_round_trip_after_first_narrowing() {
        let data = generate_synthetic(40, 2, 5).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        data.dataset.save(tmp.path(), MatrixFormat::Grnm).unwrap();
        let once = load_dataset(tmp.path()).unwrap();
        let tmp2 = tempfile::tempdir().unwrap();
        once.save(tmp2.path(), MatrixFormat::Grnm).unwrap();
        let twice = load_dataset(tmp2.path()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(
            fs::read(tmp.path().join("config.grnm")).unwrap(),
            fs::read(tmp2.path().join("config.grnm")).unwrap()
        );
    }

    #[test]
    fn grnm_header_checked() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("m.grnm");
        fs::write(&p, b"GRNX\0\0\0\0\0\0\0\0").unwrap();
        assert!(read_matrix(&p).is_err());
        let mut bytes = encode_grnm(&DenseMatrix::from_element(2, 2, 1.5));
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(read_matrix(&p).is_err());
    }

    #[test]
    fn two_nodes_without_noise_are_the_centroids() {
        let mut cfg = SyntheticConfig::new(2, 2, 7);
        cfg.noise = 0.0;
        let data = generate_synthetic_with(&cfg).unwrap();
        assert_eq!(data.dataset.n(), 2);
        let mut assigned = data.clusters.clone();
        assigned.sort_unstable();
        assert_eq!(assigned, vec![0, 1]);
        // Same generator stream, so the centroids are recovered exactly.
        let c = &data.dataset.config;
        assert_ne!(c.row(0), c.row(1));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let _positions: Vec<(f64, f64)> = (0..2).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let mut assignment = [0usize, 1];
        assignment.shuffle(&mut rng);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let centroids = DenseMatrix::from_fn(2, 16, |_, _| normal.sample(&mut rng));
        for (i, &cluster) in assignment.iter().enumerate() {
            assert_eq!(c.row(i), centroids.row(cluster));
        }
    }

    #[test]
    fn generator_rejects_bad_sizes() {
        assert!(generate_synthetic(1, 2, 0).is_err());
        assert!(generate_synthetic(5, 1, 0).is_err());
        assert!(generate_synthetic(50, 9, 0).is_err());
    }

    #[test]
    fn synthetic_topology_connected_and_symmetric() {
        for seed in 0..5 {
            let data = generate_synthetic(300, 8, seed).unwrap();
            assert!(data.dataset.graph.is_symmetric());
            assert!(data.dataset.graph.is_connected());
            data.function.validate(300).unwrap();
            data.traffic.validate(300).unwrap();
            data.retrieval.validate(300).unwrap();
        }
    }

    #[test]
    fn missing_rows_equal_mean_of_present() {
        let mut cfg = SyntheticConfig::new(200, 4, 3);
        cfg.missing_config = 0.1;
        let ds = generate_synthetic_with(&cfg).unwrap().dataset;
        let present: Vec<usize> = (0..200).filter(|&i| ds.has_config[i]).collect();
        assert_eq!(present.len(), 180);
        let first_missing = (0..200).find(|&i| !ds.has_config[i]).unwrap();
        for j in 0..ds.config_dim() {
            let mean = present.iter().map(|&i| ds.config[(i, j)]).sum::<f64>() / 180.0;
            assert_eq!(ds.config[(first_missing, j)], mean);
        }
    }

    #[test]
    fn projection_examples() {
        let data = generate_synthetic(30, 3, 1).unwrap();
        let ds = &data.dataset;
        let (c, f) = (ds.config_dim(), ds.feature_dim());
        let h = project_inputs(ds, &DenseMatrix::zeros(c, 5), &DenseMatrix::zeros(f, 5)).unwrap();
        assert_eq!(h, DenseMatrix::zeros(30, 10));

        // Identity projections need c = f' = p, so pad the features.
        let x = DenseMatrix::from_fn(30, c, |i, j| if j < f { ds.features[(i, j)] } else { 0.0 });
        let h = project_blocks(&ds.config, &x, &DenseMatrix::identity(c, c), &DenseMatrix::identity(c, c)).unwrap();
        assert_eq!(h.columns(0, c), ds.config.columns(0, c));
        assert_eq!(h.columns(c, c), x.columns(0, c));

        assert!(project_inputs(ds, &DenseMatrix::zeros(c + 1, 5), &DenseMatrix::zeros(f, 5)).is_err());
        assert!(project_inputs(ds, &DenseMatrix::zeros(c, 5), &DenseMatrix::zeros(f, 4)).is_err());
    }

    #[test]
    fn projection_matches_dense_oracle() {
        use crate::test_oracle as oracle;
        let data = generate_synthetic(50, 4, 2).unwrap();
        let ds = &data.dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w_c = DenseMatrix::from_fn(ds.config_dim(), 6, |_, _| rng.random_range(-1.0..1.0));
        let w_x = DenseMatrix::from_fn(ds.feature_dim(), 6, |_, _| rng.random_range(-1.0..1.0));
        let h = oracle::to_rows(&project_inputs(ds, &w_c, &w_x).unwrap());
        let left = oracle::dense_matmul(&oracle::to_rows(&ds.config), &oracle::to_rows(&w_c));
        let right = oracle::dense_matmul(&oracle::to_rows(&ds.features), &oracle::to_rows(&w_x));
        let want: oracle::Rows = left.into_iter().zip(right).map(|(mut l, r)| {
            l.extend(r);
            l
        }).collect();
        assert!(oracle::max_rel_err(&h, &want) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn generator_is_pure(seed in any::<u64>(), n in 8usize..120, clusters in 2usize..8) {
            prop_assume!(n >= clusters);
            let a = generate_synthetic(n, clusters, seed).unwrap();
            let b = generate_synthetic(n, clusters, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
