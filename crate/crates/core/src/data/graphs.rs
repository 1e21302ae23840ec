//! Graph containers.
//!
//! Multigraph files hold one JSON object per line:
//! `{"nodes": [element ids], "edges": [[u, v], ...], "label": y}` with
//! element ids below 14 and 0-based node indices.
//!
//! A node graph is a set of whitespace-separated text files with one line
//! per node: `features` (values), `labels` (class id), `mask` (1 marks a
//! labeled training node), optional `test` (1 marks a test node), plus
//! `edges` with one `u v` pair per line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{digest_bytes, read_file, split, Dataset, DatasetKind, Features, Provenance};
use crate::error::{Error, Result};
use crate::layers::GraphBatch;
use crate::tensor::Tensor;

pub const MUTAGENICITY_ELEMENTS: usize = 14;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub label: usize,
}

impl GraphRecord {
    pub(crate) fn to_graph(&self) -> Result<GraphBatch> {
        let n = self.nodes.len();
        if let Some(&e) = self.nodes.iter().find(|&&e| e >= MUTAGENICITY_ELEMENTS) {
            return Err(Error::contract(format!("element id {e} is not below {MUTAGENICITY_ELEMENTS}")));
        }
        if let Some(&(u, v)) = self.edges.iter().find(|&&(u, v)| u >= n || v >= n) {
            return Err(Error::contract(format!("edge ({u},{v}) out of range for {n} nodes")));
        }
        let x = Tensor::one_hot(&self.nodes, MUTAGENICITY_ELEMENTS)?;
        GraphBatch::single(x, &self.edges)
    }
}

pub fn parse_multigraph(text: &str, path: &Path) -> Result<Vec<GraphRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, Some(i + 1), e.to_string()))?;
        if rec.nodes.is_empty() {
            return Err(Error::parse(path, Some(i + 1), "graph without nodes"));
        }
        rec.to_graph().map_err(|e| Error::parse(path, Some(i + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_multigraph(records: &[GraphRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

/// Builds the dataset (stratified 80/20 split, seed 0).
pub fn multigraph_dataset(records: &[GraphRecord], source: String, digest: String) -> Result<Dataset> {
    let graphs = records.iter().map(GraphRecord::to_graph).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let d = Dataset::new(
        DatasetKind::Multigraph,
        Features::Graphs(graphs),
        labels,
        None,
        classes,
        Provenance { source, digest },
    )?;
    split(d, &[0.8, 0.2], 0)
}

pub fn load_multigraph(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(path, None, e.to_string()))?;
    let records = parse_multigraph(text, path)?;
    if records.is_empty() {
        return Err(Error::parse(path, None, "no graph records"));
    }
    let digest = digest_bytes([b"multigraph-v1".as_slice(), &bytes]);
    multigraph_dataset(&records, path.display().to_string(), digest)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodegraphPaths {
    pub features: PathBuf,
    pub edges: PathBuf,
    pub labels: PathBuf,
    pub mask: PathBuf,
    pub test: Option<PathBuf>,
}

impl NodegraphPaths {
    /// The conventional file names inside `dir`; `test.txt` is used if present.
    pub fn in_dir(dir: &Path) -> Self {
        let test = dir.join("test.txt");
        NodegraphPaths {
            features: dir.join("features.txt"),
            edges: dir.join("edges.txt"),
            labels: dir.join("labels.txt"),
            mask: dir.join("mask.txt"),
            test: test.exists().then_some(test),
        }
    }
}

fn lines_of(path: &Path) -> Result<(Vec<u8>, Vec<String>)> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::parse(path, None, e.to_string()))?;
    let lines = text.lines().map(str::to_string).filter(|l| !l.trim().is_empty()).collect();
    Ok((bytes, lines))
}

fn parse_fields<T: std::str::FromStr>(line: &str, path: &Path, no: usize) -> Result<Vec<T>> {
    line.split_whitespace()
        .map(|f| f.parse::<T>().map_err(|_| Error::parse(path, Some(no), format!("bad value {f:?}"))))
        .collect()
}

fn parse_flags(lines: &[String], path: &Path) -> Result<Vec<bool>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| match l.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(Error::parse(path, Some(i + 1), format!("expected 0 or 1, got {other:?}"))),
        })
        .collect()
}

pub fn load_nodegraph(paths: &NodegraphPaths) -> Result<Dataset> {
    let (fb, flines) = lines_of(&paths.features)?;
    let (eb, elines) = lines_of(&paths.edges)?;
    let (lb, llines) = lines_of(&paths.labels)?;
    let (mb, mlines) = lines_of(&paths.mask)?;
    let n = flines.len();
    if n == 0 {
        return Err(Error::parse(&paths.features, None, "no feature rows"));
    }
    let mut data = Vec::new();
    let mut width = None;
    for (i, l) in flines.iter().enumerate() {
        let row: Vec<f64> = parse_fields(l, &paths.features, i + 1)?;
        if *width.get_or_insert(row.len()) != row.len() || row.is_empty() {
            return Err(Error::parse(&paths.features, Some(i + 1), "ragged feature row"));
        }
        data.extend(row);
    }
    let x = Tensor::new(vec![n, width.unwrap_or(0)], data)?;
    let mut edges = Vec::with_capacity(elines.len());
    for (i, l) in elines.iter().enumerate() {
        let f: Vec<usize> = parse_fields(l, &paths.edges, i + 1)?;
        match f[..] {
            [u, v] if u < n && v < n => edges.push((u, v)),
            [u, v] => {
                return Err(Error::parse(
                    &paths.edges,
                    Some(i + 1),
                    format!("edge ({u},{v}) out of range for {n} nodes"),
                ))
            }
            _ => return Err(Error::parse(&paths.edges, Some(i + 1), "expected two node ids")),
        }
    }
    let labels: Vec<usize> = llines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::parse(&paths.labels, Some(i + 1), format!("bad label {l:?}")))
        })
        .collect::<Result<_>>()?;
    let mask = parse_flags(&mlines, &paths.mask)?;
    if labels.len() != n || mask.len() != n {
        return Err(Error::contract(format!(
            "row mismatch: {n} feature rows, {} labels, {} mask rows",
            labels.len(),
            mask.len()
        )));
    }
    let mut chunks: Vec<Vec<u8>> = vec![b"nodegraph-v1".to_vec(), fb, eb, lb, mb];
    let test = match &paths.test {
        Some(p) => {
            let (tb, tlines) = lines_of(p)?;
            chunks.push(tb);
            let t = parse_flags(&tlines, p)?;
            if t.len() != n {
                return Err(Error::contract(format!("row mismatch: {} test rows for {n} nodes", t.len())));
            }
            t
        }
        None => mask.iter().map(|m| !m).collect(),
    };
    if let Some(i) = (0..n).find(|&i| test[i] && mask[i]) {
        return Err(Error::contract(format!("node {i} is both labeled for training and a test node")));
    }
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let graph = GraphBatch::single(x, &edges)?;
    let mut d = Dataset::new(
        DatasetKind::Nodegraph,
        Features::Graph(graph),
        labels,
        Some(mask),
        classes,
        Provenance {
            source: paths.features.parent().unwrap_or(Path::new(".")).display().to_string(),
            digest: digest_bytes(chunks.iter().map(Vec::as_slice)),
        },
    )?;
    assign_node_splits(&mut d, &test)?;
    Ok(d)
}

/// `train` holds the labeled nodes, `test` the flagged test nodes and
/// `unlabeled` everything else.
pub(crate) fn assign_node_splits(d: &mut Dataset, test: &[bool]) -> Result<()> {
    let mask = d
        .label_mask
        .clone()
        .ok_or_else(|| Error::contract("node splits need a label mask"))?;
    let n = mask.len();
    d.splits.clear();
    d.splits.insert("train".into(), (0..n).filter(|&i| mask[i]).collect());
    d.splits.insert("test".into(), (0..n).filter(|&i| test[i]).collect());
    d.splits.insert("unlabeled".into(), (0..n).filter(|&i| !mask[i] && !test[i]).collect());
    d.validate()
}

/// Writes a node-graph dataset in the container layout to `dir`.
pub fn write_nodegraph(d: &Dataset, dir: &Path) -> Result<()> {
    let (Features::Graph(g), Some(mask)) = (&d.features, &d.label_mask) else {
        return Err(Error::contract("not a node-graph dataset"));
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut feats = String::new();
    for i in 0..g.num_nodes() {
        let row: Vec<String> = g.node_features().row(i).iter().map(|v| format!("{v:?}")).collect();
        feats.push_str(&row.join(" "));
        feats.push('\n');
    }
    let mut edges = String::new();
    for (u, v) in g.edges() {
        writeln!(edges, "{u} {v}").expect("string write");
    }
    let labels: String = d.labels.iter().map(|y| format!("{y}\n")).collect();
    let flags = |f: &dyn Fn(usize) -> bool| -> String {
        (0..g.num_nodes()).map(|i| if f(i) { "1\n" } else { "0\n" }).collect()
    };
    let test: Vec<bool> = {
        let mut t = vec![false; g.num_nodes()];
        for &i in d.split("test").unwrap_or(&[]) {
            t[i] = true;
        }
        t
    };
    let files = [
        ("features.txt", feats),
        ("edges.txt", edges),
        ("labels.txt", labels),
        ("mask.txt", flags(&|i| mask[i])),
        ("test.txt", flags(&|i| test[i])),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn tu_file(dir: &Path, prefix: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{prefix}_{suffix}.txt"))
}

fn tu_ints(path: &Path) -> Result<Vec<Vec<i64>>> {
    let (_, lines) = lines_of(path)?;
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<i64>()
                        .map_err(|_| Error::parse(path, Some(i + 1), format!("bad integer {f:?}")))
                })
                .collect()
        })
        .collect()
}

/// Converts a TU-format directory (`{prefix}_A.txt`, `_graph_indicator`,
/// `_graph_labels`, `_node_labels`) into multigraph records. Graph labels
/// are renumbered by sorted distinct value.
pub fn import_tu(dir: &Path, prefix: &str) -> Result<Vec<GraphRecord>> {
    let a_path = tu_file(dir, prefix, "A");
    let ind_path = tu_file(dir, prefix, "graph_indicator");
    let gl_path = tu_file(dir, prefix, "graph_labels");
    let nl_path = tu_file(dir, prefix, "node_labels");
    let indicator = tu_ints(&ind_path)?;
    let graph_labels = tu_ints(&gl_path)?;
    let node_labels = tu_ints(&nl_path)?;
    let edges = tu_ints(&a_path)?;
    let single = |rows: &[Vec<i64>], path: &Path| -> Result<Vec<i64>> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| match r[..] {
                [v] => Ok(v),
                _ => Err(Error::parse(path, Some(i + 1), "expected one value")),
            })
            .collect()
    };
    let indicator = single(&indicator, &ind_path)?;
    let graph_labels = single(&graph_labels, &gl_path)?;
    let node_labels = single(&node_labels, &nl_path)?;
    if node_labels.len() != indicator.len() {
        return Err(Error::parse(
            &nl_path,
            Some(node_labels.len().min(indicator.len()) + 1),
            format!("{} node labels for {} nodes", node_labels.len(), indicator.len()),
        ));
    }
    let num_graphs = graph_labels.len();
    let mut classes: Vec<i64> = graph_labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut records: Vec<GraphRecord> = graph_labels
        .iter()
        .map(|l| GraphRecord {
            nodes: Vec::new(),
            edges: Vec::new(),
            label: classes.binary_search(l).expect("label present"),
        })
        .collect();
    let mut local = Vec::with_capacity(indicator.len());
    for (i, &g) in indicator.iter().enumerate() {
        if g < 1 || g as usize > num_graphs {
            return Err(Error::parse(&ind_path, Some(i + 1), format!("graph id {g} out of range")));
        }
        let e = node_labels[i];
        if e < 0 || e as usize >= MUTAGENICITY_ELEMENTS {
            return Err(Error::parse(&nl_path, Some(i + 1), format!("element id {e} out of range")));
        }
        let rec = &mut records[g as usize - 1];
        local.push(rec.nodes.len());
        rec.nodes.push(e as usize);
    }
    let mut seen = BTreeMap::new();
    for (i, r) in edges.iter().enumerate() {
        let (u, v) = match r[..] {
            [u, v] if u >= 1 && v >= 1 && (u as usize) <= indicator.len() && (v as usize) <= indicator.len() => {
                (u as usize - 1, v as usize - 1)
            }
            _ => return Err(Error::parse(&a_path, Some(i + 1), "edge endpoints out of range")),
        };
        let g = indicator[u];
        if indicator[v] != g {
            return Err(Error::parse(&a_path, Some(i + 1), "edge joins two graphs"));
        }
        let (a, b) = (local[u].min(local[v]), local[u].max(local[v]));
        if a != b && seen.insert((g, a, b), ()).is_none() {
            records[g as usize - 1].edges.push((a, b));
        }
    }
    if let Some(k) = records.iter().position(|r| r.nodes.is_empty()) {
        return Err(Error::parse(&gl_path, Some(k + 1), "graph has no nodes"));
    }
    Ok(records)
}

/// Converts LINQS-style `{name}.content` (id, features..., class) and
/// `{name}.cites` (cited citing) into a node graph in `out_dir`. The first
/// 20 nodes of each class (file order) are the labeled training nodes and
/// the last 1000 remaining nodes are the test nodes.
pub fn import_planetoid(content: &Path, cites: &Path, out_dir: &Path) -> Result<usize> {
    let (_, clines) = lines_of(content)?;
    let mut ids = BTreeMap::new();
    let mut rows = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    for (i, l) in clines.iter().enumerate() {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() < 3 {
            return Err(Error::parse(content, Some(i + 1), "expected id, features and class"));
        }
        if ids.insert(f[0].to_string(), i).is_some() {
            return Err(Error::parse(content, Some(i + 1), format!("duplicate id {}", f[0])));
        }
        let feats: Vec<f64> = f[1..f.len() - 1]
            .iter()
            .map(|v| v.parse().map_err(|_| Error::parse(content, Some(i + 1), format!("bad value {v:?}"))))
            .collect::<Result<_>>()?;
        if rows.first().is_some_and(|r: &Vec<f64>| r.len() != feats.len()) {
            return Err(Error::parse(content, Some(i + 1), "ragged feature row"));
        }
        rows.push(feats);
        let class = f[f.len() - 1].to_string();
        let k = match class_names.iter().position(|c| *c == class) {
            Some(k) => k,
            None => {
                class_names.push(class);
                class_names.len() - 1
            }
        };
        labels.push(k);
    }
    let (_, elines) = lines_of(cites)?;
    let mut edges = Vec::new();
    for (i, l) in elines.iter().enumerate() {
        let f: Vec<&str> = l.split_whitespace().collect();
        let [a, b] = f[..] else {
            return Err(Error::parse(cites, Some(i + 1), "expected two ids"));
        };
        // citations to papers outside the content file are dropped
        if let (Some(&u), Some(&v)) = (ids.get(a), ids.get(b)) {
            edges.push((u, v));
        }
    }
    let n = rows.len();
    let mut mask = vec![false; n];
    let mut per_class = vec![0usize; class_names.len()];
    for i in 0..n {
        if per_class[labels[i]] < 20 {
            per_class[labels[i]] += 1;
            mask[i] = true;
        }
    }
    let mut test = vec![false; n];
    let mut left = 1000;
    for i in (0..n).rev() {
        if left == 0 {
            break;
        }
        if !mask[i] {
            test[i] = true;
            left -= 1;
        }
    }
    let x = Tensor::from_rows(&rows)?;
    let graph = GraphBatch::single(x, &edges)?;
    let mut d = Dataset::new(
        DatasetKind::Nodegraph,
        Features::Graph(graph),
        labels,
        Some(mask),
        class_names.len().max(2),
        Provenance {
            source: content.display().to_string(),
            digest: String::new(),
        },
    )?;
    d.splits.insert("test".into(), (0..n).filter(|&i| test[i]).collect());
    write_nodegraph(&d, out_dir)?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_record() {
        let recs = parse_multigraph(r#"{"nodes":[3],"edges":[],"label":1}"#, Path::new("mem")).unwrap();
        let g = recs[0].to_graph().unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.normalized_adjacency().to_dense().data(), &[1.0]);
        assert_eq!(g.node_features().row(0)[3], 1.0);
    }

    #[test]
    fn edge_out_of_range_is_rejected() {
        let err = parse_multigraph(r#"{"nodes":[0,1,2],"edges":[[0,5]],"label":0}"#, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: Some(1), .. }), "{err}");
        let err = parse_multigraph(r#"{"nodes":[14],"edges":[],"label":0}"#, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("element"), "{err}");
    }

    #[test]
    fn multigraph_text_roundtrip() {
        let recs = vec![
            GraphRecord {
                nodes: vec![0, 1],
                edges: vec![(0, 1)],
                label: 0,
            },
            GraphRecord {
                nodes: vec![2],
                edges: vec![],
                label: 1,
            },
        ];
        let text = write_multigraph(&recs);
        assert_eq!(parse_multigraph(&text, Path::new("mem")).unwrap(), recs);
    }
}
