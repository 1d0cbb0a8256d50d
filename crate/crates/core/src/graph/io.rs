//! CSV ingestion and export for `edges.csv`, `features.csv` and `labels.csv`.
//!
//! Each file is comma separated with an optional header line; fields may be
//! padded with whitespace and whitespace-only separation is accepted too.
//! Blank lines and lines starting with `#` are skipped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use super::Graph;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Parsed edge list in external node ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeRecord {
    pub pairs: Vec<(u64, u64)>,
    /// Set when rows carried a third (weight) column, which is ignored.
    pub had_weight_column: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<u64>,
    pub dim: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
}

fn split_fields(line: &str) -> Vec<&str> {
    if line.contains(',') {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Iterates `(line_number, fields)` over content lines, dropping a leading
/// header when its first field is not an integer.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    let mut first = true;
    text.lines().enumerate().filter_map(move |(i, raw)| {
        let line = raw.trim().trim_start_matches('\u{feff}');
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let fields = split_fields(line);
        if std::mem::take(&mut first) && fields[0].parse::<i64>().is_err() {
            return None;
        }
        Some((i + 1, fields))
    })
}

fn parse_id(field: &str, source: &str, line: usize) -> Result<u64> {
    field
        .parse::<u64>()
        .map_err(|_| Error::parse(source, line, format!("expected a non-negative integer id, found {field:?}")))
}

pub fn parse_edges(text: &str) -> Result<EdgeRecord> {
    const SRC: &str = "edges";
    let mut out = EdgeRecord::default();
    for (line, fields) in records(text) {
        match fields.len() {
            2 => {}
            3 => out.had_weight_column = true,
            n => {
                return Err(Error::parse(SRC, line, format!("expected `src,dst`, found {n} fields")));
            }
        }
        let src = parse_id(fields[0], SRC, line)?;
        let dst = parse_id(fields[1], SRC, line)?;
        out.pairs.push((src, dst));
    }
    Ok(out)
}

pub fn parse_features(text: &str) -> Result<FeatureTable> {
    const SRC: &str = "features";
    let mut out = FeatureTable::default();
    for (line, fields) in records(text) {
        if fields.len() < 2 {
            return Err(Error::parse(SRC, line, "expected `node_id,f1,...,fd`"));
        }
        let dim = fields.len() - 1;
        if out.ids.is_empty() {
            out.dim = dim;
        } else if dim != out.dim {
            return Err(Error::parse(
                SRC,
                line,
                format!("row has {dim} features, earlier rows have {}", out.dim),
            ));
        }
        out.ids.push(parse_id(fields[0], SRC, line)?);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(SRC, line, format!("invalid real value {f:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(SRC, line, format!("non-finite value {f:?}")));
            }
            out.values.push(v);
        }
    }
    Ok(out)
}

pub fn parse_labels(text: &str) -> Result<LabelTable> {
    const SRC: &str = "labels";
    let mut out = LabelTable::default();
    for (line, fields) in records(text) {
        if fields.len() != 2 {
            return Err(Error::parse(SRC, line, format!("expected `node_id,label`, found {} fields", fields.len())));
        }
        out.ids.push(parse_id(fields[0], SRC, line)?);
        let label = fields[1]
            .parse::<usize>()
            .map_err(|_| Error::parse(SRC, line, format!("invalid class id {:?}", fields[1])))?;
        out.labels.push(label);
    }
    Ok(out)
}

/// Assembles a graph from parsed tables.
///
/// The feature table defines the node set; ids are mapped to `0..n` by
/// ascending external id. `num_classes` defaults to `max label + 1`.
pub fn assemble(
    edges: &EdgeRecord,
    features: &FeatureTable,
    labels: &LabelTable,
    num_classes: Option<usize>,
) -> Result<Graph> {
    let n = features.ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| features.ids[i]);
    let mut index_of = HashMap::with_capacity(n);
    let mut sorted_ids = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * features.dim);
    for (new, &old) in order.iter().enumerate() {
        let id = features.ids[old];
        if index_of.insert(id, new).is_some() {
            return Err(Error::Validation(format!("node {id} has more than one feature row")));
        }
        sorted_ids.push(id);
        values.extend_from_slice(&features.values[old * features.dim..(old + 1) * features.dim]);
    }
    let feature_matrix = Matrix::from_vec(n, features.dim, values)?;

    let mut node_labels: Vec<Option<usize>> = vec![None; n];
    for (&id, &y) in labels.ids.iter().zip(&labels.labels) {
        let v = *index_of
            .get(&id)
            .ok_or_else(|| Error::Validation(format!("label given for unknown node {id}")))?;
        if node_labels[v].replace(y).is_some() {
            return Err(Error::Validation(format!("node {id} is labelled more than once")));
        }
    }
    let node_labels = node_labels
        .into_iter()
        .enumerate()
        .map(|(v, y)| y.ok_or_else(|| Error::Validation(format!("node {} has no label", sorted_ids[v]))))
        .collect::<Result<Vec<_>>>()?;

    let k = match num_classes {
        Some(k) => k,
        None => node_labels.iter().max().map_or(0, |&m| m + 1),
    };

    let mut internal = Vec::with_capacity(edges.pairs.len());
    for &(a, b) in &edges.pairs {
        let lookup = |id: u64| {
            index_of
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("edge ({a}, {b}) has dangling endpoint {id}")))
        };
        internal.push((lookup(a)?, lookup(b)?));
    }
    Ok(Graph::from_edges(&internal, feature_matrix, node_labels, k)?.with_node_ids(sorted_ids))
}

/// Parses the three text tables and assembles a graph.
pub fn graph_from_text(edges: &str, features: &str, labels: &str, num_classes: Option<usize>) -> Result<Graph> {
    let e = parse_edges(edges)?;
    if e.had_weight_column {
        warn!("edge list carries a weight column; edges are treated as unweighted");
    }
    assemble(&e, &parse_features(features)?, &parse_labels(labels)?, num_classes)
}

pub fn load_graph(edge_path: &Path, feature_path: &Path, label_path: &Path) -> Result<Graph> {
    load_graph_with_classes(edge_path, feature_path, label_path, None)
}

pub fn load_graph_with_classes(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    num_classes: Option<usize>,
) -> Result<Graph> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
        })
    };
    graph_from_text(&read(edge_path)?, &read(feature_path)?, &read(label_path)?, num_classes)
}

pub fn write_edges(g: &Graph, path: &Path) -> Result<()> {
    let ids = g.node_ids();
    let mut s = String::from("src,dst\n");
    for (u, v) in g.edges() {
        let _ = writeln!(s, "{},{}", ids[u], ids[v]);
    }
    Ok(fs::write(path, s)?)
}

pub fn write_features(g: &Graph, path: &Path) -> Result<()> {
    let ids = g.node_ids();
    let mut s = String::from("node_id");
    for j in 1..=g.feature_dim() {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for v in 0..g.num_nodes() {
        let _ = write!(s, "{}", ids[v]);
        for x in g.features().row(v) {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

pub fn write_labels(g: &Graph, path: &Path) -> Result<()> {
    let ids = g.node_ids();
    let mut s = String::from("node_id,label\n");
    for (v, y) in g.labels().iter().enumerate() {
        let _ = writeln!(s, "{},{y}", ids[v]);
    }
    Ok(fs::write(path, s)?)
}
