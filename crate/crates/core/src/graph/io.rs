//! Text formats.
//!
//! Edge list: UTF-8, one edge per line, `t u v [attr]` separated by
//! whitespace; `#` starts a comment line. Feature file: CSV with header
//! `node,t,f0,...,f{d-1}`; `(node, t)` rows that are absent stay zero.
//! A dataset directory holds `edges.txt`, an optional `features.csv` and a
//! `meta.json` sidecar.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DynamicGraph, Features, ShiftProtocol};
use crate::error::{Error, Result};

pub const EDGES_FILE: &str = "edges.txt";
pub const FEATURES_FILE: &str = "features.csv";
pub const META_FILE: &str = "meta.json";

/// Sidecar written next to every generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_nodes: usize,
    pub num_snapshots: usize,
    pub protocol: Option<ShiftProtocol>,
    pub seed: u64,
    /// Edges carrying this attribute are withheld until testing.
    pub shifted_attribute: Option<u32>,
    /// Ground-truth invariant channels (synthetic data only).
    pub invariant_channels: Option<Vec<usize>>,
    pub feature_dim: Option<usize>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn load_edgelist(path: &Path, num_nodes: usize, num_snapshots: usize) -> Result<DynamicGraph> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(parse_err(
                path,
                lineno,
                format!("expected `t u v [attr]`, got {} fields", fields.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| parse_err(path, lineno, format!("bad {what} `{s}`")))
        };
        let t = num(fields[0], "snapshot index")?;
        let u = num(fields[1], "node index")?;
        let v = num(fields[2], "node index")?;
        let attr = match fields.get(3) {
            Some(s) => Some(
                s.parse::<u32>()
                    .map_err(|_| parse_err(path, lineno, format!("bad attribute `{s}`")))?,
            ),
            None => None,
        };
        if t >= num_snapshots {
            return Err(Error::Data(format!(
                "{}:{lineno}: snapshot {t} out of range for {num_snapshots} snapshots",
                path.display()
            )));
        }
        if u >= num_nodes || v >= num_nodes {
            return Err(Error::Data(format!(
                "{}:{lineno}: node index out of range for {num_nodes} nodes",
                path.display()
            )));
        }
        if u == v {
            return Err(Error::Data(format!(
                "{}:{lineno}: self-loop on node {u}",
                path.display()
            )));
        }
        records.push((t, u, v, attr));
    }
    DynamicGraph::from_records(num_nodes, num_snapshots, records)
}

pub fn write_edgelist(path: &Path, g: &DynamicGraph) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# t u v [attr]")?;
    for t in 0..g.num_snapshots() {
        for e in g.snapshot(t) {
            match e.attr {
                Some(a) => writeln!(w, "{t} {} {} {a}", e.edge.u, e.edge.v)?,
                None => writeln!(w, "{t} {} {}", e.edge.u, e.edge.v)?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path, num_nodes: usize, num_snapshots: usize) -> Result<Features> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.len() < 3 || &header[0] != "node" || &header[1] != "t" {
        return Err(parse_err(path, 1, "header must be `node,t,f0,...`"));
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(path, 1, format!("expected column `f{j}`, got `{name}`")));
        }
    }
    let dim = header.len() - 2;
    let mut feats = Features::zeros(num_nodes, num_snapshots, dim);
    for (i, rec) in rdr.records().enumerate() {
        let lineno = i + 2;
        let rec = rec.map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if rec.len() != dim + 2 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, got {}", dim + 2, rec.len()),
            ));
        }
        let node: usize = rec[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad node index"))?;
        let t: usize = rec[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad snapshot index"))?;
        if node >= num_nodes || t >= num_snapshots {
            return Err(Error::Data(format!(
                "{}:{lineno}: (node {node}, t {t}) out of range",
                path.display()
            )));
        }
        let row = feats.row_mut(t, node);
        for (j, x) in row.iter_mut().enumerate() {
            *x = rec[j + 2]
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad value in f{j}")))?;
        }
    }
    Ok(feats)
}

pub fn write_features(path: &Path, f: &Features) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let cols: Vec<String> = (0..f.dim()).map(|j| format!("f{j}")).collect();
    writeln!(w, "node,t,{}", cols.join(","))?;
    for t in 0..f.num_snapshots() {
        for v in 0..f.num_nodes() {
            write!(w, "{v},{t}")?;
            for x in f.row(t, v) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(dir: &Path, g: &DynamicGraph, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_edgelist(&dir.join(EDGES_FILE), g)?;
    if let Some(f) = g.features() {
        write_features(&dir.join(FEATURES_FILE), f)?;
    }
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(dir.join(META_FILE), json + "\n")?;
    Ok(())
}

/// Reads a dataset directory. Features are attached when `features.csv`
/// exists.
pub fn load_dataset(dir: &Path) -> Result<(DynamicGraph, DatasetMeta)> {
    let meta_path: PathBuf = dir.join(META_FILE);
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let g = load_edgelist(&dir.join(EDGES_FILE), meta.num_nodes, meta.num_snapshots)?;
    let fpath = dir.join(FEATURES_FILE);
    let g = if fpath.exists() {
        g.with_features(load_features(&fpath, meta.num_nodes, meta.num_snapshots)?)?
    } else {
        g
    };
    Ok((g, meta))
}
