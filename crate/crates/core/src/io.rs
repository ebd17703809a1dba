//! File formats: graph JSON, matrices as headerless CSV or nested JSON
//! arrays, parameter JSON and the recovery result JSON. Vertices are
//! 1-based on disk.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DirectedEdge, MixedGraph, VertexId};
use crate::lsem::ParamSet;
use crate::recovery::{RecoveryResult, VertexDiagnostics};

/// Serde adapter writing a matrix as an array of rows.
pub mod nested {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(super::matrix_to_rows(m))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::rows_to_matrix(&rows).map_err(D::Error::custom)
    }
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::Shape(format!(
            "row {} has {} entries, expected {ncols}",
            i + 1,
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EdgeEntry {
    Plain([u64; 2]),
    Weighted(u64, u64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub n: usize,
    pub directed: Vec<EdgeEntry>,
    pub bidirected: Vec<[u64; 2]>,
}

fn zero_based(v: u64, n: usize) -> Result<VertexId> {
    if v == 0 || v as usize > n {
        return Err(Error::VertexOutOfRange {
            vertex: v as usize,
            n,
        });
    }
    Ok(VertexId(v as usize - 1))
}

impl GraphFile {
    pub fn from_graph(g: &MixedGraph) -> Self {
        let one = |v: VertexId| v.index() as u64 + 1;
        GraphFile {
            n: g.n(),
            directed: g
                .directed_edges()
                .iter()
                .map(|e| match e.forced_weight {
                    Some(w) => EdgeEntry::Weighted(one(e.source), one(e.target), w),
                    None => EdgeEntry::Plain([one(e.source), one(e.target)]),
                })
                .collect(),
            bidirected: g
                .bidirected_edges()
                .iter()
                .map(|&(a, b)| [one(a), one(b)])
                .collect(),
        }
    }

    pub fn to_graph(&self) -> Result<MixedGraph> {
        let n = self.n;
        let directed = self
            .directed
            .iter()
            .map(|e| {
                Ok(match *e {
                    EdgeEntry::Plain([a, b]) => {
                        DirectedEdge::new(zero_based(a, n)?, zero_based(b, n)?)
                    }
                    EdgeEntry::Weighted(a, b, w) => {
                        DirectedEdge::forced(zero_based(a, n)?, zero_based(b, n)?, w)
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bidirected = self
            .bidirected
            .iter()
            .map(|&[a, b]| Ok((zero_based(a, n)?, zero_based(b, n)?)))
            .collect::<Result<Vec<_>>>()?;
        MixedGraph::new(n, directed, bidirected)
    }
}

pub fn graph_to_json(g: &MixedGraph) -> Result<String> {
    Ok(serde_json::to_string_pretty(&GraphFile::from_graph(g))?)
}

pub fn graph_from_json(s: &str) -> Result<MixedGraph> {
    serde_json::from_str::<GraphFile>(s)?.to_graph()
}

pub fn read_graph(path: &Path) -> Result<MixedGraph> {
    let file: GraphFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    file.to_graph()
}

pub fn write_graph(path: &Path, g: &MixedGraph) -> Result<()> {
    write_json(path, &GraphFile::from_graph(g))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for row in m.row_iter() {
        w.write_record(row.iter().map(|x| format!("{x:?}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn matrix_from_csv<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: {f:?} is not a number", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    rows_to_matrix(&rows)
}

/// Reads a CSV matrix, or a JSON one when the extension is `.json`.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "json") {
        let rows: Vec<Vec<f64>> = serde_json::from_reader(file)?;
        rows_to_matrix(&rows)
    } else {
        matrix_from_csv(file)
    }
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, matrix_to_csv(m)?)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Recovery result as written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoverOutput {
    #[serde(with = "nested")]
    pub lambda: DMatrix<f64>,
    pub diagnostics: BTreeMap<String, VertexDiagnostics>,
}

impl From<&RecoveryResult> for RecoverOutput {
    fn from(r: &RecoveryResult) -> Self {
        RecoverOutput {
            lambda: r.lambda_hat.clone(),
            diagnostics: r
                .per_vertex
                .iter()
                .map(|(v, d)| (v.to_string(), d.clone()))
                .collect(),
        }
    }
}
