//! Reading and writing graphs.
//!
//! * edge-list CSV directory: `edges.csv` (`src,dst[,weight]`), `features.csv`
//!   (one row per node) and `labels.csv` (`node,label`);
//! * JSON: `{"n": …, "edges": [[u, v], …], "x": [[…]], "y": […]}` with optional
//!   `"train"`, `"val"`, `"test"` index lists;
//! * the TCGU binary checkpoint (lossless, keeps masks and provenance);
//! * the raw citation-network layout (`<name>.content` / `<name>.cites`).
//!
//! Directed edge lists are symmetrized: `(u, v)` and `(v, u)` collapse into
//! one undirected edge, but an exactly repeated line is an error.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{indices_of, AttributedGraph, Masks};
use crate::checkpoint::{Checkpoint, Decoder, Encoder, Section};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphFormat {
    EdgeListCsv,
    Json,
    Binary,
    Citation,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" | "edge-list-csv" => Ok(Self::EdgeListCsv),
            "json" | "json-graph" => Ok(Self::Json),
            "bin" | "binary" | "tcgu" => Ok(Self::Binary),
            "citation" | "planetoid" => Ok(Self::Citation),
            other => Err(Error::Config(format!("unknown graph format {other:?}"))),
        }
    }
}

/// Guesses the format from the path: a directory holding `edges.csv` or a
/// `*.content` file, or a `.json` / `.tcgu` / `.bin` file.
pub fn detect_format(path: &Path) -> Result<GraphFormat> {
    if path.is_dir() {
        if path.join("edges.csv").exists() {
            return Ok(GraphFormat::EdgeListCsv);
        }
        if citation_files(path).is_ok() {
            return Ok(GraphFormat::Citation);
        }
        return Err(Error::Ingest {
            location: path.display().to_string(),
            detail: "directory holds neither edges.csv nor a .content/.cites pair".into(),
        });
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(GraphFormat::Json),
        Some("tcgu" | "bin") => Ok(GraphFormat::Binary),
        _ => Err(Error::Ingest {
            location: path.display().to_string(),
            detail: "cannot infer the graph format from the file name".into(),
        }),
    }
}

pub fn load_graph<T: Scalar>(path: impl AsRef<Path>, format: Option<GraphFormat>) -> Result<AttributedGraph<T>> {
    let path = path.as_ref();
    let format = match format {
        Some(f) => f,
        None => detect_format(path)?,
    };
    match format {
        GraphFormat::EdgeListCsv => load_csv_dir(path),
        GraphFormat::Json => load_json(path),
        GraphFormat::Binary => Checkpoint::read(path)?.get(),
        GraphFormat::Citation => load_citation(path),
    }
}

pub fn save_graph<T: Scalar>(graph: &AttributedGraph<T>, path: impl AsRef<Path>, format: GraphFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        GraphFormat::EdgeListCsv => save_csv_dir(graph, path),
        GraphFormat::Json => {
            let doc = JsonGraph::from_graph(graph);
            let text = serde_json::to_string(&doc)?;
            fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        GraphFormat::Binary => Checkpoint::new().with(graph).write(path),
        GraphFormat::Citation => Err(Error::Config("writing the citation layout is not supported".into())),
    }
}

fn ingest(location: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Ingest {
        location: location.into(),
        detail: detail.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Collects directed pairs, rejecting exact repeats, and returns undirected
/// edges with reverse pairs merged.
struct EdgeCollector {
    directed: BTreeMap<(usize, usize), (f64, String)>,
    allow_repeats: bool,
}

impl EdgeCollector {
    fn new(allow_repeats: bool) -> Self {
        Self {
            directed: BTreeMap::new(),
            allow_repeats,
        }
    }

    fn push(&mut self, u: usize, v: usize, w: f64, location: String) -> Result<()> {
        if let Some((_, first)) = self.directed.get(&(u, v)) {
            if self.allow_repeats {
                log::warn!("{location}: repeated edge ({u},{v}) ignored (first seen at {first})");
                return Ok(());
            }
            return Err(ingest(location, format!("duplicate edge ({u},{v}), first seen at {first}")));
        }
        self.directed.insert((u, v), (w, location));
        Ok(())
    }

    fn finish<T: Scalar>(self) -> Result<Vec<(usize, usize, T)>> {
        let mut out: BTreeMap<(usize, usize), (f64, String)> = BTreeMap::new();
        for ((u, v), (w, loc)) in self.directed {
            if u == v {
                continue;
            }
            let key = (u.min(v), u.max(v));
            match out.get(&key) {
                Some((w0, loc0)) if *w0 != w => {
                    return Err(ingest(loc, format!("edge ({u},{v}) has weight {w} but its reverse at {loc0} has {w0}")));
                }
                Some(_) => {}
                None => {
                    out.insert(key, (w, loc));
                }
            }
        }
        Ok(out.into_iter().map(|((u, v), (w, _))| (u, v, T::lit(w))).collect())
    }
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

/// Parsed CSV records with their 1-based line numbers; a leading row whose
/// first field is not numeric is treated as a header and skipped.
fn csv_rows(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let text = read_text(path)?;
    let name = path.file_name().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    let mut rows = Vec::new();
    for (k, rec) in csv_reader(&text).records().enumerate() {
        let rec = rec.map_err(|e| ingest(format!("{name}"), e.to_string()))?;
        let line = rec.position().map_or(k as u64 + 1, |p| p.line());
        let fields: Vec<String> = rec.iter().map(str::to_owned).collect();
        if fields.iter().all(String::is_empty) {
            continue;
        }
        if rows.is_empty() && k == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        rows.push((line, fields));
    }
    Ok(rows)
}

fn parse_field<V: FromStr>(field: &str, location: &str, what: &str) -> Result<V> {
    field
        .parse()
        .map_err(|_| ingest(location, format!("invalid {what} {field:?}")))
}

/// Maps label strings to class ids: integers are used as-is, otherwise the
/// sorted distinct names are numbered.
fn label_ids(raw: &[String]) -> (Vec<usize>, usize) {
    if let Ok(ids) = raw.iter().map(|s| s.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>() {
        let c = ids.iter().max().map_or(0, |&m| m + 1);
        return (ids, c);
    }
    let names: BTreeSet<&String> = raw.iter().collect();
    let index: HashMap<&String, usize> = names.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    (raw.iter().map(|s| index[s]).collect(), index.len())
}

fn load_csv_dir<T: Scalar>(dir: &Path) -> Result<AttributedGraph<T>> {
    let mut feats = Vec::new();
    let mut width = None;
    for (line, fields) in csv_rows(&dir.join("features.csv"))? {
        let loc = format!("features.csv:{line}");
        if *width.get_or_insert(fields.len()) != fields.len() {
            return Err(ingest(loc, format!("ragged row: {} values, expected {}", fields.len(), width.unwrap_or(0))));
        }
        for f in &fields {
            feats.push(T::lit(parse_field::<f64>(f, &loc, "feature value")?));
        }
    }
    let f = width.unwrap_or(0);
    let n = if f == 0 { 0 } else { feats.len() / f };
    let features = Tensor::new(n, f, feats)?;

    let mut raw_labels: Vec<Option<String>> = vec![None; n];
    for (line, fields) in csv_rows(&dir.join("labels.csv"))? {
        let loc = format!("labels.csv:{line}");
        if fields.len() != 2 {
            return Err(ingest(loc, "expected `node,label`"));
        }
        let node: usize = parse_field(&fields[0], &loc, "node id")?;
        let slot = raw_labels
            .get_mut(node)
            .ok_or_else(|| ingest(&loc, format!("label for unknown node {node} (graph has {n} nodes)")))?;
        if slot.is_some() {
            return Err(ingest(loc, format!("node {node} is labelled twice")));
        }
        *slot = Some(fields[1].clone());
    }
    let raw: Vec<String> = raw_labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| ingest("labels.csv", format!("node {i} has no label"))))
        .collect::<Result<_>>()?;
    let (labels, classes) = label_ids(&raw);

    let mut edges = EdgeCollector::new(false);
    for (line, fields) in csv_rows(&dir.join("edges.csv"))? {
        let loc = format!("edges.csv:{line}");
        if !(2..=3).contains(&fields.len()) {
            return Err(ingest(loc, "expected `src,dst[,weight]`"));
        }
        let u: usize = parse_field(&fields[0], &loc, "node id")?;
        let v: usize = parse_field(&fields[1], &loc, "node id")?;
        if u >= n || v >= n {
            return Err(ingest(loc, format!("edge ({u},{v}) references a node outside 0..{n}")));
        }
        let w = match fields.get(2) {
            Some(s) => parse_field::<f64>(s, &loc, "edge weight")?,
            None => 1.0,
        };
        if !(w > 0.0 && w.is_finite()) {
            return Err(ingest(loc, format!("edge weight must be positive, got {w}")));
        }
        edges.push(u, v, w, loc)?;
    }
    AttributedGraph::from_edges(features, labels, classes, &edges.finish()?)
}

fn save_csv_dir<T: Scalar>(graph: &AttributedGraph<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    let mut edges = String::from("src,dst,weight\n");
    for (u, v, w) in graph.edges() {
        edges.push_str(&format!("{u},{v},{w}\n"));
    }
    write("edges.csv", edges)?;
    let mut feats = String::new();
    for i in 0..graph.num_nodes() {
        let row: Vec<String> = graph.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    write("features.csv", feats)?;
    let mut labels = String::from("node,label\n");
    for (i, y) in graph.labels().iter().enumerate() {
        labels.push_str(&format!("{i},{y}\n"));
    }
    write("labels.csv", labels)
}

#[derive(Serialize, Deserialize)]
struct JsonGraph {
    n: usize,
    edges: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    y: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    val: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test: Option<Vec<usize>>,
}

impl JsonGraph {
    fn from_graph<T: Scalar>(g: &AttributedGraph<T>) -> Self {
        let nonempty = |v: Vec<usize>| if v.is_empty() { None } else { Some(v) };
        Self {
            n: g.num_nodes(),
            edges: g
                .edges()
                .into_iter()
                .map(|(u, v, w)| {
                    if w == T::one() {
                        vec![u as f64, v as f64]
                    } else {
                        vec![u as f64, v as f64, w.as_f64()]
                    }
                })
                .collect(),
            x: (0..g.num_nodes()).map(|i| g.features().row(i).iter().map(|v| v.as_f64()).collect()).collect(),
            y: g.labels().iter().map(|&y| serde_json::Value::from(y)).collect(),
            train: nonempty(g.train_nodes()),
            val: nonempty(g.val_nodes()),
            test: nonempty(g.test_nodes()),
        }
    }
}

fn load_json<T: Scalar>(path: &Path) -> Result<AttributedGraph<T>> {
    let name = path.display().to_string();
    let doc: JsonGraph = serde_json::from_str(&read_text(path)?).map_err(|e| ingest(&name, e.to_string()))?;
    let n = doc.n;
    if doc.x.len() != n || doc.y.len() != n {
        return Err(ingest(&name, format!("n = {n} but x has {} rows and y {} entries", doc.x.len(), doc.y.len())));
    }
    let f = doc.x.first().map_or(0, Vec::len);
    let mut feats = Vec::with_capacity(n * f);
    for (i, row) in doc.x.iter().enumerate() {
        if row.len() != f {
            return Err(ingest(format!("{name}: x[{i}]"), format!("ragged row: {} values, expected {f}", row.len())));
        }
        feats.extend(row.iter().map(|&v| T::lit(v)));
    }
    let raw: Vec<String> = doc
        .y
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(num) if num.as_u64().is_some() => Ok(num.to_string()),
            other => Err(ingest(format!("{name}: y[{i}]"), format!("unusable label {other}"))),
        })
        .collect::<Result<_>>()?;
    let (labels, classes) = label_ids(&raw);
    let mut edges = EdgeCollector::new(false);
    for (k, e) in doc.edges.iter().enumerate() {
        let loc = format!("{name}: edges[{k}]");
        let id = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < n {
                Ok(v as usize)
            } else {
                Err(ingest(&loc, format!("invalid node id {v}")))
            }
        };
        let (u, v, w) = match e.as_slice() {
            [u, v] => (id(*u)?, id(*v)?, 1.0),
            [u, v, w] if *w > 0.0 && w.is_finite() => (id(*u)?, id(*v)?, *w),
            _ => return Err(ingest(loc, "expected [u, v] or [u, v, weight > 0]")),
        };
        edges.push(u, v, w, loc)?;
    }
    let g = AttributedGraph::from_edges(Tensor::new(n, f, feats)?, labels, classes, &edges.finish()?)?;
    if doc.train.is_none() && doc.val.is_none() && doc.test.is_none() {
        return Ok(g);
    }
    let mut masks = Masks::empty(n);
    for (list, mask) in [(&doc.train, &mut masks.train), (&doc.val, &mut masks.val), (&doc.test, &mut masks.test)] {
        for &i in list.iter().flatten() {
            *mask.get_mut(i).ok_or_else(|| ingest(&name, format!("mask index {i} outside 0..{n}")))? = true;
        }
    }
    g.with_masks(masks)
}

fn citation_files(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut content = None;
    for e in entries.flatten() {
        let p = e.path();
        if p.extension().and_then(|s| s.to_str()) == Some("content") {
            content = Some(p);
        }
    }
    let content = content.ok_or_else(|| ingest(dir.display().to_string(), "no .content file"))?;
    let cites = content.with_extension("cites");
    if !cites.exists() {
        return Err(ingest(cites.display().to_string(), "missing citation file"));
    }
    Ok((content, cites))
}

/// The raw citation-network layout: `<id> <f_1> … <f_F> <label>` per line in
/// `.content`, and `<cited> <citing>` per line in `.cites`. Repeated citation
/// lines occur in the public files and are merged with a warning.
fn load_citation<T: Scalar>(dir: &Path) -> Result<AttributedGraph<T>> {
    let (content, cites) = citation_files(dir)?;
    let cname = content.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut ids = HashMap::new();
    let mut feats = Vec::new();
    let mut raw = Vec::new();
    let mut width = None;
    for (k, line) in read_text(&content)?.lines().enumerate() {
        let loc = format!("{cname}:{}", k + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 3 {
            return Err(ingest(loc, "expected `<id> <features…> <label>`"));
        }
        let f = fields.len() - 2;
        if *width.get_or_insert(f) != f {
            return Err(ingest(loc, format!("ragged row: {f} features, expected {}", width.unwrap_or(0))));
        }
        if ids.insert(fields[0].to_owned(), raw.len()).is_some() {
            return Err(ingest(loc, format!("paper {} listed twice", fields[0])));
        }
        for v in &fields[1..=f] {
            feats.push(T::lit(parse_field::<f64>(v, &loc, "feature value")?));
        }
        raw.push(fields[f + 1].to_owned());
    }
    let n = raw.len();
    let features = Tensor::new(n, width.unwrap_or(0), feats)?;
    let (labels, classes) = label_ids(&raw);

    let xname = cites.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut edges = EdgeCollector::new(true);
    for (k, line) in read_text(&cites)?.lines().enumerate() {
        let loc = format!("{xname}:{}", k + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [a, b] => {
                let find = |p: &str| ids.get(p).copied().ok_or_else(|| ingest(&loc, format!("unknown paper {p}")));
                edges.push(find(b)?, find(a)?, 1.0, loc.clone())?;
            }
            _ => return Err(ingest(loc, "expected `<cited> <citing>`")),
        }
    }
    AttributedGraph::from_edges(features, labels, classes, &edges.finish()?)
}

impl<T: Scalar> Section for AttributedGraph<T> {
    const TAG: [u8; 4] = *b"GRPH";

    fn encode(&self, enc: &mut Encoder) {
        enc.usize(self.num_nodes());
        enc.usize(self.num_classes());
        let trip: Vec<_> = self.adjacency().triplets().collect();
        enc.usizes(&trip.iter().map(|t| t.0).collect::<Vec<_>>());
        enc.usizes(&trip.iter().map(|t| t.1).collect::<Vec<_>>());
        enc.scalars(&trip.iter().map(|t| t.2).collect::<Vec<_>>());
        enc.tensor(self.features());
        enc.usizes(self.labels());
        enc.bools(&self.masks().train);
        enc.bools(&self.masks().val);
        enc.bools(&self.masks().test);
        enc.usizes(self.original_ids());
        enc.str(self.lineage());
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let n = dec.usize()?;
        let classes = dec.usize()?;
        let rows = dec.usizes()?;
        let cols = dec.usizes()?;
        let vals: Vec<T> = dec.scalars()?;
        if rows.len() != cols.len() || rows.len() != vals.len() {
            return Err(dec.fail("adjacency arrays differ in length"));
        }
        let trip = rows.into_iter().zip(cols).zip(vals).map(|((r, c), v)| (r, c, v)).collect();
        let adjacency = CsrMatrix::from_triplets(n, n, trip).map_err(|e| dec.fail(e))?;
        let features = dec.tensor()?;
        let labels = dec.usizes()?;
        let masks = Masks {
            train: dec.bools()?,
            val: dec.bools()?,
            test: dec.bools()?,
        };
        let original_ids = dec.usizes()?;
        let lineage = dec.str()?;
        AttributedGraph::from_parts(adjacency, features, labels, classes, masks)
            .map_err(|e| dec.fail(e))?
            .restore_provenance(original_ids, lineage)
    }
}

/// Convenience for splitting a graph's masks into index lists.
pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    indices_of(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::triangle;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn csv_directory_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let g = triangle();
        save_graph(&g, tmp.path(), GraphFormat::EdgeListCsv).unwrap();
        let back: AttributedGraph<f64> = load_graph(tmp.path(), None).unwrap();
        assert_eq!(back.content_hash(), g.content_hash());
    }

    #[test]
    fn json_round_trip_keeps_masks() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = Masks::empty(3);
        m.train[0] = true;
        m.test[2] = true;
        let g = triangle().with_masks(m).unwrap();
        let p = tmp.path().join("g.json");
        save_graph(&g, &p, GraphFormat::Json).unwrap();
        let back: AttributedGraph<f64> = load_graph(&p, None).unwrap();
        assert_eq!(back.masks(), g.masks());
        assert_eq!(back.content_hash(), g.content_hash());
    }

    #[test]
    fn reverse_pairs_merge_but_repeats_fail() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "features.csv", "1,0\n0,1\n");
        write(tmp.path(), "labels.csv", "node,label\n0,a\n1,b\n");
        write(tmp.path(), "edges.csv", "src,dst\n0,1\n1,0\n");
        let g: AttributedGraph<f64> = load_graph(tmp.path(), None).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.num_classes(), 2);
        write(tmp.path(), "edges.csv", "0,1\n0,1\n");
        let err = load_graph::<f64>(tmp.path(), None).unwrap_err().to_string();
        assert!(err.contains("edges.csv:2"), "{err}");
    }

    #[test]
    fn ragged_features_and_unknown_label_nodes_fail() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "features.csv", "1,0\n0\n");
        write(tmp.path(), "labels.csv", "0,0\n1,0\n");
        write(tmp.path(), "edges.csv", "");
        let err = load_graph::<f64>(tmp.path(), None).unwrap_err().to_string();
        assert!(err.contains("features.csv:2"), "{err}");
        write(tmp.path(), "features.csv", "1,0\n0,1\n");
        write(tmp.path(), "labels.csv", "0,0\n5,0\n");
        assert!(load_graph::<f64>(tmp.path(), None).is_err());
    }

    #[test]
    fn citation_layout() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "toy.content", "10 1 0 A\n20 0 1 B\n30 1 1 A\n");
        write(tmp.path(), "toy.cites", "10 20\n20 10\n20 30\n20 30\n");
        let g: AttributedGraph<f64> = load_graph(tmp.path(), None).unwrap();
        assert_eq!((g.num_nodes(), g.num_edges(), g.num_features(), g.num_classes()), (3, 2, 2, 2));
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("g.tcgu");
        let g = triangle();
        save_graph(&g, &p, GraphFormat::Binary).unwrap();
        let back: AttributedGraph<f64> = load_graph(&p, None).unwrap();
        assert!(back.features().bit_eq(g.features()));
        assert_eq!(back.adjacency(), g.adjacency());
        assert_eq!(back.lineage(), g.lineage());
    }
}
