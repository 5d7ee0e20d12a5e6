//! Plain-text graph, frame and manifest formats.
//!
//! Graph file:
//! ```text
//! nodes <|V|>
//! edge <u> <v> <speed_kph> <parsed_maxspeed> <length_meters> <counter_distance> <importance> <highway> <oneway>
//! ss <node ids…> | <edge ids…>
//! ```
//! Frames file, one block per sample:
//! ```text
//! frame <weekday> <slot>
//! <4 values, NaN for missing>        (|V| lines)
//! labels congestion <r|y|g|->…       (optional, |E| tokens)
//! labels speed <f64>…                (optional, |S| tokens)
//! ```
//! Blank lines and lines starting with `#` are ignored in both.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{Congestion, CounterFrame, EdgeAttrs, RoadGraph, SuperSegment, TimeSlot, BINS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::preprocess::NormStats;

fn significant_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn field<T: FromStr>(tok: Option<&str>, what: &str, origin: &str, line: usize) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(origin, line, format!("missing field `{what}`")))?;
    tok.parse().map_err(|_| {
        Error::parse(
            origin,
            line,
            format!("bad value `{tok}` for field `{what}`"),
        )
    })
}

fn finite(v: f64, what: &str, origin: &str, line: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::parse(
            origin,
            line,
            format!("field `{what}` must be finite"),
        ))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a graph file. `origin` names the source in diagnostics.
pub fn parse_graph(text: &str, origin: &str) -> Result<RoadGraph> {
    let mut num_nodes: Option<usize> = None;
    let mut edges = Vec::new();
    let mut attrs = Vec::new();
    let mut segs: Vec<(usize, SuperSegment)> = Vec::new();

    for (ln, line) in significant_lines(text) {
        let mut toks = line.split_whitespace();
        let kind = toks.next().unwrap_or_default();
        match kind {
            "nodes" => {
                if num_nodes.is_some() {
                    return Err(Error::parse(origin, ln, "duplicate `nodes` header"));
                }
                let n: usize = field(toks.next(), "nodes", origin, ln)?;
                if n == 0 {
                    return Err(Error::parse(
                        origin,
                        ln,
                        "graph must have at least one node",
                    ));
                }
                num_nodes = Some(n);
            }
            "edge" => {
                let n = num_nodes
                    .ok_or_else(|| Error::parse(origin, ln, "`edge` before `nodes` header"))?;
                let u: usize = field(toks.next(), "u", origin, ln)?;
                let v: usize = field(toks.next(), "v", origin, ln)?;
                if u >= n || v >= n {
                    return Err(Error::parse(
                        origin,
                        ln,
                        format!("dangling edge endpoint ({u},{v}) with {n} nodes"),
                    ));
                }
                let mut cont = [0.0; 4];
                for (slot, name) in cont.iter_mut().zip([
                    "speed_kph",
                    "parsed_maxspeed",
                    "length_meters",
                    "counter_distance",
                ]) {
                    *slot = finite(field(toks.next(), name, origin, ln)?, name, origin, ln)?;
                }
                let importance: String = field(toks.next(), "importance", origin, ln)?;
                let highway: String = field(toks.next(), "highway", origin, ln)?;
                let oneway: String = field(toks.next(), "oneway", origin, ln)?;
                if toks.next().is_some() {
                    return Err(Error::parse(origin, ln, "trailing fields on edge line"));
                }
                edges.push((u, v));
                attrs.push(EdgeAttrs {
                    speed_kph: cont[0],
                    parsed_maxspeed: cont[1],
                    length_meters: cont[2],
                    counter_distance: cont[3],
                    importance,
                    highway,
                    oneway,
                });
            }
            "ss" => {
                let n = num_nodes
                    .ok_or_else(|| Error::parse(origin, ln, "`ss` before `nodes` header"))?;
                let rest = line[2..].trim();
                let (node_part, edge_part) = rest
                    .split_once('|')
                    .ok_or_else(|| Error::parse(origin, ln, "super-segment needs `|` separator"))?;
                let nodes = node_part
                    .split_whitespace()
                    .map(|t| field::<usize>(Some(t), "node id", origin, ln))
                    .collect::<Result<Vec<_>>>()?;
                let seg_edges = edge_part
                    .split_whitespace()
                    .map(|t| field::<usize>(Some(t), "edge id", origin, ln))
                    .collect::<Result<Vec<_>>>()?;
                if nodes.is_empty() || seg_edges.is_empty() {
                    return Err(Error::parse(origin, ln, "empty super-segment"));
                }
                if let Some(v) = nodes.iter().find(|&&v| v >= n) {
                    return Err(Error::parse(origin, ln, format!("unknown node {v}")));
                }
                segs.push((
                    ln,
                    SuperSegment {
                        nodes,
                        edges: seg_edges,
                    },
                ));
            }
            other => {
                return Err(Error::parse(
                    origin,
                    ln,
                    format!("unknown record `{other}`"),
                ));
            }
        }
    }

    let n = num_nodes.ok_or_else(|| Error::parse(origin, 1, "missing `nodes` header"))?;
    // Edge references are checked once all edges are known.
    for (ln, seg) in &segs {
        if let Some(e) = seg.edges.iter().find(|&&e| e >= edges.len()) {
            return Err(Error::parse(
                origin,
                *ln,
                format!("super-segment references unknown edge {e}"),
            ));
        }
    }
    RoadGraph::new(n, edges, attrs, segs.into_iter().map(|(_, s)| s).collect())
}

pub fn write_graph(g: &RoadGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "nodes {}", g.num_nodes());
    for (&(u, v), a) in g.edges().iter().zip(g.edge_attrs()) {
        let _ = writeln!(
            out,
            "edge {u} {v} {} {} {} {} {} {} {}",
            a.speed_kph,
            a.parsed_maxspeed,
            a.length_meters,
            a.counter_distance,
            a.importance,
            a.highway,
            a.oneway
        );
    }
    for s in g.supersegments() {
        let nodes: Vec<String> = s.nodes.iter().map(usize::to_string).collect();
        let edges: Vec<String> = s.edges.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "ss {} | {}", nodes.join(" "), edges.join(" "));
    }
    out
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<RoadGraph> {
    let path = path.as_ref();
    parse_graph(&read(path)?, &path.display().to_string())
}

pub fn save_graph(path: impl AsRef<Path>, g: &RoadGraph) -> Result<()> {
    write(path.as_ref(), &write_graph(g))
}

struct PendingFrame {
    line: usize,
    time: TimeSlot,
    rows: Vec<f64>,
    classes: Option<Vec<Option<Congestion>>>,
    speeds: Option<Vec<f64>>,
}

impl PendingFrame {
    fn finish(self, origin: &str) -> Result<CounterFrame> {
        if self.rows.is_empty() {
            return Err(Error::parse(origin, self.line, "frame has no counter rows"));
        }
        let n = self.rows.len() / BINS;
        let x = Tensor::new(n, BINS, self.rows)?;
        let mut f = CounterFrame::new(x, self.time)
            .map_err(|e| Error::parse(origin, self.line, e.to_string()))?;
        f.classes = self.classes;
        f.speeds = self.speeds;
        Ok(f)
    }
}

/// Parses a frames file. Sizes are checked against a graph separately with
/// [`CounterFrame::validate`].
pub fn parse_frames(text: &str, origin: &str) -> Result<Vec<CounterFrame>> {
    let mut frames = Vec::new();
    let mut header_lines = Vec::new();
    let mut cur: Option<PendingFrame> = None;

    for (ln, line) in significant_lines(text) {
        let mut toks = line.split_whitespace();
        let first = toks.next().unwrap_or_default();
        match first {
            "frame" => {
                if let Some(p) = cur.take() {
                    header_lines.push(p.line);
                    frames.push(p.finish(origin)?);
                }
                let weekday: usize = field(toks.next(), "weekday", origin, ln)?;
                let slot: usize = field(toks.next(), "slot", origin, ln)?;
                if toks.next().is_some() {
                    return Err(Error::parse(origin, ln, "trailing fields on frame line"));
                }
                let time = TimeSlot::new(weekday, slot)
                    .map_err(|e| Error::parse(origin, ln, e.to_string()))?;
                cur = Some(PendingFrame {
                    line: ln,
                    time,
                    rows: Vec::new(),
                    classes: None,
                    speeds: None,
                });
            }
            "labels" => {
                let p = cur
                    .as_mut()
                    .ok_or_else(|| Error::parse(origin, ln, "`labels` outside a frame"))?;
                match toks.next() {
                    Some("congestion") => {
                        if p.classes.is_some() {
                            return Err(Error::parse(origin, ln, "duplicate congestion labels"));
                        }
                        let cls = toks
                            .map(|t| match t {
                                "-" => Ok(None),
                                _ => Congestion::from_token(t).map(Some).ok_or_else(|| {
                                    Error::parse(origin, ln, format!("bad class `{t}`"))
                                }),
                            })
                            .collect::<Result<Vec<_>>>()?;
                        p.classes = Some(cls);
                    }
                    Some("speed") => {
                        if p.speeds.is_some() {
                            return Err(Error::parse(origin, ln, "duplicate speed labels"));
                        }
                        let sp = toks
                            .map(|t| {
                                field::<f64>(Some(t), "speed", origin, ln)
                                    .and_then(|v| finite(v, "speed", origin, ln))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        p.speeds = Some(sp);
                    }
                    other => {
                        return Err(Error::parse(
                            origin,
                            ln,
                            format!("unknown label kind `{}`", other.unwrap_or("")),
                        ))
                    }
                }
            }
            _ => {
                let p = cur
                    .as_mut()
                    .ok_or_else(|| Error::parse(origin, ln, "counter row before `frame`"))?;
                if p.classes.is_some() || p.speeds.is_some() {
                    return Err(Error::parse(origin, ln, "counter row after labels"));
                }
                let vals = line
                    .split_whitespace()
                    .map(|t| {
                        if t.eq_ignore_ascii_case("nan") {
                            Ok(f64::NAN)
                        } else {
                            field::<f64>(Some(t), "counter", origin, ln)
                                .and_then(|v| finite(v, "counter", origin, ln))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() != BINS {
                    return Err(Error::parse(
                        origin,
                        ln,
                        format!("expected {BINS} counter values, got {}", vals.len()),
                    ));
                }
                p.rows.extend(vals);
            }
        }
    }
    if let Some(p) = cur.take() {
        header_lines.push(p.line);
        frames.push(p.finish(origin)?);
    }
    if let Some(first) = frames.first() {
        let n = first.num_nodes();
        if let Some(i) = frames.iter().position(|f| f.num_nodes() != n) {
            return Err(Error::parse(
                origin,
                header_lines[i],
                format!(
                    "frame has {} nodes, first frame has {n}",
                    frames[i].num_nodes()
                ),
            ));
        }
    }
    Ok(frames)
}

pub fn write_frames(frames: &[CounterFrame]) -> String {
    let mut out = String::new();
    for f in frames {
        let _ = writeln!(out, "frame {} {}", f.time.weekday, f.time.slot);
        for i in 0..f.num_nodes() {
            let row: Vec<String> = f
                .x()
                .row(i)
                .iter()
                .map(|v| {
                    if v.is_nan() {
                        "NaN".to_string()
                    } else {
                        v.to_string()
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        if let Some(c) = &f.classes {
            let toks: Vec<&str> = c.iter().map(|c| c.map_or("-", Congestion::token)).collect();
            let _ = writeln!(out, "labels congestion {}", toks.join(" "));
        }
        if let Some(s) = &f.speeds {
            let toks: Vec<String> = s.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "labels speed {}", toks.join(" "));
        }
    }
    out
}

pub fn load_frames(path: impl AsRef<Path>) -> Result<Vec<CounterFrame>> {
    let path = path.as_ref();
    parse_frames(&read(path)?, &path.display().to_string())
}

pub fn save_frames(path: impl AsRef<Path>, frames: &[CounterFrame]) -> Result<()> {
    write(path.as_ref(), &write_frames(frames))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LabelKind {
    Congestion,
    Speed,
}

impl LabelKind {
    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Congestion => "congestion",
            LabelKind::Speed => "speed",
        }
    }
}

impl FromStr for LabelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "congestion" => Ok(LabelKind::Congestion),
            "speed" => Ok(LabelKind::Speed),
            _ => Err(Error::Invalid(format!("unknown label kind `{s}`"))),
        }
    }
}

/// Dataset description: file locations, label kinds and counter statistics.
///
/// Relative paths are resolved against the manifest's directory by
/// [`DatasetManifest::resolve`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub city: String,
    pub graph: PathBuf,
    pub frames: PathBuf,
    pub labels: Vec<LabelKind>,
    pub stats: Option<NormStats>,
    /// Keys not interpreted here, kept in order.
    pub extra: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn resolve(&self, base: &Path) -> (PathBuf, PathBuf) {
        (base.join(&self.graph), base.join(&self.frames))
    }
}

pub fn parse_manifest(text: &str, origin: &str) -> Result<DatasetManifest> {
    let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (ln, line) in significant_lines(text) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, ln, "expected key=value"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(origin, ln, "empty key"));
        }
        if kv
            .insert(k.to_string(), (ln, v.trim().to_string()))
            .is_some()
        {
            return Err(Error::parse(origin, ln, format!("duplicate key `{k}`")));
        }
    }
    let mut take = |k: &str| kv.remove(k);
    let need = |e: Option<(usize, String)>, k: &str| {
        e.map(|(_, v)| v)
            .ok_or_else(|| Error::parse(origin, 0, format!("missing key `{k}`")))
    };
    let city = take("city")
        .map(|(_, v)| v)
        .unwrap_or_else(|| "unnamed".into());
    let graph = PathBuf::from(need(take("graph"), "graph")?);
    let frames = PathBuf::from(need(take("frames"), "frames")?);
    let labels = match take("labels") {
        Some((ln, v)) => v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e: Error| Error::parse(origin, ln, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let stat_keys = ["mean", "std", "min", "max", "clip_max"];
    let stats = if stat_keys.iter().any(|k| kv.contains_key(*k)) {
        let mut vals = [0.0; 5];
        for (slot, k) in vals.iter_mut().zip(stat_keys) {
            let (ln, v) = kv
                .remove(k)
                .ok_or_else(|| Error::parse(origin, 0, format!("missing key `{k}`")))?;
            *slot = field(Some(&v), k, origin, ln)?;
        }
        let st = NormStats::new(vals[0], vals[1], vals[2], vals[3], vals[4])
            .map_err(|e| Error::parse(origin, 0, e.to_string()))?;
        Some(st)
    } else {
        None
    };
    Ok(DatasetManifest {
        city,
        graph,
        frames,
        labels,
        stats,
        extra: kv.into_iter().map(|(k, (_, v))| (k, v)).collect(),
    })
}

pub fn write_manifest(m: &DatasetManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "city={}", m.city);
    let _ = writeln!(out, "graph={}", m.graph.display());
    let _ = writeln!(out, "frames={}", m.frames.display());
    let labels: Vec<&str> = m.labels.iter().map(|l| l.name()).collect();
    let _ = writeln!(out, "labels={}", labels.join(","));
    if let Some(s) = &m.stats {
        let _ = writeln!(out, "mean={}", s.mean);
        let _ = writeln!(out, "std={}", s.std);
        let _ = writeln!(out, "min={}", s.min);
        let _ = writeln!(out, "max={}", s.max);
        let _ = writeln!(out, "clip_max={}", s.clip_max);
    }
    for (k, v) in &m.extra {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    parse_manifest(&read(path)?, &path.display().to_string())
}

pub fn save_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    write(path.as_ref(), &write_manifest(m))
}
