//! Road graph, counter frames, on-disk formats and the synthetic city
//! generator.

mod format;
mod split;
mod synth;

pub use format::{
    load_frames, load_graph, load_manifest, parse_frames, parse_graph, parse_manifest, save_frames,
    save_graph, save_manifest, write_frames, write_graph, write_manifest, DatasetManifest,
    LabelKind,
};
pub use split::{kfold_split, Fold};
pub use synth::{generate_synthetic_city, SynthSpec, SyntheticCity};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of 15-minute bins per input window.
pub const BINS: usize = 4;
/// Slots per day.
pub const SLOTS_PER_DAY: usize = 96;
pub const DAYS_PER_WEEK: usize = 7;

/// Upper bound on entries of a dense incidence matrix.
const MAX_DENSE: usize = 1 << 28;

/// Raw per-edge attributes as read from the graph file.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeAttrs {
    pub speed_kph: f64,
    pub parsed_maxspeed: f64,
    pub length_meters: f64,
    pub counter_distance: f64,
    pub importance: String,
    pub highway: String,
    pub oneway: String,
}

impl EdgeAttrs {
    pub fn continuous(&self) -> [f64; 4] {
        [
            self.speed_kph,
            self.parsed_maxspeed,
            self.length_meters,
            self.counter_distance,
        ]
    }

    pub fn categorical(&self) -> [&str; 3] {
        [&self.importance, &self.highway, &self.oneway]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperSegment {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
}

/// Immutable directed road graph with super-segment incidence matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    edge_attrs: Vec<EdgeAttrs>,
    supersegments: Vec<SuperSegment>,
    a_sv: Tensor,
    a_se: Tensor,
}

impl RoadGraph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        edge_attrs: Vec<EdgeAttrs>,
        supersegments: Vec<SuperSegment>,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Invalid("graph has no nodes".into()));
        }
        if edges.len() != edge_attrs.len() {
            return Err(Error::Invalid(format!(
                "{} edges but {} attribute records",
                edges.len(),
                edge_attrs.len()
            )));
        }
        for (i, &(u, v)) in edges.iter().enumerate() {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Invalid(format!(
                    "edge {i} ({u},{v}) has a dangling endpoint (|V|={num_nodes})"
                )));
            }
        }
        let dense = |cols: usize| {
            supersegments
                .len()
                .checked_mul(cols)
                .filter(|&n| n <= MAX_DENSE)
        };
        if dense(num_nodes).is_none() || dense(edges.len()).is_none() {
            return Err(Error::Invalid(format!(
                "incidence matrices too large: {} super-segments over {num_nodes} nodes / {} edges",
                supersegments.len(),
                edges.len()
            )));
        }
        let mut a_sv = Tensor::zeros(supersegments.len(), num_nodes);
        let mut a_se = Tensor::zeros(supersegments.len(), edges.len());
        for (s, seg) in supersegments.iter().enumerate() {
            if seg.nodes.is_empty() || seg.edges.is_empty() {
                return Err(Error::Invalid(format!("super-segment {s} is empty")));
            }
            for &v in &seg.nodes {
                if v >= num_nodes {
                    return Err(Error::Invalid(format!(
                        "super-segment {s} references unknown node {v}"
                    )));
                }
                a_sv.set(s, v, 1.0);
            }
            for &e in &seg.edges {
                if e >= edges.len() {
                    return Err(Error::Invalid(format!(
                        "super-segment {s} references unknown edge {e}"
                    )));
                }
                a_se.set(s, e, 1.0);
            }
        }
        Ok(Self {
            num_nodes,
            edges,
            edge_attrs,
            supersegments,
            a_sv,
            a_se,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_supersegments(&self) -> usize {
        self.supersegments.len()
    }

    /// Edge endpoints `(tail, head)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_attrs(&self) -> &[EdgeAttrs] {
        &self.edge_attrs
    }

    pub fn supersegments(&self) -> &[SuperSegment] {
        &self.supersegments
    }

    pub fn a_sv(&self) -> &Tensor {
        &self.a_sv
    }

    pub fn a_se(&self) -> &Tensor {
        &self.a_se
    }

    pub fn tails(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn heads(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }
}

/// Row `s` of the result is the sum of the rows of `features` that belong to
/// member set `s` of the 0/1 matrix `membership`.
pub fn aggregate_by_supersegment(membership: &Tensor, features: &Tensor) -> Result<Tensor> {
    if membership.cols() != features.rows() {
        return Err(Error::shape(
            "aggregate_by_supersegment",
            format!("{:?} vs {:?}", membership.shape(), features.shape()),
        ));
    }
    membership.matmul(features)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Congestion {
    Red = 0,
    Yellow = 1,
    Green = 2,
}

impl Congestion {
    pub const ALL: [Congestion; 3] = [Congestion::Red, Congestion::Yellow, Congestion::Green];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            Congestion::Red => "r",
            Congestion::Yellow => "y",
            Congestion::Green => "g",
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        match tok {
            "r" | "red" => Some(Congestion::Red),
            "y" | "yellow" => Some(Congestion::Yellow),
            "g" | "green" => Some(Congestion::Green),
            _ => None,
        }
    }
}

/// Weekday and 15-minute slot of the prediction time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TimeSlot {
    pub weekday: usize,
    pub slot: usize,
}

impl TimeSlot {
    pub fn new(weekday: usize, slot: usize) -> Result<Self> {
        if weekday >= DAYS_PER_WEEK || slot >= SLOTS_PER_DAY {
            return Err(Error::Invalid(format!(
                "time slot out of range: weekday {weekday}, slot {slot}"
            )));
        }
        Ok(Self { weekday, slot })
    }
}

/// One sample: sparse counters for the prior hour, missing mask, time and
/// labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterFrame {
    x: Tensor,
    mask: Tensor,
    pub time: TimeSlot,
    /// Per-edge class, `None` for unlabeled edges.
    pub classes: Option<Vec<Option<Congestion>>>,
    /// Per-super-segment speed.
    pub speeds: Option<Vec<f64>>,
}

impl CounterFrame {
    /// Builds a frame from raw counters; the mask is derived from NaN cells.
    pub fn new(x: Tensor, time: TimeSlot) -> Result<Self> {
        if x.cols() != BINS {
            return Err(Error::shape(
                "counter frame",
                format!("{} bins, expected {BINS}", x.cols()),
            ));
        }
        if x.data().iter().any(|v| v.is_infinite()) {
            return Err(Error::Invalid("infinite counter value".into()));
        }
        let mask = x.map(|v| if v.is_nan() { 0.0 } else { 1.0 });
        Ok(Self {
            x,
            mask,
            time,
            classes: None,
            speeds: None,
        })
    }

    pub fn with_classes(mut self, classes: Vec<Option<Congestion>>) -> Self {
        self.classes = Some(classes);
        self
    }

    pub fn with_speeds(mut self, speeds: Vec<f64>) -> Self {
        self.speeds = Some(speeds);
        self
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn num_nodes(&self) -> usize {
        self.x.rows()
    }

    /// Nodes whose four bins are all missing.
    pub fn missing_nodes(&self) -> Vec<usize> {
        (0..self.mask.rows())
            .filter(|&i| self.mask.row(i).iter().all(|&m| m == 0.0))
            .collect()
    }

    /// Checks that the frame is consistent with `graph`.
    pub fn validate(&self, graph: &RoadGraph) -> Result<()> {
        if self.x.rows() != graph.num_nodes() {
            return Err(Error::Invalid(format!(
                "frame has {} nodes, graph has {}",
                self.x.rows(),
                graph.num_nodes()
            )));
        }
        if let Some(c) = &self.classes {
            if c.len() != graph.num_edges() {
                return Err(Error::Invalid(format!(
                    "frame has {} edge labels, graph has {} edges",
                    c.len(),
                    graph.num_edges()
                )));
            }
        }
        if let Some(s) = &self.speeds {
            if s.len() != graph.num_supersegments() {
                return Err(Error::Invalid(format!(
                    "frame has {} speed labels, graph has {} super-segments",
                    s.len(),
                    graph.num_supersegments()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn member_sum(a: &Tensor, f: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), f.cols());
        for s in 0..a.rows() {
            for i in 0..a.cols() {
                if a.get(s, i) == 1.0 {
                    for j in 0..f.cols() {
                        out.set(s, j, out.get(s, j) + f.get(i, j));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn aggregate_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 1.0, 0.0]]).unwrap();
        let f = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(aggregate_by_supersegment(&a, &f).unwrap().data(), &[3.0]);
        assert_eq!(aggregate_by_supersegment(&Tensor::eye(3), &f).unwrap(), f);
        let z = Tensor::zeros(1, 3);
        assert_eq!(aggregate_by_supersegment(&z, &f).unwrap().data(), &[0.0]);
        assert!(aggregate_by_supersegment(&Tensor::zeros(1, 2), &f).is_err());
    }

    #[test]
    fn aggregate_matches_member_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let s = rng.gen_range(1..=8);
            let n = rng.gen_range(1..20);
            let a = Tensor::from_fn(s, n, |_, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
            let f = Tensor::uniform(n, 5, -10.0, 10.0, &mut rng);
            let diff = aggregate_by_supersegment(&a, &f)
                .unwrap()
                .max_abs_diff(&member_sum(&a, &f))
                .unwrap();
            assert!(diff < 1e-12);
        }
    }

    fn attrs() -> EdgeAttrs {
        EdgeAttrs {
            speed_kph: 50.0,
            parsed_maxspeed: 50.0,
            length_meters: 100.0,
            counter_distance: 1.0,
            importance: "2".into(),
            highway: "primary".into(),
            oneway: "1".into(),
        }
    }

    #[test]
    fn incidence_rows_follow_membership() {
        let g = RoadGraph::new(
            3,
            vec![(0, 1), (1, 2)],
            vec![attrs(), attrs()],
            vec![SuperSegment {
                nodes: vec![0, 1, 2],
                edges: vec![0, 1],
            }],
        )
        .unwrap();
        assert_eq!(g.a_se().data(), &[1.0, 1.0]);
        assert_eq!(g.a_sv().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_dangling_and_empty() {
        assert!(RoadGraph::new(3, vec![(0, 5)], vec![attrs()], vec![]).is_err());
        let empty = SuperSegment {
            nodes: vec![],
            edges: vec![],
        };
        assert!(RoadGraph::new(3, vec![(0, 1)], vec![attrs()], vec![empty]).is_err());
        let bad = SuperSegment {
            nodes: vec![0],
            edges: vec![3],
        };
        assert!(RoadGraph::new(3, vec![(0, 1)], vec![attrs()], vec![bad]).is_err());
    }

    #[test]
    fn frame_mask_tracks_nan() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![f64::NAN; 4]]).unwrap();
        let f = CounterFrame::new(x, TimeSlot::new(0, 0).unwrap()).unwrap();
        assert_eq!(f.mask().row(0), &[1.0; 4]);
        assert_eq!(f.mask().row(1), &[0.0; 4]);
        assert_eq!(f.missing_nodes(), vec![1]);
        assert!(TimeSlot::new(7, 0).is_err());
        assert!(TimeSlot::new(0, 96).is_err());
    }
}
