//! Synthetic cities with a latent speed process, for desk-scale training.
//!
//! Demand follows a two-peak daily sinusoid scaled by a weekday factor plus
//! a per-frame disturbance that is shared by all nodes, so the counters carry
//! information about the current frame. Edge speeds drop with demand,
//! counters are Poisson draws of node flow over the previous hour, and
//! congestion classes come from fixed quantiles of the speed ratio.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{
    Congestion, CounterFrame, EdgeAttrs, RoadGraph, SuperSegment, TimeSlot, BINS, DAYS_PER_WEEK,
    SLOTS_PER_DAY,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Fraction of labeled samples in the red and red+yellow classes.
const RED_QUANTILE: f64 = 0.2;
const YELLOW_QUANTILE: f64 = 0.5;

const HIGHWAYS: [(&str, f64, &str); 4] = [
    ("motorway", 100.0, "4"),
    ("primary", 70.0, "3"),
    ("secondary", 50.0, "2"),
    ("residential", 30.0, "1"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub nodes: usize,
    pub edges: usize,
    pub supersegments: usize,
    pub frames: usize,
    /// Fraction ρ of nodes whose counters are missing in each frame.
    pub missing: f64,
    /// Draw a new missing-node set for every frame instead of one fixed set.
    pub resample_mask: bool,
    /// Mask individual cells instead of whole nodes.
    pub per_cell_missing: bool,
    /// Fraction of edges left unlabeled in each frame.
    pub unlabeled: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            nodes: 50,
            edges: 120,
            supersegments: 10,
            frames: 200,
            missing: 0.5,
            resample_mask: false,
            per_cell_missing: false,
            unlabeled: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.nodes < 2 {
            return bad(format!("need at least 2 nodes, got {}", self.nodes));
        }
        if self.edges < self.nodes - 1 {
            return bad(format!(
                "{} edges cannot connect {} nodes",
                self.edges, self.nodes
            ));
        }
        if self.edges > self.nodes * (self.nodes - 1) {
            return bad(format!(
                "{} edges exceed a simple directed graph",
                self.edges
            ));
        }
        if self.supersegments == 0 || self.frames == 0 {
            return bad("need at least one super-segment and one frame".into());
        }
        if !(0.0..=1.0).contains(&self.missing) || !(0.0..=1.0).contains(&self.unlabeled) {
            return bad("fractions must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Generated dataset plus the latent quantities behind the labels.
#[derive(Clone, Debug)]
pub struct SyntheticCity {
    pub graph: RoadGraph,
    pub frames: Vec<CounterFrame>,
    /// Latent speed per frame per edge.
    pub latent_speeds: Vec<Vec<f64>>,
    /// Speed-ratio thresholds separating red/yellow and yellow/green.
    pub thresholds: (f64, f64),
}

/// Demand level in roughly `[0, 1]` for a weekday and slot.
fn demand(weekday: usize, slot: usize) -> f64 {
    let t = slot as f64 / SLOTS_PER_DAY as f64;
    let commute = 0.5 - 0.5 * (4.0 * PI * t).cos();
    let daylight = 0.5 - 0.5 * (2.0 * PI * t).cos();
    let week = match weekday {
        5 => 0.75,
        6 => 0.6,
        _ => 1.0,
    };
    week * (0.6 * commute + 0.4 * daylight)
}

/// Slot `back` bins before `time`, wrapping into the previous day.
fn earlier(time: TimeSlot, back: usize) -> (usize, usize) {
    let total = time.weekday * SLOTS_PER_DAY + time.slot + DAYS_PER_WEEK * SLOTS_PER_DAY - back;
    let total = total % (DAYS_PER_WEEK * SLOTS_PER_DAY);
    (total / SLOTS_PER_DAY, total % SLOTS_PER_DAY)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = ((sorted.len() as f64) * q).floor() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

fn build_graph(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<RoadGraph> {
    let n = spec.nodes;
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(spec.edges);
    let mut seen = HashSet::new();
    // Random spanning tree keeps the graph weakly connected.
    for v in 1..n {
        let u = rng.gen_range(0..v);
        let e = if rng.gen_bool(0.5) { (u, v) } else { (v, u) };
        seen.insert(e);
        pairs.push(e);
    }
    while pairs.len() < spec.edges {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u != v && seen.insert((u, v)) {
            pairs.push((u, v));
        }
    }

    let attrs: Vec<EdgeAttrs> = pairs
        .iter()
        .map(|_| {
            let (highway, speed, importance) = HIGHWAYS[rng.gen_range(0..HIGHWAYS.len())];
            let maxspeed = if rng.gen_bool(0.2) { 0.0 } else { speed };
            EdgeAttrs {
                speed_kph: speed,
                parsed_maxspeed: maxspeed,
                length_meters: rng.gen_range(50.0f64..500.0).round(),
                counter_distance: rng.gen_range(0..6) as f64,
                importance: importance.to_string(),
                highway: highway.to_string(),
                oneway: if rng.gen_bool(0.3) { "1" } else { "0" }.to_string(),
            }
        })
        .collect();

    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &(u, _)) in pairs.iter().enumerate() {
        out_edges[u].push(i);
    }
    let mut segs = Vec::with_capacity(spec.supersegments);
    for _ in 0..spec.supersegments {
        let first = rng.gen_range(0..pairs.len());
        let target_len = rng.gen_range(2..=5);
        let (u, v) = pairs[first];
        let mut nodes = vec![u, v];
        let mut edges = vec![first];
        let mut head = v;
        while edges.len() < target_len {
            let next: Vec<usize> = out_edges[head]
                .iter()
                .copied()
                .filter(|&e| !nodes.contains(&pairs[e].1))
                .collect();
            let Some(&e) = next.choose(rng) else { break };
            head = pairs[e].1;
            nodes.push(head);
            edges.push(e);
        }
        segs.push(SuperSegment { nodes, edges });
    }
    RoadGraph::new(n, pairs, attrs, segs)
}

fn missing_mask(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<[bool; BINS]> {
    let n = spec.nodes;
    let mut mask = vec![[false; BINS]; n];
    if spec.per_cell_missing {
        let count = (spec.missing * (n * BINS) as f64).ceil() as usize;
        let mut cells: Vec<usize> = (0..n * BINS).collect();
        cells.shuffle(rng);
        for &c in &cells[..count.min(n * BINS)] {
            mask[c / BINS][c % BINS] = true;
        }
    } else {
        let count = (spec.missing * n as f64).ceil() as usize;
        let mut nodes: Vec<usize> = (0..n).collect();
        nodes.shuffle(rng);
        for &v in &nodes[..count.min(n)] {
            mask[v] = [true; BINS];
        }
    }
    mask
}

/// Generates a synthetic city. The same settings and seed give bit-identical
/// output.
pub fn generate_synthetic_city(spec: &SynthSpec, seed: u64) -> Result<SyntheticCity> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = build_graph(spec, &mut rng)?;

    let node_base: Vec<f64> = (0..spec.nodes).map(|_| rng.gen_range(5.0..40.0)).collect();
    let node_phase: Vec<usize> = (0..spec.nodes).map(|_| rng.gen_range(0..4)).collect();
    let free_flow: Vec<f64> = graph
        .edge_attrs()
        .iter()
        .map(|a| a.speed_kph * rng.gen_range(0.8..1.0))
        .collect();
    let sensitivity: Vec<f64> = (0..graph.num_edges())
        .map(|_| rng.gen_range(0.2..0.9))
        .collect();
    let edge_phase: Vec<usize> = (0..graph.num_edges())
        .map(|_| rng.gen_range(0..8))
        .collect();
    let disturbance = Normal::new(0.0, 0.05).expect("valid normal");
    let jitter = Normal::new(0.0, 0.01).expect("valid normal");

    let fixed_mask = missing_mask(spec, &mut rng);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut latent = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);

    for _ in 0..spec.frames {
        let time = TimeSlot::new(
            rng.gen_range(0..DAYS_PER_WEEK),
            rng.gen_range(0..SLOTS_PER_DAY),
        )?;
        let shock: f64 = disturbance.sample(&mut rng);

        let mut x = Tensor::zeros(spec.nodes, BINS);
        for v in 0..spec.nodes {
            for b in 0..BINS {
                let (wd, sl) = earlier(time, BINS - b + node_phase[v]);
                let level = (demand(wd, sl) + shock).clamp(0.0, 1.5);
                let rate = node_base[v] * (0.3 + level);
                let count = Poisson::new(rate).expect("positive rate").sample(&mut rng);
                x.set(v, b, count);
            }
        }
        let speeds: Vec<f64> = (0..graph.num_edges())
            .map(|e| {
                let (wd, sl) = earlier(time, edge_phase[e]);
                let level = (demand(wd, sl) + shock).clamp(0.0, 1.5);
                let ratio =
                    (1.0 - 0.7 * sensitivity[e] * level + jitter.sample(&mut rng)).max(0.05);
                free_flow[e] * ratio
            })
            .collect();
        latent.push(speeds);
        masks.push(if spec.resample_mask {
            missing_mask(spec, &mut rng)
        } else {
            fixed_mask.clone()
        });
        frames.push((time, x));
    }

    let speed_kph: Vec<f64> = graph.edge_attrs().iter().map(|a| a.speed_kph).collect();
    let mut ratios: Vec<f64> = latent
        .iter()
        .flat_map(|s| s.iter().zip(&speed_kph).map(|(v, k)| v / k))
        .collect();
    ratios.sort_by(f64::total_cmp);
    let thresholds = (
        quantile(&ratios, RED_QUANTILE),
        quantile(&ratios, YELLOW_QUANTILE),
    );

    let mut out = Vec::with_capacity(spec.frames);
    for ((time, mut x), (speeds, mask)) in frames.into_iter().zip(latent.iter().zip(&masks)) {
        for (v, m) in mask.iter().enumerate() {
            for (b, &missing) in m.iter().enumerate() {
                if missing {
                    x.set(v, b, f64::NAN);
                }
            }
        }
        let classes: Vec<Option<Congestion>> = speeds
            .iter()
            .zip(&speed_kph)
            .map(|(s, k)| {
                if spec.unlabeled > 0.0 && rng.gen_bool(spec.unlabeled) {
                    return None;
                }
                let r = s / k;
                Some(if r < thresholds.0 {
                    Congestion::Red
                } else if r < thresholds.1 {
                    Congestion::Yellow
                } else {
                    Congestion::Green
                })
            })
            .collect();
        let seg_speeds: Vec<f64> = graph
            .supersegments()
            .iter()
            .map(|seg| {
                let (mut num, mut den) = (0.0, 0.0);
                for &e in &seg.edges {
                    let len = graph.edge_attrs()[e].length_meters;
                    num += len * speeds[e];
                    den += len;
                }
                num / den
            })
            .collect();
        out.push(
            CounterFrame::new(x, time)?
                .with_classes(classes)
                .with_speeds(seg_speeds),
        );
    }

    Ok(SyntheticCity {
        graph,
        frames: out,
        latent_speeds: latent,
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn small() -> SynthSpec {
        SynthSpec {
            nodes: 20,
            edges: 45,
            supersegments: 5,
            frames: 40,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_city_satisfies_frame_invariants() {
        let spec = SynthSpec::default();
        let city = generate_synthetic_city(&spec, 7).unwrap();
        assert_eq!(city.graph.num_nodes(), 50);
        assert_eq!(city.graph.num_edges(), 120);
        assert_eq!(city.graph.num_supersegments(), 10);
        assert_eq!(city.frames.len(), 200);
        for f in &city.frames {
            f.validate(&city.graph).unwrap();
            assert_eq!(f.missing_nodes().len(), 25);
            for i in 0..f.num_nodes() {
                let row = f.mask().row(i);
                assert!(row.iter().all(|&m| m == row[0]), "partial node mask");
            }
            assert!(f.time.weekday < 7 && f.time.slot < 96);
        }
    }

    #[test]
    fn zero_missing_gives_full_mask() {
        let spec = SynthSpec {
            missing: 0.0,
            ..small()
        };
        let city = generate_synthetic_city(&spec, 1).unwrap();
        assert!(city
            .frames
            .iter()
            .all(|f| f.mask().data().iter().all(|&m| m == 1.0)));
    }

    #[test]
    fn same_seed_same_city() {
        let a = generate_synthetic_city(&small(), 3).unwrap();
        let b = generate_synthetic_city(&small(), 3).unwrap();
        assert_eq!(
            super::super::write_graph(&a.graph),
            super::super::write_graph(&b.graph)
        );
        assert_eq!(
            super::super::write_frames(&a.frames),
            super::super::write_frames(&b.frames)
        );
        let c = generate_synthetic_city(&small(), 4).unwrap();
        assert_ne!(
            super::super::write_frames(&a.frames),
            super::super::write_frames(&c.frames)
        );
    }

    #[test]
    fn infeasible_specs_rejected() {
        let spec = SynthSpec {
            nodes: 10,
            edges: 8,
            ..small()
        };
        assert!(generate_synthetic_city(&spec, 0).is_err());
    }

    #[test]
    fn resampled_and_per_cell_masks() {
        let spec = SynthSpec {
            resample_mask: true,
            ..small()
        };
        let city = generate_synthetic_city(&spec, 5).unwrap();
        let sets: HashSet<Vec<usize>> = city.frames.iter().map(|f| f.missing_nodes()).collect();
        assert!(sets.len() > 1);
        assert!(city.frames.iter().all(|f| f.missing_nodes().len() == 10));

        let spec = SynthSpec {
            per_cell_missing: true,
            missing: 0.25,
            ..small()
        };
        let city = generate_synthetic_city(&spec, 5).unwrap();
        for f in &city.frames {
            let missing = f.mask().data().iter().filter(|&&m| m == 0.0).count();
            assert_eq!(missing, 20);
        }
    }

    #[test]
    fn class_ratio_is_imbalanced_as_designed() {
        let city = generate_synthetic_city(&SynthSpec::default(), 11).unwrap();
        let mut counts = [0usize; 3];
        for f in &city.frames {
            for c in f.classes.as_ref().unwrap().iter().flatten() {
                counts[c.index()] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let frac: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        assert!((frac[0] - 0.2).abs() < 0.02, "{frac:?}");
        assert!((frac[1] - 0.3).abs() < 0.02, "{frac:?}");
        assert!((frac[2] - 0.5).abs() < 0.02, "{frac:?}");
    }

    #[test]
    fn supersegments_are_paths() {
        let city = generate_synthetic_city(&SynthSpec::default(), 2).unwrap();
        for s in city.graph.supersegments() {
            assert_eq!(s.nodes.len(), s.edges.len() + 1);
            for (i, &e) in s.edges.iter().enumerate() {
                assert_eq!(city.graph.edges()[e], (s.nodes[i], s.nodes[i + 1]));
            }
        }
    }

    /// Multinomial logistic regression on the latent speed ratio, trained
    /// with plain gradient descent. A sanity check on the generator: the
    /// labels must be recoverable from the latent process.
    #[test]
    fn logistic_probe_on_latent_speeds_recovers_labels() {
        let city = generate_synthetic_city(&SynthSpec::default(), 13).unwrap();
        let kph: Vec<f64> = city
            .graph
            .edge_attrs()
            .iter()
            .map(|a| a.speed_kph)
            .collect();
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (f, speeds) in city.frames.iter().zip(&city.latent_speeds) {
            for (e, c) in f.classes.as_ref().unwrap().iter().enumerate() {
                if let Some(c) = c {
                    let r = speeds[e] / kph[e];
                    feats.push(vec![(r - 0.7) * 10.0, 1.0]);
                    labels.push(c.index());
                }
            }
        }
        let n = labels.len();
        let x = Tensor::from_rows(&feats).unwrap();
        let mut onehot = Tensor::zeros(n, 3);
        for (i, &c) in labels.iter().enumerate() {
            onehot.set(i, c, -1.0 / n as f64);
        }
        let mut w = Tensor::zeros(2, 3);
        for _ in 0..3000 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.constant(onehot.clone());
            let logits = tape.matmul(xv, wv).unwrap();
            let lp = tape.log_softmax_rows(logits);
            let prod = tape.mul(lp, y).unwrap();
            let loss = tape.sum(prod);
            let g = tape.backward(loss).unwrap();
            w.axpy(-2.0, g.get(wv).unwrap()).unwrap();
        }
        let logits = x.matmul(&w).unwrap();
        let correct = (0..n)
            .filter(|&i| {
                let row = logits.row(i);
                let arg = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                arg == labels[i]
            })
            .count();
        let acc = correct as f64 / n as f64;
        assert!(acc > 0.95, "probe accuracy {acc}");
    }
}
