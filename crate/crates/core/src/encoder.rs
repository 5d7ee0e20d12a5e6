//! Graph feature encoders: explicit edge features, GATv2 node layers,
//! endpoint-pair edge features, temporal lookups and super-segment
//! aggregation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graphmodel::{RoadGraph, DAYS_PER_WEEK, SLOTS_PER_DAY};
use crate::nn::{embedding, Linear, ParamId, ParamSet, Session, LEAKY_SLOPE};
use crate::numerics::{Tensor, Var};

const CATEGORICAL: [&str; 3] = ["importance", "highway", "oneway"];

/// Min-max scaling for the four continuous edge attributes and one-hot
/// vocabularies for the three categorical ones, fitted on one graph.
///
/// Categories unseen at fit time encode as an all-zero block.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeatureEncoder {
    pub cont_min: [f64; 4],
    pub cont_max: [f64; 4],
    pub vocabs: [Vec<String>; 3],
}

impl EdgeFeatureEncoder {
    pub fn fit(graph: &RoadGraph) -> Self {
        let mut cont_min = [f64::INFINITY; 4];
        let mut cont_max = [f64::NEG_INFINITY; 4];
        let mut vocabs: [Vec<String>; 3] = Default::default();
        for a in graph.edge_attrs() {
            for (k, v) in a.continuous().into_iter().enumerate() {
                cont_min[k] = cont_min[k].min(v);
                cont_max[k] = cont_max[k].max(v);
            }
            for (voc, c) in vocabs.iter_mut().zip(a.categorical()) {
                if !voc.iter().any(|x| x == c) {
                    voc.push(c.to_string());
                }
            }
        }
        for v in &mut vocabs {
            v.sort();
        }
        if graph.num_edges() == 0 {
            cont_min = [0.0; 4];
            cont_max = [0.0; 4];
        }
        Self {
            cont_min,
            cont_max,
            vocabs,
        }
    }

    pub fn width(&self) -> usize {
        4 + self.vocabs.iter().map(Vec::len).sum::<usize>()
    }

    /// `|E| × width` explicit feature matrix.
    pub fn encode(&self, graph: &RoadGraph) -> Tensor {
        let w = self.width();
        let mut out = Tensor::zeros(graph.num_edges(), w);
        for (e, a) in graph.edge_attrs().iter().enumerate() {
            let row = out.row_mut(e);
            for (k, v) in a.continuous().into_iter().enumerate() {
                let span = self.cont_max[k] - self.cont_min[k];
                row[k] = if span > 0.0 {
                    ((v - self.cont_min[k]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
            let mut offset = 4;
            for (voc, c) in self.vocabs.iter().zip(a.categorical()) {
                if let Some(i) = voc.iter().position(|x| x == c) {
                    row[offset + i] = 1.0;
                }
                offset += voc.len();
            }
        }
        out
    }

    /// Key/value lines for checkpoint metadata.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("edge.cont_min".to_string(), join(&self.cont_min)),
            ("edge.cont_max".to_string(), join(&self.cont_max)),
        ];
        for (name, voc) in CATEGORICAL.iter().zip(&self.vocabs) {
            out.push((format!("edge.vocab.{name}"), voc.join(",")));
        }
        out
    }

    pub fn from_meta(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let need = |k: &str| get(k).ok_or_else(|| Error::Invalid(format!("missing `{k}`")));
        let floats = |k: &str| -> Result<[f64; 4]> {
            let v: Vec<f64> = need(k)?
                .split(',')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Invalid(format!("bad `{k}`")))
                })
                .collect::<Result<_>>()?;
            v.try_into()
                .map_err(|_| Error::Invalid(format!("`{k}` needs 4 values")))
        };
        let mut vocabs: [Vec<String>; 3] = Default::default();
        for (voc, name) in vocabs.iter_mut().zip(CATEGORICAL) {
            let raw = need(&format!("edge.vocab.{name}"))?;
            *voc = raw
                .split(',')
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect();
        }
        Ok(Self {
            cont_min: floats("edge.cont_min")?,
            cont_max: floats("edge.cont_max")?,
            vocabs,
        })
    }
}

/// Directed message-passing structure with one self-loop per node appended
/// after the real edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GatTopology {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub num_real: usize,
}

impl GatTopology {
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if let Some(&(u, v)) = edges
            .iter()
            .find(|&&(u, v)| u >= num_nodes || v >= num_nodes)
        {
            return Err(Error::Invalid(format!(
                "edge ({u},{v}) outside {num_nodes} nodes"
            )));
        }
        let mut src: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let mut dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
        src.extend(0..num_nodes);
        dst.extend(0..num_nodes);
        Ok(Self {
            num_nodes,
            src,
            dst,
            num_real: edges.len(),
        })
    }

    pub fn from_graph(graph: &RoadGraph) -> Result<Self> {
        Self::new(graph.num_nodes(), graph.edges())
    }

    /// Super-segments as nodes, linked both ways when they share a road node.
    pub fn supersegment_adjacency(graph: &RoadGraph) -> Result<Self> {
        let shared = graph.a_sv().matmul_t(graph.a_sv())?;
        let n = graph.num_supersegments();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && shared.get(i, j) > 0.0 {
                    edges.push((i, j));
                }
            }
        }
        Self::new(n, &edges)
    }
}

/// One GATv2 layer with optional multi-head averaging.
///
/// Score for `u → v` is `aᵀ·leaky_relu(W_l·h_v + W_r·h_u) + f_g(e_uv)`;
/// weights are a softmax over the in-neighborhood of `v` including its
/// self-loop (whose edge term is 0); the output is `Σ α·W_r·h_u`.
#[derive(Clone, Debug)]
pub struct GatLayer {
    heads: Vec<GatHead>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug)]
struct GatHead {
    w_l: Linear,
    w_r: Linear,
    attn: ParamId,
    f_g: Option<Linear>,
}

/// Layer output plus per-head attention coefficients in topology order.
pub struct GatOutput {
    pub out: Var,
    pub alpha: Vec<Var>,
}

impl GatLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        edge_dim: Option<usize>,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("GAT needs at least one head".into()));
        }
        let bound = 1.0 / (out_dim.max(1) as f64).sqrt();
        let heads = (0..heads)
            .map(|h| {
                let prefix = if heads == 1 {
                    name.to_string()
                } else {
                    format!("{name}.head{h}")
                };
                Ok(GatHead {
                    w_l: Linear::new(params, &format!("{prefix}.w_l"), in_dim, out_dim, rng)?,
                    w_r: Linear::new(params, &format!("{prefix}.w_r"), in_dim, out_dim, rng)?,
                    attn: params.add(
                        format!("{prefix}.attn"),
                        Tensor::uniform(out_dim, 1, -bound, bound, rng),
                    )?,
                    f_g: match edge_dim {
                        Some(w) => Some(Linear::new(params, &format!("{prefix}.f_g"), w, 1, rng)?),
                        None => None,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(
        &self,
        s: &mut Session,
        h: Var,
        topo: &GatTopology,
        edge_feats: Option<Var>,
    ) -> Result<GatOutput> {
        if s.value(h).rows() != topo.num_nodes {
            return Err(Error::shape(
                "gatv2",
                format!("{} rows for {} nodes", s.value(h).rows(), topo.num_nodes),
            ));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let left = head.w_l.forward(s, h)?;
            let right = head.w_r.forward(s, h)?;
            let at_dst = s.tape.gather_rows(left, &topo.dst)?;
            let from_src = s.tape.gather_rows(right, &topo.src)?;
            let pre = s.tape.add(at_dst, from_src)?;
            let act = s.tape.leaky_relu(pre, LEAKY_SLOPE);
            let attn = s.p(head.attn);
            let mut score = s.tape.matmul(act, attn)?;
            if let (Some(f_g), Some(e)) = (&head.f_g, edge_feats) {
                let real = f_g.forward(s, e)?;
                if s.value(real).rows() != topo.num_real {
                    return Err(Error::shape("gatv2", "edge features do not match edges"));
                }
                let loops = s.tape.constant(Tensor::zeros(topo.num_nodes, 1));
                let bias = s.tape.concat_rows(&[real, loops])?;
                score = s.tape.add(score, bias)?;
            }
            let alpha = s.tape.segment_softmax(score, &topo.dst, topo.num_nodes)?;
            let weighted = s.tape.mul_col(from_src, alpha)?;
            outs.push(
                s.tape
                    .scatter_add_rows(weighted, &topo.dst, topo.num_nodes)?,
            );
            alphas.push(alpha);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = s.tape.add(acc, o)?;
            }
            s.tape.scale(acc, 1.0 / outs.len() as f64)
        };
        Ok(GatOutput { out, alpha: alphas })
    }
}

/// Concatenates the two endpoint rows of every edge (tail then head) and
/// applies one affine layer.
pub fn edge_pair_features(
    s: &mut Session,
    nodes: Var,
    tails: &[usize],
    heads: &[usize],
    layer: &Linear,
) -> Result<Var> {
    let t = s.tape.gather_rows(nodes, tails)?;
    let h = s.tape.gather_rows(nodes, heads)?;
    let pair = s.tape.concat_cols(&[t, h])?;
    layer.forward(s, pair)
}

/// Week row and time row, each repeated `n_rows` times.
pub fn temporal_features(
    s: &mut Session,
    weekday: usize,
    slot: usize,
    week: Var,
    time: Var,
    n_rows: usize,
) -> Result<(Var, Var)> {
    if weekday >= DAYS_PER_WEEK || slot >= SLOTS_PER_DAY {
        return Err(Error::Invalid(format!(
            "temporal index out of range: weekday {weekday}, slot {slot}"
        )));
    }
    let w = s.tape.gather_rows(week, &vec![weekday; n_rows])?;
    let t = s.tape.gather_rows(time, &vec![slot; n_rows])?;
    Ok((w, t))
}

/// Super-segment level features: `A_SV·U_d+`, `A_SV·U_s+`, `A_SE·V_e`,
/// `A_SE·V_i`.
pub struct SegmentFeatures {
    pub dynamic_nodes: Var,
    pub static_nodes: Var,
    pub explicit_edges: Var,
    pub implicit_edges: Var,
}

pub fn supersegment_features(
    s: &mut Session,
    a_sv: Var,
    a_se: Var,
    u_d_plus: Var,
    u_s_plus: Var,
    v_e: Var,
    v_i: Var,
) -> Result<SegmentFeatures> {
    Ok(SegmentFeatures {
        dynamic_nodes: s.tape.matmul(a_sv, u_d_plus)?,
        static_nodes: s.tape.matmul(a_sv, u_s_plus)?,
        explicit_edges: s.tape.matmul(a_se, v_e)?,
        implicit_edges: s.tape.matmul(a_se, v_i)?,
    })
}

/// Learned tables and layers of the feature encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub node_embedding: ParamId,
    pub edge_embedding: ParamId,
    pub week: Option<ParamId>,
    pub time: Option<ParamId>,
    pub segment_embedding: Option<ParamId>,
    pub gat_dynamic: GatLayer,
    pub gat_static: GatLayer,
    /// Edge-level projections, present only when predicting per edge.
    pub edge_layers: Option<EdgeLayers>,
    pub dim: usize,
}

/// `f_N1`, `f_N2` over endpoint pairs and `f_E` over explicit features.
#[derive(Clone, Debug)]
pub struct EdgeLayers {
    pub f_n1: Linear,
    pub f_n2: Linear,
    pub f_e: Linear,
}

pub struct EncoderShape {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_supersegments: usize,
    pub edge_width: usize,
    pub dynamic_width: usize,
    pub dim: usize,
    pub heads: usize,
    pub week: bool,
    pub time: bool,
    pub edge_level: bool,
    pub segments: bool,
}

impl Encoder {
    pub fn new(params: &mut ParamSet, shape: &EncoderShape, rng: &mut impl Rng) -> Result<Self> {
        let d = shape.dim;
        if d == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let node_embedding = embedding(params, "emb.node", shape.num_nodes, d, rng)?;
        let edge_embedding = embedding(params, "emb.edge", shape.num_edges, d, rng)?;
        let week = shape
            .week
            .then(|| embedding(params, "emb.week", DAYS_PER_WEEK, d, rng))
            .transpose()?;
        let time = shape
            .time
            .then(|| embedding(params, "emb.time", SLOTS_PER_DAY, d, rng))
            .transpose()?;
        let segment_embedding = shape
            .segments
            .then(|| embedding(params, "emb.segment", shape.num_supersegments, d, rng))
            .transpose()?;
        let ew = Some(shape.edge_width);
        Ok(Self {
            node_embedding,
            edge_embedding,
            week,
            time,
            segment_embedding,
            gat_dynamic: GatLayer::new(
                params,
                "gat.dynamic",
                shape.dynamic_width,
                d,
                ew,
                shape.heads,
                rng,
            )?,
            gat_static: GatLayer::new(params, "gat.static", d, d, ew, shape.heads, rng)?,
            edge_layers: if shape.edge_level {
                Some(EdgeLayers {
                    f_n1: Linear::new(params, "f_n1", 2 * d, d, rng)?,
                    f_n2: Linear::new(params, "f_n2", 2 * d, d, rng)?,
                    f_e: Linear::new(params, "f_e", shape.edge_width, d, rng)?,
                })
            } else {
                None
            },
            dim: d,
        })
    }

    /// Runs both GATv2 streams: dynamic over `u_d`, static over the node
    /// embedding.
    pub fn node_features(
        &self,
        s: &mut Session,
        u_d: Var,
        topo: &GatTopology,
        v_e: Var,
    ) -> Result<(Var, Var)> {
        let dynamic = self.gat_dynamic.forward(s, u_d, topo, Some(v_e))?.out;
        let stat = self.static_node_features(s, topo, v_e)?;
        Ok((dynamic, stat))
    }

    pub fn static_node_features(
        &self,
        s: &mut Session,
        topo: &GatTopology,
        v_e: Var,
    ) -> Result<Var> {
        let u_s = s.p(self.node_embedding);
        Ok(self.gat_static.forward(s, u_s, topo, Some(v_e))?.out)
    }
}
