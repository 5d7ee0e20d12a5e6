//! The full network: normalization, reconstruction, graph encoding, fusion
//! and one prediction head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{edge_pair_features, EdgeFeatureEncoder, Encoder, EncoderShape, GatTopology};
use crate::error::{Error, Result};
use crate::graphmodel::{CounterFrame, RoadGraph, BINS};
use crate::heads::{
    loss_l1, loss_weighted_ce, total_loss, ClassWeights, CongestionHead, SpeedHead, DEFAULT_HIDDEN,
};
use crate::nn::{Noise, ParamSet, Session};
use crate::numerics::{Tensor, Var};
use crate::preprocess::{normalize, unit_range, NormStats};
use crate::tvae::{loss_reconstruction_var, reconstruct, ReconLayout, Tvae, TvaeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Per-edge red/yellow/green classification.
    Congestion,
    /// Per-super-segment speed regression.
    Speed,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Congestion => "congestion",
            Task::Speed => "speed",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "congestion" => Ok(Task::Congestion),
            "speed" => Ok(Task::Speed),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// Optional model components. `segment_conv` only affects the speed task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub global_normalization: bool,
    pub dropout: bool,
    pub noise: bool,
    pub week: bool,
    pub time: bool,
    pub segment_conv: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        global_normalization: true,
        dropout: true,
        noise: true,
        week: true,
        time: true,
        segment_conv: true,
    };
    pub const NONE: Toggles = Toggles {
        global_normalization: false,
        dropout: false,
        noise: false,
        week: false,
        time: false,
        segment_conv: false,
    };
}

/// Upper bound on any configured layer width or head count.
pub const MAX_WIDTH: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Embedding and GAT width.
    pub dim: usize,
    pub gat_heads: usize,
    pub tvae_hidden: usize,
    pub tvae_latent: usize,
    pub layout: ReconLayout,
    /// KL weight added to the reconstruction loss.
    pub beta: f64,
    pub hidden: (usize, usize),
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Congestion,
            dim: 32,
            gat_heads: 1,
            tvae_hidden: 64,
            tvae_latent: 16,
            layout: ReconLayout::Transposed,
            beta: 0.0,
            hidden: DEFAULT_HIDDEN,
            toggles: Toggles::ALL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("dim", self.dim),
            ("gat_heads", self.gat_heads),
            ("tvae_hidden", self.tvae_hidden),
            ("tvae_latent", self.tvae_latent),
            ("hidden.0", self.hidden.0),
            ("hidden.1", self.hidden.1),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if let Some((name, v)) = widths.iter().find(|(_, v)| *v > MAX_WIDTH) {
            return Err(Error::Config(format!("`{name}` = {v} exceeds {MAX_WIDTH}")));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "`beta` must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    fn uses_segment_conv(&self) -> bool {
        self.task == Task::Speed && self.toggles.segment_conv
    }
}

#[derive(Clone, Debug)]
enum Head {
    Congestion(CongestionHead),
    Speed(SpeedHead),
}

/// Graph-derived constants, rebuilt from the graph rather than stored.
#[derive(Clone, Debug)]
struct GraphContext {
    topo: GatTopology,
    segment_topo: Option<GatTopology>,
    v_e: Tensor,
    tails: Vec<usize>,
    heads: Vec<usize>,
    a_sv: Tensor,
    a_se: Tensor,
    num_nodes: usize,
    num_edges: usize,
    num_segments: usize,
}

/// Trained or trainable network for one graph.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub stats: NormStats,
    pub edge_encoder: EdgeFeatureEncoder,
    pub class_weights: ClassWeights,
    tvae: Tvae,
    encoder: Encoder,
    head: Head,
    ctx: GraphContext,
}

/// Per-session tensors that do not depend on the frame.
struct StaticVars {
    v_e: Var,
    edge: Option<EdgeStatic>,
    segment: Option<SegmentStatic>,
}

struct EdgeStatic {
    static_pairs: Var,
    explicit: Var,
    implicit: Var,
}

struct SegmentStatic {
    a_sv: Var,
    static_nodes: Var,
    explicit_edges: Var,
    implicit_edges: Var,
    embedding: Var,
}

/// Forward result for one frame.
pub struct FrameOutput {
    /// Logits `|E|×3` or speeds `|S|×1`.
    pub output: Var,
    pub recon_loss: Var,
    pub kl: Var,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        graph: &RoadGraph,
        stats: NormStats,
        edge_encoder: EdgeFeatureEncoder,
        class_weights: ClassWeights,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if config.task == Task::Speed && graph.num_supersegments() == 0 {
            return Err(Error::Invalid(
                "speed task needs at least one super-segment".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.dim;
        let t = config.toggles;
        let ew = edge_encoder.width();
        let tvae = Tvae::new(
            &mut params,
            graph.num_nodes(),
            TvaeConfig {
                hidden: config.tvae_hidden,
                latent: config.tvae_latent,
                layout: config.layout,
            },
            &mut rng,
        )?;
        let encoder = Encoder::new(
            &mut params,
            &EncoderShape {
                num_nodes: graph.num_nodes(),
                num_edges: graph.num_edges(),
                num_supersegments: graph.num_supersegments(),
                edge_width: ew,
                dynamic_width: BINS,
                dim: d,
                heads: config.gat_heads,
                week: t.week,
                time: t.time,
                edge_level: config.task == Task::Congestion,
                segments: config.task == Task::Speed,
            },
            &mut rng,
        )?;
        let temporal = d * (t.week as usize + t.time as usize);
        let head = match config.task {
            Task::Congestion => {
                // [f_N1, f_N2, f_E, V_i] + temporal
                let width = 4 * d + temporal;
                Head::Congestion(CongestionHead::new(
                    &mut params,
                    width,
                    config.hidden,
                    t.dropout,
                    &mut rng,
                )?)
            }
            Task::Speed => {
                // [U_Sd, U_Ss, V_Se, V_Si, S] + temporal
                let width = 4 * d + ew + temporal;
                let conv = config.uses_segment_conv().then_some(d);
                Head::Speed(SpeedHead::new(
                    &mut params,
                    width,
                    config.hidden,
                    conv,
                    config.gat_heads,
                    t.dropout,
                    &mut rng,
                )?)
            }
        };
        let ctx = GraphContext {
            topo: GatTopology::from_graph(graph)?,
            segment_topo: if config.uses_segment_conv() {
                Some(GatTopology::supersegment_adjacency(graph)?)
            } else {
                None
            },
            v_e: edge_encoder.encode(graph),
            tails: graph.tails(),
            heads: graph.heads(),
            a_sv: graph.a_sv().clone(),
            a_se: graph.a_se().clone(),
            num_nodes: graph.num_nodes(),
            num_edges: graph.num_edges(),
            num_segments: graph.num_supersegments(),
        };
        Ok(Self {
            config,
            params,
            stats,
            edge_encoder,
            class_weights,
            tvae,
            encoder,
            head,
            ctx,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.ctx.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.ctx.num_edges
    }

    pub fn num_supersegments(&self) -> usize {
        self.ctx.num_segments
    }

    /// Sets the final speed bias so predictions start at `mean`.
    pub fn set_speed_offset(&mut self, mean: f64) {
        if let Head::Speed(h) = &self.head {
            let b = h.mlp.layers[2].b;
            self.params.get_mut(b).data_mut()[0] = mean;
        }
    }

    fn static_vars(&self, s: &mut Session) -> Result<StaticVars> {
        let v_e = s.tape.constant(self.ctx.v_e.clone());
        let u_s_plus = self.encoder.static_node_features(s, &self.ctx.topo, v_e)?;
        let implicit = s.p(self.encoder.edge_embedding);
        let edge = match &self.encoder.edge_layers {
            Some(layers) => Some(EdgeStatic {
                static_pairs: edge_pair_features(
                    s,
                    u_s_plus,
                    &self.ctx.tails,
                    &self.ctx.heads,
                    &layers.f_n2,
                )?,
                explicit: layers.f_e.forward(s, v_e)?,
                implicit,
            }),
            None => None,
        };
        let segment = match self.encoder.segment_embedding {
            Some(emb) => {
                let a_sv = s.tape.constant(self.ctx.a_sv.clone());
                let a_se = s.tape.constant(self.ctx.a_se.clone());
                Some(SegmentStatic {
                    a_sv,
                    static_nodes: s.tape.matmul(a_sv, u_s_plus)?,
                    explicit_edges: s.tape.matmul(a_se, v_e)?,
                    implicit_edges: s.tape.matmul(a_se, implicit)?,
                    embedding: s.p(emb),
                })
            }
            None => None,
        };
        Ok(StaticVars { v_e, edge, segment })
    }

    fn check_frame(&self, frame: &CounterFrame) -> Result<()> {
        if frame.num_nodes() != self.ctx.num_nodes {
            return Err(Error::Invalid(format!(
                "frame has {} nodes, model expects {}",
                frame.num_nodes(),
                self.ctx.num_nodes
            )));
        }
        Ok(())
    }

    fn frame_forward(
        &self,
        s: &mut Session,
        st: &StaticVars,
        frame: &CounterFrame,
        noise: &mut Noise,
    ) -> Result<FrameOutput> {
        self.check_frame(frame)?;
        let t = self.config.toggles;
        let x_hat = normalize(frame.x(), frame.mask(), &self.stats)?;
        let range = unit_range(&x_hat, &self.stats, t.global_normalization);
        let rec = reconstruct(&self.tvae, s, &x_hat, frame.mask(), range, t.noise, noise)?;
        let recon_loss = if frame.mask().data().iter().any(|&m| m != 0.0) {
            loss_reconstruction_var(s, rec.recon, &x_hat, frame.mask())?
        } else {
            s.tape.constant(Tensor::scalar(0.0))
        };
        let u_d_plus = self
            .encoder
            .gat_dynamic
            .forward(s, rec.u_d, &self.ctx.topo, Some(st.v_e))?
            .out;

        let rows = match self.config.task {
            Task::Congestion => self.ctx.num_edges,
            Task::Speed => self.ctx.num_segments,
        };
        let mut temporal = Vec::new();
        if let Some(w) = self.encoder.week {
            let w = s.p(w);
            temporal.push(s.tape.gather_rows(w, &vec![frame.time.weekday; rows])?);
        }
        if let Some(t) = self.encoder.time {
            let t = s.p(t);
            temporal.push(s.tape.gather_rows(t, &vec![frame.time.slot; rows])?);
        }

        let output = match (&self.head, &self.encoder.edge_layers, &st.edge, &st.segment) {
            (Head::Congestion(head), Some(layers), Some(es), _) => {
                let dyn_pairs = edge_pair_features(
                    s,
                    u_d_plus,
                    &self.ctx.tails,
                    &self.ctx.heads,
                    &layers.f_n1,
                )?;
                let mut parts = vec![dyn_pairs, es.static_pairs, es.explicit, es.implicit];
                parts.extend(temporal);
                let x_c = s.tape.concat_cols(&parts)?;
                head.forward(s, x_c, noise)?
            }
            (Head::Speed(head), _, _, Some(ss)) => {
                let dynamic_nodes = s.tape.matmul(ss.a_sv, u_d_plus)?;
                let mut parts = vec![
                    dynamic_nodes,
                    ss.static_nodes,
                    ss.explicit_edges,
                    ss.implicit_edges,
                    ss.embedding,
                ];
                parts.extend(temporal);
                let x_s = s.tape.concat_cols(&parts)?;
                head.forward(s, x_s, self.ctx.segment_topo.as_ref(), noise)?
            }
            _ => unreachable!("head and encoder are built for the same task"),
        };
        if !s.value(output).is_finite() {
            return Err(Error::Numeric {
                location: "head output".into(),
                detail: "non-finite prediction".into(),
            });
        }
        Ok(FrameOutput {
            output,
            recon_loss,
            kl: rec.kl,
        })
    }

    fn head_loss(&self, s: &mut Session, out: Var, frame: &CounterFrame) -> Result<Var> {
        match self.config.task {
            Task::Congestion => {
                let labels = frame
                    .classes
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("frame has no congestion labels".into()))?;
                loss_weighted_ce(s, out, labels, &self.class_weights)
            }
            Task::Speed => {
                let speeds = frame
                    .speeds
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("frame has no speed labels".into()))?;
                loss_l1(s, out, speeds)
            }
        }
    }

    /// Mean total loss over `frames` on a fresh session over the parameters.
    pub fn batch_loss(
        &self,
        s: &mut Session,
        frames: &[&CounterFrame],
        noise: &mut Noise,
    ) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let st = self.static_vars(s)?;
        let mut acc: Option<Var> = None;
        for f in frames {
            let out = self.frame_forward(s, &st, f, noise)?;
            let head = self.head_loss(s, out.output, f)?;
            let l = total_loss(s, out.recon_loss, head, out.kl, self.config.beta)?;
            acc = Some(match acc {
                Some(a) => s.tape.add(a, l)?,
                None => l,
            });
        }
        let total = acc.expect("nonempty batch");
        Ok(s.tape.scale(total, 1.0 / frames.len() as f64))
    }

    /// Loss and parameter gradients for one training batch.
    pub fn loss_and_grads(
        &self,
        frames: &[&CounterFrame],
        noise: &mut Noise,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut s = Session::trainable(&self.params);
        let loss = self.batch_loss(&mut s, frames, noise)?;
        let value = s.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric {
                location: "loss".into(),
                detail: format!("non-finite loss {value}"),
            });
        }
        Ok((value, s.param_grads(loss)?))
    }

    /// Eval-mode loss without gradients.
    pub fn eval_loss(&self, frames: &[&CounterFrame]) -> Result<f64> {
        let mut s = Session::frozen(&self.params);
        let loss = self.batch_loss(&mut s, frames, &mut Noise::eval())?;
        s.value(loss).item()
    }

    /// Eval-mode raw outputs (logits or speeds) for each frame.
    pub fn forward_raw(&self, frames: &[&CounterFrame]) -> Result<Vec<Tensor>> {
        let mut s = Session::frozen(&self.params);
        let st = self.static_vars(&mut s)?;
        let mut noise = Noise::eval();
        frames
            .iter()
            .map(|f| {
                let out = self.frame_forward(&mut s, &st, f, &mut noise)?;
                Ok(s.value(out.output).clone())
            })
            .collect()
    }

    /// Class probabilities (`|E|×3`) or speeds (`|S|×1`) per frame.
    pub fn predict(&self, frames: &[&CounterFrame]) -> Result<Vec<Tensor>> {
        let raw = self.forward_raw(frames)?;
        Ok(match self.config.task {
            Task::Congestion => raw.into_iter().map(|t| t.softmax_rows()).collect(),
            Task::Speed => raw,
        })
    }

    /// Copy of this model with other parameter values of the same shapes.
    pub fn with_params(&self, tensors: Vec<Tensor>) -> Result<Self> {
        let mut m = self.clone();
        m.params.assign(tensors)?;
        Ok(m)
    }
}
