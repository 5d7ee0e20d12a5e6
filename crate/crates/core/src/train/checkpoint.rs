//! Binary checkpoint format.
//!
//! ```text
//! magic  b"RCKP"                      4 bytes
//! version u32 LE                      currently 1
//! meta   u32 count, then count × (u32 len, utf-8 key, u32 len, utf-8 value)
//! tensors u32 count, then count × (u32 len, utf-8 name, u64 rows, u64 cols, rows·cols f64 LE)
//! ```
//! Nothing may follow the last tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::EdgeFeatureEncoder;
use crate::error::{Error, Result};
use crate::graphmodel::RoadGraph;
use crate::heads::ClassWeights;
use crate::model::{Model, ModelConfig, Toggles};
use crate::numerics::Tensor;
use crate::preprocess::NormStats;
use crate::tvae::ReconLayout;

pub const MAGIC: &[u8; 4] = b"RCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            if meta.insert(k.clone(), v).is_some() {
                return Err(r.err(&format!("duplicate metadata key `{k}`")));
            }
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u64()?;
            let cols = r.u64()?;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining() as u64))
                .ok_or_else(|| r.err(&format!("tensor `{name}` of {rows}x{cols} exceeds file")))?;
            let data: Vec<f64> = r
                .take(n as usize * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(rows as usize, cols as usize, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.err("trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                file: path.display().to_string(),
                line,
                msg,
            },
            other => other,
        })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Invalid(format!("checkpoint field `{key}` has bad value `{raw}`")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Byte offsets stand in for line numbers in diagnostics.
    fn err(&self, msg: &str) -> Error {
        Error::parse(
            "<checkpoint>",
            self.pos,
            format!("byte {}: {msg}", self.pos),
        )
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.err(&format!(
                "truncated: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("string is not utf-8"))
    }
}

fn floats(raw: &str) -> Option<Vec<f64>> {
    raw.split(',').map(|t| t.parse().ok()).collect()
}

/// Everything needed to rebuild `model` against the same graph.
pub fn to_checkpoint(model: &Model) -> Checkpoint {
    let c = &model.config;
    let t = c.toggles;
    let s = &model.stats;
    let mut meta: BTreeMap<String, String> = [
        ("task", c.task.to_string()),
        ("dim", c.dim.to_string()),
        ("gat_heads", c.gat_heads.to_string()),
        ("tvae_hidden", c.tvae_hidden.to_string()),
        ("tvae_latent", c.tvae_latent.to_string()),
        ("layout", c.layout.name().to_string()),
        ("beta", c.beta.to_string()),
        ("hidden", format!("{},{}", c.hidden.0, c.hidden.1)),
        (
            "toggle.global_normalization",
            t.global_normalization.to_string(),
        ),
        ("toggle.dropout", t.dropout.to_string()),
        ("toggle.noise", t.noise.to_string()),
        ("toggle.week", t.week.to_string()),
        ("toggle.time", t.time.to_string()),
        ("toggle.segment_conv", t.segment_conv.to_string()),
        (
            "stats",
            format!("{},{},{},{},{}", s.mean, s.std, s.min, s.max, s.clip_max),
        ),
        (
            "class_weights",
            model
                .class_weights
                .0
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("graph.nodes", model.num_nodes().to_string()),
        ("graph.edges", model.num_edges().to_string()),
        ("graph.supersegments", model.num_supersegments().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    meta.extend(model.edge_encoder.to_meta());
    let tensors = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Checkpoint { meta, tensors }
}

/// Rebuilds a model on `graph`; dimensions and tensor names must match.
pub fn from_checkpoint(ckpt: &Checkpoint, graph: &RoadGraph) -> Result<Model> {
    for (key, have) in [
        ("graph.nodes", graph.num_nodes()),
        ("graph.edges", graph.num_edges()),
        ("graph.supersegments", graph.num_supersegments()),
    ] {
        let want: usize = ckpt.parse(key)?;
        if want != have {
            return Err(Error::Invalid(format!(
                "checkpoint/graph mismatch: `{key}` is {want} in checkpoint, {have} in graph"
            )));
        }
    }
    let hidden = floats(ckpt.get("hidden")?)
        .filter(|v| v.len() == 2 && v.iter().all(|x| *x >= 1.0 && x.fract() == 0.0))
        .ok_or_else(|| Error::Invalid("checkpoint field `hidden` malformed".into()))?;
    let config = ModelConfig {
        task: ckpt.get("task")?.parse()?,
        dim: ckpt.parse("dim")?,
        gat_heads: ckpt.parse("gat_heads")?,
        tvae_hidden: ckpt.parse("tvae_hidden")?,
        tvae_latent: ckpt.parse("tvae_latent")?,
        layout: ReconLayout::parse(ckpt.get("layout")?)?,
        beta: ckpt.parse("beta")?,
        hidden: (hidden[0] as usize, hidden[1] as usize),
        toggles: Toggles {
            global_normalization: ckpt.parse("toggle.global_normalization")?,
            dropout: ckpt.parse("toggle.dropout")?,
            noise: ckpt.parse("toggle.noise")?,
            week: ckpt.parse("toggle.week")?,
            time: ckpt.parse("toggle.time")?,
            segment_conv: ckpt.parse("toggle.segment_conv")?,
        },
    };
    let s = floats(ckpt.get("stats")?)
        .filter(|v| v.len() == 5)
        .ok_or_else(|| Error::Invalid("checkpoint field `stats` malformed".into()))?;
    let stats = NormStats::new(s[0], s[1], s[2], s[3], s[4])?;
    let w = floats(ckpt.get("class_weights")?)
        .and_then(|v| <[f64; 3]>::try_from(v).ok())
        .ok_or_else(|| Error::Invalid("checkpoint field `class_weights` malformed".into()))?;
    let weights = ClassWeights::new(w)?;
    let enc = EdgeFeatureEncoder::from_meta(|k| ckpt.meta.get(k).cloned())?;
    let template = Model::new(config, graph, stats, enc, weights, 0)?;
    let names = template.params.names();
    if names.len() != ckpt.tensors.len() {
        return Err(Error::Invalid(format!(
            "checkpoint has {} tensors, model expects {}",
            ckpt.tensors.len(),
            names.len()
        )));
    }
    for (want, (have, _)) in names.iter().zip(&ckpt.tensors) {
        if want != have {
            return Err(Error::Invalid(format!(
                "checkpoint tensor `{have}` where `{want}` expected"
            )));
        }
    }
    template.with_params(ckpt.tensors.iter().map(|(_, t)| t.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphmodel::{generate_synthetic_city, SynthSpec};
    use crate::model::Task;
    use crate::preprocess::fit_stats;
    use proptest::prelude::*;

    fn model(task: Task) -> (crate::graphmodel::SyntheticCity, Model) {
        let spec = SynthSpec {
            nodes: 8,
            edges: 12,
            supersegments: 3,
            frames: 6,
            ..SynthSpec::default()
        };
        let city = generate_synthetic_city(&spec, 1).unwrap();
        let cfg = ModelConfig {
            task,
            dim: 4,
            hidden: (6, 5),
            tvae_hidden: 5,
            tvae_latent: 3,
            beta: 0.1,
            ..ModelConfig::default()
        };
        let m = Model::new(
            cfg,
            &city.graph,
            fit_stats(&city.frames).unwrap(),
            EdgeFeatureEncoder::fit(&city.graph),
            ClassWeights::new([1.7, 0.8, 0.5]).unwrap(),
            9,
        )
        .unwrap();
        (city, m)
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        for task in [Task::Congestion, Task::Speed] {
            let (city, m) = model(task);
            let bytes = to_checkpoint(&m).encode();
            let back = from_checkpoint(&Checkpoint::decode(&bytes).unwrap(), &city.graph).unwrap();
            assert_eq!(back.config, m.config);
            assert_eq!(back.stats, m.stats);
            assert_eq!(back.params, m.params);
            let f: Vec<_> = city.frames.iter().collect();
            assert_eq!(back.forward_raw(&f).unwrap(), m.forward_raw(&f).unwrap());
            assert_eq!(to_checkpoint(&back).encode(), bytes);
        }
    }

    #[test]
    fn graph_mismatch_is_rejected() {
        let (_, m) = model(Task::Congestion);
        let other = generate_synthetic_city(
            &SynthSpec {
                nodes: 9,
                edges: 12,
                supersegments: 3,
                frames: 2,
                ..SynthSpec::default()
            },
            1,
        )
        .unwrap();
        let err = from_checkpoint(&to_checkpoint(&m), &other.graph).unwrap_err();
        assert!(err.to_string().contains("graph.nodes"), "{err}");
    }

    #[test]
    fn decode_rejects_corruption() {
        let (_, m) = model(Task::Congestion);
        let bytes = to_checkpoint(&m).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(Checkpoint::decode(&ver)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn oversized_tensor_header_does_not_allocate() {
        let mut c = Checkpoint::default();
        c.tensors.push(("t".into(), Tensor::zeros(1, 1)));
        let mut bytes = c.encode();
        let dims = bytes.len() - 8 - 16;
        bytes[dims..dims + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn generic_round_trip(
            meta in proptest::collection::btree_map("[a-z.]{1,8}", "[ -~]{0,12}", 0..5),
            vals in proptest::collection::vec(proptest::num::f64::ANY, 0..12),
            cols in 1usize..4,
        ) {
            let rows = vals.len() / cols;
            let t = Tensor::new(rows, cols, vals[..rows * cols].to_vec()).unwrap();
            let c = Checkpoint { meta, tensors: vec![("x".into(), t)] };
            let back = Checkpoint::decode(&c.encode()).unwrap();
            prop_assert_eq!(back.meta, c.meta);
            let a: Vec<u64> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = c.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&bytes);
        }
    }
}
