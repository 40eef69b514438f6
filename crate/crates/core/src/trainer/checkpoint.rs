//! Checkpoint file: magic `ARFC`, u32 version, u32-length-prefixed canonical
//! JSON header, u32 blob count, then per blob a u32-length-prefixed UTF-8
//! name, u32 rank, u32 extents and little-endian f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::arc::ArcModel;
use crate::decoderpool::DecoderPool;
use crate::error::{ArfcError, Result};
use crate::featureio::take;
use crate::mos::MosModel;
use crate::numkit::{AdamState, LayerParams, Rng, RngState, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ARFC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam state of a model and of each decoder cluster it has routed to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimGroups {
    pub model: AdamState,
    pub clusters: BTreeMap<usize, AdamState>,
}

impl OptimGroups {
    fn round_to_f32(&mut self) {
        for s in std::iter::once(&mut self.model).chain(self.clusters.values_mut()) {
            s.m.round_to_f32();
            s.v.round_to_f32();
        }
    }

    fn steps(&self) -> OptimSteps {
        OptimSteps {
            model: self.model.step,
            clusters: self.clusters.iter().map(|(j, s)| (*j, s.step)).collect(),
        }
    }

    fn blobs(&self, prefix: &str, out: &mut LayerParams) {
        let mut put = |name: String, s: &AdamState| {
            out.extend(s.m.with_prefix(&format!("{prefix}.{name}.m")));
            out.extend(s.v.with_prefix(&format!("{prefix}.{name}.v")));
        };
        put("model".into(), &self.model);
        for (j, s) in &self.clusters {
            put(format!("j{j}"), s);
        }
    }

    fn from_blobs(steps: &OptimSteps, blobs: &LayerParams, prefix: &str) -> Self {
        let load = |name: String, step: u64| AdamState {
            m: blobs.strip_prefix(&format!("{prefix}.{name}.m")),
            v: blobs.strip_prefix(&format!("{prefix}.{name}.v")),
            step,
        };
        OptimGroups {
            model: load("model".into(), steps.model),
            clusters: steps
                .clusters
                .iter()
                .map(|(j, s)| (*j, load(format!("j{j}"), *s)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimSteps {
    model: u64,
    clusters: BTreeMap<usize, u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    arc_step: u64,
    mos_step: u64,
    arc_frozen: bool,
    rng: RngState,
    arc_optim: OptimSteps,
    mos_optim: OptimSteps,
}

/// Complete training state of both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub arc: ArcModel,
    pub arc_pool: DecoderPool,
    pub mos: MosModel,
    pub mos_pool: DecoderPool,
    pub arc_optim: OptimGroups,
    pub mos_optim: OptimGroups,
    pub arc_step: u64,
    pub mos_step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    /// Freshly initialised models and pools for `config`.
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let (dim, tokens, m) = (config.arc.dim, config.arc.tokens, config.aux_decoders);
        let mut c = Checkpoint {
            config: config.clone(),
            arc: ArcModel::init(config.arc, &mut root.derive(1))?,
            arc_pool: DecoderPool::init(dim, tokens, m, &mut root.derive(2))?,
            mos: MosModel::init(config.mos, dim, &mut root.derive(3))?,
            mos_pool: DecoderPool::init(dim, tokens, m, &mut root.derive(4))?,
            arc_optim: OptimGroups::default(),
            mos_optim: OptimGroups::default(),
            arc_step: 0,
            mos_step: 0,
            rng: root.state(),
        };
        c.round_to_f32();
        Ok(c)
    }

    /// Round every stored value to f32 so the in-memory state equals what a
    /// save/load cycle produces.
    pub fn round_to_f32(&mut self) {
        let frozen = self.arc.is_frozen();
        let mut arc = self.arc.params().clone();
        arc.round_to_f32();
        self.arc = ArcModel::from_params(*self.arc.config(), arc).expect("same layout");
        if frozen {
            self.arc.freeze();
        }
        self.mos.params_mut().round_to_f32();
        for pool in [&mut self.arc_pool, &mut self.mos_pool] {
            let mut p = pool.params();
            p.round_to_f32();
            pool.load_params(&p).expect("same layout");
        }
        self.arc_optim.round_to_f32();
        self.mos_optim.round_to_f32();
    }

    /// Parameter count of every model and decoder pool.
    pub fn param_counts(&self) -> BTreeMap<&'static str, usize> {
        BTreeMap::from([
            ("arc", self.arc.params().count()),
            ("arc_decoders", self.arc_pool.param_count()),
            ("mos", self.mos.params().count()),
            ("mos_decoders", self.mos_pool.param_count()),
        ])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            arc_step: self.arc_step,
            mos_step: self.mos_step,
            arc_frozen: self.arc.is_frozen(),
            rng: self.rng,
            arc_optim: self.arc_optim.steps(),
            mos_optim: self.mos_optim.steps(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut blobs = LayerParams::new();
        blobs.extend(self.arc.params().with_prefix("arc"));
        blobs.extend(self.arc_pool.params().with_prefix("arc_pool"));
        blobs.extend(self.mos.params().with_prefix("mos"));
        blobs.extend(self.mos_pool.params().with_prefix("mos_pool"));
        self.arc_optim.blobs("optim.arc", &mut blobs);
        self.mos_optim.blobs("optim.mos", &mut blobs);

        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (name, t) in blobs.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let magic: [u8; 4] = take(&mut cur, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ArfcError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(take(&mut cur, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(ArfcError::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let json = take_slice(&mut cur, "header")?;
        let header: Header = serde_json::from_slice(json)?;
        header.config.validate()?;
        let count = u32::from_le_bytes(take(&mut cur, "blob count")?);
        let mut blobs = LayerParams::new();
        for _ in 0..count {
            let name = String::from_utf8(take_slice(&mut cur, "blob name")?.to_vec())
                .map_err(|_| ArfcError::Truncated("blob name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(take(&mut cur, "rank")?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut cur, "extent")?) as usize);
            }
            let n: usize = shape.iter().product();
            if cur.len() < 4 * n {
                return Err(ArfcError::Truncated(format!("blob `{name}` data")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(take(&mut cur, "value")?) as f64);
            }
            blobs.insert(name, Tensor::new(shape, data)?);
        }
        if !cur.is_empty() {
            return Err(ArfcError::Truncated(format!(
                "{} trailing bytes",
                cur.len()
            )));
        }

        let cfg = header.config;
        let mut arc = ArcModel::from_params(cfg.arc, blobs.strip_prefix("arc"))?;
        if header.arc_frozen {
            arc.freeze();
        }
        let mut arc_pool = DecoderPool::init(
            cfg.arc.dim,
            cfg.arc.tokens,
            cfg.aux_decoders,
            &mut Rng::new(0),
        )?;
        arc_pool.load_params(&blobs.strip_prefix("arc_pool"))?;
        let mos = MosModel::from_params(cfg.mos, cfg.arc.dim, blobs.strip_prefix("mos"))?;
        let mut mos_pool = DecoderPool::init(
            cfg.arc.dim,
            cfg.arc.tokens,
            cfg.aux_decoders,
            &mut Rng::new(0),
        )?;
        mos_pool.load_params(&blobs.strip_prefix("mos_pool"))?;
        Ok(Checkpoint {
            arc_optim: OptimGroups::from_blobs(&header.arc_optim, &blobs, "optim.arc"),
            mos_optim: OptimGroups::from_blobs(&header.mos_optim, &blobs, "optim.mos"),
            config: cfg,
            arc,
            arc_pool,
            mos,
            mos_pool,
            arc_step: header.arc_step,
            mos_step: header.mos_step,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn take_slice<'a>(cur: &mut &'a [u8], what: &str) -> Result<&'a [u8]> {
    let len = u32::from_le_bytes(take(cur, what)?) as usize;
    if cur.len() < len {
        return Err(ArfcError::Truncated(format!(
            "unexpected end of file reading {what}"
        )));
    }
    let (head, rest) = cur.split_at(len);
    *cur = rest;
    Ok(head)
}
