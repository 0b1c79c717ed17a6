use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::config::ModelConfig;
use crate::error::Result;
use crate::numerics::{Matrix, ParamGroup, ParamId, ParameterSet};
use crate::scalar::Scalar;

/// Training stage tags, in their fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Regular,
    Soft,
    Hard,
    Sub,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Regular, Stage::Soft, Stage::Hard, Stage::Sub];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::Regular => "regular",
            Stage::Soft => "soft",
            Stage::Hard => "hard",
            Stage::Sub => "sub",
        }
    }
}

/// Parameter handles of one Transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub heads: usize,
    pub wq: Vec<ParamId>,
    pub bq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub bk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub bv: Vec<ParamId>,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Pooler (`tanh` dense on `[CLS]`) plus the N-way projector.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub pooler_w: ParamId,
    pub pooler_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

/// Exit head attached after a backbone layer.
#[derive(Clone, Debug)]
pub struct SubParams {
    pub input_w: ParamId,
    pub input_b: ParamId,
    pub block: BlockParams,
    pub head: HeadParams,
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub token_embed: ParamId,
    pub position_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
    /// `subs[l - 1]` follows backbone layer `l`, for `l = 1..L-1`.
    pub subs: Vec<SubParams>,
    /// `deltas[l - 1]` is the pruning threshold of layer `l`, each `1×1`.
    pub deltas: Vec<ParamId>,
}

struct Init<'a, T> {
    params: &'a mut ParameterSet<T>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    resolve_only: bool,
}

impl<T: Scalar> Init<'_, T> {
    fn tensor(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, fill: Fill) -> Result<ParamId> {
        if self.resolve_only {
            return self.params.require(&name);
        }
        let value = match fill {
            Fill::Normal => Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| T::lit(self.normal.sample(&mut self.rng))).collect(),
            )?,
            Fill::Zero => Matrix::zeros(rows, cols),
            Fill::One => Matrix::filled(rows, cols, T::one()),
        };
        self.params.insert(name, group, value)
    }

    fn block(&mut self, prefix: &str, group: ParamGroup, width: usize, heads: usize, ffn: usize) -> Result<BlockParams> {
        let dh = width / heads;
        let per_head = |this: &mut Self, w: &str| -> Result<(Vec<ParamId>, Vec<ParamId>)> {
            let mut ws = Vec::with_capacity(heads);
            let mut bs = Vec::with_capacity(heads);
            for h in 0..heads {
                ws.push(this.tensor(format!("{prefix}.attn.{w}.{h}.weight"), group, width, dh, Fill::Normal)?);
                bs.push(this.tensor(format!("{prefix}.attn.{w}.{h}.bias"), group, 1, dh, Fill::Zero)?);
            }
            Ok((ws, bs))
        };
        let (wq, bq) = per_head(self, "query")?;
        let (wk, bk) = per_head(self, "key")?;
        let (wv, bv) = per_head(self, "value")?;
        Ok(BlockParams {
            heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo: self.tensor(format!("{prefix}.attn.output.weight"), group, width, width, Fill::Normal)?,
            bo: self.tensor(format!("{prefix}.attn.output.bias"), group, 1, width, Fill::Zero)?,
            ln1_gain: self.tensor(format!("{prefix}.attn.norm.gain"), group, 1, width, Fill::One)?,
            ln1_bias: self.tensor(format!("{prefix}.attn.norm.bias"), group, 1, width, Fill::Zero)?,
            w1: self.tensor(format!("{prefix}.ffn.inner.weight"), group, width, ffn, Fill::Normal)?,
            b1: self.tensor(format!("{prefix}.ffn.inner.bias"), group, 1, ffn, Fill::Zero)?,
            w2: self.tensor(format!("{prefix}.ffn.outer.weight"), group, ffn, width, Fill::Normal)?,
            b2: self.tensor(format!("{prefix}.ffn.outer.bias"), group, 1, width, Fill::Zero)?,
            ln2_gain: self.tensor(format!("{prefix}.ffn.norm.gain"), group, 1, width, Fill::One)?,
            ln2_bias: self.tensor(format!("{prefix}.ffn.norm.bias"), group, 1, width, Fill::Zero)?,
        })
    }

    fn head(&mut self, prefix: &str, group: ParamGroup, width: usize, classes: usize) -> Result<HeadParams> {
        Ok(HeadParams {
            pooler_w: self.tensor(format!("{prefix}.pooler.weight"), group, width, width, Fill::Normal)?,
            pooler_b: self.tensor(format!("{prefix}.pooler.bias"), group, 1, width, Fill::Zero)?,
            proj_w: self.tensor(format!("{prefix}.projector.weight"), group, width, classes, Fill::Normal)?,
            proj_b: self.tensor(format!("{prefix}.projector.bias"), group, 1, classes, Fill::Zero)?,
        })
    }

    fn model(&mut self, cfg: &ModelConfig) -> Result<ModelIds> {
        let d = cfg.hidden;
        let token_embed = self.tensor("embed.token".into(), ParamGroup::Backbone, cfg.vocab, d, Fill::Normal)?;
        let position_embed = self.tensor("embed.position".into(), ParamGroup::Backbone, cfg.max_len, d, Fill::Normal)?;
        let blocks = (1..=cfg.layers)
            .map(|l| self.block(&format!("layer.{l}"), ParamGroup::Backbone, d, cfg.heads, cfg.ffn))
            .collect::<Result<Vec<_>>>()?;
        let head = self.head("classifier", ParamGroup::Classifier, d, cfg.classes)?;
        let ds = cfg.sub_width();
        let backbone_normal = self.normal;
        if !self.resolve_only {
            self.normal = Normal::new(0.0, cfg.sub_init()).expect("validated std");
        }
        let mut subs = Vec::with_capacity(cfg.layers - 1);
        for l in 1..cfg.layers {
            let p = format!("exit.{l}");
            let g = ParamGroup::SubClassifier;
            subs.push(SubParams {
                input_w: self.tensor(format!("{p}.input.weight"), g, d, ds, Fill::Normal)?,
                input_b: self.tensor(format!("{p}.input.bias"), g, 1, ds, Fill::Zero)?,
                block: self.block(&format!("{p}.block"), g, ds, 1, cfg.sub_ffn_width())?,
                head: self.head(&p, g, ds, cfg.classes)?,
            });
        }
        self.normal = backbone_normal;
        let deltas = (1..=cfg.layers)
            .map(|l| self.tensor(format!("prune.delta.{l}"), ParamGroup::Threshold, 1, 1, Fill::Zero))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelIds { token_embed, position_embed, blocks, head, subs, deltas })
    }
}

#[derive(Clone, Copy)]
enum Fill {
    Normal,
    Zero,
    One,
}

/// Backbone, main classifier, exit heads and pruning thresholds.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
    pub ids: ModelIds,
    /// Stages completed so far, in order.
    pub stages: Vec<Stage>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with weights drawn from `N(0, init_std²)`, zero biases,
    /// unit norm gains and zero thresholds.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let ids = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, config.init_std).expect("validated std"),
            resolve_only: false,
        }
        .model(&config)?;
        Ok(Self { config, params, ids, stages: Vec::new() })
    }

    /// Rebuilds the handle table for a parameter set loaded from disk.
    pub fn from_parts(config: ModelConfig, params: ParameterSet<T>, stages: Vec<Stage>) -> Result<Self> {
        config.validate()?;
        let mut params = params;
        let ids = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(0),
            normal: Normal::new(0.0, 1.0).expect("unit std"),
            resolve_only: true,
        }
        .model(&config)?;
        Ok(Self { config, params, ids, stages })
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn deltas(&self) -> Vec<T> {
        self.ids.deltas.iter().map(|&id| self.params.value(id).get(0, 0)).collect()
    }

    pub fn set_deltas(&mut self, deltas: &[T]) {
        for (&id, &d) in self.ids.deltas.iter().zip(deltas) {
            self.params.value_mut(id).set(0, 0, d);
        }
    }
}
