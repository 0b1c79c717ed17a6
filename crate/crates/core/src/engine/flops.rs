//! Closed-form operation counts.
//!
//! Two quantities are tracked per component:
//!
//! * `macs`: multiply-accumulates inside matrix products. GFLOPs are reported
//!   as `2 · macs / 1e9`, and speedups are ratios of `macs`.
//! * `aux`: one unit per output element of every elementwise pass (bias
//!   adds, logit scaling, softmax, residual adds, layer norm, GELU, tanh) plus
//!   the reductions used for importance scores. Reported separately so either
//!   accounting convention can be recovered.
//!
//! For a block of width `w`, `h` heads, inner size `f` over `n` tokens:
//!
//! ```text
//! attention  macs = 4·n·w² + 2·n²·w        aux = 6·n·w + 2·h·n²
//! ffn        macs = 2·n·w·f                aux = 2·n·f + 3·n·w
//! head       macs = w² + w·N               aux = 2·w + 2·N
//! embedding  macs = 0                      aux = n·d
//! pruning    macs = 0                      aux = h·n² + (h + 1)·n
//! exit head  macs = n·d·w_s + block(n, w_s, 1 head, f_s) + head(w_s)
//!            aux  = n·w_s  + block aux + head aux
//! ```

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embedding,
    Attention,
    Ffn,
    Pruning,
    SubClassifier,
    Head,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub macs: u64,
    pub aux: u64,
}

impl OpCount {
    pub const ZERO: OpCount = OpCount { macs: 0, aux: 0 };

    pub fn gflops(self) -> f64 {
        macs_to_gflops(self.macs)
    }
}

pub fn macs_to_gflops(macs: u64) -> f64 {
    2.0 * macs as f64 / 1e9
}

impl Add for OpCount {
    type Output = OpCount;
    fn add(self, o: OpCount) -> OpCount {
        OpCount { macs: self.macs + o.macs, aux: self.aux + o.aux }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, o: OpCount) {
        *self = *self + o;
    }
}

impl std::iter::Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::ZERO, Add::add)
    }
}

fn attention(n: u64, w: u64, heads: u64) -> OpCount {
    OpCount { macs: 4 * n * w * w + 2 * n * n * w, aux: 6 * n * w + 2 * heads * n * n }
}

fn ffn(n: u64, w: u64, f: u64) -> OpCount {
    OpCount { macs: 2 * n * w * f, aux: 2 * n * f + 3 * n * w }
}

fn head(w: u64, classes: u64) -> OpCount {
    OpCount { macs: w * w + w * classes, aux: 2 * w + 2 * classes }
}

/// Operation count of `component` over `n` retained tokens.
pub fn count_flops(cfg: &ModelConfig, n: usize, component: Component) -> OpCount {
    let n = n as u64;
    let d = cfg.hidden as u64;
    let h = cfg.heads as u64;
    match component {
        Component::Embedding => OpCount { macs: 0, aux: n * d },
        Component::Attention => attention(n, d, h),
        Component::Ffn => ffn(n, d, cfg.ffn as u64),
        Component::Pruning => OpCount { macs: 0, aux: h * n * n + (h + 1) * n },
        Component::Head => head(d, cfg.classes as u64),
        Component::SubClassifier => {
            let ws = cfg.sub_width() as u64;
            OpCount { macs: n * d * ws, aux: n * ws }
                + attention(n, ws, 1)
                + ffn(n, ws, cfg.sub_ffn_width() as u64)
                + head(ws, cfg.classes as u64)
        }
    }
}

/// One backbone block (attention plus FFN) over `n` tokens.
pub fn block_cost(cfg: &ModelConfig, n: usize) -> OpCount {
    count_flops(cfg, n, Component::Attention) + count_flops(cfg, n, Component::Ffn)
}

/// Full-depth, full-width, exit-free inference over `n` tokens (including `[CLS]`).
pub fn baseline_cost(cfg: &ModelConfig, n: usize) -> OpCount {
    count_flops(cfg, n, Component::Embedding)
        + (0..cfg.layers).map(|_| block_cost(cfg, n)).sum::<OpCount>()
        + count_flops(cfg, n, Component::Head)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLedger {
    pub layer: usize,
    /// Tokens entering the block.
    pub tokens_in: usize,
    /// Tokens passed on after pruning.
    pub tokens_out: usize,
    pub attention: OpCount,
    pub ffn: OpCount,
    pub pruning: OpCount,
    pub sub_classifier: OpCount,
}

impl LayerLedger {
    pub fn total(&self) -> OpCount {
        self.attention + self.ffn + self.pruning + self.sub_classifier
    }
}

/// Operations actually performed by one inference next to its baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub embedding: OpCount,
    pub layers: Vec<LayerLedger>,
    /// Main pooler and classifier; zero when inference exited early.
    pub head: OpCount,
    pub baseline: OpCount,
    pub exit_layer: usize,
}

impl FlopsLedger {
    pub fn actual(&self) -> OpCount {
        self.embedding + self.layers.iter().map(LayerLedger::total).sum::<OpCount>() + self.head
    }

    pub fn sub_classifier_overhead(&self) -> OpCount {
        self.layers.iter().map(|l| l.sub_classifier).sum()
    }

    /// `baseline.macs / actual.macs`.
    pub fn speedup(&self) -> f64 {
        self.baseline.macs as f64 / self.actual().macs as f64
    }

    pub fn retained(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.tokens_out).collect()
    }
}
