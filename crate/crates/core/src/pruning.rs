//! Attention-based token importance, soft gating and hard token removal.
//!
//! A token's importance at layer `l` is the attention it receives, averaged
//! over heads and over source tokens (the column mean of each head's
//! row-stochastic matrix). During soft pruning each retained row is scaled by
//! `sigmoid((s - Δ_l) / T)`; at hard pruning a token survives iff `s > Δ_l`.
//! `[CLS]` is never pruned in either mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    Disabled,
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruningState<T> {
    pub mode: PruneMode,
    /// Threshold of the last layer, `Δ^L`.
    pub delta_final: T,
    /// `deltas[l - 1]` is `Δ^l`.
    pub deltas: Vec<T>,
    pub temperature: T,
    /// Weight of the L1 gate penalty.
    pub lambda: T,
}

impl<T: Scalar> PruningState<T> {
    pub fn disabled(layers: usize) -> Self {
        Self {
            mode: PruneMode::Disabled,
            delta_final: T::zero(),
            deltas: vec![T::zero(); layers],
            temperature: T::lit(1e-5),
            lambda: T::zero(),
        }
    }

    /// Hard pruning with explicit per-layer thresholds.
    pub fn hard(deltas: Vec<T>) -> Self {
        Self {
            mode: PruneMode::Hard,
            delta_final: deltas.last().copied().unwrap_or_else(T::zero),
            deltas,
            temperature: T::lit(1e-5),
            lambda: T::zero(),
        }
    }

    /// Thresholds initialized from the linear schedule on `delta_final`.
    pub fn scheduled(mode: PruneMode, delta_final: T, layers: usize, temperature: T, lambda: T) -> Result<Self> {
        let state = Self { mode, delta_final, deltas: threshold_schedule(delta_final, layers)?, temperature, lambda };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == PruneMode::Soft && !(self.temperature > T::zero()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.lambda < T::zero() {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        Ok(())
    }

    pub fn delta(&self, layer: usize) -> T {
        self.deltas[layer - 1]
    }
}

/// `Δ^l = Δ^L · l / L` for `l = 1..=L`.
pub fn threshold_schedule<T: Scalar>(delta_final: T, layers: usize) -> Result<Vec<T>> {
    if delta_final < T::zero() || !delta_final.is_finite() {
        return Err(Error::Config(format!("final threshold {delta_final} must be finite and >= 0")));
    }
    let total = T::lit(layers as f64);
    Ok((1..=layers).map(|l| delta_final * T::lit(l as f64) / total).collect())
}

/// Importance score of every retained token at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores<T> {
    pub scores: Vec<T>,
}

impl<T: Scalar> ImportanceScores<T> {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Column means of the heads' attention matrices, averaged over heads.
pub fn importance<T: Scalar>(attention: &[&Matrix<T>]) -> ImportanceScores<T> {
    let n = attention.first().map_or(0, |a| a.cols());
    let mut totals = vec![T::zero(); n];
    for a in attention {
        let mut cols = vec![T::zero(); n];
        for r in 0..a.rows() {
            for (c, &v) in cols.iter_mut().zip(a.row(r)) {
                *c += v;
            }
        }
        for (t, c) in totals.iter_mut().zip(cols) {
            *t += c;
        }
    }
    let k = T::one() / T::lit((attention.len() * n) as f64);
    ImportanceScores { scores: totals.into_iter().map(|t| t * k).collect() }
}

/// Importance restricted to the tokens flagged in `keep`: only kept rows
/// contribute and only kept columns are scored. Matches [`importance`] on the
/// physically shortened matrices.
pub fn importance_masked<T: Scalar>(attention: &[&Matrix<T>], keep: &[bool]) -> ImportanceScores<T> {
    let kept: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    let m = kept.len();
    let mut totals = vec![T::zero(); m];
    for a in attention {
        let mut cols = vec![T::zero(); m];
        for &r in &kept {
            let row = a.row(r);
            for (c, &i) in cols.iter_mut().zip(&kept) {
                *c += row[i];
            }
        }
        for (t, c) in totals.iter_mut().zip(cols) {
            *t += c;
        }
    }
    let k = T::one() / T::lit((attention.len() * m) as f64);
    ImportanceScores { scores: totals.into_iter().map(|t| t * k).collect() }
}

/// Differentiable importance as an `n×1` column on the tape.
pub fn importance_on_tape<T: Scalar>(tape: &mut Tape<T>, attention: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &a in attention {
        let cols = tape.col_sums(a);
        total = Some(match total {
            Some(t) => tape.add(t, cols)?,
            None => cols,
        });
    }
    let total = total.ok_or_else(|| Error::Input("importance of zero heads".into()))?;
    let n = tape.value(total).rows();
    Ok(tape.scale(total, T::one() / T::lit((attention.len() * n) as f64)))
}

/// `sigmoid((s - Δ) / T)` for an `n×1` score column and a `1×1` threshold.
pub fn soft_gate<T: Scalar>(tape: &mut Tape<T>, scores: Var, delta: Var, temperature: T) -> Result<Var> {
    if !(temperature > T::zero()) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let shifted = tape.sub_scalar(scores, delta)?;
    let z = tape.scale(shifted, T::one() / temperature);
    Ok(tape.sigmoid(z))
}

/// Scales row `i` of `h` by `gates[i]`; the `[CLS]` row keeps gate one.
pub fn apply_soft_mask<T: Scalar>(tape: &mut Tape<T>, h: Var, gates: Var) -> Result<Var> {
    if tape.value(gates).rows() != tape.value(h).rows() {
        return Err(Error::Shape("one gate per hidden row required".into()));
    }
    let gates = tape.force_first_one(gates);
    tape.row_scale(h, gates)
}

/// Keep flags: token `i` survives iff `s_i > Δ`. `[CLS]` (index 0) is always kept.
pub fn hard_mask<T: Scalar>(scores: &ImportanceScores<T>, delta: T) -> Vec<bool> {
    scores.scores.iter().enumerate().map(|(i, &s)| i == 0 || s > delta).collect()
}

/// `λ · mean(gates)` over all non-`[CLS]` gates of all gated layers.
pub fn mask_l1_penalty<T: Scalar>(tape: &mut Tape<T>, gates: &[Var], lambda: T) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for &g in gates {
        let n = tape.value(g).rows();
        if n <= 1 {
            continue;
        }
        let body: Vec<usize> = (1..n).collect();
        let rows = tape.select_rows(g, &body)?;
        let s = tape.sum(rows);
        count += n - 1;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| tape.scale(t, lambda / T::lit(count as f64))))
}
