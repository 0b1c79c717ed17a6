//! Exit heads, normalized-entropy uncertainty and the self-distillation loss.

use crate::encoder::forward::{head_logits, run_block, HiddenState};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tape, Var};
use crate::scalar::Scalar;

/// Teacher probabilities are clamped to this floor before taking logs.
pub const TEACHER_FLOOR: f64 = 1e-12;

/// Per-input early-exit outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitState<T> {
    pub tau: Option<T>,
    /// `uncertainties[l - 1]` is `u_l` for every exit head that ran.
    pub uncertainties: Vec<T>,
    /// Distribution of each exit head that ran.
    pub sub_probs: Vec<Vec<T>>,
    /// Main-classifier distribution; `None` when inference exited early.
    pub final_probs: Option<Vec<T>>,
    /// Layer where inference stopped, `L` when it never exited.
    pub exit_layer: usize,
}

/// Logits of the exit head after backbone layer `layer` (`1..L`).
pub fn sub_logits<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, h: &HiddenState, layer: usize) -> Result<Var> {
    if layer == 0 || layer >= model.config.layers {
        return Err(Error::Input(format!("no exit head after layer {layer}")));
    }
    let sp = &model.ids.subs[layer - 1];
    let (w, b) = (g.param(sp.input_w), g.param(sp.input_b));
    let x = g.matmul(h.values, w)?;
    let x = g.add_row(x, b)?;
    let width = model.config.sub_width();
    let (x, _) = run_block(g, &sp.block, x, (width as f64).sqrt(), None)?;
    head_logits(g, &sp.head, x)
}

/// Exit-head distribution `p_s` after backbone layer `layer`.
pub fn sub_forward<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, h: &HiddenState, layer: usize) -> Result<Vec<T>> {
    let logits = sub_logits(g, model, h, layer)?;
    let p = g.softmax_rows(logits);
    Ok(g.value(p).data().to_vec())
}

/// Entropy of `p` divided by `ln N`: 0 for one-hot, 1 for uniform.
pub fn uncertainty<T: Scalar>(p: &[T]) -> T {
    let n = p.len();
    if n < 2 {
        return T::zero();
    }
    // 1 - KL(p || uniform) / ln N, which is exact at both ends
    let count = T::lit(n as f64);
    let mut kl = T::zero();
    for &v in p {
        if v > T::zero() {
            kl += v * (v * count).ln();
        }
    }
    let u = T::one() - kl / count.ln();
    u.max(T::zero()).min(T::one())
}

/// Exit iff `u <= tau`.
#[inline]
pub fn should_exit<T: Scalar>(u: T, tau: T) -> bool {
    u <= tau
}

/// `KL(p_s ‖ p_t) = Σ p_s log(p_s / p_t)` on plain values.
pub fn kd_loss<T: Scalar>(p_s: &[T], p_t: &[T]) -> T {
    let floor = T::lit(TEACHER_FLOOR);
    p_s.iter()
        .zip(p_t)
        .filter(|(&s, _)| s > T::zero())
        .map(|(&s, &t)| s * (s.ln() - t.max(floor).ln()))
        .sum()
}

/// Differentiable `KL(softmax(logits) ‖ p_t)` with the teacher held constant.
pub fn kd_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, student_logits: Var, p_t: &[T]) -> Result<Var> {
    if tape.value(student_logits).len() != p_t.len() {
        return Err(Error::Shape("student and teacher class counts differ".into()));
    }
    let floor = T::lit(TEACHER_FLOOR);
    let log_t = tape.constant(crate::numerics::Matrix::row_vector(p_t.iter().map(|&t| t.max(floor).ln()).collect()));
    let log_s = tape.log_softmax_rows(student_logits);
    let p_s = tape.exp(log_s);
    let diff = tape.sub(log_s, log_t)?;
    let terms = tape.mul(p_s, diff)?;
    Ok(tape.sum(terms))
}

/// Sum of the exit heads' KL terms against the frozen teacher.
pub fn stage2_loss<T: Scalar>(tape: &mut Tape<T>, student_logits: &[Var], p_t: &[T]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &s in student_logits {
        let kl = kd_loss_on_tape(tape, s, p_t)?;
        total = Some(match total {
            Some(t) => tape.add(t, kl)?,
            None => kl,
        });
    }
    total.ok_or_else(|| Error::Input("stage-2 loss needs at least one exit head".into()))
}
