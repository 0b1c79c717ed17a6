//! Fused inference: per layer run the block, prune, consult the exit head.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    argmax, block_forward, block_forward_masked, classifier_logits, embed, prepare_tokens, HiddenState, Model,
};
use crate::engine::flops::{baseline_cost, count_flops, Component, FlopsLedger, LayerLedger, OpCount};
use crate::error::{Error, Result};
use crate::exiting::{should_exit, sub_forward, uncertainty, ExitState};
use crate::numerics::{Graph, Matrix};
use crate::pruning::{apply_soft_mask, hard_mask, importance, importance_masked, soft_gate, PruneMode, PruningState};
use crate::scalar::Scalar;

/// When to stop early.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExitPolicy<T> {
    /// Exit heads never run.
    Disabled,
    /// Exit at the first layer whose uncertainty is at most `tau`.
    Threshold(T),
    /// Run exit heads up to `layer` and stop there regardless of uncertainty;
    /// `layer == L` runs every exit head and the main classifier.
    ForcedLayer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    /// Tokens entering the block, `[CLS]` included.
    pub tokens_in: usize,
    /// Tokens retained after pruning.
    pub tokens_out: usize,
    /// Exit-head uncertainty, when an exit head ran.
    pub uncertainty: Option<f64>,
    pub exited: bool,
}

#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub prediction: usize,
    /// Distribution the prediction was read from.
    pub probs: Vec<T>,
    pub exit: ExitState<T>,
    pub ledger: FlopsLedger,
    pub trace: Vec<LayerTrace>,
    /// Multiply-accumulates counted by the tape itself.
    pub tape_macs: u64,
}

fn check_policy<T: Scalar>(model: &Model<T>, policy: ExitPolicy<T>) -> Result<()> {
    match policy {
        ExitPolicy::Threshold(tau) if !(tau >= T::zero() && tau <= T::one()) => {
            Err(Error::Config(format!("halt value {tau} outside [0, 1]")))
        }
        ExitPolicy::ForcedLayer(l) if l == 0 || l > model.config.layers => {
            Err(Error::Config(format!("forced exit layer {l} outside 1..={}", model.config.layers)))
        }
        _ => Ok(()),
    }
}

/// Width reduction applied after block `layer`; returns the kept-token count.
fn prune_after<T: Scalar>(
    g: &mut Graph<'_, T>,
    pruning: &PruningState<T>,
    state: &mut HiddenState,
    attention: &[crate::numerics::Var],
    layer: usize,
) -> Result<()> {
    match pruning.mode {
        PruneMode::Disabled => {}
        PruneMode::Hard => {
            let scores = {
                let refs: Vec<&Matrix<T>> = attention.iter().map(|&a| g.value(a)).collect();
                importance(&refs)
            };
            let keep = hard_mask(&scores, pruning.delta(layer));
            if keep.iter().any(|k| !k) {
                let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
                state.values = g.select_rows(state.values, &rows)?;
                state.positions = rows.iter().map(|&i| state.positions[i]).collect();
            }
        }
        PruneMode::Soft => {
            let scores = crate::pruning::importance_on_tape(g, attention)?;
            let delta = g.constant(Matrix::scalar(pruning.delta(layer)));
            let gates = soft_gate(g, scores, delta, pruning.temperature)?;
            state.values = apply_soft_mask(g, state.values, gates)?;
        }
    }
    Ok(())
}

/// Runs one input through the conditional network.
///
/// For `l = 1..L-1`: block `l`, then pruning (hard drops or soft gating), then
/// the exit head on the pruned state; inference returns that head's argmax
/// as soon as the policy says so. Otherwise block `L` and the main
/// classifier finish the pass. The ledger charges every product performed,
/// exit heads included.
pub fn mp_infer<T: Scalar>(
    model: &Model<T>,
    ids: &[u32],
    pruning: &PruningState<T>,
    policy: ExitPolicy<T>,
) -> Result<Inference<T>> {
    check_policy(model, policy)?;
    pruning.validate()?;
    let cfg = &model.config;
    let layers = cfg.layers;
    let tokens = prepare_tokens(cfg, ids)?;
    let mut g = Graph::inference(&model.params);
    let mut state = embed(&mut g, model, &tokens)?;

    let mut ledger = FlopsLedger {
        embedding: count_flops(cfg, tokens.len(), Component::Embedding),
        layers: Vec::with_capacity(layers),
        head: OpCount::ZERO,
        baseline: baseline_cost(cfg, tokens.len()),
        exit_layer: layers,
    };
    let mut exit = ExitState {
        tau: match policy {
            ExitPolicy::Threshold(t) => Some(t),
            _ => None,
        },
        uncertainties: Vec::new(),
        sub_probs: Vec::new(),
        final_probs: None,
        exit_layer: layers,
    };
    let mut trace = Vec::with_capacity(layers);

    for l in 1..=layers {
        let n_in = state.len();
        let out = block_forward(&mut g, model, &state, l)?;
        state = out.state;
        let mut entry = LayerLedger {
            layer: l,
            tokens_in: n_in,
            tokens_out: n_in,
            attention: count_flops(cfg, n_in, Component::Attention),
            ffn: count_flops(cfg, n_in, Component::Ffn),
            pruning: OpCount::ZERO,
            sub_classifier: OpCount::ZERO,
        };
        let mut record = LayerTrace { layer: l, tokens_in: n_in, tokens_out: n_in, uncertainty: None, exited: false };
        if l == layers {
            ledger.layers.push(entry);
            trace.push(record);
            break;
        }

        if pruning.mode != PruneMode::Disabled {
            entry.pruning = count_flops(cfg, n_in, Component::Pruning);
            prune_after(&mut g, pruning, &mut state, &out.attention, l)?;
        }
        entry.tokens_out = state.len();
        record.tokens_out = state.len();

        let stop = match policy {
            ExitPolicy::Disabled => None,
            ExitPolicy::Threshold(tau) => Some(Box::new(move |u: T| should_exit(u, tau)) as Box<dyn Fn(T) -> bool>),
            ExitPolicy::ForcedLayer(k) => Some(Box::new(move |_: T| l == k) as Box<dyn Fn(T) -> bool>),
        };
        if let Some(stop) = stop {
            entry.sub_classifier = count_flops(cfg, state.len(), Component::SubClassifier);
            let p = sub_forward(&mut g, model, &state, l)?;
            let u = uncertainty(&p);
            exit.uncertainties.push(u);
            exit.sub_probs.push(p);
            record.uncertainty = Some(u.as_f64());
            if stop(u) {
                record.exited = true;
                ledger.layers.push(entry);
                trace.push(record);
                ledger.exit_layer = l;
                exit.exit_layer = l;
                let probs = exit.sub_probs.last().cloned().unwrap_or_default();
                return Ok(Inference {
                    prediction: argmax(&probs),
                    probs,
                    exit,
                    ledger,
                    trace,
                    tape_macs: g.macs(),
                });
            }
        }
        ledger.layers.push(entry);
        trace.push(record);
    }

    ledger.head = count_flops(cfg, state.len(), Component::Head);
    let logits = classifier_logits(&mut g, model, &state)?;
    let p = g.softmax_rows(logits);
    let probs = g.value(p).data().to_vec();
    exit.final_probs = Some(probs.clone());
    Ok(Inference { prediction: argmax(&probs), probs, exit, ledger, trace, tape_macs: g.macs() })
}

/// Outcome of comparing physical token removal with attention masking.
#[derive(Clone, Debug, PartialEq)]
pub struct Equivalence {
    pub max_abs_logit_diff: f64,
    /// Tokens removed across all layers on the physical path.
    pub dropped: usize,
    /// Whether the masked path's own importance scores reach the same
    /// decisions as the physical path.
    pub decisions_agree: bool,
}

/// Runs the full-depth hard-pruned network twice: (a) removing dropped rows
/// and (b) keeping every row but masking dropped tokens out of all attention
/// and importance computations, with (a)'s drop decisions. Returns the
/// largest main-classifier logit difference.
pub fn pruned_equivalence_check<T: Scalar>(model: &Model<T>, ids: &[u32], pruning: &PruningState<T>) -> Result<Equivalence> {
    if pruning.mode != PruneMode::Hard {
        return Err(Error::Config("equivalence check requires hard pruning".into()));
    }
    let cfg = &model.config;
    let tokens = prepare_tokens(cfg, ids)?;
    let layers = cfg.layers;

    // (a) physical removal
    let mut g = Graph::inference(&model.params);
    let mut state = embed(&mut g, model, &tokens)?;
    let mut kept_per_layer: Vec<Vec<usize>> = Vec::with_capacity(layers);
    for l in 1..=layers {
        let out = block_forward(&mut g, model, &state, l)?;
        state = out.state;
        if l < layers {
            prune_after(&mut g, pruning, &mut state, &out.attention, l)?;
        }
        kept_per_layer.push(state.positions.clone());
    }
    let logits = classifier_logits(&mut g, model, &state)?;
    let physical = g.value(logits).clone();

    // (b) masked full width
    let mut g = Graph::inference(&model.params);
    let mut state = embed(&mut g, model, &tokens)?;
    let mut keep = vec![true; tokens.len()];
    let mut decisions_agree = true;
    for l in 1..=layers {
        let out = block_forward_masked(&mut g, model, &state, l, Some(&keep))?;
        state = out.state;
        if l < layers {
            let own = {
                let refs: Vec<&Matrix<T>> = out.attention.iter().map(|&a| g.value(a)).collect();
                let scores = importance_masked(&refs, &keep);
                hard_mask(&scores, pruning.delta(l))
            };
            let before: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
            let own_kept: Vec<usize> = before.iter().zip(&own).filter(|(_, &k)| k).map(|(&i, _)| i).collect();
            decisions_agree &= own_kept == kept_per_layer[l - 1];
            keep = (0..tokens.len()).map(|i| kept_per_layer[l - 1].binary_search(&i).is_ok()).collect();
        }
    }
    let logits = classifier_logits(&mut g, model, &state)?;
    let masked = g.value(logits).clone();

    Ok(Equivalence {
        max_abs_logit_diff: physical.max_abs_diff(&masked).as_f64(),
        dropped: tokens.len() - kept_per_layer.last().map_or(tokens.len(), Vec::len),
        decisions_agree,
    })
}
