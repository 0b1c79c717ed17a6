//! Four-stage training: regular, soft pruning, hard pruning, exit heads.
//!
//! Each stage decides which parameter groups are trainable; everything else
//! is bound as a constant, so the optimizer never sees it. Batches are lists
//! of independent per-example graphs whose gradients are averaged, so no
//! padding is involved.
//!
//! The optimizer is Adam with no warmup, decay or weight decay.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::encoder::{argmax, block_forward, classifier_logits, embed, prepare_tokens, HiddenState, Model, Stage};
use crate::engine::infer::{mp_infer, ExitPolicy};
use crate::error::{Error, Result};
use crate::exiting::{stage2_loss, sub_logits};
use crate::numerics::{Adam, Graph, Matrix, ParamGrads, ParamGroup, Var};
use crate::pruning::{
    apply_soft_mask, hard_mask, importance, importance_on_tape, mask_l1_penalty, soft_gate, threshold_schedule,
    PruneMode, PruningState,
};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Regular training only.
    Bert,
    /// Learned token pruning: regular, soft, hard.
    Ltp,
    /// Early exiting: regular, exit heads on the unpruned backbone.
    #[serde(rename = "fastbert")]
    FastBert,
    /// All four stages; exit heads trained on the pruned backbone.
    Mp,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Bert, Preset::Ltp, Preset::FastBert, Preset::Mp];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Bert => "bert",
            Preset::Ltp => "ltp",
            Preset::FastBert => "fastbert",
            Preset::Mp => "mp",
        }
    }

    /// Which of (regular, soft, hard, sub) the preset runs.
    pub fn active(self) -> [bool; 4] {
        match self {
            Preset::Bert => [true, false, false, false],
            Preset::Ltp => [true, true, true, false],
            Preset::FastBert => [true, false, false, true],
            Preset::Mp => [true, true, true, true],
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (expected bert, ltp, fastbert or mp)")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEpochs {
    pub regular: usize,
    pub soft: usize,
    pub hard: usize,
    pub sub: usize,
}

impl StageEpochs {
    pub fn new(regular: usize, soft: usize, hard: usize, sub: usize) -> Self {
        Self { regular, soft, hard, sub }
    }

    pub fn get(&self, stage: Stage) -> usize {
        match stage {
            Stage::Regular => self.regular,
            Stage::Soft => self.soft,
            Stage::Hard => self.hard,
            Stage::Sub => self.sub,
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.regular, self.soft, self.hard, self.sub]
    }
}

/// Epoch counts for the four stages used on some public benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetProfile {
    AgNews,
    Yelp,
    Qqp,
    Mrpc,
    Rte,
}

impl DatasetProfile {
    /// Epochs with every stage active; [`make_plan`] zeroes what a preset skips.
    pub fn epochs(self) -> StageEpochs {
        match self {
            DatasetProfile::AgNews | DatasetProfile::Yelp => StageEpochs::new(3, 1, 2, 2),
            DatasetProfile::Qqp => StageEpochs::new(5, 2, 5, 5),
            DatasetProfile::Mrpc | DatasetProfile::Rte => StageEpochs::new(10, 10, 5, 5),
        }
    }
}

/// Training configuration. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub preset: Preset,
    pub epochs: StageEpochs,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Threshold of the last layer; earlier layers start at `delta_final · l / L`.
    pub delta_final: f64,
    /// Soft-gate temperature.
    pub temperature: f64,
    /// Weight of the gate L1 penalty.
    pub lambda: f64,
    /// Halt values evaluated after training.
    pub tau_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            preset: Preset::Mp,
            epochs: DatasetProfile::AgNews.epochs(),
            learning_rate: 2e-5,
            batch_size: 16,
            delta_final: 0.04,
            temperature: 1e-5,
            lambda: 0.01,
            tau_grid: vec![0.1, 0.5, 0.8],
            seed: 0,
        }
    }
}

impl TrainPlan {
    /// Whether thresholds are learned and applied.
    pub fn prunes(&self) -> bool {
        self.epochs.soft > 0 || self.epochs.hard > 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.delta_final >= 0.0 && self.delta_final.is_finite()) {
            return bad(format!("delta_final {} must be non-negative", self.delta_final));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if let Some(t) = self.tau_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return bad(format!("halt value {t} outside [0, 1]"));
        }
        if self.epochs.soft > 0 && self.epochs.hard == 0 {
            return bad("soft pruning must be followed by hard pruning".into());
        }
        let active = self.preset.active();
        for (stage, on) in Stage::ALL.into_iter().zip(active) {
            if !on && self.epochs.get(stage) > 0 {
                return bad(format!("preset {} does not run the {} stage", self.preset, stage.tag()));
            }
        }
        Ok(())
    }
}

/// Plan running the stages of `preset` with the given epoch counts.
pub fn make_plan(preset: Preset, epochs: StageEpochs) -> TrainPlan {
    let [r, s, h, u] = preset.active();
    let pick = |on: bool, e: usize| if on { e } else { 0 };
    TrainPlan {
        preset,
        epochs: StageEpochs::new(pick(r, epochs.regular), pick(s, epochs.soft), pick(h, epochs.hard), pick(u, epochs.sub)),
        ..TrainPlan::default()
    }
}

/// Loss-side settings of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings<T> {
    pub mode: PruneMode,
    pub temperature: T,
    pub lambda: T,
}

impl<T: Scalar> LossSettings<T> {
    pub fn plain() -> Self {
        Self { mode: PruneMode::Disabled, temperature: T::one(), lambda: T::zero() }
    }
}

/// Per-example task loss and its by-products.
pub struct TaskLoss {
    pub loss: Var,
    pub logits: Var,
    /// Soft gates per pruned layer (`n×1`, `[CLS]` row included).
    pub gates: Vec<Var>,
}

/// Backbone forward with the requested pruning behavior after blocks `1..L`.
/// Soft mode gates rows with the model's own thresholds; hard mode drops the
/// rows whose score does not exceed them.
pub fn backbone<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    tokens: &[usize],
    settings: &LossSettings<T>,
    mut visit: impl FnMut(&mut Graph<'_, T>, &HiddenState) -> Result<()>,
) -> Result<(HiddenState, Vec<Var>)> {
    let layers = model.config.layers;
    let mut state = embed(g, model, tokens)?;
    let mut gates = Vec::new();
    for l in 1..=layers {
        let out = block_forward(g, model, &state, l)?;
        state = out.state;
        if l == layers {
            break;
        }
        match settings.mode {
            PruneMode::Disabled => {}
            PruneMode::Soft => {
                let scores = importance_on_tape(g, &out.attention)?;
                let delta = g.param(model.ids.deltas[l - 1]);
                let gate = soft_gate(g, scores, delta, settings.temperature)?;
                state.values = apply_soft_mask(g, state.values, gate)?;
                gates.push(gate);
            }
            PruneMode::Hard => {
                let delta = g.params().value(model.ids.deltas[l - 1]).get(0, 0);
                let keep = {
                    let refs: Vec<&Matrix<T>> = out.attention.iter().map(|&a| g.value(a)).collect();
                    hard_mask(&importance(&refs), delta)
                };
                if keep.iter().any(|k| !k) {
                    let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
                    state.values = g.select_rows(state.values, &rows)?;
                    state.positions = rows.iter().map(|&i| state.positions[i]).collect();
                }
            }
        }
        visit(g, &state)?;
    }
    Ok((state, gates))
}

/// Cross-entropy of the main classifier, plus `λ · L1(M)` in soft mode.
pub fn task_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    ids: &[u32],
    label: usize,
    settings: &LossSettings<T>,
) -> Result<TaskLoss> {
    if label >= model.config.classes {
        return Err(Error::Input(format!("label {label} outside {} classes", model.config.classes)));
    }
    let tokens = prepare_tokens(&model.config, ids)?;
    let (state, gates) = backbone(g, model, &tokens, settings, |_, _| Ok(()))?;
    let logits = classifier_logits(g, model, &state)?;
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick(logp, 0, label)?;
    let mut loss = g.scale(picked, -T::one());
    if settings.mode == PruneMode::Soft {
        if let Some(penalty) = mask_l1_penalty(g, &gates, settings.lambda)? {
            loss = g.add(loss, penalty)?;
        }
    }
    Ok(TaskLoss { loss, logits, gates })
}

/// Sum over exit heads of `KL(p_s ‖ p_t)`, with `p_t` the main classifier's
/// distribution treated as a constant. Exit heads read detached backbone
/// states; with `prune` set the backbone hard-prunes with the model's thresholds.
pub fn distill_loss<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, ids: &[u32], prune: bool) -> Result<Var> {
    let tokens = prepare_tokens(&model.config, ids)?;
    let settings = LossSettings { mode: if prune { PruneMode::Hard } else { PruneMode::Disabled }, ..LossSettings::plain() };
    let mut states = Vec::with_capacity(model.config.layers - 1);
    let (last, _) = backbone(g, model, &tokens, &settings, |g, h| {
        let detached = g.detach(h.values);
        states.push(HiddenState { values: detached, ..h.clone() });
        Ok(())
    })?;
    let logits = classifier_logits(g, model, &last)?;
    let p = g.softmax_rows(logits);
    let teacher = g.value(p).data().to_vec();
    let mut students = Vec::with_capacity(states.len());
    for (i, h) in states.iter().enumerate() {
        students.push(sub_logits(g, model, h, i + 1)?);
    }
    stage2_loss(g, &students, &teacher)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Training accuracy of the main classifier during the epoch (task stages only).
    pub accuracy: Option<f64>,
    /// Mean non-`[CLS]` gate value (soft stage only).
    pub mean_gate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &EpochLog> {
        self.epochs.iter().filter(move |e| e.stage == stage)
    }
}

struct ExampleOutcome<T> {
    grads: ParamGrads<T>,
    loss: f64,
    correct: Option<bool>,
    gate_sum: f64,
    gate_count: usize,
}

fn trainable(stage: Stage) -> fn(ParamGroup) -> bool {
    match stage {
        Stage::Regular | Stage::Hard => |g| matches!(g, ParamGroup::Backbone | ParamGroup::Classifier),
        Stage::Soft => |g| matches!(g, ParamGroup::Backbone | ParamGroup::Classifier | ParamGroup::Threshold),
        Stage::Sub => |g| g == ParamGroup::SubClassifier,
    }
}

fn check_order<T>(model: &Model<T>, stage: Stage) -> Result<()> {
    if let Some(later) = model.stages.iter().find(|s| **s > stage) {
        return Err(Error::Config(format!("{} stage cannot run after the {} stage", stage.tag(), later.tag())));
    }
    Ok(())
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage as u64 + 1)
}

fn run_stage<T: Scalar>(
    model: &mut Model<T>,
    data: &[LabeledExample],
    plan: &TrainPlan,
    stage: Stage,
    epochs: usize,
    example: impl Fn(&Model<T>, &LabeledExample) -> Result<ExampleOutcome<T>> + Sync,
) -> Result<Vec<EpochLog>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    plan.validate()?;
    check_order(model, stage)?;
    if data.is_empty() {
        return Err(Error::Input(format!("{} stage needs training data", stage.tag())));
    }
    let frozen_before: Vec<bool> = model.params.iter().map(|(_, p)| p.frozen).collect();
    model.params.train_only(trainable(stage));
    let mut adam = Adam::new(T::lit(plan.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(plan.seed, stage));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(epochs);
    let result = (|| {
        for epoch in 1..=epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct, mut judged, mut gate_sum, mut gate_count) = (0.0, 0usize, 0usize, 0.0, 0usize);
            for batch in order.chunks(plan.batch_size) {
                let snapshot: &Model<T> = model;
                let outcomes = batch
                    .par_iter()
                    .map(|&i| example(snapshot, &data[i]))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Stage { stage: stage.tag(), epoch, source: Box::new(e) })?;
                let mut grads = ParamGrads::new(model.params.len());
                for o in &outcomes {
                    if !o.loss.is_finite() {
                        return Err(Error::Stage {
                            stage: stage.tag(),
                            epoch,
                            source: Box::new(Error::Numeric(format!("non-finite loss {}", o.loss))),
                        });
                    }
                    grads.merge(&o.grads);
                    loss_sum += o.loss;
                    if let Some(c) = o.correct {
                        judged += 1;
                        correct += c as usize;
                    }
                    gate_sum += o.gate_sum;
                    gate_count += o.gate_count;
                }
                grads.scale(T::one() / T::lit(batch.len() as f64));
                adam.step(&mut model.params, &grads);
            }
            logs.push(EpochLog {
                stage,
                epoch,
                mean_loss: loss_sum / data.len() as f64,
                accuracy: (judged > 0).then(|| correct as f64 / judged as f64),
                mean_gate: (gate_count > 0).then(|| gate_sum / gate_count as f64),
            });
        }
        Ok(())
    })();
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (id, frozen) in ids.into_iter().zip(frozen_before) {
        model.params.set_frozen(id, frozen);
    }
    result?;
    model.stages.push(stage);
    Ok(logs)
}

fn task_example<T: Scalar>(model: &Model<T>, ex: &LabeledExample, settings: &LossSettings<T>) -> Result<ExampleOutcome<T>> {
    let mut g = Graph::new(&model.params);
    let out = task_loss(&mut g, model, &ex.ids, ex.label, settings)?;
    let loss = g.value(out.loss).get(0, 0).as_f64();
    let correct = argmax(g.value(out.logits).data()) == ex.label;
    let (mut gate_sum, mut gate_count) = (0.0, 0);
    for &gate in &out.gates {
        let v = g.value(gate).data();
        gate_sum += v[1..].iter().map(|x| x.as_f64()).sum::<f64>();
        gate_count += v.len() - 1;
    }
    let grads = if loss.is_finite() { g.param_grads(out.loss)? } else { ParamGrads::new(model.params.len()) };
    Ok(ExampleOutcome { grads, loss, correct: Some(correct), gate_sum, gate_count })
}

/// Trains backbone and main classifier with cross-entropy; no pruning, no exits.
pub fn stage_regular<T: Scalar>(model: &mut Model<T>, data: &[LabeledExample], plan: &TrainPlan) -> Result<Vec<EpochLog>> {
    let settings = LossSettings::plain();
    run_stage(model, data, plan, Stage::Regular, plan.epochs.regular, |m, ex| task_example(m, ex, &settings))
}

/// Trains backbone, main classifier and thresholds through soft gates.
pub fn stage_soft_prune<T: Scalar>(model: &mut Model<T>, data: &[LabeledExample], plan: &TrainPlan) -> Result<Vec<EpochLog>> {
    let settings = LossSettings { mode: PruneMode::Soft, temperature: T::lit(plan.temperature), lambda: T::lit(plan.lambda) };
    run_stage(model, data, plan, Stage::Soft, plan.epochs.soft, |m, ex| task_example(m, ex, &settings))
}

/// Trains backbone and main classifier with tokens physically dropped;
/// thresholds stay fixed.
pub fn stage_hard_prune<T: Scalar>(model: &mut Model<T>, data: &[LabeledExample], plan: &TrainPlan) -> Result<Vec<EpochLog>> {
    let settings = LossSettings { mode: PruneMode::Hard, ..LossSettings::plain() };
    run_stage(model, data, plan, Stage::Hard, plan.epochs.hard, |m, ex| task_example(m, ex, &settings))
}

/// Trains the exit heads by distillation from the frozen main classifier.
/// With `mp_mode` the backbone hard-prunes during these passes.
pub fn stage_subclassifiers<T: Scalar>(
    model: &mut Model<T>,
    data: &[LabeledExample],
    plan: &TrainPlan,
    mp_mode: bool,
) -> Result<Vec<EpochLog>> {
    run_stage(model, data, plan, Stage::Sub, plan.epochs.sub, |m, ex| {
        let mut g = Graph::new(&m.params);
        let loss = distill_loss(&mut g, m, &ex.ids, mp_mode)?;
        let value = g.value(loss).get(0, 0).as_f64();
        let grads = if value.is_finite() { g.param_grads(loss)? } else { ParamGrads::new(m.params.len()) };
        Ok(ExampleOutcome { grads, loss: value, correct: None, gate_sum: 0.0, gate_count: 0 })
    })
}

/// Sets every threshold from the linear schedule on `delta_final`.
pub fn init_thresholds<T: Scalar>(model: &mut Model<T>, delta_final: f64) -> Result<()> {
    let deltas = threshold_schedule(T::lit(delta_final), model.config.layers)?;
    model.set_deltas(&deltas);
    Ok(())
}

/// Pruning configuration a trained model should be served with: hard
/// pruning with its learned thresholds once it went through the hard stage.
pub fn serving_pruning<T: Scalar>(model: &Model<T>) -> PruningState<T> {
    if model.has_stage(Stage::Hard) {
        PruningState::hard(model.deltas())
    } else {
        PruningState::disabled(model.config.layers)
    }
}

/// Runs the plan's active stages in order. `on_stage` is called after each
/// stage that ran, e.g. to write a checkpoint.
pub fn run_plan<T: Scalar>(
    model: &mut Model<T>,
    data: &[LabeledExample],
    plan: &TrainPlan,
    mut on_stage: impl FnMut(Stage, &Model<T>, &[EpochLog]) -> Result<()>,
) -> Result<TrainLog> {
    plan.validate()?;
    let mut log = TrainLog::default();
    for stage in Stage::ALL {
        if stage == Stage::Soft && plan.prunes() && !model.has_stage(Stage::Soft) {
            init_thresholds(model, plan.delta_final)?;
        }
        let epochs = match stage {
            Stage::Regular => stage_regular(model, data, plan)?,
            Stage::Soft => stage_soft_prune(model, data, plan)?,
            Stage::Hard => stage_hard_prune(model, data, plan)?,
            Stage::Sub => stage_subclassifiers(model, data, plan, plan.prunes())?,
        };
        if plan.epochs.get(stage) > 0 {
            on_stage(stage, model, &epochs)?;
        }
        log.epochs.extend(epochs);
    }
    Ok(log)
}

/// Main-classifier accuracy with the given pruning and no exits.
pub fn accuracy<T: Scalar>(model: &Model<T>, data: &[LabeledExample], pruning: &PruningState<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let correct = data
        .par_iter()
        .map(|ex| Ok((mp_infer(model, &ex.ids, pruning, ExitPolicy::Disabled)?.prediction == ex.label) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn toy() -> Vec<LabeledExample> {
        (0..24)
            .map(|i| {
                let label = i % 2;
                let marker = 1 + label as u32;
                LabeledExample { ids: vec![5 + (i % 7) as u32, marker, 9 + (i % 5) as u32], label }
            })
            .collect()
    }

    fn model() -> Model<f64> {
        let mut cfg = ModelConfig::new(3, 8, 2, 16, 2, 20, 12);
        cfg.init_std = 0.3;
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn table_presets() {
        let ag = DatasetProfile::AgNews.epochs();
        assert_eq!(make_plan(Preset::Mp, ag).epochs.as_array(), [3, 1, 2, 2]);
        assert_eq!(make_plan(Preset::Bert, ag).epochs.as_array(), [3, 0, 0, 0]);
        assert_eq!(make_plan(Preset::Ltp, ag).epochs.as_array(), [3, 1, 2, 0]);
        assert_eq!(make_plan(Preset::FastBert, ag).epochs.as_array(), [3, 0, 0, 2]);
        assert_eq!(make_plan(Preset::Mp, DatasetProfile::Qqp.epochs()).epochs.as_array(), [5, 2, 5, 5]);
        assert_eq!(make_plan(Preset::Ltp, DatasetProfile::Rte.epochs()).epochs.as_array(), [10, 10, 5, 0]);
        assert!("distilbert".parse::<Preset>().is_err());
        assert_eq!("MP".parse::<Preset>().unwrap(), Preset::Mp);
        for p in Preset::ALL {
            make_plan(p, ag).validate().unwrap();
        }
    }

    #[test]
    fn plan_validation() {
        let mut p = make_plan(Preset::Mp, StageEpochs::new(1, 1, 0, 1));
        assert!(p.validate().is_err());
        p.epochs.hard = 1;
        p.validate().unwrap();
        p.temperature = 0.0;
        assert!(p.validate().is_err());
        let mut p = make_plan(Preset::Bert, StageEpochs::new(1, 0, 0, 0));
        p.epochs.sub = 1;
        assert!(p.validate().is_err());
        let p: TrainPlan = serde_json::from_str(r#"{"preset": "ltp", "seed": 4}"#).unwrap();
        assert_eq!(p.learning_rate, 2e-5);
        assert!(serde_json::from_str::<TrainPlan>(r#"{"unknown": 1}"#).is_err());
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let mut m = model();
        let before = m.params.clone();
        let plan = make_plan(Preset::Mp, StageEpochs::new(0, 0, 0, 0));
        let log = run_plan(&mut m, &toy(), &plan, |_, _, _| panic!("no stage should run")).unwrap();
        assert!(log.epochs.is_empty());
        assert!(m.stages.is_empty());
        for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn regular_training_learns_and_is_deterministic() {
        let mut plan = make_plan(Preset::Bert, StageEpochs::new(12, 0, 0, 0));
        plan.learning_rate = 5e-3;
        plan.batch_size = 4;
        let data = toy();
        let mut a = model();
        let log = stage_regular(&mut a, &data, &plan).unwrap();
        assert!(log.last().unwrap().mean_loss < log[0].mean_loss);
        assert!(accuracy(&a, &data, &PruningState::disabled(3)).unwrap() >= 0.95);
        let mut b = model();
        stage_regular(&mut b, &data, &plan).unwrap();
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.value, y.value);
        }
        assert_eq!(a.stages, vec![Stage::Regular]);
        assert!(stage_regular(&mut a, &[], &plan).is_err());
    }

    #[test]
    fn freezing_by_stage() {
        let mut plan = make_plan(Preset::Mp, StageEpochs::new(1, 1, 1, 1));
        plan.learning_rate = 1e-3;
        plan.temperature = 0.01;
        plan.delta_final = 0.1;
        plan.batch_size = 8;
        let data = toy();
        let mut m = model();
        let mut snapshots = Vec::new();
        run_plan(&mut m, &data, &plan, |stage, model, _| {
            snapshots.push((stage, model.params.clone()));
            Ok(())
        })
        .unwrap();
        assert_eq!(m.stages, Stage::ALL.to_vec());
        let (_, soft) = &snapshots[1];
        let (_, hard) = &snapshots[2];
        let (_, sub) = &snapshots[3];
        assert_eq!(soft.snapshot(ParamGroup::Threshold), hard.snapshot(ParamGroup::Threshold));
        assert_ne!(soft.snapshot(ParamGroup::Backbone), hard.snapshot(ParamGroup::Backbone));
        for group in [ParamGroup::Backbone, ParamGroup::Classifier, ParamGroup::Threshold] {
            assert_eq!(hard.snapshot(group), sub.snapshot(group));
        }
        assert_ne!(hard.snapshot(ParamGroup::SubClassifier), sub.snapshot(ParamGroup::SubClassifier));
        assert!(m.params.iter().all(|(_, p)| !p.frozen));
        assert!(stage_regular(&mut m, &data, &plan).is_err());
    }

    #[test]
    fn zero_final_threshold_drops_nothing() {
        let m = model();
        let settings = LossSettings { mode: PruneMode::Hard, ..LossSettings::plain() };
        let tokens = prepare_tokens(&m.config, &[3, 4, 5, 6]).unwrap();
        let mut g = Graph::inference(&m.params);
        let (state, _) = backbone(&mut g, &m, &tokens, &settings, |_, h| {
            assert_eq!(h.len(), 5);
            Ok(())
        })
        .unwrap();
        assert_eq!(state.len(), 5);
    }

    #[test]
    fn large_penalty_closes_gates() {
        let mut plan = make_plan(Preset::Ltp, StageEpochs::new(0, 6, 1, 0));
        plan.learning_rate = 2e-3;
        plan.temperature = 0.01;
        plan.lambda = 5.0;
        plan.delta_final = 0.2;
        plan.batch_size = 8;
        let mut m = model();
        init_thresholds(&mut m, plan.delta_final).unwrap();
        let log = stage_soft_prune(&mut m, &toy(), &plan).unwrap();
        let gates: Vec<f64> = log.iter().map(|e| e.mean_gate.unwrap()).collect();
        assert!(gates.last().unwrap() < &gates[0], "{gates:?}");
    }

    #[test]
    fn mp_mode_changes_exit_inputs_once_tokens_drop() {
        let mut m = model();
        m.set_deltas(&[0.3, 0.3, 0.3]);
        let ids = [3, 4, 5, 6, 7];
        let mut g = Graph::inference(&m.params);
        let pruned = distill_loss(&mut g, &m, &ids, true).unwrap();
        let full = distill_loss(&mut g, &m, &ids, false).unwrap();
        let (pruned, full) = (g.value(pruned).get(0, 0), g.value(full).get(0, 0));
        assert_ne!(pruned, full);
    }
}
