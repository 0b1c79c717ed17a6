//! Forward pass of the backbone on a [`Graph`].

use crate::encoder::model::{BlockParams, HeadParams, Model};
use crate::encoder::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, Var};
use crate::scalar::Scalar;

/// Token id reserved for `[CLS]`.
pub const CLS_ID: u32 = 0;

/// Activations of the currently retained tokens after some layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    /// `n×d` node on the graph.
    pub values: Var,
    /// Original sequence positions of the retained rows, strictly increasing,
    /// starting with the `[CLS]` position 0.
    pub positions: Vec<usize>,
    /// 0 for the embedding output, `l` after block `l`.
    pub layer: usize,
}

impl HiddenState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Validates ids and prepends `[CLS]` when it is not already first.
pub fn prepare_tokens(cfg: &ModelConfig, ids: &[u32]) -> Result<Vec<usize>> {
    let body = if ids.first() == Some(&CLS_ID) { &ids[1..] } else { ids };
    if body.len() + 1 > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens plus [CLS] exceeds max_len {}",
            body.len(),
            cfg.max_len
        )));
    }
    let mut tokens = Vec::with_capacity(body.len() + 1);
    tokens.push(CLS_ID as usize);
    for (i, &id) in body.iter().enumerate() {
        if id == CLS_ID {
            return Err(Error::Input(format!("id 0 is reserved for [CLS] (position {})", i + 1)));
        }
        if id as usize >= cfg.vocab {
            return Err(Error::Input(format!("token id {id} outside vocabulary of {}", cfg.vocab)));
        }
        tokens.push(id as usize);
    }
    Ok(tokens)
}

/// Token plus learned positional embedding for a prepared sequence.
pub fn embed<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, tokens: &[usize]) -> Result<HiddenState> {
    let table = g.param(model.ids.token_embed);
    let pos_table = g.param(model.ids.position_embed);
    let tok = g.select_rows(table, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = g.select_rows(pos_table, &positions)?;
    let values = g.add(tok, pos)?;
    Ok(HiddenState { values, positions, layer: 0 })
}

/// Per-head attention probabilities plus the block output for one block's weights.
///
/// `key_mask`, when given, excludes the `false` columns from every softmax.
pub(crate) fn run_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    bp: &BlockParams,
    x: Var,
    logit_divisor: f64,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let inv = T::lit(1.0 / logit_divisor);
    let mut probs = Vec::with_capacity(bp.heads);
    let mut contexts = Vec::with_capacity(bp.heads);
    for h in 0..bp.heads {
        let (wq, bq) = (g.param(bp.wq[h]), g.param(bp.bq[h]));
        let (wk, bk) = (g.param(bp.wk[h]), g.param(bp.bk[h]));
        let (wv, bv) = (g.param(bp.wv[h]), g.param(bp.bv[h]));
        let q = g.matmul(x, wq)?;
        let q = g.add_row(q, bq)?;
        let k = g.matmul(x, wk)?;
        let k = g.add_row(k, bk)?;
        let v = g.matmul(x, wv)?;
        let v = g.add_row(v, bv)?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, inv);
        let p = match key_mask {
            Some(mask) => g.masked_softmax_rows(logits, mask)?,
            None => g.softmax_rows(logits),
        };
        contexts.push(g.matmul(p, v)?);
        probs.push(p);
    }
    let ctx = if contexts.len() == 1 { contexts[0] } else { g.concat_cols(&contexts)? };
    let (wo, bo) = (g.param(bp.wo), g.param(bp.bo));
    let attn = g.matmul(ctx, wo)?;
    let attn = g.add_row(attn, bo)?;
    let res = g.add(x, attn)?;
    let (g1, b1) = (g.param(bp.ln1_gain), g.param(bp.ln1_bias));
    let mid = g.layer_norm(res, g1, b1)?;

    let (w1, bias1) = (g.param(bp.w1), g.param(bp.b1));
    let (w2, bias2) = (g.param(bp.w2), g.param(bp.b2));
    let inner = g.matmul(mid, w1)?;
    let inner = g.add_row(inner, bias1)?;
    let inner = g.gelu(inner);
    let outer = g.matmul(inner, w2)?;
    let outer = g.add_row(outer, bias2)?;
    let res = g.add(mid, outer)?;
    let (g2, b2) = (g.param(bp.ln2_gain), g.param(bp.ln2_bias));
    let out = g.layer_norm(res, g2, b2)?;
    Ok((out, probs))
}

/// Attention probabilities of backbone block `layer` (1-based) on `h`.
pub fn attention_probs<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    h: &HiddenState,
    layer: usize,
) -> Result<Vec<Var>> {
    let bp = block_params(model, layer)?;
    let inv = T::lit(1.0 / model.config.logit_scale());
    let mut probs = Vec::with_capacity(bp.heads);
    for head in 0..bp.heads {
        let (wq, bq) = (g.param(bp.wq[head]), g.param(bp.bq[head]));
        let (wk, bk) = (g.param(bp.wk[head]), g.param(bp.bk[head]));
        let q = g.matmul(h.values, wq)?;
        let q = g.add_row(q, bq)?;
        let k = g.matmul(h.values, wk)?;
        let k = g.add_row(k, bk)?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, inv);
        probs.push(g.softmax_rows(logits));
    }
    Ok(probs)
}

fn block_params<T>(model: &Model<T>, layer: usize) -> Result<&BlockParams> {
    if layer == 0 || layer > model.ids.blocks.len() {
        return Err(Error::Input(format!("layer {layer} outside 1..={}", model.ids.blocks.len())));
    }
    Ok(&model.ids.blocks[layer - 1])
}

/// Output of one backbone block.
pub struct BlockOutput {
    pub state: HiddenState,
    /// Per-head `n×n` attention probabilities used inside the block.
    pub attention: Vec<Var>,
}

/// Backbone block `layer`: attention with residual and post-norm, then the
/// GELU feed-forward with residual and post-norm.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    h: &HiddenState,
    layer: usize,
) -> Result<BlockOutput> {
    block_forward_masked(g, model, h, layer, None)
}

/// [`block_forward`] with attention restricted to the keys where `key_mask` is true.
pub fn block_forward_masked<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    h: &HiddenState,
    layer: usize,
    key_mask: Option<&[bool]>,
) -> Result<BlockOutput> {
    if h.layer + 1 != layer {
        return Err(Error::Input(format!("block {layer} fed the output of layer {}", h.layer)));
    }
    let bp = block_params(model, layer)?;
    let (values, attention) = run_block(g, bp, h.values, model.config.logit_scale(), key_mask)?;
    Ok(BlockOutput {
        state: HiddenState { values, positions: h.positions.clone(), layer },
        attention,
    })
}

/// Pools row 0 through `tanh(x·W + b)` and projects to class logits (`1×N`).
pub(crate) fn head_logits<T: Scalar>(g: &mut Graph<'_, T>, hp: &HeadParams, x: Var) -> Result<Var> {
    let cls = g.select_rows(x, &[0])?;
    let (pw, pb) = (g.param(hp.pooler_w), g.param(hp.pooler_b));
    let pooled = g.matmul(cls, pw)?;
    let pooled = g.add_row(pooled, pb)?;
    let pooled = g.tanh(pooled);
    let (cw, cb) = (g.param(hp.proj_w), g.param(hp.proj_b));
    let logits = g.matmul(pooled, cw)?;
    g.add_row(logits, cb)
}

/// Main-classifier logits for a hidden state.
pub fn classifier_logits<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, h: &HiddenState) -> Result<Var> {
    head_logits(g, &model.ids.head, h.values)
}

/// Main-classifier class distribution `p_t`.
pub fn pool_and_classify<T: Scalar>(g: &mut Graph<'_, T>, model: &Model<T>, h: &HiddenState) -> Result<Vec<T>> {
    let logits = classifier_logits(g, model, h)?;
    let p = g.softmax_rows(logits);
    Ok(g.value(p).data().to_vec())
}

/// Full-depth, full-width forward; returns the class distribution.
pub fn classify<T: Scalar>(model: &Model<T>, ids: &[u32]) -> Result<Vec<T>> {
    let tokens = prepare_tokens(&model.config, ids)?;
    let mut g = Graph::inference(&model.params);
    let mut h = embed(&mut g, model, &tokens)?;
    for l in 1..=model.config.layers {
        h = block_forward(&mut g, model, &h, l)?.state;
    }
    pool_and_classify(&mut g, model, &h)
}

/// Index of the largest probability; the lowest index wins ties.
pub fn argmax<T: Scalar>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Raw values of the listed nodes.
pub fn values<'a, T: Scalar>(g: &'a Graph<'_, T>, vars: &[Var]) -> Vec<&'a Matrix<T>> {
    vars.iter().map(|&v| g.value(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamGroup;

    fn tiny() -> Model<f64> {
        let mut cfg = ModelConfig::new(2, 8, 2, 16, 3, 30, 16);
        cfg.init_std = 0.5;
        Model::new(cfg, 42).unwrap()
    }

    #[test]
    fn embedding_shapes_and_errors() {
        let m = tiny();
        let cfg = &m.config;
        assert_eq!(prepare_tokens(cfg, &[]).unwrap(), vec![0]);
        assert_eq!(prepare_tokens(cfg, &[5, 7]).unwrap(), vec![0, 5, 7]);
        assert_eq!(prepare_tokens(cfg, &[0, 5, 7]).unwrap(), vec![0, 5, 7]);
        assert!(matches!(prepare_tokens(cfg, &[30]), Err(Error::Input(_))));
        assert!(matches!(prepare_tokens(cfg, &[4, 0]), Err(Error::Input(_))));
        assert!(matches!(prepare_tokens(cfg, &[1; 16]), Err(Error::Input(_))));

        let mut g = Graph::inference(&m.params);
        let h = embed(&mut g, &m, &[0]).unwrap();
        assert_eq!(g.value(h.values).shape(), (1, 8));
        let h = embed(&mut g, &m, &[0, 5, 5]).unwrap();
        assert_eq!(h.positions, vec![0, 1, 2]);
        let v = g.value(h.values);
        assert_ne!(v.row(1), v.row(2));
    }

    #[test]
    fn attention_edge_cases() {
        let mut m = tiny();
        let mut g = Graph::inference(&m.params);
        let h = embed(&mut g, &m, &[0]).unwrap();
        for p in attention_probs(&mut g, &m, &h, 1).unwrap() {
            assert_eq!(g.value(p).data(), &[1.0]);
        }
        drop(g);

        for bp in m.ids.blocks.clone() {
            for id in bp.wq.iter().chain(&bp.wk).chain(&bp.bq).chain(&bp.bk) {
                m.params.value_mut(*id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::inference(&m.params);
        let h = embed(&mut g, &m, &[0, 3, 4, 9]).unwrap();
        for p in attention_probs(&mut g, &m, &h, 1).unwrap() {
            assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn attention_matches_per_pair_oracle() {
        let m = tiny();
        let mut g = Graph::inference(&m.params);
        let h = embed(&mut g, &m, &[0, 3, 4, 9, 11]).unwrap();
        let probs = attention_probs(&mut g, &m, &h, 1).unwrap();
        let x = g.value(h.values).clone();
        let bp = &m.ids.blocks[0];
        let dh = m.config.head_dim();
        for (head, &pv) in probs.iter().enumerate() {
            let wq = m.params.value(bp.wq[head]);
            let wk = m.params.value(bp.wk[head]);
            let project = |w: &Matrix<f64>, i: usize| -> Vec<f64> {
                (0..dh).map(|c| (0..8).map(|k| x.get(i, k) * w.get(k, c)).sum()).collect()
            };
            for i in 0..5 {
                let qi = project(wq, i);
                let logits: Vec<f64> = (0..5)
                    .map(|j| {
                        let kj = project(wk, j);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for j in 0..5 {
                    assert!((g.value(pv).get(i, j) - logits[j].exp() / z).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_token_block_is_finite() {
        let m = tiny();
        let mut g = Graph::inference(&m.params);
        let h = embed(&mut g, &m, &[0]).unwrap();
        let out = block_forward(&mut g, &m, &h, 1).unwrap();
        assert_eq!(g.value(out.state.values).shape(), (1, 8));
        assert!(g.value(out.state.values).is_finite());
        assert!(block_forward(&mut g, &m, &h, 2).is_err());
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let m = tiny();
        let mut g = Graph::inference(&m.params);
        let h = embed(&mut g, &m, &[0, 3, 4, 9]).unwrap();
        let x = g.value(h.values).clone();
        let perm = [0usize, 3, 1, 2];
        let shuffled = g.constant(x.select_rows(&perm));
        let hs = HiddenState { values: shuffled, positions: h.positions.clone(), layer: 0 };
        let a = block_forward(&mut g, &m, &h, 1).unwrap();
        let b = block_forward(&mut g, &m, &hs, 1).unwrap();
        let permuted = g.value(a.state.values).select_rows(&perm);
        assert!(permuted.max_abs_diff(g.value(b.state.values)) < 1e-12);
    }

    #[test]
    fn classifier_outputs() {
        let mut m = tiny();
        let p = classify(&m, &[3, 4, 5]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v >= 0.0));

        let head = m.ids.head.clone();
        for id in [head.pooler_w, head.pooler_b, head.proj_w, head.proj_b] {
            m.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for v in classify(&m, &[3, 4, 5]).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(m.params.iter().any(|(_, p)| p.group == ParamGroup::SubClassifier));
    }

    #[test]
    fn argmax_ignores_logit_shift() {
        let p = crate::numerics::softmax_rows(&Matrix::row_vector(vec![0.1, 2.0, -1.0]));
        let q = crate::numerics::softmax_rows(&Matrix::row_vector(vec![5.1, 7.0, 4.0]));
        assert_eq!(argmax(p.data()), 1);
        assert_eq!(argmax(p.data()), argmax(q.data()));
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
