//! Straight-line reference implementation that counts every
//! multiply-accumulate and elementwise operation as it goes.

#![allow(dead_code)]

use pyramid::encoder::Model;
use pyramid::Matrix64;

type Rows = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counter {
    pub macs: u64,
    pub aux: u64,
}

pub struct Oracle<'a> {
    pub model: &'a Model<f64>,
    pub count: Counter,
}

pub struct OracleRun {
    pub probs: Vec<f64>,
    pub exit_layer: usize,
    pub retained: Vec<usize>,
    pub count: Counter,
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a Model<f64>) -> Self {
        Self { model, count: Counter::default() }
    }

    fn w(&self, name: &str) -> &'a Matrix64 {
        let id = self.model.params.require(name).unwrap();
        self.model.params.value(id)
    }

    pub fn linear(&mut self, x: &Rows, w: &Matrix64, b: &Matrix64) -> Rows {
        let (k, m) = (w.rows(), w.cols());
        let mut out = vec![vec![0.0; m]; x.len()];
        for (i, row) in x.iter().enumerate() {
            assert_eq!(row.len(), k);
            for j in 0..m {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += row[t] * w.get(t, j);
                    self.count.macs += 1;
                }
                out[i][j] = acc + b.get(0, j);
                self.count.aux += 1;
            }
        }
        out
    }

    fn softmax(&mut self, row: &[f64]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        self.count.aux += row.len() as u64;
        e.into_iter().map(|v| v / z).collect()
    }

    fn layer_norm(&mut self, x: &Rows, gain: &Matrix64, bias: &Matrix64) -> Rows {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                self.count.aux += row.len() as u64;
                row.iter().enumerate().map(|(c, v)| (v - mean) * inv * gain.get(0, c) + bias.get(0, c)).collect()
            })
            .collect()
    }

    fn residual(&mut self, a: &Rows, b: &Rows) -> Rows {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                self.count.aux += x.len() as u64;
                x.iter().zip(y).map(|(p, q)| p + q).collect()
            })
            .collect()
    }

    /// Transformer block under `prefix`; returns the output and per-head attention.
    pub fn block(&mut self, prefix: &str, x: &Rows, heads: usize, divisor: f64) -> (Rows, Vec<Rows>) {
        let n = x.len();
        let mut contexts: Vec<Rows> = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = self.linear(x, self.w(&format!("{prefix}.attn.query.{h}.weight")), self.w(&format!("{prefix}.attn.query.{h}.bias")));
            let k = self.linear(x, self.w(&format!("{prefix}.attn.key.{h}.weight")), self.w(&format!("{prefix}.attn.key.{h}.bias")));
            let v = self.linear(x, self.w(&format!("{prefix}.attn.value.{h}.weight")), self.w(&format!("{prefix}.attn.value.{h}.bias")));
            let dh = q[0].len();
            let mut p = Vec::with_capacity(n);
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    let mut acc = 0.0;
                    for t in 0..dh {
                        acc += q[i][t] * k[j][t];
                        self.count.macs += 1;
                    }
                    logits[j] = acc / divisor;
                    self.count.aux += 1;
                }
                p.push(self.softmax(&logits));
            }
            let mut ctx = vec![vec![0.0; dh]; n];
            for i in 0..n {
                for t in 0..dh {
                    for j in 0..n {
                        ctx[i][t] += p[i][j] * v[j][t];
                        self.count.macs += 1;
                    }
                }
            }
            contexts.push(ctx);
            probs.push(p);
        }
        let joined: Rows = (0..n).map(|i| contexts.iter().flat_map(|c| c[i].iter().copied()).collect()).collect();
        let attn = self.linear(&joined, self.w(&format!("{prefix}.attn.output.weight")), self.w(&format!("{prefix}.attn.output.bias")));
        let res = self.residual(x, &attn);
        let mid = self.layer_norm(&res, self.w(&format!("{prefix}.attn.norm.gain")), self.w(&format!("{prefix}.attn.norm.bias")));
        let inner = self.linear(&mid, self.w(&format!("{prefix}.ffn.inner.weight")), self.w(&format!("{prefix}.ffn.inner.bias")));
        let inner: Rows = inner
            .into_iter()
            .map(|row| {
                self.count.aux += row.len() as u64;
                row.into_iter().map(gelu).collect()
            })
            .collect();
        let outer = self.linear(&inner, self.w(&format!("{prefix}.ffn.outer.weight")), self.w(&format!("{prefix}.ffn.outer.bias")));
        let res = self.residual(&mid, &outer);
        let out = self.layer_norm(&res, self.w(&format!("{prefix}.ffn.norm.gain")), self.w(&format!("{prefix}.ffn.norm.bias")));
        (out, probs)
    }

    pub fn embed(&mut self, tokens: &[usize]) -> Rows {
        let tok = self.w("embed.token");
        let pos = self.w("embed.position");
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                self.count.aux += tok.cols() as u64;
                (0..tok.cols()).map(|c| tok.get(t, c) + pos.get(i, c)).collect()
            })
            .collect()
    }

    /// Pooler, projector and softmax on row 0.
    pub fn head(&mut self, prefix: &str, x: &Rows) -> Vec<f64> {
        let cls = vec![x[0].clone()];
        let pooled = self.linear(&cls, self.w(&format!("{prefix}.pooler.weight")), self.w(&format!("{prefix}.pooler.bias")));
        self.count.aux += pooled[0].len() as u64;
        let pooled = vec![pooled[0].iter().map(|v| v.tanh()).collect()];
        let logits = self.linear(&pooled, self.w(&format!("{prefix}.projector.weight")), self.w(&format!("{prefix}.projector.bias")));
        self.softmax(&logits[0])
    }

    /// Column means of the attention, averaged over heads.
    pub fn importance(&mut self, probs: &[Rows]) -> Vec<f64> {
        let n = probs[0].len();
        let mut total = vec![0.0; n];
        for p in probs {
            let mut cols = vec![0.0; n];
            for row in p {
                for j in 0..n {
                    cols[j] += row[j];
                    self.count.aux += 1;
                }
            }
            for j in 0..n {
                total[j] += cols[j];
                self.count.aux += 1;
            }
        }
        self.count.aux += n as u64;
        total.into_iter().map(|v| v / (probs.len() * n) as f64).collect()
    }

    pub fn exit_head(&mut self, layer: usize, x: &Rows) -> Vec<f64> {
        let cfg = &self.model.config;
        let p = format!("exit.{layer}");
        let proj = self.linear(x, self.w(&format!("{p}.input.weight")), self.w(&format!("{p}.input.bias")));
        let (out, _) = self.block(&format!("{p}.block"), &proj, 1, (cfg.sub_width() as f64).sqrt());
        self.head(&p, &out)
    }

    /// Full conditional inference: block, pruning, exit test per layer.
    pub fn infer(mut self, ids: &[u32], deltas: Option<&[f64]>, tau: Option<f64>) -> OracleRun {
        let cfg = self.model.config.clone();
        let mut tokens = vec![0usize];
        tokens.extend(ids.iter().map(|&i| i as usize));
        let mut x = self.embed(&tokens);
        let divisor = (cfg.head_dim() as f64).sqrt();
        let mut retained = Vec::new();
        for l in 1..=cfg.layers {
            let (out, probs) = self.block(&format!("layer.{l}"), &x, cfg.heads, divisor);
            x = out;
            if l == cfg.layers {
                retained.push(x.len());
                break;
            }
            if let Some(d) = deltas {
                let s = self.importance(&probs);
                x = x.into_iter().enumerate().filter(|(i, _)| *i == 0 || s[*i] > d[l - 1]).map(|(_, r)| r).collect();
            }
            retained.push(x.len());
            if let Some(tau) = tau {
                let p = self.exit_head(l, &x);
                if normalized_entropy(&p) <= tau {
                    return OracleRun { probs: p, exit_layer: l, retained, count: self.count };
                }
            }
        }
        let probs = self.head("classifier", &x);
        OracleRun { probs, exit_layer: cfg.layers, retained, count: self.count }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn normalized_entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
