// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only language model over composite-process tokens.
//!
//! Pre-norm blocks with learned positional embeddings and a GELU MLP of
//! width `4 * d_model`. The residual stream after each block can be captured
//! or patched with a steering delta.

use std::path::Path;

use belief_nn::{AdamW, Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::processes::{BeliefPoint, CompositeSpec};
use crate::{io, rng, Error, Result};

pub const LM_MAGIC: &[u8; 4] = b"BGLM";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context_length: usize,
    pub vocab: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Held-out sequences for the final accuracy.
    pub eval_sequences: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 3,
            context_length: 16,
            vocab: 432,
            steps: 6000,
            batch: 64,
            lr: 1e-3,
            warmup: 200,
            weight_decay: 0.01,
            grad_clip: 1.0,
            eval_sequences: 2048,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.n_layers == 0 || self.context_length == 0 || self.vocab == 0 || self.batch == 0 {
            return Err(Error::invalid("n_layers, context_length, vocab and batch must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_in: ParamId,
    b_in: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Trained (or freshly initialized) language model.
#[derive(Debug, Clone)]
pub struct Lm {
    pub cfg: LmConfig,
    pub params: ParamStore<f32>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_u: ParamId,
    b_u: ParamId,
}

/// Residual-stream patch applied after block `layer`: `rows[i]` of the
/// flattened `[batch*seq, d]` residual gets `delta` added.
#[derive(Debug, Clone)]
pub struct Patch<'a> {
    pub layer: usize,
    pub delta: &'a [f32],
    pub rows: Vec<usize>,
}

pub struct Forward {
    pub logits: Var,
    /// Post-block residual stream of every layer.
    pub resid: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub losses: Vec<f32>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub steps: usize,
}

impl Lm {
    pub fn new(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(seed);
        let d = cfg.d_model;
        let mut p = ParamStore::new();
        let tok_emb = p.add_uniform("tok_emb", &[cfg.vocab, d], d, true, &mut r);
        let pos_emb = p.add_uniform("pos_emb", &[cfg.context_length, d], d, true, &mut r);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockIds {
                ln1_g: p.add_const(n("ln1.g"), &[d], 1.0, false),
                ln1_b: p.add_const(n("ln1.b"), &[d], 0.0, false),
                w_qkv: p.add_uniform(n("attn.w_qkv"), &[d, 3 * d], d, true, &mut r),
                b_qkv: p.add_const(n("attn.b_qkv"), &[3 * d], 0.0, false),
                w_o: p.add_uniform(n("attn.w_o"), &[d, d], d, true, &mut r),
                b_o: p.add_const(n("attn.b_o"), &[d], 0.0, false),
                ln2_g: p.add_const(n("ln2.g"), &[d], 1.0, false),
                ln2_b: p.add_const(n("ln2.b"), &[d], 0.0, false),
                w_in: p.add_uniform(n("mlp.w_in"), &[d, 4 * d], d, true, &mut r),
                b_in: p.add_const(n("mlp.b_in"), &[4 * d], 0.0, false),
                w_out: p.add_uniform(n("mlp.w_out"), &[4 * d, d], 4 * d, true, &mut r),
                b_out: p.add_const(n("mlp.b_out"), &[d], 0.0, false),
            });
        }
        let lnf_g = p.add_const("lnf.g", &[d], 1.0, false);
        let lnf_b = p.add_const("lnf.b", &[d], 0.0, false);
        let w_u = p.add_uniform("unembed.w", &[d, cfg.vocab], d, true, &mut r);
        let b_u = p.add_const("unembed.b", &[cfg.vocab], 0.0, false);
        Ok(Self { cfg, params: p, tok_emb, pos_emb, blocks, lnf_g, lnf_b, w_u, b_u })
    }

    /// Records the forward pass for `batch` sequences of length `seq` laid
    /// out contiguously in `tokens`.
    pub fn forward(&self, g: &mut Graph<f32>, tokens: &[usize], batch: usize, seq: usize, patch: Option<&Patch>) -> Forward {
        assert_eq!(tokens.len(), batch * seq, "tokens must be batch*seq");
        assert!(seq <= self.cfg.context_length, "sequence longer than context");
        let p = &self.params;
        let d = self.cfg.d_model;
        let te = g.param(p, self.tok_emb);
        let pe = g.param(p, self.pos_emb);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let xt = g.embedding(te, tokens);
        let xp = g.embedding(pe, &positions);
        let mut x = g.add(xt, xp);
        let mut resid = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let (g1, b1) = (g.param(p, b.ln1_g), g.param(p, b.ln1_b));
            let h = g.layernorm(x, g1, b1);
            let (wq, bq) = (g.param(p, b.w_qkv), g.param(p, b.b_qkv));
            let qkv = g.matmul(h, wq);
            let qkv = g.add_row(qkv, bq);
            let a = g.causal_attention(qkv, batch, seq, self.cfg.n_heads);
            let (wo, bo) = (g.param(p, b.w_o), g.param(p, b.b_o));
            let o = g.matmul(a, wo);
            let o = g.add_row(o, bo);
            x = g.add(x, o);
            let (g2, b2) = (g.param(p, b.ln2_g), g.param(p, b.ln2_b));
            let h = g.layernorm(x, g2, b2);
            let (wi, bi) = (g.param(p, b.w_in), g.param(p, b.b_in));
            let m = g.matmul(h, wi);
            let m = g.add_row(m, bi);
            let m = g.gelu(m);
            let (wm, bm) = (g.param(p, b.w_out), g.param(p, b.b_out));
            let m = g.matmul(m, wm);
            let m = g.add_row(m, bm);
            x = g.add(x, m);
            if let Some(pt) = patch.filter(|pt| pt.layer == l) {
                assert_eq!(pt.delta.len(), d, "steering delta must have d_model entries");
                let mut add = vec![0.0f32; batch * seq * d];
                for &r in &pt.rows {
                    add[r * d..(r + 1) * d].iter_mut().zip(pt.delta).for_each(|(a, &v)| *a += v);
                }
                let c = g.input(Tensor::new(&[batch * seq, d], add));
                x = g.add(x, c);
            }
            resid.push(x);
        }
        let (gf, bf) = (g.param(p, self.lnf_g), g.param(p, self.lnf_b));
        let h = g.layernorm(x, gf, bf);
        let (wu, bu) = (g.param(p, self.w_u), g.param(p, self.b_u));
        let logits = g.matmul(h, wu);
        let logits = g.add_row(logits, bu);
        Forward { logits, resid }
    }

    /// Logits `[seq, vocab]` for one sequence.
    pub fn logits(&self, tokens: &[usize]) -> Tensor<f32> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, tokens, 1, tokens.len(), None);
        g.value(f.logits).clone()
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let header = serde_json::json!({ "config": self.cfg, "meta": meta });
        io::write_checkpoint(path, LM_MAGIC, &header, &io::store_tensors(&self.params))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (header, tensors): (serde_json::Value, _) = io::read_checkpoint(path, LM_MAGIC)?;
        let cfg: LmConfig = serde_json::from_value(header["config"].clone())?;
        let mut lm = Self::new(cfg, 0)?;
        io::load_into_store(path, &mut lm.params, tensors)?;
        Ok((lm, header["meta"].clone()))
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Samples `n` sequences of `len` tokens, flattened.
fn sample_batch<R: rand::Rng>(spec: &CompositeSpec, n: usize, len: usize, r: &mut R) -> Vec<Vec<usize>> {
    (0..n).map(|_| spec.sample_path_with(len, r).tokens).collect()
}

fn split_io(seqs: &[Vec<usize>], ctx: usize) -> (Vec<usize>, Vec<usize>) {
    let mut inp = Vec::with_capacity(seqs.len() * ctx);
    let mut tgt = Vec::with_capacity(seqs.len() * ctx);
    for s in seqs {
        inp.extend_from_slice(&s[..ctx]);
        tgt.extend_from_slice(&s[1..=ctx]);
    }
    (inp, tgt)
}

/// Top-1 next-token accuracy over `n_seqs` fresh sequences from `seed`.
pub fn heldout_accuracy(lm: &Lm, spec: &CompositeSpec, n_seqs: usize, seed: u64) -> f64 {
    let ctx = lm.cfg.context_length;
    let mut r = rng::seeded(seed);
    let seqs = sample_batch(spec, n_seqs, ctx + 1, &mut r);
    accuracy_on(lm, &seqs)
}

/// Top-1 accuracy of next-token prediction on fixed sequences of length `ctx + 1`.
pub fn accuracy_on(lm: &Lm, seqs: &[Vec<usize>]) -> f64 {
    let ctx = lm.cfg.context_length;
    let v = lm.cfg.vocab;
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in seqs.chunks(128) {
        let (inp, tgt) = split_io(chunk, ctx);
        let mut g = Graph::new();
        let f = lm.forward(&mut g, &inp, chunk.len(), ctx, None);
        let logits = g.value(f.logits).data();
        for (i, &t) in tgt.iter().enumerate() {
            correct += usize::from(argmax(&logits[i * v..(i + 1) * v]) == t);
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

fn lr_at(cfg: &LmConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f64;
    let prog = ((step - cfg.warmup) as f64 / span).min(1.0);
    let floor = 0.1;
    cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * prog).cos()))
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub(crate) fn clip_grad_norm(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Trains on freshly sampled sequences every step.
pub fn train_lm(spec: &CompositeSpec, cfg: &LmConfig, seed: u64) -> Result<(Lm, TrainMetrics)> {
    train_lm_with(spec, cfg, seed, |_, _| {})
}

/// As [`train_lm`], calling `progress(step, loss)` after every step.
pub fn train_lm_with(
    spec: &CompositeSpec,
    cfg: &LmConfig,
    seed: u64,
    mut progress: impl FnMut(usize, f32),
) -> Result<(Lm, TrainMetrics)> {
    cfg.validate()?;
    if cfg.vocab != spec.vocab_size() {
        return Err(Error::invalid(format!("LM vocab {} != process vocabulary {}", cfg.vocab, spec.vocab_size())));
    }
    let mut lm = Lm::new(cfg.clone(), rng::derive_seed(seed, "lm-init"))?;
    let eval_seed = rng::derive_seed(seed, "lm-eval");
    let initial_accuracy = heldout_accuracy(&lm, spec, cfg.eval_sequences, eval_seed);
    let mut data_rng = rng::stream(seed, "lm-data");
    let opt = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
    let ctx = cfg.context_length;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seqs = sample_batch(spec, cfg.batch, ctx + 1, &mut data_rng);
        let (inp, tgt) = split_io(&seqs, ctx);
        let loss = train_step(&mut lm, &opt, &inp, &tgt, cfg.batch, lr_at(cfg, step)).map_err(|source| Error::Training { step, source })?;
        losses.push(loss);
        progress(step, loss);
    }
    let final_accuracy = heldout_accuracy(&lm, spec, cfg.eval_sequences, eval_seed);
    Ok((lm, TrainMetrics { losses, initial_accuracy, final_accuracy, steps: cfg.steps }))
}

/// One optimizer step on a prepared batch; returns the loss.
pub fn train_step(lm: &mut Lm, opt: &AdamW, inp: &[usize], tgt: &[usize], batch: usize, lr: f64) -> Result<f32, belief_nn::NnError> {
    let seq = inp.len() / batch;
    let mut g = Graph::new();
    let f = lm.forward(&mut g, inp, batch, seq, None);
    let loss = g.cross_entropy(f.logits, tgt);
    g.backward(loss)?;
    lm.params.zero_grad();
    g.accumulate_param_grads(&mut lm.params);
    clip_grad_norm(&mut lm.params, lm.cfg.grad_clip);
    opt.step_with_lr(&mut lm.params, lr);
    Ok(g.value(loss).data()[0])
}

/// Post-block residual vectors for one layer with aligned ground truth.
#[derive(Debug, Clone)]
pub struct ResidualCapture {
    pub layer: usize,
    /// `(sequence id, position)` per row.
    pub positions: Vec<(usize, usize)>,
    /// `[n_rows, d_model]`.
    pub vectors: Tensor<f32>,
    /// Token at each captured row.
    pub tokens: Vec<usize>,
    /// `beliefs[row][component]` after observing the row's token.
    pub beliefs: Vec<Vec<BeliefPoint>>,
}

/// Runs `sequences` (each at most the context length) and captures the
/// residual stream after block `layer` at every position.
pub fn capture_residual(lm: &Lm, spec: &CompositeSpec, sequences: &[Vec<usize>], layer: usize) -> Result<ResidualCapture> {
    if layer >= lm.cfg.n_layers {
        return Err(Error::invalid(format!("layer {layer} out of range for {} layers", lm.cfg.n_layers)));
    }
    let d = lm.cfg.d_model;
    let mut data = Vec::new();
    let mut positions = Vec::new();
    let mut tokens = Vec::new();
    let mut beliefs = Vec::new();
    for (sid, s) in sequences.iter().enumerate() {
        if s.is_empty() || s.len() > lm.cfg.context_length {
            return Err(Error::invalid(format!("sequence {sid} has length {}", s.len())));
        }
        if let Some(&t) = s.iter().find(|&&t| t >= lm.cfg.vocab) {
            return Err(Error::invalid(format!("token {t} out of vocabulary")));
        }
    }
    // group equal-length sequences into batches
    for chunk in sequences.chunks(128) {
        let len = chunk[0].len();
        if chunk.iter().all(|s| s.len() == len) {
            let flat: Vec<usize> = chunk.iter().flatten().copied().collect();
            let mut g = Graph::new();
            let f = lm.forward(&mut g, &flat, chunk.len(), len, None);
            data.extend_from_slice(g.value(f.resid[layer]).data());
        } else {
            for s in chunk {
                let mut g = Graph::new();
                let f = lm.forward(&mut g, s, 1, s.len(), None);
                data.extend_from_slice(g.value(f.resid[layer]).data());
            }
        }
    }
    for (sid, s) in sequences.iter().enumerate() {
        let b = spec.filter(s)?;
        for (t, (&tok, bt)) in s.iter().zip(b).enumerate() {
            positions.push((sid, t));
            tokens.push(tok);
            beliefs.push(bt);
        }
    }
    let n = positions.len();
    debug_assert_eq!(data.len(), n * d);
    let vectors = if n == 0 { Tensor::zeros(&[1, d]) } else { Tensor::new(&[n, d], data) };
    Ok(ResidualCapture { layer, positions, vectors, tokens, beliefs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum SteerMode {
    /// Patch only the trigger position.
    Type1,
    /// Patch the trigger and the first `k_sustain` generated positions.
    Type2,
    /// Patch the trigger and every generated position.
    Type3,
}

impl SteerMode {
    pub const ALL: [SteerMode; 3] = [SteerMode::Type1, SteerMode::Type2, SteerMode::Type3];

    pub fn name(self) -> &'static str {
        match self {
            SteerMode::Type1 => "type1",
            SteerMode::Type2 => "type2",
            SteerMode::Type3 => "type3",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SteerRequest<'a> {
    pub layer: usize,
    pub delta: &'a [f32],
    pub scale: f32,
    pub mode: SteerMode,
    pub k_sustain: usize,
    pub length: usize,
}

/// Greedy continuation of `prompt` with the residual after block `layer`
/// patched by `scale * delta`. The trigger is the last prompt position.
pub fn generate_steered(lm: &Lm, prompt: &[usize], req: &SteerRequest) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    if prompt.len() + req.length > lm.cfg.context_length + 1 {
        return Err(Error::invalid(format!(
            "prompt {} + continuation {} exceeds context {}",
            prompt.len(),
            req.length,
            lm.cfg.context_length
        )));
    }
    if req.layer >= lm.cfg.n_layers {
        return Err(Error::invalid(format!("layer {} out of range", req.layer)));
    }
    if req.delta.len() != lm.cfg.d_model {
        return Err(Error::invalid(format!("delta has {} entries, expected {}", req.delta.len(), lm.cfg.d_model)));
    }
    if req.mode == SteerMode::Type2 && req.k_sustain == 0 {
        return Err(Error::invalid("type2 steering needs k_sustain >= 1"));
    }
    let scaled: Vec<f32> = req.delta.iter().map(|&v| v * req.scale).collect();
    let trigger = prompt.len() - 1;
    let mut toks = prompt.to_vec();
    let mut out = Vec::with_capacity(req.length);
    for _ in 0..req.length {
        let len = toks.len();
        let last_patched = match req.mode {
            SteerMode::Type1 => trigger,
            SteerMode::Type2 => trigger + req.k_sustain,
            SteerMode::Type3 => usize::MAX,
        };
        let rows: Vec<usize> = (trigger..len).filter(|&r| r <= last_patched).collect();
        let patch = Patch { layer: req.layer, delta: &scaled, rows };
        let mut g = Graph::new();
        let f = lm.forward(&mut g, &toks, 1, len, Some(&patch));
        let v = lm.cfg.vocab;
        let logits = g.value(f.logits).data();
        let next = argmax(&logits[(len - 1) * v..len * v]);
        out.push(next);
        toks.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(vocab: usize) -> LmConfig {
        LmConfig { d_model: 16, n_heads: 2, n_layers: 2, context_length: 8, vocab, ..LmConfig::default() }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = LmConfig { d_model: 10, n_heads: 4, ..LmConfig::default() };
        assert!(Lm::new(cfg, 0).is_err());
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let lm = Lm::new(tiny_cfg(7), 3).unwrap();
        let a = lm.logits(&[1, 2, 3, 4, 5]);
        let b = lm.logits(&[1, 2, 3, 6, 0]);
        let v = 7;
        assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
        assert_ne!(&a.data()[3 * v..], &b.data()[3 * v..]);
    }

    #[test]
    fn zero_delta_is_bitwise_noop() {
        let lm = Lm::new(tiny_cfg(7), 4).unwrap();
        let delta = vec![0.0f32; 16];
        let plain = generate_steered(
            &lm,
            &[1, 2, 3],
            &SteerRequest { layer: 0, delta: &delta, scale: 5.0, mode: SteerMode::Type3, k_sustain: 1, length: 5 },
        )
        .unwrap();
        let ones = vec![1.0f32; 16];
        let zero_scale = generate_steered(
            &lm,
            &[1, 2, 3],
            &SteerRequest { layer: 0, delta: &ones, scale: 0.0, mode: SteerMode::Type3, k_sustain: 1, length: 5 },
        )
        .unwrap();
        assert_eq!(plain, zero_scale);
        let mut g = Graph::new();
        let f0 = lm.forward(&mut g, &[1, 2, 3], 1, 3, None);
        let p = Patch { layer: 1, delta: &delta, rows: vec![0, 1, 2] };
        let f1 = lm.forward(&mut g, &[1, 2, 3], 1, 3, Some(&p));
        assert_eq!(g.value(f0.logits).data(), g.value(f1.logits).data());
    }

    #[test]
    fn type1_and_type3_share_first_token() {
        let lm = Lm::new(tiny_cfg(7), 5).unwrap();
        let delta: Vec<f32> = (0..16).map(|i| (i as f32 * 0.7).sin() * 3.0).collect();
        let mk = |mode| SteerRequest { layer: 0, delta: &delta, scale: 4.0, mode, k_sustain: 2, length: 5 };
        let t1 = generate_steered(&lm, &[1, 2], &mk(SteerMode::Type1)).unwrap();
        let t3 = generate_steered(&lm, &[1, 2], &mk(SteerMode::Type3)).unwrap();
        assert_eq!(t1[0], t3[0]);
    }

    #[test]
    fn type2_requires_sustain() {
        let lm = Lm::new(tiny_cfg(7), 5).unwrap();
        let delta = vec![0.0f32; 16];
        let req = SteerRequest { layer: 0, delta: &delta, scale: 1.0, mode: SteerMode::Type2, k_sustain: 0, length: 2 };
        assert!(generate_steered(&lm, &[1], &req).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let lm = Lm::new(tiny_cfg(7), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.bin");
        lm.save(&path, &serde_json::json!({"seed": 6})).unwrap();
        let (back, meta) = Lm::load(&path).unwrap();
        assert_eq!(meta["seed"], 6);
        assert_eq!(back.logits(&[1, 2, 3]), lm.logits(&[1, 2, 3]));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Lm::load(&path), Err(Error::Format { .. })));
    }
}
