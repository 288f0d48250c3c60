//! Compact autoregressive scorer.
//!
//! Sequence layout: one slot per sampled frame (a learned linear projection of
//! the frame features), one task slot standing in for the rendered prompt,
//! then ordinary tokens. Blocks are pre-norm causal self-attention plus a GELU
//! MLP. Every block linear and the output projection can carry a low-rank
//! adapter; an optional MLP head maps the hidden state at `<LABEL_1>` to five
//! grade logits.
//!
//! Forward and backward passes are written out by hand in f64.

mod checkpoint;
mod decode;
pub mod linalg;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, BlockShape,
    CheckpointHeader,
};
pub use decode::{
    constrained_argmax, grade_score_from_logits, greedy_decode_with, DecodeFormat, Decoded,
    GradeDistribution, GRADES,
};
pub use linalg::{lora_forward, Matrix};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{TokenId, TASK};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use linalg::{acc_matmul, acc_outer, gelu, gelu_grad, matmul_wt};

const LN_EPS: f64 = 1e-5;
pub const GRADE_COUNT: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub context_limit: usize,
    pub feature_dim: usize,
    pub max_frames: usize,
    pub vocab_size: usize,
    /// Hidden width of the grade head; `None` means no head.
    pub grade_hidden: Option<usize>,
    pub lora: Option<LoraConfig>,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 256,
            context_limit: 64,
            feature_dim: 32,
            max_frames: 2,
            vocab_size: crate::codec::Vocabulary::default().len(),
            grade_hidden: None,
            lora: None,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(m.to_string()));
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads)
        {
            return fail("embed_dim must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.mlp_hidden == 0 || self.feature_dim == 0 {
            return fail("n_layers, mlp_hidden and feature_dim must be positive");
        }
        if self.max_frames == 0 || self.context_limit < self.max_frames + 2 {
            return fail("context_limit too small for the frame and task slots");
        }
        if self.vocab_size <= TASK as usize {
            return fail("vocab_size too small");
        }
        if let Some(l) = &self.lora {
            if l.r == 0 || !(0.0..1.0).contains(&l.dropout) || !l.alpha.is_finite() {
                return fail("lora needs r >= 1, dropout in [0,1) and finite alpha");
            }
        }
        if self.grade_hidden == Some(0) {
            return fail("grade_hidden must be positive");
        }
        Ok(())
    }
}

/// Which optimizer treatment a block gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Base,
    Adapter,
    GradeHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub group: Group,
    pub decay: bool,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    off: usize,
    len: usize,
}

impl Slot {
    fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len]
    }

    fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len]
    }
}

#[derive(Debug, Clone)]
struct Linear {
    inp: usize,
    out: usize,
    w: Slot,
    b: Option<Slot>,
    /// `(A: r x inp, B: out x r, alpha / r, dropout)`
    lora: Option<(Slot, Slot, usize, f64, f64)>,
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1: (Slot, Slot),
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: (Slot, Slot),
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Index {
    tok: Slot,
    pos: Slot,
    feat: Vec<Linear>,
    layers: Vec<LayerIdx>,
    lnf: (Slot, Slot),
    head: Linear,
    grade: Option<(Linear, Linear)>,
}

enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

struct Builder {
    blocks: Vec<BlockInfo>,
    inits: Vec<Init>,
    total: usize,
}

impl Builder {
    fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        group: Group,
        decay: bool,
        init: Init,
    ) -> Slot {
        let off = self.total;
        self.blocks.push(BlockInfo {
            name: name.to_string(),
            rows,
            cols,
            offset: off,
            group,
            decay,
        });
        self.inits.push(init);
        self.total += rows * cols;
        Slot {
            off,
            len: rows * cols,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn linear(
        &mut self,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        std: f64,
        group: Group,
        lora: Option<&LoraConfig>,
    ) -> Linear {
        let w = self.add(
            &format!("{name}.weight"),
            out,
            inp,
            group,
            true,
            Init::Normal(std),
        );
        let b = bias.then(|| self.add(&format!("{name}.bias"), 1, out, group, false, Init::Zeros));
        let lora = lora.map(|l| {
            let a = self.add(
                &format!("{name}.lora_a"),
                l.r,
                inp,
                Group::Adapter,
                true,
                Init::Normal(1.0 / (inp as f64).sqrt()),
            );
            let b = self.add(
                &format!("{name}.lora_b"),
                out,
                l.r,
                Group::Adapter,
                true,
                Init::Zeros,
            );
            (a, b, l.r, l.alpha / l.r as f64, l.dropout)
        });
        Linear {
            inp,
            out,
            w,
            b,
            lora,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScorerModel {
    cfg: ModelConfig,
    blocks: Vec<BlockInfo>,
    params: Vec<f64>,
    idx: Index,
}

/// Feature vectors for the frame slots plus the tokens that follow the task
/// slot.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub features: &'a [Vec<f64>],
    pub tokens: &'a [TokenId],
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut StreamRng),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub lm: bool,
    pub grade: bool,
}

impl Heads {
    pub const LM: Heads = Heads {
        lm: true,
        grade: false,
    };
    pub const GRADE: Heads = Heads {
        lm: false,
        grade: true,
    };
}

struct LoraCache {
    xd: Vec<f64>,
    keep: Option<Vec<f64>>,
    h: Vec<f64>,
}

struct LinCache {
    x: Vec<f64>,
    rows: usize,
    lora: Option<LoraCache>,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    q: LinCache,
    k: LinCache,
    v: LinCache,
    qv: Vec<f64>,
    kv: Vec<f64>,
    vv: Vec<f64>,
    probs: Vec<f64>,
    o: LinCache,
    ln2: LnCache,
    fc1: LinCache,
    pre: Vec<f64>,
    fc2: LinCache,
}

struct GradeCache {
    pos: usize,
    l1: LinCache,
    pre: Vec<f64>,
    l2: LinCache,
}

/// Output of a forward pass, holding what the backward pass needs.
pub struct Forward {
    /// `seq_len x vocab_size`, empty when the LM head was not requested.
    pub logits: Vec<f64>,
    pub grade_logits: Option<[f64; GRADE_COUNT]>,
    pub seq_len: usize,
    pub n_frames: usize,
    tokens: Vec<TokenId>,
    feats: Vec<LinCache>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    head: Option<LinCache>,
    grade: Option<GradeCache>,
}

impl Forward {
    pub fn logits_at(&self, pos: usize, vocab: usize) -> &[f64] {
        &self.logits[pos * vocab..(pos + 1) * vocab]
    }
}

impl ScorerModel {
    /// Builds a model and initializes it from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (blocks, inits, idx, total) = Self::layout(&cfg);
        let mut params = vec![0.0; total];
        let mut rng = rng::stream(seed, "init");
        for (block, init) in blocks.iter().zip(inits) {
            let dst = &mut params[block.range()];
            match init {
                Init::Zeros => dst.fill(0.0),
                Init::Ones => dst.fill(1.0),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("valid std");
                    dst.iter_mut().for_each(|x| *x = n.sample(&mut rng));
                }
            }
        }
        Ok(Self {
            cfg,
            blocks,
            params,
            idx,
        })
    }

    /// A model whose parameters are all zero.
    pub fn zeroed(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (blocks, _, idx, total) = Self::layout(&cfg);
        Ok(Self {
            cfg,
            blocks,
            params: vec![0.0; total],
            idx,
        })
    }

    fn layout(cfg: &ModelConfig) -> (Vec<BlockInfo>, Vec<Init>, Index, usize) {
        let d = cfg.embed_dim;
        let std = cfg.init_std;
        let out_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let lora = cfg.lora.as_ref();
        let mut b = Builder {
            blocks: Vec::new(),
            inits: Vec::new(),
            total: 0,
        };
        let tok = b.add(
            "tok_emb",
            cfg.vocab_size,
            d,
            Group::Base,
            true,
            Init::Normal(std),
        );
        let pos = b.add(
            "pos_emb",
            cfg.context_limit,
            d,
            Group::Base,
            true,
            Init::Normal(std),
        );
        let feat_std = 1.0 / (cfg.feature_dim as f64).sqrt();
        let feat = (0..cfg.max_frames)
            .map(|s| {
                b.linear(
                    &format!("frame{s}"),
                    cfg.feature_dim,
                    d,
                    true,
                    feat_std,
                    Group::Base,
                    None,
                )
            })
            .collect();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("layer{l}");
                LayerIdx {
                    ln1: (
                        b.add(
                            &format!("{p}.ln1.gain"),
                            1,
                            d,
                            Group::Base,
                            false,
                            Init::Ones,
                        ),
                        b.add(
                            &format!("{p}.ln1.bias"),
                            1,
                            d,
                            Group::Base,
                            false,
                            Init::Zeros,
                        ),
                    ),
                    q: b.linear(&format!("{p}.attn.q"), d, d, false, std, Group::Base, lora),
                    k: b.linear(&format!("{p}.attn.k"), d, d, false, std, Group::Base, lora),
                    v: b.linear(&format!("{p}.attn.v"), d, d, false, std, Group::Base, lora),
                    o: b.linear(
                        &format!("{p}.attn.o"),
                        d,
                        d,
                        false,
                        out_std,
                        Group::Base,
                        lora,
                    ),
                    ln2: (
                        b.add(
                            &format!("{p}.ln2.gain"),
                            1,
                            d,
                            Group::Base,
                            false,
                            Init::Ones,
                        ),
                        b.add(
                            &format!("{p}.ln2.bias"),
                            1,
                            d,
                            Group::Base,
                            false,
                            Init::Zeros,
                        ),
                    ),
                    fc1: b.linear(
                        &format!("{p}.mlp.fc1"),
                        d,
                        cfg.mlp_hidden,
                        true,
                        std,
                        Group::Base,
                        lora,
                    ),
                    fc2: b.linear(
                        &format!("{p}.mlp.fc2"),
                        cfg.mlp_hidden,
                        d,
                        true,
                        out_std,
                        Group::Base,
                        lora,
                    ),
                }
            })
            .collect();
        let lnf = (
            b.add("ln_f.gain", 1, d, Group::Base, false, Init::Ones),
            b.add("ln_f.bias", 1, d, Group::Base, false, Init::Zeros),
        );
        let head = b.linear("lm_head", d, cfg.vocab_size, false, std, Group::Base, lora);
        let grade = cfg.grade_hidden.map(|g| {
            (
                b.linear(
                    "grade.fc1",
                    d,
                    g,
                    true,
                    1.0 / (d as f64).sqrt(),
                    Group::GradeHead,
                    None,
                ),
                b.linear(
                    "grade.fc2",
                    g,
                    GRADE_COUNT,
                    true,
                    std,
                    Group::GradeHead,
                    None,
                ),
            )
        });
        let idx = Index {
            tok,
            pos,
            feat,
            layers,
            lnf,
            head,
            grade,
        };
        (b.blocks, b.inits, idx, b.total)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn block(&self, name: &str) -> Option<&BlockInfo> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn has_grade_head(&self) -> bool {
        self.idx.grade.is_some()
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    /// Total positions for an input: frame slots, task slot, tokens.
    pub fn seq_len(input: &ModelInput<'_>) -> usize {
        input.features.len() + 1 + input.tokens.len()
    }

    fn check_input(&self, input: &ModelInput<'_>) -> Result<()> {
        let nf = input.features.len();
        if nf == 0 || nf > self.cfg.max_frames {
            return Err(Error::invalid(format!(
                "{nf} frames given, model takes 1..={}",
                self.cfg.max_frames
            )));
        }
        if let Some(f) = input
            .features
            .iter()
            .find(|f| f.len() != self.cfg.feature_dim)
        {
            return Err(Error::invalid(format!(
                "feature vector of length {}, expected {}",
                f.len(),
                self.cfg.feature_dim
            )));
        }
        let t = Self::seq_len(input);
        if t > self.cfg.context_limit {
            return Err(Error::invalid(format!(
                "sequence of {t} positions exceeds context limit {}",
                self.cfg.context_limit
            )));
        }
        if let Some(&bad) = input
            .tokens
            .iter()
            .find(|&&t| t as usize >= self.cfg.vocab_size)
        {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        input: &ModelInput<'_>,
        heads: Heads,
        mut mode: Mode<'_>,
    ) -> Result<Forward> {
        self.check_input(input)?;
        let p = &self.params;
        let d = self.cfg.embed_dim;
        let nf = input.features.len();
        let t_len = Self::seq_len(input);
        let mut tokens = Vec::with_capacity(t_len - nf);
        tokens.push(TASK);
        tokens.extend_from_slice(input.tokens);

        let mut x = vec![0.0; t_len * d];
        let mut feats = Vec::with_capacity(nf);
        for (s, f) in input.features.iter().enumerate() {
            let (y, c) = linear_fwd(p, &self.idx.feat[s], f, 1, &mut mode);
            x[s * d..(s + 1) * d].copy_from_slice(&y);
            feats.push(c);
        }
        let tok_emb = self.idx.tok.of(p);
        for (j, &tok) in tokens.iter().enumerate() {
            let row = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
            x[(nf + j) * d..(nf + j + 1) * d].copy_from_slice(row);
        }
        let pos_emb = self.idx.pos.of(p);
        x.iter_mut().zip(pos_emb).for_each(|(xi, pi)| *xi += pi);

        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for li in &self.idx.layers {
            let (h, ln1) = ln_fwd(p, li.ln1, &x, d);
            let (qv, q) = linear_fwd(p, &li.q, &h, t_len, &mut mode);
            let (kv, k) = linear_fwd(p, &li.k, &h, t_len, &mut mode);
            let (vv, v) = linear_fwd(p, &li.v, &h, t_len, &mut mode);
            let (att, probs) = attention_fwd(&qv, &kv, &vv, t_len, d, self.cfg.n_heads);
            let (ao, o) = linear_fwd(p, &li.o, &att, t_len, &mut mode);
            x.iter_mut().zip(&ao).for_each(|(a, b)| *a += b);

            let (h2, ln2) = ln_fwd(p, li.ln2, &x, d);
            let (pre, fc1) = linear_fwd(p, &li.fc1, &h2, t_len, &mut mode);
            let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let (mo, fc2) = linear_fwd(p, &li.fc2, &act, t_len, &mut mode);
            x.iter_mut().zip(&mo).for_each(|(a, b)| *a += b);
            layers.push(LayerCache {
                ln1,
                q,
                k,
                v,
                qv,
                kv,
                vv,
                probs,
                o,
                ln2,
                fc1,
                pre,
                fc2,
            });
        }
        let (hf, lnf) = ln_fwd(p, self.idx.lnf, &x, d);

        let (logits, head) = if heads.lm {
            let (l, c) = linear_fwd(p, &self.idx.head, &hf, t_len, &mut mode);
            (l, Some(c))
        } else {
            (Vec::new(), None)
        };

        let (grade_logits, grade) = if heads.grade {
            let (g1, g2) = self
                .idx
                .grade
                .as_ref()
                .ok_or_else(|| Error::invalid("model has no grade head"))?;
            let pos = nf + 1 + label_position(input.tokens)?;
            let hvec = &hf[pos * d..(pos + 1) * d];
            let (pre, l1) = linear_fwd(p, g1, hvec, 1, &mut mode);
            let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let (gl, l2) = linear_fwd(p, g2, &act, 1, &mut mode);
            let mut arr = [0.0; GRADE_COUNT];
            arr.copy_from_slice(&gl);
            (Some(arr), Some(GradeCache { pos, l1, pre, l2 }))
        } else {
            (None, None)
        };

        Ok(Forward {
            logits,
            grade_logits,
            seq_len: t_len,
            n_frames: nf,
            tokens,
            feats,
            layers,
            lnf,
            head,
            grade,
        })
    }

    /// Accumulates parameter gradients into `grads` given upstream gradients
    /// for the LM logits and/or the grade logits.
    pub fn backward(
        &self,
        fwd: &Forward,
        dlogits: Option<&[f64]>,
        dgrade: Option<&[f64; GRADE_COUNT]>,
        grads: &mut [f64],
    ) {
        assert_eq!(grads.len(), self.params.len());
        let p = &self.params;
        let d = self.cfg.embed_dim;
        let t_len = fwd.seq_len;
        let mut dhf = vec![0.0; t_len * d];

        if let (Some(dl), Some(hc)) = (dlogits, fwd.head.as_ref()) {
            let dx = linear_bwd(p, grads, &self.idx.head, hc, dl);
            dhf.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        if let (Some(dg), Some(gc), Some((g1, g2))) =
            (dgrade, fwd.grade.as_ref(), self.idx.grade.as_ref())
        {
            let dact = linear_bwd(p, grads, g2, &gc.l2, dg);
            let dpre: Vec<f64> = dact
                .iter()
                .zip(&gc.pre)
                .map(|(g, &z)| g * gelu_grad(z))
                .collect();
            let dh = linear_bwd(p, grads, g1, &gc.l1, &dpre);
            dhf[gc.pos * d..(gc.pos + 1) * d]
                .iter_mut()
                .zip(&dh)
                .for_each(|(a, b)| *a += b);
        }

        let mut dx = ln_bwd(p, grads, self.idx.lnf, &fwd.lnf, &dhf, d);

        for (li, lc) in self.idx.layers.iter().zip(&fwd.layers).rev() {
            let dact = linear_bwd(p, grads, &li.fc2, &lc.fc2, &dx);
            let dpre: Vec<f64> = dact
                .iter()
                .zip(&lc.pre)
                .map(|(g, &z)| g * gelu_grad(z))
                .collect();
            let dh2 = linear_bwd(p, grads, &li.fc1, &lc.fc1, &dpre);
            let dres = ln_bwd(p, grads, li.ln2, &lc.ln2, &dh2, d);
            dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);

            let datt = linear_bwd(p, grads, &li.o, &lc.o, &dx);
            let (dq, dk, dv) = attention_bwd(
                &lc.qv,
                &lc.kv,
                &lc.vv,
                &lc.probs,
                &datt,
                t_len,
                d,
                self.cfg.n_heads,
            );
            let mut dh = linear_bwd(p, grads, &li.q, &lc.q, &dq);
            for (a, b) in dh.iter_mut().zip(linear_bwd(p, grads, &li.k, &lc.k, &dk)) {
                *a += b;
            }
            for (a, b) in dh.iter_mut().zip(linear_bwd(p, grads, &li.v, &lc.v, &dv)) {
                *a += b;
            }
            let dres = ln_bwd(p, grads, li.ln1, &lc.ln1, &dh, d);
            dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
        }

        self.idx
            .pos
            .of_mut(grads)
            .iter_mut()
            .zip(&dx)
            .for_each(|(g, v)| *g += v);
        let nf = fwd.n_frames;
        let dtok = self.idx.tok.of_mut(grads);
        for (j, &tok) in fwd.tokens.iter().enumerate() {
            let src = &dx[(nf + j) * d..(nf + j + 1) * d];
            let dst = &mut dtok[tok as usize * d..(tok as usize + 1) * d];
            dst.iter_mut().zip(src).for_each(|(g, v)| *g += v);
        }
        for (s, fc) in fwd.feats.iter().enumerate() {
            linear_bwd(p, grads, &self.idx.feat[s], fc, &dx[s * d..(s + 1) * d]);
        }
    }
}

fn label_position(tokens: &[TokenId]) -> Result<usize> {
    tokens
        .iter()
        .position(|&t| t == crate::codec::LABEL_1)
        .ok_or_else(|| Error::invalid("context has no <LABEL_1> token"))
}

fn linear_fwd(
    p: &[f64],
    lin: &Linear,
    x: &[f64],
    rows: usize,
    mode: &mut Mode<'_>,
) -> (Vec<f64>, LinCache) {
    let mut y = matmul_wt(x, lin.w.of(p), rows, lin.inp, lin.out);
    if let Some(b) = lin.b {
        let bias = b.of(p);
        y.chunks_exact_mut(lin.out)
            .for_each(|r| r.iter_mut().zip(bias).for_each(|(a, b)| *a += b));
    }
    let lora = lin.lora.map(|(a, b, r, scale, rate)| {
        let keep = match mode {
            Mode::Train(rng) if rate > 0.0 => {
                let s = 1.0 / (1.0 - rate);
                Some(
                    (0..x.len())
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { s })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let xd: Vec<f64> = match &keep {
            Some(k) => x.iter().zip(k).map(|(a, b)| a * b).collect(),
            None => x.to_vec(),
        };
        let h = matmul_wt(&xd, a.of(p), rows, lin.inp, r);
        let u = matmul_wt(&h, b.of(p), rows, r, lin.out);
        y.iter_mut().zip(&u).for_each(|(yi, ui)| *yi += scale * ui);
        LoraCache { xd, keep, h }
    });
    (
        y,
        LinCache {
            x: x.to_vec(),
            rows,
            lora,
        },
    )
}

fn linear_bwd(p: &[f64], g: &mut [f64], lin: &Linear, c: &LinCache, dy: &[f64]) -> Vec<f64> {
    acc_outer(lin.w.of_mut(g), dy, &c.x, lin.inp, lin.out);
    if let Some(b) = lin.b {
        let gb = b.of_mut(g);
        dy.chunks_exact(lin.out)
            .for_each(|r| gb.iter_mut().zip(r).for_each(|(a, b)| *a += b));
    }
    let mut dx = vec![0.0; c.rows * lin.inp];
    acc_matmul(&mut dx, dy, lin.w.of(p), lin.inp, lin.out);
    if let (Some((a, b, r, scale, _)), Some(lc)) = (lin.lora, c.lora.as_ref()) {
        let sdy: Vec<f64> = dy.iter().map(|v| v * scale).collect();
        acc_outer(b.of_mut(g), &sdy, &lc.h, r, lin.out);
        let mut dh = vec![0.0; c.rows * r];
        acc_matmul(&mut dh, &sdy, b.of(p), r, lin.out);
        acc_outer(a.of_mut(g), &dh, &lc.xd, lin.inp, r);
        let mut dxd = vec![0.0; c.rows * lin.inp];
        acc_matmul(&mut dxd, &dh, a.of(p), lin.inp, r);
        match &lc.keep {
            Some(k) => dx
                .iter_mut()
                .zip(dxd.iter().zip(k))
                .for_each(|(a, (b, m))| *a += b * m),
            None => dx.iter_mut().zip(&dxd).for_each(|(a, b)| *a += b),
        }
    }
    dx
}

fn ln_fwd(p: &[f64], (gain, bias): (Slot, Slot), x: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    let g = gain.of(p);
    let b = bias.of(p);
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = g[i] * h + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_bwd(
    p: &[f64],
    grads: &mut [f64],
    (gain, bias): (Slot, Slot),
    c: &LnCache,
    dy: &[f64],
    d: usize,
) -> Vec<f64> {
    let g = gain.of(p);
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            let dxh = dyr[i] * g[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dx[r * d + i] = c.rstd[r] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    gain.of_mut(grads)
        .iter_mut()
        .zip(&dg)
        .for_each(|(a, b)| *a += b);
    bias.of_mut(grads)
        .iter_mut()
        .zip(&db)
        .for_each(|(a, b)| *a += b);
    dx
}

fn attention_fwd(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..t {
            let qi = &q[i * d..(i + 1) * d][hs.clone()];
            let row = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
            for (j, s) in row.iter_mut().enumerate() {
                *s = linalg::dot(qi, &k[j * d..(j + 1) * d][hs.clone()]) * scale;
            }
            linalg::softmax_in_place(row);
            let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &pj) in row.iter().enumerate() {
                linalg::axpy(oi, pj, &v[j * d + h * dh..j * d + (h + 1) * dh]);
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_bwd(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let row = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
            let doi = &dout[i * d + off..i * d + off + dh];
            let mut weighted = 0.0;
            for (j, &pj) in row.iter().enumerate() {
                dp[j] = linalg::dot(doi, &v[j * d + off..j * d + off + dh]);
                weighted += pj * dp[j];
                linalg::axpy(&mut dv[j * d + off..j * d + off + dh], pj, doi);
            }
            for (j, &pj) in row.iter().enumerate() {
                let ds = pj * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let (kj, qi) = (
                    &k[j * d + off..j * d + off + dh],
                    &q[i * d + off..i * d + off + dh],
                );
                linalg::axpy(&mut dq[i * d + off..i * d + off + dh], ds, kj);
                linalg::axpy(&mut dk[j * d + off..j * d + off + dh], ds, qi);
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests;
