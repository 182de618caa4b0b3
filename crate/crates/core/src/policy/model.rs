//! Decoder-only transformer backbone with hand-written forward and backward
//! passes over a flat `Vec<f64>` parameter vector.
//!
//! The network is small enough (two layers, 64-dim residual stream) that an
//! explicit position-at-a-time forward with a full activation cache is both
//! the training path and the decoding path: there is exactly one forward
//! implementation, so incremental decoding is bit-identical to scoring a
//! whole sequence.
//!
//! Architecture per layer: RMSNorm → causal multi-head attention → residual,
//! RMSNorm → GELU MLP (4× expansion) → residual; a final RMSNorm produces
//! the hidden state read by the head. Norms carry no learned parameters.

use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::rng_from;
use crate::vocab::Vocabulary;

/// Numerical floor inside RMSNorm.
pub const RMS_EPS: f64 = 1e-5;
/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Model dimensions. [`ModelConfig::default`] is the reference configuration
/// used everywhere in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: Vocabulary::new().size(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// What sits on top of the backbone's final hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `vocab_size × d_model` logit projection.
    LanguageModel,
    /// Linear scalar head: `d_model` weights plus a bias.
    Scalar,
}

/// Offsets of every tensor inside the flat parameter vector.
///
/// Order: token embeddings, position embeddings, then per layer
/// `wq, wk, wv, wo, w1, w2`, then the head. All matrices are row-major
/// `[out, in]` so `y = W·x` via [`math::matvec`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub cfg: ModelConfig,
    pub head_kind: HeadKind,
    d2: usize,
    layer_base: usize,
    backbone_len: usize,
    total_len: usize,
}

impl Layout {
    pub fn new(cfg: ModelConfig, head_kind: HeadKind) -> Layout {
        let d = cfg.d_model;
        let d2 = d * d;
        let layer_base = cfg.vocab_size * d + cfg.context_len * d;
        let backbone_len = layer_base + cfg.n_layers * 12 * d2;
        let head_len = match head_kind {
            HeadKind::LanguageModel => cfg.vocab_size * d,
            HeadKind::Scalar => d + 1,
        };
        Layout {
            cfg,
            head_kind,
            d2,
            layer_base,
            backbone_len,
            total_len: backbone_len + head_len,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Parameters shared between a language-model head and a scalar head.
    pub fn backbone_len(&self) -> usize {
        self.backbone_len
    }

    pub fn wte(&self) -> Range<usize> {
        0..self.cfg.vocab_size * self.cfg.d_model
    }

    pub fn wpe(&self) -> Range<usize> {
        let start = self.cfg.vocab_size * self.cfg.d_model;
        start..start + self.cfg.context_len * self.cfg.d_model
    }

    fn layer(&self, l: usize, slot: usize, len: usize) -> Range<usize> {
        let start = self.layer_base + l * 12 * self.d2 + slot * self.d2;
        start..start + len
    }

    pub fn wq(&self, l: usize) -> Range<usize> {
        self.layer(l, 0, self.d2)
    }

    pub fn wk(&self, l: usize) -> Range<usize> {
        self.layer(l, 1, self.d2)
    }

    pub fn wv(&self, l: usize) -> Range<usize> {
        self.layer(l, 2, self.d2)
    }

    pub fn wo(&self, l: usize) -> Range<usize> {
        self.layer(l, 3, self.d2)
    }

    /// MLP up-projection, `4d × d`.
    pub fn w1(&self, l: usize) -> Range<usize> {
        self.layer(l, 4, 4 * self.d2)
    }

    /// MLP down-projection, `d × 4d`.
    pub fn w2(&self, l: usize) -> Range<usize> {
        self.layer(l, 8, 4 * self.d2)
    }

    pub fn head(&self) -> Range<usize> {
        self.backbone_len..self.total_len
    }
}

/// Draw fresh parameters: N(0, [`INIT_STD`]) everywhere except the residual
/// write-back projections `wo`/`w2`, which are shrunk by 1/√(2·layers) so the
/// residual stream stays near the embeddings at step 0 while every position
/// still influences later hidden states, and a scalar head, which starts at
/// zero.
pub fn init_params(layout: &Layout, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed, "model.init", &[]);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let residual_std = INIT_STD / (2.0 * layout.cfg.n_layers as f64).sqrt();
    let residual = Normal::new(0.0, residual_std).expect("valid std");
    let mut p = vec![0.0; layout.total_len()];
    let mut fill = |range: Range<usize>, dist: Normal<f64>, p: &mut Vec<f64>| {
        for i in range {
            p[i] = dist.sample(&mut rng);
        }
    };
    fill(layout.wte(), normal, &mut p);
    fill(layout.wpe(), normal, &mut p);
    for l in 0..layout.cfg.n_layers {
        fill(layout.wq(l), normal, &mut p);
        fill(layout.wk(l), normal, &mut p);
        fill(layout.wv(l), normal, &mut p);
        fill(layout.wo(l), residual, &mut p);
        fill(layout.w1(l), normal, &mut p);
        fill(layout.w2(l), residual, &mut p);
    }
    if layout.head_kind == HeadKind::LanguageModel {
        fill(layout.head(), normal, &mut p);
    }
    p
}

/// Per-layer activation tape for one sequence.
#[derive(Debug, Clone, Default)]
struct LayerCache {
    attn_in: Vec<f64>,  // len × d, residual stream entering the block
    ln1_xn: Vec<f64>,   // len × d, normed attention input
    ln1_rinv: Vec<f64>, // len
    q: Vec<f64>,        // len × d
    k: Vec<f64>,        // len × d
    v: Vec<f64>,        // len × d
    aw: Vec<f64>,       // ragged: position p holds n_heads × (p+1) weights
    ctx: Vec<f64>,      // len × d, attention mix before wo
    mlp_in: Vec<f64>,   // len × d
    ln2_xn: Vec<f64>,   // len × d
    ln2_rinv: Vec<f64>, // len
    hpre: Vec<f64>,     // len × 4d, MLP pre-activation
    thu: Vec<f64>,      // len × 4d, tanh(u) saved from GELU
    hact: Vec<f64>,     // len × 4d, GELU output
}

/// Full activation tape for one sequence; cloning it forks a decode branch.
#[derive(Debug, Clone)]
pub struct Cache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    fin_in: Vec<f64>,   // len × d
    fin_rinv: Vec<f64>, // len
    hidden: Vec<f64>,   // len × d, final normed state
}

impl Cache {
    pub fn new(cfg: &ModelConfig) -> Cache {
        Cache {
            tokens: Vec::new(),
            layers: vec![LayerCache::default(); cfg.n_layers],
            fin_in: Vec::new(),
            fin_rinv: Vec::new(),
            hidden: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Final hidden state at `pos` (input to the head).
    pub fn hidden_row(&self, pos: usize, d: usize) -> &[f64] {
        &self.hidden[pos * d..(pos + 1) * d]
    }
}

fn rmsnorm(x: &[f64]) -> (Vec<f64>, f64) {
    let ms = math::dot(x, x) / x.len() as f64;
    let rinv = 1.0 / (ms + RMS_EPS).sqrt();
    (x.iter().map(|&v| v * rinv).collect(), rinv)
}

/// dL/dx for y = x·rinv given dL/dy, accumulated into `out`.
fn rmsnorm_backward_acc(x: &[f64], rinv: f64, dy: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let dot_xy = math::dot(dy, x);
    let c = rinv * rinv * rinv / n * dot_xy;
    for i in 0..x.len() {
        out[i] += rinv * dy[i] - c * x[i];
    }
}

fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_S * (x + GELU_A * x * x * x);
    let t = u.tanh();
    (0.5 * x * (1.0 + t), t)
}

fn gelu_derivative(x: f64, tanh_u: f64) -> f64 {
    let du = GELU_S * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + tanh_u) + 0.5 * x * (1.0 - tanh_u * tanh_u) * du
}

/// Ragged offset of position `p`'s attention weights inside `LayerCache::aw`.
fn aw_offset(n_heads: usize, p: usize) -> usize {
    n_heads * p * (p + 1) / 2
}

/// Feed one token through the network, appending its activations to `cache`.
/// Returns the position index the token occupies.
pub fn forward_pos(
    layout: &Layout,
    params: &[f64],
    cache: &mut Cache,
    token: u32,
) -> Result<usize> {
    let cfg = &layout.cfg;
    let d = cfg.d_model;
    let d_ff = cfg.d_ff();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let pos = cache.tokens.len();
    if pos >= cfg.context_len {
        return Err(Error::Length {
            len: pos + 1,
            max: cfg.context_len,
        });
    }
    if (token as usize) >= cfg.vocab_size {
        return Err(Error::Config(format!(
            "token id {token} out of vocabulary range"
        )));
    }
    cache.tokens.push(token);

    // residual stream = token embedding + position embedding
    let wte = &params[layout.wte()];
    let wpe = &params[layout.wpe()];
    let mut x: Vec<f64> = (0..d)
        .map(|i| wte[token as usize * d + i] + wpe[pos * d + i])
        .collect();

    for l in 0..cfg.n_layers {
        // -- attention block --
        let layer = &mut cache.layers[l];
        layer.attn_in.extend_from_slice(&x);
        let (xn, rinv) = rmsnorm(&x);
        layer.ln1_rinv.push(rinv);

        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        math::matvec(&params[layout.wq(l)], &xn, d, &mut q);
        math::matvec(&params[layout.wk(l)], &xn, d, &mut k);
        math::matvec(&params[layout.wv(l)], &xn, d, &mut v);
        layer.ln1_xn.extend_from_slice(&xn);
        layer.k.extend_from_slice(&k);
        layer.v.extend_from_slice(&v);

        let mut ctx = vec![0.0; d];
        debug_assert_eq!(layer.aw.len(), aw_offset(cfg.n_heads, pos));
        for h in 0..cfg.n_heads {
            let hs = h * hd;
            let q_h = &q[hs..hs + hd];
            let mut s = vec![0.0; pos + 1];
            for (t, st) in s.iter_mut().enumerate() {
                let k_h = &layer.k[t * d + hs..t * d + hs + hd];
                *st = math::dot(q_h, k_h) * scale;
            }
            math::softmax_inplace(&mut s);
            for (t, &st) in s.iter().enumerate() {
                let v_h = &layer.v[t * d + hs..t * d + hs + hd];
                math::axpy(&mut ctx[hs..hs + hd], st, v_h);
            }
            layer.aw.extend_from_slice(&s);
        }
        layer.q.extend_from_slice(&q);

        let mut ho = vec![0.0; d];
        math::matvec(&params[layout.wo(l)], &ctx, d, &mut ho);
        layer.ctx.extend_from_slice(&ctx);
        for i in 0..d {
            x[i] += ho[i];
        }

        // -- MLP block --
        layer.mlp_in.extend_from_slice(&x);
        let (xn2, rinv2) = rmsnorm(&x);
        layer.ln2_rinv.push(rinv2);

        let mut hpre = vec![0.0; d_ff];
        math::matvec(&params[layout.w1(l)], &xn2, d, &mut hpre);
        layer.ln2_xn.extend_from_slice(&xn2);

        let mut hact = vec![0.0; d_ff];
        let mut thu = vec![0.0; d_ff];
        for j in 0..d_ff {
            let (g, t) = gelu(hpre[j]);
            hact[j] = g;
            thu[j] = t;
        }
        let mut mo = vec![0.0; d];
        math::matvec(&params[layout.w2(l)], &hact, d_ff, &mut mo);
        layer.hpre.extend_from_slice(&hpre);
        layer.thu.extend_from_slice(&thu);
        layer.hact.extend_from_slice(&hact);
        for i in 0..d {
            x[i] += mo[i];
        }
    }

    cache.fin_in.extend_from_slice(&x);
    let (hidden, rinv) = rmsnorm(&x);
    cache.fin_rinv.push(rinv);
    cache.hidden.extend_from_slice(&hidden);
    Ok(pos)
}

/// Run a whole token sequence through the network.
pub fn run_forward(layout: &Layout, params: &[f64], tokens: &[u32]) -> Result<Cache> {
    let mut cache = Cache::new(&layout.cfg);
    for &t in tokens {
        forward_pos(layout, params, &mut cache, t)?;
    }
    Ok(cache)
}

/// Language-model head: logits for the next token after `pos`.
pub fn logits_into(layout: &Layout, params: &[f64], cache: &Cache, pos: usize, out: &mut [f64]) {
    debug_assert_eq!(layout.head_kind, HeadKind::LanguageModel);
    let d = layout.cfg.d_model;
    math::matvec(&params[layout.head()], cache.hidden_row(pos, d), d, out);
}

/// Scalar head: affine read-out of the hidden state at `pos`.
pub fn scalar_score(layout: &Layout, params: &[f64], cache: &Cache, pos: usize) -> f64 {
    debug_assert_eq!(layout.head_kind, HeadKind::Scalar);
    let d = layout.cfg.d_model;
    let head = &params[layout.head()];
    math::dot(&head[..d], cache.hidden_row(pos, d)) + head[d]
}

/// Backpropagate `d_hidden` (gradient w.r.t. the final hidden states, one
/// `d_model` row per position, zero rows allowed) through the backbone,
/// accumulating parameter gradients into `grad`. Head gradients are the
/// caller's responsibility; `grad` uses the same layout as `params`.
pub fn backward(
    layout: &Layout,
    params: &[f64],
    cache: &Cache,
    d_hidden: &[f64],
    grad: &mut [f64],
) {
    let cfg = &layout.cfg;
    let d = cfg.d_model;
    let d_ff = cfg.d_ff();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let len = cache.len();
    debug_assert_eq!(d_hidden.len(), len * d);
    debug_assert_eq!(grad.len(), layout.total_len());

    // Gradient flowing into the residual stream at the top of the stack,
    // obtained by pulling d_hidden back through the final norm.
    let mut d_x = vec![0.0; len * d];
    for p in 0..len {
        rmsnorm_backward_acc(
            &cache.fin_in[p * d..(p + 1) * d],
            cache.fin_rinv[p],
            &d_hidden[p * d..(p + 1) * d],
            &mut d_x[p * d..(p + 1) * d],
        );
    }

    for l in (0..cfg.n_layers).rev() {
        let layer = &cache.layers[l];
        // k/v rows receive contributions from every later position; walking
        // positions in reverse completes row p exactly when we reach it.
        let mut d_k_acc = vec![0.0; len * d];
        let mut d_v_acc = vec![0.0; len * d];

        for p in (0..len).rev() {
            let g = &mut d_x[p * d..(p + 1) * d];

            // -- MLP block backward --
            let d_mo: Vec<f64> = g.to_vec(); // branch gradient; residual stays in g
            let hact = &layer.hact[p * d_ff..(p + 1) * d_ff];
            math::outer_acc(&mut grad[layout.w2(l)], &d_mo, hact);
            let mut d_hact = vec![0.0; d_ff];
            math::matvec_t_acc(&params[layout.w2(l)], &d_mo, d_ff, &mut d_hact);

            let hpre = &layer.hpre[p * d_ff..(p + 1) * d_ff];
            let thu = &layer.thu[p * d_ff..(p + 1) * d_ff];
            let mut d_hpre = d_hact;
            for j in 0..d_ff {
                d_hpre[j] *= gelu_derivative(hpre[j], thu[j]);
            }
            let xn2 = &layer.ln2_xn[p * d..(p + 1) * d];
            math::outer_acc(&mut grad[layout.w1(l)], &d_hpre, xn2);
            let mut d_xn2 = vec![0.0; d];
            math::matvec_t_acc(&params[layout.w1(l)], &d_hpre, d, &mut d_xn2);
            rmsnorm_backward_acc(
                &layer.mlp_in[p * d..(p + 1) * d],
                layer.ln2_rinv[p],
                &d_xn2,
                g,
            );

            // -- attention block backward --
            let d_ho: Vec<f64> = g.to_vec();
            let ctx = &layer.ctx[p * d..(p + 1) * d];
            math::outer_acc(&mut grad[layout.wo(l)], &d_ho, ctx);
            let mut d_ctx = vec![0.0; d];
            math::matvec_t_acc(&params[layout.wo(l)], &d_ho, d, &mut d_ctx);

            let awoff = aw_offset(cfg.n_heads, p);
            let q_row = &layer.q[p * d..(p + 1) * d];
            let mut d_q = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let hs = h * hd;
                let d_ctx_h = &d_ctx[hs..hs + hd];
                let aw = &layer.aw[awoff + h * (p + 1)..awoff + (h + 1) * (p + 1)];

                let mut d_aw = vec![0.0; p + 1];
                for t in 0..=p {
                    let v_h = &layer.v[t * d + hs..t * d + hs + hd];
                    d_aw[t] = math::dot(d_ctx_h, v_h);
                    math::axpy(&mut d_v_acc[t * d + hs..t * d + hs + hd], aw[t], d_ctx_h);
                }
                let dot_aw = math::dot(aw, &d_aw);
                let q_h = &q_row[hs..hs + hd];
                for t in 0..=p {
                    let d_s = aw[t] * (d_aw[t] - dot_aw);
                    let k_h = &layer.k[t * d + hs..t * d + hs + hd];
                    math::axpy(&mut d_q[hs..hs + hd], scale * d_s, k_h);
                    math::axpy(&mut d_k_acc[t * d + hs..t * d + hs + hd], scale * d_s, q_h);
                }
            }

            // project this position's q gradient and its now-complete k/v rows
            let xn1 = &layer.ln1_xn[p * d..(p + 1) * d];
            let mut d_xn1 = vec![0.0; d];
            math::outer_acc(&mut grad[layout.wq(l)], &d_q, xn1);
            math::matvec_t_acc(&params[layout.wq(l)], &d_q, d, &mut d_xn1);
            let d_k_row = &d_k_acc[p * d..(p + 1) * d];
            math::outer_acc(&mut grad[layout.wk(l)], d_k_row, xn1);
            math::matvec_t_acc(&params[layout.wk(l)], d_k_row, d, &mut d_xn1);
            let d_v_row = &d_v_acc[p * d..(p + 1) * d];
            math::outer_acc(&mut grad[layout.wv(l)], d_v_row, xn1);
            math::matvec_t_acc(&params[layout.wv(l)], d_v_row, d, &mut d_xn1);

            let g = &mut d_x[p * d..(p + 1) * d];
            rmsnorm_backward_acc(
                &layer.attn_in[p * d..(p + 1) * d],
                layer.ln1_rinv[p],
                &d_xn1,
                g,
            );
        }
    }

    // embeddings
    let wte_start = layout.wte().start;
    let wpe_start = layout.wpe().start;
    for p in 0..len {
        let tok = cache.tokens[p] as usize;
        let g = &d_x[p * d..(p + 1) * d];
        math::axpy(
            &mut grad[wte_start + tok * d..wte_start + (tok + 1) * d],
            1.0,
            g,
        );
        math::axpy(
            &mut grad[wpe_start + p * d..wpe_start + (p + 1) * d],
            1.0,
            g,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 16,
        }
    }

    #[test]
    fn layout_regions_tile_the_vector() {
        let layout = Layout::new(ModelConfig::default(), HeadKind::LanguageModel);
        let mut covered = vec![0u8; layout.total_len()];
        let mut mark = |r: Range<usize>| {
            for i in r {
                covered[i] += 1;
            }
        };
        mark(layout.wte());
        mark(layout.wpe());
        for l in 0..layout.cfg.n_layers {
            mark(layout.wq(l));
            mark(layout.wk(l));
            mark(layout.wv(l));
            mark(layout.wo(l));
            mark(layout.w1(l));
            mark(layout.w2(l));
        }
        mark(layout.head());
        assert!(
            covered.iter().all(|&c| c == 1),
            "regions must tile exactly once"
        );

        let scalar = Layout::new(ModelConfig::default(), HeadKind::Scalar);
        assert_eq!(scalar.backbone_len(), layout.backbone_len());
        assert_eq!(scalar.head().len(), layout.cfg.d_model + 1);
    }

    #[test]
    fn init_is_seeded_and_shrinks_residual_projections() {
        let layout = Layout::new(tiny_cfg(), HeadKind::LanguageModel);
        let a = init_params(&layout, 5);
        let b = init_params(&layout, 5);
        assert_eq!(a, b);
        let c = init_params(&layout, 6);
        assert_ne!(a, c);
        let shrink = (2.0 * layout.cfg.n_layers as f64).sqrt();
        for l in 0..layout.cfg.n_layers {
            // write-back projections are nonzero but markedly smaller
            let wo_max = a[layout.wo(l)].iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(wo_max > 0.0 && wo_max < 6.0 * INIT_STD / shrink);
            let w2_max = a[layout.w2(l)].iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(w2_max > 0.0 && w2_max < 6.0 * INIT_STD / shrink);
            assert!(a[layout.wq(l)].iter().any(|&x| x != 0.0));
        }
        let scalar = Layout::new(tiny_cfg(), HeadKind::Scalar);
        let p = init_params(&scalar, 5);
        assert!(p[scalar.head()].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn incremental_forward_matches_fresh_prefix_runs() {
        let layout = Layout::new(tiny_cfg(), HeadKind::LanguageModel);
        let params = init_params(&layout, 1);
        let tokens = [1u32, 4, 7, 2, 9, 3];
        let full = run_forward(&layout, &params, &tokens).unwrap();
        for n in 1..=tokens.len() {
            let prefix = run_forward(&layout, &params, &tokens[..n]).unwrap();
            // causality: earlier hidden states are bit-identical
            for p in 0..n {
                assert_eq!(
                    prefix.hidden_row(p, 8),
                    full.hidden_row(p, 8),
                    "hidden at {p} must not depend on later tokens"
                );
            }
        }
    }

    #[test]
    fn cloned_cache_forks_independent_branches() {
        let layout = Layout::new(tiny_cfg(), HeadKind::LanguageModel);
        let params = init_params(&layout, 2);
        let mut a = run_forward(&layout, &params, &[1, 5, 6]).unwrap();
        let mut b = a.clone();
        forward_pos(&layout, &params, &mut a, 3).unwrap();
        forward_pos(&layout, &params, &mut b, 4).unwrap();
        assert_eq!(a.len(), 4);
        assert_ne!(a.hidden_row(3, 8), b.hidden_row(3, 8));
        // shared prefix still identical
        assert_eq!(a.hidden_row(2, 8), b.hidden_row(2, 8));
    }

    #[test]
    fn context_overflow_and_bad_tokens_are_rejected() {
        let layout = Layout::new(tiny_cfg(), HeadKind::LanguageModel);
        let params = init_params(&layout, 3);
        let mut cache = Cache::new(&layout.cfg);
        for i in 0..16 {
            forward_pos(&layout, &params, &mut cache, (i % 11) as u32).unwrap();
        }
        match forward_pos(&layout, &params, &mut cache, 0) {
            Err(Error::Length { len, max }) => {
                assert_eq!((len, max), (17, 16));
            }
            other => panic!("expected length error, got {other:?}"),
        }
        let mut cache = Cache::new(&layout.cfg);
        assert!(forward_pos(&layout, &params, &mut cache, 11).is_err());
    }

    #[test]
    fn rmsnorm_matches_naive_definition_and_gradient() {
        let x = [0.3, -1.2, 2.5, 0.0, -0.7, 1.1, 0.2, -2.0];
        let (y, rinv) = rmsnorm(&x);
        let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / 8.0;
        for i in 0..8 {
            let expect = x[i] / (ms + RMS_EPS).sqrt();
            assert!((y[i] - expect).abs() < 1e-15);
        }
        // finite-difference check of rmsnorm_backward_acc on a random loss
        let dy = [0.11, -0.7, 0.5, 0.9, -0.3, 0.25, -0.05, 0.4];
        let mut dx = vec![0.0; 8];
        rmsnorm_backward_acc(&x, rinv, &dy, &mut dx);
        let f = |x: &[f64]| -> f64 {
            let (y, _) = rmsnorm(x);
            y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..8 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-7, "i={i}: {} vs {}", dx[i], fd);
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.1, 0.5, 1.7, 4.0] {
            let (_, t) = gelu(x);
            let d = gelu_derivative(x, t);
            let h = 1e-6;
            let fd = (gelu(x + h).0 - gelu(x - h).0) / (2.0 * h);
            assert!((d - fd).abs() < 1e-8, "x={x}: {d} vs {fd}");
        }
    }

    #[test]
    fn attention_weights_are_causal_and_normalized() {
        let layout = Layout::new(tiny_cfg(), HeadKind::LanguageModel);
        let params = init_params(&layout, 9);
        let cache = run_forward(&layout, &params, &[1, 2, 3, 4, 5]).unwrap();
        for layer in &cache.layers {
            for p in 0..5 {
                let off = aw_offset(2, p);
                for h in 0..2 {
                    let aw = &layer.aw[off + h * (p + 1)..off + (h + 1) * (p + 1)];
                    let sum: f64 = aw.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                    assert!(aw.iter().all(|&w| w > 0.0));
                }
            }
        }
    }
}
