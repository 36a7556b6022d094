//! The two-headed time-conditioned denoiser `f_θ(x_t, z_t, t) → (ε̂, logits)`.
//!
//! Three layouts share one block recipe (adaLN-modulated attention then MLP,
//! each behind a zero-initialised gate):
//!
//! * `Mdit`: token embedding and latent projection are fused into one stream of
//!   `L` positions.
//! * `Mmdit`: one stream per modality with its own weights; attention is joint
//!   over all `2L` positions.
//! * `Moedit`: two streams sharing attention weights over `2L` positions, with a
//!   softly routed mixture of feed-forward experts per position.

use crate::autograd::{NodeId, Tape};
use crate::batch::{LatentBatch, TokenBatch};
use crate::error::{config, input, Error, Result};
use crate::params::{Gradients, Init, ParamStore, Tensor};
use crate::rng::SeedStream;

const INIT_STD: f64 = 0.02;
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arch {
    #[default]
    Mdit,
    Mmdit,
    Moedit,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Mdit => "mdit",
            Arch::Mmdit => "mmdit",
            Arch::Moedit => "moedit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fuse {
    Add,
    #[default]
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_latent: usize,
    /// Base vocabulary size `V`; the network sees `V + 1` symbols including the mask.
    pub vocab: usize,
    pub n_experts: usize,
    pub fuse: Fuse,
    pub mlp_ratio: usize,
    pub freq_dim: usize,
    /// Rotary position embeddings; off makes the network permutation-equivariant.
    pub use_rope: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mdit,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_latent: 32,
            vocab: 8,
            n_experts: 4,
            fuse: Fuse::Concat,
            mlp_ratio: 4,
            freq_dim: 64,
            use_rope: true,
        }
    }
}

impl DenoiserConfig {
    pub fn vocab_augmented(&self) -> usize {
        self.vocab + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_layers == 0 {
            problems.push("n_layers must be positive".to_string());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        } else if (self.d_model / self.n_heads) % 2 != 0 {
            problems.push("head dimension must be even for rotary embeddings".to_string());
        }
        if self.d_latent == 0 {
            problems.push("d_latent must be positive".to_string());
        }
        if self.vocab == 0 {
            problems.push("vocab must be positive".to_string());
        }
        if self.arch == Arch::Moedit && self.n_experts < 2 {
            problems.push(format!("moedit needs n_experts >= 2, got {}", self.n_experts));
        }
        if self.mlp_ratio == 0 {
            problems.push("mlp_ratio must be positive".to_string());
        }
        if self.freq_dim < 2 || self.freq_dim % 2 != 0 {
            problems.push("freq_dim must be even and >= 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(config(problems.join("; ")))
        }
    }
}

/// Per-position token logits over the augmented vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub len: usize,
    pub vocab_augmented: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn at(&self, b: usize, j: usize) -> &[f64] {
        let o = (b * self.len + j) * self.vocab_augmented;
        &self.data[o..o + self.vocab_augmented]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: LatentBatch,
    pub logits: Logits,
}

/// Cotangent of a scalar objective with respect to both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputCotangent {
    pub eps_hat: Vec<f64>,
    pub logits: Vec<f64>,
}

impl OutputCotangent {
    pub fn zeros_like(out: &DenoiserOutput) -> Self {
        Self { eps_hat: vec![0.0; out.eps_hat.data.len()], logits: vec![0.0; out.logits.data.len()] }
    }
}

/// Anything that can play the denoiser during sampling and evaluation.
pub trait JointDenoiser {
    /// `drop_continuous[b]` zeroes the latent input and the ε head for sequence `b`.
    fn predict(
        &self,
        x_t: &TokenBatch,
        z_t: &LatentBatch,
        t: &[f64],
        drop_continuous: &[bool],
    ) -> Result<DenoiserOutput>;

    fn vocab(&self) -> usize;
    fn d_latent(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

/// A forward evaluation with its activations retained for [`ForwardPass::backward`].
pub struct ForwardPass<'m> {
    tape: Tape<'m>,
    eps: NodeId,
    logits: NodeId,
    output: DenoiserOutput,
}

impl ForwardPass<'_> {
    pub fn output(&self) -> &DenoiserOutput {
        &self.output
    }

    pub fn into_output(self) -> DenoiserOutput {
        self.output
    }

    /// Exact reverse-mode gradients of `⟨cotangent, output⟩`.
    pub fn backward(&self, cot: &OutputCotangent) -> Result<Gradients> {
        if cot.eps_hat.len() != self.output.eps_hat.data.len() || cot.logits.len() != self.output.logits.data.len() {
            return Err(input("cotangent shape does not match denoiser output"));
        }
        self.tape.backward(&[(self.eps, &cot.eps_hat), (self.logits, &cot.logits)])
    }
}

/// Sinusoidal features of `TIME_SCALE·t`: `[cos(ω_i s), sin(ω_i s)]`.
pub fn timestep_features(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tt in t {
        let s = TIME_SCALE * tt;
        let args: Vec<f64> = (0..half).map(|i| s * (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp()).collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Tensor { shape: vec![t.len(), dim], data }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    stream: SeedStream,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) {
        self.store.add(format!("{name}.w"), &[fan_in, fan_out], init, self.stream);
        self.store.add(format!("{name}.b"), &[fan_out], Init::Zeros, self.stream);
    }

    fn mlp(&mut self, name: &str, d: usize, hidden: usize) {
        self.linear(&format!("{name}.fc1"), d, hidden, Init::TruncNormal(INIT_STD));
        self.linear(&format!("{name}.fc2"), hidden, d, Init::TruncNormal(INIT_STD));
    }

    fn attention(&mut self, name: &str, d: usize) {
        self.linear(&format!("{name}.qkv"), d, 3 * d, Init::TruncNormal(INIT_STD));
        self.linear(&format!("{name}.out"), d, d, Init::TruncNormal(INIT_STD));
    }
}

/// Six `[B, D]` modulation vectors: shift/scale/gate for attention, then for the MLP.
struct Modulation {
    shift_a: NodeId,
    scale_a: NodeId,
    gate_a: NodeId,
    shift_m: NodeId,
    scale_m: NodeId,
    gate_m: NodeId,
}

struct Ctx<'c> {
    cfg: &'c DenoiserConfig,
    /// SiLU of the time embedding, shared by every adaLN projection.
    cond: NodeId,
    positions: Vec<usize>,
}

fn lin(tape: &mut Tape, x: NodeId, name: &str) -> NodeId {
    let w = tape.named(&format!("{name}.w"));
    let b = tape.named(&format!("{name}.b"));
    tape.linear(x, w, Some(b))
}

fn modulation(tape: &mut Tape, ctx: &Ctx, name: &str) -> Modulation {
    let d = ctx.cfg.d_model;
    let m = lin(tape, ctx.cond, name);
    let mut part = |i: usize| tape.slice_last(m, i * d, d);
    Modulation {
        shift_a: part(0),
        scale_a: part(1),
        gate_a: part(2),
        shift_m: part(3),
        scale_m: part(4),
        gate_m: part(5),
    }
}

fn qkv(tape: &mut Tape, ctx: &Ctx, a: NodeId, name: &str) -> (NodeId, NodeId, NodeId) {
    let d = ctx.cfg.d_model;
    let p = lin(tape, a, name);
    (tape.slice_last(p, 0, d), tape.slice_last(p, d, d), tape.slice_last(p, 2 * d, d))
}

fn attend(tape: &mut Tape, ctx: &Ctx, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
    let (q, k) = if ctx.cfg.use_rope {
        (tape.rope(q, ctx.cfg.n_heads, &ctx.positions), tape.rope(k, ctx.cfg.n_heads, &ctx.positions))
    } else {
        (q, k)
    };
    tape.attention(q, k, v, ctx.cfg.n_heads)
}

fn mlp(tape: &mut Tape, x: NodeId, name: &str) -> NodeId {
    let h = lin(tape, x, &format!("{name}.fc1"));
    let h = tape.gelu(h);
    lin(tape, h, &format!("{name}.fc2"))
}

fn pre_norm(tape: &mut Tape, h: NodeId, shift: NodeId, scale: NodeId) -> NodeId {
    let n = tape.layer_norm(h);
    tape.modulate(n, shift, scale)
}

fn dit_block(tape: &mut Tape, ctx: &Ctx, h: NodeId, name: &str, moe: bool) -> NodeId {
    let m = modulation(tape, ctx, &format!("{name}.ada"));
    let a = pre_norm(tape, h, m.shift_a, m.scale_a);
    let (q, k, v) = qkv(tape, ctx, a, &format!("{name}.attn.qkv"));
    let o = attend(tape, ctx, q, k, v);
    let o = lin(tape, o, &format!("{name}.attn.out"));
    let h = tape.gated_add(h, m.gate_a, o);
    let a = pre_norm(tape, h, m.shift_m, m.scale_m);
    let y = if moe {
        let g = lin(tape, a, &format!("{name}.moe.gate"));
        let g = tape.softmax(g);
        let experts: Vec<NodeId> =
            (0..ctx.cfg.n_experts).map(|e| mlp(tape, a, &format!("{name}.moe.expert{e}"))).collect();
        tape.mix_experts(g, &experts)
    } else {
        mlp(tape, a, &format!("{name}.mlp"))
    };
    tape.gated_add(h, m.gate_m, y)
}

/// Two streams with separate weights and joint attention over both.
fn mm_block(tape: &mut Tape, ctx: &Ctx, hx: NodeId, hz: NodeId, name: &str) -> (NodeId, NodeId) {
    let len = tape.shape(hx)[1];
    let mx = modulation(tape, ctx, &format!("{name}.x.ada"));
    let mz = modulation(tape, ctx, &format!("{name}.z.ada"));
    let ax = pre_norm(tape, hx, mx.shift_a, mx.scale_a);
    let az = pre_norm(tape, hz, mz.shift_a, mz.scale_a);
    let (qx, kx, vx) = qkv(tape, ctx, ax, &format!("{name}.x.attn.qkv"));
    let (qz, kz, vz) = qkv(tape, ctx, az, &format!("{name}.z.attn.qkv"));
    let q = tape.concat_seq(qx, qz);
    let k = tape.concat_seq(kx, kz);
    let v = tape.concat_seq(vx, vz);
    let o = attend(tape, ctx, q, k, v);
    let ox = tape.slice_seq(o, 0, len);
    let oz = tape.slice_seq(o, len, len);
    let ox = lin(tape, ox, &format!("{name}.x.attn.out"));
    let oz = lin(tape, oz, &format!("{name}.z.attn.out"));
    let hx = tape.gated_add(hx, mx.gate_a, ox);
    let hz = tape.gated_add(hz, mz.gate_a, oz);
    let ax = pre_norm(tape, hx, mx.shift_m, mx.scale_m);
    let az = pre_norm(tape, hz, mz.shift_m, mz.scale_m);
    let yx = mlp(tape, ax, &format!("{name}.x.mlp"));
    let yz = mlp(tape, az, &format!("{name}.z.mlp"));
    (tape.gated_add(hx, mx.gate_m, yx), tape.gated_add(hz, mz.gate_m, yz))
}

fn final_norm(tape: &mut Tape, ctx: &Ctx, h: NodeId, name: &str) -> NodeId {
    let d = ctx.cfg.d_model;
    let m = lin(tape, ctx.cond, name);
    let shift = tape.slice_last(m, 0, d);
    let scale = tape.slice_last(m, d, d);
    pre_norm(tape, h, shift, scale)
}

fn check_finite(tape: &Tape, id: NodeId, layer: usize) -> Result<()> {
    if tape.is_finite(id) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation after layer {layer}")))
    }
}

impl Denoiser {
    /// Fresh parameters: truncated-normal projections, zero biases, zero adaLN so blocks start as identity.
    pub fn new(config: DenoiserConfig, stream: SeedStream) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let hidden = config.mlp_ratio * d;
        let mut b = Builder { store: &mut store, stream };
        b.linear("time.fc1", config.freq_dim, d, Init::TruncNormal(INIT_STD));
        b.linear("time.fc2", d, d, Init::TruncNormal(INIT_STD));
        b.store.add("tok_embed", &[config.vocab_augmented(), d], Init::TruncNormal(INIT_STD), stream);
        b.linear("lat_in", config.d_latent, d, Init::TruncNormal(INIT_STD));
        match config.arch {
            Arch::Mdit => {
                if config.fuse == Fuse::Concat {
                    b.linear("fuse", 2 * d, d, Init::TruncNormal(INIT_STD));
                }
                for l in 0..config.n_layers {
                    let n = format!("blocks.{l}");
                    b.linear(&format!("{n}.ada"), d, 6 * d, Init::Zeros);
                    b.attention(&format!("{n}.attn"), d);
                    b.mlp(&format!("{n}.mlp"), d, hidden);
                }
                b.linear("final.ada", d, 2 * d, Init::Zeros);
            }
            Arch::Mmdit => {
                for l in 0..config.n_layers {
                    for s in ["x", "z"] {
                        let n = format!("blocks.{l}.{s}");
                        b.linear(&format!("{n}.ada"), d, 6 * d, Init::Zeros);
                        b.attention(&format!("{n}.attn"), d);
                        b.mlp(&format!("{n}.mlp"), d, hidden);
                    }
                }
                b.linear("final.x.ada", d, 2 * d, Init::Zeros);
                b.linear("final.z.ada", d, 2 * d, Init::Zeros);
            }
            Arch::Moedit => {
                for l in 0..config.n_layers {
                    let n = format!("blocks.{l}");
                    b.linear(&format!("{n}.ada"), d, 6 * d, Init::Zeros);
                    b.attention(&format!("{n}.attn"), d);
                    b.linear(&format!("{n}.moe.gate"), d, config.n_experts, Init::Zeros);
                    for e in 0..config.n_experts {
                        b.mlp(&format!("{n}.moe.expert{e}"), d, hidden);
                    }
                }
                b.linear("final.ada", d, 2 * d, Init::Zeros);
            }
        }
        b.linear("head.eps", d, config.d_latent, Init::Zeros);
        b.linear("head.logits", d, config.vocab_augmented(), Init::Zeros);
        Ok(Self { config, params: store })
    }

    fn check_inputs(&self, x_t: &TokenBatch, z_t: &LatentBatch, t: &[f64], drop: &[bool]) -> Result<()> {
        let c = &self.config;
        if x_t.vocab != c.vocab {
            return Err(input(format!("token vocabulary {} does not match model vocabulary {}", x_t.vocab, c.vocab)));
        }
        if z_t.batch != x_t.batch || z_t.len != x_t.len || z_t.dim != c.d_latent {
            return Err(input(format!(
                "latent shape {}×{}×{} does not match tokens {}×{} and d_latent {}",
                z_t.batch, z_t.len, z_t.dim, x_t.batch, x_t.len, c.d_latent
            )));
        }
        if t.len() != x_t.batch || drop.len() != x_t.batch {
            return Err(input("time and drop vectors need one entry per sequence"));
        }
        if x_t.len == 0 || x_t.batch == 0 {
            return Err(input("empty batch"));
        }
        Ok(())
    }

    /// Forward evaluation with activations kept for a later backward sweep.
    pub fn forward(
        &self,
        x_t: &TokenBatch,
        z_t: &LatentBatch,
        t: &[f64],
        drop_continuous: &[bool],
    ) -> Result<ForwardPass<'_>> {
        self.check_inputs(x_t, z_t, t, drop_continuous)?;
        let cfg = &self.config;
        let (bsz, len) = (x_t.batch, x_t.len);
        let mut tape = Tape::new(&self.params);

        let feats = tape.input(timestep_features(t, cfg.freq_dim));
        let c = lin(&mut tape, feats, "time.fc1");
        let c = tape.silu(c);
        let c = lin(&mut tape, c, "time.fc2");
        let cond = tape.silu(c);

        let mut z_in = z_t.data.clone();
        let per_seq = len * z_t.dim;
        for (b, _) in drop_continuous.iter().enumerate().filter(|(_, &d)| d) {
            z_in[b * per_seq..(b + 1) * per_seq].fill(0.0);
        }
        let z_in = tape.input(Tensor { shape: vec![bsz, len, z_t.dim], data: z_in });
        let table = tape.named("tok_embed");
        let tok = tape.embed(table, &x_t.ids, bsz, len);
        let lat = lin(&mut tape, z_in, "lat_in");

        let (hx, hz) = match cfg.arch {
            Arch::Mdit => {
                let ctx = Ctx { cfg, cond, positions: (0..len).collect() };
                let mut h = match cfg.fuse {
                    Fuse::Concat => {
                        let cat = tape.concat_last(&[tok, lat]);
                        lin(&mut tape, cat, "fuse")
                    }
                    Fuse::Add => tape.add(tok, lat),
                };
                for l in 0..cfg.n_layers {
                    h = dit_block(&mut tape, &ctx, h, &format!("blocks.{l}"), false);
                    check_finite(&tape, h, l)?;
                }
                let h = final_norm(&mut tape, &ctx, h, "final.ada");
                (h, h)
            }
            Arch::Mmdit => {
                let ctx = Ctx { cfg, cond, positions: (0..len).chain(0..len).collect() };
                let (mut hx, mut hz) = (tok, lat);
                for l in 0..cfg.n_layers {
                    (hx, hz) = mm_block(&mut tape, &ctx, hx, hz, &format!("blocks.{l}"));
                    check_finite(&tape, hx, l)?;
                    check_finite(&tape, hz, l)?;
                }
                (final_norm(&mut tape, &ctx, hx, "final.x.ada"), final_norm(&mut tape, &ctx, hz, "final.z.ada"))
            }
            Arch::Moedit => {
                let ctx = Ctx { cfg, cond, positions: (0..len).chain(0..len).collect() };
                let mut h = tape.concat_seq(tok, lat);
                for l in 0..cfg.n_layers {
                    h = dit_block(&mut tape, &ctx, h, &format!("blocks.{l}"), true);
                    check_finite(&tape, h, l)?;
                }
                let h = final_norm(&mut tape, &ctx, h, "final.ada");
                (tape.slice_seq(h, 0, len), tape.slice_seq(h, len, len))
            }
        };

        let logits = lin(&mut tape, hx, "head.logits");
        let eps = lin(&mut tape, hz, "head.eps");
        let keep: Vec<f64> = drop_continuous.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let eps = tape.scale_seq(eps, &keep);
        check_finite(&tape, eps, cfg.n_layers)?;
        check_finite(&tape, logits, cfg.n_layers)?;

        let output = DenoiserOutput {
            eps_hat: LatentBatch { batch: bsz, len, dim: cfg.d_latent, data: tape.value(eps).to_vec() },
            logits: Logits {
                batch: bsz,
                len,
                vocab_augmented: cfg.vocab_augmented(),
                data: tape.value(logits).to_vec(),
            },
        };
        Ok(ForwardPass { tape, eps, logits, output })
    }

    /// MoE routing weights of layer `layer` for the given inputs, `[B·2L, n_experts]` row-major.
    pub fn moe_gates(&self, x_t: &TokenBatch, z_t: &LatentBatch, t: &[f64], layer: usize) -> Result<Vec<f64>> {
        if self.config.arch != Arch::Moedit {
            return Err(config("routing weights exist only for moedit"));
        }
        let mut probe = self.clone();
        probe.config.n_layers = layer + 1;
        let pass = probe.forward(x_t, z_t, t, &vec![false; x_t.batch])?;
        // The gate softmax is the only Softmax node in a moedit graph; take the one of the last layer.
        Ok(pass.tape_softmax_values().pop().unwrap_or_default())
    }
}

impl ForwardPass<'_> {
    fn tape_softmax_values(&self) -> Vec<Vec<f64>> {
        self.tape.softmax_values()
    }
}

impl JointDenoiser for Denoiser {
    fn predict(
        &self,
        x_t: &TokenBatch,
        z_t: &LatentBatch,
        t: &[f64],
        drop_continuous: &[bool],
    ) -> Result<DenoiserOutput> {
        Ok(self.forward(x_t, z_t, t, drop_continuous)?.into_output())
    }

    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn d_latent(&self) -> usize {
        self.config.d_latent
    }
}
