//! Joint reverse sampler: Bayes-posterior token updates, DDIM/DDPM latent
//! updates and classifier-free guidance over the continuous modality.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::batch::{LatentBatch, TokenBatch};
use crate::denoiser::{JointDenoiser, Logits};
use crate::embedder::Codebook;
use crate::error::{domain, input, Result};
use crate::rng::{tags, SeedStream};
use crate::schedules::{ContinuousSchedule, DiscreteSchedule, SchedulePair, T_ALPHA_CLAMP, T_FLOOR};
use crate::training::clean_log_probs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// Forward-kernel standard deviation added on top of the DDIM mean.
    ForwardKernel,
    /// Conjugate-Gaussian posterior standard deviation with the matching mean shrinkage.
    #[default]
    ExactPosterior,
}

impl VarianceMode {
    pub fn name(&self) -> &'static str {
        match self {
            VarianceMode::ForwardKernel => "forward_kernel",
            VarianceMode::ExactPosterior => "exact_posterior",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeSource {
    #[default]
    DiscreteTokens,
    NnFromLatent,
}

impl DecodeSource {
    pub fn name(&self) -> &'static str {
        match self {
            DecodeSource::DiscreteTokens => "discrete_tokens",
            DecodeSource::NnFromLatent => "nn_from_latent",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub eta_ddpm: f64,
    pub cfg_w: f64,
    pub variance_mode: VarianceMode,
    pub temperature: f64,
    pub decode_source: DecodeSource,
    /// Take the posterior mode instead of drawing from it.
    pub argmax: bool,
    pub t_floor: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 64,
            eta_ddpm: 1.0,
            cfg_w: 1.0,
            variance_mode: VarianceMode::ExactPosterior,
            temperature: 1.0,
            decode_source: DecodeSource::DiscreteTokens,
            argmax: false,
            t_floor: T_FLOOR,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_steps == 0 {
            bad.push("n_steps must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.eta_ddpm) {
            bad.push(format!("eta_ddpm must lie in [0, 1], got {}", self.eta_ddpm));
        }
        if !self.cfg_w.is_finite() {
            bad.push("cfg_w must be finite".to_string());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bad.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.t_floor >= T_FLOOR && self.t_floor < 1.0) {
            bad.push(format!("t_floor must lie in [{T_FLOOR}, 1), got {}", self.t_floor));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(crate::error::config(bad.join("; ")))
        }
    }

    /// `t_k = 1 - k/K`, with the last point raised to `t_floor`.
    pub fn grid(&self) -> Vec<f64> {
        let k = self.n_steps;
        (0..=k).map(|i| (1.0 - i as f64 / k as f64).max(self.t_floor)).collect()
    }
}

/// `(z_t - σ_t ε̂)/α_t`.
pub fn predict_z0(z_t: &LatentBatch, eps_hat: &LatentBatch, t: &[f64], schedule: &ContinuousSchedule) -> Result<LatentBatch> {
    if !z_t.same_shape(eps_hat) || t.len() != z_t.batch {
        return Err(input("z_t, eps_hat and t disagree in shape"));
    }
    let per = z_t.len * z_t.dim;
    let mut out = z_t.clone();
    for b in 0..z_t.batch {
        let (a, s) = schedule.eval(t[b])?;
        if a <= 0.0 {
            return Err(domain(format!("alpha vanishes at t={}", t[b])));
        }
        for i in b * per..(b + 1) * per {
            out.data[i] = (z_t.data[i] - s * eps_hat.data[i]) / a;
        }
    }
    Ok(out)
}

/// Moves every sequence of `z_t` from time `t` to time `s < t`.
pub fn step_continuous(
    z_t: &LatentBatch,
    eps_hat: &LatentBatch,
    t: f64,
    s: f64,
    schedule: &ContinuousSchedule,
    eta_ddpm: f64,
    mode: VarianceMode,
    stream: SeedStream,
) -> Result<LatentBatch> {
    if !(s < t) {
        return Err(input(format!("reverse step needs s < t, got s={s}, t={t}")));
    }
    let (a_t, sig_t) = schedule.eval(t)?;
    let (a_s, sig_s) = schedule.eval(s)?;
    let z0 = predict_z0(z_t, eps_hat, &vec![t; z_t.batch], schedule)?;
    let mut out = z_t.clone();
    if eta_ddpm == 0.0 {
        for i in 0..out.data.len() {
            out.data[i] = a_s * z0.data[i] + sig_s * eps_hat.data[i];
        }
        return Ok(out);
    }
    let ratio = a_t / a_s;
    let fwd = (sig_t * sig_t - ratio * ratio * sig_s * sig_s).max(0.0).sqrt();
    let (mean_noise, std) = match mode {
        VarianceMode::ForwardKernel => (sig_s, fwd),
        VarianceMode::ExactPosterior => {
            let pos = sig_s * fwd / sig_t;
            let share = (sig_s * sig_s - eta_ddpm * eta_ddpm * pos * pos).max(0.0).sqrt();
            (share, pos)
        }
    };
    let mut rng = stream.rng();
    for i in 0..out.data.len() {
        let xi: f64 = StandardNormal.sample(&mut rng);
        out.data[i] = a_s * z0.data[i] + mean_noise * eps_hat.data[i] + eta_ddpm * std * xi;
    }
    Ok(out)
}

/// `w·ℓ_c + (1 - w)·ℓ_u`.
pub fn cfg_logits(logits_c: &Logits, logits_u: &Logits, w: f64) -> Result<Logits> {
    if logits_c.data.len() != logits_u.data.len() || logits_c.vocab_augmented != logits_u.vocab_augmented {
        return Err(input("conditional and unconditional logits differ in shape"));
    }
    if w == 1.0 {
        return Ok(logits_c.clone());
    }
    if w == 0.0 {
        return Ok(logits_u.clone());
    }
    let mut out = logits_c.clone();
    for (o, u) in out.data.iter_mut().zip(&logits_u.data) {
        *o = w * *o + (1.0 - w) * u;
    }
    Ok(out)
}

fn check_probs(probs_hat: &[f64]) -> Result<()> {
    let sum: f64 = probs_hat.iter().sum();
    if probs_hat.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(input("probs_hat must be a distribution over the ordinary tokens"));
    }
    Ok(())
}

/// Reverse kernel from time `t` to `s` for one position under a masking schedule.
/// Returns probabilities over the augmented vocabulary (mask last).
pub fn posterior_masked(x_t: u32, probs_hat: &[f64], eta_t: f64, eta_s: f64) -> Result<Vec<f64>> {
    check_probs(probs_hat)?;
    let vocab = probs_hat.len();
    let mut out = vec![0.0; vocab + 1];
    if (x_t as usize) < vocab {
        out[x_t as usize] = 1.0;
        return Ok(out);
    }
    if eta_t >= 1.0 {
        return Err(input("a masked token cannot occur where the keep probability is one"));
    }
    let reveal = (eta_s - eta_t) / (1.0 - eta_t);
    for (o, p) in out.iter_mut().zip(probs_hat) {
        *o = reveal * p;
    }
    out[vocab] = (1.0 - eta_s) / (1.0 - eta_t);
    Ok(out)
}

/// Reverse kernel by direct enumeration: `q_{t|s}(x_t|x_s)·q_s(x_s|π̂)/q_t(x_t|π̂)`
/// over every `x_s`, for any schedule in the interpolation family.
pub fn posterior_enumerated(
    x_t: u32,
    probs_hat: &[f64],
    t: f64,
    s: f64,
    schedule: &DiscreteSchedule,
) -> Result<Vec<f64>> {
    check_probs(probs_hat)?;
    if !(s < t) {
        return Err(input(format!("reverse step needs s < t, got s={s}, t={t}")));
    }
    let vocab = probs_hat.len();
    let eta_t = schedule.eta(t)?;
    let eta_s = schedule.eta(s)?;
    posterior_enumerated_eta(x_t, probs_hat, eta_t, eta_s, &schedule.noise(vocab))
}

/// Enumeration over explicit keep probabilities and noise law `pi` (length `V+1`).
pub fn posterior_enumerated_eta(x_t: u32, probs_hat: &[f64], eta_t: f64, eta_s: f64, pi: &[f64]) -> Result<Vec<f64>> {
    let vocab = probs_hat.len();
    let aug = vocab + 1;
    let x_t = x_t as usize;
    if x_t >= aug || pi.len() != aug {
        return Err(input("token or noise law outside the augmented vocabulary"));
    }
    let hat = |v: usize| if v < vocab { probs_hat[v] } else { 0.0 };
    let q_s = |v: usize| eta_s * hat(v) + (1.0 - eta_s) * pi[v];
    let keep = if eta_s > 0.0 { eta_t / eta_s } else { 0.0 };
    let trans = |from: usize| keep * if from == x_t { 1.0 } else { 0.0 } + (1.0 - keep) * pi[x_t];
    let q_t = eta_t * hat(x_t) + (1.0 - eta_t) * pi[x_t];
    if q_t <= 0.0 {
        if x_t < vocab {
            let mut out = vec![0.0; aug];
            out[x_t] = 1.0;
            return Ok(out);
        }
        return Err(input("x_t has zero probability under the forward marginal"));
    }
    Ok((0..aug).map(|v| trans(v) * q_s(v) / q_t).collect())
}

/// Reverse kernel for one position, dispatching to the closed form for masking schedules.
pub fn posterior_discrete(x_t: u32, probs_hat: &[f64], t: f64, s: f64, schedule: &DiscreteSchedule) -> Result<Vec<f64>> {
    if !(s < t) {
        return Err(input(format!("reverse step needs s < t, got s={s}, t={t}")));
    }
    if schedule.is_masked() {
        posterior_masked(x_t, probs_hat, schedule.eta(t)?, schedule.eta(s)?)
    } else {
        posterior_enumerated(x_t, probs_hat, t, s, schedule)
    }
}

/// `softmax(ℓ/τ)` over the ordinary tokens.
pub fn probs_from_logits(row: &[f64], vocab: usize, temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row[..vocab].iter().map(|v| v / temperature).collect();
    clean_log_probs(&scaled, vocab).into_iter().map(f64::exp).collect()
}

fn draw(probs: &[f64], argmax: bool, rng: &mut impl Rng) -> u32 {
    if argmax {
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i as u32;
            }
        }
    }
    last as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub tokens: TokenBatch,
    pub latents: LatentBatch,
    /// Positions that were still masked after the last step and had to be drawn from `π̂`.
    pub forced_unmasks: usize,
    /// Number of denoiser evaluations.
    pub forward_calls: usize,
}

/// Runs the full joint reverse process from all-mask tokens and standard-normal latents.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &dyn JointDenoiser,
    pair: &SchedulePair,
    cfg: &SamplerConfig,
    codebook: Option<&Codebook>,
    len: usize,
    batch: usize,
    stream: SeedStream,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if len == 0 || batch == 0 {
        return Err(input("sample needs positive length and count"));
    }
    let vocab = model.vocab();
    let dim = model.d_latent();
    let stream = stream.fork(tags::SAMPLER);
    let init = match pair.discrete {
        DiscreteSchedule::Uniform { .. } => {
            let mut rng = stream.fork(u64::MAX).rng();
            (0..batch * len).map(|_| rng.random_range(0..vocab as u32)).collect()
        }
        _ => vec![vocab as u32; batch * len],
    };
    let mut x = TokenBatch::new(batch, len, vocab, init)?;
    let mut z = LatentBatch::zeros(batch, len, dim);
    {
        let mut rng = stream.fork(u64::MAX - 1).rng();
        z.data.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
    }
    let grid = cfg.grid();
    let all_keep = vec![false; batch];
    let all_drop = vec![true; batch];
    let mut forward_calls = 0;
    let mut last_probs = Vec::new();
    for k in 0..cfg.n_steps {
        let (t, s) = (grid[k], grid[k + 1]);
        if !(s < t) {
            continue;
        }
        // The latent map and the network see t clamped away from α = 0.
        let t_c = t.min(T_ALPHA_CLAMP);
        let s_c = s.min(t_c * (1.0 - 1e-12));
        let times = vec![t_c; batch];
        let cond = model.predict(&x, &z, &times, &all_keep)?;
        forward_calls += 1;
        let logits = if cfg.cfg_w != 1.0 {
            let uncond = model.predict(&x, &z, &times, &all_drop)?;
            forward_calls += 1;
            cfg_logits(&cond.logits, &uncond.logits, cfg.cfg_w)?
        } else {
            cond.logits
        };
        let step_stream = stream.fork(k as u64);
        let mut rng = step_stream.fork(tags::DISCRETE).rng();
        last_probs.clear();
        for pos in 0..batch * len {
            let (b, j) = (pos / len, pos % len);
            let probs = probs_from_logits(logits.at(b, j), vocab, cfg.temperature);
            let post = posterior_discrete(x.ids[pos], &probs, t, s, &pair.discrete)?;
            x.ids[pos] = draw(&post, cfg.argmax, &mut rng);
            last_probs.push(probs);
        }
        z = step_continuous(
            &z,
            &cond.eps_hat,
            t_c,
            s_c,
            &pair.continuous,
            cfg.eta_ddpm,
            cfg.variance_mode,
            step_stream.fork(tags::GAUSSIAN),
        )?;
    }
    let mut forced = 0;
    let mut rng = stream.fork(u64::MAX - 2).rng();
    for pos in 0..batch * len {
        if x.ids[pos] as usize == vocab {
            x.ids[pos] = draw(&last_probs[pos], cfg.argmax, &mut rng);
            forced += 1;
        }
    }
    if forced > 0 {
        tracing::info!(forced, "positions still masked after the last step were drawn from the clean-token predictions");
    }
    let tokens = match cfg.decode_source {
        DecodeSource::DiscreteTokens => x,
        DecodeSource::NnFromLatent => {
            let cb = codebook.ok_or_else(|| input("nearest-neighbour decoding needs a codebook"))?;
            cb.decode_nn(&z)?
        }
    };
    Ok(SampleOutput { tokens, latents: z, forced_unmasks: forced, forward_calls })
}
