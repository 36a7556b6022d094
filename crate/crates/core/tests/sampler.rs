mod common;

use ccdd_core::batch::LatentBatch;
use ccdd_core::denoiser::{Arch, JointDenoiser};
use ccdd_core::rng::SeedStream;
use ccdd_core::sampler::{
    cfg_logits, posterior_discrete, posterior_enumerated_eta, posterior_masked, sample, step_continuous, SamplerConfig,
    VarianceMode,
};
use ccdd_core::schedules::{ContinuousSchedule, DiscreteSchedule, SchedulePair};
use common::{generic_model, mean_var, normal, random_inputs, tiny_config, GaussianOracle};
use proptest::prelude::*;
use rand::Rng;

/// Reverse kernel from the joint law of `(x0, x_s, x_t)` summed over `x0`.
fn brute_force_posterior(x_t: usize, probs: &[f64], eta_t: f64, eta_s: f64, pi: &[f64]) -> Vec<f64> {
    let aug = probs.len() + 1;
    let fwd_s = |x0: usize, xs: usize| eta_s * ((x0 == xs) as u8 as f64) + (1.0 - eta_s) * pi[xs];
    let step = |xs: usize, xt: usize| {
        let k = eta_t / eta_s;
        k * ((xs == xt) as u8 as f64) + (1.0 - k) * pi[xt]
    };
    let mut joint = vec![0.0; aug];
    for (x0, &p0) in probs.iter().enumerate() {
        for (xs, j) in joint.iter_mut().enumerate() {
            *j += p0 * fwd_s(x0, xs) * step(xs, x_t);
        }
    }
    let z: f64 = joint.iter().sum();
    joint.iter().map(|j| j / z).collect()
}

fn random_probs(v: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..v).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|r| r / z).collect()
}

#[test]
fn masked_closed_form_matches_enumeration() {
    let mut rng = SeedStream::new(1).rng();
    for _ in 0..10_000 {
        let v = rng.random_range(1..=16);
        let probs = random_probs(v, &mut rng);
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        let (eta_t, eta_s) = if a < b { (a, b) } else { (b, a) };
        let x_t = if rng.random::<f64>() < 0.5 { v as u32 } else { rng.random_range(0..v as u32) };
        let mut pi = vec![0.0; v + 1];
        pi[v] = 1.0;
        let closed = posterior_masked(x_t, &probs, eta_t, eta_s).unwrap();
        let enumerated = posterior_enumerated_eta(x_t, &probs, eta_t, eta_s, &pi).unwrap();
        let brute = brute_force_posterior(x_t as usize, &probs, eta_t, eta_s, &pi);
        for i in 0..=v {
            assert!((closed[i] - enumerated[i]).abs() < 1e-12);
            assert!((closed[i] - brute[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_enumeration_matches_brute_force() {
    let mut rng = SeedStream::new(2).rng();
    let sched = DiscreteSchedule::Uniform { rate: 2.5 };
    for _ in 0..2000 {
        let v = rng.random_range(2..=10);
        let probs = random_probs(v, &mut rng);
        let a: f64 = rng.random_range(0.01..0.99);
        let b: f64 = rng.random_range(0.01..0.99);
        let (s, t) = if a < b { (a, b) } else { (b, a) };
        if t - s < 1e-6 {
            continue;
        }
        let x_t = rng.random_range(0..v as u32);
        let got = posterior_discrete(x_t, &probs, t, s, &sched).unwrap();
        let want = brute_force_posterior(x_t as usize, &probs, sched.eta(t).unwrap(), sched.eta(s).unwrap(), &sched.noise(v));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

/// Variance ratio after deterministic DDIM on `N(μ, s²)` data with an exact ε oracle.
/// Each step maps `z_t - α_t μ` linearly, by `(α_s α_t s² + σ_s σ_t) / (α_t² s² + σ_t²)`.
fn ddim_variance_ratio(schedule: &ContinuousSchedule, s: f64, grid: &[f64]) -> f64 {
    let var = |t: f64| {
        let (a, sig) = schedule.eval(t).unwrap();
        a * a * s * s + sig * sig
    };
    let mut v = 1.0;
    for w in grid.windows(2) {
        let (a, sa) = schedule.eval(w[0]).unwrap();
        let (b, sb) = schedule.eval(w[1]).unwrap();
        let f = (a * b * s * s + sa * sb) / var(w[0]);
        v *= f * f;
    }
    v / (s * s)
}

fn ddim_moments(schedule: ContinuousSchedule, mu: Vec<f64>, s: f64, seed: u64) -> (Vec<f64>, f64, f64) {
    let dim = mu.len();
    let oracle = GaussianOracle { mu, s, vocab: 2, schedule };
    let cfg = SamplerConfig { n_steps: 64, eta_ddpm: 0.0, ..Default::default() };
    let pair = SchedulePair { continuous: schedule, pairing: ccdd_core::schedules::Pairing::Synchronous, ..Default::default() };
    let out = sample(&oracle, &pair, &cfg, None, 1, 10_000, SeedStream::new(seed)).unwrap();
    let mut means = Vec::new();
    let mut pooled = 0.0;
    for k in 0..dim {
        let xs: Vec<f64> = out.latents.data.iter().skip(k).step_by(dim).copied().collect();
        let (m, v) = mean_var(&xs);
        means.push(m);
        pooled += v / dim as f64;
    }
    let grid: Vec<f64> = cfg.grid().iter().map(|t| t.min(ccdd_core::schedules::T_ALPHA_CLAMP)).collect();
    (means, pooled / (s * s), ddim_variance_ratio(&schedule, s, &grid))
}

#[test]
fn ddim_recovers_gaussian_data() {
    let mu = vec![10.0, -12.0, 8.0, 15.0, -9.0, 11.0, 10.0, -14.0];
    let (means, ratio, predicted) = ddim_moments(ContinuousSchedule::LinearAlpha, mu.clone(), 2.0, 3);
    for (m, want) in means.iter().zip(&mu) {
        assert!((m - want).abs() <= 0.01 * want.abs(), "mean {m} vs {want}");
    }
    assert!((ratio - 1.0).abs() <= 0.05, "variance ratio {ratio}");
    let se = (2.0 / 80_000.0f64).sqrt();
    assert!((ratio - predicted).abs() < 5.0 * se, "{ratio} vs predicted {predicted}");
}

#[test]
fn ddim_shrinkage_matches_its_discrete_map() {
    // On the uniform grid the concave schedule loses about 9% of the variance at s = 0.5.
    let (means, ratio, predicted) = ddim_moments(ContinuousSchedule::ConcaveSqrt, vec![2.0; 8], 0.5, 4);
    assert!(means.iter().all(|m| (m - 2.0).abs() < 0.02));
    let se = (2.0 / 80_000.0f64).sqrt();
    assert!((ratio - predicted).abs() < 5.0 * se, "{ratio} vs predicted {predicted}");
    assert!(predicted < 0.95);
}

#[test]
fn exact_posterior_step_is_the_conjugate_gaussian() {
    let schedule = ContinuousSchedule::ConcaveSqrt;
    let (t, s) = (0.7, 0.4);
    let (a_t, sig_t) = schedule.eval(t).unwrap();
    let (a_s, sig_s) = schedule.eval(s).unwrap();
    let (z0, zt) = (0.9, 0.3);
    let n = 100_000;
    let eps = (zt - a_t * z0) / sig_t;
    let z = LatentBatch::new(1, n, 1, vec![zt; n]).unwrap();
    let e = LatentBatch::new(1, n, 1, vec![eps; n]).unwrap();
    let out = step_continuous(&z, &e, t, s, &schedule, 1.0, VarianceMode::ExactPosterior, SeedStream::new(4)).unwrap();
    // q(z_s | z_t, z0) with α_{t|s} = α_t/α_s, σ²_{t|s} = σ_t² - α²_{t|s} σ_s².
    let a_ts = a_t / a_s;
    let var_ts = sig_t * sig_t - a_ts * a_ts * sig_s * sig_s;
    let mean = a_ts * sig_s * sig_s / (sig_t * sig_t) * zt + a_s * var_ts / (sig_t * sig_t) * z0;
    let var = sig_s * sig_s * var_ts / (sig_t * sig_t);
    let (m, v) = mean_var(&out.data);
    assert!((m - mean).abs() < 5.0 * (var / n as f64).sqrt(), "{m} vs {mean}");
    assert!((v - var).abs() < 5.0 * var * (2.0 / n as f64).sqrt(), "{v} vs {var}");
}

/// Passes through to a real model while recording every token state it is shown.
struct Recorder<'a> {
    inner: &'a dyn JointDenoiser,
    seen: std::cell::RefCell<Vec<Vec<u32>>>,
}

impl JointDenoiser for Recorder<'_> {
    fn predict(
        &self,
        x_t: &ccdd_core::TokenBatch,
        z_t: &LatentBatch,
        t: &[f64],
        drop: &[bool],
    ) -> ccdd_core::Result<ccdd_core::denoiser::DenoiserOutput> {
        self.seen.borrow_mut().push(x_t.ids.clone());
        self.inner.predict(x_t, z_t, t, drop)
    }
    fn vocab(&self) -> usize {
        self.inner.vocab()
    }
    fn d_latent(&self) -> usize {
        self.inner.d_latent()
    }
}

#[test]
fn masked_sampling_unmasks_monotonically() {
    let model = generic_model(tiny_config(Arch::Mdit), 5);
    let rec = Recorder { inner: &model, seen: Default::default() };
    let cfg = SamplerConfig { n_steps: 16, ..Default::default() };
    let out = sample(&rec, &SchedulePair::default(), &cfg, None, 6, 3, SeedStream::new(9)).unwrap();
    let mut states = rec.seen.into_inner();
    assert_eq!(states.len(), 16);
    assert!(states[0].iter().all(|&v| v == 8));
    states.push(out.tokens.ids.clone());
    for w in states.windows(2) {
        for (a, b) in w[0].iter().zip(&w[1]) {
            assert!(*a == 8 || a == b, "revealed token changed");
        }
    }
    assert!(out.tokens.ids.iter().all(|&v| v < 8));
    assert_eq!(out, sample(&model, &SchedulePair::default(), &cfg, None, 6, 3, SeedStream::new(9)).unwrap());
}

#[test]
fn once_revealed_a_token_stays() {
    let mut rng = SeedStream::new(6).rng();
    for _ in 0..1000 {
        let probs = random_probs(5, &mut rng);
        let x = rng.random_range(0..5u32);
        let p = posterior_discrete(x, &probs, 0.8, 0.3, &DiscreteSchedule::MaskedLinear).unwrap();
        assert_eq!(p[x as usize], 1.0);
    }
}

#[test]
fn single_token_vocabulary_is_deterministic() {
    let model = generic_model(ccdd_core::denoiser::DenoiserConfig { vocab: 1, ..tiny_config(Arch::Mmdit) }, 7);
    let out = sample(&model, &SchedulePair::default(), &SamplerConfig { n_steps: 8, ..Default::default() }, None, 5, 2, SeedStream::new(1))
        .unwrap();
    assert!(out.tokens.ids.iter().all(|&v| v == 0));
}

#[test]
fn guidance_weights_select_branches() {
    let cfg = tiny_config(Arch::Moedit);
    let model = generic_model(cfg.clone(), 8);
    let inp = random_inputs(&cfg, 2, 4, 9);
    let c = model.predict(&inp.x, &inp.z, &inp.t, &[false, false]).unwrap().logits;
    let u = model.predict(&inp.x, &inp.z, &inp.t, &[true, true]).unwrap().logits;
    assert_eq!(cfg_logits(&c, &u, 1.0).unwrap(), c);
    assert_eq!(cfg_logits(&c, &u, 0.0).unwrap(), u);
    let two = SamplerConfig { n_steps: 4, cfg_w: 2.0, ..Default::default() };
    let out = sample(&model, &SchedulePair::default(), &two, None, 4, 2, SeedStream::new(1)).unwrap();
    assert_eq!(out.forward_calls, 8);
}

#[test]
fn sampling_is_reproducible_and_seed_sensitive() {
    let model = generic_model(tiny_config(Arch::Mdit), 10);
    let pair = SchedulePair::default();
    let cfg = SamplerConfig { n_steps: 8, ..Default::default() };
    let a = sample(&model, &pair, &cfg, None, 8, 4, SeedStream::new(1)).unwrap();
    let b = sample(&model, &pair, &cfg, None, 8, 4, SeedStream::new(1)).unwrap();
    let c = sample(&model, &pair, &cfg, None, 8, 4, SeedStream::new(2)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.latents, c.latents);
}

#[test]
fn bad_sampler_settings_are_rejected() {
    let model = generic_model(tiny_config(Arch::Mdit), 10);
    let pair = SchedulePair::default();
    for cfg in [
        SamplerConfig { n_steps: 0, ..Default::default() },
        SamplerConfig { temperature: 0.0, ..Default::default() },
        SamplerConfig { eta_ddpm: -0.5, ..Default::default() },
    ] {
        assert!(sample(&model, &pair, &cfg, None, 4, 1, SeedStream::new(1)).is_err());
    }
    let z = LatentBatch::new(1, 1, 1, vec![normal(&mut SeedStream::new(0).rng())]).unwrap();
    assert!(step_continuous(&z, &z, 0.3, 0.5, &ContinuousSchedule::ConcaveSqrt, 1.0, VarianceMode::ForwardKernel, SeedStream::new(0)).is_err());
}

proptest! {
    #[test]
    fn posteriors_are_distributions(seed in 0u64..10_000, v in 1usize..12, masked in proptest::bool::ANY) {
        let mut rng = SeedStream::new(seed).rng();
        let probs = random_probs(v, &mut rng);
        let s: f64 = rng.random_range(0.0..0.98);
        let t: f64 = rng.random_range(s + 0.01..1.0);
        let x = if masked { v as u32 } else { rng.random_range(0..v as u32) };
        let p = posterior_discrete(x, &probs, t, s, &DiscreteSchedule::MaskedLinear).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&q| q >= 0.0));
    }
}
