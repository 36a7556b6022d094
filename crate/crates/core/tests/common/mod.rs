//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use ccdd_core::batch::{LatentBatch, TokenBatch};
use ccdd_core::denoiser::{Arch, Denoiser, DenoiserConfig, OutputCotangent};
use ccdd_core::rng::SeedStream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut impl Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

pub fn tiny_config(arch: Arch) -> DenoiserConfig {
    DenoiserConfig {
        arch,
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_latent: 8,
        vocab: 8,
        n_experts: 3,
        mlp_ratio: 2,
        freq_dim: 8,
        ..DenoiserConfig::default()
    }
}

/// A network with every parameter drawn at a generic scale, so no gate sits at zero.
pub fn generic_model(cfg: DenoiserConfig, seed: u64) -> Denoiser {
    let mut m = Denoiser::new(cfg, SeedStream::new(seed)).unwrap();
    m.params.randomize(0.3, SeedStream::new(seed).fork(99));
    m
}

pub struct Inputs {
    pub x: TokenBatch,
    pub z: LatentBatch,
    pub t: Vec<f64>,
    pub drop: Vec<bool>,
}

pub fn random_inputs(cfg: &DenoiserConfig, batch: usize, len: usize, seed: u64) -> Inputs {
    let mut rng = SeedStream::new(seed).rng();
    let ids = (0..batch * len).map(|_| rng.random_range(0..=cfg.vocab as u32)).collect();
    let z = (0..batch * len * cfg.d_latent).map(|_| normal(&mut rng)).collect();
    Inputs {
        x: TokenBatch::new(batch, len, cfg.vocab, ids).unwrap(),
        z: LatentBatch::new(batch, len, cfg.d_latent, z).unwrap(),
        t: (0..batch).map(|_| rng.random_range(0.05..0.95)).collect(),
        drop: (0..batch).map(|b| b % 3 == 2).collect(),
    }
}

/// Per-block relative error between the reverse-mode directional derivative
/// and a central difference along a random direction.
pub fn gradient_check(arch: Arch, h: f64, seed: u64) -> Vec<(String, f64)> {
    let cfg = tiny_config(arch);
    let mut model = generic_model(cfg.clone(), seed);
    let inp = random_inputs(&cfg, 3, 4, seed + 1);
    let pass = model.forward(&inp.x, &inp.z, &inp.t, &inp.drop).unwrap();
    let mut rng = SeedStream::new(seed + 2).rng();
    let mut cot = OutputCotangent::zeros_like(pass.output());
    cot.eps_hat.iter_mut().for_each(|c| *c = normal(&mut rng));
    cot.logits.iter_mut().for_each(|c| *c = normal(&mut rng));
    let grads = pass.backward(&cot).unwrap();
    drop(pass);

    let objective = |m: &Denoiser| {
        let out = m.forward(&inp.x, &inp.z, &inp.t, &inp.drop).unwrap().into_output();
        let a: f64 = out.eps_hat.data.iter().zip(&cot.eps_hat).map(|(x, c)| x * c).sum();
        let b: f64 = out.logits.data.iter().zip(&cot.logits).map(|(x, c)| x * c).sum();
        a + b
    };
    let mut report = Vec::new();
    for i in 0..model.params.len() {
        let name = model.params.get(i).name.clone();
        let n = model.params.get(i).value.numel();
        let dir: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let analytic: f64 = grads.blocks[i].iter().zip(&dir).map(|(g, u)| g * u).sum();
        let base = model.params.get(i).value.data.clone();
        let shifted = |s: f64| base.iter().zip(&dir).map(|(v, u)| v + s * u).collect::<Vec<_>>();
        model.params.value_mut(i).data = shifted(h);
        let plus = objective(&model);
        model.params.value_mut(i).data = shifted(-h);
        let minus = objective(&model);
        model.params.value_mut(i).data = base;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        report.push((name, rel));
    }
    report
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Exact ε-prediction for data `N(mu, s²·I)` under `z_t = α z0 + σ ε`:
/// `E[ε | z_t] = σ (z_t - α μ) / (α² s² + σ²)`. Logits are flat.
pub struct GaussianOracle {
    pub mu: Vec<f64>,
    pub s: f64,
    pub vocab: usize,
    pub schedule: ccdd_core::schedules::ContinuousSchedule,
}

impl ccdd_core::denoiser::JointDenoiser for GaussianOracle {
    fn predict(
        &self,
        x_t: &TokenBatch,
        z_t: &LatentBatch,
        t: &[f64],
        _drop: &[bool],
    ) -> ccdd_core::Result<ccdd_core::denoiser::DenoiserOutput> {
        let mut eps = z_t.clone();
        let per = z_t.len * z_t.dim;
        for b in 0..z_t.batch {
            let (a, sig) = self.schedule.eval(t[b])?;
            let denom = a * a * self.s * self.s + sig * sig;
            for i in 0..per {
                let k = i % z_t.dim;
                let idx = b * per + i;
                eps.data[idx] = sig * (z_t.data[idx] - a * self.mu[k]) / denom;
            }
        }
        Ok(ccdd_core::denoiser::DenoiserOutput {
            eps_hat: eps,
            logits: ccdd_core::denoiser::Logits {
                batch: x_t.batch,
                len: x_t.len,
                vocab_augmented: self.vocab + 1,
                data: vec![0.0; x_t.batch * x_t.len * (self.vocab + 1)],
            },
        })
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn d_latent(&self) -> usize {
        self.mu.len()
    }
}

/// Config from `key=value` overrides on top of the defaults.
pub fn run_config(overrides: &[(&str, &str)]) -> ccdd_core::config::RunConfig {
    let pairs: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let mut cfg = ccdd_core::config::RunConfig::default();
    cfg.apply(&pairs).unwrap();
    cfg
}

/// A small, fast run for session-level tests.
pub fn small_run(extra: &[(&str, &str)]) -> ccdd_core::config::RunConfig {
    let mut base = vec![
        ("d_model", "16"),
        ("n_heads", "2"),
        ("mlp_ratio", "2"),
        ("freq_dim", "8"),
        ("d_latent", "8"),
        ("seq_len", "8"),
        ("batch_size", "8"),
        ("n_validation", "16"),
        ("warmup_steps", "5"),
        ("lr", "3e-3"),
    ];
    base.extend_from_slice(extra);
    run_config(&base)
}
