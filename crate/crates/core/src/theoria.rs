//! Desk-scale checks of the constructive theory: looped rollouts as Euler
//! integration, order-one operator splitting, support atomicity of the
//! discrete forward law, and information decay under corruption.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::batch::{LatentBatch, TokenBatch};
use crate::corruption::{corrupt_continuous, corrupt_discrete};
use crate::embedder::Codebook;
use crate::error::{config, input, Result};
use crate::rng::SeedStream;
use crate::schedules::{ContinuousSchedule, DiscreteSchedule};

/// A residual block `Φ(h) = h + Δ(h)` with `Δ(h)_j = tanh((h_j + mean_k h_k) W1 + b1) W2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopedBlock {
    pub len: usize,
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl LoopedBlock {
    pub fn random(len: usize, dim: usize, hidden: usize, scale: f64, stream: SeedStream) -> Self {
        let mut rng = stream.rng();
        let mut draw = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
        };
        let w1 = draw(dim * hidden, scale / (dim as f64).sqrt());
        let b1 = draw(hidden, 0.1);
        let w2 = draw(hidden * dim, scale / (hidden as f64).sqrt());
        Self { len, dim, hidden, w1, b1, w2 }
    }

    pub fn identity(len: usize, dim: usize) -> Self {
        Self { len, dim, hidden: 1, w1: vec![0.0; dim], b1: vec![0.0], w2: vec![0.0; dim] }
    }

    /// `Δ(h)`, the residual update.
    pub fn delta(&self, h: &[f64]) -> Vec<f64> {
        let (l, d, k) = (self.len, self.dim, self.hidden);
        let mut mean = vec![0.0; d];
        for j in 0..l {
            for c in 0..d {
                mean[c] += h[j * d + c] / l as f64;
            }
        }
        let mut out = vec![0.0; l * d];
        for j in 0..l {
            let mut a = self.b1.clone();
            for c in 0..d {
                let x = h[j * d + c] + mean[c];
                for u in 0..k {
                    a[u] += x * self.w1[c * k + u];
                }
            }
            for u in 0..k {
                let g = a[u].tanh();
                for c in 0..d {
                    out[j * d + c] += g * self.w2[u * d + c];
                }
            }
        }
        out
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        h.iter().zip(self.delta(h)).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopedComparison {
    pub euler: Vec<Vec<f64>>,
    pub looped: Vec<Vec<f64>>,
    pub max_abs_gap: f64,
}

/// Rolls `block` `T` times, and integrates `v(z) = T·(Φ(z) - z)` with Euler steps of `1/T`.
pub fn simulate_looped_via_euler(block: &LoopedBlock, h0: &[f64], steps: usize) -> Result<LoopedComparison> {
    if steps == 0 {
        return Err(input("the rollout needs at least one step"));
    }
    if h0.len() != block.len * block.dim {
        return Err(input("initial state does not match the block shape"));
    }
    let dt = 1.0 / steps as f64;
    let scale = steps as f64;
    let mut euler = vec![h0.to_vec()];
    let mut looped = vec![h0.to_vec()];
    for k in 0..steps {
        let z = &euler[k];
        let phi = block.apply(z);
        let next: Vec<f64> = z.iter().zip(&phi).map(|(zi, pi)| zi + dt * (scale * (pi - zi))).collect();
        euler.push(next);
        let h = block.apply(&looped[k]);
        looped.push(h);
    }
    let max_abs_gap = euler
        .iter()
        .zip(&looped)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(LoopedComparison { euler, looped, max_abs_gap })
}

/// A time-dependent vector field on `R^n`.
pub type VectorField<'a> = dyn Fn(&[f64], f64) -> Vec<f64> + 'a;

/// Per-step map `z ↦ z + Δt·v(z, t_k)`: one loop iteration of the emulating block.
pub struct EulerStepBlock<'a> {
    pub field: &'a VectorField<'a>,
    pub dt: f64,
}

impl EulerStepBlock<'_> {
    pub fn apply(&self, z: &[f64], t: f64) -> Vec<f64> {
        let v = (self.field)(z, t);
        z.iter().zip(v).map(|(a, b)| a + self.dt * b).collect()
    }
}

fn rk4(field: &VectorField, z0: &[f64], horizon: f64, steps: usize) -> Vec<f64> {
    let h = horizon / steps as f64;
    let mut z = z0.to_vec();
    let axpy = |z: &[f64], k: &[f64], a: f64| -> Vec<f64> { z.iter().zip(k).map(|(x, y)| x + a * y).collect() };
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = field(&z, t);
        let k2 = field(&axpy(&z, &k1, h / 2.0), t + h / 2.0);
        let k3 = field(&axpy(&z, &k2, h / 2.0), t + h / 2.0);
        let k4 = field(&axpy(&z, &k3, h), t + h);
        for c in 0..z.len() {
            z[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
    }
    z
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorReport {
    pub meshes: Vec<usize>,
    pub errors: Vec<f64>,
    /// Fitted order of convergence (slope of log error against log step).
    pub slope: f64,
}

/// Rolls per-step Euler blocks on each mesh and compares terminal states with a fine RK4 reference.
pub fn looped_emulates_integrator(
    field: &VectorField,
    z0: &[f64],
    horizon: f64,
    meshes: &[usize],
    reference_steps: usize,
) -> Result<IntegratorReport> {
    if meshes.is_empty() || meshes.contains(&0) || reference_steps == 0 {
        return Err(input("meshes and reference steps must be positive"));
    }
    let reference = rk4(field, z0, horizon, reference_steps);
    let mut errors = Vec::with_capacity(meshes.len());
    for &t_steps in meshes {
        let block = EulerStepBlock { field, dt: horizon / t_steps as f64 };
        let mut z = z0.to_vec();
        for k in 0..t_steps {
            z = block.apply(&z, k as f64 * block.dt);
        }
        errors.push(z.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let steps: Vec<f64> = meshes.iter().map(|&m| horizon / m as f64).collect();
    let slope = if meshes.len() >= 2 && errors.iter().all(|e| *e > 0.0) { log_log_slope(&steps, &errors) } else { f64::NAN };
    Ok(IntegratorReport { meshes: meshes.to_vec(), errors, slope })
}

/// Two-state chain with rates `g01` (0→1) and `g10` (1→0), modulating an OU process
/// `dz = κ(m_x - z)dt + s dW` with `m_0 = -1`, `m_1 = +1`, tracked on a finite-volume grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledToyProcess {
    pub g01: f64,
    pub g10: f64,
    pub kappa: f64,
    pub noise: f64,
    pub cells: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub horizon: f64,
    pub reference_dt: f64,
    pub initial_p0: f64,
    pub initial_mean: f64,
    pub initial_std: f64,
}

impl Default for CoupledToyProcess {
    fn default() -> Self {
        Self {
            g01: 1.0,
            g10: 1.0,
            kappa: 2.0,
            noise: 0.7,
            cells: 512,
            z_min: -4.0,
            z_max: 4.0,
            horizon: 1.0,
            reference_dt: 1e-4,
            initial_p0: 0.7,
            initial_mean: 0.0,
            initial_std: 0.3,
        }
    }
}

/// Joint law as cell masses: `[state 0 cells | state 1 cells]`.
type JointLaw = Vec<f64>;

impl CoupledToyProcess {
    fn dz(&self) -> f64 {
        (self.z_max - self.z_min) / self.cells as f64
    }

    fn validate(&self, dt: f64) -> Result<()> {
        if self.g01 < 0.0 || self.g10 < 0.0 || self.kappa <= 0.0 || self.noise <= 0.0 || self.cells < 8 {
            return Err(config("toy process needs nonnegative rates, positive κ and noise, and at least 8 cells"));
        }
        if self.reference_dt > 1e-4 {
            return Err(config("reference step must be at most 1e-4"));
        }
        let dz = self.dz();
        let diff = 0.5 * self.noise * self.noise;
        let max_drift = self.kappa * (self.z_max.abs().max(self.z_min.abs()) + 1.0);
        if max_drift * dz / diff >= 2.0 {
            return Err(config("grid too coarse: cell Péclet number must stay below 2"));
        }
        let stiff = 4.0 * diff / (dz * dz) + 2.0 * max_drift / dz + self.g01 + self.g10;
        if dt * stiff > 2.5 {
            return Err(config(format!("unstable step {dt}: explicit stability needs dt·ρ ≤ 2.5, got {}", dt * stiff)));
        }
        Ok(())
    }

    fn initial(&self) -> JointLaw {
        let n = self.cells;
        let dz = self.dz();
        let mut p = vec![0.0; 2 * n];
        let mut total = 0.0;
        for i in 0..n {
            let z = self.z_min + (i as f64 + 0.5) * dz;
            let w = (-0.5 * ((z - self.initial_mean) / self.initial_std).powi(2)).exp();
            p[i] = w;
            total += w;
        }
        for i in 0..n {
            let w = p[i] / total;
            p[i] = self.initial_p0 * w;
            p[n + i] = (1.0 - self.initial_p0) * w;
        }
        p
    }

    /// Fokker–Planck flux divergence for state `x` (zero-flux walls), cell masses in and out.
    fn fp(&self, x: usize, p: &[f64], out: &mut [f64]) {
        let n = self.cells;
        let dz = self.dz();
        let diff = 0.5 * self.noise * self.noise;
        let target = if x == 0 { -1.0 } else { 1.0 };
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..n - 1 {
            let z = self.z_min + (i + 1) as f64 * dz;
            let drift = self.kappa * (target - z);
            // Masses to densities: ρ = p/dz.
            let flux = drift * 0.5 * (p[i] + p[i + 1]) / dz - diff * (p[i + 1] - p[i]) / (dz * dz);
            out[i] -= flux;
            out[i + 1] += flux;
        }
    }

    fn chain(&self, p: &[f64], out: &mut [f64]) {
        let n = self.cells;
        for i in 0..n {
            let (a, b) = (p[i], p[n + i]);
            out[i] = -self.g01 * a + self.g10 * b;
            out[n + i] = self.g01 * a - self.g10 * b;
        }
    }

    fn rk4_generic(&self, p: &mut Vec<f64>, dt: f64, steps: usize, rhs: &dyn Fn(&[f64], &mut [f64])) {
        let m = p.len();
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut tmp = vec![0.0; m];
        for _ in 0..steps {
            rhs(p, &mut k1);
            for i in 0..m {
                tmp[i] = p[i] + 0.5 * dt * k1[i];
            }
            rhs(&tmp, &mut k2);
            for i in 0..m {
                tmp[i] = p[i] + 0.5 * dt * k2[i];
            }
            rhs(&tmp, &mut k3);
            for i in 0..m {
                tmp[i] = p[i] + dt * k3[i];
            }
            rhs(&tmp, &mut k4);
            for i in 0..m {
                p[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }

    fn full_rhs(&self, p: &[f64], out: &mut [f64]) {
        let n = self.cells;
        let (o0, o1) = out.split_at_mut(n);
        self.fp(0, &p[..n], o0);
        self.fp(1, &p[n..], o1);
        let mut c = vec![0.0; 2 * n];
        self.chain(p, &mut c);
        out.iter_mut().zip(c).for_each(|(o, v)| *o += v);
    }

    /// Fully coupled reference law at the horizon.
    pub fn reference(&self) -> Result<JointLaw> {
        self.validate(self.reference_dt)?;
        let steps = (self.horizon / self.reference_dt).round() as usize;
        let mut p = self.initial();
        self.rk4_generic(&mut p, self.horizon / steps as f64, steps, &|p, o| self.full_rhs(p, o));
        Ok(p)
    }

    /// `exp(Δt·G)` for the two-state chain, applied cellwise.
    fn chain_exact(&self, p: &mut [f64], dt: f64) {
        let n = self.cells;
        let r = self.g01 + self.g10;
        let (a01, a10) = if r > 0.0 {
            let e = 1.0 - (-r * dt).exp();
            (self.g01 / r * e, self.g10 / r * e)
        } else {
            (0.0, 0.0)
        };
        for i in 0..n {
            let (a, b) = (p[i], p[n + i]);
            p[i] = (1.0 - a01) * a + a10 * b;
            p[n + i] = a01 * a + (1.0 - a10) * b;
        }
    }

    /// Lie–Trotter splitting with macro step `dt`: exact chain step, then the frozen-state continuous flow.
    pub fn split(&self, dt: f64) -> Result<JointLaw> {
        let macro_steps = (self.horizon / dt).round() as usize;
        if macro_steps == 0 || ((macro_steps as f64) * dt - self.horizon).abs() > 1e-9 {
            return Err(config("macro step must divide the horizon"));
        }
        let sub = (dt / self.reference_dt).ceil() as usize;
        let h = dt / sub as f64;
        self.validate(h)?;
        let n = self.cells;
        let mut p = self.initial();
        for _ in 0..macro_steps {
            self.chain_exact(&mut p, dt);
            self.rk4_generic(&mut p, h, sub, &|p, o| {
                let (o0, o1) = o.split_at_mut(n);
                self.fp(0, &p[..n], o0);
                self.fp(1, &p[n..], o1);
            });
        }
        Ok(p)
    }
}

/// Total variation between two joint laws given as cell masses.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Terminal total-variation gap between the split and fully coupled evolutions.
pub fn trotter_error(process: &CoupledToyProcess, dt: f64) -> Result<f64> {
    let reference = process.reference()?;
    Ok(total_variation(&process.split(dt)?, &reference))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrotterReport {
    pub dts: Vec<f64>,
    pub gaps: Vec<f64>,
    pub slope: f64,
}

/// Gaps for several macro steps against one shared reference.
pub fn trotter_sweep(process: &CoupledToyProcess, dts: &[f64]) -> Result<TrotterReport> {
    let reference = process.reference()?;
    let gaps = dts.iter().map(|&dt| Ok(total_variation(&process.split(dt)?, &reference))).collect::<Result<Vec<_>>>()?;
    let slope = if dts.len() >= 2 { log_log_slope(dts, &gaps) } else { f64::NAN };
    Ok(TrotterReport { dts: dts.to_vec(), gaps, slope })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportReport {
    pub n_samples: usize,
    pub distinct_discrete: usize,
    pub discrete_bound: usize,
    pub distinct_continuous: usize,
}

fn distinct_rows(z: &LatentBatch) -> usize {
    let per = z.len * z.dim;
    let set: HashSet<Vec<u64>> = z.data.chunks(per).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
    set.len()
}

/// Counts distinct embedded discrete forward states and distinct continuous forward draws at time `t`.
pub fn support_atomicity_check(
    codebook: &Codebook,
    len: usize,
    t: f64,
    n_samples: usize,
    discrete: &DiscreteSchedule,
    continuous: &ContinuousSchedule,
    stream: SeedStream,
) -> Result<SupportReport> {
    let vocab = codebook.vocab;
    if vocab * len > 16 {
        return Err(config(format!("enumeration too large: V·L = {} exceeds 16", vocab * len)));
    }
    if n_samples == 0 {
        return Err(input("need at least one sample"));
    }
    let mut rng = stream.fork(0).rng();
    let ids = (0..n_samples * len).map(|_| rng.random_range(0..vocab as u32)).collect();
    let x0 = TokenBatch::new(n_samples, len, vocab, ids)?;
    let x_t = corrupt_discrete(&x0, &vec![t; n_samples], discrete, stream.fork(1))?;
    let distinct_discrete = distinct_rows(&codebook.encode_with_erasures(&x_t));
    let fixed = TokenBatch::new(1, len, vocab, x0.row(0).to_vec())?;
    let z0 = codebook.encode(&fixed)?;
    let mut tiled = LatentBatch::zeros(n_samples, len, codebook.dim);
    for b in 0..n_samples {
        tiled.data[b * len * codebook.dim..(b + 1) * len * codebook.dim].copy_from_slice(&z0.data);
    }
    let (z_t, _) = corrupt_continuous(&tiled, &vec![t; n_samples], continuous, stream.fork(2))?;
    Ok(SupportReport {
        n_samples,
        distinct_discrete,
        discrete_bound: (vocab + 1).pow(len as u32),
        distinct_continuous: distinct_rows(&z_t),
    })
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Exact `I(x0; x_t)` for one position from the forward marginal, source law `p0` over `V` tokens.
pub fn mutual_information(p0: &[f64], schedule: &DiscreteSchedule, t: f64) -> Result<f64> {
    let vocab = p0.len();
    let eta = schedule.eta(t)?;
    let pi = schedule.noise(vocab);
    let aug = vocab + 1;
    let mut joint = vec![0.0; vocab * aug];
    for x in 0..vocab {
        for y in 0..aug {
            let k = eta * if x == y { 1.0 } else { 0.0 } + (1.0 - eta) * pi[y];
            joint[x * aug + y] = p0[x] * k;
        }
    }
    let mut py = vec![0.0; aug];
    for x in 0..vocab {
        for y in 0..aug {
            py[y] += joint[x * aug + y];
        }
    }
    let mut mi = 0.0;
    for x in 0..vocab {
        for y in 0..aug {
            let j = joint[x * aug + y];
            if j > 0.0 {
                mi += j * (j / (p0[x] * py[y])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleBounds {
    pub token_entropy: f64,
    pub log_vocab: f64,
    pub mutual_information: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoDecayReport {
    pub t: Vec<f64>,
    pub mi: Vec<f64>,
    pub source_entropy: f64,
    /// Largest increase of the MI between consecutive grid points (≤ 0 when non-increasing).
    pub max_increase: f64,
    pub ensemble: EnsembleBounds,
}

/// Token entropy and `I(ℓ; token)` for an equally weighted ensemble of logit vectors.
pub fn ensemble_bounds(logits: &[Vec<f64>]) -> Result<EnsembleBounds> {
    let vocab = logits.first().map(|l| l.len()).ok_or_else(|| input("empty logit ensemble"))?;
    let mut mix = vec![0.0; vocab];
    let mut cond = 0.0;
    for l in logits {
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / z).collect();
        cond += entropy(&p) / logits.len() as f64;
        for v in 0..vocab {
            mix[v] += p[v] / logits.len() as f64;
        }
    }
    let h = entropy(&mix);
    Ok(EnsembleBounds { token_entropy: h, log_vocab: (vocab as f64).ln(), mutual_information: h - cond })
}

/// Exact MI along a time grid plus the logit-ensemble entropy bounds.
pub fn info_decay_suite(
    p0: &[f64],
    schedule: &DiscreteSchedule,
    grid: &[f64],
    n_ensemble: usize,
    stream: SeedStream,
) -> Result<InfoDecayReport> {
    let vocab = p0.len();
    if vocab == 0 || vocab > 8 {
        return Err(config("the brute-force regime needs 1 ≤ V ≤ 8"));
    }
    let mi = grid.iter().map(|&t| mutual_information(p0, schedule, t)).collect::<Result<Vec<_>>>()?;
    let max_increase = mi.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let mut rng = stream.rng();
    let ensemble: Vec<Vec<f64>> =
        (0..n_ensemble.max(1)).map(|_| (0..vocab).map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()).collect();
    Ok(InfoDecayReport {
        t: grid.to_vec(),
        mi,
        source_entropy: entropy(p0),
        max_increase,
        ensemble: ensemble_bounds(&ensemble)?,
    })
}

/// One row of the verification table.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRow {
    pub name: String,
    pub value: f64,
    pub requirement: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub rows: Vec<VerifyRow>,
    /// `kind,x,y` rows: meshes, gaps and fitted slopes.
    pub series: Vec<(String, f64, f64)>,
}

impl VerifyOutcome {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4);
        let mut out = format!("{:<width$}  {:>14}  {:<28}  result\n", "check", "value", "requirement");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>14.6e}  {:<28}  {}\n",
                r.name,
                r.value,
                r.requirement,
                if r.pass { "pass" } else { "FAIL" }
            ));
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("kind,x,y\n");
        for (k, x, y) in &self.series {
            out.push_str(&format!("{k},{x:.17e},{y:.17e}\n"));
        }
        out
    }
}

/// Runs every theory check with its default configuration.
pub fn verify_suite(seed: u64) -> Result<VerifyOutcome> {
    let stream = SeedStream::new(seed);
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut row = |name: &str, value: f64, requirement: &str, pass: bool| {
        rows.push(VerifyRow { name: name.to_string(), value, requirement: requirement.to_string(), pass });
    };

    let block = LoopedBlock::random(4, 8, 16, 0.5, stream.fork(1));
    let mut rng = stream.fork(2).rng();
    let h0: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut gap: f64 = 0.0;
    for steps in 1..=128 {
        gap = gap.max(simulate_looped_via_euler(&block, &h0, steps)?.max_abs_gap);
    }
    row("euler_equals_loop_gap", gap, "<= 1e-12 for T in 1..=128", gap <= 1e-12);

    let field = |z: &[f64], _t: f64| z.iter().map(|v| -v).collect::<Vec<f64>>();
    let meshes = [16, 32, 64, 128];
    let rep = looped_emulates_integrator(&field, &[1.0], 1.0, &meshes, 1024)?;
    for (m, e) in rep.meshes.iter().zip(&rep.errors) {
        series.push(("integrator_error".to_string(), 1.0 / *m as f64, *e));
    }
    series.push(("integrator_slope".to_string(), 0.0, rep.slope));
    row("integrator_order", rep.slope, "in [0.8, 1.2]", (0.8..=1.2).contains(&rep.slope));
    let leading = (-1.0f64).exp() / (2.0 * 16.0);
    let ratio = rep.errors[0] / leading;
    row("integrator_t16_vs_leading_term", ratio, "ratio in [1/3, 3]", (1.0 / 3.0..=3.0).contains(&ratio));

    let decoupled = CoupledToyProcess { g01: 0.0, g10: 0.0, ..Default::default() };
    let g = trotter_error(&decoupled, 1.0 / 16.0)?;
    row("trotter_decoupled_gap", g, "< 1e-3", g < 1e-3);
    let coupled = CoupledToyProcess::default();
    let dts = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
    let rep = trotter_sweep(&coupled, &dts)?;
    for (dt, gap) in rep.dts.iter().zip(&rep.gaps) {
        series.push(("trotter_gap".to_string(), *dt, *gap));
    }
    series.push(("trotter_slope".to_string(), 0.0, rep.slope));
    row("trotter_order", rep.slope, "in [0.8, 1.2]", (0.8..=1.2).contains(&rep.slope));
    let one = trotter_error(&coupled, 1.0)?;
    series.push(("trotter_gap".to_string(), 1.0, one));
    row("trotter_refinement", one / rep.gaps[0], "gap(1) / gap(1/16) > 1", one > rep.gaps[0]);

    let p0 = vec![0.25; 4];
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    for (name, sched) in [
        ("masked_linear", DiscreteSchedule::MaskedLinear),
        ("masked_cosine", DiscreteSchedule::MaskedCustom(crate::schedules::EtaCurve::Cosine)),
        ("uniform", DiscreteSchedule::Uniform { rate: 3.0 }),
    ] {
        let rep = info_decay_suite(&p0, &sched, &grid, 64, stream.fork(3))?;
        row(&format!("mi_nonincreasing_{name}"), rep.max_increase, "max step increase <= 1e-12", rep.max_increase <= 1e-12);
        if name == "masked_linear" {
            let e = &rep.ensemble;
            row("ensemble_entropy_le_log_v", e.token_entropy - e.log_vocab, "<= 0", e.token_entropy <= e.log_vocab + 1e-12);
            row("ensemble_mi_le_entropy", e.mutual_information - e.token_entropy, "<= 0", e.mutual_information <= e.token_entropy + 1e-12);
        }
    }
    let erasure = mutual_information(&p0, &DiscreteSchedule::MaskedLinear, 0.5)?;
    let err = (erasure - 0.5 * 4f64.ln()).abs();
    row("mi_erasure_value", err, "|I - 0.5 ln 4| <= 1e-12", err <= 1e-12);

    let cb = Codebook::build(crate::embedder::CodebookMode::OnehotSimplex, 2, 2, stream.fork(4))?;
    let rep = support_atomicity_check(
        &cb,
        2,
        0.5,
        10_000,
        &DiscreteSchedule::MaskedLinear,
        &ContinuousSchedule::ConcaveSqrt,
        stream.fork(5),
    )?;
    row(
        "discrete_support_bound",
        rep.distinct_discrete as f64,
        &format!("<= {}", rep.discrete_bound),
        rep.distinct_discrete <= rep.discrete_bound,
    );
    row(
        "continuous_draws_distinct",
        rep.distinct_continuous as f64,
        &format!("== {}", rep.n_samples),
        rep.distinct_continuous == rep.n_samples,
    );
    Ok(VerifyOutcome { rows, series })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_and_identity_block() {
        let b = LoopedBlock::random(2, 3, 5, 0.7, SeedStream::new(1));
        let h0 = vec![0.3, -0.2, 1.0, 0.5, 0.0, -1.5];
        let r = simulate_looped_via_euler(&b, &h0, 1).unwrap();
        assert_eq!(r.max_abs_gap, 0.0);
        let id = LoopedBlock::identity(2, 3);
        let r = simulate_looped_via_euler(&id, &h0, 17).unwrap();
        assert_eq!(r.max_abs_gap, 0.0);
        assert!(r.euler.iter().all(|z| z == &h0));
    }

    #[test]
    fn zero_field_is_exact() {
        let field = |z: &[f64], _t: f64| vec![0.0; z.len()];
        let r = looped_emulates_integrator(&field, &[0.4, -2.0], 1.0, &[4, 8], 64).unwrap();
        assert_eq!(r.errors, vec![0.0, 0.0]);
    }

    #[test]
    fn erasure_channel_mi() {
        let p0 = [0.1, 0.2, 0.3, 0.4];
        let h = entropy(&p0);
        for t in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let mi = mutual_information(&p0, &DiscreteSchedule::MaskedLinear, t).unwrap();
            assert!((mi - (1.0 - t) * h).abs() < 1e-12);
        }
    }

    #[test]
    fn cfl_violation_is_a_config_error() {
        let p = CoupledToyProcess { cells: 4096, ..Default::default() };
        assert!(matches!(trotter_error(&p, 0.5), Err(crate::Error::Config(_))));
    }

    #[test]
    fn oversize_support_enumeration_is_rejected() {
        let cb = Codebook::build(crate::embedder::CodebookMode::OnehotSimplex, 4, 4, SeedStream::new(0)).unwrap();
        let r = support_atomicity_check(
            &cb,
            5,
            0.5,
            10,
            &DiscreteSchedule::MaskedLinear,
            &ContinuousSchedule::ConcaveSqrt,
            SeedStream::new(1),
        );
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }
}
