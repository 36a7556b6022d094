//! Losses for both modalities, classifier-free-guidance dropout, the training
//! step, and the AdamW optimizer.

use rand::Rng;
use rayon::prelude::*;

use crate::batch::{LatentBatch, TokenBatch};
use crate::corruption::{corrupt_joint, JointCorruption, ReprMaskMode};
use crate::denoiser::{Denoiser, Logits, OutputCotangent};
use crate::embedder::Codebook;
use crate::error::{config, input, Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::rng::{tags, SeedStream};
use crate::schedules::{DiscreteSchedule, EtaCurve, SchedulePair, T_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaCont {
    Constant(f64),
}

impl LambdaCont {
    pub fn weight(&self, _t: f64) -> f64 {
        match *self {
            LambdaCont::Constant(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaDisc {
    /// `-η'_t / (1 - η_t)`, which is `1/t` for the linear masking schedule.
    Nelbo,
    Constant(f64),
}

impl LambdaDisc {
    pub fn weight(&self, t: f64, schedule: &DiscreteSchedule) -> Result<f64> {
        match *self {
            LambdaDisc::Constant(c) => Ok(c),
            LambdaDisc::Nelbo => match *schedule {
                DiscreteSchedule::MaskedLinear => Ok(1.0 / t),
                DiscreteSchedule::MaskedCustom(EtaCurve::Power(p)) => Ok(p / t),
                DiscreteSchedule::MaskedCustom(EtaCurve::Cosine) => {
                    let a = std::f64::consts::FRAC_PI_2 * t;
                    Ok(std::f64::consts::FRAC_PI_2 * a.sin() / (1.0 - a.cos()))
                }
                DiscreteSchedule::Uniform { .. } => {
                    Err(config("the NELBO weight is defined for masking schedules only"))
                }
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gamma_cont: f64,
    pub gamma_disc: f64,
    pub lambda_cont: LambdaCont,
    pub lambda_disc: LambdaDisc,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma_cont: 1.0, gamma_disc: 1.0, lambda_cont: LambdaCont::Constant(1.0), lambda_disc: LambdaDisc::Nelbo }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.gamma_cont >= 0.0 && self.gamma_cont.is_finite()) {
            bad.push(format!("gamma_cont must be >= 0, got {}", self.gamma_cont));
        }
        if !(self.gamma_disc >= 0.0 && self.gamma_disc.is_finite()) {
            bad.push(format!("gamma_disc must be >= 0, got {}", self.gamma_disc));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_cont: f64,
    pub l_disc: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `γ_cont·l_cont + γ_disc·l_disc`.
pub fn total_loss(l_cont: f64, l_disc: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown { l_cont, l_disc, total: weights.gamma_cont * l_cont + weights.gamma_disc * l_disc, weights: *weights })
}

/// A scalar loss with its gradient with respect to the predicted quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Mean over included sequences of `λ(t)·mean((ε - ε̂)²)`; excluded sequences contribute nothing.
pub fn loss_continuous_masked(
    eps: &LatentBatch,
    eps_hat: &LatentBatch,
    t: &[f64],
    lambda: &LambdaCont,
    include: &[bool],
) -> Result<LossValue> {
    if !eps.same_shape(eps_hat) {
        return Err(input("eps and eps_hat shapes differ"));
    }
    if t.len() != eps.batch || include.len() != eps.batch {
        return Err(input("need one time and include flag per sequence"));
    }
    let kept = include.iter().filter(|&&k| k).count();
    let mut grad = vec![0.0; eps.data.len()];
    if kept == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let per = eps.len * eps.dim;
    let mut value = 0.0;
    for b in (0..eps.batch).filter(|&b| include[b]) {
        let w = lambda.weight(t[b]) / (kept * per) as f64;
        let mut seq = 0.0;
        for i in b * per..(b + 1) * per {
            let r = eps_hat.data[i] - eps.data[i];
            seq += r * r;
            grad[i] = 2.0 * w * r;
        }
        value += w * seq;
    }
    Ok(LossValue { value, grad })
}

pub fn loss_continuous(eps: &LatentBatch, eps_hat: &LatentBatch, t: &[f64], lambda: &LambdaCont) -> Result<LossValue> {
    loss_continuous_masked(eps, eps_hat, t, lambda, &vec![true; eps.batch])
}

/// `log softmax` over the `vocab` ordinary tokens; the mask logit never carries probability.
pub fn clean_log_probs(row: &[f64], vocab: usize) -> Vec<f64> {
    let r = &row[..vocab];
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    r.iter().map(|v| v - lse).collect()
}

/// `-(1/(B·L)) Σ_masked λ(t)·log p̂(x0)`.
pub fn loss_discrete(
    logits: &Logits,
    x0: &TokenBatch,
    mask_indicator: &[bool],
    t: &[f64],
    lambda: &LambdaDisc,
    schedule: &DiscreteSchedule,
) -> Result<LossValue> {
    if logits.batch != x0.batch || logits.len != x0.len || logits.vocab_augmented != x0.vocab + 1 {
        return Err(input("logits do not cover the augmented vocabulary of x0"));
    }
    if mask_indicator.len() != x0.batch * x0.len || t.len() != x0.batch {
        return Err(input("mask indicator / times do not match the batch"));
    }
    let vocab = x0.vocab;
    let norm = (x0.batch * x0.len) as f64;
    let mut grad = vec![0.0; logits.data.len()];
    let mut value = 0.0;
    for b in 0..x0.batch {
        let mut weight = None;
        for j in 0..x0.len {
            let pos = b * x0.len + j;
            if !mask_indicator[pos] {
                continue;
            }
            let target = x0.get(b, j) as usize;
            if target >= vocab {
                return Err(input(format!("masked position ({b}, {j}) has the mask symbol as its clean token")));
            }
            let w = match weight {
                Some(w) => w,
                None => *weight.insert(lambda.weight(t[b], schedule)?),
            } / norm;
            let lp = clean_log_probs(logits.at(b, j), vocab);
            value -= w * lp[target];
            let g = &mut grad[pos * (vocab + 1)..pos * (vocab + 1) + vocab];
            for (v, gv) in g.iter_mut().enumerate() {
                *gv = w * (lp[v].exp() - if v == target { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(LossValue { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, warmup_steps: 100, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.02, grad_clip: 1.0 }
    }
}

impl AdamWConfig {
    /// Linear warmup to `lr`, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First/second moments mirroring the parameter store, plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One AdamW update with decoupled weight decay on matrices. Returns the learning rate used.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &Gradients, cfg: &AdamWConfig) -> f64 {
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let decay = params.get(i).value.shape.len() >= 2;
            let p = params.value_mut(i);
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.blocks[i]);
            for k in 0..p.data.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                if decay {
                    p.data[k] -= lr * cfg.weight_decay * p.data[k];
                }
                p.data[k] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        lr
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pair: SchedulePair,
    pub weights: LossWeights,
    pub p_drop: f64,
    /// Per-sequence representation-masking probability is drawn uniformly from this range.
    pub p_r_range: (f64, f64),
    pub repr_mask_mode: ReprMaskMode,
    pub t_floor: f64,
    pub optimizer: AdamWConfig,
    /// Parallel chunks for forward/backward; 1 keeps everything on the calling thread.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pair: SchedulePair::default(),
            weights: LossWeights::default(),
            p_drop: 0.15,
            p_r_range: (0.0, 0.9),
            repr_mask_mode: ReprMaskMode::Zero,
            t_floor: T_FLOOR,
            optimizer: AdamWConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub t_mean: f64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,t_mean,l_cont,l_disc,total,grad_norm,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.step, self.t_mean, self.loss.l_cont, self.loss.l_disc, self.loss.total, self.grad_norm, self.lr
        )
    }
}

/// Everything a training step draws at random, fixed before any network evaluation.
struct StepDraws {
    t: Vec<f64>,
    p_r: Vec<f64>,
    drop: Vec<bool>,
}

fn draw_step(batch: usize, cfg: &TrainConfig, stream: SeedStream) -> StepDraws {
    let uniform = |tag: u64, b: usize| -> f64 { stream.fork(tag).fork(b as u64).rng().random::<f64>() };
    let t = (0..batch).map(|b| cfg.t_floor + (1.0 - cfg.t_floor) * uniform(tags::TIMES, b)).collect();
    let (lo, hi) = cfg.p_r_range;
    let p_r = (0..batch).map(|b| lo + (hi - lo) * uniform(tags::P_R, b)).collect();
    let drop = (0..batch).map(|b| uniform(tags::CFG_DROP, b) < cfg.p_drop).collect();
    StepDraws { t, p_r, drop }
}

/// Loss parts and parameter gradients for one batch, without touching the optimizer.
pub fn loss_and_grad(
    model: &Denoiser,
    codebook: &Codebook,
    x0: &TokenBatch,
    stream: SeedStream,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients, f64)> {
    cfg.weights.validate()?;
    let draws = draw_step(x0.batch, cfg, stream);
    let z0 = codebook.encode(x0)?;
    let plan = JointCorruption { pair: &cfg.pair, p_r: &draws.p_r, mode: cfg.repr_mask_mode, codebook: Some(codebook) };
    let corrupted = corrupt_joint(x0, &z0, &draws.t, &plan, stream)?;
    let keep: Vec<bool> = draws.drop.iter().map(|d| !d).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    let t_mean = draws.t.iter().sum::<f64>() / x0.batch as f64;

    let workers = cfg.workers.max(1).min(x0.batch);
    let chunk = x0.batch.div_ceil(workers);
    let ranges: Vec<(usize, usize)> =
        (0..x0.batch).step_by(chunk).map(|s| (s, chunk.min(x0.batch - s))).collect();

    // Chunk losses use whole-batch normalisers so that chunk sums equal the batch loss.
    let run_chunk = |&(start, count): &(usize, usize)| -> Result<(f64, f64, Gradients)> {
        let x_t = corrupted.x_t.rows(start, count);
        let x0c = x0.rows(start, count);
        let dim = corrupted.z_t.dim;
        let per = x0.len * dim;
        let slice = |l: &LatentBatch| LatentBatch {
            batch: count,
            len: l.len,
            dim,
            data: l.data[start * per..(start + count) * per].to_vec(),
        };
        let (z_t, eps) = (slice(&corrupted.z_t), slice(&corrupted.eps));
        let t = &draws.t[start..start + count];
        let drop = &draws.drop[start..start + count];
        let pass = model.forward(&x_t, &z_t, t, drop)?;
        let out = pass.output();
        let mut lc = loss_continuous_masked(&eps, &out.eps_hat, t, &cfg.weights.lambda_cont, &keep[start..start + count])?;
        let local_kept = keep[start..start + count].iter().filter(|&&k| k).count();
        if local_kept > 0 {
            let rescale = local_kept as f64 / kept as f64;
            lc.value *= rescale;
            lc.grad.iter_mut().for_each(|g| *g *= rescale);
        }
        let mut ld = loss_discrete(
            &out.logits,
            &x0c,
            &corrupted.mask_indicator[start * x0.len..(start + count) * x0.len],
            t,
            &cfg.weights.lambda_disc,
            &cfg.pair.discrete,
        )?;
        let rescale = count as f64 / x0.batch as f64;
        ld.value *= rescale;
        ld.grad.iter_mut().for_each(|g| *g *= rescale);
        let w = &cfg.weights;
        let cot = OutputCotangent {
            eps_hat: lc.grad.iter().map(|g| w.gamma_cont * g).collect(),
            logits: ld.grad.iter().map(|g| w.gamma_disc * g).collect(),
        };
        let grads = pass.backward(&cot)?;
        Ok((lc.value, ld.value, grads))
    };
    let parts: Vec<Result<(f64, f64, Gradients)>> = if ranges.len() == 1 {
        ranges.iter().map(run_chunk).collect()
    } else {
        ranges.par_iter().map(run_chunk).collect()
    };
    let mut l_cont = 0.0;
    let mut l_disc = 0.0;
    let mut grads = Gradients::zeros_like(&model.params);
    for part in parts {
        let (c, d, g) = part?;
        l_cont += c;
        l_disc += d;
        grads.add_assign(&g);
    }
    let loss = total_loss(l_cont, l_disc, &cfg.weights)?;
    Ok((loss, grads, t_mean))
}

/// One optimisation step: sample times, corrupt, predict, both losses, clip, AdamW.
pub fn train_step(
    model: &mut Denoiser,
    opt: &mut OptimizerState,
    codebook: &Codebook,
    x0: &TokenBatch,
    stream: SeedStream,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let (loss, mut grads, t_mean) = loss_and_grad(model, codebook, x0, stream, cfg)?;
    if !loss.total.is_finite() || !grads.is_finite() {
        let draws = draw_step(x0.batch, cfg, stream);
        return Err(Error::Numeric(format!(
            "non-finite loss at step {}: t={:?} l_cont={} l_disc={} total={}",
            opt.step, draws.t, loss.l_cont, loss.l_disc, loss.total
        )));
    }
    let grad_norm = clip_grad_norm(&mut grads, cfg.optimizer.grad_clip);
    let step = opt.step;
    let lr = opt.apply(&mut model.params, &grads, &cfg.optimizer);
    Ok(StepReport { step, t_mean, loss, grad_norm, lr })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuous_loss_examples() {
        let eps = LatentBatch::new(1, 2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let l = loss_continuous(&eps, &eps, &[0.5], &LambdaCont::Constant(1.0)).unwrap();
        assert_eq!(l.value, 0.0);
        let zero = LatentBatch::zeros(1, 2, 2);
        let ones = LatentBatch::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let l = loss_continuous(&zero, &ones, &[0.5], &LambdaCont::Constant(1.0)).unwrap();
        assert_eq!(l.value, 1.0);
        assert!(loss_continuous(&zero, &LatentBatch::zeros(1, 2, 3), &[0.5], &LambdaCont::Constant(1.0)).is_err());
    }

    fn uniform_logits(batch: usize, len: usize, vocab: usize) -> Logits {
        let mut data = vec![0.0; batch * len * (vocab + 1)];
        for p in 0..batch * len {
            data[p * (vocab + 1) + vocab] = f64::NEG_INFINITY;
        }
        Logits { batch, len, vocab_augmented: vocab + 1, data }
    }

    #[test]
    fn discrete_loss_examples() {
        let s = DiscreteSchedule::MaskedLinear;
        let x0 = TokenBatch::new(1, 1, 4, vec![2]).unwrap();
        let logits = uniform_logits(1, 1, 4);
        let l = loss_discrete(&logits, &x0, &[false], &[0.5], &LambdaDisc::Nelbo, &s).unwrap();
        assert_eq!(l.value, 0.0);
        let l = loss_discrete(&logits, &x0, &[true], &[0.5], &LambdaDisc::Nelbo, &s).unwrap();
        assert!((l.value - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l.value - 2.772589).abs() < 1e-6);

        let x0 = TokenBatch::new(1, 3, 4, vec![1, 0, 3]).unwrap();
        let mut sharp = uniform_logits(1, 3, 4);
        for (j, &tok) in x0.ids.iter().enumerate() {
            sharp.data[j * 5 + tok as usize] = 1e6;
        }
        let l = loss_discrete(&sharp, &x0, &[true, true, true], &[0.3], &LambdaDisc::Nelbo, &s).unwrap();
        assert!(l.value.abs() < 1e-6);

        let bad = TokenBatch::new(1, 1, 4, vec![4]).unwrap();
        assert!(loss_discrete(&logits, &bad, &[true], &[0.5], &LambdaDisc::Nelbo, &s).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(0.5, 1.5, &w).unwrap().total - 2.0).abs() < 1e-12);
        let disc_only = LossWeights { gamma_cont: 0.0, ..w };
        assert_eq!(total_loss(0.5, 1.5, &disc_only).unwrap().total, 1.5);
        let mixed = LossWeights { gamma_cont: 2.0, gamma_disc: 0.5, ..w };
        assert!((total_loss(0.3, 0.7, &mixed).unwrap().total - 0.95).abs() < 1e-12);
        let neg = LossWeights { gamma_cont: -1.0, ..w };
        assert!(matches!(total_loss(0.3, 0.7, &neg), Err(Error::Config(_))));
    }

    #[test]
    fn nelbo_weights() {
        let lin = DiscreteSchedule::MaskedLinear;
        assert_eq!(LambdaDisc::Nelbo.weight(0.25, &lin).unwrap(), 4.0);
        assert!(LambdaDisc::Nelbo.weight(0.5, &DiscreteSchedule::Uniform { rate: 1.0 }).is_err());
        // -η'/(1-η) by central differences for the cosine curve.
        let cos = DiscreteSchedule::MaskedCustom(EtaCurve::Cosine);
        let t = 0.4;
        let h = 1e-6;
        let d = (cos.eta(t + h).unwrap() - cos.eta(t - h).unwrap()) / (2.0 * h);
        let want = -d / (1.0 - cos.eta(t).unwrap());
        assert!((LambdaDisc::Nelbo.weight(t, &cos).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn warmup_schedule() {
        let c = AdamWConfig { lr: 1e-3, warmup_steps: 10, ..Default::default() };
        assert!((c.lr_at(0) - 1e-4).abs() < 1e-18);
        assert_eq!(c.lr_at(9), 1e-3);
        assert_eq!(c.lr_at(500), 1e-3);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut p = ParamStore::new();
        p.add("w", &[3], crate::params::Init::Zeros, SeedStream::new(0));
        let mut g = Gradients { blocks: vec![vec![3.0, 4.0, 12.0]] };
        let pre = clip_grad_norm(&mut g, 1.0);
        assert_eq!(pre, 13.0);
        assert!(g.global_norm() <= 1.0 + 1e-12);
        let mut small = Gradients { blocks: vec![vec![0.1, 0.2, 0.2]] };
        let before = small.clone();
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, before);
    }
}
