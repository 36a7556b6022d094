//! The factored joint forward process: Gaussian corruption of latents,
//! categorical corruption of tokens, and representation masking.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::batch::{LatentBatch, TokenBatch};
use crate::embedder::Codebook;
use crate::error::{input, Result};
use crate::rng::{tags, SeedStream};
use crate::schedules::{ContinuousSchedule, DiscreteSchedule, SchedulePair};

/// How the clean latent is stripped of information at masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReprMaskMode {
    /// Zero the latent rows of masked positions.
    #[default]
    Zero,
    /// Re-embed the partially masked sequence, masked positions contributing nothing.
    Reembed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointCorruptedBatch {
    pub x_t: TokenBatch,
    pub z_t: LatentBatch,
    /// The Gaussian draw used to build `z_t`.
    pub eps: LatentBatch,
    pub t: Vec<f64>,
    pub mask_indicator: Vec<bool>,
    /// Per-sequence flag: representation masking was applied.
    pub repr_masked: Vec<bool>,
    /// The clean latent the Gaussian branch started from (`z0` or its masked version).
    pub z0_effective: LatentBatch,
}

fn check_times(t: &[f64], batch: usize) -> Result<()> {
    if t.len() != batch {
        return Err(input(format!("{} times supplied for a batch of {batch}", t.len())));
    }
    Ok(())
}

/// `z_t = α_t z0 + σ_t ε` with one `t` per sequence.
pub fn corrupt_continuous(
    z0: &LatentBatch,
    t: &[f64],
    schedule: &ContinuousSchedule,
    stream: SeedStream,
) -> Result<(LatentBatch, LatentBatch)> {
    z0.ensure_finite()?;
    check_times(t, z0.batch)?;
    let per_seq = z0.len * z0.dim;
    let mut z_t = z0.clone();
    let mut eps = LatentBatch::zeros(z0.batch, z0.len, z0.dim);
    for b in 0..z0.batch {
        let (a, s) = schedule.eval(t[b])?;
        let mut rng = stream.fork(b as u64).rng();
        let range = b * per_seq..(b + 1) * per_seq;
        for (e, z) in eps.data[range.clone()].iter_mut().zip(&mut z_t.data[range]) {
            *e = StandardNormal.sample(&mut rng);
            *z = a * *z + s * *e;
        }
    }
    Ok((z_t, eps))
}

fn draw_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Keeps each token with probability `η_t`, otherwise replaces it with a draw from `π_t`.
pub fn corrupt_discrete(
    x0: &TokenBatch,
    t: &[f64],
    schedule: &DiscreteSchedule,
    stream: SeedStream,
) -> Result<TokenBatch> {
    x0.ensure_mask_free()?;
    check_times(t, x0.batch)?;
    let pi = schedule.noise(x0.vocab);
    let mut x_t = x0.clone();
    for b in 0..x0.batch {
        let eta = schedule.eta(t[b])?;
        let mut rng = stream.fork(b as u64).rng();
        for id in &mut x_t.ids[b * x0.len..(b + 1) * x0.len] {
            let u: f64 = rng.random();
            if u >= eta {
                *id = draw_categorical(&pi, &mut rng) as u32;
            }
        }
    }
    Ok(x_t)
}

/// Zeroes the latent rows flagged in `mask_indicator` when `apply` is set.
pub fn mask_representation(
    z0: &LatentBatch,
    mask_indicator: &[bool],
    apply: bool,
) -> Result<LatentBatch> {
    if mask_indicator.len() != z0.batch * z0.len {
        return Err(input(format!(
            "mask indicator has {} entries for a {}×{} latent grid",
            mask_indicator.len(),
            z0.batch,
            z0.len
        )));
    }
    let mut out = z0.clone();
    if apply {
        for (pos, _) in mask_indicator.iter().enumerate().filter(|(_, &m)| m) {
            out.data[pos * z0.dim..(pos + 1) * z0.dim].fill(0.0);
        }
    }
    Ok(out)
}

/// Inputs of [`corrupt_joint`] beyond the clean pair.
pub struct JointCorruption<'a> {
    pub pair: &'a SchedulePair,
    /// Per-sequence probability of applying representation masking.
    pub p_r: &'a [f64],
    pub mode: ReprMaskMode,
    /// Needed only for [`ReprMaskMode::Reembed`].
    pub codebook: Option<&'a Codebook>,
}

/// Draws `x_t`, optionally masks the clean latent at masked positions, then noises it.
pub fn corrupt_joint(
    x0: &TokenBatch,
    z0: &LatentBatch,
    t: &[f64],
    plan: &JointCorruption<'_>,
    stream: SeedStream,
) -> Result<JointCorruptedBatch> {
    if x0.batch != z0.batch || x0.len != z0.len {
        return Err(input("token and latent batches disagree in shape"));
    }
    if plan.p_r.len() != x0.batch {
        return Err(input(format!("{} p_r values for a batch of {}", plan.p_r.len(), x0.batch)));
    }
    if let Some(p) = plan.p_r.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(input(format!("p_r {p} outside [0, 1]")));
    }
    let x_t = corrupt_discrete(x0, t, &plan.pair.discrete, stream.fork(tags::DISCRETE))?;
    let mask_indicator = x_t.mask_indicator();
    let repr_masked: Vec<bool> = (0..x0.batch)
        .map(|b| {
            let u: f64 = stream.fork(tags::REPR_MASK).fork(b as u64).rng().random();
            u < plan.p_r[b]
        })
        .collect();
    let mut z0_effective = z0.clone();
    let per_seq = x0.len * z0.dim;
    if repr_masked.iter().any(|&m| m) {
        let replaced = match plan.mode {
            ReprMaskMode::Zero => mask_representation(z0, &mask_indicator, true)?,
            ReprMaskMode::Reembed => {
                let cb = plan
                    .codebook
                    .ok_or_else(|| input("re-embedding representation mask needs the codebook"))?;
                cb.encode_with_erasures(&x_t)
            }
        };
        for b in (0..x0.batch).filter(|&b| repr_masked[b]) {
            let r = b * per_seq..(b + 1) * per_seq;
            z0_effective.data[r.clone()].copy_from_slice(&replaced.data[r]);
        }
    }
    let (z_t, eps) =
        corrupt_continuous(&z0_effective, t, &plan.pair.continuous, stream.fork(tags::GAUSSIAN))?;
    Ok(JointCorruptedBatch {
        x_t,
        z_t,
        eps,
        t: t.to_vec(),
        mask_indicator,
        repr_masked,
        z0_effective,
    })
}
