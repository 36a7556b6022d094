//! Likelihood-bound estimation under the representation-masking protocol, and
//! generative NLL of samples under a smoothed n-gram reference.

use rand::Rng;

use crate::batch::{LatentBatch, TokenBatch};
use crate::corruption::{corrupt_joint, JointCorruption, ReprMaskMode};
use crate::denoiser::JointDenoiser;
use crate::embedder::Codebook;
use crate::error::{config, input, Result};
use crate::rng::{tags, SeedStream};
use crate::schedules::{SchedulePair, T_FLOOR};
use crate::training::{clean_log_probs, loss_continuous_masked, LambdaCont, LambdaDisc, LossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub n_mc_times: usize,
    /// Probability that representation masking is applied to each sequence.
    pub p_r: f64,
    pub weights: LossWeights,
    pub repr_mask_mode: ReprMaskMode,
    pub t_floor: f64,
    /// Sequences per denoiser call.
    pub chunk: usize,
    /// Headline number uses the discrete term alone.
    pub discrete_ppl_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_mc_times: 16,
            p_r: 1.0,
            weights: LossWeights::default(),
            repr_mask_mode: ReprMaskMode::Zero,
            t_floor: T_FLOOR,
            chunk: 64,
            discrete_ppl_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Headline bound: `γ_cont·cont + γ_disc·disc`, or `disc` alone when `discrete_ppl_only`.
    pub elbo_nats_per_token: f64,
    pub ppl: f64,
    pub n_mc_times: usize,
    pub p_r: f64,
    pub n_sequences: usize,
    pub elbo_disc: f64,
    pub ppl_disc: f64,
    /// Per-element latent MSE (`λ_cont ≡ 1`); a proxy, not calibrated in nats.
    pub loss_cont: f64,
    pub elbo_joint: f64,
    /// 95% Monte-Carlo half-width of the headline number.
    pub half_width: f64,
    pub half_width_disc: f64,
    pub discrete_ppl_only: bool,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "elbo_nats_per_token,ppl,elbo_disc,ppl_disc,loss_cont,elbo_joint,half_width,half_width_disc,n_mc_times,p_r,n_sequences";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{},{},{}",
            self.elbo_nats_per_token,
            self.ppl,
            self.elbo_disc,
            self.ppl_disc,
            self.loss_cont,
            self.elbo_joint,
            self.half_width,
            self.half_width_disc,
            self.n_mc_times,
            self.p_r,
            self.n_sequences
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "elbo {:.4} ± {:.4} nats/token (ppl {:.3})\n  discrete  {:.4} ± {:.4} (ppl {:.3})\n  latent mse {:.4}\n  joint     {:.4}\n  {} sequences, {} time draws each, p_r = {}{}",
            self.elbo_nats_per_token,
            self.half_width,
            self.ppl,
            self.elbo_disc,
            self.half_width_disc,
            self.ppl_disc,
            self.loss_cont,
            self.elbo_joint,
            self.n_sequences,
            self.n_mc_times,
            self.p_r,
            if self.discrete_ppl_only { ", headline is discrete-only" } else { "" }
        )
    }
}

fn mean_half_width(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Stratified times for one sequence: one uniform draw inside each of `n` equal strata of `[t_floor, 1]`.
pub fn stratified_times(n: usize, t_floor: f64, stream: SeedStream) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..n).map(|i| t_floor + (1.0 - t_floor) * (i as f64 + rng.random::<f64>()) / n as f64).collect()
}

/// Monte-Carlo estimate of the negative ELBO in nats per token.
pub fn elbo(
    model: &dyn JointDenoiser,
    data: &TokenBatch,
    codebook: &Codebook,
    pair: &SchedulePair,
    opts: &EvalOptions,
    stream: SeedStream,
) -> Result<EvalReport> {
    if data.batch == 0 || data.len == 0 {
        return Err(input("evaluation set is empty"));
    }
    if opts.n_mc_times == 0 || opts.chunk == 0 {
        return Err(config("n_mc_times and chunk must be positive"));
    }
    if !(0.0..=1.0).contains(&opts.p_r) {
        return Err(config(format!("p_r must lie in [0, 1], got {}", opts.p_r)));
    }
    opts.weights.validate()?;
    data.ensure_mask_free()?;
    let stream = stream.fork(tags::EVAL);
    let times: Vec<Vec<f64>> =
        (0..data.batch).map(|b| stratified_times(opts.n_mc_times, opts.t_floor, stream.fork(tags::TIMES).fork(b as u64))).collect();
    let vocab = data.vocab;
    let len = data.len;
    let mut disc = Vec::with_capacity(data.batch * opts.n_mc_times);
    let mut cont = Vec::with_capacity(data.batch * opts.n_mc_times);
    for start in (0..data.batch).step_by(opts.chunk) {
        let count = opts.chunk.min(data.batch - start);
        let x0 = data.rows(start, count);
        let z0 = codebook.encode(&x0)?;
        for i in 0..opts.n_mc_times {
            let t: Vec<f64> = (start..start + count).map(|b| times[b][i]).collect();
            let p_r = vec![opts.p_r; count];
            let plan = JointCorruption { pair, p_r: &p_r, mode: opts.repr_mask_mode, codebook: Some(codebook) };
            // Streams depend on (sequence, draw) only, so chunking does not change the estimate.
            let c = corrupt_joint_rows(&x0, &z0, &t, &plan, stream, start, i)?;
            let out = model.predict(&c.x_t, &c.z_t, &t, &vec![false; count])?;
            for b in 0..count {
                let lam = LambdaDisc::Nelbo.weight(t[b], &pair.discrete)?;
                let mut d = 0.0;
                for j in 0..len {
                    if c.mask_indicator[b * len + j] {
                        let lp = clean_log_probs(out.logits.at(b, j), vocab);
                        d -= lam * lp[x0.get(b, j) as usize];
                    }
                }
                disc.push(d / len as f64);
                let one = |l: &LatentBatch| LatentBatch {
                    batch: 1,
                    len,
                    dim: l.dim,
                    data: l.sequence(b).to_vec(),
                };
                let lc = loss_continuous_masked(&one(&c.eps), &one(&out.eps_hat), &t[b..b + 1], &LambdaCont::Constant(1.0), &[true])?;
                cont.push(lc.value);
            }
        }
    }
    let w = &opts.weights;
    let joint: Vec<f64> = disc.iter().zip(&cont).map(|(d, c)| w.gamma_cont * c + w.gamma_disc * d).collect();
    let (elbo_disc, hw_disc) = mean_half_width(&disc);
    let (loss_cont, _) = mean_half_width(&cont);
    let (elbo_joint, hw_joint) = mean_half_width(&joint);
    let (headline, hw) = if opts.discrete_ppl_only { (elbo_disc, hw_disc) } else { (elbo_joint, hw_joint) };
    Ok(EvalReport {
        elbo_nats_per_token: headline,
        ppl: headline.exp(),
        n_mc_times: opts.n_mc_times,
        p_r: opts.p_r,
        n_sequences: data.batch,
        elbo_disc,
        ppl_disc: elbo_disc.exp(),
        loss_cont,
        elbo_joint,
        half_width: hw,
        half_width_disc: hw_disc,
        discrete_ppl_only: opts.discrete_ppl_only,
    })
}

fn corrupt_joint_rows(
    x0: &TokenBatch,
    z0: &LatentBatch,
    t: &[f64],
    plan: &JointCorruption,
    stream: SeedStream,
    start: usize,
    draw: usize,
) -> Result<crate::corruption::JointCorruptedBatch> {
    let mut parts = Vec::with_capacity(x0.batch);
    for b in 0..x0.batch {
        let xb = x0.rows(b, 1);
        let zb = LatentBatch { batch: 1, len: z0.len, dim: z0.dim, data: z0.sequence(b).to_vec() };
        let s = stream.fork((start + b) as u64).fork(draw as u64);
        let one = JointCorruption { pair: plan.pair, p_r: &plan.p_r[b..b + 1], mode: plan.mode, codebook: plan.codebook };
        parts.push(corrupt_joint(&xb, &zb, &t[b..b + 1], &one, s)?);
    }
    let mut out = parts[0].clone();
    for p in &parts[1..] {
        out.x_t.ids.extend_from_slice(&p.x_t.ids);
        out.x_t.batch += 1;
        for (dst, src) in [(&mut out.z_t, &p.z_t), (&mut out.eps, &p.eps), (&mut out.z0_effective, &p.z0_effective)] {
            dst.data.extend_from_slice(&src.data);
            dst.batch += 1;
        }
        out.t.extend_from_slice(&p.t);
        out.mask_indicator.extend_from_slice(&p.mask_indicator);
        out.repr_masked.extend_from_slice(&p.repr_masked);
    }
    Ok(out)
}

/// Additively smoothed n-gram model over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramReference {
    pub order: usize,
    pub vocab: usize,
    pub smoothing: f64,
    pub corpus_id: String,
    /// `log p(next | context)`, context-major: `V^(order-1)` rows of `V` entries.
    pub log_probs: Vec<f64>,
}

impl NGramReference {
    pub fn train(order: usize, vocab: usize, smoothing: f64, data: &TokenBatch, corpus_id: &str) -> Result<Self> {
        if !(order == 2 || order == 3) {
            return Err(config(format!("n-gram order must be 2 or 3, got {order}")));
        }
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(config("n-gram smoothing must be positive so every conditional is proper"));
        }
        if vocab == 0 || data.vocab != vocab {
            return Err(input("training data vocabulary does not match the reference"));
        }
        data.ensure_mask_free()?;
        let rows = vocab.pow(order as u32 - 1);
        let mut counts = vec![0.0; rows * vocab];
        for b in 0..data.batch {
            let r = data.row(b);
            for w in r.windows(order) {
                counts[Self::context_index(&w[..order - 1], vocab) * vocab + w[order - 1] as usize] += 1.0;
            }
        }
        let mut log_probs = vec![0.0; rows * vocab];
        for c in 0..rows {
            let row = &counts[c * vocab..(c + 1) * vocab];
            let total: f64 = row.iter().sum::<f64>() + smoothing * vocab as f64;
            for v in 0..vocab {
                log_probs[c * vocab + v] = ((row[v] + smoothing) / total).ln();
            }
        }
        Ok(Self { order, vocab, smoothing, corpus_id: corpus_id.to_string(), log_probs })
    }

    fn context_index(ctx: &[u32], vocab: usize) -> usize {
        ctx.iter().fold(0, |acc, &v| acc * vocab + v as usize)
    }

    pub fn log_prob(&self, context: &[u32], next: u32) -> f64 {
        self.log_probs[Self::context_index(context, self.vocab) * self.vocab + next as usize]
    }

    pub fn conditional(&self, context: &[u32]) -> &[f64] {
        let c = Self::context_index(context, self.vocab);
        &self.log_probs[c * self.vocab..(c + 1) * self.vocab]
    }
}

/// Mean NLL per predicted token; the first `order - 1` positions of each sample serve only as context.
pub fn generative_nll(reference: &NGramReference, samples: &TokenBatch) -> Result<f64> {
    if samples.ids.iter().any(|&v| v as usize >= reference.vocab) {
        return Err(input("sample token outside the reference vocabulary"));
    }
    let k = reference.order - 1;
    if samples.len <= k || samples.batch == 0 {
        return Err(input("samples too short for the reference order"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for b in 0..samples.batch {
        for w in samples.row(b).windows(reference.order) {
            total -= reference.log_prob(&w[..k], w[k]);
            n += 1;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_times_cover_each_stratum() {
        let t = stratified_times(16, T_FLOOR, SeedStream::new(3));
        for (i, v) in t.iter().enumerate() {
            let lo = T_FLOOR + (1.0 - T_FLOOR) * i as f64 / 16.0;
            let hi = T_FLOOR + (1.0 - T_FLOOR) * (i + 1) as f64 / 16.0;
            assert!(*v >= lo && *v < hi);
        }
    }

    #[test]
    fn ngram_rows_are_proper() {
        let data = TokenBatch::from_rows(&[vec![0, 1, 2, 0, 1, 2, 1], vec![2, 2, 0, 1, 0, 0, 1]], 3).unwrap();
        for order in [2, 3] {
            let r = NGramReference::train(order, 3, 0.5, &data, "toy").unwrap();
            for c in 0..3usize.pow(order as u32 - 1) {
                let s: f64 = r.log_probs[c * 3..(c + 1) * 3].iter().map(|l| l.exp()).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        assert!(NGramReference::train(2, 3, 0.0, &data, "toy").is_err());
        assert!(NGramReference::train(4, 3, 0.5, &data, "toy").is_err());
    }

    #[test]
    fn constant_samples_read_the_table() {
        let data = TokenBatch::from_rows(&[vec![0, 1, 1, 0, 1, 1, 1, 0]], 2).unwrap();
        let r = NGramReference::train(2, 2, 1.0, &data, "toy").unwrap();
        // counts: 0->1 twice, 1->1 three times, 1->0 twice.
        let want = -(4.0f64 / 7.0).ln();
        let s = TokenBatch::filled(3, 5, 2, 1);
        assert!((generative_nll(&r, &s).unwrap() - want).abs() < 1e-12);
        let bad = TokenBatch::filled(1, 5, 2, 2);
        assert!(generative_nll(&r, &bad).is_err());
    }
}
