mod common;

use ccdd_core::batch::{LatentBatch, TokenBatch};
use ccdd_core::data::SyntheticSource;
use ccdd_core::denoiser::{Denoiser, DenoiserConfig, DenoiserOutput, JointDenoiser, Logits};
use ccdd_core::embedder::{Codebook, CodebookMode};
use ccdd_core::evaluation::{elbo, generative_nll, EvalOptions, NGramReference};
use ccdd_core::rng::SeedStream;
use ccdd_core::schedules::{ContinuousSchedule, SchedulePair};
use ccdd_core::Result;

/// Bayes token posterior from each position's own latent, assuming a uniform prior.
struct LatentReader {
    codebook: Codebook,
    schedule: ContinuousSchedule,
}

impl JointDenoiser for LatentReader {
    fn predict(&self, x_t: &TokenBatch, z_t: &LatentBatch, t: &[f64], _drop: &[bool]) -> Result<DenoiserOutput> {
        let v = self.codebook.vocab;
        let mut data = vec![0.0; x_t.batch * x_t.len * (v + 1)];
        for b in 0..x_t.batch {
            let (a, s) = self.schedule.eval(t[b])?;
            for j in 0..x_t.len {
                let z = z_t.vector(b, j);
                for tok in 0..v {
                    let e = self.codebook.row(tok);
                    let d2: f64 = z.iter().zip(e).map(|(zi, ei)| (zi - a * ei).powi(2)).sum();
                    data[(b * x_t.len + j) * (v + 1) + tok] = -d2 / (2.0 * s * s);
                }
            }
        }
        Ok(DenoiserOutput {
            eps_hat: LatentBatch::zeros(x_t.batch, x_t.len, z_t.dim),
            logits: Logits { batch: x_t.batch, len: x_t.len, vocab_augmented: v + 1, data },
        })
    }
    fn vocab(&self) -> usize {
        self.codebook.vocab
    }
    fn d_latent(&self) -> usize {
        self.codebook.dim
    }
}

fn uniform_data(vocab: usize, n: usize, len: usize, seed: u64) -> TokenBatch {
    SyntheticSource::new(vocab, ccdd_core::data::SyntheticKind::IidUniform).unwrap().sample(n, len, SeedStream::new(seed))
}

#[test]
fn flat_predictor_scores_log_vocab() {
    let cfg = DenoiserConfig { vocab: 4, d_model: 16, n_heads: 2, d_latent: 4, freq_dim: 8, ..Default::default() };
    let model = Denoiser::new(cfg, SeedStream::new(1)).unwrap();
    let cb = Codebook::build(CodebookMode::RandomOrthonormal, 4, 4, SeedStream::new(2)).unwrap();
    let data = uniform_data(4, 256, 16, 3);
    let r = elbo(&model, &data, &cb, &SchedulePair::default(), &EvalOptions::default(), SeedStream::new(4)).unwrap();
    let want = 4f64.ln();
    assert!((r.elbo_disc - want).abs() < 1.3 * r.half_width_disc, "{} vs {want} ± {}", r.elbo_disc, r.half_width_disc);
    assert!((r.ppl_disc - r.elbo_disc.exp()).abs() < 1e-12);
    assert_eq!(r.n_sequences, 256);
    assert_eq!(r.n_mc_times, 16);
}

#[test]
fn single_token_vocabulary_costs_nothing() {
    let cfg = DenoiserConfig { vocab: 1, d_model: 16, n_heads: 2, d_latent: 2, freq_dim: 8, ..Default::default() };
    let model = common::generic_model(cfg, 1);
    let cb = Codebook::build(CodebookMode::RandomOrthonormal, 1, 2, SeedStream::new(2)).unwrap();
    let data = TokenBatch::filled(8, 6, 1, 0);
    let opts = EvalOptions { discrete_ppl_only: true, ..Default::default() };
    let r = elbo(&model, &data, &cb, &SchedulePair::default(), &opts, SeedStream::new(4)).unwrap();
    assert_eq!(r.elbo_disc, 0.0);
    assert_eq!(r.elbo_nats_per_token, 0.0);
    assert_eq!(r.ppl, 1.0);
}

#[test]
fn representation_masking_removes_the_latent_shortcut() {
    let cb = Codebook::build(CodebookMode::RandomOrthonormal, 4, 4, SeedStream::new(5)).unwrap();
    let reader = LatentReader { codebook: cb.clone(), schedule: ContinuousSchedule::ConcaveSqrt };
    let data = uniform_data(4, 128, 16, 6);
    let pair = SchedulePair::default();
    let at = |p_r: f64| elbo(&reader, &data, &cb, &pair, &EvalOptions { p_r, ..Default::default() }, SeedStream::new(7)).unwrap();
    let (hard, easy) = (at(1.0), at(0.0));
    assert!(hard.elbo_disc > easy.elbo_disc + 0.5, "{} vs {}", hard.elbo_disc, easy.elbo_disc);
    // With the latent erased and i.i.d. data, nothing beats the uniform guess on average.
    assert!(hard.elbo_disc > 4f64.ln() - hard.half_width_disc);
}

#[test]
fn estimate_is_independent_of_chunking() {
    let cfg = common::tiny_config(ccdd_core::denoiser::Arch::Mdit);
    let model = common::generic_model(cfg.clone(), 8);
    let cb = Codebook::build(CodebookMode::RandomOrthonormal, cfg.vocab, cfg.d_latent, SeedStream::new(9)).unwrap();
    let data = uniform_data(cfg.vocab, 10, 5, 10);
    let pair = SchedulePair::default();
    let a = elbo(&model, &data, &cb, &pair, &EvalOptions { chunk: 64, n_mc_times: 4, ..Default::default() }, SeedStream::new(1)).unwrap();
    let b = elbo(&model, &data, &cb, &pair, &EvalOptions { chunk: 3, n_mc_times: 4, ..Default::default() }, SeedStream::new(1)).unwrap();
    assert!((a.elbo_joint - b.elbo_joint).abs() < 1e-12);
    assert!((a.elbo_disc - b.elbo_disc).abs() < 1e-12);
    assert!(elbo(&model, &data, &cb, &pair, &EvalOptions { p_r: 2.0, ..Default::default() }, SeedStream::new(1)).is_err());
}

#[test]
fn bigram_reference_reaches_the_entropy_rate() {
    let src = SyntheticSource::bigram_ring(8, 0.6, 0.2).unwrap();
    let h = src.entropy_rate();
    // Oracle entropy rate from the transition table: every row has the same entropy.
    let rest: f64 = 0.2 / 6.0;
    let want = -(0.6f64 * 0.6f64.ln() + 0.2 * 0.2f64.ln() + 6.0 * rest * rest.ln());
    assert!((h - want).abs() < 1e-12);
    let train = src.sample(2000, 32, SeedStream::new(11));
    let reference = NGramReference::train(2, 8, 0.1, &train, "ring").unwrap();
    let fresh = src.sample(500, 32, SeedStream::new(12));
    let nll = generative_nll(&reference, &fresh).unwrap();
    assert!((nll - h).abs() < 0.02, "{nll} vs {h}");
    let uniform = uniform_data(8, 500, 32, 13);
    assert!(generative_nll(&reference, &uniform).unwrap() > h + 0.5);
}
