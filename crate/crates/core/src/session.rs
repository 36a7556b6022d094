//! A run assembled from its config: data, codebook, denoiser and optimizer,
//! with checkpoint save and resume.

use crate::checkpoint::{Checkpoint, CheckpointError, NamedTensor};
use crate::config::{RunConfig, SourceKind};
use crate::data::{Corpus, DataSource, SyntheticKind, SyntheticSource, Vocabulary};
use crate::denoiser::Denoiser;
use crate::embedder::Codebook;
use crate::error::{Error, Result};
use crate::evaluation::{elbo, generative_nll, EvalReport, NGramReference};
use crate::params::Tensor;
use crate::rng::{tags, SeedStream};
use crate::sampler::{sample, SampleOutput};
use crate::training::{train_step, OptimizerState, StepReport};
use crate::TokenBatch;

const CODEBOOK_TENSOR: &str = "embedder.codebook";
const VOCAB_TENSOR: &str = "vocab.chars";
const PARAM_PREFIX: &str = "param.";

pub struct Session {
    pub config: RunConfig,
    pub vocabulary: Option<Vocabulary>,
    pub codebook: Codebook,
    pub model: Denoiser,
    pub optimizer: OptimizerState,
    /// Completed optimisation steps.
    pub step: u64,
    data: Option<DataSource>,
}

fn synthetic(config: &RunConfig) -> Result<SyntheticSource> {
    match config.source {
        SourceKind::IidUniform => SyntheticSource::new(config.vocab, SyntheticKind::IidUniform),
        SourceKind::Bigram => SyntheticSource::bigram_ring(config.vocab, config.bigram_p_next, config.bigram_p_skip),
        SourceKind::Periodic => SyntheticSource::new(config.vocab, SyntheticKind::Periodic(config.periodic_pattern.clone())),
        SourceKind::Corpus => unreachable!("corpus is not synthetic"),
    }
}

/// Builds the data source named by the config.
pub fn load_data(config: &RunConfig) -> Result<DataSource> {
    match config.source {
        SourceKind::Corpus => {
            Ok(DataSource::Corpus(Corpus::load(std::path::Path::new(&config.corpus_path), config.tokenizer, config.seq_len)?))
        }
        _ => Ok(DataSource::Synthetic { source: synthetic(config)?, len: config.seq_len, n_validation: config.n_validation }),
    }
}

impl Session {
    /// Fresh run: initialise codebook and parameters from the seed.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let data = load_data(&config)?;
        let vocab = data.vocab();
        let vocabulary = match &data {
            DataSource::Corpus(c) => Some(c.vocab.clone()),
            DataSource::Synthetic { .. } => None,
        };
        let root = SeedStream::new(config.seed);
        let codebook = Codebook::build(config.codebook_mode(), vocab, config.latent_dim(vocab), root.fork(tags::CODEBOOK))?;
        let dcfg = config.denoiser_config(vocab);
        dcfg.validate()?;
        let model = Denoiser::new(dcfg, root.fork(tags::INIT))?;
        let optimizer = OptimizerState::new(&model.params);
        Ok(Self { config, vocabulary, codebook, model, optimizer, step: 0, data: Some(data) })
    }

    /// Restores a run from `ckpt`. `config` must agree with the checkpoint on every model-defining key.
    pub fn resume(config: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if config.model_hash() != ckpt.config_hash {
            let saved = RunConfig::from_text(&ckpt.config_text).ok();
            let keys = saved.map(|s| s.model_key_differences(&config).join(", ")).unwrap_or_else(|| "unknown keys".into());
            return Err(CheckpointError::ConfigMismatch(keys).into());
        }
        let vocabulary = match ckpt.tensor(VOCAB_TENSOR) {
            Some(t) => Some(Vocabulary::Char(
                t.data.iter().map(|&c| char::from_u32(c as u32).ok_or_else(|| malformed("bad vocabulary entry"))).collect::<Result<_>>()?,
            )),
            None if config.source == SourceKind::Corpus => Some(Vocabulary::Byte),
            None => None,
        };
        let cb = ckpt.tensor(CODEBOOK_TENSOR).ok_or_else(|| malformed("missing codebook"))?;
        let (vocab, dim) = match cb.shape[..] {
            [v, d] => (v, d),
            _ => return Err(malformed("codebook must be rank 2")),
        };
        let codebook = Codebook { vocab, dim, vectors: cb.data.clone(), mode: config.codebook_mode() };
        let dcfg = config.denoiser_config(vocab);
        dcfg.validate()?;
        let mut model = Denoiser::new(dcfg, SeedStream::new(0))?;
        let params: Vec<(String, Tensor)> = ckpt
            .tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix(PARAM_PREFIX).map(|n| (n.to_string(), t.tensor.clone())))
            .collect();
        model.params.load(&params).map_err(|e| malformed(&e.to_string()))?;
        let mut optimizer = OptimizerState::new(&model.params);
        optimizer.step = ckpt.optimizer_step;
        if !ckpt.optimizer_moments.is_empty() {
            for (i, p) in model.params.iter().enumerate() {
                let find = |prefix: &str| {
                    ckpt.optimizer_moments
                        .iter()
                        .find(|t| t.name.strip_prefix(prefix) == Some(p.name.as_str()))
                        .map(|t| t.tensor.data.clone())
                        .ok_or_else(|| malformed(&format!("missing optimizer moment for {}", p.name)))
                };
                optimizer.m[i] = find("m.")?;
                optimizer.v[i] = find("v.")?;
            }
        }
        Ok(Self { config, vocabulary, codebook, model, optimizer, step: ckpt.step, data: None })
    }

    /// Restores using the checkpoint's own config with `overrides` applied on top.
    pub fn from_checkpoint(ckpt: &Checkpoint, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = RunConfig::from_text(&ckpt.config_text)?;
        config.apply(overrides)?;
        Self::resume(config, ckpt)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = vec![NamedTensor {
            name: CODEBOOK_TENSOR.into(),
            tensor: Tensor { shape: vec![self.codebook.vocab, self.codebook.dim], data: self.codebook.vectors.clone() },
        }];
        if let Some(Vocabulary::Char(alpha)) = &self.vocabulary {
            tensors.push(NamedTensor {
                name: VOCAB_TENSOR.into(),
                tensor: Tensor { shape: vec![alpha.len()], data: alpha.iter().map(|&c| c as u32 as f64).collect() },
            });
        }
        tensors.extend(
            self.model.params.iter().map(|p| NamedTensor { name: format!("{PARAM_PREFIX}{}", p.name), tensor: p.value.clone() }),
        );
        let mut moments = Vec::new();
        for (i, p) in self.model.params.iter().enumerate() {
            let shape = p.value.shape.clone();
            moments.push(NamedTensor { name: format!("m.{}", p.name), tensor: Tensor { shape: shape.clone(), data: self.optimizer.m[i].clone() } });
            moments.push(NamedTensor { name: format!("v.{}", p.name), tensor: Tensor { shape, data: self.optimizer.v[i].clone() } });
        }
        Checkpoint {
            config_text: self.config.to_text(),
            config_hash: self.config.model_hash(),
            tensors,
            optimizer_step: self.optimizer.step,
            optimizer_moments: moments,
            rng_seed: self.config.seed,
            rng_cursor: self.step,
            step: self.step,
        }
    }

    /// The data source, loading it on first use.
    pub fn data(&mut self) -> Result<&DataSource> {
        if self.data.is_none() {
            self.data = Some(load_data(&self.config)?);
        }
        Ok(self.data.as_ref().expect("just loaded"))
    }

    fn root(&self) -> SeedStream {
        SeedStream::new(self.config.seed)
    }

    /// One optimisation step on the batch for the current step index.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let root = self.root();
        let (step, bsz) = (self.step, self.config.batch_size);
        let batch = self.data()?.train_batch(step, bsz, root)?;
        let cfg = self.config.train_config();
        let report = train_step(&mut self.model, &mut self.optimizer, &self.codebook, &batch, root.fork(tags::TRAIN).fork(step), &cfg)?;
        self.step += 1;
        Ok(report)
    }

    pub fn validation(&mut self) -> Result<TokenBatch> {
        let root = self.root();
        self.data()?.validation_batch(root)
    }

    pub fn evaluate(&mut self, p_r: f64) -> Result<EvalReport> {
        let data = self.validation()?;
        let mut opts = self.config.eval_options();
        opts.p_r = p_r;
        elbo(&self.model, &data, &self.codebook, &self.config.pair(), &opts, self.root().fork(tags::EVAL))
    }

    pub fn sample(&self) -> Result<SampleOutput> {
        let len = if self.config.sample_len == 0 { self.config.seq_len } else { self.config.sample_len };
        sample(
            &self.model,
            &self.config.pair(),
            &self.config.sampler_config(),
            Some(&self.codebook),
            len,
            self.config.sample_count,
            self.root().fork(tags::SAMPLER),
        )
    }

    /// n-gram reference fit to held-out data from the same source.
    pub fn reference(&mut self) -> Result<NGramReference> {
        let (order, smoothing, n) = (self.config.ngram_order, self.config.ngram_smoothing, self.config.ngram_train_sequences);
        let root = self.root();
        let len = self.config.seq_len;
        let (held_out, id) = match self.data()? {
            DataSource::Synthetic { source, .. } => (source.sample(n, len, root.fork(tags::NGRAM)), "synthetic-held-out".to_string()),
            DataSource::Corpus(c) => (c.validation_batch()?, "corpus-validation".to_string()),
        };
        NGramReference::train(order, held_out.vocab, smoothing, &held_out, &id)
    }

    pub fn generative_nll(&mut self, samples: &TokenBatch) -> Result<f64> {
        let r = self.reference()?;
        generative_nll(&r, samples)
    }

    /// Text form of one sequence.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        match &self.vocabulary {
            Some(v) => v.decode(ids),
            None => ids.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
        }
    }
}

fn malformed(msg: &str) -> Error {
    CheckpointError::Malformed(msg.to_string()).into()
}
