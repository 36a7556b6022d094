//! Flat `key = value` run configuration with typed parsing and validation.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corruption::ReprMaskMode;
use crate::data::TokenizerKind;
use crate::denoiser::{Arch, DenoiserConfig, Fuse};
use crate::embedder::CodebookMode;
use crate::error::{config, Result};
use crate::evaluation::EvalOptions;
use crate::sampler::{DecodeSource, SamplerConfig, VarianceMode};
use crate::schedules::{ContinuousSchedule, DiscreteSchedule, EtaCurve, Pairing, SchedulePair, T_FLOOR};
use crate::training::{AdamWConfig, LambdaCont, LambdaDisc, LossWeights, TrainConfig};

/// Environment variable that overrides `out_dir` from the file (flags still win).
pub const OUT_DIR_ENV: &str = "CCDD_OUT_DIR";

/// A value that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

fn parse_from_str<T: FromStr>(s: &str, what: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(|e| format!("expected {what}, got {s:?} ({e})"))
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_from_str(s, "a non-negative integer")
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_from_str(s, "a non-negative integer")
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = parse_from_str(s, "a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("expected a finite number, got {s:?}"))
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(format!("expected true or false, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<u32> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| parse_from_str::<u32>(p.trim(), "a comma-separated list of token ids")).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// `nelbo` or a constant weight.
impl ConfigValue for LambdaDisc {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "nelbo" {
            Ok(LambdaDisc::Nelbo)
        } else {
            f64::parse_value(s).map(LambdaDisc::Constant).map_err(|_| format!("expected nelbo or a number, got {s:?}"))
        }
    }
    fn render(&self) -> String {
        match self {
            LambdaDisc::Nelbo => "nelbo".to_string(),
            LambdaDisc::Constant(c) => c.render(),
        }
    }
}

macro_rules! named_enum {
    ($ty:ty { $($variant:path => $name:literal),* $(,)? }) => {
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)*
                    _ => Err(format!("expected one of {}, got {s:?}", [$($name),*].join(" | "))),
                }
            }
            fn render(&self) -> String {
                match self {
                    $($variant => $name.to_string(),)*
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Corpus,
    IidUniform,
    Bigram,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContinuousKind {
    VpConstantBeta,
    VpLinearBeta,
    ConcaveSqrt,
    LinearAlpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscreteKind {
    MaskedLinear,
    MaskedCosine,
    MaskedPower,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookKind {
    OnehotSimplex,
    RandomOrthonormal,
    Contextual,
}

named_enum!(SourceKind { SourceKind::Corpus => "corpus", SourceKind::IidUniform => "iid_uniform", SourceKind::Bigram => "bigram", SourceKind::Periodic => "periodic" });
named_enum!(ContinuousKind {
    ContinuousKind::VpConstantBeta => "vp_constant_beta",
    ContinuousKind::VpLinearBeta => "vp_linear_beta",
    ContinuousKind::ConcaveSqrt => "concave_sqrt",
    ContinuousKind::LinearAlpha => "linear_alpha",
});
named_enum!(DiscreteKind {
    DiscreteKind::MaskedLinear => "masked_linear",
    DiscreteKind::MaskedCosine => "masked_cosine",
    DiscreteKind::MaskedPower => "masked_power",
    DiscreteKind::Uniform => "uniform",
});
named_enum!(CodebookKind {
    CodebookKind::OnehotSimplex => "onehot_simplex",
    CodebookKind::RandomOrthonormal => "random_orthonormal",
    CodebookKind::Contextual => "contextual",
});
named_enum!(TokenizerKind { TokenizerKind::Byte => "byte", TokenizerKind::Char => "char" });
named_enum!(Pairing { Pairing::Synchronous => "synchronous", Pairing::ContinuousAhead => "continuous_ahead" });
named_enum!(ReprMaskMode { ReprMaskMode::Zero => "zero", ReprMaskMode::Reembed => "reembed" });
named_enum!(Arch { Arch::Mdit => "mdit", Arch::Mmdit => "mmdit", Arch::Moedit => "moedit" });
named_enum!(Fuse { Fuse::Add => "add", Fuse::Concat => "concat" });
named_enum!(VarianceMode { VarianceMode::ForwardKernel => "forward_kernel", VarianceMode::ExactPosterior => "exact_posterior" });
named_enum!(DecodeSource { DecodeSource::DiscreteTokens => "discrete_tokens", DecodeSource::NnFromLatent => "nn_from_latent" });

/// Keys that control a run without changing what is being trained; excluded from the config hash.
pub const RUN_CONTROL_KEYS: &[&str] = &["seed", "out_dir", "threads", "train_steps", "checkpoint_every", "log_every", "checkpoint"];

/// Prefixes of keys that only affect sampling and evaluation; also excluded from the hash.
const INFERENCE_PREFIXES: &[&str] = &["sample_", "eval_", "ngram_"];
const INFERENCE_KEYS: &[&str] =
    &["eta_ddpm", "cfg_w", "variance_mode", "temperature", "decode_source", "argmax", "discrete_ppl_only"];

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr),* $(,)?) => {
        /// Every setting of a run. Field names are the config keys.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            /// All keys in canonical order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($key) => { self.$key = <$ty as ConfigValue>::parse_value(value)?; Ok(()) })*
                    _ => Err("unknown key".to_string()),
                }
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(self.$key.render()),)*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    out_dir: String = "runs/default".to_string(),
    threads: usize = 1,
    train_steps: u64 = 1000,
    checkpoint_every: u64 = 0,
    log_every: u64 = 100,
    checkpoint: String = String::new(),

    source: SourceKind = SourceKind::Bigram,
    corpus_path: String = String::new(),
    tokenizer: TokenizerKind = TokenizerKind::Byte,
    vocab: usize = 8,
    bigram_p_next: f64 = 0.6,
    bigram_p_skip: f64 = 0.2,
    periodic_pattern: Vec<u32> = vec![0, 1],
    n_validation: usize = 256,
    seq_len: usize = 32,
    batch_size: usize = 32,

    continuous_schedule: ContinuousKind = ContinuousKind::ConcaveSqrt,
    vp_beta: f64 = -2.0 * crate::schedules::VP_TERMINAL_ALPHA.ln(),
    vp_beta_min: f64 = 0.1,
    vp_beta_max: f64 = 20.0,
    discrete_schedule: DiscreteKind = DiscreteKind::MaskedLinear,
    eta_power: f64 = 2.0,
    uniform_rate: f64 = 3.0,
    pairing: Pairing = Pairing::ContinuousAhead,

    codebook: CodebookKind = CodebookKind::RandomOrthonormal,
    d_latent: usize = 32,
    context_weight: f64 = 0.3,
    context_radius: usize = 1,

    arch: Arch = Arch::Mdit,
    n_layers: usize = 2,
    d_model: usize = 64,
    n_heads: usize = 4,
    n_experts: usize = 4,
    fuse: Fuse = Fuse::Concat,
    mlp_ratio: usize = 4,
    freq_dim: usize = 64,
    use_rope: bool = true,

    gamma_cont: f64 = 1.0,
    gamma_disc: f64 = 1.0,
    lambda_cont: f64 = 1.0,
    lambda_disc: LambdaDisc = LambdaDisc::Nelbo,
    p_drop: f64 = 0.15,
    p_r_min: f64 = 0.0,
    p_r_max: f64 = 0.9,
    repr_mask: ReprMaskMode = ReprMaskMode::Zero,
    t_floor: f64 = T_FLOOR,
    lr: f64 = 3e-4,
    warmup_steps: u64 = 100,
    beta1: f64 = 0.9,
    beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    weight_decay: f64 = 0.02,
    grad_clip: f64 = 1.0,

    sample_steps: usize = 64,
    sample_count: usize = 8,
    sample_len: usize = 0,
    eta_ddpm: f64 = 1.0,
    cfg_w: f64 = 1.0,
    variance_mode: VarianceMode = VarianceMode::ExactPosterior,
    temperature: f64 = 1.0,
    decode_source: DecodeSource = DecodeSource::DiscreteTokens,
    argmax: bool = false,
    sample_output: String = String::new(),
    sample_latents: bool = false,

    eval_mc_times: usize = 16,
    eval_p_r: f64 = 1.0,
    eval_chunk: usize = 64,
    discrete_ppl_only: bool = false,
    ngram_order: usize = 2,
    ngram_smoothing: f64 = 0.1,
    ngram_train_sequences: usize = 4096,
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are an error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut problems = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                let k = k.trim().to_string();
                if out.iter().any(|(seen, _)| *seen == k) {
                    problems.push(format!("line {}: duplicate key {k}", i + 1));
                } else {
                    out.push((k, v.trim().to_string()));
                }
            }
            None => problems.push(format!("line {}: expected key = value, got {line:?}", i + 1)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(config(problems.join("; ")))
    }
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl RunConfig {
    /// Defaults overlaid with `pairs`; every unknown key and unparsable value is reported together.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(pairs)?;
        Ok(cfg)
    }

    /// Overlays `pairs` and validates the result.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut problems = Vec::new();
        for (k, v) in pairs {
            if let Err(e) = self.set(k, v) {
                problems.push(format!("{k}: {e}"));
            }
        }
        if !problems.is_empty() {
            return Err(config(problems.join("; ")));
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Canonical text: every key, one per line, in declaration order.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default())).collect()
    }

    fn hashed_keys() -> impl Iterator<Item = &'static str> {
        Self::KEYS.iter().copied().filter(|k| {
            !RUN_CONTROL_KEYS.contains(k) && !INFERENCE_KEYS.contains(k) && !INFERENCE_PREFIXES.iter().any(|p| k.starts_with(p))
        })
    }

    /// SHA-256 over the keys that define the data, model and training objective.
    pub fn model_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for k in Self::hashed_keys() {
            h.update(format!("{k}={}\n", self.get(k).unwrap_or_default()).as_bytes());
        }
        h.finalize().into()
    }

    /// Keys whose values differ between two configs and enter the hash.
    pub fn model_key_differences(&self, other: &RunConfig) -> Vec<String> {
        Self::hashed_keys().filter(|k| self.get(k) != other.get(k)).map(str::to_string).collect()
    }

    /// Semantic checks; each message names its key.
    pub fn validate(&self) -> Result<()> {
        let mut p: Vec<String> = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                p.push(msg);
            }
        };
        need(self.threads >= 1, "threads: must be at least 1".into());
        need(self.seq_len >= 1, "seq_len: must be positive".into());
        need(self.batch_size >= 1, "batch_size: must be positive".into());
        need(self.vocab >= 1, "vocab: must be positive".into());
        need(
            self.source != SourceKind::Bigram || self.vocab >= 4,
            format!("vocab: the bigram source needs at least 4 tokens, got {}", self.vocab),
        );
        need(
            self.source != SourceKind::Corpus || !self.corpus_path.is_empty(),
            "corpus_path: required when source = corpus".into(),
        );
        need(
            self.bigram_p_next >= 0.0 && self.bigram_p_skip >= 0.0 && self.bigram_p_next + self.bigram_p_skip <= 1.0,
            "bigram_p_next, bigram_p_skip: must be nonnegative with sum at most 1".into(),
        );
        need(
            self.source != SourceKind::Periodic
                || (!self.periodic_pattern.is_empty() && self.periodic_pattern.iter().all(|&v| (v as usize) < self.vocab)),
            "periodic_pattern: must be a non-empty list of ids below vocab".into(),
        );
        need(self.n_validation >= 1, "n_validation: must be positive".into());
        need(self.gamma_cont >= 0.0, format!("gamma_cont: must be >= 0, got {}", self.gamma_cont));
        need(self.gamma_disc >= 0.0, format!("gamma_disc: must be >= 0, got {}", self.gamma_disc));
        need(self.lambda_cont >= 0.0, format!("lambda_cont: must be >= 0, got {}", self.lambda_cont));
        if let LambdaDisc::Constant(c) = self.lambda_disc {
            need(c >= 0.0, format!("lambda_disc: must be >= 0, got {c}"));
        }
        need(
            !(self.lambda_disc == LambdaDisc::Nelbo && self.discrete_schedule == DiscreteKind::Uniform),
            "lambda_disc: nelbo weighting needs a masking schedule; set a constant for uniform noise".into(),
        );
        need(in_unit(self.p_drop), format!("p_drop: must lie in [0, 1], got {}", self.p_drop));
        need(
            in_unit(self.p_r_min) && in_unit(self.p_r_max) && self.p_r_min <= self.p_r_max,
            "p_r_min, p_r_max: need 0 <= p_r_min <= p_r_max <= 1".into(),
        );
        need(
            self.t_floor >= T_FLOOR && self.t_floor < 1.0,
            format!("t_floor: must lie in [{T_FLOOR}, 1), got {}", self.t_floor),
        );
        need(self.lr > 0.0, format!("lr: must be positive, got {}", self.lr));
        need(in_unit(self.beta1) && self.beta1 < 1.0, "beta1: must lie in [0, 1)".into());
        need(in_unit(self.beta2) && self.beta2 < 1.0, "beta2: must lie in [0, 1)".into());
        need(self.adam_eps > 0.0, "adam_eps: must be positive".into());
        need(self.weight_decay >= 0.0, "weight_decay: must be >= 0".into());
        need(self.grad_clip > 0.0, "grad_clip: must be positive".into());
        need(self.sample_steps >= 1, "sample_steps: must be positive".into());
        need(self.sample_count >= 1, "sample_count: must be positive".into());
        need(in_unit(self.eta_ddpm), format!("eta_ddpm: must lie in [0, 1], got {}", self.eta_ddpm));
        need(self.temperature > 0.0, format!("temperature: must be positive, got {}", self.temperature));
        need(self.eval_mc_times >= 1, "eval_mc_times: must be positive".into());
        need(in_unit(self.eval_p_r), format!("eval_p_r: must lie in [0, 1], got {}", self.eval_p_r));
        need(self.eval_chunk >= 1, "eval_chunk: must be positive".into());
        need(self.ngram_order == 2 || self.ngram_order == 3, "ngram_order: must be 2 or 3".into());
        need(self.ngram_smoothing > 0.0, "ngram_smoothing: must be positive".into());
        need(
            !(self.codebook == CodebookKind::Contextual && !(0.0..1.0).contains(&self.context_weight)),
            "context_weight: must lie in [0, 1)".into(),
        );
        if let Err(e) = self.pair().validate() {
            p.push(format!("continuous_schedule, discrete_schedule, pairing: {e}"));
        }
        if self.source != SourceKind::Corpus {
            if let Err(e) = self.denoiser_config(self.vocab).validate() {
                p.push(format!("arch, n_layers, d_model, n_heads, n_experts, mlp_ratio, freq_dim: {e}"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(config(p.join("; ")))
        }
    }

    pub fn pair(&self) -> SchedulePair {
        let continuous = match self.continuous_schedule {
            ContinuousKind::VpConstantBeta => ContinuousSchedule::VpConstantBeta { beta: self.vp_beta },
            ContinuousKind::VpLinearBeta => ContinuousSchedule::VpLinearBeta { beta_min: self.vp_beta_min, beta_max: self.vp_beta_max },
            ContinuousKind::ConcaveSqrt => ContinuousSchedule::ConcaveSqrt,
            ContinuousKind::LinearAlpha => ContinuousSchedule::LinearAlpha,
        };
        let discrete = match self.discrete_schedule {
            DiscreteKind::MaskedLinear => DiscreteSchedule::MaskedLinear,
            DiscreteKind::MaskedCosine => DiscreteSchedule::MaskedCustom(EtaCurve::Cosine),
            DiscreteKind::MaskedPower => DiscreteSchedule::MaskedCustom(EtaCurve::Power(self.eta_power)),
            DiscreteKind::Uniform => DiscreteSchedule::Uniform { rate: self.uniform_rate },
        };
        SchedulePair { continuous, discrete, pairing: self.pairing }
    }

    pub fn codebook_mode(&self) -> CodebookMode {
        match self.codebook {
            CodebookKind::OnehotSimplex => CodebookMode::OnehotSimplex,
            CodebookKind::RandomOrthonormal => CodebookMode::RandomOrthonormal,
            CodebookKind::Contextual => CodebookMode::Contextual { weight: self.context_weight, radius: self.context_radius },
        }
    }

    /// Latent width actually used: the simplex codebook forces `d = V`.
    pub fn latent_dim(&self, vocab: usize) -> usize {
        if self.codebook == CodebookKind::OnehotSimplex {
            vocab
        } else {
            self.d_latent
        }
    }

    pub fn denoiser_config(&self, vocab: usize) -> DenoiserConfig {
        DenoiserConfig {
            arch: self.arch,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_latent: self.latent_dim(vocab),
            vocab,
            n_experts: self.n_experts,
            fuse: self.fuse,
            mlp_ratio: self.mlp_ratio,
            freq_dim: self.freq_dim,
            use_rope: self.use_rope,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma_cont: self.gamma_cont,
            gamma_disc: self.gamma_disc,
            lambda_cont: LambdaCont::Constant(self.lambda_cont),
            lambda_disc: self.lambda_disc,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            pair: self.pair(),
            weights: self.weights(),
            p_drop: self.p_drop,
            p_r_range: (self.p_r_min, self.p_r_max),
            repr_mask_mode: self.repr_mask,
            t_floor: self.t_floor,
            optimizer: AdamWConfig {
                lr: self.lr,
                warmup_steps: self.warmup_steps,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
                grad_clip: self.grad_clip,
            },
            workers: self.threads,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.sample_steps,
            eta_ddpm: self.eta_ddpm,
            cfg_w: self.cfg_w,
            variance_mode: self.variance_mode,
            temperature: self.temperature,
            decode_source: self.decode_source,
            argmax: self.argmax,
            t_floor: self.t_floor,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_mc_times: self.eval_mc_times,
            p_r: self.eval_p_r,
            weights: self.weights(),
            repr_mask_mode: self.repr_mask,
            t_floor: self.t_floor,
            chunk: self.eval_chunk,
            discrete_ppl_only: self.discrete_ppl_only,
        }
    }

    /// Every key with its rendered value.
    pub fn as_map(&self) -> BTreeMap<&'static str, String> {
        Self::KEYS.iter().map(|k| (*k, self.get(k).unwrap_or_default())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_offending_key_is_listed() {
        let text = "gamma_cont = -1\nbogus = 3\nd_model = x\np_drop = 2\n";
        let err = RunConfig::from_text(text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("d_model"), "{err}");
        let err = RunConfig::from_text("gamma_cont = -1\np_drop = 2\n").unwrap_err().to_string();
        assert!(err.contains("gamma_cont") && err.contains("p_drop"), "{err}");
    }

    #[test]
    fn malformed_lines_and_duplicates() {
        assert!(parse_pairs("seed 3").is_err());
        assert!(parse_pairs("seed = 3\nseed = 4").is_err());
        let p = parse_pairs("# comment\n\nseed = 3 # trailing\n").unwrap();
        assert_eq!(p, vec![("seed".to_string(), "3".to_string())]);
    }

    #[test]
    fn hash_ignores_run_control_and_inference_keys() {
        let a = RunConfig::default();
        let b = RunConfig { train_steps: 5, out_dir: "elsewhere".into(), cfg_w: 1.5, sample_steps: 3, seed: 9, ..a.clone() };
        assert_eq!(a.model_hash(), b.model_hash());
        let c = RunConfig { d_model: 32, ..a.clone() };
        assert_ne!(a.model_hash(), c.model_hash());
        assert_eq!(a.model_key_differences(&c), vec!["d_model".to_string()]);
    }

    #[test]
    fn vp_default_conflicts_with_continuous_ahead_pairing() {
        let err = RunConfig::from_text("continuous_schedule = vp_constant_beta").unwrap_err().to_string();
        assert!(err.contains("pairing"), "{err}");
        RunConfig::from_text("continuous_schedule = vp_constant_beta\npairing = synchronous").unwrap();
    }
}
