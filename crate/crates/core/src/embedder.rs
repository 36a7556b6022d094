//! Fixed token encoders: one-hot simplex, token-wise random codebook, and a
//! synthetic contextual mixer, plus nearest-codeword decoding.

use rand_distr::{Distribution, StandardNormal};

use crate::batch::{LatentBatch, TokenBatch};
use crate::error::{config, input, Result};
use crate::rng::SeedStream;

/// Largest pairwise |cosine| tolerated between rows of a non-orthonormal codebook.
pub const MAX_COHERENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodebookMode {
    OnehotSimplex,
    RandomOrthonormal,
    /// Token-wise base rows mixed over a symmetric window of `radius` with weights `weight^|k-j|`.
    Contextual { weight: f64, radius: usize },
}

impl CodebookMode {
    pub fn name(&self) -> &'static str {
        match self {
            CodebookMode::OnehotSimplex => "onehot_simplex",
            CodebookMode::RandomOrthonormal => "random_orthonormal",
            CodebookMode::Contextual { .. } => "contextual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vocab: usize,
    pub dim: usize,
    /// Row-major `vocab × dim`.
    pub vectors: Vec<f64>,
    pub mode: CodebookMode,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Codebook {
    /// Builds the codebook for `mode`. `dim` is ignored for the simplex (it equals `vocab`).
    pub fn build(mode: CodebookMode, vocab: usize, dim: usize, seed: SeedStream) -> Result<Self> {
        if vocab == 0 {
            return Err(config("codebook needs a non-empty vocabulary"));
        }
        if let CodebookMode::Contextual { weight, .. } = mode {
            if !(0.0..1.0).contains(&weight) {
                return Err(config(format!("contextual weight must lie in [0, 1), got {weight}")));
            }
        }
        let (dim, vectors) = match mode {
            CodebookMode::OnehotSimplex => {
                let mut v = vec![0.0; vocab * vocab];
                for i in 0..vocab {
                    v[i * vocab + i] = 1.0;
                }
                (vocab, v)
            }
            CodebookMode::RandomOrthonormal | CodebookMode::Contextual { .. } => {
                if dim == 0 {
                    return Err(config("embedding dimension must be positive"));
                }
                (dim, random_rows(vocab, dim, seed)?)
            }
        };
        Ok(Self { vocab, dim, vectors, mode })
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.vectors[v * self.dim..(v + 1) * self.dim]
    }

    /// Largest |⟨e_u, e_v⟩| over distinct rows.
    pub fn coherence(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for u in 0..self.vocab {
            for v in u + 1..self.vocab {
                worst = worst.max(dot(self.row(u), self.row(v)).abs());
            }
        }
        worst
    }

    /// Maps clean tokens to unit-norm embeddings.
    pub fn encode(&self, x0: &TokenBatch) -> Result<LatentBatch> {
        if let Some(&bad) = x0.ids.iter().find(|&&id| id as usize >= self.vocab) {
            return Err(input(format!("token {bad} outside codebook vocabulary {}", self.vocab)));
        }
        Ok(self.encode_with_erasures(x0))
    }

    /// Encodes `x`, treating ids `>= vocab` (the mask symbol) as the zero vector.
    ///
    /// Used by the re-embedding representation mask, where the partially masked
    /// sequence is embedded in place of the clean one.
    pub fn encode_with_erasures(&self, x: &TokenBatch) -> LatentBatch {
        let mut out = LatentBatch::zeros(x.batch, x.len, self.dim);
        let row_of = |id: u32| (id as usize) < self.vocab;
        for b in 0..x.batch {
            for j in 0..x.len {
                let dst = out.vector_mut(b, j);
                match self.mode {
                    CodebookMode::Contextual { weight, radius } => {
                        let lo = j.saturating_sub(radius);
                        let hi = (j + radius).min(x.len - 1);
                        for k in lo..=hi {
                            let id = x.get(b, k);
                            if !row_of(id) {
                                continue;
                            }
                            let w = weight.powi(k.abs_diff(j) as i32);
                            if w == 0.0 {
                                continue;
                            }
                            for (d, e) in dst.iter_mut().zip(self.row(id as usize)) {
                                *d += w * e;
                            }
                        }
                        normalize(dst);
                    }
                    _ => {
                        let id = x.get(b, j);
                        if row_of(id) {
                            dst.copy_from_slice(self.row(id as usize));
                        }
                    }
                }
            }
        }
        out
    }

    /// Nearest codeword by inner product; ties go to the lowest id.
    pub fn decode_nn(&self, z: &LatentBatch) -> Result<TokenBatch> {
        if z.dim != self.dim {
            return Err(input(format!("latent dim {} does not match codebook dim {}", z.dim, self.dim)));
        }
        let mut ids = Vec::with_capacity(z.batch * z.len);
        for b in 0..z.batch {
            for j in 0..z.len {
                let v = z.vector(b, j);
                let mut best = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for tok in 0..self.vocab {
                    let s = dot(v, self.row(tok));
                    if s > best_score {
                        best_score = s;
                        best = tok;
                    }
                }
                ids.push(best as u32);
            }
        }
        TokenBatch::new(z.batch, z.len, self.vocab, ids)
    }
}

/// Orthonormal rows when `vocab <= dim`, otherwise unit rows pushed apart until
/// their coherence drops below [`MAX_COHERENCE`].
fn random_rows(vocab: usize, dim: usize, seed: SeedStream) -> Result<Vec<f64>> {
    let mut rng = seed.rng();
    let mut m: Vec<f64> = (0..vocab * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    if vocab <= dim {
        // Modified Gram-Schmidt, run twice for orthogonality at the 1e-15 level.
        for _ in 0..2 {
            for i in 0..vocab {
                for k in 0..i {
                    let (head, tail) = m.split_at_mut(i * dim);
                    let prev = &head[k * dim..(k + 1) * dim];
                    let cur = &mut tail[..dim];
                    let p = dot(cur, prev);
                    cur.iter_mut().zip(prev).for_each(|(c, q)| *c -= p * q);
                }
                normalize(&mut m[i * dim..(i + 1) * dim]);
            }
        }
        return Ok(m);
    }
    for i in 0..vocab {
        normalize(&mut m[i * dim..(i + 1) * dim]);
    }
    // Repulsion on the rows: descend Σ_{u≠v} ⟨e_u, e_v⟩⁴ with renormalisation.
    let step = 0.5;
    for _ in 0..2000 {
        let mut worst: f64 = 0.0;
        let mut update = vec![0.0; vocab * dim];
        for u in 0..vocab {
            for v in 0..vocab {
                if u == v {
                    continue;
                }
                let c = dot(&m[u * dim..(u + 1) * dim], &m[v * dim..(v + 1) * dim]);
                worst = worst.max(c.abs());
                let g = c * c * c;
                for d in 0..dim {
                    update[u * dim + d] += g * m[v * dim + d];
                }
            }
        }
        if worst < MAX_COHERENCE - 0.05 {
            return Ok(m);
        }
        for (x, g) in m.iter_mut().zip(&update) {
            *x -= step * g;
        }
        for i in 0..vocab {
            normalize(&mut m[i * dim..(i + 1) * dim]);
        }
    }
    Err(config(format!(
        "could not spread {vocab} codewords in {dim} dimensions below coherence {MAX_COHERENCE}"
    )))
}
