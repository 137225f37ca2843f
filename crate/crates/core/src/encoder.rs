//! Shared dual encoder: token embedding, mean pooling, linear projection,
//! L2 normalization. Queries and passages share all weights and differ only
//! by a reserved role-prefix token.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{TokenId, PASSAGE_PREFIX, QUERY_PREFIX};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MOPO1";

/// Projected vectors shorter than this are replaced by the first basis vector.
pub const ZERO_NORM_GUARD: f64 = 1e-9;

const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder config error: {0}")]
    Config(String),
    #[error("encoder input error: {0}")]
    Input(String),
    #[error("cannot backpropagate through a zero-norm guarded encoding")]
    NonDifferentiable,
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint dimension mismatch: file has {found}, run expects {expected}")]
    Dimension { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Passage,
}

impl Role {
    pub fn prefix(self) -> TokenId {
        match self {
            Role::Query => QUERY_PREFIX,
            Role::Passage => PASSAGE_PREFIX,
        }
    }
}

/// Embedding table (`vocab_size x hidden`) followed by the projection
/// (`hidden x out_dim`), both row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    vocab_size: usize,
    hidden: usize,
    out_dim: usize,
    values: Vec<f64>,
}

impl EncoderParams {
    /// Uniform init in `[-0.05, 0.05]`. Draws are single-precision values so
    /// a fresh model survives a checkpoint round trip bit for bit.
    pub fn init(vocab_size: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<Self, EncoderError> {
        if vocab_size == 0 || hidden == 0 || out_dim == 0 {
            return Err(EncoderError::Config(format!(
                "dimensions must be positive, got |V|={vocab_size} h={hidden} h_out={out_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = vocab_size * hidden + hidden * out_dim;
        let scale = INIT_SCALE as f32;
        let values = (0..n)
            .map(|_| f64::from(rng.gen_range(-scale..=scale)))
            .collect();
        Ok(Self {
            vocab_size,
            hidden,
            out_dim,
            values,
        })
    }

    pub fn from_parts(vocab_size: usize, hidden: usize, out_dim: usize, values: Vec<f64>) -> Result<Self, EncoderError> {
        let expected = vocab_size * hidden + hidden * out_dim;
        if values.len() != expected {
            return Err(EncoderError::Config(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(EncoderError::Config(format!("non-finite parameter at {bad}")));
        }
        Ok(Self {
            vocab_size,
            hidden,
            out_dim,
            values,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.vocab_size, self.hidden, self.out_dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn embed(&self) -> &[f64] {
        &self.values[..self.vocab_size * self.hidden]
    }

    pub fn proj(&self) -> &[f64] {
        &self.values[self.vocab_size * self.hidden..]
    }

    pub fn embed_row(&self, token: TokenId) -> &[f64] {
        let start = token as usize * self.hidden;
        &self.values[start..start + self.hidden]
    }

    pub fn embed_row_mut(&mut self, token: TokenId) -> &mut [f64] {
        let start = token as usize * self.hidden;
        &mut self.values[start..start + self.hidden]
    }

    /// Snap every value to the nearest `f32`, the checkpoint's storage width.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = f64::from(*v as f32);
        }
    }

    pub fn encode(&self, role: Role, tokens: &[TokenId]) -> Result<EncodedText, EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::Input("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(EncoderError::Input(format!(
                "token {bad} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(role.prefix());
        input.extend_from_slice(tokens);

        let h = self.hidden;
        let mut pooled = vec![0.0; h];
        for &t in &input {
            for (p, e) in pooled.iter_mut().zip(self.embed_row(t)) {
                *p += e;
            }
        }
        let inv = 1.0 / input.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);

        let proj = self.proj();
        let mut projected = vec![0.0; self.out_dim];
        for (i, &x) in pooled.iter().enumerate() {
            let row = &proj[i * self.out_dim..(i + 1) * self.out_dim];
            for (y, w) in projected.iter_mut().zip(row) {
                *y += x * w;
            }
        }
        let norm = projected.iter().map(|y| y * y).sum::<f64>().sqrt();
        let differentiable = norm >= ZERO_NORM_GUARD;
        let vec = if differentiable {
            projected.iter().map(|y| y / norm).collect()
        } else {
            let mut e0 = vec![0.0; self.out_dim];
            e0[0] = 1.0;
            e0
        };
        Ok(EncodedText {
            vec,
            cache: EncodeCache {
                tokens: input,
                pooled,
                norm,
                differentiable,
            },
        })
    }

    /// Add the parameter gradient of `<grad_vec, encoded.vec>` into `grads`.
    pub fn accumulate_backward(
        &self,
        encoded: &EncodedText,
        grad_vec: &[f64],
        grads: &mut ParamGrads,
    ) -> Result<(), EncoderError> {
        let cache = &encoded.cache;
        if !cache.differentiable {
            return Err(EncoderError::NonDifferentiable);
        }
        debug_assert_eq!(grads.values.len(), self.values.len());
        let y = &encoded.vec;
        // d(x/|x|) v = (v - y (y.v)) / |x|
        let dot: f64 = y.iter().zip(grad_vec).map(|(a, b)| a * b).sum();
        let grad_proj_out: Vec<f64> = grad_vec
            .iter()
            .zip(y)
            .map(|(g, yi)| (g - yi * dot) / cache.norm)
            .collect();

        let (h, o) = (self.hidden, self.out_dim);
        let proj = self.proj();
        let embed_len = self.vocab_size * h;
        let mut grad_pooled = vec![0.0; h];
        {
            let grad_proj = &mut grads.values[embed_len..];
            for i in 0..h {
                let x = cache.pooled[i];
                let w_row = &proj[i * o..(i + 1) * o];
                let g_row = &mut grad_proj[i * o..(i + 1) * o];
                let mut acc = 0.0;
                for j in 0..o {
                    g_row[j] += x * grad_proj_out[j];
                    acc += w_row[j] * grad_proj_out[j];
                }
                grad_pooled[i] = acc;
            }
        }
        let inv = 1.0 / cache.tokens.len() as f64;
        for &t in &cache.tokens {
            let start = t as usize * h;
            for (g, gp) in grads.values[start..start + h].iter_mut().zip(&grad_pooled) {
                *g += gp * inv;
            }
        }
        Ok(())
    }

    /// Parameter gradient of `<grad_vec, encoded.vec>`.
    pub fn encode_backward(&self, encoded: &EncodedText, grad_vec: &[f64]) -> Result<ParamGrads, EncoderError> {
        let mut grads = ParamGrads::zeros_like(self);
        self.accumulate_backward(encoded, grad_vec, &mut grads)?;
        Ok(grads)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 12 + 4 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for dim in [self.vocab_size, self.hidden, self.out_dim] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, EncoderError> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }

    /// Load and require the given `(|V|, h, h_out)`.
    pub fn load_checkpoint_expecting(path: &Path, expected: (usize, usize, usize)) -> Result<Self, EncoderError> {
        let params = Self::load_checkpoint(path)?;
        if params.shape() != expected {
            let fmt = |(v, h, o): (usize, usize, usize)| format!("|V|={v} h={h} h_out={o}");
            return Err(EncoderError::Dimension {
                found: fmt(params.shape()),
                expected: fmt(expected),
            });
        }
        Ok(params)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let header = CHECKPOINT_MAGIC.len() + 12;
        if bytes.len() < header || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(EncoderError::Format("missing MOPO1 header".into()));
        }
        let dim = |i: usize| {
            let at = CHECKPOINT_MAGIC.len() + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
        };
        let (v, h, o) = (dim(0), dim(1), dim(2));
        if v == 0 || h == 0 || o == 0 {
            return Err(EncoderError::Format(format!("zero dimension in header ({v}, {h}, {o})")));
        }
        let n = v
            .checked_mul(h)
            .and_then(|a| h.checked_mul(o).and_then(|b| a.checked_add(b)))
            .ok_or_else(|| EncoderError::Format("header dimensions overflow".into()))?;
        let body = &bytes[header..];
        if body.len() != 4 * n {
            return Err(EncoderError::Format(format!(
                "expected {} payload bytes for |V|={v} h={h} h_out={o}, found {}",
                4 * n,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Self::from_parts(v, h, o, values).map_err(|e| EncoderError::Format(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    /// Prefix plus input tokens.
    pub tokens: Vec<TokenId>,
    pub pooled: Vec<f64>,
    /// Norm of the projected vector before normalization.
    pub norm: f64,
    pub differentiable: bool,
}

#[derive(Debug, Clone)]
pub struct EncodedText {
    pub vec: Vec<f64>,
    pub cache: EncodeCache,
}

impl EncodedText {
    pub fn dot(&self, other: &EncodedText) -> f64 {
        dot(&self.vec, &other.vec)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense gradient buffer laid out like [`EncoderParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub values: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            values: vec![0.0; params.values.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&g| g == 0.0)
    }
}
