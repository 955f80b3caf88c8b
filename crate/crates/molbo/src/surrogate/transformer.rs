//! A deliberately small character-level transformer encoder for molecule
//! strings, used as the frozen base of the PEFT surrogate.
//!
//! Architecture, per sequence of `T` tokens:
//!
//! 1. token embedding plus sinusoidal positions -> X (T x N);
//! 2. `L` pre-norm residual attention blocks, X <- X + Attn(LN(X)), where
//!    each of the `K` heads computes
//!        H_i = softmax((X Q_i^T)(X K_i^T)^T / sqrt(D)) (X V_i^T)
//!    and the block output is [H_1 .. H_K] W_o^T; padding positions are
//!    masked out of the keys with a large negative score;
//! 3. a final layer norm;
//! 4. mean pooling over non-pad positions, yielding an N-vector.
//!
//! The base weights are random and stay frozen. Fine-tuning happens through
//! optional low-rank adapters on the per-head projections,
//!
//! ```text
//! proj(y) = y W*^T + scale * (m . y) A^T B,
//! ```
//!
//! with `m` an optional elementwise input mask (used for adapter dropout
//! during training). The full forward/backward lives here so gradients and
//! Kronecker sites for the adapters come out of one pass; the adapter
//! parameters themselves are owned by the caller.

use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::hashing::{combine, digest_f64s, hash_seq};

use super::mlp::LayerSite;
use super::SurrogateError;

// ----- tokenizer ------------------------------------------------------------

/// Fixed character vocabulary: every byte the molecule-string grammar can
/// produce (organic and bracket atoms, bonds, branches, ring labels), in
/// ASCII order, after the two reserved ids.
const VOCAB_CHARS: &[u8] = b"#%()+-./0123456789:=BCFHINOPS[]bclnoprs";

/// Character-level tokenizer with fixed ids: 0 = padding, 1 = unknown, then
/// one id per known character. The table is static so token ids never depend
/// on the data.
pub struct SmilesTokenizer {
    ids: [u32; 256],
}

impl SmilesTokenizer {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;

    pub fn new() -> Self {
        let mut ids = [Self::UNK; 256];
        for (i, &b) in VOCAB_CHARS.iter().enumerate() {
            ids[b as usize] = i as u32 + 2;
        }
        SmilesTokenizer { ids }
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_CHARS.len() + 2
    }

    /// Encode to exactly `max_len` ids: truncated when longer, padded with
    /// [`Self::PAD`] when shorter.
    pub fn encode(&self, s: &str, max_len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(max_len);
        for &b in s.as_bytes().iter().take(max_len) {
            out.push(self.ids[b as usize]);
        }
        out.resize(max_len, Self::PAD);
        out
    }

    /// Encode a batch to the length of its longest string.
    pub fn encode_batch<S: AsRef<str>>(&self, strs: &[S]) -> Vec<Vec<u32>> {
        let max_len = strs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        strs.iter()
            .map(|s| self.encode(s.as_ref(), max_len))
            .collect()
    }
}

impl Default for SmilesTokenizer {
    fn default() -> Self {
        Self::new()
    }
}

// ----- configuration --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    /// Embedding width N.
    pub embed_dim: usize,
    /// Number of attention heads K.
    pub heads: usize,
    /// Per-head projection width D.
    pub head_dim: usize,
    /// Number of residual blocks L.
    pub layers: usize,
}

impl TransformerConfig {
    /// The desk-scale default: N = 32, K = 2, D = 16, L = 2.
    pub fn standard(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            embed_dim: 32,
            heads: 2,
            head_dim: 16,
            layers: 2,
        }
    }

    fn validate(&self) -> Result<(), SurrogateError> {
        if self.vocab_size < 2
            || self.embed_dim == 0
            || self.heads == 0
            || self.head_dim == 0
            || self.layers == 0
        {
            return Err(SurrogateError::Invalid(
                "transformer dimensions must all be positive (vocab >= 2)".to_string(),
            ));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;
/// Additive key-mask score for padding positions.
const MASK_SCORE: f64 = -1e30;
/// Base-weight initialization scale.
const INIT_STD: f64 = 0.02;

// ----- adapters -------------------------------------------------------------

/// Which per-head projection an adapter attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Proj {
    Q,
    K,
    V,
}

/// A low-rank additive path on one projection:
/// delta = scale * (mask . y) a^T b, with a (Z x N) and b (Z x D).
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    pub layer: usize,
    pub head: usize,
    pub proj: Proj,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub scale: f64,
}

// ----- the encoder ----------------------------------------------------------

#[derive(Debug, Clone)]
struct Block {
    q: Vec<DMatrix<f64>>, // per head, D x N
    k: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    w_o: DMatrix<f64>, // N x (K D)
    ln_gain: DVector<f64>,
    ln_bias: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    cfg: TransformerConfig,
    embedding: DMatrix<f64>, // vocab x N
    blocks: Vec<Block>,
    final_gain: DVector<f64>,
    final_bias: DVector<f64>,
}

impl ToyTransformer {
    /// Random frozen base: Gaussian(0, 0.02^2) projection and embedding
    /// weights, identity layer norms.
    pub fn init(cfg: TransformerConfig, seed: u64) -> Result<Self, SurrogateError> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut gauss = |r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| {
                INIT_STD * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let n = cfg.embed_dim;
        let d = cfg.head_dim;
        let embedding = gauss(cfg.vocab_size, n);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                q: (0..cfg.heads).map(|_| gauss(d, n)).collect(),
                k: (0..cfg.heads).map(|_| gauss(d, n)).collect(),
                v: (0..cfg.heads).map(|_| gauss(d, n)).collect(),
                w_o: gauss(n, cfg.heads * d),
                ln_gain: DVector::repeat(n, 1.0),
                ln_bias: DVector::zeros(n),
            })
            .collect();
        Ok(ToyTransformer {
            final_gain: DVector::repeat(n, 1.0),
            final_bias: DVector::zeros(n),
            cfg,
            embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Visit every base parameter in the canonical order used by the hash
    /// and the on-disk format.
    fn for_each_param(&self, mut f: impl FnMut(f64)) {
        for v in self.embedding.row_iter() {
            v.iter().for_each(|x| f(*x));
        }
        for block in &self.blocks {
            for group in [&block.q, &block.k, &block.v] {
                for m in group {
                    for r in m.row_iter() {
                        r.iter().for_each(|x| f(*x));
                    }
                }
            }
            for r in block.w_o.row_iter() {
                r.iter().for_each(|x| f(*x));
            }
            block.ln_gain.iter().for_each(|x| f(*x));
            block.ln_bias.iter().for_each(|x| f(*x));
        }
        self.final_gain.iter().for_each(|x| f(*x));
        self.final_bias.iter().for_each(|x| f(*x));
    }

    fn param_count(&self) -> usize {
        let mut count = 0;
        self.for_each_param(|_| count += 1);
        count
    }

    /// Digest of the configuration and every base weight; posterior files
    /// record it so they can refuse to load against a different base.
    pub fn content_hash(&self) -> u64 {
        let cfg_hash = hash_seq(
            0x6d62_7463_6366_6731, // domain tag for the configuration
            [
                self.cfg.vocab_size as u64,
                self.cfg.embed_dim as u64,
                self.cfg.heads as u64,
                self.cfg.head_dim as u64,
                self.cfg.layers as u64,
            ],
        );
        let mut params = Vec::with_capacity(self.param_count());
        self.for_each_param(|x| params.push(x));
        combine(cfg_hash, digest_f64s(&params))
    }

    // ----- persistence ------------------------------------------------

    /// Binary container: magic "MBTC", version, the five config integers,
    /// the parameter count, then every weight as little-endian f64 in
    /// canonical order.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> io::Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"MBTC")?;
        for v in [
            1u32,
            self.cfg.vocab_size as u32,
            self.cfg.embed_dim as u32,
            self.cfg.heads as u32,
            self.cfg.head_dim as u32,
            self.cfg.layers as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.param_count() as u64).to_le_bytes())?;
        let mut err = None;
        self.for_each_param(|x| {
            if err.is_none() {
                if let Err(e) = w.write_all(&x.to_le_bytes()) {
                    err = Some(e);
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => w.flush(),
        }
    }

    pub fn load<P: AsRef<Path>>(path: P) -> io::Result<Self> {
        let mut r = io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MBTC" {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "not a transformer container (bad magic)",
            ));
        }
        let read_u32 = |r: &mut dyn Read| -> io::Result<u32> {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf))
        };
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unsupported container version {version}"),
            ));
        }
        let cfg = TransformerConfig {
            vocab_size: read_u32(&mut r)? as usize,
            embed_dim: read_u32(&mut r)? as usize,
            heads: read_u32(&mut r)? as usize,
            head_dim: read_u32(&mut r)? as usize,
            layers: read_u32(&mut r)? as usize,
        };
        let mut count_buf = [0u8; 8];
        r.read_exact(&mut count_buf)?;
        let count = u64::from_le_bytes(count_buf) as usize;

        let mut model = ToyTransformer::init(cfg, 0)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        if count != model.param_count() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!(
                    "container holds {count} parameter(s), configuration needs {}",
                    model.param_count()
                ),
            ));
        }
        let mut params = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let x = f64::from_le_bytes(buf);
            if !x.is_finite() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "non-finite parameter in container",
                ));
            }
            params.push(x);
        }
        model.set_params_canonical(&params);
        Ok(model)
    }

    fn set_params_canonical(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        let mut next = move || it.next().expect("parameter count already validated");
        for r in 0..self.embedding.nrows() {
            for c in 0..self.embedding.ncols() {
                self.embedding[(r, c)] = next();
            }
        }
        for block in &mut self.blocks {
            for group in [&mut block.q, &mut block.k, &mut block.v] {
                for m in group {
                    for r in 0..m.nrows() {
                        for c in 0..m.ncols() {
                            m[(r, c)] = next();
                        }
                    }
                }
            }
            for r in 0..block.w_o.nrows() {
                for c in 0..block.w_o.ncols() {
                    block.w_o[(r, c)] = next();
                }
            }
            for i in 0..block.ln_gain.len() {
                block.ln_gain[i] = next();
            }
            for i in 0..block.ln_bias.len() {
                block.ln_bias[i] = next();
            }
        }
        for i in 0..self.final_gain.len() {
            self.final_gain[i] = next();
        }
        for i in 0..self.final_bias.len() {
            self.final_bias[i] = next();
        }
    }
}

// ----- forward --------------------------------------------------------------

struct LnCache {
    xhat: DMatrix<f64>,
    r: DVector<f64>,
    y: DMatrix<f64>,
}

struct HeadCache {
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: DMatrix<f64>,
}

struct AdapterCache {
    /// Masked adapter input (T x N).
    ym: DMatrix<f64>,
    /// Low-rank activation u = ym A^T (T x Z).
    u: DMatrix<f64>,
}

/// Everything the backward pass needs from one sequence's forward pass.
pub struct ForwardCache {
    mask: Vec<bool>,
    count: f64,
    ln: Vec<LnCache>,
    heads: Vec<Vec<HeadCache>>,
    final_ln: LnCache,
    adapters: Vec<AdapterCache>,
    pub pooled: DVector<f64>,
}

/// Row-wise layer norm with affine parameters.
fn ln_forward(x: &DMatrix<f64>, gain: &DVector<f64>, bias: &DVector<f64>) -> LnCache {
    let (t, n) = (x.nrows(), x.ncols());
    let mut xhat = DMatrix::zeros(t, n);
    let mut r = DVector::zeros(t);
    let mut y = DMatrix::zeros(t, n);
    for i in 0..t {
        let mean = x.row(i).sum() / n as f64;
        let var = x.row(i).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        r[i] = inv;
        for j in 0..n {
            let h = (x[(i, j)] - mean) * inv;
            xhat[(i, j)] = h;
            y[(i, j)] = h * gain[j] + bias[j];
        }
    }
    LnCache { xhat, r, y }
}

/// Backward of [`ln_forward`]: given dL/dy, return dL/dx.
fn ln_backward(cache: &LnCache, gain: &DVector<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    let (t, n) = (dy.nrows(), dy.ncols());
    let mut dx = DMatrix::zeros(t, n);
    for i in 0..t {
        let mut mean_dh = 0.0;
        let mut mean_dh_xhat = 0.0;
        for j in 0..n {
            let dh = dy[(i, j)] * gain[j];
            mean_dh += dh;
            mean_dh_xhat += dh * cache.xhat[(i, j)];
        }
        mean_dh /= n as f64;
        mean_dh_xhat /= n as f64;
        for j in 0..n {
            let dh = dy[(i, j)] * gain[j];
            dx[(i, j)] = cache.r[i] * (dh - mean_dh - cache.xhat[(i, j)] * mean_dh_xhat);
        }
    }
    dx
}

/// Numerically stable row softmax of masked scores.
fn masked_softmax_rows(scores: &mut DMatrix<f64>, mask: &[bool]) {
    for i in 0..scores.nrows() {
        for j in 0..scores.ncols() {
            if !mask[j] {
                scores[(i, j)] = MASK_SCORE;
            }
        }
        let max = scores.row(i).max();
        let mut denom = 0.0;
        for j in 0..scores.ncols() {
            let e = (scores[(i, j)] - max).exp();
            scores[(i, j)] = e;
            denom += e;
        }
        for j in 0..scores.ncols() {
            scores[(i, j)] /= denom;
        }
    }
}

/// Multi-head attention over pre-projected inputs: one standalone op so the
/// block arithmetic can be pinned against hand computations.
///
/// `y` is T x N; `q_w`/`k_w`/`v_w` hold one D x N matrix per head; `w_o` is
/// N x (K D); `mask[j] = false` hides position j from all queries.
pub fn attention_forward(
    y: &DMatrix<f64>,
    q_w: &[DMatrix<f64>],
    k_w: &[DMatrix<f64>],
    v_w: &[DMatrix<f64>],
    w_o: &DMatrix<f64>,
    mask: &[bool],
) -> DMatrix<f64> {
    let t = y.nrows();
    let d = q_w[0].nrows();
    let mut h_cat = DMatrix::zeros(t, q_w.len() * d);
    for (i, ((qw, kw), vw)) in q_w.iter().zip(k_w).zip(v_w).enumerate() {
        let q = y * qw.transpose();
        let k = y * kw.transpose();
        let v = y * vw.transpose();
        let mut scores = &q * k.transpose() / (d as f64).sqrt();
        masked_softmax_rows(&mut scores, mask);
        let h = scores * v;
        h_cat.view_mut((0, i * d), (t, d)).copy_from(&h);
    }
    h_cat * w_o.transpose()
}

impl ToyTransformer {
    fn positional(&self, t: usize) -> DMatrix<f64> {
        let n = self.cfg.embed_dim;
        DMatrix::from_fn(t, n, |pos, j| {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / n as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(Vec<bool>, f64), SurrogateError> {
        if tokens.is_empty() {
            return Err(SurrogateError::Invalid("empty token sequence".to_string()));
        }
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(SurrogateError::Invalid(format!(
                    "token id {t} outside vocabulary of size {}",
                    self.cfg.vocab_size
                )));
            }
        }
        let mask: Vec<bool> = tokens.iter().map(|&t| t != SmilesTokenizer::PAD).collect();
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(SurrogateError::Invalid(
                "token sequence is all padding".to_string(),
            ));
        }
        Ok((mask, count as f64))
    }

    /// Project one head's activations, including any adapters attached to
    /// this (layer, head, proj) site.
    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        base: &DMatrix<f64>,
        y: &DMatrix<f64>,
        layer: usize,
        head: usize,
        proj: Proj,
        adapters: &[LowRankAdapter],
        masks: Option<&[DMatrix<f64>]>,
        caches: &mut [Option<AdapterCache>],
    ) -> DMatrix<f64> {
        let mut out = y * base.transpose();
        for (idx, adapter) in adapters.iter().enumerate() {
            if adapter.layer != layer || adapter.head != head || adapter.proj != proj {
                continue;
            }
            let ym = match masks.and_then(|m| m.get(idx)) {
                Some(m) => m.component_mul(y),
                None => y.clone(),
            };
            let u = &ym * adapter.a.transpose();
            out += &u * &adapter.b * adapter.scale;
            caches[idx] = Some(AdapterCache { ym, u });
        }
        out
    }

    /// Run the encoder over one token sequence. `masks`, when given, must
    /// align with `adapters` and hold one T x N multiplicative input mask
    /// per adapter (identity when absent).
    pub fn encode(
        &self,
        tokens: &[u32],
        adapters: &[LowRankAdapter],
        masks: Option<&[DMatrix<f64>]>,
    ) -> Result<ForwardCache, SurrogateError> {
        let (mask, count) = self.check_tokens(tokens)?;
        if let Some(m) = masks {
            if m.len() != adapters.len() {
                return Err(SurrogateError::Invalid(format!(
                    "{} dropout mask(s) for {} adapter(s)",
                    m.len(),
                    adapters.len()
                )));
            }
        }
        for adapter in adapters {
            if adapter.layer >= self.cfg.layers || adapter.head >= self.cfg.heads {
                return Err(SurrogateError::Invalid(
                    "adapter attached outside the model".to_string(),
                ));
            }
        }
        let t = tokens.len();
        let n = self.cfg.embed_dim;
        let d = self.cfg.head_dim;
        let sqrt_d = (d as f64).sqrt();

        let mut x0 = self.positional(t);
        for (i, &tok) in tokens.iter().enumerate() {
            for j in 0..n {
                x0[(i, j)] += self.embedding[(tok as usize, j)];
            }
        }

        let mut adapter_caches: Vec<Option<AdapterCache>> = (0..adapters.len())
            .map(|_| None)
            .collect();
        let mut xs = vec![x0];
        let mut lns = Vec::with_capacity(self.cfg.layers);
        let mut heads = Vec::with_capacity(self.cfg.layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let x = xs.last().unwrap();
            let ln = ln_forward(x, &block.ln_gain, &block.ln_bias);
            let mut head_caches = Vec::with_capacity(self.cfg.heads);
            let mut h_cat = DMatrix::zeros(t, self.cfg.heads * d);
            for h in 0..self.cfg.heads {
                let q = self.project(
                    &block.q[h], &ln.y, l, h, Proj::Q, adapters, masks, &mut adapter_caches,
                );
                let k = self.project(
                    &block.k[h], &ln.y, l, h, Proj::K, adapters, masks, &mut adapter_caches,
                );
                let v = self.project(
                    &block.v[h], &ln.y, l, h, Proj::V, adapters, masks, &mut adapter_caches,
                );
                let mut scores = &q * k.transpose() / sqrt_d;
                masked_softmax_rows(&mut scores, &mask);
                let attn = &scores * &v;
                h_cat.view_mut((0, h * d), (t, d)).copy_from(&attn);
                head_caches.push(HeadCache {
                    q,
                    k,
                    v,
                    probs: scores,
                });
            }
            let out = &h_cat * block.w_o.transpose();
            let x_next = x + out;
            xs.push(x_next);
            lns.push(ln);
            heads.push(head_caches);
        }

        let final_ln = ln_forward(xs.last().unwrap(), &self.final_gain, &self.final_bias);
        let mut pooled = DVector::zeros(n);
        for i in 0..t {
            if mask[i] {
                for j in 0..n {
                    pooled[j] += final_ln.y[(i, j)];
                }
            }
        }
        pooled /= count;

        let adapters_cache = adapter_caches
            .into_iter()
            .map(|c| {
                c.unwrap_or(AdapterCache {
                    ym: DMatrix::zeros(0, 0),
                    u: DMatrix::zeros(0, 0),
                })
            })
            .collect();
        Ok(ForwardCache {
            mask,
            count,
            ln: lns,
            heads,
            final_ln,
            adapters: adapters_cache,
            pooled,
        })
    }

    /// Pooled features without adapters; convenience for feature caching.
    pub fn pooled_features(&self, tokens: &[u32]) -> Result<DVector<f64>, SurrogateError> {
        Ok(self.encode(tokens, &[], None)?.pooled)
    }

    /// Backpropagate d(scalar)/d(pooled) through the encoder, returning the
    /// adapter gradients (aligned with `adapters`) and, when requested, the
    /// per-position Kronecker sites of each adapter's two parameter
    /// matrices. Padding positions carry no gradient and are skipped.
    ///
    /// `adapters` and `masks` must be the ones the cache was built with.
    pub fn backprop_pooled(
        &self,
        cache: &ForwardCache,
        adapters: &[LowRankAdapter],
        masks: Option<&[DMatrix<f64>]>,
        d_pooled: &DVector<f64>,
        want_sites: bool,
    ) -> Result<EncoderGrads, SurrogateError> {
        if adapters.len() != cache.adapters.len() {
            return Err(SurrogateError::Invalid(format!(
                "{} adapter(s) but cache was built with {}",
                adapters.len(),
                cache.adapters.len()
            )));
        }
        if let Some(m) = masks {
            if m.len() != adapters.len() {
                return Err(SurrogateError::Invalid(format!(
                    "{} dropout mask(s) for {} adapter(s)",
                    m.len(),
                    adapters.len()
                )));
            }
        }
        let t = cache.mask.len();
        let n = self.cfg.embed_dim;
        let d = self.cfg.head_dim;
        let sqrt_d = (d as f64).sqrt();

        let mut grads: Vec<(DMatrix<f64>, DMatrix<f64>)> = adapters
            .iter()
            .map(|a| {
                (
                    DMatrix::zeros(a.a.nrows(), a.a.ncols()),
                    DMatrix::zeros(a.b.nrows(), a.b.ncols()),
                )
            })
            .collect();
        let mut sites: Option<Vec<AdapterSiteSeq>> = want_sites.then(|| {
            adapters
                .iter()
                .map(|_| AdapterSiteSeq {
                    a_sites: Vec::new(),
                    b_sites: Vec::new(),
                })
                .collect()
        });

        // Pooling and final layer norm.
        let mut d_final = DMatrix::zeros(t, n);
        for i in 0..t {
            if cache.mask[i] {
                for j in 0..n {
                    d_final[(i, j)] = d_pooled[j] / cache.count;
                }
            }
        }
        let mut dx = ln_backward(&cache.final_ln, &self.final_gain, &d_final);

        // Blocks in reverse.
        for l in (0..self.cfg.layers).rev() {
            let block = &self.blocks[l];
            let ln = &cache.ln[l];
            // Residual: dx flows to both the skip path and the attention
            // output.
            let d_out = dx.clone();
            let d_hcat = &d_out * &block.w_o;
            let mut dy = DMatrix::zeros(t, n);
            for h in 0..self.cfg.heads {
                let hc = &cache.heads[l][h];
                let d_h = d_hcat.view((0, h * d), (t, d)).into_owned();
                // H = P v.
                let mut d_p = &d_h * hc.v.transpose();
                let dv = hc.probs.transpose() * &d_h;
                // Softmax rows: dS = P . (dP - rowsum(dP . P)).
                for i in 0..t {
                    let dot = d_p.row(i).component_mul(&hc.probs.row(i)).sum();
                    for j in 0..t {
                        d_p[(i, j)] = hc.probs[(i, j)] * (d_p[(i, j)] - dot);
                    }
                }
                let d_scores = d_p / sqrt_d;
                let dq = &d_scores * &hc.k;
                let dk = d_scores.transpose() * &hc.q;

                for (proj, dact) in [(Proj::Q, &dq), (Proj::K, &dk), (Proj::V, &dv)] {
                    let base = match proj {
                        Proj::Q => &block.q[h],
                        Proj::K => &block.k[h],
                        Proj::V => &block.v[h],
                    };
                    dy += dact * base;
                    for (idx, adapter) in adapters.iter().enumerate() {
                        if adapter.layer != l || adapter.head != h || adapter.proj != proj {
                            continue;
                        }
                        let ac = &cache.adapters[idx];
                        // delta = scale * u b with u = ym a^T.
                        let db = ac.u.transpose() * dact * adapter.scale;
                        let du = dact * adapter.b.transpose() * adapter.scale;
                        let da = du.transpose() * &ac.ym;
                        grads[idx].0 += da;
                        grads[idx].1 += db;
                        // ym = mask . y, so the gradient through the adapter
                        // input picks up the same multiplicative mask.
                        let dym = &du * &adapter.a;
                        match masks.and_then(|m| m.get(idx)) {
                            Some(m) => dy += dym.component_mul(m),
                            None => dy += dym,
                        }
                        if let Some(site_seqs) = sites.as_mut() {
                            let z = adapter.a.nrows();
                            for i in 0..t {
                                if !cache.mask[i] {
                                    continue;
                                }
                                site_seqs[idx].a_sites.push(LayerSite {
                                    a: ac.ym.row(i).transpose(),
                                    s: DMatrix::from_fn(1, z, |_, c| du[(i, c)]),
                                });
                                site_seqs[idx].b_sites.push(LayerSite {
                                    a: dact.row(i).transpose() * adapter.scale,
                                    s: DMatrix::from_fn(1, z, |_, c| ac.u[(i, c)]),
                                });
                            }
                        }
                    }
                }
            }
            let d_ln_in = ln_backward(ln, &block.ln_gain, &dy);
            dx = d_out + d_ln_in;
        }
        Ok(EncoderGrads {
            adapters: grads,
            sites,
        })
    }
}

/// Per-adapter gradients and optional per-position Kronecker sites from one
/// backward pass.
pub struct EncoderGrads {
    /// (dA, dB) per adapter, aligned with the adapter list.
    pub adapters: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    pub sites: Option<Vec<AdapterSiteSeq>>,
}

/// Kronecker sites of one adapter, one entry per non-pad position: the A
/// matrix (Z x N) sees input ym_t with sensitivity du_t, and the B matrix
/// (Z x D) sees the roles swapped, with "activation" scale*dact_t and
/// "sensitivity" u_t.
pub struct AdapterSiteSeq {
    pub a_sites: Vec<LayerSite>,
    pub b_sites: Vec<LayerSite>,
}
