//! VQ-Transformer definition and the dense reference forward pass.
//!
//! Each block is pre-layer-norm: `LN → multi-head GELU attention → VQ →
//! output projection → residual → LN → MLP → residual`. Attention weights
//! are `gelu(⟨q, k⟩ / √d_qk)` without row normalization, masked causally.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flops::{cost, Category, FlopCounter};
use crate::nn::{dot, gelu, PerLocationOp};
use crate::scalar::Scalar;

/// Reserved token id for alignment padding. Embeds to the zero vector and is
/// never attended to.
pub const PAD_TOKEN: u32 = u32::MAX;

const INIT_SCALE: f64 = 0.02;
const KMEANS_ITERS: usize = 25;

/// Multi-head vector quantizer. Head `c` quantizes the `c`-th chunk of
/// `d_model / heads` coordinates against its own `entries` code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VqCodebook<T> {
    heads: usize,
    entries: usize,
    chunk: usize,
    codes: Vec<T>,
    biases: Vec<T>,
}

/// Winning code per head and the smallest winner-vs-runner-up score gap.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    pub indices: Vec<u16>,
    pub margin: T,
    /// Largest absolute biased score seen, the scale for relative margins.
    pub scale: T,
}

impl<T: Scalar> VqCodebook<T> {
    pub fn new(heads: usize, entries: usize, chunk: usize, codes: Vec<T>) -> Result<Self> {
        if codes.len() != heads * entries * chunk {
            return Err(Error::ShapeMismatch(format!(
                "codebook of {} values for {heads}x{entries}x{chunk}",
                codes.len()
            )));
        }
        if entries == 0 || entries > usize::from(u16::MAX) {
            return Err(Error::InvalidConfig("codebook entries out of range".into()));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("codebook"));
        }
        let mut cb = VqCodebook { heads, entries, chunk, codes, biases: Vec::new() };
        cb.biases = (0..heads)
            .flat_map(|h| (0..entries).map(move |j| (h, j)))
            .map(|(h, j)| {
                let q = cb.code(h, j);
                -dot(q, q) / T::of(2.0)
            })
            .collect();
        Ok(cb)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    pub fn dim(&self) -> usize {
        self.heads * self.chunk
    }

    pub fn code(&self, head: usize, j: usize) -> &[T] {
        let start = (head * self.entries + j) * self.chunk;
        &self.codes[start..start + self.chunk]
    }

    pub fn bias(&self, head: usize, j: usize) -> T {
        self.biases[head * self.entries + j]
    }

    /// Overwrites one bias term. Only for fault-injection checks.
    pub fn corrupt_bias(&mut self, head: usize, j: usize, value: T) {
        self.biases[head * self.entries + j] = value;
    }

    /// Checks `b_j = -‖q_j‖² / 2` for every code.
    pub fn check_biases(&self) -> Result<()> {
        for h in 0..self.heads {
            for j in 0..self.entries {
                let q = self.code(h, j);
                let want = -dot(q, q) / T::of(2.0);
                let got = self.bias(h, j);
                let tol = T::epsilon() * T::of(8.0) * (T::one() + want.abs());
                if (got - want).abs() > tol {
                    return Err(Error::Invariant {
                        name: "vq-bias",
                        detail: format!("head {h} entry {j}: bias {got} expected {want}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Inner products `x_c · q_j` for every head `c` and code `j`, without
    /// biases, laid out `heads × entries`.
    pub fn inner_products(&self, x: &[T], out: &mut [T]) {
        for h in 0..self.heads {
            let xc = &x[h * self.chunk..(h + 1) * self.chunk];
            for j in 0..self.entries {
                out[h * self.entries + j] = dot(xc, self.code(h, j));
            }
        }
    }

    /// Adds biases and picks the best code per head, lowest index on ties.
    pub fn select(&self, scores: &[T]) -> Selection<T> {
        let mut indices = Vec::with_capacity(self.heads);
        let mut margin = T::infinity();
        let mut scale = T::zero();
        for h in 0..self.heads {
            let mut best = T::neg_infinity();
            let mut second = T::neg_infinity();
            let mut best_j = 0usize;
            for j in 0..self.entries {
                let s = scores[h * self.entries + j] + self.bias(h, j);
                scale = scale.max(s.abs());
                if s > best {
                    second = best;
                    best = s;
                    best_j = j;
                } else if s > second {
                    second = s;
                }
            }
            indices.push(best_j as u16);
            margin = margin.min(best - second);
        }
        Selection { indices, margin, scale }
    }

    /// Concatenation of the selected code vectors.
    pub fn materialize(&self, indices: &[u16]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dim());
        for (h, j) in indices.iter().enumerate() {
            out.extend_from_slice(self.code(h, usize::from(*j)));
        }
        out
    }

    pub fn scores_len(&self) -> usize {
        self.heads * self.entries
    }
}

/// Quantizes `x` chunk by chunk. Each head picks the code maximizing
/// `x_c · q_j + b_j`, which is the Euclidean nearest code.
pub fn vq_quantize<T: Scalar>(x: &[T], cb: &VqCodebook<T>) -> Result<(Vec<u16>, Vec<T>)> {
    if x.len() != cb.dim() {
        return Err(Error::ShapeMismatch(format!("vector of {} for codebook of {}", x.len(), cb.dim())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("vq input"));
    }
    let mut scores = vec![T::zero(); cb.scores_len()];
    cb.inner_products(x, &mut scores);
    let sel = cb.select(&scores);
    let q = cb.materialize(&sel.indices);
    Ok((sel.indices, q))
}

/// One attention output row:
/// `out += Σ_{i ≤ upto, !masked(i)} gelu(⟨query, key(i)⟩·scale) · value(i)`,
/// accumulated in ascending `i`. Returns the number of unmasked entries.
/// When `weights` is given it receives the full row (zeros where masked).
pub fn attention_row<'a, T: Scalar>(
    query: &[T],
    upto: usize,
    key: impl Fn(usize) -> &'a [T],
    value: impl Fn(usize) -> &'a [T],
    masked: impl Fn(usize) -> bool,
    scale: T,
    mut weights: Option<&mut Vec<T>>,
    out: &mut [T],
) -> u64 {
    if let Some(w) = weights.as_deref_mut() {
        w.clear();
        w.resize(upto + 1, T::zero());
    }
    let mut entries = 0;
    for i in 0..=upto {
        if masked(i) {
            continue;
        }
        let a = attention_weight(query, key(i), scale);
        if let Some(w) = weights.as_deref_mut() {
            w[i] = a;
        }
        for (o, v) in out.iter_mut().zip(value(i)) {
            *o += a * *v;
        }
        entries += 1;
    }
    entries
}

#[inline]
pub fn attention_weight<T: Scalar>(query: &[T], key: &[T], scale: T) -> T {
    gelu(dot(query, key) * scale)
}

/// Dense single-head GELU attention on `n × d` matrices.
pub fn gelu_attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d_qk: usize,
    d_v: usize,
    causal: bool,
) -> Result<Vec<T>> {
    if q.len() != n * d_qk || k.len() != n * d_qk || v.len() != n * d_v {
        return Err(Error::ShapeMismatch(format!(
            "attention inputs {}/{}/{} for n={n}, d_qk={d_qk}, d_v={d_v}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    let scale = T::one() / T::of(d_qk as f64).sqrt();
    let mut out = vec![T::zero(); n * d_v];
    for row in 0..n {
        let upto = if causal { row } else { n - 1 };
        attention_row(
            &q[row * d_qk..(row + 1) * d_qk],
            upto,
            |i| &k[i * d_qk..(i + 1) * d_qk],
            |i| &v[i * d_v..(i + 1) * d_v],
            |_| false,
            scale,
            None,
            &mut out[row * d_v..(row + 1) * d_v],
        );
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    pub wk: Vec<T>,
    pub bk: Vec<T>,
    pub wv: Vec<T>,
    pub bv: Vec<T>,
    pub wo: Vec<T>,
    pub bo: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub codebook: VqCodebook<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.ln1_gain.len();
        (d, self.bq.len(), self.b1.len())
    }

    pub fn ln1(&self) -> PerLocationOp<'_, T> {
        PerLocationOp::LayerNorm { gain: &self.ln1_gain, bias: &self.ln1_bias }
    }

    pub fn query(&self) -> PerLocationOp<'_, T> {
        let (d, qk, _) = self.dims();
        PerLocationOp::Affine { weight: &self.wq, bias: Some(&self.bq), input: d, output: qk }
    }

    pub fn key(&self) -> PerLocationOp<'_, T> {
        let (d, qk, _) = self.dims();
        PerLocationOp::Affine { weight: &self.wk, bias: Some(&self.bk), input: d, output: qk }
    }

    pub fn value(&self) -> PerLocationOp<'_, T> {
        let (d, _, _) = self.dims();
        PerLocationOp::Affine { weight: &self.wv, bias: Some(&self.bv), input: d, output: d }
    }

    pub fn output(&self) -> PerLocationOp<'_, T> {
        let (d, _, _) = self.dims();
        PerLocationOp::Affine { weight: &self.wo, bias: Some(&self.bo), input: d, output: d }
    }

    pub fn has_mlp(&self) -> bool {
        !self.b1.is_empty()
    }

    pub fn ln2(&self) -> PerLocationOp<'_, T> {
        PerLocationOp::LayerNorm { gain: &self.ln2_gain, bias: &self.ln2_bias }
    }

    pub fn mlp(&self) -> PerLocationOp<'_, T> {
        let (d, _, m) = self.dims();
        PerLocationOp::Chain(vec![
            PerLocationOp::Affine { weight: &self.w1, bias: Some(&self.b1), input: d, output: m },
            PerLocationOp::Gelu(m),
            PerLocationOp::Affine { weight: &self.w2, bias: Some(&self.b2), input: m, output: d },
        ])
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub token_embedding: Vec<T>,
    pub positional: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn gaussian<T: Scalar>(&mut self, len: usize) -> Vec<T> {
        (0..len).map(|_| T::of(self.normal.sample(&mut self.rng))).collect()
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded Gaussian weights (scale 0.02) with Gaussian codebooks.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_SCALE).expect("valid normal"),
        };
        let d = config.d_model;
        let qk = config.num_attn_heads * config.d_qk;
        let m = config.d_mlp;
        let token_embedding = init.gaussian(config.vocab_size * d);
        let positional = init.gaussian(config.pool_size() * d);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let codes = init.gaussian(config.vq_heads * config.vq_entries_per_head * config.vq_chunk());
            layers.push(LayerParams {
                ln1_gain: vec![T::one(); d],
                ln1_bias: vec![T::zero(); d],
                wq: init.gaussian(d * qk),
                bq: vec![T::zero(); qk],
                wk: init.gaussian(d * qk),
                bk: vec![T::zero(); qk],
                wv: init.gaussian(d * d),
                bv: vec![T::zero(); d],
                wo: init.gaussian(d * d),
                bo: vec![T::zero(); d],
                ln2_gain: vec![T::one(); d],
                ln2_bias: vec![T::zero(); d],
                w1: init.gaussian(d * m),
                b1: vec![T::zero(); m],
                w2: init.gaussian(m * d),
                b2: vec![T::zero(); d],
                codebook: VqCodebook::new(config.vq_heads, config.vq_entries_per_head, config.vq_chunk(), codes)?,
            });
        }
        Ok(ModelParams { config: config.clone(), token_embedding, positional, layers })
    }

    /// Random weights with every VQ codebook fitted by k-means to the
    /// attention outputs of `docs` random calibration documents.
    pub fn calibrated(config: &ModelConfig, seed: u64, docs: usize) -> Result<Self> {
        let mut params = Self::random(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca1b);
        let n = config.max_seq_len;
        let g = config.position_pool_factor;
        let positions: Vec<usize> = (0..n).map(|i| i * g).collect();
        let pads = vec![false; n];
        let mut states: Vec<Vec<T>> = (0..docs.max(1))
            .map(|_| {
                let tokens: Vec<u32> = (0..n)
                    .map(|_| rand::Rng::random_range(&mut rng, 0..config.vocab_size as u32))
                    .collect();
                params.embed(&tokens, &positions, &pads)
            })
            .collect::<Result<_>>()?;
        let scratch = FlopCounter::new();
        for l in 0..config.num_layers {
            let pre: Vec<Vec<T>> = states
                .iter()
                .map(|x| attention_pre_vq(&params.layers[l], config, x, &pads, &scratch))
                .collect();
            let cb = &params.layers[l].codebook;
            let (heads, entries, chunk) = (cb.heads(), cb.entries(), cb.chunk());
            let mut codes = Vec::with_capacity(heads * entries * chunk);
            for h in 0..heads {
                let samples: Vec<&[T]> = pre
                    .iter()
                    .flat_map(|o| (0..n).map(move |p| &o[p * config.d_model + h * chunk..p * config.d_model + (h + 1) * chunk]))
                    .collect();
                codes.extend(kmeans(&samples, entries, &mut rng));
            }
            params.layers[l].codebook = VqCodebook::new(heads, entries, chunk, codes)?;
            for (x, o) in states.iter_mut().zip(&pre) {
                let step = finish_layer(&params.layers[l], config, x, o, &pads, &scratch);
                *x = step.output;
            }
        }
        Ok(params)
    }

    /// Input vectors: token embedding plus positional embedding, zero at pads.
    pub fn embed(&self, tokens: &[u32], positions: &[usize], pads: &[bool]) -> Result<Vec<T>> {
        let d = self.config.d_model;
        let mut x = vec![T::zero(); tokens.len() * d];
        for (i, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            if pads[i] {
                continue;
            }
            x[i * d..(i + 1) * d].copy_from_slice(&self.embed_one(t, p)?);
        }
        Ok(x)
    }

    pub fn embed_one(&self, token: u32, position: usize) -> Result<Vec<T>> {
        let d = self.config.d_model;
        if token as usize >= self.config.vocab_size {
            return Err(Error::TokenOutOfVocabulary { token, vocab: self.config.vocab_size });
        }
        let pool = self.config.pool_size();
        if position >= pool {
            return Err(Error::PositionOutOfRange { position, pool });
        }
        let t = &self.token_embedding[token as usize * d..(token as usize + 1) * d];
        let p = &self.positional[position * d..(position + 1) * d];
        Ok(t.iter().zip(p).map(|(a, b)| *a + *b).collect())
    }

    pub fn attention_scale(&self) -> T {
        T::one() / T::of(self.config.d_qk as f64).sqrt()
    }
}

/// Lloyd iterations from `k` distinct seeded samples; empty clusters keep
/// their previous centroid.
fn kmeans<T: Scalar>(samples: &[&[T]], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let dim = samples[0].len();
    let picks: Vec<usize> = if samples.len() >= k {
        sample(rng, samples.len(), k).into_vec()
    } else {
        (0..k).map(|i| i % samples.len()).collect()
    };
    let mut centroids: Vec<T> = picks.iter().flat_map(|&i| samples[i].iter().copied()).collect();
    let mut assign = vec![0usize; samples.len()];
    for _ in 0..KMEANS_ITERS {
        for (a, s) in assign.iter_mut().zip(samples) {
            let mut best = T::infinity();
            for j in 0..k {
                let c = &centroids[j * dim..(j + 1) * dim];
                let dist: T = s.iter().zip(c).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
                if dist < best {
                    best = dist;
                    *a = j;
                }
            }
        }
        let mut sums = vec![T::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for (a, s) in assign.iter().zip(samples) {
            counts[*a] += 1;
            for (acc, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(s.iter()) {
                *acc += *v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = T::of(counts[j] as f64);
                for t in 0..dim {
                    centroids[j * dim + t] = sums[j * dim + t] / n;
                }
            }
        }
    }
    centroids
}

fn apply_rows<T: Scalar>(op: &PerLocationOp<'_, T>, x: &[T], rows: usize, counter: &FlopCounter) -> Vec<T> {
    let (din, dout) = (op.input_dim(), op.output_dim());
    let mut out = vec![T::zero(); rows * dout];
    for r in 0..rows {
        op.apply(&x[r * din..(r + 1) * din], &mut out[r * dout..(r + 1) * dout]);
    }
    counter.charge(Category::PerLocation, rows as u64 * op.cost());
    out
}

pub fn add_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = *x + *y;
    }
}

/// Concatenated multi-head attention outputs before quantization. Pad
/// queries are left at zero.
pub(crate) fn attention_pre_vq<T: Scalar>(
    layer: &LayerParams<T>,
    cfg: &ModelConfig,
    x: &[T],
    pads: &[bool],
    counter: &FlopCounter,
) -> Vec<T> {
    let n = pads.len();
    let d = cfg.d_model;
    let h = apply_rows(&layer.ln1(), x, n, counter);
    let q = apply_rows(&layer.query(), &h, n, counter);
    let k = apply_rows(&layer.key(), &h, n, counter);
    let v = apply_rows(&layer.value(), &h, n, counter);
    let (dqk, dv, heads) = (cfg.d_qk, cfg.d_v, cfg.num_attn_heads);
    let qw = heads * dqk;
    let scale = T::one() / T::of(dqk as f64).sqrt();
    let mut out = vec![T::zero(); n * d];
    let mut entries = 0u64;
    for a in 0..heads {
        for row in 0..n {
            if pads[row] {
                continue;
            }
            let query = &q[row * qw + a * dqk..row * qw + (a + 1) * dqk];
            entries += attention_row(
                query,
                row,
                |i| &k[i * qw + a * dqk..i * qw + (a + 1) * dqk],
                |i| &v[i * d + a * dv..i * d + (a + 1) * dv],
                |i| pads[i],
                scale,
                None,
                &mut out[row * d + a * dv..row * d + (a + 1) * dv],
            );
        }
    }
    counter.charge(
        Category::AttentionBase,
        entries * (cost::attention_entry(dqk) + cost::value_accumulate(dv)),
    );
    out
}

pub(crate) struct LayerStep<T> {
    pub codes: Vec<Vec<u16>>,
    pub margins: Vec<T>,
    pub output: Vec<T>,
}

/// Quantization, output projection, residual and MLP. Pad positions take
/// the all-zero code tuple.
pub(crate) fn finish_layer<T: Scalar>(
    layer: &LayerParams<T>,
    cfg: &ModelConfig,
    x: &[T],
    pre: &[T],
    pads: &[bool],
    counter: &FlopCounter,
) -> LayerStep<T> {
    let n = pads.len();
    let d = cfg.d_model;
    let cb = &layer.codebook;
    let mut quantized = vec![T::zero(); n * d];
    let mut codes = Vec::with_capacity(n);
    let mut margins = Vec::with_capacity(n);
    let mut scores = vec![T::zero(); cb.scores_len()];
    for p in 0..n {
        let tuple = if pads[p] {
            margins.push(T::infinity());
            vec![0u16; cb.heads()]
        } else {
            cb.inner_products(&pre[p * d..(p + 1) * d], &mut scores);
            counter.charge(Category::VqScores, cost::vq_scores(d, cb.heads(), cb.entries()));
            let sel = cb.select(&scores);
            margins.push(sel.margin);
            sel.indices
        };
        quantized[p * d..(p + 1) * d].copy_from_slice(&cb.materialize(&tuple));
        codes.push(tuple);
    }
    let out = apply_rows(&layer.output(), &quantized, n, counter);
    let mut x2 = vec![T::zero(); n * d];
    add_into(x, &out, &mut x2);
    counter.charge(Category::BinaryElementwise, (n * d) as u64);
    let output = if layer.has_mlp() {
        let h2 = apply_rows(&layer.ln2(), &x2, n, counter);
        let m = apply_rows(&layer.mlp(), &h2, n, counter);
        let mut x3 = vec![T::zero(); n * d];
        add_into(&x2, &m, &mut x3);
        counter.charge(Category::BinaryElementwise, (n * d) as u64);
        x3
    } else {
        x2
    };
    LayerStep { codes, margins, output }
}

/// Everything the dense pass produced, per layer.
#[derive(Debug, Clone)]
pub struct DenseTrace<T> {
    /// Residual-stream input of each layer, `n × d_model`.
    pub layer_inputs: Vec<Vec<T>>,
    /// Attention outputs before quantization.
    pub attention: Vec<Vec<T>>,
    /// Quantization code tuple per position.
    pub codes: Vec<Vec<Vec<u16>>>,
    /// Winning score margin per position.
    pub margins: Vec<Vec<T>>,
    pub output: Vec<T>,
    pub pads: Vec<bool>,
}

impl<T: Scalar> DenseTrace<T> {
    /// Final states with pad positions removed.
    pub fn unpadded_output(&self, d: usize) -> Vec<T> {
        strip_pads(&self.output, &self.pads, d)
    }
}

pub fn strip_pads<T: Scalar>(x: &[T], pads: &[bool], d: usize) -> Vec<T> {
    pads.iter()
        .enumerate()
        .filter(|(_, p)| !**p)
        .flat_map(|(i, _)| x[i * d..(i + 1) * d].iter().copied())
        .collect()
}

/// Dense forward pass of the VQ-Transformer from scratch. Token id
/// [`PAD_TOKEN`] and `pad_mask` both mark pad cells.
pub fn dense_forward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    positions: &[usize],
    pad_mask: Option<&[bool]>,
    counter: &FlopCounter,
) -> Result<DenseTrace<T>> {
    let cfg = &params.config;
    if tokens.len() != positions.len() || pad_mask.is_some_and(|m| m.len() != tokens.len()) {
        return Err(Error::ShapeMismatch("tokens, positions and pad mask differ in length".into()));
    }
    let pads: Vec<bool> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| t == PAD_TOKEN || pad_mask.is_some_and(|m| m[i]))
        .collect();
    check_positions(positions, &pads, cfg.pool_size())?;
    let mut x = params.embed(tokens, positions, &pads)?;
    let mut trace = DenseTrace {
        layer_inputs: Vec::new(),
        attention: Vec::new(),
        codes: Vec::new(),
        margins: Vec::new(),
        output: Vec::new(),
        pads: pads.clone(),
    };
    for layer in &params.layers {
        let pre = attention_pre_vq(layer, cfg, &x, &pads, counter);
        let step = finish_layer(layer, cfg, &x, &pre, &pads, counter);
        trace.layer_inputs.push(std::mem::replace(&mut x, step.output));
        trace.attention.push(pre);
        trace.codes.push(step.codes);
        trace.margins.push(step.margins);
    }
    trace.output = x;
    Ok(trace)
}

pub(crate) fn check_positions(positions: &[usize], pads: &[bool], pool: usize) -> Result<()> {
    let mut last: Option<usize> = None;
    for (slot, (&p, &pad)) in positions.iter().zip(pads).enumerate() {
        if pad {
            continue;
        }
        if p >= pool {
            return Err(Error::PositionOutOfRange { position: p, pool });
        }
        if last.is_some_and(|l| p <= l) {
            return Err(Error::PositionsNotIncreasing { slot });
        }
        last = Some(p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use sha2::{Digest, Sha256};

    fn tiny(layers: usize, d: usize, h: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            d_model: d,
            d_qk: 4,
            d_v: d / 2,
            num_attn_heads: 2,
            vq_heads: h,
            vq_entries_per_head: 8,
            d_mlp: 2 * d,
            vocab_size: 20,
            max_seq_len: 16,
            position_pool_factor: 10,
            precision: Default::default(),
        }
    }

    fn grid_codebook(heads: usize, entries: usize, chunk: usize) -> VqCodebook<f64> {
        let codes = (0..heads * entries * chunk).map(|i| ((i * 7919) % 23) as f64 / 7.0 - 1.5).collect();
        VqCodebook::new(heads, entries, chunk, codes).unwrap()
    }

    #[test]
    fn exact_member_quantizes_to_itself() {
        let cb = grid_codebook(2, 8, 3);
        let x: Vec<f64> = cb.code(0, 3).iter().chain(cb.code(1, 7)).copied().collect();
        let (idx, q) = vq_quantize(&x, &cb).unwrap();
        assert_eq!(idx, vec![3, 7]);
        assert_eq!(q, x);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let cb = VqCodebook::new(1, 3, 2, vec![5.0, 5.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let (idx, _) = vq_quantize(&[0.0, 0.0], &cb).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn nearest_code_by_distance_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let codes: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cb = VqCodebook::new(1, 8, 4, codes.clone()).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dist = |j: usize| -> f64 { (0..4).map(|t| (x[t] - codes[j * 4 + t]).powi(2)).sum() };
            let best = (0..8).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            assert_eq!(vq_quantize(&x, &cb).unwrap().0, vec![best as u16]);
        }
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let cb = grid_codebook(1, 4, 2);
        assert!(matches!(vq_quantize(&[f64::NAN, 0.0], &cb), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn bias_check_catches_corruption() {
        let mut cb = grid_codebook(2, 4, 3);
        cb.check_biases().unwrap();
        let norm: f64 = cb.code(1, 2).iter().map(|v| v * v).sum();
        assert_eq!(cb.bias(1, 2), -norm / 2.0);
        cb.corrupt_bias(1, 2, 3.0);
        assert!(matches!(cb.check_biases(), Err(Error::Invariant { name: "vq-bias", .. })));
    }

    /// Straightforward loops with the tanh GELU written out.
    fn naive_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, dk: usize, dv: usize) -> Vec<f64> {
        let g = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        let mut out = vec![0.0; n * dv];
        for r in 0..n {
            for i in 0..=r {
                let mut s = 0.0;
                for t in 0..dk {
                    s += q[r * dk + t] * k[i * dk + t];
                }
                let a = g(s / (dk as f64).sqrt());
                for t in 0..dv {
                    out[r * dv + t] += a * v[i * dv + t];
                }
            }
        }
        out
    }

    #[test]
    fn gelu_attention_matches_naive_loops() {
        let q = [0.3, -0.2, 0.5, 0.1, -0.4, 0.9, 0.05, 0.7];
        let k = [0.6, 0.4, -0.3, 0.2, 0.8, -0.5, 0.1, 0.1];
        let v = [1.0, -1.0, 0.5, 0.25, -0.75, 2.0, 0.3, 0.6];
        let ours = gelu_attention(&q, &k, &v, 4, 2, 2, true).unwrap();
        let want = naive_attention(&q, &k, &v, 4, 2, 2);
        for (a, b) in ours.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn gelu_attention_edge_cases() {
        let q = [0.5, 0.5];
        let v = [3.0, -2.0];
        let out = gelu_attention(&q, &q, &v, 1, 2, 2, true).unwrap();
        let a = gelu(0.5 / 2f64.sqrt());
        assert_eq!(out, vec![a * 3.0, a * -2.0]);
        assert_eq!(gelu_attention(&[1.0; 6], &[1.0; 6], &[0.0; 6], 3, 2, 2, true).unwrap(), vec![0.0; 6]);
        assert!(gelu_attention(&[1.0; 5], &[1.0; 6], &[0.0; 6], 3, 2, 2, true).is_err());
    }

    #[test]
    fn future_keys_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (q, mut k, mut v) = (r(18), r(18), r(18));
        let before = gelu_attention(&q, &k, &v, 6, 3, 3, true).unwrap();
        for x in &mut k[12..] {
            *x = 9.0;
        }
        for x in &mut v[12..] {
            *x = -9.0;
        }
        let after = gelu_attention(&q, &k, &v, 6, 3, 3, true).unwrap();
        assert_eq!(before[..12], after[..12]);
    }

    fn positions(n: usize, g: usize) -> Vec<usize> {
        (0..n).map(|i| i * g).collect()
    }

    #[test]
    fn dense_forward_is_deterministic() {
        let cfg = tiny(2, 8, 2);
        let params = ModelParams::<f32>::calibrated(&cfg, 4, 1).unwrap();
        let tokens = [1, 5, 9, 2, 2, 7];
        let c = FlopCounter::new();
        let a = dense_forward(&params, &tokens, &positions(6, 10), None, &c).unwrap();
        let b = dense_forward(&params, &tokens, &positions(6, 10), None, &c).unwrap();
        assert!(crate::scalar::bitwise_eq(&a.output, &b.output));
        assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn zero_projections_quantize_the_zero_vector() {
        let cfg = tiny(1, 8, 2);
        let mut params = ModelParams::<f64>::random(&cfg, 1).unwrap();
        let layer = &mut params.layers[0];
        for w in [&mut layer.wq, &mut layer.wk, &mut layer.wv] {
            w.iter_mut().for_each(|x| *x = 0.0);
        }
        let trace = dense_forward(&params, &[3, 4, 5], &positions(3, 10), None, &FlopCounter::new()).unwrap();
        let (zero_idx, _) = vq_quantize(&[0.0; 8], &params.layers[0].codebook).unwrap();
        assert!(trace.attention[0].iter().all(|x| *x == 0.0));
        assert!(trace.codes[0].iter().all(|t| *t == zero_idx));
    }

    #[test]
    fn pad_content_is_invisible() {
        let cfg = tiny(2, 8, 1);
        let params = ModelParams::<f64>::random(&cfg, 8).unwrap();
        let mask = [false, true, false, true, false];
        let c = FlopCounter::new();
        let a = dense_forward(&params, &[1, 2, 3, 4, 5], &positions(5, 10), Some(&mask), &c).unwrap();
        let b = dense_forward(&params, &[1, 19, 3, 0, 5], &positions(5, 10), Some(&mask), &c).unwrap();
        assert!(crate::scalar::bitwise_eq(&a.unpadded_output(8), &b.unpadded_output(8)));
        assert_eq!(a.unpadded_output(8).len(), 24);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = tiny(1, 8, 1);
        let params = ModelParams::<f64>::random(&cfg, 8).unwrap();
        let c = FlopCounter::new();
        assert!(matches!(dense_forward(&params, &[1, 2], &[10, 10], None, &c), Err(Error::PositionsNotIncreasing { .. })));
        assert!(matches!(dense_forward(&params, &[1], &[160], None, &c), Err(Error::PositionOutOfRange { .. })));
        assert!(matches!(dense_forward(&params, &[20], &[0], None, &c), Err(Error::TokenOutOfVocabulary { .. })));
    }

    #[test]
    fn golden_checksum() {
        let cfg = ModelConfig { precision: crate::scalar::Precision::Double, ..tiny(2, 16, 2) };
        let params = ModelParams::<f64>::random(&cfg, 2024).unwrap();
        let trace = dense_forward(&params, &[3, 1, 4, 1, 5, 9, 2, 6], &positions(8, 10), None, &FlopCounter::new()).unwrap();
        let mut h = Sha256::new();
        for x in &trace.output {
            h.update(x.to_le_bytes());
        }
        let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(digest, "cfc40182a601e058722c2d0cf4d5aa3ba865627f37c3869e5f80cc02195ef7a2");
    }
}
