//! Transformer building blocks on candle tensors.
//!
//! Layers use pre-norm residual blocks. Parameters live in a [`ParamStore`]
//! that initializes from its own seeded generator, so a model is a pure
//! function of its seed.

use std::io::Read;
use std::path::Path;

use candle_core::{CpuStorage, DType, Device, Layout, Shape, Tensor, Var, WithDType, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive score for masked attention entries.
pub const MASKED: f64 = -1e9;

/// Named trainable parameters with deterministic initialization.
#[derive(Debug)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            entries: Vec::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.entries.push((name.to_string(), var));
        Ok(tensor)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Flattened parameter values in registration order.
    pub fn snapshot(&self) -> Result<Vec<Vec<f32>>> {
        self.entries
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?))
            .collect()
    }

    /// Deep copies of every parameter, at full precision.
    pub fn copies(&self) -> Result<Vec<Tensor>> {
        self.entries.iter().map(|(_, v)| Ok(v.as_tensor().copy()?)).collect()
    }

    /// Restores values taken with [`ParamStore::copies`].
    pub fn set_all(&self, values: &[Tensor]) -> Result<()> {
        for ((_, var), t) in self.entries.iter().zip(values) {
            var.set(t)?;
        }
        Ok(())
    }

    pub fn restore(&self, values: &[Vec<f32>]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                values.len()
            )));
        }
        for ((name, var), vals) in self.entries.iter().zip(values) {
            if vals.len() != var.elem_count() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected {} values, found {}",
                    var.elem_count(),
                    vals.len()
                )));
            }
            let t = Tensor::from_slice(vals, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Writes a single-file checkpoint: one JSON header line, then raw
    /// little-endian f32 values for each tensor in header order.
    pub fn save(&self, path: &Path, config: serde_json::Value) -> Result<()> {
        let values = self.snapshot()?;
        let header = CheckpointHeader {
            config,
            tensors: self
                .entries
                .iter()
                .map(|(n, v)| TensorEntry {
                    name: n.clone(),
                    shape: v.dims().to_vec(),
                })
                .collect(),
        };
        let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        bytes.push(b'\n');
        for vals in &values {
            for v in vals {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::config::write_atomic(path, &bytes)
    }

    /// Loads values saved by [`ParamStore::save`] into an identically built store.
    pub fn load_values(&self, path: &Path) -> Result<serde_json::Value> {
        let (header, values) = read_checkpoint(path)?;
        for ((name, var), entry) in self.entries.iter().zip(&header.tensors) {
            if *name != entry.name || var.dims() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: model has {name} {:?}, file has {} {:?}",
                    var.dims(),
                    entry.name,
                    entry.shape
                )));
            }
        }
        self.restore(&values)?;
        Ok(header.config)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f32>>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut body = &bytes[split + 1..];
    let mut values = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if body.len() < 4 * n {
            return Err(Error::Checkpoint(format!("truncated data for {}", entry.name)));
        }
        let (head, rest) = body.split_at(4 * n);
        values.push(
            head.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
        body = rest;
    }
    if !body.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((header, values))
}

/// Reads only the config header of a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<serde_json::Value> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match file.read(&mut byte) {
            Ok(0) => break,
            Ok(_) if byte[0] == b'\n' => break,
            Ok(_) => line.push(byte[0]),
            Err(e) => return Err(Error::io("reading checkpoint header", e)),
        }
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(header.config)
}

struct SoftmaxLastDim;

impl candle_core::CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax-last-dim-bwd"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (o1, o2) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax input must be contiguous".into()))?;
        let dim = layout.dims()[layout.dims().len() - 1];
        macro_rules! rows {
            ($src:expr, $t:ty) => {{
                let src = &$src[o1..o2];
                let mut dst: Vec<$t> = vec![0.0; src.len()];
                for (s, d) in src.chunks_exact(dim).zip(dst.chunks_exact_mut(dim)) {
                    let max = s.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
                    let mut sum = 0.0;
                    for (o, &i) in d.iter_mut().zip(s) {
                        *o = (i - max).exp();
                        sum += *o;
                    }
                    for o in d.iter_mut() {
                        *o /= sum;
                    }
                }
                dst
            }};
        }
        let out = match storage {
            CpuStorage::F32(s) => CpuStorage::F32(rows!(s, f32)),
            CpuStorage::F64(s) => CpuStorage::F64(rows!(s, f64)),
            _ => return Err(candle_core::Error::Msg("softmax supports f32 and f64 only".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad_res.broadcast_sub(&dot)?)?))
    }
}

/// Row softmax over the last dimension, with a backward pass.
pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    Ok(xs.contiguous()?.apply_op1(SoftmaxLastDim)?)
}

/// `log_softmax` over the last dimension.
pub fn log_softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let shifted = xs.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(xs: &Tensor) -> Result<Tensor> {
    let pos = xs.relu()?;
    let tail = (xs.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let std = (1.0 / input as f64).sqrt();
        let weight = ps.normal(&format!("{name}.weight"), &[input, output], std)?;
        let bias = if bias {
            Some(ps.constant(&format!("{name}.bias"), &[output], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn zeroed(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = ps.constant(&format!("{name}.weight"), &[input, output], 0.0)?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies the map to the last dimension of `xs`.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let dims = xs.dims().to_vec();
        let input = dims[dims.len() - 1];
        let rows = xs.elem_count() / input;
        let out = xs.reshape((rows, input))?.matmul(&self.weight)?;
        let out = match &self.bias {
            Some(b) => out.broadcast_add(b)?,
            None => out,
        };
        let mut shape = dims;
        let last = shape.len() - 1;
        shape[last] = self.weight.dim(1)?;
        Ok(out.reshape(shape)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: ps.normal(&format!("{name}.table"), &[rows, dim], 0.02_f64.max(1.0 / (dim as f64).sqrt() * 0.5))?,
        })
    }

    /// Looks up `ids` of any shape, appending the embedding dimension.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut shape = ids.dims().to_vec();
        let flat = self.table.index_select(&ids.flatten_all()?, 0)?;
        shape.push(self.table.dim(1)?);
        Ok(flat.reshape(shape)?)
    }

    /// Dot products of `xs (.., dim)` with every row.
    pub fn transposed(&self, xs: &Tensor) -> Result<Tensor> {
        let dim = self.table.dim(1)?;
        let mut shape = xs.dims().to_vec();
        let flat = xs.reshape(((), dim))?.matmul(&self.table.t()?)?;
        *shape.last_mut().expect("nonempty shape") = self.table.dim(0)?;
        Ok(flat.reshape(shape)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(xs.contiguous()?.apply_op3(&self.gamma, &self.beta, LayerNormOp { eps: 1e-5 })?)
    }
}

/// Fused layer normalization over the last dimension with affine `gamma`, `beta`.
struct LayerNormOp {
    eps: f64,
}

fn layer_norm_rows<T: WithDType>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Vec<T> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter().zip(gamma).zip(beta) {
            out.push(T::from_f64((v.to_f64() - mean) * rstd * g.to_f64() + b.to_f64()));
        }
    }
    out
}

fn layer_norm_grads<T: WithDType>(x: &[T], gamma: &[T], grad: &[T], eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    let mut xhat = vec![0.0f64; d];
    let mut gh = vec![0.0f64; d];
    for (row, g) in x.chunks_exact(d).zip(grad.chunks_exact(d)) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let (mut mean_gh, mut mean_ghx) = (0.0, 0.0);
        for k in 0..d {
            xhat[k] = (row[k].to_f64() - mean) * rstd;
            let gk = g[k].to_f64();
            gh[k] = gk * gamma[k].to_f64();
            dgamma[k] += gk * xhat[k];
            dbeta[k] += gk;
            mean_gh += gh[k];
            mean_ghx += gh[k] * xhat[k];
        }
        mean_gh /= d as f64;
        mean_ghx /= d as f64;
        dx.extend((0..d).map(|k| T::from_f64(rstd * (gh[k] - mean_gh - xhat[k] * mean_ghx))));
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (dx, cast(dgamma), cast(dbeta))
}

fn contiguous_slice<'a, T: WithDType>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [T]> {
    let (o1, o2) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("layer norm inputs must be contiguous".into()))?;
    Ok(&T::cpu_storage_as_slice(storage)?[o1..o2])
}

impl candle_core::CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer-norm-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = l1.dims()[l1.dims().len() - 1];
        if l2.shape().elem_count() != d || l3.shape().elem_count() != d {
            return Err(candle_core::Error::Msg("layer norm affine size mismatch".into()));
        }
        macro_rules! run {
            ($t:ty, $wrap:path) => {{
                let out = layer_norm_rows::<$t>(
                    contiguous_slice(s1, l1)?,
                    contiguous_slice(s2, l2)?,
                    contiguous_slice(s3, l3)?,
                    self.eps,
                );
                Ok(($wrap(out), l1.shape().clone()))
            }};
        }
        match s1 {
            CpuStorage::F32(_) => run!(f32, CpuStorage::F32),
            CpuStorage::F64(_) => run!(f64, CpuStorage::F64),
            _ => Err(candle_core::Error::Msg("layer norm supports f32 and f64 only".into())),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        macro_rules! run {
            ($t:ty) => {{
                let (dx, dg, db) = layer_norm_grads::<$t>(
                    &x.flatten_all()?.to_vec1::<$t>()?,
                    &gamma.to_vec1::<$t>()?,
                    &grad_res.contiguous()?.flatten_all()?.to_vec1::<$t>()?,
                    self.eps,
                );
                (dx, dg, db)
            }};
        }
        let dev = x.device();
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => {
                let (a, b, c) = run!(f32);
                (Tensor::from_vec(a, x.shape(), dev)?, Tensor::from_vec(b, gamma.shape(), dev)?, Tensor::from_vec(c, gamma.shape(), dev)?)
            }
            DType::F64 => {
                let (a, b, c) = run!(f64);
                (Tensor::from_vec(a, x.shape(), dev)?, Tensor::from_vec(b, gamma.shape(), dev)?, Tensor::from_vec(c, gamma.shape(), dev)?)
            }
            other => return Err(candle_core::Error::Msg(format!("layer norm does not support {other:?}"))),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Scaled dot-product attention with an additive score bias.
///
/// `q` is `(B, H, Tq, dh)`, `k` and `v` are `(B, H, Tk, dh)`; `bias` must
/// broadcast to `(B, H, Tq, Tk)`. Rows of the attention matrix sum to one.
pub fn biased_attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (_, _, _, dh) = q.dims4()?;
    let (_, _, tk, dk) = k.dims4()?;
    let (_, _, tv, _) = v.dims4()?;
    if dh != dk || tk != tv {
        return Err(Error::Contract(format!(
            "attention shape mismatch: q head dim {dh}, k head dim {dk}, {tk} keys vs {tv} values"
        )));
    }
    let weights = attention_weights(q, k, bias)?;
    Ok(weights.matmul(&v.contiguous()?)?)
}

/// The softmax-normalized score matrix `(B, H, Tq, Tk)`.
pub fn attention_weights(q: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
    let scores = match bias {
        Some(b) => scores.broadcast_add(b)?,
        None => scores,
    };
    softmax_last(&scores)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), width, width, true)?,
            k: Linear::new(ps, &format!("{name}.k"), width, width, true)?,
            v: Linear::new(ps, &format!("{name}.v"), width, width, true)?,
            o: Linear::new(ps, &format!("{name}.o"), width, width, true)?,
            heads,
        })
    }

    fn split(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, t, d) = xs.dims3()?;
        Ok(xs.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?)
    }

    /// `query` is `(B, Tq, d)`, `context` `(B, Tk, d)`; `bias` is additive on scores.
    pub fn forward(&self, query: &Tensor, context: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(context)?)?;
        let v = self.split(&self.v.forward(context)?)?;
        let out = biased_attention(&q, &k, &v, bias)?;
        let out = out.transpose(1, 2)?.reshape((b, tq, d))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(ps, &format!("{name}.up"), width, hidden, true)?,
            down: Linear::new(ps, &format!("{name}.down"), hidden, width, true)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(xs)?.relu()?)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), width)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), width, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), width)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), width, 4 * width)?,
        })
    }

    /// `bias` carries both the padding mask and any learned score bias.
    pub fn forward(&self, xs: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm1.forward(xs)?;
        let xs = (xs + self.attn.forward(&h, &h, bias)?)?;
        let h = self.norm2.forward(&xs)?;
        Ok((&xs + self.ffn.forward(&h)?)?)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), width)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), width, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), width)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), width, heads)?,
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), width)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), width, 4 * width)?,
        })
    }

    pub fn forward(
        &self,
        xs: &Tensor,
        memory: &Tensor,
        self_mask: &Tensor,
        memory_mask: &Tensor,
    ) -> Result<Tensor> {
        let h = self.norm1.forward(xs)?;
        let xs = (xs + self.self_attn.forward(&h, &h, Some(self_mask))?)?;
        let h = self.norm2.forward(&xs)?;
        let xs = (&xs + self.cross_attn.forward(&h, memory, Some(memory_mask))?)?;
        let h = self.norm3.forward(&xs)?;
        Ok((&xs + self.ffn.forward(&h)?)?)
    }
}

/// Encoder layers followed by a final norm.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl EncoderStack {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, heads: usize, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(ps, &format!("{name}.layer{i}"), width, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), width)?,
        })
    }

    /// `bias` is added to every layer's attention scores.
    pub fn forward(&self, xs: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut xs = xs.clone();
        for layer in &self.layers {
            xs = layer.forward(&xs, bias)?;
        }
        self.norm.forward(&xs)
    }
}

/// Autoregressive character decoder over encoder memory.
///
/// Input and output share the caller's token embedding.
#[derive(Debug, Clone)]
pub struct TextDecoder {
    token: Embedding,
    position: Embedding,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    head_bias: Tensor,
    word_char: Vec<bool>,
    max_steps: usize,
}

impl TextDecoder {
    /// `max_steps` counts the end token.
    ///
    /// `token` is the encoder's token table, used for both input and output.
    /// `offset` is the encoder's within-word offset table (row 0 for
    /// separators, row i for the i-th character of a word). Each step is
    /// positioned by the offset of the character it predicts, with words
    /// delimited by ids where `word_char` is false.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        token: Embedding,
        offset: Embedding,
        word_char: Vec<bool>,
        width: usize,
        heads: usize,
        depth: usize,
        max_steps: usize,
    ) -> Result<Self> {
        let vocab_size = token.table.dim(0)?;
        let position = offset;
        let layers = (0..depth)
            .map(|i| DecoderLayer::new(ps, &format!("{name}.layer{i}"), width, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            token,
            position,
            layers,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), width)?,
            head_bias: ps.constant(&format!("{name}.head.bias"), &[vocab_size], 0.0)?,
            word_char,
            max_steps,
        })
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn step_offsets(&self, prefix: &Tensor) -> Result<Vec<u32>> {
        let last = self.position.table.dim(0)? as u32 - 1;
        let mut out = Vec::with_capacity(prefix.elem_count());
        for row in prefix.to_vec2::<u32>()? {
            // the start token begins a word
            let mut run = 0u32;
            for (i, id) in row.into_iter().enumerate() {
                let in_word = i > 0 && self.word_char.get(id as usize).copied().unwrap_or(false);
                run = if in_word { run + 1 } else { 0 };
                out.push((run + 1).min(last));
            }
        }
        Ok(out)
    }

    /// Logits `(B, N, V)` for prefix ids `(B, N)`.
    pub fn forward(&self, prefix: &Tensor, memory: &Tensor, memory_mask: &Tensor) -> Result<Tensor> {
        let (_, n) = prefix.dims2()?;
        if n > self.max_steps {
            return Err(Error::Contract(format!("decoder prefix of {n} exceeds {} steps", self.max_steps)));
        }
        let positions = Tensor::from_vec(self.step_offsets(prefix)?, prefix.shape(), prefix.device())?;
        let mut xs = self.token.forward(prefix)?.add(&self.position.forward(&positions)?)?;
        let causal = causal_mask(n, memory.dtype(), memory.device())?;
        for layer in &self.layers {
            xs = layer.forward(&xs, memory, &causal, memory_mask)?;
        }
        let logits = self.token.transposed(&self.norm.forward(&xs)?)?;
        Ok(logits.broadcast_add(&self.head_bias)?)
    }

    /// Greedy decoding of every row, stopping at `end` or after `max_steps`.
    ///
    /// Tokens with `allowed[id] == false` are never emitted. The returned
    /// sequences exclude the start and end tokens.
    pub fn greedy(&self, memory: &Tensor, memory_mask: &Tensor, start: u32, end: u32, allowed: &[bool]) -> Result<Vec<Vec<u32>>> {
        let b = memory.dim(0)?;
        let mut prefix: Vec<Vec<u32>> = vec![vec![start]; b];
        let mut done = vec![false; b];
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); b];
        for _ in 0..self.max_steps {
            let n = prefix[0].len();
            let flat: Vec<u32> = prefix.iter().flatten().copied().collect();
            let ids = Tensor::from_vec(flat, (b, n), memory.device())?;
            let logits = self.forward(&ids, memory, memory_mask)?;
            let last: Vec<Vec<f32>> = logits.narrow(1, n - 1, 1)?.squeeze(1)?.to_dtype(DType::F32)?.to_vec2()?;
            for (row, scores) in last.iter().enumerate() {
                let next = scores
                    .iter()
                    .enumerate()
                    .filter(|(id, _)| allowed.get(*id).copied().unwrap_or(false))
                    .fold((end, f32::NEG_INFINITY), |best, (id, &s)| if s > best.1 { (id as u32, s) } else { best })
                    .0;
                if !done[row] {
                    if next == end {
                        done[row] = true;
                    } else {
                        out[row].push(next);
                    }
                }
                prefix[row].push(next);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

/// Additive key-padding mask `(B, 1, 1, T)` from per-row valid lengths.
pub fn padding_mask(lengths: &[usize], max_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(lengths.len() * max_len);
    for &len in lengths {
        data.extend((0..max_len).map(|t| if t < len { 0.0 } else { MASKED }));
    }
    Ok(Tensor::from_vec(data, (lengths.len(), 1, 1, max_len), device)?.to_dtype(dtype)?)
}

/// Additive causal mask `(1, 1, T, T)`.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { MASKED }))
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, len, len), device)?.to_dtype(dtype)?)
}

/// Converts a `(rows, cols)` f64 matrix into a tensor of the given dtype.
pub fn matrix(data: Vec<f64>, rows: usize, cols: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), device)?.to_dtype(dtype)?)
}

/// Dense `(B, N, V)` weight tensor with `w` at each listed `(row, step, token)`.
fn scatter_weights(
    shape: (usize, usize, usize),
    entries: impl Iterator<Item = (usize, usize, u32, f64)>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (b, n, v) = shape;
    let mut data = vec![0.0; b * n * v];
    for (row, step, token, w) in entries {
        if token as usize >= v || step >= n {
            return Err(Error::Contract(format!(
                "target token {token} at step {step} outside logits of shape ({b}, {n}, {v})"
            )));
        }
        data[(row * n + step) * v + token as usize] += w;
    }
    Ok(Tensor::from_vec(data, (b, n, v), device)?.to_dtype(dtype)?)
}

/// Cross-entropy averaged over each row's steps, then over rows.
///
/// `logits` is `(B, N, V)`; row `b` is scored on its first `targets[b].len()` steps.
pub fn sequence_cross_entropy(logits: &Tensor, targets: &[Vec<u32>]) -> Result<Tensor> {
    let (b, n, v) = logits.dims3()?;
    let rows = targets.len() as f64;
    let weights = scatter_weights(
        (b, n, v),
        targets.iter().enumerate().flat_map(|(row, t)| {
            let w = 1.0 / (t.len().max(1) as f64 * rows);
            t.iter().enumerate().map(move |(step, &tok)| (row, step, tok, w))
        }),
        logits.dtype(),
        logits.device(),
    )?;
    Ok((log_softmax_last(logits)? * weights)?.sum_all()?.neg()?)
}

/// Binary cross-entropy summed over the vocabulary with multi-hot targets,
/// averaged over each row's steps, then over rows.
pub fn sequence_multi_label(logits: &Tensor, targets: &[Vec<Vec<u32>>]) -> Result<Tensor> {
    let (b, n, v) = logits.dims3()?;
    let rows = targets.len() as f64;
    let mut step_weight = vec![0.0; b * n];
    for (row, steps) in targets.iter().enumerate() {
        for step in 0..steps.len().min(n) {
            step_weight[row * n + step] = 1.0 / (steps.len() as f64 * rows);
        }
    }
    let step_weight = Tensor::from_vec(step_weight, (b, n, 1), logits.device())?.to_dtype(logits.dtype())?;
    let positives = scatter_weights(
        (b, n, v),
        targets.iter().enumerate().flat_map(|(row, steps)| {
            let w = 1.0 / (steps.len().max(1) as f64 * rows);
            steps.iter().enumerate().flat_map(move |(step, toks)| {
                toks.iter().map(move |&tok| (row, step, tok, w))
            })
        }),
        logits.dtype(),
        logits.device(),
    )?;
    let all = softplus(logits)?.broadcast_mul(&step_weight)?.sum_all()?;
    Ok((all - (logits * positives)?.sum_all()?)?)
}

/// Binary cross-entropy summed over each row's valid entries, averaged over rows.
///
/// `logits` is `(B, S)`; `targets[b]` labels the first entries of row `b`.
pub fn binary_cross_entropy_sum(logits: &Tensor, targets: &[Vec<bool>]) -> Result<Tensor> {
    let (b, s) = logits.dims2()?;
    let rows = targets.len() as f64;
    let mut valid = vec![0.0; b * s];
    let mut positive = vec![0.0; b * s];
    for (row, t) in targets.iter().enumerate() {
        for (k, &y) in t.iter().enumerate() {
            valid[row * s + k] = 1.0 / rows;
            if y {
                positive[row * s + k] = 1.0 / rows;
            }
        }
    }
    let valid = Tensor::from_vec(valid, (b, s), logits.device())?.to_dtype(logits.dtype())?;
    let positive = Tensor::from_vec(positive, (b, s), logits.device())?.to_dtype(logits.dtype())?;
    let all = (softplus(logits)? * valid)?.sum_all()?;
    Ok((all - (logits * positive)?.sum_all()?)?)
}
