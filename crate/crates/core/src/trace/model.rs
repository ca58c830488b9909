//! The tracing encoder-decoder.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::geometry::{traj_embed, FrameRange, TrajEmbedConfig, Trajectory};
use super::loss::{answer_loss, AnswerLossMode, AnswerTargets};
use super::{pair_geometry, pair_timing, BiasMode, EncoderInput, PairGeometry, MAX_WORD_OFFSET};
use crate::error::{Error, Result};
use crate::nn::{padding_mask, Embedding, EncoderStack, Linear, ParamStore, TextDecoder};
use crate::vocab::{default_charset, Special, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceModelConfig {
    pub width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Frequency bands of the trajectory embedding.
    pub bands: usize,
    pub max_frequency: f64,
    /// Sine and cosine on both axes instead of sine-x, cosine-y.
    pub symmetric: bool,
    pub max_instances: usize,
    pub max_answer_len: usize,
    /// Size of the encoder position table.
    pub max_tokens: usize,
    pub charset: String,
    pub loss: AnswerLossMode,
}

impl Default for TraceModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            bands: 8,
            max_frequency: 32.0,
            symmetric: false,
            max_instances: 8,
            max_answer_len: 16,
            max_tokens: 192,
            charset: default_charset(),
            loss: AnswerLossMode::SampledCe,
        }
    }
}

impl TraceModelConfig {
    pub fn embed(&self) -> TrajEmbedConfig {
        TrajEmbedConfig {
            bands: self.bands,
            max_frequency: self.max_frequency,
            symmetric: self.symmetric,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed().dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("trace width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.bands == 0 || !(self.max_frequency > 0.0) {
            return bad("trajectory embedding needs at least one band and a positive max frequency".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("trace model needs at least one encoder and one decoder layer".into());
        }
        if self.max_answer_len == 0 || self.max_tokens < 3 {
            return bad("trace length limits are too small".into());
        }
        Vocab::new(&self.charset)?;
        Ok(())
    }
}

/// Geometric record of one ordered instance pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBias {
    pub pair: (usize, usize),
    pub intersection: Option<FrameRange>,
    pub central_frame: Option<u32>,
    pub traj_pos: Option<(f64, f64)>,
    pub traj_embed: Option<Vec<f64>>,
    pub head_bias: Vec<f64>,
}

/// One question with its targets, ready for batching.
#[derive(Debug, Clone)]
pub struct TraceExample {
    pub input: EncoderInput,
    pub targets: AnswerTargets,
}

/// Padded encoder inputs for several questions.
#[derive(Debug)]
pub struct TraceBatch {
    tokens: Tensor,
    types: Tensor,
    offsets: Tensor,
    slots: Tensor,
    lengths: Vec<usize>,
    max_len: usize,
    /// Per sample, row-major `I x I` pair geometry.
    geometry: Vec<Vec<PairGeometry>>,
    instance_of_token: Vec<Vec<Option<usize>>>,
    instance_counts: Vec<usize>,
}

// bias table layout after the projected pair rows
const DISJOINT: usize = 0;
const QQ: usize = 1;
const QI: usize = 2;
const IQ: usize = 3;
const ZERO: usize = 4;

#[derive(Debug)]
pub struct TraceModel {
    config: TraceModelConfig,
    bias_mode: BiasMode,
    vocab: Vocab,
    params: ParamStore,
    token: Embedding,
    kind: Embedding,
    position: Embedding,
    offset: Embedding,
    slot: Embedding,
    projection: Linear,
    disjoint: Tensor,
    relation: Tensor,
    encoder: EncoderStack,
    decoder: TextDecoder,
    allowed: Vec<bool>,
}

impl TraceModel {
    pub fn new(config: TraceModelConfig, bias_mode: BiasMode, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(&config.charset)?;
        let mut ps = ParamStore::new(seed, dtype);
        let d = config.width;
        let token = Embedding::new(&mut ps, "enc.token", vocab.len(), d)?;
        let kind = Embedding::new(&mut ps, "enc.type", 3, d)?;
        let position = Embedding::new(&mut ps, "enc.position", config.max_tokens, d)?;
        let offset = Embedding::new(&mut ps, "enc.offset", MAX_WORD_OFFSET + 1, d)?;
        let slot = Embedding::new(&mut ps, "enc.slot", config.max_instances + 1, d)?;
        // bias parameters exist in every mode so that all modes share an initialization
        let projection = Linear::zeroed(&mut ps, "bias.projection", config.embed_dim(), config.heads)?;
        let disjoint = ps.constant("bias.disjoint", &[1, config.heads], 0.0)?;
        let relation = ps.constant("bias.relation", &[3, config.heads], 0.0)?;
        let encoder = EncoderStack::new(&mut ps, "enc", d, config.heads, config.encoder_layers)?;
        let word_char = (0..vocab.len() as u32)
            .map(|id| vocab.char_of(id).is_some_and(char::is_alphanumeric))
            .collect();
        let decoder = TextDecoder::new(
            &mut ps,
            "dec",
            token.clone(),
            offset.clone(),
            word_char,
            d,
            config.heads,
            config.decoder_layers,
            config.max_answer_len + 1,
        )?;
        let allowed = (0..vocab.len() as u32)
            .map(|id| id == Special::Eos.id() || vocab.char_of(id).is_some())
            .collect();
        Ok(Self {
            config,
            bias_mode,
            vocab,
            params: ps,
            token,
            kind,
            position,
            offset,
            slot,
            projection,
            disjoint,
            relation,
            encoder,
            decoder,
            allowed,
        })
    }

    pub fn config(&self) -> &TraceModelConfig {
        &self.config
    }

    pub fn bias_mode(&self) -> BiasMode {
        self.bias_mode
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn device(&self) -> &Device {
        self.params.device()
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Per-head bias for one pair's geometry.
    pub fn head_bias(&self, geometry: PairGeometry) -> Result<Vec<f64>> {
        let row = match geometry {
            PairGeometry::Offset { dx, dy } => {
                let e = traj_embed(dx, dy, &self.config.embed());
                let t = Tensor::from_vec(e, (1, self.config.embed_dim()), self.device())?.to_dtype(self.dtype())?;
                self.projection.forward(&t)?
            }
            PairGeometry::Disjoint => self.disjoint.clone(),
        };
        Ok(row.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// The full geometric record of pair `(i, j)` under this model's bias mode.
    pub fn trajectory_bias(&self, trajectories: &[Trajectory], i: usize, j: usize) -> Result<TrajectoryBias> {
        let (a, b) = (&trajectories[i], &trajectories[j]);
        let timing = pair_timing(a, b);
        let geometry = pair_geometry(a, b, self.bias_mode);
        let (traj_pos, embed) = match geometry {
            PairGeometry::Offset { dx, dy } => (Some((dx, dy)), Some(traj_embed(dx, dy, &self.config.embed()))),
            PairGeometry::Disjoint => (None, None),
        };
        Ok(TrajectoryBias {
            pair: (i, j),
            intersection: timing.map(|t| t.0),
            central_frame: timing.map(|t| t.1),
            traj_pos,
            traj_embed: embed,
            head_bias: self.head_bias(geometry)?,
        })
    }

    pub fn batch(&self, inputs: &[&EncoderInput]) -> Result<TraceBatch> {
        let max_len = inputs.iter().map(|i| i.len()).max().unwrap_or(0).max(1);
        if max_len > self.config.max_tokens {
            return Err(Error::Contract(format!(
                "encoder input of {max_len} tokens exceeds max_tokens {}",
                self.config.max_tokens
            )));
        }
        let b = inputs.len();
        let mut tokens = vec![Special::Pad.id(); b * max_len];
        let mut types = vec![0u32; b * max_len];
        let mut offsets = vec![0u32; b * max_len];
        let mut slots = vec![0u32; b * max_len];
        let mut geometry = Vec::with_capacity(b);
        for (r, input) in inputs.iter().enumerate() {
            if input.trajectories.len() > self.config.max_instances {
                return Err(Error::Contract(format!(
                    "{} instances exceed max_instances {}",
                    input.trajectories.len(),
                    self.config.max_instances
                )));
            }
            for t in 0..input.len() {
                let at = r * max_len + t;
                let id = input.token_ids[t];
                if id as usize >= self.vocab.len() {
                    return Err(Error::Contract(format!("token id {id} outside vocabulary of {}", self.vocab.len())));
                }
                tokens[at] = id;
                types[at] = input.token_types[t].index() as u32;
                offsets[at] = input.word_offsets[t].min(MAX_WORD_OFFSET) as u32;
                slots[at] = input.instance_of_token[t].map_or(0, |s| s as u32 + 1);
            }
            let trajs = &input.trajectories;
            geometry.push(
                trajs
                    .iter()
                    .flat_map(|a| trajs.iter().map(move |b| (a, b)))
                    .map(|(a, b)| pair_geometry(a, b, self.bias_mode))
                    .collect(),
            );
        }
        let dev = self.device();
        Ok(TraceBatch {
            tokens: Tensor::from_vec(tokens, (b, max_len), dev)?,
            types: Tensor::from_vec(types, (b, max_len), dev)?,
            offsets: Tensor::from_vec(offsets, (b, max_len), dev)?,
            slots: Tensor::from_vec(slots, (b, max_len), dev)?,
            lengths: inputs.iter().map(|i| i.len()).collect(),
            max_len,
            geometry,
            instance_of_token: inputs.iter().map(|i| i.instance_of_token.clone()).collect(),
            instance_counts: inputs.iter().map(|i| i.trajectories.len()).collect(),
        })
    }

    /// Additive attention bias `(B, H, T, T)` including key padding.
    fn attention_bias(&self, batch: &TraceBatch) -> Result<Tensor> {
        let (dtype, dev) = (self.dtype(), self.device());
        let b = batch.lengths.len();
        let t = batch.max_len;
        let pad = padding_mask(&batch.lengths, t, dtype, dev)?;
        if self.bias_mode == BiasMode::Off {
            return Ok(pad);
        }
        let h = self.config.heads;
        let e = self.config.embed_dim();
        let mut embeds: Vec<f64> = Vec::new();
        // per sample, per pair: table row
        let mut pair_rows: Vec<Vec<Option<usize>>> = Vec::with_capacity(b);
        let mut n_offsets = 0usize;
        for geo in &batch.geometry {
            let mut rows = Vec::with_capacity(geo.len());
            for g in geo {
                match *g {
                    PairGeometry::Offset { dx, dy } => {
                        embeds.extend(traj_embed(dx, dy, &self.config.embed()));
                        rows.push(Some(n_offsets));
                        n_offsets += 1;
                    }
                    PairGeometry::Disjoint => rows.push(None),
                }
            }
            pair_rows.push(rows);
        }
        let mut parts = Vec::with_capacity(4);
        if n_offsets > 0 {
            let m = Tensor::from_vec(embeds, (n_offsets, e), dev)?.to_dtype(dtype)?;
            parts.push(self.projection.forward(&m)?);
        }
        parts.push(self.disjoint.clone());
        parts.push(self.relation.clone());
        parts.push(Tensor::zeros((1, h), dtype, dev)?);
        let table = Tensor::cat(&parts, 0)?;
        let fixed = |k: usize| (n_offsets + k) as u32;

        let mut index = vec![fixed(ZERO); b * t * t];
        for r in 0..b {
            let len = batch.lengths[r];
            let inst = &batch.instance_of_token[r];
            let n = batch.instance_counts[r];
            for p in 0..len {
                for q in 0..len {
                    let row = match (inst[p], inst[q]) {
                        (None, None) => fixed(QQ),
                        (None, Some(_)) => fixed(QI),
                        (Some(_), None) => fixed(IQ),
                        (Some(i), Some(j)) => match pair_rows[r][i * n + j] {
                            Some(k) => k as u32,
                            None => fixed(DISJOINT),
                        },
                    };
                    index[(r * t + p) * t + q] = row;
                }
            }
        }
        let index = Tensor::from_vec(index, b * t * t, dev)?;
        let bias = table
            .index_select(&index, 0)?
            .reshape((b, t, t, h))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        Ok(bias.broadcast_add(&pad)?)
    }

    /// Encoder states `(B, T, d)` and the key mask for cross-attention.
    fn encode(&self, batch: &TraceBatch) -> Result<(Tensor, Tensor)> {
        let (b, t) = batch.tokens.dims2()?;
        let positions = Tensor::arange(0u32, t as u32, self.device())?;
        let xs = self
            .token
            .forward(&batch.tokens)?
            .add(&self.kind.forward(&batch.types)?)?
            .add(&self.offset.forward(&batch.offsets)?)?
            .add(&self.slot.forward(&batch.slots)?)?
            .broadcast_add(&self.position.forward(&positions)?.unsqueeze(0)?)?;
        let bias = self.attention_bias(batch)?;
        let memory = self.encoder.forward(&xs, Some(&bias))?;
        let mask = padding_mask(&batch.lengths, t, self.dtype(), self.device())?;
        debug_assert_eq!(memory.dim(0)?, b);
        Ok((memory, mask))
    }

    /// Teacher-forced decoder logits `(B, N, V)`.
    pub fn forward(&self, batch: &TraceBatch, targets: &[&AnswerTargets]) -> Result<Tensor> {
        let (memory, mask) = self.encode(batch)?;
        let n = targets.iter().map(|t| t.prefix.len()).max().unwrap_or(1);
        let mut prefix = vec![Special::Pad.id(); targets.len() * n];
        for (r, t) in targets.iter().enumerate() {
            prefix[r * n..r * n + t.prefix.len()].copy_from_slice(&t.prefix);
        }
        let prefix = Tensor::from_vec(prefix, (targets.len(), n), self.device())?;
        self.decoder.forward(&prefix, &memory, &mask)
    }

    pub fn loss(&self, examples: &[&TraceExample]) -> Result<Tensor> {
        let inputs: Vec<&EncoderInput> = examples.iter().map(|e| &e.input).collect();
        let targets: Vec<&AnswerTargets> = examples.iter().map(|e| &e.targets).collect();
        let batch = self.batch(&inputs)?;
        let logits = self.forward(&batch, &targets)?;
        answer_loss(&logits, &targets, self.config.loss)
    }

    /// Greedy answers for a batch of inputs.
    pub fn generate(&self, inputs: &[&EncoderInput]) -> Result<Vec<String>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch(inputs)?;
        let (memory, mask) = self.encode(&batch)?;
        let ids = self
            .decoder
            .greedy(&memory, &mask, Special::Bos.id(), Special::Eos.id(), &self.allowed)?;
        Ok(ids.iter().map(|s| self.vocab.decode(s)).collect())
    }

    pub fn generate_answer(&self, input: &EncoderInput) -> Result<String> {
        Ok(self.generate(&[input])?.remove(0))
    }

    /// The additive score bias `(B, H, T, T)` shared by all encoder layers.
    pub fn bias_tensor(&self, inputs: &[&EncoderInput]) -> Result<Tensor> {
        self.attention_bias(&self.batch(inputs)?)
    }

    pub fn checkpoint_header(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "trace",
            "config": self.config,
            "bias_mode": self.bias_mode,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path, self.checkpoint_header())
    }

    pub fn load(path: &std::path::Path, dtype: DType) -> Result<Self> {
        let header = crate::nn::checkpoint_config(path)?;
        if header["kind"] != "trace" {
            return Err(Error::Checkpoint(format!("{} is not a trace checkpoint", path.display())));
        }
        let config: TraceModelConfig =
            serde_json::from_value(header["config"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mode: BiasMode =
            serde_json::from_value(header["bias_mode"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let model = Self::new(config, mode, 0, dtype)?;
        model.params.load_values(path)?;
        Ok(model)
    }
}
