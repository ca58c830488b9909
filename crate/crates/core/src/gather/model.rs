//! The gathering encoder-decoder.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{aux_targets, build_sequence, kept_observations, GatherSequence, GatherTokenType};
use crate::corpus::Sightings;
use crate::error::{Error, Result};
use crate::nn::{
    binary_cross_entropy_sum, padding_mask, sequence_cross_entropy, Embedding, EncoderStack, Linear, ParamStore,
    TextDecoder,
};
use crate::vocab::{default_charset, Special, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatherModelConfig {
    pub width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub max_observations: usize,
    pub max_text_len: usize,
    /// Characters the vocabulary can represent.
    pub charset: String,
    /// Characters decoding may emit.
    pub alphabet: String,
    /// Weight of the per-sighting alignment loss.
    pub lambda: f64,
    pub visual_dim: usize,
    /// Frames beyond this share the last frame embedding.
    pub max_frames: usize,
}

impl Default for GatherModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            max_observations: 16,
            max_text_len: 12,
            charset: default_charset(),
            alphabet: "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789".into(),
            lambda: 1.0,
            visual_dim: 16,
            max_frames: 64,
        }
    }
}

impl GatherModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("gather width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("gather model needs at least one encoder and one decoder layer".into());
        }
        if self.max_observations == 0 || self.max_text_len == 0 {
            return bad("gather length limits must be positive".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        let vocab = Vocab::new(&self.charset)?;
        if let Some(c) = self.alphabet.chars().find(|&c| vocab.char_id(c) == Special::Unk.id()) {
            return bad(format!("alphabet character {c:?} is missing from the charset"));
        }
        Ok(())
    }

    pub fn max_positions(&self) -> usize {
        2 + self.max_observations * (3 + self.max_text_len)
    }
}

/// Decoder logits and per-sighting alignment scores for one instance.
#[derive(Debug, Clone)]
pub struct GatherOutput {
    /// `(N, V)` unnormalized scores, one row per decode step.
    pub recognition_logits: Tensor,
    /// `(S,)` alignment logits, indexed by observation.
    pub aux_logits: Tensor,
}

impl GatherOutput {
    pub fn recognition_probabilities(&self) -> Result<Tensor> {
        crate::nn::softmax_last(&self.recognition_logits)
    }

    pub fn aux_probabilities(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.aux_logits)?)
    }
}

/// `L_rec + lambda * L_aux` for one instance.
///
/// `gt_steps` is the ground-truth text followed by the end token.
pub fn gather_loss(out: &GatherOutput, gt_steps: &[u32], aux: &[bool], lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let rec = sequence_cross_entropy(&out.recognition_logits.unsqueeze(0)?, &[gt_steps.to_vec()])?;
    let aux_loss = binary_cross_entropy_sum(&out.aux_logits.unsqueeze(0)?, &[aux.to_vec()])?;
    Ok((rec + (aux_loss * lambda)?)?)
}

/// A training instance: its sequence, target ids and alignment labels.
#[derive(Debug, Clone)]
pub struct GatherExample {
    pub sequence: GatherSequence,
    /// Target text then `[EOS]`.
    pub steps: Vec<u32>,
    pub aux: Vec<bool>,
}

struct GatherBatch {
    tokens: Tensor,
    kinds: Tensor,
    offsets: Tensor,
    observations: Tensor,
    frames: Tensor,
    layout: Tensor,
    visual: Tensor,
    lengths: Vec<usize>,
    /// `(B * S)` flat indices of frame markers into `(B * T)`.
    frame_positions: Tensor,
    slots: usize,
}

#[derive(Debug)]
pub struct GatherModel {
    config: GatherModelConfig,
    vocab: Vocab,
    params: ParamStore,
    token: Embedding,
    kind: Embedding,
    position: Embedding,
    offset: Embedding,
    observation: Embedding,
    frame: Embedding,
    layout: Linear,
    visual: Linear,
    encoder: EncoderStack,
    aux_head: Linear,
    decoder: TextDecoder,
    allowed: Vec<bool>,
}

impl GatherModel {
    pub fn new(config: GatherModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(&config.charset)?;
        let mut ps = ParamStore::new(seed, dtype);
        let d = config.width;
        let token = Embedding::new(&mut ps, "enc.token", vocab.len(), d)?;
        let kind = Embedding::new(&mut ps, "enc.type", 4, d)?;
        let position = Embedding::new(&mut ps, "enc.position", config.max_positions(), d)?;
        let offset = Embedding::new(&mut ps, "enc.offset", config.max_text_len + 1, d)?;
        let observation = Embedding::new(&mut ps, "enc.observation", config.max_observations + 1, d)?;
        let frame = Embedding::new(&mut ps, "enc.frame", config.max_frames + 1, d)?;
        let layout = Linear::new(&mut ps, "enc.layout", 4, d, false)?;
        let visual = Linear::new(&mut ps, "enc.visual", config.visual_dim, d, false)?;
        let encoder = EncoderStack::new(&mut ps, "enc", d, config.heads, config.encoder_layers)?;
        let aux_head = Linear::new(&mut ps, "aux", d, 1, true)?;
        let word_char = (0..vocab.len() as u32).map(|id| vocab.char_of(id).is_some()).collect();
        let decoder = TextDecoder::new(
            &mut ps,
            "dec",
            token.clone(),
            offset.clone(),
            word_char,
            d,
            config.heads,
            config.decoder_layers,
            config.max_text_len + 1,
        )?;
        let mut allowed = vec![false; vocab.len()];
        allowed[Special::Eos.id() as usize] = true;
        for c in config.alphabet.chars() {
            allowed[vocab.char_id(c) as usize] = true;
        }
        Ok(Self {
            config,
            vocab,
            params: ps,
            token,
            kind,
            position,
            offset,
            observation,
            frame,
            layout,
            visual,
            encoder,
            aux_head,
            decoder,
            allowed,
        })
    }

    pub fn config(&self) -> &GatherModelConfig {
        &self.config
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

    pub fn sequence(&self, instance: &impl Sightings) -> Result<GatherSequence> {
        let c = &self.config;
        build_sequence(instance, c.max_observations, c.max_text_len, c.visual_dim, &self.vocab)
    }

    /// Target ids of `text` followed by the end token.
    pub fn target_steps(&self, text: &str) -> Result<Vec<u32>> {
        if text.chars().count() > self.config.max_text_len {
            return Err(Error::Contract(format!(
                "target {text:?} exceeds max_text_len {}",
                self.config.max_text_len
            )));
        }
        let mut ids = self.vocab.encode(text);
        ids.push(Special::Eos.id());
        Ok(ids)
    }

    pub fn example(&self, instance: &impl Sightings, gt_text: &str) -> Result<GatherExample> {
        let mut sorted = instance.sightings().to_vec();
        sorted.sort_by_key(|o| o.frame);
        let kept = kept_observations(&sorted, self.config.max_observations);
        Ok(GatherExample {
            sequence: self.sequence(instance)?,
            steps: self.target_steps(gt_text)?,
            aux: aux_targets(&kept, gt_text),
        })
    }

    fn batch(&self, seqs: &[&GatherSequence]) -> Result<GatherBatch> {
        let b = seqs.len();
        let t = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
        if t > self.config.max_positions() {
            return Err(Error::Contract(format!("sequence of {t} exceeds {} positions", self.config.max_positions())));
        }
        let slots = seqs.iter().map(|s| s.num_observations()).max().unwrap_or(0).max(1);
        let vd = self.config.visual_dim;
        let mut tokens = vec![Special::Pad.id(); b * t];
        let mut kinds = vec![0u32; b * t];
        let mut offsets = vec![0u32; b * t];
        let mut observations = vec![0u32; b * t];
        let mut frames = vec![0u32; b * t];
        let mut layout = vec![0f32; b * t * 4];
        let mut visual = vec![0f32; b * t * vd];
        let mut frame_positions = vec![0u32; b * slots];
        for (r, s) in seqs.iter().enumerate() {
            let mut offset = 0;
            for p in 0..s.len() {
                let at = r * t + p;
                let id = s.token_ids[p];
                if id as usize >= self.vocab.len() {
                    return Err(Error::Contract(format!("token id {id} outside vocabulary of {}", self.vocab.len())));
                }
                if s.visual_values[p].len() != vd {
                    return Err(Error::Contract(format!("visual vector of {} where {vd} expected", s.visual_values[p].len())));
                }
                tokens[at] = id;
                kinds[at] = s.token_types[p].index() as u32;
                offset = if s.token_types[p] == GatherTokenType::Text { offset + 1 } else { 0 };
                offsets[at] = offset.min(self.config.max_text_len) as u32;
                observations[at] = s.observation_index[p].map_or(0, |k| (k + 1).min(self.config.max_observations) as u32);
                frames[at] = if s.observation_index[p].is_some() {
                    (s.frame_index[p] as usize + 1).min(self.config.max_frames) as u32
                } else {
                    0
                };
                layout[at * 4..at * 4 + 4].copy_from_slice(&s.layout_values[p]);
                visual[at * vd..(at + 1) * vd].copy_from_slice(&s.visual_values[p]);
            }
            for (k, p) in s.frame_positions().into_iter().enumerate() {
                frame_positions[r * slots + k] = (r * t + p) as u32;
            }
        }
        let (dev, dtype) = (self.device(), self.dtype());
        Ok(GatherBatch {
            tokens: Tensor::from_vec(tokens, (b, t), dev)?,
            kinds: Tensor::from_vec(kinds, (b, t), dev)?,
            offsets: Tensor::from_vec(offsets, (b, t), dev)?,
            observations: Tensor::from_vec(observations, (b, t), dev)?,
            frames: Tensor::from_vec(frames, (b, t), dev)?,
            layout: Tensor::from_vec(layout, (b, t, 4), dev)?.to_dtype(dtype)?,
            visual: Tensor::from_vec(visual, (b, t, vd), dev)?.to_dtype(dtype)?,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            frame_positions: Tensor::from_vec(frame_positions, b * slots, dev)?,
            slots,
        })
    }

    /// Encoder states `(B, T, d)`, cross-attention mask and aux logits `(B, S)`.
    fn encode(&self, batch: &GatherBatch) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, t) = batch.tokens.dims2()?;
        let positions = Tensor::arange(0u32, t as u32, self.device())?;
        let xs = self
            .token
            .forward(&batch.tokens)?
            .add(&self.kind.forward(&batch.kinds)?)?
            .add(&self.offset.forward(&batch.offsets)?)?
            .add(&self.observation.forward(&batch.observations)?)?
            .add(&self.frame.forward(&batch.frames)?)?
            .add(&self.layout.forward(&batch.layout)?)?
            .add(&self.visual.forward(&batch.visual)?)?
            .broadcast_add(&self.position.forward(&positions)?.unsqueeze(0)?)?;
        let mask = padding_mask(&batch.lengths, t, self.dtype(), self.device())?;
        let memory = self.encoder.forward(&xs, Some(&mask))?;
        let d = self.config.width;
        let anchors = memory.reshape((b * t, d))?.index_select(&batch.frame_positions, 0)?;
        let aux = self.aux_head.forward(&anchors)?.reshape((b, batch.slots))?;
        Ok((memory, mask, aux))
    }

    fn prefix_tensor(&self, prefixes: &[&[u32]]) -> Result<Tensor> {
        let n = prefixes.iter().map(|p| p.len()).max().unwrap_or(1).max(1);
        let mut ids = vec![Special::Pad.id(); prefixes.len() * n];
        for (r, p) in prefixes.iter().enumerate() {
            ids[r * n..r * n + p.len()].copy_from_slice(p);
        }
        Ok(Tensor::from_vec(ids, (prefixes.len(), n), self.device())?)
    }

    /// Teacher-forced forward pass for one sequence. `prefix` starts with `[BOS]`.
    pub fn forward(&self, seq: &GatherSequence, prefix: &[u32]) -> Result<GatherOutput> {
        if prefix.first() != Some(&Special::Bos.id()) {
            return Err(Error::Contract("decoder prefix must start with the start token".into()));
        }
        let batch = self.batch(&[seq])?;
        let (memory, mask, aux) = self.encode(&batch)?;
        let logits = self.decoder.forward(&self.prefix_tensor(&[prefix])?, &memory, &mask)?;
        let s = seq.num_observations();
        Ok(GatherOutput {
            recognition_logits: logits.squeeze(0)?,
            aux_logits: aux.squeeze(0)?.narrow(0, 0, s)?,
        })
    }

    /// Mean over `examples` of `L_rec + lambda * L_aux`.
    pub fn loss(&self, examples: &[&GatherExample]) -> Result<Tensor> {
        let seqs: Vec<&GatherSequence> = examples.iter().map(|e| &e.sequence).collect();
        let batch = self.batch(&seqs)?;
        let (memory, mask, aux) = self.encode(&batch)?;
        let prefixes: Vec<Vec<u32>> = examples
            .iter()
            .map(|e| {
                let mut p = vec![Special::Bos.id()];
                p.extend(&e.steps[..e.steps.len() - 1]);
                p
            })
            .collect();
        let refs: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
        let logits = self.decoder.forward(&self.prefix_tensor(&refs)?, &memory, &mask)?;
        let steps: Vec<Vec<u32>> = examples.iter().map(|e| e.steps.clone()).collect();
        let rec = sequence_cross_entropy(&logits, &steps)?;
        let labels: Vec<Vec<bool>> = examples.iter().map(|e| e.aux.clone()).collect();
        let aux_loss = binary_cross_entropy_sum(&aux, &labels)?;
        Ok((rec + (aux_loss * self.config.lambda)?)?)
    }

    /// Greedy transcriptions for several sequences.
    pub fn decode_sequences(&self, seqs: &[&GatherSequence]) -> Result<Vec<String>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch(seqs)?;
        let (memory, mask, _) = self.encode(&batch)?;
        let ids = self
            .decoder
            .greedy(&memory, &mask, Special::Bos.id(), Special::Eos.id(), &self.allowed)?;
        Ok(ids.iter().map(|s| self.vocab.decode(s)).collect())
    }

    pub fn decode_canonical(&self, instance: &impl Sightings) -> Result<String> {
        let seq = self.sequence(instance)?;
        Ok(self.decode_sequences(&[&seq])?.remove(0))
    }

    pub fn checkpoint_header(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "gather", "config": self.config })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path, self.checkpoint_header())
    }

    pub fn load(path: &std::path::Path, dtype: DType) -> Result<Self> {
        let header = crate::nn::checkpoint_config(path)?;
        if header["kind"] != "gather" {
            return Err(Error::Checkpoint(format!("{} is not a gather checkpoint", path.display())));
        }
        let config: GatherModelConfig =
            serde_json::from_value(header["config"].clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let model = Self::new(config, 0, dtype)?;
        model.params.load_values(path)?;
        Ok(model)
    }
}
