use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Init, Linear};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, softmax, GruCell, LayerNorm, Mlp, TransformerLayer};
use crate::params::{dtype_from_str, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_slots: usize,
    pub slot_dim: usize,
    pub slot_iterations: usize,
    pub cnn_channels: Vec<usize>,
    pub cnn_strides: Vec<usize>,
    pub cnn_kernel: usize,
    pub slot_mlp_hidden: usize,
    pub predictor_heads: usize,
    pub broadcast_size: usize,
    pub decoder_channels: usize,
    pub decoder_kernel: usize,
    pub context_len: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Six slots of width 128 at full input resolution.
    pub fn paper() -> Self {
        Self {
            num_slots: 6,
            slot_dim: 128,
            slot_iterations: 2,
            cnn_channels: vec![32, 32, 32, 32],
            cnn_strides: vec![1, 1, 1, 1],
            cnn_kernel: 5,
            slot_mlp_hidden: 256,
            predictor_heads: 4,
            broadcast_size: 8,
            decoder_channels: 32,
            decoder_kernel: 5,
            context_len: 6,
            height: 64,
            width: 64,
            dtype: "f32".into(),
        }
    }

    /// Half-width slots and a 32×32 feature grid.
    pub fn desk() -> Self {
        Self {
            slot_dim: 64,
            cnn_strides: vec![2, 1, 1, 1],
            slot_mlp_hidden: 128,
            ..Self::paper()
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        dtype_from_str(&self.dtype)
    }

    fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
        (size + 2 * (kernel / 2) - kernel) / stride + 1
    }

    /// Spatial size of the CNN feature grid.
    pub fn feature_grid(&self) -> (usize, usize) {
        self.cnn_strides.iter().fold((self.height, self.width), |(h, w), &s| {
            (
                Self::conv_out(h, self.cnn_kernel, s),
                Self::conv_out(w, self.cnn_kernel, s),
            )
        })
    }

    /// Number of stride-2 upsampling stages in the decoder.
    pub fn upsample_stages(&self) -> usize {
        (self.height / self.broadcast_size).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let e = |key: &str, c: &str| Err(Error::param(format!("savi.{key}"), c));
        if self.num_slots == 0 {
            return e("num_slots", "must be >= 1");
        }
        if self.slot_dim == 0 || self.slot_dim % 2 != 0 {
            return e("slot_dim", "must be even and > 0");
        }
        if self.slot_iterations == 0 {
            return e("slot_iterations", "must be >= 1");
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.len() != self.cnn_strides.len() {
            return e("cnn_strides", "must have one entry per cnn channel entry");
        }
        if self.cnn_strides.iter().any(|&s| s == 0) || self.cnn_kernel % 2 == 0 {
            return e("cnn_kernel", "must be odd, with strides >= 1");
        }
        if self.predictor_heads == 0 || self.slot_dim % self.predictor_heads != 0 {
            return e("predictor_heads", "must divide slot_dim");
        }
        let b = self.broadcast_size;
        if b == 0 || self.height % b != 0 || self.width % b != 0 {
            return e("broadcast_size", "must divide height and width");
        }
        let ratio = self.height / b;
        if !ratio.is_power_of_two() || self.width / b != ratio {
            return e("broadcast_size", "height/broadcast_size must be a power of two equal to width/broadcast_size");
        }
        if self.decoder_kernel % 2 == 0 {
            return e("decoder_kernel", "must be odd");
        }
        if self.context_len == 0 {
            return e("context_len", "must be >= 1");
        }
        self.dtype()?;
        Ok(())
    }
}

/// One frame's encoder output.
#[derive(Debug, Clone)]
pub struct EncodedFrame {
    /// Slots after the attention rounds, `[B, S, D]`: the latent `z`.
    pub slots: Tensor,
    /// Transitioned slots used as the next frame's queries, `[B, S, D]`.
    pub next_prior: Tensor,
    /// Final-round attention, `[B, S, N]`, normalized over slots.
    pub attention: Tensor,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// `[B, H, W, 2]`.
    pub flow: Tensor,
    /// `[B, S, H, W]`, softmax over slots.
    pub masks: Tensor,
}

/// Slot-attention video backbone with a spatial-broadcast flow decoder.
#[derive(Debug, Clone)]
pub struct Savi {
    config: EncoderConfig,
    store: ParamStore,
    dtype: DType,
    device: Device,
    convs: Vec<Conv2d>,
    pos_embed: Tensor,
    enc_norm: LayerNorm,
    enc_mlp: Mlp,
    norm_inputs: LayerNorm,
    norm_slots: LayerNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    slot_gru: GruCell,
    norm_mlp: LayerNorm,
    slot_mlp: Mlp,
    predictor: TransformerLayer,
    transition: GruCell,
    bbox_embed: Linear,
    null_slot: Tensor,
    dec_pos: Tensor,
    deconvs: Vec<ConvTranspose2d>,
    dec_conv: Conv2d,
    dec_out: Conv2d,
}

impl Savi {
    pub fn new(config: EncoderConfig, store: ParamStore, device: &Device) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype()?;
        let vb = store.var_builder(dtype, device);
        let d = config.slot_dim;
        let k = config.cnn_kernel;

        let mut convs = Vec::new();
        let mut in_c = 3;
        for (i, (&c, &s)) in config.cnn_channels.iter().zip(&config.cnn_strides).enumerate() {
            let cfg = Conv2dConfig {
                padding: k / 2,
                stride: s,
                ..Default::default()
            };
            convs.push(candle_nn::conv2d(in_c, c, k, cfg, vb.pp(format!("enc.conv{i}")))?);
            in_c = c;
        }
        let feat = in_c;
        let (gh, gw) = config.feature_grid();
        let pos_embed = vb.get_with_hints(
            (1, gh * gw, feat),
            "enc.pos_embed",
            Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;

        let b = config.broadcast_size;
        let dk = config.decoder_kernel;
        let dc = config.decoder_channels;
        let mut deconvs = Vec::new();
        let mut dec_in = d;
        for i in 0..config.upsample_stages() {
            let cfg = ConvTranspose2dConfig {
                padding: dk / 2,
                output_padding: 1,
                stride: 2,
                dilation: 1,
            };
            deconvs.push(candle_nn::conv_transpose2d(
                dec_in,
                dc,
                dk,
                cfg,
                vb.pp(format!("dec.deconv{i}")),
            )?);
            dec_in = dc;
        }
        let same = Conv2dConfig {
            padding: dk / 2,
            ..Default::default()
        };
        let dec_conv = candle_nn::conv2d(dec_in, dc, dk, same, vb.pp("dec.conv"))?;
        let dec_out = candle_nn::conv2d(
            dc,
            3,
            3,
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
            vb.pp("dec.out"),
        )?;

        Ok(Self {
            enc_norm: LayerNorm::new(feat, vb.pp("enc.norm"))?,
            enc_mlp: Mlp::new(feat, feat, feat, vb.pp("enc.mlp"))?,
            norm_inputs: LayerNorm::new(feat, vb.pp("sa.norm_inputs"))?,
            norm_slots: LayerNorm::new(d, vb.pp("sa.norm_slots"))?,
            to_q: candle_nn::linear_no_bias(d, d, vb.pp("sa.q"))?,
            to_k: candle_nn::linear_no_bias(feat, d, vb.pp("sa.k"))?,
            to_v: candle_nn::linear_no_bias(feat, d, vb.pp("sa.v"))?,
            slot_gru: GruCell::new(d, d, vb.pp("sa.gru"))?,
            norm_mlp: LayerNorm::new(d, vb.pp("sa.norm_mlp"))?,
            slot_mlp: Mlp::new(d, config.slot_mlp_hidden, d, vb.pp("sa.mlp"))?,
            predictor: TransformerLayer::new(d, config.predictor_heads, 2 * d, vb.pp("pred.attn"))?,
            transition: GruCell::new(d, d, vb.pp("pred.gru"))?,
            bbox_embed: linear(4, d, vb.pp("init.bbox"))?,
            null_slot: vb.get_with_hints(
                d,
                "init.null",
                Init::Randn {
                    mean: 0.0,
                    stdev: 1.0,
                },
            )?,
            dec_pos: vb.get_with_hints(
                (1, d, b, b),
                "dec.pos_embed",
                Init::Randn {
                    mean: 0.0,
                    stdev: 0.02,
                },
            )?,
            convs,
            pos_embed,
            deconvs,
            dec_conv,
            dec_out,
            config,
            store,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    /// An immutable copy whose parameters never receive gradients.
    pub fn frozen(&self) -> Result<Self> {
        let store = ParamStore::from_tensors(self.store.snapshot()?, true)?;
        Self::new(self.config.clone(), store, &self.device)
    }

    /// Initial slots from normalized first-frame boxes, one list per batch
    /// item. Slots beyond the box count share the learned null embedding.
    pub fn init_slots_from_bboxes(&self, boxes: &[Vec<[f64; 4]>]) -> Result<Tensor> {
        let s = self.config.num_slots;
        let mut flat = Vec::with_capacity(boxes.len() * s * 4);
        let mut mask = Vec::with_capacity(boxes.len() * s);
        for item in boxes {
            if item.len() > s {
                return Err(Error::Capacity {
                    objects: item.len(),
                    slots: s,
                });
            }
            for i in 0..s {
                match item.get(i) {
                    Some(b) => {
                        flat.extend_from_slice(b);
                        mask.push(1.0);
                    }
                    None => {
                        flat.extend_from_slice(&[0.0; 4]);
                        mask.push(0.0);
                    }
                }
            }
        }
        let bsz = boxes.len();
        let box_t = Tensor::from_vec(flat, (bsz, s, 4), &self.device)?.to_dtype(self.dtype)?;
        let mask = Tensor::from_vec(mask, (bsz, s, 1), &self.device)?.to_dtype(self.dtype)?;
        let embedded = self.bbox_embed.forward(&box_t)?;
        let null = self.null_slot.reshape((1, 1, self.config.slot_dim))?;
        let inv = mask.affine(-1.0, 1.0)?;
        Ok((embedded.broadcast_mul(&mask)? + null.broadcast_mul(&inv)?)?)
    }

    /// CNN features with positional embedding, `[B, N, C]`.
    fn features(&self, frame: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = frame.dims4()?;
        if c != 3 || h != self.config.height || w != self.config.width {
            return Err(Error::ShapeMismatch {
                field: "frame".into(),
                detail: format!(
                    "expected [B, 3, {}, {}], got {:?}",
                    self.config.height,
                    self.config.width,
                    frame.dims()
                ),
            });
        }
        let mut x = frame.to_dtype(self.dtype)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        let (b, c, gh, gw) = x.dims4()?;
        let x = x.reshape((b, c, gh * gw))?.transpose(1, 2)?.contiguous()?;
        let x = x.broadcast_add(&self.pos_embed)?;
        Ok(self.enc_mlp.forward(&self.enc_norm.forward(&x)?)?)
    }

    /// Slot attention rounds; returns the slots and the last attention map.
    fn slot_attention(&self, features: &Tensor, prior: &Tensor) -> Result<(Tensor, Tensor)> {
        let inputs = self.norm_inputs.forward(features)?;
        let k = self.to_k.forward(&inputs)?;
        let v = self.to_v.forward(&inputs)?;
        let scale = (self.config.slot_dim as f64).sqrt();
        let mut slots = prior.clone();
        let mut attn_out = None;
        for _ in 0..self.config.slot_iterations {
            let q = self.to_q.forward(&self.norm_slots.forward(&slots)?)?;
            let logits = (k.matmul(&q.transpose(1, 2)?.contiguous()?)? / scale)?; // [B, N, S]
            let attn = softmax(&logits, 2)?;
            let weights = (&attn + 1e-8)?;
            let weights = weights.broadcast_div(&weights.sum_keepdim(1)?)?;
            let updates = weights.transpose(1, 2)?.contiguous()?.matmul(&v)?; // [B, S, D]
            slots = self.slot_gru.forward(&updates, &slots)?;
            slots = (&slots + self.slot_mlp.forward(&self.norm_mlp.forward(&slots)?)?)?;
            attn_out = Some(attn);
        }
        let attn = attn_out.expect("slot_iterations >= 1").transpose(1, 2)?.contiguous()?;
        Ok((slots, attn))
    }

    /// Encodes one frame `[B, 3, H, W]` (values in [-1, 1]) given the slot
    /// prior `[B, S, D]`.
    pub fn encode_frame(&self, frame: &Tensor, prior: &Tensor) -> Result<EncodedFrame> {
        let features = self.features(frame)?;
        let (slots, attention) = self.slot_attention(&features, prior)?;
        let interacted = self.predictor.forward(&slots)?;
        let next_prior = self.transition.forward(&interacted, &slots)?;
        Ok(EncodedFrame {
            slots,
            next_prior,
            attention,
        })
    }

    /// Encodes `[B, T, 3, H, W]` frames sequentially from box-conditioned
    /// slots; returns latents `[B, T, S, D]`.
    pub fn encode_video(&self, frames: &Tensor, boxes: &[Vec<[f64; 4]>]) -> Result<Tensor> {
        let t = frames.dim(1)?;
        let mut prior = self.init_slots_from_bboxes(boxes)?;
        let mut out = Vec::with_capacity(t);
        for i in 0..t {
            let enc = self.encode_frame(&frames.narrow(1, i, 1)?.squeeze(1)?, &prior)?;
            prior = enc.next_prior;
            out.push(enc.slots);
        }
        Ok(Tensor::stack(&out, 1)?)
    }

    /// Spatial-broadcast decoding of `[B, S, D]` slots.
    pub fn decode_slots(&self, slots: &Tensor) -> Result<Decoded> {
        let (bsz, s, d) = slots.dims3()?;
        if d != self.config.slot_dim {
            return Err(Error::ShapeMismatch {
                field: "slots".into(),
                detail: format!("width {d}, expected {}", self.config.slot_dim),
            });
        }
        let b = self.config.broadcast_size;
        let x = slots
            .to_dtype(self.dtype)?
            .reshape((bsz * s, d, 1, 1))?
            .broadcast_as((bsz * s, d, b, b))?
            .broadcast_add(&self.dec_pos)?;
        let mut x = x.contiguous()?;
        for deconv in &self.deconvs {
            x = deconv.forward(&x)?.relu()?;
        }
        x = self.dec_conv.forward(&x)?.relu()?;
        let out = self.dec_out.forward(&x)?; // [B*S, 3, H, W]
        let (h, w) = (self.config.height, self.config.width);
        let out = out.reshape((bsz, s, 3, h, w))?;
        let flows = out.narrow(2, 0, 2)?;
        let logits = out.narrow(2, 2, 1)?.squeeze(2)?;
        let masks = softmax(&logits, 1)?; // [B, S, H, W]
        let flow = flows
            .broadcast_mul(&masks.unsqueeze(2)?)?
            .sum(1)?
            .permute((0, 2, 3, 1))?
            .contiguous()?;
        Ok(Decoded { flow, masks })
    }

    /// Per-pixel argmax over decoded masks: slot indices `[B, H, W]`.
    pub fn segmentation_from_slots(&self, slots: &Tensor) -> Result<Array3<u8>> {
        masks_to_segmentation(&self.decode_slots(slots)?.masks)
    }
}

/// Argmax over the slot axis of `[B, S, H, W]` masks.
pub fn masks_to_segmentation(masks: &Tensor) -> Result<Array3<u8>> {
    let (b, _, h, w) = masks.dims4()?;
    let idx: Vec<u32> = masks.argmax(1)?.flatten_all()?.to_vec1()?;
    let labels = idx.into_iter().map(|v| v as u8).collect();
    Array3::from_shape_vec((b, h, w), labels).map_err(|e| Error::ShapeMismatch {
        field: "segmentation".into(),
        detail: e.to_string(),
    })
}

/// `[T, H, W, 3]` u8 frames to `[T, 3, H, W]` floats in [-1, 1].
pub fn frames_to_tensor(
    frames: &ndarray::ArrayView4<u8>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (t, h, w, c) = frames.dim();
    let data: Vec<f32> = frames.iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
    Ok(Tensor::from_vec(data, (t, h, w, c), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}

/// Flow `[T, H, W, 2]` as a tensor of the model dtype.
pub fn flow_to_tensor(
    flow: &ndarray::ArrayView4<f32>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (t, h, w, c) = flow.dim();
    let data: Vec<f32> = flow.iter().copied().collect();
    Ok(Tensor::from_vec(data, (t, h, w, c), device)?.to_dtype(dtype)?)
}

/// Mean over the slot axis of attention rows; used to check normalization.
pub fn attention_slot_sums(attention: &Tensor) -> Result<Tensor> {
    Ok(attention.sum(D::Minus2)?)
}
