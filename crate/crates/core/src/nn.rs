//! Small neural-network building blocks shared by the backbone and the
//! prediction models. Everything is composed from primitive tensor ops so
//! gradients flow in both f32 and f64.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder};

use crate::error::Result;

pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    Ok(candle_nn::linear(in_dim, out_dim, vb)?)
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Two-layer perceptron with a ReLU hidden layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(in_dim, hidden, vb.pp("fc1"))?,
            fc2: linear(hidden, out_dim, vb.pp("fc2"))?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// Softmax composed from differentiable primitives.
pub fn softmax(x: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(dim)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::param(
                "heads",
                format!("must divide the model width {dim}"),
            ));
        }
        Ok(Self {
            q: linear(dim, dim, vb.pp("q"))?,
            k: linear(dim, dim, vb.pp("k"))?,
            v: linear(dim, dim, vb.pp("v"))?,
            out: linear(dim, dim, vb.pp("out"))?,
            heads,
        })
    }

    /// `x`: `[B, L, E]`.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, l, e) = x.dims3()?;
        let dh = e / self.heads;
        let split = |t: Tensor| -> candle_core::Result<Tensor> {
            t.reshape((b, l, self.heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax(&scores, 3)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, e))?;
        self.out.forward(&ctx)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
}

impl TransformerLayer {
    pub fn new(dim: usize, heads: usize, ffn_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            attn: MultiHeadAttention::new(dim, heads, vb.pp("attn"))?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            ffn: Mlp::new(dim, ffn_dim, dim, vb.pp("ffn"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        &x + self.ffn.forward(&self.norm2.forward(&x)?)?
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        num_layers: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| TransformerLayer::new(dim, heads, ffn_dim, vb.pp(format!("layer{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(dim, vb.pp("norm"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        self.norm.forward(&x)
    }
}

/// Gated recurrent cell: `h' = (1 - z) * n + z * h`.
#[derive(Debug, Clone)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    dim: usize,
}

impl GruCell {
    pub fn new(in_dim: usize, dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            input: linear(in_dim, 3 * dim, vb.pp("input"))?,
            hidden: linear(dim, 3 * dim, vb.pp("hidden"))?,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor, h: &Tensor) -> candle_core::Result<Tensor> {
        let gi = self.input.forward(x)?;
        let gh = self.hidden.forward(h)?;
        let d = self.dim;
        let r = (gi.narrow(D::Minus1, 0, d)? + gh.narrow(D::Minus1, 0, d)?)?;
        let r = candle_nn::ops::sigmoid(&r)?;
        let z = (gi.narrow(D::Minus1, d, d)? + gh.narrow(D::Minus1, d, d)?)?;
        let z = candle_nn::ops::sigmoid(&z)?;
        let n = (gi.narrow(D::Minus1, 2 * d, d)? + (r * gh.narrow(D::Minus1, 2 * d, d)?)?)?.tanh()?;
        let one_minus_z = z.affine(-1.0, 1.0)?;
        (one_minus_z * n)? + (z * h)?
    }
}

/// Sinusoidal position encodings, `[len, dim]`.
pub fn sinusoidal_encoding(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), device)?.to_dtype(dtype)?)
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(crate::Error::ShapeMismatch {
            field: "mse".into(),
            detail: format!("{:?} vs {:?}", a.dims(), b.dims()),
        });
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}


/// Identity in the forward pass. In the backward pass the incoming gradient
/// is rescaled to at most `max_norm` (L2 over the whole tensor); a
/// non-finite gradient is replaced by zeros.
#[derive(Debug, Clone, Copy)]
pub struct GradNormCap {
    pub max_norm: f64,
}

impl candle_core::CustomOp1 for GradNormCap {
    fn name(&self) -> &'static str {
        "grad-norm-cap"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("grad-norm-cap needs a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            _ => return Err(candle_core::Error::Msg("grad-norm-cap supports f32 and f64".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let norm = grad_res
            .to_dtype(DType::F64)?
            .sqr()?
            .sum_all()?
            .to_scalar::<f64>()?
            .sqrt();
        if !norm.is_finite() {
            return Ok(Some(grad_res.zeros_like()?));
        }
        if norm <= self.max_norm {
            return Ok(Some(grad_res.clone()));
        }
        Ok(Some((grad_res * (self.max_norm / norm))?))
    }
}

/// Applies [`GradNormCap`] to `x`.
pub fn cap_grad_norm(x: &Tensor, max_norm: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GradNormCap { max_norm })?)
}
