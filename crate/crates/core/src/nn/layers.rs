use candle_core::{Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, Scope};
use super::softmax_last;
use crate::error::{shape, Result};

pub fn elu(x: &Tensor) -> Result<Tensor> {
    Ok(x.elu(1.0)?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // tanh form keeps the op inside candle's differentiable set
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope<'_>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = s.param("w", &[d_out, d_in], Init::Uniform(bound))?;
        let bias = if bias {
            Some(s.param("b", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Plain matrix map `x ↦ W x` with the given init.
    pub fn with_init(s: &mut Scope<'_>, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        let weight = s.param("w", &[d_out, d_in], init)?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// 1-d convolution with weight normalisation and explicit (possibly asymmetric) zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    v: Tensor,
    g: Tensor,
    bias: Tensor,
    stride: usize,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s: &mut Scope<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let v = s.param("v", &[c_out, c_in, kernel], Init::Uniform(bound))?;
        // ‖v‖ of a uniform row is ≈ sqrt(1/3), so this keeps the effective init scale
        let g = s.param("g", &[c_out, 1, 1], Init::Const((1.0f64 / 3.0).sqrt()))?;
        let bias = s.param("b", &[c_out], Init::Zeros)?;
        Ok(Self {
            v,
            g,
            bias,
            stride,
            dilation,
            pad_left,
            pad_right,
        })
    }

    /// "Same"-length convolution for odd kernels.
    pub fn same(s: &mut Scope<'_>, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::new(s, c_in, c_out, kernel, 1, 1, kernel / 2, kernel / 2)
    }

    pub fn weight(&self) -> Result<Tensor> {
        let norm = self.v.sqr()?.sum_keepdim(2)?.sum_keepdim(1)?.sqrt()?;
        Ok(self.v.broadcast_mul(&self.g.broadcast_div(&norm)?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.v.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.pad_left + self.pad_right > 0 {
            x.pad_with_zeros(D::Minus1, self.pad_left, self.pad_right)?
        } else {
            x.clone()
        };
        let y = x.conv1d(&self.weight()?, 0, self.stride, self.dilation, 1)?;
        let c = self.out_channels();
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1))?)?)
    }
}

/// Transposed convolution with kernel `2·stride`, written as a 2-tap convolution
/// producing `stride` phases per output channel followed by an interleave.
///
/// Output sample `m·stride + r` depends on input frames `m-1` and `m`, which is
/// exactly the support of a transposed convolution with kernel `2·stride` after
/// trimming the trailing `stride` samples.
#[derive(Debug, Clone)]
pub struct PolyphaseUpsample {
    conv: Conv1d,
    c_out: usize,
    stride: usize,
}

impl PolyphaseUpsample {
    pub fn new(s: &mut Scope<'_>, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let conv = Conv1d::new(s, c_in, c_out * stride, 2, 1, 1, 1, 0)?;
        Ok(Self {
            conv,
            c_out,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, t) = x.dims3()?;
        let y = self.conv.forward(x)?;
        Ok(y.reshape((b, self.c_out, self.stride, t))?
            .transpose(2, 3)?
            .reshape((b, self.c_out, t * self.stride))?)
    }
}

/// Single-direction LSTM over `(B, T, I)` inputs.
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
    reverse: bool,
}

impl Lstm {
    pub fn new(s: &mut Scope<'_>, d_in: usize, hidden: usize, reverse: bool) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: s.param("w_ih", &[4 * hidden, d_in], Init::Uniform(bound))?,
            w_hh: s.param("w_hh", &[4 * hidden, hidden], Init::Uniform(bound))?,
            bias: s.param("b", &[4 * hidden], Init::Zeros)?,
            hidden,
            reverse,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t_len, _) = x.dims3()?;
        let h_dim = self.hidden;
        let xi = x.broadcast_matmul(&self.w_ih.t()?)?.broadcast_add(&self.bias)?;
        let w_hh_t = self.w_hh.t()?;
        let mut h = Tensor::zeros((b, h_dim), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outs: Vec<Option<Tensor>> = vec![None; t_len];
        let order: Vec<usize> = if self.reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let gates = (xi.narrow(1, t, 1)?.squeeze(1)? + h.matmul(&w_hh_t)?)?;
            let i = sigmoid(&gates.narrow(1, 0, h_dim)?)?;
            let f = sigmoid(&gates.narrow(1, h_dim, h_dim)?)?;
            let g = gates.narrow(1, 2 * h_dim, h_dim)?.tanh()?;
            let o = sigmoid(&gates.narrow(1, 3 * h_dim, h_dim)?)?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            outs[t] = Some(h.clone());
        }
        let outs: Vec<Tensor> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        Ok(Tensor::stack(&outs, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct BiLstm {
    fwd: Lstm,
    bwd: Lstm,
}

impl BiLstm {
    /// Output width is `2·hidden`.
    pub fn new(s: &mut Scope<'_>, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(&mut s.pp("fwd"), d_in, hidden, false)?,
            bwd: Lstm::new(&mut s.pp("bwd"), d_in, hidden, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::cat(&[self.fwd.forward(x)?, self.bwd.forward(x)?], D::Minus1)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("gamma", &[dim], Init::Ones)?,
            beta: s.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head scaled dot-product attention without learned projections.
///
/// `q: (B, Tq, Dk)`, `k: (B, Tk, Dk)`, `v: (B, Tk, Dv)`; both `Dk` and `Dv` must
/// be divisible by `heads`. `mask` is additive and broadcastable to
/// `(B, heads, Tq, Tk)`. Returns the attended values `(B, Tq, Dv)` and the
/// attention weights `(B, heads, Tq, Tk)`.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (b, tq, dk) = q.dims3()?;
    let (_, tk, dv) = v.dims3()?;
    if heads == 0 || dk % heads != 0 || dv % heads != 0 {
        return shape(format!("{heads} heads do not divide attention dims {dk}/{dv}"));
    }
    if k.dims3()? != (b, tk, dk) {
        return shape(format!("key shape {:?} vs query {:?}", k.dims(), q.dims()));
    }
    let (hk, hv) = (dk / heads, dv / heads);
    let split = |x: &Tensor, t: usize, hd: usize| -> Result<Tensor> {
        Ok(x.reshape((b, t, heads, hd))?.transpose(1, 2)?.contiguous()?)
    };
    let qh = split(q, tq, hk)?;
    let kh = split(k, tk, hk)?;
    let vh = split(v, tk, hv)?;
    let mut scores = (qh.matmul(&kh.t()?)? * (1.0 / (hk as f64).sqrt()))?;
    if let Some(m) = mask {
        scores = scores.broadcast_add(m)?;
    }
    let weights = softmax_last(&scores)?;
    let out = weights
        .matmul(&vh)?
        .transpose(1, 2)?
        .reshape((b, tq, dv))?;
    Ok((out, weights))
}

/// Inverted dropout with a caller-owned RNG.
pub(crate) fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Pre-norm transformer block: self-attention followed by a GELU feed-forward.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    ln2: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new(s: &mut Scope<'_>, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return shape(format!("embed dim {dim} not divisible by {heads} heads"));
        }
        Ok(Self {
            ln1: LayerNorm::new(&mut s.pp("ln1"), dim)?,
            ln2: LayerNorm::new(&mut s.pp("ln2"), dim)?,
            wq: Linear::new(&mut s.pp("wq"), dim, dim, true)?,
            wk: Linear::new(&mut s.pp("wk"), dim, dim, true)?,
            wv: Linear::new(&mut s.pp("wv"), dim, dim, true)?,
            wo: Linear::new(&mut s.pp("wo"), dim, dim, true)?,
            ff1: Linear::new(&mut s.pp("ff1"), dim, ffn, true)?,
            ff2: Linear::new(&mut s.pp("ff2"), ffn, dim, true)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mask: Option<&Tensor>,
        mut drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let (a, _) = attention(
            &self.wq.forward(&h)?,
            &self.wk.forward(&h)?,
            &self.wv.forward(&h)?,
            self.heads,
            mask,
        )?;
        let mut a = self.wo.forward(&a)?;
        if let Some((p, rng)) = drop.as_mut() {
            a = dropout(&a, *p, rng)?;
        }
        let x = (x + a)?;
        let h = self.ln2.forward(&x)?;
        let mut f = self.ff2.forward(&self.ff1.forward(&h)?.gelu()?)?;
        if let Some((p, rng)) = drop.as_mut() {
            f = dropout(&f, *p, rng)?;
        }
        Ok((x + f)?)
    }
}
