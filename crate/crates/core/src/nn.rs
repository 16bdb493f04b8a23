//! Layer kernels: forward passes and their adjoints.
//!
//! All spatial tensors are `[n, h, w, c]`. Padding is always "valid": windows
//! that would run past the border are dropped. Convolutions are
//! cross-correlations (no kernel flip).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Projection applied to a parameter after each optimizer update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    #[default]
    None,
    NonNegative,
}

impl Constraint {
    /// Clamp in place. Returns the number of entries that were changed.
    pub fn project<T: Scalar>(self, t: &mut Tensor<T>) -> usize {
        match self {
            Constraint::None => 0,
            Constraint::NonNegative => {
                let mut changed = 0;
                for v in t.data_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                        changed += 1;
                    }
                }
                changed
            }
        }
    }
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    /// `[kh, kw, c_in, c_out]`
    pub kernel: Tensor<T>,
    /// `[c_out]`
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn weight_count(&self) -> usize {
        self.kernel.len()
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv2dParams<T> {
    /// `[kh, kw, c]`: one spatial kernel per channel.
    pub kernel: Tensor<T>,
    /// `[c]`
    pub bias: Option<Tensor<T>>,
    pub constraint: Constraint,
}

impl<T: Scalar> DepthwiseConv2dParams<T> {
    pub fn weight_count(&self) -> usize {
        self.kernel.len()
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

fn nhwc(x: &Tensor<impl Scalar>, op: &str) -> Result<[usize; 4]> {
    match *x.dims() {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::shape(format!("{op} expects [n, h, w, c], got {}", x.shape()))),
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize, op: &str) -> Result<()> {
    match bias {
        Some(b) if b.dims() != [channels] => Err(Error::shape(format!(
            "{op} bias has shape {}, expected [{channels}]",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

/// Output side of a valid-padding window sweep.
pub fn valid_out(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel >= 1 && stride >= 1 && kernel <= input).then(|| (input - kernel) / stride + 1)
}

// ---------------------------------------------------------------------------
// conv2d

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let [n, h, w, cin] = nhwc(x, "conv2d")?;
    let &[kh, kw, kcin, cout] = kernel.dims() else {
        return Err(Error::shape(format!(
            "conv2d kernel must be [kh, kw, c_in, c_out], got {}",
            kernel.shape()
        )));
    };
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    check_bias(bias, cout, "conv2d")?;
    let (Some(oh), Some(ow)) = (valid_out(h, kh, stride), valid_out(w, kw, stride)) else {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} (stride {stride}) does not fit input {h}x{w}"
        )));
    };
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); n * oh * ow * cout];
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let o0 = ((b * oh + oi) * ow + oj) * cout;
                let row = &mut out[o0..o0 + cout];
                if let Some(bias) = bias {
                    row.copy_from_slice(bias.data());
                }
                for ki in 0..kh {
                    for kj in 0..kw {
                        let x0 = ((b * h + oi * stride + ki) * w + oj * stride + kj) * cin;
                        for ci in 0..cin {
                            let xv = xd[x0 + ci];
                            let k0 = ((ki * kw + kj) * cin + ci) * cout;
                            for (o, &kv) in row.iter_mut().zip(&kd[k0..k0 + cout]) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, oh, ow, cout], out)?.ensure_finite("conv2d")
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, h, w, cin] = nhwc(x, "conv2d")?;
    let &[kh, kw, _, cout] = kernel.dims() else {
        return Err(Error::shape("conv2d kernel rank"));
    };
    let [_, oh, ow, _] = nhwc(dy, "conv2d grad")?;
    let xd = x.data();
    let kd = kernel.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); cout];
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let o0 = ((b * oh + oi) * ow + oj) * cout;
                let g = &gd[o0..o0 + cout];
                for (acc, &gv) in db.iter_mut().zip(g) {
                    *acc += gv;
                }
                for ki in 0..kh {
                    for kj in 0..kw {
                        let x0 = ((b * h + oi * stride + ki) * w + oj * stride + kj) * cin;
                        for ci in 0..cin {
                            let k0 = ((ki * kw + kj) * cin + ci) * cout;
                            let xv = xd[x0 + ci];
                            let mut acc = T::zero();
                            for o in 0..cout {
                                acc += g[o] * kd[k0 + o];
                                dk[k0 + o] += xv * g[o];
                            }
                            dx[x0 + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), dx)?,
        Tensor::new(kernel.dims().to_vec(), dk)?,
        Tensor::new([cout], db)?,
    ))
}

// ---------------------------------------------------------------------------
// depthwise conv2d (stride 1)

pub fn depthwise_conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = nhwc(x, "depthwise_conv2d")?;
    let &[kh, kw, kc] = kernel.dims() else {
        return Err(Error::shape(format!(
            "depthwise kernel must be [kh, kw, c], got {}",
            kernel.shape()
        )));
    };
    if kc != c {
        return Err(Error::shape(format!(
            "depthwise kernel has {kc} channels, input has {c}"
        )));
    }
    check_bias(bias, c, "depthwise_conv2d")?;
    let (Some(oh), Some(ow)) = (valid_out(h, kh, 1), valid_out(w, kw, 1)) else {
        return Err(Error::shape(format!(
            "depthwise kernel {kh}x{kw} does not fit input {h}x{w}"
        )));
    };
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let o0 = ((b * oh + oi) * ow + oj) * c;
                let row = &mut out[o0..o0 + c];
                if let Some(bias) = bias {
                    row.copy_from_slice(bias.data());
                }
                for ki in 0..kh {
                    for kj in 0..kw {
                        let x0 = ((b * h + oi + ki) * w + oj + kj) * c;
                        let k0 = (ki * kw + kj) * c;
                        for ch in 0..c {
                            row[ch] += xd[x0 + ch] * kd[k0 + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, oh, ow, c], out)?.ensure_finite("depthwise_conv2d")
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, h, w, c] = nhwc(x, "depthwise_conv2d")?;
    let &[kh, kw, _] = kernel.dims() else {
        return Err(Error::shape("depthwise kernel rank"));
    };
    let [_, oh, ow, _] = nhwc(dy, "depthwise grad")?;
    let xd = x.data();
    let kd = kernel.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let o0 = ((b * oh + oi) * ow + oj) * c;
                for ch in 0..c {
                    db[ch] += gd[o0 + ch];
                }
                for ki in 0..kh {
                    for kj in 0..kw {
                        let x0 = ((b * h + oi + ki) * w + oj + kj) * c;
                        let k0 = (ki * kw + kj) * c;
                        for ch in 0..c {
                            let g = gd[o0 + ch];
                            dx[x0 + ch] += g * kd[k0 + ch];
                            dk[k0 + ch] += g * xd[x0 + ch];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), dx)?,
        Tensor::new(kernel.dims().to_vec(), dk)?,
        Tensor::new([c], db)?,
    ))
}

// ---------------------------------------------------------------------------
// pooling

/// Average over disjoint `k`x`k` windows (stride `k`, no padding).
pub fn avg_pool2d_forward<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = nhwc(x, "avg_pool2d")?;
    if k == 0 || k > h || k > w {
        return Err(Error::shape(format!("pool kernel {k} does not fit input {h}x{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let xd = x.data();
    let inv = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let o0 = ((b * oh + oi) * ow + oj) * c;
                for a in 0..k {
                    for e in 0..k {
                        let x0 = ((b * h + oi * k + a) * w + oj * k + e) * c;
                        for ch in 0..c {
                            out[o0 + ch] += xd[x0 + ch];
                        }
                    }
                }
                for v in &mut out[o0..o0 + c] {
                    *v *= inv;
                }
            }
        }
    }
    Tensor::new([n, oh, ow, c], out)
}

pub fn avg_pool2d_backward<T: Scalar>(input_dims: &[usize], k: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, h, w, c] = input_dims else {
        return Err(Error::shape("avg_pool2d input rank"));
    };
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::of((k * k) as f64);
    let gd = dy.data();
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let o0 = ((b * oh + oi) * ow + oj) * c;
                for a in 0..k {
                    for e in 0..k {
                        let x0 = ((b * h + oi * k + a) * w + oj * k + e) * c;
                        for ch in 0..c {
                            dx[x0 + ch] += gd[o0 + ch] * inv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_dims.to_vec(), dx)
}

/// `[n, h, w, c] -> [n, c]`, mean over both spatial axes.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = nhwc(x, "global_avg_pool")?;
    let inv = T::one() / T::of((h * w) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let row = &mut out[b * c..(b + 1) * c];
        for p in 0..h * w {
            let x0 = (b * h * w + p) * c;
            for ch in 0..c {
                row[ch] += xd[x0 + ch];
            }
        }
        for v in row {
            *v *= inv;
        }
    }
    Tensor::new([n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_dims: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, h, w, c] = input_dims else {
        return Err(Error::shape("global_avg_pool input rank"));
    };
    let inv = T::one() / T::of((h * w) as f64);
    let gd = dy.data();
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for p in 0..h * w {
            let x0 = (b * h * w + p) * c;
            for ch in 0..c {
                dx[x0 + ch] = gd[b * c + ch] * inv;
            }
        }
    }
    Tensor::new(input_dims.to_vec(), dx)
}

/// Weighted spatial sum with one `[h, w]` kernel shared by every channel.
pub fn gwap_forward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = nhwc(x, "gwap")?;
    if kernel.dims() != [h, w] {
        return Err(Error::shape(format!(
            "gwap kernel {} does not match feature map {h}x{w}",
            kernel.shape()
        )));
    }
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let row = &mut out[b * c..(b + 1) * c];
        for (p, &kv) in kd.iter().enumerate() {
            let x0 = (b * h * w + p) * c;
            for ch in 0..c {
                row[ch] += kv * xd[x0 + ch];
            }
        }
    }
    Tensor::new([n, c], out)?.ensure_finite("gwap")
}

/// Returns `(d_input, d_kernel)`.
pub fn gwap_backward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, h, w, c] = nhwc(x, "gwap")?;
    let xd = x.data();
    let kd = kernel.data();
    let gd = dy.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); h * w];
    for b in 0..n {
        for p in 0..h * w {
            let x0 = (b * h * w + p) * c;
            for ch in 0..c {
                let g = gd[b * c + ch];
                dx[x0 + ch] = g * kd[p];
                dk[p] += g * xd[x0 + ch];
            }
        }
    }
    Ok((Tensor::new(x.dims().to_vec(), dx)?, Tensor::new([h, w], dk)?))
}

// ---------------------------------------------------------------------------
// dense

/// `x W + b` for `x: [n, d]`, `W: [d, k]`, `b: [k]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let y = x.matmul(weight)?;
    let &[n, k] = y.dims() else { unreachable!() };
    if bias.dims() != [k] {
        return Err(Error::shape(format!(
            "dense bias has shape {}, expected [{k}]",
            bias.shape()
        )));
    }
    let mut data = y.into_data();
    for row in data.chunks_mut(k) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::new([n, k], data)?.ensure_finite("dense")
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dx = dy.matmul(&weight.transpose2()?)?;
    let dw = x.transpose2()?.matmul(dy)?;
    let k = weight.dims()[1];
    let mut db = vec![T::zero(); k];
    for row in dy.data().chunks(k) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok((dx, dw, Tensor::new([k], db)?))
}

// ---------------------------------------------------------------------------
// dropout

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
/// In inference mode, or with `p == 0`, the mask is all ones.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(dims: &[usize], p: f64, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout rate {p} outside [0, 1)")));
    }
    let n: usize = dims.iter().product();
    if mode == Mode::Infer || p == 0.0 {
        return Tensor::full(dims.to_vec(), T::one());
    }
    let keep = T::of(1.0 / (1.0 - p));
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    Tensor::new(dims.to_vec(), data)
}

pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
    let mask = dropout_mask(x.dims(), p, mode, rng)?;
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x.clone());
    }
    x.mul(&mask)
}

// ---------------------------------------------------------------------------
// loss

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, k] = logits.dims() else {
        return Err(Error::shape(format!("softmax expects [n, k], got {}", logits.shape())));
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Tensor::new(logits.dims().to_vec(), out)
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::data(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::data(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let &[n, k] = logits.dims() else {
        return Err(Error::shape(format!(
            "cross entropy expects [n, k] logits, got {}",
            logits.shape()
        )));
    };
    check_labels(labels, n, k)?;
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        // log Σ exp(v - m) = ln(1 + Σ_{j ≠ argmax} exp(v_j - m))
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        let m = row[arg];
        let mut rest = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if j != arg {
                rest += (v - m).exp();
            }
        }
        total += rest.ln_1p() + (m - row[label]);
    }
    let loss = total / T::of(n as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross entropy is {loss}")));
    }
    Ok(loss)
}

/// Gradient of the mean cross entropy with respect to the logits.
pub fn softmax_cross_entropy_backward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let mut p = softmax_rows(logits)?;
    let &[n, k] = logits.dims() else { unreachable!() };
    check_labels(labels, n, k)?;
    let inv_n = T::one() / T::of(n as f64);
    for (row, &label) in p.data_mut().chunks_mut(k).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok(p)
}
