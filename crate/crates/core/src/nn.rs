//! Layer math: forward and backward kernels for the supported layer set.
//!
//! Every function is a pure, deterministic computation over `DenseTensor`s
//! with a fixed reduction order, so repeated runs are bit-identical. The
//! backward kernels take the layer's stashed input explicitly; where that
//! tensor lives between the passes is the stash module's business.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

// ── Convolution ─────────────────────────────────────────────────────────

/// 2-d convolution hyperparameters (square stride and zero padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dCfg {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::InvalidInput("conv stride must be positive".into()));
        }
        let h_in = h + 2 * self.padding;
        let w_in = w + 2 * self.padding;
        if h_in < self.kernel_h || w_in < self.kernel_w {
            return Err(Error::InvalidInput(format!(
                "conv kernel {}x{} larger than padded input {}x{}",
                self.kernel_h, self.kernel_w, h_in, w_in
            )));
        }
        Ok(((h_in - self.kernel_h) / self.stride + 1, (w_in - self.kernel_w) / self.stride + 1))
    }

    /// Forward multiply-accumulate count for one input of the given size.
    pub fn forward_macs(&self, h: usize, w: usize, batch: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((batch * self.out_channels * oh * ow * self.in_channels * self.kernel_h * self.kernel_w)
            as u64)
    }
}

fn check_conv_shapes<F: Float>(
    input: &DenseTensor<F>,
    weight: &DenseTensor<F>,
    cfg: &Conv2dCfg,
) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    if dims[1] != cfg.in_channels {
        return Err(Error::InvalidInput(format!(
            "conv expects {} input channels, got {}",
            cfg.in_channels, dims[1]
        )));
    }
    let expected = [cfg.out_channels, cfg.in_channels, cfg.kernel_h, cfg.kernel_w];
    if weight.shape() != expected {
        return Err(Error::InvalidInput(format!(
            "conv weight shape {:?} does not match configuration {:?}",
            weight.shape(),
            expected
        )));
    }
    Ok(dims)
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<F: Float>(
    input: &DenseTensor<F>,
    weight: &DenseTensor<F>,
    bias: &DenseTensor<F>,
    cfg: &Conv2dCfg,
) -> Result<DenseTensor<F>> {
    let [b, c_in, h, w] = check_conv_shapes(input, weight, cfg)?;
    if bias.shape() != [cfg.out_channels] {
        return Err(Error::InvalidInput("conv bias shape mismatch".into()));
    }
    let (oh, ow) = cfg.output_hw(h, w)?;
    let (kh, kw, s, p) = (cfg.kernel_h, cfg.kernel_w, cfg.stride, cfg.padding);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![F::zero(); b * cfg.out_channels * oh * ow];
    for bi in 0..b {
        for oc in 0..cfg.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((bi * c_in + ic) * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                acc = acc + x[xi] * wt[wi];
                            }
                        }
                    }
                    out[((bi * cfg.out_channels + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    DenseTensor::new(vec![b, cfg.out_channels, oh, ow], out)
}

/// Gradients of the convolution with respect to weight, bias, and input.
pub fn conv2d_backward<F: Float>(
    input: &DenseTensor<F>,
    weight: &DenseTensor<F>,
    cfg: &Conv2dCfg,
    grad_out: &DenseTensor<F>,
) -> Result<(DenseTensor<F>, DenseTensor<F>, DenseTensor<F>)> {
    let [b, c_in, h, w] = check_conv_shapes(input, weight, cfg)?;
    let (oh, ow) = cfg.output_hw(h, w)?;
    if grad_out.shape() != [b, cfg.out_channels, oh, ow] {
        return Err(Error::InvalidInput("conv grad_out shape mismatch".into()));
    }
    let (kh, kw, s, p) = (cfg.kernel_h, cfg.kernel_w, cfg.stride, cfg.padding);
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gw = vec![F::zero(); wt.len()];
    let mut gb = vec![F::zero(); cfg.out_channels];
    let mut gx = vec![F::zero(); x.len()];
    for bi in 0..b {
        for oc in 0..cfg.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[((bi * cfg.out_channels + oc) * oh + oy) * ow + ox];
                    gb[oc] = gb[oc] + go;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((bi * c_in + ic) * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                gw[wi] = gw[wi] + go * x[xi];
                                gx[xi] = gx[xi] + go * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        DenseTensor::new(weight.shape().to_vec(), gw)?,
        DenseTensor::new(vec![cfg.out_channels], gb)?,
        DenseTensor::new(input.shape().to_vec(), gx)?,
    ))
}

// ── ReLU ────────────────────────────────────────────────────────────────

/// `max(0, x)` element-wise.
pub fn relu_forward<F: Float>(input: &DenseTensor<F>) -> DenseTensor<F> {
    input.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Pass gradient through where the stashed input was strictly positive.
pub fn relu_backward<F: Float>(
    input: &DenseTensor<F>,
    grad_out: &DenseTensor<F>,
) -> Result<DenseTensor<F>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::InvalidInput("relu grad_out shape mismatch".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > F::zero() { g } else { F::zero() })
        .collect();
    DenseTensor::new(input.shape().to_vec(), data)
}

// ── Max pooling ─────────────────────────────────────────────────────────

/// Square max-pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2dCfg {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool2dCfg {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidInput("pool kernel and stride must be positive".into()));
        }
        if h < self.kernel || w < self.kernel {
            return Err(Error::InvalidInput(format!(
                "pool kernel {} larger than input {}x{}",
                self.kernel, h, w
            )));
        }
        Ok(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }
}

/// Window-wise maximum.
pub fn maxpool2d_forward<F: Float>(
    input: &DenseTensor<F>,
    cfg: &MaxPool2dCfg,
) -> Result<DenseTensor<F>> {
    let [b, c, h, w] = input.dims4()?;
    let (oh, ow) = cfg.output_hw(h, w)?;
    let x = input.data();
    let mut out = vec![F::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = F::neg_infinity();
                for ky in 0..cfg.kernel {
                    for kx in 0..cfg.kernel {
                        let v = x[base + (oy * cfg.stride + ky) * w + (ox * cfg.stride + kx)];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(bc * oh + oy) * ow + ox] = best;
            }
        }
    }
    DenseTensor::new(vec![b, c, oh, ow], out)
}

/// Route each output gradient to the argmax recomputed from the stashed
/// input; ties break toward the lowest flat index.
pub fn maxpool2d_backward<F: Float>(
    input: &DenseTensor<F>,
    cfg: &MaxPool2dCfg,
    grad_out: &DenseTensor<F>,
) -> Result<DenseTensor<F>> {
    let [b, c, h, w] = input.dims4()?;
    let (oh, ow) = cfg.output_hw(h, w)?;
    if grad_out.shape() != [b, c, oh, ow] {
        return Err(Error::InvalidInput("pool grad_out shape mismatch".into()));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![F::zero(); x.len()];
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = F::neg_infinity();
                let mut best_idx = 0;
                for ky in 0..cfg.kernel {
                    for kx in 0..cfg.kernel {
                        let idx = base + (oy * cfg.stride + ky) * w + (ox * cfg.stride + kx);
                        // Strict comparison keeps the first (lowest) index on ties.
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                gx[best_idx] = gx[best_idx] + g[(bc * oh + oy) * ow + ox];
            }
        }
    }
    DenseTensor::new(input.shape().to_vec(), gx)
}

// ── Batch normalization ─────────────────────────────────────────────────

/// Per-channel batch normalization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNorm2dCfg {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    /// Force outputs (and input gradients) to zero wherever the input was
    /// exactly zero, propagating sparsity through the layer.
    pub double_mask: bool,
}

/// Batch statistics captured during a training forward pass; the backward
/// pass reuses them instead of re-reducing.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased variance (divide by N).
    pub var: Vec<F>,
}

/// Per-channel mean and biased variance over `(batch, height, width)`.
pub fn batchnorm2d_batch_stats<F: Float>(
    input: &DenseTensor<F>,
    channels: usize,
) -> Result<BatchStats<F>> {
    let [b, c, h, w] = input.dims4()?;
    if c != channels {
        return Err(Error::InvalidInput(format!("batchnorm expects {channels} channels, got {c}")));
    }
    let x = input.data();
    let nf = F::from(b * h * w).unwrap();
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for ci in 0..c {
        let mut sum = F::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in 0..h * w {
                sum = sum + x[base + i];
            }
        }
        let mu = sum / nf;
        let mut sq = F::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in 0..h * w {
                let d = x[base + i] - mu;
                sq = sq + d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = sq / nf;
    }
    Ok(BatchStats { mean, var })
}

/// Normalize with batch statistics (training) or running statistics (eval).
///
/// Returns the captured batch statistics in training mode.
pub fn batchnorm2d_forward<F: Float>(
    input: &DenseTensor<F>,
    gamma: &DenseTensor<F>,
    beta: &DenseTensor<F>,
    running: (&[F], &[F]),
    cfg: &BatchNorm2dCfg,
    training: bool,
) -> Result<(DenseTensor<F>, Option<BatchStats<F>>)> {
    let [b, c, h, w] = input.dims4()?;
    if c != cfg.channels {
        return Err(Error::InvalidInput(format!(
            "batchnorm expects {} channels, got {c}",
            cfg.channels
        )));
    }
    if training && b < 2 {
        return Err(Error::InvalidInput(format!(
            "batchnorm training requires batch size >= 2, got {b}"
        )));
    }
    let x = input.data();
    let eps = F::from(cfg.eps).unwrap();

    let (mean, var) = if training {
        let stats = batchnorm2d_batch_stats(input, cfg.channels)?;
        (stats.mean, stats.var)
    } else {
        (running.0.to_vec(), running.1.to_vec())
    };

    let mut out = vec![F::zero(); x.len()];
    for ci in 0..c {
        let inv_std = F::one() / (var[ci] + eps).sqrt();
        let (g, bt) = (gamma.data()[ci], beta.data()[ci]);
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in 0..h * w {
                let xv = x[base + i];
                let y = g * (xv - mean[ci]) * inv_std + bt;
                out[base + i] = if cfg.double_mask && xv == F::zero() { F::zero() } else { y };
            }
        }
    }
    let out = DenseTensor::new(input.shape().to_vec(), out)?;
    Ok((out, training.then_some(BatchStats { mean, var })))
}

/// Backward through training-mode batch normalization, reusing the stats
/// captured in the forward pass.
pub fn batchnorm2d_backward<F: Float>(
    input: &DenseTensor<F>,
    gamma: &DenseTensor<F>,
    stats: &BatchStats<F>,
    cfg: &BatchNorm2dCfg,
    grad_out: &DenseTensor<F>,
) -> Result<(DenseTensor<F>, DenseTensor<F>, DenseTensor<F>)> {
    let [b, c, h, w] = input.dims4()?;
    if grad_out.shape() != input.shape() {
        return Err(Error::InvalidInput("batchnorm grad_out shape mismatch".into()));
    }
    let x = input.data();
    let g = grad_out.data();
    let nf = F::from(b * h * w).unwrap();
    let eps = F::from(cfg.eps).unwrap();
    let mut grad_gamma = vec![F::zero(); c];
    let mut grad_beta = vec![F::zero(); c];
    let mut gx = vec![F::zero(); x.len()];
    for ci in 0..c {
        let inv_std = F::one() / (stats.var[ci] + eps).sqrt();
        let mu = stats.mean[ci];
        // The mask participates in the forward output, so a masked position
        // contributes no gradient to any parameter.
        let masked = |xv: F, gv: F| {
            if cfg.double_mask && xv == F::zero() {
                F::zero()
            } else {
                gv
            }
        };
        let mut sum_g = F::zero();
        let mut sum_g_xhat = F::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in 0..h * w {
                let gv = masked(x[base + i], g[base + i]);
                let xhat = (x[base + i] - mu) * inv_std;
                sum_g = sum_g + gv;
                sum_g_xhat = sum_g_xhat + gv * xhat;
            }
        }
        grad_beta[ci] = sum_g;
        grad_gamma[ci] = sum_g_xhat;
        let scale = gamma.data()[ci] * inv_std;
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in 0..h * w {
                let xv = x[base + i];
                let gv = masked(xv, g[base + i]);
                let xhat = (xv - mu) * inv_std;
                let v = scale * (gv - sum_g / nf - xhat * (sum_g_xhat / nf));
                gx[base + i] = if cfg.double_mask && xv == F::zero() { F::zero() } else { v };
            }
        }
    }
    Ok((
        DenseTensor::new(vec![c], grad_gamma)?,
        DenseTensor::new(vec![c], grad_beta)?,
        DenseTensor::new(input.shape().to_vec(), gx)?,
    ))
}

// ── Linear ──────────────────────────────────────────────────────────────

/// `y = x W^T + b`; trailing input dimensions are flattened into features.
pub fn linear_forward<F: Float>(
    input: &DenseTensor<F>,
    weight: &DenseTensor<F>,
    bias: &DenseTensor<F>,
) -> Result<DenseTensor<F>> {
    let [b, in_f] = input.dims2_flat()?;
    let &[out_f, w_in] = weight.shape() else {
        return Err(Error::InvalidInput("linear weight must be 2-d".into()));
    };
    if w_in != in_f {
        return Err(Error::InvalidInput(format!(
            "linear expects {w_in} input features, got {in_f}"
        )));
    }
    if bias.shape() != [out_f] {
        return Err(Error::InvalidInput("linear bias shape mismatch".into()));
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![F::zero(); b * out_f];
    for bi in 0..b {
        for o in 0..out_f {
            let mut acc = bias.data()[o];
            for i in 0..in_f {
                acc = acc + x[bi * in_f + i] * wt[o * in_f + i];
            }
            out[bi * out_f + o] = acc;
        }
    }
    DenseTensor::new(vec![b, out_f], out)
}

/// Gradients of the linear layer; the input gradient is reshaped back to the
/// stashed input's original shape.
pub fn linear_backward<F: Float>(
    input: &DenseTensor<F>,
    weight: &DenseTensor<F>,
    grad_out: &DenseTensor<F>,
) -> Result<(DenseTensor<F>, DenseTensor<F>, DenseTensor<F>)> {
    let [b, in_f] = input.dims2_flat()?;
    let &[out_f, _] = weight.shape() else {
        return Err(Error::InvalidInput("linear weight must be 2-d".into()));
    };
    if grad_out.shape() != [b, out_f] {
        return Err(Error::InvalidInput("linear grad_out shape mismatch".into()));
    }
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gw = vec![F::zero(); out_f * in_f];
    let mut gb = vec![F::zero(); out_f];
    let mut gx = vec![F::zero(); x.len()];
    for bi in 0..b {
        for o in 0..out_f {
            let go = g[bi * out_f + o];
            gb[o] = gb[o] + go;
            for i in 0..in_f {
                gw[o * in_f + i] = gw[o * in_f + i] + go * x[bi * in_f + i];
                gx[bi * in_f + i] = gx[bi * in_f + i] + go * wt[o * in_f + i];
            }
        }
    }
    Ok((
        DenseTensor::new(weight.shape().to_vec(), gw)?,
        DenseTensor::new(vec![out_f], gb)?,
        DenseTensor::new(input.shape().to_vec(), gx)?,
    ))
}

// ── Loss and optimizer ──────────────────────────────────────────────────

/// Numerically stabilized softmax cross-entropy, averaged over the batch.
///
/// Returns the scalar loss and the gradient with respect to the logits
/// (`softmax - one_hot`, divided by the batch size).
pub fn softmax_cross_entropy<F: Float>(
    logits: &DenseTensor<F>,
    labels: &[usize],
) -> Result<(F, DenseTensor<F>)> {
    let &[b, k] = logits.shape() else {
        return Err(Error::InvalidInput("logits must be [batch, classes]".into()));
    };
    if labels.len() != b {
        return Err(Error::InvalidInput(format!(
            "expected {b} labels, got {}",
            labels.len()
        )));
    }
    let z = logits.data();
    let bf = F::from(b).unwrap();
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); z.len()];
    for bi in 0..b {
        let label = labels[bi];
        if label >= k {
            return Err(Error::InvalidInput(format!("label {label} out of range for {k} classes")));
        }
        let row = &z[bi * k..(bi + 1) * k];
        let max = row.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = F::zero();
        for &v in row {
            sum = sum + (v - max).exp();
        }
        loss = loss + sum.ln() - (row[label] - max);
        for (j, &v) in row.iter().enumerate() {
            let softmax = (v - max).exp() / sum;
            let onehot = if j == label { F::one() } else { F::zero() };
            grad[bi * k + j] = (softmax - onehot) / bf;
        }
    }
    Ok((loss / bf, DenseTensor::new(vec![b, k], grad)?))
}

/// Plain SGD update: `p <- p - lr * g`.
pub fn sgd_step<F: Float>(param: &mut DenseTensor<F>, grad: &DenseTensor<F>, lr: F) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::InvalidInput("sgd shapes differ".into()));
    }
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p = *p - lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> DenseTensor<f64> {
        DenseTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let cfg = Conv2dCfg {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
        };
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_forward(&x, &w, &b, &cfg).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_ones_kernel_sums_windows() {
        let cfg = Conv2dCfg {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: 0,
        };
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let w = t(&[1, 1, 2, 2], &[1.0; 4]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_forward(&x, &w, &b, &cfg).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_shape_arithmetic_with_stride_and_padding() {
        let cfg = Conv2dCfg {
            in_channels: 3,
            out_channels: 64,
            kernel_h: 7,
            kernel_w: 7,
            stride: 2,
            padding: 3,
        };
        assert_eq!(cfg.output_hw(224, 224).unwrap(), (112, 112));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let cfg = Conv2dCfg {
            in_channels: 2,
            out_channels: 1,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
        };
        let x = t(&[1, 1, 2, 2], &[0.0; 4]);
        let w = t(&[1, 2, 1, 1], &[0.0; 2]);
        let b = t(&[1], &[0.0]);
        assert!(conv2d_forward(&x, &w, &b, &cfg).is_err());
    }

    #[test]
    fn relu_basics() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pool_max_and_tie_break() {
        let cfg = MaxPool2dCfg { kernel: 2, stride: 2 };
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2d_forward(&x, &cfg).unwrap().data(), &[4.0]);

        // Tied maxima route the gradient to the lowest flat index only.
        let tie = t(&[1, 1, 2, 2], &[5.0, 5.0, 0.0, 0.0]);
        let g = maxpool2d_backward(&tie, &cfg, &t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_rejects_kernel_larger_than_input() {
        let cfg = MaxPool2dCfg { kernel: 3, stride: 1 };
        let x = t(&[1, 1, 2, 2], &[0.0; 4]);
        assert!(maxpool2d_forward(&x, &cfg).is_err());
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        let cfg = BatchNorm2dCfg { channels: 1, eps: 1e-5, momentum: 0.1, double_mask: false };
        // Zero mean, unit (biased) variance across the batch.
        let x = t(&[2, 1, 1, 2], &[-1.0, 1.0, 1.0, -1.0]);
        let gamma = t(&[1], &[1.0]);
        let beta = t(&[1], &[0.0]);
        let (y, stats) =
            batchnorm2d_forward(&x, &gamma, &beta, (&[0.0], &[1.0]), &cfg, true).unwrap();
        let stats = stats.unwrap();
        assert!(stats.mean[0].abs() < 1e-12);
        assert!((stats.var[0] - 1.0).abs() < 1e-12);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_rejects_batch_of_one_in_training() {
        let cfg = BatchNorm2dCfg { channels: 1, eps: 1e-5, momentum: 0.1, double_mask: false };
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let g = t(&[1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let r = batchnorm2d_forward(&x, &g, &b, (&[0.0], &[1.0]), &cfg, true);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        // Eval mode has no such restriction.
        assert!(batchnorm2d_forward(&x, &g, &b, (&[0.0], &[1.0]), &cfg, false).is_ok());
    }

    #[test]
    fn double_mask_preserves_zeros_in_output_and_gradient() {
        let cfg = BatchNorm2dCfg { channels: 1, eps: 1e-5, momentum: 0.1, double_mask: true };
        let x = t(&[2, 1, 1, 2], &[0.0, 2.0, 3.0, 0.0]);
        let gamma = t(&[1], &[1.0]);
        let beta = t(&[1], &[0.5]); // nonzero shift would otherwise fill zeros
        let (y, stats) =
            batchnorm2d_forward(&x, &gamma, &beta, (&[0.0], &[1.0]), &cfg, true).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[3], 0.0);
        assert!(y.data()[1] != 0.0 && y.data()[2] != 0.0);

        let go = t(&[2, 1, 1, 2], &[1.0, 1.0, 1.0, 1.0]);
        let (_, _, gx) = batchnorm2d_backward(&x, &gamma, &stats.unwrap(), &cfg, &go).unwrap();
        assert_eq!(gx.data()[0], 0.0);
        assert_eq!(gx.data()[3], 0.0);
    }

    #[test]
    fn linear_identity_and_hand_matmul() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero_b = t(&[2], &[0.0, 0.0]);
        assert_eq!(linear_forward(&x, &eye, &zero_b).unwrap().data(), &[1.0, 2.0]);

        let w = t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(linear_forward(&x, &w, &zero_b).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn linear_flattens_trailing_dims() {
        let x = t(&[2, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let w = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1], &[0.0]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let (_, _, gx) = linear_backward(&x, &w, &t(&[2, 1], &[1.0, 1.0])).unwrap();
        assert_eq!(gx.shape(), x.shape());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        for k in [2usize, 4, 10] {
            let logits = DenseTensor::new(vec![1, k], vec![0.3f64; k]).unwrap();
            let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn cross_entropy_confident_correct_logit() {
        let logits = t(&[1, 3], &[30.0, 0.0, 0.0]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-9);
        assert!(grad.data()[0].abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_grad_sums_to_zero_per_row() {
        let logits = t(&[2, 3], &[0.5, -1.0, 2.0, 1.0, 1.0, -0.5]);
        let (_, grad) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        for bi in 0..2 {
            let s: f64 = grad.data()[bi * 3..(bi + 1) * 3].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_basics() {
        let mut p = t(&[1], &[1.0]);
        sgd_step(&mut p, &t(&[1], &[2.0]), 0.0).unwrap();
        assert_eq!(p.data(), &[1.0]);
        sgd_step(&mut p, &t(&[1], &[2.0]), 0.5).unwrap();
        assert_eq!(p.data(), &[0.0]);
    }
}
