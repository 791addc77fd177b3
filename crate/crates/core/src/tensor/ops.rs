use serde::{Deserialize, Serialize};

use super::{shape_err, Result, Tensor, TensorError};

/// Zero padding applied symmetrically to both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// `(d - 1) / 2` on each side; preserves extent at stride 1 for odd `d`.
    Same,
    Explicit(usize),
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => kernel.saturating_sub(1) / 2,
            Padding::Explicit(p) => p,
        }
    }
}

pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(super) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad: usize,
    pub stride: usize,
}

pub(super) fn conv_geometry(
    op: &'static str,
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    let &[h, w, m] = input.shape() else {
        return shape_err(op, format!("input must be (H, W, M), got {:?}", input.shape()));
    };
    let &[d, d2, fm, n] = filters.shape() else {
        return shape_err(
            op,
            format!("filters must be (d, d, M, N), got {:?}", filters.shape()),
        );
    };
    if d != d2 {
        return shape_err(op, format!("kernel must be square, got {d}x{d2}"));
    }
    if fm != m {
        return shape_err(
            op,
            format!("input has {m} channels but filters expect {fm}"),
        );
    }
    if stride == 0 {
        return Err(TensorError::Invalid("stride must be positive".into()));
    }
    let pad = padding.amount(d);
    let (Some(oh), Some(ow)) = (
        conv_output_extent(h, d, stride, pad),
        conv_output_extent(w, d, stride, pad),
    ) else {
        return shape_err(
            op,
            format!("kernel {d} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        );
    };
    Ok(ConvGeometry {
        h,
        w,
        m,
        d,
        n,
        oh,
        ow,
        pad,
        stride,
    })
}

fn check_bias(op: &'static str, bias: &Tensor, n: usize) -> Result<()> {
    if bias.shape() != [n] {
        return shape_err(op, format!("bias must be [{n}], got {:?}", bias.shape()));
    }
    Ok(())
}

/// Maps an output coordinate and kernel offset to an input coordinate, or
/// `None` when it lands in the zero padding.
#[inline]
fn source_index(out: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (out * stride + k).checked_sub(pad)?;
    (pos < extent).then_some(pos)
}

/// Multi-channel 2-D cross-correlation plus bias.
///
/// Loops are ordered so the innermost loop runs over output filters, which
/// are contiguous in both the filter bank and the output pixel.
pub fn conv2d_forward(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = conv_geometry("conv2d_forward", input, filters, stride, padding)?;
    check_bias("conv2d_forward", bias, g.n)?;
    input.ensure_finite("conv2d_forward")?;
    filters.ensure_finite("conv2d_forward")?;
    bias.ensure_finite("conv2d_forward")?;

    let x = input.data();
    let k = filters.data();
    let b = bias.data();
    let mut out = vec![0.0; g.oh * g.ow * g.n];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let base = (oy * g.ow + ox) * g.n;
            let pixel = &mut out[base..base + g.n];
            pixel.copy_from_slice(b);
            for ky in 0..g.d {
                let Some(iy) = source_index(oy, ky, g.stride, g.pad, g.h) else {
                    continue;
                };
                for kx in 0..g.d {
                    let Some(ix) = source_index(ox, kx, g.stride, g.pad, g.w) else {
                        continue;
                    };
                    let src = &x[(iy * g.w + ix) * g.m..(iy * g.w + ix + 1) * g.m];
                    let wbase = (ky * g.d + kx) * g.m * g.n;
                    for (c, &v) in src.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &k[wbase + c * g.n..wbase + (c + 1) * g.n];
                        for (o, &wv) in pixel.iter_mut().zip(row) {
                            *o += v * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, g.n], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub filters: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    grad_output: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<ConvGrads> {
    let g = conv_geometry("conv2d_backward", input, filters, stride, padding)?;
    if grad_output.shape() != [g.oh, g.ow, g.n] {
        return shape_err(
            "conv2d_backward",
            format!(
                "grad_output must be {:?}, got {:?}",
                [g.oh, g.ow, g.n],
                grad_output.shape()
            ),
        );
    }
    let x = input.data();
    let k = filters.data();
    let go = grad_output.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.n];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let base = (oy * g.ow + ox) * g.n;
            let gpix = &go[base..base + g.n];
            for (acc, &v) in gb.iter_mut().zip(gpix) {
                *acc += v;
            }
            for ky in 0..g.d {
                let Some(iy) = source_index(oy, ky, g.stride, g.pad, g.h) else {
                    continue;
                };
                for kx in 0..g.d {
                    let Some(ix) = source_index(ox, kx, g.stride, g.pad, g.w) else {
                        continue;
                    };
                    let ibase = (iy * g.w + ix) * g.m;
                    let wbase = (ky * g.d + kx) * g.m * g.n;
                    for c in 0..g.m {
                        let row = wbase + c * g.n;
                        let xv = x[ibase + c];
                        let mut acc = 0.0;
                        for j in 0..g.n {
                            gk[row + j] += xv * gpix[j];
                            acc += k[row + j] * gpix[j];
                        }
                        gx[ibase + c] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        filters: Tensor::new(filters.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![g.n], gb)?,
    })
}

/// Fully connected layer: `y = x W + b` with `W` of shape `(in, out)`.
/// The input may have any shape whose element count equals `in`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let &[fan_in, fan_out] = weights.shape() else {
        return shape_err("dense_forward", format!("weights must be (in, out), got {:?}", weights.shape()));
    };
    if input.len() != fan_in {
        return shape_err(
            "dense_forward",
            format!("input has {} values but weights expect {fan_in}", input.len()),
        );
    }
    check_bias("dense_forward", bias, fan_out)?;
    input.ensure_finite("dense_forward")?;
    let w = weights.data();
    let mut out = bias.data().to_vec();
    for (i, &x) in input.data().iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &w[i * fan_out..(i + 1) * fan_out];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += x * wv;
        }
    }
    Tensor::new(vec![fan_out], out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_output: &Tensor) -> Result<DenseGrads> {
    let &[fan_in, fan_out] = weights.shape() else {
        return shape_err("dense_backward", format!("weights must be (in, out), got {:?}", weights.shape()));
    };
    if input.len() != fan_in || grad_output.len() != fan_out {
        return shape_err(
            "dense_backward",
            format!(
                "input {:?} / grad_output {:?} inconsistent with weights {:?}",
                input.shape(),
                grad_output.shape(),
                weights.shape()
            ),
        );
    }
    let w = weights.data();
    let go = grad_output.data();
    let mut gx = vec![0.0; fan_in];
    let mut gw = vec![0.0; fan_in * fan_out];
    for (i, &x) in input.data().iter().enumerate() {
        let row = &w[i * fan_out..(i + 1) * fan_out];
        let grow = &mut gw[i * fan_out..(i + 1) * fan_out];
        let mut acc = 0.0;
        for j in 0..fan_out {
            grow[j] = x * go[j];
            acc += row[j] * go[j];
        }
        gx[i] = acc;
    }
    Ok(DenseGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: grad_output.clone().reshape(&[fan_out])?,
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Gradient of ReLU evaluated at `input`; the subgradient at 0 is taken as 0.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    input.zip_with(grad_output, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })
}

fn pool_geometry(
    op: &'static str,
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let &[h, w, c] = input.shape() else {
        return shape_err(op, format!("input must be (H, W, C), got {:?}", input.shape()));
    };
    let (Some(oh), Some(ow)) = (
        conv_output_extent(h, window, stride, 0),
        conv_output_extent(w, window, stride, 0),
    ) else {
        return shape_err(op, format!("window {window}/stride {stride} does not fit {h}x{w}"));
    };
    Ok((h, w, c, oh, ow))
}

/// Argmax positions recorded by [`maxpool_forward`], one per output value.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub argmax: Vec<usize>,
    pub input_shape: Vec<usize>,
}

pub fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolCache)> {
    let (_, w, c, oh, ow) = pool_geometry("maxpool_forward", input, window, stride)?;
    let x = input.data();
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut argmax = vec![0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for ky in 0..window {
                for kx in 0..window {
                    let ibase = ((oy * stride + ky) * w + ox * stride + kx) * c;
                    for ch in 0..c {
                        // strict comparison keeps the first maximum
                        if x[ibase + ch] > out[obase + ch] {
                            out[obase + ch] = x[ibase + ch];
                            argmax[obase + ch] = ibase + ch;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![oh, ow, c], out)?,
        PoolCache {
            argmax,
            input_shape: input.shape().to_vec(),
        },
    ))
}

pub fn maxpool_backward(cache: &PoolCache, grad_output: &Tensor) -> Result<Tensor> {
    if grad_output.len() != cache.argmax.len() {
        return shape_err(
            "maxpool_backward",
            format!("expected {} gradients, got {}", cache.argmax.len(), grad_output.len()),
        );
    }
    let mut gx = Tensor::zeros(&cache.input_shape);
    let data = gx.data_mut();
    for (&src, &g) in cache.argmax.iter().zip(grad_output.data()) {
        data[src] += g;
    }
    Ok(gx)
}

pub fn avgpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (_, w, c, oh, ow) = pool_geometry("avgpool_forward", input, window, stride)?;
    let x = input.data();
    let scale = 1.0 / (window * window) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for ky in 0..window {
                for kx in 0..window {
                    let ibase = ((oy * stride + ky) * w + ox * stride + kx) * c;
                    for ch in 0..c {
                        out[obase + ch] += x[ibase + ch];
                    }
                }
            }
            for v in &mut out[obase..obase + c] {
                *v *= scale;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub fn avgpool_backward(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    grad_output: &Tensor,
) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let (_, w, c, oh, ow) = pool_geometry("avgpool_backward", &probe, window, stride)?;
    if grad_output.shape() != [oh, ow, c] {
        return shape_err(
            "avgpool_backward",
            format!("grad_output must be {:?}, got {:?}", [oh, ow, c], grad_output.shape()),
        );
    }
    let scale = 1.0 / (window * window) as f64;
    let go = grad_output.data();
    let mut gx = probe;
    let data = gx.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for ky in 0..window {
                for kx in 0..window {
                    let ibase = ((oy * stride + ky) * w + ox * stride + kx) * c;
                    for ch in 0..c {
                        data[ibase + ch] += go[obase + ch] * scale;
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let classes = logits.len();
    if label >= classes {
        return Err(TensorError::Label { label, classes });
    }
    logits.ensure_finite("softmax_cross_entropy")?;
    let z = logits.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - z[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{conv2d_oracle, grad_check};

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn scalar_conv_multiplies() {
        let x = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::from_fn(&[3, 3, 1], |i| i as f64 * 0.5 - 1.0);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, Padding::Valid).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn seeded_conv_matches_oracle() {
        let mut rng = Rng::new(0);
        let x = random(&mut rng, &[3, 3, 2]);
        let k = random(&mut rng, &[2, 2, 2, 3]);
        let b = random(&mut rng, &[3]);
        let fast = conv2d_forward(&x, &k, &b, 1, Padding::Valid).unwrap();
        let slow = conv2d_oracle(&x, &k, &b, 1, Padding::Valid).unwrap();
        assert_eq!(fast.shape(), &[2, 2, 3]);
        assert!(fast.rel_diff(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_nan() {
        let x = Tensor::zeros(&[3, 3, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 1]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, Padding::Valid).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));

        let mut x = Tensor::zeros(&[2, 2, 1]);
        x.data_mut()[0] = f64::NAN;
        let k = Tensor::zeros(&[1, 1, 1, 1]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, Padding::Valid).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));

        let big = Tensor::zeros(&[5, 5, 1, 1]);
        assert!(conv2d_forward(&x.map(|_| 0.0), &big, &Tensor::zeros(&[1]), 1, Padding::Valid).is_err());
    }

    #[test]
    fn padding_and_stride_extents() {
        let x = Tensor::zeros(&[7, 5, 1]);
        let k = Tensor::zeros(&[3, 3, 1, 2]);
        let b = Tensor::zeros(&[2]);
        let same = conv2d_forward(&x, &k, &b, 1, Padding::Same).unwrap();
        assert_eq!(same.shape(), &[7, 5, 2]);
        let strided = conv2d_forward(&x, &k, &b, 2, Padding::Explicit(1)).unwrap();
        assert_eq!(strided.shape(), &[4, 3, 2]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(1);
        let x = random(&mut rng, &[4, 4, 2]);
        let k = random(&mut rng, &[3, 3, 2, 3]);
        let g = conv2d_backward(&x, &k, &Tensor::zeros(&[2, 2, 3]), 1, Padding::Valid).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.filters.max_abs(), 0.0);
        assert_eq!(g.bias.max_abs(), 0.0);
    }

    #[test]
    fn scalar_filter_gradient_is_input() {
        let x = Tensor::new(vec![1, 1, 1], vec![3.5]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![-2.0]).unwrap();
        let g = conv2d_backward(&x, &k, &Tensor::full(&[1, 1, 1], 1.0), 1, Padding::Valid).unwrap();
        assert_eq!(g.filters.data(), &[3.5]);
        assert_eq!(g.input.data(), &[-2.0]);
        assert_eq!(g.bias.data(), &[1.0]);
    }

    #[test]
    fn seeded_conv_backward_matches_finite_differences() {
        let mut rng = Rng::new(0);
        let x = random(&mut rng, &[3, 3, 2]);
        let k = random(&mut rng, &[2, 2, 2, 3]);
        let b = random(&mut rng, &[3]);
        let probe = random(&mut rng, &[2, 2, 3]);
        let g = conv2d_backward(&x, &k, &probe, 1, Padding::Valid).unwrap();
        let loss_k = |kk: &Tensor| {
            conv2d_forward(&x, kk, &b, 1, Padding::Valid).unwrap().dot(&probe).unwrap()
        };
        assert!(grad_check(loss_k, &k, &g.filters, 1e-6).unwrap() < 1e-5);
        let loss_x = |xx: &Tensor| {
            conv2d_forward(xx, &k, &b, 1, Padding::Valid).unwrap().dot(&probe).unwrap()
        };
        assert!(grad_check(loss_x, &x, &g.input, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        for classes in [2usize, 3, 10] {
            let (loss, grad) = softmax_cross_entropy(&Tensor::full(&[classes], 0.7), 1).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
            assert!(grad.sum().abs() < 1e-12);
        }
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(&[3]), 3),
            Err(TensorError::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn seeded_dense_backward_matches_finite_differences() {
        let mut rng = Rng::new(0);
        let w = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[3]);
        let x = random(&mut rng, &[2]);
        let probe = random(&mut rng, &[3]);
        let g = dense_backward(&x, &w, &probe).unwrap();
        let f = |ww: &Tensor| dense_forward(&x, ww, &b).unwrap().dot(&probe).unwrap();
        assert!(grad_check(f, &w, &g.weights, 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, cache) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool_backward(&cache, &Tensor::full(&[1, 1, 1], 2.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn avgpool_averages_windows() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let y = avgpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let g = avgpool_backward(&[2, 2, 1], 2, 2, &Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.25; 4]);
    }
}
