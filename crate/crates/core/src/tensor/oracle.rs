use super::ops::{conv_geometry, Padding};
use super::{Result, Tensor};

/// Reference convolution: a literal transcription of
/// `y[oy, ox, n] = b[n] + sum_m sum_ky sum_kx k[ky, kx, m, n] * x[pad(oy, ky), pad(ox, kx), m]`
/// with no loop reordering or skipping. Ground truth for [`super::conv2d_forward`].
pub fn conv2d_oracle(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = conv_geometry("conv2d_oracle", input, filters, stride, padding)?;
    if bias.shape() != [g.n] {
        return super::shape_err(
            "conv2d_oracle",
            format!("bias must be [{}], got {:?}", g.n, bias.shape()),
        );
    }
    input.ensure_finite("conv2d_oracle")?;
    filters.ensure_finite("conv2d_oracle")?;
    bias.ensure_finite("conv2d_oracle")?;

    let pixel = |y: isize, x: isize, m: usize| -> f64 {
        if y < 0 || x < 0 || y as usize >= g.h || x as usize >= g.w {
            0.0
        } else {
            input.data()[(y as usize * g.w + x as usize) * g.m + m]
        }
    };
    let weight = |ky: usize, kx: usize, m: usize, n: usize| -> f64 {
        filters.data()[((ky * g.d + kx) * g.m + m) * g.n + n]
    };

    let mut out = Tensor::zeros(&[g.oh, g.ow, g.n]);
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = bias.data()[n];
                for m in 0..g.m {
                    for ky in 0..g.d {
                        for kx in 0..g.d {
                            let y = (oy * g.stride + ky) as isize - g.pad as isize;
                            let x = (ox * g.stride + kx) as isize - g.pad as isize;
                            acc += weight(ky, kx, m, n) * pixel(y, x, m);
                        }
                    }
                }
                out.data_mut()[(oy * g.ow + ox) * g.n + n] = acc;
            }
        }
    }
    Ok(out)
}
