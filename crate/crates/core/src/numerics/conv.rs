//! Direct 3D convolution kernels and their adjoints.
//!
//! Layouts: input `[C_in, D, H, W]`, kernel `[C_out, C_in, k, k, k]`,
//! conv output `[C_out, D', H', W']` with `D' = (D + 2*pad - k) / stride + 1`.
//! The transposed convolution is implemented as the exact linear adjoint of
//! the convolution with the same kernel, stride, and pad.

use super::{NumericsError, Tensor};

pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub in_spatial: [usize; 3],
    pub out_spatial: [usize; 3],
}

pub fn conv_geometry(
    input_shape: &[usize],
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry, NumericsError> {
    if input_shape.len() != 4 {
        return Err(NumericsError::BadShape(format!(
            "conv3d input must be [C,D,H,W], got {input_shape:?}"
        )));
    }
    if kernel_shape.len() != 5 {
        return Err(NumericsError::BadShape(format!(
            "conv3d kernel must be [C_out,C_in,k,k,k], got {kernel_shape:?}"
        )));
    }
    if stride == 0 {
        return Err(NumericsError::BadShape("stride must be positive".into()));
    }
    let (c_out, c_in, k) = (kernel_shape[0], kernel_shape[1], kernel_shape[2]);
    if kernel_shape[3] != k || kernel_shape[4] != k {
        return Err(NumericsError::BadShape(format!(
            "kernel spatial extents must be cubic, got {:?}",
            &kernel_shape[2..]
        )));
    }
    if input_shape[0] != c_in {
        return Err(NumericsError::BadShape(format!(
            "channel axis: input has {} channels, kernel expects {}",
            input_shape[0], c_in
        )));
    }
    let mut out_spatial = [0usize; 3];
    let axis_names = ["D", "H", "W"];
    for i in 0..3 {
        let padded = input_shape[1 + i] + 2 * pad;
        if k > padded {
            return Err(NumericsError::BadShape(format!(
                "axis {}: kernel extent {} exceeds padded input extent {}",
                axis_names[i], k, padded
            )));
        }
        out_spatial[i] = (padded - k) / stride + 1;
    }
    Ok(ConvGeometry {
        c_in,
        c_out,
        k,
        in_spatial: [input_shape[1], input_shape[2], input_shape[3]],
        out_spatial,
    })
}

#[inline]
fn idx4(c: usize, d: usize, h: usize, w: usize, sd: usize, sh: usize, sw: usize) -> usize {
    ((c * sd + d) * sh + h) * sw + w
}

pub fn conv3d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, NumericsError> {
    let g = conv_geometry(input.shape(), kernel.shape(), stride, pad)?;
    let [id, ih, iw] = g.in_spatial;
    let [od, oh, ow] = g.out_spatial;
    let mut out = Tensor::zeros(&[g.c_out, od, oh, ow]);
    let x = input.data();
    let kdat = kernel.data();
    let o = out.data_mut();
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let kbase = (co * g.c_in + ci) * g.k * g.k * g.k;
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = 0.0;
                        for kd in 0..g.k {
                            let sd = (zd * stride + kd) as isize - pad as isize;
                            if sd < 0 || sd >= id as isize {
                                continue;
                            }
                            for kh in 0..g.k {
                                let sh = (zh * stride + kh) as isize - pad as isize;
                                if sh < 0 || sh >= ih as isize {
                                    continue;
                                }
                                for kw in 0..g.k {
                                    let sw = (zw * stride + kw) as isize - pad as isize;
                                    if sw < 0 || sw >= iw as isize {
                                        continue;
                                    }
                                    acc += x[idx4(
                                        ci,
                                        sd as usize,
                                        sh as usize,
                                        sw as usize,
                                        id,
                                        ih,
                                        iw,
                                    )] * kdat[kbase + (kd * g.k + kh) * g.k + kw];
                                }
                            }
                        }
                        o[idx4(co, zd, zh, zw, od, oh, ow)] += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of `conv3d` in its input argument: scatters `cotangent`
/// (shaped like the conv output) back to the conv input shape.
pub fn conv3d_adjoint_input(
    cotangent: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    input_spatial: [usize; 3],
) -> Result<Tensor, NumericsError> {
    if kernel.shape().len() != 5 {
        return Err(NumericsError::BadShape(format!(
            "kernel must be [C_out,C_in,k,k,k], got {:?}",
            kernel.shape()
        )));
    }
    let (c_out, c_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let expect_in = [c_in, input_spatial[0], input_spatial[1], input_spatial[2]];
    let g = conv_geometry(&expect_in, kernel.shape(), stride, pad)?;
    if cotangent.shape() != [c_out, g.out_spatial[0], g.out_spatial[1], g.out_spatial[2]] {
        return Err(NumericsError::BadShape(format!(
            "transposed conv input {:?} does not match conv output geometry {:?}",
            cotangent.shape(),
            [c_out, g.out_spatial[0], g.out_spatial[1], g.out_spatial[2]]
        )));
    }
    let [id, ih, iw] = g.in_spatial;
    let [od, oh, ow] = g.out_spatial;
    let mut out = Tensor::zeros(&expect_in);
    let y = cotangent.data();
    let kdat = kernel.data();
    let o = out.data_mut();
    for co in 0..c_out {
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * k * k * k;
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let v = y[idx4(co, zd, zh, zw, od, oh, ow)];
                        if v == 0.0 {
                            continue;
                        }
                        for kd in 0..k {
                            let sd = (zd * stride + kd) as isize - pad as isize;
                            if sd < 0 || sd >= id as isize {
                                continue;
                            }
                            for kh in 0..k {
                                let sh = (zh * stride + kh) as isize - pad as isize;
                                if sh < 0 || sh >= ih as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let sw = (zw * stride + kw) as isize - pad as isize;
                                    if sw < 0 || sw >= iw as isize {
                                        continue;
                                    }
                                    o[idx4(
                                        ci,
                                        sd as usize,
                                        sh as usize,
                                        sw as usize,
                                        id,
                                        ih,
                                        iw,
                                    )] += v * kdat[kbase + (kd * k + kh) * k + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv3d` with respect to the kernel, given the conv input and
/// the cotangent of the conv output.
pub fn conv3d_grad_kernel(
    input: &Tensor,
    cotangent: &Tensor,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor, NumericsError> {
    let g = conv_geometry(input.shape(), kernel_shape, stride, pad)?;
    let [id, ih, iw] = g.in_spatial;
    let [od, oh, ow] = g.out_spatial;
    let mut gk = Tensor::zeros(kernel_shape);
    let x = input.data();
    let y = cotangent.data();
    let o = gk.data_mut();
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let kbase = (co * g.c_in + ci) * g.k * g.k * g.k;
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let v = y[idx4(co, zd, zh, zw, od, oh, ow)];
                        if v == 0.0 {
                            continue;
                        }
                        for kd in 0..g.k {
                            let sd = (zd * stride + kd) as isize - pad as isize;
                            if sd < 0 || sd >= id as isize {
                                continue;
                            }
                            for kh in 0..g.k {
                                let sh = (zh * stride + kh) as isize - pad as isize;
                                if sh < 0 || sh >= ih as isize {
                                    continue;
                                }
                                for kw in 0..g.k {
                                    let sw = (zw * stride + kw) as isize - pad as isize;
                                    if sw < 0 || sw >= iw as isize {
                                        continue;
                                    }
                                    o[kbase + (kd * g.k + kh) * g.k + kw] += v * x[idx4(
                                        ci,
                                        sd as usize,
                                        sh as usize,
                                        sw as usize,
                                        id,
                                        ih,
                                        iw,
                                    )];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gk)
}

/// Output spatial extent of the transposed convolution.
pub fn transposed_out_extent(in_extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_extent - 1) * stride + k - 2 * pad
}
