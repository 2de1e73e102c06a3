//! Forward and backward kernels for the layer kinds a [`NetworkSpec`](super::NetworkSpec)
//! can declare. Convolutions go through im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Output extent of a convolution over an input of extent `input`.
    pub fn conv_out(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Output extent of a transposed convolution (dilation 1, no output padding).
    pub fn transposed_out(&self, input: usize) -> Option<usize> {
        ((input - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..channels {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let x0 = (kx * g.dilation) as isize - g.padding as isize;
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = x0 + (ox * g.stride) as isize;
                        *v = if ix >= 0 && ix < w as isize {
                            src_row[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..channels {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let x0 = (kx * g.dilation) as isize - g.padding as isize;
                    for (ox, v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = x0 + (ox * g.stride) as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_out_dims(x: &Tensor, g: &ConvGeom) -> Result<(usize, usize)> {
    match (g.conv_out(x.h()), g.conv_out(x.w())) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok((ho, wo)),
        _ => Err(Error::Shape(format!(
            "convolution {g:?} cannot be applied to {}x{} input",
            x.h(),
            x.w()
        ))),
    }
}

/// Grouped, dilated convolution. `weight` is `[out, in/groups, k, k]`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
    groups: usize,
    g: &ConvGeom,
) -> Result<Tensor> {
    let [n, cin, h, w] = x.shape();
    let (ho, wo) = conv_out_dims(x, g)?;
    let cin_g = cin / groups;
    let cout_g = out_channels / groups;
    let kk = cin_g * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut out = Tensor::zeros([n, out_channels, ho, wo]);
    let mut cols = vec![0.0; kk * plane];
    for s in 0..n {
        let xs = x.sample(s);
        let ys = out.sample_mut(s);
        for gi in 0..groups {
            im2col(
                &xs[gi * cin_g * h * w..(gi + 1) * cin_g * h * w],
                cin_g,
                h,
                w,
                g,
                ho,
                wo,
                &mut cols,
            );
            let wg = &weight[gi * cout_g * kk..(gi + 1) * cout_g * kk];
            let yg = &mut ys[gi * cout_g * plane..(gi + 1) * cout_g * plane];
            gemm(cout_g, kk, plane, wg, false, &cols, false, yg, 0.0);
        }
        if let Some(b) = bias {
            for (c, bc) in b.iter().enumerate() {
                ys[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bc);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &Tensor,
    weight: &[f64],
    has_bias: bool,
    dy: &Tensor,
    groups: usize,
    g: &ConvGeom,
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let [n, cin, h, w] = x.shape();
    let [_, cout, ho, wo] = dy.shape();
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let kk = cin_g * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut dx = want_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_params.then(|| vec![0.0; weight.len()]);
    let mut db = (want_params && has_bias).then(|| vec![0.0; cout]);
    let mut cols = vec![0.0; kk * plane];
    for s in 0..n {
        let dys = dy.sample(s);
        for gi in 0..groups {
            let dyg = &dys[gi * cout_g * plane..(gi + 1) * cout_g * plane];
            if let Some(dw) = dw.as_mut() {
                im2col(
                    &x.sample(s)[gi * cin_g * h * w..(gi + 1) * cin_g * h * w],
                    cin_g,
                    h,
                    w,
                    g,
                    ho,
                    wo,
                    &mut cols,
                );
                let dwg = &mut dw[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                gemm(cout_g, plane, kk, dyg, false, &cols, true, dwg, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &weight[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                gemm(kk, cout_g, plane, wg, true, dyg, false, &mut cols, 0.0);
                let dxs = dx.sample_mut(s);
                col2im(
                    &cols,
                    cin_g,
                    h,
                    w,
                    g,
                    ho,
                    wo,
                    &mut dxs[gi * cin_g * h * w..(gi + 1) * cin_g * h * w],
                );
            }
        }
        if let Some(db) = db.as_mut() {
            for (c, v) in db.iter_mut().enumerate() {
                *v += dys[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

fn transposed_out_dims(x: &Tensor, g: &ConvGeom) -> Result<(usize, usize)> {
    match (g.transposed_out(x.h()), g.transposed_out(x.w())) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok((ho, wo)),
        _ => Err(Error::Shape(format!(
            "transposed convolution {g:?} cannot be applied to {}x{} input",
            x.h(),
            x.w()
        ))),
    }
}

/// Transposed convolution. `weight` is `[in, out, k, k]`.
pub fn conv_transpose2d_forward(
    x: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
    g: &ConvGeom,
) -> Result<Tensor> {
    let [n, cin, hi, wi] = x.shape();
    let (ho, wo) = transposed_out_dims(x, g)?;
    let rows = out_channels * g.kernel * g.kernel;
    let mut out = Tensor::zeros([n, out_channels, ho, wo]);
    let mut cols = vec![0.0; rows * hi * wi];
    for s in 0..n {
        gemm(rows, cin, hi * wi, weight, true, x.sample(s), false, &mut cols, 0.0);
        let ys = out.sample_mut(s);
        col2im(&cols, out_channels, ho, wo, g, hi, wi, ys);
        if let Some(b) = bias {
            for (c, bc) in b.iter().enumerate() {
                ys[c * ho * wo..(c + 1) * ho * wo]
                    .iter_mut()
                    .for_each(|v| *v += bc);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &[f64],
    has_bias: bool,
    dy: &Tensor,
    g: &ConvGeom,
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let [n, cin, hi, wi] = x.shape();
    let [_, cout, ho, wo] = dy.shape();
    let rows = cout * g.kernel * g.kernel;
    let mut dx = want_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_params.then(|| vec![0.0; weight.len()]);
    let mut db = (want_params && has_bias).then(|| vec![0.0; cout]);
    let mut cols = vec![0.0; rows * hi * wi];
    for s in 0..n {
        let dys = dy.sample(s);
        im2col(dys, cout, ho, wo, g, hi, wi, &mut cols);
        if let Some(dx) = dx.as_mut() {
            gemm(cin, rows, hi * wi, weight, false, &cols, false, dx.sample_mut(s), 0.0);
        }
        if let Some(dw) = dw.as_mut() {
            gemm(cin, hi * wi, rows, x.sample(s), false, &cols, true, dw, 1.0);
        }
        if let Some(db) = db.as_mut() {
            let plane = ho * wo;
            for (c, v) in db.iter_mut().enumerate() {
                *v += dys[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Max pooling without padding; returns the argmax offsets within each sample.
pub fn max_pool_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    if h < kernel || w < kernel {
        return Err(Error::Shape(format!(
            "pooling window {kernel} exceeds {h}x{w} input"
        )));
    }
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let mut o = 0;
    for s in 0..n {
        let xs = x.sample(s);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                            if xs[i] > best {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool_backward(input_shape: [usize; 4], dy: &Tensor, arg: &[u32]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let per_out = dy.c() * dy.h() * dy.w();
    for s in 0..dy.n() {
        let dys = dy.sample(s);
        let dxs = dx.sample_mut(s);
        for (j, g) in dys.iter().enumerate() {
            dxs[arg[s * per_out + j] as usize] += g;
        }
    }
    dx
}

pub fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = (h * w) as f64;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for s in 0..n {
        for ch in 0..c {
            let v = x.plane(s, ch).iter().sum::<f64>() / hw;
            out.set(s, ch, 0, 0, v);
        }
    }
    out
}

pub fn global_avg_pool_backward(input_shape: [usize; 4], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let hw = (h * w) as f64;
    let mut dx = Tensor::zeros(input_shape);
    for s in 0..n {
        for ch in 0..c {
            let g = dy.at(s, ch, 0, 0) / hw;
            let start = dx.index(s, ch, 0, 0);
            dx.data_mut()[start..start + h * w].fill(g);
        }
    }
    dx
}

/// Fully connected layer over the flattened sample. `weight` is `[out, in]`.
pub fn affine_forward(x: &Tensor, weight: &[f64], bias: &[f64], out_features: usize) -> Tensor {
    let n = x.n();
    let fin = x.len() / n.max(1);
    let mut out = Tensor::zeros([n, out_features, 1, 1]);
    gemm(n, fin, out_features, x.data(), false, weight, true, out.data_mut(), 0.0);
    for s in 0..n {
        for (o, b) in bias.iter().enumerate() {
            out.data_mut()[s * out_features + o] += b;
        }
    }
    out
}

pub fn affine_backward(
    x: &Tensor,
    weight: &[f64],
    dy: &Tensor,
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let n = x.n();
    let fin = x.len() / n.max(1);
    let fout = dy.c();
    let input = want_input.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm(n, fout, fin, dy.data(), false, weight, false, dx.data_mut(), 0.0);
        dx
    });
    let (weight_grad, bias_grad) = if want_params {
        let mut dw = vec![0.0; fout * fin];
        gemm(fout, n, fin, dy.data(), true, x.data(), false, &mut dw, 0.0);
        let mut db = vec![0.0; fout];
        for s in 0..n {
            for (o, v) in db.iter_mut().enumerate() {
                *v += dy.data()[s * fout + o];
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    ConvGrads {
        input,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Log-softmax over the channel axis at every pixel.
pub fn log_softmax_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let xs = x.sample(s);
        let ys = out.sample_mut(s);
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(xs[ch * hw + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                z += (xs[ch * hw + p] - m).exp();
            }
            let lse = m + z.ln();
            for ch in 0..c {
                ys[ch * hw + p] = xs[ch * hw + p] - lse;
            }
        }
    }
    out
}

pub fn log_softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let [n, c, h, w] = y.shape();
    let hw = h * w;
    let mut dx = Tensor::zeros(y.shape());
    for s in 0..n {
        let ys = y.sample(s);
        let gs = dy.sample(s);
        let ds = dx.sample_mut(s);
        for p in 0..hw {
            let total: f64 = (0..c).map(|ch| gs[ch * hw + p]).sum();
            for ch in 0..c {
                let i = ch * hw + p;
                ds[i] = gs[i] - ys[i].exp() * total;
            }
        }
    }
    dx
}

/// Concatenate along channels.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts[0];
    let [n, _, h, w] = first.shape();
    for p in parts {
        if p.n() != n || p.h() != h || p.w() != w {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        let dst = out.sample_mut(s);
        let mut off = 0;
        for p in parts {
            let src = p.sample(s);
            dst[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    Ok(out)
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn split_channels(dy: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let [n, _, h, w] = dy.shape();
    let mut parts: Vec<Tensor> = channels
        .iter()
        .map(|&c| Tensor::zeros([n, c, h, w]))
        .collect();
    for s in 0..n {
        let src = dy.sample(s);
        let mut off = 0;
        for p in parts.iter_mut() {
            let dst = p.sample_mut(s);
            let len = dst.len();
            dst.copy_from_slice(&src[off..off + len]);
            off += len;
        }
    }
    parts
}
