//! Convolution kernels and their adjoints.
//!
//! 1-D convolutions are time-major: inputs and outputs are `[T × channels]`,
//! matching the `[T_l × d]` layout of every sequence in the model.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dSpec {
    t_in: usize,
    t_out: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv1dSpec {
    pub(crate) fn new(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
        out_len: Option<usize>,
        transposed: bool,
    ) -> Result<Self> {
        let (t_in, c_in) = x.dims2()?;
        let ws = w.shape();
        if ws.len() != 3 || stride == 0 {
            return Err(Error::shape("conv1d", format!("weight {:?}, stride {stride}", ws)));
        }
        let (wc_in, c_out, k) = if transposed {
            (ws[0], ws[1], ws[2])
        } else {
            (ws[1], ws[0], ws[2])
        };
        if wc_in != c_in || b.numel() != c_out {
            return Err(Error::shape(
                "conv1d",
                format!("input channels {c_in}, weight {:?}, bias {:?}", ws, b.shape()),
            ));
        }
        let t_out = if transposed {
            out_len.ok_or_else(|| Error::invalid("transposed conv needs an output length"))?
        } else {
            if t_in + 2 * pad < k {
                return Err(Error::shape("conv1d", "kernel longer than padded input"));
            }
            (t_in + 2 * pad - k) / stride + 1
        };
        Ok(Self {
            t_in,
            t_out,
            c_in,
            c_out,
            k,
            stride,
            pad,
        })
    }

    /// Input row feeding output `o` through tap `j` (forward conv).
    #[inline]
    fn src(&self, o: usize, j: usize) -> Option<usize> {
        let r = (o * self.stride + j) as isize - self.pad as isize;
        (r >= 0 && (r as usize) < self.t_in).then_some(r as usize)
    }

    /// Output row written by input `i` through tap `j` (transposed conv).
    #[inline]
    fn dst(&self, i: usize, j: usize) -> Option<usize> {
        let r = (i * self.stride + j) as isize - self.pad as isize;
        (r >= 0 && (r as usize) < self.t_out).then_some(r as usize)
    }
}

pub(crate) fn conv1d_forward(s: &Conv1dSpec, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; s.t_out * s.c_out];
    for o in 0..s.t_out {
        let orow = &mut out[o * s.c_out..(o + 1) * s.c_out];
        orow.copy_from_slice(b.data());
        for j in 0..s.k {
            let Some(r) = s.src(o, j) else { continue };
            let xrow = &xd[r * s.c_in..(r + 1) * s.c_in];
            for (co, ov) in orow.iter_mut().enumerate() {
                let wbase = co * s.c_in * s.k;
                let mut acc = 0.0;
                for (ci, xv) in xrow.iter().enumerate() {
                    acc += wd[wbase + ci * s.k + j] * xv;
                }
                *ov += acc;
            }
        }
    }
    Tensor::from_parts(vec![s.t_out, s.c_out], out)
}

pub(crate) fn conv1d_backward(
    s: &Conv1dSpec,
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; s.t_in * s.c_in];
    let mut gw = vec![0.0; s.c_out * s.c_in * s.k];
    let mut gb = vec![0.0; s.c_out];
    for o in 0..s.t_out {
        let grow = &gd[o * s.c_out..(o + 1) * s.c_out];
        for (co, gv) in grow.iter().enumerate() {
            gb[co] += gv;
        }
        for j in 0..s.k {
            let Some(r) = s.src(o, j) else { continue };
            for (co, &gv) in grow.iter().enumerate() {
                let wbase = co * s.c_in * s.k;
                for ci in 0..s.c_in {
                    gx[r * s.c_in + ci] += gv * wd[wbase + ci * s.k + j];
                    gw[wbase + ci * s.k + j] += gv * xd[r * s.c_in + ci];
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![s.t_in, s.c_in], gx),
        Tensor::from_parts(vec![s.c_out, s.c_in, s.k], gw),
        Tensor::from_parts(vec![s.c_out], gb),
    )
}

pub(crate) fn conv_transpose1d_forward(
    s: &Conv1dSpec,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> Tensor {
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; s.t_out * s.c_out];
    for o in 0..s.t_out {
        out[o * s.c_out..(o + 1) * s.c_out].copy_from_slice(b.data());
    }
    for i in 0..s.t_in {
        let xrow = &xd[i * s.c_in..(i + 1) * s.c_in];
        for j in 0..s.k {
            let Some(r) = s.dst(i, j) else { continue };
            for (ci, &xv) in xrow.iter().enumerate() {
                let wbase = ci * s.c_out * s.k;
                for co in 0..s.c_out {
                    out[r * s.c_out + co] += xv * wd[wbase + co * s.k + j];
                }
            }
        }
    }
    Tensor::from_parts(vec![s.t_out, s.c_out], out)
}

pub(crate) fn conv_transpose1d_backward(
    s: &Conv1dSpec,
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; s.t_in * s.c_in];
    let mut gw = vec![0.0; s.c_in * s.c_out * s.k];
    let mut gb = vec![0.0; s.c_out];
    for o in 0..s.t_out {
        for co in 0..s.c_out {
            gb[co] += gd[o * s.c_out + co];
        }
    }
    for i in 0..s.t_in {
        for j in 0..s.k {
            let Some(r) = s.dst(i, j) else { continue };
            let grow = &gd[r * s.c_out..(r + 1) * s.c_out];
            for ci in 0..s.c_in {
                let wbase = ci * s.c_out * s.k;
                let xv = xd[i * s.c_in + ci];
                let mut acc = 0.0;
                for (co, &gv) in grow.iter().enumerate() {
                    acc += gv * wd[wbase + co * s.k + j];
                    gw[wbase + co * s.k + j] += xv * gv;
                }
                gx[i * s.c_in + ci] += acc;
            }
        }
    }
    (
        Tensor::from_parts(vec![s.t_in, s.c_in], gx),
        Tensor::from_parts(vec![s.c_in, s.c_out, s.k], gw),
        Tensor::from_parts(vec![s.c_out], gb),
    )
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dSpec {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl Conv2dSpec {
    pub(crate) fn new(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let [n, c_in, h, wd] = x.shape()[..] else {
            return Err(Error::shape("conv2d", format!("input {:?}", x.shape())));
        };
        let [c_out, wc_in, kh, kw] = w.shape()[..] else {
            return Err(Error::shape("conv2d", format!("weight {:?}", w.shape())));
        };
        if wc_in != c_in || b.numel() != c_out || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            ho: (h + 2 * pad.0 - kh) / stride.0 + 1,
            wo: (wd + 2 * pad.1 - kw) / stride.1 + 1,
        })
    }

    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.sh + ky) as isize - self.ph as isize;
        let x = (ox * self.sw + kx) as isize - self.pw as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then_some((y as usize, x as usize))
    }
}

pub(crate) fn conv2d_forward(s: &Conv2dSpec, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; s.n * s.c_out * s.ho * s.wo];
    for n in 0..s.n {
        for co in 0..s.c_out {
            for oy in 0..s.ho {
                for ox in 0..s.wo {
                    let mut acc = b.data()[co];
                    for ci in 0..s.c_in {
                        for ky in 0..s.kh {
                            for kx in 0..s.kw {
                                if let Some((y, xx)) = s.src(oy, ox, ky, kx) {
                                    acc += wd[((co * s.c_in + ci) * s.kh + ky) * s.kw + kx]
                                        * xd[((n * s.c_in + ci) * s.h + y) * s.w + xx];
                                }
                            }
                        }
                    }
                    out[((n * s.c_out + co) * s.ho + oy) * s.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_parts(vec![s.n, s.c_out, s.ho, s.wo], out)
}

pub(crate) fn conv2d_backward(
    s: &Conv2dSpec,
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; s.c_out];
    for n in 0..s.n {
        for co in 0..s.c_out {
            for oy in 0..s.ho {
                for ox in 0..s.wo {
                    let gv = gd[((n * s.c_out + co) * s.ho + oy) * s.wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    gb[co] += gv;
                    for ci in 0..s.c_in {
                        for ky in 0..s.kh {
                            for kx in 0..s.kw {
                                if let Some((y, xx)) = s.src(oy, ox, ky, kx) {
                                    let wi = ((co * s.c_in + ci) * s.kh + ky) * s.kw + kx;
                                    let xi = ((n * s.c_in + ci) * s.h + y) * s.w + xx;
                                    gx[xi] += gv * wd[wi];
                                    gw[wi] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![s.c_out], gb),
    )
}
