//! 2-D convolution (im2col + GEMM) and the 2x2 stride-2 transposed convolution.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so the output is `ceil(h / stride) x ceil(w / stride)`.
    Same,
    Valid,
}

/// Weight `(c_out, c_in, k_h, k_w)` and bias `(c_out)` of a convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real = f64> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weight.shape();
        if s.n == 0 || s.c == 0 || !(1..=3).contains(&s.h) || !(1..=3).contains(&s.w) {
            return Err(Error::invalid(
                "ConvParams",
                format!("weight shape {s} needs c_out, c_in >= 1 and kernel sides in 1..=3"),
            ));
        }
        if bias.shape() != Shape::new(s.n, 1, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "ConvParams",
                expected: Shape::new(s.n, 1, 1, 1).to_string(),
                got: bias.shape().to_string(),
            });
        }
        Ok(ConvParams { weight, bias })
    }

    /// He-normal weights, `std = sqrt(2 / (k_h * k_w * c_in))`, and zero bias.
    pub fn he_normal<R: Rng>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Result<Self> {
        let fan_in = (k * k * c_in) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
            .map_err(|e| Error::invalid("he_normal", e.to_string()))?;
        let weight = Tensor::from_fn([c_out, c_in, k, k], |_| T::lit(normal.sample(rng)));
        ConvParams::new(weight, Tensor::zeros([c_out, 1, 1, 1]))
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: Shape, wt: Shape, padding: Padding, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if x.c != wt.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: format!("{} input channels", wt.c),
                got: format!("{} ({x})", x.c),
            });
        }
        let (kh, kw) = (wt.h, wt.w);
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = x.h.div_ceil(stride);
                let ow = x.w.div_ceil(stride);
                let pad_h = ((oh.max(1) - 1) * stride + kh).saturating_sub(x.h);
                let pad_w = ((ow.max(1) - 1) * stride + kw).saturating_sub(x.w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if x.h < kh || x.w < kw {
                    return Err(Error::invalid(
                        "conv2d",
                        format!("valid padding needs input {}x{} >= kernel {kh}x{kw}", x.h, x.w),
                    ));
                }
                ((x.h - kh) / stride + 1, (x.w - kw) / stride + 1, 0, 0)
            }
        };
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("conv2d", "non-positive output size"));
        }
        Ok(Geometry {
            n: x.n,
            c_in: x.c,
            h: x.h,
            w: x.w,
            c_out: wt.n,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output coordinate `o` and kernel offset `k`.
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < limit)
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.c_in {
            let chan = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = &mut cols[((ci * self.kh + a) * self.kw + b) * plane..][..plane];
                    for oy in 0..self.oh {
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        let Some(iy) = self.src(oy, a, self.pad_top, self.h) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let src = &chan[iy * self.w..(iy + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = match self.src(ox, b, self.pad_left, self.w) {
                                Some(ix) => src[ix],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.c_in {
            let chan = &mut image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = &cols[((ci * self.kh + a) * self.kw + b) * plane..][..plane];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, a, self.pad_top, self.h) else {
                            continue;
                        };
                        let src = &row[oy * self.ow..(oy + 1) * self.ow];
                        let dst = &mut chan[iy * self.w..(iy + 1) * self.w];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(ix) = self.src(ox, b, self.pad_left, self.w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input` (n x c_in x h x w) with `weight`, plus bias.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    weight: Var,
    bias: Var,
    padding: Padding,
    stride: usize,
) -> Result<Var> {
    if !tape.owns(input) || !tape.owns(weight) || !tape.owns(bias) {
        return Err(Error::ForeignVar);
    }
    let (xs, ws) = (tape.shape(input), tape.shape(weight));
    let g = Geometry::new(xs, ws, padding, stride)?;
    if tape.shape(bias) != Shape::new(g.c_out, 1, 1, 1) {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: format!("bias {}x1x1x1", g.c_out),
            got: tape.shape(bias).to_string(),
        });
    }

    let (k, plane) = (g.k(), g.out_plane());
    let x = tape.value(input).data();
    let wt = tape.value(weight).data();
    let bs = tape.value(bias).data();
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * plane;

    let mut cols = vec![T::zero(); g.n * k * plane];
    let mut out = vec![T::zero(); g.n * out_size];
    for n in 0..g.n {
        let col = &mut cols[n * k * plane..(n + 1) * k * plane];
        g.im2col(&x[n * in_size..(n + 1) * in_size], col);
        let y = &mut out[n * out_size..(n + 1) * out_size];
        for (co, row) in y.chunks_mut(plane).enumerate() {
            row.fill(bs[co]);
        }
        T::gemm(
            g.c_out,
            k,
            plane,
            T::one(),
            (wt, k as isize, 1),
            (col, plane as isize, 1),
            T::one(),
            (y, plane as isize, 1),
        );
    }
    let out = Tensor::from_raw(Shape::new(g.n, g.c_out, g.oh, g.ow), out);

    tape.record(
        "conv2d",
        &[input, weight, bias],
        out,
        Box::new(move |ctx| {
            let grad = ctx.grad.data();
            let wt = ctx.inputs[1].data();
            let mut dx = ctx.needs(0).then(|| vec![T::zero(); g.n * in_size]);
            let mut dw = ctx.needs(1).then(|| vec![T::zero(); g.c_out * k]);
            let mut db = ctx.needs(2).then(|| vec![T::zero(); g.c_out]);
            let mut dcol = vec![T::zero(); if dx.is_some() { k * plane } else { 0 }];
            for n in 0..g.n {
                let gy = &grad[n * out_size..(n + 1) * out_size];
                let col = &cols[n * k * plane..(n + 1) * k * plane];
                if let Some(dw) = dw.as_mut() {
                    T::gemm(
                        g.c_out,
                        plane,
                        k,
                        T::one(),
                        (gy, plane as isize, 1),
                        (col, 1, plane as isize),
                        T::one(),
                        (dw, k as isize, 1),
                    );
                }
                if let Some(db) = db.as_mut() {
                    for (co, row) in gy.chunks(plane).enumerate() {
                        let mut s = T::zero();
                        for &v in row {
                            s += v;
                        }
                        db[co] += s;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        k,
                        g.c_out,
                        plane,
                        T::one(),
                        (wt, 1, k as isize),
                        (gy, plane as isize, 1),
                        T::zero(),
                        (&mut dcol, plane as isize, 1),
                    );
                    g.col2im(&dcol, &mut dx[n * in_size..(n + 1) * in_size]);
                }
            }
            vec![
                dx.map(|d| Tensor::from_raw(ctx.inputs[0].shape(), d)),
                dw.map(|d| Tensor::from_raw(ctx.inputs[1].shape(), d)),
                db.map(|d| Tensor::from_raw(ctx.inputs[2].shape(), d)),
            ]
        }),
    )
}

/// Transposed convolution with a 2x2 kernel and stride 2: output is `2h x 2w`.
///
/// `weight` is `(c_out, c_in, 2, 2)`; output pixel `(2i + a, 2j + b)` of
/// channel `o` is `bias[o] + sum_c input[c, i, j] * weight[o, c, a, b]`.
pub fn conv_transpose2d<T: Real>(
    tape: &mut Tape<T>,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
) -> Result<Var> {
    if !tape.owns(input) || !tape.owns(weight) || !tape.owns(bias) {
        return Err(Error::ForeignVar);
    }
    let (xs, ws) = (tape.shape(input), tape.shape(weight));
    if ws.h != 2 || ws.w != 2 || stride != 2 {
        return Err(Error::invalid(
            "conv_transpose2d",
            format!(
                "only 2x2 kernels with stride 2 are supported, got {}x{} stride {stride}",
                ws.h, ws.w
            ),
        ));
    }
    if xs.c != ws.c {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            expected: format!("{} input channels", ws.c),
            got: xs.to_string(),
        });
    }
    let (c_out, c_in) = (ws.n, ws.c);
    if tape.shape(bias) != Shape::new(c_out, 1, 1, 1) {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            expected: format!("bias {c_out}x1x1x1"),
            got: tape.shape(bias).to_string(),
        });
    }
    let (h, w) = (xs.h, xs.w);
    let (oh, ow) = (2 * h, 2 * w);
    let plane = h * w;
    let rows = c_out * 4;

    // Row (o, a, b) of `taps` holds weight[o, :, a, b].
    let wt = tape.value(weight).data();
    let mut taps = vec![T::zero(); rows * c_in];
    for o in 0..c_out {
        for c in 0..c_in {
            for ab in 0..4 {
                taps[(o * 4 + ab) * c_in + c] = wt[(o * c_in + c) * 4 + ab];
            }
        }
    }

    let x = tape.value(input).data();
    let bs = tape.value(bias).data();
    let mut y = vec![T::zero(); rows * plane];
    let mut out = vec![T::zero(); xs.n * c_out * oh * ow];
    for n in 0..xs.n {
        let xn = &x[n * c_in * plane..(n + 1) * c_in * plane];
        T::gemm(
            rows,
            c_in,
            plane,
            T::one(),
            (&taps, c_in as isize, 1),
            (xn, plane as isize, 1),
            T::zero(),
            (&mut y, plane as isize, 1),
        );
        let on = &mut out[n * c_out * oh * ow..(n + 1) * c_out * oh * ow];
        for o in 0..c_out {
            for ab in 0..4 {
                let (a, b) = (ab / 2, ab % 2);
                let src = &y[(o * 4 + ab) * plane..][..plane];
                for i in 0..h {
                    for j in 0..w {
                        on[(o * oh + 2 * i + a) * ow + 2 * j + b] = src[i * w + j] + bs[o];
                    }
                }
            }
        }
    }
    let out = Tensor::from_raw(Shape::new(xs.n, c_out, oh, ow), out);

    tape.record(
        "conv_transpose2d",
        &[input, weight, bias],
        out,
        Box::new(move |ctx| {
            let grad = ctx.grad.data();
            let x = ctx.inputs[0].data();
            let n_batch = ctx.inputs[0].shape().n;
            let mut dx = ctx.needs(0).then(|| vec![T::zero(); n_batch * c_in * plane]);
            let mut dtaps = ctx.needs(1).then(|| vec![T::zero(); rows * c_in]);
            let mut db = ctx.needs(2).then(|| vec![T::zero(); c_out]);
            let mut gy = vec![T::zero(); rows * plane];
            for n in 0..n_batch {
                let gn = &grad[n * c_out * oh * ow..(n + 1) * c_out * oh * ow];
                for o in 0..c_out {
                    for ab in 0..4 {
                        let (a, b) = (ab / 2, ab % 2);
                        let dst = &mut gy[(o * 4 + ab) * plane..][..plane];
                        for i in 0..h {
                            for j in 0..w {
                                dst[i * w + j] = gn[(o * oh + 2 * i + a) * ow + 2 * j + b];
                            }
                        }
                    }
                }
                if let Some(db) = db.as_mut() {
                    for (o, row) in gn.chunks(oh * ow).enumerate() {
                        let mut s = T::zero();
                        for &v in row {
                            s += v;
                        }
                        db[o] += s;
                    }
                }
                let xn = &x[n * c_in * plane..(n + 1) * c_in * plane];
                if let Some(dt) = dtaps.as_mut() {
                    T::gemm(
                        rows,
                        plane,
                        c_in,
                        T::one(),
                        (&gy, plane as isize, 1),
                        (xn, 1, plane as isize),
                        T::one(),
                        (dt, c_in as isize, 1),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        c_in,
                        rows,
                        plane,
                        T::one(),
                        (&taps, 1, c_in as isize),
                        (&gy, plane as isize, 1),
                        T::zero(),
                        (
                            &mut dx[n * c_in * plane..(n + 1) * c_in * plane],
                            plane as isize,
                            1,
                        ),
                    );
                }
            }
            let dw = dtaps.map(|dt| {
                let mut dw = vec![T::zero(); c_out * c_in * 4];
                for o in 0..c_out {
                    for c in 0..c_in {
                        for ab in 0..4 {
                            dw[(o * c_in + c) * 4 + ab] = dt[(o * 4 + ab) * c_in + c];
                        }
                    }
                }
                Tensor::from_raw(ctx.inputs[1].shape(), dw)
            });
            vec![
                dx.map(|d| Tensor::from_raw(ctx.inputs[0].shape(), d)),
                dw,
                db.map(|d| Tensor::from_raw(ctx.inputs[2].shape(), d)),
            ]
        }),
    )
}
