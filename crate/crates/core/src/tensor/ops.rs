//! Differentiable array operations recorded on a [`Tape`](super::Tape).

use std::rc::Rc;

use super::{Scalar, Tensor, Var};
use crate::error::ShapeError;

/// Stride, zero padding and dilation of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        ConvOpts {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvOpts {
    pub fn same(padding: usize) -> Self {
        ConvOpts {
            padding,
            ..Default::default()
        }
    }

    pub fn atrous(rate: usize) -> Self {
        ConvOpts {
            stride: 1,
            padding: rate,
            dilation: rate,
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    opts: ConvOpts,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }
}

/// Unfold one (c, h, w) image into a (c·kh·kw, oh·ow) column matrix.
fn im2col<T: Scalar>(src: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ConvOpts {
        stride,
        padding,
        dilation,
    } = g.opts;
    let p = g.p();
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a (c, h, w) image.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dst: &mut [T]) {
    let ConvOpts {
        stride,
        padding,
        dilation,
    } = g.opts;
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out_extent(
    op: &'static str,
    axis: &'static str,
    size: usize,
    k: usize,
    o: ConvOpts,
) -> Result<usize, ShapeError> {
    let span = o.dilation * (k - 1) + 1;
    if size + 2 * o.padding < span {
        return Err(ShapeError::Argument {
            op,
            msg: format!(
                "{axis} extent {size} (padding {}) is smaller than the dilated kernel span {span}",
                o.padding
            ),
        });
    }
    Ok((size + 2 * o.padding - span) / o.stride + 1)
}

fn check_opts(op: &'static str, o: ConvOpts) -> Result<(), ShapeError> {
    if o.stride == 0 || o.dilation == 0 {
        return Err(ShapeError::Argument {
            op,
            msg: format!(
                "stride ({}) and dilation ({}) must be >= 1",
                o.stride, o.dilation
            ),
        });
    }
    Ok(())
}

fn check_bias<T: Scalar>(
    op: &'static str,
    bias: Option<&Var<'_, T>>,
    channels: usize,
) -> Result<(), ShapeError> {
    if let Some(b) = bias {
        let shape = b.shape();
        if shape != [channels] {
            return Err(ShapeError::Incompatible {
                op,
                left: vec![channels],
                right: shape,
            });
        }
    }
    Ok(())
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dy.dims4("bias").expect("4-d gradient");
    let hw = h * w;
    let mut db = Tensor::zeros([c]);
    for i in 0..n {
        for (ch, slot) in db.data_mut().iter_mut().enumerate() {
            let start = (i * c + ch) * hw;
            *slot += dy.data()[start..start + hw]
                .iter()
                .fold(T::zero(), |a, &b| a + b);
        }
    }
    db
}

fn same_shape<T: Scalar>(
    op: &'static str,
    a: &Var<'_, T>,
    b: &Var<'_, T>,
) -> Result<(), ShapeError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(ShapeError::Incompatible {
            op,
            left: sa,
            right: sb,
        });
    }
    Ok(())
}

/// Output of [`Var::batch_norm`]: the normalized activations and the running
/// statistics to carry forward (unchanged in eval mode).
pub struct BatchNormOut<'t, T: Scalar> {
    pub out: Var<'t, T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, ShapeError> {
        same_shape("add", self, other)?;
        let (a, b) = (self.value(), other.value());
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape().op(out, &[*self, *other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, ShapeError> {
        same_shape("mul", self, other)?;
        let (a, b) = (self.value(), other.value());
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape().op(out, &[*self, *other], move |g, needs| {
            let da = needs[0].then(|| {
                let d = g
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                Tensor::new(g.shape().to_vec(), d).expect("same shape")
            });
            let db = needs[1].then(|| {
                let d = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                Tensor::new(g.shape().to_vec(), d).expect("same shape")
            });
            vec![da, db]
        }))
    }

    pub fn scale(&self, factor: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * factor);
        self.tape()
            .op(out, &[*self], move |g, _| vec![Some(g.map(|v| v * factor))])
    }

    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape().op(out, &[*self], move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(
                Tensor::new(g.shape().to_vec(), d).expect("same shape"),
            )]
        })
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape()
            .op(Tensor::scalar(x.sum()), &[*self], move |g, _| {
                vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
            })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::of(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// 2-d convolution; `weight` is (cout, cin, kh, kw). Dilation > 1 gives
    /// atrous convolution.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        opts: ConvOpts,
    ) -> Result<Var<'t, T>, ShapeError> {
        const OP: &str = "conv2d";
        check_opts(OP, opts)?;
        let x = self.value();
        let wt = weight.value();
        let [n, cin, h, w] = x.dims4(OP)?;
        let [cout, wcin, kh, kw] = wt.dims4(OP)?;
        if wcin != cin {
            return Err(ShapeError::Axis {
                op: OP,
                axis: "input channel",
                left: cin,
                right: wcin,
            });
        }
        check_bias(OP, bias, cout)?;
        let g = ConvGeom {
            c: cin,
            h,
            w,
            kh,
            kw,
            oh: conv_out_extent(OP, "height", h, kh, opts)?,
            ow: conv_out_extent(OP, "width", w, kw, opts)?,
            opts,
        };
        let (k, p) = (g.k(), g.p());
        let mut out = Tensor::zeros([n, cout, g.oh, g.ow]);
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        let img = cin * h * w;
        for i in 0..n {
            let src = &x.data()[i * img..(i + 1) * img];
            let cols_ref: &[T] = if g.is_pointwise() {
                src
            } else {
                im2col(src, &g, &mut cols);
                &cols
            };
            let dst = &mut out.data_mut()[i * cout * p..(i + 1) * cout * p];
            T::gemm(
                cout,
                k,
                p,
                T::one(),
                wt.data(),
                (k as isize, 1),
                cols_ref,
                (p as isize, 1),
                T::zero(),
                dst,
                (p as isize, 1),
            );
        }
        let mut parents = vec![*self, *weight];
        if let Some(b) = bias {
            let bv = b.value();
            for (j, chunk) in out.data_mut().chunks_mut(p).enumerate() {
                let bj = bv.data()[j % cout];
                chunk.iter_mut().for_each(|v| *v += bj);
            }
            parents.push(*b);
        }
        let has_bias = bias.is_some();
        Ok(self.tape().op(out, &parents, move |dy, needs| {
            let mut dx = needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
            let mut dw = needs[1].then(|| Tensor::zeros(wt.shape().to_vec()));
            let mut cols = vec![T::zero(); k * p];
            let mut dcols = vec![T::zero(); k * p];
            for i in 0..n {
                let dyi = &dy.data()[i * cout * p..(i + 1) * cout * p];
                let src = &x.data()[i * img..(i + 1) * img];
                if let Some(dw) = dw.as_mut() {
                    let cols_ref: &[T] = if g.is_pointwise() {
                        src
                    } else {
                        im2col(src, &g, &mut cols);
                        &cols
                    };
                    // dW += dY · colsᵀ
                    T::gemm(
                        cout,
                        p,
                        k,
                        T::one(),
                        dyi,
                        (p as isize, 1),
                        cols_ref,
                        (1, p as isize),
                        T::one(),
                        dw.data_mut(),
                        (k as isize, 1),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx.data_mut()[i * img..(i + 1) * img];
                    if g.is_pointwise() {
                        T::gemm(
                            k,
                            cout,
                            p,
                            T::one(),
                            wt.data(),
                            (1, k as isize),
                            dyi,
                            (p as isize, 1),
                            T::zero(),
                            dst,
                            (p as isize, 1),
                        );
                    } else {
                        T::gemm(
                            k,
                            cout,
                            p,
                            T::one(),
                            wt.data(),
                            (1, k as isize),
                            dyi,
                            (p as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (p as isize, 1),
                        );
                        col2im(&dcols, &g, dst);
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| bias_grad(dy)));
            }
            grads
        }))
    }

    /// Transposed convolution; `weight` is (cin, cout, kh, kw). This is the
    /// exact adjoint of [`Var::conv2d`] with the same weight, stride and padding.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>, ShapeError> {
        const OP: &str = "conv_transpose2d";
        let opts = ConvOpts {
            stride,
            padding,
            dilation: 1,
        };
        check_opts(OP, opts)?;
        let x = self.value();
        let wt = weight.value();
        let [n, cin, h, w] = x.dims4(OP)?;
        let [wcin, cout, kh, kw] = wt.dims4(OP)?;
        if wcin != cin {
            return Err(ShapeError::Axis {
                op: OP,
                axis: "input channel",
                left: cin,
                right: wcin,
            });
        }
        check_bias(OP, bias, cout)?;
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(ShapeError::Argument {
                op: OP,
                msg: format!("padding {padding} leaves an empty output"),
            });
        }
        let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
        // Geometry of the forward conv whose adjoint this is: it maps the
        // (cout, oh, ow) output back onto the (h, w) input grid.
        let g = ConvGeom {
            c: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            oh: h,
            ow: w,
            opts,
        };
        let (k, p) = (g.k(), g.p());
        let out_img = cout * oh * ow;
        let in_img = cin * p;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let mut cols = vec![T::zero(); k * p];
        for i in 0..n {
            let src = &x.data()[i * in_img..(i + 1) * in_img];
            // cols = Wᵀ · x, W viewed as (cin, cout·kh·kw)
            T::gemm(
                k,
                cin,
                p,
                T::one(),
                wt.data(),
                (1, k as isize),
                src,
                (p as isize, 1),
                T::zero(),
                &mut cols,
                (p as isize, 1),
            );
            col2im(
                &cols,
                &g,
                &mut out.data_mut()[i * out_img..(i + 1) * out_img],
            );
        }
        let mut parents = vec![*self, *weight];
        if let Some(b) = bias {
            let bv = b.value();
            let hw = oh * ow;
            for (j, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let bj = bv.data()[j % cout];
                chunk.iter_mut().for_each(|v| *v += bj);
            }
            parents.push(*b);
        }
        let has_bias = bias.is_some();
        Ok(self.tape().op(out, &parents, move |dy, needs| {
            let mut dx = needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
            let mut dw = needs[1].then(|| Tensor::zeros(wt.shape().to_vec()));
            let mut cols = vec![T::zero(); k * p];
            for i in 0..n {
                im2col(&dy.data()[i * out_img..(i + 1) * out_img], &g, &mut cols);
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx.data_mut()[i * in_img..(i + 1) * in_img];
                    T::gemm(
                        cin,
                        k,
                        p,
                        T::one(),
                        wt.data(),
                        (k as isize, 1),
                        &cols,
                        (p as isize, 1),
                        T::zero(),
                        dst,
                        (p as isize, 1),
                    );
                }
                if let Some(dw) = dw.as_mut() {
                    let src = &x.data()[i * in_img..(i + 1) * in_img];
                    T::gemm(
                        cin,
                        p,
                        k,
                        T::one(),
                        src,
                        (p as isize, 1),
                        &cols,
                        (1, p as isize),
                        T::one(),
                        dw.data_mut(),
                        (k as isize, 1),
                    );
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| bias_grad(dy)));
            }
            grads
        }))
    }

    /// Max pooling with floor semantics; ties route the gradient to the first
    /// maximal element in row-major window order.
    pub fn maxpool2d(&self, k: usize, stride: usize) -> Result<Var<'t, T>, ShapeError> {
        const OP: &str = "maxpool2d";
        let x = self.value();
        let [n, c, h, w] = x.dims4(OP)?;
        if k == 0 || stride == 0 {
            return Err(ShapeError::Argument {
                op: OP,
                msg: "kernel and stride must be >= 1".into(),
            });
        }
        if k > h || k > w {
            return Err(ShapeError::Argument {
                op: OP,
                msg: format!("kernel {k} exceeds spatial size {h}x{w}"),
            });
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x.data()[idx] > x.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = x.data()[best];
                    arg[o] = best;
                }
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.tape().op(out, &[*self], move |g, _| {
            let mut dx = Tensor::zeros(in_shape.clone());
            for (o, &src) in arg.iter().enumerate() {
                dx.data_mut()[src] += g.data()[o];
            }
            vec![Some(dx)]
        }))
    }

    /// Bilinear resize with the half-pixel (align_corners = false) convention.
    pub fn bilinear_upsample(&self, out_h: usize, out_w: usize) -> Result<Var<'t, T>, ShapeError> {
        const OP: &str = "bilinear_upsample";
        if out_h == 0 || out_w == 0 {
            return Err(ShapeError::Argument {
                op: OP,
                msg: format!("output size {out_h}x{out_w} must be positive"),
            });
        }
        let x = self.value();
        let [n, c, h, w] = x.dims4(OP)?;
        let ys = Rc::new(interp_taps::<T>(h, out_h));
        let xs = Rc::new(interp_taps::<T>(w, out_w));
        let mut out = Tensor::zeros([n, c, out_h, out_w]);
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data_mut()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, ty) in ys.iter().enumerate() {
                for (ox, tx) in xs.iter().enumerate() {
                    let top = src[ty.lo * w + tx.lo] * tx.w_lo + src[ty.lo * w + tx.hi] * tx.w_hi;
                    let bot = src[ty.hi * w + tx.lo] * tx.w_lo + src[ty.hi * w + tx.hi] * tx.w_hi;
                    dst[oy * out_w + ox] = top * ty.w_lo + bot * ty.w_hi;
                }
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.tape().op(out, &[*self], move |g, _| {
            let mut dx = Tensor::zeros(in_shape.clone());
            for plane in 0..n * c {
                let gsrc = &g.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
                for (oy, ty) in ys.iter().enumerate() {
                    for (ox, tx) in xs.iter().enumerate() {
                        let gv = gsrc[oy * out_w + ox];
                        dst[ty.lo * w + tx.lo] += gv * ty.w_lo * tx.w_lo;
                        dst[ty.lo * w + tx.hi] += gv * ty.w_lo * tx.w_hi;
                        dst[ty.hi * w + tx.lo] += gv * ty.w_hi * tx.w_lo;
                        dst[ty.hi * w + tx.hi] += gv * ty.w_hi * tx.w_hi;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Per-channel batch normalization. Training mode normalizes with batch
    /// statistics and blends them into the running ones as
    /// `momentum · running + (1 − momentum) · batch` (unbiased batch variance);
    /// eval mode uses the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        training: bool,
        momentum: T,
        eps: T,
    ) -> Result<BatchNormOut<'t, T>, ShapeError> {
        const OP: &str = "batch_norm";
        let x = self.value();
        let [n, c, h, w] = x.dims4(OP)?;
        for (name, len) in [
            ("gamma", gamma.shape()),
            ("beta", beta.shape()),
            ("running mean", running_mean.shape().to_vec()),
            ("running var", running_var.shape().to_vec()),
        ] {
            if len != [c] {
                return Err(ShapeError::Argument {
                    op: OP,
                    msg: format!("{name} has shape {len:?}, expected [{c}]"),
                });
            }
        }
        let hw = h * w;
        let m = n * hw;
        let (mean, var) = if training {
            if m < 2 {
                return Err(ShapeError::Argument {
                    op: OP,
                    msg: "training mode needs more than one value per channel".into(),
                });
            }
            channel_moments(&x, n, c, hw)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = gamma.value();
        let bv = beta.value();
        let mut xhat = Tensor::zeros(x.shape().to_vec());
        let mut out = Tensor::zeros(x.shape().to_vec());
        for i in 0..n {
            for ch in 0..c {
                let s = (i * c + ch) * hw;
                for j in s..s + hw {
                    let xh = (x.data()[j] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[j] = xh;
                    out.data_mut()[j] = gv.data()[ch] * xh + bv.data()[ch];
                }
            }
        }
        let (new_mean, new_var) = if training {
            let unbias = T::of(m as f64 / (m - 1) as f64);
            let keep = T::one() - momentum;
            let rm = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| momentum * r + keep * b)
                .collect();
            let rv = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| momentum * r + keep * b * unbias)
                .collect();
            (Tensor::new([c], rm)?, Tensor::new([c], rv)?)
        } else {
            (running_mean.clone(), running_var.clone())
        };
        let mf = T::of(m as f64);
        let var_out = self
            .tape()
            .op(out, &[*self, *gamma, *beta], move |dy, needs| {
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let s = (i * c + ch) * hw;
                        for j in s..s + hw {
                            sum_dy[ch] += dy.data()[j];
                            sum_dy_xhat[ch] += dy.data()[j] * xhat.data()[j];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(xhat.shape().to_vec());
                    for i in 0..n {
                        for ch in 0..c {
                            let s = (i * c + ch) * hw;
                            let scale = gv.data()[ch] * inv_std[ch];
                            for j in s..s + hw {
                                dx.data_mut()[j] = if training {
                                    scale / mf
                                        * (mf * dy.data()[j]
                                            - sum_dy[ch]
                                            - xhat.data()[j] * sum_dy_xhat[ch])
                                } else {
                                    scale * dy.data()[j]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    Some(Tensor::new([c], sum_dy_xhat).expect("c")),
                    Some(Tensor::new([c], sum_dy).expect("c")),
                ]
            });
        Ok(BatchNormOut {
            out: var_out,
            running_mean: new_mean,
            running_var: new_var,
        })
    }

    /// Softmax over the channel axis of an (n, c, h, w) tensor.
    pub fn softmax_channels(&self) -> Result<Var<'t, T>, ShapeError> {
        let x = self.value();
        let [n, c, h, w] = x.dims4("softmax_channels")?;
        let probs = softmax_channels_raw(&x, n, c, h * w);
        let p = Rc::new(probs.clone());
        Ok(self.tape().op(probs, &[*self], move |g, _| {
            let hw = h * w;
            let mut dx = Tensor::zeros(p.shape().to_vec());
            for i in 0..n {
                for j in 0..hw {
                    let idx = |ch: usize| (i * c + ch) * hw + j;
                    let dot =
                        (0..c).fold(T::zero(), |a, ch| a + p.data()[idx(ch)] * g.data()[idx(ch)]);
                    for ch in 0..c {
                        dx.data_mut()[idx(ch)] = p.data()[idx(ch)] * (g.data()[idx(ch)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Concatenate along the channel axis; all other extents must agree.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>, ShapeError> {
        const OP: &str = "concat_channels";
        let first = parts.first().ok_or(ShapeError::Argument {
            op: OP,
            msg: "nothing to concatenate".into(),
        })?;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let [n, _, h, w] = values[0].dims4(OP)?;
        let mut chans = Vec::with_capacity(parts.len());
        for v in &values {
            let [vn, vc, vh, vw] = v.dims4(OP)?;
            for (axis, a, b) in [("batch", n, vn), ("height", h, vh), ("width", w, vw)] {
                if a != b {
                    return Err(ShapeError::Axis {
                        op: OP,
                        axis,
                        left: a,
                        right: b,
                    });
                }
            }
            chans.push(vc);
        }
        let hw = h * w;
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(n * total * hw);
        for i in 0..n {
            for (v, &c) in values.iter().zip(&chans) {
                data.extend_from_slice(&v.data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        let out = Tensor::new([n, total, h, w], data)?;
        Ok(first.tape().op(out, parts, move |g, needs| {
            let mut offset = 0;
            chans
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = offset;
                    offset += c;
                    need.then(|| {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for i in 0..n {
                            let s = (i * total + start) * hw;
                            d.extend_from_slice(&g.data()[s..s + c * hw]);
                        }
                        Tensor::new([n, c, h, w], d).expect("slice shape")
                    })
                })
                .collect()
        }))
    }

    /// Spatial mean per channel: (n, c, h, w) → (n, c, 1, 1).
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>, ShapeError> {
        let x = self.value();
        let [n, c, h, w] = x.dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().fold(T::zero(), |a, &b| a + b) * inv)
            .collect();
        let out = Tensor::new([n, c, 1, 1], data)?;
        Ok(self.tape().op(out, &[*self], move |g, _| {
            let mut dx = Tensor::zeros([n, c, h, w]);
            for (plane, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                chunk.fill(g.data()[plane] * inv);
            }
            vec![Some(dx)]
        }))
    }
}

/// Per-channel mean and biased variance over (n, h, w).
fn channel_moments<T: Scalar>(x: &Tensor<T>, n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let m = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let st = (i * c + ch) * hw;
            s = x.data()[st..st + hw].iter().fold(s, |a, &b| a + b);
        }
        mean[ch] = s / m;
        let mut v = T::zero();
        for i in 0..n {
            let st = (i * c + ch) * hw;
            v = x.data()[st..st + hw]
                .iter()
                .fold(v, |a, &b| a + (b - mean[ch]) * (b - mean[ch]));
        }
        var[ch] = v / m;
    }
    (mean, var)
}

/// Numerically stable channel softmax on a raw tensor.
pub(crate) fn softmax_channels_raw<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    c: usize,
    hw: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..n {
        for j in 0..hw {
            let idx = |ch: usize| (i * c + ch) * hw + j;
            let max = (0..c).fold(T::neg_infinity(), |m, ch| m.max(x.data()[idx(ch)]));
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x.data()[idx(ch)] - max).exp();
                out.data_mut()[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out.data_mut()[idx(ch)] = out.data()[idx(ch)] / z;
            }
        }
    }
    out
}

struct Tap<T> {
    lo: usize,
    hi: usize,
    w_lo: T,
    w_hi: T,
}

fn interp_taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: T::of(1.0 - frac),
                w_hi: T::of(frac),
            }
        })
        .collect()
}
