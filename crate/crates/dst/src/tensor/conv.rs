//! Convolution-family kernels: 1-D/2-D convolution, transposed convolution,
//! and max pooling. Layout is channels-last throughout: activations are
//! `[H, W, C]` (or `[B, W, C]` for 1-D), kernels are `[kh, kw, Cin, Cout]`.
//! Inner loops run over the output-channel axis so they autovectorize.

use super::graph::{Graph, Op};
use super::{fmt_shape, NodeId, Real, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial extent `ceil(in / stride)`; zero padding split evenly,
    /// extra cell on the trailing side.
    Same,
    /// No padding; incomplete trailing windows are dropped (floor division).
    Valid,
}

/// 1-D convolution over `[B, W, Cin]`, stride 1, same padding.
#[derive(Debug, Clone)]
pub(crate) struct Conv1dGeo {
    pub b: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kw: usize,
    pub pad0: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGeo {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph0: usize,
    pub pw0: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Transposed convolution; the forward pass is exactly the gradient of a
/// `Conv2d` with the same geometry with respect to its input.
#[derive(Debug, Clone)]
pub struct Deconv2dGeo {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph0: usize,
    pub pw0: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Padding for one transposed-convolution axis, derived from the requested
/// output extent: `total = (in - 1) * stride + k - out`. A negative total
/// means the target is longer than the kernel's reach; the tail stays zero
/// (the matching forward convolution simply never read those cells).
fn deconv_pad(
    in_len: usize,
    k: usize,
    stride: usize,
    out_len: usize,
) -> Result<usize, TensorError> {
    let total = ((in_len - 1) * stride + k) as isize - out_len as isize;
    if total > 2 * (k as isize - 1) {
        return Err(TensorError::Geometry {
            op: "deconv2d",
            msg: format!(
                "output extent {out_len} unreachable from input {in_len} with kernel {k} stride {stride}"
            ),
        });
    }
    Ok((total.max(0) / 2) as usize)
}

impl<T: Real> Graph<T> {
    /// `x [B, W, Cin]`, `kernel [kw, Cin, Cout]` -> `[B, W, Cout]`; stride 1,
    /// same padding, optional fused bias and ReLU.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        relu: bool,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[1] {
            return Err(TensorError::DimMismatch {
                op: "conv1d",
                left: fmt_shape(xs),
                right: fmt_shape(ks),
            });
        }
        let geo = Conv1dGeo {
            b: xs[0],
            w: xs[1],
            cin: xs[2],
            cout: ks[2],
            kw: ks[0],
            pad0: (ks[0] - 1) / 2,
        };
        check_bias(self, bias, geo.cout, "conv1d")?;
        let mut out = vec![T::zero(); geo.b * geo.w * geo.cout];
        conv1d_forward(&geo, self.data(x), self.data(kernel), &mut out);
        finish(self, &mut out, bias, relu, geo.cout);
        let shape = vec![geo.b, geo.w, geo.cout];
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.out(shape, out, Op::Conv1d { geo, relu }, &parents))
    }

    /// `x [H, W, Cin]`, `kernel [kh, kw, Cin, Cout]` -> `[oh, ow, Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
        stride: (usize, usize),
        relu: bool,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != 3 || ks.len() != 4 || xs[2] != ks[2] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                left: fmt_shape(xs),
                right: fmt_shape(ks),
            });
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(TensorError::Geometry {
                op: "conv2d",
                msg: "zero stride".to_string(),
            });
        }
        let (oh, ow, ph0, pw0) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(sh);
                let ow = w.div_ceil(sw);
                let pt = ((oh - 1) * sh + kh).saturating_sub(h);
                let pl = ((ow - 1) * sw + kw).saturating_sub(w);
                (oh, ow, pt / 2, pl / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(TensorError::Geometry {
                        op: "conv2d",
                        msg: format!(
                            "kernel {kh}x{kw} larger than input {h}x{w} with valid padding"
                        ),
                    });
                }
                ((h - kh) / sh + 1, (w - kw) / sw + 1, 0, 0)
            }
        };
        let geo = Conv2dGeo {
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            sh,
            sw,
            ph0,
            pw0,
            oh,
            ow,
        };
        check_bias(self, bias, cout, "conv2d")?;
        let mut out = vec![T::zero(); oh * ow * cout];
        conv2d_forward(&geo, self.data(x), self.data(kernel), &mut out);
        finish(self, &mut out, bias, relu, cout);
        let shape = vec![oh, ow, cout];
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.out(shape, out, Op::Conv2d { geo, relu }, &parents))
    }

    /// Transposed convolution: `x [h, w, Cin]`, `kernel [kh, kw, Cin, Cout]`
    /// -> `[out_hw.0, out_hw.1, Cout]`. Padding is derived from the requested
    /// output extents; an unreachable extent is a geometry error.
    pub fn deconv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: (usize, usize),
        out_hw: (usize, usize),
        relu: bool,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != 3 || ks.len() != 4 || xs[2] != ks[2] {
            return Err(TensorError::DimMismatch {
                op: "deconv2d",
                left: fmt_shape(xs),
                right: fmt_shape(ks),
            });
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let (sh, sw) = stride;
        let (oh, ow) = out_hw;
        if sh == 0 || sw == 0 || oh == 0 || ow == 0 {
            return Err(TensorError::Geometry {
                op: "deconv2d",
                msg: "zero stride or output extent".to_string(),
            });
        }
        let ph0 = deconv_pad(h, kh, sh, oh)?;
        let pw0 = deconv_pad(w, kw, sw, ow)?;
        let geo = Deconv2dGeo {
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            sh,
            sw,
            ph0,
            pw0,
            oh,
            ow,
        };
        check_bias(self, bias, cout, "deconv2d")?;
        let mut out = vec![T::zero(); oh * ow * cout];
        deconv2d_forward(&geo, self.data(x), self.data(kernel), &mut out);
        finish(self, &mut out, bias, relu, cout);
        let shape = vec![oh, ow, cout];
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.out(shape, out, Op::Deconv2d { geo, relu }, &parents))
    }

    /// 2x2 max pool with stride 2 over `[H, W, C]`; incomplete edges are
    /// dropped (floor division). Ties resolve to the first cell in row-major
    /// order.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[0] < 2 || xs[1] < 2 {
            return Err(TensorError::Geometry {
                op: "maxpool2",
                msg: format!("input {} too small for a 2x2 window", fmt_shape(xs)),
            });
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = vec![T::zero(); oh * ow * c];
        let mut idx = vec![0u32; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = (oy * ow + ox) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let ibase = ((oy * 2 + dy) * w + (ox * 2 + dx)) * c;
                    for ch in 0..c {
                        let v = src[ibase + ch];
                        if (dy, dx) == (0, 0) || v > out[obase + ch] {
                            out[obase + ch] = v;
                            idx[obase + ch] = (ibase + ch) as u32;
                        }
                    }
                }
            }
        }
        Ok(self.out(vec![oh, ow, c], out, Op::MaxPool2 { idx }, &[x]))
    }

    /// Global max over the middle axis: `[B, W, C] -> [B, C]`.
    pub fn max_over_width(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(TensorError::Geometry {
                op: "max_over_width",
                msg: format!("expected rank 3, got {}", fmt_shape(xs)),
            });
        }
        let (b, w, c) = (xs[0], xs[1], xs[2]);
        let src = self.data(x);
        let mut out = vec![T::zero(); b * c];
        let mut idx = vec![0u32; b * c];
        for bi in 0..b {
            let obase = bi * c;
            for wi in 0..w {
                let ibase = (bi * w + wi) * c;
                for ch in 0..c {
                    let v = src[ibase + ch];
                    if wi == 0 || v > out[obase + ch] {
                        out[obase + ch] = v;
                        idx[obase + ch] = (ibase + ch) as u32;
                    }
                }
            }
        }
        Ok(self.out(vec![b, c], out, Op::MaxOverWidth { idx }, &[x]))
    }
}

fn check_bias<T: Real>(
    g: &Graph<T>,
    bias: Option<NodeId>,
    cout: usize,
    op: &'static str,
) -> Result<(), TensorError> {
    if let Some(b) = bias {
        if g.shape(b) != [cout] {
            return Err(TensorError::DimMismatch {
                op,
                left: format!("bias {}", fmt_shape(g.shape(b))),
                right: format!("{cout} output channels"),
            });
        }
    }
    Ok(())
}

fn finish<T: Real>(
    g: &Graph<T>,
    out: &mut [T],
    bias: Option<NodeId>,
    relu: bool,
    cout: usize,
) {
    if let Some(b) = bias {
        let bv = g.data(b);
        for chunk in out.chunks_exact_mut(cout) {
            for (o, &v) in chunk.iter_mut().zip(bv) {
                *o += v;
            }
        }
    }
    if relu {
        for o in out.iter_mut() {
            *o = o.max(T::zero());
        }
    }
}

/// Masks the output gradient by the fused ReLU if present.
fn relu_mask<'a, T: Real>(relu: bool, value: &[T], gout: &'a [T]) -> std::borrow::Cow<'a, [T]> {
    if relu {
        std::borrow::Cow::Owned(
            gout.iter()
                .zip(value)
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect(),
        )
    } else {
        std::borrow::Cow::Borrowed(gout)
    }
}

fn conv1d_forward<T: Real>(geo: &Conv1dGeo, x: &[T], k: &[T], out: &mut [T]) {
    let Conv1dGeo {
        b,
        w,
        cin,
        cout,
        kw,
        pad0,
    } = *geo;
    for bi in 0..b {
        for ow_i in 0..w {
            let obase = (bi * w + ow_i) * cout;
            let orow = &mut out[obase..obase + cout];
            for kx in 0..kw {
                let ix = (ow_i + kx) as isize - pad0 as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let ibase = (bi * w + ix as usize) * cin;
                let kbase = kx * cin * cout;
                for (ci, krow) in k[kbase..kbase + cin * cout].chunks_exact(cout).enumerate() {
                    let v = x[ibase + ci];
                    for (o, &kv) in orow.iter_mut().zip(krow) {
                        *o += v * kv;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_backward<T: Real>(
    geo: &Conv1dGeo,
    relu: bool,
    value: &[T],
    x: &[T],
    k: &[T],
    gout: &[T],
    needs: [bool; 3],
    emit: &mut impl FnMut(usize, Vec<T>),
) {
    let Conv1dGeo {
        b,
        w,
        cin,
        cout,
        kw,
        pad0,
    } = *geo;
    let g = relu_mask(relu, value, gout);
    let [need_x, need_k, need_b] = needs;
    let mut dx = if need_x { vec![T::zero(); x.len()] } else { vec![] };
    let mut dk = if need_k { vec![T::zero(); k.len()] } else { vec![] };
    for bi in 0..b {
        for ow_i in 0..w {
            let obase = (bi * w + ow_i) * cout;
            let grow = &g[obase..obase + cout];
            for kx in 0..kw {
                let ix = (ow_i + kx) as isize - pad0 as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let ibase = (bi * w + ix as usize) * cin;
                let kbase = kx * cin * cout;
                for ci in 0..cin {
                    let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                    if need_x {
                        dx[ibase + ci] += grow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                    }
                    if need_k {
                        let v = x[ibase + ci];
                        let dkrow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (d, &gv) in dkrow.iter_mut().zip(grow) {
                            *d += v * gv;
                        }
                    }
                }
            }
        }
    }
    if need_x {
        emit(0, dx);
    }
    if need_k {
        emit(1, dk);
    }
    if need_b {
        emit(2, bias_grad(&g, cout));
    }
}

fn conv2d_forward<T: Real>(geo: &Conv2dGeo, x: &[T], k: &[T], out: &mut [T]) {
    let Conv2dGeo {
        h,
        w,
        cin,
        cout,
        kh,
        kw,
        sh,
        sw,
        ph0,
        pw0,
        oh,
        ow,
    } = *geo;
    for oy in 0..oh {
        for ky in 0..kh {
            let iy = (oy * sh + ky) as isize - ph0 as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..ow {
                let obase = (oy * ow + ox) * cout;
                for kx in 0..kw {
                    let ix = (ox * sw + kx) as isize - pw0 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy * w + ix as usize) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    let orow = &mut out[obase..obase + cout];
                    for (ci, krow) in
                        k[kbase..kbase + cin * cout].chunks_exact(cout).enumerate()
                    {
                        let v = x[ibase + ci];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += v * kv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Real>(
    geo: &Conv2dGeo,
    relu: bool,
    value: &[T],
    x: &[T],
    k: &[T],
    gout: &[T],
    needs: [bool; 3],
    emit: &mut impl FnMut(usize, Vec<T>),
) {
    let Conv2dGeo {
        h,
        w,
        cin,
        cout,
        kh,
        kw,
        sh,
        sw,
        ph0,
        pw0,
        oh,
        ow,
    } = *geo;
    let g = relu_mask(relu, value, gout);
    let [need_x, need_k, need_b] = needs;
    let mut dx = if need_x { vec![T::zero(); x.len()] } else { vec![] };
    let mut dk = if need_k { vec![T::zero(); k.len()] } else { vec![] };
    for oy in 0..oh {
        for ky in 0..kh {
            let iy = (oy * sh + ky) as isize - ph0 as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..ow {
                let obase = (oy * ow + ox) * cout;
                let grow = &g[obase..obase + cout];
                for kx in 0..kw {
                    let ix = (ox * sw + kx) as isize - pw0 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy * w + ix as usize) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        if need_x {
                            dx[ibase + ci] +=
                                grow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                        }
                        if need_k {
                            let v = x[ibase + ci];
                            let dkrow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (d, &gv) in dkrow.iter_mut().zip(grow) {
                                *d += v * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    if need_x {
        emit(0, dx);
    }
    if need_k {
        emit(1, dk);
    }
    if need_b {
        emit(2, bias_grad(&g, cout));
    }
}

fn deconv2d_forward<T: Real>(geo: &Deconv2dGeo, x: &[T], k: &[T], out: &mut [T]) {
    let Deconv2dGeo {
        h,
        w,
        cin,
        cout,
        kh,
        kw,
        sh,
        sw,
        ph0,
        pw0,
        oh,
        ow,
    } = *geo;
    for iy in 0..h {
        for ky in 0..kh {
            let oy = (iy * sh + ky) as isize - ph0 as isize;
            if oy < 0 || oy >= oh as isize {
                continue;
            }
            let oy = oy as usize;
            for ix in 0..w {
                let ibase = (iy * w + ix) * cin;
                for kx in 0..kw {
                    let ox = (ix * sw + kx) as isize - pw0 as isize;
                    if ox < 0 || ox >= ow as isize {
                        continue;
                    }
                    let obase = (oy * ow + ox as usize) * cout;
                    let kbase = (ky * kw + kx) * cin * cout;
                    let orow = &mut out[obase..obase + cout];
                    for (ci, krow) in
                        k[kbase..kbase + cin * cout].chunks_exact(cout).enumerate()
                    {
                        let v = x[ibase + ci];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += v * kv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn deconv2d_backward<T: Real>(
    geo: &Deconv2dGeo,
    relu: bool,
    value: &[T],
    x: &[T],
    k: &[T],
    gout: &[T],
    needs: [bool; 3],
    emit: &mut impl FnMut(usize, Vec<T>),
) {
    let Deconv2dGeo {
        h,
        w,
        cin,
        cout,
        kh,
        kw,
        sh,
        sw,
        ph0,
        pw0,
        oh,
        ow,
    } = *geo;
    let g = relu_mask(relu, value, gout);
    let [need_x, need_k, need_b] = needs;
    let mut dx = if need_x { vec![T::zero(); x.len()] } else { vec![] };
    let mut dk = if need_k { vec![T::zero(); k.len()] } else { vec![] };
    for iy in 0..h {
        for ky in 0..kh {
            let oy = (iy * sh + ky) as isize - ph0 as isize;
            if oy < 0 || oy >= oh as isize {
                continue;
            }
            let oy = oy as usize;
            for ix in 0..w {
                let ibase = (iy * w + ix) * cin;
                for kx in 0..kw {
                    let ox = (ix * sw + kx) as isize - pw0 as isize;
                    if ox < 0 || ox >= ow as isize {
                        continue;
                    }
                    let obase = (oy * ow + ox as usize) * cout;
                    let kbase = (ky * kw + kx) * cin * cout;
                    let grow = &g[obase..obase + cout];
                    for ci in 0..cin {
                        let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        if need_x {
                            dx[ibase + ci] +=
                                grow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                        }
                        if need_k {
                            let v = x[ibase + ci];
                            let dkrow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (d, &gv) in dkrow.iter_mut().zip(grow) {
                                *d += v * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    if need_x {
        emit(0, dx);
    }
    if need_k {
        emit(1, dk);
    }
    if need_b {
        emit(2, bias_grad(&g, cout));
    }
}

fn bias_grad<T: Real>(g: &[T], cout: usize) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for chunk in g.chunks_exact(cout) {
        for (d, &gv) in db.iter_mut().zip(chunk) {
            *d += gv;
        }
    }
    db
}
