//! Direct (im2col + GEMM) convolution, its transpose, and the causal depthwise
//! 1-D convolution used inside the Mamba branch.
//!
//! Spatial ranks 1..=3 are handled by left-padding the spatial shape to three
//! axes with unit extents.

use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - 1) * stride + kernel
}

/// Geometry of a forward convolution `(B, cin, input) -> (B, cout, output)`.
///
/// A transposed convolution reuses the geometry of the convolution it is the
/// adjoint of, with `input`/`output` swapped in meaning.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl ConvGeom {
    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
    fn is_pointwise(&self) -> bool {
        self.kvol() == 1 && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

pub(crate) struct ConvCtx {
    pub(crate) x: Var,
    pub(crate) w: Var,
    pub(crate) b: Option<Var>,
    geom: ConvGeom,
}

fn pad3(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

/// Unfolds one sample `(cin, D, H, W)` into `(cin·kvol, out_vol)` columns.
fn im2col<E: Element>(x: &[E], geom: &ConvGeom, cols: &mut [E]) {
    let [id, ih, iw] = geom.input;
    let [od, oh, ow] = geom.output;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let ovol = od * oh * ow;
    let mut row = 0;
    for c in 0..geom.cin {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * ovol..(row + 1) * ovol];
                    let mut p = 0;
                    for z in 0..od {
                        let iz = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let iy = (y * sh + b) as isize - ph as isize;
                            let inside_zy = iz >= 0 && (iz as usize) < id && iy >= 0 && (iy as usize) < ih;
                            if !inside_zy {
                                dst[p..p + ow].iter_mut().for_each(|v| *v = E::ZERO);
                                p += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for xo in 0..ow {
                                let ix = (xo * sw + e) as isize - pw as isize;
                                dst[p] = if ix >= 0 && (ix as usize) < iw {
                                    xc[base + ix as usize]
                                } else {
                                    E::ZERO
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<E: Element>(cols: &[E], geom: &ConvGeom, x: &mut [E]) {
    let [id, ih, iw] = geom.input;
    let [od, oh, ow] = geom.output;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let ovol = od * oh * ow;
    let mut row = 0;
    for c in 0..geom.cin {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * ovol..(row + 1) * ovol];
                    let mut p = 0;
                    for z in 0..od {
                        let iz = (z * sd + a) as isize - pd as isize;
                        for y in 0..oh {
                            let iy = (y * sh + b) as isize - ph as isize;
                            if !(iz >= 0 && (iz as usize) < id && iy >= 0 && (iy as usize) < ih) {
                                p += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for xo in 0..ow {
                                let ix = (xo * sw + e) as isize - pw as isize;
                                if ix >= 0 && (ix as usize) < iw {
                                    xc[base + ix as usize] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<E: Element> Graph<E> {
    /// N-d cross-correlation. `x: (B, cin, s...)`, `w: (cout, cin, k...)`, `b: (cout)`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: &[usize], pad: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let rank = xs.len().saturating_sub(2);
        if !(1..=3).contains(&rank) {
            return Err(Error::dim("conv", format!("input {xs:?} must have 1 to 3 spatial axes")));
        }
        if ws.len() != xs.len() {
            return Err(Error::dim("conv", format!("kernel {ws:?} rank does not match input {xs:?}")));
        }
        if ws[1] != xs[1] {
            return Err(Error::dim(
                "conv",
                format!("axis 1: input has {} channels, kernel expects {}", xs[1], ws[1]),
            ));
        }
        if stride.len() != rank || pad.len() != rank {
            return Err(Error::dim("conv", "stride/padding length differs from spatial rank"));
        }
        let mut out_sp = Vec::with_capacity(rank);
        for ax in 0..rank {
            let o = conv_out_extent(xs[2 + ax], ws[2 + ax], stride[ax], pad[ax]).ok_or_else(|| {
                Error::dim(
                    "conv",
                    format!(
                        "axis {}: kernel {} exceeds padded extent {}",
                        2 + ax,
                        ws[2 + ax],
                        xs[2 + ax] + 2 * pad[ax]
                    ),
                )
            })?;
            out_sp.push(o);
        }
        self.check_bias("conv", b, ws[0])?;
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            input: pad3(&xs[2..], 1),
            output: pad3(&out_sp, 1),
            kernel: pad3(&ws[2..], 1),
            stride: pad3(stride, 1),
            pad: pad3(pad, 0),
        };
        let mut out = vec![E::ZERO; geom.batch * geom.cout * geom.out_vol()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let rows = geom.cin * geom.kvol();
            let (ivol, ovol) = (geom.in_vol(), geom.out_vol());
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![E::ZERO; rows * ovol] };
            for n in 0..geom.batch {
                let xb = &xv[n * geom.cin * ivol..(n + 1) * geom.cin * ivol];
                let ob = &mut out[n * geom.cout * ovol..(n + 1) * geom.cout * ovol];
                let src: &[E] = if geom.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geom, &mut cols);
                    &cols
                };
                gemm(geom.cout, rows, ovol, wv, false, src, false, ob, false);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data(), geom.batch, geom.cout, ovol);
            }
        }
        let mut shape = vec![geom.batch, geom.cout];
        shape.extend(&out_sp);
        let out = Tensor::from_vec(&shape, out)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, rg, Op::Conv(ConvCtx { x, w, b, geom })))
    }

    /// Transposed convolution without padding. `x: (B, cin, s...)`, `w: (cin, cout, k...)`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let rank = xs.len().saturating_sub(2);
        if !(1..=3).contains(&rank) || ws.len() != xs.len() || stride.len() != rank {
            return Err(Error::dim(
                "conv_transpose",
                format!("input {xs:?}, kernel {ws:?}, stride {stride:?} are inconsistent"),
            ));
        }
        if ws[0] != xs[1] {
            return Err(Error::dim(
                "conv_transpose",
                format!("axis 1: input has {} channels, kernel expects {}", xs[1], ws[0]),
            ));
        }
        if stride.contains(&0) {
            return Err(Error::contract("conv_transpose", "stride must be >= 1"));
        }
        self.check_bias("conv_transpose", b, ws[1])?;
        let out_sp: Vec<usize> = (0..rank)
            .map(|ax| conv_transpose_out_extent(xs[2 + ax], ws[2 + ax], stride[ax]))
            .collect();
        // Geometry of the adjoint convolution: out_sp -> xs spatial, cout -> cin.
        let geom = ConvGeom {
            batch: xs[0],
            cin: ws[1],
            cout: ws[0],
            input: pad3(&out_sp, 1),
            output: pad3(&xs[2..], 1),
            kernel: pad3(&ws[2..], 1),
            stride: pad3(stride, 1),
            pad: [0; 3],
        };
        let (ivol, ovol) = (geom.in_vol(), geom.out_vol());
        let rows = geom.cin * geom.kvol();
        let mut out = vec![E::ZERO; geom.batch * geom.cin * ivol];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = vec![E::ZERO; rows * ovol];
            for n in 0..geom.batch {
                let xb = &xv[n * geom.cout * ovol..(n + 1) * geom.cout * ovol];
                // cols = Wᵀ · x_b, W viewed as (cout_adj, cin_adj·kvol)
                gemm(rows, geom.cout, ovol, wv, true, xb, false, &mut cols, false);
                col2im(&cols, &geom, &mut out[n * geom.cin * ivol..(n + 1) * geom.cin * ivol]);
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data(), geom.batch, geom.cin, ivol);
            }
        }
        let mut shape = vec![geom.batch, geom.cin];
        shape.extend(&out_sp);
        let out = Tensor::from_vec(&shape, out)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, rg, Op::ConvTranspose(ConvCtx { x, w, b, geom })))
    }

    /// Depthwise causal convolution over the sequence axis of `x: (B, L, C)`.
    ///
    /// `w: (C, K)`, `b: (C)`; output position `t` sees inputs `t-K+1 ..= t` (zero left-padding).
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || self.shape(b) != [xs[2]] {
            return Err(Error::dim(
                "causal_conv1d",
                format!("input {xs:?}, kernel {ws:?}, bias {:?} do not conform", self.shape(b)),
            ));
        }
        let (bsz, len, ch) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![E::ZERO; bsz * len * ch];
        for n in 0..bsz {
            for t in 0..len {
                let o = &mut out[(n * len + t) * ch..(n * len + t + 1) * ch];
                o.copy_from_slice(bv);
                for j in 0..k {
                    let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                    let xin = &xv[(n * len + src_t) * ch..(n * len + src_t + 1) * ch];
                    for c in 0..ch {
                        o[c] += wv[c * k + j] * xin[c];
                    }
                }
            }
        }
        let out = Tensor::from_vec(&xs, out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, Op::CausalConv1d { x, w, b }))
    }

    pub(crate) fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(Error::dim(
                    op,
                    format!("bias shape {:?} != [{channels}]", self.shape(b)),
                ));
            }
        }
        Ok(())
    }
}

fn add_channel_bias<E: Element>(out: &mut [E], bias: &[E], batch: usize, ch: usize, vol: usize) {
    for n in 0..batch {
        for c in 0..ch {
            let bc = bias[c];
            out[(n * ch + c) * vol..(n * ch + c + 1) * vol]
                .iter_mut()
                .for_each(|v| *v += bc);
        }
    }
}

fn channel_bias_grad<E: Element>(g: &[E], batch: usize, ch: usize, vol: usize, db: &mut [E]) {
    for n in 0..batch {
        for c in 0..ch {
            db[c] += g[(n * ch + c) * vol..(n * ch + c + 1) * vol]
                .iter()
                .fold(E::ZERO, |a, &v| a + v);
        }
    }
}

pub(super) fn conv_backward<E: Element>(
    ctx: &ConvCtx,
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &[E],
    sink: &mut GradSink<'_, E>,
) {
    let geom = &ctx.geom;
    let (ivol, ovol) = (geom.in_vol(), geom.out_vol());
    let rows = geom.cin * geom.kvol();
    if let Some(b) = ctx.b {
        if let Some(db) = sink.slot(b) {
            channel_bias_grad(g, geom.batch, geom.cout, ovol, db);
        }
    }
    let want_x = sink.wants(ctx.x);
    let want_w = sink.wants(ctx.w);
    if !want_x && !want_w {
        return;
    }
    let mut cols = vec![E::ZERO; rows * ovol];
    let mut dw = if want_w { vec![E::ZERO; w.len()] } else { Vec::new() };
    let mut dx = if want_x { vec![E::ZERO; x.len()] } else { Vec::new() };
    for n in 0..geom.batch {
        let gb = &g[n * geom.cout * ovol..(n + 1) * geom.cout * ovol];
        let xb = &x.data()[n * geom.cin * ivol..(n + 1) * geom.cin * ivol];
        if want_w {
            let src: &[E] = if geom.is_pointwise() {
                xb
            } else {
                im2col(xb, geom, &mut cols);
                &cols
            };
            // dW += g_b · colsᵀ
            gemm(geom.cout, ovol, rows, gb, false, src, true, &mut dw, true);
        }
        if want_x {
            let dxb = &mut dx[n * geom.cin * ivol..(n + 1) * geom.cin * ivol];
            if geom.is_pointwise() {
                gemm(rows, geom.cout, ovol, w.data(), true, gb, false, dxb, true);
            } else {
                gemm(rows, geom.cout, ovol, w.data(), true, gb, false, &mut cols, false);
                col2im(&cols, geom, dxb);
            }
        }
    }
    if want_w {
        sink.add(ctx.w, &dw);
    }
    if want_x {
        sink.add(ctx.x, &dx);
    }
}

pub(super) fn conv_transpose_backward<E: Element>(
    ctx: &ConvCtx,
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &[E],
    sink: &mut GradSink<'_, E>,
) {
    let geom = &ctx.geom;
    let (ivol, ovol) = (geom.in_vol(), geom.out_vol());
    let rows = geom.cin * geom.kvol();
    if let Some(b) = ctx.b {
        if let Some(db) = sink.slot(b) {
            channel_bias_grad(g, geom.batch, geom.cin, ivol, db);
        }
    }
    let want_x = sink.wants(ctx.x);
    let want_w = sink.wants(ctx.w);
    if !want_x && !want_w {
        return;
    }
    let mut cols = vec![E::ZERO; rows * ovol];
    let mut dw = if want_w { vec![E::ZERO; w.len()] } else { Vec::new() };
    let mut dx = if want_x { vec![E::ZERO; x.len()] } else { Vec::new() };
    for n in 0..geom.batch {
        im2col(&g[n * geom.cin * ivol..(n + 1) * geom.cin * ivol], geom, &mut cols);
        if want_x {
            // dx_b = W · im2col(g_b)
            let dxb = &mut dx[n * geom.cout * ovol..(n + 1) * geom.cout * ovol];
            gemm(geom.cout, rows, ovol, w.data(), false, &cols, false, dxb, true);
        }
        if want_w {
            let xb = &x.data()[n * geom.cout * ovol..(n + 1) * geom.cout * ovol];
            gemm(geom.cout, ovol, rows, xb, false, &cols, true, &mut dw, true);
        }
    }
    if want_w {
        sink.add(ctx.w, &dw);
    }
    if want_x {
        sink.add(ctx.x, &dx);
    }
}

pub(super) fn causal_conv1d_backward<E: Element>(
    x: Var,
    w: Var,
    b: Var,
    xv: &Tensor<E>,
    wv: &Tensor<E>,
    g: &[E],
    sink: &mut GradSink<'_, E>,
) {
    let (bsz, len, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let k = wv.shape()[1];
    if let Some(db) = sink.slot(b) {
        for row in g.chunks_exact(ch) {
            for c in 0..ch {
                db[c] += row[c];
            }
        }
    }
    let want_x = sink.wants(x);
    let want_w = sink.wants(w);
    let mut dx = if want_x { vec![E::ZERO; xv.len()] } else { Vec::new() };
    let mut dw = if want_w { vec![E::ZERO; wv.len()] } else { Vec::new() };
    for n in 0..bsz {
        for t in 0..len {
            let go = &g[(n * len + t) * ch..(n * len + t + 1) * ch];
            for j in 0..k {
                let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                let off = (n * len + src_t) * ch;
                for c in 0..ch {
                    if want_x {
                        dx[off + c] += go[c] * wv.data()[c * k + j];
                    }
                    if want_w {
                        dw[c * k + j] += go[c] * xv.data()[off + c];
                    }
                }
            }
        }
    }
    if want_x {
        sink.add(x, &dx);
    }
    if want_w {
        sink.add(w, &dw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six-nested-loop 2-D convolution, written independently of im2col.
    fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[bn, cout, oh, ow]);
        for n in 0..bn {
            for co in 0..cout {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for a in 0..kh {
                                for c in 0..kw {
                                    let y = (i * stride + a) as isize - pad as isize;
                                    let xx = (j * stride + c) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += x.get(&[n, ci, y as usize, xx as usize]) * w.get(&[co, ci, a, c]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[n, co, i, j]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let xt = rand_tensor(&mut rng, &[1, 1, 5, 5]);
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv(x, w, Some(b), &[1, 1], &[0, 0]).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(rand_tensor(&mut rng, &[3, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv(x, w, Some(b), &[1, 1], &[1, 1]).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let wt = g.constant(rand_tensor(&mut rng, &[2, 3, 2, 2]));
        let yt = g.conv_transpose(x, wt, None, &[2, 2]).unwrap();
        assert!(g.value(yt).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let xt = rand_tensor(&mut rng, &[1, 2, 4, 4]);
            let wt = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let bt = rand_tensor(&mut rng, &[3]);
            let expect = conv2d_oracle(&xt, &wt, bt.data(), stride, pad);
            let mut g = Graph::<f64>::new();
            let (x, w, b) = (g.constant(xt), g.constant(wt), g.constant(bt));
            let y = g.conv(x, w, Some(b), &[stride, stride], &[pad, pad]).unwrap();
            assert_eq!(g.value(y).shape(), expect.shape());
            for (a, e) in g.value(y).data().iter().zip(expect.data()) {
                assert!((a - e).abs() <= 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn transpose_of_ones_tiles_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv_transpose(x, w, None, &[2, 2]).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (spatial, k, s) in [(vec![6usize, 8], vec![2usize, 2], vec![2usize, 2]), (vec![4, 6, 6], vec![3, 2, 2], vec![1, 2, 2]), (vec![9], vec![3], vec![3])] {
            let (cin, cout) = (3, 2);
            let mut xs = vec![2, cin];
            xs.extend(&spatial);
            let mut ws = vec![cout, cin];
            ws.extend(&k);
            let xt = rand_tensor(&mut rng, &xs);
            let wt = rand_tensor(&mut rng, &ws);
            let mut g = Graph::<f64>::new();
            let (x, w) = (g.constant(xt.clone()), g.constant(wt));
            let pad = vec![0; spatial.len()];
            let cx = g.conv(x, w, None, &s, &pad).unwrap();
            let yt = rand_tensor(&mut rng, g.shape(cx));
            let y = g.constant(yt.clone());
            let ty = g.conv_transpose(y, w, None, &s).unwrap();
            assert_eq!(g.shape(ty), xt.shape());
            let lhs: f64 = g.value(cx).data().iter().zip(yt.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = xt.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv(x, w, None, &[1, 1], &[1, 1]).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
        let big = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
        let err = g.conv(x, big, None, &[1, 1], &[1, 1]).unwrap_err().to_string();
        assert!(err.contains("exceeds"), "{err}");
    }

    #[test]
    fn causal_conv_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut xt = rand_tensor(&mut rng, &[1, 6, 2]);
        let wt = rand_tensor(&mut rng, &[2, 4]);
        let bt = rand_tensor(&mut rng, &[2]);
        let mut g = Graph::<f64>::new();
        let (x, w, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
        let y0 = g.causal_conv1d(x, w, b).unwrap();
        xt.data_mut()[4 * 2] += 1.0;
        let x2 = g.constant(xt);
        let y1 = g.causal_conv1d(x2, w, b).unwrap();
        let (a, c) = (g.value(y0).data().to_vec(), g.value(y1).data().to_vec());
        assert_eq!(&a[..8], &c[..8]);
        assert_ne!(a[8], c[8]);
        // first output sees only x_0 through the last tap
        assert!((a[0] - (bt.data()[0] + wt.data()[3] * g.value(x).data()[0])).abs() < 1e-15);
    }
}
