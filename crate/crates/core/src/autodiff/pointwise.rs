use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Saved statistics of a normalization; one entry per normalized group.
pub(crate) struct NormCtx<E> {
    pub(crate) x: Var,
    pub(crate) scale: Var,
    pub(crate) shift: Var,
    mean: Vec<E>,
    rstd: Vec<E>,
}

#[inline]
fn sigmoid<E: Element>(x: E) -> E {
    E::ONE / (E::ONE + (-x).exp())
}

#[inline]
fn softplus<E: Element>(x: E) -> E {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(E::ZERO) + (-x.abs()).exp().ln_1p()
}

impl<E: Element> Graph<E> {
    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op<E>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(out, rg, op)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: E) -> Var {
        self.unary(x, |v| if v > E::ZERO { v } else { v * slope }, Op::LeakyRelu { x, slope })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus { x })
    }

    /// `-exp(x)`: maps an unconstrained log-magnitude to a strictly negative value.
    pub fn neg_exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v.exp(), Op::NegExp { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![E::ZERO; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let mut m = xv[at(0)];
                for k in 1..dim {
                    m = m.max(xv[at(k)]);
                }
                let mut s = E::ZERO;
                for k in 0..dim {
                    let e = (xv[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..dim {
                    out[at(k)] /= s;
                }
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Softmax { x, axis }))
    }

    /// Per-(sample, channel) normalization over all spatial positions of `(B, C, s...)`.
    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: E) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::dim("instance_norm", format!("input {shape:?} has no spatial axes")));
        }
        let c = shape[1];
        self.check_affine("instance_norm", scale, shift, c)?;
        let group: usize = shape[2..].iter().product();
        let (out, mean, rstd) = normalize_groups(
            self.value(x).data(),
            group,
            |gi| gi % c,
            self.value(scale).data(),
            self.value(shift).data(),
            eps,
            GroupLayout::Contiguous,
        );
        let out = Tensor::from_vec(&shape, out)?;
        let rg = self.any_grad(&[x, scale, shift]);
        Ok(self.push(
            out,
            rg,
            Op::InstanceNorm(NormCtx {
                x,
                scale,
                shift,
                mean,
                rstd,
            }),
        ))
    }

    /// Normalization over the trailing (channel) axis, e.g. of `(B, L, C)`.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: E) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        self.check_affine("layer_norm", scale, shift, c)?;
        let (out, mean, rstd) = normalize_groups(
            self.value(x).data(),
            c,
            |_| 0,
            self.value(scale).data(),
            self.value(shift).data(),
            eps,
            GroupLayout::PerElementAffine,
        );
        let out = Tensor::from_vec(&shape, out)?;
        let rg = self.any_grad(&[x, scale, shift]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm(NormCtx {
                x,
                scale,
                shift,
                mean,
                rstd,
            }),
        ))
    }

    fn check_affine(&self, op: &'static str, scale: Var, shift: Var, c: usize) -> Result<()> {
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::dim(
                op,
                format!(
                    "scale {:?} / shift {:?} must both be [{c}]",
                    self.shape(scale),
                    self.shape(shift)
                ),
            ));
        }
        Ok(())
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy)]
enum GroupLayout {
    /// One affine channel per group (instance norm).
    Contiguous,
    /// Affine parameters indexed by position inside the group (layer norm).
    PerElementAffine,
}

fn normalize_groups<E: Element>(
    x: &[E],
    group: usize,
    channel_of: impl Fn(usize) -> usize,
    scale: &[E],
    shift: &[E],
    eps: E,
    layout: GroupLayout,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let n_groups = x.len() / group;
    let inv_n = E::ONE / E::from_f64(group as f64);
    let mut out = vec![E::ZERO; x.len()];
    let mut means = Vec::with_capacity(n_groups);
    let mut rstds = Vec::with_capacity(n_groups);
    for gi in 0..n_groups {
        let xs = &x[gi * group..(gi + 1) * group];
        let mean = xs.iter().fold(E::ZERO, |a, &v| a + v) * inv_n;
        let var = xs.iter().fold(E::ZERO, |a, &v| a + (v - mean) * (v - mean)) * inv_n;
        let rstd = E::ONE / (var + eps).sqrt();
        let os = &mut out[gi * group..(gi + 1) * group];
        match layout {
            GroupLayout::Contiguous => {
                let c = channel_of(gi);
                let (s, b) = (scale[c], shift[c]);
                for (o, &v) in os.iter_mut().zip(xs) {
                    *o = (v - mean) * rstd * s + b;
                }
            }
            GroupLayout::PerElementAffine => {
                for (j, (o, &v)) in os.iter_mut().zip(xs).enumerate() {
                    *o = (v - mean) * rstd * scale[j] + shift[j];
                }
            }
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

fn norm_backward<E: Element>(
    ctx: &NormCtx<E>,
    x: &Tensor<E>,
    scale: &Tensor<E>,
    g: &[E],
    group: usize,
    channel_of: impl Fn(usize) -> usize,
    layout: GroupLayout,
    sink: &mut GradSink<'_, E>,
) {
    let c = scale.len();
    let n_groups = x.len() / group;
    let inv_n = E::ONE / E::from_f64(group as f64);
    let mut dscale = vec![E::ZERO; c];
    let mut dshift = vec![E::ZERO; c];
    let want_x = sink.wants(ctx.x);
    let mut dx = if want_x { vec![E::ZERO; x.len()] } else { Vec::new() };
    let mut dxhat = vec![E::ZERO; group];
    for gi in 0..n_groups {
        let xs = &x.data()[gi * group..(gi + 1) * group];
        let gs = &g[gi * group..(gi + 1) * group];
        let (mean, rstd) = (ctx.mean[gi], ctx.rstd[gi]);
        let mut sum_d = E::ZERO;
        let mut sum_dx = E::ZERO;
        for j in 0..group {
            let xhat = (xs[j] - mean) * rstd;
            let ch = match layout {
                GroupLayout::Contiguous => channel_of(gi),
                GroupLayout::PerElementAffine => j,
            };
            dscale[ch] += gs[j] * xhat;
            dshift[ch] += gs[j];
            let d = gs[j] * scale.data()[ch];
            dxhat[j] = d;
            sum_d += d;
            sum_dx += d * xhat;
        }
        if want_x {
            let md = sum_d * inv_n;
            let mdx = sum_dx * inv_n;
            let dxs = &mut dx[gi * group..(gi + 1) * group];
            for j in 0..group {
                let xhat = (xs[j] - mean) * rstd;
                dxs[j] = rstd * (dxhat[j] - md - xhat * mdx);
            }
        }
    }
    sink.add(ctx.scale, &dscale);
    sink.add(ctx.shift, &dshift);
    if want_x {
        sink.add(ctx.x, &dx);
    }
}

pub(super) fn instance_norm_backward<E: Element>(
    ctx: &NormCtx<E>,
    x: &Tensor<E>,
    scale: &Tensor<E>,
    g: &[E],
    sink: &mut GradSink<'_, E>,
) {
    let c = x.shape()[1];
    let group: usize = x.shape()[2..].iter().product();
    norm_backward(ctx, x, scale, g, group, |gi| gi % c, GroupLayout::Contiguous, sink);
}

pub(super) fn layer_norm_backward<E: Element>(
    ctx: &NormCtx<E>,
    x: &Tensor<E>,
    scale: &Tensor<E>,
    g: &[E],
    sink: &mut GradSink<'_, E>,
) {
    let group = *x.shape().last().unwrap();
    norm_backward(ctx, x, scale, g, group, |_| 0, GroupLayout::PerElementAffine, sink);
}

fn map_grad<E: Element>(x: Var, xv: &[E], g: &[E], sink: &mut GradSink<'_, E>, d: impl Fn(E) -> E) {
    if let Some(s) = sink.slot(x) {
        for ((o, &v), &gg) in s.iter_mut().zip(xv).zip(g) {
            *o += gg * d(v);
        }
    }
}

pub(super) fn leaky_relu_backward<E: Element>(x: Var, slope: E, xv: &Tensor<E>, g: &[E], sink: &mut GradSink<'_, E>) {
    map_grad(x, xv.data(), g, sink, |v| if v > E::ZERO { E::ONE } else { slope });
}

pub(super) fn silu_backward<E: Element>(x: Var, xv: &Tensor<E>, g: &[E], sink: &mut GradSink<'_, E>) {
    map_grad(x, xv.data(), g, sink, |v| {
        let s = sigmoid(v);
        s * (E::ONE + v * (E::ONE - s))
    });
}

pub(super) fn softplus_backward<E: Element>(x: Var, xv: &Tensor<E>, g: &[E], sink: &mut GradSink<'_, E>) {
    map_grad(x, xv.data(), g, sink, sigmoid);
}

pub(super) fn neg_exp_backward<E: Element>(x: Var, out: &Tensor<E>, g: &[E], sink: &mut GradSink<'_, E>) {
    // d(-e^x)/dx = -e^x = out
    map_grad(x, out.data(), g, sink, |o| o);
}

pub(super) fn softmax_backward<E: Element>(x: Var, axis: usize, out: &Tensor<E>, g: &[E], sink: &mut GradSink<'_, E>) {
    let (outer, dim, inner) = split_axis(out.shape(), axis);
    let s = out.data();
    let Some(dx) = sink.slot(x) else { return };
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * dim + k) * inner + i;
            let mut dot = E::ZERO;
            for k in 0..dim {
                dot += g[at(k)] * s[at(k)];
            }
            for k in 0..dim {
                dx[at(k)] += s[at(k)] * (g[at(k)] - dot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn closed_form_activations() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![0.0, -1.0]).unwrap());
        let s = g.silu(x);
        let l = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(s).data()[0], 0.0);
        assert!((g.value(l).data()[1] + 0.01).abs() < 1e-15);
        let sp = g.softplus(x);
        assert!((g.value(sp).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![100.0f32, -100.0]).unwrap());
        let y = g.softplus(x);
        assert_eq!(g.value(y).data()[0], 100.0);
        assert!(g.value(y).data()[1] > 0.0 && g.value(y).data()[1] < 1e-40);
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[2, 4, 3, 5], 7));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let s: f64 = (0..4).map(|k| v.get(&[n, k, i, j])).sum();
                    assert!((s - 1.0).abs() <= 1e-6);
                }
            }
        }
        assert!(g.softmax(x, 4).is_err());
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[2, 3, 6, 7], 8));
        let scale = g.constant(Tensor::full(&[3], 1.0));
        let shift = g.constant(Tensor::zeros(&[3]));
        let y = g.instance_norm(x, scale, shift, 1e-5).unwrap();
        for chunk in g.value(y).data().chunks(42) {
            let m: f64 = chunk.iter().sum::<f64>() / 42.0;
            let v: f64 = chunk.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 42.0;
            assert!(m.abs() <= 1e-6);
            assert!((v - 1.0).abs() <= 1e-4, "{v}");
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(random(&[2, 5, 8], 9));
        let scale = g.constant(Tensor::full(&[8], 1.0));
        let shift = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, scale, shift, 1e-5).unwrap();
        for row in g.value(y).data().chunks(8) {
            let m: f64 = row.iter().sum::<f64>() / 8.0;
            assert!(m.abs() <= 1e-9);
        }
        let bad = g.constant(Tensor::full(&[7], 1.0));
        assert!(g.layer_norm(x, bad, shift, 1e-5).is_err());
    }
}
