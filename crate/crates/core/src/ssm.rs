//! Selective state-space scan (S6).
//!
//! Continuous system `h'(t) = A h(t) + B u(t)`, `y(t) = C h(t)` with diagonal,
//! strictly negative `A` of shape `(D, N)` (one diagonal per channel). Per
//! timestep the step size `Δ_t`, `B_t` and `C_t` depend on the input, and the
//! system is discretized as `Ā = exp(Δ A)`, `B̄ = Δ B`:
//!
//! ```text
//! h_t = Ā_t ⊙ h_{t-1} + B̄_t u_t        h_0 = 0
//! y_t = <C_t, h_t> + D ⊙ u_t
//! ```
//!
//! Shapes: `u, Δ: (B, L, D)`, `B_t, C_t: (B, L, N)`, skip `D: (D)`.

use rand::Rng;

use crate::autodiff::{GradSink, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bindings, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_STATE_SIZE: usize = 16;
pub const DEFAULT_CHUNK: usize = 64;
pub const DELTA_MIN: f64 = 1e-3;
pub const DELTA_MAX: f64 = 1e-1;

/// Real diagonal HiPPO-style initialization: `A[c][n] = -(n + 1)`.
pub fn s4d_real_init<E: Element>(channels: usize, state: usize) -> Tensor<E> {
    let row: Vec<E> = (0..state).map(|n| E::from_f64(-((n + 1) as f64))).collect();
    Tensor::from_vec(&[channels, state], row.repeat(channels)).expect("shape")
}

/// Discretizes one timestep: `Ā[d][n] = exp(Δ[d]·A[d][n])`, `B̄[d][n] = Δ[d]·B[n]`.
///
/// `a: (D, N)`, `b_t: (N)`, `delta_t: (D)`; returns `(Ā, B̄)`, both `(D, N)`.
pub fn discretize<E: Element>(a: &Tensor<E>, b_t: &[E], delta_t: &[E]) -> Result<(Tensor<E>, Tensor<E>)> {
    let (d, n) = match a.shape() {
        [d, n] => (*d, *n),
        s => return Err(Error::dim("discretize", format!("A must be (D, N), got {s:?}"))),
    };
    if b_t.len() != n || delta_t.len() != d {
        return Err(Error::dim("discretize", "B_t must be (N) and delta_t must be (D)"));
    }
    if let Some(bad) = delta_t.iter().find(|&&v| !(v > E::ZERO)) {
        return Err(Error::contract("discretize", format!("step size must be > 0, got {bad:?}")));
    }
    let mut abar = Vec::with_capacity(d * n);
    let mut bbar = Vec::with_capacity(d * n);
    for (row, &dt) in a.data().chunks_exact(n).zip(delta_t) {
        abar.extend(row.iter().map(|&av| (dt * av).exp()));
        bbar.extend(b_t.iter().map(|&bv| dt * bv));
    }
    Ok((Tensor::from_vec(&[d, n], abar)?, Tensor::from_vec(&[d, n], bbar)?))
}

/// Borrowed operands of a scan.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, E> {
    pub u: &'a Tensor<E>,
    pub delta: &'a Tensor<E>,
    pub a: &'a Tensor<E>,
    pub b: &'a Tensor<E>,
    pub c: &'a Tensor<E>,
    pub d: &'a Tensor<E>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl<E: Element> ScanInputs<'_, E> {
    pub fn dims(&self) -> Result<ScanDims> {
        let &[batch, len, channels] = self.u.shape() else {
            return Err(Error::dim("selective_scan", format!("u must be (B, L, D), got {:?}", self.u.shape())));
        };
        let &[ac, state] = self.a.shape() else {
            return Err(Error::dim("selective_scan", format!("A must be (D, N), got {:?}", self.a.shape())));
        };
        let check = |name: &str, got: &[usize], want: &[usize]| {
            if got != want {
                Err(Error::dim("selective_scan", format!("{name} has shape {got:?}, expected {want:?}")))
            } else {
                Ok(())
            }
        };
        check("A", &[ac], &[channels])?;
        check("delta", self.delta.shape(), &[batch, len, channels])?;
        check("B", self.b.shape(), &[batch, len, state])?;
        check("C", self.c.shape(), &[batch, len, state])?;
        check("D", self.d.shape(), &[channels])?;
        Ok(ScanDims {
            batch,
            len,
            channels,
            state,
        })
    }

    fn validate(&self) -> Result<ScanDims> {
        let dims = self.dims()?;
        for (name, t) in [("u", self.u), ("A", self.a), ("B", self.b), ("C", self.c), ("D", self.d)] {
            if !t.all_finite() {
                return Err(Error::contract("selective_scan", format!("non-finite value in {name}")));
            }
        }
        if !self.delta.all_finite() {
            return Err(Error::contract("selective_scan", "non-finite value in delta"));
        }
        if self.delta.data().iter().any(|&v| v <= E::ZERO) {
            return Err(Error::contract("selective_scan", "step size delta must be > 0"));
        }
        Ok(dims)
    }
}

/// Strictly sequential recurrence, one `(batch, channel)` lane at a time.
/// Ground truth for the chunked scan.
pub fn selective_scan_reference<E: Element>(inputs: &ScanInputs<'_, E>) -> Result<Tensor<E>> {
    Ok(reference_lanes(inputs)?.0)
}

/// Every hidden state of the reference recurrence, shape `(B, L, D, N)`.
pub fn reference_states<E: Element>(inputs: &ScanInputs<'_, E>) -> Result<Tensor<E>> {
    Ok(reference_lanes(inputs)?.1)
}

fn reference_lanes<E: Element>(inputs: &ScanInputs<'_, E>) -> Result<(Tensor<E>, Tensor<E>)> {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = inputs.validate()?;
    let (u, dt, a, bm, cm, dskip) = (
        inputs.u.data(),
        inputs.delta.data(),
        inputs.a.data(),
        inputs.b.data(),
        inputs.c.data(),
        inputs.d.data(),
    );
    let mut y = vec![E::ZERO; batch * len * channels];
    let mut hs = vec![E::ZERO; batch * len * channels * state];
    for b in 0..batch {
        for ch in 0..channels {
            let mut h = vec![E::ZERO; state];
            for t in 0..len {
                let i = (b * len + t) * channels + ch;
                let row = (b * len + t) * state;
                let mut acc = E::ZERO;
                for n in 0..state {
                    let abar = (dt[i] * a[ch * state + n]).exp();
                    h[n] = abar * h[n] + dt[i] * bm[row + n] * u[i];
                    acc += cm[row + n] * h[n];
                }
                y[i] = acc + dskip[ch] * u[i];
                hs[i * state..(i + 1) * state].copy_from_slice(&h);
            }
        }
    }
    Ok((
        Tensor::from_vec(inputs.u.shape(), y)?,
        Tensor::from_vec(&[batch, len, channels, state], hs)?,
    ))
}

/// Chunked scan: discretizes `chunk` timesteps at a time and carries `h`
/// across chunk boundaries. Returns the output and the hidden state at the
/// start of every chunk, laid out `(B, n_chunks, D, N)`.
pub fn selective_scan_chunked<E: Element>(inputs: &ScanInputs<'_, E>, chunk: usize) -> Result<(Tensor<E>, Vec<E>)> {
    if chunk == 0 {
        return Err(Error::contract("selective_scan", "chunk size must be >= 1"));
    }
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = inputs.validate()?;
    let (u, dt, a, bm, cm, dskip) = (
        inputs.u.data(),
        inputs.delta.data(),
        inputs.a.data(),
        inputs.b.data(),
        inputs.c.data(),
        inputs.d.data(),
    );
    let lane = channels * state;
    let n_chunks = len.div_ceil(chunk);
    let mut y = vec![E::ZERO; batch * len * channels];
    let mut checkpoints = vec![E::ZERO; batch * n_chunks * lane];
    let mut abar = vec![E::ZERO; chunk * lane];
    let mut drive = vec![E::ZERO; chunk * lane];
    for b in 0..batch {
        let mut h = vec![E::ZERO; lane];
        for (ci, start) in (0..len).step_by(chunk).enumerate() {
            let end = (start + chunk).min(len);
            checkpoints[(b * n_chunks + ci) * lane..(b * n_chunks + ci + 1) * lane].copy_from_slice(&h);
            // discretize the whole chunk up front
            for t in start..end {
                let k = (t - start) * lane;
                let row = (b * len + t) * state;
                for ch in 0..channels {
                    let i = (b * len + t) * channels + ch;
                    for n in 0..state {
                        abar[k + ch * state + n] = (dt[i] * a[ch * state + n]).exp();
                        drive[k + ch * state + n] = dt[i] * bm[row + n] * u[i];
                    }
                }
            }
            for t in start..end {
                let k = (t - start) * lane;
                let row = (b * len + t) * state;
                for ch in 0..channels {
                    let i = (b * len + t) * channels + ch;
                    let hl = &mut h[ch * state..(ch + 1) * state];
                    let ab = &abar[k + ch * state..k + (ch + 1) * state];
                    let dr = &drive[k + ch * state..k + (ch + 1) * state];
                    let mut acc = E::ZERO;
                    for n in 0..state {
                        hl[n] = ab[n] * hl[n] + dr[n];
                        acc += cm[row + n] * hl[n];
                    }
                    y[i] = acc + dskip[ch] * u[i];
                }
            }
        }
    }
    Ok((Tensor::from_vec(inputs.u.shape(), y)?, checkpoints))
}

/// Convenience wrapper returning only the output of the chunked scan.
pub fn selective_scan<E: Element>(inputs: &ScanInputs<'_, E>, chunk: usize) -> Result<Tensor<E>> {
    Ok(selective_scan_chunked(inputs, chunk)?.0)
}

pub(crate) struct ScanCtx<E> {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    chunk: usize,
    dims: ScanDims,
    checkpoints: Vec<E>,
}

impl<E: Element> Graph<E> {
    /// Differentiable chunked selective scan.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var, chunk: usize) -> Result<Var> {
        let inputs = ScanInputs {
            u: self.value(u),
            delta: self.value(delta),
            a: self.value(a),
            b: self.value(b),
            c: self.value(c),
            d: self.value(d),
        };
        let dims = inputs.dims()?;
        // inside a network these are activations gone bad, not caller mistakes
        if let Err(Error::Contract { detail, .. }) = inputs.validate() {
            return Err(Error::Numeric(format!("selective_scan: {detail}")));
        }
        let (y, checkpoints) = selective_scan_chunked(&inputs, chunk)?;
        let rg = self.any_grad(&[u, delta, a, b, c, d]);
        Ok(self.push(
            y,
            rg,
            Op::SelectiveScan(Box::new(ScanCtx {
                u,
                delta,
                a,
                b,
                c,
                d,
                chunk,
                dims,
                checkpoints,
            })),
        ))
    }
}

/// Reverse pass: per chunk (last to first) the forward recurrence is replayed
/// from its checkpoint, then the adjoint recurrence runs backwards in time.
pub(crate) fn scan_backward<E: Element>(ctx: &ScanCtx<E>, nodes: &[Node<E>], g: &[E], sink: &mut GradSink<'_, E>) {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = ctx.dims;
    let val = |v: Var| nodes[v.index()].value.data();
    let (u, dt, a, bm, cm, dskip) = (val(ctx.u), val(ctx.delta), val(ctx.a), val(ctx.b), val(ctx.c), val(ctx.d));
    let lane = channels * state;
    let chunk = ctx.chunk;
    let n_chunks = len.div_ceil(chunk);

    let mut du = vec![E::ZERO; u.len()];
    let mut ddt = vec![E::ZERO; dt.len()];
    let mut da = vec![E::ZERO; a.len()];
    let mut db = vec![E::ZERO; bm.len()];
    let mut dc = vec![E::ZERO; cm.len()];
    let mut dd = vec![E::ZERO; dskip.len()];

    // states[(t - start + 1) * lane ..] holds h_t; slot 0 holds h_{start-1}
    let mut states = vec![E::ZERO; (chunk + 1) * lane];
    let mut abar = vec![E::ZERO; chunk * lane];
    for b in 0..batch {
        let mut dh = vec![E::ZERO; lane];
        for ci in (0..n_chunks).rev() {
            let start = ci * chunk;
            let end = (start + chunk).min(len);
            states[..lane].copy_from_slice(&ctx.checkpoints[(b * n_chunks + ci) * lane..(b * n_chunks + ci + 1) * lane]);
            for t in start..end {
                let k = t - start;
                let row = (b * len + t) * state;
                for ch in 0..channels {
                    let i = (b * len + t) * channels + ch;
                    for n in 0..state {
                        let j = ch * state + n;
                        let ab = (dt[i] * a[j]).exp();
                        abar[k * lane + j] = ab;
                        states[(k + 1) * lane + j] = ab * states[k * lane + j] + dt[i] * bm[row + n] * u[i];
                    }
                }
            }
            for t in (start..end).rev() {
                let k = t - start;
                let row = (b * len + t) * state;
                for ch in 0..channels {
                    let i = (b * len + t) * channels + ch;
                    let gy = g[i];
                    let (dti, ui) = (dt[i], u[i]);
                    dd[ch] += gy * ui;
                    let mut du_acc = gy * dskip[ch];
                    let mut ddt_acc = E::ZERO;
                    for n in 0..state {
                        let j = ch * state + n;
                        let h_t = states[(k + 1) * lane + j];
                        let h_prev = states[k * lane + j];
                        dc[row + n] += gy * h_t;
                        let dhj = dh[j] + gy * cm[row + n];
                        let ab = abar[k * lane + j];
                        let dab = dhj * h_prev;
                        ddt_acc += dab * ab * a[j] + dhj * bm[row + n] * ui;
                        da[j] += dab * ab * dti;
                        db[row + n] += dhj * dti * ui;
                        du_acc += dhj * dti * bm[row + n];
                        dh[j] = dhj * ab;
                    }
                    du[i] += du_acc;
                    ddt[i] += ddt_acc;
                }
            }
        }
    }
    sink.add(ctx.u, &du);
    sink.add(ctx.delta, &ddt);
    sink.add(ctx.a, &da);
    sink.add(ctx.b, &db);
    sink.add(ctx.c, &dc);
    sink.add(ctx.d, &dd);
}

/// Input-dependent SSM parameters of one Mamba branch.
///
/// `A = -exp(a_log)` keeps every diagonal entry strictly negative for any
/// value of the underlying parameter.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub delta_bias: ParamId,
    pub skip: ParamId,
    pub proj_b: ParamId,
    pub proj_c: ParamId,
    pub proj_delta: ParamId,
    pub state: usize,
    pub chunk: usize,
}

impl SsmParams {
    /// Registers parameters for `channels` inner channels and `state` states.
    pub fn new<E: Element, R: Rng>(
        store: &mut ParamStore<E>,
        rng: &mut R,
        prefix: &str,
        channels: usize,
        state: usize,
        chunk: usize,
    ) -> Self {
        let a = s4d_real_init::<E>(channels, state);
        let a_log = store.add(format!("{prefix}.a_log"), a.map(|v| (-v).ln()));
        // Δ = softplus(bias) log-uniform in [DELTA_MIN, DELTA_MAX] at initialization.
        let bias: Vec<E> = (0..channels)
            .map(|_| {
                let lo = DELTA_MIN.ln();
                let hi = DELTA_MAX.ln();
                let dt = rng.random_range(lo..hi).exp();
                E::from_f64(inverse_softplus(dt))
            })
            .collect();
        let delta_bias = store.add(format!("{prefix}.delta_bias"), Tensor::from_vec(&[channels], bias).expect("shape"));
        let skip = store.add(format!("{prefix}.skip"), Tensor::full(&[channels], E::ONE));
        let proj_b = store.add(format!("{prefix}.proj_b"), uniform_fan_in(rng, &[state, channels], channels));
        let proj_c = store.add(format!("{prefix}.proj_c"), uniform_fan_in(rng, &[state, channels], channels));
        let proj_delta = store.add(
            format!("{prefix}.proj_delta"),
            uniform_fan_in(rng, &[channels, channels], channels),
        );
        Self {
            a_log,
            delta_bias,
            skip,
            proj_b,
            proj_c,
            proj_delta,
            state,
            chunk,
        }
    }

    /// Runs the selective SSM over `x: (B, L, D)`.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, p: &Bindings, x: Var) -> Result<Var> {
        let pre = g.linear(x, p[self.proj_delta], Some(p[self.delta_bias]))?;
        let delta = g.softplus(pre);
        let bm = g.linear(x, p[self.proj_b], None)?;
        let cm = g.linear(x, p[self.proj_c], None)?;
        let a = g.neg_exp(p[self.a_log]);
        g.selective_scan(x, delta, a, bm, cm, p[self.skip], self.chunk)
    }
}

/// `x` such that `softplus(x) = y`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) struct Owned {
        u: Tensor<f64>,
        delta: Tensor<f64>,
        a: Tensor<f64>,
        b: Tensor<f64>,
        c: Tensor<f64>,
        d: Tensor<f64>,
    }

    impl Owned {
        fn inputs(&self) -> ScanInputs<'_, f64> {
            ScanInputs {
                u: &self.u,
                delta: &self.delta,
                a: &self.a,
                b: &self.b,
                c: &self.c,
                d: &self.d,
            }
        }
    }

    fn random_case(seed: u64, batch: usize, len: usize, ch: usize, state: usize) -> Owned {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |shape: &[usize], lo: f64, hi: f64| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        Owned {
            u: r(&[batch, len, ch], -1.0, 1.0),
            delta: r(&[batch, len, ch], 1e-3, 0.5),
            a: r(&[ch, state], -3.0, -0.1),
            b: r(&[batch, len, state], -1.0, 1.0),
            c: r(&[batch, len, state], -1.0, 1.0),
            d: r(&[ch], -1.0, 1.0),
        }
    }

    /// Two-loop recurrence written without reference to the library code paths.
    fn two_loop(case: &Owned) -> Vec<f64> {
        let (bn, l, dch) = (case.u.shape()[0], case.u.shape()[1], case.u.shape()[2]);
        let n = case.a.shape()[1];
        let mut out = vec![0.0; bn * l * dch];
        for b in 0..bn {
            let mut h = vec![vec![0.0f64; n]; dch];
            for t in 0..l {
                for (c, hc) in h.iter_mut().enumerate() {
                    let dt = case.delta.get(&[b, t, c]);
                    let ut = case.u.get(&[b, t, c]);
                    let mut y = case.d.get(&[c]) * ut;
                    for (s, hs) in hc.iter_mut().enumerate() {
                        *hs = (dt * case.a.get(&[c, s])).exp() * *hs + dt * case.b.get(&[b, t, s]) * ut;
                        y += case.c.get(&[b, t, s]) * *hs;
                    }
                    out[(b * l + t) * dch + c] = y;
                }
            }
        }
        out
    }

    #[test]
    fn init_is_negative_integers() {
        let a1 = s4d_real_init::<f64>(3, 1);
        assert_eq!(a1.data(), &[-1.0, -1.0, -1.0]);
        let a4 = s4d_real_init::<f64>(2, 4);
        assert_eq!(a4.data(), &[-1.0, -2.0, -3.0, -4.0, -1.0, -2.0, -3.0, -4.0]);
        for (c, n) in [(1, 1), (5, 16), (7, 3)] {
            assert!(s4d_real_init::<f64>(c, n).data().iter().all(|&v| v < 0.0));
        }
    }

    #[test]
    fn discretize_limits_and_values() {
        let a = Tensor::from_vec(&[1, 2], vec![-1.0, 0.0]).unwrap();
        let (abar, bbar) = discretize(&a, &[2.0, 3.0], &[0.1]).unwrap();
        assert!((abar.data()[0] - 0.904_837_418_035_959_6).abs() < 1e-15);
        assert_eq!(abar.data()[1], 1.0);
        assert!((bbar.data()[0] - 0.2).abs() < 1e-15);
        let (abar, bbar) = discretize(&a, &[2.0, 3.0], &[1e-12]).unwrap();
        assert!((abar.data()[0] - 1.0).abs() < 1e-11);
        assert!(bbar.data().iter().all(|v| v.abs() < 1e-11));
        assert!(discretize(&a, &[2.0, 3.0], &[0.0]).is_err());
        assert!(discretize(&a, &[2.0, 3.0], &[-0.5]).is_err());
    }

    #[test]
    fn zero_drive_gives_zero_output() {
        let mut case = random_case(1, 2, 9, 3, 4);
        case.u = Tensor::zeros(&[2, 9, 3]);
        let y = selective_scan_reference(&case.inputs()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_unrolled() {
        let case = random_case(2, 1, 1, 2, 3);
        let y = selective_scan_reference(&case.inputs()).unwrap();
        for c in 0..2 {
            let dt = case.delta.data()[c];
            let u = case.u.data()[c];
            let expect: f64 = (0..3).map(|n| case.c.data()[n] * dt * case.b.data()[n] * u).sum::<f64>() + case.d.data()[c] * u;
            assert!((y.data()[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_matches_two_loop_oracle() {
        let case = random_case(3, 2, 64, 4, 8);
        let y = selective_scan_reference(&case.inputs()).unwrap();
        for (a, b) in y.data().iter().zip(two_loop(&case)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn chunked_matches_reference_across_boundaries() {
        for len in [1, 2, 63, 64, 65, 256] {
            let case = random_case(len as u64, 2, len, 3, 5);
            let r = selective_scan_reference(&case.inputs()).unwrap();
            let y = selective_scan(&case.inputs(), DEFAULT_CHUNK).unwrap();
            let err = r.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-10, "L={len}: {err}");
        }
    }

    #[test]
    fn rejects_nan_and_nonpositive_delta() {
        let mut case = random_case(4, 1, 4, 2, 2);
        case.u.data_mut()[3] = f64::NAN;
        assert!(matches!(selective_scan_reference(&case.inputs()), Err(Error::Contract { .. })));
        let mut case = random_case(4, 1, 4, 2, 2);
        case.delta.data_mut()[0] = 0.0;
        assert!(selective_scan(&case.inputs(), 2).is_err());
    }

    #[test]
    fn graph_scan_reports_bad_activations_as_numeric() {
        let mut case = random_case(4, 1, 4, 2, 2);
        case.b.data_mut()[1] = f64::INFINITY;
        let mut g = Graph::new();
        let v: Vec<Var> = [&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d]
            .into_iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        let err = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], 2).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }

    #[test]
    fn output_is_causal() {
        let case = random_case(5, 1, 32, 3, 4);
        let y0 = selective_scan(&case.inputs(), 8).unwrap();
        let mut moved = random_case(5, 1, 32, 3, 4);
        for c in 0..3 {
            moved.u.data_mut()[16 * 3 + c] += 0.7;
        }
        let y1 = selective_scan(&moved.inputs(), 8).unwrap();
        assert_eq!(&y0.data()[..16 * 3], &y1.data()[..16 * 3]);
        assert_ne!(&y0.data()[16 * 3..], &y1.data()[16 * 3..]);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let case = random_case(6, 3, 20, 2, 4);
        let y = selective_scan(&case.inputs(), 16).unwrap();
        let swap = |t: &Tensor<f64>| {
            let per = t.len() / 3;
            let mut d = t.data()[2 * per..].to_vec();
            d.extend_from_slice(&t.data()[per..2 * per]);
            d.extend_from_slice(&t.data()[..per]);
            Tensor::from_vec(t.shape(), d).unwrap()
        };
        let p = Owned {
            u: swap(&case.u),
            delta: swap(&case.delta),
            a: case.a.clone(),
            b: swap(&case.b),
            c: swap(&case.c),
            d: case.d.clone(),
        };
        let yp = selective_scan(&p.inputs(), 16).unwrap();
        assert_eq!(yp, swap(&y));
    }

    #[test]
    fn hidden_state_respects_stability_bound() {
        for seed in 0..5 {
            let case = random_case(100 + seed, 2, 200, 3, 6);
            let hs = reference_states(&case.inputs()).unwrap();
            let (bn, l, dch) = (2, 200, 3);
            let n = 6;
            let mut max_abar = 0.0f64;
            let mut max_drive = 0.0f64;
            for b in 0..bn {
                for t in 0..l {
                    let mut bt = vec![0.0; n];
                    bt.copy_from_slice(&case.b.data()[(b * l + t) * n..(b * l + t + 1) * n]);
                    let dtv = &case.delta.data()[(b * l + t) * dch..(b * l + t + 1) * dch];
                    let (abar, bbar) = discretize(&case.a, &bt, dtv).unwrap();
                    max_abar = max_abar.max(abar.max_abs());
                    for c in 0..dch {
                        let u = case.u.data()[(b * l + t) * dch + c];
                        for s in 0..n {
                            max_drive = max_drive.max((bbar.data()[c * n + s] * u).abs());
                        }
                    }
                }
            }
            assert!(max_abar < 1.0);
            let bound = max_drive / (1.0 - max_abar);
            assert!(hs.all_finite());
            assert!(hs.max_abs() <= bound, "{} > {bound}", hs.max_abs());
        }
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for y in [1e-3, 0.01, 0.1, 2.0] {
            let x = inverse_softplus(y);
            assert!(((1.0 + x.exp()).ln() - y).abs() < 1e-12);
        }
    }
}
