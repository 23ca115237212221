use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

impl<E: Element> Graph<E> {
    /// `y = x·wᵀ + b` over the trailing axis. `x: (..., in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let inp = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != inp {
            return Err(Error::dim(
                "linear",
                format!("axis {}: input width {inp} does not match weight {ws:?}", xs.len() - 1),
            ));
        }
        let out_w = ws[0];
        self.check_bias("linear", b, out_w)?;
        let rows = self.value(x).len() / inp;
        let mut out = vec![E::ZERO; rows * out_w];
        if let Some(b) = b {
            for row in out.chunks_exact_mut(out_w) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm(rows, inp, out_w, self.value(x).data(), false, self.value(w).data(), true, &mut out, b.is_some());
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_w;
        let out = Tensor::from_vec(&shape, out)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let mut out = vec![E::ZERO; sa[0] * sb[1]];
        gemm(sa[0], sa[1], sb[1], self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let out = Tensor::from_vec(&[sa[0], sb[1]], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Matmul { a, b }))
    }
}

pub(super) fn linear_backward<E: Element>(
    x: Var,
    w: Var,
    b: Option<Var>,
    xv: &Tensor<E>,
    wv: &Tensor<E>,
    g: &[E],
    sink: &mut GradSink<'_, E>,
) {
    let (out_w, inp) = (wv.shape()[0], wv.shape()[1]);
    let rows = xv.len() / inp;
    if let Some(b) = b {
        if let Some(db) = sink.slot(b) {
            for row in g.chunks_exact(out_w) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
    }
    if let Some(dx) = sink.slot(x) {
        gemm(rows, out_w, inp, g, false, wv.data(), false, dx, true);
    }
    if let Some(dw) = sink.slot(w) {
        gemm(out_w, rows, inp, g, true, xv.data(), false, dw, true);
    }
}

pub(super) fn matmul_backward<E: Element>(
    a: Var,
    b: Var,
    av: &Tensor<E>,
    bv: &Tensor<E>,
    g: &[E],
    sink: &mut GradSink<'_, E>,
) {
    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
    if let Some(da) = sink.slot(a) {
        gemm(m, n, k, g, false, bv.data(), true, da, true);
    }
    if let Some(db) = sink.slot(b) {
        gemm(k, m, n, av.data(), true, g, false, db, true);
    }
}
