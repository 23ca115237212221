use super::pointwise::split_axis;
use super::{GradSink, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

impl<E: Element> Graph<E> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} does not conform to {first:?} outside axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * d..(o + 1) * d]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.any_grad(xs);
        Ok(self.push(out, rg, Op::Concat { xs: xs.to_vec(), axis }))
    }
}

pub(super) fn permute_backward<E: Element>(x: Var, perm: &[usize], out: &Tensor<E>, g: &[E], sink: &mut GradSink<'_, E>) {
    if !sink.wants(x) {
        return;
    }
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let gt = Tensor::from_vec(out.shape(), g.to_vec()).expect("grad shape");
    let back = gt.permute(&inv).expect("inverse permutation");
    sink.add(x, back.data());
}

pub(super) fn concat_backward<E: Element>(
    xs: &[Var],
    axis: usize,
    nodes: &[Node<E>],
    out: &Tensor<E>,
    g: &[E],
    sink: &mut GradSink<'_, E>,
) {
    let (outer, total, inner) = split_axis(out.shape(), axis);
    let mut start = 0;
    for &v in xs {
        let d = nodes[v.0].value.shape()[axis];
        if let Some(s) = sink.slot(v) {
            for o in 0..outer {
                let src = &g[(o * total + start) * inner..(o * total + start + d) * inner];
                for (a, &b) in s[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        start += d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2, 2, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(
            g.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let bad = g.constant(Tensor::zeros(&[2, 2, 3]));
        assert!(g.concat(&[a, bad], 1).is_err());
    }
}
