//! Unweighted Dice + cross-entropy loss on softmax probabilities.

use crate::autodiff::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, LabelMap, Tensor};

/// Probability floor inside the logarithm of the cross-entropy term.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossCfg {
    /// Smoothing term `s` of the soft Dice ratio.
    pub smooth: f64,
}

impl Default for LossCfg {
    fn default() -> Self {
        Self { smooth: 1e-5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub dice: f64,
    pub ce: f64,
}

pub(crate) struct DiceCeCtx<E> {
    probs: Var,
    target: Vec<u8>,
    classes: usize,
    voxels: usize,
    smooth: E,
    /// Per-class soft intersection Σ p·t and Σ p + Σ t, pooled over the batch.
    inter: Vec<E>,
    denom: Vec<E>,
    terms: LossTerms,
}

fn check_target(probs_shape: &[usize], target: &LabelMap) -> Result<(usize, usize, usize)> {
    if probs_shape.len() < 3 {
        return Err(Error::dim("dice_ce_loss", format!("probs {probs_shape:?} must be (B, K, spatial...)")));
    }
    let (b, k) = (probs_shape[0], probs_shape[1]);
    let mut want = vec![b];
    want.extend(&probs_shape[2..]);
    if target.shape() != want.as_slice() {
        return Err(Error::dim(
            "dice_ce_loss",
            format!("target shape {:?} does not match probs {probs_shape:?}", target.shape()),
        ));
    }
    if let Some(&bad) = target.data().iter().find(|&&t| t as usize >= k) {
        return Err(Error::contract(
            "dice_ce_loss",
            format!("target label {bad} out of range for {k} classes"),
        ));
    }
    Ok((b, k, probs_shape[2..].iter().product()))
}

/// Evaluates both loss terms without recording anything.
pub fn dice_ce_terms<E: Element>(probs: &Tensor<E>, target: &LabelMap, cfg: &LossCfg) -> Result<LossTerms> {
    let (batch, k, vox) = check_target(probs.shape(), target)?;
    let (inter, denom, ce_sum) = accumulate(probs.data(), target.data(), batch, k, vox);
    Ok(finish(&inter, &denom, ce_sum, batch * vox, E::from_f64(cfg.smooth)))
}

fn accumulate<E: Element>(p: &[E], t: &[u8], batch: usize, k: usize, vox: usize) -> (Vec<E>, Vec<E>, f64) {
    let mut inter = vec![E::ZERO; k];
    let mut denom = vec![E::ZERO; k];
    let mut ce_sum = 0.0f64;
    let floor = E::from_f64(LOG_FLOOR);
    for b in 0..batch {
        for c in 0..k {
            let pc = &p[(b * k + c) * vox..(b * k + c + 1) * vox];
            let tc = &t[b * vox..(b + 1) * vox];
            let mut i_acc = E::ZERO;
            let mut p_acc = E::ZERO;
            let mut t_count = 0usize;
            for (&pv, &tv) in pc.iter().zip(tc) {
                p_acc += pv;
                if tv as usize == c {
                    i_acc += pv;
                    t_count += 1;
                    ce_sum -= pv.max(floor).ln().to_f64();
                }
            }
            inter[c] += i_acc;
            denom[c] += p_acc + E::from_f64(t_count as f64);
        }
    }
    (inter, denom, ce_sum)
}

fn finish<E: Element>(inter: &[E], denom: &[E], ce_sum: f64, n: usize, smooth: E) -> LossTerms {
    let k = inter.len();
    let two = E::from_f64(2.0);
    let mean_dice: f64 = inter
        .iter()
        .zip(denom)
        .map(|(&i, &d)| ((two * i + smooth) / (d + smooth)).to_f64())
        .sum::<f64>()
        / k as f64;
    let dice = 1.0 - mean_dice;
    let ce = ce_sum / n as f64;
    LossTerms {
        total: dice + ce,
        dice,
        ce,
    }
}

impl<E: Element> Graph<E> {
    /// Soft Dice (batch-pooled, averaged over all classes) plus mean cross-entropy.
    /// `probs: (B, K, spatial...)`, `target: (B, spatial...)`.
    pub fn dice_ce_loss(&mut self, probs: Var, target: &LabelMap, cfg: &LossCfg) -> Result<Var> {
        let (batch, k, vox) = check_target(self.shape(probs), target)?;
        let (inter, denom, ce_sum) = accumulate(self.value(probs).data(), target.data(), batch, k, vox);
        let smooth = E::from_f64(cfg.smooth);
        let terms = finish(&inter, &denom, ce_sum, batch * vox, smooth);
        let rg = self.requires_grad(probs);
        let ctx = DiceCeCtx {
            probs,
            target: target.data().to_vec(),
            classes: k,
            voxels: vox,
            smooth,
            inter,
            denom,
            terms,
        };
        Ok(self.push(Tensor::scalar(E::from_f64(terms.total)), rg, Op::DiceCe(Box::new(ctx))))
    }

    /// Loss terms recorded by a `dice_ce_loss` node.
    pub fn loss_terms(&self, v: Var) -> Option<LossTerms> {
        match self.node_op(v) {
            Op::DiceCe(ctx) => Some(ctx.terms),
            _ => None,
        }
    }
}

pub(crate) fn dice_ce_backward<E: Element>(ctx: &DiceCeCtx<E>, g: &[E], sink: &mut GradSink<'_, E>) {
    let probs = ctx.probs;
    let k = ctx.classes;
    let vox = ctx.voxels;
    let batch = ctx.target.len() / vox;
    let seed = g[0];
    let floor = E::from_f64(LOG_FLOOR);
    let two = E::from_f64(2.0);
    let inv_k = E::ONE / E::from_f64(k as f64);
    let inv_n = E::ONE / E::from_f64((batch * vox) as f64);
    // d dice_c / dp = (2 t (S+s) - (2I+s)) / (S+s)^2, split into the t-dependent and constant parts.
    let with_t: Vec<E> = (0..k).map(|c| two / (ctx.denom[c] + ctx.smooth)).collect();
    let constant: Vec<E> = (0..k)
        .map(|c| {
            let d = ctx.denom[c] + ctx.smooth;
            (two * ctx.inter[c] + ctx.smooth) / (d * d)
        })
        .collect();
    let pv = sink.nodes()[probs.index()].value.data();
    let Some(dp) = sink.slot(probs) else { return };
    for b in 0..batch {
        for c in 0..k {
            let base = (b * k + c) * vox;
            for v in 0..vox {
                let is_t = ctx.target[b * vox + v] as usize == c;
                let mut d = constant[c];
                if is_t {
                    d -= with_t[c];
                }
                let mut grad = d * inv_k;
                if is_t {
                    let p = pv[base + v];
                    if p > floor {
                        grad -= inv_n / p;
                    }
                }
                dp[base + v] += seed * grad;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let target = LabelMap::from_vec(&[1, 2, 2], vec![0, 1, 1, 0]).unwrap();
        let p = probs(&[1, 2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let t = dice_ce_terms(&p, &target, &LossCfg::default()).unwrap();
        assert_eq!(t.ce, 0.0);
        assert!(t.dice.abs() < 1e-9);
        assert!(t.total.abs() < 1e-9);
    }

    #[test]
    fn uniform_two_class_ce_is_ln2() {
        let target = LabelMap::from_vec(&[1, 3], vec![0, 1, 1]).unwrap();
        let p = probs(&[1, 2, 3], vec![0.5; 6]);
        let t = dice_ce_terms(&p, &target, &LossCfg::default()).unwrap();
        assert_eq!(t.ce, std::f64::consts::LN_2);
    }

    #[test]
    fn matches_direct_formula_on_2x2() {
        // probability of class 1 per pixel; class 0 gets the complement
        let q = [0.2, 0.7, 0.9, 0.35];
        let labels = [0u8, 1, 1, 0];
        let s = 1e-5;
        let mut data = q.iter().map(|v| 1.0 - v).collect::<Vec<f64>>();
        data.extend(q);
        let p = probs(&[1, 2, 2, 2], data);
        let target = LabelMap::from_vec(&[1, 2, 2], labels.to_vec()).unwrap();
        // hand evaluation
        let p1 = |i: usize, c: u8| if c == 1 { q[i] } else { 1.0 - q[i] };
        let mut ce = 0.0;
        for i in 0..4 {
            ce -= p1(i, labels[i]).ln();
        }
        ce /= 4.0;
        let mut dsum = 0.0;
        for c in 0..2u8 {
            let inter: f64 = (0..4).filter(|&i| labels[i] == c).map(|i| p1(i, c)).sum();
            let ps: f64 = (0..4).map(|i| p1(i, c)).sum();
            let ts = labels.iter().filter(|&&l| l == c).count() as f64;
            dsum += (2.0 * inter + s) / (ps + ts + s);
        }
        let expect = (1.0 - dsum / 2.0) + ce;
        let t = dice_ce_terms(&p, &target, &LossCfg { smooth: s }).unwrap();
        assert!((t.total - expect).abs() <= 1e-10, "{} vs {expect}", t.total);
        assert!((t.total - t.ce - t.dice).abs() == 0.0);
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let target = LabelMap::from_vec(&[1, 2], vec![0, 2]).unwrap();
        let p = probs(&[1, 2, 2], vec![0.5; 4]);
        assert!(matches!(dice_ce_terms(&p, &target, &LossCfg::default()), Err(Error::Contract { .. })));
        let wrong = LabelMap::from_vec(&[1, 3], vec![0, 1, 0]).unwrap();
        assert!(dice_ce_terms(&p, &wrong, &LossCfg::default()).is_err());
    }

    #[test]
    fn graph_node_reports_terms() {
        let target = LabelMap::from_vec(&[1, 3], vec![0, 1, 1]).unwrap();
        let mut g = Graph::<f64>::new();
        let p = g.param(probs(&[1, 2, 3], vec![0.5; 6]));
        let l = g.dice_ce_loss(p, &target, &LossCfg::default()).unwrap();
        let terms = g.loss_terms(l).unwrap();
        assert_eq!(g.value(l).data()[0], terms.total);
        g.backward(l).unwrap();
        assert!(g.grad(p).is_some());
    }
}
