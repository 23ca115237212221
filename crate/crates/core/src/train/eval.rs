//! Sliding-window prediction over whole cases and scoring into reports.

use crate::error::Result;
use crate::metrics::instance::{instances_from_semantic, InstanceCfg};
use crate::metrics::report::{EvalReport, InstanceCase, SemanticCase};
use crate::network::sliding::{predict_sliding, SlidingCfg};
use crate::network::Network;
use crate::pipeline::manifest::SegmentationSample;
use crate::tensor::{Element, LabelMap, Tensor};

/// Label map for one already-normalized `(C, spatial...)` image.
pub fn predict_labels<E: Element>(net: &Network<E>, image: &Tensor<f32>, sliding: &SlidingCfg) -> Result<LabelMap> {
    let image: Tensor<E> = image.map(|v| E::from_f64(v as f64));
    Ok(predict_sliding(net, &image, sliding)?.labels)
}

/// Per-class DSC and NSD over the foreground classes of every sample.
/// `class_names` lists all classes including background.
pub fn evaluate_semantic<E: Element>(
    net: &Network<E>,
    samples: &[SegmentationSample],
    class_names: &[String],
    tolerance: f64,
    sliding: &SlidingCfg,
) -> Result<EvalReport> {
    let mut cases = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict_labels(net, &s.image, sliding)?;
        cases.push(SemanticCase::score(&s.id, &pred, &s.label, class_names.len(), &s.spacing, tolerance)?);
    }
    Ok(EvalReport::Semantic {
        class_names: class_names[1..].to_vec(),
        tolerance,
        cases,
    })
}

/// Instance F1 after converting both prediction and ground truth from
/// background/interior/boundary maps.
pub fn evaluate_instance<E: Element>(
    net: &Network<E>,
    samples: &[SegmentationSample],
    instances: &InstanceCfg,
    iou: f64,
    sliding: &SlidingCfg,
) -> Result<EvalReport> {
    let mut cases = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = instances_from_semantic(&predict_labels(net, &s.image, sliding)?, instances)?;
        let gt = instances_from_semantic(&s.label, instances)?;
        cases.push(InstanceCase::score(&s.id, &pred, &gt, iou)?);
    }
    Ok(EvalReport::Instance {
        iou_threshold: iou,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkPlan, Variant};

    fn net_with_bias(class: usize) -> Network<f64> {
        let plan = NetworkPlan::new(vec![8, 8], vec![1, 1], 3, Variant::CnnBaseline);
        let mut net = Network::<f64>::build(&plan, 0).unwrap();
        let id = net.head_bias();
        net.params_mut().get_mut(id).data_mut()[class] = 50.0;
        net
    }

    fn sample(label: Vec<u8>) -> SegmentationSample {
        SegmentationSample {
            id: "s".into(),
            image: Tensor::zeros(&[1, 8, 8]),
            label: LabelMap::from_vec(&[8, 8], label).unwrap(),
            spacing: vec![1.0, 1.0],
        }
    }

    #[test]
    fn constant_prediction_scores() {
        let names: Vec<String> = ["bg", "a", "b"].map(String::from).to_vec();
        let net = net_with_bias(1);
        let all_one = sample(vec![1; 64]);
        let report = evaluate_semantic(&net, &[all_one], &names, 1.0, &SlidingCfg::default()).unwrap();
        let agg = report.aggregate();
        assert_eq!(agg.iter().map(|a| a.0.as_str()).collect::<Vec<_>>(), ["dsc:a", "dsc:b", "nsd:a", "nsd:b"]);
        // class a matches everywhere; class b is absent from both
        assert_eq!(agg.iter().map(|a| a.1).collect::<Vec<_>>(), [1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn instance_report_counts_missing_cells() {
        let net = net_with_bias(0);
        let mut label = vec![0u8; 64];
        for y in 2..6 {
            for x in 2..6 {
                label[y * 8 + x] = 1;
            }
        }
        let report = evaluate_instance(&net, &[sample(label)], &InstanceCfg::default(), 0.5, &SlidingCfg::default()).unwrap();
        let EvalReport::Instance { cases, .. } = report else { panic!() };
        assert_eq!((cases[0].score.n_pred, cases[0].score.n_gt, cases[0].score.f1), (0, 1, 0.0));
    }
}
