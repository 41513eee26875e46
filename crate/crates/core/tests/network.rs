use aflow::dataset::{delta_vocabulary, encode_transform};
use aflow::network::{
    build_network, fuse_predictions, normalize_confidence, ConfidenceMask, NetworkConfig, OutputMode, ViewTransform,
};
use aflow::Tensor;
use proptest::prelude::*;

fn tensor(shape: &[usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let shape = shape.to_vec();
    let len: usize = shape.iter().product();
    proptest::collection::vec(lo..hi, len).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

/// Raw confidences with some exact zeros so the uniform fallback is exercised.
fn raw_masks(views: usize) -> impl Strategy<Value = Vec<ConfidenceMask>> {
    proptest::collection::vec(
        tensor(&[2, 1, 3, 4], -1.0, 3.0).prop_map(|t| ConfidenceMask {
            raw: t.map(|x| x.max(0.0)),
        }),
        views,
    )
}

proptest! {
    #[test]
    fn confidences_sum_to_one(raw in (1usize..5).prop_flat_map(raw_masks)) {
        let masks = normalize_confidence(&raw).unwrap();
        for p in 0..masks[0].len() {
            let sum: f64 = masks.iter().map(|m| m.data()[p]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(masks.iter().all(|m| m.data()[p] >= 0.0));
        }
    }

    #[test]
    fn single_view_fusion_is_exact(raw in raw_masks(1), pred in tensor(&[2, 3, 3, 4], 0.0, 1.0)) {
        let masks = normalize_confidence(&raw).unwrap();
        prop_assert_eq!(fuse_predictions(std::slice::from_ref(&pred), &masks).unwrap(), pred);
    }

    #[test]
    fn duplicated_views_fuse_to_the_view(raw in raw_masks(1), pred in tensor(&[2, 3, 3, 4], 0.0, 1.0)) {
        let raw = vec![raw[0].clone(); 2];
        let masks = normalize_confidence(&raw).unwrap();
        prop_assert_eq!(fuse_predictions(&[pred.clone(), pred.clone()], &masks).unwrap(), pred.clone());
        let three = normalize_confidence(&vec![raw[0].clone(); 3]).unwrap();
        let fused = fuse_predictions(&vec![pred.clone(); 3], &three).unwrap();
        prop_assert!(fused.max_abs_diff(&pred) < 1e-12);
    }

    #[test]
    fn fusion_is_a_convex_combination(raw in raw_masks(3), preds in proptest::collection::vec(tensor(&[2, 3, 3, 4], 0.0, 1.0), 3)) {
        let masks = normalize_confidence(&raw).unwrap();
        let fused = fuse_predictions(&preds, &masks).unwrap();
        for (i, &f) in fused.data().iter().enumerate() {
            let lo = preds.iter().map(|p| p.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = preds.iter().map(|p| p.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
        }
    }
}

fn images(n: usize, seed: u64) -> Tensor {
    let mut state = seed;
    Tensor::from_fn(&[n, 3, 32, 32], |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    })
}

fn transforms(deltas: &[i32]) -> Vec<ViewTransform> {
    deltas.iter().map(|&d| encode_transform(d).unwrap()).collect()
}

#[test]
fn zero_flow_head_returns_the_source() {
    for mode in [OutputMode::Flow, OutputMode::FlowWithConfidence] {
        let mut net = build_network(&NetworkConfig::tiny(mode), 3).unwrap();
        net.zero_output_layer();
        let src = images(19, 1);
        let out = net.forward_single(&src, &transforms(&delta_vocabulary())).unwrap();
        assert_eq!(out.prediction, src);
        assert!(out.flow.unwrap().offsets().data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn zero_head_multi_view_returns_the_shared_source() {
    let mut net = build_network(&NetworkConfig::tiny(OutputMode::FlowWithConfidence), 4).unwrap();
    net.zero_output_layer();
    let src = images(2, 2);
    let out = net
        .forward_multi(
            &[src.clone(), src.clone()],
            &[transforms(&[0, 40]), transforms(&[-20, 180])],
        )
        .unwrap();
    assert_eq!(out.fused, src);
}

#[test]
fn one_view_multi_matches_single() {
    let net = build_network(&NetworkConfig::tiny(OutputMode::FlowWithConfidence), 5).unwrap();
    let src = images(3, 3);
    let tr = transforms(&[-40, 0, 100]);
    let single = net.forward_single(&src, &tr).unwrap();
    let multi = net
        .forward_multi(std::slice::from_ref(&src), std::slice::from_ref(&tr))
        .unwrap();
    assert_eq!(multi.fused, single.prediction);
    let twice = net.forward_multi(&[src.clone(), src], &[tr.clone(), tr]).unwrap();
    assert_eq!(twice.fused, single.prediction);
}

#[test]
fn batch_composition_does_not_change_outputs() {
    for mode in [OutputMode::Flow, OutputMode::Pixels, OutputMode::Mask] {
        let net = build_network(&NetworkConfig::tiny(mode), 6).unwrap();
        let src = images(4, 4);
        let tr = transforms(&[-180, -20, 60, 160]);
        let whole = net.forward_single(&src, &tr).unwrap().prediction;
        for i in 0..4 {
            let one = net
                .forward_single(&src.batch_slice(i, 1), &tr[i..i + 1])
                .unwrap()
                .prediction;
            assert!(
                one.max_abs_diff(&whole.batch_slice(i, 1)) < 1e-12,
                "{mode:?} sample {i}"
            );
        }
    }
}

#[test]
fn wrong_inputs_are_refused() {
    let net = build_network(&NetworkConfig::tiny(OutputMode::Flow), 7).unwrap();
    assert!(net.forward_single(&images(2, 0), &transforms(&[0])).is_err());
    assert!(net.forward_multi(&[images(1, 0)], &[transforms(&[0])]).is_err());
    assert!(build_network(&NetworkConfig::tiny(OutputMode::FlowWithConfidence), 7)
        .unwrap()
        .forward_multi(&[], &[])
        .is_err());
}
