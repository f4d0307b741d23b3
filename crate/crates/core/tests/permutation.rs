mod common;

use common::{conv, dense, every_kind_spec, random_tensor};
use fed2_core::data::synth_gaussian;
use fed2_core::fed::local_train;
use fed2_core::features::{model_preferences, ProbeSet};
use fed2_core::nn::Mode;
use fed2_core::permutation::{
    admissible_blocks, conflict_report, permute_inputs, permute_layer, permute_outputs, repermute_pair,
    scramble_clients, scramble_model, PermutationMatrix,
};
use fed2_core::rng::streams;
use fed2_core::{adapt, LayerDesc, Model, ModelSpec, NormKind, RngStream};
use proptest::prelude::*;

fn max_output_gap(a: &Model, b: &Model, inputs: usize, rng: &mut RngStream) -> f64 {
    let mut shape = vec![inputs];
    shape.extend(&a.spec.input_shape);
    let x = random_tensor(&shape, rng);
    let ya = a.forward(&x, Mode::Eval).unwrap();
    let yb = b.forward(&x, Mode::Eval).unwrap();
    ya.logits().max_abs_diff(yb.logits())
}

fn two_layer_dense() -> ModelSpec {
    ModelSpec::new(vec![5], vec![dense(7, NormKind::None)], 3)
}

#[test]
fn identity_is_a_bitwise_no_op() {
    let model = Model::instantiate(&every_kind_spec(), &mut RngStream::new(1, streams::INIT)).unwrap();
    for w in 0..model.spec.weighted_layer_count() - 1 {
        let n = model.weighted_layer(w).unwrap().out_channels;
        let same = permute_layer(&model, w, &PermutationMatrix::identity(n)).unwrap();
        assert!(same.bit_eq(&model), "layer {w}");
    }
}

#[test]
fn random_permutation_of_dense_pair_keeps_outputs() {
    let model = Model::instantiate(&two_layer_dense(), &mut RngStream::new(2, streams::INIT)).unwrap();
    let mut rng = RngStream::new(2, 7);
    let pi = PermutationMatrix::random(7, &mut rng);
    let permuted = permute_layer(&model, 0, &pi).unwrap();
    assert!(!permuted.bit_eq(&model));
    assert!(max_output_gap(&model, &permuted, 100, &mut rng) < 1e-10);
}

#[test]
fn permuting_back_restores_weights_bitwise() {
    let model = Model::instantiate(&every_kind_spec(), &mut RngStream::new(3, streams::INIT)).unwrap();
    let mut rng = RngStream::new(3, 1);
    for w in 0..model.spec.weighted_layer_count() - 1 {
        let n = model.weighted_layer(w).unwrap().out_channels;
        let pi = PermutationMatrix::random(n, &mut rng);
        let there = permute_layer(&model, w, &pi).unwrap();
        let back = permute_layer(&there, w, &pi.transpose()).unwrap();
        assert!(back.bit_eq(&model), "layer {w}");
    }
}

#[test]
fn pair_permutation_matches_hand_reindexing() {
    let model = Model::instantiate(&two_layer_dense(), &mut RngStream::new(4, streams::INIT)).unwrap();
    let mut layers = model.param_layers();
    let this = layers.next().unwrap();
    let next = layers.next().unwrap();
    let pi = PermutationMatrix::new(vec![3, 0, 6, 1, 5, 2, 4]).unwrap();
    let (n2, t2) = repermute_pair(next, this, &pi).unwrap();
    // row j of the new first layer is row pi[j] of the old one, and column j
    // of the new second layer is column pi[j] of the old one
    for j in 0..7 {
        let src = pi.as_slice()[j];
        assert_eq!(&t2.weight.data()[j * 5..(j + 1) * 5], &this.weight.data()[src * 5..(src + 1) * 5]);
        assert_eq!(t2.bias.data()[j], this.bias.data()[src]);
        for o in 0..3 {
            assert_eq!(n2.weight.data()[o * 7 + j], next.weight.data()[o * 7 + src]);
        }
    }
    assert_eq!(n2.bias, next.bias);
}

#[test]
fn flatten_boundary_moves_whole_channel_blocks() {
    let spec = ModelSpec::new(vec![1, 4, 4], vec![conv(3, NormKind::None), dense(5, NormKind::None)], 2);
    let model = Model::instantiate(&spec, &mut RngStream::new(5, streams::INIT)).unwrap();
    let mut rng = RngStream::new(5, 2);
    let pi = PermutationMatrix::new(vec![2, 0, 1]).unwrap();
    let permuted = permute_layer(&model, 0, &pi).unwrap();
    assert!(max_output_gap(&model, &permuted, 20, &mut rng) < 1e-10);
    let dense_in = model.weighted_layer(1).unwrap();
    assert!(permute_inputs(dense_in, &pi, 16).is_ok());
    assert!(permute_inputs(dense_in, &pi, 5).is_err());
}

#[test]
fn norm_layers_follow_the_permutation() {
    let model = Model::instantiate(&every_kind_spec(), &mut RngStream::new(6, streams::INIT)).unwrap();
    let mut rng = RngStream::new(6, 3);
    // give the norm layers non-trivial affine parameters and running stats
    let mut model = model;
    for p in model.param_layers_mut().filter(|p| p.kind.is_norm()) {
        for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
            *v = rng.normal();
        }
        if let Some(r) = p.running.as_mut() {
            r.mean.data_mut().iter_mut().for_each(|v| *v = rng.normal());
            r.var.data_mut().iter_mut().for_each(|v| *v = 0.5 + rng.uniform());
        }
    }
    for w in 0..3 {
        let blocks = admissible_blocks(&model, w).unwrap();
        let n = model.weighted_layer(w).unwrap().out_channels;
        let pi = PermutationMatrix::random_within(&blocks, &mut rng);
        assert_eq!(pi.len(), n);
        let permuted = permute_layer(&model, w, &pi).unwrap();
        assert!(max_output_gap(&model, &permuted, 30, &mut rng) < 1e-10, "layer {w}");
    }
}

#[test]
fn group_structure_limits_permutations() {
    let spec = adapt(
        &ModelSpec::new(vec![1, 4, 4], vec![conv(4, NormKind::None), conv(6, NormKind::None), dense(6, NormKind::None)], 3),
        1,
        3,
    )
    .unwrap();
    let model = Model::instantiate(&spec, &mut RngStream::new(7, streams::INIT)).unwrap();
    // shared layer 0 feeds every group in full, so any reordering works
    assert_eq!(admissible_blocks(&model, 0).unwrap(), vec![0..4]);
    // decoupled layers can only shuffle inside their groups
    assert_eq!(admissible_blocks(&model, 1).unwrap(), vec![0..2, 2..4, 4..6]);
    let crossing = PermutationMatrix::new(vec![2, 1, 0, 3, 4, 5]).unwrap();
    assert!(permute_layer(&model, 1, &crossing).is_err());
    let inside = PermutationMatrix::new(vec![1, 0, 2, 3, 5, 4]).unwrap();
    let permuted = permute_layer(&model, 1, &inside).unwrap();
    let mut rng = RngStream::new(7, 1);
    assert!(max_output_gap(&model, &permuted, 20, &mut rng) < 1e-10);
    assert!(permute_outputs(model.weighted_layer(1).unwrap(), &crossing).is_err());
    // the logit layer has no downstream partner
    assert!(permute_layer(&model, 3, &PermutationMatrix::identity(3)).is_err());
}

#[test]
fn scrambled_clients_compute_the_same_function() {
    let model = Model::instantiate(&every_kind_spec(), &mut RngStream::new(8, streams::INIT)).unwrap();
    let clients = vec![model.clone(), model.clone(), model.clone()];
    let scrambled = scramble_clients(&clients, &mut RngStream::new(8, streams::SCRAMBLE)).unwrap();
    let mut rng = RngStream::new(8, 4);
    for (a, b) in clients.iter().zip(&scrambled) {
        assert!(!a.bit_eq(b));
        assert!(max_output_gap(a, b, 25, &mut rng) < 1e-10);
    }
    assert!(!scrambled[0].bit_eq(&scrambled[1]));
}

#[test]
fn identity_scramble_is_a_no_op() {
    let model = Model::instantiate(&every_kind_spec(), &mut RngStream::new(9, streams::INIT)).unwrap();
    let mut out = model.clone();
    for w in 0..model.spec.weighted_layer_count() - 1 {
        let n = model.weighted_layer(w).unwrap().out_channels;
        out = permute_layer(&out, w, &PermutationMatrix::identity(n)).unwrap();
    }
    assert!(out.bit_eq(&model));
}

fn trained_dense_model() -> (Model, ProbeSet) {
    let spec = ModelSpec::new(vec![1, 4, 4], vec![LayerDesc::Dense { units: 10, norm: NormKind::None, relu: true }], 4);
    let ds = synth_gaussian(4, 30, &[1, 4, 4], 1.5, &mut RngStream::new(10, streams::DATA)).unwrap();
    let model = Model::instantiate(&spec, &mut RngStream::new(10, streams::INIT)).unwrap();
    let model = local_train(&model, &ds, 3, 0.05, 8, &mut RngStream::new(10, 50)).unwrap();
    let probe = ProbeSet::from_dataset(&ds, 1, 16, &mut RngStream::new(10, streams::PROBE)).unwrap();
    (model, probe)
}

#[test]
fn identical_clients_never_disagree() {
    let (model, probe) = trained_dense_model();
    let report = conflict_report(&[model.clone(), model.clone(), model], &probe).unwrap();
    assert!(report.layers.iter().all(|l| l.disagreement.iter().all(|&d| d == 0.0)));
    assert_eq!(report.mean(), 0.0);
}

#[test]
fn derangement_disagreement_matches_brute_force() {
    let (model, probe) = trained_dense_model();
    // a cyclic shift moves every neuron
    let pi = PermutationMatrix::new((0..10).map(|j| (j + 3) % 10).collect()).unwrap();
    let moved = permute_layer(&model, 0, &pi).unwrap();
    let tops = model_preferences(&model, &probe).unwrap()[0].encoding(Default::default()).top_class;
    let expected = (0..10).filter(|&j| tops[pi.as_slice()[j]] != tops[j]).count() as f64 / 10.0;
    let report = conflict_report(&[model, moved], &probe).unwrap();
    assert_eq!(report.layer(0).unwrap().mean, expected);
    assert!(expected > 0.0);
}

#[test]
fn conflict_csv_lists_every_neuron() {
    let (model, probe) = trained_dense_model();
    let scrambled = scramble_model(&model, &mut RngStream::new(11, streams::SCRAMBLE)).unwrap();
    let mut buf = Vec::new();
    conflict_report(&[model, scrambled], &probe).unwrap().write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("layer,neuron,disagreement,layer_mean"));
    assert_eq!(text.lines().count(), 11);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_admissible_permutation_is_lossless(seed in 0u64..10_000, width in 2usize..9, groups in 1usize..3) {
        let base = ModelSpec::new(
            vec![2, 4, 4],
            vec![conv(width.max(groups), NormKind::None), LayerDesc::MaxPool, dense(2 * width, NormKind::None)],
            4,
        );
        let spec = if groups > 1 { adapt(&base, 1, groups).unwrap() } else { base };
        let model = Model::instantiate(&spec, &mut RngStream::new(seed, streams::INIT)).unwrap();
        let mut rng = RngStream::new(seed, 3);
        for w in 0..2 {
            let pi = PermutationMatrix::random_within(&admissible_blocks(&model, w).unwrap(), &mut rng);
            let permuted = permute_layer(&model, w, &pi).unwrap();
            prop_assert!(max_output_gap(&model, &permuted, 8, &mut rng) < 1e-10);
            let back = permute_layer(&permuted, w, &pi.transpose()).unwrap();
            prop_assert!(back.bit_eq(&model));
        }
    }

    #[test]
    fn permutation_algebra(n in 1usize..20, seed in 0u64..1000) {
        let mut rng = RngStream::new(seed, 0);
        let p = PermutationMatrix::random(n, &mut rng);
        let q = PermutationMatrix::random(n, &mut rng);
        prop_assert!(p.then(&p.transpose()).unwrap().is_identity());
        let v: Vec<usize> = (0..n).collect();
        prop_assert_eq!(p.then(&q).unwrap().apply(&v), q.apply(&p.apply(&v)));
    }
}
