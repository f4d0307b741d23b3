mod common;

use common::{conv, dense, random_tensor};
use fed2_core::data::synth_gaussian;
use fed2_core::fed::local_train;
use fed2_core::features::{
    alignment_distance, alignment_from_preferences, model_preferences, read_encoding_csv, select_decouple_depth,
    total_variance, write_encoding_csv, encoding_rows, LayerPreferences, Polarity, PreferenceVector, ProbeSet,
};
use fed2_core::rng::streams;
use fed2_core::{adapt, Error, LayerDesc, Model, ModelSpec, NormKind, RngStream, Tensor};

fn probe_for(spec: &ModelSpec, per_class: usize, rng: &mut RngStream) -> ProbeSet {
    let mut shape = vec![per_class];
    shape.extend(&spec.input_shape);
    ProbeSet::new((0..spec.class_count).map(|_| vec![random_tensor(&shape, rng)]).collect()).unwrap()
}

fn small_cnn() -> ModelSpec {
    ModelSpec::new(
        vec![1, 6, 6],
        vec![
            conv(6, NormKind::Group { groups: 2 }),
            LayerDesc::MaxPool,
            conv(8, NormKind::None),
            dense(12, NormKind::None),
        ],
        6,
    )
}

#[test]
fn zero_weights_give_zero_preferences() {
    let spec = small_cnn();
    let mut model = Model::instantiate(&spec, &mut RngStream::new(1, streams::INIT)).unwrap();
    for p in model.param_layers_mut() {
        if p.kind.is_norm() {
            continue;
        }
        p.weight.data_mut().fill(0.0);
        p.bias.data_mut().fill(0.0);
    }
    let probe = probe_for(&spec, 3, &mut RngStream::new(2, 0));
    let prefs = model_preferences(&model, &probe).unwrap();
    assert_eq!(prefs.len(), 3);
    for layer in &prefs {
        for n in &layer.neurons {
            assert!(n.p.iter().all(|&v| v == 0.0), "layer {} neuron {}: {:?}", layer.layer, n.neuron, n.p);
            assert_eq!(n.top_class, 0);
        }
    }
}

#[test]
fn decoupled_neurons_carry_no_foreign_preference() {
    let spec = adapt(&small_cnn(), 1, 3).unwrap();
    let assignment = spec.assignment().unwrap();
    let probe = probe_for(&spec, 4, &mut RngStream::new(9, 0));
    for seed in 0..3 {
        let model = Model::instantiate(&spec, &mut RngStream::new(seed, streams::INIT)).unwrap();
        for layer in model_preferences(&model, &probe).unwrap() {
            let Some(groups) = spec.layer_groups(layer.layer).unwrap() else { continue };
            for (g, range) in groups.iter().enumerate() {
                let own = assignment.classes_of(g);
                for i in range.clone() {
                    let n = &layer.neurons[i];
                    for c in 0..spec.class_count {
                        if !own.contains(&c) {
                            assert_eq!(n.p[c], 0.0, "layer {} neuron {i} class {c}", layer.layer);
                        }
                    }
                    // dead neurons fall back to class 0 by the tie rule
                    if n.p.iter().any(|&v| v != 0.0) {
                        assert!(own.contains(&n.top_class), "layer {} neuron {i}: {:?}", layer.layer, n.p);
                    }
                }
            }
        }
    }
}

#[test]
fn tiny_dense_net_matches_hand_attribution() {
    // 2 inputs -> 2 relu units -> 2 logits
    let spec = ModelSpec::new(vec![2], vec![dense(2, NormKind::None)], 2);
    let mut model = Model::instantiate(&spec, &mut RngStream::new(0, streams::INIT)).unwrap();
    let w1 = [0.5, -1.0, 1.5, 0.25];
    let b1 = [0.1, -0.2];
    let w2 = [2.0, -0.5, -1.0, 3.0];
    let b2 = [0.3, 0.0];
    {
        let mut layers = model.param_layers_mut();
        let first = layers.next().unwrap();
        first.weight.data_mut().copy_from_slice(&w1);
        first.bias.data_mut().copy_from_slice(&b1);
        let logit = layers.next().unwrap();
        logit.weight.data_mut().copy_from_slice(&w2);
        logit.bias.data_mut().copy_from_slice(&b2);
    }
    let class0 = vec![[1.0, 0.5], [0.2, -0.3], [-1.0, 2.0]];
    let class1 = vec![[0.7, 0.7], [2.0, 1.0]];
    let to_tensor = |xs: &[[f64; 2]]| Tensor::new(vec![xs.len(), 2], xs.iter().flatten().copied().collect()).unwrap();
    let probe = ProbeSet::new(vec![vec![to_tensor(&class0)], vec![to_tensor(&class1)]]).unwrap();

    // p_c[i] = sum over class-c samples of h_i(x) * dZ_c/dh_i, and dZ_c/dh_i = w2[c][i]
    let hidden = |x: &[f64; 2], i: usize| (w1[2 * i] * x[0] + w1[2 * i + 1] * x[1] + b1[i]).max(0.0);
    let expected = |i: usize, c: usize| {
        let xs = if c == 0 { &class0 } else { &class1 };
        xs.iter().map(|x| hidden(x, i) * w2[2 * c + i]).sum::<f64>()
    };

    let prefs = model_preferences(&model, &probe).unwrap();
    assert_eq!(prefs.len(), 1);
    for i in 0..2 {
        for c in 0..2 {
            let got = prefs[0].neurons[i].p[c];
            assert!((got - expected(i, c)).abs() < 1e-10, "neuron {i} class {c}: {got} vs {}", expected(i, c));
        }
    }
}

#[test]
fn trained_decoupled_layers_prefer_their_own_classes() {
    let spec = adapt(
        &ModelSpec::new(vec![1, 6, 6], vec![conv(6, NormKind::None), LayerDesc::MaxPool, dense(12, NormKind::None)], 4),
        1,
        4,
    )
    .unwrap();
    let mut rng = RngStream::new(3, streams::DATA);
    let ds = synth_gaussian(4, 40, &[1, 6, 6], 1.0, &mut rng).unwrap();
    let model = Model::instantiate(&spec, &mut RngStream::new(3, streams::INIT)).unwrap();
    let model = local_train(&model, &ds, 2, 0.05, 16, &mut RngStream::new(3, 99)).unwrap();
    let probe = ProbeSet::from_dataset(&ds, 1, 10, &mut RngStream::new(3, streams::PROBE)).unwrap();
    let assignment = spec.assignment().unwrap();
    let layer = model_preferences(&model, &probe).unwrap().pop().unwrap();
    let groups = spec.layer_groups(layer.layer).unwrap().unwrap();
    let live = layer.neurons.iter().filter(|n| n.p.iter().any(|&v| v != 0.0)).count();
    assert!(live >= layer.neurons.len() / 2, "only {live} live neurons");
    for (g, range) in groups.iter().enumerate() {
        for i in range.clone() {
            let n = &layer.neurons[i];
            if n.p.iter().any(|&v| v != 0.0) {
                assert!(assignment.classes_of(g).contains(&n.top_class), "neuron {i}: {:?}", n.p);
            }
        }
    }
}

#[test]
fn missing_probe_class_is_an_error() {
    assert!(matches!(ProbeSet::new(vec![vec![Tensor::zeros(&[1, 2])], vec![]]), Err(Error::MissingClasses(c)) if c == vec![1]));
    let spec = ModelSpec::new(vec![2], vec![dense(2, NormKind::None)], 3);
    let model = Model::instantiate(&spec, &mut RngStream::new(0, streams::INIT)).unwrap();
    let probe = ProbeSet::new(vec![vec![Tensor::zeros(&[1, 2])], vec![Tensor::zeros(&[1, 2])]]).unwrap();
    assert!(matches!(model_preferences(&model, &probe), Err(Error::MissingClasses(c)) if c == vec![2]));
}

#[test]
fn encoding_csv_round_trips() {
    let spec = small_cnn();
    let model = Model::instantiate(&spec, &mut RngStream::new(4, streams::INIT)).unwrap();
    let probe = probe_for(&spec, 2, &mut RngStream::new(5, 0));
    let prefs = model_preferences(&model, &probe).unwrap();
    let rows = encoding_rows(7, &prefs, Polarity::Signed);
    let mut buf = Vec::new();
    write_encoding_csv(&mut buf, spec.class_count, &rows).unwrap();
    assert_eq!(read_encoding_csv(buf.as_slice()).unwrap(), rows);
}

#[test]
fn total_variance_examples() {
    assert_eq!(total_variance(&[&[0.3, 0.1], &[0.3, 0.1], &[0.3, 0.1]]), 0.0);
    assert_eq!(total_variance(&[&[0.3, -2.0, 5.0]]), 0.0);
    let tv = total_variance(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert!((tv - 2f64.sqrt() / 2.0).abs() < 1e-15);
}

#[test]
fn decouple_depth_examples() {
    assert_eq!(select_decouple_depth(&[0.1, 0.2, 0.9, 1.0], 0.5).unwrap(), Some(2));
    assert_eq!(select_decouple_depth(&[0.1, 0.2, 0.9, 1.0], 0.999).unwrap(), Some(3));
    assert_eq!(select_decouple_depth(&[0.4, 0.4, 0.4], 0.5).unwrap(), Some(0));
    assert_eq!(select_decouple_depth(&[0.0, 0.0], 0.5).unwrap(), None);
    assert!(select_decouple_depth(&[], 0.5).is_err());
    assert!(select_decouple_depth(&[1.0], 1.0).is_err());
}

fn single(p: Vec<f64>) -> Vec<LayerPreferences> {
    vec![LayerPreferences { layer: 0, neurons: vec![PreferenceVector::new(0, 0, p)] }]
}

#[test]
fn alignment_examples() {
    let d = alignment_from_preferences(&[single(vec![1.0, 0.0]), single(vec![0.0, 1.0])]);
    assert!((d - 2f64.sqrt()).abs() < 1e-15);
    // scale does not matter after normalization
    assert_eq!(alignment_from_preferences(&[single(vec![3.0, 0.0]), single(vec![0.5, 0.0])]), 0.0);

    let spec = small_cnn();
    let model = Model::instantiate(&spec, &mut RngStream::new(6, streams::INIT)).unwrap();
    let probe = probe_for(&spec, 2, &mut RngStream::new(7, 0));
    assert_eq!(alignment_distance(&[model.clone(), model.clone(), model], &probe).unwrap(), 0.0);
}

#[test]
fn mismatched_cohort_is_rejected() {
    let a = Model::instantiate(&small_cnn(), &mut RngStream::new(0, streams::INIT)).unwrap();
    let b = Model::instantiate(&adapt(&small_cnn(), 2, 2).unwrap(), &mut RngStream::new(0, streams::INIT)).unwrap();
    let probe = probe_for(&small_cnn(), 2, &mut RngStream::new(7, 0));
    assert!(matches!(alignment_distance(&[a, b], &probe), Err(Error::SpecMismatch(_))));
}
