use fuseg_core::config::{ModelConfig, PairParams};
use fuseg_core::model::{end_to_end_grad_check, param_count, random_example, SegModel};
use fuseg_core::synth::all_subsets;
use fuseg_core::train::Variant;
use fuseg_tensor::GradCheckOptions;

fn counts() -> Vec<(String, usize)> {
    let base = ModelConfig::default();
    Variant::components()
        .iter()
        .map(|v| {
            let (_, store) = SegModel::new(&v.apply(&base), 0).unwrap();
            (v.name(), param_count(&store))
        })
        .collect()
}

#[test]
fn parameter_counts_follow_component_ordering() {
    let c = counts();
    let names: Vec<&str> = c.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["full", "no_interaction", "no_fusion", "neither"]);
    assert!(c.windows(2).all(|w| w[0].1 > w[1].1), "{c:?}");
}

#[test]
fn toy_logits_shape() {
    let cfg = ModelConfig::default();
    let (model, store) = SegModel::new(&cfg, 1).unwrap();
    let (bundle, _) = random_example(&cfg, 64, 64, 2);
    let out = model.predict(&store, &[&bundle]).unwrap();
    assert_eq!(out.logits.shape(), [1, 64, 64, 4]);
    assert_eq!(out.labels[0].len(), 64 * 64);
}

#[test]
fn every_modality_subset_runs() {
    let cfg = ModelConfig::default();
    let (model, store) = SegModel::new(&cfg, 3).unwrap();
    let (bundle, _) = random_example(&cfg, 20, 28, 4);
    for keep in all_subsets(4) {
        let out = model.predict(&store, &[&bundle.subset(&keep)]).unwrap();
        assert_eq!(out.logits.shape(), [1, 20, 28, 4]);
        assert!(out.logits.is_finite());
    }
}

#[test]
fn subset_order_does_not_matter_with_tied_pairs() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.interaction.pair_params, PairParams::Tied);
    let (model, store) = SegModel::new(&cfg, 5).unwrap();
    let (bundle, _) = random_example(&cfg, 16, 16, 6);
    let a = model.predict(&store, &[&bundle.subset(&[3, 0, 1])]).unwrap();
    let b = model.predict(&store, &[&bundle.subset(&[0, 1, 3])]).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn initialisation_is_deterministic_and_shared_across_variants() {
    let cfg = ModelConfig::default();
    let (_, a) = SegModel::new(&cfg, 7).unwrap();
    let (_, b) = SegModel::new(&cfg, 7).unwrap();
    assert_eq!(a, b);
    let (_, neither) = SegModel::new(&Variant::Neither.apply(&cfg), 7).unwrap();
    for (name, t) in neither.iter() {
        let id = a.id_of(name).unwrap_or_else(|| panic!("`{name}` missing from the full model"));
        assert_eq!(a.get(id), t, "{name}");
    }
}

#[test]
fn inconsistent_batches_are_rejected() {
    let cfg = ModelConfig::default();
    let (model, store) = SegModel::new(&cfg, 8).unwrap();
    let (a, _) = random_example(&cfg, 16, 16, 9);
    let (b, _) = random_example(&cfg, 16, 20, 10);
    assert!(model.predict(&store, &[&a, &b]).is_err());
    assert!(model.predict(&store, &[&a, &a.subset(&[0])]).is_err());
    assert!(model.predict(&store, &[&a.subset(&[])]).is_err());
    let (_, other) = SegModel::new(&Variant::Neither.apply(&cfg), 0).unwrap();
    assert!(model.check_store(&other).is_err());
}

#[test]
fn end_to_end_gradients_two_modalities() {
    let cfg = ModelConfig::default().restricted_to(&["intensity", "material"]).unwrap();
    for seed in 0..5 {
        let opts = GradCheckOptions {
            max_coords: Some(3),
            seed,
            ..Default::default()
        };
        let report = end_to_end_grad_check(&cfg, 16, 16, seed, &opts).unwrap();
        assert!(report.params.len() > 100);
        report.ensure().unwrap_or_else(|e| panic!("seed {seed}: {e}\n{report}"));
    }
}
