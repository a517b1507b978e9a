use fuseg_core::par::ExecMode;
use fuseg_core::synth::*;

type Oracle = fn(&SceneSpec, &fuseg_core::encoder::ModalityBundle) -> fuseg_core::Result<Vec<u8>>;

const SINGLE: [(&str, Oracle); 4] = [
    ("intensity", oracle_intensity),
    ("geometry", oracle_geometry),
    ("edges", oracle_edges),
    ("material", oracle_material),
];

fn names() -> Vec<String> {
    MODALITIES.iter().map(|(n, _)| n.to_string()).collect()
}

#[test]
fn generation_is_deterministic_and_mode_independent() {
    let spec = SceneSpec::default();
    let a = generate_range(&spec, 3, 6, ExecMode::Sequential).unwrap();
    let b = generate_range(&spec, 3, 6, ExecMode::Parallel).unwrap();
    assert_eq!(a, b);
    for (i, s) in a.iter().enumerate() {
        assert_eq!(*s, generate_one(&spec, 3 + i as u64));
    }
    let other = SceneSpec { seed: 1, ..spec.clone() };
    assert_ne!(generate_one(&other, 3), a[0]);
}

#[test]
fn labels_dense_and_in_range() {
    for spec in [SceneSpec::default(), SceneSpec { num_classes: 6, seed: 5, ..SceneSpec::default() }] {
        for s in generate(&spec, 30).unwrap() {
            assert_eq!(s.labels.len(), spec.height * spec.width);
            assert!(s.labels.iter().all(|&l| (l as usize) < spec.num_classes));
            assert!(s.labels.iter().any(|&l| l > 0));
            assert_eq!(s.bundle.present(), vec![0, 1, 2, 3]);
        }
    }
}

#[test]
fn joint_oracle_solves_noise_free_scenes() {
    let spec = SceneSpec {
        noise: NoiseLevels::zero(),
        ..SceneSpec::default()
    };
    let samples = generate(&spec, 100).unwrap();
    let cm = evaluate_oracle(&spec, &samples, oracle_joint).unwrap();
    assert!(cm.miou() > 0.95, "joint oracle mIoU {}", cm.miou());
}

#[test]
fn single_modality_oracles_are_informative_but_insufficient() {
    let spec = SceneSpec::default();
    let samples = generate(&spec, 100).unwrap();
    for (name, oracle) in SINGLE {
        let miou = evaluate_oracle(&spec, &samples, oracle).unwrap().miou();
        assert!(miou > 0.3 && miou < 0.7, "{name}: {miou}");
    }
}

#[test]
fn every_single_modality_falls_short_of_the_joint_oracle() {
    let spec = SceneSpec {
        noise: NoiseLevels::zero(),
        ..SceneSpec::default()
    };
    let samples = generate(&spec, 50).unwrap();
    let joint = evaluate_oracle(&spec, &samples, oracle_joint).unwrap();
    for (name, oracle) in SINGLE {
        let cm = evaluate_oracle(&spec, &samples, oracle).unwrap();
        assert!(cm.pixel_accuracy().value < joint.pixel_accuracy().value, "{name}");
        // Some class is missed entirely by this modality alone.
        assert!(cm.class_iou().iter().any(|c| c.is_some_and(|v| v < 0.5)), "{name}");
    }
}

#[test]
fn drop_modalities_contract() {
    let spec = SceneSpec::default();
    let s = generate_one(&spec, 0);
    let n = names();
    let full = drop_modalities(&s.bundle, &n, &["intensity", "geometry", "edges", "material"]).unwrap();
    assert_eq!(full, s.bundle);
    let one = drop_modalities(&s.bundle, &n, &["edges"]).unwrap();
    assert_eq!(one.present(), vec![2]);
    assert_eq!(one.slots[2], s.bundle.slots[2]);
    let ab = drop_modalities(&s.bundle, &n, &["material", "intensity"]).unwrap();
    let ba = drop_modalities(&s.bundle, &n, &["intensity", "material"]).unwrap();
    assert_eq!(ab, ba);
    assert!(drop_modalities(&s.bundle, &n, &[]).is_err());
    assert!(drop_modalities(&s.bundle, &n, &["lidar"]).is_err());
    assert!(drop_modalities(&one, &n, &["geometry"]).is_err());
}

#[test]
fn subsets_enumerated_by_size() {
    let s = all_subsets(4);
    assert_eq!(s.len(), 15);
    assert_eq!(s[0], vec![0]);
    assert_eq!(s[4], vec![0, 1]);
    assert_eq!(s[14], vec![0, 1, 2, 3]);
    assert!(s.windows(2).all(|w| w[0].len() <= w[1].len()));
}

#[test]
fn dataset_round_trips_through_disk() {
    let spec = SceneSpec {
        height: 24,
        width: 20,
        max_radius: 8.0,
        ..SceneSpec::default()
    };
    let samples = generate(&spec, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &spec, &samples).unwrap();
    let (back_spec, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(back_spec, spec);
    assert_eq!(back, samples);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("modality intensity shape 3x24x20x3 dtype f64le"));
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(SceneSpec { max_radius: 40.0, ..SceneSpec::default() }.validate().is_err());
    assert!(SceneSpec { min_shapes: 0, ..SceneSpec::default() }.validate().is_err());
    assert!(SceneSpec { num_classes: 1, ..SceneSpec::default() }.validate().is_err());
    assert!(generate(&SceneSpec::default(), 0).is_err());
}
