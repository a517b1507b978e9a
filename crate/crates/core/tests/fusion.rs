use fuseg_core::config::{FusionConfig, ResidualMode};
use fuseg_core::encoder::StageFeature;
use fuseg_core::fusion::*;
use fuseg_core::layers::{Init, Linear};
use fuseg_tensor::{grad_check, GradCheckOptions, ParamStore, Rng, Session, Tape, Tensor};
use proptest::prelude::*;

fn block(c: usize, slots: usize, mode: ResidualMode, seed: u64) -> (ParamStore, FusionBlock) {
    let cfg = FusionConfig {
        residual_mode: mode,
        ..FusionConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let b = FusionBlock::new(&mut Init::new(&mut store, &mut rng), &cfg, 1, c, slots).unwrap();
    (store, b)
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn feature<'t>(s: &Session<'t>, t: &Tensor, h: usize, w: usize, modality: usize) -> StageFeature<'t> {
    StageFeature {
        tokens: s.constant(t.clone()),
        height: h,
        width: w,
        modality,
    }
}

fn set(store: &mut ParamStore, id: fuseg_tensor::ParamId, t: Tensor) {
    assert_eq!(store.get(id).shape(), t.shape());
    *store.get_mut(id) = t;
}

/// Stacked identities `[I; I; …]` of shape `[k·c, c]`.
fn stacked_identity(k: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[k * c, c], |i| f64::from((i / c) % c == i % c))
}

fn zero_linear(store: &mut ParamStore, l: &Linear) {
    set(store, l.weight, Tensor::zeros(&[l.in_dim, l.out_dim]));
    if let Some(b) = l.bias {
        set(store, b, Tensor::zeros(&[l.out_dim]));
    }
}

#[test]
fn identity_configuration_doubles_single_input() {
    let c = 8;
    let (mut store, b) = block(c, 1, ResidualMode::Static, 1);
    set(&mut store, b.proj.weight, Tensor::eye(c));
    set(&mut store, b.proj.bias.unwrap(), Tensor::zeros(&[c]));
    zero_linear(&mut store, &b.merge.fc2);
    zero_linear(&mut store, &b.channel_gate.fc2);
    set(&mut store, b.channel_gate.fc2.bias.unwrap(), Tensor::full(&[c], 40.0));
    let mut rng = Rng::new(2);
    let x = random(&mut rng, &[2, 12, c]);
    let tape = Tape::new();
    let s = Session::inference(&tape, &store);
    let out = b.forward(&s, &[feature(&s, &x, 3, 4, 0)]).unwrap();
    assert_eq!(out.weights.value().data(), &[1.0]);
    for (f, z) in out.fused.value().data().iter().zip(x.data()) {
        assert!((f - 2.0 * z).abs() < 1e-12);
    }
}

#[test]
fn stacked_identity_projection_sums_modalities() {
    let c = 6;
    let (mut store, b) = block(c, 2, ResidualMode::Static, 3);
    set(&mut store, b.proj.weight, stacked_identity(2, c));
    set(&mut store, b.proj.bias.unwrap(), Tensor::zeros(&[c]));
    let mut rng = Rng::new(4);
    let (x0, x1) = (random(&mut rng, &[1, 5, c]), random(&mut rng, &[1, 5, c]));
    let tape = Tape::new();
    let s = Session::inference(&tape, &store);
    let y = b
        .concat_project(&s, &[feature(&s, &x0, 1, 5, 0), feature(&s, &x1, 1, 5, 1)])
        .unwrap();
    for ((v, a), bb) in y.value().data().iter().zip(x0.data()).zip(x1.data()) {
        assert!((v - (a + bb)).abs() < 1e-12);
    }
}

#[test]
fn absent_slots_contribute_nothing() {
    let c = 4;
    let (mut store, b) = block(c, 3, ResidualMode::Static, 5);
    let mut rng = Rng::new(6);
    let w = random(&mut rng, &[3 * c, c]);
    set(&mut store, b.proj.weight, w.clone());
    set(&mut store, b.proj.bias.unwrap(), Tensor::zeros(&[c]));
    let (x0, x2) = (random(&mut rng, &[1, 3, c]), random(&mut rng, &[1, 3, c]));
    let tape = Tape::new();
    let s = Session::inference(&tape, &store);
    let y = b
        .concat_project(&s, &[feature(&s, &x0, 1, 3, 0), feature(&s, &x2, 1, 3, 2)])
        .unwrap();
    for t in 0..3 {
        for o in 0..c {
            let want: f64 = (0..c)
                .map(|i| x0.get(&[0, t, i]) * w.get(&[i, o]) + x2.get(&[0, t, i]) * w.get(&[2 * c + i, o]))
                .sum();
            assert!((y.value().get(&[0, t, o]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn modality_weights_closed_form() {
    let tape = Tape::new();
    let zeros = Tensor::zeros(&[1, 2, 3]);
    let mixed = tape.constant(zeros.clone());
    let feats = [0, 1].map(|m| StageFeature {
        tokens: tape.constant(Tensor::full(&[1, 2, 3], (m + 1) as f64)),
        height: 1,
        width: 2,
        modality: m,
    });
    for (logits, tau) in [([0.0, 3f64.ln()], 1.0), ([0.0, 2.0 * 3f64.ln()], 2.0)] {
        let g = tape.constant(Tensor::new(&[2], logits.to_vec()).unwrap());
        let (out, w) = modality_residual(mixed, &feats, g, tau).unwrap();
        let w = w.value();
        assert!((w.data()[0] - 0.25).abs() < 1e-12 && (w.data()[1] - 0.75).abs() < 1e-12);
        assert!(out.value().data().iter().all(|v| (v - 1.75).abs() < 1e-12));
    }
}

proptest! {
    #[test]
    fn modality_weights_normalised_and_argmax_stable(
        logits in prop::collection::vec(-5.0f64..5.0, 1..5),
        tau in 0.05f64..20.0,
    ) {
        let m = logits.len();
        let tape = Tape::new();
        let feats: Vec<StageFeature> = (0..m)
            .map(|i| StageFeature { tokens: tape.constant(Tensor::zeros(&[1, 1, 2])), height: 1, width: 1, modality: i })
            .collect();
        let mixed = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let g = tape.constant(Tensor::new(&[m], logits.clone()).unwrap());
        let (_, w) = modality_residual(mixed, &feats, g, tau).unwrap();
        let w = w.value();
        prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        prop_assert_eq!(argmax(w.data()), argmax(&logits));
    }
}

#[test]
fn mean_fusion_is_arithmetic_mean() {
    let mut rng = Rng::new(9);
    let xs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[2, 4, 5])).collect();
    let tape = Tape::new();
    let store = ParamStore::new();
    let s = Session::inference(&tape, &store);
    let feats: Vec<StageFeature> = xs.iter().enumerate().map(|(i, x)| feature(&s, x, 2, 2, i)).collect();
    let y = mean_fusion(&feats).unwrap();
    for (k, v) in y.value().data().iter().enumerate() {
        let want = xs.iter().map(|x| x.data()[k]).sum::<f64>() / 3.0;
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn output_shapes_for_every_modality_count() {
    for mode in [ResidualMode::Static, ResidualMode::Conditioned] {
        for m in 1..=4 {
            let (store, b) = block(8, 4, mode, m as u64);
            let mut rng = Rng::new(10);
            let xs: Vec<Tensor> = (0..m).map(|_| random(&mut rng, &[2, 12, 8])).collect();
            let tape = Tape::new();
            let s = Session::inference(&tape, &store);
            let feats: Vec<StageFeature> = xs.iter().enumerate().map(|(i, x)| feature(&s, x, 3, 4, 3 - i)).collect();
            let out = b.forward(&s, &feats).unwrap();
            assert_eq!(out.fused.shape(), vec![2, 12, 8]);
            let w = out.weights.value();
            for row in w.data().chunks(m) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (store, b) = block(4, 2, ResidualMode::Static, 11);
    let tape = Tape::new();
    let s = Session::inference(&tape, &store);
    assert!(b.forward(&s, &[]).is_err());
    let a = feature(&s, &Tensor::zeros(&[1, 4, 4]), 2, 2, 0);
    let c = feature(&s, &Tensor::zeros(&[1, 6, 4]), 2, 3, 1);
    assert!(b.forward(&s, &[a, c]).is_err());
}

#[test]
fn fusion_gradients_match_finite_differences() {
    for mode in [ResidualMode::Static, ResidualMode::Conditioned] {
        for seed in 0..5u64 {
            let (mut store, b) = block(8, 2, mode, seed);
            let mut rng = Rng::new(100 + seed);
            let x0 = store.add("x0", random(&mut rng, &[1, 16, 8])).unwrap();
            let x1 = store.add("x1", random(&mut rng, &[1, 16, 8])).unwrap();
            let proj = random(&mut rng, &[1, 16, 8]);
            let opts = GradCheckOptions {
                max_coords: Some(8),
                seed,
                ..Default::default()
            };
            let report = grad_check(
                &mut store,
                |s: &Session<'_>| {
                    let feats = [
                        StageFeature { tokens: s.param(x0), height: 4, width: 4, modality: 0 },
                        StageFeature { tokens: s.param(x1), height: 4, width: 4, modality: 1 },
                    ];
                    let out = b.forward(s, &feats)?;
                    Ok::<_, fuseg_core::Error>(out.fused.mul(s.constant(proj.clone()))?.sum_all()?)
                },
                &opts,
            )
            .unwrap();
            report.ensure().unwrap_or_else(|e| panic!("{mode:?} seed {seed}: {e}\n{report}"));
        }
    }
}
