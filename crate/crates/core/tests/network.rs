use pgbn_core::autodiff::{Graph, Var};
use pgbn_core::geometry::{crop_transform, locality_probe, CoordinateTensor, Volume, PROBE_THRESHOLD};
use pgbn_core::model::{
    gap_pool, gated_pool, indicator_for, model_forward, transfer_init, zero_final_gate_layer, ModelConfig, ModelState,
    Variant, Widths, POOL_EPS,
};
use pgbn_core::ops::NormMode;
use pgbn_core::synth::{generate_subject, normalize_volume, subjects, SynthSpec, Sphere, Task};
use pgbn_core::train::{build_objective, train, LossConfig, Sample, TrainConfig};
use pgbn_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk(variant: Variant, patch: usize) -> ModelConfig {
    ModelConfig::new(variant, patch, Widths::DESK).unwrap()
}

fn noise(dims: [usize; 3], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, dims[0], dims[1], dims[2]], |_| rng.random_range(-1.0..1.0))
}

proptest! {
    #[test]
    fn gated_pool_ignores_gate_scale(
        cells in proptest::collection::vec((-5.0f64..5.0, 0.01f64..1.0), 8),
        a in 0.05f64..1.0,
    ) {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| cells[i].0);
        let g = Tensor::from_fn(&[1, 2, 2, 2], |i| cells[i].1);
        let z = gated_pool(&x, &g, POOL_EPS).unwrap();
        let scaled = gated_pool(&x, &g.map(|v| v * a), POOL_EPS).unwrap();
        prop_assert!((z - scaled).abs() < 1e-6);
        let flat = gated_pool(&x, &Tensor::full(&[1, 2, 2, 2], a), POOL_EPS).unwrap();
        prop_assert!((flat - gap_pool(&x).unwrap()).abs() < 1e-6);
    }
}

#[test]
fn zeroed_gate_layer_reduces_to_mean_pooling() {
    let mut state = ModelState::<f64>::build(desk(Variant::Pg, 25), 8);
    zero_final_gate_layer(&mut state).unwrap();
    let coord = CoordinateTensor::build([32; 3]).unwrap();
    let out = model_forward(&state, &noise([32; 3], 1), &coord, NormMode::Live).unwrap();
    assert!(out.gate.unwrap().data().iter().all(|&g| g == 0.5));
    assert!((out.image_response - gap_pool(&out.patch_responses).unwrap()).abs() < 1e-9);
}

#[test]
fn position_gate_ignores_volume_content() {
    let state = ModelState::<f64>::build(desk(Variant::Pg, 17), 5);
    let coord = CoordinateTensor::<f64>::build([40; 3]).unwrap();
    let mut gates = Vec::new();
    for seed in [1, 2] {
        let (v, c) = crop_transform(&Volume::new(noise([40; 3], seed)), &coord, [3, 4, 5], [32; 3]).unwrap();
        gates.push(model_forward(&state, &v.tensor, &c, NormMode::Live).unwrap().gate.unwrap());
    }
    assert_eq!(gates[0], gates[1]);

    // A different crop window moves the gate.
    let (v, c) = crop_transform(&Volume::new(noise([40; 3], 1)), &coord, [0, 0, 0], [32; 3]).unwrap();
    let shifted = model_forward(&state, &v.tensor, &c, NormMode::Live).unwrap().gate.unwrap();
    assert_ne!(shifted, gates[0]);
}

#[test]
fn entropy_gradient_stays_in_the_gate_branch() {
    for variant in [Variant::Pg, Variant::Fg] {
        let cfg = desk(variant, 9);
        let state = ModelState::<f64>::build(cfg, 21);
        let coord = CoordinateTensor::<f64>::build([32; 3]).unwrap();
        let mut g = Graph::new();
        let params: Vec<Var> = state.params().iter().map(|p| g.param(p.clone())).collect();
        let x = g.constant(noise([32; 3], 4));
        let ind = (variant == Variant::Pg).then(|| g.constant(indicator_for(&state, &coord).unwrap().tensor));
        let loss = LossConfig::new(0.01, 0.5).unwrap();
        let obj = build_objective(&mut g, &cfg, &params, x, ind, 1, &loss, NormMode::Live).unwrap();
        let back = g.backward(obj.ent.unwrap()).unwrap();
        for i in state.trunk_param_range() {
            assert!(back.get(params[i]).data().iter().all(|&d| d == 0.0), "{variant:?} param {i}");
        }
        let last = params.len() - 2;
        assert!(back.get(params[last]).data().iter().any(|&d| d != 0.0));
    }
}

#[test]
fn small_patch_response_is_local() {
    let state = ModelState::<f64>::build(desk(Variant::Gap, 9), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let r = locality_probe(&state, &noise([32; 3], 3), [1, 1, 1], 20, 1.0, &mut rng).unwrap();
    assert!(r.contained());
    assert_eq!(r.outside_changes(), 0);
    assert!(r.inside.iter().any(|h| h.change > PROBE_THRESHOLD));
}

#[test]
fn short_training_run_and_transfer() {
    let spec = SynthSpec {
        canonical: [36; 3],
        crop: [32; 3],
        n_per_class: 6,
        spheres: vec![Sphere {
            center: [16.0, 16.0, 16.0],
            radius: 4.0,
        }],
        tasks: vec![Task::Easy],
        ..SynthSpec::default()
    };
    let samples: Vec<Sample<f32>> = subjects(&spec, Task::Easy)
        .iter()
        .map(|r| Sample {
            id: r.subject,
            volume: normalize_volume(&generate_subject(&spec, r, true).unwrap()).unwrap(),
            label: r.label,
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        patience: 2,
        batch: 4,
        peak_lr: 1e-3,
        warmup_epochs: 1,
        crop: [32; 3],
        seed: 3,
    };
    let coord = CoordinateTensor::build([36; 3]).unwrap();
    let loss = LossConfig::new(0.01, 0.5).unwrap();
    let init = ModelState::build(desk(Variant::Pg, 9), 1);
    let out = train(init.clone(), &samples[..8], &samples[8..], &coord, &cfg, &loss, |_| {}).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
    assert_ne!(out.best, init);

    let mut target = ModelState::build(desk(Variant::Pg, 9), 99);
    transfer_init(&out.best, &mut target).unwrap();
    assert_eq!(target.params(), out.best.params());
    let mut wrong = ModelState::build(desk(Variant::Pg, 41), 99);
    assert!(transfer_init(&out.best, &mut wrong).is_err());
}
