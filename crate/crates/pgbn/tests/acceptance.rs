//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion to
//! stderr (bypassing the test harness capture) and fails at the end if any
//! criterion failed. Trains 25 desk-scale folds, so expect the better part
//! of an hour on one core.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pgbn::core::analysis::{
    dilate_cube, grid_mask, localization_score, mask_fraction, mask_proportion_curve, mc_dropout_eval, position_gate,
    threshold_range, DropScheme,
};
use pgbn::core::autodiff::{Graph, Var};
use pgbn::core::geometry::{
    crop_transform, kernel_args_for, locality_probe, rf_spec, CoordinateTensor, Volume, PATCH_SIZES, PROBE_THRESHOLD,
};
use pgbn::core::gradcheck::{run_suite, SuiteModule};
use pgbn::core::metrics::{auroc, mean_std};
use pgbn::core::model::{
    gap_pool, gated_pool, model_forward, ModelConfig, ModelState, Variant, Widths, POOL_EPS,
};
use pgbn::core::ops::NormMode;
use pgbn::core::synth::{derive_seed, lesion_mask, SynthSpec, Task};
use pgbn::core::train::{
    build_objective, center_offset, crossval_run, paired_transfer, FoldPlan, FoldResult, LossConfig, Sample, TrainConfig,
    FOLDS,
};
use pgbn::core::Tensor;
use pgbn::manifest::{load_samples, read_manifest, Manifest};
use pgbn::synthgen::generate_dataset;

const SEED: u64 = 1;
const CROP: [usize; 3] = [64; 3];
const CANONICAL: [usize; 3] = [72; 3];

fn log(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

struct Verdicts(Vec<(usize, bool)>);

impl Verdicts {
    fn record(&mut self, id: usize, pass: bool, detail: String) {
        log(&format!("criterion {id:>2}: {} | {detail}", if pass { "PASS" } else { "FAIL" }));
        self.0.push((id, pass));
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        patience: 5,
        batch: 4,
        peak_lr: 1e-3,
        warmup_epochs: 1,
        crop: CROP,
        seed: SEED,
    }
}

fn pg(patch: usize) -> ModelConfig {
    ModelConfig::new(Variant::Pg, patch, Widths::DESK).unwrap()
}

struct FoldRun {
    folds: Vec<FoldResult<f32>>,
    slowest: Duration,
}

impl FoldRun {
    fn states(&self) -> Vec<ModelState<f32>> {
        self.folds.iter().map(|f| f.outcome.best.clone()).collect()
    }

    fn aurocs(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.metrics.auroc.unwrap_or(f64::NAN)).collect()
    }

    fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.metrics.accuracy).collect()
    }

    fn pooled_auroc(&self) -> f64 {
        let scores: Vec<f64> = self.folds.iter().flat_map(|f| f.test_scores.clone()).collect();
        let labels: Vec<u8> = self.folds.iter().flat_map(|f| f.test_labels.clone()).collect();
        auroc(&scores, &labels).unwrap()
    }
}

/// Five folds, one at a time so that each can be timed.
fn five_fold(
    name: &str,
    data: &[Sample<f32>],
    plan: &FoldPlan,
    cfg: ModelConfig,
    mut init: impl FnMut(usize, ModelState<f32>) -> ModelState<f32>,
) -> FoldRun {
    let coord = CoordinateTensor::<f32>::build(CANONICAL).unwrap();
    let train = desk_train();
    let mut folds = Vec::new();
    let mut slowest = Duration::ZERO;
    for k in 0..FOLDS {
        let t = Instant::now();
        let report = crossval_run(
            data,
            plan,
            &coord,
            &train,
            0.01,
            &[k],
            |k| Ok(init(k, ModelState::build(cfg, derive_seed(SEED, k as u64, 3)))),
            |_, _| {},
        )
        .unwrap();
        let took = t.elapsed();
        slowest = slowest.max(took);
        let f = report.folds.into_iter().next().unwrap();
        log(&format!(
            "  {name} fold {k}: auroc {:.3} acc {:.3} best epoch {} ({:.0} s)",
            f.metrics.auroc.unwrap_or(f64::NAN),
            f.metrics.accuracy,
            f.outcome.best_epoch,
            took.as_secs_f64()
        ));
        folds.push(f);
    }
    FoldRun { folds, slowest }
}

fn fold_test_sets(data: &[Sample<f32>], run: &FoldRun) -> Vec<Vec<Sample<f32>>> {
    run.folds
        .iter()
        .map(|f| {
            f.test_ids
                .iter()
                .map(|id| data.iter().find(|s| s.id == *id).unwrap().clone())
                .collect()
        })
        .collect()
}

fn load(manifest: &Manifest) -> (Vec<Sample<f32>>, FoldPlan) {
    (load_samples::<f32>(manifest).unwrap(), manifest.fold_plan().unwrap())
}

fn rf_series(v: &mut Verdicts) {
    let t = Instant::now();
    let specs: Vec<_> = PATCH_SIZES
        .iter()
        .map(|&p| rf_spec(&kernel_args_for(p).unwrap()).unwrap())
        .collect();
    let rfs: Vec<usize> = specs.iter().map(|s| s.rf).collect();
    let strides: Vec<usize> = specs.iter().map(|s| s.total_stride).collect();
    let mut grids_agree = true;
    for input in [CROP, [177, 213, 177]] {
        let g0 = specs[0].grid_shape(input).unwrap();
        grids_agree &= specs.iter().all(|s| s.grid_shape(input).unwrap() == g0);
    }
    let took = t.elapsed();
    let pass = rfs == PATCH_SIZES && strides.iter().all(|&j| j == strides[0]) && grids_agree && took < Duration::from_secs(1);
    v.record(
        1,
        pass,
        format!(
            "rf {rfs:?}, stride {strides:?}, grid at 64^3 {:?}, grids agree {grids_agree}, {took:?}",
            specs[0].grid_shape(CROP).unwrap()
        ),
    );
}

/// Smallest probe input (32³ or 64³) whose central patch is interior.
fn probe_extent(patch: usize) -> (usize, [usize; 3]) {
    let spec = pg(patch).encoder_spec();
    [32, 64]
        .into_iter()
        .find_map(|n| {
            let centre = spec.grid_shape([n; 3]).unwrap().map(|g| g / 2);
            let cube = spec.nominal_cube(centre);
            cube.iter().all(|c| c[0] >= 0 && c[1] < n as isize).then_some((n, centre))
        })
        .unwrap()
}

fn locality(v: &mut Verdicts) {
    const DRAWS: u64 = 5;
    let t = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for &p in &PATCH_SIZES {
        let (n, patch) = probe_extent(p);
        let (mut sensitive, mut leaks, mut inside_hits) = (0, 0, 0);
        for d in 0..DRAWS {
            let seed = derive_seed(SEED, p as u64, d);
            let state = ModelState::<f32>::build(pg(p), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[1, n, n, n], |_| StandardNormal.sample(&mut rng));
            let r = locality_probe(&state, &x, patch, 30, 1.0f32, &mut rng).unwrap();
            leaks += r.outside_changes() + usize::from(!r.contained());
            let hits = r.inside.iter().filter(|h| h.change > PROBE_THRESHOLD).count();
            inside_hits += hits;
            sensitive += usize::from(hits > 0);
        }
        let ok = leaks == 0 && sensitive as f64 >= 0.9 * DRAWS as f64;
        pass &= ok;
        parts.push(format!(
            "rf {p} ({n}^3): outside changes {leaks}/{}, sensitive draws {sensitive}/{DRAWS}, inside probes moved {:.2}",
            30 * DRAWS,
            inside_hits as f64 / (30 * DRAWS) as f64
        ));
    }
    let took = t.elapsed();
    pass &= took < Duration::from_secs(120);
    v.record(2, pass, format!("{}; {:.0} s", parts.join("; "), took.as_secs_f64()));
}

fn gradient_suite(v: &mut Verdicts) {
    let t = Instant::now();
    let results = run_suite(SuiteModule::All, 11).unwrap();
    let took = t.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}/{}", r.module, r.name))
        .collect();
    let worst = |m: SuiteModule| {
        results
            .iter()
            .filter(|r| r.module == m.name())
            .map(|r| r.report.max_rel_error)
            .fold(0.0, f64::max)
    };
    let pass = failed.is_empty() && took < Duration::from_secs(300);
    v.record(
        3,
        pass,
        format!(
            "{} checks, worst primitive {:.1e} (< 1e-4), worst network {:.1e} / {:.1e} (< 1e-3), failed {failed:?}, {:.0} s",
            results.len(),
            worst(SuiteModule::Engine),
            worst(SuiteModule::Model),
            worst(SuiteModule::Loss),
            took.as_secs_f64()
        ),
    );
}

fn pooling_identities(v: &mut Verdicts) {
    let mut worst = [0.0f64; 3];
    for seed in 0..5u64 {
        let state = ModelState::<f64>::build(pg(9), seed);
        let coord = CoordinateTensor::<f64>::build(CROP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[1, 64, 64, 64], |_| StandardNormal.sample(&mut rng));
        let out = model_forward(&state, &x, &coord, NormMode::Live).unwrap();
        let resp = &out.patch_responses;
        let gate = out.gate.unwrap();

        let mean = gap_pool(resp).unwrap();
        for c in [0.05, 0.5, 1.0] {
            let z = gated_pool(resp, &Tensor::full(resp.shape(), c), POOL_EPS).unwrap();
            worst[0] = worst[0].max((z - mean).abs());
        }
        let z = gated_pool(resp, &gate, POOL_EPS).unwrap();
        for a in [0.25, 0.5, 0.9] {
            let scaled = gated_pool(resp, &gate.map(|g| g * a), POOL_EPS).unwrap();
            worst[1] = worst[1].max((scaled - z).abs());
        }

        let mut g = Graph::new();
        let xv = g.param(resp.clone());
        let gv = g.constant(gate.clone());
        let e = g.mul(gv, xv).unwrap();
        let num = g.sum(e).unwrap();
        let mass = g.sum(gv).unwrap();
        let den = g.add_const(mass, POOL_EPS).unwrap();
        let zv = g.div(num, den).unwrap();
        assert_eq!(g.value(zv).item(), z);
        let grad = g.backward(zv).unwrap().get(xv);
        let total = gate.sum() + POOL_EPS;
        for (&d, &gi) in grad.data().iter().zip(gate.data()) {
            worst[2] = worst[2].max((d - gi / total).abs());
        }
    }
    let pass = worst.iter().all(|&w| w <= 1e-6);
    v.record(
        4,
        pass,
        format!(
            "constant gate vs mean {:.1e}, gate scaling {:.1e}, dz/dx vs g/(sum g + eps) {:.1e} (tol 1e-6)",
            worst[0], worst[1], worst[2]
        ),
    );
}

fn gate_independence(v: &mut Verdicts) {
    let mut identical = true;
    let mut responses_differ = true;
    for &p in &[9, 41] {
        let state = ModelState::<f32>::build(pg(p), 4);
        let coord = CoordinateTensor::<f32>::build(CANONICAL).unwrap();
        let offset = center_offset(CANONICAL, CROP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
        let a = Volume::new(Tensor::from_fn(&[1, 72, 72, 72], |_| StandardNormal.sample(&mut rng)));
        let b = Volume::new(Tensor::from_fn(&[1, 72, 72, 72], |i| (i as f32 * 0.013).sin() * 2.0));
        let (a, cropped) = crop_transform(&a, &coord, offset, CROP).unwrap();
        let (b, _) = crop_transform(&b, &coord, offset, CROP).unwrap();
        let oa = model_forward(&state, &a.tensor, &cropped, NormMode::Live).unwrap();
        let ob = model_forward(&state, &b.tensor, &cropped, NormMode::Live).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        identical &= bits(oa.gate.as_ref().unwrap()) == bits(ob.gate.as_ref().unwrap());
        responses_differ &= oa.patch_responses != ob.patch_responses;
    }
    v.record(
        5,
        identical && responses_differ,
        format!("gate bitwise identical across volumes {identical} (responses differ {responses_differ})"),
    );
}

fn entropy_routing(v: &mut Verdicts) {
    let mut nonzero_trunk = 0usize;
    let mut gate_reached = 0usize;
    let patches = [9, 17, 25, 41, 57];
    for m in 0..10u64 {
        let variant = if m % 2 == 0 { Variant::Pg } else { Variant::Fg };
        let cfg = ModelConfig::new(variant, patches[m as usize % 5], Widths::DESK).unwrap();
        let state = ModelState::<f64>::build(cfg, 100 + m);
        let mut rng = ChaCha8Rng::seed_from_u64(m);
        let x = Tensor::from_fn(&[1, 32, 32, 32], |_| StandardNormal.sample(&mut rng));
        let coord = CoordinateTensor::<f64>::build([32; 3]).unwrap();
        let ind = pgbn::core::model::indicator_for(&state, &coord).unwrap().tensor;

        let mut g = Graph::new();
        let params: Vec<Var> = state.params().iter().map(|p| g.param(p.clone())).collect();
        let input = g.constant(x);
        let ind = (variant == Variant::Pg).then(|| g.constant(ind));
        let loss = LossConfig::new(0.01, 0.5).unwrap();
        let label = rng.random_range(0..2u8);
        let obj = build_objective(&mut g, &cfg, &params, input, ind, label, &loss, NormMode::Live).unwrap();
        let weighted = g.scale(obj.ent.unwrap(), 0.01).unwrap();
        let back = g.backward(weighted).unwrap();
        for i in state.trunk_param_range() {
            nonzero_trunk += back.get(params[i]).data().iter().filter(|&&d| d != 0.0).count();
        }
        let gate_params = state.trunk_param_range().end..params.len();
        gate_reached += usize::from(gate_params.into_iter().any(|i| back.get(params[i]).data().iter().any(|&d| d != 0.0)));
    }
    v.record(
        6,
        nonzero_trunk == 0 && gate_reached == 10,
        format!("10 models (PG and FG): nonzero trunk entries {nonzero_trunk}, gate branch reached in {gate_reached}/10"),
    );
}

fn classification(v: &mut Verdicts, runs: &[(&str, &FoldRun)]) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, run) in runs {
        let a = mean_std(&run.aurocs());
        let acc = mean_std(&run.accuracies());
        let minutes = run.slowest.as_secs_f64() / 60.0;
        pass &= a.mean >= 0.90 && acc.mean >= 0.85 && minutes <= 30.0;
        parts.push(format!(
            "{name}: auroc {:.3}±{:.3}, acc {:.3}±{:.3}, slowest fold {minutes:.1} min",
            a.mean, a.std, acc.mean, acc.std
        ));
    }
    v.record(7, pass, format!("{} (need auroc >= 0.90, acc >= 0.85, <= 30 min)", parts.join("; ")));
}

fn localization(v: &mut Verdicts, spec: &SynthSpec, pg9: &FoldRun) {
    let enc = pg(9).encoder_spec();
    let region = dilate_cube(&lesion_mask::<f32>(spec), enc.rf / 2).unwrap();
    let mask = grid_mask(&region, &enc, spec.center_offset(), CROP).unwrap();
    let baseline = mask_fraction(&mask);
    let scores: Vec<f64> = pg9
        .states()
        .iter()
        .map(|s| localization_score(&position_gate(s, CANONICAL, CROP).unwrap(), &mask, 0.1).unwrap())
        .collect();
    let m = mean_std(&scores);
    v.record(
        8,
        m.mean >= 0.6 && baseline < 0.15,
        format!(
            "PG-9 top-10% gate cells in dilated lesion region: {:.3}±{:.3} per fold {:?} (need >= 0.6), baseline {baseline:.3} (need < 0.15)",
            m.mean,
            m.std,
            scores.iter().map(|s| (s * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

fn null_soundness(v: &mut Verdicts, run: &FoldRun) {
    let pooled = run.pooled_auroc();
    let per_fold = mean_std(&run.aurocs());
    v.record(
        9,
        (pooled - 0.5).abs() <= 0.1,
        format!(
            "delta 0, 50/class, PG-9: pooled test auroc {pooled:.3} (need within 0.1 of 0.5), fold mean {:.3}±{:.3}",
            per_fold.mean, per_fold.std
        ),
    );
}

fn mc_dropout(v: &mut Verdicts, runs: &[(&str, &FoldRun, Vec<Vec<Sample<f32>>>)]) {
    let coord = CoordinateTensor::<f32>::build(CANONICAL).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, run, tests) in runs {
        let mut acc = |scheme| {
            let per_fold: Vec<f64> = run
                .folds
                .iter()
                .zip(tests)
                .map(|(f, te)| {
                    mc_dropout_eval(&f.outcome.best, te, &coord, CROP, scheme, 100, 0)
                        .unwrap()
                        .metrics
                        .accuracy
                })
                .collect();
            mean_std(&per_fold).mean
        };
        let [zero, half, gate, inverse] = DropScheme::ALL.map(&mut acc);
        pass &= (gate - 0.5).abs() <= 0.1 && (zero - half).abs() <= 0.05;
        parts.push(format!(
            "{name}: p=0 {zero:.3}, p=0.5 {half:.3}, p=g {gate:.3}, p=1-g {inverse:.3}"
        ));
    }
    v.record(
        10,
        pass,
        format!("{} (need |p=g - 0.5| <= 0.1, |p=0 - p=0.5| <= 0.05)", parts.join("; ")),
    );
}

fn mask_curves(v: &mut Verdicts, runs: &[(&str, &FoldRun)]) {
    let thresholds = threshold_range(0.0, 1.0, 0.02).unwrap();
    let half = thresholds.iter().position(|&t| (t - 0.5).abs() < 1e-9).unwrap();
    let mut monotone = 0;
    let mut total = 0;
    let mut at_half = Vec::new();
    for (name, run) in runs {
        let mut props = Vec::new();
        for s in run.states() {
            let curve = mask_proportion_curve(&position_gate(&s, CANONICAL, CROP).unwrap(), &thresholds);
            monotone += usize::from(curve.windows(2).all(|w| w[1] <= w[0]));
            total += 1;
            props.push(curve[half]);
        }
        at_half.push(format!("{name} {:.3}", mean_std(&props).mean));
    }
    v.record(
        11,
        monotone == total,
        format!(
            "monotone {monotone}/{total} trained models; proportion above 0.5 (reported only): {}",
            at_half.join(", ")
        ),
    );
}

fn transfer(v: &mut Verdicts, scratch: &FoldRun, transferred: &FoldRun) {
    let (a, b) = (scratch.aurocs(), transferred.aurocs());
    let gains: Vec<f64> = a.iter().zip(&b).map(|(s, t)| t - s).collect();
    let gain = mean_std(&gains);
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    v.record(
        12,
        gain.mean >= 0.02,
        format!(
            "hard PG-9 auroc scratch [{}] transfer [{}] gain [{}] mean {:.3} (need >= 0.02)",
            fmt(&a),
            fmt(&b),
            fmt(&gains),
            gain.mean
        ),
    );
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let mut v = Verdicts(Vec::new());

    rf_series(&mut v);
    locality(&mut v);
    gradient_suite(&mut v);
    pooling_identities(&mut v);
    gate_independence(&mut v);
    entropy_routing(&mut v);

    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default();
    let data = generate_dataset(&spec, &dir.path().join("default")).unwrap();
    let all = read_manifest(&data.combined).unwrap();

    // Easy task: PG-9 and PG-41.
    let (pg9, pg41, easy_tests9, easy_tests41) = {
        let (easy, plan) = load(&all.task(Task::Easy.name()));
        let pg9 = five_fold("easy PG-9", &easy, &plan, pg(9), |_, s| s);
        let pg41 = five_fold("easy PG-41", &easy, &plan, pg(41), |_, s| s);
        let (t9, t41) = (fold_test_sets(&easy, &pg9), fold_test_sets(&easy, &pg41));
        (pg9, pg41, t9, t41)
    };
    classification(&mut v, &[("PG-9", &pg9), ("PG-41", &pg41)]);
    localization(&mut v, &spec, &pg9);
    mc_dropout(&mut v, &[("PG-9", &pg9, easy_tests9), ("PG-41", &pg41, easy_tests41)]);

    // Null task: no lesion signal at all.
    let null_spec = SynthSpec {
        n_per_class: 50,
        delta_easy: 0.0,
        tasks: vec![Task::Easy],
        ..SynthSpec::default()
    };
    let null_data = generate_dataset(&null_spec, &dir.path().join("null")).unwrap();
    let null = {
        let (samples, plan) = load(&read_manifest(&null_data.combined).unwrap());
        five_fold("null PG-9", &samples, &plan, pg(9), |_, s| s)
    };
    null_soundness(&mut v, &null);

    // Hard task: scratch against paired transfer from the easy PG-9 folds.
    let (scratch, transferred) = {
        let (hard, plan) = load(&all.task(Task::Hard.name()));
        let sources = pg9.states();
        let scratch = five_fold("hard PG-9 scratch", &hard, &plan, pg(9), |_, s| s);
        let transferred = five_fold("hard PG-9 transfer", &hard, &plan, pg(9), |k, s| {
            paired_transfer(&sources, k, s).unwrap()
        });
        (scratch, transferred)
    };
    mask_curves(
        &mut v,
        &[
            ("easy PG-9", &pg9),
            ("easy PG-41", &pg41),
            ("null PG-9", &null),
            ("hard PG-9 scratch", &scratch),
            ("hard PG-9 transfer", &transferred),
        ],
    );
    transfer(&mut v, &scratch, &transferred);

    v.0.sort_by_key(|&(id, _)| id);
    let failed: Vec<usize> = v.0.iter().filter(|(_, p)| !p).map(|&(id, _)| id).collect();
    log(&format!(
        "acceptance: {}/{} criteria passed in {:.1} min",
        v.0.len() - failed.len(),
        v.0.len(),
        start.elapsed().as_secs_f64() / 60.0
    ));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
