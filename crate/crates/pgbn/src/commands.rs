//! Implementations of the `pgbn` subcommands. Each writes its tabular
//! result as CSV to `out` and progress lines to `log`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use pgbn_core::analysis::{
    evidence_map, evidence_statistics, mc_dropout_eval, mean_mask_curve, position_gate, threshold_range, DropScheme,
};
use pgbn_core::geometry::{locality_probe, CoordinateTensor, EncoderSpec};
use pgbn_core::gradcheck::{run_suite, SuiteModule};
use pgbn_core::metrics::{compute_metrics, MetricsReport};
use pgbn_core::model::{transfer_init, ModelConfig, ModelState, Variant, Widths};
use pgbn_core::synth::derive_seed;
use pgbn_core::train::{
    beta_from_labels, crossval_run, evaluate_sample, predict, train, CrossvalReport, EpochRecord,
    LossConfig, Sample, FOLDS,
};
use pgbn_core::{Real, Tensor};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Precision, TrainFile};
use crate::error::{invalid, io_err, Result};
use crate::history::write_history;
use crate::manifest::{load_samples, read_manifest, Manifest};
use crate::synthgen::generate_dataset;
use crate::volume::{read_volume, write_volume};

/// Crop edge used by the evaluation commands unless overridden.
pub const DEFAULT_CROP: usize = 64;

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::Writer::from_writer(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metric_fields(m: &MetricsReport) -> [String; 6] {
    [
        m.n.to_string(),
        m.threshold.to_string(),
        m.accuracy.to_string(),
        m.sensitivity.to_string(),
        m.specificity.to_string(),
        fmt_opt(m.auroc),
    ]
}

const METRIC_HEADER: [&str; 6] = ["n", "threshold", "accuracy", "sensitivity", "specificity", "auroc"];

fn coordinates<T: Real>(samples: &[Sample<T>]) -> Result<CoordinateTensor<T>> {
    let first = samples.first().ok_or_else(|| invalid("manifest", "no entries"))?;
    Ok(CoordinateTensor::build(first.volume.spatial()?)?)
}

fn load_dataset<T: Real>(manifest: &Path) -> Result<(Manifest, Vec<Sample<T>>, CoordinateTensor<T>)> {
    let m = read_manifest(manifest)?;
    let samples = load_samples::<T>(&m)?;
    let coord = coordinates(&samples)?;
    Ok((m, samples, coord))
}

pub fn synth_gen(spec: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    let spec = crate::config::read_synth_spec(spec)?;
    let ds = generate_dataset(&spec, out_dir)?;
    let mut w = csv_writer(out);
    w.write_record(["task", "manifest"])?;
    for (task, path) in &ds.tasks {
        w.write_record([task.name(), &path.display().to_string()])?;
    }
    w.write_record(["all", &ds.combined.display().to_string()])?;
    w.flush().map_err(io_err(out_dir))?;
    Ok(())
}

/// Starting parameters of fold `k` (or of a single run when `k` is `None`).
fn init_seed(seed: u64, fold: Option<usize>) -> u64 {
    match fold {
        None => seed,
        Some(k) => derive_seed(seed, k as u64, 3),
    }
}

fn epoch_line(log: &mut dyn Write, fold: Option<usize>, r: &EpochRecord) {
    let prefix = fold.map(|k| format!("fold {k} ")).unwrap_or_default();
    let _ = writeln!(
        log,
        "{prefix}epoch {} train_loss {:.4} val_loss {:.4} val_acc {:.3} val_auroc {} lr {:.3e}",
        r.epoch,
        r.train_loss,
        r.val_loss,
        r.val_acc,
        r.val_auroc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".into()),
        r.lr
    );
}

/// Summary of a single training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

/// Trains one model on split `fold` of the manifest's fold groups: test on
/// group `fold + 1`, validate on the next group, train on the rest.
pub fn train_cmd(config: &Path, fold: usize, out: &mut dyn Write, log: &mut dyn Write) -> Result<TrainSummary> {
    let cfg = TrainFile::load(config)?;
    let summary = match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, fold, log)?,
        Precision::F64 => train_typed::<f64>(&cfg, fold, log)?,
    };
    let mut w = csv_writer(out);
    let mut header = vec!["split"];
    header.extend(METRIC_HEADER);
    w.write_record(&header)?;
    for (name, m) in [("val", &summary.val), ("test", &summary.test)] {
        let mut rec = vec![name.to_string()];
        rec.extend(metric_fields(m));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(config))?;
    Ok(summary)
}

fn write_config_copy(cfg: &TrainFile) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let path = cfg.out_dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(io_err(&path))
}

fn train_typed<T: Real>(cfg: &TrainFile, fold: usize, log: &mut dyn Write) -> Result<TrainSummary> {
    if fold >= FOLDS {
        return Err(invalid("fold", format!("{fold} is not below {FOLDS}")));
    }
    let (manifest, samples, coord) = load_dataset::<T>(&cfg.dataset_manifest)?;
    let split = manifest.fold_plan()?.split(fold);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (tr, va, te) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let beta = beta_from_labels(&tr.iter().map(|s| s.label).collect::<Vec<_>>())?;
    let loss = LossConfig::new(cfg.lambda, beta)?;
    let tc = cfg.train_config();
    let init = ModelState::<T>::build(cfg.model()?, init_seed(cfg.seed, None));
    let outcome = train(init, &tr, &va, &coord, &tc, &loss, |r| epoch_line(log, None, r))?;

    write_config_copy(cfg)?;
    let checkpoint = cfg.out_dir.join("model.ckpt");
    save_checkpoint(&checkpoint, &outcome.best)?;
    write_history(&cfg.out_dir.join("history.csv"), &outcome.history)?;
    let metrics = |set: &[Sample<T>]| -> Result<MetricsReport> {
        let scores = predict(&outcome.best, set, &coord, tc.crop)?;
        Ok(compute_metrics(&scores, &set.iter().map(|s| s.label).collect::<Vec<_>>(), 0.5)?)
    };
    Ok(TrainSummary {
        checkpoint,
        best_epoch: outcome.best_epoch,
        val: metrics(&va)?,
        test: metrics(&te)?,
    })
}

/// Five-fold cross-validation. With `init_from`, fold `k` starts from
/// `<init_from>/fold<k>/model.ckpt` (the paired transfer protocol).
pub fn crossval_cmd(
    config: &Path,
    init_from: Option<&Path>,
    folds: Option<&[usize]>,
    out: &mut dyn Write,
    log: &mut dyn Write,
) -> Result<()> {
    let cfg = TrainFile::load(config)?;
    let all: Vec<usize> = (0..FOLDS).collect();
    let folds = folds.unwrap_or(&all);
    if let Some(&k) = folds.iter().find(|&&k| k >= FOLDS) {
        return Err(invalid("fold", format!("{k} is not below {FOLDS}")));
    }
    match cfg.precision {
        Precision::F32 => crossval_typed::<f32>(&cfg, init_from, folds, out, log),
        Precision::F64 => crossval_typed::<f64>(&cfg, init_from, folds, out, log),
    }
}

pub fn fold_dir(out_dir: &Path, k: usize) -> PathBuf {
    out_dir.join(format!("fold{k}"))
}

fn crossval_typed<T: Real>(
    cfg: &TrainFile,
    init_from: Option<&Path>,
    folds: &[usize],
    out: &mut dyn Write,
    log: &mut dyn Write,
) -> Result<()> {
    let (manifest, samples, coord) = load_dataset::<T>(&cfg.dataset_manifest)?;
    let plan = manifest.fold_plan()?;
    let model = cfg.model()?;
    let mut sources = std::collections::BTreeMap::new();
    if let Some(dir) = init_from {
        for &k in folds {
            sources.insert(k, load_checkpoint::<T>(&fold_dir(dir, k).join("model.ckpt"))?);
        }
    }
    let tc = cfg.train_config();
    let report = crossval_run(
        &samples,
        &plan,
        &coord,
        &tc,
        cfg.lambda,
        folds,
        |k| {
            let mut fresh = ModelState::build(model, init_seed(cfg.seed, Some(k)));
            if let Some(source) = sources.get(&k) {
                transfer_init(source, &mut fresh)?;
            }
            Ok(fresh)
        },
        |k, r| epoch_line(log, Some(k), r),
    )?;
    write_config_copy(cfg)?;
    write_crossval(&cfg.out_dir, &report)?;

    let mut w = csv_writer(out);
    w.write_record(["metric", "mean", "std"])?;
    for (name, ms) in [
        ("accuracy", report.accuracy),
        ("sensitivity", report.sensitivity),
        ("specificity", report.specificity),
        ("auroc", report.auroc),
    ] {
        w.write_record([name.to_string(), ms.mean.to_string(), ms.std.to_string()])?;
    }
    w.write_record(["pooled_auroc".to_string(), fmt_opt(report.pooled_auroc()), String::new()])?;
    w.flush().map_err(io_err(&cfg.out_dir))?;
    Ok(())
}

/// Per-fold checkpoints and histories, `folds.csv`, `scores.csv` and
/// `summary.csv` under `dir`.
pub fn write_crossval<T: Real>(dir: &Path, report: &CrossvalReport<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for f in &report.folds {
        let d = fold_dir(dir, f.fold);
        save_checkpoint(&d.join("model.ckpt"), &f.outcome.best)?;
        write_history(&d.join("history.csv"), &f.outcome.history)?;
    }
    let path = dir.join("folds.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["fold", "beta", "best_epoch", "stopped_early"];
    header.extend(METRIC_HEADER);
    w.write_record(&header)?;
    for f in &report.folds {
        let mut rec = vec![
            f.fold.to_string(),
            f.beta.to_string(),
            f.outcome.best_epoch.to_string(),
            f.outcome.stopped_early.to_string(),
        ];
        rec.extend(metric_fields(&f.metrics));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["fold", "subject", "label", "score"])?;
    for f in &report.folds {
        for ((id, y), s) in f.test_ids.iter().zip(&f.test_labels).zip(&f.test_scores) {
            w.write_record([f.fold.to_string(), id.to_string(), y.to_string(), s.to_string()])?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["metric", "mean", "std"])?;
    for (name, ms) in [
        ("accuracy", report.accuracy),
        ("sensitivity", report.sensitivity),
        ("specificity", report.specificity),
        ("auroc", report.auroc),
    ] {
        w.write_record([name.to_string(), ms.mean.to_string(), ms.std.to_string()])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

pub fn eval_cmd(model: &Path, manifest: &Path, threshold: f64, crop: [usize; 3], out: &mut dyn Write) -> Result<MetricsReport> {
    let state = load_checkpoint::<f32>(model)?;
    let (_, samples, coord) = load_dataset::<f32>(manifest)?;
    let scores = predict(&state, &samples, &coord, crop)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let m = compute_metrics(&scores, &labels, threshold)?;
    let mut w = csv_writer(out);
    w.write_record(METRIC_HEADER)?;
    w.write_record(metric_fields(&m))?;
    w.flush().map_err(io_err(model))?;
    Ok(m)
}

#[allow(clippy::too_many_arguments)]
pub fn mc_dropout_cmd(
    model: &Path,
    manifest: &Path,
    scheme: DropScheme,
    trials: usize,
    seed: u64,
    crop: [usize; 3],
    out: &mut dyn Write,
) -> Result<MetricsReport> {
    let state = load_checkpoint::<f32>(model)?;
    let (_, samples, coord) = load_dataset::<f32>(manifest)?;
    let r = mc_dropout_eval(&state, &samples, &coord, crop, scheme, trials, seed)?;
    let mut w = csv_writer(out);
    let mut header = vec!["scheme", "trials", "seed"];
    header.extend(METRIC_HEADER);
    w.write_record(&header)?;
    let mut rec = vec![scheme.name().to_string(), trials.to_string(), seed.to_string()];
    rec.extend(metric_fields(&r.metrics));
    w.write_record(&rec)?;
    w.flush().map_err(io_err(model))?;
    Ok(r.metrics)
}

/// Parses `start:stop:step`.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| invalid("thresholds", format!("{s:?}: {e}")))?;
    match parts[..] {
        [start, stop, step] => Ok(threshold_range(start, stop, step)?),
        _ => Err(invalid("thresholds", format!("{s:?} is not start:stop:step"))),
    }
}

/// Masked-proportion curve. Proportions are computed per subject and then
/// averaged; a PG gate depends on position only, so without a manifest it
/// is evaluated once on the centred crop of a `canonical` volume.
pub fn mask_curve_cmd(
    model: &Path,
    thresholds: &[f64],
    manifest: Option<&Path>,
    canonical: [usize; 3],
    crop: [usize; 3],
    out_path: &Path,
) -> Result<Vec<f64>> {
    let state = load_checkpoint::<f32>(model)?;
    let gates: Vec<Tensor<f32>> = match (manifest, state.variant()) {
        (_, Variant::Gap) => {
            return Err(pgbn_core::Error::VariantMismatch {
                expected: "PG or FG",
                found: "GAP",
            }
            .into())
        }
        (None, Variant::Pg) => vec![position_gate(&state, canonical, crop)?],
        (None, Variant::Fg) => return Err(invalid("mask-curve", "a feature-gated model needs --manifest")),
        (Some(m), _) => {
            let (_, samples, coord) = load_dataset::<f32>(m)?;
            samples
                .iter()
                .map(|s| Ok(evaluate_sample(&state, &s.volume, &coord, crop)?.gate.expect("gated variant")))
                .collect::<Result<_>>()?
        }
    };
    let curve = mean_mask_curve(&gates, thresholds)?;
    let mut w = csv::Writer::from_path(out_path)?;
    w.write_record(["threshold", "proportion", "subjects", "aggregation"])?;
    for (t, p) in thresholds.iter().zip(&curve) {
        w.write_record([t.to_string(), p.to_string(), gates.len().to_string(), "per-subject-mean".to_string()])?;
    }
    w.flush().map_err(io_err(out_path))?;
    Ok(curve)
}

/// Grid and upsampled gate, evidence and positive evidence volumes, a
/// per-patch CSV and the pooled response of one volume.
pub fn evidence_cmd(model: &Path, volume: &Path, crop: [usize; 3], out_dir: &Path) -> Result<f64> {
    let state = load_checkpoint::<f32>(model)?;
    let raw = read_volume::<f32>(volume)?;
    let vol = pgbn_core::synth::normalize_volume(&raw)?;
    let coord = CoordinateTensor::build(vol.spatial()?)?;
    let map = evidence_map(&state, &vol, &coord, crop)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_volume(&out_dir.join("evidence_grid.vol"), &map.evidence)?;
    write_volume(&out_dir.join("evidence.vol"), &map.up_evidence)?;
    write_volume(&out_dir.join("positive_grid.vol"), &map.positive)?;
    write_volume(&out_dir.join("positive.vol"), &map.up_positive)?;
    if let (Some(g), Some(up)) = (&map.gate, &map.up_gate) {
        write_volume(&out_dir.join("gate_grid.vol"), g)?;
        write_volume(&out_dir.join("gate.vol"), up)?;
    }

    let path = out_dir.join("patches.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["i", "j", "k", "response", "gate", "evidence"])?;
    let [_, h, wd] = [map.responses.shape()[1], map.responses.shape()[2], map.responses.shape()[3]];
    for idx in 0..map.responses.len() {
        let g = map.gate.as_ref().map_or(1.0, |g| g.data()[idx]);
        w.write_record([
            (idx / (h * wd)).to_string(),
            ((idx / wd) % h).to_string(),
            (idx % wd).to_string(),
            map.responses.data()[idx].to_string(),
            g.to_string(),
            map.evidence.data()[idx].to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["model", "volume", "offset_d", "offset_h", "offset_w", "image_response", "posterior"])?;
    w.write_record([
        model.display().to_string(),
        volume.display().to_string(),
        map.crop_offset[0].to_string(),
        map.crop_offset[1].to_string(),
        map.crop_offset[2].to_string(),
        map.image_response.to_string(),
        map.posterior.to_string(),
    ])?;
    w.flush().map_err(io_err(&path))?;
    Ok(map.image_response)
}

/// Mean and standard deviation of positive evidence over true positives.
pub fn evidence_stats_cmd(model: &Path, manifest: &Path, crop: [usize; 3], out_dir: &Path) -> Result<usize> {
    let state = load_checkpoint::<f32>(model)?;
    let (_, samples, coord) = load_dataset::<f32>(manifest)?;
    let stats = evidence_statistics(&state, &samples, &coord, crop)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_volume(&out_dir.join("mean.vol"), &stats.mean)?;
    write_volume(&out_dir.join("std.vol"), &stats.std)?;
    write_volume(&out_dir.join("mean_grid.vol"), &stats.mean_grid)?;
    write_volume(&out_dir.join("std_grid.vol"), &stats.std_grid)?;
    let path = out_dir.join("true_positives.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["subject"])?;
    for id in &stats.true_positives {
        w.write_record([id.to_string()])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(stats.true_positives.len())
}

/// One row of the receptive-field audit.
#[derive(Debug, Clone, PartialEq)]
pub struct RfAuditRow {
    pub patch_size: usize,
    pub spec: EncoderSpec,
    pub grid: [usize; 3],
    /// `None` unless probing was requested.
    pub probe_pass: Option<bool>,
}

/// Locality probe of a random desk-width PG model: the interior patch
/// moves for some voxel inside its cube and for none outside.
pub fn probe_locality(patch_size: usize, crop: [usize; 3], trials: usize, seed: u64) -> Result<bool> {
    let cfg = ModelConfig::new(Variant::Pg, patch_size, Widths::DESK)?;
    let state = ModelState::<f32>::build(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::from_fn(&[1, crop[0], crop[1], crop[2]], |_| rng.sample::<f32, _>(StandardNormal));
    let grid = state.encoder_spec().grid_shape(crop)?;
    let patch = grid.map(|g| g / 2);
    let report = locality_probe(&state, &input, patch, trials, 1.0f32, &mut rng)?;
    let moved_inside = report.inside.iter().any(|h| h.change > pgbn_core::geometry::PROBE_THRESHOLD);
    Ok(report.contained() && report.outside_changes() == 0 && moved_inside)
}

pub fn rf_audit_cmd(patch_sizes: &[usize], probe: bool, crop: [usize; 3], out: &mut dyn Write) -> Result<Vec<RfAuditRow>> {
    let mut rows = Vec::new();
    let mut w = csv_writer(out);
    w.write_record(["variant", "rf", "total_stride", "grid_shape", "probe_pass"])?;
    for &p in patch_sizes {
        let spec = EncoderSpec::for_patch_size(p)?;
        let grid = spec.grid_shape(crop)?;
        let probe_pass = if probe { Some(probe_locality(p, crop, 30, p as u64)?) } else { None };
        w.write_record([
            p.to_string(),
            spec.rf.to_string(),
            spec.total_stride.to_string(),
            format!("{}x{}x{}", grid[0], grid[1], grid[2]),
            probe_pass.map(|b| b.to_string()).unwrap_or_default(),
        ])?;
        rows.push(RfAuditRow {
            patch_size: p,
            spec,
            grid,
            probe_pass,
        });
    }
    w.flush().map_err(|e| invalid("output", e.to_string()))?;
    if rows.iter().any(|r| r.probe_pass == Some(false)) {
        return Err(invalid("locality", "a probe found influence outside the nominal receptive field"));
    }
    Ok(rows)
}

pub fn gradcheck_cmd(module: SuiteModule, seed: u64, out: &mut dyn Write) -> Result<()> {
    let results = run_suite(module, seed)?;
    let mut w = csv_writer(out);
    w.write_record(["module", "check", "max_rel_error", "tolerance", "checked", "skipped", "pass"])?;
    for r in &results {
        w.write_record([
            r.module.to_string(),
            r.name.clone(),
            format!("{:e}", r.report.max_rel_error),
            format!("{:e}", r.tolerance),
            r.report.checked.to_string(),
            r.report.skipped.to_string(),
            r.passed().to_string(),
        ])?;
    }
    w.flush().map_err(|e| invalid("output", e.to_string()))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(invalid("gradient check", format!("failed: {}", failed.join(", "))));
    }
    Ok(())
}
