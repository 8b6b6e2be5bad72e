use std::path::PathBuf;

use pgbn::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use pgbn::config::{SynthFile, TrainFile, WidthsSpec};
use pgbn::core::model::{ModelConfig, ModelState, Variant, Widths};
use pgbn::core::synth::SynthSpec;
use pgbn::core::train::EpochRecord;
use pgbn::core::Tensor;
use pgbn::history::{read_history, write_history};
use pgbn::manifest::{load_samples, read_manifest, write_manifest, Manifest, ManifestEntry};
use pgbn::synthgen::generate_dataset;
use pgbn::volume::{decode_volume, encode_volume, read_volume, write_volume};
use pgbn::FormatError;

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_volume_size() {
    let t = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
    assert_eq!(encode_volume(&t).unwrap().len(), 4 + 16 + 32);
}

#[test]
fn volume_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| (i as f32 * 0.731).sin() * 1e3 + f32::MIN_POSITIVE);
    let path = dir.path().join("nested/v.vol");
    write_volume(&path, &t).unwrap();
    let back = read_volume::<f32>(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(bits(&back), bits(&t));
}

#[test]
fn volume_parse_errors() {
    let t = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| i as f32);
    let good = encode_volume(&t).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_volume::<f32>(&bad), Err(FormatError::BadMagic { .. })));
    assert!(matches!(
        decode_volume::<f32>(&good[..good.len() - 1]),
        Err(FormatError::Truncated(_))
    ));
    assert!(matches!(decode_volume::<f32>(&good[..10]), Err(FormatError::Truncated(_))));
    let mut long = good.clone();
    long.extend_from_slice(&[0; 4]);
    assert!(matches!(decode_volume::<f32>(&long), Err(FormatError::TrailingBytes(4))));

    let mut huge = b"VOL1".to_vec();
    for _ in 0..4 {
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(matches!(decode_volume::<f32>(&huge), Err(FormatError::ExtentOverflow(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for variant in [Variant::Gap, Variant::Fg, Variant::Pg] {
        let state = ModelState::<f32>::build(ModelConfig::new(variant, 25, Widths::DESK).unwrap(), 17);
        let bytes = encode_checkpoint(&state);
        assert_eq!(&bytes[..4], b"PGBN");
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back.config(), state.config());
        assert_eq!(back.seed(), 17);
        for (a, b) in back.params().iter().zip(state.params()) {
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }
}

#[test]
fn checkpoint_file_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let state = ModelState::<f32>::build(ModelConfig::new(Variant::Pg, 9, Widths::DESK).unwrap(), 2);
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &state).unwrap();
    assert_eq!(load_checkpoint::<f32>(&path).unwrap(), state);

    let bytes = encode_checkpoint(&state);
    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(decode_checkpoint::<f32>(&v), Err(FormatError::UnsupportedVersion(9))));
    let mut v = bytes.clone();
    v[1] = b'?';
    assert!(matches!(decode_checkpoint::<f32>(&v), Err(FormatError::BadMagic { .. })));
    assert!(matches!(
        decode_checkpoint::<f32>(&bytes[..bytes.len() - 3]),
        Err(FormatError::Truncated(_))
    ));
    let mut v = bytes.clone();
    v.push(0);
    assert!(matches!(decode_checkpoint::<f32>(&v), Err(FormatError::TrailingBytes(1))));
}

#[test]
fn manifest_paths_are_relative_to_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let vol = dir.path().join("vols/a.vol");
    write_volume(&vol, &Tensor::<f32>::from_fn(&[1, 3, 3, 3], |i| i as f32)).unwrap();
    let m = Manifest {
        entries: vec![ManifestEntry {
            path: vol.clone(),
            label: 1,
            subject: 7,
            task: "easy".into(),
            fold: 3,
        }],
    };
    let path = dir.path().join("m.csv");
    write_manifest(&path, &m).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("path,label,subject,task,fold\n"), "{text}");
    assert!(text.contains("vols/a.vol,1,7,easy,3"), "{text}");
    assert_eq!(read_manifest(&path).unwrap(), m);

    let samples = load_samples::<f64>(&read_manifest(&path).unwrap()).unwrap();
    let mean: f64 = samples[0].volume.data().iter().sum::<f64>() / 27.0;
    assert!(mean.abs() < 1e-9);
    assert_eq!(samples[0].id, 7);
}

#[test]
fn manifest_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, "path,label,subject,task,fold\na.vol,2,0,easy,1\n").unwrap();
    assert!(read_manifest(&path).is_err());
    std::fs::write(&path, "path,label,subject,task,fold\na.vol,0,0,easy,6\n").unwrap();
    assert!(read_manifest(&path).is_err());
}

const TRAIN_TOML: &str = r#"
variant = "pg"
patch_size = 41
widths = "desk"
lambda = 0.01
epochs = 20
patience = 5
batch = 4
peak_lr = 1e-3
warmup_epochs = 1
crop = 64
seed = 3
precision = "f32"
dataset_manifest = "data/easy.csv"
out_dir = "runs/pg41"
"#;

#[test]
fn train_config_key_set_is_exact() {
    let f = TrainFile::parse(TRAIN_TOML).unwrap();
    assert_eq!(f.model().unwrap(), ModelConfig::new(Variant::Pg, 41, Widths::DESK).unwrap());
    assert_eq!(f.train_config().crop, [64; 3]);

    let extra = format!("{TRAIN_TOML}momentum = 0.9\n");
    assert!(TrainFile::parse(&extra).is_err());
    let missing = TRAIN_TOML.replace("patience = 5\n", "");
    assert!(TrainFile::parse(&missing).is_err());
    let bad_variant = TRAIN_TOML.replace("\"pg\"", "\"mlp\"");
    assert!(TrainFile::parse(&bad_variant).is_err());
    let bad_patch = TRAIN_TOML.replace("patch_size = 41", "patch_size = 13");
    assert!(TrainFile::parse(&bad_patch).is_err());
}

#[test]
fn train_config_widths_table_and_paths() {
    let text = TRAIN_TOML.replace(
        "widths = \"desk\"",
        "widths = { encoder = [4, 4, 8, 8, 16], gate = [8, 8, 8, 4] }",
    );
    let f = TrainFile::parse(&text).unwrap();
    assert_eq!(
        f.widths,
        WidthsSpec::Table {
            encoder: [4, 4, 8, 8, 16],
            gate: [8, 8, 8, 4]
        }
    );
    let back = TrainFile::parse(&f.to_toml().unwrap()).unwrap();
    assert_eq!(back, f);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, TRAIN_TOML).unwrap();
    let loaded = TrainFile::load(&path).unwrap();
    assert_eq!(loaded.dataset_manifest, dir.path().join("data/easy.csv"));
    assert_eq!(loaded.out_dir, dir.path().join(PathBuf::from("runs/pg41")));
}

#[test]
fn synth_file_defaults_and_round_trip() {
    let empty: SynthFile = toml::from_str("").unwrap();
    assert_eq!(empty.spec().unwrap(), SynthSpec::default());
    let text = SynthFile::default().to_toml().unwrap();
    let back: SynthFile = toml::from_str(&text).unwrap();
    assert_eq!(back.spec().unwrap(), SynthSpec::default());
    assert!(toml::from_str::<SynthFile>("q = 0.5\nflavour = 1\n").is_err());
    let bad: SynthFile = toml::from_str("q = 0.0").unwrap();
    assert!(bad.spec().is_err());
}

#[test]
fn history_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    let h = vec![
        EpochRecord {
            epoch: 1,
            train_loss: 0.7,
            val_loss: 0.69,
            val_acc: 0.5,
            val_auroc: None,
            lr: 1e-4,
        },
        EpochRecord {
            epoch: 2,
            train_loss: 0.5,
            val_loss: 0.55,
            val_acc: 0.75,
            val_auroc: Some(0.8125),
            lr: 5e-5,
        },
    ];
    write_history(&path, &h).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss,val_acc,val_auroc,lr\n"));
    assert_eq!(read_history(&path).unwrap(), h);
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        canonical: [24; 3],
        crop: [20; 3],
        n_per_class: 5,
        spheres: vec![pgbn::core::synth::Sphere {
            center: [10.0, 11.0, 12.0],
            radius: 3.0,
        }],
        ..SynthSpec::default()
    }
}

#[test]
fn generated_dataset_is_deterministic() {
    let spec = small_spec();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = generate_dataset(&spec, a.path()).unwrap();
    generate_dataset(&spec, b.path()).unwrap();
    assert_eq!(da.subjects, 20);
    for rel in ["easy.csv", "hard.csv", "manifest.csv", "lesion_mask.vol", "spec.toml", "easy/sub-0003.vol", "hard/sub-0017.vol"] {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        let y = std::fs::read(b.path().join(rel)).unwrap();
        assert_eq!(x, y, "{rel}");
    }
    let m = read_manifest(&da.combined).unwrap();
    assert_eq!(m.task("easy").entries.len(), 10);
    assert_eq!(m.task("hard").entries.len(), 10);
    let mask = read_volume::<f32>(&da.mask).unwrap();
    assert_eq!(mask.shape(), &[1, 24, 24, 24]);
    let inside = mask.data().iter().filter(|&&v| v == 1.0).count();
    assert!(inside > 100 && inside < 200, "{inside}");
}
