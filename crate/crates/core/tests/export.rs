use pii_core::eval::{export_grid, export_image, judge_scores, read_png, sidecar_path, tile_grid, write_png, Sidecar};
use pii_core::models::data::shapes10;
use pii_core::models::toy::{accuracy, random_handle, train, Arch, TrainConfig};
use pii_core::models::{load_model, save_model};
use pii_core::{invert, AugmentationSpec, InversionConfig, PiiError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, side: usize) -> Tensor {
    Tensor::randn(&[3, side, side], &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| 0.5 + 0.2 * v)
}

#[test]
fn png_round_trip_is_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let x = image(1, 12).map(|v| v.clamp(0.0, 1.0));
    write_png(&path, &x).unwrap();
    let back = read_png(&path).unwrap();
    assert_eq!(back.shape(), x.shape());
    assert!(back.max_abs_diff(&x) <= 0.5 / 255.0 + 1e-12);
    // quantized values survive exactly
    write_png(&path, &back).unwrap();
    assert_eq!(read_png(&path).unwrap(), back);
}

#[test]
fn out_of_range_pixels_are_clamped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.png");
    let x = Tensor::new(vec![3, 1, 2], vec![-3.0, 4.0, 0.5, 0.5, f64::NAN, 1.0]).unwrap();
    write_png(&path, &x).unwrap();
    let back = read_png(&path).unwrap();
    assert_eq!(back.data()[0], 0.0);
    assert_eq!(back.data()[1], 1.0);
    assert_eq!(back.data()[4], 0.0);
}

#[test]
fn single_cell_grid_equals_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let x = image(2, 8);
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    write_png(&a, &x).unwrap();
    export_grid(&b, std::slice::from_ref(&x), 1, 1).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());

    let g = tile_grid(&[image(3, 4), image(4, 4), image(5, 4)], 2, 2).unwrap();
    assert_eq!(g.shape(), &[3, 8, 8]);
    assert!(tile_grid(&[image(3, 4), image(4, 5)], 1, 2).is_err());
}

#[test]
fn sidecar_records_config_losses_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let model = random_handle(Arch::TinyMixer, 4, 3).unwrap();
    let cfg = InversionConfig {
        target_class: 1,
        resolution: 32,
        n_stages: 2,
        iterations_per_stage: 3,
        augmentation: AugmentationSpec {
            ensemble_size: 2,
            ..Default::default()
        },
        seed: 4,
        ..Default::default()
    };
    let result = invert(&model, &cfg).unwrap();
    let scores = judge_scores(result.image.pixels(), 1, std::slice::from_ref(&model), true).unwrap();
    let png = dir.path().join("inv.png");
    let written = export_image(&png, model.name(), &result, scores).unwrap();
    let text = std::fs::read_to_string(sidecar_path(&png)).unwrap();
    let parsed: Sidecar = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, written);
    assert_eq!(parsed.config, cfg);
    assert_eq!(parsed.seed, 4);
    assert_eq!(parsed.losses.nll, result.loss_trace.last().unwrap().nll);
    let s = &parsed.judge_scores[model.name()];
    assert!(s.predicted < 4 && (0.0..=1.0).contains(&s.target_probability));
    assert_eq!(read_png(&png).unwrap().shape(), &[3, 32, 32]);
}

#[test]
fn trained_model_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = shapes10(120, 0);
    let test = shapes10(40, 1);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        learning_rate: 3e-3,
        seed: 0,
        flip: true,
    };
    let trained = train(Arch::CnnBn, &data, &test, &cfg).unwrap();
    let manifest = save_model(dir.path(), "m", &trained, "shapes10", &data.class_names, &cfg).unwrap();
    let (handle, read) = load_model(dir.path(), "m").unwrap();
    assert_eq!(read, manifest);
    assert_eq!(read.hash.len(), 64);
    let before = accuracy(&trained.handle("m"), &test).unwrap();
    assert_eq!(accuracy(&handle, &test).unwrap(), before);
    assert!((before - manifest.accuracy).abs() < 1e-12);
    assert!(handle.has_bn_stats());

    let wp = dir.path().join("m.weights");
    let mut bytes = std::fs::read(&wp).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&wp, bytes).unwrap();
    assert!(matches!(load_model(dir.path(), "m"), Err(PiiError::Format(_))));
    assert!(matches!(load_model(dir.path(), "absent"), Err(PiiError::Ingestion(_))));
}
