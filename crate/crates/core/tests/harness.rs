use proptest::prelude::*;

use opstego::harness::dataset::center_crop_origin;
use opstego::harness::{
    load_dataset, load_image, pe_spectrum, residual_visual, save_png, synthetic_image, write_synthetic_dataset,
    DatasetSpec, RunConfig,
};
use opstego::tensor::Tensor;
use opstego::StegoError;

#[test]
fn dataset_sorts_crops_and_skips_unusable_files() {
    let d = tempfile::tempdir().unwrap();
    synthetic_image(40, 1).save(d.path().join("b.png")).unwrap();
    synthetic_image(40, 2).save(d.path().join("a.png")).unwrap();
    synthetic_image(16, 3).save(d.path().join("c_small.png")).unwrap();
    std::fs::write(d.path().join("d_junk.png"), b"not an image").unwrap();
    let ds = load_dataset(&DatasetSpec::new(d.path(), 32)).unwrap();
    let names: Vec<_> = ds.paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["a.png", "b.png"]);
    assert!(ds.images.iter().all(|t| t.shape() == [1, 3, 32, 32]));
    let full = load_image(&d.path().join("a.png"), None).unwrap();
    let (y0, x0) = (4, 4);
    assert_eq!(ds.images[0].data()[0], full.data()[y0 * 40 + x0]);
}

#[test]
fn pattern_filters_and_empty_sets_fail() {
    let d = tempfile::tempdir().unwrap();
    write_synthetic_dataset(d.path(), 3, 32, 9).unwrap();
    let spec = DatasetSpec { pattern: "img_0000[01].png".into(), ..DatasetSpec::new(d.path(), 32) };
    assert_eq!(load_dataset(&spec).unwrap().len(), 2);
    let none = DatasetSpec { pattern: "*.jpg".into(), ..spec };
    assert!(matches!(load_dataset(&none), Err(StegoError::Data(_))));
}

#[test]
fn split_holds_out_the_tail() {
    let d = tempfile::tempdir().unwrap();
    write_synthetic_dataset(d.path(), 10, 32, 10).unwrap();
    let ds = load_dataset(&DatasetSpec::new(d.path(), 32)).unwrap();
    let (train, held) = ds.split(0.1);
    assert_eq!((train.len(), held.len()), (9, 1));
    assert_eq!(held[0], ds.images[9]);
    let (train, held) = ds.split(1.0);
    assert_eq!((train.len(), held.len()), (1, 9));
}

#[test]
fn ppm_input_decodes_like_png() {
    let d = tempfile::tempdir().unwrap();
    let img = synthetic_image(32, 11);
    img.save(d.path().join("x.png")).unwrap();
    img.save(d.path().join("x.ppm")).unwrap();
    assert_eq!(load_image(&d.path().join("x.png"), None).unwrap(), load_image(&d.path().join("x.ppm"), None).unwrap());
}

#[test]
fn synthetic_datasets_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_synthetic_dataset(a.path(), 3, 32, 12).unwrap();
    write_synthetic_dataset(b.path(), 3, 32, 12).unwrap();
    for i in 0..3 {
        let n = format!("img_{i:05}.png");
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }
}

#[test]
fn png_export_is_lossless_for_8bit_tensors() {
    let d = tempfile::tempdir().unwrap();
    let t = load_image(&{
        let p = d.path().join("src.png");
        synthetic_image(32, 13).save(&p).unwrap();
        p
    }, None)
    .unwrap();
    let out = d.path().join("out.png");
    save_png(&t, &out).unwrap();
    assert_eq!(load_image(&out, None).unwrap(), t);
    save_png(&t, &d.path().join("again.png")).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(d.path().join("again.png")).unwrap());
}

#[test]
fn residual_visual_centers_on_mid_gray() {
    let r = Tensor::new(&[1, 3, 1, 2], vec![0.0f32, 0.05, -0.05, 1.0, -1.0, 0.02]).unwrap();
    let v = residual_visual(&r, 5.0);
    assert_eq!(v.data(), &[0.5, 0.75, 0.25, 1.0, 0.0, 0.6]);
}

#[test]
fn crop_origin_rounds_down() {
    assert_eq!(center_crop_origin(65, 64, 64), Some((0, 0)));
    assert_eq!(center_crop_origin(67, 70, 64), Some((1, 3)));
    assert_eq!(center_crop_origin(63, 64, 64), None);
    assert_eq!(center_crop_origin(64, 64, 0), None);
}

#[test]
fn run_config_overrides_only_given_keys() {
    let cfg = RunConfig::from_toml("[model]\nl_ms = 8\nheight = 32\nwidth = 32\nwindow = 8\n[train]\nimage_size = 32\n").unwrap();
    let def = RunConfig::default();
    assert_eq!(cfg.model.l_ms, 8);
    assert_eq!(cfg.model.heads, def.model.heads);
    assert_eq!(cfg.loss, def.loss);
    assert_eq!(cfg.train.lr, def.train.lr);
    assert!(matches!(RunConfig::from_toml("[loss]\nlambda1 = -1.0"), Err(StegoError::Config(_))));
    assert!(matches!(RunConfig::from_toml("not toml ["), Err(StegoError::Config(_))));
}

fn embedding(n: usize, c: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, n * c).prop_map(move |v| Tensor::new(&[n, c], v).unwrap())
}

proptest! {
    #[test]
    fn spectrum_is_sorted_nonnegative_and_normalized(e in (2usize..10, 1usize..10).prop_flat_map(|(n, c)| embedding(n, c)), center in any::<bool>()) {
        let r = pe_spectrum(&e, center).unwrap();
        let (n, c) = (e.shape()[0], e.shape()[1]);
        prop_assert_eq!(r.eigenvalues.len(), n.min(c));
        prop_assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(r.eigenvalues.iter().all(|&l| l >= 0.0));
        prop_assert!(r.ratios.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        if !r.degenerate {
            prop_assert!((r.ratios.last().unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn spectrum_ignores_row_order_and_scale(e in embedding(6, 4), k in 0.1f64..10.0, center in any::<bool>()) {
        let (n, c) = (6, 4);
        let d = e.data();
        let rev = Tensor::new(&[n, c], (0..n).rev().flat_map(|i| d[i * c..(i + 1) * c].to_vec()).collect()).unwrap();
        let scaled = e.map(|v| v * k);
        let a = pe_spectrum(&e, center).unwrap();
        let b = pe_spectrum(&rev, center).unwrap();
        let s = pe_spectrum(&scaled, center).unwrap();
        for i in 0..a.ratios.len() {
            prop_assert!((a.ratios[i] - b.ratios[i]).abs() < 1e-9);
            prop_assert!((a.ratios[i] - s.ratios[i]).abs() < 1e-9);
            prop_assert!((a.eigenvalues[i] * k * k - s.eigenvalues[i]).abs() < 1e-9 * (1.0 + s.eigenvalues[i]));
        }
    }
}

#[test]
fn spectrum_rejects_bad_shapes() {
    assert!(pe_spectrum(&Tensor::<f64>::zeros(&[1, 4]), true).is_err());
    assert!(pe_spectrum(&Tensor::<f64>::zeros(&[2, 2, 2]), true).is_err());
    assert!(pe_spectrum(&Tensor::<f64>::zeros(&[3, 2]), true).unwrap().degenerate);
}
