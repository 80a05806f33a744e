//! Render, persist, reload and sample through the public API only.

use epidiff_core::camera::{CameraIntrinsics, ViewLayout};
use epidiff_core::sampling::{build_sample_volume, default_near_far};
use epidiff_core::scene::{make_dataset, oracle_correspondence_check, SyntheticScene};
use epidiff_core::tensor::tensor_read;

#[test]
fn rendered_views_survive_disk_and_feed_the_sampler() {
    let dir = tempfile::tempdir().unwrap();
    let layout = ViewLayout::eval_ring(CameraIntrinsics::square(24).unwrap()).unwrap();
    let renders = make_dataset(&SyntheticScene::textured_sphere(), &layout, 24, 24).unwrap();
    renders.write(dir.path(), false).unwrap();
    renders.layout().write_json(dir.path().join("cameras.json")).unwrap();

    let reloaded = ViewLayout::read_json(dir.path().join("cameras.json")).unwrap();
    assert_eq!(reloaded.len(), layout.len());
    let maps: Vec<_> = (0..reloaded.len())
        .map(|i| tensor_read(dir.path().join(format!("rgb_{i:03}.etz"))).unwrap())
        .collect();
    for (m, v) in maps.iter().zip(&renders.views) {
        assert_eq!(m.shape(), v.rgb.shape());
        assert!(m.data().iter().zip(v.rgb.data()).all(|(a, b)| *a == *b as f32 as f64));
    }

    let (near, far) = default_near_far(&reloaded.cameras[0]).unwrap();
    let a = build_sample_volume(2, &reloaded, &maps, 4, 8, near, far).unwrap();
    let b = build_sample_volume(2, &reloaded, &maps, 4, 8, near, far).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.features.shape(), &[4, 24 * 24, 8, 3]);
    assert_eq!(a.view_indices[0], 2);
    assert!(a.valid.iter().any(|&v| v));

    let report = oracle_correspondence_check(&renders, 2, 4, 16, near, far).unwrap();
    assert!(!report.empty);
    assert!(report.mean_color_err < 0.05, "{report:?}");
}
