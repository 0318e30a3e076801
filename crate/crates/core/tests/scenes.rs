use maskctl_core::conditioning::TextEncoderParams;
use maskctl_core::synthetic_data::{
    build_dataset, caption_from_metadata, generate_composite_scene, generate_records, generate_scene, DatasetManifest,
    SceneSpec,
};
use proptest::prelude::*;

#[test]
fn dataset_on_disk_matches_in_memory_records() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        image_size: 32,
        ..SceneSpec::default()
    };
    let manifest = build_dataset(&spec, 12, 4, dir.path()).unwrap();
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded.checksum(), manifest.checksum());
    assert_eq!(loaded.spec, spec);
    assert_eq!(loaded.load_records().unwrap(), generate_records(&spec, 12, 4).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_scene_satisfies_its_invariants(
        seed in any::<u64>(),
        size in prop::sample::select(vec![16usize, 32, 64]),
        correlated in any::<bool>(),
    ) {
        let mut spec = if correlated { SceneSpec::correlated() } else { SceneSpec::default() };
        spec.image_size = size;
        let r = generate_scene(&spec, seed).unwrap();
        prop_assert!(r.check_invariants().is_ok());
        prop_assert!(r.mask.data().iter().all(|&m| m <= 1));
        prop_assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let text = TextEncoderParams::init(8, 0);
        prop_assert!(text.tokenize(&caption_from_metadata(&r.metadata)).is_ok());
    }

    #[test]
    fn composite_masks_never_touch(seed in any::<u64>(), objects in 1usize..4) {
        let spec = SceneSpec { image_size: 64, ..SceneSpec::default() };
        let c = generate_composite_scene(&spec, seed, objects).unwrap();
        prop_assert_eq!(c.masks.len(), objects);
        for (i, a) in c.masks.iter().enumerate() {
            for b in &c.masks[i + 1..] {
                let overlap = a.data().iter().zip(b.data()).any(|(&x, &y)| x == 1 && y == 1);
                prop_assert!(!overlap);
            }
        }
    }
}
