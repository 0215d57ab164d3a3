use drift_core::dataset::{plan_split, visible_tubers, DatasetSource, DirectoryDataset};
use drift_core::simulator::{generate_dataset, SimConfig};

#[test]
fn sub_pixel_tubers_are_never_held_out() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        seed: 3,
        side_cm: 24.0,
        nodes: 6,
        grid_px: 12,
        channels: 2,
        tubers: 5,
        dynamic_tubers: 5,
        rotations: 2,
        frames: 4,
        envs: vec!["E1".into()],
        placement_radius_cm: 6.0,
        ..SimConfig::default()
    };
    generate_dataset(&cfg, tmp.path()).unwrap();
    let ds = DirectoryDataset::open(tmp.path()).unwrap();
    let m = ds.manifest();
    let smallest = m.tubers.last().unwrap().clone();

    let visible = visible_tubers(&ds, &m.dynamic, "E1").unwrap();
    assert!(visible.contains(&m.tubers[0]));
    assert!(!visible.contains(&smallest), "{visible:?}");

    for seed in 0..20 {
        let split = plan_split(&ds, 2, seed).unwrap();
        assert_ne!(split.finetune_id, smallest);
        assert!(!split.test_ids.contains(&smallest));
        assert!(split.train_ids.contains(&smallest));
    }
}
