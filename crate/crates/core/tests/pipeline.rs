use lsnet::data::{blobs10, load_dataset, save_raw_dir, DataFormat};
use lsnet::model::{load_weights, save_weights, Model, ModelSpec};
use lsnet::train::{evaluate, fit, TrainConfig};

#[test]
fn trained_weights_survive_a_round_trip_through_disk() {
    let spec = ModelSpec::micro();
    let model = Model::new(spec.clone()).unwrap();
    let mut store = model.init::<f32>(5).unwrap();
    let train = blobs10(96, 11);
    let test = blobs10(48, 12);
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 0,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let log = fit(&model, &mut store, &train, Some(&test), &cfg, |_| {}).unwrap();
    let trained = log.split("train");
    assert!(trained[1].loss < trained[0].loss, "{:?}", log.records);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.lsw");
    save_weights(&store, &spec, &path).unwrap();
    let back = load_weights::<f32>(&path, &spec).unwrap();
    let a = evaluate(&model, &store, &test, 16).unwrap();
    let b = evaluate(&model, &back, &test, 16).unwrap();
    assert_eq!((a.loss, a.top1), (b.loss, b.top1));
    assert_eq!(b.top1, log.split("test")[1].top1);

    let mut other = spec.clone();
    other.lkp_dw = false;
    assert!(load_weights::<f32>(&path, &other).is_err());
}

#[test]
fn raw_directory_layout_reads_back_the_same_images() {
    let ds = blobs10(30, 4);
    let dir = tempfile::tempdir().unwrap();
    save_raw_dir(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path(), DataFormat::RawDir, Some(10)).unwrap();
    assert_eq!(back.len(), ds.len());
    // Files are grouped by class, so compare as multisets of (label, image).
    let mut a: Vec<(usize, &[u8])> = (0..ds.len()).map(|i| (ds.labels()[i], ds.image(i))).collect();
    let mut b: Vec<(usize, &[u8])> = (0..back.len()).map(|i| (back.labels()[i], back.image(i))).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

fn removed_layers(edit: fn(&mut ModelSpec)) -> (Vec<String>, u64) {
    let full = Model::new(ModelSpec::micro()).unwrap().count_macs(32, 32).unwrap();
    let mut spec = ModelSpec::micro();
    edit(&mut spec);
    let cut = Model::new(spec).unwrap().count_macs(32, 32).unwrap();
    let removed = full
        .entries
        .iter()
        .filter(|e| !cut.entries.iter().any(|c| c.name == e.name))
        .map(|e| e.name.clone())
        .collect();
    (removed, full.total_macs - cut.total_macs)
}

#[test]
fn ablations_remove_exactly_their_layers() {
    let (lkp, saved) = removed_layers(|s| s.lkp_dw = false);
    assert_eq!(lkp, ["stages.2.blocks.1.mixer.dw_large"]);
    assert!(saved > 0);

    let (local, saved) = removed_layers(|s| s.dw = false);
    assert_eq!(
        local,
        ["stages.1.blocks.0.dw", "stages.2.blocks.0.dw", "stages.3.blocks.0.dw"]
    );
    assert!(saved > 0);

    let (se, saved) = removed_layers(|s| s.se = false);
    assert_eq!(se.len(), 6);
    assert!(se.iter().all(|n| n.contains(".se.fc")), "{se:?}");
    assert!(saved > 0);
}
