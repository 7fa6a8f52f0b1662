use mvtn::dataset::{generate_synthetic, load_checkpoint, read_dataset, save_checkpoint, write_dataset, Split, SyntheticSpec};
use mvtn::retrieval::{evaluate_retrieval, extract_signatures, ApMode};
use mvtn::train::{continue_training, evaluate, train, TrainConfig, Variant};
use mvtn::viewdist::export_view_distribution;

#[test]
fn dataset_train_persist_evaluate_retrieve() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticSpec::small(3, 4, 2, 21)).unwrap();
    write_dataset(&ds, &dir.path().join("data")).unwrap();
    let ds = read_dataset(&dir.path().join("data")).unwrap();
    assert_eq!((ds.split(Split::Train).len(), ds.split(Split::Test).len()), (12, 6));

    let cfg = TrainConfig { variant: Variant::Offset, epochs: 2, batch_size: 4, points: 64, seed: 21, ..TrainConfig::default() };
    let ck = train(&ds, &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
    let path = dir.path().join("ck.mvtn");
    save_checkpoint(&ck, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert!(loaded == ck);

    let resumed = continue_training(loaded, &ds, 2).unwrap();
    let straight = train(&ds, &cfg).unwrap();
    assert!(resumed.history == straight.history);
    assert!(resumed.params.data.iter().zip(&straight.params.data).all(|(a, b)| a.to_bits() == b.to_bits()));

    let test = ds.subset(Split::Test);
    let ev = evaluate(&straight, &test).unwrap();
    assert_eq!(ev.predictions.len(), 6);
    assert_eq!(Some(ev.accuracy), straight.history.epochs.last().unwrap().test_accuracy);

    let gallery = extract_signatures(&straight, &ds.subset(Split::Train)).unwrap();
    let queries = extract_signatures(&straight, &test).unwrap();
    let report = evaluate_retrieval(&queries, &gallery, ApMode::Standard).unwrap();
    assert!((0.0..=1.0).contains(&report.map));
    assert_eq!(report.queries.len(), 6);

    let dist = export_view_distribution(&straight, &ds).unwrap();
    assert_eq!(dist.samples.len(), ds.len() * cfg.views);
    assert_eq!(dist.classes.len(), 3);
}
