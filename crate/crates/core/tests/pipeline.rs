use vpreid::checkpoint::Checkpoint;
use vpreid::config::TrainConfig;
use vpreid::eval::EmbeddingSet;
use vpreid::experiment::{split_by_cell, train_and_evaluate_on};
use vpreid::model::Toggles;
use vpreid::synth::{dataset_checksum, generate_dataset, generate_in_memory, Dataset, SynthConfig};
use vpreid::trainer::{checkpoint_path, embedding_set, load_model, Trainer};

fn tiny(toggles: Toggles, epochs: usize) -> TrainConfig {
    TrainConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        shape_width: 8,
        shape_layers: 1,
        shape_heads: 2,
        epochs,
        seed: 3,
        toggles,
        ..TrainConfig::default()
    }
}

fn data() -> Dataset {
    generate_in_memory(&SynthConfig {
        num_identities: 6,
        tracklets_per_cell: 3,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn baseline_rung_matches_plain_training_bit_for_bit() {
    let (train, test) = split_by_cell(&data(), 2);
    let config = tiny(Toggles::NONE, 2);
    let via_experiment = train_and_evaluate_on(&config, &train, &test).unwrap();

    let mut t = Trainer::<f32>::new(config, train.num_identities()).unwrap();
    let records = t.fit(&train, None, |_| {}).unwrap();
    let report = t.embedding_set(&test).unwrap().evaluate().unwrap();

    assert_eq!(records, via_experiment.records);
    assert_eq!(report, via_experiment.report);
}

#[test]
fn shape_toggle_changes_descriptor_by_ten() {
    let d = data();
    let with = Trainer::<f32>::new(tiny(Toggles::ALL, 0), d.num_identities()).unwrap();
    let without = Trainer::<f32>::new(
        tiny(
            Toggles {
                shape: false,
                ..Toggles::ALL
            },
            0,
        ),
        d.num_identities(),
    )
    .unwrap();
    let a = with.embedding_set(&d).unwrap();
    let b = without.embedding_set(&d).unwrap();
    assert_eq!(a.descriptors.ncols(), 2 * 16 + 10);
    assert_eq!(b.descriptors.ncols(), 2 * 16);
    assert_eq!(a.descriptors.nrows(), d.len());
}

#[test]
fn resume_from_checkpoint_continues_identically() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(Toggles::ALL, 2);

    let mut straight = Trainer::<f32>::new(config.clone(), d.num_identities()).unwrap();
    let all = straight.fit(&d, None, |_| {}).unwrap();

    let mut first = Trainer::<f32>::new(config.clone(), d.num_identities()).unwrap();
    let mut head = first.run_epoch(&d, |_| {}).unwrap();
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().write(&path).unwrap();
    let mut resumed = Trainer::<f32>::from_checkpoint(config, &Checkpoint::read(&path).unwrap()).unwrap();
    head.extend(resumed.fit(&d, None, |_| {}).unwrap());

    assert_eq!(head, all);
    assert_eq!(
        resumed.store.get(resumed.model.encoder.blocks[0].qkv.weight).value,
        straight.store.get(straight.model.encoder.blocks[0].qkv.weight).value
    );
}

#[test]
fn fit_writes_final_checkpoint_usable_for_inference() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(Toggles::ALL, 1);
    let mut t = Trainer::<f32>::new(config.clone(), d.num_identities()).unwrap();
    t.fit(&d, Some(dir.path()), |_| {}).unwrap();
    let ckpt = Checkpoint::read(&checkpoint_path(dir.path(), None)).unwrap();
    let (model, store) = load_model::<f32>(&config, &ckpt).unwrap();
    assert_eq!(embedding_set(&model, &store, &d).unwrap(), t.embedding_set(&d).unwrap());
}

#[test]
fn dataset_and_embeddings_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        num_identities: 3,
        frames_per_tracklet: 4,
        seed: 5,
        ..SynthConfig::default()
    };
    let written = generate_dataset(&config, dir.path()).unwrap();
    let loaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(loaded.records, written.records);
    assert_eq!(loaded.frames, written.frames);
    let sum = dataset_checksum(dir.path()).unwrap();
    assert_eq!(sum.len(), 64);

    let other = tempfile::tempdir().unwrap();
    generate_dataset(&config, other.path()).unwrap();
    assert_eq!(dataset_checksum(other.path()).unwrap(), sum);

    let t = Trainer::<f32>::new(tiny(Toggles::ALL, 0), loaded.num_identities()).unwrap();
    let set = t.embedding_set(&loaded).unwrap();
    let path = dir.path().join("e.sasd");
    set.write(&path).unwrap();
    let back = EmbeddingSet::read(&path).unwrap();
    assert_eq!(back, set);
    assert_eq!(back.evaluate().unwrap(), set.evaluate().unwrap());
}

#[test]
fn training_reduces_loss() {
    let d = data();
    let mut t = Trainer::<f32>::new(tiny(Toggles::NONE, 6), d.num_identities()).unwrap();
    let records = t.fit(&d, None, |_| {}).unwrap();
    let per_epoch = |e: usize| {
        let r: Vec<f64> = records.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
        r.iter().sum::<f64>() / r.len() as f64
    };
    assert!(per_epoch(5) < per_epoch(0), "{} vs {}", per_epoch(5), per_epoch(0));
    assert!(records.iter().all(|r| r.total.is_finite()));
}
