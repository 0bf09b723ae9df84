use roadseg::checkpoint::Checkpoint;
use roadseg::IoError;
use roadseg_core::config::{Profile, TrainConfig};
use roadseg_core::data::RasterSample;
use roadseg_core::encoder::EncoderVariant;
use roadseg_core::synth::{generate_sample, SynthConfig};
use roadseg_core::train::Trainer;

fn config(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::profile(Profile::Tiny);
    c.crop = 64;
    c.batch = 2;
    c.epochs = epochs;
    c.lr_drops = vec![2];
    c
}

fn data() -> Vec<RasterSample> {
    let cfg = SynthConfig {
        size: 64,
        seed: 8,
        ..Default::default()
    };
    (0..4).map(|i| generate_sample(&cfg, i).unwrap()).collect()
}

#[test]
fn bytes_round_trip_exactly() {
    let mut t = Trainer::new(config(3)).unwrap();
    t.fit(&data(), &data()[..2], |_, _| Ok(())).unwrap();
    let c = Checkpoint::from_trainer(&t);
    let bytes = c.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_bytes(), bytes);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn resumed_training_continues_the_same_trajectory() {
    let train = data();
    let mut straight = Trainer::new(config(3)).unwrap();
    straight.fit(&train, &[], |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    // a one-epoch run, extended to three epochs on resume
    let mut short = config(1);
    short.lr_drops.clear();
    let mut first = Trainer::new(short).unwrap();
    first.fit(&train, &[], |_, _| Ok(())).unwrap();
    Checkpoint::from_trainer(&first).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().into_trainer_with(config(3)).unwrap();
    resumed.fit(&train, &[], |_, _| Ok(())).unwrap();

    let a: Vec<f64> = straight.history.iter().map(|r| r.train_loss).collect();
    let b: Vec<f64> = resumed.history.iter().map(|r| r.train_loss).collect();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
    }
    assert_eq!(straight.store, resumed.store);
}

#[test]
fn architecture_mismatch_is_reported_as_a_diff() {
    let t = Trainer::new(config(3)).unwrap();
    let c = Checkpoint::from_trainer(&t);
    let mut other = config(3);
    other.encoder = EncoderVariant::Resnest50Compatible;
    match c.clone().into_trainer_with(other) {
        Err(IoError::SpecMismatch { diff }) => {
            assert!(diff.contains("variant") && diff.contains("channels"), "{diff}");
        }
        r => panic!("expected a mismatch, got {:?}", r.map(|_| ())),
    }
    let mut no_acam = config(3);
    no_acam.toggles.acam = false;
    assert!(matches!(c.into_trainer_with(no_acam), Err(IoError::SpecMismatch { .. })));
}
