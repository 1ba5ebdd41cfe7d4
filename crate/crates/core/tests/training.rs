mod common;

use common::{load_pair, synth, tiny_config};
use midfsl::autograd::Tensor;
use midfsl::data::DomainStyle;
use midfsl::trainer::{load_checkpoint, save_checkpoint, train_base, CHECKPOINT_VERSION};
use midfsl::{Error, LossConfig, Objective};

#[test]
fn memorizes_two_classes() {
    let s = synth(DomainStyle::Sketch, 2, 2, 8, 16, 5);
    let (base, _, _) = load_pair(&s);
    let mut cfg = tiny_config(16, 30, 0);
    cfg.batch_size = 4;
    cfg.loss = LossConfig {
        splits: 2,
        neighbors: 1,
        ..LossConfig::default()
    };
    let out = train_base(&cfg, &base, None, |_| {}).unwrap();
    let last = out.state.history.last().unwrap();
    assert_eq!(last.train_accuracy, 1.0, "{last:?}");
}

#[test]
fn zero_aux_weights_match_baseline() {
    let s = synth(DomainStyle::Sketch, 6, 5, 20, 16, 2);
    let (base, _, _) = load_pair(&s);
    let mut full = tiny_config(16, 4, 3);
    full.loss.lambda1 = 0.0;
    full.loss.lambda2 = 0.0;
    let mut baseline = full.clone();
    baseline.objective = Objective::CosineBaseline;
    let a = train_base(&full, &base, None, |_| {}).unwrap();
    let b = train_base(&baseline, &base, None, |_| {}).unwrap();
    for (x, y) in a.state.history.iter().zip(&b.state.history) {
        assert_eq!(x.loss_cls.to_bits(), y.loss_cls.to_bits());
        assert_eq!(x.train_accuracy, y.train_accuracy);
    }
    assert_eq!(a.state.network, b.state.network);
}

#[test]
fn reconstruction_loss_drops() {
    for seed in 0..3 {
        let s = synth(DomainStyle::Sketch, 8, 5, 30, 16, 10 + seed);
        let (base, _, _) = load_pair(&s);
        let cfg = tiny_config(16, 20, seed);
        let out = train_base(&cfg, &base, None, |_| {}).unwrap();
        let first = out.state.history[0].loss_recon.unwrap();
        let last = out.state.history.last().unwrap().loss_recon.unwrap();
        assert!(last <= 0.8 * first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn runs_are_reproducible() {
    let s = synth(DomainStyle::Texture, 6, 5, 16, 16, 4);
    let (base, _, _) = load_pair(&s);
    let mut cfg = tiny_config(16, 3, 8);
    cfg.augment = midfsl::data::Augment::default();
    let a = train_base(&cfg, &base, None, |_| {}).unwrap();
    let b = train_base(&cfg, &base, None, |_| {}).unwrap();
    let strip =
        |h: &[midfsl::trainer::EpochRecord]| h.iter().map(|r| r.deterministic_part()).collect::<Vec<_>>();
    assert_eq!(strip(&a.state.history), strip(&b.state.history));
    assert_eq!(a.checkpoint, b.checkpoint);
}

#[test]
fn learning_rate_never_increases() {
    let s = synth(DomainStyle::Sketch, 4, 2, 6, 16, 6);
    let (base, _, _) = load_pair(&s);
    let mut cfg = tiny_config(16, 6, 0);
    cfg.loss.neighbors = 2;
    cfg.lr.milestones = vec![2, 4];
    let out = train_base(&cfg, &base, None, |_| {}).unwrap();
    let rates: Vec<f64> = out.state.history.iter().map(|r| r.lr).collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
    assert!(out.state.history.iter().all(|r| r.loss_cls.is_finite()
        && r.loss_recon.unwrap().is_finite()
        && r.loss_mid.unwrap().is_finite()));
}

#[test]
fn diverging_run_names_the_term() {
    let s = synth(DomainStyle::Sketch, 4, 2, 6, 16, 6);
    let (mut base, _, _) = load_pair(&s);
    base.images[3][40] = f64::NAN;
    let cfg = tiny_config(16, 3, 0);
    match train_base(&cfg, &base, None, |_| {}) {
        Err(Error::NonFiniteLoss { term, epoch, .. }) => {
            assert_eq!(term, "classification");
            assert_eq!(epoch, 0);
        }
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|o| o.state.history)),
    }
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let s = synth(DomainStyle::Sketch, 5, 2, 6, 16, 7);
    let (base, _, norm) = load_pair(&s);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(16, 2, 1);
    cfg.checkpoint_dir = Some(dir.path().join("run"));
    let mut ckpt = train_base(&cfg, &base, None, |_| {}).unwrap().checkpoint;
    ckpt.normalizer = Some(norm);
    assert!(dir.path().join("run/checkpoint.json").exists());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("run/epochs.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let path = dir.path().join("ck.json");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let x = Tensor::new(vec![3, 1, 16, 16], base.images[..3].concat());
    let before = ckpt.network.forward_with_taps(&x).unwrap();
    let after = back.network.forward_with_taps(&x).unwrap();
    assert_eq!(before, after);

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::CorruptArchive(_))));

    let bumped = text.replacen(
        &format!("\"format_version\":{CHECKPOINT_VERSION}"),
        &format!("\"format_version\":{}", CHECKPOINT_VERSION + 1),
        1,
    );
    std::fs::write(&path, bumped).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::VersionMismatch { found, expected }) if found == CHECKPOINT_VERSION + 1 && expected == CHECKPOINT_VERSION
    ));
}

#[test]
fn validation_keeps_the_best_epoch() {
    let s = synth(DomainStyle::Sketch, 5, 5, 8, 16, 9);
    let (base, novel, _) = load_pair(&s);
    let mut cfg = tiny_config(16, 4, 2);
    cfg.loss.neighbors = 2;
    cfg.validation = Some(midfsl::trainer::ValidationConfig {
        every: 1,
        mode: midfsl::FeatureMode::Near,
        episodes: midfsl::EpisodeConfig {
            way: 5,
            shot: 1,
            queries: 3,
            episodes: 20,
        },
    });
    let out = train_base(&cfg, &base, Some(&novel), |_| {}).unwrap();
    let accs: Vec<f64> = out
        .state
        .history
        .iter()
        .map(|r| r.val_accuracy.unwrap())
        .collect();
    let best = accs.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(accs[out.checkpoint.epoch - 1], best);
}
