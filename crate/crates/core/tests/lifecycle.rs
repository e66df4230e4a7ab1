//! Sessions, sequences and evaluation end to end on a small network.

use clickadapt::adapt::{combined_adapt, Anchor, Mode, SequenceAdapter, SequenceItem, Session};
use clickadapt::eval::{evaluate_sequence, load_report, save_report};
use clickadapt::{
    synth_dataset, AdaptConfig, Architecture, Checkpoint, Click, Dataset, Error, ImportanceSet, SegNet, SynthSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 16;

fn small_net(seed: u64) -> SegNet {
    let arch = Architecture {
        input_size: SIZE,
        widths: vec![4, 8],
        ..Architecture::default()
    };
    SegNet::build(arch, seed).unwrap()
}

fn anchor(net: &SegNet) -> Anchor {
    Anchor::new(net, ImportanceSet::ones_like(&net.params)).unwrap()
}

fn data(n: usize) -> Dataset {
    synth_dataset(SynthSpec::DomainA, n, SIZE, 5).unwrap()
}

fn cfg() -> AdaptConfig {
    AdaptConfig {
        click_budget: 4,
        ia_steps: 2,
        learning_rate: 1e-2,
        sa_learning_rate: Some(1e-2),
        ..AdaptConfig::default()
    }
}

fn session(net: &SegNet, ds: &Dataset, ia: bool, cfg: AdaptConfig) -> Session {
    let s = &ds.samples()[0];
    Session::new(net, anchor(net), s.image.clone(), Some(s.mask.clone()), cfg, ia).unwrap()
}

#[test]
fn ia_changes_only_the_session_copy() {
    let net = small_net(1);
    let ds = data(1);
    let mut s = session(&net, &ds, true, cfg());
    s.apply_click(Click::positive(8, 8)).unwrap();
    assert_ne!(s.params(), &net.params);
    assert_eq!(s.history().len(), 2);
    assert_eq!(s.corrections().len(), 1);

    let mut frozen = session(&net, &ds, false, cfg());
    frozen.apply_click(Click::positive(8, 8)).unwrap();
    assert_eq!(frozen.params(), &net.params);
}

#[test]
fn clicks_past_the_budget_are_rejected() {
    let net = small_net(2);
    let mut s = session(&net, &data(1), false, cfg());
    for i in 0..4 {
        s.apply_click(Click::negative(i, 0)).unwrap();
    }
    assert!(matches!(s.apply_click(Click::negative(5, 0)), Err(Error::BudgetExhausted { .. })));
    assert!(s.apply_click(Click::negative(SIZE, 0)).is_err());
}

#[test]
fn sequence_step_needs_clicks() {
    let net = small_net(3);
    let mut adapter = SequenceAdapter::new(anchor(&net));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let empty = session(&net, &data(1), false, cfg()).finish();
    assert!(!adapter.step(&empty, &cfg(), &mut rng).unwrap());
    assert_eq!(adapter.net().params, net.params);

    let mut s = session(&net, &data(1), false, cfg());
    s.apply_click(Click::positive(8, 8)).unwrap();
    assert!(adapter.step(&s.finish(), &cfg(), &mut rng).unwrap());
    assert_ne!(adapter.net().params, net.params);
    assert_eq!(adapter.steps(), 1);
}

#[test]
fn reference_parameters_never_move() {
    let net = small_net(4);
    let ds = data(4);
    let anchor = anchor(&net);
    let items: Vec<SequenceItem> = ds
        .samples()
        .iter()
        .map(|s| SequenceItem { id: &s.id, image: &s.image, gt: &s.mask })
        .collect();
    let result = combined_adapt(&items, &anchor, Mode::IaSa, &cfg(), &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
    assert_eq!(*anchor.theta_star, net.params);
    assert_eq!(result.trajectory.len(), items.len() + 1);
    assert_eq!(result.trajectory[0], net.params);
    assert!(result.trajectory.last().unwrap() != &net.params);
}

fn checkpoint(seed: u64) -> Checkpoint {
    let net = small_net(seed);
    let omega = ImportanceSet::ones_like(&net.params);
    Checkpoint::new(net, Some(omega))
}

#[test]
fn evaluation_is_deterministic() {
    let ds = data(4);
    let ckpt = checkpoint(5);
    for mode in [Mode::Frozen, Mode::IaSa] {
        let a = evaluate_sequence(&ds, &ckpt, mode, &cfg(), &[0, 1]).unwrap();
        let b = evaluate_sequence(&ds, &ckpt, mode, &cfg(), &[0, 1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seeds.len(), 2);
        assert!(a.seeds[0].images.iter().all(|r| r.curve.len() == cfg().click_budget + 1));
    }
}

#[test]
fn frozen_results_ignore_dataset_order() {
    let ds = data(5);
    let ckpt = checkpoint(6);
    let a = evaluate_sequence(&ds, &ckpt, Mode::Frozen, &cfg(), &[0]).unwrap();
    let b = evaluate_sequence(&ds.reordered(&[4, 2, 0, 3, 1]).unwrap(), &ckpt, Mode::Frozen, &cfg(), &[0]).unwrap();
    assert_eq!(a.seeds[0].images, b.seeds[0].images);
    assert_eq!(a.mean_clicks, b.mean_clicks);
}

#[test]
fn report_round_trips() {
    let report = evaluate_sequence(&data(2), &checkpoint(7), Mode::Sa, &cfg(), &[3]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    save_report(&report, &path).unwrap();
    assert_eq!(load_report(&path).unwrap(), report);
}

#[test]
fn checkpoint_round_trips_at_single_precision() {
    let ckpt = checkpoint(8);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(back.net.arch, ckpt.net.arch);
    for (name, t) in ckpt.net.params.iter() {
        let b = back.net.params.get(name).unwrap();
        assert!(t.data().iter().zip(b.data()).all(|(x, y)| (*x as f32) as f64 == *y));
    }
    assert!(back.importance.is_some());
    assert!(Checkpoint::from_bytes(b"ADSEGjunk").is_err());
}
