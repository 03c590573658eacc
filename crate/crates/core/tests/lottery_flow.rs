use ticketlab::data::{make_synthetic, SynthKind};
use ticketlab::lottery::{find_tickets, load_ticket, random_reinit_control, save_ladder, ticket_file_name, FindConfig, Variant};
use ticketlab::transfer::{prepare_transfer, run_arm, ArmKind, TransferArm};
use ticketlab::{Architecture, InitSpec, ModelSpec, TrainConfig};

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 32,
        anneal_epochs: vec![],
        ..TrainConfig::default()
    }
}

#[test]
fn ladder_saves_loads_and_transfers() {
    let source = make_synthetic(SynthKind::NaturalProxy, 6, 40, 6, 1).unwrap();
    let target = make_synthetic(SynthKind::TextureProxy, 4, 40, 6, 2).unwrap();
    let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![24, 12] }, source.input_shape.clone(), 6).unwrap();
    let cfg = FindConfig {
        rounds: 3,
        k: 1,
        train: quick(3).with_seed(4),
        ..FindConfig::default()
    };
    let run = find_tickets(&spec, &InitSpec::xavier(4), &source, &cfg).unwrap();
    assert!(run.aborted.is_none());
    run.ladder.check().unwrap();
    let sp = run.ladder.sparsities();
    assert!(sp.windows(2).all(|w| w[0] < w[1]), "{sp:?}");

    let dir = tempfile::tempdir().unwrap();
    save_ladder(&run, dir.path()).unwrap();
    for (b, ft) in run.ladder.bundles.iter().zip(&run.fully_trained) {
        let loaded = load_ticket(dir.path().join(ticket_file_name(b.round, false))).unwrap();
        assert_eq!(loaded.fingerprint(), b.fingerprint());
        assert_eq!(loaded.variant, Variant::LateReset);
        let loaded_ft = load_ticket(dir.path().join(ticket_file_name(b.round, true))).unwrap();
        assert_eq!(loaded_ft.variant, Variant::FullyTrained);
        assert_eq!(loaded_ft.mask, ft.mask);

        // theta is stored pre-masked
        for e in &b.mask.entries {
            let w = b.theta.get(&e.name).unwrap().data();
            assert!(e.keep.iter().zip(w).all(|(&k, &v)| k || v == 0.0));
        }

        let control = random_reinit_control(b, 99).unwrap();
        assert_eq!(control.mask, b.mask);

        let (model, mask) = prepare_transfer(b, &target, 5).unwrap();
        assert_eq!(model.spec.num_classes, 4);
        for e in mask.entries.iter().filter(|e| model.is_head(&e.name)) {
            assert!(e.keep.iter().all(|&k| k), "{} not reset", e.name);
        }

        let before = b.fingerprint();
        for kind in [ArmKind::SourceTicket, ArmKind::RandomReinit] {
            let arm = TransferArm::with_ticket(kind, b.clone(), &target.name, 3);
            let r = run_arm(&arm, &target, &quick(2)).unwrap();
            assert_eq!(r.round, b.round);
            assert!((r.sparsity - b.trunk_sparsity()).abs() < 1e-12);
        }
        let arm = TransferArm::with_ticket(ArmKind::FullyTrainedTransfer, ft.clone(), &target.name, 3);
        run_arm(&arm, &target, &quick(2)).unwrap();
        assert_eq!(b.fingerprint(), before);
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("ladder.csv")).unwrap().lines().count(), 5);
}

#[test]
fn fully_trained_arm_requires_fully_trained_weights() {
    let ds = make_synthetic(SynthKind::NaturalProxy, 3, 30, 4, 1).unwrap();
    let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![8] }, ds.input_shape.clone(), 3).unwrap();
    let cfg = FindConfig {
        rounds: 1,
        k: 1,
        train: quick(2),
        ..FindConfig::default()
    };
    let run = find_tickets(&spec, &InitSpec::xavier(1), &ds, &cfg).unwrap();
    let arm = TransferArm::with_ticket(ArmKind::FullyTrainedTransfer, run.ladder.bundles[0].clone(), &ds.name, 0);
    assert!(run_arm(&arm, &ds, &quick(1)).is_err());
}

#[test]
fn zero_k_gives_original_init_tickets() {
    let ds = make_synthetic(SynthKind::NaturalProxy, 3, 30, 4, 1).unwrap();
    let spec = ModelSpec::new(Architecture::Mlp { hidden: vec![8] }, ds.input_shape.clone(), 3).unwrap();
    let cfg = FindConfig {
        rounds: 1,
        k: 0,
        train: quick(2),
        ..FindConfig::default()
    };
    let run = find_tickets(&spec, &InitSpec::xavier(1), &ds, &cfg).unwrap();
    let b = &run.ladder.bundles[0];
    assert_eq!(b.variant, Variant::OriginalInit);
    let init = ticketlab::build_model(&spec, &InitSpec::xavier(1)).unwrap();
    for e in &b.mask.entries {
        let w0 = init.param(&e.name).unwrap().value.data();
        let w = b.theta.get(&e.name).unwrap().data();
        for i in 0..w.len() {
            assert_eq!(w[i], if e.keep[i] { w0[i] } else { 0.0 });
        }
    }
}
