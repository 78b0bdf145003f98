use grip_core::moe::{read_checkpoint, write_checkpoint, MoENetwork, NetShape};
use grip_core::unlearn::{generate_task, pretrain, unlearn_run, Enforcement, PretrainConfig, TaskConfig, UnlearnConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn task_generation_is_deterministic_and_well_formed() {
    let cfg = TaskConfig { seed: 9, ..Default::default() };
    let a = generate_task(&cfg).unwrap();
    let b = generate_task(&cfg).unwrap();
    assert_eq!(a, b);
    let mut ids: Vec<&String> = a.retain_train.ids.iter().chain(&a.forget_train.ids).chain(&a.retain_test.ids).chain(&a.forget_test.ids).collect();
    let n = ids.len();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), n);
    for (f, &p) in a.forget_labels.iter().zip(&a.forget_parents) {
        assert_ne!(*f, a.retain_classes[p]);
    }
    assert!(a.retain_train.inputs.iter().all(|x| x.len() == cfg.dim));
    assert_ne!(generate_task(&TaskConfig { seed: 10, ..Default::default() }).unwrap(), a);
}

#[test]
fn invalid_task_configs_are_rejected() {
    assert!(generate_task(&TaskConfig { clusters_per_class: 3, ..Default::default() }).is_err());
    assert!(generate_task(&TaskConfig { forget_clusters: 1000, ..Default::default() }).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = MoENetwork::random(NetShape::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    write_checkpoint(&net, &path).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), net);
}

#[test]
fn unlearning_runs_are_reproducible() {
    let task = generate_task(&TaskConfig { seed: 2, ..Default::default() }).unwrap();
    let net = MoENetwork::random(NetShape::default(), 1.0, &mut ChaCha8Rng::seed_from_u64(1002)).unwrap();
    let (net, _) = pretrain(&net, &task, &PretrainConfig::default()).unwrap();
    for enforcement in Enforcement::ALL {
        let cfg = UnlearnConfig { enforcement, steps: 30, seed: 2, ..Default::default() };
        let (a, ra) = unlearn_run(&net, &task, &cfg, None).unwrap();
        let (b, rb) = unlearn_run(&net, &task, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.rs, rb.rs);
        assert!(ra.is_well_formed());
        assert!(ra.rs <= 1.0 && ra.rs_cached <= 1.0);
    }
}
