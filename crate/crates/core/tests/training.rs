use deformnet_core::align::align_sequence;
use deformnet_core::data::{endpoint_deformations, gen_synthetic, split, Family, MorphConfig, SyntheticFamilySpec};
use deformnet_core::neural::{DefoNet, DefoNetConfig, ParamNet, ParamNetConfig};
use deformnet_core::train::{train_defo, train_param, TrainConfig};

#[test]
fn both_stages_never_end_above_their_start_over_ten_seeds() {
    let spec = SyntheticFamilySpec::new(Family::Drop2d, 16);
    let ds = split(gen_synthetic(&spec, &[6, 6]).unwrap(), 7, 0.1, 0.1).unwrap();
    let morph = MorphConfig {
        iters: 40,
        levels: 2,
        ..MorphConfig::default()
    };
    let raw: Vec<_> = endpoint_deformations(&ds, &morph).unwrap().into_iter().map(|r| r.field).collect();
    let seq = align_sequence(&raw).unwrap();
    let psi0 = ds.origin().unwrap().clone();
    for seed in 0..10u64 {
        let cfg = TrainConfig {
            steps_param: 150,
            steps_defo: 150,
            log_interval: 50,
            seed,
            ..TrainConfig::default()
        };
        let pnet = ParamNet::new(ParamNetConfig::new(2, 2), seed).unwrap();
        let (pnet, pc) = train_param(&ds, &psi0, &seq, pnet, &cfg).unwrap();
        let (a, b) = (pc.initial_val().unwrap(), pc.final_val().unwrap());
        assert!(b <= a, "seed {seed}: param stage {a} -> {b}");
        let dnet = DefoNet::new(DefoNetConfig::new(2, &[4, 4], 0.25), seed + 100).unwrap();
        let (_, dc) = train_defo(&ds, &psi0, &seq, Some(&pnet), dnet, &cfg).unwrap();
        let (a, b) = (dc.initial_val().unwrap(), dc.final_val().unwrap());
        assert!(b <= a, "seed {seed}: defo stage {a} -> {b}");
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let spec = SyntheticFamilySpec::new(Family::Circle2d, 16);
    let ds = split(gen_synthetic(&spec, &[4, 4]).unwrap(), 3, 0.1, 0.1).unwrap();
    let morph = MorphConfig {
        iters: 20,
        levels: 2,
        ..MorphConfig::default()
    };
    let raw: Vec<_> = endpoint_deformations(&ds, &morph).unwrap().into_iter().map(|r| r.field).collect();
    let seq = align_sequence(&raw).unwrap();
    let psi0 = ds.origin().unwrap().clone();
    let cfg = TrainConfig {
        steps_param: 60,
        log_interval: 20,
        ..TrainConfig::default()
    };
    let run = || train_param(&ds, &psi0, &seq, ParamNet::new(ParamNetConfig::new(2, 2), 5).unwrap(), &cfg).unwrap();
    let (n1, c1) = run();
    let (n2, c2) = run();
    assert_eq!(n1.params(), n2.params());
    assert_eq!(c1, c2);
}
