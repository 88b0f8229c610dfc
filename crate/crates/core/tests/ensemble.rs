mod common;

use std::path::PathBuf;
use std::sync::Arc;

use common::desk_data;
use minbert_peft::ensemble::{load_ensemble, mean_outputs, Ensemble};
use minbert_peft::heads::{Architecture, ModelConfig, MultitaskModel};
use minbert_peft::train::{predict_outputs, save_checkpoint, Loaders};
use proptest::prelude::*;

fn model(seed: u64, arch: Architecture) -> MultitaskModel {
    let mut cfg = ModelConfig::desk(seed);
    cfg.architecture = arch;
    MultitaskModel::new(cfg).unwrap()
}

fn saved(dir: &std::path::Path, name: &str, m: &MultitaskModel) -> PathBuf {
    let p = dir.join(name);
    save_checkpoint(&p, m, 0.0, 0).unwrap();
    p
}

#[test]
fn two_member_mean() {
    assert_eq!(mean_outputs(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(), vec![2.0, 4.0]);
    assert!(mean_outputs(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    assert!(mean_outputs(&[]).is_err());
    assert!(Ensemble::new(Vec::new()).is_err());
    assert!(load_ensemble(&[]).is_err());
}

#[test]
fn repeated_path_counts_twice_and_architectures_mix() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (model(1, Architecture::YinYang), model(2, Architecture::DualityOfMan));
    let pa = saved(dir.path(), "a.ckpt", &a);
    let pb = saved(dir.path(), "b.ckpt", &b);

    let (_, dev) = desk_data(3, 40);
    let loaders = Loaders::new(&dev, &a.cfg, 8, [true; 3]).unwrap();
    let oa = predict_outputs(&a, &loaders).unwrap();
    let ob = predict_outputs(&b, &loaders).unwrap();

    let ens = load_ensemble(&[pa.clone(), pa.clone(), pb]).unwrap();
    assert_eq!(ens.len(), 3);
    assert!(Arc::ptr_eq(&ens.members()[0], &ens.members()[1]));
    assert_eq!(ens.members()[2].cfg.architecture, Architecture::DualityOfMan);

    let got = ens.predict_outputs(&loaders).unwrap();
    for (g, (x, y)) in got.sts.iter().zip(oa.sts.iter().zip(&ob.sts)) {
        let want = (2.0 * *x as f64 + *y as f64) / 3.0;
        assert!((*g as f64 - want).abs() < 1e-6, "{g} vs {want}");
    }
    let scores = ens.evaluate(&loaders).unwrap();
    assert!(scores.overall.is_finite());

    let missing = dir.path().join("nope.ckpt");
    assert!(load_ensemble(&[pa, missing]).is_err());
}

#[test]
fn single_member_matches_the_model() {
    let m = model(4, Architecture::YinYang);
    let (_, dev) = desk_data(5, 24);
    let loaders = Loaders::new(&dev, &m.cfg, 8, [true; 3]).unwrap();
    let alone = predict_outputs(&m, &loaders).unwrap();
    let ens = Ensemble::new(vec![Arc::new(m)]).unwrap();
    let got = ens.predict_outputs(&loaders).unwrap();
    assert_eq!(got.sst, alone.sst);
    assert_eq!(got.para, alone.para);
}

proptest! {
    #[test]
    fn member_order_does_not_matter(
        rows in proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, 6), 1..7),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut common::rng(seed));
        let a = mean_outputs(&rows).unwrap();
        let b = mean_outputs(&shuffled).unwrap();
        prop_assert_eq!(common::bits(&a), common::bits(&b));
    }
}
