use proptest::prelude::*;
use uidet_core::data::{generate_dataset, load_dataset, write_dataset, ClassCatalog, Dataset, SplitSizes};
use uidet_core::fusion::FusionKind;
use uidet_core::model::{DetectorConfig, DetectorModel, ParamStore};
use uidet_core::text::TextProvider;
use uidet_core::train::*;
use uidet_core::{Error, Tensor32};

fn tiny() -> DetectorConfig {
    DetectorConfig {
        input_size: 64,
        channels: vec![4, 8, 8, 8],
        ..DetectorConfig::default()
    }
}

fn data(train: usize, val: usize) -> Dataset {
    generate_dataset(&ClassCatalog::twin12(), 64, SplitSizes { train, val, test: 0 }, 4).unwrap()
}

fn settings(epochs: usize) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size: 5,
        ..TrainSettings::default()
    }
}

fn bits(p: &ParamStore<f32>) -> Vec<u32> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn ten_samples_in_batches_of_five_take_two_steps_per_epoch() {
    let ds = data(10, 0);
    let text = TextProvider::new(64, &ds.catalog);
    let mut model = DetectorModel::build(&tiny()).unwrap();
    let out = train(&mut model, &ds, Phase::Baseline, &settings(1), &text, |_| {}).unwrap();
    assert_eq!(out.steps, 2);
    let mut model = DetectorModel::build(&tiny()).unwrap();
    let out = train(&mut model, &ds, Phase::Baseline, &settings(3), &text, |_| {}).unwrap();
    assert_eq!(out.steps, 6);
    assert_eq!(out.curve.len(), 3);
    assert!(out.curve.iter().all(|e| e.loss.is_finite() && e.val_map50.is_none()));
    assert_eq!(out.best_epoch, 3);
    assert_eq!(out.to_csv().lines().count(), 4);
}

#[test]
fn baseline_ignores_descriptions() {
    let ds = data(5, 2);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    std::fs::remove_dir_all(dir.path().join("texts")).unwrap();
    let no_text = load_dataset(dir.path()).unwrap();
    let text = TextProvider::new(64, &ds.catalog);

    let mut a = DetectorModel::build(&tiny()).unwrap();
    let la = train(&mut a, &ds, Phase::Baseline, &settings(2), &text, |_| {}).unwrap();
    let mut b = DetectorModel::build(&tiny()).unwrap();
    let lb = train(&mut b, &no_text, Phase::Baseline, &settings(2), &text, |_| {}).unwrap();
    assert_eq!(bits(a.params()), bits(b.params()));
    assert_eq!(la.curve.iter().map(|e| e.loss).collect::<Vec<_>>(), lb.curve.iter().map(|e| e.loss).collect::<Vec<_>>());
}

#[test]
fn training_is_deterministic() {
    let ds = data(5, 2);
    let text = TextProvider::new(64, &ds.catalog);
    let run = || {
        let mut m = DetectorModel::build(&tiny()).unwrap();
        let out = train(&mut m, &ds, Phase::Baseline, &settings(2), &text, |_| {}).unwrap();
        (bits(m.params()), out.curve.iter().map(|e| (e.loss, e.val_map50)).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn phases_are_enforced() {
    let ds = data(5, 0);
    let text = TextProvider::new(64, &ds.catalog);
    let fusion = tiny().with_fusion(FusionKind::Conv, 3);
    let mut fresh = DetectorModel::build(&fusion).unwrap();
    let e = train(&mut fresh, &ds, Phase::Finetune, &settings(1), &text, |_| {}).unwrap_err();
    assert!(matches!(e, Error::Usage(_)), "{e}");
    let e = train(&mut fresh, &ds, Phase::Baseline, &settings(1), &text, |_| {}).unwrap_err();
    assert!(matches!(e, Error::Usage(_)));
    let mut base = DetectorModel::build(&tiny()).unwrap();
    assert!(matches!(train(&mut base, &ds, Phase::Finetune, &settings(1), &text, |_| {}), Err(Error::Usage(_))));
}

#[test]
fn finetune_from_baseline_runs_and_needs_descriptions() {
    let ds = data(5, 0);
    let text = TextProvider::new(64, &ds.catalog);
    let mut base = DetectorModel::build(&tiny()).unwrap();
    train(&mut base, &ds, Phase::Baseline, &settings(1), &text, |_| {}).unwrap();
    let mut fused = DetectorModel::build(&tiny().with_fusion(FusionKind::Wsum, 3)).unwrap();
    let (loaded, _) = fused.load_shared_from(base.params());
    assert_eq!(loaded.len(), base.params().len());
    let mut logs = Vec::new();
    let out = train(&mut fused, &ds, Phase::Finetune, &settings(1), &text, |l| logs.push(l.clone())).unwrap();
    assert_eq!(logs, out.curve);
    assert!(out.curve[0].loss.is_finite());

    let mut stripped = ds.clone();
    stripped.samples[0].doc = None;
    let e = train(&mut fused, &stripped, Phase::Finetune, &settings(1), &text, |_| {}).unwrap_err();
    assert!(matches!(e, Error::Usage(_)));
}

#[test]
fn zero_batch_size_is_a_config_error() {
    let ds = data(5, 0);
    let text = TextProvider::new(64, &ds.catalog);
    let mut m = DetectorModel::build(&tiny()).unwrap();
    let s = TrainSettings {
        batch_size: 0,
        ..settings(1)
    };
    assert!(matches!(train(&mut m, &ds, Phase::Baseline, &s, &text, |_| {}), Err(Error::Config(_))));
}

fn adam_oracle(grads: &[f64], cfg: &AdamConfig) -> f64 {
    let (mut m, mut v, mut w) = (0.0, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    w
}

proptest! {
    #[test]
    fn adam_matches_scalar_recurrence(grads in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let cfg = AdamConfig::default();
        let mut store = ParamStore::<f64>::new();
        store.add("w", uidet_core::Tensor64::zeros(&[1])).unwrap();
        let mut adam = Adam::new(cfg.clone(), &store);
        for g in &grads {
            adam.update(&mut store, &[uidet_core::Tensor64::new(&[1], vec![*g]).unwrap()]).unwrap();
        }
        let got = store.by_name("w").unwrap().data()[0];
        prop_assert!((got - adam_oracle(&grads, &cfg)).abs() < 1e-12);
    }
}

#[test]
fn non_finite_gradient_leaves_parameters_untouched() {
    let mut store = ParamStore::<f32>::new();
    store.add("a", Tensor32::zeros(&[2])).unwrap();
    store.add("b", Tensor32::zeros(&[1])).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), &store);
    let grads = [Tensor32::new(&[2], vec![1.0, 1.0]).unwrap(), Tensor32::new(&[1], vec![f32::NAN]).unwrap()];
    let e = adam.update(&mut store, &grads).unwrap_err();
    assert!(matches!(e, Error::Numerical { ref name, .. } if name == "b"));
    assert_eq!(store.by_name("a").unwrap().data(), &[0.0, 0.0]);
    assert_eq!(adam.step, 0);
}
