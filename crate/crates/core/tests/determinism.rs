use fda::autodiff::Tensor5;
use fda::data::Case;
use fda::infer::{predict_tiled, InferConfig};
use fda::model::{FdaConfig, FdaModel};
use fda::phantom::{corrupt_to_noisy, generate_phantom, NoiseSpec, PhantomSpec};
use fda::train::{checkpoint_of, fit, TrainConfig};

fn pair() -> (Case, Case) {
    let s = generate_phantom(&PhantomSpec::toy(8)).unwrap();
    let n = corrupt_to_noisy(&s, &NoiseSpec::toy(8)).unwrap();
    (Case::from_sample("c", &s).unwrap(), Case::from_sample("n", &n).unwrap())
}

#[test]
fn short_training_is_bit_reproducible() {
    let (c, n) = pair();
    let cfg = TrainConfig { epochs: 1, steps_per_epoch: 3, seed: 5, ..TrainConfig::toy() };
    let a = fit(&cfg, &[c.clone()], &[n.clone()], None).unwrap();
    let b = fit(&cfg, &[c.clone()], &[n.clone()], None).unwrap();
    let bytes = |o: &fda::train::FitOutcome| checkpoint_of(&o.model, &o.adam, 1).unwrap().to_bytes().unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.log.iter().map(|l| l.l_total).collect::<Vec<_>>(), b.log.iter().map(|l| l.l_total).collect::<Vec<_>>());

    let other = TrainConfig { seed: 6, ..cfg };
    let c2 = fit(&other, &[c], &[n], None).unwrap();
    assert_ne!(bytes(&a), bytes(&c2));
}

#[test]
fn tiled_prediction_ignores_thread_count() {
    let (_, n) = pair();
    let model = FdaModel::new(FdaConfig::toy(), 3).unwrap();
    let cfg = InferConfig::default();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| predict_tiled(&n.image, n.shape, &cfg, |t: &Tensor5<f32>| model.predict_noisy(t)).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
}
