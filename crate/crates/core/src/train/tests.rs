use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_dataset, GenConfig};
use crate::materials::MaterialKind;
use crate::mpm;
use crate::neural::{Latent, NeuralProvider, LATENT_DIM};

#[test]
fn adamw_single_step() {
    let opt = AdamW::new(0.1, 0.0);
    let mut p = [Tensor::scalar(1.0)];
    let mut st = OptimizerState::new(&p);
    opt.step(&mut st, &mut p, &[Tensor::scalar(1.0)]);
    assert!((p[0].item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    assert_eq!(st.step, 1);
}

#[test]
fn adamw_zero_gradient() {
    let opt = AdamW::new(0.1, 0.0);
    let mut p = [Tensor::new(1, 3, vec![1.0, -2.0, 3.0])];
    let mut st = OptimizerState::new(&p);
    for _ in 0..5 {
        opt.step(&mut st, &mut p, &[Tensor::zeros(1, 3)]);
    }
    assert_eq!(p[0].data, vec![1.0, -2.0, 3.0]);

    let opt = AdamW::new(0.1, 0.1);
    let mut p = [Tensor::scalar(1.0)];
    let mut st = OptimizerState::new(&p);
    opt.step(&mut st, &mut p, &[Tensor::scalar(0.0)]);
    assert!((p[0].item() - 0.99).abs() < 1e-15);
}

#[test]
fn adamw_state_mirrors_parameters() {
    let p = [Tensor::zeros(3, 4), Tensor::zeros(1, 4)];
    let st = OptimizerState::new(&p);
    assert_eq!(
        st.m.iter().map(Tensor::shape).collect::<Vec<_>>(),
        vec![(3, 4), (1, 4)]
    );
    assert_eq!(
        st.v.iter().map(Tensor::shape).collect::<Vec<_>>(),
        vec![(3, 4), (1, 4)]
    );
}

fn random_batch(rng: &mut impl Rng, n: usize, rows: usize) -> Batch {
    let mut m = |s: f64| Mat3(std::array::from_fn(|_| rng.random_range(-s..s)));
    let mut b = Batch::default();
    for i in 0..n {
        b.f.push(Mat3::IDENTITY + m(0.2));
        b.f_proj.push(Mat3::IDENTITY + m(0.2));
        b.c.push(m(2.0));
        let s = m(1e3);
        b.s.push(s + s.transpose());
        b.rows.push(i % rows);
    }
    b
}

fn silent_model(seed: u64) -> Model {
    let mut m = Model::init(&mut ChaCha8Rng::seed_from_u64(seed));
    for l in &mut m.stress.layers {
        l.w.data.fill(0.0);
        l.b.data.fill(0.0);
    }
    m
}

#[test]
fn perfect_prediction_gives_zero_loss() {
    let model = silent_model(1);
    let mut b = random_batch(&mut ChaCha8Rng::seed_from_u64(2), 6, 2);
    b.f_proj = b.f.clone();
    b.s = vec![Mat3::ZERO; 6];
    let l = loss_joint(&model, &Tensor::zeros(2, LATENT_DIM), &b, 1.0).unwrap();
    assert_eq!(l, LossParts::default());

    let l = loss_joint(&model, &Tensor::filled(2, LATENT_DIM, 1.0), &b, 1.0).unwrap();
    assert_eq!(l.reg, 32.0);
    assert_eq!(l.total, 32.0);
    let l = loss_joint(&model, &Tensor::filled(2, LATENT_DIM, 1.0), &b, 2.0).unwrap();
    assert_eq!(l.reg, 8.0);
}

#[test]
fn stress_term_is_normalised() {
    let mut model = silent_model(3);
    model.stress_scale = 10.0;
    let mut b = random_batch(&mut ChaCha8Rng::seed_from_u64(4), 2, 1);
    b.f_proj = b.f.clone();
    b.s = vec![
        Mat3::diag(crate::tensor3::Vec3::new(10.0, 0.0, 0.0)),
        Mat3::ZERO,
    ];
    let l = loss_joint(&model, &Tensor::zeros(1, LATENT_DIM), &b, 1.0).unwrap();
    assert!((l.stress - 0.5).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn loss_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::init(&mut rng);
        model.stress_scale = 500.0;
        let b = random_batch(&mut rng, 5, 3);
        let z = Tensor::new(3, LATENT_DIM, (0..3 * LATENT_DIM).map(|_| rng.random_range(-2.0..2.0)).collect());
        let l = loss_joint(&model, &z, &b, 0.7).unwrap();
        prop_assert!(l.total >= 0.0 && l.f_proj >= 0.0 && l.stress >= 0.0 && l.reg >= 0.0);
        prop_assert!((l.total - (l.f_proj + l.stress + l.reg)).abs() <= 1e-12 * l.total);
    }
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::init(&mut rng);
    let last = model.projection.layers.len() - 1;
    for v in &mut model.projection.layers[last].w.data {
        *v = rng.random_range(-0.05..0.05);
    }
    model.stress_scale = 800.0;
    let batch = random_batch(&mut rng, 4, 2);
    let z = Tensor::new(
        2,
        LATENT_DIM,
        (0..2 * LATENT_DIM)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let (l, wg, zg) = loss_joint_grad(&model, &z, &batch, 1.3).unwrap();
    assert_eq!(l, loss_joint(&model, &z, &batch, 1.3).unwrap());

    let eps = 1e-5;
    let mut num = 0.0;
    let mut den = 0.0;
    let base = model.tensors();
    for (ti, t) in base.iter().enumerate() {
        // a handful of entries per tensor keeps this fast
        for k in 0..6.min(t.len()) {
            let idx = (k * 7919) % t.len();
            let eval = |d: f64| {
                let mut ts = base.clone();
                ts[ti].data[idx] += d;
                let mut m = model.clone();
                m.set_tensors(&ts);
                loss_joint(&m, &z, &batch, 1.3).unwrap().total
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            num += (fd - wg[ti].data[idx]).powi(2);
            den += fd * fd;
        }
    }
    for idx in 0..z.len() {
        let eval = |d: f64| {
            let mut zz = z.clone();
            zz.data[idx] += d;
            loss_joint(&model, &zz, &batch, 1.3).unwrap().total
        };
        let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
        num += (fd - zg.data[idx]).powi(2);
        den += fd * fd;
    }
    let rel = (num / den).sqrt();
    assert!(rel < 1e-4, "relative error {rel}");
}

fn tiny_dataset() -> Dataset {
    let cfg = GenConfig {
        steps: 50,
        max_particles: 64,
        ..GenConfig::default()
    };
    generate_dataset(
        &[MaterialKind::Elastic, MaterialKind::Plasticine],
        2,
        &cfg,
        11,
        0,
    )
    .unwrap()
    .0
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 128,
        samples_per_trajectory: 128,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn tiny_training_reduces_loss() {
    let ds = tiny_dataset();
    let init_max = {
        let t = Trainer::new(&ds, quick_cfg(1), None).unwrap();
        t.codebook
            .entries
            .values()
            .map(Latent::norm)
            .fold(0.0, f64::max)
    };
    let out = train_loop(&ds, &quick_cfg(200)).unwrap();
    let first = out.history[0].loss.total;
    let last = out.history.last().unwrap().loss.total;
    assert!(last <= 0.1 * first, "{first} -> {last}");
    assert!(out.history.iter().all(|e| e.loss.total.is_finite()));
    let max_norm = out
        .codebook
        .entries
        .values()
        .map(Latent::norm)
        .fold(0.0, f64::max);
    assert!(max_norm < 10.0 * init_max);
    assert_eq!(out.step, 200 * 4);
}

#[test]
fn training_is_deterministic() {
    let ds = tiny_dataset();
    let a = train_loop(&ds, &quick_cfg(3)).unwrap();
    let b = train_loop(&ds, &quick_cfg(3)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    assert_eq!(a.codebook, b.codebook);
    let mut csv = Vec::new();
    write_loss_csv(&a.history, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,loss_total,loss_Fproj,loss_S,loss_reg\n0,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn resume_continues_step_counter() {
    let ds = tiny_dataset();
    let mut t = Trainer::new(&ds, quick_cfg(2), None).unwrap();
    t.run_epoch().unwrap();
    let ck = t.checkpoint();
    assert_eq!(ck.step, 4);
    let scale = ck.model.stress_scale;
    let mut r = Trainer::new(&ds, quick_cfg(2), Some(ck)).unwrap();
    assert_eq!(r.step, 4);
    assert_eq!(r.model.stress_scale, scale);
    r.run_epoch().unwrap();
    assert_eq!(r.step, 8);
}

#[test]
fn stress_scale_defaults_to_dataset_rms() {
    let ds = tiny_dataset();
    let t = Trainer::new(&ds, quick_cfg(1), None).unwrap();
    assert_eq!(t.model.stress_scale, stress_rms(&ds));
    let t = Trainer::new(
        &ds,
        TrainConfig {
            stress_scale: Some(42.0),
            ..quick_cfg(1)
        },
        None,
    )
    .unwrap();
    assert_eq!(t.model.stress_scale, 42.0);
    assert!(Trainer::new(&Dataset::default(), quick_cfg(1), None).is_err());
    assert!(Trainer::new(
        &ds,
        TrainConfig {
            sigma: 0.0,
            ..quick_cfg(1)
        },
        None
    )
    .is_err());
}

#[test]
fn duplicated_trajectories_get_equivalent_latents() {
    let mut ds = tiny_dataset();
    ds.records.truncate(1);
    let mut twin = ds.records[0].clone();
    twin.id = 50;
    ds.records.push(twin);
    let out = train_loop(&ds, &quick_cfg(150)).unwrap();
    let r = &ds.records[0];
    let sim = mpm::SimConfig {
        steps: 20,
        ..r.sim_config()
    };
    let run = |id: u64| {
        let p = NeuralProvider::new(&out.model, out.codebook.get(id).unwrap().clone());
        mpm::rollout(&r.initial_state(), &p, &sim, false)
            .unwrap()
            .positions()
    };
    let (a, b) = (run(0), run(50));
    let mse = crate::autodiff::position_loss_value(&a, &b);
    assert!(mse < 1e-4, "{mse}");
}
