use latent_mpm::autodiff::{grad, Tensor};
use latent_mpm::data::{Geometry, MotionTag, SceneConfig};
use latent_mpm::infer::{infer_latent, resimulate, InferenceConfig, Observation};
use latent_mpm::materials::MaterialSpec;
use latent_mpm::mpm::{GridConfig, SimConfig};
use latent_mpm::neural::{
    f_theta_forward, features_projection, features_stress, g_phi_forward, init_latent,
    stress_on_tape, Latent, Model, ModelVars, LATENT_DIM, PROJECTION_FEATURES, STRESS_FEATURES,
};
use latent_mpm::tensor3::{svd3, Mat3, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn deformation() -> impl Strategy<Value = Mat3> {
    prop::array::uniform9(-0.3..0.3f64).prop_map(|a| Mat3::IDENTITY + Mat3(a))
}

fn latent() -> impl Strategy<Value = Latent> {
    any::<u64>().prop_map(|s| init_latent(&mut ChaCha8Rng::seed_from_u64(s)))
}

/// Initialised model with both heads switched on, so every input matters.
fn active_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::init(&mut rng);
    let last = m.projection.layers.len() - 1;
    for v in &mut m.projection.layers[last].w.data {
        *v = rng.random_range(-2e-3..2e-3);
    }
    let last = m.stress.layers.len() - 1;
    for v in &mut m.stress.layers[last].w.data {
        *v *= 100.0;
    }
    m.stress_scale = 1e5;
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stress_output_is_exactly_symmetric(seed in 0u64..8, f in deformation(), c in prop::array::uniform9(-3.0..3.0f64), z in latent()) {
        prop_assume!(f.det() > 0.1);
        let s = f_theta_forward(&active_model(seed), &f, &Mat3(c), &z).unwrap();
        for r in 0..3 {
            for k in 0..3 {
                prop_assert_eq!(s.get(r, k).to_bits(), s.get(k, r).to_bits());
            }
        }
    }

    #[test]
    fn projection_is_identity_residual_at_init(seed in any::<u64>(), f in deformation(), z in latent()) {
        let model = Model::init(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(g_phi_forward(&model, &f, &z).unwrap(), f);
    }

    #[test]
    fn feature_widths(f in deformation(), z in latent()) {
        prop_assume!(f.det() > 0.1);
        prop_assert_eq!(features_projection(&f, &svd3(&f).unwrap(), &z).len(), PROJECTION_FEATURES);
        prop_assert_eq!(features_stress(&f, &Mat3::ZERO, &z).unwrap().len(), STRESS_FEATURES);
    }
}

#[test]
fn stress_depends_on_the_latent() {
    let model = active_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = Mat3::from_rows([1.1, 0.05, 0.0], [0.02, 0.95, 0.03], [0.0, -0.04, 1.02]);
    let c = Mat3(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
    let z = init_latent(&mut rng).to_tensor();
    let weights = Tensor::new(1, 9, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
    let loss = |z: &Tensor| {
        let zl = Latent::new(z.data.clone()).unwrap();
        let s = f_theta_forward(&model, &f, &c, &zl).unwrap();
        s.0.iter()
            .zip(&weights.data)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let report = grad(&[vec![z.clone()]], |tape, v| {
        let vars = ModelVars::register(&model, tape, false);
        let fv = tape.constant(Tensor::from_mat3s(&[f]));
        let cv = tape.constant(Tensor::from_mat3s(&[c]));
        let s = stress_on_tape(&model, tape, &vars.stress, fv, cv, v[0][0])?;
        let w = tape.constant(weights.clone());
        let p = tape.mul(s, w);
        Ok(tape.sum(p))
    })
    .unwrap();
    let g = &report.groups[0][0];
    let h = 1e-5;
    let fd: Vec<f64> = (0..LATENT_DIM)
        .map(|i| {
            let mut a = z.clone();
            a.data[i] += h;
            let mut b = z.clone();
            b.data[i] -= h;
            (loss(&a) - loss(&b)) / (2.0 * h)
        })
        .collect();
    let err: f64 = g
        .data
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 1e-6, "latent has no effect");
    assert!(err / norm < 1e-4, "relative error {:e}", err / norm);
}

#[test]
fn inference_keeps_weights_and_best_start() {
    let model = active_model(1);
    let grid = GridConfig::new(16);
    let scene = SceneConfig {
        geometry: Geometry::Box {
            extents: Vec3::splat(0.12),
        },
        center: Vec3::new(0.5, 0.3, 0.5),
        initial_velocity: Vec3::new(0.5, -1.5, 0.2),
        angular_velocity: Vec3::ZERO,
        material: MaterialSpec::elastic(1e4, 1e4),
        motion_tag: MotionTag::Throw,
    };
    let sim = SimConfig::new(4e-4, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let truth = resimulate(&model, &init_latent(&mut rng), &scene, &grid, 1000.0, &sim).unwrap();
    let obs = Observation {
        initial: truth.state(0),
        sim,
        positions: truth.positions(),
        states: None,
    };
    let candidates: Vec<Latent> = (0..3).map(|_| init_latent(&mut rng)).collect();
    let cfg = InferenceConfig {
        epochs: 6,
        ..InferenceConfig::default()
    };
    let before = model.checksum();
    let best = infer_latent(&obs, &model, &candidates, &cfg).unwrap();
    assert_eq!(model.checksum(), before);

    let starts: Vec<f64> = best.candidate_losses.iter().map(|l| l.unwrap()).collect();
    assert_eq!(
        best.initial_loss,
        starts.iter().copied().fold(f64::INFINITY, f64::min)
    );
    assert!(best.final_loss <= best.initial_loss);
    let running: Vec<f64> = best
        .history
        .iter()
        .scan(f64::INFINITY, |m, &l| {
            *m = m.min(l);
            Some(*m)
        })
        .collect();
    assert!(running.windows(2).all(|w| w[1] <= w[0]));
    assert!(best.final_loss <= running.last().copied().unwrap());

    for (i, z) in candidates.iter().enumerate() {
        let single = infer_latent(&obs, &model, std::slice::from_ref(z), &cfg).unwrap();
        assert!(best.initial_loss <= single.initial_loss, "candidate {i}");
    }
}
