use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{checkpointed_rollout_grad, grad, RolloutGradOptions};
use crate::mpm::{
    self, ConstitutiveProvider, GridConfig, ParticleState, SimConfig, SimState, DEFAULT_DENSITY,
};
use crate::tensor3::{svd3, Vec3};

fn model(seed: u64) -> Model {
    Model::init(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// A model with every head active, so outputs depend on all inputs.
fn live_model(seed: u64, head: f64, stress_scale: f64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::init(&mut rng);
    let fresh = Model::init(&mut rng);
    let last = m.projection.layers.len() - 1;
    m.projection.layers[last] = fresh.stress.layers[0].clone();
    m.projection.layers[last] = Layer {
        w: Tensor::new(
            PROJECTION_HIDDEN,
            9,
            (0..PROJECTION_HIDDEN * 9)
                .map(|i| head * ((i * 37 % 17) as f64 / 8.0 - 1.0))
                .collect(),
        ),
        b: Tensor::zeros(1, 9),
        activation: Activation::Identity,
    };
    let sl = m.stress.layers.len() - 1;
    for v in &mut m.stress.layers[sl].w.data {
        *v *= 100.0;
    }
    m.stress_scale = stress_scale;
    m
}

#[test]
fn projection_feature_layout() {
    let f = Mat3::IDENTITY;
    let s = svd3(&f).unwrap();
    let x = features_projection(&f, &s, &Latent::zeros());
    assert_eq!(x.len(), PROJECTION_FEATURES);
    let eye = Mat3::IDENTITY.0;
    assert_eq!(&x[0..9], &eye);
    assert_eq!(&x[9..18], &eye);
    assert_eq!(&x[18..27], &eye);
    assert!(x[27..].iter().all(|&v| v == 0.0));

    let z: Vec<f64> = (0..LATENT_DIM).map(|i| i as f64).collect();
    let mut zp = z.clone();
    zp.reverse();
    let f = Mat3::from_rows([1.1, 0.1, 0.0], [0.0, 0.9, 0.2], [0.05, 0.0, 1.0]);
    let s = svd3(&f).unwrap();
    let a = features_projection(&f, &s, &Latent::new(z).unwrap());
    let b = features_projection(&f, &s, &Latent::new(zp).unwrap());
    assert_eq!(a[..27], b[..27]);
    let mut tail = a[27..].to_vec();
    tail.reverse();
    assert_eq!(tail, b[27..]);
}

#[test]
fn stress_feature_layout() {
    let x = features_stress(&Mat3::IDENTITY, &Mat3::ZERO, &Latent::zeros()).unwrap();
    assert_eq!(x.len(), STRESS_FEATURES);
    assert_eq!(&x[0..3], &[1.0, 1.0, 1.0]);
    assert_eq!(&x[3..12], &Mat3::IDENTITY.0);
    assert_eq!(&x[12..16], &[1.0, 0.0, 1.0, 0.0]);
    assert!(x[16..].iter().all(|&v| v == 0.0));

    let f = Mat3::diag(Vec3::new(-2.0, -1.0, 1.0));
    let x = features_stress(&f, &Mat3::ZERO, &Latent::zeros()).unwrap();
    assert_eq!(x[14], 1e-6);
    assert_eq!(x[15], (1e-6_f64).ln());
    assert_eq!(x[12], 2.0);
}

#[test]
fn tape_features_match_plain_features() {
    let f = Mat3::from_rows([1.1, 0.1, 0.0], [0.0, 0.9, 0.2], [0.05, 0.0, 1.0]);
    let c = Mat3::from_rows([0.3, -1.0, 0.0], [2.0, 0.1, 0.0], [0.0, 0.5, -0.2]);
    let z = init_latent(&mut ChaCha8Rng::seed_from_u64(1));
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor::from_mat3s(&[f]));
    let cv = tape.constant(Tensor::from_mat3s(&[c]));
    let zv = tape.constant(z.to_tensor());
    let xp = projection_features_on_tape(&mut tape, fv, zv).unwrap();
    let xs = stress_features_on_tape(&mut tape, fv, cv, zv).unwrap();
    assert_eq!(
        tape.value(xp).data,
        features_projection(&f, &svd3(&f).unwrap(), &z)
    );
    assert_eq!(tape.value(xs).data, features_stress(&f, &c, &z).unwrap());
}

#[test]
fn initial_model_properties() {
    let a = model(3);
    assert_eq!(a, model(3));
    assert_ne!(a, model(4));
    assert_eq!(a.projection.layers.len(), DEPTH);
    assert_eq!(a.stress.layers.len(), DEPTH);
    assert!(a.projection.layers[1..4]
        .iter()
        .all(|l| l.w.shape() == (32, 32)));
    assert!(a.stress.layers[1..4]
        .iter()
        .all(|l| l.w.shape() == (128, 128)));
    a.validate().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let f = Mat3(std::array::from_fn(|_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        })) + Mat3::IDENTITY;
        let z = init_latent(&mut rng);
        assert_eq!(g_phi_forward(&a, &f, &z).unwrap(), f);
        let s = f_theta_forward(&a, &Mat3::IDENTITY, &f, &z).unwrap();
        assert!(s.frobenius() < 0.1, "{}", s.frobenius());
    }
}

#[test]
fn stress_output_is_exactly_symmetric() {
    let m = live_model(5, 0.01, 1e3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let f = Mat3(std::array::from_fn(|_| {
            rand::Rng::random_range(&mut rng, -0.3..0.3)
        })) + Mat3::IDENTITY;
        let c = Mat3(std::array::from_fn(|_| {
            rand::Rng::random_range(&mut rng, -5.0..5.0)
        }));
        let s = f_theta_forward(&m, &f, &c, &init_latent(&mut rng)).unwrap();
        assert_eq!(s, s.transpose());
        assert!(s.frobenius() > 0.0);
    }
    let mut zero = m.clone();
    for l in &mut zero.stress.layers {
        l.w.data.fill(0.0);
        l.b.data.fill(0.0);
    }
    assert_eq!(
        f_theta_forward(&zero, &Mat3::IDENTITY, &Mat3::ZERO, &Latent::zeros()).unwrap(),
        Mat3::ZERO
    );
}

#[test]
fn latent_init_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = init_latent(&mut rng);
    assert_eq!(a.as_slice().len(), LATENT_DIM);
    assert_eq!(a, init_latent(&mut ChaCha8Rng::seed_from_u64(11)));
    let n = 100_000 / LATENT_DIM + 1;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        for v in init_latent(&mut rng).as_slice() {
            sum += v;
            sq += v * v;
        }
    }
    let count = (n * LATENT_DIM) as f64;
    assert!((sum / count).abs() < 0.02);
    assert!((sq / count - 1.0).abs() < 0.03);
    assert!(Latent::new(vec![0.0; 31]).is_err());
    assert!(Latent::new(vec![f64::NAN; 32]).is_err());
}

#[test]
fn latent_gradient_matches_finite_differences() {
    let m = live_model(12, 0.02, 1e3);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = init_latent(&mut rng);
    let fs: Vec<Mat3> = (0..4)
        .map(|_| {
            Mat3(std::array::from_fn(|_| {
                rand::Rng::random_range(&mut rng, -0.2..0.2)
            })) + Mat3::IDENTITY
        })
        .collect();
    let cs: Vec<Mat3> = (0..4)
        .map(|_| {
            Mat3(std::array::from_fn(|_| {
                rand::Rng::random_range(&mut rng, -2.0..2.0)
            }))
        })
        .collect();
    let loss = |tape: &mut Tape, zv: Var| -> Result<Var> {
        let vars = ModelVars::register(&m, tape, false);
        let fv = tape.constant(Tensor::from_mat3s(&fs));
        let cv = tape.constant(Tensor::from_mat3s(&cs));
        let zr = tape.gather_rows(zv, vec![0; 4]);
        let fp = project_on_tape(&m, tape, &vars.projection, fv, zr)?;
        let s = stress_on_tape(&m, tape, &vars.stress, fp, cv, zr)?;
        let s = tape.scale(s, 1e-3);
        let a = tape.square(fp);
        let b = tape.square(s);
        let a = tape.sum(a);
        let b = tape.sum(b);
        Ok(tape.add(a, b))
    };
    let r = grad(&[vec![z.to_tensor()]], |t, v| loss(t, v[0][0])).unwrap();
    let g = &r.groups[0][0];
    assert!(g.max_abs() > 0.0);
    let eval = |zt: Tensor| {
        let mut tape = Tape::new();
        let zv = tape.constant(zt);
        let l = loss(&mut tape, zv).unwrap();
        tape.value(l).item()
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..LATENT_DIM {
        let mut zp = z.to_tensor();
        zp.data[k] += 1e-5;
        let mut zm = z.to_tensor();
        zm.data[k] -= 1e-5;
        let fd = (eval(zp) - eval(zm)) / 2e-5;
        num += (fd - g.data[k]).powi(2);
        den += fd * fd;
    }
    assert!((num / den).sqrt() < 1e-4);
}

fn cube_state(grid: GridConfig, lo: Vec3, per_axis: usize, v: Vec3) -> SimState {
    let h = grid.h();
    let (m, vol) = grid.particle_mass_volume(DEFAULT_DENSITY);
    let mut particles = Vec::new();
    for i in 0..per_axis {
        for j in 0..per_axis {
            for k in 0..per_axis {
                let x = lo + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * (0.5 * h);
                let mut p = ParticleState::at_rest(x, m, vol);
                p.v = v;
                particles.push(p);
            }
        }
    }
    SimState { particles, grid }
}

#[test]
fn initial_provider_rolls_out_and_is_deterministic() {
    let m = model(21);
    let p = NeuralProvider::new(&m, init_latent(&mut ChaCha8Rng::seed_from_u64(2)));
    let grid = GridConfig::new(16);
    let s0 = cube_state(
        grid,
        Vec3::new(0.4, 0.25, 0.4),
        4,
        Vec3::new(0.2, -0.5, 0.0),
    );
    let sim = SimConfig::new(5e-4, 50);
    let a = mpm::rollout(&s0, &p, &sim, false).unwrap();
    assert!(a.frames.iter().flatten().all(ParticleState::is_finite));
    assert_eq!(a, mpm::rollout(&s0, &p, &sim, false).unwrap());
    // identity projection at init
    let tuples = mpm::rollout(&s0, &p, &SimConfig::new(5e-4, 5), true)
        .unwrap()
        .tuples;
    assert!(tuples.iter().flatten().all(|t| t.f == t.f_proj));
}

#[test]
fn batched_and_single_evaluation_agree() {
    let m = live_model(31, 0.01, 1e3);
    let p = NeuralProvider::new(&m, init_latent(&mut ChaCha8Rng::seed_from_u64(3)));
    let f = Mat3::from_rows([1.01, 0.02, 0.0], [0.0, 0.99, 0.01], [0.0, 0.0, 1.0]);
    let c = Mat3::skew(Vec3::new(0.1, 0.2, 0.3));
    let fp = p.project_batch(&[f, f], 1e-3).unwrap();
    assert_eq!(fp[0], p.project(&f, 1e-3).unwrap());
    assert_eq!(fp[0], g_phi_forward(&m, &f, &p.z).unwrap());
    let s = p.stress_batch(&[fp[0], fp[1]], &[c, c]).unwrap();
    assert_eq!(s[1], f_theta_forward(&m, &fp[0], &c, &p.z).unwrap());
}

#[test]
fn rollout_latent_gradient_matches_finite_differences() {
    let m = live_model(41, 0.005, 2e3);
    let z = init_latent(&mut ChaCha8Rng::seed_from_u64(4));
    let grid = GridConfig::new(16);
    let s0 = cube_state(
        grid,
        Vec3::new(0.4, 0.22, 0.4),
        3,
        Vec3::new(0.3, -1.0, 0.2),
    );
    assert_eq!(s0.particles.len(), 27);
    let sim = SimConfig::new(3e-4, 20);
    let gt = mpm::rollout(
        &s0,
        &crate::materials::MaterialSpec::elastic(3e3, 3e3),
        &sim,
        false,
    )
    .unwrap();
    let target = gt.positions();
    let provider = NeuralProvider::new(&m, z.clone());
    let mask = provider.latent_only();
    let r = checkpointed_rollout_grad(
        &s0,
        &provider,
        &mask,
        &sim,
        &target,
        &RolloutGradOptions::default(),
    )
    .unwrap();
    let plain = mpm::rollout(&s0, &provider, &sim, false).unwrap();
    assert_eq!(plain.positions(), r.positions);

    let g = &r.report.groups[0][0];
    assert!(g.max_abs() > 0.0);
    assert!(r.report.groups[0][1..].iter().all(|t| t.max_abs() == 0.0));
    let loss = |zt: Vec<f64>| {
        let p = NeuralProvider::new(&m, Latent::new(zt).unwrap());
        let traj = mpm::rollout(&s0, &p, &sim, false).unwrap();
        crate::autodiff::position_loss_value(&traj.positions(), &target)
    };
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..LATENT_DIM {
        let mut zp = z.as_slice().to_vec();
        zp[k] += 1e-5;
        let mut zm = z.as_slice().to_vec();
        zm[k] -= 1e-5;
        let fd = (loss(zp) - loss(zm)) / 2e-5;
        num += (fd - g.data[k]).powi(2);
        den += fd * fd;
    }
    let rel = (num / den).sqrt();
    assert!(rel < 1e-4, "relative error {rel}");
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let m = live_model(51, 0.01, 1234.5);
    let mut cb = LatentCodebook::init(&[7, 3, 11], &mut ChaCha8Rng::seed_from_u64(1));
    cb.entries.insert(99, Latent::zeros());
    let ck = Checkpoint {
        model: m,
        codebook: cb,
        step: 42,
    };
    let bytes = encode_checkpoint(&ck);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.step, 42);
    assert_eq!(back.model.stress_scale, 1234.5);
    assert_eq!(back.codebook.ids(), vec![3, 7, 11, 99]);
    for (a, b) in ck.model.tensors().iter().zip(back.model.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }
    assert_eq!(encode_checkpoint(&back), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(Error::BadMagic { .. })
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::BadVersion(9))));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 3]),
        Err(Error::Truncated(_))
    ));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.uphn");
    write_checkpoint(&path, &ck).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), back);
}

#[test]
fn codebook_tensor_round_trip() {
    let mut cb = LatentCodebook::init(&[5, 1, 9], &mut ChaCha8Rng::seed_from_u64(2));
    let t = cb.to_tensor();
    assert_eq!(t.shape(), (3, LATENT_DIM));
    assert_eq!(t.row(0), cb.get(1).unwrap().as_slice());
    let doubled = t.scaled(2.0);
    cb.set_from_tensor(&doubled).unwrap();
    assert_eq!(cb.get(9).unwrap().as_slice(), doubled.row(2));
}
