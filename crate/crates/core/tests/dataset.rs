use latent_mpm::data::{generate_dataset, read_dataset, sample_material, write_dataset, GenConfig};
use latent_mpm::materials::{project_deformation, MaterialKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> GenConfig {
    GenConfig {
        steps: 12,
        max_particles: 64,
        ..GenConfig::default()
    }
}

#[test]
fn stored_projections_survive_the_file_format() {
    let (ds, stats) = generate_dataset(&MaterialKind::ALL, 1, &small(), 11, 0).unwrap();
    assert_eq!(stats.accepted.iter().map(|(_, n)| n).sum::<usize>(), 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.uphy");
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.ids(), ds.ids());
    for r in &back.records {
        let dt = r.trajectory.dt;
        for tu in r.trajectory.tuples.iter().flatten() {
            let again = project_deformation(&r.scene.material, &tu.f, dt).unwrap();
            let scale = tu.f_proj.frobenius();
            assert!(
                (again - tu.f_proj).frobenius() <= 1e-5 * scale,
                "{} trajectory {}",
                r.kind(),
                r.id
            );
            assert!((tu.s - tu.s.transpose()).frobenius() <= 1e-12 * tu.s.frobenius().max(1.0));
        }
    }
}

#[test]
fn generation_is_reproducible_and_counted() {
    let cfg = small();
    let (a, _) = generate_dataset(
        &[MaterialKind::Sand, MaterialKind::Elastic],
        2,
        &cfg,
        4,
        100,
    )
    .unwrap();
    let (b, _) = generate_dataset(
        &[MaterialKind::Sand, MaterialKind::Elastic],
        2,
        &cfg,
        4,
        100,
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.ids(), vec![100, 101, 102, 103]);
    assert_eq!(a.of_kind(MaterialKind::Sand).count(), 2);
    a.validate().unwrap();
}

#[test]
fn elastic_stiffness_is_log_uniform_over_decades() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mus: Vec<f64> = (0..200)
        .map(|_| sample_material(MaterialKind::Elastic, &mut rng).mu)
        .collect();
    let lo = mus.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mus.iter().copied().fold(0.0, f64::max);
    assert!(hi / lo >= 100.0, "span {}", hi / lo);
}
