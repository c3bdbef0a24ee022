use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use latent_mpm::data::{
    generate_dataset, read_dataset, write_dataset, write_positions_csv, Dataset, GenConfig,
    Geometry, Record,
};
use latent_mpm::infer::{
    infer_latent, initial_candidates, random_latent_baseline, reconstruction_error, resimulate,
    InferenceConfig, InferenceReport, Observation, TeacherForcing,
};
use latent_mpm::materials::MaterialKind;
use latent_mpm::mpm::{GridConfig, SimConfig};
use latent_mpm::neural::{read_checkpoint, write_checkpoint, Latent};
use latent_mpm::tensor3::Vec3;
use latent_mpm::train::{write_loss_csv, TrainConfig, Trainer};
use latent_mpm::{Error, Result};

use crate::settings::Settings;
use crate::{Cli, Command, EvalArgs, GenDataArgs, InferArgs, ResimArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut s = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(a, &mut s),
        Command::Train(a) => train(a, &mut s),
        Command::Infer(a) => infer(a, &mut s),
        Command::Resim(a) => resim(a, &mut s),
        Command::Eval(a) => eval(a, &mut s),
    }
}

fn required(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    s.pick_opt(key, flag)?
        .ok_or_else(|| Error::Argument(format!("--{key} is required")))
}

fn input_file(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    let p = required(s, key, flag)?;
    check_input(&p)?;
    Ok(p)
}

fn check_input(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a readable file", p.display()),
        )));
    }
    Ok(())
}

/// Refuses outputs whose directory does not exist, before any work is done.
fn check_output(p: &Path) -> Result<()> {
    let dir = match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        )));
    }
    if p.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("{} is a directory", p.display()),
        )));
    }
    Ok(())
}

fn output_file(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    let p = required(s, key, flag)?;
    check_output(&p)?;
    Ok(p)
}

fn optional_output(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
    let p = s.pick_opt(key, flag)?;
    if let Some(p) = &p {
        check_output(p)?;
    }
    Ok(p)
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(p)?))
}

fn parse_materials(text: &str) -> Result<Vec<MaterialKind>> {
    if text.trim() == "all" {
        return Ok(MaterialKind::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in text.split(',').map(str::trim) {
        let k: MaterialKind = name.parse()?;
        if out.contains(&k) {
            return Err(Error::Argument(format!("material `{name}` listed twice")));
        }
        out.push(k);
    }
    Ok(out)
}

fn parse_vec3(key: &str, text: &str) -> Result<Vec3> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Argument(format!("--{key}: {e}")))?;
    match parts[..] {
        [x, y, z] if x.is_finite() && y.is_finite() && z.is_finite() => Ok(Vec3::new(x, y, z)),
        _ => Err(Error::Argument(format!(
            "--{key} expects three finite numbers x,y,z"
        ))),
    }
}

fn parse_geometry(text: &str) -> Result<Geometry> {
    let bad = || {
        Error::Argument(format!(
            "--geometry `{text}`: expected box:a,b,c, sphere:r or cylinder:r,h"
        ))
    };
    let (kind, rest) = text.split_once(':').ok_or_else(bad)?;
    let nums: Vec<f64> = rest
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let g = match (kind.trim(), &nums[..]) {
        ("box", &[a, b, c]) => Geometry::Box {
            extents: Vec3::new(a, b, c),
        },
        ("sphere", &[r]) => Geometry::Sphere { radius: r },
        ("cylinder", &[r, h]) => Geometry::Cylinder {
            radius: r,
            height: h,
        },
        _ => return Err(bad()),
    };
    if !g.is_valid() {
        return Err(bad());
    }
    Ok(g)
}

fn pick_record(ds: &Dataset, id: Option<u64>, what: &Path) -> Result<Record> {
    match id {
        Some(id) => ds.get(id).cloned(),
        None => ds.records.first().cloned(),
    }
    .ok_or_else(|| {
        Error::Argument(match id {
            Some(id) => format!("no trajectory {id} in {}", what.display()),
            None => format!("{} holds no trajectories", what.display()),
        })
    })
}

fn gen_data(a: GenDataArgs, s: &mut Settings) -> Result<()> {
    let materials = parse_materials(&s.pick("materials", a.materials, "all".to_string())?)?;
    let per_material = s.pick("per-material", a.per_material, 4)?;
    let defaults = GenConfig::default();
    let steps = s.pick("steps", a.steps, defaults.steps)?;
    let particles = s.pick("particles", a.particles, defaults.max_particles)?;
    let grid = s.pick("grid", a.grid, defaults.grid.n)?;
    let seed = s.pick("seed", a.seed, 0)?;
    let first_id = s.pick("first-id", a.first_id, 0)?;
    let out = output_file(s, "out", a.out)?;
    let csv_dir: Option<PathBuf> = s.pick_opt("csv-dir", a.csv_dir)?;
    s.finish()?;
    if per_material == 0 {
        return Err(Error::Argument("--per-material must be positive".into()));
    }
    if let Some(d) = &csv_dir {
        if !d.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("csv directory {} does not exist", d.display()),
            )));
        }
    }
    let cfg = GenConfig {
        grid: GridConfig::new(grid),
        steps,
        max_particles: particles,
        ..defaults
    };
    let (ds, stats) = generate_dataset(&materials, per_material, &cfg, seed, first_id)?;
    write_dataset(&ds, &out)?;
    for ((k, n), (_, r)) in stats.accepted.iter().zip(&stats.rejected) {
        println!("{k}: {n} trajectories, {r} rejected scenes");
    }
    if let Some(d) = csv_dir {
        for r in &ds.records {
            let mut w = create(&d.join(format!("trajectory_{}.csv", r.id)))?;
            write_positions_csv(&r.trajectory.positions(), &mut w)?;
            w.flush()?;
        }
    }
    println!("wrote {} trajectories to {}", ds.len(), out.display());
    Ok(())
}

fn train(a: TrainArgs, s: &mut Settings) -> Result<()> {
    let d = TrainConfig::default();
    let data = input_file(s, "data", a.data)?;
    let cfg = TrainConfig {
        epochs: s.pick("epochs", a.epochs, d.epochs)?,
        batch_size: s.pick("batch", a.batch, d.batch_size)?,
        sigma: s.pick("sigma", a.sigma, d.sigma)?,
        lr_weights: s.pick("lr-weights", a.lr_weights, d.lr_weights)?,
        lr_latents: s.pick("lr-latents", a.lr_latents, d.lr_latents)?,
        lr_final_fraction: s.pick(
            "lr-final-fraction",
            a.lr_final_fraction,
            d.lr_final_fraction,
        )?,
        weight_decay: s.pick("weight-decay", a.weight_decay, d.weight_decay)?,
        samples_per_trajectory: s.pick(
            "samples-per-trajectory",
            a.samples_per_trajectory,
            d.samples_per_trajectory,
        )?,
        stress_scale: s.pick_opt("stress-scale", a.stress_scale)?,
        seed: s.pick("seed", a.seed, d.seed)?,
    };
    let ckpt_out = output_file(s, "ckpt-out", a.ckpt_out)?;
    let every = s.pick("checkpoint-every", a.checkpoint_every, 0)?;
    let resume: Option<PathBuf> = s.pick_opt("resume", a.resume)?;
    if let Some(r) = &resume {
        check_input(r)?;
    }
    let loss_csv = match optional_output(s, "loss-csv", a.loss_csv)? {
        Some(p) => p,
        None => ckpt_out.with_extension("loss.csv"),
    };
    s.finish()?;
    cfg.validate()?;

    let ds = read_dataset(&data)?;
    let resume = resume.map(|p| read_checkpoint(&p)).transpose()?;
    let mut t = Trainer::new(&ds, cfg.clone(), resume)?;
    for e in 0..cfg.epochs {
        let l = t.run_epoch()?;
        if every > 0 && (e + 1) % every == 0 {
            write_checkpoint(&ckpt_out, &t.checkpoint())?;
        }
        if e == 0 || e + 1 == cfg.epochs {
            println!("epoch {e}: loss {:e}", l.loss.total);
        }
    }
    write_checkpoint(&ckpt_out, &t.checkpoint())?;
    let mut w = create(&loss_csv)?;
    write_loss_csv(&t.history, &mut w)?;
    w.flush()?;
    println!(
        "wrote {} (step {}) and {}",
        ckpt_out.display(),
        t.step,
        loss_csv.display()
    );
    Ok(())
}

fn infer(a: InferArgs, s: &mut Settings) -> Result<()> {
    let d = InferenceConfig::default();
    let ckpt = input_file(s, "ckpt", a.ckpt)?;
    let obs_path = input_file(s, "obs", a.obs)?;
    let id = s.pick_opt("id", a.id)?;
    let steps = s.pick_opt("steps", a.steps)?;
    let tf = match s
        .pick("teacher-forcing", a.teacher_forcing, "off".to_string())?
        .as_str()
    {
        "off" => TeacherForcing::Off,
        "cosine" => TeacherForcing::DEFAULT_COSINE,
        other => {
            return Err(Error::Argument(format!(
                "--teacher-forcing must be off or cosine, got `{other}`"
            )))
        }
    };
    let positions_only = s.pick("positions-only", a.positions_only.then_some(true), false)?;
    let cfg = InferenceConfig {
        lr_latent: s.pick("lr", a.lr, d.lr_latent)?,
        epochs: s.pick("epochs", a.epochs, d.epochs)?,
        kmeans_k: s.pick("k", a.k, d.kmeans_k)?,
        teacher_forcing: tf,
        seed: s.pick("seed", a.seed, d.seed)?,
        ..d
    };
    let out = output_file(s, "out", a.out)?;
    s.finish()?;
    cfg.validate()?;

    let ck = read_checkpoint(&ckpt)?;
    let ds = read_dataset(&obs_path)?;
    let rec = pick_record(&ds, id, &obs_path)?;
    let obs = Observation::from_record(&rec, steps, !positions_only)?;
    if ck.codebook.is_empty() {
        return Err(Error::Argument(format!(
            "{} has no latents to start from",
            ckpt.display()
        )));
    }
    let candidates = initial_candidates(&ck.codebook, cfg.kmeans_k, cfg.seed)?;
    let result = infer_latent(&obs, &ck.model, &candidates, &cfg)?;
    let baseline = random_latent_baseline(&obs, &ck.model, cfg.seed)?;
    let report = InferenceReport::new(rec.id, &result, baseline);
    let mut w = create(&out)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    println!(
        "trajectory {}: initial {:e}, final {:e}, random-latent baseline {}",
        rec.id,
        result.initial_loss,
        result.final_loss,
        baseline.map_or("diverged".to_string(), |b| format!("{b:e}"))
    );
    Ok(())
}

fn resim(a: ResimArgs, s: &mut Settings) -> Result<()> {
    let ckpt = input_file(s, "ckpt", a.ckpt)?;
    let latent_file: Option<PathBuf> = s.pick_opt("latent", a.latent)?;
    let latent_id: Option<u64> = s.pick_opt("latent-id", a.latent_id)?;
    let scene_path = input_file(s, "scene", a.scene)?;
    let id = s.pick_opt("id", a.id)?;
    let steps: Option<usize> = s.pick_opt("steps", a.steps)?;
    let velocity: Option<String> = s.pick_opt("velocity", a.velocity)?;
    let angular: Option<String> = s.pick_opt("angular", a.angular)?;
    let center: Option<String> = s.pick_opt("center", a.center)?;
    let geometry: Option<String> = s.pick_opt("geometry", a.geometry)?;
    let dt: Option<f64> = s.pick_opt("dt", a.dt)?;
    let out = output_file(s, "out", a.out)?;
    let csv = optional_output(s, "csv", a.csv)?;
    s.finish()?;
    if latent_file.is_some() == latent_id.is_some() {
        return Err(Error::Argument(
            "give exactly one of --latent and --latent-id".into(),
        ));
    }
    if let Some(p) = &latent_file {
        check_input(p)?;
    }

    let ck = read_checkpoint(&ckpt)?;
    let z: Latent = match (latent_file, latent_id) {
        (Some(p), _) => {
            let rep: InferenceReport = serde_json::from_reader(File::open(&p)?)
                .map_err(|e| Error::Argument(format!("{}: {e}", p.display())))?;
            rep.latent()?
        }
        (None, Some(i)) => ck.codebook.get(i).cloned().ok_or_else(|| {
            Error::Argument(format!("checkpoint has no latent for trajectory {i}"))
        })?,
        (None, None) => unreachable!("checked above"),
    };
    let ds = read_dataset(&scene_path)?;
    let src = pick_record(&ds, id, &scene_path)?;
    let mut scene = src.scene;
    if let Some(v) = velocity {
        scene.initial_velocity = parse_vec3("velocity", &v)?;
    }
    if let Some(w) = angular {
        scene.angular_velocity = parse_vec3("angular", &w)?;
    }
    if let Some(c) = center {
        scene.center = parse_vec3("center", &c)?;
    }
    if let Some(g) = geometry {
        scene.geometry = parse_geometry(&g)?;
    }
    let grid = src.trajectory.grid;
    let first = src
        .trajectory
        .frames
        .first()
        .and_then(|f| f.first())
        .ok_or_else(|| Error::Argument(format!("trajectory {} is empty", src.id)))?;
    let density = first.mass / first.volume0;
    let dt = match dt {
        Some(dt) => dt,
        None => src.trajectory.dt.min(scene.suggested_dt(&grid, density)),
    };
    let sim = SimConfig {
        dt,
        gravity: src.gravity,
        steps: steps.unwrap_or(src.trajectory.steps()),
    };
    sim.validate()?;
    let trajectory = resimulate(&ck.model, &z, &scene, &grid, density, &sim)?;
    let rec = Record {
        id: src.id,
        scene,
        gravity: src.gravity,
        trajectory,
    };
    if let Some(p) = csv {
        let mut w = create(&p)?;
        write_positions_csv(&rec.trajectory.positions(), &mut w)?;
        w.flush()?;
    }
    let n = rec.trajectory.num_particles();
    write_dataset(&Dataset { records: vec![rec] }, &out)?;
    println!(
        "wrote {} steps of {n} particles to {}",
        sim.steps,
        out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs, s: &mut Settings) -> Result<()> {
    let pred_path = input_file(s, "pred", a.pred)?;
    let gt_path = input_file(s, "gt", a.gt)?;
    let csv = optional_output(s, "csv", a.csv)?;
    s.finish()?;
    let pred = read_dataset(&pred_path)?;
    let gt = read_dataset(&gt_path)?;
    if pred.is_empty() {
        return Err(Error::Argument(format!(
            "{} holds no trajectories",
            pred_path.display()
        )));
    }
    let mut total = 0.0;
    for r in &pred.records {
        let g = gt.get(r.id).ok_or_else(|| {
            Error::Argument(format!(
                "trajectory {} missing from {}",
                r.id,
                gt_path.display()
            ))
        })?;
        let e = reconstruction_error(&r.trajectory.positions(), &g.trajectory.positions())?;
        println!("trajectory {}: {e:?}", r.id);
        total += e;
    }
    let mean = total / pred.len() as f64;
    println!("reconstruction error: {mean:?}");
    if let Some(p) = csv {
        let mut w = create(&p)?;
        if pred.len() == 1 {
            write_positions_csv(&pred.records[0].trajectory.positions(), &mut w)?;
        } else {
            writeln!(w, "trajectory,step,particle,x,y,z")?;
            for r in &pred.records {
                for (t, frame) in r.trajectory.positions().iter().enumerate() {
                    for (i, x) in frame.iter().enumerate() {
                        writeln!(w, "{},{t},{i},{},{},{}", r.id, x.x, x.y, x.z)?;
                    }
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}
