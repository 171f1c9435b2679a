//! `mrxray`: one binary for phantoms, projections, datasets, training,
//! inference, evaluation, the ablation and gradient self-checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use mrxray_core::eval::evaluate_arms;
use mrxray_core::image::Image;
use mrxray_core::loss::FeatureExtractor;
use mrxray_core::netgen::{generator_gradcheck, preset_proposed};
use mrxray_core::projector::dataset::{build_dataset, manifest_path, DatasetPlan, Manifest, DESK_FOV_MM};
use mrxray_core::projector::phantom::{generate_phantom, PhantomSpec};
use mrxray_core::projector::{project_pair, to_intensity, volume_io, MarchOptions, ProjectionGeometry};
use mrxray_core::seeds::content_hash;
use mrxray_core::tensor::gradcheck::{run_op_suite, GradCheckConfig, OP_SUITES};
use mrxray_core::train::{from_network, parse_config_text, run_ablation, to_network, Checkpoint, TrainConfig, Trainer};
use mrxray_core::{Error, Result};

fn seed_arg() -> Arg {
    Arg::new("seed")
        .long("seed")
        .value_parser(value_parser!(u64))
        .help("Master seed; every random choice derives from it")
}

fn out_arg() -> Arg {
    Arg::new("out")
        .long("out")
        .required(true)
        .value_parser(value_parser!(PathBuf))
        .help("Directory receiving all artifacts")
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .required(true)
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn usize_arg(name: &'static str, default: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .default_value(default)
        .value_parser(value_parser!(usize))
        .help(help)
}

/// `--config FILE` plus one `--<key> VALUE` flag per configuration key.
fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_parser(value_parser!(PathBuf))
            .help("File of 'key = value' lines, applied before flags"),
    );
    TrainConfig::keys().into_iter().fold(cmd, |cmd, key| {
        let key: &'static str = Box::leak(key.into_boxed_str());
        cmd.arg(Arg::new(key).long(key).value_name("VALUE").hide(true))
    })
}

fn dataset_args(cmd: Command, required_seed: bool) -> Command {
    cmd.arg(usize_arg("phantoms", "4", "Number of phantoms"))
        .arg(
            Arg::new("split")
                .long("split")
                .default_value("3:1")
                .help("Train:test phantom split"),
        )
        .arg(usize_arg("angles", "16", "Projection angles per phantom"))
        .arg(usize_arg("pixels", "64", "Detector side length in pixels"))
        .arg(
            Arg::new("noise")
                .long("noise")
                .default_value("0")
                .value_parser(value_parser!(f64))
                .help("Gaussian noise sigma added to X-ray line integrals"),
        )
        .arg(seed_arg().required(required_seed))
}

fn cli() -> Command {
    Command::new("mrxray")
        .about("MR-projection to X-ray-projection translation toolkit")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("phantom")
                .about("Generate a two-channel head phantom volume")
                .arg(seed_arg().required(true))
                .arg(out_arg())
                .arg(usize_arg("size", "64", "Voxels per axis"))
                .arg(
                    Arg::new("spacing")
                        .long("spacing")
                        .value_parser(value_parser!(f64))
                        .help("Voxel spacing in mm (default: field of view / size)"),
                ),
        )
        .subcommand(
            Command::new("project")
                .about("Project a phantom volume to a registered MR/X-ray pair")
                .arg(path_arg("volume", "Volume file written by 'phantom'"))
                .arg(out_arg())
                .arg(usize_arg("pixels", "64", "Detector side length in pixels"))
                .arg(
                    Arg::new("angle")
                        .long("angle")
                        .default_value("0")
                        .value_parser(value_parser!(f64))
                        .help("Gantry angle in degrees"),
                )
                .arg(
                    Arg::new("beam")
                        .long("beam")
                        .default_value("cone")
                        .value_parser(["cone", "parallel"]),
                )
                .arg(
                    Arg::new("intensity")
                        .long("intensity")
                        .action(ArgAction::SetTrue)
                        .help("Also write the detector-intensity image exp(-line integral)"),
                ),
        )
        .subcommand(dataset_args(
            Command::new("dataset")
                .about("Synthesize a split dataset of projection pairs")
                .arg(out_arg()),
            true,
        ))
        .subcommand(config_args(
            Command::new("train")
                .about("Train a generator on a dataset")
                .arg(path_arg("data", "Dataset directory"))
                .arg(out_arg())
                .arg(seed_arg())
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .value_parser(value_parser!(PathBuf))
                        .help("Continue from this checkpoint"),
                ),
        ))
        .subcommand(
            Command::new("infer")
                .about("Translate one MR projection with a trained generator")
                .arg(path_arg("checkpoint", "Checkpoint file"))
                .arg(path_arg("input", "MR projection image file"))
                .arg(path_arg("data", "Dataset directory holding the manifest and its norm records"))
                .arg(out_arg())
                .arg(
                    Arg::new("intensity")
                        .long("intensity")
                        .action(ArgAction::SetTrue)
                        .help("Also write the detector-intensity image exp(-line integral)"),
                ),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate checkpoints on the test split")
                .arg(path_arg("data", "Dataset directory"))
                .arg(out_arg())
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .required(true)
                        .action(ArgAction::Append)
                        .help("NAME=PATH or PATH; repeat to compare arms"),
                )
                .arg(
                    Arg::new("tau")
                        .long("tau")
                        .default_value("0.2")
                        .value_parser(value_parser!(f64))
                        .help("Edge threshold on the label's normalized Sobel map"),
                ),
        )
        .subcommand(config_args(dataset_args(
            Command::new("ablate")
                .about("Train the three ablation arms and compare them")
                .arg(out_arg())
                .arg(
                    Arg::new("data")
                        .long("data")
                        .value_parser(value_parser!(PathBuf))
                        .help("Existing dataset; synthesized under OUT/data when absent"),
                ),
            false,
        )))
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference self-check of every differentiable operation")
                .arg(
                    Arg::new("ops")
                        .long("ops")
                        .default_value("all")
                        .help("'all' or a comma list of operations ('generator' checks the whole model)"),
                )
                .arg(usize_arg("trials", "20", "Random trials per operation"))
                .arg(seed_arg()),
        )
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "phantom" => phantom(sub),
        "project" => project(sub),
        "dataset" => dataset(sub),
        "train" => train(sub),
        "infer" => infer(sub),
        "eval" => eval(sub),
        "ablate" => ablate(sub),
        "gradcheck" => gradcheck(sub),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn out_dir(m: &ArgMatches) -> Result<PathBuf> {
    let out = m.get_one::<PathBuf>("out").expect("required").clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn announce(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn phantom(m: &ArgMatches) -> Result<u8> {
    let size = *m.get_one::<usize>("size").expect("default");
    let spacing = m.get_one::<f64>("spacing").copied().unwrap_or(DESK_FOV_MM / size as f64);
    let seed = *m.get_one::<u64>("seed").expect("required");
    let spec = PhantomSpec {
        size,
        spacing,
        ..PhantomSpec::with_seed(seed)
    };
    announce(&[
        ("seed", seed.to_string()),
        ("size", size.to_string()),
        ("spacing_mm", spacing.to_string()),
    ]);
    let out = out_dir(m)?;
    let vol = generate_phantom(&spec)?;
    let path = out.join("phantom.vol");
    volume_io::save(&vol, &path)?;
    println!("wrote {} (sha256 {})", path.display(), file_hash(&path)?);
    Ok(0)
}

fn project(m: &ArgMatches) -> Result<u8> {
    let vpath = m.get_one::<PathBuf>("volume").expect("required");
    let pixels = *m.get_one::<usize>("pixels").expect("default");
    let angle = m.get_one::<f64>("angle").expect("default").to_radians();
    announce(&[
        ("volume", vpath.display().to_string()),
        ("volume_sha256", file_hash(vpath)?),
        ("pixels", pixels.to_string()),
        ("angle_rad", angle.to_string()),
    ]);
    let vol = volume_io::load(vpath)?;
    let fov = vol.dims()[0] as f64 * vol.spacing()[0];
    let geom = if m.get_one::<String>("beam").map(String::as_str) == Some("parallel") {
        let d = fov / pixels as f64;
        ProjectionGeometry::parallel(pixels, pixels, d, d, angle)
    } else {
        ProjectionGeometry {
            angle,
            ..mrxray_core::projector::dataset::default_geometry(pixels, vol.dims()[0], vol.spacing()[0])
        }
    };
    let (mr, xray) = project_pair(&vol, &geom, MarchOptions::default())?;
    let out = out_dir(m)?;
    let mut written = vec![save_with_pgm(&mr, &out, "mr")?, save_with_pgm(&xray, &out, "xray")?];
    if m.get_flag("intensity") {
        written.push(save_with_pgm(&to_intensity(&xray), &out, "xray_intensity")?);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(0)
}

/// Writes `<stem>.img` and a min/max-scaled `<stem>.pgm` preview.
fn save_with_pgm(img: &Image, out: &Path, stem: &str) -> Result<PathBuf> {
    let path = out.join(format!("{stem}.img"));
    img.save(&path)?;
    img.to_pgm16(img.min(), img.max()).save(&out.join(format!("{stem}.pgm")))?;
    Ok(path)
}

fn parse_split(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("split must look like 3:1, got '{s}'"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn dataset_plan(m: &ArgMatches, seed: u64) -> Result<DatasetPlan> {
    let phantoms = *m.get_one::<usize>("phantoms").expect("default");
    let split = parse_split(m.get_one::<String>("split").expect("default"))?;
    if split.0 + split.1 != phantoms {
        return Err(Error::Config(format!(
            "split {}:{} does not cover {phantoms} phantoms",
            split.0, split.1
        )));
    }
    let angles = *m.get_one::<usize>("angles").expect("default");
    let pixels = *m.get_one::<usize>("pixels").expect("default");
    let mut plan = DatasetPlan::desk(seed, phantoms, split, angles, pixels);
    plan.noise_sigma = *m.get_one::<f64>("noise").expect("default");
    announce(&[
        ("seed", seed.to_string()),
        ("phantoms", phantoms.to_string()),
        ("split", format!("{}:{}", split.0, split.1)),
        ("angles", angles.to_string()),
        ("pixels", pixels.to_string()),
        ("noise", plan.noise_sigma.to_string()),
    ]);
    Ok(plan)
}

fn report_manifest(m: &Manifest) {
    use mrxray_core::projector::dataset::Split;
    announce(&[
        ("manifest_sha256", m.hash()),
        ("train_pairs", m.pairs_in(Split::Train).count().to_string()),
        ("test_pairs", m.pairs_in(Split::Test).count().to_string()),
    ]);
}

fn dataset(m: &ArgMatches) -> Result<u8> {
    let plan = dataset_plan(m, *m.get_one::<u64>("seed").expect("required"))?;
    let out = out_dir(m)?;
    let manifest = build_dataset(&plan, &out)?;
    report_manifest(&manifest);
    println!("wrote {}", manifest_path(&out).display());
    Ok(0)
}

/// Defaults, then the config file, then `--seed`, then key flags.
fn resolve_config(m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::with_seed(0);
    let mut seeded = false;
    let mut apply = |cfg: &mut TrainConfig, k: &str, v: &str| -> Result<()> {
        if k == "train.seed" {
            seeded = true;
        }
        cfg.set(k, v)
    };
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pairs = parse_config_text(&text, path)?;
        // the preset replaces the generator section, so it goes first
        for (k, v) in pairs.iter().filter(|(k, _)| k == "generator.preset") {
            apply(&mut cfg, k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "generator.preset") {
            apply(&mut cfg, k, v)?;
        }
    }
    if let Some(seed) = m.get_one::<u64>("seed") {
        apply(&mut cfg, "train.seed", &seed.to_string())?;
    }
    let keys = TrainConfig::keys();
    for k in keys.iter().filter(|k| *k == "generator.preset") {
        if let Some(v) = m.get_one::<String>(k) {
            apply(&mut cfg, k, v)?;
        }
    }
    for k in keys.iter().filter(|k| *k != "generator.preset") {
        if let Some(v) = m.get_one::<String>(k) {
            apply(&mut cfg, k, v)?;
        }
    }
    if !seeded {
        return Err(Error::Config("a seed is required (--seed, --train.seed or the config file)".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(cfg: &TrainConfig) {
    for (k, v) in cfg.to_kv() {
        println!("{k} = {v}");
    }
    println!("feature_bundle_sha256 = {}", FeatureExtractor::shipped().bundle_id());
}

fn train(m: &ArgMatches) -> Result<u8> {
    let data = m.get_one::<PathBuf>("data").expect("required");
    let manifest = Manifest::load(&manifest_path(data))?;
    let mut trainer = match m.get_one::<PathBuf>("resume") {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            println!("resume = {} (sha256 {})", path.display(), ckpt.hash());
            let train = mrxray_core::train::samples(
                &manifest,
                &mrxray_core::projector::dataset::load_pairs(&manifest, data, mrxray_core::projector::dataset::Split::Train)?,
            );
            let test = mrxray_core::train::samples(
                &manifest,
                &mrxray_core::projector::dataset::load_pairs(&manifest, data, mrxray_core::projector::dataset::Split::Test)?,
            );
            Trainer::resume(ckpt, train, test, &manifest.hash())?
        }
        None => {
            let cfg = resolve_config(m)?;
            Trainer::from_manifest(cfg, &manifest, data)?
        }
    };
    print_config(trainer.config());
    report_manifest(&manifest);
    let out = out_dir(m)?;
    let records = trainer.run(Some(&out), &mut |_| {})?;
    if let Some(last) = records.last() {
        println!(
            "epoch {} step {} train_loss {} test_loss {}",
            last.epoch,
            last.step,
            last.train_loss,
            last.test_loss.map_or("NA".to_string(), |v| v.to_string())
        );
    }
    let final_path = out.join("final.ckpt");
    println!("wrote {} (sha256 {})", final_path.display(), file_hash(&final_path)?);
    Ok(0)
}

fn infer(m: &ArgMatches) -> Result<u8> {
    let cpath = m.get_one::<PathBuf>("checkpoint").expect("required");
    let ipath = m.get_one::<PathBuf>("input").expect("required");
    let data = m.get_one::<PathBuf>("data").expect("required");
    let manifest = Manifest::load(&manifest_path(data))?;
    let ckpt = Checkpoint::load(cpath)?;
    announce(&[
        ("checkpoint_sha256", ckpt.hash()),
        ("input_sha256", file_hash(ipath)?),
        ("manifest_sha256", manifest.hash()),
    ]);
    if ckpt.state.manifest_hash != manifest.hash() {
        return Err(Error::Config(format!(
            "checkpoint was trained on dataset {} but {} was given",
            ckpt.state.manifest_hash,
            manifest.hash()
        )));
    }
    let input = Image::load(ipath)?;
    let g = ckpt.generator()?;
    let y = g.infer(&to_network(&input, &manifest.mr_norm))?;
    let out_img = from_network(&y, &manifest.xray_norm)?;
    let out = out_dir(m)?;
    let stem = ipath.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let raw = out.join(format!("{stem}_gen.img"));
    out_img.save(&raw)?;
    let (lo, hi) = (manifest.xray_norm.denormalize(0.0) as f32, manifest.xray_norm.denormalize(1.0) as f32);
    out_img.to_pgm16(lo, hi).save(&out.join(format!("{stem}_gen.pgm")))?;
    println!("wrote {} (sha256 {})", raw.display(), file_hash(&raw)?);
    if m.get_flag("intensity") {
        let path = out.join(format!("{stem}_gen_intensity.img"));
        to_intensity(&out_img).save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn eval(m: &ArgMatches) -> Result<u8> {
    let data = m.get_one::<PathBuf>("data").expect("required");
    let manifest = Manifest::load(&manifest_path(data))?;
    report_manifest(&manifest);
    let mut arms = Vec::new();
    for (i, spec) in m.get_many::<String>("checkpoint").expect("required").enumerate() {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => (format!("arm{i}"), PathBuf::from(spec)),
        };
        let ckpt = Checkpoint::load(&path)?;
        println!("{name} = {} (sha256 {})", path.display(), ckpt.hash());
        arms.push((name, ckpt));
    }
    let tau = *m.get_one::<f64>("tau").expect("default");
    let out = out_dir(m)?;
    let report = evaluate_arms(&arms, &manifest, data, &out, tau)?;
    print!("{}", report.summary());
    println!("wrote {}", out.join("report.tsv").display());
    Ok(0)
}

fn ablate(m: &ArgMatches) -> Result<u8> {
    let cfg = resolve_config(m)?;
    let out = out_dir(m)?;
    let data = match m.get_one::<PathBuf>("data") {
        Some(d) => d.clone(),
        None => {
            let plan = dataset_plan(m, cfg.seed)?;
            let dir = out.join("data");
            build_dataset(&plan, &dir)?;
            dir
        }
    };
    let manifest = Manifest::load(&manifest_path(&data))?;
    print_config(&cfg);
    report_manifest(&manifest);
    let outcome = run_ablation(&manifest, &data, &cfg, &out)?;
    for (name, path) in &outcome.checkpoints {
        println!("{name} = {} (sha256 {})", path.display(), file_hash(path)?);
    }
    print!("{}", outcome.report.summary());
    Ok(0)
}

fn gradcheck(m: &ArgMatches) -> Result<u8> {
    let ops = m.get_one::<String>("ops").expect("default");
    let trials = *m.get_one::<usize>("trials").expect("default");
    let seed = m.get_one::<u64>("seed").copied().unwrap_or(0);
    let names: Vec<String> = if ops == "all" {
        OP_SUITES.iter().map(|s| s.to_string()).chain(["generator".to_string()]).collect()
    } else {
        ops.split(',').map(|s| s.trim().to_string()).collect()
    };
    announce(&[("ops", names.join(",")), ("trials", trials.to_string()), ("seed", seed.to_string())]);
    let cfg = GradCheckConfig::default();
    let mut all_passed = true;
    for name in &names {
        let report = if name == "generator" {
            generator_gradcheck(&preset_proposed(), 16, seed)?
        } else {
            let mut rng = mrxray_core::seeds::rng(seed, &format!("gradcheck/{name}"));
            run_op_suite(name, trials, &cfg, &mut rng)?
        };
        let verdict = if report.passed() { "pass" } else { "FAIL" };
        all_passed &= report.passed();
        println!(
            "{verdict} {name}: max rel error {:.3e} over {} coordinates (tolerance {:.0e})",
            report.outcome.max_rel_error, report.outcome.coords_checked, report.tolerance
        );
    }
    Ok(if all_passed { 0 } else { 3 })
}
