//! `scar`: synthesize data, train, evaluate, run the ablation, visualize
//! attention and export ground truth, all from one key-value config file
//! plus `--key value` overrides.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scar_core::data::{render_manifest, ManifestEntry, Split};
use scar_core::evaluation::export_attention_maps;
use scar_core::model::read_checkpoint_meta;
use scar_core::training::{run_ablation_with, train_with, Precision, TrainConfig, CONFIG_KEYS};
use scar_core::{evaluate, generate_density_map, load_annotations, load_checkpoint, synth_scene, Scalar};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NAN: u8 = 3;

const TRAIN_KEYS: &[&str] = &[
    "lr_initial",
    "lr_decay",
    "batch_size",
    "epochs",
    "input_size",
    "sigma",
    "seed",
    "variant",
    "fusion",
    "loss_reduction",
    "gt_scale",
    "checkpoint_every",
    "output_dir",
    "width_divisor",
    "conv3_channels",
    "sam_reduction",
    "init",
    "init_std",
    "precision",
    "pretrained",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "data_root",
    "manifest",
];
const SYNTH_KEYS: &[&str] = &[
    "seed",
    "input_size",
    "data_root",
    "manifest",
    "synth_scenes",
    "synth_min_heads",
    "synth_max_heads",
    "synth_gradient",
];
const EVAL_KEYS: &[&str] = &["sigma", "data_root", "manifest", "output_dir"];
const VISUALIZE_KEYS: &[&str] = &["output_dir"];
const GT_KEYS: &[&str] = &["sigma", "data_root", "manifest", "output_dir"];

fn doc(key: &str) -> &'static str {
    CONFIG_KEYS
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, d)| *d)
        .expect("honored keys are config keys")
}

fn verb(name: &'static str, about: &'static str, keys: &'static [&'static str]) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value config file; flags override it"),
    );
    for key in keys {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help(doc(key))
                .help_heading("Config keys"),
        );
    }
    cmd
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("DIR")
        .required(true)
        .help("checkpoint directory")
}

fn cli() -> Command {
    Command::new("scar")
        .about("Crowd density regression with spatial and channel attention")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(verb("synth", "Write synthetic scenes and an 80/20 manifest", SYNTH_KEYS))
        .subcommand(verb("train", "Train one variant on the manifest's train split", TRAIN_KEYS))
        .subcommand(
            verb("eval", "Evaluate a checkpoint on a manifest split", EVAL_KEYS)
                .arg(checkpoint_arg())
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["train", "test", "all"])
                        .default_value("test")
                        .help("which manifest split to evaluate"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("FILE")
                        .help("report path (default <output_dir>/metrics.txt)"),
                ),
        )
        .subcommand(verb("ablate", "Train and evaluate FCN, FCN+SAM, FCN+CAM and SCAR", TRAIN_KEYS))
        .subcommand(
            verb("visualize", "Export attention feature maps and the predicted density", VISUALIZE_KEYS)
                .arg(checkpoint_arg())
                .arg(
                    Arg::new("image")
                        .long("image")
                        .value_name("FILE")
                        .required(true)
                        .help("input image"),
                )
                .arg(
                    Arg::new("channels")
                        .long("channels")
                        .value_name("LIST")
                        .default_value("0")
                        .help("comma-separated feature channel indices"),
                ),
        )
        .subcommand(verb("gt", "Write ground-truth density maps for every manifest scene", GT_KEYS).arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .help("output directory (default <output_dir>/gt)"),
        ))
        .arg(Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue).global(true).help("suppress per-epoch progress"))
}

/// Config file (if any), then flag overrides in key order.
fn load_config(m: &ArgMatches, keys: &[&str]) -> Result<TrainConfig> {
    let mut config = match m.get_one::<String>("config") {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for key in keys {
        if let Some(value) = m.get_one::<String>(key) {
            config.set(key, value)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn output_dir(config: &TrainConfig) -> PathBuf {
    config.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(config: &TrainConfig) -> Result<()> {
    let root = &config.data_root;
    let images = root.join("images");
    fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.synth_scenes;
    let n_train = n * 4 / 5;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let heads = rng.random_range(config.synth_min_heads..=config.synth_max_heads);
        let scene_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let scene = synth_scene(heads, config.input_size, scene_seed, config.synth_gradient);
        let rel = PathBuf::from("images").join(format!("{}.png", scene.scene_id()));
        let path = root.join(&rel);
        scene
            .image()
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        entries.push(ManifestEntry {
            split: if i < n_train { Split::Train } else { Split::Test },
            image_path: rel,
            points: scene.head_points().to_vec(),
        });
    }
    write(&config.manifest, &render_manifest(&entries))?;
    println!(
        "wrote {n} scenes ({n_train} train, {} test) under {}; manifest {}",
        n - n_train,
        root.display(),
        config.manifest.display()
    );
    Ok(())
}

fn cmd_train<T: Scalar>(config: &TrainConfig, quiet: bool) -> Result<()> {
    let split = load_annotations(&config.data_root, &config.manifest)?;
    let mut config = config.clone();
    config.output_dir = Some(output_dir(&config));
    let (_, log) = train_with::<T>(&config, &split, |r| {
        if !quiet {
            println!("{r}");
        }
    })?;
    if let Some(path) = &log.final_checkpoint {
        println!("final checkpoint {}", path.display());
    }
    Ok(())
}

fn cmd_eval<T: Scalar>(config: &TrainConfig, checkpoint: &Path, split_name: &str, out: Option<&Path>) -> Result<()> {
    let model = load_checkpoint::<T>(checkpoint)?;
    let split = load_annotations(&config.data_root, &config.manifest)?;
    let scenes = match split_name {
        "train" => split.train,
        "test" => split.test,
        _ => split.train.into_iter().chain(split.test).collect(),
    };
    if scenes.is_empty() {
        bail!(scar_core::Error::InvalidArgument(format!("manifest has no {split_name} scenes")));
    }
    let report = evaluate(&model, &scenes, config.sigma)?;
    let path = out.map_or_else(|| output_dir(config).join("metrics.txt"), Path::to_path_buf);
    let text = report.render();
    write(&path, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate<T: Scalar>(config: &TrainConfig, quiet: bool) -> Result<()> {
    let split = load_annotations(&config.data_root, &config.manifest)?;
    let mut config = config.clone();
    let dir = output_dir(&config);
    config.output_dir = Some(dir.clone());
    let table = run_ablation_with::<T>(&config, &split, |v, r| {
        if !quiet {
            println!("{v}\t{r}");
        }
    })?;
    write(&dir.join("ablation.md"), &table.render())?;
    write(&dir.join("ablation_losses.txt"), &table.render_losses())?;
    print!("{}", table.render());
    Ok(())
}

fn cmd_visualize<T: Scalar>(config: &TrainConfig, checkpoint: &Path, image: &Path, channels: &[usize]) -> Result<()> {
    let model = load_checkpoint::<T>(checkpoint)?;
    let img = image::open(image)
        .map_err(|e| scar_core::Error::ImageLoad {
            scene_id: image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            path: image.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let id = image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    let dir = output_dir(config).join("attention");
    for path in export_attention_maps(&model, &img, &id, &dir, channels)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_gt(config: &TrainConfig, out: Option<&Path>) -> Result<()> {
    let split = load_annotations(&config.data_root, &config.manifest)?;
    let dir = out.map_or_else(|| output_dir(config).join("gt"), Path::to_path_buf);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for scene in split.train.iter().chain(&split.test) {
        let map = generate_density_map(scene.head_points(), scene.shape(), config.sigma)?;
        let path = dir.join(format!("{}.dmap", scene.scene_id()));
        map.write(&path)?;
        if writeln!(std::io::stdout(), "{}\t{}\t{:.6}", path.display(), scene.count(), map.sum()).is_err() {
            // closed pipe: keep writing files, stop reporting
            continue;
        }
    }
    Ok(())
}

fn parse_channels(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| scar_core::Error::InvalidArgument(format!("bad channel index {s:?}")).into())
        })
        .collect()
}

fn checkpoint_precision(dir: &Path) -> Result<Precision> {
    Ok(match read_checkpoint_meta(dir)?.precision.as_str() {
        "f64" => Precision::F64,
        _ => Precision::F32,
    })
}

macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(matches: &ArgMatches) -> Result<()> {
    let quiet = matches.get_flag("quiet");
    match matches.subcommand() {
        Some(("synth", m)) => cmd_synth(&load_config(m, SYNTH_KEYS)?),
        Some(("train", m)) => {
            let config = load_config(m, TRAIN_KEYS)?;
            dispatch!(config.precision, cmd_train(&config, quiet))
        }
        Some(("eval", m)) => {
            let config = load_config(m, EVAL_KEYS)?;
            let checkpoint = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
            let split = m.get_one::<String>("split").expect("defaulted");
            let out = m.get_one::<String>("out").map(PathBuf::from);
            dispatch!(
                checkpoint_precision(&checkpoint)?,
                cmd_eval(&config, &checkpoint, split, out.as_deref())
            )
        }
        Some(("ablate", m)) => {
            let config = load_config(m, TRAIN_KEYS)?;
            dispatch!(config.precision, cmd_ablate(&config, quiet))
        }
        Some(("visualize", m)) => {
            let config = load_config(m, VISUALIZE_KEYS)?;
            let checkpoint = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
            let image = PathBuf::from(m.get_one::<String>("image").expect("required"));
            let channels = parse_channels(m.get_one::<String>("channels").expect("defaulted"))?;
            dispatch!(
                checkpoint_precision(&checkpoint)?,
                cmd_visualize(&config, &checkpoint, &image, &channels)
            )
        }
        Some(("gt", m)) => {
            let config = load_config(m, GT_KEYS)?;
            cmd_gt(&config, m.get_one::<String>("out").map(Path::new))
        }
        _ => unreachable!("subcommand is required"),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use scar_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::NonFiniteLoss { .. }) => EXIT_NAN,
        Some(E::Config(_) | E::InvalidArgument(_) | E::NotDivisible { .. }) => EXIT_USAGE,
        Some(_) => EXIT_DATA,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
