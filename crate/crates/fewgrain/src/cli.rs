//! Command-line pipeline: scan, split, train, eval, sweep, gradcam, and
//! the two figure commands.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! failure. `FEWGRAIN_RUNS` overrides the run-directory root (default
//! `./runs`). Every artifact of one invocation lands in a fresh run
//! directory together with a config snapshot; input datasets are never
//! mutated.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::backbone::{BackboneModel, ClassifierHead};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{validate_config, RunConfig};
use crate::dataset::{
    compute_stats, load_fashion_mnist, load_image, make_split, read_manifest, resize_standardize,
    scan_dataset, standardize_in_memory, write_manifest, ChannelStats, DatasetManifest,
};
use crate::episodes::{base_holdout, evaluate, EmbedPipeline, EvalOptions, Protocol};
use crate::error::{Error, Result};
use crate::focusarea::{export_heatmap, extract_region, grad_cam, CamClass};
use crate::nn::seeded_stream;
use crate::plots::{confusion_plot, scatter_plot};
use crate::train::{train_base, LossKind, TrainOptions};
use crate::types::{LabeledImage, Split};

struct Flag {
    name: &'static str,
    takes_value: bool,
    default: Option<&'static str>,
    help: &'static str,
}

struct Cmd {
    name: &'static str,
    about: &'static str,
    flags: &'static [Flag],
}

const CONFIG_FLAGS: [Flag; 10] = [
    Flag { name: "config", takes_value: true, default: None, help: "config file (key = value lines)" },
    Flag { name: "order", takes_value: true, default: Some("2"), help: "highest interaction order R" },
    Flag { name: "rank", takes_value: true, default: Some("auto"), help: "D^r per order (comma list or auto)" },
    Flag { name: "beta", takes_value: true, default: Some("0.5"), help: "neighbor-penalty weight" },
    Flag { name: "center-lr", takes_value: true, default: Some("0.5"), help: "center update rate in (0,1]" },
    Flag { name: "loss-mix", takes_value: true, default: Some("0.01"), help: "CN weight lambda in joint loss" },
    Flag { name: "threshold", takes_value: true, default: Some("0.5"), help: "heatmap threshold tau in (0,1)" },
    Flag { name: "classifier", takes_value: true, default: Some("cosine"), help: "cosine | nearest-prototype | svm | imprint" },
    Flag { name: "fusion-mode", takes_value: true, default: Some("element-sum"), help: "element-sum | shallow-concat" },
    Flag { name: "seed", takes_value: true, default: Some("0"), help: "master seed" },
];

const SCAN_FLAGS: &[Flag] = &[
    Flag { name: "data", takes_value: true, default: None, help: "dataset root (class-per-directory)" },
    Flag { name: "out", takes_value: true, default: None, help: "manifest output path (default <data>/manifest.txt)" },
];

const SPLIT_FLAGS: &[Flag] = &[
    Flag { name: "data", takes_value: true, default: None, help: "dataset root" },
    Flag { name: "n-base", takes_value: true, default: None, help: "number of base classes" },
    Flag { name: "seed", takes_value: true, default: Some("0"), help: "split seed" },
    Flag { name: "out", takes_value: true, default: None, help: "manifest output path (default <data>/manifest.txt)" },
    Flag { name: "no-stats", takes_value: false, default: None, help: "skip channel statistics" },
];

const TRAIN_FLAGS: &[Flag] = &[
    Flag { name: "data", takes_value: true, default: None, help: "dataset root, or `fashion`" },
    Flag { name: "data-dir", takes_value: true, default: None, help: "fashion IDX directory (default data/fashion-mnist)" },
    Flag { name: "manifest", takes_value: true, default: None, help: "manifest file (default <data>/manifest.txt)" },
    Flag { name: "arch", takes_value: true, default: Some("resnet18-like"), help: "resnet18-like | shallow4 | mnist | mnist2d" },
    Flag { name: "loss", takes_value: true, default: Some("cn"), help: "softmax | center | cn" },
    Flag { name: "epochs", takes_value: true, default: Some("30"), help: "training epochs" },
    Flag { name: "batch-classes", takes_value: true, default: Some("5"), help: "classes per batch (P)" },
    Flag { name: "batch-per-class", takes_value: true, default: Some("8"), help: "images per class per batch (Q)" },
    Flag { name: "lr", takes_value: true, default: Some("0.001"), help: "initial learning rate (halved every 20 epochs)" },
    Flag { name: "aux-of", takes_value: true, default: None, help: "train the shallow aux model on focus crops of this checkpoint" },
    Flag { name: "init-from", takes_value: true, default: None, help: "initialize parameters from this checkpoint" },
    Flag { name: "out", takes_value: true, default: None, help: "run directory (default under FEWGRAIN_RUNS)" },
];

const EVAL_FLAGS: &[Flag] = &[
    Flag { name: "checkpoint", takes_value: true, default: None, help: "trained model checkpoint" },
    Flag { name: "data", takes_value: true, default: None, help: "dataset root" },
    Flag { name: "manifest", takes_value: true, default: None, help: "manifest file (default <data>/manifest.txt)" },
    Flag { name: "protocol", takes_value: true, default: Some("episodic"), help: "episodic | all-novel | base-plus-novel" },
    Flag { name: "ways", takes_value: true, default: Some("5"), help: "classes per episode (C)" },
    Flag { name: "shots", takes_value: true, default: Some("5"), help: "support images per class (K)" },
    Flag { name: "queries", takes_value: true, default: Some("20"), help: "query images per class" },
    Flag { name: "episodes", takes_value: true, default: Some("100"), help: "episode count E" },
    Flag { name: "draws", takes_value: true, default: Some("5"), help: "support draws for all-novel protocols" },
    Flag { name: "focus", takes_value: false, default: None, help: "apply focus-area fusion to embeddings" },
    Flag { name: "aux-checkpoint", takes_value: true, default: None, help: "shallow aux checkpoint for shallow-concat fusion" },
    Flag { name: "out", takes_value: true, default: None, help: "run directory" },
];

const SWEEP_FLAGS: &[Flag] = &[
    Flag { name: "grid", takes_value: true, default: None, help: "sweep grid, e.g. beta=0,0.2,0.4 or order=1,2,3 or classifier=cosine,svm" },
    Flag { name: "data", takes_value: true, default: None, help: "dataset root" },
    Flag { name: "manifest", takes_value: true, default: None, help: "manifest file" },
    Flag { name: "arch", takes_value: true, default: Some("shallow4"), help: "architecture per grid point" },
    Flag { name: "loss", takes_value: true, default: Some("cn"), help: "training loss per grid point" },
    Flag { name: "epochs", takes_value: true, default: Some("30"), help: "training epochs per grid point" },
    Flag { name: "batch-classes", takes_value: true, default: Some("5"), help: "classes per batch" },
    Flag { name: "batch-per-class", takes_value: true, default: Some("8"), help: "images per class per batch" },
    Flag { name: "lr", takes_value: true, default: Some("0.001"), help: "initial learning rate" },
    Flag { name: "ways", takes_value: true, default: Some("5"), help: "eval ways" },
    Flag { name: "shots", takes_value: true, default: Some("5"), help: "eval shots" },
    Flag { name: "queries", takes_value: true, default: Some("20"), help: "eval queries per class" },
    Flag { name: "episodes", takes_value: true, default: Some("100"), help: "eval episodes" },
    Flag { name: "out", takes_value: true, default: None, help: "run directory" },
];

const GRADCAM_FLAGS: &[Flag] = &[
    Flag { name: "checkpoint", takes_value: true, default: None, help: "trained model checkpoint" },
    Flag { name: "image", takes_value: true, default: None, help: "input image file" },
    Flag { name: "class", takes_value: true, default: Some("auto"), help: "base class index, or auto (argmax pseudo-label)" },
    Flag { name: "out", takes_value: true, default: Some("gradcam.png"), help: "overlay PNG path (sidecar .txt alongside)" },
];

const PLOT_EMB_FLAGS: &[Flag] = &[
    Flag { name: "checkpoint", takes_value: true, default: None, help: "checkpoint with a 2-d embedding head" },
    Flag { name: "data", takes_value: true, default: None, help: "dataset root, or `fashion`" },
    Flag { name: "data-dir", takes_value: true, default: None, help: "fashion IDX directory" },
    Flag { name: "limit", takes_value: true, default: Some("2000"), help: "max points to plot" },
    Flag { name: "out", takes_value: true, default: Some("embeddings.png"), help: "scatter PNG path" },
];

const PLOT_CONF_FLAGS: &[Flag] = &[
    Flag { name: "report", takes_value: true, default: None, help: "confusion CSV from `eval`" },
    Flag { name: "out", takes_value: true, default: Some("confusion.png"), help: "heatmap PNG path" },
];

fn commands() -> Vec<Cmd> {
    vec![
        Cmd { name: "scan", about: "scan a class-per-directory dataset into a manifest", flags: SCAN_FLAGS },
        Cmd { name: "split", about: "assign base/novel classes deterministically and record statistics", flags: SPLIT_FLAGS },
        Cmd { name: "train", about: "train the feature extractor on the base classes", flags: TRAIN_FLAGS },
        Cmd { name: "eval", about: "few-shot evaluation over the novel split", flags: EVAL_FLAGS },
        Cmd { name: "sweep", about: "grid experiments producing a CSV of (setting, mean_acc, ci95)", flags: SWEEP_FLAGS },
        Cmd { name: "gradcam", about: "write a heatmap overlay and focus-region sidecar for one image", flags: GRADCAM_FLAGS },
        Cmd { name: "plot-embeddings", about: "scatter plot of 2-d embeddings colored by class", flags: PLOT_EMB_FLAGS },
        Cmd { name: "plot-confusion", about: "render a confusion CSV as an annotated heatmap", flags: PLOT_CONF_FLAGS },
    ]
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(args: impl Iterator<Item = String>) -> i32 {
    let args: Vec<String> = args.collect();
    match dispatch(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    let Some(cmd_name) = args.first() else {
        print_usage();
        return Ok(());
    };
    if cmd_name == "--help" || cmd_name == "-h" || cmd_name == "help" {
        print_usage();
        return Ok(());
    }
    let cmds = commands();
    let cmd = cmds
        .iter()
        .find(|c| c.name == cmd_name)
        .ok_or_else(|| Error::Config(format!("unknown command `{cmd_name}`; see --help")))?;
    let rest = &args[1..];
    if rest.iter().any(|a| a == "--help" || a == "-h") {
        print_cmd_help(cmd);
        return Ok(());
    }
    let uses_config = matches!(cmd.name, "train" | "eval" | "sweep" | "gradcam");
    let flags = parse_flags(rest, cmd.flags, uses_config)?;
    match cmd.name {
        "scan" => cmd_scan(&flags),
        "split" => cmd_split(&flags),
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "sweep" => cmd_sweep(&flags),
        "gradcam" => cmd_gradcam(&flags),
        "plot-embeddings" => cmd_plot_embeddings(&flags),
        "plot-confusion" => cmd_plot_confusion(&flags),
        _ => unreachable!(),
    }
}

fn print_usage() {
    println!("fewgrain - few-shot fine-grained image classification");
    println!("\nUsage: fewgrain <command> [flags]\n\nCommands:");
    for cmd in commands() {
        println!("  {:<17} {}", cmd.name, cmd.about);
    }
    println!("\nRun `fewgrain <command> --help` for the command's flags.");
    println!("Environment: FEWGRAIN_RUNS sets the run-directory root (default ./runs).");
}

fn cmd_help_text(cmd: &Cmd) -> String {
    let mut out = format!("fewgrain {} - {}\n\nFlags:\n", cmd.name, cmd.about);
    let show = |out: &mut String, f: &Flag| {
        let default = f.default.map(|d| format!(" [default: {d}]")).unwrap_or_default();
        out.push_str(&format!("  --{:<17} {}{}\n", f.name, f.help, default));
    };
    for f in cmd.flags {
        show(&mut out, f);
    }
    if matches!(cmd.name, "train" | "eval" | "sweep" | "gradcam") {
        out.push_str("\nRun-config flags (override --config file values):\n");
        for f in &CONFIG_FLAGS {
            show(&mut out, f);
        }
    }
    out
}

fn print_cmd_help(cmd: &Cmd) {
    println!("{}", cmd_help_text(cmd));
}

struct Flags {
    values: BTreeMap<String, String>,
    present: std::collections::BTreeSet<String>,
}

impl Flags {
    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing required flag --{name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.present.contains(name)
    }

    fn parse<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        let v = self.require(name)?;
        v.parse::<T>()
            .map_err(|_| Error::Config(format!("flag --{name}: cannot parse `{v}`")))
    }
}

fn parse_flags(args: &[String], specs: &[Flag], with_config: bool) -> Result<Flags> {
    let mut values = BTreeMap::new();
    let mut present = std::collections::BTreeSet::new();
    let find = |name: &str| -> Option<(bool, bool)> {
        // (found, takes_value)
        specs
            .iter()
            .find(|f| f.name == name)
            .or_else(|| {
                if with_config {
                    CONFIG_FLAGS.iter().find(|f| f.name == name)
                } else {
                    None
                }
            })
            .map(|f| (true, f.takes_value))
    };
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument `{arg}`")))?;
        let (name, inline_value) = match name.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (name, None),
        };
        let (_, takes_value) =
            find(name).ok_or_else(|| Error::Config(format!("unknown flag --{name}")))?;
        if takes_value {
            let value = match inline_value {
                Some(v) => v,
                None => {
                    i += 1;
                    args.get(i)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("flag --{name} needs a value")))?
                }
            };
            values.insert(name.to_string(), value);
        } else {
            if inline_value.is_some() {
                return Err(Error::Config(format!("flag --{name} takes no value")));
            }
            values.insert(name.to_string(), "true".to_string());
        }
        present.insert(name.to_string());
        i += 1;
    }
    for f in specs.iter() {
        if let Some(d) = f.default {
            values.entry(f.name.to_string()).or_insert_with(|| d.to_string());
        }
    }
    if with_config {
        for f in CONFIG_FLAGS.iter() {
            if let Some(d) = f.default {
                values.entry(f.name.to_string()).or_insert_with(|| d.to_string());
            }
        }
    }
    Ok(Flags { values, present })
}

/// Build the validated run config: documented defaults, then the
/// `--config` file, then explicit flag overrides.
fn build_config(flags: &Flags) -> Result<RunConfig> {
    let mut raw: BTreeMap<String, String> = match flags.get("config") {
        Some(path) => crate::config::parse_config_text(&fs::read_to_string(path)?)?,
        None => BTreeMap::new(),
    };
    let overrides = [
        ("order", "order"),
        ("rank", "rank"),
        ("beta", "beta"),
        ("center-lr", "center_lr"),
        ("loss-mix", "loss_mix"),
        ("threshold", "threshold"),
        ("classifier", "classifier"),
        ("fusion-mode", "fusion_mode"),
        ("seed", "seed"),
    ];
    for (flag, key) in overrides {
        if flags.has(flag) {
            raw.insert(key.to_string(), flags.get(flag).unwrap().to_string());
        }
    }
    validate_config(&raw)
}

fn runs_root() -> PathBuf {
    std::env::var("FEWGRAIN_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("runs"))
}

fn make_run_dir(flags: &Flags, kind: &str) -> Result<PathBuf> {
    let dir = match flags.get("out") {
        Some(out) => PathBuf::from(out),
        None => {
            let stamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0);
            runs_root().join(format!("{kind}-{stamp}"))
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn manifest_path(flags: &Flags, data_root: &str) -> PathBuf {
    match flags.get("manifest") {
        Some(m) => PathBuf::from(m),
        None => Path::new(data_root).join("manifest.txt"),
    }
}

fn cmd_scan(flags: &Flags) -> Result<()> {
    let data = flags.require("data")?;
    let (manifest, warnings) = scan_dataset(data)?;
    let out = flags
        .get("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(data).join("manifest.txt"));
    write_manifest(&manifest, &out)?;
    println!(
        "scanned {} classes, {} images, {} warnings -> {}",
        manifest.classes.len(),
        manifest.classes.iter().map(|c| c.paths.len()).sum::<usize>(),
        warnings,
        out.display()
    );
    Ok(())
}

fn cmd_split(flags: &Flags) -> Result<()> {
    let data = flags.require("data")?;
    let n_base: usize = flags.parse("n-base")?;
    let seed: u64 = flags.parse("seed")?;
    let (manifest, _) = scan_dataset(data)?;
    let mut split = make_split(&manifest, n_base, seed)?;
    if !flags.has("no-stats") {
        split.stats = Some(compute_stats(&split)?);
    }
    let out = flags
        .get("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(data).join("manifest.txt"));
    write_manifest(&split, &out)?;
    println!(
        "split {} base / {} novel (seed {seed}) -> {}",
        split.base_classes().len(),
        split.novel_classes().len(),
        out.display()
    );
    Ok(())
}

/// Load and preprocess the base split of a directory dataset for training.
/// Labels are positions in the base-class list; every 5th image per class
/// is held out for validation.
fn load_base_for_training(
    manifest: &DatasetManifest,
    size: usize,
    stats: &ChannelStats,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, Vec<String>)> {
    let base = manifest.base_classes();
    if base.len() < 2 {
        return Err(Error::Data(format!(
            "training needs >= 2 base classes, manifest has {}",
            base.len()
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut names = Vec::new();
    for (label, &ci) in base.iter().enumerate() {
        names.push(manifest.classes[ci].name.clone());
        let n = manifest.classes[ci].paths.len();
        let (train_idx, val_idx) = base_holdout(n);
        for (pool, out) in [(&train_idx, &mut train), (&val_idx, &mut val)] {
            for &item in pool.iter() {
                let mut img = load_image(manifest.image_path(ci, item))?;
                img.label = Some(label);
                img.split = Split::Base;
                out.push(resize_standardize(&img, size, stats)?);
            }
        }
    }
    Ok((train, val, names))
}

fn fashion_dir(flags: &Flags) -> PathBuf {
    flags
        .get("data-dir")
        .map(PathBuf::from)
        .or_else(|| {
            std::env::var("FEWGRAIN_DATA")
                .ok()
                .map(|d| PathBuf::from(d).join("fashion-mnist"))
        })
        .unwrap_or_else(|| PathBuf::from("data/fashion-mnist"))
}

fn cmd_train(flags: &Flags) -> Result<()> {
    if let Some(main_ckpt) = flags.get("aux-of") {
        let main_ckpt = main_ckpt.to_string();
        return cmd_train_aux(flags, &main_ckpt);
    }
    let config = build_config(flags)?;
    let data = flags.require("data")?;
    let arch = flags.require("arch")?;
    let opts = TrainOptions {
        epochs: flags.parse("epochs")?,
        batch_classes: flags.parse("batch-classes")?,
        batch_per_class: flags.parse("batch-per-class")?,
        loss: LossKind::parse(flags.require("loss")?)?,
        base_lr: flags.parse("lr")?,
    };
    let run_dir = make_run_dir(flags, &format!("train-{arch}"))?;

    let (train, val, class_names, stats) = if data == "fashion" {
        let fashion = load_fashion_mnist(fashion_dir(flags))?;
        let stats = standardize_in_memory(&fashion.train.images);
        let prep = |imgs: &[LabeledImage]| -> Result<Vec<LabeledImage>> {
            imgs.iter().map(|i| resize_standardize(i, 28, &stats)).collect()
        };
        (
            prep(&fashion.train.images)?,
            prep(&fashion.test.images)?,
            fashion.train.class_names.clone(),
            stats,
        )
    } else {
        let manifest = read_manifest(manifest_path(flags, data), data)?;
        let stats = match manifest.stats {
            Some(s) => s,
            None => compute_stats(&manifest)?,
        };
        let size = BackboneModel::build(arch, &config)?.input_dims.1;
        let (train, val, names) = load_base_for_training(&manifest, size, &stats)?;
        (train, val, names, stats)
    };

    let mut model = BackboneModel::build(arch, &config)?;
    if let Some(init) = flags.get("init-from") {
        let loaded = load_checkpoint(init)?;
        if loaded.meta.architecture_tag != arch {
            return Err(Error::Config(format!(
                "--init-from checkpoint is `{}`, expected `{arch}`",
                loaded.meta.architecture_tag
            )));
        }
        model = loaded.model;
    }
    let mut rng = seeded_stream(config.seed, "head");
    let mut head = ClassifierHead::init(class_names.len(), model.embedding_dim(), &mut rng);

    let (log, centers) = train_base(&mut model, &mut head, &train, &val, &config, &opts)?;

    fs::write(run_dir.join("config.txt"), config.serialize())?;
    fs::write(run_dir.join("train_log.csv"), log.to_csv())?;
    let meta = CheckpointMeta {
        architecture_tag: arch.to_string(),
        config: config.clone(),
        stats,
        class_names,
    };
    let ckpt = run_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &model, &head, Some(&centers), &meta)?;
    let final_acc = log.epochs.last().map(|e| e.acc_base_val).unwrap_or(0.0);
    println!(
        "trained {arch} ({} epochs, loss {:?}): acc_base_val {final_acc:.4}",
        opts.epochs, opts.loss
    );
    println!("checkpoint: {}", ckpt.display());
    println!("log: {}", run_dir.join("train_log.csv").display());
    Ok(())
}

/// Train the shallow auxiliary model on focus-area crops extracted with a
/// trained main checkpoint (the shallow-concat pipeline).
fn cmd_train_aux(flags: &Flags, main_ckpt: &str) -> Result<()> {
    let data = flags.require("data")?;
    let main = load_checkpoint(main_ckpt)?;
    let config = main.meta.config.clone();
    let manifest = read_manifest(manifest_path(flags, data), data)?;
    let stats = main.meta.stats;
    let size = main.model.input_dims.1;

    let mut crop_config = config.clone();
    crop_config.fusion_mode = crate::config::FusionMode::ShallowConcat;

    let base = manifest.base_classes();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, &ci) in base.iter().enumerate() {
        let n = manifest.classes[ci].paths.len();
        let (train_idx, val_idx) = base_holdout(n);
        for (pool, out) in [(&train_idx, &mut train), (&val_idx, &mut val)] {
            for &item in pool.iter() {
                let mut img = load_image(manifest.image_path(ci, item))?;
                img.label = Some(label);
                let img = resize_standardize(&img, size, &stats)?;
                let hm = grad_cam(&main.model, &main.head, &img, CamClass::Index(label))?;
                let region = extract_region(&hm, &img, config.threshold, &crop_config)?;
                let mut crop = region.crop;
                crop.label = Some(label);
                out.push(crop);
            }
        }
    }

    let opts = TrainOptions {
        epochs: flags.parse("epochs")?,
        batch_classes: flags.parse("batch-classes")?,
        batch_per_class: flags.parse("batch-per-class")?,
        loss: LossKind::parse(flags.require("loss")?)?,
        base_lr: flags.parse("lr")?,
    };
    let run_dir = make_run_dir(flags, "train-aux-shallow4")?;
    let mut aux_config = config.clone();
    // The aux path stays first-order.
    aux_config.order = 1;
    aux_config.rank = None;
    let mut model = BackboneModel::build("shallow4", &aux_config)?;
    let mut rng = seeded_stream(aux_config.seed, "aux-head");
    let mut head = ClassifierHead::init(base.len(), model.embedding_dim(), &mut rng);
    let (log, centers) = train_base(&mut model, &mut head, &train, &val, &aux_config, &opts)?;

    fs::write(run_dir.join("config.txt"), aux_config.serialize())?;
    fs::write(run_dir.join("train_log.csv"), log.to_csv())?;
    let meta = CheckpointMeta {
        architecture_tag: "shallow4".into(),
        config: aux_config,
        stats,
        class_names: main.meta.class_names.clone(),
    };
    let ckpt = run_dir.join("aux.ckpt");
    save_checkpoint(&ckpt, &model, &head, Some(&centers), &meta)?;
    println!("trained aux shallow4 on focus crops; checkpoint: {}", ckpt.display());
    Ok(())
}

fn parse_protocol(s: &str) -> Result<Protocol> {
    match s {
        "episodic" => Ok(Protocol::Episodic),
        "all-novel" => Ok(Protocol::AllNovel),
        "base-plus-novel" => Ok(Protocol::BasePlusNovel),
        other => Err(Error::Config(format!(
            "unknown protocol `{other}`; expected episodic | all-novel | base-plus-novel"
        ))),
    }
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    let ckpt = load_checkpoint(flags.require("checkpoint")?)?;
    let data = flags.require("data")?;
    let manifest = read_manifest(manifest_path(flags, data), data)?;
    // Training-time structure comes from the checkpoint; evaluation knobs
    // (classifier, threshold, fusion, seed) may be overridden here.
    let mut config = ckpt.meta.config.clone();
    let cli_cfg = build_config(flags)?;
    config.classifier = cli_cfg.classifier;
    config.threshold = cli_cfg.threshold;
    config.fusion_mode = cli_cfg.fusion_mode;
    config.seed = cli_cfg.seed;

    let aux = match flags.get("aux-checkpoint") {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let opts = EvalOptions {
        protocol: parse_protocol(flags.require("protocol")?)?,
        ways: flags.parse("ways")?,
        shots: flags.parse("shots")?,
        q_per_class: flags.parse("queries")?,
        episodes: flags.parse("episodes")?,
        support_draws: flags.parse("draws")?,
    };
    let run_dir = make_run_dir(flags, &format!("eval-{}", opts.protocol))?;
    let pipeline = EmbedPipeline::new(
        &ckpt.model,
        &ckpt.head,
        aux.as_ref().map(|a| &a.model),
        &config,
        ckpt.meta.stats,
        flags.has("focus"),
    );
    let report = evaluate(&pipeline, &manifest, &opts)?;
    fs::write(run_dir.join("config.txt"), config.serialize())?;
    fs::write(run_dir.join("report.txt"), report.to_text())?;
    fs::write(run_dir.join("episodes.csv"), report.to_episode_csv())?;
    fs::write(run_dir.join("confusion.csv"), report.to_confusion_csv())?;
    println!(
        "{} {}-way {}-shot: acc {:.4} +- {:.4} ({} episodes)",
        opts.protocol, report.ways, report.shots, report.mean_acc, report.ci95, report.episodes
    );
    println!("report: {}", run_dir.join("report.txt").display());
    Ok(())
}

fn cmd_sweep(flags: &Flags) -> Result<()> {
    let grid = flags.require("grid")?;
    let (key, values) = grid
        .split_once('=')
        .ok_or_else(|| Error::Config("grid must look like key=v1,v2,...".into()))?;
    let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    if !["beta", "order", "classifier"].contains(&key) {
        return Err(Error::Config(format!(
            "sweep key `{key}` not supported; use beta | order | classifier"
        )));
    }
    let data = flags.require("data")?;
    let arch = flags.require("arch")?;
    let manifest = read_manifest(manifest_path(flags, data), data)?;
    let stats = match manifest.stats {
        Some(s) => s,
        None => compute_stats(&manifest)?,
    };
    let base_config = build_config(flags)?;
    let run_dir = make_run_dir(flags, &format!("sweep-{key}"))?;
    let opts = TrainOptions {
        epochs: flags.parse("epochs")?,
        batch_classes: flags.parse("batch-classes")?,
        batch_per_class: flags.parse("batch-per-class")?,
        loss: LossKind::parse(flags.require("loss")?)?,
        base_lr: flags.parse("lr")?,
    };
    let eval_opts = EvalOptions {
        protocol: Protocol::Episodic,
        ways: flags.parse("ways")?,
        shots: flags.parse("shots")?,
        q_per_class: flags.parse("queries")?,
        episodes: flags.parse("episodes")?,
        support_draws: 1,
    };

    let mut rows = vec![format!("{key},mean_acc,ci95")];
    let train_once = key == "classifier";
    let mut trained: Option<(BackboneModel, ClassifierHead)> = None;
    for value in &values {
        let mut config = base_config.clone();
        match key {
            "beta" => {
                config.beta = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad beta `{value}`")))?;
                if config.beta < 0.0 {
                    return Err(Error::Config("field `beta` out of range; allowed: real >= 0".into()));
                }
            }
            "order" => {
                config.order = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad order `{value}`")))?;
                if config.order < 1 {
                    return Err(Error::Config("field `order` out of range; allowed: integer >= 1".into()));
                }
            }
            "classifier" => {
                let mut raw = BTreeMap::new();
                raw.insert("classifier".to_string(), value.to_string());
                config.classifier = validate_config(&raw)?.classifier;
            }
            _ => unreachable!(),
        }
        if !train_once || trained.is_none() {
            let size = BackboneModel::build(arch, &config)?.input_dims.1;
            let (train, val, names) = load_base_for_training(&manifest, size, &stats)?;
            let mut model = BackboneModel::build(arch, &config)?;
            let mut rng = seeded_stream(config.seed, "head");
            let mut head = ClassifierHead::init(names.len(), model.embedding_dim(), &mut rng);
            train_base(&mut model, &mut head, &train, &val, &config, &opts)?;
            trained = Some((model, head));
        }
        let (model, head) = trained.as_ref().unwrap();
        let pipeline = EmbedPipeline::new(model, head, None, &config, stats, false);
        let report = evaluate(&pipeline, &manifest, &eval_opts)?;
        rows.push(format!("{value},{:.6},{:.6}", report.mean_acc, report.ci95));
        println!("{key}={value}: acc {:.4} +- {:.4}", report.mean_acc, report.ci95);
        if !train_once {
            trained = None;
        }
    }
    let table = run_dir.join("sweep.csv");
    fs::write(&table, rows.join("\n") + "\n")?;
    println!("table: {}", table.display());
    Ok(())
}

fn cmd_gradcam(flags: &Flags) -> Result<()> {
    let ckpt = load_checkpoint(flags.require("checkpoint")?)?;
    let image_path = flags.require("image")?;
    let config = {
        let mut c = ckpt.meta.config.clone();
        let cli = build_config(flags)?;
        c.threshold = cli.threshold;
        c
    };
    let class = match flags.require("class")? {
        "auto" => CamClass::Auto,
        v => CamClass::Index(v.parse().map_err(|_| {
            Error::Config(format!("--class must be `auto` or a base-class index, got `{v}`"))
        })?),
    };
    let raw = load_image(image_path)?;
    let img = resize_standardize(&raw, ckpt.model.input_dims.1, &ckpt.meta.stats)?;
    let hm = grad_cam(&ckpt.model, &ckpt.head, &img, class)?;
    let region = extract_region(&hm, &img, config.threshold, &config)?;
    let out = PathBuf::from(flags.require("out")?);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    export_heatmap(&img, &hm, &region, config.threshold, &out)?;
    println!(
        "class {} bbox {:?} degenerate {} -> {}",
        hm.class_used,
        region.bbox,
        region.degenerate,
        out.display()
    );
    Ok(())
}

fn cmd_plot_embeddings(flags: &Flags) -> Result<()> {
    let ckpt = load_checkpoint(flags.require("checkpoint")?)?;
    if ckpt.model.embedding_dim() != 2 {
        return Err(Error::Config(format!(
            "embedding dimension is {}, scatter needs 2; train with --arch mnist2d",
            ckpt.model.embedding_dim()
        )));
    }
    let data = flags.require("data")?;
    let limit: usize = flags.parse("limit")?;
    let size = ckpt.model.input_dims.1;
    let images: Vec<LabeledImage> = if data == "fashion" {
        let fashion = load_fashion_mnist(fashion_dir(flags))?;
        fashion
            .test
            .images
            .iter()
            .take(limit)
            .map(|i| resize_standardize(i, size, &ckpt.meta.stats))
            .collect::<Result<Vec<_>>>()?
    } else {
        let manifest = read_manifest(manifest_path(flags, data), data)?;
        let mut out = Vec::new();
        'outer: for (label, &ci) in manifest.base_classes().iter().enumerate() {
            for item in 0..manifest.classes[ci].paths.len() {
                if out.len() >= limit {
                    break 'outer;
                }
                let mut img = load_image(manifest.image_path(ci, item))?;
                img.label = Some(label);
                out.push(resize_standardize(&img, size, &ckpt.meta.stats)?);
            }
        }
        out
    };
    let mut points = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        let x = crate::backbone::images_to_batch(chunk, ckpt.model.input_dims)?;
        let (_, z) = ckpt.model.forward_arrays(&x)?;
        for (i, img) in chunk.iter().enumerate() {
            points.push((z[(i, 0)], z[(i, 1)], img.label.unwrap_or(0)));
        }
    }
    let out = PathBuf::from(flags.require("out")?);
    scatter_plot(&points, &out)?;
    println!("plotted {} embeddings -> {}", points.len(), out.display());
    Ok(())
}

fn cmd_plot_confusion(flags: &Flags) -> Result<()> {
    let report = flags.require("report")?;
    let text = fs::read_to_string(report)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty confusion CSV".into()))?;
    let ids: Vec<usize> = header
        .split(',')
        .skip(1)
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("bad class id `{v}` in header")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = ids.len();
    let mut confusion = Array2::<u64>::zeros((n, n));
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n + 1 {
            return Err(Error::Data(format!(
                "confusion row {i} has {} cells, expected {}",
                cells.len(),
                n + 1
            )));
        }
        for (j, cell) in cells[1..].iter().enumerate() {
            confusion[(i, j)] = cell
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Data(format!("bad count `{cell}`")))?;
        }
    }
    let out = PathBuf::from(flags.require("out")?);
    confusion_plot(&confusion, &ids, &out)?;
    println!("confusion heatmap -> {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(args.iter().map(|s| s.to_string()))
    }

    #[test]
    fn unknown_command_exits_2() {
        assert_eq!(run_args(&["warp"]), 2);
    }

    #[test]
    fn unknown_flag_exits_2() {
        assert_eq!(run_args(&["scan", "--bogus", "x"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run_args(&["--help"]), 0);
        assert_eq!(run_args(&["train", "--help"]), 0);
        assert_eq!(run_args(&[]), 0);
    }

    #[test]
    fn train_negative_beta_exits_2() {
        let code = run_args(&[
            "train", "--data", "nowhere", "--arch", "mnist", "--beta", "-1",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_data_dir_exits_3() {
        let code = run_args(&["scan", "--data", "/definitely/not/a/dir"]);
        assert_eq!(code, 3);
    }

    #[test]
    fn config_defaults_flow_through_flags() {
        let flags = parse_flags(&[], TRAIN_FLAGS, true).unwrap();
        let cfg = build_config(&flags).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn flag_overrides_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        fs::write(&path, "beta = 0.9\nseed = 5\n").unwrap();
        let args: Vec<String> = vec![
            "--config".into(),
            path.to_string_lossy().into_owned(),
            "--beta".into(),
            "0.25".into(),
        ];
        let flags = parse_flags(&args, TRAIN_FLAGS, true).unwrap();
        let cfg = build_config(&flags).unwrap();
        assert_eq!(cfg.beta, 0.25);
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn sweep_empty_grid_exits_2() {
        assert_eq!(run_args(&["sweep", "--grid", "beta=", "--data", "x"]), 2);
    }

    #[test]
    fn help_lists_every_flag_with_runconfig_defaults() {
        let cmds = commands();
        let train = cmds.iter().find(|c| c.name == "train").unwrap();
        let text = cmd_help_text(train);
        let defaults = RunConfig::default();
        for (flag, want) in [
            ("--order", defaults.order.to_string()),
            ("--rank", "auto".to_string()),
            ("--beta", defaults.beta.to_string()),
            ("--center-lr", defaults.center_lr.to_string()),
            ("--loss-mix", defaults.loss_mix.to_string()),
            ("--threshold", defaults.threshold.to_string()),
            ("--classifier", defaults.classifier.to_string()),
            ("--fusion-mode", defaults.fusion_mode.to_string()),
            ("--seed", defaults.seed.to_string()),
        ] {
            assert!(text.contains(flag), "help missing {flag}");
            assert!(
                text.contains(&format!("[default: {want}]")),
                "help missing default {want} for {flag}"
            );
        }
        for f in train.flags {
            assert!(text.contains(&format!("--{}", f.name)), "missing --{}", f.name);
        }
    }
}
