use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use splatmae::config::{Protocol, RunConfig};
use splatmae::dataset::{
    load_dataset, synth_generate, DatasetManifest, LoadOptions, Primitive, Split, SyntheticSpec, MANIFEST_FILE,
};
use splatmae::distmetrics::{chamfer, jsd, mmd};
use splatmae::finetune::{
    candidate_checkpoints, finetune_classify, finetune_segment, load_backbone, part_counts, prepare_task,
    TaskItem,
};
use splatmae::numerics::Checkpoint;
use splatmae::ply::load_ply_unchecked;
use splatmae::splat::parse_param_set;
use splatmae::train::{prepare_groups, pretrain, Pretrainer, RunPaths};
use splatmae::{Error, ParamKind, Result, SplatSet};

/// Masked-autoencoder pretraining and evaluation on Gaussian splat sets.
#[derive(Parser, Debug)]
#[command(name = "splatmae", version)]
struct Cli {
    /// Directory that relative output paths are resolved against.
    #[arg(long, env = "SPLATMAE_OUTPUT_ROOT", default_value = ".", global = true)]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic primitive dataset.
    Synth(SynthArgs),
    /// Pretrain the masked autoencoder.
    Pretrain(PretrainArgs),
    /// Train a classification or segmentation head on a pretrained backbone.
    Finetune(FinetuneArgs),
    /// Compare the centroid distributions of two PLY files.
    Metrics(MetricsArgs),
    /// Summarize a PLY file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (relative to the output root).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    per_class: usize,
    #[arg(long, default_value_t = 1024)]
    splats: usize,
    /// Comma separated primitive names (sphere, box, cylinder, torus, cone).
    #[arg(long)]
    classes: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable the planar/curved opacity and scale patterns.
    #[arg(long)]
    no_part_patterns: bool,
}

/// Settings shared by the training commands; every flag overrides the
/// config file or preset.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (desk | paper) used when no config file is given;
    /// desk by default.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_mask: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Grouping feature set G, e.g. `C,O`.
    #[arg(long)]
    grouping: Option<String>,
    /// Embedding feature set E, e.g. `C,O,S,R`.
    #[arg(long)]
    embedding: Option<String>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    splats: Option<usize>,
    #[arg(long)]
    num_groups: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    encoder_depth: Option<usize>,
    #[arg(long)]
    decoder_depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    drop_path: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Dataset directory (holding the manifest) or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Run directory (relative to the output root). Defaults to the
    /// directory of `--resume`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint; its config is authoritative apart from
    /// `--epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Cls,
    Seg,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// A checkpoint file, or a pretraining run directory whose last three
    /// numbered checkpoints are all tried (the best test score is kept).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory (relative to the output root).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "cls")]
    task: Task,
    /// full | linear | mlp3
    #[arg(long)]
    protocol: Option<String>,
    /// Restrict segmentation to these class names (comma separated).
    #[arg(long)]
    classes: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Jsd,
    Mmd,
    Chamfer,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    file: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::Synth(a) => cmd_synth(&root, a),
        Command::Pretrain(a) => cmd_pretrain(&root, a),
        Command::Finetune(a) => cmd_finetune(&root, a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn cmd_synth(root: &Path, a: SynthArgs) -> Result<()> {
    let classes = match &a.classes {
        Some(list) => list
            .split(',')
            .map(|s| Primitive::from_str(s.trim()))
            .collect::<Result<Vec<_>>>()?,
        None => Primitive::ALL.to_vec(),
    };
    let spec = SyntheticSpec {
        classes,
        per_class: a.per_class,
        splats: a.splats,
        part_patterns: !a.no_part_patterns,
        seed: a.seed,
        ..Default::default()
    };
    let out = root.join(&a.out);
    let manifest = synth_generate(&spec, &out)?;
    println!("wrote {} objects to {}", manifest.records.len(), out.display());
    Ok(())
}

fn base_config(c: &ConfigArgs) -> Result<RunConfig> {
    match &c.config {
        Some(path) => RunConfig::load(path),
        None => RunConfig::preset(c.preset.as_deref().unwrap_or("desk")),
    }
}

fn apply_training_flags(cfg: &mut RunConfig, c: &ConfigArgs, finetune: bool) {
    if finetune {
        let f = &mut cfg.finetune;
        set(&mut f.epochs, c.epochs);
        set(&mut f.lr, c.lr);
        set(&mut f.batch_size, c.batch_size);
        set(&mut f.warmup_epochs, c.warmup_epochs);
    } else {
        let p = &mut cfg.pretrain;
        set(&mut p.epochs, c.epochs);
        set(&mut p.lr, c.lr);
        set(&mut p.batch_size, c.batch_size);
        set(&mut p.warmup_epochs, c.warmup_epochs);
    }
    set(&mut cfg.seeds.data, c.seed_data);
    set(&mut cfg.seeds.mask, c.seed_mask);
    set(&mut cfg.seeds.init, c.seed_init);
}

fn apply_model_flags(cfg: &mut RunConfig, m: &ModelArgs) -> Result<()> {
    if let Some(g) = &m.grouping {
        cfg.features.grouping = parse_param_set(g)?;
    }
    if let Some(e) = &m.embedding {
        cfg.features.embedding = parse_param_set(e)?;
    }
    set(&mut cfg.pretrain.mask_ratio, m.mask_ratio);
    set(&mut cfg.pretrain.checkpoint_every, m.checkpoint_every);
    let g = &mut cfg.grouping;
    set(&mut g.splats, m.splats);
    set(&mut g.num_groups, m.num_groups);
    set(&mut g.group_size, m.group_size);
    set(&mut g.pool_size, m.pool_size);
    let md = &mut cfg.model;
    set(&mut md.hidden_dim, m.hidden_dim);
    set(&mut md.slots, m.slots);
    set(&mut md.token_dim, m.token_dim);
    set(&mut md.encoder_depth, m.encoder_depth);
    set(&mut md.decoder_depth, m.decoder_depth);
    set(&mut md.heads, m.heads);
    set(&mut md.drop_path, m.drop_path);
    cfg.canonicalize();
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn read_manifest(data: &Path) -> Result<DatasetManifest> {
    if data.is_dir() {
        DatasetManifest::read(data.join(MANIFEST_FILE))
    } else {
        DatasetManifest::read(data)
    }
}

fn load_split(manifest: &DatasetManifest, cfg: &RunConfig, split: Split, labels: bool) -> Result<Vec<splatmae::dataset::Sample>> {
    load_dataset(
        manifest,
        &LoadOptions {
            target: Some(cfg.grouping.splats),
            method: cfg.grouping.downsample,
            seed: cfg.seeds.data,
            split: Some(split),
            with_labels: labels,
        },
    )
}

fn cmd_pretrain(root: &Path, a: PretrainArgs) -> Result<()> {
    let (mut trainer, dir) = match &a.resume {
        Some(ck_path) => {
            let ck = Checkpoint::read(ck_path)?;
            let t = Pretrainer::from_checkpoint(&ck, a.config.epochs)?;
            let dir = match &a.out {
                Some(out) => root.join(out),
                None => ck_path.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            (t, dir)
        }
        None => {
            let mut cfg = base_config(&a.config)?;
            apply_training_flags(&mut cfg, &a.config, false);
            apply_model_flags(&mut cfg, &a.model)?;
            cfg.validate()?;
            let out = a
                .out
                .as_ref()
                .ok_or_else(|| Error::Config("--out is required unless resuming".into()))?;
            (Pretrainer::new(cfg)?, root.join(out))
        }
    };
    let manifest = read_manifest(&a.data)?;
    let samples = load_split(&manifest, &trainer.config, Split::Train, false)?;
    let groups = prepare_groups(&samples, &trainer.config)?;
    let paths = RunPaths::new(&dir);
    pretrain(&mut trainer, &groups, &paths, |r, _| {
        let terms: Vec<String> = r.terms.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        println!("epoch {} total {:.6} {} lr {:.3e}", r.epoch, r.total, terms.join(" "), r.lr);
        true
    })?;
    println!("run directory {}", dir.display());
    Ok(())
}

fn class_filter(manifest: &DatasetManifest, names: &Option<String>) -> Result<Option<Vec<usize>>> {
    let Some(list) = names else { return Ok(None) };
    let known = manifest.class_names();
    list.split(',')
        .map(|n| {
            known
                .iter()
                .position(|k| k == n.trim())
                .ok_or_else(|| Error::Config(format!("dataset has no class '{}'", n.trim())))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Keeps the listed classes and renumbers them densely.
fn restrict(items: Vec<TaskItem>, keep: &[usize]) -> Vec<TaskItem> {
    items
        .into_iter()
        .filter_map(|mut it| {
            let new = keep.iter().position(|&c| c == it.class_id)?;
            it.class_id = new;
            Some(it)
        })
        .collect()
}

struct Outcome {
    score: f64,
    csv: String,
    summary: String,
}

fn cmd_finetune(root: &Path, a: FinetuneArgs) -> Result<()> {
    let candidates = if a.checkpoint.is_dir() {
        let found = candidate_checkpoints(&a.checkpoint)?;
        if found.is_empty() {
            return Err(Error::Config(format!(
                "no numbered checkpoints in {}",
                a.checkpoint.display()
            )));
        }
        found
    } else {
        vec![a.checkpoint.clone()]
    };
    let manifest = read_manifest(&a.data)?;
    let keep = class_filter(&manifest, &a.classes)?;
    let mut names = manifest.class_names();
    if let Some(k) = &keep {
        names = k.iter().map(|&i| names[i].clone()).collect();
    }
    let out = root.join(&a.out);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;

    let mut best: Option<(Outcome, PathBuf, RunConfig)> = None;
    for ck_path in &candidates {
        let ck = Checkpoint::read(ck_path)?;
        let (pre_cfg, model) = load_backbone(&ck, None)?;
        let mut cfg = pre_cfg.clone();
        // Finetuning settings come from the pretraining run unless a
        // config file or preset is named explicitly.
        if a.config.config.is_some() || a.config.preset.is_some() {
            cfg.finetune = base_config(&a.config)?.finetune;
        }
        apply_training_flags(&mut cfg, &a.config, true);
        if let Some(p) = &a.protocol {
            cfg.finetune.protocol = Protocol::from_str(p)?;
        }
        cfg.validate()?;
        let labels = matches!(a.task, Task::Seg);
        let mut train = prepare_task(&load_split(&manifest, &cfg, Split::Train, labels)?, &cfg)?;
        let mut test = prepare_task(&load_split(&manifest, &cfg, Split::Test, labels)?, &cfg)?;
        if let Some(k) = &keep {
            train = restrict(train, k);
            test = restrict(test, k);
        }
        let classes = names.len();
        let outcome = match a.task {
            Task::Cls => {
                let (_, report) = finetune_classify(model, &cfg, &train, &test, classes)?;
                Outcome {
                    score: report.test_accuracy,
                    csv: report.to_csv(&names),
                    summary: format!(
                        "protocol {} test accuracy {:.4} train accuracy {:.4} backbone unchanged {}",
                        report.protocol, report.test_accuracy, report.train_accuracy, report.backbone_unchanged
                    ),
                }
            }
            Task::Seg => {
                let all: Vec<TaskItem> = train.iter().chain(&test).cloned().collect();
                let parts = part_counts(&all, classes)?;
                let (_, report) = finetune_segment(model, &cfg, &train, &test, &parts)?;
                Outcome {
                    score: report.scores.class_miou,
                    csv: report.to_csv(&names),
                    summary: format!(
                        "class mIoU {:.4} instance mIoU {:.4}",
                        report.scores.class_miou, report.scores.instance_miou
                    ),
                }
            }
        };
        println!("{}: {}", ck_path.display(), outcome.summary);
        if best.as_ref().is_none_or(|(b, _, _)| outcome.score > b.score) {
            best = Some((outcome, ck_path.clone(), cfg));
        }
    }
    let (outcome, ck_path, cfg) = best.expect("at least one candidate");
    let task = match a.task {
        Task::Cls => "cls",
        Task::Seg => "seg",
    };
    let report = out.join(format!("{task}_report.csv"));
    fs::write(&report, &outcome.csv).map_err(|e| io_err(&report, e))?;
    cfg.save(out.join("config.toml"))?;
    let source = out.join("checkpoint.txt");
    fs::write(&source, format!("{}\n", ck_path.display())).map_err(|e| io_err(&source, e))?;
    println!("report {}", report.display());
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let pa = load_ply_unchecked(&a.a)?;
    let pb = load_ply_unchecked(&a.b)?;
    let (name, value) = match a.metric {
        Metric::Jsd => ("jsd", jsd(pa.centroids.view(), pb.centroids.view())?),
        Metric::Mmd => ("mmd", mmd(pa.centroids.view(), pb.centroids.view())?),
        Metric::Chamfer => ("chamfer", chamfer(pa.centroids.view(), pb.centroids.view())?),
    };
    println!("metric,a,b,value");
    println!("{name},{},{},{value:?}", a.a.display(), a.b.display());
    Ok(())
}

fn block_values(set: &SplatSet, kind: ParamKind) -> Vec<f64> {
    set.block(kind).iter().copied().collect()
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let set = load_ply_unchecked(&a.file)?;
    println!("file {}", a.file.display());
    println!("splats {}", set.len());
    println!("attribute,min,mean,max");
    for kind in ParamKind::ALL {
        let v = block_values(&set, kind);
        if v.is_empty() {
            continue;
        }
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        println!("{kind},{min},{mean},{max}");
    }
    let violations = set.violations();
    println!("violations {}", violations.len());
    for v in violations.iter().take(20) {
        println!("  {v}");
    }
    Ok(())
}
