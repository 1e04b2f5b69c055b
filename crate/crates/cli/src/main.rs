//! Command-line front end: train, evaluate, embed, extract, visualize, ablate.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use igahide::ablation::{run_ablation, standard_entries, AblationEntry};
use igahide::attention::{sobel_mask, MaskSource};
use igahide::checkpoint::{load_checkpoint, VERSION as CHECKPOINT_VERSION};
use igahide::config::{format_kv, parse_kv, RunConfig};
use igahide::dataio::{
    derive_seed, load_dataset, random_message, read_image_resized, synthetic_images, write_image,
    DatasetSpec, Split,
};
use igahide::distortions::ChannelConfig;
use igahide::metrics::{default_channels, evaluate, psnr};
use igahide::msgcodec::BitMessage;
use igahide::pipeline::{message_batch, Model};
use igahide::train::{fit, last_checkpoint, EpochRecord, FitOptions, TrainState};
use igahide::Tensor;

/// Exit status for bad flags, config keys, values or messages.
const EXIT_USAGE: u8 = 2;
/// Exit status for failures while running (IO, data, divergence).
const EXIT_RUNTIME: u8 = 1;

/// Marks an error as caused by the invocation rather than the run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    Usage(e.to_string()).into()
}

#[derive(Parser, Debug)]
#[command(
    name = "igahide",
    version,
    about = "Hide bit strings in images with inverse gradient attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, loss logs and a manifest.
    Train(TrainArgs),
    /// Score a checkpoint under each distortion.
    Evaluate(EvaluateArgs),
    /// Hide a message in an image.
    Embed(EmbedArgs),
    /// Recover the message from an image.
    Extract(ExtractArgs),
    /// Write the IGA and Sobel maps of an image.
    Visualize(VisualizeArgs),
    /// Train Basic, w MC., w Att. and Both with a shared seed and budget.
    Ablate(AblateArgs),
}

/// Model and training settings. Flags override values from `--config`.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Plain-text key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Message length in bits.
    #[arg(long)]
    k: Option<usize>,
    /// Encoded message length (message coding module).
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Channels of every convolution block.
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    ext_blocks: Option<usize>,
    #[arg(long)]
    emb_blocks: Option<usize>,
    #[arg(long)]
    dec_blocks: Option<usize>,
    #[arg(long)]
    disc_blocks: Option<usize>,
    #[arg(long)]
    codec_hidden: Option<usize>,
    /// Training distortion; repeat to sample among several per batch.
    /// `combined` uses crop, cropout, dropout, resize and jpeg.
    #[arg(long)]
    noise: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use an all-ones mask instead of the attention mask.
    #[arg(long)]
    no_attention: bool,
    /// Send the raw bits instead of the coded message.
    #[arg(long)]
    no_msgcodec: bool,
    /// iga, sobel or ones.
    #[arg(long)]
    mask: Option<String>,
    /// Gradient normalization of the IGA mask: minmax or sigmoid.
    #[arg(long)]
    norm: Option<String>,
    /// Extra key=value settings, as in a config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            out.extend(parse_kv(&text).map_err(usage)?);
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let s = |v: Option<usize>| v.map(|x| x.to_string());
        push("k", s(self.k));
        push("l", s(self.l));
        push("height", s(self.height));
        push("width", s(self.width));
        push("base_width", s(self.base_width));
        push("ext_blocks", s(self.ext_blocks));
        push("emb_blocks", s(self.emb_blocks));
        push("dec_blocks", s(self.dec_blocks));
        push("disc_blocks", s(self.disc_blocks));
        push("codec_hidden", s(self.codec_hidden));
        push("epochs", s(self.epochs));
        push("batch_size", s(self.batch_size));
        push("lr", self.lr.map(|x| format!("{x:?}")));
        push("seed", self.seed.map(|x| x.to_string()));
        push("noise", noise_value(&self.noise));
        push("mask", self.mask.clone());
        push("norm", self.norm.clone());
        if self.no_attention {
            push("attention", Some("false".into()));
        }
        if self.no_msgcodec {
            push("msgcodec", Some("false".into()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let pairs = self.pairs()?;
        c.apply(&pairs).map_err(usage)?;
        let k_given = pairs.iter().any(|(k, _)| k == "k");
        if k_given && !pairs.iter().any(|(k, _)| k == "codec_hidden") {
            c.codec_hidden = igahide::msgcodec::MsgCodecParams::<f32>::default_hidden(c.net.k);
        }
        c.validate().map_err(usage)?;
        Ok(c)
    }
}

fn noise_value(noise: &[String]) -> Option<String> {
    match noise {
        [] => None,
        [one] => Some(one.clone()),
        many => Some(format!("combined({})", many.join(","))),
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Image directory, with `train/` and `val/` subdirectories or flat.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use N procedural images instead of a directory.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Use at most N images per split.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Validation share when the directory has no split subdirectories.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
}

impl DataArgs {
    fn load(&self, split: Split, h: usize, w: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
        if let Some(root) = &self.data {
            let ds = load_dataset(&DatasetSpec {
                limit: self.limit,
                seed,
                val_fraction: self.val_fraction,
                ..DatasetSpec::new(root, split, h, w)
            })?;
            if !ds.skipped.is_empty() {
                log::warn!("skipped {} unreadable file(s)", ds.skipped.len());
            }
            return Ok(ds.images);
        }
        let n = self
            .synthetic
            .ok_or_else(|| usage("either --data DIR or --synthetic N is required"))?;
        let (n, tag) = match split {
            Split::Train => (n, 0),
            Split::Val => ((n as f64 * self.val_fraction).ceil().max(1.0) as usize, 1),
        };
        let n = self.limit.map_or(n, |l| n.min(l));
        Ok(synthetic_images(n, h, w, derive_seed(seed, tag)))
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "data": self.data.as_ref().map(|p| p.display().to_string()),
            "synthetic": self.synthetic,
            "limit": self.limit,
            "val_fraction": self.val_fraction,
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for checkpoints, logs and the manifest.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate only these distortions (repeatable); default is the full grid.
    #[arg(long)]
    noise: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value = "runs/evaluate")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct MessageArgs {
    /// Message as a string of 0 and 1.
    #[arg(long, conflicts_with = "hex")]
    bits: Option<String>,
    /// Message as hexadecimal; the first k bits are used.
    #[arg(long)]
    hex: Option<String>,
}

impl MessageArgs {
    fn parse(&self, k: usize) -> Result<Option<BitMessage>> {
        let m = match (&self.bits, &self.hex) {
            (Some(b), _) => BitMessage::from_bit_str(b).map_err(usage)?,
            (None, Some(h)) => BitMessage::from_hex(h, k).map_err(usage)?,
            (None, None) => return Ok(None),
        };
        if m.len() != k {
            return Err(usage(format!(
                "message has {} bits but the model expects k = {k}",
                m.len()
            )));
        }
        Ok(Some(m))
    }
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cover image.
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    message: MessageArgs,
    /// Encoded image path; use a lossless format such as PNG.
    #[arg(long, default_value = "encoded.png")]
    output: PathBuf,
    #[arg(long, default_value = "runs/embed")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "runs/extract")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Message used for the IGA gradient; random from `--seed` if absent.
    #[command(flatten)]
    message: MessageArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/visualize")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Number of seeds, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Add a row for the full model with the Sobel map as mask.
    #[arg(long)]
    with_sobel: bool,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: Vec<(String, String)>,
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let manifest = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config": config.into_iter().map(|(k, v)| (k, json!(v))).collect::<serde_json::Map<_, _>>(),
        "versions": {
            "igahide": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": CHECKPOINT_VERSION,
            "parallel": igahide::par::is_parallel(),
        },
        "details": extra,
    });
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    if let Some(cfg) = manifest["config"].as_object().filter(|m| !m.is_empty()) {
        let pairs: Vec<(String, String)> = cfg
            .iter()
            .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
            .collect();
        fs::write(out.join("config.txt"), format_kv(&pairs))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(RunConfig, Model<f32>)> {
    let bundle = load_checkpoint(path)?;
    Ok((bundle.state.config, bundle.state.model))
}

fn read_cover(path: &Path, model: &Model<f32>) -> Result<Tensor<f32>> {
    let (img, resized) = read_image_resized(path, model.net.height, model.net.width)
        .with_context(|| format!("reading {}", path.display()))?;
    if resized {
        log::warn!(
            "{} resized to {}x{} to match the model",
            path.display(),
            model.net.width,
            model.net.height
        );
    }
    Ok(img)
}

const EPOCH_HEADER: &str = "epoch\tsteps\tgenerator\tl_d\ttrain_bpa\tval_bpa\n";
const STEP_HEADER: &str = "epoch\tstep\tdistortion\tl_mr\tl_md\tl_ir\tl_g\tl_d\tgenerator\tbpa\n";

fn epoch_line(r: &EpochRecord) -> String {
    format!(
        "{}\t{}\t{:?}\t{:?}\t{:?}\t{}\n",
        r.epoch,
        r.steps.len(),
        r.mean_generator,
        r.mean_l_d,
        r.train_bpa,
        r.val_bpa
            .map_or_else(|| "nan".to_string(), |v| format!("{v:?}"))
    )
}

fn step_lines(r: &EpochRecord, first_step: u64) -> String {
    r.steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\n",
                r.epoch,
                first_step + i as u64,
                s.distortion,
                s.l_mr,
                s.l_md,
                s.l_ir,
                s.l_g,
                s.l_d,
                s.generator,
                s.bpa
            )
        })
        .collect()
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<fs::File> {
    if append && path.exists() {
        return Ok(fs::OpenOptions::new().append(true).open(path)?);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    Ok(f)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let mut state = if a.resume {
        let path = last_checkpoint(&a.out)
            .ok_or_else(|| anyhow::anyhow!("--resume: no last.ckpt in {}", a.out.display()))?;
        let mut s = load_checkpoint(&path)?.state;
        if let Some(e) = a.config.epochs {
            s.config.epochs = e;
        }
        log::info!("resuming from {} at epoch {}", path.display(), s.epoch);
        s
    } else {
        TrainState::new(a.config.resolve()?)?
    };
    let c = state.config.clone();
    write_manifest(
        &a.out,
        "train",
        c.to_kv(),
        json!({ "data": a.data.describe(), "resume": a.resume }),
    )?;
    let train = a
        .data
        .load(Split::Train, c.net.height, c.net.width, c.seed)?;
    let val = a.data.load(Split::Val, c.net.height, c.net.width, c.seed)?;
    log::info!(
        "{} training and {} validation images",
        train.len(),
        val.len()
    );

    let mut epochs_log = open_log(&a.out.join("train_log.tsv"), EPOCH_HEADER, a.resume)?;
    let mut steps_log = open_log(&a.out.join("steps_log.tsv"), STEP_HEADER, a.resume)?;
    let mut next_step = state.step;
    let mut io_error = None;
    let mut on_epoch = |r: &EpochRecord| {
        let res = epochs_log
            .write_all(epoch_line(r).as_bytes())
            .and_then(|()| steps_log.write_all(step_lines(r, next_step).as_bytes()));
        next_step += r.steps.len() as u64;
        if let Err(e) = res {
            io_error.get_or_insert(e);
        }
        println!(
            "epoch {:>4}  generator {:.5}  l_d {:.5}  train_bpa {:.4}  val_bpa {}",
            r.epoch,
            r.mean_generator,
            r.mean_l_d,
            r.train_bpa,
            r.val_bpa.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
        );
    };
    let summary = fit(
        &mut state,
        &train,
        FitOptions {
            epochs: c.epochs as u64,
            val: Some(&val),
            checkpoint_dir: Some(a.out.clone()),
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    if let Some(e) = io_error {
        return Err(e).context("writing loss logs");
    }
    println!(
        "checkpoints: {} (best val_bpa {})",
        a.out.join("last.ckpt").display(),
        summary
            .best
            .best_val_bpa
            .map_or_else(|| "-".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let (c, model) = load_model(&a.checkpoint)?;
    let channels = if a.noise.is_empty() {
        default_channels()
    } else {
        a.noise
            .iter()
            .map(|n| n.parse::<ChannelConfig>().map_err(usage))
            .collect::<Result<Vec<_>>>()?
    };
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be positive"));
    }
    write_manifest(
        &a.out,
        "evaluate",
        c.to_kv(),
        json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "data": a.data.describe(),
            "seed": a.seed,
            "channels": channels.iter().map(ToString::to_string).collect::<Vec<_>>(),
        }),
    )?;
    let images = a.data.load(Split::Val, c.net.height, c.net.width, c.seed)?;
    let mut report = evaluate(&model, &images, &channels, a.seed, a.batch_size)?;
    report.config = c.to_kv();
    let table = report.to_table();
    print!("{table}");
    fs::write(a.out.join("eval.txt"), &table)?;
    fs::write(
        a.out.join("eval.json"),
        serde_json::to_string_pretty(&report.to_json())? + "\n",
    )?;
    Ok(())
}

fn cmd_embed(a: &EmbedArgs) -> Result<()> {
    let (c, model) = load_model(&a.checkpoint)?;
    let msg = a
        .message
        .parse(c.net.k)?
        .ok_or_else(|| usage("a message is required: --bits or --hex"))?;
    let cover = read_cover(&a.image, &model)?;
    write_manifest(
        &a.out,
        "embed",
        c.to_kv(),
        json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "image": a.image.display().to_string(),
            "output": a.output.display().to_string(),
            "message": msg.to_string(),
        }),
    )?;
    let encoded = model.embed(&cover, &msg)?;
    write_image(&a.output, &encoded).with_context(|| format!("writing {}", a.output.display()))?;
    println!("wrote {}", a.output.display());
    println!("PSNR {:.2} dB", psnr(&cover, &encoded)?);
    Ok(())
}

fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let (c, model) = load_model(&a.checkpoint)?;
    let img = read_cover(&a.image, &model)?;
    let msg = model.extract(&img)?;
    write_manifest(
        &a.out,
        "extract",
        c.to_kv(),
        json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "image": a.image.display().to_string(),
            "message": msg.to_string(),
        }),
    )?;
    println!("{msg}");
    Ok(())
}

/// Rescales to [0, 1]; a flat map becomes all zeros.
fn min_max(t: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    if hi - lo <= f32::EPSILON {
        return t.map(|_| 0.0);
    }
    t.map(|v| (v - lo) / (hi - lo))
}

/// Channel mean replicated to three planes, for a grayscale rendering.
fn gray(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let plane = s[1] * s[2];
    let d = t.data();
    let mean: Vec<f32> = (0..plane)
        .map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0)
        .collect();
    Tensor::from_fn(s.to_vec(), |i| mean[i % plane])
}

fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    let (c, mut model) = load_model(&a.checkpoint)?;
    let cover = read_cover(&a.image, &model)?;
    let msg = match a.message.parse(c.net.k)? {
        Some(m) => m,
        None => random_message(c.net.k, &mut ChaCha8Rng::seed_from_u64(a.seed))?,
    };
    let batch = Tensor::stack(std::slice::from_ref(&cover))?;
    model.options.use_attention = true;
    model.options.mask = MaskSource::Iga;
    let iga = model
        .masks(&batch, &message_batch(std::slice::from_ref(&msg))?, false)?
        .batch_item(0);
    let sobel = sobel_mask(&cover)?.into_values();
    let (iga_map, sobel_map) = (gray(&iga), gray(&sobel));
    let overlap = min_max(&iga_map).mean_abs_diff(&min_max(&sobel_map))?;
    fs::create_dir_all(&a.out)?;
    let (iga_path, sobel_path) = (a.out.join("iga_mask.png"), a.out.join("sobel_mask.png"));
    write_image(&iga_path, &iga_map)?;
    write_image(&sobel_path, &sobel_map)?;
    let stats = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "image": a.image.display().to_string(),
        "message": msg.to_string(),
        "norm": model.options.norm.to_string(),
        "iga_mask": iga_path.display().to_string(),
        "sobel_mask": sobel_path.display().to_string(),
        "mean_abs_difference": overlap,
    });
    write_manifest(&a.out, "visualize", c.to_kv(), stats)?;
    println!("wrote {} and {}", iga_path.display(), sobel_path.display());
    println!("mean absolute difference of normalized maps: {overlap:.4}");
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let c = a.config.resolve()?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|i| c.seed + i).collect();
    let mut entries = standard_entries(c.options);
    if a.with_sobel {
        entries.push(AblationEntry::sobel(c.options));
    }
    write_manifest(
        &a.out,
        "ablate",
        c.to_kv(),
        json!({
            "data": a.data.describe(),
            "seeds": seeds,
            "models": entries.iter().map(|e| e.label.clone()).collect::<Vec<_>>(),
        }),
    )?;
    let train = a
        .data
        .load(Split::Train, c.net.height, c.net.width, c.seed)?;
    let val = a.data.load(Split::Val, c.net.height, c.net.width, c.seed)?;
    let report = run_ablation(&c, &entries, &seeds, &train, &val, |label, seed, r| {
        log::info!(
            "{label} seed {seed} epoch {} train_bpa {:.4}",
            r.epoch,
            r.train_bpa
        );
    })?;
    let table = report.to_table();
    print!("{table}");
    fs::write(a.out.join("ablation.txt"), &table)?;
    fs::write(
        a.out.join("ablation.json"),
        serde_json::to_string_pretty(&report.to_json())? + "\n",
    )?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let is_usage = e.chain().any(|c| {
        c.is::<Usage>()
            || matches!(
                c.downcast_ref::<igahide::Error>(),
                Some(
                    igahide::Error::Config(_)
                        | igahide::Error::Message(_)
                        | igahide::Error::InvalidParameter(_)
                )
            )
    });
    if is_usage {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
