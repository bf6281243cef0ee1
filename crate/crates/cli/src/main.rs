mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ufa_fuse::dataset::{self, GenerateOptions, Manifest};
use ufa_fuse::image::{images_to_tensor, tensor_to_images, GrayImage};
use ufa_fuse::network::checkpoint::Checkpoint;
use ufa_fuse::network::{Ablation, FusionNetwork};
use ufa_fuse::train::{self, TrainConfig, Trainer, CSV_HEADER};
use ufa_fuse::{imageio, metrics, selfcheck, tensor, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ufaf", version, about = "Multi-focus image fusion with unity fusion attention")]
struct Cli {
    /// TOML file with per-subcommand defaults; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize near/far/ground-truth triplets from images and saliency masks.
    GenData(GenDataArgs),
    /// Train a fusion network on a generated manifest.
    Train(TrainArgs),
    /// Fuse two source images with a trained checkpoint.
    Fuse(FuseArgs),
    /// Score fused images against their sources (and optional ground truth).
    Eval(EvalArgs),
    /// Run the built-in gradient and invariant checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Directory of source images.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Directory of grayscale masks with the same file stems.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output directory for the triplets and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Triplets to generate, cycling over the sources [default: one per source].
    #[arg(long)]
    count: Option<usize>,
    /// RNG seed for kernel sizes [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Blur groups used round-robin, 0-3 [default: 0,1,2,3].
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<usize>>,
    /// Mask values at or above this are in focus [default: 128].
    #[arg(long)]
    threshold: Option<u8>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest written by gen-data.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to write (and to resume from).
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    /// Loss curve CSV [default: checkpoint path with a .csv extension].
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Weight of the L1 term [default: 0.2].
    #[arg(long)]
    lambda: Option<f64>,
    /// Initial learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs between tenfold learning-rate drops [default: 200].
    #[arg(long)]
    lr_decay_every: Option<usize>,
    /// [default: 300]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Square random-crop side in pixels [default: 256].
    #[arg(long)]
    crop: Option<usize>,
    /// Seed for initialization, shuffling and crops [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// UFA, NO-SA, NO-CA or NO-UFA [default: UFA].
    #[arg(long)]
    ablation: Option<String>,
    /// [default: 10]
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Continue from the checkpoint at --out-checkpoint if it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// First source image.
    #[arg(long)]
    a: PathBuf,
    /// Second source image.
    #[arg(long)]
    b: PathBuf,
    /// Fused output image.
    #[arg(long)]
    out: PathBuf,
    /// Write min-max normalized attention maps (PGM) into this directory.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of fused images; stems without both sources are skipped.
    #[arg(long)]
    fused_dir: Option<PathBuf>,
    /// Directory of the first source images.
    #[arg(long)]
    src_a_dir: Option<PathBuf>,
    /// Directory of the second source images.
    #[arg(long)]
    src_b_dir: Option<PathBuf>,
    /// Ground-truth directory; enables the ssim_gt column.
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Seed for the random instances [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Random instances per op [default: 20].
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long, hide = true)]
    inject_conv_fault: bool,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Unsupported(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn required<T>(value: Option<T>, flag: &str) -> Result<T, Failure> {
    value.ok_or_else(|| Failure::usage(format!("missing required --{flag} (flag or config file)")))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Ok(threads) = std::env::var("UFAF_THREADS") {
        let n: usize = threads
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::usage(format!("UFAF_THREADS={threads:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot size the worker pool: {e}")))?;
    }
    let file = match &cli.config {
        Some(path) => config::load(path).map_err(Failure::usage)?,
        None => config::ConfigFile::default(),
    };
    match cli.command {
        Command::GenData(args) => gen_data(args, file.gen_data),
        Command::Train(args) => train_cmd(args, file.train),
        Command::Fuse(args) => fuse(args, file.fuse),
        Command::Eval(args) => eval(args, file.eval),
        Command::Selfcheck(args) => selfcheck_cmd(args, file.selfcheck),
    }
}

fn gen_data(args: GenDataArgs, file: config::GenDataConfig) -> CmdResult {
    let mut opts = GenerateOptions::new(
        required(args.src.or(file.src), "src")?,
        required(args.labels.or(file.labels), "labels")?,
        required(args.out.or(file.out), "out")?,
    );
    opts.count = args.count.or(file.count);
    opts.seed = args.seed.or(file.seed).unwrap_or(0);
    if let Some(groups) = args.groups.or(file.groups) {
        opts.groups = groups;
    }
    if let Some(t) = args.threshold.or(file.threshold) {
        opts.threshold = t;
    }
    let manifest = dataset::generate(&opts)?;
    println!(
        "wrote {} triplets and {}",
        manifest.entries.len(),
        opts.out_dir.join(dataset::MANIFEST_NAME).display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs, file: config::TrainFileConfig) -> CmdResult {
    let manifest_path = required(args.manifest.or(file.manifest), "manifest")?;
    let out = required(args.out_checkpoint.or(file.out_checkpoint), "out-checkpoint")?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        lambda: args.lambda.or(file.lambda).unwrap_or(defaults.lambda),
        lr0: args.lr.or(file.lr).unwrap_or(defaults.lr0),
        lr_decay_every: args.lr_decay_every.or(file.lr_decay_every).unwrap_or(defaults.lr_decay_every),
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch: args.batch.or(file.batch).unwrap_or(defaults.batch),
        crop: args.crop.or(file.crop).unwrap_or(defaults.crop),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        checkpoint_every: args.checkpoint_every.or(file.checkpoint_every).unwrap_or(defaults.checkpoint_every),
        max_steps: args.max_steps.or(file.max_steps),
        ..defaults
    };
    let ablation: Option<Ablation> = args.ablation.or(file.ablation).map(|s| s.parse()).transpose()?;
    let csv_path = args.loss_csv.or(file.loss_csv).unwrap_or_else(|| out.with_extension("csv"));

    let manifest = Manifest::read(&manifest_path)?;
    let data = train::load_training_set(&manifest)?;

    let resuming = args.resume && out.exists();
    let mut trainer = if resuming {
        let ck = Checkpoint::load(&out)?;
        if let Some(mode) = ablation.filter(|&m| m != ck.meta.ablation) {
            return Err(Failure::usage(format!(
                "--ablation {mode} does not match the checkpoint's {}",
                ck.meta.ablation
            )));
        }
        log::info!(
            "resuming from {} at epoch {}, step {}",
            out.display(),
            ck.meta.epochs_completed,
            ck.meta.optimizer_step
        );
        Trainer::<f32>::resume(&ck, cfg)?
    } else {
        if args.resume {
            log::warn!("no checkpoint at {}, starting fresh", out.display());
        }
        let net = FusionNetwork::<f32>::new(ablation.unwrap_or_default(), cfg.seed);
        Trainer::new(net, cfg)?
    };

    let append = resuming && csv_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&csv_path)
        .map_err(|e| io_failure(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    if !append {
        writeln!(csv, "{CSV_HEADER}").map_err(|e| io_failure(&csv_path, e))?;
    }
    let mut write_err = None;
    let records = trainer.run(&data, Some(&out), |rec| {
        if let Err(e) = writeln!(csv, "{}", rec.csv_line()).and_then(|_| csv.flush()) {
            write_err.get_or_insert(e);
        }
        let r = &rec.report;
        log::info!(
            "epoch {} step {}: total {:.5} (l1 {:.5}, ssim {:.5}) lr {:.1e}",
            r.epoch,
            r.step,
            r.total,
            r.l1,
            r.ssim_loss,
            rec.lr
        );
    })?;
    if let Some(e) = write_err {
        return Err(io_failure(&csv_path, e));
    }
    if records.is_empty() && !out.exists() {
        trainer.checkpoint().save(&out)?;
    }
    println!(
        "trained {} steps ({} epochs done); checkpoint {}, loss curve {}",
        records.len(),
        trainer.epoch,
        out.display(),
        csv_path.display()
    );
    Ok(())
}

/// Min-max normalized 8-bit rendering; a constant map renders black.
fn normalized_gray(values: &[f32], width: usize, height: usize) -> Result<GrayImage, Error> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let mut data: Vec<u8> = values
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    data.resize(width * height, 0);
    GrayImage::new(width, height, data)
}

fn fuse(args: FuseArgs, file: config::FuseConfig) -> CmdResult {
    let ck_path = required(args.checkpoint.or(file.checkpoint), "checkpoint")?;
    let net: FusionNetwork<f32> = Checkpoint::load(&ck_path)?.to_network()?;
    let a = imageio::read_rgb(&args.a)?;
    let b = imageio::read_rgb(&args.b)?;
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Failure::data(format!(
            "sources differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let inputs = [images_to_tensor(&[&a])?, images_to_tensor(&[&b])?];
    let (fused, maps) = net.forward_with_attention(&inputs)?;
    let image = tensor_to_images(&fused)?.remove(0);
    imageio::write_rgb(&args.out, &image)?;

    if let Some(dir) = args.dump_attention.or(file.dump_attention) {
        fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        for (k, m) in maps.channel.iter().enumerate() {
            // One weight per feature channel, laid out on a square grid.
            let c = m.shape().c;
            let side = (c as f64).sqrt().ceil() as usize;
            let img = normalized_gray(m.data(), side, c.div_ceil(side))?;
            imageio::write_gray(&dir.join(format!("channel_{}.pgm", source_tag(k))), &img)?;
        }
        for (k, m) in maps.spatial.iter().enumerate() {
            let s = m.shape();
            let img = normalized_gray(m.data(), s.w, s.h)?;
            imageio::write_gray(&dir.join(format!("spatial_{}.pgm", source_tag(k))), &img)?;
        }
        if maps.channel.is_empty() || maps.spatial.is_empty() {
            log::warn!("mode {} computes only some attention maps", net.ablation);
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn source_tag(k: usize) -> char {
    (b'a' + k as u8) as char
}

fn eval(args: EvalArgs, file: config::EvalConfig) -> CmdResult {
    let fused_dir = required(args.fused_dir.or(file.fused_dir), "fused-dir")?;
    let a_dir = required(args.src_a_dir.or(file.src_a_dir), "src-a-dir")?;
    let b_dir = required(args.src_b_dir.or(file.src_b_dir), "src-b-dir")?;
    let gt_dir = args.gt_dir.or(file.gt_dir);
    let out = required(args.out.or(file.out), "out")?;
    let rows = metrics::evaluate_dirs(&fused_dir, &a_dir, &b_dir, gt_dir.as_deref())?;
    let f = File::create(&out).map_err(|e| io_failure(&out, e))?;
    let mut w = BufWriter::new(f);
    metrics::write_csv(&mut w, &rows)
        .and_then(|_| w.flush())
        .map_err(|e| io_failure(&out, e))?;
    println!("evaluated {} images into {}", rows.len(), out.display());
    Ok(())
}

fn selfcheck_cmd(args: SelfcheckArgs, file: config::SelfcheckConfig) -> CmdResult {
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let instances = args.instances.or(file.instances).unwrap_or(20);
    if instances == 0 {
        return Err(Failure::usage("--instances must be at least 1"));
    }
    tensor::inject_conv_backward_fault(args.inject_conv_fault);
    let started = std::time::Instant::now();
    let outcomes = selfcheck::run(seed, instances);
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    println!(
        "{} checks, {failed} failed, {:.1}s",
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure {
            code: EXIT_CHECK,
            message: format!("{failed} self-checks failed"),
        });
    }
    Ok(())
}
