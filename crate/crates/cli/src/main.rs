use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use shieldkit::cryptor::{generate_password, CryptorPair, Password};
use shieldkit::dataset::gen_toy_dataset;
use shieldkit::encoders::{EncoderId, EncoderModel};
use shieldkit::evalkit::{
    cryptor_summary, encoding_similarity, mt_ablation, protection_similarities, protection_summary, EvalSummary,
};
use shieldkit::gradsuite::run_suite;
use shieldkit::image::Image;
use shieldkit::io::{
    load_checkpoint, load_image_dir, load_password, load_png, save_checkpoint, save_password, save_png, write_text,
    ProjectConfig,
};
use shieldkit::numgrad::cos_sim_raw;
use shieldkit::shield::{make_targets, protect_image, AttackConfig, AttackReport, Distortion, EvalDistortion, UpdateRule};
use shieldkit::trainer::{train_cryptor, EmbeddingCache};
use shieldkit::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  a check failed (gradient suite, attack success)
  2  invalid configuration or arguments
  3  missing checkpoint (run `train` first)
  4  password dimension does not match the encoder
  5  unreadable or malformed file (image, checkpoint, password)
  6  numerical failure (non-finite values, divergence)

Set RUST_LOG (e.g. RUST_LOG=info) for progress logging.";

#[derive(Parser)]
#[command(name = "shieldkit", version, about = "Embedding encryption and adversarial image protection", after_help = EXIT_CODES)]
struct Cli {
    /// Project configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for the command's randomness; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct EncoderArgs {
    /// Encoder to use; repeat for several. Defaults to the configured list.
    #[arg(long = "encoder")]
    encoders: Vec<EncoderId>,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Directory of PNG originals; defaults to the synthetic test set.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Use only the first N originals.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Clone)]
struct AttackArgs {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    ths: Option<f64>,
    /// Attack without the random distortion layer.
    #[arg(long)]
    no_distortion: bool,
    /// Update rule: sign or raw.
    #[arg(long)]
    update_rule: Option<UpdateRule>,
    #[arg(long)]
    password_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and composite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Write the synthetic training and test images as PNG files.
    GenData,
    /// Train one encryptor/decryptor pair per encoder.
    Train {
        #[command(flatten)]
        enc: EncoderArgs,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Protect images against the configured encoders.
    Protect {
        #[command(flatten)]
        enc: EncoderArgs,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Decrypt the embedding of a protected image with a password.
    Reveal {
        /// Protected PNG.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        encoder: EncoderId,
        /// Original PNG; when given, prints the similarity of the decrypted
        /// embedding to the original's.
        #[arg(long)]
        original: Option<PathBuf>,
        /// Password file; defaults to the one written by `protect`.
        #[arg(long)]
        password: Option<PathBuf>,
        /// Derive the password from this seed instead of a file.
        #[arg(long)]
        password_seed: Option<u64>,
    },
    /// Cryptor metrics on held-out embeddings, plus protection metrics when
    /// protected images exist.
    Eval {
        #[command(flatten)]
        enc: EncoderArgs,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Protected-vs-original similarity under noise, blur and JPEG.
    Robustness {
        #[command(flatten)]
        enc: EncoderArgs,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Single-target versus multi-target attack comparison.
    AblateMt {
        /// Encoder attacked alone in the single-target run.
        #[arg(long)]
        single: EncoderId,
        /// Encoder measured without being attacked in the single-target run.
        #[arg(long)]
        unseen: EncoderId,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        attack: AttackArgs,
    },
}

#[derive(Debug)]
enum CliError {
    CheckFailed(String),
    Usage(String),
    MissingCheckpoint(PathBuf),
    PasswordDim { expected: usize, found: usize },
    File(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::MissingCheckpoint(_) => 3,
            CliError::PasswordDim { .. } => 4,
            CliError::File(_) => 5,
            CliError::Numeric(_) => 6,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::CheckFailed(m) | CliError::Usage(m) | CliError::File(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::MissingCheckpoint(p) => write!(f, "checkpoint {} not found; run `shieldkit train` first", p.display()),
            CliError::PasswordDim { expected, found } => {
                write!(f, "password has dimension {found}, the encoder needs {expected}")
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Argument(_) | Error::Shape { .. } | Error::Domain { .. } => CliError::Usage(msg),
            Error::NonFinite { .. } => CliError::Numeric(msg),
            Error::Io { .. } | Error::Version { .. } | Error::Truncated { .. } | Error::Malformed { .. } | Error::Codec(_) => {
                CliError::File(msg)
            }
        }
    }
}

type CliResult<T> = Result<T, CliError>;

struct Context {
    cfg: ProjectConfig,
    seed: Option<u64>,
}

impl Context {
    fn load(cli: &Cli) -> CliResult<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ProjectConfig::load(p)?,
            None => ProjectConfig::default(),
        };
        if let Some(out) = &cli.out {
            cfg.out_dir = out.clone();
        }
        Ok(Self { cfg, seed: cli.seed })
    }

    fn encoder_ids(&self, args: &EncoderArgs) -> Vec<EncoderId> {
        if args.encoders.is_empty() {
            self.cfg.encoders.clone()
        } else {
            args.encoders.clone()
        }
    }

    fn encoder(&self, id: EncoderId) -> EncoderModel {
        EncoderModel::new(id, self.cfg.encoder_seed)
    }

    fn train_images(&self) -> CliResult<Vec<Image>> {
        let d = &self.cfg.dataset;
        Ok(match &d.image_dir {
            Some(dir) => load_image_dir(dir, d.resolution)?,
            None => gen_toy_dataset(d.seed, d.count, d.resolution)?,
        })
    }

    fn originals(&self, input: &InputArgs) -> CliResult<Vec<Image>> {
        let d = &self.cfg.dataset;
        let mut images = match &input.input {
            Some(dir) => load_image_dir(dir, d.resolution)?,
            None => gen_toy_dataset(d.test_seed, d.test_count, d.resolution)?,
        };
        if let Some(n) = input.limit {
            images.truncate(n);
        }
        if images.is_empty() {
            return Err(CliError::Usage("no input images".into()));
        }
        Ok(images)
    }

    fn pair(&self, id: EncoderId) -> CliResult<CryptorPair> {
        let path = self.cfg.checkpoint_path(id);
        if !path.exists() {
            return Err(CliError::MissingCheckpoint(path));
        }
        let (pair, _) = load_checkpoint(&path)?;
        if pair.encoder_id != id {
            return Err(CliError::File(format!("{} holds a pair for {}", path.display(), pair.encoder_id)));
        }
        Ok(pair)
    }

    fn attack_config(&self, args: &AttackArgs) -> CliResult<AttackConfig> {
        let mut a = self.cfg.attack.clone();
        if let Some(e) = args.epsilon {
            a.epsilon = e;
        }
        if let Some(t) = args.ths {
            a.ths = t;
        }
        if args.no_distortion {
            a.distortions = vec![Distortion::Identity];
        }
        if let Some(r) = args.update_rule {
            a.update_rule = r;
        }
        if let Some(s) = self.seed {
            a.seed = s;
        }
        a.validate()?;
        Ok(a)
    }

    fn password(&self, args: &AttackArgs, dim: usize) -> CliResult<Password> {
        Ok(generate_password(args.password_seed.unwrap_or(self.cfg.password_seed), dim)?)
    }

    fn protected_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("protected")
    }

    fn eval_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn emit(summary: &EvalSummary, path: &Path) -> CliResult<()> {
    let text = summary.to_jsonl();
    write_text(path, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(ctx: &Context, points: usize) -> CliResult<()> {
    let report = run_suite(points, ctx.seed.unwrap_or(0), 1e-4)?;
    for e in &report.entries {
        println!(
            "{} {:<36} worst rel {:.3e} abs {:.3e}",
            if e.passed { "PASS" } else { "FAIL" },
            e.name,
            e.worst_rel_error,
            e.worst_abs_error
        );
    }
    let failed = report.entries.iter().filter(|e| !e.passed).count();
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

fn cmd_gen_data(ctx: &Context) -> CliResult<()> {
    let d = &ctx.cfg.dataset;
    let sets = [
        ("train", d.seed, d.count),
        ("test", d.test_seed, d.test_count),
    ];
    for (name, seed, count) in sets {
        let dir = ctx.cfg.out_dir.join("data").join(name);
        for (i, im) in gen_toy_dataset(seed, count, d.resolution)?.iter().enumerate() {
            save_png(&dir.join(format!("{i:04}.png")), im)?;
        }
        println!("{}: {count} images", dir.display());
    }
    Ok(())
}

fn cmd_train(ctx: &Context, enc: &EncoderArgs, steps: Option<usize>) -> CliResult<()> {
    let images = ctx.train_images()?;
    let mut cache = EmbeddingCache::new();
    for id in ctx.encoder_ids(enc) {
        let encoder = ctx.encoder(id);
        let mut tc = ctx.cfg.train_config(id);
        if let Some(s) = steps {
            tc.steps = s;
        }
        if let Some(s) = ctx.seed {
            tc.seed = s;
        }
        tc.validate()?;
        info!("training {id}: {} steps, batch {}", tc.steps, tc.batch);
        let (pair, log) = train_cryptor(&encoder, &images, &tc, &mut cache)?;
        save_checkpoint(&ctx.cfg.checkpoint_path(id), &pair, tc.seed)?;
        write_text(&ctx.cfg.out_dir.join("logs").join(format!("{id}.jsonl")), &log.to_jsonl())?;
        let last = log.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
        println!(
            "{}",
            json!({"encoder": id, "steps": tc.steps, "final_total": last, "params": log.final_params_fingerprint})
        );
    }
    Ok(())
}

fn cmd_protect(ctx: &Context, enc: &EncoderArgs, input: &InputArgs, attack: &AttackArgs) -> CliResult<()> {
    let ids = ctx.encoder_ids(enc);
    let encoders: Vec<EncoderModel> = ids.iter().map(|&id| ctx.encoder(id)).collect();
    let pairs = ids.iter().map(|&id| ctx.pair(id)).collect::<CliResult<Vec<_>>>()?;
    let passwords = encoders
        .iter()
        .map(|e| ctx.password(attack, e.embed_dim()))
        .collect::<CliResult<Vec<_>>>()?;
    for (id, pw) in ids.iter().zip(&passwords) {
        save_password(&ctx.cfg.password_path(*id), pw)?;
    }
    let cfg = ctx.attack_config(attack)?;
    let originals = ctx.originals(input)?;
    let enc_refs: Vec<&EncoderModel> = encoders.iter().collect();
    let pair_refs: Vec<&CryptorPair> = pairs.iter().collect();
    let pw_refs: Vec<&Password> = passwords.iter().collect();
    let dir = ctx.protected_dir();
    let mut lines = String::new();
    let mut failures = 0;
    for (i, image) in originals.iter().enumerate() {
        let targets = make_targets(image, &enc_refs, &pair_refs, &pw_refs)?;
        let cfg = AttackConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let (protected, report) = protect_image(image, &enc_refs, &targets, &cfg)?;
        save_png(&dir.join(format!("{i:04}.png")), &protected.quantized())?;
        if !report.success {
            failures += 1;
            warn!("image {i}: target similarity {:.3} below {}", report.min_similarity(), cfg.ths);
        }
        let line = json!({"index": i, "report": report}).to_string();
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    write_text(&dir.join("reports.jsonl"), &lines)?;
    if failures > 0 {
        return Err(CliError::CheckFailed(format!(
            "{failures} of {} images did not reach the target similarity",
            originals.len()
        )));
    }
    Ok(())
}

fn cmd_reveal(
    ctx: &Context,
    image: &Path,
    id: EncoderId,
    original: Option<&Path>,
    password: Option<&Path>,
    password_seed: Option<u64>,
) -> CliResult<()> {
    let encoder = ctx.encoder(id);
    let pair = ctx.pair(id)?;
    let pw = match (password, password_seed) {
        (_, Some(seed)) => generate_password(seed, encoder.embed_dim())?,
        (Some(p), None) => load_password(p)?,
        (None, None) => load_password(&ctx.cfg.password_path(id))?,
    };
    if pw.dim() != encoder.embed_dim() {
        return Err(CliError::PasswordDim {
            expected: encoder.embed_dim(),
            found: pw.dim(),
        });
    }
    let protected = encoder.encode(&load_png(image)?)?;
    let decrypted = pair.decrypt_rows(protected.as_tensor(), &pw)?;
    match original {
        Some(orig) => {
            let orig = encoder.encode(&load_png(orig)?)?;
            let rows = orig.rows();
            let n = rows.len();
            let mut total = 0.0;
            for (i, row) in rows.iter().enumerate() {
                let dec = if n == 1 { decrypted.data() } else { decrypted.row(i) };
                total += cos_sim_raw(dec, row)?;
            }
            let protected_sim = encoding_similarity(&protected, &orig)?;
            println!(
                "{}",
                json!({"encoder": id, "revealed_similarity": total / n as f64, "protected_similarity": protected_sim})
            );
        }
        None => println!("{}", json!({"encoder": id, "shape": decrypted.shape(), "embedding": decrypted.data()})),
    }
    Ok(())
}

fn load_reports(path: &Path) -> CliResult<Vec<AttackReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::File(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value =
                serde_json::from_str(l).map_err(|e| CliError::File(format!("{}: {e}", path.display())))?;
            serde_json::from_value(v["report"].clone()).map_err(|e| CliError::File(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn load_protected(ctx: &Context, originals: &[Image]) -> CliResult<Vec<Image>> {
    let dir = ctx.protected_dir();
    let protected = load_image_dir(&dir, ctx.cfg.dataset.resolution)?;
    if protected.len() < originals.len() {
        return Err(CliError::Usage(format!(
            "{} holds {} protected images for {} originals",
            dir.display(),
            protected.len(),
            originals.len()
        )));
    }
    Ok(protected[..originals.len()].to_vec())
}

fn cmd_eval(ctx: &Context, enc: &EncoderArgs, input: &InputArgs) -> CliResult<()> {
    let originals = ctx.originals(input)?;
    let ids = ctx.encoder_ids(enc);
    let mut summary = EvalSummary::default();
    for &id in &ids {
        let encoder = ctx.encoder(id);
        let pair = ctx.pair(id)?;
        let mut rows = Vec::new();
        for im in &originals {
            rows.extend(encoder.encode(im)?.rows());
        }
        summary.extend(cryptor_summary(&pair, id, &rows, ctx.eval_seed())?);
    }
    let reports_path = ctx.protected_dir().join("reports.jsonl");
    if reports_path.exists() {
        let protected = load_protected(ctx, &originals)?;
        let reports = load_reports(&reports_path)?;
        let encoders: Vec<EncoderModel> = ids.iter().map(|&id| ctx.encoder(id)).collect();
        let refs: Vec<&EncoderModel> = encoders.iter().collect();
        let n = originals.len().min(reports.len());
        summary.extend(protection_summary(&originals[..n], &protected[..n], &reports[..n], &refs, ctx.eval_seed())?);
    }
    emit(&summary, &ctx.cfg.out_dir.join("eval").join("summary.jsonl"))
}

fn cmd_robustness(ctx: &Context, enc: &EncoderArgs, input: &InputArgs) -> CliResult<()> {
    let originals = ctx.originals(input)?;
    let protected = load_protected(ctx, &originals)?;
    let mut summary = EvalSummary::default();
    let n = originals.len();
    for id in ctx.encoder_ids(enc) {
        let encoder = ctx.encoder(id);
        let clean = protection_similarities(&originals, &protected, &encoder, None, ctx.eval_seed())?;
        summary.push("protection_similarity", Some(id), Some("clean"), mean(&clean), n);
        for kind in EvalDistortion::ALL {
            let sims = protection_similarities(&originals, &protected, &encoder, Some(kind), ctx.eval_seed())?;
            let d = Some(kind.as_str());
            summary.push("protection_similarity", Some(id), d, mean(&sims), n);
            let increase: Vec<f64> = sims.iter().zip(&clean).map(|(s, c)| s - c).collect();
            summary.push("similarity_increase", Some(id), d, mean(&increase), n);
            let within = sims.iter().filter(|s| **s <= 0.5).count() as f64 / n as f64;
            summary.push("fraction_at_most_0.5", Some(id), d, within, n);
        }
    }
    emit(&summary, &ctx.cfg.out_dir.join("eval").join("robustness.jsonl"))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn cmd_ablate(ctx: &Context, single: EncoderId, unseen: EncoderId, input: &InputArgs, attack: &AttackArgs) -> CliResult<()> {
    let mut ids = ctx.cfg.encoders.clone();
    for id in [single, unseen] {
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let encoders: Vec<EncoderModel> = ids.iter().map(|&id| ctx.encoder(id)).collect();
    let pairs = ids.iter().map(|&id| ctx.pair(id)).collect::<CliResult<Vec<_>>>()?;
    let passwords = encoders
        .iter()
        .map(|e| ctx.password(attack, e.embed_dim()))
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = ctx.attack_config(attack)?;
    let originals = ctx.originals(input)?;
    let result = mt_ablation(
        &originals,
        &encoders.iter().collect::<Vec<_>>(),
        &pairs.iter().collect::<Vec<_>>(),
        &passwords.iter().collect::<Vec<_>>(),
        single,
        unseen,
        &cfg,
    )?;
    let mut summary = EvalSummary::default();
    let n = result.images;
    for (mode, m) in [("single", &result.single), ("multi", &result.multi)] {
        summary.push(&format!("{mode}_specific_similarity"), Some(single), None, m.specific, n);
        summary.push(&format!("{mode}_unseen_similarity"), Some(unseen), None, m.unseen, n);
        summary.push(&format!("{mode}_success_rate"), None, None, m.success_rate, n);
    }
    summary.push("unseen_gap", Some(unseen), None, result.single.unseen - result.multi.unseen, n);
    emit(&summary, &ctx.cfg.out_dir.join("eval").join("ablate_mt.jsonl"))
}

fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Context::load(cli)?;
    match &cli.command {
        Command::Gradcheck { points } => cmd_gradcheck(&ctx, *points),
        Command::GenData => cmd_gen_data(&ctx),
        Command::Train { enc, steps } => cmd_train(&ctx, enc, *steps),
        Command::Protect { enc, input, attack } => cmd_protect(&ctx, enc, input, attack),
        Command::Reveal {
            image,
            encoder,
            original,
            password,
            password_seed,
        } => cmd_reveal(&ctx, image, *encoder, original.as_deref(), password.as_deref(), *password_seed),
        Command::Eval { enc, input } => cmd_eval(&ctx, enc, input),
        Command::Robustness { enc, input } => cmd_robustness(&ctx, enc, input),
        Command::AblateMt {
            single,
            unseen,
            input,
            attack,
        } => cmd_ablate(&ctx, *single, *unseen, input, attack),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
