//! `clp`: vocabulary overlap, embedding-space audit and checkpoint transfer.
//!
//! Exit status: 0 on success, 2 for usage errors, 3 for unreadable or
//! malformed input, 4 for numeric failures (shape mismatches, empty overlap,
//! degenerate weights).

mod config;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use clp_transfer::vocab::{format_percent, OverlapReport};
use clp_transfer::{
    compute_overlap, find_embedding_tensor, knn_audit, open_checkpoint, read_matrix, transfer_checkpoint,
    CanonicalMode, CanonicalizationPolicy, Denominator, ErrorKind, Execution, Fallback, HeadPolicy, InitMethod,
    OutputDtype, TransferConfig, TransferReport, VocabFormat, Vocabulary, WeightMode,
};
use serde::Serialize;
use serde_json::json;

use config::{required, usage, ConfigFile, UsageError};
use manifest::{write_json, FileDigest, RunManifest};

const THREADS_ENV: &str = "CLP_THREADS";

#[derive(Parser, Debug)]
#[command(name = "clp", version, about = "Cross-lingual and progressive checkpoint transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Vocabulary overlap between two tokenizers.
    Overlap(OverlapArgs),
    /// Shared k-nearest-neighbor fraction between two embedding spaces.
    KnnAudit(KnnArgs),
    /// Build a target-language checkpoint from a source-language one.
    Transfer(TransferArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// sequential or parallel.
    #[arg(long)]
    execution: Option<Execution>,
}

#[derive(Args, Debug)]
struct OverlapArgs {
    #[arg(long)]
    source_vocab: Option<PathBuf>,
    #[arg(long)]
    target_vocab: Option<PathBuf>,
    /// tokenizer, flat-map or lines (guessed from the file name if omitted).
    #[arg(long)]
    format: Option<VocabFormat>,
    /// none or whitespace.
    #[arg(long)]
    canonicalize: Option<CanonicalMode>,
    /// source, target or union.
    #[arg(long)]
    denominator: Option<Denominator>,
    /// Directory for the report and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct KnnArgs {
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    /// Embedding tensor name (or a substring of it) in both checkpoints.
    #[arg(long)]
    tensor: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// Directory for the score, histogram and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    source_model: Option<PathBuf>,
    /// Small model trained on the target language (not needed for baselines).
    #[arg(long)]
    small_target_model: Option<PathBuf>,
    #[arg(long)]
    source_vocab: Option<PathBuf>,
    #[arg(long)]
    target_vocab: Option<PathBuf>,
    /// Output checkpoint; the report and manifest are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<VocabFormat>,
    #[arg(long)]
    canonicalize: Option<CanonicalMode>,
    /// clamped, raw, softmax or softmax:T.
    #[arg(long)]
    weight_mode: Option<WeightMode>,
    #[arg(long)]
    top_k: Option<usize>,
    /// top1 or error.
    #[arg(long)]
    fallback: Option<Fallback>,
    /// auto, tied or untied.
    #[arg(long)]
    head: Option<HeadPolicy>,
    /// Control initialization instead of the similarity-weighted one.
    #[arg(long)]
    baseline: Option<Baseline>,
    #[arg(long)]
    seed: Option<u64>,
    /// Standard deviation of the random baseline.
    #[arg(long)]
    init_std: Option<f64>,
    /// f32 or source.
    #[arg(long)]
    output_dtype: Option<OutputDtype>,
    #[arg(long)]
    source_tensor: Option<String>,
    #[arg(long)]
    small_tensor: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Baseline {
    Random,
    SourceMean,
}

impl std::str::FromStr for Baseline {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        match s {
            "random" => Ok(Self::Random),
            "source-mean" => Ok(Self::SourceMean),
            other => Err(UsageError(format!("unknown baseline {other:?}"))),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Overlap(a) => cmd_overlap(a),
        Command::KnnAudit(a) => cmd_knn_audit(a),
        Command::Transfer(a) => cmd_transfer(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<clp_transfer::Error>() {
            return match err.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Input => 3,
                ErrorKind::Numeric => 4,
            };
        }
    }
    3
}

/// Sizes the global thread pool from the environment, if requested.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| usage(format!("{THREADS_ENV} must be a thread count, got {raw:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        log::warn!("{THREADS_ENV}={n} ignored: built without parallel support");
    }
    Ok(())
}

fn load_vocab(path: &Path, format: Option<VocabFormat>, role: &str) -> Result<Vocabulary> {
    let format = format.unwrap_or_else(|| VocabFormat::guess(path));
    Vocabulary::load(path, format).with_context(|| format!("loading {role} vocabulary {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn cmd_overlap(mut a: OverlapArgs) -> Result<()> {
    let mut cfg = ConfigFile::load(a.common.config.as_deref())?;
    cfg.fill("source-vocab", &mut a.source_vocab)?;
    cfg.fill("target-vocab", &mut a.target_vocab)?;
    cfg.fill("format", &mut a.format)?;
    cfg.fill("canonicalize", &mut a.canonicalize)?;
    cfg.fill("denominator", &mut a.denominator)?;
    cfg.fill("out", &mut a.out)?;
    cfg.fill("execution", &mut a.common.execution)?;
    cfg.finish()?;
    let source_path = required(a.source_vocab, "source-vocab")?;
    let target_path = required(a.target_vocab, "target-vocab")?;
    let policy = CanonicalizationPolicy::new(a.canonicalize.unwrap_or_default());
    let denominator = a.denominator.unwrap_or_default();

    let source = load_vocab(&source_path, a.format, "source")?;
    let target = load_vocab(&target_path, a.format, "target")?;
    let map = compute_overlap(&source, &target, policy)?;
    let ratio = map.ratio(denominator)?;

    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let report = OverlapReport::new(&map, &source, &target, 20)?;
        let report_path = dir.join("overlap.json");
        write_json(
            &report_path,
            &json!({ "denominator": denominator, "ratio": ratio, "percent": format_percent(ratio), "report": report }),
        )?;
        let mut manifest = RunManifest::new(
            "overlap",
            json!({ "format": a.format, "canonicalization": policy, "denominator": denominator }),
        );
        manifest.input("source-vocab", &source_path)?;
        manifest.input("target-vocab", &target_path)?;
        manifest.outputs.push(FileDigest::of("report", &report_path)?);
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    println!("{}", format_percent(ratio));
    Ok(())
}

fn cmd_knn_audit(mut a: KnnArgs) -> Result<()> {
    let mut cfg = ConfigFile::load(a.common.config.as_deref())?;
    cfg.fill("a", &mut a.a)?;
    cfg.fill("b", &mut a.b)?;
    cfg.fill("tensor", &mut a.tensor)?;
    cfg.fill("k", &mut a.k)?;
    cfg.fill("out", &mut a.out)?;
    cfg.fill("execution", &mut a.common.execution)?;
    cfg.finish()?;
    let path_a = required(a.a, "a")?;
    let path_b = required(a.b, "b")?;
    let k = required(a.k, "k")?;
    let exec = a.common.execution.unwrap_or_default();

    let load = |path: &Path| -> Result<_> {
        let bundle = open_checkpoint(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
        let tensors = find_embedding_tensor(&bundle, a.tensor.as_deref())
            .with_context(|| format!("locating embeddings in {}", path.display()))?;
        let m = read_matrix(&bundle, &tensors.input)
            .with_context(|| format!("reading {} from {}", tensors.input, path.display()))?;
        Ok((tensors.input, m))
    };
    let (name_a, ma) = load(&path_a)?;
    let (name_b, mb) = load(&path_b)?;
    let audit = knn_audit(&ma, &mb, k, exec)?;

    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let report_path = dir.join("knn_audit.json");
        write_json(
            &report_path,
            &json!({ "tensor_a": name_a, "tensor_b": name_b, "audit": audit }),
        )?;
        let hist_path = dir.join("histogram.csv");
        let mut csv = String::from("shared_neighbors,tokens\n");
        for (c, n) in audit.histogram.iter().enumerate() {
            csv.push_str(&format!("{c},{n}\n"));
        }
        fs::write(&hist_path, csv).with_context(|| format!("writing {}", hist_path.display()))?;
        let mut manifest = RunManifest::new("knn-audit", json!({ "k": k, "tensor": a.tensor, "execution": exec }));
        manifest.input("a", &path_a)?;
        manifest.input("b", &path_b)?;
        manifest.outputs.push(FileDigest::of("report", &report_path)?);
        manifest.outputs.push(FileDigest::of("histogram", &hist_path)?);
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    println!("{:.4}", audit.score);
    Ok(())
}

/// Removes registered files when dropped, unless disarmed.
struct Cleanup(Vec<PathBuf>);

impl Cleanup {
    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.0.push(path.clone());
        path
    }

    fn disarm(mut self) {
        self.0.clear();
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = fs::remove_file(p);
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Serialize)]
struct TransferSummary<'a> {
    transfer: &'a TransferReport,
    overlap: OverlapReport,
}

fn cmd_transfer(mut a: TransferArgs) -> Result<()> {
    let mut cfg = ConfigFile::load(a.common.config.as_deref())?;
    cfg.fill("source-model", &mut a.source_model)?;
    cfg.fill("small-target-model", &mut a.small_target_model)?;
    cfg.fill("source-vocab", &mut a.source_vocab)?;
    cfg.fill("target-vocab", &mut a.target_vocab)?;
    cfg.fill("out", &mut a.out)?;
    cfg.fill("format", &mut a.format)?;
    cfg.fill("canonicalize", &mut a.canonicalize)?;
    cfg.fill("weight-mode", &mut a.weight_mode)?;
    cfg.fill("top-k", &mut a.top_k)?;
    cfg.fill("fallback", &mut a.fallback)?;
    cfg.fill("head", &mut a.head)?;
    cfg.fill("baseline", &mut a.baseline)?;
    cfg.fill("seed", &mut a.seed)?;
    cfg.fill("init-std", &mut a.init_std)?;
    cfg.fill("output-dtype", &mut a.output_dtype)?;
    cfg.fill("source-tensor", &mut a.source_tensor)?;
    cfg.fill("small-tensor", &mut a.small_tensor)?;
    cfg.fill("execution", &mut a.common.execution)?;
    cfg.finish()?;

    let source_path = required(a.source_model, "source-model")?;
    let source_vocab_path = required(a.source_vocab, "source-vocab")?;
    let target_vocab_path = required(a.target_vocab, "target-vocab")?;
    let out = required(a.out, "out")?;
    if a.init_std.is_some() && a.baseline != Some(Baseline::Random) {
        return Err(usage("--init-std only applies to --baseline random"));
    }
    let init = match a.baseline {
        None => InitMethod::Clp,
        Some(Baseline::Random) => match a.init_std {
            Some(std) => InitMethod::RandomNormal { mean: 0.0, std },
            None => InitMethod::RANDOM_DEFAULT,
        },
        Some(Baseline::SourceMean) => InitMethod::SourceMean,
    };
    let small_path = match (init, a.small_target_model) {
        (InitMethod::Clp, None) => return Err(usage("missing required option --small-target-model")),
        (InitMethod::Clp, p) => p,
        (_, Some(_)) => {
            log::warn!("--small-target-model is not used by baseline initializations");
            None
        }
        (_, None) => None,
    };
    let config = TransferConfig {
        weight_mode: a.weight_mode.unwrap_or_default(),
        top_k: a.top_k,
        fallback: a.fallback.unwrap_or_default(),
        seed: a.seed.unwrap_or(0),
        head_policy: a.head.unwrap_or_default(),
        init,
        canonicalization: CanonicalizationPolicy::new(a.canonicalize.unwrap_or_default()),
        output_dtype: a.output_dtype.unwrap_or_default(),
        source_tensor: a.source_tensor,
        small_tensor: a.small_tensor,
        execution: a.common.execution.unwrap_or_default(),
    };
    config.validate()?;

    let source_vocab = load_vocab(&source_vocab_path, a.format, "source")?;
    let target_vocab = load_vocab(&target_vocab_path, a.format, "target")?;
    let source =
        open_checkpoint(&source_path).with_context(|| format!("opening source model {}", source_path.display()))?;
    let small = small_path
        .as_deref()
        .map(|p| open_checkpoint(p).with_context(|| format!("opening small target model {}", p.display())))
        .transpose()?;

    let output = transfer_checkpoint(&source, small.as_ref(), &source_vocab, &target_vocab, &config)
        .with_context(|| format!("transferring {}", source_path.display()))?;

    let report_path = sibling(&out, ".report.json");
    let manifest_path = sibling(&out, ".manifest.json");
    let mut cleanup = Cleanup(Vec::new());
    let tmp_ckpt = cleanup.track(sibling(&out, ".partial"));
    let tmp_report = cleanup.track(sibling(&report_path, ".partial"));
    let tmp_manifest = cleanup.track(sibling(&manifest_path, ".partial"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    output
        .write(&tmp_ckpt)
        .with_context(|| format!("writing {}", out.display()))?;
    let summary = TransferSummary {
        transfer: output.report(),
        overlap: OverlapReport::new(output.overlap(), &source_vocab, &target_vocab, 20)?,
    };
    write_json(&tmp_report, &summary)?;

    let mut manifest = RunManifest::new(
        "transfer",
        json!({ "vocab_format": a.format, "transfer": config, "execution": config.execution }),
    );
    manifest.input("source-model", &source_path)?;
    if let Some(p) = &small_path {
        manifest.input("small-target-model", p)?;
    }
    manifest.input("source-vocab", &source_vocab_path)?;
    manifest.input("target-vocab", &target_vocab_path)?;
    manifest.outputs.push(FileDigest::of_as("checkpoint", &tmp_ckpt, &out)?);
    manifest
        .outputs
        .push(FileDigest::of_as("report", &tmp_report, &report_path)?);
    write_json(&tmp_manifest, &manifest)?;

    for (from, to) in [
        (&tmp_ckpt, &out),
        (&tmp_report, &report_path),
        (&tmp_manifest, &manifest_path),
    ] {
        fs::rename(from, to).with_context(|| format!("moving output into place at {}", to.display()))?;
        // a later failure must not leave a half-published set behind
        cleanup.track(to.clone());
    }
    cleanup.disarm();

    let r = output.report();
    println!(
        "copied {}, constructed {}, fallback {} -> {}",
        r.copied,
        r.constructed,
        r.fallback_used,
        out.display()
    );
    Ok(())
}
