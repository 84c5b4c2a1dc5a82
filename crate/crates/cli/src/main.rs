use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use saelab::datagen::{
    encode_activations, gen_synthetic, read_activations, read_truth, write_truth, ActivationBatch, SyntheticSpec,
    ValueDistribution,
};
use saelab::metrics::{
    activation_similarity, code_sets, compare_reports, evaluate, expert_activation_cdf, intra_inter_similarity,
    overlap_histogram, parse_loss_triple, redundancy_fraction, EvalOptions, MetricsReport, DEFAULT_INTER_SAMPLES,
    REDUNDANCY_THRESHOLD,
};
use saelab::model::checkpoint::{encode_checkpoint, read_checkpoint};
use saelab::training::{init_model, preset, train_with, TrainConfig, PRESET_NAMES};
use saelab::{Error, Rng, SaeModel};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_SHAPE: u8 = 5;
const EXIT_CAPABILITY: u8 = 6;

#[derive(Parser)]
#[command(
    name = "saelab",
    version,
    about = "Train and analyse sparse autoencoders with routed experts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic activation dataset with a known dictionary.
    GenData(GenDataArgs),
    /// Train a model from a config file or preset.
    Train(TrainArgs),
    /// Compute the metric suite for a checkpoint.
    Eval(EvalArgs),
    /// Redundancy, specialization and overlap analyses, or report diffs.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "SAELAB_OUT_DIR", default_value = "saelab-out")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    d_model: usize,
    #[arg(long)]
    true_features: usize,
    #[arg(long)]
    tokens: usize,
    #[arg(long)]
    seed: u64,
    /// Expected number of active true features per token.
    #[arg(long, default_value_t = 4.0)]
    sparsity: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// `uniform` or `exponential`.
    #[arg(long, default_value = "uniform")]
    values: String,
    /// Label tokens by concept group (0 disables labels).
    #[arg(long, default_value_t = 0)]
    concept_groups: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    data: PathBuf,
    /// Override a config key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Reserve the last N tokens of the dataset; they are never trained on.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Language-model loss triple for loss recovered.
    #[arg(long)]
    loss_triples: Option<PathBuf>,
    /// Ground-truth dictionary for dictionary recovery.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Evaluate only the last N tokens.
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INTER_SAMPLES)]
    samples: usize,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, required_unless_present = "compare")]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "compare")]
    data: Option<PathBuf>,
    #[arg(long)]
    redundancy: bool,
    #[arg(long, default_value_t = REDUNDANCY_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    intra_inter: bool,
    #[arg(long, default_value_t = DEFAULT_INTER_SAMPLES)]
    samples: usize,
    #[arg(long)]
    cdf: bool,
    #[arg(long)]
    overlap: bool,
    #[arg(long)]
    similarity: bool,
    /// Pairwise analyses use at most this many tokens (the first ones).
    #[arg(long, default_value_t = 2000)]
    max_tokens: usize,
    /// Keep only tokens whose label starts with this prefix.
    #[arg(long)]
    label_prefix: Option<String>,
    /// Keep only tokens whose label equals this value.
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Diff two metrics reports (JSON lines written by `eval`).
    #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with_all = ["checkpoint", "data"])]
    compare: Option<Vec<PathBuf>>,
    #[command(flatten)]
    out: OutDir,
}

/// An error carrying its exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Exit(code, _)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Precondition(_) => EXIT_USAGE,
                Error::Io(_) | Error::Parse { .. } | Error::NoLabels => EXIT_IO,
                Error::Diverged { .. } => EXIT_DIVERGED,
                Error::ShapeMismatch { .. } | Error::IdentityRequiresSquare => EXIT_SHAPE,
                Error::NoExperts => EXIT_CAPABILITY,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> anyhow::Result<ActivationBatch> {
    read_activations(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<SaeModel> {
    read_checkpoint(path).with_context(|| format!("reading {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let value_distribution: ValueDistribution = a
        .values
        .parse()
        .map_err(|e: Error| Exit(EXIT_USAGE, format!("--values: {e}")))?;
    let spec = SyntheticSpec {
        d_model: a.d_model,
        n_true_features: a.true_features,
        feature_sparsity: a.sparsity,
        value_distribution,
        noise_std: a.noise,
        n_tokens: a.tokens,
        seed: a.seed,
        concept_groups: a.concept_groups,
    };
    spec.validate()
        .map_err(|e| Exit(EXIT_USAGE, format!("invalid generator flags: {e}")))?;
    let (batch, truth) = gen_synthetic(&spec)?;
    create_dir(&a.out.out)?;
    let bytes = encode_activations(&batch)?;
    write_file(&a.out.out.join("activations.saea"), &bytes)?;
    write_truth(&truth, a.out.out.join("ground_truth.saeg"))?;
    println!(
        "tokens={} d_model={} sha256={}",
        batch.n_tokens(),
        batch.d_model,
        sha256_hex(&bytes)
    );
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    config_path: Option<String>,
    preset: Option<String>,
    dataset_path: String,
    dataset_sha256: String,
    output_dir: String,
    seed: u64,
    train_tokens: usize,
    holdout_tokens: usize,
    checkpoints: Vec<ManifestFile>,
    files: Vec<ManifestFile>,
}

#[derive(Serialize)]
struct ManifestFile {
    path: String,
    sha256: String,
}

fn load_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::parse(&text)?
        }
        (None, Some(name)) => preset(name).map_err(|_| {
            Exit(
                EXIT_USAGE,
                format!("unknown preset {name:?}; available: {}", PRESET_NAMES.join(", ")),
            )
        })?,
        (None, None) => bail!(Exit(EXIT_USAGE, "--config or --preset required".into())),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Exit(EXIT_USAGE, format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a)?;
    let data_bytes = fs::read(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let data =
        saelab::datagen::decode_activations(&data_bytes).with_context(|| format!("reading {}", a.data.display()))?;
    if a.holdout >= data.n_tokens() {
        bail!(Exit(
            EXIT_USAGE,
            format!(
                "--holdout {} leaves no training tokens out of {}",
                a.holdout,
                data.n_tokens()
            )
        ));
    }
    let train_data = data.slice(0..data.n_tokens() - a.holdout);
    if train_data.d_model != cfg.d_model {
        bail!(Exit(
            EXIT_SHAPE,
            format!(
                "config d_model {} does not match data d_model {}",
                cfg.d_model, train_data.d_model
            )
        ));
    }

    let out = &a.out.out;
    create_dir(out)?;
    let config_text = cfg.to_text();
    write_file(&out.join("config.cfg"), &config_text)?;
    let init = init_model(&cfg, &train_data.mean(), &mut Rng::new(cfg.seed).fork(1))?;
    let init_bytes = encode_checkpoint(&init);
    write_file(&out.join("init.saec"), &init_bytes)?;

    let steps_path = out.join("steps.jsonl");
    let mut steps = fs::File::create(&steps_path).with_context(|| format!("writing {}", steps_path.display()))?;
    let mut write_err = None;
    let result = train_with(&cfg, &train_data, |r| {
        let line = serde_json::to_string(r).expect("report serializes");
        if let Err(e) = writeln!(steps, "{line}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", steps_path.display()));
    }
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Diverged { step, last_finite }) => {
            if let Some(r) = &last_finite {
                eprintln!("last finite step: {}", serde_json::to_string(r)?);
            }
            return Err(Error::Diverged { step, last_finite }.into());
        }
        Err(e) => return Err(e.into()),
    };
    drop(steps);
    let ckpt = encode_checkpoint(&outcome.model);
    write_file(&out.join("checkpoint.saec"), &ckpt)?;

    let file = |name: &str, bytes: &[u8]| ManifestFile {
        path: name.to_string(),
        sha256: sha256_hex(bytes),
    };
    let manifest = Manifest {
        config_path: a.config.as_ref().map(|p| p.display().to_string()),
        preset: a.preset.clone(),
        dataset_path: a.data.display().to_string(),
        dataset_sha256: sha256_hex(&data_bytes),
        output_dir: out.display().to_string(),
        seed: cfg.seed,
        train_tokens: train_data.n_tokens(),
        holdout_tokens: a.holdout,
        checkpoints: vec![file("init.saec", &init_bytes), file("checkpoint.saec", &ckpt)],
        files: vec![
            file("config.cfg", config_text.as_bytes()),
            file("steps.jsonl", &fs::read(&steps_path)?),
        ],
    };
    write_file(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    if let Some(last) = outcome.reports.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    println!("checkpoint sha256={}", sha256_hex(&ckpt));
    Ok(())
}

fn tail(data: ActivationBatch, holdout: Option<usize>) -> anyhow::Result<ActivationBatch> {
    match holdout {
        None => Ok(data),
        Some(n) if n == 0 || n > data.n_tokens() => bail!(Exit(
            EXIT_USAGE,
            format!("--holdout {n} must be between 1 and {}", data.n_tokens())
        )),
        Some(n) => Ok(data.slice(data.n_tokens() - n..data.n_tokens())),
    }
}

fn check_shapes(model: &SaeModel, data: &ActivationBatch) -> anyhow::Result<()> {
    if model.d_model() != data.d_model {
        bail!(Exit(
            EXIT_SHAPE,
            format!(
                "checkpoint d_model {} does not match data d_model {}",
                model.d_model(),
                data.d_model
            )
        ));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = tail(load_data(&a.data)?, a.holdout)?;
    check_shapes(&model, &data)?;
    let losses = match &a.loss_triples {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(parse_loss_triple(&text).with_context(|| format!("reading {}", p.display()))?)
        }
        None => None,
    };
    let truth = match &a.truth {
        Some(p) => Some(read_truth(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    if let Some(t) = &truth {
        if t.dictionary.cols() != model.d_model() {
            bail!(Exit(
                EXIT_SHAPE,
                format!(
                    "truth d_model {} does not match checkpoint d_model {}",
                    t.dictionary.cols(),
                    model.d_model()
                )
            ));
        }
    }
    let opts = EvalOptions {
        seed: a.seed,
        inter_samples: a.samples,
        ..Default::default()
    };
    let report = evaluate(&model, &data, truth.as_ref().map(|t| &t.dictionary), losses, &opts)?;
    create_dir(&a.out.out)?;
    write_file(&a.out.out.join("eval.jsonl"), report.to_json_line())?;
    write_file(&a.out.out.join("eval.tsv"), report.to_tsv())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn read_report(path: &Path) -> anyhow::Result<MetricsReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let line = text
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Exit(EXIT_IO, format!("{} is empty", path.display())))?;
    serde_json::from_str(line)
        .map_err(|e| Exit(EXIT_IO, format!("{}: not a metrics report: {e}", path.display())).into())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let out = &a.out.out;
    if let Some(paths) = &a.compare {
        let (ra, rb) = (read_report(&paths[0])?, read_report(&paths[1])?);
        let mut table = String::from("metric\ta\tb\tabs_delta\trel_delta\n");
        for d in compare_reports(&ra, &rb) {
            table.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                d.metric,
                d.a,
                d.b,
                d.abs_delta,
                fmt_opt(d.rel_delta)
            ));
        }
        create_dir(out)?;
        write_file(&out.join("compare.tsv"), &table)?;
        print!("{table}");
        return Ok(());
    }

    let model = load_model(a.checkpoint.as_ref().expect("required by clap"))?;
    let mut data = load_data(a.data.as_ref().expect("required by clap"))?;
    check_shapes(&model, &data)?;
    if a.label.is_some() || a.label_prefix.is_some() {
        data = data.token_subset(|l| {
            a.label.as_ref().is_none_or(|want| l == want)
                && a.label_prefix.as_ref().is_none_or(|p| l.starts_with(p.as_str()))
        })?;
        if data.is_empty() {
            bail!(Exit(EXIT_USAGE, "no tokens match the label filter".into()));
        }
    }
    let expert_analysis = a.intra_inter || a.cdf;
    if expert_analysis && model.routed().is_none() {
        bail!(Error::NoExperts);
    }
    if !(a.redundancy || a.intra_inter || a.cdf || a.overlap || a.similarity) {
        bail!(Exit(
            EXIT_USAGE,
            "select at least one of --redundancy --intra-inter --cdf --overlap --similarity --compare".into()
        ));
    }
    create_dir(out)?;

    if a.redundancy {
        let r = redundancy_fraction(&model.decoder_features(), a.threshold)?;
        let table = format!(
            "metric\tvalue\nredundancy_fraction\t{}\nthreshold\t{}\nexcluded_zero_norm\t{}\n",
            r.fraction, a.threshold, r.excluded
        );
        write_file(&out.join("redundancy.tsv"), &table)?;
        print!("{table}");
    }
    if a.intra_inter {
        let r = intra_inter_similarity(model.routed().expect("checked"), a.samples, &mut Rng::new(a.seed))?;
        let mut table = format!(
            "metric\tvalue\nintra_expert_sim\t{}\ninter_expert_sim\t{}\nsamples\t{}\n",
            r.intra, r.inter, a.samples
        );
        write_file(&out.join("intra_inter.tsv"), &table)?;
        print!("{table}");
        table = String::from("expert\tmean_pairwise_sim\n");
        for (e, s) in r.per_expert.iter().enumerate() {
            table.push_str(&format!("{e}\t{s}\n"));
        }
        write_file(&out.join("intra_per_expert.tsv"), &table)?;
    }
    if a.cdf {
        let cdf = expert_activation_cdf(&model, &data)?;
        write_file(&out.join("expert_cdf.tsv"), cdf.to_tsv())?;
        print!("{}", cdf.to_tsv());
    }
    if a.overlap || a.similarity {
        let n = data.n_tokens().min(a.max_tokens);
        let traces = model.forward_batch(&data.slice(0..n).data)?;
        let codes = code_sets(&traces, model.expert_width());
        if a.overlap {
            let h = overlap_histogram(&codes, model.k())?;
            write_file(&out.join("overlap_hist.tsv"), h.to_tsv())?;
            print!("{}", h.to_tsv());
        }
        if a.similarity {
            let s = activation_similarity(&codes, model.k())?;
            let table = format!("metric\tvalue\nactivation_similarity\t{s}\ntokens\t{n}\n");
            write_file(&out.join("similarity.tsv"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}
