use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use arrowrl::bridge::BridgeClient;
use arrowrl::domain::{encode_all, read_samples_jsonl, write_samples_jsonl, EncodedSample, Sample, TaskKind, Vocab};
use arrowrl::judge::{Judge, JudgeMode, RemoteJudge};
use arrowrl::policy::{load_policy, write_atomic, PolicyParams, RolloutPolicy, ToyPolicy};
use arrowrl::run::{
    build_vocab, eval_samples, init_policy, policy_dims, train_loop, Persist, PolicyBackend, RunConfig, TrainInputs,
    TrainMode,
};
use arrowrl::synthworld::gen_split;
use arrowrl::tds::{bench_report, curate_subset, eval_orderings, score_all, TdsRecord};
use arrowrl::grpo::TrainState;
use arrowrl::Error;

#[derive(Parser)]
#[command(name = "arrowrl", version, about = "Reverse-aware GRPO training and temporal divergence analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (samples.jsonl).
    Gen {
        #[command(flatten)]
        common: Common,
        /// Split name; "train" and "eval" draw independent samples.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a policy and write checkpoints and metrics.csv into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Dataset to train on (overrides paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the state saved in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score samples with evaluator checkpoints; writes tds_report.jsonl and bench_report.json.
    Tds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluator checkpoint (repeatable; overrides tds.evaluators).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum)]
        policy: Option<Backend>,
    },
    /// Select the top-k direction-sensitive samples from a TDS report.
    Curate {
        #[command(flatten)]
        common: Common,
        /// Report to curate (default: tds_report.jsonl in --out).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Summarize a metrics.csv into report.md and accuracy.svg.
    Report {
        #[command(flatten)]
        common: Common,
        /// Metrics file (default: metrics.csv in --out).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "group-size")]
    group_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Supervised fine-tuning on the targets instead of GRPO.
    #[arg(long)]
    sft: bool,
    #[arg(long, value_enum)]
    judge: Option<JudgeArg>,
    #[arg(long, value_enum)]
    policy: Option<Backend>,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    Lexical,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Toy,
    Bridge,
}

impl From<Backend> for PolicyBackend {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Toy => PolicyBackend::Toy,
            Backend::Bridge => PolicyBackend::Bridge,
        }
    }
}

/// A failure with its exit code: 1 for usage or config errors, 2 at runtime.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

fn runtime(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidSample { .. } | Error::InvalidPairing { .. } => 1,
            _ => 2,
        };
        Failure { code, err: e.into() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { common, split } => {
            let cfg = load_config(&common)?;
            cmd_gen(&cfg, &split, &common.out.unwrap_or_else(|| cfg.paths.data.clone()))
        }
        Command::Train { common, train, data, resume } => {
            let mut cfg = load_config(&common)?;
            apply_train_flags(&mut cfg, &train);
            if let Some(d) = data {
                cfg.paths.data = d;
            }
            cfg.validate()?;
            let mode = if train.sft { TrainMode::Sft } else { TrainMode::Grpo };
            cmd_train(&cfg, mode, resume)
        }
        Command::Tds { common, data, checkpoints, policy } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = data {
                cfg.paths.data = d;
            }
            if !checkpoints.is_empty() {
                cfg.tds.evaluators = checkpoints;
            }
            if let Some(p) = policy {
                cfg.policy.backend = p.into();
            }
            cmd_tds(&cfg)
        }
        Command::Curate { common, report, k } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = k {
                cfg.tds.k = k;
            }
            let report = report.unwrap_or_else(|| cfg.paths.out.join("tds_report.jsonl"));
            cmd_curate(&cfg, &report)
        }
        Command::Report { common, metrics } => {
            let cfg = load_config(&common)?;
            let metrics = metrics.unwrap_or_else(|| cfg.paths.out.join("metrics.csv"));
            let out = common.out.unwrap_or_else(|| metrics.parent().map(Path::to_path_buf).unwrap_or_default());
            cmd_report(&metrics, &out)
        }
    }
}

/// Defaults, then the config file, then command-line flags.
fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.world.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = o.clone();
    }
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(usage(anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(runtime)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    if let Some(a) = f.alpha {
        cfg.train.alpha = a;
    }
    if let Some(g) = f.gamma {
        cfg.train.gamma = g;
    }
    if let Some(g) = f.group_size {
        cfg.train.group_size = g;
    }
    if let Some(s) = f.steps {
        cfg.train.steps = s;
    }
    if let Some(j) = f.judge {
        cfg.reward.judge = match j {
            JudgeArg::Lexical => JudgeMode::Lexical,
            JudgeArg::Remote => JudgeMode::Remote,
        };
    }
    if let Some(p) = f.policy {
        cfg.policy.backend = p.into();
    }
}

fn read_data(path: &Path) -> CliResult<Vec<Sample>> {
    let file = fs::File::open(path).with_context(|| format!("cannot open dataset {}", path.display())).map_err(usage)?;
    Ok(read_samples_jsonl(BufReader::new(file))?)
}

fn cmd_gen(cfg: &RunConfig, split: &str, out: &Path) -> CliResult<()> {
    let samples = gen_split(&cfg.world, split)?;
    let mut buf = Vec::new();
    write_samples_jsonl(&mut buf, &samples)?;
    write_atomic(out, &buf)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, mode: TrainMode, resume: bool) -> CliResult<()> {
    if cfg.policy.backend == PolicyBackend::Bridge {
        return Err(usage(anyhow!("training needs the in-process toy policy; the bridge serves rollouts and analysis only")));
    }
    let train = read_data(&cfg.paths.data)?;
    let (mut persist, resumed) = Persist::open(&cfg.paths.out, resume)?;
    let (state, vocab) = match resumed {
        Some((state, vocab)) => (state, vocab),
        None => {
            let vocab = build_vocab(&train);
            let dims = policy_dims(cfg, &train, &vocab);
            (TrainState::new(init_policy(dims, cfg.policy.init, cfg.train.seed)), vocab)
        }
    };
    for s in &train {
        s.validate(state.params.dims.frame_vocab, &vocab)?;
    }
    let enc_train = encode_all(&train, &vocab, cfg.train.max_frames)?;
    let enc_eval = encode_all(&eval_samples(cfg)?, &vocab, cfg.train.max_frames)?;
    let judge = match cfg.reward.judge {
        JudgeMode::Lexical => Judge::lexical(),
        JudgeMode::Remote => Judge::remote(RemoteJudge::http(cfg.judge.clone()).map_err(|e| usage(Error::from(e)))?),
    };
    let text = toml::to_string(cfg).map_err(runtime)?;
    write_atomic(&cfg.paths.out.join("config.toml"), text.as_bytes())?;
    let inputs = TrainInputs { train: &enc_train, eval: &enc_eval, vocab: &vocab, judge: &judge };
    let out = train_loop(cfg, mode, &inputs, state, Some(&mut persist))?;
    if let Some((step, r)) = out.evals.last() {
        println!("step {step}: eval accuracy {:.4}", r.headline());
    }
    println!("wrote {}", cfg.paths.out.display());
    Ok(())
}

/// MCQ samples whose format is listed in `formats` (all MCQ when empty).
fn tds_samples(samples: Vec<Sample>, formats: &[String]) -> Vec<Sample> {
    samples
        .into_iter()
        .filter(|s| s.task == TaskKind::Mcq)
        .filter(|s| formats.is_empty() || s.meta.get("format").is_some_and(|f| formats.contains(f)))
        .collect()
}

fn cmd_tds(cfg: &RunConfig) -> CliResult<()> {
    if cfg.tds.evaluators.is_empty() {
        return Err(usage(anyhow!("at least one evaluator checkpoint is required")));
    }
    for p in &cfg.tds.evaluators {
        if !p.exists() {
            return Err(usage(anyhow!("evaluator checkpoint {} does not exist", p.display())));
        }
    }
    let samples = tds_samples(read_data(&cfg.paths.data)?, &cfg.tds.formats);
    if samples.is_empty() {
        return Err(usage(anyhow!("no MCQ samples match tds.formats")));
    }
    let tag = |p: &Path| p.display().to_string();
    let (records, accuracies) = match cfg.policy.backend {
        PolicyBackend::Toy => {
            let mut loaded: Vec<(String, PolicyParams)> = Vec::new();
            let mut vocab: Option<Vocab> = None;
            for p in &cfg.tds.evaluators {
                let (params, v) = load_policy(p)?;
                if vocab.as_ref().is_some_and(|known| known.words() != v.words()) {
                    return Err(usage(anyhow!("evaluator {} uses a different vocabulary", p.display())));
                }
                vocab = Some(v);
                loaded.push((tag(p), params));
            }
            let vocab = vocab.expect("at least one evaluator");
            let max_frames = loaded[0].1.dims.max_frames;
            let enc = encode_all(&samples, &vocab, max_frames)?;
            let policies: Vec<ToyPolicy<'_>> = loaded.iter().map(|(t, p)| ToyPolicy::new(p, t.clone())).collect();
            analyse(cfg, &policies.iter().map(|p| p as &dyn RolloutPolicy).collect::<Vec<_>>(), &enc)?
        }
        PolicyBackend::Bridge => {
            let vocab = build_vocab(&samples);
            let enc = encode_all(&samples, &vocab, cfg.train.max_frames)?;
            let mut clients = Vec::new();
            for p in &cfg.tds.evaluators {
                let mut command = cfg.policy.bridge_command.clone();
                command.push(p.display().to_string());
                clients.push(BridgeClient::spawn(tag(p), &command, Some(&vocab))?);
            }
            analyse(cfg, &clients.iter().map(|c| c as &dyn RolloutPolicy).collect::<Vec<_>>(), &enc)?
        }
    };
    let report = bench_report("tds", &records, accuracies, None);
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r).map_err(runtime)?);
        lines.push('\n');
    }
    fs::create_dir_all(&cfg.paths.out).map_err(runtime)?;
    write_atomic(&cfg.paths.out.join("tds_report.jsonl"), lines.as_bytes())?;
    write_atomic(
        &cfg.paths.out.join("bench_report.json"),
        serde_json::to_string_pretty(&report).map_err(runtime)?.as_bytes(),
    )?;
    println!(
        "scored {} samples with {} evaluators; mean TDS {:.6}",
        report.samples,
        cfg.tds.evaluators.len(),
        report.mean_tds_all
    );
    Ok(())
}

type Analysis = (Vec<TdsRecord>, Vec<(String, arrowrl::tds::OrderingAccuracy)>);

fn analyse(cfg: &RunConfig, evaluators: &[&dyn RolloutPolicy], enc: &[EncodedSample]) -> CliResult<Analysis> {
    let records = score_all(evaluators, enc)?;
    let mut acc = Vec::new();
    for e in evaluators {
        acc.push((e.tag().to_string(), eval_orderings(*e, enc, cfg.tds.shuffle_seed)?));
    }
    Ok((records, acc))
}

fn cmd_curate(cfg: &RunConfig, report: &Path) -> CliResult<()> {
    let text = fs::read_to_string(report).with_context(|| format!("cannot read {}", report.display())).map_err(usage)?;
    let mut records: Vec<TdsRecord> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        records.push(
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}: malformed record", report.display(), i + 1))
                .map_err(usage)?,
        );
    }
    let curation = curate_subset(&mut records, cfg.tds.k)?;
    let bench = bench_report("curated", &records, Vec::new(), Some(&curation.selected));
    let mut ids = String::new();
    for id in &curation.selected {
        ids.push_str(id);
        ids.push('\n');
    }
    let summary = serde_json::json!({
        "k": cfg.tds.k,
        "summary": curation.summary,
        "mean_tds_all": bench.mean_tds_all,
        "mean_tds_selected": bench.mean_tds_selected,
    });
    fs::create_dir_all(&cfg.paths.out).map_err(runtime)?;
    write_atomic(&cfg.paths.out.join("curated_ids.txt"), ids.as_bytes())?;
    write_atomic(
        &cfg.paths.out.join("curation_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(runtime)?.as_bytes(),
    )?;
    let s = &curation.summary;
    println!(
        "input {}; removed {} unanimous-correct, {} reverse-beats-forward; {} survivors; selected {}",
        s.input, s.removed_unanimous_correct, s.removed_reverse_beats_forward, s.survivors, s.selected
    );
    Ok(())
}

struct MetricsRow {
    step: usize,
    mean_reward: f64,
    mean_fidelity: f64,
    mean_reverse: f64,
    gate_off_fraction: f64,
    eval: Option<f64>,
}

fn parse_metrics(text: &str) -> anyhow::Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("metrics file is empty"))?;
    if header != arrowrl::run::METRICS_HEADER {
        return Err(anyhow!("unexpected metrics header {header:?}"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(anyhow!("metrics line {} has {} fields", i + 2, f.len()));
        }
        let num = |j: usize| f[j].parse::<f64>().with_context(|| format!("metrics line {}", i + 2));
        rows.push(MetricsRow {
            step: f[0].parse().with_context(|| format!("metrics line {}", i + 2))?,
            mean_reward: num(1)?,
            mean_fidelity: num(2)?,
            mean_reverse: num(3)?,
            gate_off_fraction: num(4)?,
            eval: if f[8].is_empty() { None } else { Some(num(8)?) },
        });
    }
    if rows.is_empty() {
        return Err(anyhow!("metrics file has no rows"));
    }
    Ok(rows)
}

fn cmd_report(metrics: &Path, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(metrics).with_context(|| format!("cannot read {}", metrics.display())).map_err(usage)?;
    let rows = parse_metrics(&text).map_err(usage)?;
    let evals: Vec<(usize, f64)> = rows.iter().filter_map(|r| r.eval.map(|e| (r.step, e))).collect();
    let last = rows.last().expect("non-empty");
    let mut md = String::new();
    let _ = writeln!(md, "# Training report\n");
    let _ = writeln!(md, "Source: `{}`, {} steps.\n", metrics.display(), rows.len());
    let _ = writeln!(md, "| metric | value |\n|---|---|");
    let _ = writeln!(md, "| final step | {} |", last.step);
    if let Some(&(s, e)) = evals.last() {
        let _ = writeln!(md, "| final eval accuracy | {e:.4} (step {s}) |");
    }
    if let Some(&(s, e)) = evals.iter().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0))) {
        let _ = writeln!(md, "| best eval accuracy | {e:.4} (step {s}) |");
    }
    let _ = writeln!(md, "| final mean reward | {:.4} |", last.mean_reward);
    let _ = writeln!(md, "\n## Rewards\n");
    let _ = writeln!(md, "| step | mean_reward | mean_fidelity | mean_reverse | gate_off_fraction |\n|---|---|---|---|---|");
    let stride = rows.len().div_ceil(20).max(1);
    for (i, r) in rows.iter().enumerate() {
        if i % stride == 0 || i + 1 == rows.len() {
            let _ = writeln!(
                md,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                r.step, r.mean_reward, r.mean_fidelity, r.mean_reverse, r.gate_off_fraction
            );
        }
    }
    if !evals.is_empty() {
        let _ = writeln!(md, "\n![eval accuracy](accuracy.svg)");
    }
    fs::create_dir_all(out).map_err(runtime)?;
    if !evals.is_empty() {
        write_atomic(&out.join("accuracy.svg"), accuracy_svg(&evals).as_bytes())?;
    }
    write_atomic(&out.join("report.md"), md.as_bytes())?;
    println!("wrote {}", out.join("report.md").display());
    Ok(())
}

fn accuracy_svg(points: &[(usize, f64)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let max_step = points.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let x = |s: usize| pad + (w - 2.0 * pad) * s as f64 / max_step;
    let y = |a: f64| h - pad - (h - 2.0 * pad) * a.clamp(0.0, 1.0);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            svg,
            r##"<line x1="{pad}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/><text x="{2:.1}" y="{3:.1}" font-size="11" text-anchor="end">{t:.2}</text>"##,
            y(t),
            w - pad,
            pad - 6.0,
            y(t) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">step</text><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
        w / 2.0,
        h - 12.0,
        w - pad,
        h - pad + 16.0,
        max_step
    );
    let pts: Vec<String> = points.iter().map(|&(s, a)| format!("{:.1},{:.1}", x(s), y(a))).collect();
    let _ = writeln!(svg, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##, pts.join(" "));
    svg.push_str("</svg>\n");
    svg
}
