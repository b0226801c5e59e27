//! Run configuration and the resumable training loop behind `arrowrl train`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{encode_all, EncodedSample, Response, Sample, TrainConfig, Vocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::grpo::{batch_indices, sft_step, train_step, GrpoStepStats, TrainState};
use crate::judge::{Judge, JudgeConfig, JudgeMode};
use crate::policy::{write_atomic, GradientAccumulator, InitScale, PolicyCheckpoint, PolicyDims, PolicyParams, Tensor};
use crate::reward::RewardConfig;
use crate::rng::stream_rng;
use crate::synthworld::{gen_split, world_vocab, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyBackend {
    Toy,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub backend: PolicyBackend,
    /// Hidden width of the toy policy.
    pub d: usize,
    pub init: InitScale,
    /// Command line of the bridge adapter process.
    pub bridge_command: Vec<String>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { backend: PolicyBackend::Toy, d: 32, init: InitScale::default(), bridge_command: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    /// Similarity backend for free-text comparisons.
    pub judge: JudgeMode,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self { judge: JudgeMode::Lexical }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub eval_every: usize,
    /// Held-out samples per task, generated from the world config.
    pub num_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { eval_every: 100, num_samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdsConfig {
    pub k: usize,
    /// Only samples whose `meta.format` is listed are scored; empty means all MCQ.
    pub formats: Vec<String>,
    pub shuffle_seed: u64,
    /// Evaluator checkpoints.
    pub evaluators: Vec<PathBuf>,
}

impl Default for TdsConfig {
    fn default() -> Self {
        Self {
            k: 100,
            formats: vec!["caption_match".into()],
            shuffle_seed: 0,
            evaluators: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset (`samples.jsonl`).
    pub data: PathBuf,
    /// Directory for checkpoints, metrics and reports.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data: PathBuf::from("samples.jsonl"), out: PathBuf::from("runs/default") }
    }
}

/// Everything a CLI invocation needs, loaded from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub reward: RewardSection,
    pub world: WorldConfig,
    pub judge: JudgeConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
    pub tds: TdsConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.world.validate()?;
        self.judge.validate().map_err(Error::Config)?;
        if self.eval.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.policy.d == 0 {
            return Err(Error::Config("policy width d must be positive".into()));
        }
        Ok(())
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig { alpha: self.train.alpha, gamma: self.train.gamma }
    }
}

/// Vocabulary covering the world's words and every word in `samples`.
pub fn build_vocab(samples: &[Sample]) -> Vocab {
    let mut words: Vec<String> = world_vocab().words()[3..].to_vec();
    for s in samples {
        for text in std::iter::once(&s.query)
            .chain(std::iter::once(&s.answer))
            .chain(s.options.iter().flatten())
        {
            words.extend(crate::domain::split_words(text));
        }
    }
    Vocab::new(words)
}

pub fn policy_dims(cfg: &RunConfig, samples: &[Sample], vocab: &Vocab) -> PolicyDims {
    let data_max = samples.iter().flat_map(|s| s.frames.iter()).copied().max().unwrap_or(0) as usize;
    PolicyDims {
        frame_vocab: cfg.world.frame_vocab().max(data_max + 1),
        text_vocab: vocab.len(),
        max_frames: cfg.train.max_frames,
        d: cfg.policy.d,
    }
}

pub fn init_policy(dims: PolicyDims, scale: InitScale, seed: u64) -> PolicyParams {
    PolicyParams::init_with(dims, scale, &mut stream_rng(seed, "init", 0))
}

pub const METRICS_HEADER: &str =
    "step,mean_reward,mean_fidelity,mean_reverse,gate_off_fraction,clip_fraction,mean_kl,loss,eval_accuracy";

pub fn metrics_row(stats: &GrpoStepStats, step: usize, eval: Option<f64>) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{},{},{},{},{},{},{},{},",
        step,
        stats.mean_reward,
        stats.mean_fidelity,
        stats.mean_reverse,
        stats.gate_off_fraction,
        stats.clip_fraction,
        stats.mean_kl,
        stats.loss
    );
    if let Some(e) = eval {
        let _ = write!(s, "{e}");
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateFile {
    format: String,
    version: u32,
    /// Completed steps.
    step: usize,
    policy: PolicyCheckpoint,
    reference: PolicyCheckpoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    velocity: Option<Vec<Tensor>>,
    #[serde(default)]
    reverse_cache: Vec<(usize, Response)>,
}

pub const STATE_FORMAT: &str = "arrowrl.train_state";

pub fn save_state(path: &Path, state: &TrainState, vocab: &Vocab) -> Result<()> {
    let file = StateFile {
        format: STATE_FORMAT.into(),
        version: 1,
        step: state.step,
        policy: PolicyCheckpoint::new(&state.params, vocab),
        reference: PolicyCheckpoint::new(&state.reference, vocab),
        velocity: state.velocity.as_ref().map(|v| v.t.iter().map(|(_, t)| t.clone()).collect()),
        reverse_cache: state.reverse_cache.iter().map(|(k, v)| (*k, v.clone())).collect(),
    };
    write_atomic(path, &serde_json::to_vec(&file)?)
}

pub fn load_state(path: &Path) -> Result<(TrainState, Vocab)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let f: StateFile = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if f.format != STATE_FORMAT || f.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported state file {:?} v{}", f.format, f.version)));
    }
    let (params, vocab) = f.policy.into_parts()?;
    let (reference, _) = f.reference.into_parts()?;
    let velocity = match f.velocity {
        None => None,
        Some(ts) => {
            let mut g = GradientAccumulator::zeros(params.dims);
            if ts.len() != 9 {
                return Err(Error::Checkpoint("velocity must hold nine tensors".into()));
            }
            for ((_, slot), t) in g.t.iter_mut().zip(ts) {
                if t.shape != slot.shape {
                    return Err(Error::Checkpoint("velocity shape mismatch".into()));
                }
                *slot = t;
            }
            Some(g)
        }
    };
    let state = TrainState {
        params,
        reference,
        velocity,
        step: f.step,
        reverse_cache: f.reverse_cache.into_iter().collect(),
    };
    Ok((state, vocab))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Grpo,
    Sft,
}

/// Inputs of a training run that do not live in the config.
pub struct TrainInputs<'a> {
    pub train: &'a [EncodedSample],
    pub eval: &'a [EncodedSample],
    pub vocab: &'a Vocab,
    pub judge: &'a Judge,
}

pub struct TrainOutput {
    pub state: TrainState,
    pub evals: Vec<(usize, EvalReport)>,
    pub stats: Vec<GrpoStepStats>,
}

/// Paths inside a run directory.
pub struct RunPaths {
    pub metrics: PathBuf,
    pub state: PathBuf,
    pub policy: PathBuf,
    pub evals: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> Self {
        Self {
            metrics: out.join("metrics.csv"),
            state: out.join("state.json"),
            policy: out.join("policy.json"),
            evals: out.join("eval.jsonl"),
        }
    }
}

/// Optional on-disk side of a run: metrics, evals and checkpoints.
pub struct Persist {
    pub paths: RunPaths,
    metrics: String,
    evals: String,
}

impl Persist {
    /// Start fresh, or continue from the state file in `out` when `resume` is set.
    pub fn open(out: &Path, resume: bool) -> Result<(Self, Option<(TrainState, Vocab)>)> {
        fs::create_dir_all(out)?;
        let paths = RunPaths::new(out);
        if resume && paths.state.exists() {
            let (state, vocab) = load_state(&paths.state)?;
            // rows past the saved step belong to work that is about to be redone
            let upto = state.step;
            let mut metrics = format!("{METRICS_HEADER}\n");
            for line in fs::read_to_string(&paths.metrics).unwrap_or_default().lines().skip(1) {
                let step = line.split(',').next().and_then(|f| f.parse::<usize>().ok());
                if step.is_some_and(|s| s <= upto) {
                    metrics.push_str(line);
                    metrics.push('\n');
                }
            }
            let mut evals = String::new();
            for line in fs::read_to_string(&paths.evals).unwrap_or_default().lines() {
                let v: Option<serde_json::Value> = serde_json::from_str(line).ok();
                let step = v.as_ref().and_then(|v| v.get("step")).and_then(serde_json::Value::as_u64);
                if step.is_some_and(|s| s as usize <= upto) {
                    evals.push_str(line);
                    evals.push('\n');
                }
            }
            Ok((Self { paths, metrics, evals }, Some((state, vocab))))
        } else {
            Ok((Self { paths, metrics: format!("{METRICS_HEADER}\n"), evals: String::new() }, None))
        }
    }

    fn flush(&self, state: &TrainState, vocab: &Vocab) -> Result<()> {
        write_atomic(&self.paths.metrics, self.metrics.as_bytes())?;
        write_atomic(&self.paths.evals, self.evals.as_bytes())?;
        save_state(&self.paths.state, state, vocab)?;
        crate::policy::save_policy(&self.paths.policy, &state.params, vocab)
    }
}

#[derive(Serialize)]
struct EvalLine<'a> {
    step: usize,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// Run `cfg.train.steps` steps from `state`, evaluating every `eval_every`
/// steps (and at step 0 on a fresh start).
pub fn train_loop(
    cfg: &RunConfig,
    mode: TrainMode,
    inputs: &TrainInputs<'_>,
    mut state: TrainState,
    mut persist: Option<&mut Persist>,
) -> Result<TrainOutput> {
    let train_cfg = &cfg.train;
    let reward = cfg.reward_config();
    let mut evals = Vec::new();
    let mut all_stats = Vec::new();
    let do_eval = !inputs.eval.is_empty();
    if do_eval && state.step == 0 {
        let r = evaluate(&state.params, inputs.eval, inputs.vocab, &reward, train_cfg.max_response_len)?;
        if let Some(p) = persist.as_deref_mut() {
            p.evals.push_str(&serde_json::to_string(&EvalLine { step: 0, report: &r })?);
            p.evals.push('\n');
        }
        evals.push((0, r));
    }
    while state.step < train_cfg.steps {
        let batch = batch_indices(train_cfg.seed, state.step, inputs.train.len(), train_cfg.batch_size);
        let stats = match mode {
            TrainMode::Grpo => train_step(&mut state, inputs.train, &batch, inputs.vocab, inputs.judge, train_cfg)?,
            TrainMode::Sft => sft_step(&mut state, inputs.train, &batch, train_cfg)?,
        };
        let done = state.step;
        let judge_outage = mode == TrainMode::Grpo && stats.groups_skipped == batch.len() && !batch.is_empty();
        let eval_now = do_eval && (done % cfg.eval.eval_every == 0 || done == train_cfg.steps);
        let eval = if eval_now {
            let r = evaluate(&state.params, inputs.eval, inputs.vocab, &reward, train_cfg.max_response_len)?;
            let h = r.headline();
            if let Some(p) = persist.as_deref_mut() {
                p.evals.push_str(&serde_json::to_string(&EvalLine { step: done, report: &r })?);
                p.evals.push('\n');
            }
            evals.push((done, r));
            Some(h)
        } else {
            None
        };
        if let Some(p) = persist.as_deref_mut() {
            p.metrics.push_str(&metrics_row(&stats, done, eval));
            p.metrics.push('\n');
            if done % cfg.eval.eval_every == 0 || done == train_cfg.steps || judge_outage {
                p.flush(&state, inputs.vocab)?;
            }
        }
        all_stats.push(stats);
        if judge_outage {
            return Err(Error::JudgeOutage { step: done });
        }
    }
    if let Some(p) = persist.as_deref_mut() {
        p.flush(&state, inputs.vocab)?;
    }
    Ok(TrainOutput { state, evals, stats: all_stats })
}

/// Held-out evaluation samples for `cfg`.
pub fn eval_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let mut w = cfg.world.clone();
    w.num_samples = cfg.eval.num_samples;
    gen_split(&w, "eval")
}

/// Generate train and eval data from the world config and train in memory.
pub fn train_in_memory(cfg: &RunConfig, mode: TrainMode, judge: &Judge) -> Result<(TrainOutput, Vocab)> {
    cfg.validate()?;
    let train = crate::synthworld::gen_dataset(&cfg.world)?;
    let eval = eval_samples(cfg)?;
    let vocab = build_vocab(&train);
    let dims = policy_dims(cfg, &train, &vocab);
    let enc_train = encode_all(&train, &vocab, cfg.train.max_frames)?;
    let enc_eval = encode_all(&eval, &vocab, cfg.train.max_frames)?;
    let state = TrainState::new(init_policy(dims, cfg.policy.init, cfg.train.seed));
    let inputs = TrainInputs { train: &enc_train, eval: &enc_eval, vocab: &vocab, judge };
    Ok((train_loop(cfg, mode, &inputs, state, None)?, vocab))
}
