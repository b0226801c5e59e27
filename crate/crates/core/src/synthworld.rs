//! Synthetic "temporal token world": short frame-token clips of simple
//! processes, some of which read differently when played backwards.
//!
//! Each process family owns a band of `band_width` consecutive frame values,
//! so a clip's family is visible from its values and only its direction has
//! to be read from the order. `ramp_up` and `ramp_down` share a band and are
//! exact mirrors of each other.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{concat_with_separator, reverse_frames, FrameSeq, Sample, TaskKind, Vocab, SEP};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    RampUp,
    RampDown,
    BurstDecay,
    Assemble,
    Cyclic,
    StaticHold,
    NoisyWalk,
}

impl ProcessKind {
    pub const ALL: [ProcessKind; 7] = [
        ProcessKind::RampUp,
        ProcessKind::RampDown,
        ProcessKind::BurstDecay,
        ProcessKind::Assemble,
        ProcessKind::Cyclic,
        ProcessKind::StaticHold,
        ProcessKind::NoisyWalk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProcessKind::RampUp => "ramp_up",
            ProcessKind::RampDown => "ramp_down",
            ProcessKind::BurstDecay => "burst_decay",
            ProcessKind::Assemble => "assemble",
            ProcessKind::Cyclic => "cyclic",
            ProcessKind::StaticHold => "static_hold",
            ProcessKind::NoisyWalk => "noisy_walk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Whether reversed playback changes the clip's meaning.
    pub fn is_sensitive(self) -> bool {
        !matches!(self, ProcessKind::Cyclic | ProcessKind::StaticHold)
    }

    /// Index of the value band the family draws from.
    pub fn band(self) -> u32 {
        match self {
            ProcessKind::RampUp | ProcessKind::RampDown => 0,
            ProcessKind::BurstDecay => 1,
            ProcessKind::Assemble => 2,
            ProcessKind::NoisyWalk => 3,
            ProcessKind::Cyclic => 4,
            ProcessKind::StaticHold => 5,
        }
    }

    /// One-word caption of the clip played forwards.
    pub fn caption(self) -> &'static str {
        match self {
            ProcessKind::RampUp => "filling",
            ProcessKind::RampDown => "draining",
            ProcessKind::BurstDecay => "shattering",
            ProcessKind::Assemble => "assembling",
            ProcessKind::Cyclic => "oscillating",
            ProcessKind::StaticHold => "resting",
            ProcessKind::NoisyWalk => "climbing",
        }
    }

    /// Caption of the clip played backwards.
    pub fn reverse_caption(self) -> &'static str {
        match self {
            ProcessKind::RampUp => "draining",
            ProcessKind::RampDown => "filling",
            ProcessKind::BurstDecay => "reforming",
            ProcessKind::Assemble => "dismantling",
            ProcessKind::NoisyWalk => "sliding",
            k => k.caption(),
        }
    }

    /// Two-word free-text answer for the clip played forwards. Mirror
    /// answers share no word.
    pub fn answer(self) -> &'static str {
        match self {
            ProcessKind::RampUp => "level rises",
            ProcessKind::RampDown => "tank drains",
            ProcessKind::BurstDecay => "glass shatters",
            ProcessKind::Assemble => "parts join",
            ProcessKind::Cyclic => "pendulum swings",
            ProcessKind::StaticHold => "block stays",
            ProcessKind::NoisyWalk => "walker climbs",
        }
    }

    pub fn reverse_answer(self) -> &'static str {
        match self {
            ProcessKind::RampUp => "tank drains",
            ProcessKind::RampDown => "level rises",
            ProcessKind::BurstDecay => "shards fuse",
            ProcessKind::Assemble => "pieces scatter",
            ProcessKind::NoisyWalk => "cart slides",
            k => k.answer(),
        }
    }
}

impl fmt::Display for ProcessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sample formats the world can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldTask {
    /// Two-option MCQ: which half of `[x, SEP, x']` is played in reverse.
    Direction,
    /// MCQ over caption words for a single clip.
    CaptionMatch,
    Caption,
    OpenQa,
}

impl WorldTask {
    pub const ALL: [WorldTask; 4] = [WorldTask::Direction, WorldTask::CaptionMatch, WorldTask::Caption, WorldTask::OpenQa];

    pub fn as_str(self) -> &'static str {
        match self {
            WorldTask::Direction => "direction",
            WorldTask::CaptionMatch => "caption_match",
            WorldTask::Caption => "caption",
            WorldTask::OpenQa => "open_qa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    pub fn task_kind(self) -> TaskKind {
        match self {
            WorldTask::Direction | WorldTask::CaptionMatch => TaskKind::Mcq,
            WorldTask::Caption => TaskKind::Caption,
            WorldTask::OpenQa => TaskKind::OpenQa,
        }
    }

    pub fn query(self) -> &'static str {
        match self {
            WorldTask::Direction => "which segment is reversed",
            WorldTask::CaptionMatch => "which caption fits the clip",
            WorldTask::Caption => "describe the clip",
            WorldTask::OpenQa => "what happens over time",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            WorldTask::Direction => "dir",
            WorldTask::CaptionMatch => "cm",
            WorldTask::Caption => "cap",
            WorldTask::OpenQa => "qa",
        }
    }
}

pub const DIRECTION_OPTIONS: [&str; 2] = ["A. first segment", "B. second segment"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    FirstReversed,
    SecondReversed,
}

impl Direction {
    pub fn answer(self) -> &'static str {
        match self {
            Direction::FirstReversed => "A",
            Direction::SecondReversed => "B",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Samples generated per task.
    pub num_samples: usize,
    /// Frames per clip (one segment).
    pub segment_len: usize,
    /// Frame values available to each process family.
    pub band_width: u32,
    pub sensitive_fraction: f64,
    /// Probability of one random in-band frame substitution per clip.
    pub noise: f64,
    pub seed: u64,
    pub sep_len: usize,
    /// Options per caption-matching question.
    pub caption_options: usize,
    pub tasks: Vec<WorldTask>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_samples: 200,
            segment_len: 6,
            band_width: 10,
            sensitive_fraction: 0.7,
            noise: 0.0,
            seed: 0,
            sep_len: 1,
            caption_options: 4,
            tasks: WorldTask::ALL.to_vec(),
        }
    }
}

const NUM_BANDS: u32 = 6;

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.sensitive_fraction) {
            return fail("sensitive_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return fail("noise must lie in [0, 1]");
        }
        if self.segment_len < 2 {
            return fail("segment_len must be at least 2");
        }
        if (self.band_width as usize) < self.segment_len + 2 {
            return fail("band_width must exceed segment_len by at least 2");
        }
        if self.sep_len == 0 {
            return fail("sep_len must be at least 1");
        }
        if !(2..=CAPTION_WORDS.len()).contains(&self.caption_options) {
            return fail("caption_options must lie in [2, 10]");
        }
        if self.tasks.is_empty() {
            return fail("at least one task is required");
        }
        Ok(())
    }

    /// Frame vocabulary size, SEP included.
    pub fn frame_vocab(&self) -> usize {
        1 + (NUM_BANDS * self.band_width) as usize
    }

    /// Longest frame sequence the world produces.
    pub fn max_sequence_len(&self) -> usize {
        let direction = self.tasks.contains(&WorldTask::Direction);
        if direction {
            2 * self.segment_len + self.sep_len
        } else {
            self.segment_len
        }
    }

    fn band_base(&self, kind: ProcessKind) -> u32 {
        1 + kind.band() * self.band_width
    }

    /// The family owning frame value `v`, as one representative kind.
    pub fn band_of(&self, v: u32) -> Option<u32> {
        if v == SEP || v as usize >= self.frame_vocab() {
            return None;
        }
        Some((v - 1) / self.band_width)
    }
}

const CAPTION_WORDS: [&str; 10] = [
    "filling",
    "draining",
    "shattering",
    "reforming",
    "assembling",
    "dismantling",
    "climbing",
    "sliding",
    "oscillating",
    "resting",
];

/// Every word the world's texts can contain.
pub fn world_vocab() -> Vocab {
    let mut words: Vec<String> = Vec::new();
    for t in WorldTask::ALL {
        words.extend(t.query().split_whitespace().map(str::to_string));
    }
    for o in DIRECTION_OPTIONS {
        words.extend(o.split_whitespace().map(|w| w.trim_end_matches('.').to_string()));
    }
    words.extend(CAPTION_WORDS.iter().map(|w| w.to_string()));
    for k in ProcessKind::ALL {
        words.extend(k.answer().split_whitespace().map(str::to_string));
        words.extend(k.reverse_answer().split_whitespace().map(str::to_string));
    }
    Vocab::new(words)
}

/// Forward-played frames of one clip of `kind`.
pub fn gen_clip<R: Rng + ?Sized>(kind: ProcessKind, cfg: &WorldConfig, rng: &mut R) -> Vec<u32> {
    let t = cfg.segment_len;
    let w = cfg.band_width;
    let base = cfg.band_base(kind);
    let rel: Vec<u32> = match kind {
        ProcessKind::RampUp | ProcessKind::RampDown => {
            let mut v = rand::seq::index::sample(rng, w as usize, t).into_vec();
            v.sort_unstable();
            let v: Vec<u32> = v.into_iter().map(|x| x as u32).collect();
            if kind == ProcessKind::RampDown {
                v.into_iter().rev().collect()
            } else {
                v
            }
        }
        ProcessKind::BurstDecay => {
            // 0, then the peak, then a strictly decreasing tail above 0
            let mut tail = rand::seq::index::sample(rng, (w - 2) as usize, t - 2).into_vec();
            tail.sort_unstable_by(|a, b| b.cmp(a));
            let mut v = vec![0, w - 1];
            v.extend(tail.into_iter().map(|x| x as u32 + 1));
            v
        }
        ProcessKind::Assemble => {
            let steps = t.div_ceil(2);
            let mut levels = rand::seq::index::sample(rng, w as usize, steps).into_vec();
            levels.sort_unstable();
            (0..t).map(|i| levels[i / 2] as u32).collect()
        }
        ProcessKind::NoisyWalk => loop {
            let mut x: i64 = rng.gen_range(0..3);
            let mut v = vec![x as u32];
            for _ in 1..t {
                let step = *[-1i64, 1, 2, 2].choose(rng).expect("non-empty");
                x = (x + step).clamp(0, i64::from(w) - 1);
                v.push(x as u32);
            }
            if v[t - 1] > v[0] {
                break v;
            }
        },
        ProcessKind::Cyclic => {
            let half = t.div_ceil(2);
            let mut up = rand::seq::index::sample(rng, w as usize, half).into_vec();
            up.sort_unstable();
            let up: Vec<u32> = up.into_iter().map(|x| x as u32).collect();
            let mut v = up.clone();
            let mirror = if t % 2 == 0 { half } else { half - 1 };
            v.extend(up[..mirror].iter().rev());
            v
        }
        ProcessKind::StaticHold => vec![rng.gen_range(0..w); t],
    };
    rel.into_iter().map(|x| x + base).collect()
}

fn maybe_noise<R: Rng + ?Sized>(frames: &mut [u32], cfg: &WorldConfig, rng: &mut R) {
    if cfg.noise > 0.0 && rng.gen_bool(cfg.noise) {
        let i = rng.gen_range(0..frames.len());
        let band = cfg.band_of(frames[i]).expect("generated frame in range");
        frames[i] = 1 + band * cfg.band_width + rng.gen_range(0..cfg.band_width);
    }
}

fn meta(kind: ProcessKind, task: WorldTask, playback: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("process".to_string(), kind.as_str().to_string()),
        ("sensitive".to_string(), kind.is_sensitive().to_string()),
        ("format".to_string(), task.as_str().to_string()),
        ("playback".to_string(), playback.to_string()),
    ])
}

/// One sample of `task` built around a clip of `kind`.
pub fn gen_sample<R: Rng + ?Sized>(
    kind: ProcessKind,
    task: WorldTask,
    id: String,
    cfg: &WorldConfig,
    rng: &mut R,
) -> Result<Sample> {
    let mut clip = gen_clip(kind, cfg, rng);
    maybe_noise(&mut clip, cfg, rng);
    match task {
        WorldTask::Direction => {
            if kind == ProcessKind::RampDown {
                // its reversal is itself a forward process, so "reversed" is ill-defined
                return Err(Error::InvalidPairing { kind: kind.to_string(), task: task.as_str().into() });
            }
            let fwd = FrameSeq::new(clip)?;
            let rev = reverse_frames(&fwd);
            let (frames, dir) = if rng.gen_bool(0.5) {
                (concat_with_separator(&fwd, &rev, cfg.sep_len)?, Direction::SecondReversed)
            } else {
                (concat_with_separator(&rev, &fwd, cfg.sep_len)?, Direction::FirstReversed)
            };
            Ok(Sample {
                id,
                task: TaskKind::Mcq,
                frames: frames.into_inner(),
                query: task.query().into(),
                options: Some(DIRECTION_OPTIONS.iter().map(|s| s.to_string()).collect()),
                answer: dir.answer().into(),
                meta: meta(kind, task, "concat"),
            })
        }
        WorldTask::CaptionMatch | WorldTask::Caption | WorldTask::OpenQa => {
            let reversed = kind.is_sensitive() && rng.gen_bool(0.5);
            if reversed {
                clip.reverse();
            }
            let playback = if reversed { "reverse" } else { "forward" };
            let (caption, mirror) = if reversed {
                (kind.reverse_caption(), kind.caption())
            } else {
                (kind.caption(), kind.reverse_caption())
            };
            let (answer, options) = match task {
                WorldTask::CaptionMatch => {
                    let mut opts = vec![caption];
                    if mirror != caption {
                        opts.push(mirror);
                    }
                    let mut pool: Vec<&str> = CAPTION_WORDS.iter().copied().filter(|w| !opts.contains(w)).collect();
                    pool.shuffle(rng);
                    opts.extend(pool.into_iter().take(cfg.caption_options - opts.len()));
                    opts.shuffle(rng);
                    (caption.to_string(), Some(opts.into_iter().map(str::to_string).collect()))
                }
                WorldTask::Caption => (caption.to_string(), None),
                _ => {
                    let a = if reversed { kind.reverse_answer() } else { kind.answer() };
                    (a.to_string(), None)
                }
            };
            Ok(Sample {
                id,
                task: task.task_kind(),
                frames: clip,
                query: task.query().into(),
                options,
                answer,
                meta: meta(kind, task, playback),
            })
        }
    }
}

fn kinds_for(task: WorldTask, sensitive: bool) -> &'static [ProcessKind] {
    use ProcessKind::*;
    match (task, sensitive) {
        (_, false) => &[Cyclic, StaticHold],
        (WorldTask::Direction, true) => &[RampUp, BurstDecay, Assemble, NoisyWalk],
        (_, true) => &[RampUp, RampDown, BurstDecay, Assemble, NoisyWalk],
    }
}

/// Samples for one named split ("train", "eval", ...). A pure function of
/// `(cfg, split)`; each task holds `round(f·n)` sensitive samples.
pub fn gen_split(cfg: &WorldConfig, split: &str) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_samples * cfg.tasks.len());
    for &task in &cfg.tasks {
        let mut rng: StreamRng = stream_rng(cfg.seed, &format!("world/{split}/{}", task.as_str()), 0);
        let n_sens = (cfg.sensitive_fraction * cfg.num_samples as f64).round() as usize;
        let mut flags: Vec<bool> = (0..cfg.num_samples).map(|i| i < n_sens).collect();
        flags.shuffle(&mut rng);
        for (i, sensitive) in flags.into_iter().enumerate() {
            let kind = *kinds_for(task, sensitive).choose(&mut rng).expect("non-empty");
            let id = format!("{split}-{}-{i:05}", task.id_prefix());
            out.push(gen_sample(kind, task, id, cfg, &mut rng)?);
        }
    }
    Ok(out)
}

/// The default dataset: the "train" split.
pub fn gen_dataset(cfg: &WorldConfig) -> Result<Vec<Sample>> {
    gen_split(cfg, "train")
}

/// Whether `seg` is a forward-played clip of the family owning its values.
fn is_forward_clip(seg: &[u32], band: u32) -> bool {
    let n = seg.len();
    let strictly_up = seg.windows(2).all(|w| w[0] < w[1]);
    match band {
        0 => strictly_up,
        1 => {
            let peak = seg.iter().copied().max().unwrap_or(0);
            n >= 2 && seg[0] < seg[1] && seg[1] == peak && seg[1..].windows(2).all(|w| w[0] > w[1])
        }
        2 => seg.windows(2).all(|w| w[0] <= w[1]) && seg[n - 1] > seg[0],
        3 => seg[n - 1] > seg[0],
        _ => false,
    }
}

/// Brute-force direction oracle for a `[a, SEP.., b]` direction sample:
/// the half matching its family's forward template is the forward one.
pub fn oracle_direction(frames: &FrameSeq, cfg: &WorldConfig) -> Result<Direction> {
    let toks = frames.tokens();
    let bad = |m: &str| Error::MalformedConcat(m.to_string());
    let first_sep = toks.iter().position(|&t| t == SEP).ok_or_else(|| bad("no separator"))?;
    let after = toks[first_sep..].iter().position(|&t| t != SEP).ok_or_else(|| bad("nothing after separator"))?;
    let (a, b) = (&toks[..first_sep], &toks[first_sep + after..]);
    if b.contains(&SEP) {
        return Err(bad("more than one separator run"));
    }
    if a.is_empty() || a.len() != b.len() {
        return Err(bad("halves differ in length"));
    }
    let band = cfg.band_of(a[0]).ok_or_else(|| bad("frame outside vocabulary"))?;
    if a.iter().chain(b).any(|&v| cfg.band_of(v) != Some(band)) {
        return Err(bad("halves mix process families"));
    }
    match (is_forward_clip(a, band), is_forward_clip(b, band)) {
        (true, false) => Ok(Direction::SecondReversed),
        (false, true) => Ok(Direction::FirstReversed),
        _ => Err(Error::Unsupported("direction undefined for this clip".into())),
    }
}
