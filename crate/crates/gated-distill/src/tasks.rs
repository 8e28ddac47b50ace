//! Synthetic reasoning tasks, dataset generation, and the noisy teacher
//! channel.
//!
//! Two tasks with exact program oracles keep every experiment fully
//! checkable: concatenating the last letters of a list of names, and
//! tracking which object each agent holds through a sequence of swaps.
//! Both produce short targets over a small alphabet, so a desk-scale
//! model can learn them and a test can brute-force them.
//!
//! The noisy teacher channel models an imperfect teacher without training
//! one to be wrong on purpose: with probability `error_rate` an emission
//! replaces the gold target with a same-length wrong answer, and the
//! per-token distributions it reports are peaked rows whose sharpness
//! depends on `calibration`. A perfectly calibrated wrong teacher
//! (`calibration = 1`) emits near-uniform rows, which is exactly the
//! signal confidence gating is designed to catch.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{self, TokenizerError, EOS, VOCAB_SIZE};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task '{0}' (expected last_letter or shuffled_objects)")]
    UnknownTask(String),
    #[error("bad task parameters: {0}")]
    BadParams(String),
    #[error("could not generate {needed} distinct examples (got {got}); input space too small")]
    SpaceExhausted { needed: usize, got: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad dataset line {line}: {source}")]
    BadRecord {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LastLetter,
    ShuffledObjects,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self, TaskError> {
        match s {
            "last_letter" => Ok(TaskKind::LastLetter),
            "shuffled_objects" => Ok(TaskKind::ShuffledObjects),
            other => Err(TaskError::UnknownTask(other.into())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LastLetter => "last_letter",
            TaskKind::ShuffledObjects => "shuffled_objects",
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One input/target pair. `corrupted` marks records whose target came from
/// a noisy teacher emission rather than the task oracle; freshly generated
/// data always has it false (and omits it on disk).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningExample {
    pub input_text: String,
    pub target_text: String,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "is_false")]
    pub corrupted: bool,
    pub seed_id: u64,
}

/// Name pool for the last-letter task. Fixed so datasets are reproducible
/// from seeds alone.
pub const NAMES: [&str; 200] = [
    "Max", "Mikey", "Cynthia", "Holly", "Aaron", "Abigail", "Adam", "Adrian",
    "Aisha", "Alan", "Albert", "Alexa", "Alice", "Amber", "Amir", "Amy",
    "Andre", "Angela", "Anita", "Anna", "Anthony", "April", "Archie", "Ariel",
    "Arthur", "Ashley", "Astrid", "Audrey", "Austin", "Barbara", "Barry", "Beatrice",
    "Benjamin", "Bernard", "Bianca", "Blake", "Bonnie", "Boris", "Brandon", "Brenda",
    "Brian", "Bridget", "Bruce", "Bruno", "Caleb", "Cameron", "Carla", "Carlos",
    "Carmen", "Carol", "Casey", "Cedric", "Celia", "Chad", "Charles", "Chloe",
    "Chris", "Claire", "Clara", "Clark", "Claudia", "Clifford", "Colin", "Connor",
    "Cora", "Corey", "Craig", "Curtis", "Daisy", "Damian", "Daniel", "Daphne",
    "Darren", "David", "Dawn", "Dean", "Deborah", "Dennis", "Derek", "Diana",
    "Diego", "Dmitri", "Dolores", "Dominic", "Donald", "Donna", "Doris", "Douglas",
    "Dylan", "Edgar", "Edith", "Edward", "Elaine", "Elena", "Elias", "Ellen",
    "Elliot", "Emily", "Emma", "Eric", "Erica", "Ernest", "Esther", "Ethan",
    "Eugene", "Eva", "Evan", "Evelyn", "Ezra", "Faith", "Felix", "Fiona",
    "Frank", "Gary", "Gavin", "Gemma", "George", "Gerald", "Gina", "Gloria",
    "Gordon", "Grace", "Grant", "Greta", "Gregory", "Hannah", "Harold", "Harriet",
    "Harry", "Hazel", "Heather", "Hector", "Helen", "Henry", "Howard", "Hugo",
    "Ian", "Irene", "Iris", "Isaac", "Isabel", "Ivan", "Jack", "Jacob",
    "Jade", "James", "Janet", "Jason", "Jasper", "Jenna", "Jeremy", "Jessica",
    "Joan", "Joel", "John", "Jonah", "Jordan", "Joseph", "Joyce", "Julia",
    "Julian", "Karen", "Karl", "Kate", "Keith", "Kelly", "Kevin", "Kira",
    "Kurt", "Kyle", "Laura", "Leah", "Leon", "Lewis", "Lily", "Linda",
    "Lisa", "Logan", "Lucas", "Lucy", "Luke", "Lydia", "Marcus", "Maria",
    "Marie", "Mark", "Martha", "Martin", "Mary", "Mason", "Megan", "Molly",
    "Nancy", "Nathan", "Nina", "Noah", "Nora", "Oliver", "Olivia", "Oscar",
];

/// The last-letter rule as a pure function of the word list.
pub fn last_letter_answer(words: &[&str]) -> String {
    words
        .iter()
        .filter_map(|w| w.chars().last())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Samples `num_words` names (with replacement) and asks for the
/// concatenation of their last letters.
pub fn gen_last_letter(num_words: usize, rng_seed: u64) -> Result<ReasoningExample, TaskError> {
    if num_words == 0 {
        return Err(TaskError::BadParams("num_words must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let words: Vec<&str> = (0..num_words)
        .map(|_| NAMES[rng.random_range(0..NAMES.len())])
        .collect();
    Ok(ReasoningExample {
        input_text: words.join(" "),
        target_text: last_letter_answer(&words),
        task: TaskKind::LastLetter,
        corrupted: false,
        seed_id: rng_seed,
    })
}

fn agent_char(a: usize) -> char {
    (b'a' + a as u8) as char
}

/// Builds a swap-tracking instance: agents start holding a random
/// permutation of the digits, exchange hands pairwise `num_swaps` times,
/// and one agent is queried. The text reads
/// `"a:0 b:1 c:2 | a-b | c-a | ? b"` and the target is the queried
/// agent's final digit. The target is computed by simulating the swaps
/// one at a time.
pub fn gen_shuffled_objects(
    num_agents: usize,
    num_swaps: usize,
    rng_seed: u64,
) -> Result<ReasoningExample, TaskError> {
    if !(2..=10).contains(&num_agents) {
        return Err(TaskError::BadParams(format!(
            "num_agents must be in 2..=10, got {num_agents}"
        )));
    }
    if num_swaps == 0 {
        return Err(TaskError::BadParams("num_swaps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut held: Vec<usize> = (0..num_agents).collect();
    held.shuffle(&mut rng);
    let mut text = held
        .iter()
        .enumerate()
        .map(|(a, d)| format!("{}:{}", agent_char(a), d))
        .collect::<Vec<_>>()
        .join(" ");
    for _ in 0..num_swaps {
        let i = rng.random_range(0..num_agents);
        let j = loop {
            let j = rng.random_range(0..num_agents);
            if j != i {
                break j;
            }
        };
        text.push_str(&format!(" | {}-{}", agent_char(i), agent_char(j)));
        held.swap(i, j);
    }
    let q = rng.random_range(0..num_agents);
    text.push_str(&format!(" | ? {}", agent_char(q)));
    Ok(ReasoningExample {
        input_text: text,
        target_text: held[q].to_string(),
        task: TaskKind::ShuffledObjects,
        corrupted: false,
        seed_id: rng_seed,
    })
}

// ---------------------------------------------------------------------------
// Noisy teacher channel
// ---------------------------------------------------------------------------

/// Parameters of the synthetic imperfect teacher.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoisyTeacherSpec {
    /// Probability an emission replaces the gold target with a wrong one.
    pub error_rate: f64,
    /// How honest the reported distributions are when the answer is wrong:
    /// 0 keeps them as sharp as clean ones, 1 flattens them to uniform.
    pub calibration: f64,
    /// Probability mass placed on the emitted token in a clean row.
    pub peak_prob: f64,
}

impl NoisyTeacherSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.error_rate) {
            return Err(TaskError::BadParams(format!(
                "error_rate must be in [0, 1], got {}",
                self.error_rate
            )));
        }
        if !in_unit(self.calibration) {
            return Err(TaskError::BadParams(format!(
                "calibration must be in [0, 1], got {}",
                self.calibration
            )));
        }
        if !(self.peak_prob > 0.0 && self.peak_prob < 1.0) {
            return Err(TaskError::BadParams(format!(
                "peak_prob must be in (0, 1), got {}",
                self.peak_prob
            )));
        }
        Ok(())
    }
}

/// What the teacher hands the student for one example: a target string
/// (possibly wrong) and one reported distribution per supervision step,
/// covering the target tokens and the trailing end-of-sequence step.
#[derive(Debug, Clone)]
pub struct TeacherEmission {
    pub supervision_text: String,
    pub corrupted: bool,
    pub distributions: Vec<Vec<f64>>,
}

fn target_alphabet(task: TaskKind) -> &'static [u8] {
    match task {
        TaskKind::LastLetter => b"abcdefghijklmnopqrstuvwxyz",
        TaskKind::ShuffledObjects => b"0123456789",
    }
}

fn corrupt_target(gold: &str, task: TaskKind, rng: &mut impl Rng) -> Result<String, TaskError> {
    if gold.is_empty() {
        return Err(TaskError::BadParams(
            "cannot corrupt an empty target".into(),
        ));
    }
    let alpha = target_alphabet(task);
    loop {
        let cand: String = gold
            .chars()
            .map(|_| alpha[rng.random_range(0..alpha.len())] as char)
            .collect();
        if cand != gold {
            return Ok(cand);
        }
    }
}

/// Draws one emission for `example`. A corrupted draw keeps the target
/// length but changes its content, and softens the reported rows by
/// `calibration`: the peak becomes
/// `(1 - calibration) * peak_prob + calibration / V`, which at
/// `calibration = 1` makes the row exactly uniform. Off-peak mass is
/// always spread evenly.
pub fn noisy_teacher_emit(
    example: &ReasoningExample,
    spec: &NoisyTeacherSpec,
    rng: &mut impl Rng,
) -> Result<TeacherEmission, TaskError> {
    spec.validate()?;
    let corrupted = rng.random::<f64>() < spec.error_rate;
    let text = if corrupted {
        corrupt_target(&example.target_text, example.task, rng)?
    } else {
        example.target_text.clone()
    };
    let v = VOCAB_SIZE as f64;
    let peak = if corrupted {
        (1.0 - spec.calibration) * spec.peak_prob + spec.calibration / v
    } else {
        spec.peak_prob
    };
    let off = (1.0 - peak) / (v - 1.0);
    let mut steps = tokenizer::encode(&text)?;
    steps.push(EOS);
    let distributions = steps
        .iter()
        .map(|&t| {
            let mut row = vec![off; VOCAB_SIZE];
            row[t] = peak;
            row
        })
        .collect();
    Ok(TeacherEmission {
        supervision_text: text,
        corrupted,
        distributions,
    })
}

// ---------------------------------------------------------------------------
// Dataset assembly and JSONL IO
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataGenSpec {
    pub task: TaskKind,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub base_seed: u64,
    /// Last-letter: names per example.
    pub num_words: usize,
    /// Shuffled-objects: agents and swap count per example.
    pub num_agents: usize,
    pub num_swaps: usize,
}

impl DataGenSpec {
    pub fn defaults(task: TaskKind) -> Self {
        DataGenSpec {
            task,
            train: 800,
            val: 100,
            test: 200,
            base_seed: 1234,
            num_words: 4,
            num_agents: 3,
            num_swaps: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<ReasoningExample>,
    pub val: Vec<ReasoningExample>,
    pub test: Vec<ReasoningExample>,
}

/// Generates train/val/test splits with no repeated input across the whole
/// dataset, walking seeds upward from `base_seed` and skipping collisions.
pub fn gen_dataset(spec: &DataGenSpec) -> Result<DatasetSplits, TaskError> {
    let total = spec.train + spec.val + spec.test;
    if total == 0 {
        return Err(TaskError::BadParams("empty dataset requested".into()));
    }
    let mut seen: HashSet<String> = HashSet::with_capacity(total);
    let mut all: Vec<ReasoningExample> = Vec::with_capacity(total);
    let mut seed = spec.base_seed;
    let max_attempts = 200u64 * total as u64;
    let mut attempts = 0u64;
    while all.len() < total {
        if attempts >= max_attempts {
            return Err(TaskError::SpaceExhausted {
                needed: total,
                got: all.len(),
            });
        }
        let ex = match spec.task {
            TaskKind::LastLetter => gen_last_letter(spec.num_words, seed)?,
            TaskKind::ShuffledObjects => {
                gen_shuffled_objects(spec.num_agents, spec.num_swaps, seed)?
            }
        };
        attempts += 1;
        seed = seed.wrapping_add(1);
        if seen.insert(ex.input_text.clone()) {
            all.push(ex);
        }
    }
    let test = all.split_off(spec.train + spec.val);
    let val = all.split_off(spec.train);
    Ok(DatasetSplits {
        train: all,
        val,
        test,
    })
}

pub fn write_jsonl(path: &Path, examples: &[ReasoningExample]) -> Result<(), TaskError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ReasoningExample>, TaskError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| TaskError::BadRecord {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Writes `train.jsonl`, `val.jsonl`, and `test.jsonl` into `dir`.
pub fn write_splits(dir: &Path, splits: &DatasetSplits) -> Result<(), TaskError> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &splits.train)?;
    write_jsonl(&dir.join("val.jsonl"), &splits.val)?;
    write_jsonl(&dir.join("test.jsonl"), &splits.test)?;
    Ok(())
}

pub fn read_splits(dir: &Path) -> Result<DatasetSplits, TaskError> {
    Ok(DatasetSplits {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        val: read_jsonl(&dir.join("val.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::{confidence_normalized, ProbabilityDistribution};

    #[test]
    fn name_pool_is_well_formed() {
        assert_eq!(NAMES.len(), 200);
        let set: HashSet<&str> = NAMES.iter().copied().collect();
        assert_eq!(set.len(), 200, "duplicate names in pool");
        for n in NAMES {
            tokenizer::encode(n).expect("name must tokenize");
            assert!(!n.is_empty());
        }
    }

    #[test]
    fn last_letter_worked_example() {
        assert_eq!(
            last_letter_answer(&["Max", "Mikey", "Cynthia", "Holly"]),
            "xyay"
        );
    }

    #[test]
    fn last_letter_matches_brute_force_oracle() {
        for seed in 0..10_000u64 {
            let ex = gen_last_letter(4, seed).unwrap();
            let words: Vec<&str> = ex.input_text.split_whitespace().collect();
            assert_eq!(words.len(), 4);
            let expect: String = words
                .iter()
                .map(|w| w.chars().last().unwrap().to_ascii_lowercase())
                .collect();
            assert_eq!(ex.target_text, expect, "seed {seed}");
            assert!(!ex.corrupted);
            assert_eq!(ex.seed_id, seed);
        }
    }

    // Reverse-composition oracle: applying swaps s1..sm to the holdings is
    // the same as applying the transpositions to the queried index in
    // reverse order and reading the initial assignment there.
    fn compose_oracle(input: &str) -> String {
        let segs: Vec<&str> = input.split(" | ").collect();
        let initial: Vec<(char, usize)> = segs[0]
            .split(' ')
            .map(|p| {
                let mut it = p.split(':');
                let agent = it.next().unwrap().chars().next().unwrap();
                let digit: usize = it.next().unwrap().parse().unwrap();
                (agent, digit)
            })
            .collect();
        let idx_of = |c: char| (c as u8 - b'a') as usize;
        let query = segs[segs.len() - 1]
            .strip_prefix("? ")
            .unwrap()
            .chars()
            .next()
            .unwrap();
        let mut pos = idx_of(query);
        for seg in segs[1..segs.len() - 1].iter().rev() {
            let mut it = seg.split('-');
            let i = idx_of(it.next().unwrap().chars().next().unwrap());
            let j = idx_of(it.next().unwrap().chars().next().unwrap());
            if pos == i {
                pos = j;
            } else if pos == j {
                pos = i;
            }
        }
        initial[pos].1.to_string()
    }

    #[test]
    fn shuffled_objects_matches_composition_oracle() {
        for seed in 0..10_000u64 {
            let ex = gen_shuffled_objects(3, 4, seed).unwrap();
            assert_eq!(ex.target_text, compose_oracle(&ex.input_text), "seed {seed}");
        }
        // A larger cast as well.
        for seed in 0..500u64 {
            let ex = gen_shuffled_objects(5, 6, seed).unwrap();
            assert_eq!(ex.target_text, compose_oracle(&ex.input_text), "seed {seed}");
        }
    }

    #[test]
    fn shuffled_objects_format() {
        let ex = gen_shuffled_objects(3, 4, 42).unwrap();
        let segs: Vec<&str> = ex.input_text.split(" | ").collect();
        assert_eq!(segs.len(), 2 + 4);
        let initial: Vec<&str> = segs[0].split(' ').collect();
        assert_eq!(initial.len(), 3);
        let digits: HashSet<char> = initial
            .iter()
            .map(|p| p.chars().last().unwrap())
            .collect();
        assert_eq!(digits.len(), 3, "initial digits must be distinct");
        assert!(segs[5].starts_with("? "));
        assert_eq!(ex.target_text.len(), 1);
        tokenizer::encode(&ex.input_text).unwrap();
    }

    #[test]
    fn generator_parameter_validation() {
        assert!(gen_last_letter(0, 1).is_err());
        assert!(gen_shuffled_objects(1, 4, 1).is_err());
        assert!(gen_shuffled_objects(11, 4, 1).is_err());
        assert!(gen_shuffled_objects(3, 0, 1).is_err());
    }

    fn spec(rho: f64, kappa: f64) -> NoisyTeacherSpec {
        NoisyTeacherSpec {
            error_rate: rho,
            calibration: kappa,
            peak_prob: 0.95,
        }
    }

    #[test]
    fn channel_corruption_rate_and_shape() {
        let ex = gen_last_letter(4, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let s = spec(0.3, 1.0);
        let mut corrupted = 0usize;
        for _ in 0..10_000 {
            let em = noisy_teacher_emit(&ex, &s, &mut rng).unwrap();
            assert_eq!(em.supervision_text.len(), ex.target_text.len());
            assert_eq!(em.distributions.len(), ex.target_text.len() + 1);
            for row in &em.distributions {
                assert_eq!(row.len(), VOCAB_SIZE);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
            if em.corrupted {
                corrupted += 1;
                assert_ne!(em.supervision_text, ex.target_text);
            } else {
                assert_eq!(em.supervision_text, ex.target_text);
                // Clean rows put their peak on the emitted token.
                let ids = tokenizer::encode(&em.supervision_text).unwrap();
                for (t, row) in ids.iter().zip(&em.distributions) {
                    assert_eq!(row[*t], 0.95);
                }
            }
        }
        let rate = corrupted as f64 / 10_000.0;
        assert!(
            (rate - 0.3).abs() < 0.02,
            "corruption rate {rate} far from 0.3"
        );
    }

    #[test]
    fn calibrated_wrong_rows_are_uniform_and_low_confidence() {
        let ex = gen_last_letter(4, 7).unwrap();
        let s = spec(1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let em = noisy_teacher_emit(&ex, &s, &mut rng).unwrap();
        assert!(em.corrupted);
        for row in &em.distributions {
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo < 1e-15, "calibration 1 must flatten rows exactly");
        }

        // Confidence separation between clean and fully-calibrated wrong
        // rows is wide enough to gate on.
        let clean = noisy_teacher_emit(&ex, &spec(0.0, 1.0), &mut rng).unwrap();
        let conf = |rows: &Vec<Vec<f64>>| -> f64 {
            let cs: Vec<f64> = rows
                .iter()
                .map(|r| {
                    let d = ProbabilityDistribution::new(r.clone()).unwrap();
                    confidence_normalized(&d, VOCAB_SIZE).unwrap()
                })
                .collect();
            cs.iter().sum::<f64>() / cs.len() as f64
        };
        assert!(conf(&clean.distributions) - conf(&em.distributions) >= 0.2);
    }

    #[test]
    fn uncalibrated_wrong_rows_stay_sharp() {
        let ex = gen_last_letter(4, 7).unwrap();
        let s = spec(1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let em = noisy_teacher_emit(&ex, &s, &mut rng).unwrap();
        assert!(em.corrupted);
        let ids = tokenizer::encode(&em.supervision_text).unwrap();
        for (t, row) in ids.iter().zip(&em.distributions) {
            assert_eq!(row[*t], 0.95, "confidently-wrong peak must stay sharp");
        }
    }

    #[test]
    fn channel_parameter_validation() {
        let ex = gen_last_letter(2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bad in [
            NoisyTeacherSpec { error_rate: -0.1, calibration: 1.0, peak_prob: 0.9 },
            NoisyTeacherSpec { error_rate: 0.3, calibration: 1.5, peak_prob: 0.9 },
            NoisyTeacherSpec { error_rate: 0.3, calibration: 1.0, peak_prob: 1.0 },
            NoisyTeacherSpec { error_rate: 0.3, calibration: 1.0, peak_prob: 0.0 },
        ] {
            assert!(noisy_teacher_emit(&ex, &bad, &mut rng).is_err());
        }
    }

    #[test]
    fn dataset_splits_are_disjoint_and_sized() {
        let mut spec = DataGenSpec::defaults(TaskKind::LastLetter);
        spec.train = 50;
        spec.val = 10;
        spec.test = 20;
        let splits = gen_dataset(&spec).unwrap();
        assert_eq!(splits.train.len(), 50);
        assert_eq!(splits.val.len(), 10);
        assert_eq!(splits.test.len(), 20);
        let mut seen = HashSet::new();
        for ex in splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
        {
            assert!(seen.insert(ex.input_text.clone()), "duplicate input across splits");
        }
    }

    #[test]
    fn tight_input_space_errors_instead_of_looping() {
        // Two agents and one swap admit very few distinct inputs.
        let spec = DataGenSpec {
            task: TaskKind::ShuffledObjects,
            train: 500,
            val: 0,
            test: 0,
            base_seed: 0,
            num_words: 4,
            num_agents: 2,
            num_swaps: 1,
        };
        assert!(matches!(
            gen_dataset(&spec),
            Err(TaskError::SpaceExhausted { .. })
        ));
    }

    #[test]
    fn jsonl_roundtrip_and_corrupted_field_elision() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = DataGenSpec::defaults(TaskKind::ShuffledObjects);
        spec.train = 12;
        spec.val = 3;
        spec.test = 5;
        let splits = gen_dataset(&spec).unwrap();
        write_splits(dir.path(), &splits).unwrap();
        let back = read_splits(dir.path()).unwrap();
        assert_eq!(splits.train, back.train);
        assert_eq!(splits.val, back.val);
        assert_eq!(splits.test, back.test);
        let raw = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        assert!(!raw.contains("corrupted"), "false flag should be elided");

        // A corrupted record survives the roundtrip with its flag.
        let mut ex = splits.train[0].clone();
        ex.corrupted = true;
        let p = dir.path().join("one.jsonl");
        write_jsonl(&p, std::slice::from_ref(&ex)).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("\"corrupted\":true"));
        assert_eq!(read_jsonl(&p).unwrap()[0], ex);
    }

    #[test]
    fn bad_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{\"not\": \"an example\"}\n").unwrap();
        assert!(matches!(
            read_jsonl(&p),
            Err(TaskError::BadRecord { line: 1, .. })
        ));
    }

    #[test]
    fn task_kind_parse_roundtrip() {
        for t in [TaskKind::LastLetter, TaskKind::ShuffledObjects] {
            assert_eq!(TaskKind::parse(t.name()).unwrap(), t);
        }
        assert!(matches!(
            TaskKind::parse("sudoku"),
            Err(TaskError::UnknownTask(_))
        ));
    }
}
