//! Indicative frames per reward hypothesis, the one-bit choice between
//! them, and the averaged reward used when no choice is made.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extrapolate::{HypothesisPair, Provenance, UnlabeledSet};
use crate::obs::{observation_pgm, Observation};
use crate::ppo::RewardSource;

pub const DEFAULT_PANEL_K: usize = 4;
pub const PROMPT: &str = "Select hypothesis [0/1]:";
pub const MANIFEST_FORMAT: &str = "coinlab-choice/1";

#[derive(Debug, Error)]
pub enum DisambiguateError {
    #[error("unlabeled set is empty")]
    EmptyUnlabeled,
    #[error("panel size must be at least 1")]
    ZeroK,
    #[error("hypothesis bit must be 0 or 1, got {0}")]
    InvalidBit(u8),
    #[error("no valid choice read from input")]
    NoChoice,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DisambiguateError + '_ {
    move |source| DisambiguateError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelEntry {
    pub provenance: Provenance,
    pub score: f64,
    pub observation: Observation,
}

/// Top-k unlabeled observations for each head, scores descending.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicativePanel {
    pub k: usize,
    pub heads: [Vec<PanelEntry>; 2],
}

impl IndicativePanel {
    /// File name of an exported frame.
    pub fn image_name(head: usize, rank: usize) -> String {
        format!("head{head}_rank{rank}.pgm")
    }

    /// SHA-256 of every rendered frame in head-then-rank order.
    pub fn hashes(&self) -> Vec<PanelHash> {
        self.heads
            .iter()
            .enumerate()
            .flat_map(|(head, entries)| {
                entries.iter().enumerate().map(move |(rank, e)| PanelHash {
                    head,
                    rank,
                    seed: e.provenance.seed,
                    t: e.provenance.t,
                    score: e.score,
                    sha256: hex::encode(Sha256::digest(observation_pgm(&e.observation))),
                })
            })
            .collect()
    }

    /// Writes each frame as a PGM into `dir` and returns the paths.
    pub fn export(&self, dir: &Path) -> Result<Vec<PathBuf>, DisambiguateError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut paths = Vec::new();
        for (head, entries) in self.heads.iter().enumerate() {
            for (rank, e) in entries.iter().enumerate() {
                let path = dir.join(Self::image_name(head, rank));
                fs::write(&path, observation_pgm(&e.observation)).map_err(io_err(&path))?;
                paths.push(path);
            }
        }
        Ok(paths)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelHash {
    pub head: usize,
    pub rank: usize,
    pub seed: u64,
    pub t: u32,
    pub score: f64,
    pub sha256: String,
}

/// The `k` highest-scoring unlabeled observations per head. Ties keep
/// provenance order.
pub fn indicative_frames(pair: &HypothesisPair, unlabeled: &UnlabeledSet, k: usize) -> Result<IndicativePanel, DisambiguateError> {
    if unlabeled.records.is_empty() {
        return Err(DisambiguateError::EmptyUnlabeled);
    }
    if k == 0 {
        return Err(DisambiguateError::ZeroK);
    }
    let scored: Vec<(Provenance, [f64; 2], &Observation)> = unlabeled
        .records
        .iter()
        .map(|r| (r.provenance, pair.head_probs(&r.observation), &r.observation))
        .collect();
    let top = |head: usize| {
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| {
            scored[b].1[head]
                .total_cmp(&scored[a].1[head])
                .then(scored[a].0.cmp(&scored[b].0))
        });
        order
            .into_iter()
            .take(k)
            .map(|i| PanelEntry {
                provenance: scored[i].0,
                score: scored[i].1[head],
                observation: scored[i].2.clone(),
            })
            .collect::<Vec<_>>()
    };
    Ok(IndicativePanel {
        k,
        heads: [top(0), top(1)],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChoiceSource {
    Human,
    Config,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisChoice {
    bit: u8,
    pub source: ChoiceSource,
}

impl HypothesisChoice {
    pub fn new(bit: u8, source: ChoiceSource) -> Result<Self, DisambiguateError> {
        if bit > 1 {
            return Err(DisambiguateError::InvalidBit(bit));
        }
        Ok(Self { bit, source })
    }

    pub fn bit(&self) -> u8 {
        self.bit
    }
}

/// Record of the single bit that entered training, with the panel it was
/// chosen from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceManifest {
    pub format: String,
    pub k: usize,
    pub panel: Vec<PanelHash>,
    pub bit: u8,
    pub source: ChoiceSource,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub reward_source: RewardSource,
}

impl ChoiceManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<(), DisambiguateError> {
        crate::checkpoint::ensure_parent(path).and_then(|()| fs::write(path, self.to_json())).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DisambiguateError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DisambiguateError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }
}

/// Turns the chosen bit into the reward source for fine-tuning.
pub fn select_hypothesis(panel: &IndicativePanel, choice: HypothesisChoice, timestamp: u64) -> (RewardSource, ChoiceManifest) {
    let source = RewardSource::Model {
        head: usize::from(choice.bit),
    };
    let manifest = ChoiceManifest {
        format: MANIFEST_FORMAT.to_string(),
        k: panel.k,
        panel: panel.hashes(),
        bit: choice.bit,
        source: choice.source,
        timestamp,
        reward_source: source,
    };
    (source, manifest)
}

/// Shows the exported frame paths and reads a bit, re-prompting on invalid
/// input until `input` is exhausted.
pub fn prompt_choice(image_paths: &[PathBuf], input: &mut dyn BufRead, output: &mut dyn Write) -> Result<HypothesisChoice, DisambiguateError> {
    let stdout = Path::new("<stdout>");
    for p in image_paths {
        writeln!(output, "{}", p.display()).map_err(io_err(stdout))?;
    }
    loop {
        write!(output, "{PROMPT} ").map_err(io_err(stdout))?;
        output.flush().map_err(io_err(stdout))?;
        let mut line = String::new();
        let n = input.read_line(&mut line).map_err(io_err(Path::new("<stdin>")))?;
        if n == 0 {
            return Err(DisambiguateError::NoChoice);
        }
        match line.trim() {
            "0" => return HypothesisChoice::new(0, ChoiceSource::Human),
            "1" => return HypothesisChoice::new(1, ChoiceSource::Human),
            _ => {}
        }
    }
}

/// Mean of the two head rewards.
pub fn prudent_reward(pair: &HypothesisPair, obs: &Observation) -> f64 {
    let p = pair.head_probs(obs);
    (p[0] + p[1]) / 2.0
}
