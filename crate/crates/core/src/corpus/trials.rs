//! Speaker-verification trial lists.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use super::{io_err, CorpusError, ManifestRow};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub positive: bool,
    pub a: String,
    pub b: String,
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", u8::from(self.positive), self.a, self.b)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

/// A rule broken by one row of a trial list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrialViolation {
    UnknownId { row: usize, id: String },
    SelfPair { row: usize },
    PositiveDifferentSpeaker { row: usize },
    PositiveSameSession { row: usize },
    NegativeSameSpeaker { row: usize },
    NegativeDifferentSex { row: usize },
    Duplicate { row: usize },
}

fn key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_owned(), b.to_owned())
    } else {
        (b.to_owned(), a.to_owned())
    }
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.trials.iter().filter(|t| t.positive).count()
    }

    /// Checks every row against the manifest: positives share a speaker but
    /// not a session, negatives share a sex but not a speaker, and no
    /// unordered pair repeats.
    pub fn validate(&self, rows: &[ManifestRow]) -> Vec<TrialViolation> {
        let by_id: HashMap<&str, &ManifestRow> = rows.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (row, t) in self.trials.iter().enumerate() {
            let (Some(a), Some(b)) = (by_id.get(t.a.as_str()), by_id.get(t.b.as_str())) else {
                let id = if by_id.contains_key(t.a.as_str()) { &t.b } else { &t.a };
                out.push(TrialViolation::UnknownId { row, id: id.clone() });
                continue;
            };
            if a.id == b.id {
                out.push(TrialViolation::SelfPair { row });
            }
            if t.positive {
                if a.speaker_id != b.speaker_id {
                    out.push(TrialViolation::PositiveDifferentSpeaker { row });
                }
                if a.session_id == b.session_id {
                    out.push(TrialViolation::PositiveSameSession { row });
                }
            } else {
                if a.speaker_id == b.speaker_id {
                    out.push(TrialViolation::NegativeSameSpeaker { row });
                }
                if a.sex != b.sex {
                    out.push(TrialViolation::NegativeDifferentSex { row });
                }
            }
            if !seen.insert(key(&t.a, &t.b)) {
                out.push(TrialViolation::Duplicate { row });
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut text = String::new();
        for t in &self.trials {
            text.push_str(&t.to_string());
            text.push('\n');
        }
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|detail| CorpusError::Trials(format!("{}: {detail}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let [label, a, b] = fields[..] else {
                return Err(format!("line {}: expected 'label id_a id_b'", n + 1));
            };
            let positive = match label {
                "1" => true,
                "0" => false,
                other => return Err(format!("line {}: label {other:?} is not 0 or 1", n + 1)),
            };
            trials.push(Trial {
                positive,
                a: a.to_owned(),
                b: b.to_owned(),
            });
        }
        Ok(Self { trials })
    }
}

fn pick<R: Rng + ?Sized>(pool: &[(usize, usize)], n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut idx = sample(rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Samples `n_pos` positive and `n_neg` negative trials without replacement
/// from all admissible unordered pairs of `rows`, then shuffles them.
pub fn generate_trials<R: Rng + ?Sized>(
    rows: &[ManifestRow],
    n_pos: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<TrialList, CorpusError> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let (a, b) = (&rows[i], &rows[j]);
            if a.speaker_id == b.speaker_id {
                if a.session_id != b.session_id {
                    positives.push((i, j));
                }
            } else if a.sex == b.sex {
                negatives.push((i, j));
            }
        }
    }
    if n_pos > positives.len() {
        return Err(CorpusError::Trials(format!(
            "requested {n_pos} positive trials but only {} pairs share a speaker across different sessions",
            positives.len()
        )));
    }
    if n_neg > negatives.len() {
        return Err(CorpusError::Trials(format!(
            "requested {n_neg} negative trials but only {} pairs of different same-sex speakers exist",
            negatives.len()
        )));
    }
    let mut trials: Vec<Trial> = pick(&positives, n_pos, rng)
        .into_iter()
        .map(|p| (true, p))
        .chain(pick(&negatives, n_neg, rng).into_iter().map(|p| (false, p)))
        .map(|(positive, (i, j))| {
            let (a, b) = if rng.gen::<bool>() { (i, j) } else { (j, i) };
            Trial {
                positive,
                a: rows[a].id.clone(),
                b: rows[b].id.clone(),
            }
        })
        .collect();
    rand::seq::SliceRandom::shuffle(&mut trials[..], rng);
    Ok(TrialList { trials })
}
