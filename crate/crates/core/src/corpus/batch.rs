//! Length-bucketed speech batches, cropped speaker batches, and
//! resumable per-epoch batch streams.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{crop, CorpusError, CropMode, Utterance, Vocabulary};

/// Row-major `[batch, width]` audio, right-padded with zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedAudio {
    pub samples: Vec<f64>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl PaddedAudio {
    pub fn from_slices(items: &[&[f64]]) -> Self {
        let width = items.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut samples = vec![0.0; width * items.len()];
        for (row, item) in samples.chunks_mut(width.max(1)).zip(items) {
            row[..item.len()].copy_from_slice(item);
        }
        Self {
            samples,
            lengths: items.iter().map(|s| s.len()).collect(),
            width,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechBatch {
    pub ids: Vec<String>,
    pub audio: PaddedAudio,
    /// Token sequences (no blanks) per item.
    pub targets: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerBatch {
    pub ids: Vec<String>,
    pub audio: PaddedAudio,
    /// Class indices into the training-speaker set.
    pub labels: Vec<usize>,
}

/// Contiguous class indices for the training speakers, in sorted id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct SpeakerIndex {
    speakers: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl From<Vec<String>> for SpeakerIndex {
    fn from(ids: Vec<String>) -> Self {
        Self::new(ids)
    }
}

impl From<SpeakerIndex> for Vec<String> {
    fn from(index: SpeakerIndex) -> Self {
        index.speakers
    }
}

impl SpeakerIndex {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        let mut speakers: Vec<String> = ids.into_iter().map(Into::into).collect();
        speakers.sort();
        speakers.dedup();
        let lookup = speakers.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { speakers, lookup }
    }

    pub fn from_utterances(utts: &[Utterance]) -> Self {
        Self::new(utts.iter().map(|u| u.speaker_id.clone()))
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn index_of(&self, speaker_id: &str) -> Result<usize, CorpusError> {
        self.lookup
            .get(speaker_id)
            .copied()
            .ok_or_else(|| CorpusError::UnknownSpeaker(speaker_id.to_owned()))
    }

    pub fn speaker(&self, index: usize) -> Option<&str> {
        self.speakers.get(index).map(String::as_str)
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }
}

/// Groups utterance indices into batches whose padded size
/// (`items × longest`) stays within `max_samples_per_batch`.
///
/// With `bucketing`, items are ordered by length (ties in random order) so
/// neighbours have similar lengths; otherwise the order is a plain shuffle.
/// Batch order is shuffled either way.
pub fn make_speech_batches<R: Rng + ?Sized>(
    utts: &[Utterance],
    max_samples_per_batch: usize,
    bucketing: bool,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, CorpusError> {
    if let Some(u) = utts.iter().find(|u| u.samples.len() > max_samples_per_batch) {
        return Err(CorpusError::OverBudget {
            id: u.id.clone(),
            samples: u.samples.len(),
            budget: max_samples_per_batch,
        });
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(rng);
    if bucketing {
        order.sort_by_key(|&i| utts[i].samples.len());
    }
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = utts[i].samples.len();
        let width = longest.max(len);
        if !current.is_empty() && width * (current.len() + 1) > max_samples_per_batch {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Padded samples divided by true samples, minus one.
pub fn padding_overhead(utts: &[Utterance], batches: &[Vec<usize>]) -> f64 {
    let (mut padded, mut real) = (0usize, 0usize);
    for b in batches {
        let width = b.iter().map(|&i| utts[i].samples.len()).max().unwrap_or(0);
        padded += width * b.len();
        real += b.iter().map(|&i| utts[i].samples.len()).sum::<usize>();
    }
    padded as f64 / real.max(1) as f64 - 1.0
}

/// Shuffled chunks of `batch_items` utterance indices; the last chunk may be
/// short. Every speaker must be known to `index`.
pub fn make_speaker_batches<R: Rng + ?Sized>(
    utts: &[Utterance],
    index: &SpeakerIndex,
    batch_items: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, CorpusError> {
    if batch_items == 0 {
        return Err(CorpusError::Config("batch_items must be positive".into()));
    }
    for u in utts {
        index.index_of(&u.speaker_id)?;
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_items).map(<[usize]>::to_vec).collect())
}

/// Position of a batch stream: the epoch being consumed and the next batch
/// within it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub epoch: u64,
    pub pos: usize,
}

fn epoch_rng(seed: u64, epoch: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(epoch);
    rng
}

const SPEECH_SALT: u64 = 0x5350_4545_4348;
const SPEAKER_SALT: u64 = 0x5350_4b52;
const CROP_SALT: u64 = 0x4352_4f50;

/// Endless stream of speech batches. Each epoch's plan depends only on
/// `(seed, epoch)`, so a stream resumes exactly from its [`StreamState`].
#[derive(Clone, Debug)]
pub struct SpeechBatchStream {
    seed: u64,
    budget: usize,
    bucketing: bool,
    state: StreamState,
    plan: Vec<Vec<usize>>,
}

impl SpeechBatchStream {
    pub fn new(
        utts: &[Utterance],
        max_samples_per_batch: usize,
        bucketing: bool,
        seed: u64,
        state: StreamState,
    ) -> Result<Self, CorpusError> {
        if utts.is_empty() {
            return Err(CorpusError::Config("speech stream over an empty corpus".into()));
        }
        let mut s = Self {
            seed,
            budget: max_samples_per_batch,
            bucketing,
            state,
            plan: Vec::new(),
        };
        s.plan = s.plan_for(utts, state.epoch)?;
        Ok(s)
    }

    fn plan_for(&self, utts: &[Utterance], epoch: u64) -> Result<Vec<Vec<usize>>, CorpusError> {
        let mut rng = epoch_rng(self.seed, epoch, SPEECH_SALT);
        make_speech_batches(utts, self.budget, self.bucketing, &mut rng)
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    /// Next batch, moving to a fresh epoch plan when the current one is spent.
    /// `utts` must be the corpus the stream was created with.
    pub fn next_batch(&mut self, utts: &[Utterance], vocab: &Vocabulary) -> Result<SpeechBatch, CorpusError> {
        if self.state.pos >= self.plan.len() {
            self.state = StreamState {
                epoch: self.state.epoch + 1,
                pos: 0,
            };
            self.plan = self.plan_for(utts, self.state.epoch)?;
        }
        let idx = &self.plan[self.state.pos];
        self.state.pos += 1;
        let items: Vec<&[f64]> = idx.iter().map(|&i| utts[i].samples.as_slice()).collect();
        Ok(SpeechBatch {
            ids: idx.iter().map(|&i| utts[i].id.clone()).collect(),
            audio: PaddedAudio::from_slices(&items),
            targets: idx
                .iter()
                .map(|&i| vocab.encode(&utts[i].transcript))
                .collect::<Result<_, _>>()?,
        })
    }
}

/// Endless stream of randomly cropped speaker batches, resumable like
/// [`SpeechBatchStream`]. Crop offsets depend on `(seed, epoch, pos)`.
#[derive(Clone, Debug)]
pub struct SpeakerBatchStream {
    seed: u64,
    batch_items: usize,
    crop_len_s: f64,
    index: SpeakerIndex,
    state: StreamState,
    plan: Vec<Vec<usize>>,
}

impl SpeakerBatchStream {
    pub fn new(
        utts: &[Utterance],
        index: SpeakerIndex,
        crop_len_s: f64,
        batch_items: usize,
        seed: u64,
        state: StreamState,
    ) -> Result<Self, CorpusError> {
        if utts.is_empty() {
            return Err(CorpusError::Config("speaker stream over an empty corpus".into()));
        }
        if !(crop_len_s > 0.0) {
            return Err(CorpusError::Config(format!("crop length {crop_len_s} must be positive")));
        }
        let mut s = Self {
            seed,
            batch_items,
            crop_len_s,
            index,
            state,
            plan: Vec::new(),
        };
        s.plan = s.plan_for(utts, state.epoch)?;
        Ok(s)
    }

    fn plan_for(&self, utts: &[Utterance], epoch: u64) -> Result<Vec<Vec<usize>>, CorpusError> {
        let mut rng = epoch_rng(self.seed, epoch, SPEAKER_SALT);
        make_speaker_batches(utts, &self.index, self.batch_items, &mut rng)
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    pub fn index(&self) -> &SpeakerIndex {
        &self.index
    }

    pub fn next_batch(&mut self, utts: &[Utterance]) -> Result<SpeakerBatch, CorpusError> {
        if self.state.pos >= self.plan.len() {
            self.state = StreamState {
                epoch: self.state.epoch + 1,
                pos: 0,
            };
            self.plan = self.plan_for(utts, self.state.epoch)?;
        }
        let mut rng = epoch_rng(self.seed, (self.state.epoch << 32) | self.state.pos as u64, CROP_SALT);
        let idx = &self.plan[self.state.pos];
        self.state.pos += 1;
        let items: Vec<&[f64]> = idx
            .iter()
            .map(|&i| crop(&utts[i].samples, self.crop_len_s, CropMode::Random, &mut rng))
            .collect();
        Ok(SpeakerBatch {
            ids: idx.iter().map(|&i| utts[i].id.clone()).collect(),
            audio: PaddedAudio::from_slices(&items),
            labels: idx
                .iter()
                .map(|&i| self.index.index_of(&utts[i].speaker_id))
                .collect::<Result<_, _>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sex;

    fn utt(id: &str, speaker: &str, len: usize) -> Utterance {
        Utterance {
            id: id.into(),
            samples: vec![0.5; len],
            transcript: "ab".into(),
            speaker_id: speaker.into(),
            sex: Sex::M,
            session_id: "s0".into(),
        }
    }

    #[test]
    fn packing_counts_padding() {
        let utts: Vec<_> = (0..3).map(|i| utt(&format!("u{i}"), "a", 32_000)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_speech_batches(&utts, 64_000, true, &mut rng).unwrap();
        let mut sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 2]);
    }

    #[test]
    fn over_budget_names_the_utterance() {
        let utts = vec![utt("short", "a", 100), utt("long", "a", 96_000)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = make_speech_batches(&utts, 64_000, true, &mut rng).unwrap_err();
        assert!(e.to_string().contains("long"), "{e}");
    }

    #[test]
    fn bucketing_reduces_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let utts: Vec<_> = (0..200)
            .map(|i| utt(&format!("u{i}"), "a", rng.gen_range(48_000..=96_000)))
            .collect();
        let bucketed = make_speech_batches(&utts, 400_000, true, &mut rng).unwrap();
        let random = make_speech_batches(&utts, 400_000, false, &mut rng).unwrap();
        let (b, r) = (padding_overhead(&utts, &bucketed), padding_overhead(&utts, &random));
        assert!(b <= 0.10, "bucketed overhead {b}");
        assert!(r > 2.0 * b, "random {r} vs bucketed {b}");
        for batch in &bucketed {
            let real: usize = batch.iter().map(|&i| utts[i].samples.len()).sum();
            assert!(real <= 400_000);
        }
    }

    #[test]
    fn padded_audio_zero_fills() {
        let a = [1.0, 2.0, 3.0];
        let b = [4.0];
        let p = PaddedAudio::from_slices(&[&a, &b]);
        assert_eq!(p.width, 3);
        assert_eq!(p.lengths, vec![3, 1]);
        assert_eq!(p.row(1), &[4.0, 0.0, 0.0]);
    }

    #[test]
    fn speaker_batches_and_index() {
        let utts = vec![
            utt("u0", "b", 40_000),
            utt("u1", "a", 40_000),
            utt("u2", "b", 20_000),
            utt("u3", "c", 40_000),
        ];
        let index = SpeakerIndex::from_utterances(&utts);
        for (i, s) in index.speakers().iter().enumerate() {
            assert_eq!(index.index_of(s).unwrap(), i);
            assert_eq!(index.speaker(i), Some(s.as_str()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(make_speaker_batches(&utts, &index, 2, &mut rng).unwrap().len(), 2);
        let mut stream = SpeakerBatchStream::new(&utts, index.clone(), 0.5, 2, 1, StreamState::default()).unwrap();
        for _ in 0..4 {
            let b = stream.next_batch(&utts).unwrap();
            assert!(b.audio.lengths.iter().all(|&l| l <= 8_000));
            for (id, &label) in b.ids.iter().zip(&b.labels) {
                let u = utts.iter().find(|u| &u.id == id).unwrap();
                assert_eq!(index.speaker(label), Some(u.speaker_id.as_str()));
            }
        }
        let other = SpeakerIndex::new(["a"]);
        assert!(matches!(
            make_speaker_batches(&utts, &other, 2, &mut rng),
            Err(CorpusError::UnknownSpeaker(_))
        ));
    }

    #[test]
    fn streams_resume_from_state() {
        let vocab = Vocabulary::new("ab").unwrap();
        let utts: Vec<_> = (0..7).map(|i| utt(&format!("u{i}"), "a", 1000 + 10 * i)).collect();
        let mut full = SpeechBatchStream::new(&utts, 3000, true, 5, StreamState::default()).unwrap();
        let seen: Vec<_> = (0..9).map(|_| full.next_batch(&utts, &vocab).unwrap()).collect();
        let mut first = SpeechBatchStream::new(&utts, 3000, true, 5, StreamState::default()).unwrap();
        for _ in 0..4 {
            first.next_batch(&utts, &vocab).unwrap();
        }
        let mut resumed = SpeechBatchStream::new(&utts, 3000, true, 5, first.state()).unwrap();
        for expected in &seen[4..] {
            assert_eq!(&resumed.next_batch(&utts, &vocab).unwrap(), expected);
        }

        let index = SpeakerIndex::from_utterances(&utts);
        let mut a = SpeakerBatchStream::new(&utts, index.clone(), 0.05, 2, 9, StreamState::default()).unwrap();
        let seen: Vec<_> = (0..6).map(|_| a.next_batch(&utts).unwrap()).collect();
        let state = StreamState { epoch: 0, pos: 3 };
        let mut b = SpeakerBatchStream::new(&utts, index, 0.05, 2, 9, state).unwrap();
        for expected in &seen[3..] {
            assert_eq!(&b.next_batch(&utts).unwrap(), expected);
        }
    }
}
