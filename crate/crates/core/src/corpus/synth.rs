//! Tone-language speech synthesizer.
//!
//! Content, speaker and session live on separate channels of the signal:
//!
//! * content: every non-separator character is a pair of pure tones drawn
//!   from a 4 × 5 grid between 700 Hz and 3.3 kHz, with a short gap after
//!   each character so repeated letters stay distinct;
//! * speaker: a harmonic complex on a sex-dependent fundamental whose
//!   harmonic amplitudes follow a speaker-specific envelope with two
//!   resonances between 3.5 and 7.5 kHz;
//! * session: a gain, a first-order spectral tilt and a white-noise floor.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Sex, SAMPLE_RATE};

const LOW_TONES: [f64; 4] = [700.0, 900.0, 1100.0, 1300.0];
const HIGH_TONES: [f64; 5] = [1700.0, 2100.0, 2500.0, 2900.0, 3300.0];
/// Distinct characters the content channel can encode.
pub const TONE_SLOTS: usize = LOW_TONES.len() * HIGH_TONES.len();

const LEAD_S: f64 = 0.1;
const TAIL_S: f64 = 0.1;
const CHAR_GAP_S: f64 = 0.03;
const WORD_GAP_S: f64 = 0.12;
const CHAR_MIN_S: f64 = 0.08;
const CHAR_MAX_S: f64 = 0.12;
const RAMP_S: f64 = 0.01;
const TONE_AMPLITUDE: f64 = 0.15;

/// Output alphabet of the speech task. Token 0 is the CTC blank; the
/// characters of the configured string follow in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub const BLANK: usize = 0;
    pub const SEPARATOR: char = ' ';

    pub fn new(chars: &str) -> Result<Self, CorpusError> {
        let chars: Vec<char> = chars.chars().collect();
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(CorpusError::Config(format!("duplicate vocabulary character {c:?}")));
            }
        }
        let letters = chars.iter().filter(|&&c| c != Self::SEPARATOR).count();
        if letters == 0 {
            return Err(CorpusError::Config("vocabulary has no letters".into()));
        }
        if letters > TONE_SLOTS {
            return Err(CorpusError::Config(format!(
                "vocabulary has {letters} letters but only {TONE_SLOTS} tone slots exist"
            )));
        }
        Ok(Self { chars })
    }

    /// Number of output classes including the blank.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn as_str(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn has_separator(&self) -> bool {
        self.chars.contains(&Self::SEPARATOR)
    }

    /// Non-separator characters, in vocabulary order.
    pub fn letters(&self) -> Vec<char> {
        self.chars.iter().copied().filter(|&c| c != Self::SEPARATOR).collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&v| v == c)
                    .map(|p| p + 1)
                    .ok_or(CorpusError::Vocabulary(c))
            })
            .collect()
    }

    /// Maps token ids back to text; blanks and unknown ids are dropped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter_map(|&t| t.checked_sub(1).and_then(|i| self.chars.get(i)))
            .collect()
    }

    fn tone_pair(&self, c: char) -> (f64, f64) {
        let slot = self.letters().iter().position(|&l| l == c).expect("letter in vocabulary");
        (LOW_TONES[slot % LOW_TONES.len()], HIGH_TONES[slot / LOW_TONES.len()])
    }
}

/// Fixed voice characteristics of one synthetic speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub sex: Sex,
    /// Fundamental frequency in Hz.
    pub pitch_hz: f64,
    /// Centre frequencies of the two spectral resonances.
    pub resonances_hz: [f64; 2],
    /// Amplitude of harmonic `k + 1`.
    pub harmonic_amplitudes: Vec<f64>,
}

impl SpeakerProfile {
    pub fn sample(speaker_id: String, sex: Sex, rng: &mut ChaCha8Rng) -> Self {
        let pitch_hz = match sex {
            Sex::M => rng.gen_range(90.0..150.0),
            Sex::F => rng.gen_range(170.0..260.0),
        };
        let resonances_hz = [rng.gen_range(3500.0..5500.0), rng.gen_range(5500.0..7500.0)];
        let n_harmonics = (7900.0 / pitch_hz) as usize;
        let bump = |f: f64, centre: f64| (-0.5 * ((f - centre) / 250.0).powi(2)).exp();
        let mut amps: Vec<f64> = (1..=n_harmonics)
            .map(|k| {
                let f = k as f64 * pitch_hz;
                0.3 * (-f / 300.0).exp() + bump(f, resonances_hz[0]) + 0.7 * bump(f, resonances_hz[1])
            })
            .collect();
        // unit-energy envelope scaled to an RMS of about 0.35
        let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt() * 2.0;
        amps.iter_mut().for_each(|a| *a /= norm);
        Self {
            speaker_id,
            sex,
            pitch_hz,
            resonances_hz,
            harmonic_amplitudes: amps,
        }
    }
}

/// Recording condition shared by every utterance of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCondition {
    pub session_id: String,
    pub gain: f64,
    /// Coefficient `c` of the filter `y[n] = x[n] + c · x[n-1]`.
    pub tilt: f64,
    pub noise_std: f64,
}

impl SessionCondition {
    pub fn sample(session_id: String, rng: &mut ChaCha8Rng) -> Self {
        Self {
            session_id,
            gain: rng.gen_range(0.7..1.0),
            tilt: rng.gen_range(-0.15..0.15),
            noise_std: rng.gen_range(0.002..0.01),
        }
    }
}

/// Draws a transcript of random words whose rendering fits in roughly
/// `target_s` seconds. Always returns at least one word.
pub fn sample_transcript(vocab: &Vocabulary, target_s: f64, rng: &mut ChaCha8Rng) -> String {
    let letters = vocab.letters();
    let mut words: Vec<String> = Vec::new();
    let mut cursor = LEAD_S;
    loop {
        let len = rng.gen_range(2..=4);
        let word: String = (0..len).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
        let gap = if words.is_empty() { 0.0 } else { WORD_GAP_S };
        let need = gap + len as f64 * (CHAR_MAX_S + CHAR_GAP_S);
        if !words.is_empty() && (cursor + need + TAIL_S > target_s || !vocab.has_separator()) {
            break;
        }
        cursor += need;
        words.push(word);
    }
    words.join(" ")
}

/// Renders `transcript` in the voice of `speaker` under `session`. The
/// result is at least `min_duration_s` long and lies in `[-1, 1]`.
pub fn synthesize(
    vocab: &Vocabulary,
    speaker: &SpeakerProfile,
    session: &SessionCondition,
    transcript: &str,
    min_duration_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, CorpusError> {
    vocab.encode(transcript)?;
    let sr = SAMPLE_RATE as f64;
    // character segments (start, duration, char)
    let mut segments = Vec::new();
    let mut cursor = LEAD_S;
    for (wi, word) in transcript.split(Vocabulary::SEPARATOR).enumerate() {
        if wi > 0 {
            cursor += WORD_GAP_S;
        }
        for c in word.chars() {
            let d = rng.gen_range(CHAR_MIN_S..CHAR_MAX_S);
            segments.push((cursor, d, c));
            cursor += d + CHAR_GAP_S;
        }
    }
    let duration = (cursor + TAIL_S).max(min_duration_s);
    let n = (duration * sr).round() as usize;

    let mut voice = vec![0.0; n];
    for (k, &amp) in speaker.harmonic_amplitudes.iter().enumerate() {
        let w = 2.0 * PI * (k + 1) as f64 * speaker.pitch_hz / sr;
        let phase = rng.gen_range(0.0..2.0 * PI);
        for (i, v) in voice.iter_mut().enumerate() {
            *v += amp * (w * i as f64 + phase).sin();
        }
    }

    let ramp = (RAMP_S * sr) as usize;
    for &(start, dur, c) in &segments {
        let (lo, hi) = vocab.tone_pair(c);
        let a = (start * sr) as usize;
        let b = (((start + dur) * sr) as usize).min(n);
        let len = b - a;
        for i in 0..len {
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if len - i <= ramp {
                0.5 - 0.5 * (PI * (len - i - 1) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let t = (a + i) as f64 / sr;
            voice[a + i] += env * TONE_AMPLITUDE * ((2.0 * PI * lo * t).sin() + (2.0 * PI * hi * t).sin());
        }
    }

    let mut prev = 0.0;
    let mut out = Vec::with_capacity(n);
    for v in voice {
        let tilted = v + session.tilt * prev;
        prev = v;
        let noise: f64 = gaussian(rng) * session.noise_std;
        out.push((session.gain * tilted + noise).clamp(-1.0, 1.0));
    }
    Ok(out)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}
