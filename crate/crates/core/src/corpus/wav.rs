//! Minimal RIFF/WAVE reader and writer for 16-bit mono PCM at 16 kHz.

use std::fs;
use std::path::Path;

use super::SAMPLE_RATE;

const PCM_FORMAT: u16 = 1;
const FULL_SCALE: f64 = 32768.0;

#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed '{chunk}' chunk: {detail}")]
    Malformed { chunk: &'static str, detail: String },
    #[error("unsupported {what}: got {got}, expected {expected}")]
    Unsupported {
        what: &'static str,
        got: u32,
        expected: u32,
    },
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a WAV byte stream into samples in `[-1, 1)`.
pub fn decode_wav(bytes: &[u8]) -> Result<Vec<f64>, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(WavError::Malformed {
            chunk: "RIFF",
            detail: "missing RIFF signature".into(),
        });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::Malformed {
            chunk: "RIFF",
            detail: "form type is not WAVE".into(),
        });
    }
    let declared = u32_at(bytes, 4) as usize + 8;
    if declared > bytes.len() {
        return Err(WavError::Malformed {
            chunk: "RIFF",
            detail: format!("declares {declared} bytes but file has {}", bytes.len()),
        });
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= declared {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > declared {
            let chunk = match id {
                b"fmt " => "fmt ",
                b"data" => "data",
                _ => "RIFF",
            };
            return Err(WavError::Malformed {
                chunk,
                detail: format!("chunk of {size} bytes overruns the file"),
            });
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(WavError::Malformed {
                        chunk: "fmt ",
                        detail: format!("size {size} < 16"),
                    });
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format != PCM_FORMAT {
                    return Err(WavError::Unsupported {
                        what: "codec (format tag)",
                        got: format.into(),
                        expected: PCM_FORMAT.into(),
                    });
                }
                if channels != 1 {
                    return Err(WavError::Unsupported {
                        what: "channel count",
                        got: channels.into(),
                        expected: 1,
                    });
                }
                if rate != SAMPLE_RATE {
                    return Err(WavError::Unsupported {
                        what: "sample rate",
                        got: rate,
                        expected: SAMPLE_RATE,
                    });
                }
                if bits != 16 {
                    return Err(WavError::Unsupported {
                        what: "bits per sample",
                        got: bits.into(),
                        expected: 16,
                    });
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(WavError::Malformed {
                        chunk: "data",
                        detail: "data chunk precedes fmt chunk".into(),
                    });
                }
                if !size.is_multiple_of(2) {
                    return Err(WavError::Malformed {
                        chunk: "data",
                        detail: format!("odd byte count {size} for 16-bit samples"),
                    });
                }
                return Ok(bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / FULL_SCALE)
                    .collect());
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(WavError::Malformed {
        chunk: if fmt_seen { "data" } else { "fmt " },
        detail: "chunk not found".into(),
    })
}

/// Quantizes samples to 16-bit PCM with clamping, wrapped in a canonical
/// 44-byte header.
pub fn encode_wav(samples: &[f64]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<Vec<f64>, WavError> {
    let bytes = fs::read(path).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes)
}

pub fn write_wav(samples: &[f64], path: &Path) -> Result<(), WavError> {
    fs::write(path, encode_wav(samples)).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Number of samples held by the file's data chunk.
pub fn wav_sample_count(path: &Path) -> Result<usize, WavError> {
    read_wav(path).map(|s| s.len())
}
