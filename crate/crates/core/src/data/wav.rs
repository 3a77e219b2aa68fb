//! Minimal RIFF/WAVE reader and writer for PCM16 mono files. Unknown
//! chunks are skipped on read; every format violation names the field it
//! failed on.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Read a PCM16 mono WAV file; samples come back as int16 / 32768.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<(Vec<T>, u32)> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(Error::Wav { field: "riff", detail: "missing RIFF header".into() });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav { field: "wave", detail: "not a WAVE file".into() });
    }

    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(Error::Wav {
                field: "chunk",
                detail: format!("chunk '{}' overruns file", String::from_utf8_lossy(id)),
            });
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Wav { field: "fmt", detail: "fmt chunk too short".into() });
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                if format != 1 {
                    return Err(Error::Wav {
                        field: "audio_format",
                        detail: format!("audio format {format}, only PCM (1) supported"),
                    });
                }
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                if channels != 1 {
                    return Err(Error::Wav {
                        field: "channels",
                        detail: format!("{channels} channels, only mono supported"),
                    });
                }
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if bits != 16 {
                    return Err(Error::Wav {
                        field: "bits_per_sample",
                        detail: format!("{bits} bits, only 16 supported"),
                    });
                }
                sample_rate = Some(u32::from_le_bytes(body[4..8].try_into().unwrap()));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        pos = body_end + (size % 2);
    }

    let sample_rate =
        sample_rate.ok_or(Error::Wav { field: "fmt", detail: "no fmt chunk".into() })?;
    let data = data.ok_or(Error::Wav { field: "data", detail: "no data chunk".into() })?;
    if data.len() % 2 != 0 {
        return Err(Error::Wav { field: "data", detail: "odd data chunk length".into() });
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| T::from_f64(i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0))
        .collect();
    Ok((samples, sample_rate))
}

/// Write samples (clamped to [-1, 1]) as PCM16 mono.
pub fn write_wav<T: Scalar>(path: &Path, samples: &[T], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut f = fs::File::create(path)?;
    f.write_all(b"RIFF")?;
    f.write_all(&((36 + data_len) as u32).to_le_bytes())?;
    f.write_all(b"WAVE")?;
    f.write_all(b"fmt ")?;
    f.write_all(&16u32.to_le_bytes())?;
    f.write_all(&1u16.to_le_bytes())?;
    f.write_all(&1u16.to_le_bytes())?;
    f.write_all(&sample_rate.to_le_bytes())?;
    f.write_all(&(sample_rate * 2).to_le_bytes())?;
    f.write_all(&2u16.to_le_bytes())?;
    f.write_all(&16u16.to_le_bytes())?;
    f.write_all(b"data")?;
    f.write_all(&(data_len as u32).to_le_bytes())?;
    for &s in samples {
        let x = s.to_f64_val().clamp(-1.0, 1.0);
        let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        f.write_all(&q.to_le_bytes())?;
    }
    Ok(())
}
