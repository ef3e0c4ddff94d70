//! RIFF/WAVE reading and writing (16-bit PCM and 32-bit float, any channel count).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::TimeSignal;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads every channel of a WAV file.
pub fn read_wav(path: &Path) -> Result<Vec<TimeSignal>> {
    let mut reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err(path))?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err(path))?,
        (fmt, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    (0..n_ch)
        .map(|c| {
            TimeSignal::new(
                interleaved.iter().skip(c).step_by(n_ch).copied().collect(),
                spec.sample_rate,
            )
        })
        .collect()
}

/// Reads a WAV file and fails if its sample rate differs from `expected`.
pub fn read_wav_expect(path: &Path, expected: u32) -> Result<Vec<TimeSignal>> {
    let channels = read_wav(path)?;
    if let Some(found) = channels.first().map(|c| c.sample_rate()) {
        if found != expected {
            return Err(Error::SampleRateMismatch { expected, found });
        }
    }
    Ok(channels)
}

/// Writes channels interleaved into one WAV file. Channels must share length
/// and sample rate. 16-bit output is clipped to [-1, 1).
pub fn write_wav(path: &Path, channels: &[TimeSignal], format: WavFormat) -> Result<()> {
    let first = channels
        .first()
        .ok_or_else(|| Error::Shape("no channels to write".into()))?;
    if channels
        .iter()
        .any(|c| c.len() != first.len() || c.sample_rate() != first.sample_rate())
    {
        return Err(Error::Shape("channels differ in length or rate".into()));
    }
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: first.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for i in 0..first.len() {
        for ch in channels {
            let v = ch.samples()[i];
            match format {
                WavFormat::Float32 => writer.write_sample(v as f32),
                WavFormat::Pcm16 => {
                    writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
                }
            }
            .map_err(wav_err(path))?;
        }
    }
    writer.finalize().map_err(wav_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SAMPLE_RATE;

    #[test]
    fn float_multichannel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let a = TimeSignal::new(vec![0.5, -0.25, 0.125], SAMPLE_RATE).unwrap();
        let b = TimeSignal::new(vec![-1.0, 0.0, 0.75], SAMPLE_RATE).unwrap();
        write_wav(&path, &[a.clone(), b.clone()], WavFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn pcm16_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let a = TimeSignal::new(vec![0.5, -0.5, 0.3], SAMPLE_RATE).unwrap();
        write_wav(&path, &[a.clone()], WavFormat::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        for (x, y) in back[0].samples().iter().zip(a.samples()) {
            assert!((x - y).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let a = TimeSignal::new(vec![0.0; 10], 8000).unwrap();
        write_wav(&path, &[a], WavFormat::Float32).unwrap();
        assert!(matches!(
            read_wav_expect(&path, SAMPLE_RATE),
            Err(Error::SampleRateMismatch {
                expected: 16000,
                found: 8000
            })
        ));
    }
}
