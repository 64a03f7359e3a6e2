//! Mono WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Reads a mono 16-bit PCM or 32-bit float file, scaled to `[-1, 1]`.
pub fn read_wav(path: &Path, sample_rate: u32) -> Result<Vec<f64>> {
    let mut reader = WavReader::open(path).map_err(|e| Error::from(e).at(path))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!("{}: expected mono, found {} channels", path.display(), spec.channels)));
    }
    if spec.sample_rate != sample_rate {
        return Err(Error::invalid(format!(
            "{}: sample rate {} Hz, model expects {sample_rate} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => {
            reader.samples::<i16>().map(|s| s.map(|v| v as f64 / 32768.0)).collect::<std::result::Result<_, _>>()?
        }
        (SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?,
        (f, b) => return Err(Error::invalid(format!("{}: unsupported sample format {f:?}/{b} bit", path.display()))),
    };
    if samples.is_empty() {
        return Err(Error::invalid(format!("{}: no samples", path.display())));
    }
    Ok(samples)
}

/// Writes 32-bit float mono.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate, bits_per_sample: 32, sample_format: SampleFormat::Float };
    let mut w = WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s as f32)?;
    }
    w.finalize()?;
    Ok(())
}

/// Writes 16-bit PCM mono, clipping to `[-1, 1]`.
pub fn write_wav_pcm16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.05).sin() * 0.5).collect();
        let f = dir.path().join("f.wav");
        write_wav(&f, &x, 16000).unwrap();
        let y = read_wav(&f, 16000).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-7));
        let p = dir.path().join("p.wav");
        write_wav_pcm16(&p, &x, 16000).unwrap();
        let y = read_wav(&p, 16000).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.wav");
        write_wav(&f, &[0.1; 100], 8000).unwrap();
        let err = read_wav(&f, 16000).unwrap_err();
        assert!(err.to_string().contains("8000"));
        assert!(read_wav(&dir.path().join("missing.wav"), 16000).is_err());
    }
}
