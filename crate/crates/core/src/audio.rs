//! Multi-channel audio and its two on-disk forms: RIFF WAVE (16-bit PCM or
//! 32-bit float, interleaved) and raw planar little-endian f32 with a
//! one-line sidecar header `channels,sample_rate,num_samples`.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelAudio {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl MultichannelAudio {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::argument("audio needs at least one channel"));
        }
        if sample_rate == 0 {
            return Err(Error::argument("sample rate must be positive"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::argument("all channels must have equal length"));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::argument("audio contains non-finite samples"));
        }
        Ok(MultichannelAudio {
            channels,
            sample_rate,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate as f64
    }
}

pub fn decode_wav(bytes: &[u8]) -> Result<MultichannelAudio> {
    let bad = |e: hound::Error| Error::format("wav", e.to_string());
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(bad)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::format("wav", "zero channels"));
    }
    // The declared length sizes the sample buffer, so it must fit the input.
    let declared = reader.len() as usize;
    if declared.saturating_mul((spec.bits_per_sample as usize).div_ceil(8)) > bytes.len() {
        return Err(Error::format("wav", "data chunk longer than the file"));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
        (fmt, bits) => {
            return Err(Error::format(
                "wav",
                format!("unsupported sample format {fmt:?} with {bits} bits"),
            ))
        }
    };
    if !interleaved.len().is_multiple_of(n_ch) {
        return Err(Error::format("wav", "sample count is not a multiple of the channel count"));
    }
    let frames = interleaved.len() / n_ch;
    let channels = (0..n_ch)
        .map(|m| (0..frames).map(|i| interleaved[i * n_ch + m]).collect())
        .collect();
    MultichannelAudio::new(channels, spec.sample_rate).map_err(|e| Error::format("wav", e.to_string()))
}

pub fn read_wav(path: &Path) -> Result<MultichannelAudio> {
    decode_wav(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes 32-bit float interleaved WAVE.
pub fn write_wav(path: &Path, audio: &MultichannelAudio) -> Result<()> {
    let spec = hound::WavSpec {
        channels: audio.num_channels() as u16,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format("wav", other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for i in 0..audio.num_samples() {
        for ch in &audio.channels {
            w.write_sample(ch[i] as f32).map_err(wrap)?;
        }
    }
    w.finalize().map_err(wrap)
}

/// Upper bound on channels accepted from a raw header.
pub const MAX_RAW_CHANNELS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawHeader {
    pub channels: usize,
    pub sample_rate: u32,
    pub num_samples: usize,
}

impl RawHeader {
    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::format("raw header", "expected channels,sample_rate,num_samples"));
        }
        let num = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::format("raw header", format!("bad {what} {s:?}")))
        };
        let channels = num(fields[0], "channel count")? as usize;
        let sample_rate = u32::try_from(num(fields[1], "sample rate")?)
            .map_err(|_| Error::format("raw header", "sample rate out of range"))?;
        let num_samples = num(fields[2], "sample count")? as usize;
        if channels == 0 || sample_rate == 0 {
            return Err(Error::format("raw header", "channels and sample rate must be positive"));
        }
        if channels > MAX_RAW_CHANNELS {
            return Err(Error::format("raw header", format!("more than {MAX_RAW_CHANNELS} channels")));
        }
        Ok(RawHeader {
            channels,
            sample_rate,
            num_samples,
        })
    }

    pub fn line(&self) -> String {
        format!("{},{},{}", self.channels, self.sample_rate, self.num_samples)
    }
}

/// Planar f32: all of channel 0, then all of channel 1, and so on.
pub fn decode_raw(header: &RawHeader, bytes: &[u8]) -> Result<MultichannelAudio> {
    let expected = header
        .channels
        .checked_mul(header.num_samples)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("raw audio", "header sizes overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            "raw audio",
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let channels = bytes
        .chunks_exact(4 * header.num_samples.max(1))
        .take(header.channels)
        .map(|c| {
            c.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        })
        .collect::<Vec<Vec<f64>>>();
    let channels = if header.num_samples == 0 {
        vec![Vec::new(); header.channels]
    } else {
        channels
    };
    MultichannelAudio::new(channels, header.sample_rate).map_err(|e| Error::format("raw audio", e.to_string()))
}

pub fn encode_raw(audio: &MultichannelAudio) -> (RawHeader, Vec<u8>) {
    let header = RawHeader {
        channels: audio.num_channels(),
        sample_rate: audio.sample_rate,
        num_samples: audio.num_samples(),
    };
    let bytes = audio
        .channels
        .iter()
        .flatten()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    (header, bytes)
}

/// Sidecar header path: the audio path with `.hdr` appended.
pub fn raw_header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

pub fn read_raw(path: &Path) -> Result<MultichannelAudio> {
    let hdr_path = raw_header_path(path);
    let line = std::fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let header = RawHeader::parse(&line)?;
    decode_raw(&header, &std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_raw(path: &Path, audio: &MultichannelAudio) -> Result<()> {
    let (header, bytes) = encode_raw(audio);
    let hdr_path = raw_header_path(path);
    std::fs::write(&hdr_path, header.line() + "\n").map_err(|e| Error::io(&hdr_path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads WAV when the extension is `.wav`, raw planar otherwise.
pub fn read_audio(path: &Path) -> Result<MultichannelAudio> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        read_wav(path)
    } else {
        read_raw(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MultichannelAudio {
        MultichannelAudio::new(vec![vec![0.5, -0.25, 0.0], vec![1.0, 0.125, -1.0]], 8000).unwrap()
    }

    #[test]
    fn rejects_ragged_channels() {
        assert!(MultichannelAudio::new(vec![vec![0.0; 3], vec![0.0; 2]], 8000).is_err());
        assert!(MultichannelAudio::new(vec![vec![f64::NAN]], 8000).is_err());
    }

    #[test]
    fn raw_round_trip() {
        let a = sample();
        let (h, bytes) = encode_raw(&a);
        assert_eq!(h.line(), "2,8000,3");
        assert_eq!(RawHeader::parse(&h.line()).unwrap(), h);
        assert_eq!(decode_raw(&h, &bytes).unwrap(), a);
        assert!(decode_raw(&h, &bytes[1..]).is_err());
    }

    #[test]
    fn raw_header_errors() {
        for bad in ["", "2,8000", "0,8000,3", "2,0,3", "a,b,c", "2,99999999999,3", "5000,8000,0"] {
            assert!(RawHeader::parse(bad).is_err(), "{bad}");
        }
        let huge = RawHeader {
            channels: usize::MAX,
            sample_rate: 1,
            num_samples: 2,
        };
        assert!(decode_raw(&huge, &[]).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_wav(&path, &sample()).unwrap();
        assert_eq!(read_audio(&path).unwrap(), sample());
    }

    #[test]
    fn wav_pcm16() {
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
        for s in [16384i16, -32768, 0, 8192] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let a = decode_wav(buf.get_ref()).unwrap();
        assert_eq!(a.channel(0), &[0.5, 0.0]);
        assert_eq!(a.channel(1), &[-1.0, 0.25]);
    }

    #[test]
    fn garbage_is_format_error() {
        assert!(matches!(decode_wav(b"RIFF"), Err(Error::Format { .. })));
    }
}
