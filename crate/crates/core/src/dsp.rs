//! Log-filtered spectrogram extraction.
//!
//! Audio is framed with a Hann window, transformed with a real FFT, passed
//! through a bank of triangular filters whose centre frequencies are spaced
//! logarithmically between `fmin` and `fmax`, and compressed with
//! `ln(x + log_floor)`.
//!
//! Framing reflects half a window of samples at both ends and emits
//! `floor(N / hop)` frames, frame `t` being centred on sample `t * hop`.
//! For a 15 s clip at 22050 Hz with a 704-sample hop this gives 469 frames.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 22050;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop: usize,
    pub bands: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            window_size: 2048,
            hop: 704,
            bands: 149,
            fmin: 30.0,
            fmax: 11025.0,
            log_floor: 1e-5,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.hop == 0 || self.hop >= self.window_size {
            return Err(Error::Config(format!(
                "hop ({}) must be in 1..window_size ({})",
                self.hop, self.window_size
            )));
        }
        if self.bands == 0 {
            return Err(Error::Config("bands must be at least 1".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin > 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 < fmin ({}) < fmax ({}) <= sample_rate/2 ({nyquist})",
                self.fmin, self.fmax
            )));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return Err(Error::Config("log_floor must be a positive finite value".into()));
        }
        Ok(())
    }

    /// Number of frames produced for an input of `num_samples` samples.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        num_samples / self.hop
    }

    /// Width of one FFT bin in Hz.
    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.window_size as f64
    }

    pub fn num_bins(&self) -> usize {
        self.window_size / 2 + 1
    }
}

/// A bands x frames time-frequency array stored band-major.
///
/// `config` is `None` for arrays that were not derived from audio (for
/// example the synthetic two-domain task).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bands: usize,
    pub frames: usize,
    pub data: Vec<f32>,
    pub config: Option<SpectrogramConfig>,
}

impl Spectrogram {
    pub fn new(bands: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != bands * frames {
            return Err(Error::Shape(format!(
                "{} values cannot form a {bands}x{frames} spectrogram",
                data.len()
            )));
        }
        Ok(Self {
            bands,
            frames,
            data,
            config: None,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bands, self.frames)
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.data[band * self.frames + frame]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        &self.data[band * self.frames..(band + 1) * self.frames]
    }
}

/// Triangular filters on a logarithmic frequency axis.
#[derive(Debug, Clone)]
pub struct Filterbank {
    /// Centre frequency of each band in Hz.
    pub centers: Vec<f64>,
    /// Sparse weights per band: (fft bin, weight).
    pub weights: Vec<Vec<(usize, f64)>>,
    pub num_bins: usize,
}

impl Filterbank {
    pub fn log_spaced(config: &SpectrogramConfig) -> Result<Self> {
        config.validate()?;
        let bands = config.bands;
        let bin_hz = config.bin_hz();
        let num_bins = config.num_bins();

        let (centers, ratio) = if bands == 1 {
            let c = (config.fmin * config.fmax).sqrt();
            (vec![c], config.fmax / c)
        } else {
            let ratio = (config.fmax / config.fmin).powf(1.0 / (bands - 1) as f64);
            let centers = (0..bands)
                .map(|b| config.fmin * ratio.powi(b as i32))
                .collect::<Vec<_>>();
            (centers, ratio)
        };

        let weights = (0..bands)
            .map(|b| {
                let center = centers[b];
                let lower = if b == 0 { center / ratio } else { centers[b - 1] };
                let upper = if b + 1 == bands { center * ratio } else { centers[b + 1] };
                // Filters narrower than one bin would never see any energy.
                let lower = lower.min(center - bin_hz);
                let upper = upper.max(center + bin_hz);
                (0..num_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = triangle(f, lower, center, upper);
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();

        Ok(Self {
            centers,
            weights,
            num_bins,
        })
    }

    /// Total weight that the filterbank assigns to FFT bin `k`.
    pub fn bin_coverage(&self, k: usize) -> f64 {
        self.weights
            .iter()
            .flat_map(|band| band.iter())
            .filter(|(bin, _)| *bin == k)
            .map(|(_, w)| w)
            .sum()
    }

    pub fn apply(&self, magnitudes: &[f64], out: &mut [f64]) {
        for (o, band) in out.iter_mut().zip(&self.weights) {
            *o = band.iter().map(|&(k, w)| w * magnitudes[k]).sum();
        }
    }
}

fn triangle(f: f64, lower: f64, center: f64, upper: f64) -> f64 {
    if f > lower && f <= center {
        (f - lower) / (center - lower)
    } else if f > center && f < upper {
        (upper - f) / (upper - center)
    } else {
        0.0
    }
}

pub fn hann_window(size: usize) -> Vec<f64> {
    (0..size)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / size as f64).cos())
        .collect()
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct SpectrogramExtractor {
    config: SpectrogramConfig,
    window: Vec<f64>,
    filterbank: Filterbank,
    fft: Arc<dyn rustfft::Fft<f64>>,
}

impl SpectrogramExtractor {
    pub fn new(config: SpectrogramConfig) -> Result<Self> {
        let filterbank = Filterbank::log_spaced(&config)?;
        let fft = FftPlanner::new().plan_fft_forward(config.window_size);
        Ok(Self {
            window: hann_window(config.window_size),
            filterbank,
            fft,
            config,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Filterbank {
        &self.filterbank
    }

    pub fn compute(&self, pcm: &[f32]) -> Result<Spectrogram> {
        let cfg = &self.config;
        let n = pcm.len();
        if n < cfg.window_size {
            return Err(Error::TooShort {
                samples: n,
                required: cfg.window_size,
            });
        }
        if let Some(i) = pcm.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }

        let half = cfg.window_size / 2;
        let padded = reflect_pad(pcm, half);
        let frames = cfg.frame_count(n);
        let bands = cfg.bands;
        let mut data = vec![0f32; bands * frames];

        let mut buf = vec![Complex::new(0.0, 0.0); cfg.window_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mags = vec![0.0; cfg.num_bins()];
        let mut filtered = vec![0.0; bands];

        for t in 0..frames {
            let start = t * cfg.hop;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mags.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            self.filterbank.apply(&mags, &mut filtered);
            for (b, v) in filtered.iter().enumerate() {
                data[b * frames + t] = (v + cfg.log_floor).ln() as f32;
            }
        }

        Ok(Spectrogram {
            bands,
            frames,
            data,
            config: Some(cfg.clone()),
        })
    }
}

pub fn compute_spectrogram(pcm: &[f32], config: &SpectrogramConfig) -> Result<Spectrogram> {
    SpectrogramExtractor::new(config.clone())?.compute(pcm)
}

/// Mirror `pad` samples at each end without repeating the edge sample.
fn reflect_pad(pcm: &[f32], pad: usize) -> Vec<f64> {
    let n = pcm.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| pcm[i.min(n - 1)] as f64));
    out.extend(pcm.iter().map(|&x| x as f64));
    out.extend((0..pad).map(|i| pcm[n.saturating_sub(2 + i)] as f64));
    out
}

const RESAMPLE_ZERO_CROSSINGS: f64 = 32.0;

/// Band-limited resampling with a Blackman-windowed sinc kernel.
///
/// Output length is `round(N * to / from)`.
pub fn resample(pcm: &[f32], from_rate: u32, to_rate: u32) -> Result<Vec<f32>> {
    if from_rate == 0 || to_rate == 0 {
        return Err(Error::Config("sample rates must be positive".into()));
    }
    if from_rate == to_rate {
        return Ok(pcm.to_vec());
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = (pcm.len() as f64 * ratio).round() as usize;
    // Cutoff relative to the input Nyquist.
    let cutoff = ratio.min(1.0);
    let half_width = RESAMPLE_ZERO_CROSSINGS / cutoff;

    let out = (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(pcm.len().saturating_sub(1));
            let mut acc = 0.0;
            for (n, &x) in pcm.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - n as f64;
                acc += x as f64 * cutoff * sinc(cutoff * d) * blackman(d / half_width);
            }
            acc as f32
        })
        .collect();
    Ok(out)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Blackman window on [-1, 1].
fn blackman(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        return 0.0;
    }
    let p = std::f64::consts::PI * (x + 1.0);
    0.42 - 0.5 * p.cos() + 0.08 * (2.0 * p).cos()
}

/// Decoded mono audio.
#[derive(Debug, Clone)]
pub struct Audio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Read a PCM WAV file (16/24/32-bit integer or 32-bit float), averaging
/// channels down to mono.
pub fn read_wav(path: &Path) -> Result<Audio> {
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok(Audio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Per-channel sample count and sample rate from a WAV header.
pub fn wav_info(path: &Path) -> Result<(u64, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((reader.duration() as u64, reader.spec().sample_rate))
}

/// Write mono 32-bit float WAV.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        writer.write_sample(s).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

const CACHE_MAGIC: u32 = u32::from_le_bytes(*b"MLSP");
const CACHE_VERSION: u32 = 1;

/// Write a spectrogram as an 8-word header followed by little-endian f32 data.
///
/// Header words: magic, version, bands, frames, sample_rate, window_size,
/// hop, log_floor as f32 bits. Arrays without an audio config store zeros
/// in the last four words.
pub fn write_cache(path: &Path, spec: &Spectrogram) -> Result<()> {
    let (sr, win, hop, floor) = match &spec.config {
        Some(c) => (
            c.sample_rate,
            c.window_size as u32,
            c.hop as u32,
            (c.log_floor as f32).to_bits(),
        ),
        None => (0, 0, 0, 0),
    };
    let header = [
        CACHE_MAGIC,
        CACHE_VERSION,
        spec.bands as u32,
        spec.frames as u32,
        sr,
        win,
        hop,
        floor,
    ];
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(32 + 4 * spec.data.len());
    for word in header {
        bytes.extend_from_slice(&word.to_le_bytes());
    }
    for v in &spec.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a cached spectrogram. When `expected` is given, the header must
/// agree with it and the returned spectrogram carries that config.
pub fn read_cache(path: &Path, expected: Option<&SpectrogramConfig>) -> Result<Spectrogram> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let loc = path.display().to_string();
    if bytes.len() < 32 || bytes.len() % 4 != 0 {
        return Err(Error::parse(loc, "truncated spectrogram cache"));
    }
    let words: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if words[0] != CACHE_MAGIC || words[1] != CACHE_VERSION {
        return Err(Error::parse(loc, "bad spectrogram cache magic/version"));
    }
    let bands = words[2] as usize;
    let frames = words[3] as usize;
    if words.len() - 8 != bands * frames {
        return Err(Error::parse(loc, "spectrogram cache size does not match header"));
    }
    let data = words[8..].iter().map(|&w| f32::from_bits(w)).collect();
    let config = match expected {
        Some(c) => {
            let header_matches = words[4] == c.sample_rate
                && words[5] as usize == c.window_size
                && words[6] as usize == c.hop
                && words[7] == (c.log_floor as f32).to_bits()
                && bands == c.bands;
            if !header_matches {
                return Err(Error::parse(loc, "spectrogram cache was built with a different config"));
            }
            Some(c.clone())
        }
        None => None,
    };
    Ok(Spectrogram {
        bands,
        frames,
        data,
        config,
    })
}
