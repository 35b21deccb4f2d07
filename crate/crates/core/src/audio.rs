//! Log-mel analysis and Griffin-Lim resynthesis.
//!
//! Framing follows the centered convention: the signal is reflect-padded by
//! `fft_size / 2` on both sides, so frame `t` is centered on sample
//! `t · hop_length` and a signal of `n > 0` samples yields `n / hop + 1`
//! frames. The Hann window (`win_length` samples) sits in the middle of each
//! `fft_size` analysis frame.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SasError};

pub const MEL_MAGIC: &[u8; 7] = b"SASMEL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means `sample_rate / 2`.
    pub fmax: Option<f64>,
    pub log_floor: f64,
    pub griffin_lim_iters: usize,
    pub griffin_lim_seed: u64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_length: 800,
            hop_length: 200,
            fft_size: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
            griffin_lim_iters: 60,
            griffin_lim_seed: 0,
        }
    }
}

impl AudioConfig {
    pub fn fmax(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn log_floor_value(&self) -> f64 {
        self.log_floor.ln()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(SasError::Config(m.to_string()));
        if self.sample_rate == 0 {
            return err("sample_rate must be positive");
        }
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return err("fft_size must be an even number ≥ 2");
        }
        if self.win_length == 0 || self.win_length > self.fft_size {
            return err("win_length must be in [1, fft_size]");
        }
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return err("hop_length must be in [1, win_length]");
        }
        if self.n_mels == 0 {
            return err("n_mels must be ≥ 1");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax() && self.fmax() <= nyquist) {
            return err("frequency range must satisfy 0 ≤ fmin < fmax ≤ sample_rate/2");
        }
        if !(self.log_floor > 0.0) {
            return err("log_floor must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_abs(&self) -> f32 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// `T × n_mels` natural-log mel energies, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f32>, config: &AudioConfig) -> Self {
        Self {
            frames,
            hop_length: config.hop_length,
            sample_rate: config.sample_rate,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SasError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| SasError::io(path, e);
        w.write_all(MEL_MAGIC).map_err(io)?;
        w.write_all(&(self.n_frames() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.n_mels() as u32).to_le_bytes()).map_err(io)?;
        for v in self.frames.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path, config: &AudioConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| SasError::io(path, e))?;
        Ok(Self::new(decode_mel_bytes(&bytes)?, config))
    }
}

pub fn decode_mel_bytes(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 15 || &bytes[..7] != MEL_MAGIC {
        return Err(SasError::format("magic", "expected SASMEL1 header"));
    }
    let t = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    let body = &bytes[15..];
    if body.len() != t * m * 4 {
        return Err(SasError::format(
            "frames",
            format!("expected {} bytes for {t}×{m} values, found {}", t * m * 4, body.len()),
        ));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SasError::format("frames", "non-finite value"));
    }
    Ok(Array2::from_shape_vec((t, m), values).expect("shape checked"))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// The `n_mels + 2` band edges in Hz; filter `k` peaks at edge `k + 1`.
fn mel_band_edges(config: &AudioConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.fmin);
    let hi = hz_to_mel(config.fmax());
    let n = config.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Peak frequency of every triangular filter, in Hz.
pub fn mel_center_frequencies(config: &AudioConfig) -> Vec<f64> {
    let edges = mel_band_edges(config);
    edges[1..edges.len() - 1].to_vec()
}

/// Triangular mel filters, `n_mels × (fft_size / 2 + 1)`, peak height 1.
pub fn build_mel_filterbank(config: &AudioConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let edges = mel_band_edges(config);
    let n_bins = config.n_bins();
    let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
    let mut fb = Array2::zeros((config.n_mels, n_bins));
    for k in 0..config.n_mels {
        let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            fb[[k, b]] = up.min(down).max(0.0);
        }
        // A filter narrower than the bin spacing still gets its nearest bin.
        if fb.row(k).iter().all(|&v| v == 0.0) {
            let nearest = ((mid / bin_hz).round() as usize).min(n_bins - 1);
            fb[[k, nearest]] = 1.0;
        }
    }
    Ok(fb)
}

/// Number of centered frames for a signal of `len` samples.
pub fn frame_count(len: usize, config: &AudioConfig) -> usize {
    if len == 0 {
        0
    } else {
        // (len + fft_size − fft_size) / hop + 1 with fft_size/2 padding per side
        len / config.hop_length + 1
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Reusable STFT machinery for one configuration.
pub struct Stft {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: &AudioConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        let n = config.fft_size;
        let offset = (n - config.win_length) / 2;
        let mut window = vec![0.0; n];
        for i in 0..config.win_length {
            // periodic Hann
            window[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / config.win_length as f64).cos();
        }
        Ok(Self {
            fft_size: n,
            hop: config.hop_length,
            window,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Complex spectrum per frame, `T` rows of `fft_size / 2 + 1` bins.
    pub fn forward(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n = samples.len();
        if n == 0 {
            return Vec::new();
        }
        let half = (self.fft_size / 2) as isize;
        let frames = n / self.hop + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        (0..frames)
            .map(|t| {
                let start = (t * self.hop) as isize - half;
                for (i, slot) in buf.iter_mut().enumerate() {
                    let x = samples[reflect_index(start + i as isize, n)];
                    *slot = Complex::new(x * self.window[i], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.n_bins()].to_vec()
            })
            .collect()
    }

    /// Windowed overlap-add inverse; output has `hop · (T − 1)` samples.
    pub fn inverse(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let t = spectra.len();
        if t == 0 {
            return Vec::new();
        }
        let n = self.fft_size;
        let padded_len = n + self.hop * (t - 1);
        let mut out = vec![0.0; padded_len];
        let mut norm = vec![0.0; padded_len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (f, spec) in spectra.iter().enumerate() {
            for k in 0..n {
                buf[k] = if k < spec.len() {
                    spec[k]
                } else {
                    spec[n - k].conj()
                };
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for i in 0..n {
                let w = self.window[i];
                out[start + i] += buf[i].re / n as f64 * w;
                norm[start + i] += w * w;
            }
        }
        let half = n / 2;
        let len = self.hop * (t - 1);
        (half..half + len)
            .map(|i| if norm[i] > 1e-10 { out[i] / norm[i] } else { 0.0 })
            .collect()
    }
}

fn check_rate(wave: &Waveform, config: &AudioConfig) -> Result<()> {
    if wave.sample_rate != config.sample_rate {
        return Err(SasError::Input(format!(
            "waveform sample rate {} does not match configured {}",
            wave.sample_rate, config.sample_rate
        )));
    }
    if wave.samples.iter().any(|s| !s.is_finite()) {
        return Err(SasError::Input("waveform contains non-finite samples".into()));
    }
    Ok(())
}

fn magnitudes_to_logmel(spectra: &[Vec<Complex<f64>>], fb: &Array2<f64>, floor: f64) -> Array2<f32> {
    let mut frames = Array2::zeros((spectra.len(), fb.nrows()));
    for (t, spec) in spectra.iter().enumerate() {
        for k in 0..fb.nrows() {
            let e: f64 = fb.row(k).iter().zip(spec).map(|(w, c)| w * c.norm()).sum();
            frames[[t, k]] = e.max(floor).ln() as f32;
        }
    }
    frames
}

pub fn waveform_to_logmel(wave: &Waveform, config: &AudioConfig) -> Result<MelSpectrogram> {
    check_rate(wave, config)?;
    let stft = Stft::new(config)?;
    let fb = build_mel_filterbank(config)?;
    let samples: Vec<f64> = wave.samples.iter().map(|&s| s as f64).collect();
    let spectra = stft.forward(&samples);
    let frames = magnitudes_to_logmel(&spectra, &fb, config.log_floor);
    Ok(MelSpectrogram::new(frames, config))
}

/// Moore–Penrose pseudo-inverse of the filterbank, `n_bins × n_mels`.
pub fn filterbank_pseudo_inverse(fb: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = fb.dim();
    let m = DMatrix::from_row_slice(rows, cols, fb.as_slice().expect("standard layout"));
    let pinv = m
        .pseudo_inverse(1e-10)
        .map_err(|e| SasError::Numerical(format!("filterbank pseudo-inverse failed: {e}")))?;
    Ok(Array2::from_shape_fn((cols, rows), |(i, j)| pinv[(i, j)]))
}

/// Reconstructs a waveform from a log-mel spectrogram.
///
/// Mel energies are mapped to linear magnitudes through the filterbank
/// pseudo-inverse (negative values clamped to zero), then phases are
/// estimated by alternating projections starting from seeded random phases.
pub fn griffin_lim(mel: &MelSpectrogram, config: &AudioConfig) -> Result<Waveform> {
    config.validate()?;
    if mel.n_frames() == 0 {
        return Ok(Waveform::new(Vec::new(), config.sample_rate));
    }
    if mel.n_mels() != config.n_mels {
        return Err(SasError::Input(format!(
            "spectrogram has {} mel channels, config expects {}",
            mel.n_mels(),
            config.n_mels
        )));
    }
    let stft = Stft::new(config)?;
    let fb = build_mel_filterbank(config)?;
    let pinv = filterbank_pseudo_inverse(&fb)?;
    let energies = mel.frames.mapv(|v| (v as f64).exp());
    let linear = energies.dot(&pinv.t()).mapv(|v| v.max(0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(config.griffin_lim_seed);
    let mut phases: Vec<Vec<Complex<f64>>> = (0..linear.nrows())
        .map(|_| {
            (0..linear.ncols())
                .map(|_| Complex::from_polar(1.0, rng.random_range(0.0..2.0 * PI)))
                .collect()
        })
        .collect();
    let apply = |phases: &[Vec<Complex<f64>>]| -> Vec<Vec<Complex<f64>>> {
        phases
            .iter()
            .zip(linear.rows())
            .map(|(ph, mag)| ph.iter().zip(mag.iter()).map(|(p, &m)| p * m).collect())
            .collect()
    };
    for _ in 0..config.griffin_lim_iters {
        let signal = stft.inverse(&apply(&phases));
        let rebuilt = stft.forward(&signal);
        for (ph, spec) in phases.iter_mut().zip(rebuilt) {
            for (p, c) in ph.iter_mut().zip(spec) {
                let norm = c.norm();
                *p = if norm > 1e-12 { c / norm } else { Complex::new(1.0, 0.0) };
            }
        }
    }
    let signal = stft.inverse(&apply(&phases));
    let samples = signal.iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect();
    Ok(Waveform::new(samples, config.sample_rate))
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => SasError::io(path, io),
        other => SasError::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| SasError::format("wav", format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(SasError::format("wav", "expected 16-bit PCM mono"));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| SasError::format("wav", e.to_string()))?;
    Ok(Waveform::new(samples, spec.sample_rate))
}
