//! Log-mel front end.
//!
//! Waveform -> centered STFT (Hann window, reflection padding) -> power spectrum
//! -> triangular HTK-mel filterbank -> natural log with a small floor.
//!
//! With the default configuration a clip of `t` seconds yields exactly
//! `ceil(100 t)` frames of 128 mel bins.

use std::path::Path;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a 16-bit PCM mono WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::InvalidInput(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::InvalidInput(format!(
                "{}: expected 16-bit PCM, found {:?} with {} bits",
                path.display(),
                spec.sample_format,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes the clip as 16-bit PCM mono, clamping to [-1, 1].
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub n_mels: usize,
    pub frames_per_second: usize,
    pub window_length_ms: f64,
    pub hop_length_ms: f64,
    /// `None` picks the next power of two at or above the window length in samples.
    pub fft_size: Option<usize>,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            frames_per_second: 100,
            window_length_ms: 25.0,
            hop_length_ms: 10.0,
            fft_size: None,
            mel_fmin: 20.0,
            mel_fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.frames_per_second == 0 {
            return Err(Error::Config("n_mels and frames_per_second must be positive".into()));
        }
        if (self.hop_length_ms * self.frames_per_second as f64 - 1000.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "hop {} ms does not give {} frames per second",
                self.hop_length_ms, self.frames_per_second
            )));
        }
        if !(self.window_length_ms > 0.0) {
            return Err(Error::Config("window length must be positive".into()));
        }
        if !(self.mel_fmin >= 0.0 && self.mel_fmin < self.mel_fmax) {
            return Err(Error::Config(format!(
                "mel range [{}, {}] is empty",
                self.mel_fmin, self.mel_fmax
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Frame count for a clip of `seconds`: `ceil(frames_per_second * seconds)`.
    pub fn frames_for_duration(&self, seconds: f64) -> usize {
        // The epsilon absorbs representation error such as 0.29 * 100 = 28.999999999999996.
        (self.frames_per_second as f64 * seconds - 1e-9).ceil().max(0.0) as usize
    }

    fn frame_geometry(&self, sample_rate: u32) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let nyquist = sample_rate as f64 / 2.0;
        if self.mel_fmax > nyquist {
            return Err(Error::Config(format!(
                "mel_fmax {} Hz exceeds the Nyquist frequency {} Hz of a {} Hz signal",
                self.mel_fmax, nyquist, sample_rate
            )));
        }
        let sr = sample_rate as f64;
        let window = (self.window_length_ms * sr / 1000.0).round() as usize;
        let hop = (self.hop_length_ms * sr / 1000.0).round() as usize;
        if window == 0 || hop == 0 {
            return Err(Error::Config(format!(
                "sample rate {sample_rate} Hz is too low for the window and hop lengths"
            )));
        }
        let fft = match self.fft_size {
            Some(n) if n >= window => n,
            Some(n) => {
                return Err(Error::Config(format!(
                    "fft_size {n} is shorter than the {window}-sample window"
                )))
            }
            None => window.next_power_of_two(),
        };
        Ok((window, hop, fft))
    }
}

/// Log-mel matrix, `[n_mels, n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f32>,
    pub config: SpectrogramConfig,
}

impl Spectrogram {
    pub fn new(values: Array2<f32>, config: SpectrogramConfig) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("spectrogram contains non-finite values".into()));
        }
        Ok(Self { values, config })
    }

    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Center frequency in Hz of every mel bin.
pub fn mel_center_frequencies(cfg: &SpectrogramConfig) -> Vec<f64> {
    mel_points(cfg)[1..=cfg.n_mels].iter().map(|&m| mel_to_hz(m)).collect()
}

fn mel_points(cfg: &SpectrogramConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.mel_fmin);
    let hi = hz_to_mel(cfg.mel_fmax);
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2).map(|i| lo + step * i as f64).collect()
}

/// Triangular filters `[n_mels, fft/2 + 1]`, peak weight 1 at each center.
fn mel_filterbank(cfg: &SpectrogramConfig, fft: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = fft / 2 + 1;
    let hz: Vec<f64> = mel_points(cfg).into_iter().map(mel_to_hz).collect();
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (hz[m], hz[m + 1], hz[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / fft as f64;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Mirror an out-of-range index back into `0..len` (numpy "reflect", edge not repeated).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

pub fn compute_log_mel(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    let (window, hop, fft) = cfg.frame_geometry(w.sample_rate())?;
    let samples = w.samples();
    let n_frames = samples.len().div_ceil(hop);
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg, fft, w.sample_rate());
    let n_bins = fft / 2 + 1;

    let plan = FftPlanner::<f64>::new().plan_fft_forward(fft);
    let mut buf = vec![Complex::new(0.0, 0.0); fft];
    let mut power = vec![0.0f64; n_bins];
    let mut out = Array2::<f32>::zeros((cfg.n_mels, n_frames));
    let half = (window / 2) as isize;

    for frame in 0..n_frames {
        let start = (frame * hop) as isize - half;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < window {
                let s = samples[reflect_index(start + i as isize, samples.len())] as f64;
                Complex::new(s * hann[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        plan.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let energy: f64 = fb.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
            out[[m, frame]] = (energy + cfg.log_floor).ln() as f32;
        }
    }
    Spectrogram::new(out, cfg.clone())
}

/// `(v - mean) / std` elementwise.
pub fn normalize(s: &Spectrogram, mean: f32, std: f32) -> Result<Spectrogram> {
    if !(std > 0.0) {
        return Err(Error::Config(format!("normalization std must be positive, got {std}")));
    }
    Ok(Spectrogram {
        values: s.values.mapv(|v| (v - mean) / std),
        config: s.config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, sr: u32, amp: f64) -> Waveform {
        let n = (seconds * sr as f64) as usize;
        let samples = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn silence_gives_log_floor_everywhere() {
        let cfg = SpectrogramConfig::default();
        let w = Waveform::new(vec![0.0; 5 * 16000], 16000).unwrap();
        let s = compute_log_mel(&w, &cfg).unwrap();
        assert_eq!(s.values.dim(), (128, 500));
        let floor = (1e-10f64).ln() as f32;
        assert!(s.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn one_second_gives_100_frames() {
        let s = compute_log_mel(&sine(440.0, 1.0, 16000, 0.5), &SpectrogramConfig::default()).unwrap();
        assert_eq!(s.n_frames(), 100);
        assert_eq!(s.n_mels(), 128);
    }

    #[test]
    fn frame_count_tracks_duration() {
        let cfg = SpectrogramConfig::default();
        for n in [1usize, 159, 160, 161, 1600, 8000, 15999, 16001, 48000] {
            let w = Waveform::new(vec![0.1; n], 16000).unwrap();
            let s = compute_log_mel(&w, &cfg).unwrap();
            let expected = (100.0 * n as f64 / 16000.0).round() as i64;
            assert!((s.n_frames() as i64 - expected).abs() <= 1, "n = {n}");
            assert_eq!(s.n_frames(), cfg.frames_for_duration(w.duration()));
        }
    }

    #[test]
    fn sine_peaks_in_nearest_mel_bin() {
        let cfg = SpectrogramConfig::default();
        let sr = 16000;
        let w = sine(1000.0, 1.0, sr, 0.5);
        let s = compute_log_mel(&w, &cfg).unwrap();

        // Oracle: naive DFT of each interior frame locates the spectral peak; the
        // mel bin centered nearest that peak must hold the column maximum.
        let centers = mel_center_frequencies(&cfg);
        let (window, hop) = (400usize, 160usize);
        let x = w.samples();
        let mut hits = 0;
        let mut total = 0;
        for frame in 2..s.n_frames() - 2 {
            let start = frame * hop - window / 2;
            let seg: Vec<f64> = (0..window)
                .map(|i| {
                    let h = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos();
                    x[start + i] as f64 * h
                })
                .collect();
            let mut best = (0.0, 0usize);
            for k in 0..=256 {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in seg.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / 512.0;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                let mag = re * re + im * im;
                if mag > best.0 {
                    best = (mag, k);
                }
            }
            let peak_hz = best.1 as f64 * sr as f64 / 512.0;
            let nearest = centers
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - peak_hz).abs().total_cmp(&(b.1 - peak_hz).abs()))
                .unwrap()
                .0;
            let col = s.values.column(frame);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            total += 1;
            if argmax == nearest {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn scaling_shifts_log_energy_by_two_ln_k() {
        let cfg = SpectrogramConfig::default();
        let base = sine(1000.0, 0.5, 16000, 0.1);
        let k = 3.0f32;
        let scaled = Waveform::new(base.samples().iter().map(|s| s * k).collect(), 16000).unwrap();
        let a = compute_log_mel(&base, &cfg).unwrap();
        let b = compute_log_mel(&scaled, &cfg).unwrap();
        let shift = 2.0 * (k as f64).ln();
        let mut checked = 0;
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            // Only bins far above the floor follow the law.
            if (*x as f64) > (cfg.log_floor.ln() + 20.0) {
                assert!(((*y - *x) as f64 - shift).abs() < 1e-3, "{x} {y}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn deterministic() {
        let cfg = SpectrogramConfig::default();
        let w = sine(523.0, 0.3, 16000, 0.7);
        let a = compute_log_mel(&w, &cfg).unwrap();
        let b = compute_log_mel(&w, &cfg).unwrap();
        let bits = |s: &Spectrogram| s.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![f32::NAN], 16000).is_err());
        let w = Waveform::new(vec![0.0; 8000], 8000).unwrap();
        let err = compute_log_mel(&w, &SpectrogramConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn normalize_cases() {
        let cfg = SpectrogramConfig::default();
        let s = Spectrogram::new(Array2::from_shape_vec((1, 2), vec![1.0, 3.0]).unwrap(), cfg.clone()).unwrap();
        assert_eq!(normalize(&s, 0.0, 1.0).unwrap(), s);
        assert_eq!(normalize(&s, 2.0, 1.0).unwrap().values.as_slice().unwrap(), &[-1.0, 1.0]);
        let c = Spectrogram::new(Array2::from_elem((3, 4), 7.5), cfg).unwrap();
        assert!(normalize(&c, 7.5, 2.0).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(normalize(&s, 0.0, 0.0).is_err());
        assert!(normalize(&s, 0.0, -1.0).is_err());
    }

    #[test]
    fn reflect_index_mirrors() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = sine(300.0, 0.1, 16000, 0.5);
        w.write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16000);
        assert_eq!(back.samples().len(), w.samples().len());
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
