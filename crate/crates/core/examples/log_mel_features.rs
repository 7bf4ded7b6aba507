//! Waveform to log-mel spectrogram, round-tripped through a 16-bit WAV file.

use tome_ast::features::{compute_log_mel, mel_center_frequencies, normalize, SpectrogramConfig, Waveform};
use tome_ast::Result;

/// Returns the mel bin holding the most energy for a pure tone, averaged over frames.
pub fn run_example(freq_hz: f32, seconds: f32, wav_path: &std::path::Path) -> Result<usize> {
    let sr = 16_000u32;
    let n = (seconds * sr as f32) as usize;
    let samples = (0..n)
        .map(|i| 0.5 * (2.0 * std::f32::consts::PI * freq_hz * i as f32 / sr as f32).sin())
        .collect();
    Waveform::new(samples, sr)?.write_wav(wav_path)?;
    let wave = Waveform::read_wav(wav_path)?;

    let cfg = SpectrogramConfig::default();
    let spec = compute_log_mel(&wave, &cfg)?;
    println!("{} mel bins x {} frames for {:.2} s", spec.n_mels(), spec.n_frames(), wave.duration());

    let mean_energy = spec.values.mean_axis(ndarray::Axis(1)).expect("frames");
    let peak = mean_energy
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("mel bins");
    let centers = mel_center_frequencies(&cfg);
    println!("loudest mel bin {peak} (center {:.0} Hz) for a {freq_hz} Hz tone", centers[peak]);

    let normalized = normalize(&spec, -4.27, 4.57)?;
    println!("normalized range {:.2}..{:.2}", normalized.values.fold(f32::MAX, |a, &b| a.min(b)), normalized.values.fold(f32::MIN, |a, &b| a.max(b)));
    Ok(peak)
}

fn main() -> Result<()> {
    let path = std::env::temp_dir().join("tone.wav");
    run_example(1000.0, 1.0, &path)?;
    Ok(())
}
