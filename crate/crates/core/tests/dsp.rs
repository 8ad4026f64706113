use std::f64::consts::TAU;

use midlevel_core::dsp::{
    compute_spectrogram, read_wav, resample, write_wav, SpectrogramConfig, SpectrogramExtractor,
};
use proptest::prelude::*;

fn sine(freq: f64, rate: u32, n: usize, amp: f64) -> Vec<f32> {
    (0..n).map(|i| (amp * (TAU * freq * i as f64 / rate as f64).sin()) as f32).collect()
}

/// Band energies of one frame, with the magnitude spectrum from a direct
/// DFT sum instead of an FFT.
fn oracle_bands(frame: &[f64], ex: &SpectrogramExtractor) -> Vec<f64> {
    let n = frame.len();
    let fb = ex.filterbank();
    let mut mags = vec![0.0; fb.num_bins];
    for (k, m) in mags.iter_mut().enumerate() {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, x) in frame.iter().enumerate() {
            let w = 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos();
            let ph = TAU * (k * i) as f64 / n as f64;
            re += w * x * ph.cos();
            im -= w * x * ph.sin();
        }
        *m = re.hypot(im);
    }
    fb.weights.iter().map(|band| band.iter().map(|&(k, w)| w * mags[k]).sum()).collect()
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    v.enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0
}

#[test]
fn sine_at_band_centre_peaks_in_that_band() {
    let cfg = SpectrogramConfig::default();
    let ex = SpectrogramExtractor::new(cfg.clone()).unwrap();
    let centers = ex.filterbank().centers.clone();
    let n = 8 * cfg.hop + cfg.window_size;
    for k in 0..cfg.bands {
        let pcm = sine(centers[k], cfg.sample_rate, n, 0.5);
        let spec = ex.compute(&pcm).unwrap();
        let t = 4;
        let got = argmax((0..cfg.bands).map(|b| spec.get(b, t) as f64));

        // Frame t covers samples [t*hop - window/2, t*hop + window/2).
        let start = t * cfg.hop - cfg.window_size / 2;
        let frame: Vec<f64> = pcm[start..start + cfg.window_size].iter().map(|&x| x as f64).collect();
        let expect = argmax(oracle_bands(&frame, &ex).into_iter());
        assert_eq!(got, expect, "band {k} ({:.1} Hz)", centers[k]);

        // Bands spaced at least one FFT bin from both neighbours are
        // resolvable and must win outright.
        let gap_lo = if k == 0 { f64::INFINITY } else { centers[k] - centers[k - 1] };
        let gap_hi = if k + 1 == cfg.bands { f64::INFINITY } else { centers[k + 1] - centers[k] };
        if gap_lo.min(gap_hi) >= cfg.bin_hz() {
            assert_eq!(got, k, "band {k} ({:.1} Hz)", centers[k]);
        }
    }
}

#[test]
fn downsampled_sine_keeps_frequency_and_amplitude() {
    let pcm = sine(100.0, 44100, 44100, 0.8);
    let out = resample(&pcm, 44100, 22050).unwrap();
    assert_eq!(out.len(), 22050);
    // One second at 22050 Hz: DFT bin k sits at k Hz.
    let mid = &out[2000..out.len() - 2000];
    let n = mid.len();
    let amp_at = |f: f64| {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in mid.iter().enumerate() {
            let ph = TAU * f * i as f64 / 22050.0;
            re += x as f64 * ph.cos();
            im += x as f64 * ph.sin();
        }
        2.0 * re.hypot(im) / n as f64
    };
    let peak = (50..150).map(|f| (f, amp_at(f as f64))).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(peak.0, 100);
    assert!((peak.1 - 0.8).abs() / 0.8 < 0.01, "amplitude {}", peak.1);
}

#[test]
fn resample_length_arithmetic() {
    assert_eq!(resample(&vec![0.0; 48000], 48000, 22050).unwrap().len(), 22050);
    let x = sine(440.0, 22050, 3000, 0.3);
    assert_eq!(resample(&x, 22050, 22050).unwrap(), x);
}

#[test]
fn extraction_is_bitwise_deterministic() {
    let cfg = SpectrogramConfig::default();
    let pcm: Vec<f32> = (0..30000).map(|i| ((i as f32 * 0.013).sin() * (i as f32 * 0.0007).cos()) * 0.4).collect();
    let a = compute_spectrogram(&pcm, &cfg).unwrap();
    let b = SpectrogramExtractor::new(cfg).unwrap().compute(&pcm).unwrap();
    assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn wav_file_feeds_the_extractor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.wav");
    let pcm = sine(220.0, 22050, 22050, 0.25);
    write_wav(&path, &pcm, 22050).unwrap();
    let audio = read_wav(&path).unwrap();
    assert_eq!(audio.sample_rate, 22050);
    let spec = compute_spectrogram(&audio.samples, &SpectrogramConfig::default()).unwrap();
    assert_eq!(spec.shape(), (149, 22050 / 704));
}

fn small_config() -> impl Strategy<Value = SpectrogramConfig> {
    (6u32..10, 2usize..40, 1usize..8).prop_map(|(log_win, bands, hop_div)| {
        let window_size = 1 << log_win;
        SpectrogramConfig {
            sample_rate: 16000,
            window_size,
            hop: (window_size / hop_div).clamp(1, window_size - 1),
            bands,
            fmin: 50.0,
            fmax: 8000.0,
            log_floor: 1e-5,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn shape_follows_floor_of_length_over_hop(cfg in small_config(), extra in 0usize..5000, seed in 0u32..1000) {
        let n = cfg.window_size + extra;
        let pcm: Vec<f32> = (0..n).map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed)) as f32 / u32::MAX as f32) - 0.5).collect();
        let s = compute_spectrogram(&pcm, &cfg).unwrap();
        prop_assert_eq!(s.shape(), (cfg.bands, n / cfg.hop));
        prop_assert!(s.data.iter().all(|v| v.is_finite() && *v as f64 >= cfg.log_floor.ln() - 1e-4));
    }

    #[test]
    fn frame_count_is_monotone_in_length(cfg in small_config(), a in 0usize..100_000, b in 0usize..100_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(cfg.frame_count(lo) <= cfg.frame_count(hi));
    }

    #[test]
    fn louder_sine_never_lowers_band_energy(gain in 1.0f64..8.0, freq in 200.0f64..4000.0) {
        let cfg = SpectrogramConfig::default();
        let ex = SpectrogramExtractor::new(cfg.clone()).unwrap();
        let quiet = ex.compute(&sine(freq, cfg.sample_rate, 4096, 0.1)).unwrap();
        let loud = ex.compute(&sine(freq, cfg.sample_rate, 4096, 0.1 * gain)).unwrap();
        // Compared on the linear scale, up to float noise in bands far from
        // the tone.
        for (q, l) in quiet.data.iter().zip(&loud.data) {
            prop_assert!((*l as f64).exp() >= (*q as f64).exp() - 1e-6, "{} < {}", l, q);
        }
    }
}
