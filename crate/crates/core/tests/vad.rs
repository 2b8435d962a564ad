use std::f64::consts::PI;

use nnspeaker::corpus::AudioBuffer;
use nnspeaker::preprocess::{detect_voice, normalize_amplitude, VadConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: usize = 8000;

fn floor_noise(n: usize, rms: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = 0.0;
    let mut x: Vec<f64> = (0..n)
        .map(|_| {
            state = 0.97 * state + rng.random_range(-1.0..1.0);
            state
        })
        .collect();
    let r = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= rms / r);
    x
}

fn vowel(n: usize, f0: f64, formant: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / SR as f64;
            (1..30)
                .map(|h| {
                    let f = f0 * h as f64;
                    if f >= 0.5 * SR as f64 {
                        return 0.0;
                    }
                    (2.0 * PI * f * t).sin() / (1.0 + ((f - formant) / 400.0).powi(2))
                })
                .sum::<f64>()
                * 0.3
        })
        .collect()
}

fn fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&v| v).count() as f64 / mask.len() as f64
}

#[test]
fn silence_voiced_silence() {
    let mut x = floor_noise(3 * SR, 1e-3, 1);
    for (s, v) in x[SR..2 * SR].iter_mut().zip(vowel(SR, 120.0, 700.0)) {
        *s += v;
    }
    let mask = detect_voice(&AudioBuffer::new(x, SR as u32).unwrap(), &VadConfig::default()).unwrap();
    assert!(fraction(&mask.sample_mask[SR..2 * SR]) >= 0.9);
    assert!(fraction(&mask.sample_mask[..SR]) <= 0.1);
    assert!(fraction(&mask.sample_mask[2 * SR..]) <= 0.1);
}

#[test]
fn mask_ignores_global_gain_after_normalization() {
    let mut x = floor_noise(2 * SR, 1e-3, 3);
    for (s, v) in x[SR / 2..3 * SR / 2].iter_mut().zip(vowel(SR, 140.0, 650.0)) {
        *s += v;
    }
    let cfg = VadConfig::default();
    let base = detect_voice(
        &normalize_amplitude(&AudioBuffer::new(x.clone(), SR as u32).unwrap()),
        &cfg,
    )
    .unwrap();
    for gain in [0.01, 0.5, 3.0] {
        let scaled: Vec<f64> = x.iter().map(|v| v * gain).collect();
        let m = detect_voice(
            &normalize_amplitude(&AudioBuffer::new(scaled, SR as u32).unwrap()),
            &cfg,
        )
        .unwrap();
        assert_eq!(m.sample_mask, base.sample_mask, "gain {gain}");
    }
}

#[test]
fn zero_audio_is_unvoiced() {
    let mask = detect_voice(
        &AudioBuffer::new(vec![0.0; SR], SR as u32).unwrap(),
        &VadConfig::default(),
    )
    .unwrap();
    assert_eq!(mask.voiced_samples(), 0);
}
