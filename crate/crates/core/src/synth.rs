//! Bundled synthetic audio: an 8-clip pretraining toy set and three small
//! labelled probe tasks (pitch class of pure tones, loudness class of noise
//! bursts, number of simultaneous tones).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::rng::derive_rng;

const TAU: f64 = std::f64::consts::TAU;
const SYNTH: u64 = 0x5157;

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub wave: Waveform,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub classes: usize,
    pub clips: Vec<Clip>,
}

impl Task {
    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }
}

fn tone(freq: f64, amp: f64, phase: f64, n: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    (0..n)
        .map(|i| amp * (TAU * freq * i as f64 / sr + phase).sin())
        .collect()
}

fn add_noise<R: Rng>(x: &mut [f64], std: f64, rng: &mut R) {
    for v in x {
        let z: f64 = StandardNormal.sample(rng);
        *v += std * z;
    }
}

fn clamp(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| v.clamp(-0.99, 0.99)).collect()
}

/// Eight 2-second clips with distinct spectral shapes.
pub fn toy_set(seed: u64) -> Vec<(String, Waveform)> {
    let mut rng = derive_rng(seed, &[SYNTH, 0]);
    let n = CLIP_SAMPLES;
    let sr = SAMPLE_RATE as f64;
    let mut clips = Vec::new();
    for k in 0..8usize {
        let mut x = vec![0.0; n];
        match k % 4 {
            0 => {
                // harmonic stack
                let f0 = 110.0 * (k as f64 + 1.0);
                for h in 1..=6 {
                    let t = tone(f0 * h as f64, 0.3 / h as f64, rng.gen_range(0.0..TAU), n);
                    x.iter_mut().zip(t).for_each(|(a, b)| *a += b);
                }
            }
            1 => {
                // linear chirp
                let (f_a, f_b) = (200.0 + 100.0 * k as f64, 3000.0 + 300.0 * k as f64);
                let mut phase = 0.0;
                for (i, v) in x.iter_mut().enumerate() {
                    let f = f_a + (f_b - f_a) * i as f64 / n as f64;
                    phase += TAU * f / sr;
                    *v = 0.4 * phase.sin();
                }
            }
            2 => {
                // amplitude-modulated tone
                let fc = 500.0 + 250.0 * k as f64;
                let fm = 2.0 + k as f64;
                for (i, v) in x.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    *v = 0.4 * (0.5 + 0.5 * (TAU * fm * t).sin()) * (TAU * fc * t).sin();
                }
            }
            _ => {
                // noise bursts on a low drone
                let drone = tone(60.0 + 20.0 * k as f64, 0.2, 0.0, n);
                x.iter_mut().zip(drone).for_each(|(a, b)| *a += b);
                let period = 4000 + 500 * k;
                for (i, v) in x.iter_mut().enumerate() {
                    if (i / period) % 2 == 0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += 0.15 * z;
                    }
                }
            }
        }
        clips.push((format!("toy_{k:02}"), Waveform::new(clamp(x), SAMPLE_RATE)));
    }
    clips
}

/// Pitch classes of pure tones: class `c` is semitone `3c` within the octave,
/// played in one of four octaves with random detune, level, phase and noise.
pub fn pitch_task(per_class: usize, seed: u64) -> Task {
    let classes = 4;
    let mut rng = derive_rng(seed, &[SYNTH, 1]);
    let mut clips = Vec::new();
    for i in 0..per_class {
        for c in 0..classes {
            let octave = rng.gen_range(0..4) as f64;
            let cents = rng.gen_range(-40.0..40.0);
            let semis = 3.0 * c as f64 + cents / 100.0;
            let f = 130.81 * 2f64.powf(octave + semis / 12.0);
            let amp = rng.gen_range(0.05..0.5);
            let mut x = tone(f, amp, rng.gen_range(0.0..TAU), CLIP_SAMPLES);
            add_noise(&mut x, amp * rng.gen_range(0.05..0.5), &mut rng);
            clips.push(Clip {
                id: format!("pitch_{c}_{i:03}"),
                wave: Waveform::new(clamp(x), SAMPLE_RATE),
                label: c,
            });
        }
    }
    Task {
        name: "pitch_class".into(),
        classes,
        clips,
    }
}

/// Loudness class of white-noise bursts: levels spaced 6 dB apart.
pub fn amplitude_task(per_class: usize, seed: u64) -> Task {
    let classes = 4;
    let mut rng = derive_rng(seed, &[SYNTH, 2]);
    let mut clips = Vec::new();
    for i in 0..per_class {
        for c in 0..classes {
            let std = 0.02 * 2f64.powi(c as i32) * rng.gen_range(0.85..1.15);
            let len = rng.gen_range(CLIP_SAMPLES / 4..CLIP_SAMPLES / 2);
            let start = rng.gen_range(0..CLIP_SAMPLES - len);
            let mut x = vec![0.0; CLIP_SAMPLES];
            add_noise(&mut x[start..start + len], std, &mut rng);
            clips.push(Clip {
                id: format!("amp_{c}_{i:03}"),
                wave: Waveform::new(clamp(x), SAMPLE_RATE),
                label: c,
            });
        }
    }
    Task {
        name: "amplitude_class".into(),
        classes,
        clips,
    }
}

/// How many simultaneous tones (1 to 4) with random pitches are sounding.
pub fn count_task(per_class: usize, seed: u64) -> Task {
    let classes = 4;
    let mut rng = derive_rng(seed, &[SYNTH, 3]);
    let mut clips = Vec::new();
    for i in 0..per_class {
        for c in 0..classes {
            let mut x = vec![0.0; CLIP_SAMPLES];
            for _ in 0..=c {
                let f = 150.0 * 2f64.powf(rng.gen_range(0.0..4.0));
                let t = tone(f, 0.15, rng.gen_range(0.0..TAU), CLIP_SAMPLES);
                x.iter_mut().zip(t).for_each(|(a, b)| *a += b);
            }
            add_noise(&mut x, 0.005, &mut rng);
            clips.push(Clip {
                id: format!("count_{c}_{i:03}"),
                wave: Waveform::new(clamp(x), SAMPLE_RATE),
                label: c,
            });
        }
    }
    Task {
        name: "tone_count".into(),
        classes,
        clips,
    }
}

pub fn task_by_name(name: &str, per_class: usize, seed: u64) -> Option<Task> {
    match name {
        "pitch_class" => Some(pitch_task(per_class, seed)),
        "amplitude_class" => Some(amplitude_task(per_class, seed)),
        "tone_count" => Some(count_task(per_class, seed)),
        _ => None,
    }
}

pub const TASK_NAMES: [&str; 3] = ["pitch_class", "amplitude_class", "tone_count"];
