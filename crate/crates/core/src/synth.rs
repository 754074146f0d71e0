//! Synthetic sessions with a planted state -> engagement relationship.
//!
//! Each participant alternates between a combat and an exploration state in
//! segments of random length. The engagement trace follows the state after
//! a reaction delay, smoothed and noisy, on a per-participant scale and
//! offset. Gamepad press rates and the mean of the frame features move with
//! the state along fixed global directions. With `time_drift > 0` those
//! directions rotate from one 20-minute block to the next by
//! `pi * time_drift` per block, so one fixed mapping cannot serve the whole
//! session.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::corpus::{
    parse_key_values, write_session, ActionVocabulary, EngagementTrace, FrameFeatureStream, GamepadEvent, Session, ACTION_COUNT,
    MANIFEST_FILE, MAX_COMBO,
};
use crate::error::{Error, Result};
use crate::models::FRAME_CHANNELS;
use crate::nn::{derive_seed, seeded_rng, Rng};
use crate::preprocess::t_level;

const POLL_HZ: f64 = 10.0;
const FRAME_FPS: f64 = 3.0;
/// Trace samples per second of annotation (replay) time.
const TRACE_HZ: f64 = 4.0;
const SMOOTHING_S: f64 = 5.0;
const REACTION_S: f64 = 1.0;
const ANNOTATION_SPEED: f64 = 2.0;
const BASE_PRESS: f64 = 0.04;
/// Press-probability shift per action at unit effect strength.
const GAMEPAD_GAIN: f64 = 0.005;
/// Frame-mean shift along the planted direction at unit effect strength.
const FRAME_GAIN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_participants: usize,
    pub duration_s: f64,
    /// Mean length of a combat or exploration segment.
    pub combat_segment_s: f64,
    pub effect_strength: f64,
    pub time_drift: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_participants: 20,
            duration_s: 3600.0,
            combat_segment_s: 60.0,
            effect_strength: 1.0,
            time_drift: 0.0,
            noise_sd: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_participants == 0 {
            return Err(Error::Config("n_participants must be at least 1".into()));
        }
        for (name, v) in [("duration_s", self.duration_s), ("combat_segment_s", self.combat_segment_s)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.duration_s < 2.0 * self.combat_segment_s {
            return Err(Error::Config("duration_s must cover at least two state segments".into()));
        }
        for (name, v) in [("effect_strength", self.effect_strength), ("noise_sd", self.noise_sd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !self.time_drift.is_finite() {
            return Err(Error::Config("time_drift must be finite".into()));
        }
        Ok(())
    }

    /// Reads `key = value` lines; absent keys keep their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, raw) in parse_key_values(text, path)? {
            let bad = || Error::Config(format!("{}: `{key}` has an invalid value `{raw}`", path.display()));
            let real = || raw.parse::<f64>().map_err(|_| bad());
            match key.as_str() {
                "n_participants" => cfg.n_participants = raw.parse().map_err(|_| bad())?,
                "duration_s" => cfg.duration_s = real()?,
                "combat_segment_s" => cfg.combat_segment_s = real()?,
                "effect_strength" => cfg.effect_strength = real()?,
                "time_drift" => cfg.time_drift = real()?,
                "noise_sd" => cfg.noise_sd = real()?,
                "seed" => cfg.seed = raw.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("{}: unknown key `{key}`", path.display()))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn participant_id(&self, index: usize) -> String {
        format!("p{:02}", index + 1)
    }

    /// Resolved configuration as `key = value` lines.
    pub fn render(&self) -> String {
        format!(
            "n_participants = {}\nduration_s = {}\ncombat_segment_s = {}\neffect_strength = {}\ntime_drift = {}\nnoise_sd = {}\nseed = {}\n",
            self.n_participants,
            self.duration_s,
            self.combat_segment_s,
            self.effect_strength,
            self.time_drift,
            self.noise_sd,
            self.seed
        )
    }
}

/// Directions shared by all participants so the mapping generalises.
struct Planted {
    /// Per-action press shift sign; half up, half down, one neutral.
    action_signs: [f64; ACTION_COUNT],
    u: Vec<f64>,
    v: Vec<f64>,
}

fn unit(mut x: Vec<f64>) -> Vec<f64> {
    let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    x.iter_mut().for_each(|a| *a /= norm);
    x
}

impl Planted {
    fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(derive_seed(seed, 0));
        let mut order: Vec<usize> = (0..ACTION_COUNT).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut action_signs = [0.0; ACTION_COUNT];
        for (k, &a) in order.iter().enumerate().take(ACTION_COUNT - 1) {
            action_signs[a] = if k % 2 == 0 { 1.0 } else { -1.0 };
        }
        let gaussian = |rng: &mut Rng| -> Vec<f64> { (0..FRAME_CHANNELS).map(|_| StandardNormal.sample(rng)).collect() };
        let u = unit(gaussian(&mut rng));
        let mut v = gaussian(&mut rng);
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(b, a)| *b -= dot * a);
        Self {
            action_signs,
            u,
            v: unit(v),
        }
    }
}

/// Alternating combat (1) / exploration (0) segments.
struct StateTrack {
    /// Segment start times; segment `k` has state `(first + k) % 2`.
    starts: Vec<f64>,
    first: u8,
}

impl StateTrack {
    fn new(duration: f64, mean: f64, rng: &mut Rng) -> Self {
        let first = rng.gen_range(0..2u8);
        let mut starts = vec![0.0];
        let mut t = 0.0;
        while t < duration + SMOOTHING_S + REACTION_S {
            t += rng.gen_range(0.5 * mean..1.5 * mean);
            starts.push(t);
        }
        Self { starts, first }
    }

    fn state(&self, t: f64) -> f64 {
        let k = self.starts.partition_point(|&s| s <= t).saturating_sub(1);
        f64::from((self.first + (k % 2) as u8) % 2)
    }

    /// Fraction of `[a, b)` spent in combat; times before 0 take the first state.
    fn combat_fraction(&self, a: f64, b: f64) -> f64 {
        let mut covered = 0.0;
        if a < 0.0 {
            covered += (b.min(0.0) - a) * self.state(0.0);
        }
        let lo = a.max(0.0);
        for (k, &s) in self.starts.iter().enumerate() {
            let e = self.starts.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let (x, y) = (lo.max(s), b.min(e));
            if y > x {
                covered += (y - x) * self.state(s);
            }
        }
        covered / (b - a)
    }
}

/// Independent streams for the state track, the features and the trace.
fn participant_rngs(seed: u64, index: usize) -> [Rng; 3] {
    let base = derive_seed(seed, 1 + index as u64);
    [0, 1, 2].map(|k| seeded_rng(derive_seed(base, k)))
}

fn drift_angle(config: &SynthConfig, t: f64) -> f64 {
    PI * config.time_drift * f64::from(t_level(t) - 1)
}

/// Generates one participant's session.
pub fn generate_session(config: &SynthConfig, index: usize) -> Result<Session> {
    config.validate()?;
    let planted = Planted::new(config.seed);
    generate_with(config, &planted, index)
}

fn generate_with(config: &SynthConfig, planted: &Planted, index: usize) -> Result<Session> {
    let [mut state_rng, mut rng, mut trace_rng] = participant_rngs(config.seed, index);
    let duration = config.duration_s;
    let states = StateTrack::new(duration, config.combat_segment_s, &mut state_rng);
    let activity = rng.gen_range(0.85..1.15);
    let trace_scale = trace_rng.gen_range(0.5..2.0);
    let trace_offset = trace_rng.gen_range(-1.0..1.0);
    let effect = config.effect_strength;

    let mut events = Vec::new();
    let ticks = (duration * POLL_HZ).floor() as usize;
    for k in 0..ticks {
        let t = k as f64 / POLL_HZ;
        let sign = (2.0 * states.state(t) - 1.0) * drift_angle(config, t).cos();
        let mut pressed = Vec::new();
        for (a, &w) in planted.action_signs.iter().enumerate() {
            let p = (activity * BASE_PRESS + effect * GAMEPAD_GAIN * w * sign).clamp(0.0, 1.0);
            if rng.gen::<f64>() < p {
                pressed.push(a as u8);
            }
        }
        pressed.truncate(MAX_COMBO);
        events.push(if pressed.is_empty() {
            GamepadEvent::no_key(t)
        } else {
            GamepadEvent::new(t, pressed)
        });
    }

    let frames = (duration * FRAME_FPS).round() as usize;
    let offset: Vec<f64> = (0..FRAME_CHANNELS).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut data = Vec::with_capacity(frames * FRAME_CHANNELS);
    for i in 0..frames {
        let t = i as f64 / FRAME_FPS;
        let phi = drift_angle(config, t);
        let shift = effect * FRAME_GAIN * (2.0 * states.state(t) - 1.0);
        let (cu, cv) = (shift * phi.cos(), shift * phi.sin());
        for ((&o, &u), &v) in offset.iter().zip(&planted.u).zip(&planted.v) {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((noise + o + cu * u + cv * v) as f32);
        }
    }

    let span = duration / ANNOTATION_SPEED;
    let samples = (span * TRACE_HZ).floor() as usize;
    let mut times: Vec<f64> = (0..=samples).map(|k| k as f64 / TRACE_HZ).collect();
    if span - times[samples] > 1e-9 {
        times.push(span);
    }
    let values = times
        .iter()
        .map(|&tau| {
            let g = tau * ANNOTATION_SPEED - REACTION_S;
            let e = states.combat_fraction(g - SMOOTHING_S / 2.0, g + SMOOTHING_S / 2.0);
            let noise: f64 = trace_rng.sample(StandardNormal);
            trace_scale * (e + config.noise_sd * noise) + trace_offset
        })
        .collect();

    let session = Session {
        participant_id: config.participant_id(index),
        duration_s: duration,
        events,
        features: FrameFeatureStream::vectors(FRAME_CHANNELS, FRAME_FPS, data)?,
        trace: EngagementTrace::new(times, values, ANNOTATION_SPEED)?,
    };
    session.check()?;
    Ok(session)
}

/// All participants' sessions, in participant order.
pub fn generate(config: &SynthConfig) -> Result<Vec<Session>> {
    config.validate()?;
    let planted = Planted::new(config.seed);
    (0..config.n_participants)
        .into_par_iter()
        .map(|i| generate_with(config, &planted, i))
        .collect()
}

/// Generates the corpus straight to disk, one directory per participant,
/// and returns the manifest paths. Existing sessions are only replaced
/// when `force` is set.
pub fn generate_corpus(config: &SynthConfig, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    config.validate()?;
    if !force {
        for i in 0..config.n_participants {
            let existing = out.join(config.participant_id(i)).join(MANIFEST_FILE);
            if existing.exists() {
                return Err(Error::Config(format!(
                    "{} already exists; pass --force to overwrite",
                    existing.display()
                )));
            }
        }
    }
    let planted = Planted::new(config.seed);
    let vocab = ActionVocabulary::standard();
    (0..config.n_participants)
        .into_par_iter()
        .map(|i| {
            let session = generate_with(config, &planted, i)?;
            write_session(&session, &out.join(&session.participant_id), &vocab)
        })
        .collect()
}
