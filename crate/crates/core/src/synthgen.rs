//! Synthetic minute-level household load with rectangular EV charging
//! sessions, written in the same schema the ingest path reads.
//!
//! Each home gets its own ChaCha8 stream (`stream = home index + 1`) off the
//! root seed, so homes can be generated independently and the output is a
//! pure function of the config.
//!
//! Per home and minute:
//!
//! ```text
//! grid_load = max(0, base_h + amp · cos(2π (minute_of_day − peak_h) / 1440) + noise) + ev_load
//! ```
//!
//! where `base_h` and `peak_h` are per-home draws around the configured
//! mean and a 19:00 peak. Sessions arrive `Poisson(rate)` times per day,
//! each at an evening time (18:00–22:00) with probability `evening_bias`
//! and uniformly over the day otherwise, and draw constant power and
//! duration uniformly from the configured ranges. A session that would
//! touch or overlap an earlier one is dropped; sessions running past the
//! end of the series are truncated.

use crate::dataio::MeterRecord;
use crate::error::{Error, Result};
use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const MINUTES_PER_DAY: usize = 1440;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_homes: usize,
    pub days: usize,
    pub base_mean_kw: f64,
    pub base_daily_amplitude_kw: f64,
    pub noise_std_kw: f64,
    pub ev_power_range_kw: [f64; 2],
    pub session_duration_range_min: [usize; 2],
    pub sessions_per_day_rate: f64,
    pub evening_bias: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_homes: 10,
            days: 60,
            base_mean_kw: 1.0,
            base_daily_amplitude_kw: 0.5,
            noise_std_kw: 0.15,
            ev_power_range_kw: [3.3, 7.2],
            session_duration_range_min: [60, 240],
            sessions_per_day_rate: 0.5,
            evening_bias: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_homes == 0 {
            problems.push("n_homes must be at least 1".to_string());
        }
        if self.days == 0 {
            problems.push("days must be at least 1".to_string());
        }
        for (name, v) in [
            ("base_mean_kw", self.base_mean_kw),
            ("base_daily_amplitude_kw", self.base_daily_amplitude_kw),
            ("noise_std_kw", self.noise_std_kw),
            ("sessions_per_day_rate", self.sessions_per_day_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        let [p_lo, p_hi] = self.ev_power_range_kw;
        if !(p_lo.is_finite() && p_hi.is_finite() && p_lo <= p_hi) {
            problems.push(format!("ev_power_range_kw [{p_lo}, {p_hi}] is empty"));
        }
        if !(p_lo > 3.0) {
            problems.push(format!(
                "ev_power_range_kw low end {p_lo} must exceed 3.0 kW so sessions are labelable"
            ));
        }
        let [d_lo, d_hi] = self.session_duration_range_min;
        if d_lo == 0 || d_lo > d_hi {
            problems.push(format!("session_duration_range_min [{d_lo}, {d_hi}] is empty"));
        }
        if !(0.0..=1.0).contains(&self.evening_bias) {
            problems.push(format!("evening_bias must be in [0, 1], got {}", self.evening_bias));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn mean_session_minutes(&self) -> f64 {
        let [lo, hi] = self.session_duration_range_min;
        (lo + hi) as f64 / 2.0
    }
}

/// First minute of every generated series.
pub fn series_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2018, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

pub fn home_id(index: usize) -> String {
    format!("home_{:03}", index + 1)
}

/// A charging session as a half-open minute range with constant power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Session {
    pub start: usize,
    pub end: usize,
    pub power_kw: f64,
}

/// All homes' records, home by home in minute order.
pub fn generate(config: &SynthConfig) -> Result<Vec<MeterRecord>> {
    config.validate()?;
    let homes: Vec<Vec<MeterRecord>> = (0..config.n_homes)
        .into_par_iter()
        .map(|h| generate_home(config, h))
        .collect::<Result<_>>()?;
    Ok(homes.into_iter().flatten().collect())
}

fn home_rng(config: &SynthConfig, home: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(home as u64 + 1);
    rng
}

/// Charging sessions for one home.
pub fn sessions_for_home(config: &SynthConfig, home: usize) -> Result<Vec<Session>> {
    config.validate()?;
    let mut rng = home_rng(config, home);
    // per-home draws first so the session stream is independent of them
    let _base_scale: f64 = rng.random_range(0.7..1.3);
    let _peak_shift: f64 = rng.random_range(-120.0..120.0);
    draw_sessions(config, &mut rng)
}

fn draw_sessions(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Session>> {
    let total = config.days * MINUTES_PER_DAY;
    let mut sessions: Vec<Session> = Vec::new();
    if config.sessions_per_day_rate == 0.0 {
        return Ok(sessions);
    }
    let arrivals = Poisson::new(config.sessions_per_day_rate)
        .map_err(|e| Error::Config(format!("sessions_per_day_rate: {e}")))?;
    let [d_lo, d_hi] = config.session_duration_range_min;
    let [p_lo, p_hi] = config.ev_power_range_kw;
    for day in 0..config.days {
        let count = arrivals.sample(rng) as usize;
        for _ in 0..count {
            let offset = if rng.random_bool(config.evening_bias) {
                rng.random_range(18 * 60..22 * 60)
            } else {
                rng.random_range(0..MINUTES_PER_DAY)
            };
            let start = day * MINUTES_PER_DAY + offset;
            let duration = rng.random_range(d_lo..=d_hi);
            let power_kw = rng.random_range(p_lo..=p_hi);
            let end = (start + duration).min(total);
            // sessions must be separated by at least one idle minute
            let clashes = sessions
                .iter()
                .any(|s| start <= s.end && s.start <= end);
            if !clashes {
                sessions.push(Session { start, end, power_kw });
            }
        }
    }
    sessions.sort_by_key(|s| s.start);
    Ok(sessions)
}

fn generate_home(config: &SynthConfig, home: usize) -> Result<Vec<MeterRecord>> {
    let mut rng = home_rng(config, home);
    let base_scale: f64 = rng.random_range(0.7..1.3);
    let peak_shift: f64 = rng.random_range(-120.0..120.0);
    let sessions = draw_sessions(config, &mut rng)?;

    let total = config.days * MINUTES_PER_DAY;
    let mut ev = vec![0.0; total];
    for s in &sessions {
        ev[s.start..s.end].fill(s.power_kw);
    }

    let noise = Normal::new(0.0, config.noise_std_kw)
        .map_err(|e| Error::Config(format!("noise_std_kw: {e}")))?;
    let base = config.base_mean_kw * base_scale;
    let peak = 19.0 * 60.0 + peak_shift;
    let id = home_id(home);
    let start = series_start();
    let records = ev
        .into_iter()
        .enumerate()
        .map(|(minute, ev_load_kw)| {
            let phase = 2.0 * std::f64::consts::PI * ((minute % MINUTES_PER_DAY) as f64 - peak)
                / MINUTES_PER_DAY as f64;
            let household =
                (base + config.base_daily_amplitude_kw * phase.cos() + noise.sample(&mut rng)).max(0.0);
            MeterRecord {
                home_id: id.clone(),
                timestamp: start + TimeDelta::minutes(minute as i64),
                grid_load_kw: household + ev_load_kw,
                ev_load_kw: Some(ev_load_kw),
            }
        })
        .collect();
    Ok(records)
}
