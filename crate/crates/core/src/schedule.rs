//! Variance schedules over 1-indexed diffusion timesteps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset used by the squared-cosine construction.
pub const COSINE_OFFSET: f64 = 0.008;
/// Floor applied to the cumulative product by the truncated kinds.
pub const ALPHA_BAR_MIN: f64 = 1e-4;
const COSINE_BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Square,
    Linear,
    Cosine,
    TCosine,
    TLinear,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Square,
        ScheduleKind::Linear,
        ScheduleKind::Cosine,
        ScheduleKind::TCosine,
        ScheduleKind::TLinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Square => "square",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::TCosine => "t_cosine",
            ScheduleKind::TLinear => "t_linear",
        }
    }

    pub fn is_truncated(self) -> bool {
        matches!(self, ScheduleKind::TCosine | ScheduleKind::TLinear)
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::BadSchedule(format!("unknown schedule kind {s:?}")))
    }
}

/// Per-timestep `beta`, `alpha = 1 - beta` and cumulative `alpha_bar`.
///
/// Arrays are stored 0-based; timestep `t` lives at index `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

fn from_alpha_bar(kind: ScheduleKind, alpha_bar: &[f64], max_beta: f64) -> Schedule {
    let mut beta = Vec::with_capacity(alpha_bar.len());
    let mut prev = 1.0;
    for &ab in alpha_bar {
        beta.push((1.0 - ab / prev).clamp(f64::MIN_POSITIVE, max_beta));
        prev = ab;
    }
    from_beta(kind, beta)
}

fn from_beta(kind: ScheduleKind, beta: Vec<f64>) -> Schedule {
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Schedule {
        kind,
        beta,
        alpha,
        alpha_bar,
    }
}

fn interpolated_betas(steps: usize, beta_min: f64, beta_max: f64, power: i32) -> Vec<f64> {
    if steps == 1 {
        return vec![beta_min];
    }
    (0..steps)
        .map(|i| {
            if i == steps - 1 {
                return beta_max;
            }
            let frac = i as f64 / (steps - 1) as f64;
            beta_min + frac.powi(power) * (beta_max - beta_min)
        })
        .collect()
}

fn cosine_alpha_bar(steps: usize) -> Vec<f64> {
    let f = |t: f64| {
        let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
            * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    (1..=steps).map(|t| f(t as f64) / f0).collect()
}

/// Replaces the tail of a schedule whose cumulative product falls below
/// the floor. Betas past the crossing are recomputed so that the product
/// decays geometrically from the floor instead of collapsing.
fn truncate(kind: ScheduleKind, base: Schedule) -> Schedule {
    let ab: Vec<f64> = base
        .alpha_bar
        .iter()
        .map(|&a| a.max(ALPHA_BAR_MIN))
        .collect();
    // Keep the floored product strictly decreasing: every step past the
    // crossing multiplies by (1 - tiny) so the floor is approached from
    // above within rounding distance.
    let mut out = Vec::with_capacity(ab.len());
    let mut prev = 1.0f64;
    for (i, &a) in ab.iter().enumerate() {
        let v = if a < prev {
            a
        } else {
            prev * (1.0 - 1e-12 / (i as f64 + 1.0))
        };
        out.push(v);
        prev = v;
    }
    from_alpha_bar(kind, &out, COSINE_BETA_MAX)
}

pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<Schedule> {
    if steps < 1 {
        return Err(Error::BadSchedule("T must be >= 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::BadSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
        )));
    }
    let sched = match kind {
        ScheduleKind::Linear => from_beta(kind, interpolated_betas(steps, beta_min, beta_max, 1)),
        ScheduleKind::Square => from_beta(kind, interpolated_betas(steps, beta_min, beta_max, 2)),
        ScheduleKind::Cosine => from_alpha_bar(kind, &cosine_alpha_bar(steps), COSINE_BETA_MAX),
        ScheduleKind::TLinear => truncate(
            kind,
            from_beta(kind, interpolated_betas(steps, beta_min, beta_max, 1)),
        ),
        ScheduleKind::TCosine => truncate(
            kind,
            from_alpha_bar(kind, &cosine_alpha_bar(steps), COSINE_BETA_MAX),
        ),
    };
    Ok(sched)
}

impl Schedule {
    /// Builds a schedule directly from betas; used for custom experiments.
    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b >= 0.0 && *b < 1.0)) {
            return Err(Error::BadSchedule("betas must lie in [0, 1)".into()));
        }
        Ok(from_beta(kind, beta))
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::BadTimestep {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t - 1])
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// Like [`Schedule::alpha_bar_at`] but also accepts `t = 0`, which maps
    /// to the clean-data value 1.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar_at(t)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for i in 0..self.steps() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i + 1,
                sig9(self.beta[i]),
                sig9(self.alpha[i]),
                sig9(self.alpha_bar[i])
            ));
        }
        out
    }
}

pub fn dump_schedule(sched: &Schedule) -> String {
    sched.to_csv()
}

/// Formats with 9 significant digits, trimming trailing zeros.
fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let s = format!("{:.8e}", v);
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, v);
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{exp}")
    }
}

/// Parses the CSV produced by [`dump_schedule`] back into
/// `(beta, alpha, alpha_bar)` columns.
pub fn parse_schedule_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut lines = text.lines();
    if lines.next() != Some("t,beta,alpha,alpha_bar") {
        return Err(Error::Malformed("missing schedule CSV header".into()));
    }
    let (mut b, mut a, mut ab) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Malformed(format!("row {}: bad number {s:?}", i + 1)))
        };
        if cols.len() != 4 || cols[0] != (i + 1).to_string() {
            return Err(Error::Malformed(format!("row {}: bad layout", i + 1)));
        }
        b.push(parse(cols[1])?);
        a.push(parse(cols[2])?);
        ab.push(parse(cols[3])?);
    }
    Ok((b, a, ab))
}
