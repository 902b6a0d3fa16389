//! Early subsequences and the earliness measures E, DE and FE = (E, DE).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::features::MtsSample;

/// Slack applied when comparing row offsets against a duration budget, so
/// that offsets which went through nine-digit serialization still qualify.
///
/// Epoch timestamps carry their own rounding, a few ulps of the start time,
/// which is added on top (see [`duration_slack`]).
pub const DURATION_SLACK_SECS: f64 = 1e-9;

/// Tolerance used by duration prefixes of `sample`.
pub fn duration_slack(sample: &MtsSample) -> f64 {
    let magnitude = sample.timestamps.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    DURATION_SLACK_SECS + 4.0 * f64::EPSILON * magnitude
}

#[derive(Debug, Error, PartialEq)]
pub enum EarlinessError {
    #[error("prefix length must be at least 1")]
    ZeroLength,
    #[error("prefix duration must be finite and non-negative, got {0}")]
    BadDuration(f64),
    #[error("cannot aggregate an empty list of earliness reports")]
    Empty,
    #[error("cannot parse prefix `{0}` (expected packets:N or duration:T)")]
    Parse(String),
}

/// How an early subsequence is taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrefixSpec {
    /// The first `l` rows.
    ByCount(usize),
    /// All rows within `t` seconds of the first.
    ByDuration(f64),
}

impl PrefixSpec {
    pub fn by_count(l: usize) -> Result<Self, EarlinessError> {
        if l == 0 {
            return Err(EarlinessError::ZeroLength);
        }
        Ok(PrefixSpec::ByCount(l))
    }

    pub fn by_duration(t: f64) -> Result<Self, EarlinessError> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(EarlinessError::BadDuration(t));
        }
        Ok(PrefixSpec::ByDuration(t))
    }

    /// Numeric grid value: `l` or `t`.
    pub fn value(&self) -> f64 {
        match *self {
            PrefixSpec::ByCount(l) => l as f64,
            PrefixSpec::ByDuration(t) => t,
        }
    }

    /// Number of rows this spec selects from `sample`.
    pub fn rows_in(&self, sample: &MtsSample) -> usize {
        let n = sample.len();
        match *self {
            PrefixSpec::ByCount(l) => l.min(n),
            PrefixSpec::ByDuration(t) => {
                let limit = t + duration_slack(sample);
                let within = (0..n).take_while(|&i| sample.rel_ts(i) <= limit).count();
                within.max(1)
            }
        }
    }
}

impl fmt::Display for PrefixSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrefixSpec::ByCount(l) => write!(f, "packets:{l}"),
            PrefixSpec::ByDuration(t) => write!(f, "duration:{t}"),
        }
    }
}

impl FromStr for PrefixSpec {
    type Err = EarlinessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EarlinessError::Parse(s.to_string());
        let (mode, value) = s.split_once(':').ok_or_else(bad)?;
        match mode {
            "packets" => PrefixSpec::by_count(value.parse().map_err(|_| bad())?),
            "duration" => PrefixSpec::by_duration(value.parse().map_err(|_| bad())?),
            _ => Err(bad()),
        }
    }
}

/// Earliness of one early subsequence relative to its full series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlinessReport {
    /// `l_used / L`.
    pub e: f64,
    /// `Dur(ES) / Dur(MTS)`, 0 when the series spans no time.
    pub de: f64,
    pub l_used: usize,
    pub duration_used: f64,
    pub total_len: usize,
    pub total_duration: f64,
}

impl EarlinessReport {
    fn new(l_used: usize, sample: &MtsSample) -> Self {
        let total_len = sample.len();
        let total_duration = sample.duration();
        let duration_used = sample.rel_ts(l_used - 1);
        let de = if total_duration > 0.0 {
            duration_used / total_duration
        } else {
            0.0
        };
        EarlinessReport {
            e: l_used as f64 / total_len as f64,
            de,
            l_used,
            duration_used,
            total_len,
            total_duration,
        }
    }

    /// Flow earliness, the pair (E, DE).
    pub fn fe(&self) -> (f64, f64) {
        (self.e, self.de)
    }
}

/// Takes the early subsequence of `sample` described by `spec`.
///
/// Panics if `sample` is empty.
pub fn take_prefix(sample: &MtsSample, spec: PrefixSpec) -> (MtsSample, EarlinessReport) {
    take_prefix_capped(sample, spec, usize::MAX)
}

/// Like [`take_prefix`], but never keeps more than `cap` rows.
pub fn take_prefix_capped(
    sample: &MtsSample,
    spec: PrefixSpec,
    cap: usize,
) -> (MtsSample, EarlinessReport) {
    assert!(
        !sample.is_empty(),
        "cannot take a prefix of an empty sample"
    );
    let n = spec.rows_in(sample).min(cap.max(1));
    (sample.truncated(n), EarlinessReport::new(n, sample))
}

/// Mean E and mean DE over `reports`.
pub fn aggregate_earliness(reports: &[EarlinessReport]) -> Result<(f64, f64), EarlinessError> {
    if reports.is_empty() {
        return Err(EarlinessError::Empty);
    }
    let n = reports.len() as f64;
    let e = reports.iter().map(|r| r.e).sum::<f64>() / n;
    let de = reports.iter().map(|r| r.de).sum::<f64>() / n;
    Ok((e, de))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(timestamps: Vec<f64>) -> MtsSample {
        let n = timestamps.len();
        MtsSample::new("s", 1, (0..n).map(|i| i as f64).collect(), timestamps, "x")
    }

    #[test]
    fn count_prefix_earliness() {
        let s = series((0..500).map(|i| i as f64).collect());
        let (p, r) = take_prefix(&s, PrefixSpec::ByCount(10));
        assert_eq!(p.len(), 10);
        assert_eq!(r.e, 0.02);
    }

    #[test]
    fn count_prefix_clamps() {
        let s = series(vec![0.0, 1.0, 2.0]);
        let (p, r) = take_prefix(&s, PrefixSpec::ByCount(7));
        assert_eq!(p, s);
        assert_eq!(r.e, 1.0);
        assert_eq!(r.de, 1.0);
    }

    #[test]
    fn duration_prefix_keeps_first_row() {
        let s = series(vec![10.0, 10.5, 11.0]);
        let (p, r) = take_prefix(&s, PrefixSpec::ByDuration(0.0));
        assert_eq!(p.len(), 1);
        assert_eq!(r.de, 0.0);
        let (p, r) = take_prefix(&s, PrefixSpec::ByDuration(0.5));
        assert_eq!(p.len(), 2);
        assert_eq!(r.de, 0.5);
    }

    #[test]
    fn zero_duration_series_has_zero_de() {
        let s = series(vec![3.0]);
        let (_, r) = take_prefix(&s, PrefixSpec::ByCount(1));
        assert_eq!(r.fe(), (1.0, 0.0));
    }

    #[test]
    fn aggregation() {
        let r = |e, de| EarlinessReport {
            e,
            de,
            l_used: 1,
            duration_used: 0.0,
            total_len: 1,
            total_duration: 0.0,
        };
        assert_eq!(aggregate_earliness(&[r(0.5, 0.25)]).unwrap(), (0.5, 0.25));
        assert_eq!(
            aggregate_earliness(&[r(0.0, 1.0), r(1.0, 0.0)]).unwrap(),
            (0.5, 0.5)
        );
        assert_eq!(aggregate_earliness(&[]), Err(EarlinessError::Empty));
    }

    #[test]
    fn spec_parsing_and_validation() {
        assert_eq!(
            "packets:16".parse::<PrefixSpec>().unwrap(),
            PrefixSpec::ByCount(16)
        );
        assert_eq!(
            "duration:0.5".parse::<PrefixSpec>().unwrap(),
            PrefixSpec::ByDuration(0.5)
        );
        assert!("packets:0".parse::<PrefixSpec>().is_err());
        assert!("duration:-1".parse::<PrefixSpec>().is_err());
        assert!("bytes:3".parse::<PrefixSpec>().is_err());
    }

    #[test]
    fn cap_limits_duration_prefix() {
        let s = series((0..50).map(|i| i as f64 * 0.01).collect());
        let (p, r) = take_prefix_capped(&s, PrefixSpec::ByDuration(10.0), 8);
        assert_eq!(p.len(), 8);
        assert_eq!(r.l_used, 8);
    }
}
