//! Time-domain features of vibration snapshots and 7-bit input scaling.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::fxp::{quantize, FxpFormat, FxpValue};
use crate::network::MAX_INPUTS;

pub const CODE_MIN: i8 = -64;
pub const CODE_MAX: i8 = 63;
/// Real value of one input code step.
pub const CODE_SCALE: f64 = 64.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("window of {0} samples is too short (need at least 4)")]
    ShortWindow(usize),
    #[error("zero-variance window: {0} is undefined")]
    DegenerateWindow(Feature),
    #[error("channel {channel} not present (snapshot has {available})")]
    MissingChannel { channel: usize, available: usize },
    #[error("channels have unequal lengths")]
    RaggedSnapshot,
    #[error("scaler needs at least one training row")]
    EmptyTrainingSet,
    #[error("expected {expected} raw features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("feature selection is empty")]
    EmptySelection,
    #[error("feature CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("feature CSV: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    Rms,
    Kurtosis,
    PeakPeak,
    Crest,
    Skewness,
}

/// Feature order within a channel.
pub const DEFAULT_FEATURES: [Feature; 5] = [
    Feature::Rms,
    Feature::Kurtosis,
    Feature::PeakPeak,
    Feature::Crest,
    Feature::Skewness,
];

impl Feature {
    pub fn name(self) -> &'static str {
        match self {
            Feature::Rms => "rms",
            Feature::Kurtosis => "kurtosis",
            Feature::PeakPeak => "peak_peak",
            Feature::Crest => "crest",
            Feature::Skewness => "skewness",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rms" => Ok(Feature::Rms),
            "kurtosis" => Ok(Feature::Kurtosis),
            "peak_peak" | "peakpeak" | "p2p" => Ok(Feature::PeakPeak),
            "crest" => Ok(Feature::Crest),
            "skewness" | "skew" => Ok(Feature::Skewness),
            _ => Err(FeatureError::UnknownFeature(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSnapshot {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
    pub timestamp: String,
}

/// Ordered `(channel, feature)` pairs forming the network input, at most 16.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSelection {
    entries: Vec<(usize, Feature)>,
}

impl FeatureSelection {
    /// Entries in priority order; anything past 16 is dropped.
    pub fn new(mut entries: Vec<(usize, Feature)>) -> Result<Self, FeatureError> {
        if entries.is_empty() {
            return Err(FeatureError::EmptySelection);
        }
        if entries.len() > MAX_INPUTS {
            log::warn!(
                "feature selection truncated from {} to {MAX_INPUTS} entries",
                entries.len()
            );
            entries.truncate(MAX_INPUTS);
        }
        Ok(Self { entries })
    }

    /// Every feature of every channel, channel-major.
    pub fn per_channel(channels: usize, features: &[Feature]) -> Result<Self, FeatureError> {
        let entries = (0..channels)
            .flat_map(|c| features.iter().map(move |&f| (c, f)))
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(usize, Feature)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|(c, f)| format!("ch{c}_{f}"))
            .collect()
    }
}

struct Moments {
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
    mean_sq: f64,
    min: f64,
    max: f64,
    max_abs: f64,
}

fn moments(s: &[f64]) -> Moments {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4, mut sq) = (0.0, 0.0, 0.0, 0.0);
    let (mut min, mut max, mut max_abs) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &v in s {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
        sq += v * v;
        min = min.min(v);
        max = max.max(v);
        max_abs = max_abs.max(v.abs());
    }
    Moments {
        mean,
        m2: m2 / n,
        m3: m3 / n,
        m4: m4 / n,
        mean_sq: sq / n,
        min,
        max,
        max_abs,
    }
}

/// One feature of one channel. Moments use `1/N` normalization; kurtosis is
/// the raw (non-excess) ratio.
pub fn channel_feature(samples: &[f64], feature: Feature) -> Result<f64, FeatureError> {
    Ok(channel_features(samples, &[feature])?[0])
}

pub fn channel_features(samples: &[f64], features: &[Feature]) -> Result<Vec<f64>, FeatureError> {
    if samples.len() < 4 {
        return Err(FeatureError::ShortWindow(samples.len()));
    }
    let m = moments(samples);
    let _ = m.mean;
    features
        .iter()
        .map(|&f| {
            let rms = m.mean_sq.sqrt();
            match f {
                Feature::Rms => Ok(rms),
                Feature::PeakPeak => Ok(m.max - m.min),
                Feature::Crest if rms > 0.0 => Ok(m.max_abs / rms),
                Feature::Kurtosis if m.m2 > 0.0 => Ok(m.m4 / (m.m2 * m.m2)),
                Feature::Skewness if m.m2 > 0.0 => Ok(m.m3 / m.m2.powf(1.5)),
                _ => Err(FeatureError::DegenerateWindow(f)),
            }
        })
        .collect()
}

/// Raw (unscaled) feature vector of a snapshot.
pub fn extract(snapshot: &RawSnapshot, selection: &FeatureSelection) -> Result<Vec<f64>, FeatureError> {
    if let Some(first) = snapshot.channels.first() {
        if snapshot.channels.iter().any(|c| c.len() != first.len()) {
            return Err(FeatureError::RaggedSnapshot);
        }
    }
    let mut out = Vec::with_capacity(selection.len());
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; snapshot.channels.len()];
    for &(channel, feature) in selection.entries() {
        let samples = snapshot
            .channels
            .get(channel)
            .ok_or(FeatureError::MissingChannel {
                channel,
                available: snapshot.channels.len(),
            })?;
        let all = match &cache[channel] {
            Some(v) => v.clone(),
            None => {
                let v = all_features(samples)?;
                cache[channel] = Some(v.clone());
                v
            }
        };
        let idx = DEFAULT_FEATURES.iter().position(|f| *f == feature).unwrap_or(0);
        out.push(all[idx]);
    }
    Ok(out)
}

fn all_features(samples: &[f64]) -> Result<Vec<f64>, FeatureError> {
    channel_features(samples, &DEFAULT_FEATURES)
}

/// Network input: signed 7-bit codes, real value `code / 64`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureVector {
    codes: Vec<i8>,
    clamped: bool,
}

impl FeatureVector {
    pub fn from_codes(codes: Vec<i8>) -> Self {
        let clamped = false;
        let codes = codes.into_iter().map(|c| c.clamp(CODE_MIN, CODE_MAX)).collect();
        Self { codes, clamped }
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn clamped(&self) -> bool {
        self.clamped
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| f64::from(c) / CODE_SCALE).collect()
    }

    /// Exact on the 16- and 12-bit datapaths; rounded on the 8-bit one.
    pub fn to_fixed(&self, format: FxpFormat) -> Vec<FxpValue> {
        self.codes
            .iter()
            .map(|&c| quantize(f64::from(c) / CODE_SCALE, format).0)
            .collect()
    }
}

/// Per-feature min/max affine map onto `[-64, 63]`, fitted on the
/// healthy training window.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Scaler {
    pub fn from_bounds(min: Vec<f64>, max: Vec<f64>) -> Result<Self, FeatureError> {
        if min.len() != max.len() {
            return Err(FeatureError::DimensionMismatch {
                expected: min.len(),
                got: max.len(),
            });
        }
        Ok(Self { min, max })
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Indices of features whose training range is a single point.
    pub fn constant_features(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.min[i] == self.max[i]).collect()
    }

    pub fn apply(&self, raw: &[f64]) -> Result<FeatureVector, FeatureError> {
        if raw.len() != self.dim() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.dim(),
                got: raw.len(),
            });
        }
        let mut clamped = false;
        let span = f64::from(CODE_MAX) - f64::from(CODE_MIN);
        let codes = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let range = self.max[i] - self.min[i];
                if range == 0.0 {
                    return 0;
                }
                let code = (f64::from(CODE_MIN) + (v - self.min[i]) / range * span).round_ties_even();
                if code > f64::from(CODE_MAX) || code < f64::from(CODE_MIN) || code.is_nan() {
                    clamped = true;
                }
                if code.is_nan() {
                    0
                } else {
                    code.clamp(f64::from(CODE_MIN), f64::from(CODE_MAX)) as i8
                }
            })
            .collect();
        Ok(FeatureVector { codes, clamped })
    }
}

/// Fits the scaler on training rows. A feature that is constant over the
/// training window maps to code 0 and is reported with a warning.
pub fn fit_scaler(rows: &[Vec<f64>]) -> Result<Scaler, FeatureError> {
    let first = rows.first().ok_or(FeatureError::EmptyTrainingSet)?;
    let d = first.len();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for row in rows {
        if row.len() != d {
            return Err(FeatureError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        for (i, &v) in row.iter().enumerate() {
            min[i] = min[i].min(v);
            max[i] = max[i].max(v);
        }
    }
    let scaler = Scaler { min, max };
    for i in scaler.constant_features() {
        log::warn!("feature {i} is constant over the training window; it will map to 0");
    }
    Ok(scaler)
}

/// Writes raw feature rows, one per snapshot, with full round-trip precision.
pub fn write_feature_csv<W: Write>(
    out: W,
    names: &[String],
    rows: &[(String, Vec<f64>)],
) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (ts, row) in rows {
        let mut rec = vec![ts.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| FeatureError::Format(e.to_string()))?;
    Ok(())
}

/// Reads rows written by [`write_feature_csv`].
pub fn read_feature_csv<R: Read>(input: R) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>), FeatureError> {
    let mut r = csv::Reader::from_reader(input);
    let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let ts = rec.get(0).unwrap_or_default().to_string();
        let values = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| FeatureError::Format(format!("row {}: bad number {v:?}", line + 2)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != names.len() {
            return Err(FeatureError::Format(format!("row {}: wrong column count", line + 2)));
        }
        rows.push((ts, values));
    }
    Ok((names, rows))
}
