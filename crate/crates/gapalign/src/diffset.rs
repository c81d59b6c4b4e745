//! Difference-set extraction: pick the projected corpus points that are
//! underrepresented in the SFT distribution, either because their SFT
//! density falls below a threshold or because their corpus/SFT density
//! ratio exceeds one.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus_io::{write_records, TextRecord};
use crate::density::{
    default_bandwidth, kde_batch, kde_self_excluded_with, BatchMode, KdeParams, Point2,
    SelfExcludedDivisor,
};
use crate::error::{Error, Result};
use crate::projection::ProjectedPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Select when the (optionally max-normalized) SFT density is below tau.
    Threshold,
    /// Select when the self-excluded corpus density over the SFT density
    /// exceeds tau.
    Ratio,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffsetConfig {
    pub criterion: Criterion,
    pub tau: f64,
    #[serde(default = "default_true")]
    pub normalize_threshold_densities: bool,
    /// None means Scott's-rule bandwidth over the union of both point sets.
    #[serde(default)]
    pub kde: Option<KdeParams>,
    #[serde(default)]
    pub self_excluded_divisor: SelfExcludedDivisor,
}

fn default_true() -> bool {
    true
}

impl DiffsetConfig {
    pub fn threshold(tau: f64) -> Self {
        DiffsetConfig {
            criterion: Criterion::Threshold,
            tau,
            normalize_threshold_densities: true,
            kde: None,
            self_excluded_divisor: SelfExcludedDivisor::default(),
        }
    }

    pub fn ratio(tau: f64) -> Self {
        DiffsetConfig {
            criterion: Criterion::Ratio,
            ..DiffsetConfig::threshold(tau)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.criterion == Criterion::Threshold
            && self.normalize_threshold_densities
            && self.tau > 1.0
        {
            return Err(Error::Config(
                "normalized threshold criterion needs tau in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Per-point outcome of the difference-set decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffVerdict {
    pub id: String,
    pub f_sft: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_pre: Option<f32>,
    #[serde(with = "inf_f32")]
    pub score: f32,
    pub selected: bool,
}

/// Serializes +/-infinity as the strings "inf"/"-inf" (JSON has no
/// infinity literal).
mod inf_f32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f32, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f32(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f32, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f32),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f32::INFINITY),
            Raw::Str(s) if s == "-inf" => Ok(f32::NEG_INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad score: {s}"))),
        }
    }
}

fn as_points(points: &[ProjectedPoint]) -> Vec<Point2> {
    points.iter().map(|p| [p.x as f64, p.y as f64]).collect()
}

fn resolve_params(
    cfg: &DiffsetConfig,
    pre: &[Point2],
    sft: &[Point2],
) -> Result<KdeParams> {
    match cfg.kde {
        Some(p) => {
            p.validate()?;
            Ok(p)
        }
        None => {
            let union: Vec<Point2> = pre.iter().chain(sft).copied().collect();
            default_bandwidth(&union)
        }
    }
}

/// Density-threshold criterion: evaluate each corpus point's density in
/// the SFT distribution and select those below tau. With normalization
/// on, densities are divided by the maximum density over the corpus
/// points so tau is scale-free.
pub fn diff_by_threshold(
    pre: &[ProjectedPoint],
    sft: &[ProjectedPoint],
    cfg: &DiffsetConfig,
) -> Result<Vec<DiffVerdict>> {
    cfg.validate()?;
    if cfg.criterion != Criterion::Threshold {
        return Err(Error::Config("diff_by_threshold called with ratio criterion".into()));
    }
    if pre.is_empty() {
        return Err(Error::Precondition("empty corpus point set".into()));
    }
    if sft.is_empty() {
        return Err(Error::Precondition("reference distribution empty".into()));
    }
    let pre_pts = as_points(pre);
    let sft_pts = as_points(sft);
    let params = resolve_params(cfg, &pre_pts, &sft_pts)?;
    let densities = kde_batch(&pre_pts, &sft_pts, &params, BatchMode::Exact)?;
    let max = densities.iter().copied().fold(0.0f64, f64::max);
    Ok(pre
        .iter()
        .zip(&densities)
        .map(|(p, &f_sft)| {
            let score = if cfg.normalize_threshold_densities {
                if max > 0.0 {
                    f_sft / max
                } else {
                    0.0
                }
            } else {
                f_sft
            };
            DiffVerdict {
                id: p.id.clone(),
                f_sft: f_sft as f32,
                f_pre: None,
                score: score as f32,
                selected: score < cfg.tau,
            }
        })
        .collect())
}

/// Density-ratio criterion: self-excluded corpus density over SFT
/// density, selected when the ratio exceeds tau. A zero SFT density maps
/// to an infinite ratio: a corpus point with no SFT support is the
/// strongest possible gap signal.
pub fn diff_by_ratio(
    pre: &[ProjectedPoint],
    sft: &[ProjectedPoint],
    cfg: &DiffsetConfig,
) -> Result<Vec<DiffVerdict>> {
    cfg.validate()?;
    if cfg.criterion != Criterion::Ratio {
        return Err(Error::Config("diff_by_ratio called with threshold criterion".into()));
    }
    if pre.len() < 2 {
        return Err(Error::Precondition(
            "ratio criterion needs >= 2 corpus points".into(),
        ));
    }
    if sft.is_empty() {
        return Err(Error::Precondition("reference distribution empty".into()));
    }
    let pre_pts = as_points(pre);
    let sft_pts = as_points(sft);
    let params = resolve_params(cfg, &pre_pts, &sft_pts)?;
    let f_sft = kde_batch(&pre_pts, &sft_pts, &params, BatchMode::Exact)?;
    let mut out = Vec::with_capacity(pre.len());
    for (i, p) in pre.iter().enumerate() {
        let f_pre = kde_self_excluded_with(i, &pre_pts, &params, cfg.self_excluded_divisor)?;
        let score = if f_sft[i] == 0.0 {
            f64::INFINITY
        } else {
            f_pre / f_sft[i]
        };
        out.push(DiffVerdict {
            id: p.id.clone(),
            f_sft: f_sft[i] as f32,
            f_pre: Some(f_pre as f32),
            score: score as f32,
            selected: score > cfg.tau,
        });
    }
    Ok(out)
}

pub fn run_diffset(
    pre: &[ProjectedPoint],
    sft: &[ProjectedPoint],
    cfg: &DiffsetConfig,
) -> Result<Vec<DiffVerdict>> {
    match cfg.criterion {
        Criterion::Threshold => diff_by_threshold(pre, sft, cfg),
        Criterion::Ratio => diff_by_ratio(pre, sft, cfg),
    }
}

/// Resolve selected verdicts back to their corpus records, preserving
/// corpus order, and write the full verdict report as JSONL next to it.
pub fn materialize_diffset(
    verdicts: &[DiffVerdict],
    corpus: &[TextRecord],
    report_path: Option<&Path>,
) -> Result<Vec<TextRecord>> {
    let corpus_ids: std::collections::HashSet<&str> =
        corpus.iter().map(|r| r.id.as_str()).collect();
    for v in verdicts {
        if !corpus_ids.contains(v.id.as_str()) {
            return Err(Error::InvalidRecord(format!(
                "verdict id {} not found in corpus (pipeline wiring bug)",
                v.id
            )));
        }
    }
    if let Some(path) = report_path {
        write_records(verdicts, path)?;
    }
    let selected: HashMap<&str, bool> =
        verdicts.iter().map(|v| (v.id.as_str(), v.selected)).collect();
    Ok(corpus
        .iter()
        .filter(|r| selected.get(r.id.as_str()).copied().unwrap_or(false))
        .cloned()
        .collect())
}
