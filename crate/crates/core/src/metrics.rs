//! Detection scores, equal error rate and embedding export.
//!
//! Scores are spoof posteriors: higher means more spoof-like, and a trial is
//! declared spoof when `score >= t`. At threshold `t`
//!
//! * FAR(t): fraction of bonafide trials with `score >= t` (falsely flagged),
//! * FRR(t): fraction of spoof trials with `score < t` (missed).
//!
//! FAR is non-increasing and FRR non-decreasing in `t`. The EER is read off
//! the first operating point where FAR − FRR stops being positive, linearly
//! interpolated from the previous point.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::Backbone;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::manifest::{Dataset, Label};
use crate::parallel::try_map_range;
use crate::pipeline::FeaturePipeline;

pub const SCORE_HEADER: &str = "# score=p(spoof)";

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at `-inf`, every distinct score, and `+inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

fn split(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::InvalidArgument(format!("score of `{}` is not finite", r.utt_id)));
        }
        match r.label {
            Label::Bonafide => bona.push(r.score),
            Label::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::InvalidArgument(
            "EER needs at least one bonafide and one spoof score".into(),
        ));
    }
    Ok((bona, spoof))
}

impl DetCurve {
    pub fn from_scores(bonafide: &[f64], spoof: &[f64]) -> Self {
        let mut b = bonafide.to_vec();
        let mut s = spoof.to_vec();
        b.sort_by(f64::total_cmp);
        s.sort_by(f64::total_cmp);
        let mut thresholds: Vec<f64> = b.iter().chain(&s).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        let (nb, ns) = (b.len() as f64, s.len() as f64);
        let mut points = vec![DetPoint {
            threshold: f64::NEG_INFINITY,
            far: 1.0,
            frr: 0.0,
        }];
        for t in thresholds {
            let bona_below = b.partition_point(|v| *v < t);
            let spoof_below = s.partition_point(|v| *v < t);
            points.push(DetPoint {
                threshold: t,
                far: (b.len() - bona_below) as f64 / nb,
                frr: spoof_below as f64 / ns,
            });
        }
        points.push(DetPoint {
            threshold: f64::INFINITY,
            far: 0.0,
            frr: 1.0,
        });
        DetCurve { points }
    }

    pub fn from_records(records: &[ScoreRecord]) -> Result<Self> {
        let (b, s) = split(records)?;
        Ok(Self::from_scores(&b, &s))
    }

    pub fn eer(&self) -> f64 {
        interpolate_eer(self.points.iter().map(|p| (p.far, p.frr)))
    }
}

/// EER from a sequence of `(far, frr)` points ordered by rising threshold.
fn interpolate_eer(points: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut prev: Option<(f64, f64)> = None;
    for (far, frr) in points {
        let d = far - frr;
        if d <= 0.0 {
            return match prev {
                Some((pfar, pfrr)) if d < 0.0 => {
                    let pd = pfar - pfrr;
                    let lambda = pd / (pd - d);
                    pfar + lambda * (far - pfar)
                }
                _ => far,
            };
        }
        prev = Some((far, frr));
    }
    unreachable!("FAR - FRR reaches -1 at +inf")
}

pub fn compute_eer(records: &[ScoreRecord]) -> Result<f64> {
    Ok(DetCurve::from_records(records)?.eer())
}

pub fn eer_from_scores(bonafide: &[f64], spoof: &[f64]) -> Result<f64> {
    if bonafide.is_empty() || spoof.is_empty() {
        return Err(Error::InvalidArgument(
            "EER needs at least one bonafide and one spoof score".into(),
        ));
    }
    if bonafide.iter().chain(spoof).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    Ok(DetCurve::from_scores(bonafide, spoof).eer())
}

pub fn format_scores(records: &[ScoreRecord]) -> String {
    let mut out = format!("{SCORE_HEADER}\n");
    for r in records {
        writeln!(out, "{}\t{}\t{}", r.utt_id, r.score, r.label).expect("string write");
    }
    out
}

pub fn write_scores(records: &[ScoreRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, format_scores(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_scores(text: &str, source: &Path) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [id, score, label] = cols[..] else {
            return Err(err(format!("expected 3 tab-separated columns, found {}", cols.len())));
        };
        let score: f64 = score.parse().map_err(|e| err(format!("bad score `{score}`: {e}")))?;
        out.push(ScoreRecord {
            utt_id: id.to_string(),
            score,
            label: label.parse().map_err(err)?,
        });
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

/// Pre-projection self-attention representations of every entry, computed
/// from un-augmented features.
pub fn representations(
    bb: &Backbone,
    store: &ParamStore<f32>,
    data: &Dataset,
    features: &FeaturePipeline,
) -> Result<Vec<Vec<f32>>> {
    try_map_range(data.len(), |i| bb.represent(store, &features.plain(&data.waves[i])?))
}

/// CSV with a header and one row `utt_id,label,v0,…` per utterance.
pub fn format_embeddings(data: &Dataset, reps: &[Vec<f32>]) -> String {
    let dim = reps.first().map_or(0, Vec::len);
    let mut out = String::from("utt_id,label");
    for j in 0..dim {
        write!(out, ",e{j}").expect("string write");
    }
    out.push('\n');
    for (e, r) in data.entries.iter().zip(reps) {
        write!(out, "{},{}", e.utt_id, e.label).expect("string write");
        for v in r {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn export_embeddings(
    bb: &Backbone,
    store: &ParamStore<f32>,
    data: &Dataset,
    features: &FeaturePipeline,
    path: &Path,
) -> Result<()> {
    let reps = representations(bb, store, data, features)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, format_embeddings(data, &reps)).map_err(|e| Error::io(path, e))
}

/// Mean cosine similarity over same-class pairs and over cross-class pairs.
pub fn class_cosine_means(reps: &[Vec<f32>], labels: &[Label]) -> (f64, f64) {
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    let norms: Vec<f64> = reps.iter().map(|r| norm(r)).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..reps.len() {
        for j in i + 1..reps.len() {
            let dot: f64 = reps[i].iter().zip(&reps[j]).map(|(a, b)| *a as f64 * *b as f64).sum();
            let c = dot / (norms[i] * norms[j]);
            if labels[i] == labels[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}
