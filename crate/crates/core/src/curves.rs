//! Empirical verification metrics over cosine scores.
//!
//! FRR-type curves count scores `<= t`, FAR-type curves count scores `> t`.
//! Both are right-continuous step functions with levels `j / m`; no
//! interpolation is performed anywhere.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::dataset::{build_group_index, EmbeddingDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Genuine,
    Impostor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// `t -> #{s <= t} / m`
    Frr,
    /// `t -> #{s > t} / m`
    Far,
}

/// Which image pairs to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    /// Only pairs whose two identities both carry this attribute.
    Attribute(u32),
}

/// Sorted scores of one pair population.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    kind: PairKind,
    attribute: Option<u32>,
}

impl ScoreSet {
    pub fn new(mut scores: Vec<f64>, kind: PairKind) -> Result<Self> {
        if let Some(bad) = scores
            .iter()
            .find(|s| !s.is_finite() || !(-1.0..=1.0).contains(*s))
        {
            return Err(Error::invalid(format!("score {bad} outside [-1, 1]")));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self {
            scores,
            kind,
            attribute: None,
        })
    }

    pub fn with_attribute(mut self, a: u32) -> Self {
        self.attribute = Some(a);
        self
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn kind(&self) -> PairKind {
        self.kind
    }

    pub fn attribute(&self) -> Option<u32> {
        self.attribute
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Empirical FAR- or FRR-type step function over a nonempty sorted score set.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCurve {
    scores: Vec<f64>,
    orientation: Orientation,
}

impl StepCurve {
    pub fn new(set: ScoreSet, orientation: Orientation) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::invalid("cannot build a curve from an empty score set"));
        }
        Ok(Self {
            scores: set.scores,
            orientation,
        })
    }

    pub fn frr(set: ScoreSet) -> Result<Self> {
        Self::new(set, Orientation::Frr)
    }

    pub fn far(set: ScoreSet) -> Result<Self> {
        Self::new(set, Orientation::Far)
    }

    /// Curve over unsorted raw scores.
    pub fn from_scores(scores: Vec<f64>, orientation: Orientation) -> Result<Self> {
        let kind = match orientation {
            Orientation::Frr => PairKind::Genuine,
            Orientation::Far => PairKind::Impostor,
        };
        Self::new(ScoreSet::new(scores, kind)?, orientation)
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `#{s <= t}`
    pub fn count_le(&self, t: f64) -> usize {
        self.scores.partition_point(|&s| s <= t)
    }

    /// `#{s < t}`
    pub fn count_lt(&self, t: f64) -> usize {
        self.scores.partition_point(|&s| s < t)
    }

    /// Numerator of the curve level at `t`.
    pub fn level_count(&self, t: f64) -> usize {
        match self.orientation {
            Orientation::Frr => self.count_le(t),
            Orientation::Far => self.len() - self.count_le(t),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.level_count(t) as f64 / self.len() as f64
    }

    /// Distinct scores with the curve level just at each, for export.
    pub fn jumps(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for &s in &self.scores {
            if out.last().is_none_or(|&(t, _)| t != s) {
                out.push((s, self.eval(s)));
            }
        }
        out
    }

    /// Score at 1-based rank `j` of the sorted sample.
    fn ranked(&self, j: usize) -> f64 {
        self.scores[j - 1]
    }

    /// Smallest rank `j` in `[1, m]` with `j * den >= num * m`, i.e. the
    /// generalized inverse of the cdf `#{s <= t}/m` at the rational level
    /// `num / den`. Requires `0 < num <= den`.
    pub(crate) fn cdf_inverse_rank(&self, num: usize, den: usize) -> usize {
        debug_assert!(num > 0 && num <= den);
        let m = self.len() as u128;
        let j = (num as u128 * m).div_ceil(den as u128);
        j as usize
    }

    /// Score returned by the cdf generalized inverse at `num / den`.
    pub(crate) fn cdf_inverse(&self, num: usize, den: usize) -> f64 {
        self.ranked(self.cdf_inverse_rank(num, den))
    }
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_score(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::numerical("cosine of a zero vector is undefined"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// `x / |x|`. Pre-trained pseudo-scores and the Fairness Module both go
/// through this, so a zero-initialized module reproduces them bit for bit.
pub(crate) fn unit_vector(x: &[f64]) -> Vec<f64> {
    let n = norm(x);
    x.iter().map(|v| v / n).collect()
}

/// `inf { t : FRR(t) >= alpha }`, the `ceil(alpha * m)`-th smallest score.
pub fn frr_inverse(curve: &StepCurve, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("FRR level {alpha} outside (0, 1]")));
    }
    let m = curve.len();
    // Levels are compared as the same floats `eval` produces.
    let j = first_rank(m, |j| (j as f64 / m as f64) >= alpha);
    Ok(curve.ranked(j))
}

/// `TRR^{-1}(1 - alpha)` where `TRR = 1 - FAR` is the impostor cdf; this is
/// the smallest observed threshold with `FAR(t) <= alpha`.
pub fn far_inverse(curve: &StepCurve, alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("FAR level {alpha} outside [0, 1)")));
    }
    let m = curve.len();
    let j = first_rank(m, |j| ((m - j) as f64 / m as f64) <= alpha);
    Ok(curve.ranked(j))
}

/// Smallest `j` in `[1, m]` satisfying a monotone predicate (true at `m`).
fn first_rank(m: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (1usize, m);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// `ROC(alpha) = FRR(FAR^{-1}(alpha))`.
pub fn roc_point(genuine: &StepCurve, impostor: &StepCurve, alpha: f64) -> Result<f64> {
    let t = far_inverse(impostor, alpha)?;
    Ok(genuine.eval(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasMetrics {
    pub threshold: f64,
    pub bfar: f64,
    pub bfrr: f64,
    pub per_group: BTreeMap<u32, GroupRates>,
}

/// BFAR and BFRR: worst group rate over the geometric mean of group rates,
/// at the threshold where the global FAR is `alpha`.
pub fn bias_metrics(
    per_group_far: &BTreeMap<u32, StepCurve>,
    per_group_frr: &BTreeMap<u32, StepCurve>,
    global_impostor: &StepCurve,
    alpha: f64,
) -> Result<BiasMetrics> {
    if per_group_far.is_empty() || per_group_far.len() != per_group_frr.len() {
        return Err(Error::invalid(
            "bias metrics need the same nonempty set of groups for FAR and FRR",
        ));
    }
    let threshold = far_inverse(global_impostor, alpha)?;
    let mut per_group = BTreeMap::new();
    for (&a, far_curve) in per_group_far {
        let frr_curve = per_group_frr
            .get(&a)
            .ok_or_else(|| Error::invalid(format!("group {a} has a FAR curve but no FRR curve")))?;
        let rates = GroupRates {
            far: far_curve.eval(threshold),
            frr: frr_curve.eval(threshold),
        };
        if rates.far == 0.0 || rates.frr == 0.0 {
            return Err(Error::numerical(format!(
                "metric undefined at level {alpha} for group {a}: FAR_a = {}, FRR_a = {}",
                rates.far, rates.frr
            )));
        }
        per_group.insert(a, rates);
    }
    let bfar = max_over_geomean(per_group.values().map(|r| r.far));
    let bfrr = max_over_geomean(per_group.values().map(|r| r.frr));
    Ok(BiasMetrics {
        threshold,
        bfar,
        bfrr,
        per_group,
    })
}

fn max_over_geomean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let max = values.clone().fold(f64::MIN, f64::max);
    let geomean = (values.map(f64::ln).sum::<f64>() / n).exp();
    // max >= geomean mathematically; rounding in exp/ln must not break it.
    (max / geomean).max(1.0)
}

/// All `i < j` image-pair scores in `scope`, over arbitrary row vectors
/// (`rows` is `n * d`, row-major), split into genuine and impostor sets.
pub fn enumerate_pair_scores_with(
    rows: &[f64],
    d: usize,
    ds: &EmbeddingDataset,
    scope: Scope,
) -> Result<(ScoreSet, ScoreSet)> {
    let images: Vec<usize> = match scope {
        Scope::Global => (0..ds.n()).collect(),
        Scope::Attribute(a) => {
            if a as usize >= ds.num_attributes() {
                return Err(Error::invalid(format!("attribute {a} does not exist")));
            }
            build_group_index(ds)
                .images(a)
                .iter()
                .map(|&i| i as usize)
                .collect()
        }
    };
    if images.is_empty() {
        return Err(Error::invalid(format!("scope {scope:?} contains no images")));
    }
    let unit: Vec<Vec<f64>> = images
        .iter()
        .map(|&i| {
            let r = &rows[i * d..(i + 1) * d];
            let n = norm(r);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::numerical(format!("row {i} has norm {n}")));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect::<Result<_>>()?;
    let ids: Vec<u32> = images.iter().map(|&i| ds.identity_of()[i]).collect();

    let (mut genuine, mut impostor): (Vec<f64>, Vec<f64>) = (0..images.len())
        .into_par_iter()
        .map(|p| {
            let mut g = Vec::new();
            let mut im = Vec::new();
            for q in p + 1..images.len() {
                let s = dot(&unit[p], &unit[q]).clamp(-1.0, 1.0);
                if ids[p] == ids[q] {
                    g.push(s);
                } else {
                    im.push(s);
                }
            }
            (g, im)
        })
        .reduce(
            || (Vec::new(), Vec::new()),
            |mut acc, (g, im)| {
                acc.0.extend(g);
                acc.1.extend(im);
                acc
            },
        );
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let tag = |set: ScoreSet| match scope {
        Scope::Attribute(a) => set.with_attribute(a),
        Scope::Global => set,
    };
    Ok((
        tag(ScoreSet::new(genuine, PairKind::Genuine)?),
        tag(ScoreSet::new(impostor, PairKind::Impostor)?),
    ))
}

pub fn enumerate_pair_scores(ds: &EmbeddingDataset, scope: Scope) -> Result<(ScoreSet, ScoreSet)> {
    enumerate_pair_scores_with(&ds.rows_f64(), ds.d(), ds, scope)
}

/// Writes `(threshold, level)` rows, one per distinct score.
pub fn export_curve_csv(curve: &StepCurve, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "threshold,level").expect("write to Vec");
    for (t, level) in curve.jumps() {
        writeln!(buf, "{t},{level}").expect("write to Vec");
    }
    binio::write_atomic(path, &buf)
}

/// One entry of the fairness report, at one global FAR level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub alpha: f64,
    pub threshold: f64,
    pub per_group: BTreeMap<String, GroupRates>,
    /// `None` when some group has a zero rate at the threshold.
    pub bfar: Option<f64>,
    pub bfrr: Option<f64>,
    pub roc: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Global and per-group real-score curves of one embedding matrix.
#[derive(Debug, Clone)]
pub struct EvaluationCurves {
    pub global_genuine: StepCurve,
    pub global_impostor: StepCurve,
    pub group_frr: BTreeMap<u32, StepCurve>,
    pub group_far: BTreeMap<u32, StepCurve>,
}

impl EvaluationCurves {
    pub fn compute(rows: &[f64], d: usize, ds: &EmbeddingDataset) -> Result<Self> {
        let (g, im) = enumerate_pair_scores_with(rows, d, ds, Scope::Global)?;
        let global_genuine = StepCurve::frr(g)
            .map_err(|_| Error::invalid("dataset has no genuine pairs (every identity has one image)"))?;
        let global_impostor = StepCurve::far(im)
            .map_err(|_| Error::invalid("dataset has no impostor pairs (single identity)"))?;
        let mut group_frr = BTreeMap::new();
        let mut group_far = BTreeMap::new();
        for a in 0..ds.num_attributes() as u32 {
            let (g, im) = enumerate_pair_scores_with(rows, d, ds, Scope::Attribute(a))?;
            if !g.is_empty() {
                group_frr.insert(a, StepCurve::frr(g)?);
            }
            if !im.is_empty() {
                group_far.insert(a, StepCurve::far(im)?);
            }
        }
        Ok(Self {
            global_genuine,
            global_impostor,
            group_frr,
            group_far,
        })
    }

    pub fn report(&self, ds: &EmbeddingDataset, alpha: f64) -> Result<BiasReport> {
        let threshold = far_inverse(&self.global_impostor, alpha)?;
        let roc = self.global_genuine.eval(threshold);
        let mut warnings = Vec::new();
        let resolution = 1.0 / self.global_impostor.len() as f64;
        if alpha < resolution {
            warnings.push(format!(
                "alpha {alpha} is below the resolution 1/|I| = {resolution} of {} impostor pairs",
                self.global_impostor.len()
            ));
        }
        let mut per_group = BTreeMap::new();
        for a in 0..ds.num_attributes() as u32 {
            let name = ds.attribute_names()[a as usize].clone();
            match (self.group_far.get(&a), self.group_frr.get(&a)) {
                (Some(far), Some(frr)) => {
                    per_group.insert(
                        name,
                        GroupRates {
                            far: far.eval(threshold),
                            frr: frr.eval(threshold),
                        },
                    );
                }
                _ => warnings.push(format!("group {name} lacks genuine or impostor pairs")),
            }
        }
        let complete = self.group_far.len() == ds.num_attributes()
            && self.group_frr.len() == ds.num_attributes();
        let (bfar, bfrr) = if complete {
            match bias_metrics(&self.group_far, &self.group_frr, &self.global_impostor, alpha) {
                Ok(m) => (Some(m.bfar), Some(m.bfrr)),
                Err(e) => {
                    warnings.push(e.to_string());
                    (None, None)
                }
            }
        } else {
            (None, None)
        };
        Ok(BiasReport {
            alpha,
            threshold,
            per_group,
            bfar,
            bfrr,
            roc,
            warnings,
        })
    }
}
