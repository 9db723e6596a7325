//! Quantile-matching transforms of pre-trained pseudo-scores onto a reference
//! group, the regression targets built from them, and the alignment check.
//!
//! Both transforms are compositions `inverse_r ∘ level_a` on step curves. The
//! levels are rationals `j / m_a`, so the inverse is taken with exact integer
//! arithmetic rather than through floating-point levels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::centroids::{CentroidSet, PseudoPairScores};
use crate::curves::{Orientation, PairKind, StepCurve};
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};

pub const TARGETS_BIN: &str = "targets.bin";
pub const TARGETS_JSON: &str = "targets.json";
const RECORD_BYTES: usize = 4 + 4 + 1 + 8 + 8 + 8;

fn expect_orientation(curve: &StepCurve, want: Orientation, what: &str) -> Result<()> {
    if curve.orientation() != want {
        return Err(Error::invalid(format!("{what} must be a {want:?}-type curve")));
    }
    Ok(())
}

/// Rank numerator `#{s' <= s}` of an observed score, shared by both sides:
/// the FRR level and the impostor cdf `TRR = 1 - FAR` use the same count.
fn observed_count(s: f64, curve_a: &StepCurve) -> Result<usize> {
    let j = curve_a.count_le(s);
    if j == 0 {
        return Err(Error::invalid(format!(
            "score {s} lies below every score of the source group; the transform is only defined on observed scores"
        )));
    }
    Ok(j)
}

/// `T^FRR(s) = FRR_r^{-1}(FRR_a(s))`.
pub fn t_frr(s: f64, curve_a: &StepCurve, curve_r: &StepCurve) -> Result<f64> {
    expect_orientation(curve_a, Orientation::Frr, "source curve")?;
    expect_orientation(curve_r, Orientation::Frr, "reference curve")?;
    let j = observed_count(s, curve_a)?;
    Ok(curve_r.cdf_inverse(j, curve_a.len()))
}

/// `T^FAR(s) = FAR_r^{-1}(FAR_a(s))` with `FAR^{-1}(α) = TRR^{-1}(1 - α)`,
/// which reduces to `TRR_r^{-1}(TRR_a(s))`.
pub fn t_far(s: f64, curve_a: &StepCurve, curve_r: &StepCurve) -> Result<f64> {
    expect_orientation(curve_a, Orientation::Far, "source curve")?;
    expect_orientation(curve_r, Orientation::Far, "reference curve")?;
    let j = observed_count(s, curve_a)?;
    Ok(curve_r.cdf_inverse(j, curve_a.len()))
}

/// One regression target for a same-attribute pseudo-pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetEntry {
    pub image: u32,
    pub identity: u32,
    pub kind: PairKind,
    pub source: f64,
    pub target: f64,
    /// Pre-trained level fed to the reference inverse: `FRR_a(s)` for
    /// genuine pairs, `FAR_a(s)` for impostor pairs.
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPairCounts {
    pub genuine: usize,
    pub impostor: usize,
}

/// Fixed regression targets for every same-attribute pseudo-pair, ordered
/// by `(image, identity)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    reference: u32,
    attribute_names: Vec<String>,
    entries: Vec<TargetEntry>,
    offsets: Vec<usize>,
    counts: Vec<GroupPairCounts>,
}

impl TargetTable {
    pub fn reference(&self) -> u32 {
        self.reference
    }

    pub fn reference_name(&self) -> &str {
        &self.attribute_names[self.reference as usize]
    }

    pub fn entries(&self) -> &[TargetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_images(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Index range of image `i`'s entries.
    pub fn range_of_image(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn entries_of_image(&self, i: usize) -> &[TargetEntry] {
        &self.entries[self.range_of_image(i)]
    }

    pub fn group_counts(&self) -> &[GroupPairCounts] {
        &self.counts
    }

    /// Checks that this table was built for `ds`.
    pub fn check_matches(&self, ds: &EmbeddingDataset) -> Result<()> {
        if self.num_images() != ds.n() || self.attribute_names != ds.attribute_names() {
            return Err(Error::invalid(format!(
                "target table ({} images, attributes {:?}) does not match dataset ({} images, attributes {:?})",
                self.num_images(),
                self.attribute_names,
                ds.n(),
                ds.attribute_names()
            )));
        }
        for (i, &y) in ds.identity_of().iter().enumerate() {
            for e in self.entries_of_image(i) {
                let genuine = e.identity == y;
                if genuine != (e.kind == PairKind::Genuine) {
                    return Err(Error::invalid(format!(
                        "target entry ({}, {}) has kind {:?} but image identity is {y}",
                        e.image, e.identity, e.kind
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Resolves a reference attribute name, listing known names on failure.
pub fn resolve_reference(ds: &EmbeddingDataset, name: &str) -> Result<u32> {
    ds.attribute_id(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown reference attribute {name:?}; known attributes: {}",
            ds.attribute_names().join(", ")
        ))
    })
}

pub fn build_target_table(ds: &EmbeddingDataset, cs: &CentroidSet, r: u32) -> Result<TargetTable> {
    let pairs = PseudoPairScores::compute(ds, cs)?;
    target_table_from_pairs(ds, &pairs, r)
}

pub fn target_table_from_pairs(ds: &EmbeddingDataset, pairs: &PseudoPairScores, r: u32) -> Result<TargetTable> {
    if r as usize >= ds.num_attributes() {
        return Err(Error::invalid(format!("reference attribute {r} does not exist")));
    }
    for curves in &pairs.curves {
        curves.far()?;
    }
    let reference = &pairs.curves[r as usize];
    let entries = pairs
        .pairs
        .iter()
        .map(|p| {
            let group = &pairs.curves[ds.attribute_of_image(p.image as usize) as usize];
            let (target, level) = match p.kind {
                PairKind::Genuine => (
                    t_frr(p.score, &group.frr, &reference.frr)?,
                    group.frr.eval(p.score),
                ),
                PairKind::Impostor => {
                    let far_a = group.far()?;
                    (t_far(p.score, far_a, reference.far()?)?, far_a.eval(p.score))
                }
            };
            Ok(TargetEntry {
                image: p.image,
                identity: p.identity,
                kind: p.kind,
                source: p.score,
                target,
                level,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let counts = pairs
        .curves
        .iter()
        .map(|c| GroupPairCounts {
            genuine: c.frr.len(),
            impostor: c.far().map_or(0, StepCurve::len),
        })
        .collect();
    Ok(TargetTable {
        reference: r,
        attribute_names: ds.attribute_names().to_vec(),
        entries,
        offsets: pairs.offsets.clone(),
        counts,
    })
}

/// Exact sup-norm gap `numerator / denominator` between two step curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentGap {
    pub numerator: u128,
    pub denominator: u128,
    /// Sample count of the transformed group.
    pub source_len: usize,
    /// Largest number of equal pre-transform scores in the group.
    pub source_ties: usize,
}

impl AlignmentGap {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// `source_ties / m_a`. With distinct scores this is the guaranteed
    /// `1 / m_a`; a block of `t` equal scores maps to a single target, so
    /// the transformed curve skips `t - 1` levels there and the guarantee
    /// widens to `t / m_a`.
    pub fn bound(&self) -> f64 {
        self.source_ties as f64 / self.source_len as f64
    }

    /// Exact check of `gap <= source_ties / m_a`.
    pub fn within_bound(&self) -> bool {
        self.numerator * self.source_len as u128 <= self.source_ties as u128 * self.denominator
    }

    pub fn with_source_ties(mut self, ties: usize) -> Self {
        self.source_ties = ties.max(1);
        self
    }
}

/// Sup over all thresholds of `|curve_{a->r}(t) - curve_r(t)|`, where the
/// first curve is rebuilt from `transformed` with the orientation of
/// `curve_r`. Both curves are right-continuous steps that agree below every
/// jump, so the sup is attained at one of the jump points. The returned bound
/// assumes distinct source scores; see [`AlignmentGap::with_source_ties`].
pub fn check_alignment(transformed: &[f64], curve_r: &StepCurve) -> Result<AlignmentGap> {
    let curve_a = StepCurve::from_scores(transformed.to_vec(), curve_r.orientation())?;
    let (ma, mr) = (curve_a.len() as u128, curve_r.len() as u128);
    let mut jumps: Vec<f64> = curve_a
        .scores()
        .iter()
        .chain(curve_r.scores())
        .copied()
        .collect();
    jumps.sort_by(f64::total_cmp);
    jumps.dedup();
    let numerator = jumps
        .iter()
        .map(|&t| {
            let ca = curve_a.level_count(t) as u128 * mr;
            let cr = curve_r.level_count(t) as u128 * ma;
            ca.abs_diff(cr)
        })
        .max()
        .unwrap_or(0);
    Ok(AlignmentGap {
        numerator,
        denominator: ma * mr,
        source_len: curve_a.len(),
        source_ties: 1,
    })
}

/// Size of the largest block of equal values in a sorted slice.
fn largest_tie(sorted: &[f64]) -> usize {
    sorted
        .chunk_by(|a, b| a == b)
        .map(<[f64]>::len)
        .max()
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAlignment {
    pub attribute: String,
    pub genuine_gap: f64,
    pub genuine_bound: f64,
    pub genuine_ties: usize,
    pub impostor_gap: f64,
    pub impostor_bound: f64,
    pub impostor_ties: usize,
    pub pass: bool,
}

/// Transforms every group's pre-trained pseudo-scores onto group `r` and
/// measures the resulting curve gaps.
pub fn alignment_report(ds: &EmbeddingDataset, cs: &CentroidSet, r: u32) -> Result<Vec<GroupAlignment>> {
    let pairs = PseudoPairScores::compute(ds, cs)?;
    let table = target_table_from_pairs(ds, &pairs, r)?;
    let reference = &pairs.curves[r as usize];
    let mut genuine: Vec<Vec<f64>> = vec![Vec::new(); ds.num_attributes()];
    let mut impostor: Vec<Vec<f64>> = vec![Vec::new(); ds.num_attributes()];
    for e in table.entries() {
        let a = ds.attribute_of_image(e.image as usize) as usize;
        match e.kind {
            PairKind::Genuine => genuine[a].push(e.target),
            PairKind::Impostor => impostor[a].push(e.target),
        }
    }
    (0..ds.num_attributes())
        .map(|a| {
            let curves = &pairs.curves[a];
            let (gt, it) = (largest_tie(curves.frr.scores()), largest_tie(curves.far()?.scores()));
            let g = check_alignment(&genuine[a], &reference.frr)?.with_source_ties(gt);
            let i = check_alignment(&impostor[a], reference.far()?)?.with_source_ties(it);
            Ok(GroupAlignment {
                attribute: ds.attribute_names()[a].clone(),
                genuine_gap: g.value(),
                genuine_bound: g.bound(),
                genuine_ties: gt,
                impostor_gap: i.value(),
                impostor_bound: i.bound(),
                impostor_ties: it,
                pass: g.within_bound() && i.within_bound(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetHeader {
    reference_attribute: String,
    attribute_names: Vec<String>,
    n: usize,
    records: usize,
    counts: BTreeMap<String, GroupPairCounts>,
    checksum: u32,
}

fn kind_byte(kind: PairKind) -> u8 {
    match kind {
        PairKind::Genuine => 0,
        PairKind::Impostor => 1,
    }
}

/// Writes `targets.bin` (33-byte little-endian records: image u32,
/// identity u32, kind u8 with 0 = genuine, source f64, target f64, level f64)
/// and the `targets.json` header.
pub fn save_target_table(table: &TargetTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(table.len() * RECORD_BYTES);
    for e in &table.entries {
        bytes.extend_from_slice(&e.image.to_le_bytes());
        bytes.extend_from_slice(&e.identity.to_le_bytes());
        bytes.push(kind_byte(e.kind));
        bytes.extend_from_slice(&e.source.to_le_bytes());
        bytes.extend_from_slice(&e.target.to_le_bytes());
        bytes.extend_from_slice(&e.level.to_le_bytes());
    }
    let header = TargetHeader {
        reference_attribute: table.reference_name().to_string(),
        attribute_names: table.attribute_names.clone(),
        n: table.num_images(),
        records: table.len(),
        counts: table
            .attribute_names
            .iter()
            .cloned()
            .zip(table.counts.iter().copied())
            .collect(),
        checksum: binio::crc32(&bytes),
    };
    binio::write_atomic(&dir.join(TARGETS_BIN), &bytes)?;
    binio::write_json(&dir.join(TARGETS_JSON), &header)
}

pub fn load_target_table(dir: &Path) -> Result<TargetTable> {
    let json_path = dir.join(TARGETS_JSON);
    let bin_path = dir.join(TARGETS_BIN);
    let header: TargetHeader = binio::read_json(&json_path)?;
    let bytes = binio::read_file(&bin_path)?;
    if bytes.len() != header.records * RECORD_BYTES {
        return Err(Error::format(
            &bin_path,
            format!("expected {} records of {RECORD_BYTES} bytes, found {} bytes", header.records, bytes.len()),
        ));
    }
    binio::verify_checksum(&bin_path, &bytes, Some(header.checksum))?;
    let reference = header
        .attribute_names
        .iter()
        .position(|n| *n == header.reference_attribute)
        .ok_or_else(|| Error::format(&json_path, "reference attribute not among attribute names"))?
        as u32;

    let f64_at = |rec: &[u8], at: usize| f64::from_le_bytes(rec[at..at + 8].try_into().expect("8 bytes"));
    let mut entries = Vec::with_capacity(header.records);
    let mut offsets = vec![0usize; header.n + 1];
    for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let image = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes"));
        let identity = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes"));
        let kind = match rec[8] {
            0 => PairKind::Genuine,
            1 => PairKind::Impostor,
            other => return Err(Error::format(&bin_path, format!("record {r}: bad kind byte {other}"))),
        };
        let e = TargetEntry {
            image,
            identity,
            kind,
            source: f64_at(rec, 9),
            target: f64_at(rec, 17),
            level: f64_at(rec, 25),
        };
        if image as usize >= header.n {
            return Err(Error::format(&bin_path, format!("record {r}: image {image} outside [0, {})", header.n)));
        }
        if let Some(prev) = entries.last() {
            let prev: &TargetEntry = prev;
            if (prev.image, prev.identity) >= (image, identity) {
                return Err(Error::format(&bin_path, format!("record {r}: records not sorted by (image, identity)")));
            }
        }
        offsets[image as usize + 1] += 1;
        entries.push(e);
    }
    for i in 0..header.n {
        offsets[i + 1] += offsets[i];
    }
    let counts = header
        .attribute_names
        .iter()
        .map(|n| {
            header
                .counts
                .get(n)
                .copied()
                .ok_or_else(|| Error::format(&json_path, format!("missing counts for group {n:?}")))
        })
        .collect::<Result<_>>()?;
    Ok(TargetTable {
        reference,
        attribute_names: header.attribute_names,
        entries,
        offsets,
        counts,
    })
}
