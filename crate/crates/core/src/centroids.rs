//! Identity centroids and image-centroid pseudo-scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::curves::{cosine_score, norm, unit_vector, Orientation, PairKind, StepCurve};
use crate::dataset::{build_group_index, EmbeddingDataset, GroupIndex};
use crate::error::{Error, Result};

pub const CENTROIDS_BIN: &str = "centroids.bin";
pub const CENTROIDS_JSON: &str = "centroids.json";

/// Below this norm an averaged centroid is treated as cancelled out.
const DEGENERATE_NORM: f64 = 1e-12;

/// Per-identity mean of normalized embeddings, stored unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    d: usize,
    centroids: Vec<f64>,
    attribute_of: Vec<u32>,
    counts: Vec<usize>,
}

impl CentroidSet {
    pub fn new(d: usize, centroids: Vec<f64>, attribute_of: Vec<u32>, counts: Vec<usize>) -> Result<Self> {
        let k = attribute_of.len();
        if centroids.len() != k * d || counts.len() != k {
            return Err(Error::invalid(format!(
                "centroid set shape mismatch: {} values, {} attributes, {} counts for d = {d}",
                centroids.len(),
                k,
                counts.len()
            )));
        }
        for row in 0..k {
            let c = &centroids[row * d..(row + 1) * d];
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("centroid {row} has a non-finite entry")));
            }
            if norm(c) <= DEGENERATE_NORM {
                return Err(Error::numerical(format!("centroid {row} has zero norm")));
            }
        }
        Ok(Self {
            d,
            centroids,
            attribute_of,
            counts,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.attribute_of.len()
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.d..(k + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.centroids
    }

    pub fn attribute_of(&self) -> &[u32] {
        &self.attribute_of
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Checks that this set was estimated for `ds` (same d, K and attributes).
    pub fn check_matches(&self, ds: &EmbeddingDataset) -> Result<()> {
        if self.d != ds.d() || self.k() != ds.k() || self.attribute_of != ds.attribute_of_identity() {
            return Err(Error::invalid(format!(
                "centroids (d = {}, k = {}) do not match dataset (d = {}, k = {}) or its attributes",
                self.d,
                self.k(),
                ds.d(),
                ds.k()
            )));
        }
        Ok(())
    }
}

/// `mu_k = (1/n_k) * sum_{y_i = k} f(x_i) / |f(x_i)|`.
///
/// Contributions are summed in a canonical (sorted) order so the result does
/// not depend on how images are ordered in the dataset.
pub fn estimate_centroids(ds: &EmbeddingDataset) -> Result<CentroidSet> {
    let d = ds.d();
    let k = ds.k();
    let mut members: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    for i in 0..ds.n() {
        members[ds.identity_of()[i] as usize].push(unit_vector(&ds.row_f64(i)));
    }
    let mut centroids = Vec::with_capacity(k * d);
    let mut counts = Vec::with_capacity(k);
    for (id, mut rows) in members.into_iter().enumerate() {
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut sum = vec![0.0; d];
        for r in &rows {
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v;
            }
        }
        let n_k = rows.len();
        let mean: Vec<f64> = sum.into_iter().map(|s| s / n_k as f64).collect();
        if norm(&mean) <= DEGENERATE_NORM {
            return Err(Error::numerical(format!(
                "identity {id}: normalized embeddings sum to the zero vector"
            )));
        }
        centroids.extend(mean);
        counts.push(n_k);
    }
    CentroidSet::new(d, centroids, ds.attribute_of_identity().to_vec(), counts)
}

/// Pre-trained pseudo-score `cos(f(x_i), mu_k)`.
pub fn pseudo_score(ds: &EmbeddingDataset, cs: &CentroidSet, i: usize, k: usize) -> f64 {
    cosine_score(&unit_vector(&ds.row_f64(i)), cs.centroid(k)).expect("dataset rows and centroids are nonzero")
}

/// Same-attribute image-centroid pairs, stored implicitly as the cross
/// product of a group's images and identities.
#[derive(Debug, Clone)]
pub struct PseudoPairIndex {
    groups: GroupIndex,
}

impl PseudoPairIndex {
    pub fn new(ds: &EmbeddingDataset) -> Self {
        Self {
            groups: build_group_index(ds),
        }
    }

    pub fn groups(&self) -> &GroupIndex {
        &self.groups
    }

    /// `|G_a|`: one genuine centroid per image.
    pub fn genuine_count(&self, a: u32) -> usize {
        self.groups.images(a).len()
    }

    /// `|I_a| = |images(a)| * (|identities(a)| - 1)`.
    pub fn impostor_count(&self, a: u32) -> usize {
        self.groups.images(a).len() * self.groups.identities(a).len().saturating_sub(1)
    }

    /// Pairs of group `a` in `(image, identity)` order with their kind.
    pub fn pairs(&self, ds: &EmbeddingDataset, a: u32) -> impl Iterator<Item = (usize, usize, PairKind)> + '_ {
        let ids = ds.identity_of().to_vec();
        self.groups.images(a).iter().flat_map(move |&i| {
            let own = ids[i as usize];
            self.groups.identities(a).iter().map(move |&k| {
                let kind = if k == own {
                    PairKind::Genuine
                } else {
                    PairKind::Impostor
                };
                (i as usize, k as usize, kind)
            })
        })
    }
}

/// Pseudo-metric curves of one group. The impostor curve is absent when the
/// group has fewer than two identities.
#[derive(Debug, Clone)]
pub struct GroupPseudoCurves {
    pub attribute: u32,
    pub frr: StepCurve,
    far: Option<StepCurve>,
}

impl GroupPseudoCurves {
    pub fn far(&self) -> Result<&StepCurve> {
        self.far.as_ref().ok_or_else(|| {
            Error::invalid(format!(
                "group {} has fewer than 2 identities: no impostor pseudo-pairs",
                self.attribute
            ))
        })
    }
}

pub fn pseudo_metric_curves(ds: &EmbeddingDataset, cs: &CentroidSet, a: u32) -> Result<GroupPseudoCurves> {
    let index = PseudoPairIndex::new(ds);
    group_curves(ds, cs, &index, a)
}

fn group_curves(
    ds: &EmbeddingDataset,
    cs: &CentroidSet,
    index: &PseudoPairIndex,
    a: u32,
) -> Result<GroupPseudoCurves> {
    if a as usize >= ds.num_attributes() {
        return Err(Error::invalid(format!("attribute {a} does not exist")));
    }
    if index.genuine_count(a) == 0 {
        return Err(Error::invalid(format!("group {a} has no images")));
    }
    let mut genuine = Vec::with_capacity(index.genuine_count(a));
    let mut impostor = Vec::with_capacity(index.impostor_count(a));
    let unit = UnitRows::new(ds);
    for (i, k, kind) in index.pairs(ds, a) {
        let s = unit.score(i, cs, k);
        match kind {
            PairKind::Genuine => genuine.push(s),
            PairKind::Impostor => impostor.push(s),
        }
    }
    let far = if impostor.is_empty() {
        None
    } else {
        Some(StepCurve::from_scores(impostor, Orientation::Far)?)
    };
    Ok(GroupPseudoCurves {
        attribute: a,
        frr: StepCurve::from_scores(genuine, Orientation::Frr)?,
        far,
    })
}

/// Unit-normalized dataset rows, for repeated pseudo-scoring.
struct UnitRows {
    d: usize,
    rows: Vec<f64>,
}

impl UnitRows {
    fn new(ds: &EmbeddingDataset) -> Self {
        Self {
            d: ds.d(),
            rows: (0..ds.n()).flat_map(|i| unit_vector(&ds.row_f64(i))).collect(),
        }
    }

    fn score(&self, i: usize, cs: &CentroidSet, k: usize) -> f64 {
        cosine_score(&self.rows[i * self.d..(i + 1) * self.d], cs.centroid(k))
            .expect("dataset rows and centroids are nonzero")
    }
}

/// One same-attribute pseudo-pair with its pre-trained score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoPair {
    pub image: u32,
    pub identity: u32,
    pub kind: PairKind,
    pub score: f64,
}

/// All same-attribute pseudo-pairs sorted by `(image, identity)`, with each
/// group's pseudo-metric curves.
#[derive(Debug, Clone)]
pub struct PseudoPairScores {
    pub pairs: Vec<PseudoPair>,
    /// `offsets[i]..offsets[i + 1]` are the pairs of image `i`.
    pub offsets: Vec<usize>,
    pub curves: Vec<GroupPseudoCurves>,
}

impl PseudoPairScores {
    pub fn compute(ds: &EmbeddingDataset, cs: &CentroidSet) -> Result<Self> {
        cs.check_matches(ds)?;
        let index = PseudoPairIndex::new(ds);
        let unit = UnitRows::new(ds);
        let mut pairs = Vec::new();
        let mut offsets = Vec::with_capacity(ds.n() + 1);
        offsets.push(0);
        for i in 0..ds.n() {
            let a = ds.attribute_of_image(i);
            let own = ds.identity_of()[i];
            for &k in index.groups().identities(a) {
                pairs.push(PseudoPair {
                    image: i as u32,
                    identity: k,
                    kind: if k == own {
                        PairKind::Genuine
                    } else {
                        PairKind::Impostor
                    },
                    score: unit.score(i, cs, k as usize),
                });
            }
            offsets.push(pairs.len());
        }
        let curves = (0..ds.num_attributes() as u32)
            .map(|a| group_curves(ds, cs, &index, a))
            .collect::<Result<_>>()?;
        Ok(Self {
            pairs,
            offsets,
            curves,
        })
    }

    pub fn pairs_of_image(&self, i: usize) -> &[PseudoPair] {
        &self.pairs[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CentroidEntry {
    identity: u32,
    attribute: u32,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CentroidManifest {
    k: usize,
    d: usize,
    dtype: String,
    centroids: Vec<CentroidEntry>,
    checksum: u32,
}

/// Writes `centroids.bin` (row-major little-endian f64) and `centroids.json`.
pub fn save_centroids(cs: &CentroidSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = binio::f64_to_bytes(&cs.centroids);
    let manifest = CentroidManifest {
        k: cs.k(),
        d: cs.d,
        dtype: "f64".into(),
        centroids: cs
            .attribute_of
            .iter()
            .zip(&cs.counts)
            .enumerate()
            .map(|(k, (&attribute, &count))| CentroidEntry {
                identity: k as u32,
                attribute,
                count,
            })
            .collect(),
        checksum: binio::crc32(&bytes),
    };
    binio::write_atomic(&dir.join(CENTROIDS_BIN), &bytes)?;
    binio::write_json(&dir.join(CENTROIDS_JSON), &manifest)
}

pub fn load_centroids(dir: &Path) -> Result<CentroidSet> {
    let json_path = dir.join(CENTROIDS_JSON);
    let bin_path = dir.join(CENTROIDS_BIN);
    let manifest: CentroidManifest = binio::read_json(&json_path)?;
    if manifest.dtype != "f64" {
        return Err(Error::format(&json_path, format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.centroids.len() != manifest.k
        || manifest
            .centroids
            .iter()
            .enumerate()
            .any(|(k, c)| c.identity as usize != k)
    {
        return Err(Error::format(&json_path, "centroid entries must list identities 0..k in order"));
    }
    let bytes = binio::read_file(&bin_path)?;
    let values = binio::bytes_to_f64(&bin_path, &bytes, manifest.k * manifest.d)?;
    binio::verify_checksum(&bin_path, &bytes, Some(manifest.checksum))?;
    CentroidSet::new(
        manifest.d,
        values,
        manifest.centroids.iter().map(|c| c.attribute).collect(),
        manifest.centroids.iter().map(|c| c.count).collect(),
    )
}
