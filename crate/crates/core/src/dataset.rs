//! Embedding datasets: validation, on-disk format, and group indexing.
//!
//! A dataset directory holds either
//!
//! * `embeddings.bin` (row-major little-endian `f32`, `n * d` values) together
//!   with `manifest.json`, or
//! * `embeddings.csv` with one image per row: identity name, attribute name,
//!   then `d` values.
//!
//! Attributes belong to identities; an image's attribute is the attribute of
//! its identity.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub const EMBEDDINGS_BIN: &str = "embeddings.bin";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";

/// Precomputed embeddings with identity labels and per-identity attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    d: usize,
    embeddings: Vec<f32>,
    identity_of: Vec<u32>,
    attribute_of_identity: Vec<u32>,
    attribute_names: Vec<String>,
    identity_names: Vec<String>,
}

impl EmbeddingDataset {
    /// Builds a dataset and checks every invariant. Identity names default to
    /// `id<k>`.
    pub fn new(
        d: usize,
        embeddings: Vec<f32>,
        identity_of: Vec<u32>,
        attribute_of_identity: Vec<u32>,
        attribute_names: Vec<String>,
    ) -> Result<Self> {
        let identity_names = (0..attribute_of_identity.len())
            .map(|k| format!("id{k}"))
            .collect();
        Self::with_identity_names(
            d,
            embeddings,
            identity_of,
            attribute_of_identity,
            attribute_names,
            identity_names,
        )
    }

    pub fn with_identity_names(
        d: usize,
        embeddings: Vec<f32>,
        identity_of: Vec<u32>,
        attribute_of_identity: Vec<u32>,
        attribute_names: Vec<String>,
        identity_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Self {
            d,
            embeddings,
            identity_of,
            attribute_of_identity,
            attribute_names,
            identity_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d, k, a) = (self.n(), self.d, self.k(), self.num_attributes());
        if d == 0 {
            return Err(Error::invalid("embedding dimension d must be at least 1"));
        }
        if a == 0 {
            return Err(Error::invalid("dataset has no attributes (A = 0)"));
        }
        if self.embeddings.len() != n * d {
            return Err(Error::invalid(format!(
                "embedding matrix has {} values, expected n*d = {}*{}",
                self.embeddings.len(),
                n,
                d
            )));
        }
        if self.identity_names.len() != k {
            return Err(Error::invalid(format!(
                "{} identity names for {} identities",
                self.identity_names.len(),
                k
            )));
        }
        for (id, &attr) in self.attribute_of_identity.iter().enumerate() {
            if attr as usize >= a {
                return Err(Error::invalid(format!(
                    "identity {id} has attribute {attr}, outside [0, {a})"
                )));
            }
        }
        let mut referenced = vec![false; k];
        for (row, &id) in self.identity_of.iter().enumerate() {
            let Some(seen) = referenced.get_mut(id as usize) else {
                return Err(Error::invalid(format!(
                    "row {row}: identity {id} has no attribute (k = {k})"
                )));
            };
            *seen = true;
        }
        if let Some(id) = referenced.iter().position(|&seen| !seen) {
            return Err(Error::invalid(format!("identity {id} unreferenced")));
        }
        for row in 0..n {
            let values = self.row(row);
            if let Some(col) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "row {row}, column {col}: non-finite value {}",
                    values[col]
                )));
            }
            if values.iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!("row {row}: zero-norm embedding")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.identity_of.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.attribute_of_identity.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.d..(i + 1) * self.d]
    }

    /// Row `i` widened to `f64`.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// The whole matrix widened to `f64`, row-major.
    pub fn rows_f64(&self) -> Vec<f64> {
        self.embeddings.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn identity_of(&self) -> &[u32] {
        &self.identity_of
    }

    pub fn attribute_of_identity(&self) -> &[u32] {
        &self.attribute_of_identity
    }

    pub fn attribute_of_image(&self, i: usize) -> u32 {
        self.attribute_of_identity[self.identity_of[i] as usize]
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn identity_names(&self) -> &[String] {
        &self.identity_names
    }

    pub fn attribute_id(&self, name: &str) -> Option<u32> {
        self.attribute_names
            .iter()
            .position(|n| n == name)
            .map(|p| p as u32)
    }
}

/// Images and identities grouped by attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    identities: Vec<Vec<u32>>,
    images: Vec<Vec<u32>>,
    image_counts: Vec<usize>,
}

impl GroupIndex {
    pub fn num_attributes(&self) -> usize {
        self.images.len()
    }

    /// Identity ids carrying attribute `a`, ascending.
    pub fn identities(&self, a: u32) -> &[u32] {
        &self.identities[a as usize]
    }

    /// Image indices whose identity carries attribute `a`, ascending.
    pub fn images(&self, a: u32) -> &[u32] {
        &self.images[a as usize]
    }

    /// Number of images `n_k` of identity `k`.
    pub fn image_count(&self, k: u32) -> usize {
        self.image_counts[k as usize]
    }

    pub fn image_counts(&self) -> &[usize] {
        &self.image_counts
    }
}

pub fn build_group_index(ds: &EmbeddingDataset) -> GroupIndex {
    let a = ds.num_attributes();
    let mut identities = vec![Vec::new(); a];
    for (k, &attr) in ds.attribute_of_identity().iter().enumerate() {
        identities[attr as usize].push(k as u32);
    }
    let mut images = vec![Vec::new(); a];
    let mut image_counts = vec![0usize; ds.k()];
    for (i, &id) in ds.identity_of().iter().enumerate() {
        images[ds.attribute_of_identity()[id as usize] as usize].push(i as u32);
        image_counts[id as usize] += 1;
    }
    GroupIndex {
        identities,
        images,
        image_counts,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IdentityEntry {
    id: u32,
    attribute: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    row: usize,
    identity: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n: usize,
    d: usize,
    k: usize,
    identities: Vec<IdentityEntry>,
    images: Vec<ImageEntry>,
    attribute_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checksum: Option<u32>,
}

/// Loads a dataset directory, preferring the binary layout over the CSV fallback.
pub fn load_dataset(dir: &Path) -> Result<EmbeddingDataset> {
    let manifest_path = dir.join(MANIFEST_JSON);
    if manifest_path.exists() {
        return load_binary(dir);
    }
    let csv_path = dir.join(EMBEDDINGS_CSV);
    if csv_path.exists() {
        return load_csv(&csv_path);
    }
    Err(Error::format(
        dir,
        format!("neither {MANIFEST_JSON} nor {EMBEDDINGS_CSV} found"),
    ))
}

fn load_binary(dir: &Path) -> Result<EmbeddingDataset> {
    let manifest_path = dir.join(MANIFEST_JSON);
    let bin_path = dir.join(EMBEDDINGS_BIN);
    let manifest: Manifest = binio::read_json(&manifest_path)?;
    let bad = |msg: String| Error::format(&manifest_path, msg);

    if manifest.identities.len() != manifest.k {
        return Err(bad(format!(
            "k = {} but {} identities listed",
            manifest.k,
            manifest.identities.len()
        )));
    }
    if manifest.images.len() != manifest.n {
        return Err(bad(format!(
            "n = {} but {} images listed",
            manifest.n,
            manifest.images.len()
        )));
    }

    let mut attribute_of_identity = vec![None; manifest.k];
    let mut identity_names = vec![None; manifest.k];
    for entry in &manifest.identities {
        let slot = attribute_of_identity
            .get_mut(entry.id as usize)
            .ok_or_else(|| bad(format!("identity id {} outside [0, {})", entry.id, manifest.k)))?;
        if slot.is_some() {
            return Err(bad(format!("identity {} listed twice", entry.id)));
        }
        *slot = Some(entry.attribute);
        identity_names[entry.id as usize] = entry.name.clone();
    }
    let attribute_of_identity: Vec<u32> = attribute_of_identity
        .into_iter()
        .map(|a| a.expect("k distinct ids in [0, k) cover every slot"))
        .collect();
    let identity_names = identity_names
        .into_iter()
        .enumerate()
        .map(|(k, name)| name.unwrap_or_else(|| format!("id{k}")))
        .collect();

    let mut identity_of = vec![None; manifest.n];
    for entry in &manifest.images {
        let slot = identity_of
            .get_mut(entry.row)
            .ok_or_else(|| bad(format!("image row {} outside [0, {})", entry.row, manifest.n)))?;
        if slot.is_some() {
            return Err(bad(format!("image row {} listed twice", entry.row)));
        }
        if entry.identity as usize >= manifest.k {
            return Err(bad(format!(
                "row {}: identity {} has no attribute (k = {})",
                entry.row, entry.identity, manifest.k
            )));
        }
        *slot = Some(entry.identity);
    }
    let identity_of: Vec<u32> = identity_of
        .into_iter()
        .map(|id| id.expect("n distinct rows in [0, n) cover every slot"))
        .collect();

    let bytes = binio::read_file(&bin_path)?;
    let embeddings = binio::bytes_to_f32(&bin_path, &bytes, manifest.n * manifest.d)?;
    binio::verify_checksum(&bin_path, &bytes, manifest.checksum)?;

    EmbeddingDataset::with_identity_names(
        manifest.d,
        embeddings,
        identity_of,
        attribute_of_identity,
        manifest.attribute_names,
        identity_names,
    )
    .map_err(|e| match e {
        Error::Invalid(msg) => Error::format(dir, msg),
        other => other,
    })
}

fn load_csv(path: &Path) -> Result<EmbeddingDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;

    let mut d = None;
    let mut embeddings = Vec::new();
    let mut identity_of = Vec::new();
    let mut identity_ids: HashMap<String, u32> = HashMap::new();
    let mut identity_names = Vec::new();
    let mut attribute_of_identity: Vec<u32> = Vec::new();
    let mut attribute_ids: HashMap<String, u32> = HashMap::new();
    let mut attribute_names = Vec::new();

    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() < 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected identity, attribute and at least one value", line + 1),
            ));
        }
        // A first line whose value columns do not parse is a header.
        if line == 0 && record.get(2).and_then(|v| v.parse::<f32>().ok()).is_none() {
            continue;
        }
        let width = record.len() - 2;
        match d {
            None => d = Some(width),
            Some(d) if d != width => {
                return Err(Error::format(
                    path,
                    format!("line {}: {} values, expected {}", line + 1, width, d),
                ))
            }
            Some(_) => {}
        }
        let row = identity_of.len();
        for (col, field) in record.iter().skip(2).enumerate() {
            let v: f32 = field.parse().map_err(|_| {
                Error::format(path, format!("row {row}, column {col}: cannot parse {field:?}"))
            })?;
            embeddings.push(v);
        }

        let attr_name = &record[1];
        let next_attr = attribute_ids.len() as u32;
        let attr = *attribute_ids.entry(attr_name.to_string()).or_insert_with(|| {
            attribute_names.push(attr_name.to_string());
            next_attr
        });
        let id_name = &record[0];
        let id = match identity_ids.get(id_name) {
            Some(&id) => {
                if attribute_of_identity[id as usize] != attr {
                    return Err(Error::format(
                        path,
                        format!(
                            "row {row}: identity {id_name:?} labelled {:?} but earlier {:?}",
                            attr_name, attribute_names[attribute_of_identity[id as usize] as usize]
                        ),
                    ));
                }
                id
            }
            None => {
                let id = identity_names.len() as u32;
                identity_ids.insert(id_name.to_string(), id);
                identity_names.push(id_name.to_string());
                attribute_of_identity.push(attr);
                id
            }
        };
        identity_of.push(id);
    }

    let d = d.ok_or_else(|| Error::format(path, "no data rows"))?;
    EmbeddingDataset::with_identity_names(
        d,
        embeddings,
        identity_of,
        attribute_of_identity,
        attribute_names,
        identity_names,
    )
    .map_err(|e| match e {
        Error::Invalid(msg) => Error::format(path, msg),
        other => other,
    })
}

/// Writes the binary layout (with checksum) into `dir`, creating it if needed.
pub fn save_dataset(ds: &EmbeddingDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = binio::f32_to_bytes(&ds.embeddings);
    let manifest = Manifest {
        n: ds.n(),
        d: ds.d,
        k: ds.k(),
        identities: ds
            .attribute_of_identity
            .iter()
            .zip(&ds.identity_names)
            .enumerate()
            .map(|(id, (&attribute, name))| IdentityEntry {
                id: id as u32,
                attribute,
                name: Some(name.clone()),
            })
            .collect(),
        images: ds
            .identity_of
            .iter()
            .enumerate()
            .map(|(row, &identity)| ImageEntry { row, identity })
            .collect(),
        attribute_names: ds.attribute_names.clone(),
        checksum: Some(binio::crc32(&bytes)),
    };
    binio::write_atomic(&dir.join(EMBEDDINGS_BIN), &bytes)?;
    binio::write_json(&dir.join(MANIFEST_JSON), &manifest)
}
