//! Synthetic biased embedding datasets.
//!
//! Generator: ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64(seed)`, stream
//! 0). Uniforms are `(u64 >> 11) * 2^-53`; Gaussians come in pairs from the
//! Box–Muller transform `sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)`.
//!
//! Each identity gets a direction drawn uniformly on the sphere (a normalized
//! standard Gaussian vector). Each of its images is
//! `normalize(direction + sigma_a * z)` with `z` standard Gaussian in `R^d`,
//! so a larger `sigma_a` spreads a group's images further from their
//! identity and worsens that group's genuine scores.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::dataset::{save_dataset, EmbeddingDataset};
use crate::error::{Error, Result};

pub const SYNTH_JSON: &str = "synth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub identities: usize,
    pub images_per_identity: usize,
    pub sigma: f64,
}

impl std::str::FromStr for GroupSpec {
    type Err = Error;

    /// Parses `name:identities:images:sigma`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("group spec {s:?} is not name:identities:images:sigma"));
        if parts.len() != 4 || parts[0].is_empty() {
            return Err(bad());
        }
        Ok(Self {
            name: parts[0].to_string(),
            identities: parts[1].parse().map_err(|_| bad())?,
            images_per_identity: parts[2].parse().map_err(|_| bad())?,
            sigma: parts[3].parse().map_err(|_| bad())?,
        })
    }
}

/// Parses a comma-separated list of group specs.
pub fn parse_groups(s: &str) -> Result<Vec<GroupSpec>> {
    s.split(',').map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub groups: Vec<GroupSpec>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Config("at least one group is required".into()));
        }
        for g in &self.groups {
            if g.identities < 2 {
                return Err(Error::Config(format!(
                    "group {} needs at least 2 identities for impostor pairs",
                    g.name
                )));
            }
            if g.images_per_identity == 0 {
                return Err(Error::Config(format!("group {} has no images per identity", g.name)));
            }
            if !(g.sigma.is_finite() && g.sigma >= 0.0) {
                return Err(Error::Config(format!("group {} has invalid sigma {}", g.name, g.sigma)));
            }
        }
        for (i, g) in self.groups.iter().enumerate() {
            if self.groups[..i].iter().any(|h| h.name == g.name) {
                return Err(Error::Config(format!("duplicate group name {}", g.name)));
            }
        }
        Ok(())
    }
}

/// Standard normal draws via Box–Muller over a ChaCha8 stream.
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    fn gaussian_vector(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.next_gaussian()).collect()
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let d = cfg.d;
    let mut rng = GaussianStream::new(cfg.seed);
    let mut embeddings = Vec::new();
    let mut identity_of = Vec::new();
    let mut attribute_of_identity = Vec::new();
    let mut identity_names = Vec::new();
    for (a, group) in cfg.groups.iter().enumerate() {
        for j in 0..group.identities {
            let id = attribute_of_identity.len() as u32;
            attribute_of_identity.push(a as u32);
            identity_names.push(format!("{}_{j}", group.name));
            let mut direction = rng.gaussian_vector(d);
            normalize(&mut direction);
            for _ in 0..group.images_per_identity {
                let noise = rng.gaussian_vector(d);
                let mut image: Vec<f64> = direction
                    .iter()
                    .zip(&noise)
                    .map(|(u, z)| u + group.sigma * z)
                    .collect();
                normalize(&mut image);
                embeddings.extend(image.iter().map(|&v| v as f32));
                identity_of.push(id);
            }
        }
    }
    EmbeddingDataset::with_identity_names(
        d,
        embeddings,
        identity_of,
        attribute_of_identity,
        cfg.groups.iter().map(|g| g.name.clone()).collect(),
        identity_names,
    )
}

/// Generates, saves the dataset into `dir`, and records the config in
/// `synth.json`.
pub fn generate_to_dir(cfg: &SynthConfig, dir: &Path) -> Result<EmbeddingDataset> {
    let ds = generate(cfg)?;
    save_dataset(&ds, dir)?;
    binio::write_json(&dir.join(SYNTH_JSON), cfg)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centroids::{estimate_centroids, pseudo_metric_curves};

    fn cfg(groups: &[(&str, usize, usize, f64)], d: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            d,
            groups: groups
                .iter()
                .map(|&(name, identities, images_per_identity, sigma)| GroupSpec {
                    name: name.into(),
                    identities,
                    images_per_identity,
                    sigma,
                })
                .collect(),
            seed,
        }
    }

    #[test]
    fn parse_group_list() {
        let g = parse_groups("A:50:10:0.3,B:50:10:0.8").unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[1].name, "B");
        assert_eq!(g[1].sigma, 0.8);
        assert!(parse_groups("A:50:10").is_err());
        assert!(parse_groups("A:x:10:0.3").is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&cfg(&[("A", 1, 3, 0.1)], 4, 0)).is_err());
        assert!(generate(&cfg(&[("A", 2, 3, f64::NAN)], 4, 0)).is_err());
        assert!(generate(&cfg(&[], 4, 0)).is_err());
        assert!(generate(&cfg(&[("A", 2, 3, 0.1), ("A", 2, 3, 0.2)], 4, 0)).is_err());
    }

    #[test]
    fn counts_and_unit_norm() {
        let ds = generate(&cfg(&[("A", 3, 4, 0.2), ("B", 5, 2, 0.7)], 8, 1)).unwrap();
        assert_eq!((ds.n(), ds.k(), ds.num_attributes()), (22, 8, 2));
        for i in 0..ds.n() {
            let n: f64 = ds.row_f64(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let c = cfg(&[("A", 3, 4, 0.2), ("B", 2, 2, 0.7)], 8, 42);
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        let mut other = c.clone();
        other.seed = 43;
        assert_ne!(generate(&c).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn noiseless_identities_are_exact() {
        let ds = generate(&cfg(&[("A", 3, 4, 0.0)], 6, 5)).unwrap();
        for i in 0..ds.n() {
            let first = ds.identity_of().iter().position(|&y| y == ds.identity_of()[i]).unwrap();
            assert_eq!(ds.row(i), ds.row(first));
        }
        let cs = estimate_centroids(&ds).unwrap();
        let curves = pseudo_metric_curves(&ds, &cs, 0).unwrap();
        assert!(curves.frr.scores().iter().all(|&s| (s - 1.0).abs() < 1e-12));
        assert_eq!(curves.frr.eval(1.0 - 1e-9), 0.0);
    }

    #[test]
    fn gaussian_moments() {
        let mut g = GaussianStream::new(11);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| g.next_gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }
}
