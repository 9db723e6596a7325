//! Centroid Fairness loss and training.
//!
//! Every same-attribute pseudo-pair `(i, k)` carries a fixed target `T` and a
//! weight `w`. The objective is
//!
//! ```text
//! L_CF = sum_imp w (s_theta - T)^2 / Z_FAR + sum_gen w (s_theta - T)^2 / Z_FRR
//! ```
//!
//! with `Z_FAR`, `Z_FRR` the sums of all impostor and genuine weights. A batch
//! contributes the exact partial sum over its sampled images (with the global
//! normalizers), so summing batch losses over a full pass reproduces `L_CF`.

use std::path::Path;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::centroids::{CentroidSet, PseudoPairScores};
use crate::curves::PairKind;
use crate::dataset::{EmbeddingDataset, GroupIndex};
use crate::error::{Error, Result};
use crate::fairmodule::{
    adam_step, backprop_output, cosine_with_grad, forward_cached, init_from_pretrained, AdamState, Gradients,
    ModuleParams,
};
use crate::transform::TargetTable;

pub const WEIGHTS_BIN: &str = "weights.bin";
pub const WEIGHTS_JSON: &str = "weights.json";

/// Stream offset separating sampler draws from other users of the same seed.
const SAMPLER_STREAM_BASE: u64 = 1 << 32;

/// Per-pair loss weights, aligned with the target table's entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    weights: Vec<f64>,
    kinds: Vec<PairKind>,
    z_far: f64,
    z_frr: f64,
}

impl WeightTable {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn z_far(&self) -> f64 {
        self.z_far
    }

    pub fn z_frr(&self) -> f64 {
        self.z_frr
    }

    pub fn normalizer(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::Genuine => self.z_frr,
            PairKind::Impostor => self.z_far,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn check_matches(&self, targets: &TargetTable) -> Result<()> {
        if self.weights.len() != targets.len()
            || self.kinds.iter().zip(targets.entries()).any(|(k, e)| *k != e.kind)
        {
            return Err(Error::invalid("weight table does not line up with the target table"));
        }
        Ok(())
    }
}

/// `w_FAR = 1 / (|I_a| * FAR_a[s])` for impostor pairs and
/// `w_FRR = 1 / (|G_a| * FRR_a[s])` for genuine pairs, where the impostor
/// level counts scores `>= s` so that it never vanishes. Both reduce to one
/// over a rank count.
pub fn compute_weights(ds: &EmbeddingDataset, cs: &CentroidSet) -> Result<WeightTable> {
    let pairs = PseudoPairScores::compute(ds, cs)?;
    weights_from_pairs(ds, &pairs)
}

pub fn weights_from_pairs(ds: &EmbeddingDataset, pairs: &PseudoPairScores) -> Result<WeightTable> {
    let mut weights = Vec::with_capacity(pairs.pairs.len());
    let mut kinds = Vec::with_capacity(pairs.pairs.len());
    let (mut z_far, mut z_frr) = (0.0, 0.0);
    for p in &pairs.pairs {
        let group = &pairs.curves[ds.attribute_of_image(p.image as usize) as usize];
        let w = match p.kind {
            PairKind::Genuine => {
                let count = group.frr.count_le(p.score);
                let w = 1.0 / count as f64;
                z_frr += w;
                w
            }
            PairKind::Impostor => {
                let far = group.far()?;
                let count = far.len() - far.count_lt(p.score);
                let w = 1.0 / count as f64;
                z_far += w;
                w
            }
        };
        weights.push(w);
        kinds.push(p.kind);
    }
    if z_far <= 0.0 || z_frr <= 0.0 {
        return Err(Error::invalid("no genuine or no impostor pseudo-pairs: loss normalizers vanish"));
    }
    Ok(WeightTable {
        weights,
        kinds,
        z_far,
        z_frr,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    records: usize,
    z_far: f64,
    z_frr: f64,
    checksum: u32,
}

/// Writes `weights.bin` (little-endian f64 per target record) and
/// `weights.json` with the normalizers.
pub fn save_weight_table(weights: &WeightTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = binio::f64_to_bytes(&weights.weights);
    let header = WeightHeader {
        records: weights.len(),
        z_far: weights.z_far,
        z_frr: weights.z_frr,
        checksum: binio::crc32(&bytes),
    };
    binio::write_atomic(&dir.join(WEIGHTS_BIN), &bytes)?;
    binio::write_json(&dir.join(WEIGHTS_JSON), &header)
}

/// Loads weights saved next to `targets`, taking pair kinds from it.
pub fn load_weight_table(dir: &Path, targets: &TargetTable) -> Result<WeightTable> {
    let json_path = dir.join(WEIGHTS_JSON);
    let bin_path = dir.join(WEIGHTS_BIN);
    let header: WeightHeader = binio::read_json(&json_path)?;
    let bytes = binio::read_file(&bin_path)?;
    let weights = binio::bytes_to_f64(&bin_path, &bytes, header.records)?;
    binio::verify_checksum(&bin_path, &bytes, Some(header.checksum))?;
    let table = WeightTable {
        weights,
        kinds: targets.entries().iter().map(|e| e.kind).collect(),
        z_far: header.z_far,
        z_frr: header.z_frr,
    };
    table.check_matches(targets)?;
    Ok(table)
}

/// Loss and gradient of the batch's share of `L_CF`.
///
/// Each listed image contributes all of its same-attribute pairs; repeated
/// images contribute repeatedly. Cross-attribute pairs carry zero weight and
/// are never visited.
pub fn batch_loss_grad(
    p: &ModuleParams,
    batch: &[usize],
    targets: &TargetTable,
    weights: &WeightTable,
    ds: &EmbeddingDataset,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    weights.check_matches(targets)?;
    let mut grads = ModuleParams::zeros(p.d(), p.k());
    let mut loss = 0.0;
    let layout = p.layout();
    for &i in batch {
        if i >= ds.n() {
            return Err(Error::invalid(format!("image index {i} outside [0, {})", ds.n())));
        }
        let cache = forward_cached(p, &ds.row_f64(i))?;
        let mut grad_output = vec![0.0; p.d()];
        let range = targets.range_of_image(i);
        for (e, &w) in targets.entries()[range.clone()]
            .iter()
            .zip(&weights.weights()[range])
        {
            let k = e.identity as usize;
            let cg = cosine_with_grad(&cache.output, p.centroid(k))?;
            let scale = w / weights.normalizer(e.kind);
            let residual = cg.value - e.target;
            loss += scale * residual * residual;
            let r = 2.0 * scale * residual;
            for (g, du) in grad_output.iter_mut().zip(&cg.du) {
                *g += r * du;
            }
            for (g, dv) in grads.block_mut(layout.centroid(k)).iter_mut().zip(&cg.dv) {
                *g += r * dv;
            }
        }
        backprop_output(p, &cache, &grad_output, &mut grads);
    }
    Ok((loss, grads))
}

/// `L_CF` over every image once.
pub fn full_loss(p: &ModuleParams, targets: &TargetTable, weights: &WeightTable, ds: &EmbeddingDataset) -> Result<f64> {
    let all: Vec<usize> = (0..ds.n()).collect();
    Ok(batch_loss_grad(p, &all, targets, weights, ds)?.0)
}

/// `N` draws with replacement, image `i` having probability proportional to
/// `1 / |images(a_{y_i})|`, so every group carries equal total mass.
pub fn sample_epoch(gi: &GroupIndex, seed: u64, epoch_index: u64) -> Result<Vec<usize>> {
    let n: usize = (0..gi.num_attributes()).map(|a| gi.images(a as u32).len()).sum();
    let mut probs = vec![0.0; n];
    for a in 0..gi.num_attributes() as u32 {
        let images = gi.images(a);
        if images.is_empty() {
            return Err(Error::invalid(format!("group {a} has no images to sample")));
        }
        let w = 1.0 / images.len() as f64;
        for &i in images {
            probs[i as usize] = w;
        }
    }
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLER_STREAM_BASE + epoch_index);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub reference: u32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(reference: u32) -> Self {
        Self {
            batch_size: 4096,
            learning_rate: 1e-3,
            epochs: 20,
            reference,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wallclock_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModuleParams,
    pub log: Vec<EpochLog>,
}

pub fn train(
    ds: &EmbeddingDataset,
    cs: &CentroidSet,
    targets: &TargetTable,
    weights: &WeightTable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_callback(ds, cs, targets, weights, cfg, |_, _| Ok(()))
}

/// Trains from `init_from_pretrained(cs)`; `on_epoch` sees each finished
/// epoch's log entry and parameters.
pub fn train_with_callback(
    ds: &EmbeddingDataset,
    cs: &CentroidSet,
    targets: &TargetTable,
    weights: &WeightTable,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ModuleParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cs.check_matches(ds)?;
    targets.check_matches(ds)?;
    weights.check_matches(targets)?;
    if targets.reference() != cfg.reference {
        return Err(Error::Config(format!(
            "targets were built for reference {} but the configuration asks for {}",
            targets.reference(),
            cfg.reference
        )));
    }
    let gi = crate::dataset::build_group_index(ds);
    let mut params = init_from_pretrained(cs);
    let mut adam = AdamState::new(&params);
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = sample_epoch(&gi, cfg.seed, epoch as u64)?;
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_loss_grad(&params, batch, targets, weights, ds)?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss at step {step} (epoch {}, batch {b})",
                    epoch + 1
                )));
            }
            adam_step(&mut params, &mut adam, &grads, cfg.learning_rate).map_err(|e| {
                Error::numerical(format!("step {step} (epoch {}, batch {b}): {e}", epoch + 1))
            })?;
            total += loss;
            batches += 1;
            step += 1;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: total / batches as f64,
            wallclock_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry, &params)?;
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centroids::estimate_centroids;
    use crate::dataset::build_group_index;
    use crate::transform::build_target_table;

    fn names(a: usize) -> Vec<String> {
        (0..a).map(|i| format!("g{i}")).collect()
    }

    fn two_group() -> EmbeddingDataset {
        let rows = vec![
            1.0, 0.1, 0.0, 0.9, 0.3, 0.1, //
            0.0, 1.0, 0.2, 0.2, 0.8, 0.1, //
            0.1, 0.0, 1.0, -0.2, 0.3, 0.7, //
            -1.0, 0.2, 0.1, -0.7, -0.5, 0.0,
        ];
        EmbeddingDataset::new(3, rows, vec![0, 0, 1, 1, 2, 2, 3, 3], vec![0, 0, 1, 1], names(2)).unwrap()
    }

    #[test]
    fn weight_formula_example() {
        let ds = two_group();
        let cs = estimate_centroids(&ds).unwrap();
        let targets = build_target_table(&ds, &cs, 0).unwrap();
        let w = compute_weights(&ds, &cs).unwrap();
        assert_eq!(w.len(), targets.len());
        // Each group has |I_a| = 4 impostor pairs with inclusive levels
        // 4/4, 3/4, 2/4, 1/4, e.g. level 1/2 gives w = 1 / (4 * 0.5) = 0.5.
        for a in 0..2u32 {
            let mut ws: Vec<f64> = targets
                .entries()
                .iter()
                .zip(w.weights())
                .filter(|(e, _)| e.kind == PairKind::Impostor && ds.attribute_of_image(e.image as usize) == a)
                .map(|(_, &w)| w)
                .collect();
            ws.sort_by(f64::total_cmp);
            assert_eq!(ws, vec![0.25, 1.0 / 3.0, 0.5, 1.0]);
        }
    }

    #[test]
    fn unit_pair_loss_arithmetic() {
        // One genuine pair, w = 1, Z = 1, s_theta = 0.5, T = 0.7.
        let residual: f64 = 0.5 - 0.7;
        assert!((1.0 / 1.0 * residual * residual - 0.04).abs() < 1e-15);
    }

    #[test]
    fn sampler_group_mass() {
        let ids: Vec<u32> = (0..400).map(|i| if i < 100 { 0 } else { 1 }).collect();
        let rows: Vec<f32> = vec![1.0; 400];
        let ds = EmbeddingDataset::new(1, rows, ids, vec![0, 1], names(2)).unwrap();
        let gi = build_group_index(&ds);
        let mut hits = [0usize; 2];
        for epoch in 0..50 {
            for i in sample_epoch(&gi, 3, epoch).unwrap() {
                hits[usize::from(i >= 100)] += 1;
            }
        }
        let frac = hits[0] as f64 / (hits[0] + hits[1]) as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn sampler_is_deterministic_per_epoch() {
        let ds = two_group();
        let gi = build_group_index(&ds);
        let a = sample_epoch(&gi, 9, 2).unwrap();
        assert_eq!(a, sample_epoch(&gi, 9, 2).unwrap());
        assert_eq!(a.len(), ds.n());
        assert_ne!(
            (0..8).map(|e| sample_epoch(&gi, 9, e).unwrap()).collect::<Vec<_>>()[0],
            sample_epoch(&gi, 9, 7).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(0);
        assert_eq!((cfg.batch_size, cfg.learning_rate, cfg.epochs), (4096, 1e-3, 20));
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        cfg.epochs = 1;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        let ds = two_group();
        let cs = estimate_centroids(&ds).unwrap();
        let targets = build_target_table(&ds, &cs, 0).unwrap();
        let w = compute_weights(&ds, &cs).unwrap();
        let p = init_from_pretrained(&cs);
        assert!(batch_loss_grad(&p, &[], &targets, &w, &ds).is_err());
    }

    #[test]
    fn batch_losses_sum_to_full_loss() {
        let ds = two_group();
        let cs = estimate_centroids(&ds).unwrap();
        let targets = build_target_table(&ds, &cs, 0).unwrap();
        let w = compute_weights(&ds, &cs).unwrap();
        let p = init_from_pretrained(&cs);
        let full = full_loss(&p, &targets, &w, &ds).unwrap();
        assert!(full > 0.0);
        let parts: f64 = [vec![0, 1, 2], vec![3, 4, 5, 6, 7]]
            .iter()
            .map(|b| batch_loss_grad(&p, b, &targets, &w, &ds).unwrap().0)
            .sum();
        assert!((parts - full).abs() <= 1e-14 * full);
    }

    #[test]
    fn weight_file_round_trip() {
        let ds = two_group();
        let cs = estimate_centroids(&ds).unwrap();
        let targets = build_target_table(&ds, &cs, 1).unwrap();
        let w = compute_weights(&ds, &cs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_weight_table(&w, dir.path()).unwrap();
        assert_eq!(load_weight_table(dir.path(), &targets).unwrap(), w);
    }
}
