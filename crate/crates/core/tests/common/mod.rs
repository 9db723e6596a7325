//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's curve, transform, weight or loss
//! code; only plain data types cross the boundary.

#![allow(dead_code)]

use cfair::{EmbeddingDataset, ModuleParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Irwin–Hall is plenty for test data.
    (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0
}

pub struct DatasetShape {
    pub groups: std::ops::RangeInclusive<usize>,
    pub identities: std::ops::RangeInclusive<usize>,
    pub images: std::ops::RangeInclusive<usize>,
    pub d: usize,
}

/// Clustered random embeddings: every identity has a random direction, every
/// image is that direction plus group-specific noise.
pub fn random_dataset(seed: u64, shape: &DatasetShape) -> EmbeddingDataset {
    let mut r = rng(seed);
    let d = shape.d;
    let groups = r.gen_range(shape.groups.clone());
    let mut embeddings = Vec::new();
    let mut identity_of = Vec::new();
    let mut attribute_of_identity = Vec::new();
    for a in 0..groups {
        let sigma = r.gen_range(0.1..1.2);
        for _ in 0..r.gen_range(shape.identities.clone()) {
            let id = attribute_of_identity.len() as u32;
            attribute_of_identity.push(a as u32);
            let dir: Vec<f64> = (0..d).map(|_| gaussian(&mut r)).collect();
            for _ in 0..r.gen_range(shape.images.clone()) {
                embeddings.extend(dir.iter().map(|&u| (u + sigma * gaussian(&mut r)) as f32));
                identity_of.push(id);
            }
        }
    }
    let names = (0..groups).map(|a| format!("g{a}")).collect();
    EmbeddingDataset::new(d, embeddings, identity_of, attribute_of_identity, names).unwrap()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..u.len() {
        s += u[i] * v[i];
    }
    s
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    (dot(u, v) / (dot(u, u).sqrt() * dot(v, v).sqrt())).clamp(-1.0, 1.0)
}

// ---- curves ----

pub fn frr(scores: &[f64], t: f64) -> f64 {
    let mut c = 0;
    for &s in scores {
        if s <= t {
            c += 1;
        }
    }
    c as f64 / scores.len() as f64
}

pub fn far(scores: &[f64], t: f64) -> f64 {
    let mut c = 0;
    for &s in scores {
        if s > t {
            c += 1;
        }
    }
    c as f64 / scores.len() as f64
}

/// Smallest observed score whose FRR reaches `alpha`.
pub fn frr_inverse(scores: &[f64], alpha: f64) -> f64 {
    let mut best = f64::INFINITY;
    for &t in scores {
        if frr(scores, t) >= alpha && t < best {
            best = t;
        }
    }
    best
}

/// Smallest observed score whose FAR is at most `alpha`.
pub fn far_inverse(scores: &[f64], alpha: f64) -> f64 {
    let mut best = f64::INFINITY;
    for &t in scores {
        if far(scores, t) <= alpha && t < best {
            best = t;
        }
    }
    best
}

pub fn roc(genuine: &[f64], impostor: &[f64], alpha: f64) -> f64 {
    frr(genuine, far_inverse(impostor, alpha))
}

/// `max / geometric mean` over groups.
pub fn bias_ratio(rates: &[f64]) -> f64 {
    let max = rates.iter().cloned().fold(0.0, f64::max);
    let prod: f64 = rates.iter().product();
    max / prod.powf(1.0 / rates.len() as f64)
}

/// Largest `|c_a(t) - c_r(t)|` over every observed score of either sample,
/// as an exact fraction `(numerator, m_a * m_r)`. `upper` selects FAR-type
/// counting (`> t`), otherwise FRR-type (`<= t`).
pub fn sup_gap(a: &[f64], r: &[f64], upper: bool) -> (u128, u128) {
    let sorted = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (sa, sr) = (sorted(a), sorted(r));
    let count = |xs: &[f64], t: f64| {
        let le = xs.partition_point(|&s| s <= t);
        (if upper { xs.len() - le } else { le }) as u128
    };
    let (ma, mr) = (a.len() as u128, r.len() as u128);
    let mut worst = 0;
    for &t in a.iter().chain(r) {
        worst = u128::max(worst, (count(&sa, t) * mr).abs_diff(count(&sr, t) * ma));
    }
    (worst, ma * mr)
}

// ---- Fairness Module forward ----

/// `x/|x| + W2 relu(W1 x/|x| + b1) + b2`, read from the documented flat
/// layout.
pub fn module_forward(p: &ModuleParams, x: &[f64]) -> Vec<f64> {
    let d = p.d();
    let h = 2 * d;
    let v = p.values();
    let w1 = &v[0..h * d];
    let b1 = &v[h * d..h * d + h];
    let w2 = &v[h * d + h..h * d + h + d * h];
    let b2 = &v[h * d + h + d * h..h * d + h + d * h + d];
    let nx = dot(x, x).sqrt();
    let n: Vec<f64> = x.iter().map(|&xi| xi / nx).collect();
    let mut hidden = vec![0.0; h];
    for r in 0..h {
        let mut z = b1[r];
        for c in 0..d {
            z += w1[r * d + c] * n[c];
        }
        hidden[r] = if z > 0.0 { z } else { 0.0 };
    }
    let mut out = vec![0.0; d];
    for r in 0..d {
        let mut z = n[r] + b2[r];
        for c in 0..h {
            z += w2[r * h + c] * hidden[c];
        }
        out[r] = z;
    }
    out
}

pub fn module_centroid(p: &ModuleParams, k: usize) -> &[f64] {
    let d = p.d();
    let start = 2 * d * d + 2 * d + 2 * d * d + d + k * d;
    &p.values()[start..start + d]
}

// ---- Centroid Fairness loss ----

pub struct OraclePair {
    pub image: usize,
    pub identity: usize,
    pub genuine: bool,
    pub source: f64,
    pub target: f64,
    pub weight: f64,
}

/// Every same-attribute pseudo-pair with its target (quantile-matched onto
/// group `r`) and its unnormalized weight.
pub fn oracle_pairs(ds: &EmbeddingDataset, centroids: &[Vec<f64>], r: u32) -> Vec<OraclePair> {
    let attr_of_id = ds.attribute_of_identity();
    let mut pairs = Vec::new();
    for i in 0..ds.n() {
        let x: Vec<f64> = ds.row(i).iter().map(|&v| v as f64).collect();
        // score the unit vector: mathematically equal scores (both images of
        // a 2-image identity) then also round equal, so ties match exactly
        let nx = dot(&x, &x).sqrt();
        let x: Vec<f64> = x.iter().map(|&v| v / nx).collect();
        let a = attr_of_id[ds.identity_of()[i] as usize];
        for k in 0..ds.k() {
            if attr_of_id[k] != a {
                continue;
            }
            pairs.push(OraclePair {
                image: i,
                identity: k,
                genuine: ds.identity_of()[i] as usize == k,
                source: cosine(&x, &centroids[k]),
                target: 0.0,
                weight: 0.0,
            });
        }
    }
    let group_scores = |a: u32, genuine: bool, pairs: &[OraclePair]| -> Vec<f64> {
        pairs
            .iter()
            .filter(|p| p.genuine == genuine && attr_of_id[p.identity] == a)
            .map(|p| p.source)
            .collect()
    };
    let groups = ds.num_attributes() as u32;
    let gen: Vec<Vec<f64>> = (0..groups).map(|a| group_scores(a, true, &pairs)).collect();
    let imp: Vec<Vec<f64>> = (0..groups).map(|a| group_scores(a, false, &pairs)).collect();
    // (score, #{<= score}, #{> score}) for every reference score, ascending
    let with_counts = |scores: &[f64]| -> Vec<(f64, usize, usize)> {
        let mut out: Vec<(f64, usize, usize)> = scores
            .iter()
            .map(|&t| {
                let le = scores.iter().filter(|&&v| v <= t).count();
                (t, le, scores.len() - le)
            })
            .collect();
        out.sort_by(|x, y| x.0.total_cmp(&y.0));
        out
    };
    let gen_r = with_counts(&gen[r as usize]);
    let imp_r = with_counts(&imp[r as usize]);
    for p in pairs.iter_mut() {
        let a = attr_of_id[p.identity] as usize;
        if p.genuine {
            let g = &gen[a];
            let le = g.iter().filter(|&&v| v <= p.source).count();
            p.weight = 1.0 / le as f64;
            // smallest reference score with FRR_r(t) >= FRR_a(s), compared
            // as exact fractions
            let (ma, mr) = (g.len(), gen_r.len());
            p.target = gen_r.iter().find(|&&(_, c, _)| c * ma >= le * mr).unwrap().0;
        } else {
            let im = &imp[a];
            let ge = im.iter().filter(|&&v| v >= p.source).count();
            p.weight = 1.0 / ge as f64;
            let gt = im.iter().filter(|&&v| v > p.source).count();
            // smallest reference score with FAR_r(t) <= FAR_a(s)
            let (ma, mr) = (im.len(), imp_r.len());
            p.target = imp_r.iter().find(|&&(_, _, c)| c * ma <= gt * mr).unwrap().0;
        }
    }
    pairs
}

/// Plain per-identity mean of unit-normalized rows.
pub fn oracle_centroids(ds: &EmbeddingDataset) -> Vec<Vec<f64>> {
    let d = ds.d();
    let mut sums = vec![vec![0.0; d]; ds.k()];
    let mut counts = vec![0usize; ds.k()];
    for i in 0..ds.n() {
        let x: Vec<f64> = ds.row(i).iter().map(|&v| v as f64).collect();
        let nx = dot(&x, &x).sqrt();
        let k = ds.identity_of()[i] as usize;
        for c in 0..d {
            sums[k][c] += x[c] / nx;
        }
        counts[k] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect()
}

/// `sum w (s_theta - T)^2 / Z` over both kinds, as a literal double loop.
pub fn oracle_loss(ds: &EmbeddingDataset, pairs: &[OraclePair], p: &ModuleParams) -> f64 {
    let (mut z_gen, mut z_imp) = (0.0, 0.0);
    for q in pairs {
        if q.genuine {
            z_gen += q.weight;
        } else {
            z_imp += q.weight;
        }
    }
    let mut outputs = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        let x: Vec<f64> = ds.row(i).iter().map(|&v| v as f64).collect();
        outputs.push(module_forward(p, &x));
    }
    let (mut l_frr, mut l_far) = (0.0, 0.0);
    for q in pairs {
        let s = cosine(&outputs[q.image], module_centroid(p, q.identity));
        let term = q.weight * (s - q.target).powi(2);
        if q.genuine {
            l_frr += term;
        } else {
            l_far += term;
        }
    }
    l_far / z_imp + l_frr / z_gen
}

/// Random parameters at roughly unit scale, including perturbed centroids.
pub fn random_params(r: &mut ChaCha8Rng, d: usize, k: usize, scale: f64) -> ModuleParams {
    let len = ModuleParams::zeros(d, k).values().len();
    let values = (0..len).map(|_| scale * gaussian(r)).collect();
    ModuleParams::from_values(d, k, values).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = f64::max(dot(a, a).sqrt(), dot(b, b).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
