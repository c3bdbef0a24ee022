use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::{Latent, LatentCodebook, LATENT_DIM};

pub const KMEANS_MAX_ITERS: usize = 100;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// k-means++ seeding followed by Lloyd iterations until the assignment
/// stops changing or [`KMEANS_MAX_ITERS`] passes. Points are the codebook
/// latents in id order. An emptied cluster keeps its previous centre.
pub fn kmeans_latents(
    codebook: &LatentCodebook,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Latent>> {
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    if codebook.len() < k {
        return Err(Error::Argument(format!(
            "k = {k} exceeds the {} latents in the codebook",
            codebook.len()
        )));
    }
    let points: Vec<&[f64]> = codebook.entries.values().map(Latent::as_slice).collect();

    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = d2.iter().rposition(|&d| d > 0.0).expect("positive mass");
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            // every point coincides with a centre already
            centers.len() % points.len()
        };
        centers.push(points[pick].to_vec());
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(dist2(p, &centers[centers.len() - 1]));
        }
    }

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![vec![0.0; LATENT_DIM]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    centers.into_iter().map(Latent::new).collect()
}
