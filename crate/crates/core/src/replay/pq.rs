use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ReplayError;
use crate::rng::{stream, stream_rng};

type Result<T> = std::result::Result<T, ReplayError>;

/// `m` subspaces of width `dim / m`, each with `k` centroids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqCodebook {
    m: usize,
    k: usize,
    dim: usize,
    /// `m x k x (dim / m)`, row-major.
    centroids: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PqTrainReport {
    /// Total within-cluster SSE after each iteration's assignment step.
    pub sse: Vec<f64>,
    /// SSE of the returned codebook on the training vectors.
    pub final_sse: f64,
    /// Per-vector squared quantization error under the returned codebook.
    pub point_errors: Vec<f64>,
}

impl PqCodebook {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    pub fn centroid(&self, subspace: usize, j: usize) -> &[f32] {
        let d = self.sub_dim();
        let at = (subspace * self.k + j) * d;
        &self.centroids[at..at + d]
    }

    pub fn from_centroids(m: usize, k: usize, dim: usize, centroids: Vec<f32>) -> Result<Self> {
        check_shape(dim, m, k)?;
        if centroids.len() != dim * k {
            return Err(ReplayError::DimMismatch {
                expected: dim * k,
                actual: centroids.len(),
            });
        }
        Ok(PqCodebook {
            m,
            k,
            dim,
            centroids,
        })
    }
}

fn check_shape(dim: usize, m: usize, k: usize) -> Result<()> {
    if m == 0 {
        return Err(ReplayError::InvalidM);
    }
    if k == 0 || k > 256 {
        return Err(ReplayError::InvalidK(k));
    }
    if !dim.is_multiple_of(m) {
        return Err(ReplayError::DimNotDivisible { dim, m });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let t = x[l] - y[l];
            acc[l] += t * t;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Index of the nearest centroid (lowest index on ties) and its distance.
fn nearest(x: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(x, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn kmeans_pp(points: &[f64], n: usize, d: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(&points[i * d..(i + 1) * d], &centroids[..d]))
        .collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            rng.random_range(0..n)
        };
        let c = &points[pick * d..(pick + 1) * d];
        centroids.extend_from_slice(c);
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(&points[i * d..(i + 1) * d], c));
        }
    }
    centroids
}

/// One subspace of Lloyd iterations; returns the centroids and the SSE after
/// each assignment step.
fn lloyd(
    points: &[f64],
    n: usize,
    d: usize,
    k: usize,
    iterations: usize,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let mut centroids = kmeans_pp(points, n, d, k, rng);
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        for i in 0..n {
            (assign[i], dist[i]) = nearest(&points[i * d..(i + 1) * d], &centroids, d);
        }
        history.push(dist.iter().sum());

        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            let s = &mut sums[assign[i] * d..(assign[i] + 1) * d];
            s.iter_mut()
                .zip(&points[i * d..(i + 1) * d])
                .for_each(|(a, p)| *a += p);
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Reseed on the worst-served point, which then costs nothing.
                let far = (0..n).fold(0, |b, i| if dist[i] > dist[b] { i } else { b });
                centroids[j * d..(j + 1) * d].copy_from_slice(&points[far * d..(far + 1) * d]);
                dist[far] = 0.0;
            } else {
                let inv = counts[j] as f64;
                for (c, s) in centroids[j * d..(j + 1) * d]
                    .iter_mut()
                    .zip(&sums[j * d..(j + 1) * d])
                {
                    *c = s / inv;
                }
            }
        }
    }
    (centroids, history)
}

/// Trains a codebook on `n` row-major vectors of width `dim` with per-subspace
/// k-means (k-means++ seeding, fixed iteration count). Subspace `s` draws its
/// randomness from stream `(seed, codebook, s)`.
pub fn pq_train(
    features: &[f32],
    dim: usize,
    m: usize,
    k: usize,
    iterations: usize,
    seed: u64,
) -> Result<(PqCodebook, PqTrainReport)> {
    check_shape(dim, m, k)?;
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(ReplayError::DimMismatch {
            expected: dim,
            actual: features.len(),
        });
    }
    let n = features.len() / dim;
    if n < k {
        return Err(ReplayError::TooFewSamples { n, k });
    }
    let d = dim / m;
    let mut centroids = vec![0.0f32; dim * k];
    let mut sse = vec![0.0f64; iterations];
    let mut sub = vec![0.0f64; n * d];
    for s in 0..m {
        for i in 0..n {
            let row = &features[i * dim + s * d..i * dim + (s + 1) * d];
            sub[i * d..(i + 1) * d]
                .iter_mut()
                .zip(row)
                .for_each(|(a, &v)| *a = v as f64);
        }
        let mut rng = stream_rng(seed, stream::CODEBOOK, s as u64);
        let (c, history) = lloyd(&sub, n, d, k, iterations, &mut rng);
        for (t, h) in history.into_iter().enumerate() {
            sse[t] += h;
        }
        centroids[s * k * d..(s + 1) * k * d]
            .iter_mut()
            .zip(&c)
            .for_each(|(a, &v)| *a = v as f32);
    }
    let book = PqCodebook {
        m,
        k,
        dim,
        centroids,
    };
    let point_errors: Vec<f64> = features
        .chunks_exact(dim)
        .map(|x| quantization_error(&book, x))
        .collect();
    let final_sse = point_errors.iter().sum();
    Ok((
        book,
        PqTrainReport {
            sse,
            final_sse,
            point_errors,
        },
    ))
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn encode_with_errors(book: &PqCodebook, x: &[f32]) -> (Vec<u8>, f64) {
    let d = book.sub_dim();
    let mut codes = Vec::with_capacity(book.m);
    let mut total = 0.0;
    for s in 0..book.m {
        let xs = widen(&x[s * d..(s + 1) * d]);
        let cs = widen(&book.centroids[s * book.k * d..(s + 1) * book.k * d]);
        let (j, dist) = nearest(&xs, &cs, d);
        codes.push(j as u8);
        total += dist;
    }
    (codes, total)
}

/// Squared distance between `x` and its reconstruction.
pub(crate) fn quantization_error(book: &PqCodebook, x: &[f32]) -> f64 {
    encode_with_errors(book, x).1
}

/// Nearest centroid per subspace (squared Euclidean, lowest index on ties).
pub fn pq_encode(book: &PqCodebook, x: &[f32]) -> Result<Vec<u8>> {
    if x.len() != book.dim {
        return Err(ReplayError::DimMismatch {
            expected: book.dim,
            actual: x.len(),
        });
    }
    Ok(encode_with_errors(book, x).0)
}

pub fn pq_decode(book: &PqCodebook, codes: &[u8]) -> Result<Vec<f32>> {
    if codes.len() != book.m {
        return Err(ReplayError::DimMismatch {
            expected: book.m,
            actual: codes.len(),
        });
    }
    let mut out = Vec::with_capacity(book.dim);
    for (s, &c) in codes.iter().enumerate() {
        if c as usize >= book.k {
            return Err(ReplayError::CodeOutOfRange {
                subspace: s,
                code: c,
                k: book.k,
            });
        }
        out.extend_from_slice(book.centroid(s, c as usize));
    }
    Ok(out)
}
