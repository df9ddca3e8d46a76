//! Seeded k-means over pixel coordinates.
//!
//! Lloyd iterations from greedy k-means++ seeds, polished with Hartigan single-point
//! moves, repeated over several restarts; the lowest-SSE partition wins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EscError, Result};

type Point = [f64; 2];

fn dist2(a: &Point, b: &Point) -> f64 {
    let dr = a[0] - b[0];
    let dc = a[1] - b[1];
    dr * dr + dc * dc
}

/// Sum of squared distances of points to their cluster means.
pub fn sse(points: &[Point], labels: &[usize], k: usize) -> f64 {
    let cents = centroids(points, labels, k);
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| dist2(p, &cents[l]))
        .sum()
}

fn centroids(points: &[Point], labels: &[usize], k: usize) -> Vec<Point> {
    let mut sum = vec![[0.0; 2]; k];
    let mut count = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sum[l][0] += p[0];
        sum[l][1] += p[1];
        count[l] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &n)| {
            if n == 0 {
                [f64::NAN; 2]
            } else {
                [s[0] / n as f64, s[1] / n as f64]
            }
        })
        .collect()
}

fn nearest(p: &Point, cents: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in cents.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Greedy k-means++: each new centre is the best of a few D²-weighted draws.
fn kmeans_pp(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut cents = Vec::with_capacity(k);
    cents.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &cents[0])).collect();
    while cents.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..trials {
            let idx = if total <= 0.0 {
                0
            } else {
                let mut target = rng.gen::<f64>() * total;
                let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
                for (i, &d) in d2.iter().enumerate() {
                    if d <= 0.0 {
                        continue;
                    }
                    if target < d {
                        chosen = i;
                        break;
                    }
                    target -= d;
                }
                chosen
            };
            let c = points[idx];
            let pot: f64 = d2.iter().zip(points).map(|(d, p)| d.min(dist2(p, &c))).sum();
            if best.map_or(true, |(b, _)| pot < b) {
                best = Some((pot, idx));
            }
        }
        let c = points[best.unwrap().1];
        cents.push(c);
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(dist2(p, &c));
        }
    }
    cents
}

fn lloyd(points: &[Point], mut cents: Vec<Point>, max_iter: usize) -> Vec<usize> {
    let k = cents.len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &cents)).collect();
    for _ in 0..max_iter {
        cents = centroids(points, &labels, k);
        // re-seed empty clusters at the point farthest from its centre
        for j in 0..k {
            if cents[j][0].is_nan() {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = dist2(&points[a], &cents[labels[a]]);
                        let db = dist2(&points[b], &cents[labels[b]]);
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                cents[j] = points[far];
                labels[far] = j;
                cents = centroids(points, &labels, k);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &cents)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Hartigan moves: relocate single points while that strictly lowers SSE.
fn hartigan(points: &[Point], labels: &mut [usize], k: usize) {
    let mut count = vec![0usize; k];
    let mut sum = vec![[0.0f64; 2]; k];
    for (p, &l) in points.iter().zip(labels.iter()) {
        count[l] += 1;
        sum[l][0] += p[0];
        sum[l][1] += p[1];
    }
    let mean = |s: &[f64; 2], n: usize| [s[0] / n as f64, s[1] / n as f64];
    let mut improved = true;
    let mut guard = 0;
    while improved && guard < 100 {
        improved = false;
        guard += 1;
        for i in 0..points.len() {
            let a = labels[i];
            if count[a] <= 1 {
                continue;
            }
            let na = count[a] as f64;
            let remove = na / (na - 1.0) * dist2(&points[i], &mean(&sum[a], count[a]));
            let mut best = a;
            let mut best_gain = 1e-12;
            for b in 0..k {
                if b == a || count[b] == 0 {
                    continue;
                }
                let nb = count[b] as f64;
                let add = nb / (nb + 1.0) * dist2(&points[i], &mean(&sum[b], count[b]));
                let gain = remove - add;
                if gain > best_gain {
                    best_gain = gain;
                    best = b;
                }
            }
            if best != a {
                let p = points[i];
                count[a] -= 1;
                sum[a][0] -= p[0];
                sum[a][1] -= p[1];
                count[best] += 1;
                sum[best][0] += p[0];
                sum[best][1] += p[1];
                labels[i] = best;
                improved = true;
            }
        }
    }
}

/// Relabels clusters in order of first appearance.
fn canonical(labels: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect()
}

/// Partitions points into `k` clusters; returns labels in first-appearance order.
pub fn kmeans(
    points: &[Point],
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(EscError::Invalid("k-means on an empty point set".into()));
    }
    if k == 0 || k > points.len() {
        return Err(EscError::Invalid(format!(
            "k-means with k = {k} over {} points",
            points.len()
        )));
    }
    if k == points.len() {
        return Ok((0..k).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let init = kmeans_pp(points, k, &mut rng);
        let mut labels = lloyd(points, init, max_iter);
        hartigan(points, &mut labels, k);
        let labels = canonical(&labels, k);
        let score = sse(points, &labels, k);
        let better = match &best {
            None => true,
            Some((b, _)) => score < *b - 1e-12,
        };
        if better {
            best = Some((score, labels));
        }
    }
    Ok(best.unwrap().1)
}

/// Clusters the foreground of a binary H×W grid into `min(max_regions, #fg)`
/// regions by pixel location. Background is labelled -1.
pub fn cluster_regions(
    binary: &[bool],
    height: usize,
    width: usize,
    max_regions: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<Vec<i32>> {
    if binary.len() != height * width {
        return Err(EscError::Shape(format!(
            "binary map holds {} entries, expected {height}x{width}",
            binary.len()
        )));
    }
    let fg: Vec<usize> = (0..binary.len()).filter(|&i| binary[i]).collect();
    if fg.is_empty() {
        return Err(EscError::Invalid(
            "cannot cluster an empty foreground".into(),
        ));
    }
    let points: Vec<Point> = fg
        .iter()
        .map(|&i| [(i / width) as f64, (i % width) as f64])
        .collect();
    let k = max_regions.min(points.len());
    let labels = kmeans(&points, k, seed, restarts, max_iter)?;
    let mut out = vec![-1i32; binary.len()];
    for (&i, &l) in fg.iter().zip(&labels) {
        out[i] = l as i32;
    }
    Ok(out)
}
