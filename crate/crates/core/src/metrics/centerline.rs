use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::overlap::distance_transform;
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// 26-connected voxel graph of a binary mask with physical edge lengths.
struct Graph {
    extents: [usize; 3],
    spacing: [f64; 3],
    inside: Vec<bool>,
}

impl Graph {
    fn neighbours(&self, p: usize, mut f: impl FnMut(usize, f64)) {
        let s = self.extents;
        let c = [p / (s[1] * s[2]), (p / s[2]) % s[1], p % s[2]];
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dk in -1i64..=1 {
                    if (di, dj, dk) == (0, 0, 0) {
                        continue;
                    }
                    let n = [c[0] as i64 + di, c[1] as i64 + dj, c[2] as i64 + dk];
                    if (0..3).any(|a| n[a] < 0 || n[a] >= s[a] as i64) {
                        continue;
                    }
                    let q = (n[0] as usize * s[1] + n[1] as usize) * s[2] + n[2] as usize;
                    if self.inside[q] {
                        let len = [di, dj, dk]
                            .iter()
                            .zip(self.spacing)
                            .map(|(&d, h)| (d as f64 * h).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        f(q, len);
                    }
                }
            }
        }
    }

    /// Shortest paths from `src` with edge cost `cost(len, to)`.
    fn dijkstra(&self, src: usize, cost: impl Fn(f64, usize) -> f64) -> (Vec<f64>, Vec<usize>) {
        let mut dist = vec![f64::INFINITY; self.inside.len()];
        let mut prev = vec![usize::MAX; self.inside.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(Entry(0.0, src));
        while let Some(Entry(d, p)) = heap.pop() {
            if d > dist[p] {
                continue;
            }
            self.neighbours(p, |q, len| {
                let nd = d + cost(len, q);
                if nd < dist[q] {
                    dist[q] = nd;
                    prev[q] = p;
                    heap.push(Entry(nd, q));
                }
            });
        }
        (dist, prev)
    }
}

fn farthest(dist: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (p, &d) in dist.iter().enumerate() {
        if d.is_finite() && d > best.0 {
            best = (d, p);
        }
    }
    best.1
}

/// Centerline of a tubular mask as physical points.
///
/// The two ends are a farthest-point pair under geodesic distance, found by
/// two sweeps from the deepest voxel; the path between them minimizes edge
/// length divided by the squared depth of the entered voxel, so it follows
/// the distance-transform ridge. Only the connected component holding the
/// deepest voxel is traced.
pub fn centerline(mask: &Volume) -> Result<Vec<[f64; 3]>> {
    let inside: Vec<bool> = mask.data().iter().map(|&v| v >= 0.5).collect();
    let outside: Vec<bool> = inside.iter().map(|&b| !b).collect();
    let depth = distance_transform(&outside, mask.extents(), mask.spacing());
    let seed = (0..inside.len())
        .filter(|&p| inside[p])
        .max_by(|&a, &b| depth[a].total_cmp(&depth[b]).then(b.cmp(&a)))
        .ok_or_else(|| Error::EmptyMask("centerline of an empty mask".into()))?;
    let g = Graph {
        extents: mask.extents(),
        spacing: mask.spacing(),
        inside,
    };
    let (d0, _) = g.dijkstra(seed, |len, _| len);
    let e1 = farthest(&d0);
    let (d1, _) = g.dijkstra(e1, |len, _| len);
    let e2 = farthest(&d1);
    let ridge = |len: f64, q: usize| {
        let r = if depth[q].is_finite() { depth[q] } else { 1e6 };
        len / (r * r + 1e-9)
    };
    let (_, prev) = g.dijkstra(e1, ridge);
    let mut path = vec![e2];
    let mut p = e2;
    while p != e1 {
        p = prev[p];
        path.push(p);
    }
    let h = mask.spacing();
    let points: Vec<[f64; 3]> = path
        .iter()
        .rev()
        .map(|&p| {
            let c = mask.coords(p);
            std::array::from_fn(|a| c[a] as f64 * h[a])
        })
        .collect();
    if points.len() < 3 {
        return Err(Error::UndefinedMetric(format!(
            "centerline has {} points, need at least 3",
            points.len()
        )));
    }
    Ok(points)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of closest-point distances from each point of `a` to `b`.
pub fn directed_median_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mut d: Vec<f64> = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    median(&mut d)
}

/// Median closest-point distance between the centerlines of two tubular
/// masks: mean of the two directed medians, physical units.
pub fn mcd(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_same_grid(b, "mcd")?;
    let (ca, cb) = (centerline(a)?, centerline(b)?);
    Ok(0.5 * (directed_median_distance(&ca, &cb) + directed_median_distance(&cb, &ca)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tube(s: [usize; 3], axis_at: impl Fn(f64) -> [f64; 2], r: f64) -> Volume {
        Volume::from_fn(s, [1.0; 3], |i, j, k| {
            let c = axis_at(k as f64);
            (((i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2)).sqrt() <= r) as u8 as f32
        })
    }

    #[test]
    fn straight_tube_centerline_lies_on_axis() {
        let t = tube([16, 16, 24], |_| [7.0, 8.0], 2.0);
        let c = centerline(&t).unwrap();
        assert!(c.len() >= 20);
        let off: Vec<f64> = c
            .iter()
            .map(|p| ((p[0] - 7.0).powi(2) + (p[1] - 8.0).powi(2)).sqrt())
            .collect();
        let mut o = off.clone();
        assert!(median(&mut o) <= 0.5, "{off:?}");
    }

    #[test]
    fn identical_tubes_have_zero_distance() {
        let t = tube([16, 16, 24], |z| [7.0 + 0.1 * z, 8.0], 2.0);
        assert_eq!(mcd(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn parallel_tubes_four_apart() {
        let a = tube([20, 16, 24], |_| [6.0, 8.0], 2.0);
        let b = tube([20, 16, 24], |_| [10.0, 8.0], 2.0);
        let d = mcd(&a, &b).unwrap();
        assert!((d - 4.0).abs() <= 0.5, "{d}");
    }

    #[test]
    fn tiny_mask_is_rejected() {
        let m = Volume::from_fn([5, 5, 5], [1.0; 3], |i, j, k| {
            ((i, j, k) == (2, 2, 2)) as u8 as f32
        });
        assert!(matches!(mcd(&m, &m), Err(Error::UndefinedMetric(_))));
        let e = Volume::zeros([5, 5, 5], [1.0; 3]);
        assert!(matches!(centerline(&e), Err(Error::EmptyMask(_))));
    }
}
