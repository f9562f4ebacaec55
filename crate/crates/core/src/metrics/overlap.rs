use crate::error::{Error, Result};
use crate::volume::Volume;

fn binary(m: &Volume) -> Vec<bool> {
    m.data().iter().map(|&v| v >= 0.5).collect()
}

/// Dice similarity coefficient `2|a ∩ b| / (|a| + |b|)` of masks binarized at 0.5.
pub fn dsc(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_same_grid(b, "dsc")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Err(Error::UndefinedMetric("dsc of two empty masks".into()));
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mask voxels with at least one 6-neighbour outside the mask or the grid.
pub fn surface_voxels(mask: &Volume) -> Vec<usize> {
    let inside = binary(mask);
    let s = mask.extents();
    let strides = [s[1] * s[2], s[2], 1];
    (0..inside.len())
        .filter(|&p| {
            if !inside[p] {
                return false;
            }
            let c = mask.coords(p);
            (0..3).any(|a| {
                (c[a] == 0 || !inside[p - strides[a]])
                    || (c[a] + 1 == s[a] || !inside[p + strides[a]])
            })
        })
        .collect()
}

/// Squared distance transform of one line with sample spacing `h`:
/// `out[q] = min_p f[p] + (h (q - p))^2`, skipping infinite `f[p]`.
fn edt_line(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = q as f64 * h;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let xp = p as f64 * h;
                    let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * h;
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - v[k] as f64 * h;
        *o = f[v[k]] + d * d;
    }
}

/// Exact Euclidean distance, in physical units, from every voxel to the
/// nearest voxel where `features` is true. Infinite when there is none.
pub fn distance_transform(features: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [extents[1] * extents[2], extents[2], 1];
    for a in 0..3 {
        let n = extents[a];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let others: Vec<usize> = (0..3).filter(|&b| b != a).collect();
        for u in 0..extents[others[0]] {
            for w in 0..extents[others[1]] {
                let start = u * strides[others[0]] + w * strides[others[1]];
                for (q, l) in line.iter_mut().enumerate() {
                    *l = d[start + q * strides[a]];
                }
                edt_line(&line, spacing[a], &mut out);
                for (q, o) in out.iter().enumerate() {
                    d[start + q * strides[a]] = *o;
                }
            }
        }
    }
    d.iter().map(|v| v.sqrt()).collect()
}

/// Nearest-rank percentile (`q` in `[0, 100]`) of unsorted values.
pub(crate) fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// 95th percentile of the pooled distances from each surface voxel of one
/// mask to the nearest surface voxel of the other, in physical units.
pub fn hd95(a: &Volume, b: &Volume) -> Result<f64> {
    a.check_same_grid(b, "hd95")?;
    let (sa, sb) = (surface_voxels(a), surface_voxels(b));
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedMetric("hd95 with an empty mask".into()));
    }
    let to_dt = |surf: &[usize]| {
        let mut f = vec![false; a.len()];
        for &p in surf {
            f[p] = true;
        }
        distance_transform(&f, a.extents(), a.spacing())
    };
    let (da, db) = (to_dt(&sa), to_dt(&sb));
    let mut pooled: Vec<f64> = sa
        .iter()
        .map(|&p| db[p])
        .chain(sb.iter().map(|&p| da[p]))
        .collect();
    Ok(percentile(&mut pooled, 95.0))
}
