use crate::grid::Grid;

use super::{check_shapes, MetricsError, Result};

/// Mask voxels with at least one of the 6 face neighbours outside the mask; the
/// outside of the grid counts as outside.
pub fn surface_voxels(mask: &Grid<bool>) -> Vec<[usize; 3]> {
    let dims = mask.dims();
    let mut out = Vec::new();
    for (idx, &on) in mask.as_slice().iter().enumerate() {
        if !on {
            continue;
        }
        let c = mask.coords(idx);
        let border = (0..3).any(|a| {
            if c[a] == 0 || c[a] + 1 == dims[a] {
                return true;
            }
            let (mut lo, mut hi) = (c, c);
            lo[a] -= 1;
            hi[a] += 1;
            !*mask.get(lo) || !*mask.get(hi)
        });
        if border {
            out.push(c);
        }
    }
    out
}

/// Squared distance transform along one line, lower envelope of parabolas. `f` holds
/// squared distances (infinite where unknown); `w` is the squared voxel spacing.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let key = |q: usize| f[q] + w * (q * q) as f64;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (key(q) - key(p)) / (2.0 * w * (q - p) as f64);
                    if s <= *z.last().expect("paired with v") {
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
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w * d * d + f[v[k]];
    }
}

/// Exact Euclidean distance (in mm) from every voxel of a grid of `dims` to the nearest
/// of `points`; infinite everywhere if `points` is empty.
pub fn distance_to_set(dims: [usize; 3], points: &[[usize; 3]], spacing: [f64; 3]) -> Grid<f64> {
    let mut g = Grid::filled(dims, f64::INFINITY);
    for &p in points {
        *g.get_mut(p) = 0.0;
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let w = spacing[axis] * spacing[axis];
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        let data = g.as_mut_slice();
        for start in 0..data.len() {
            // first element of each line along `axis`
            if (start / stride) % n != 0 {
                continue;
            }
            for (t, l) in line.iter_mut().enumerate() {
                *l = data[start + t * stride];
            }
            edt_line(&line, w, &mut res, &mut v, &mut z);
            for (t, r) in res.iter().enumerate() {
                data[start + t * stride] = *r;
            }
        }
    }
    g.map(|d| d.sqrt())
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(MetricsError::InvalidSpacing(spacing))
    }
}

/// Average symmetric surface distance in mm; `None` when either surface is empty.
pub fn assd(a: &Grid<bool>, b: &Grid<bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_shapes(a, b)?;
    check_spacing(spacing)?;
    let (sa, sb) = (surface_voxels(a), surface_voxels(b));
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    // the transforms only need a window holding both surfaces
    let mut lo = sa[0];
    let mut hi = sa[0];
    for p in sa.iter().chain(&sb) {
        for ax in 0..3 {
            lo[ax] = lo[ax].min(p[ax]);
            hi[ax] = hi[ax].max(p[ax]);
        }
    }
    let dims = [0, 1, 2].map(|ax| hi[ax] - lo[ax] + 1);
    let local = |pts: &[[usize; 3]]| pts.iter().map(|p| [0, 1, 2].map(|ax| p[ax] - lo[ax])).collect::<Vec<_>>();
    let (la, lb) = (local(&sa), local(&sb));
    let to_b = distance_to_set(dims, &lb, spacing);
    let to_a = distance_to_set(dims, &la, spacing);
    let total: f64 = la.iter().map(|&p| *to_b.get(p)).sum::<f64>() + lb.iter().map(|&p| *to_a.get(p)).sum::<f64>();
    Ok(Some(total / (la.len() + lb.len()) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(a: &Grid<bool>, b: &Grid<bool>, s: [f64; 3]) -> Option<f64> {
        let (sa, sb) = (surface_voxels(a), surface_voxels(b));
        if sa.is_empty() || sb.is_empty() {
            return None;
        }
        let d = |p: [usize; 3], q: [usize; 3]| {
            (0..3).map(|ax| ((p[ax] as f64 - q[ax] as f64) * s[ax]).powi(2)).sum::<f64>().sqrt()
        };
        let near = |p, set: &[[usize; 3]]| set.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min);
        let total: f64 = sa.iter().map(|&p| near(p, &sb)).sum::<f64>() + sb.iter().map(|&p| near(p, &sa)).sum::<f64>();
        Some(total / (sa.len() + sb.len()) as f64)
    }

    #[test]
    fn surface_examples() {
        let mut one = Grid::filled([5, 5, 5], false);
        *one.get_mut([2, 2, 2]) = true;
        assert_eq!(surface_voxels(&one), vec![[2, 2, 2]]);
        let cube = Grid::from_fn([5, 5, 5], |c| c.iter().all(|&x| (1..4).contains(&x)));
        let s = surface_voxels(&cube);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));
        assert!(surface_voxels(&Grid::filled([3, 3, 3], false)).is_empty());
        // grid edge counts as outside
        assert_eq!(surface_voxels(&Grid::filled([3, 3, 3], true)).len(), 26);
    }

    #[test]
    fn point_pair_and_identity() {
        let mut a = Grid::filled([1, 1, 8], false);
        let mut b = a.clone();
        *a.get_mut([0, 0, 1]) = true;
        *b.get_mut([0, 0, 4]) = true;
        assert_eq!(assd(&a, &b, [1.0; 3]).unwrap(), Some(3.0));
        assert_eq!(assd(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(assd(&a, &b, [1.0, 1.0, 0.5]).unwrap(), Some(1.5));
        assert_eq!(assd(&a, &Grid::filled([1, 1, 8], false), [1.0; 3]).unwrap(), None);
        assert!(assd(&a, &b, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let p = r.gen_range(0.05..0.6);
            let a = Grid::from_fn([10, 9, 8], |_| r.gen_bool(p));
            let b = Grid::from_fn([10, 9, 8], |_| r.gen_bool(0.1));
            let s = if trial % 2 == 0 { [1.0; 3] } else { [0.8, 1.3, 2.1] };
            let (fast, slow) = (assd(&a, &b, s).unwrap(), brute(&a, &b, s));
            match (fast, slow) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9, "{x} vs {y}"),
                (x, y) => assert_eq!(x, y),
            }
            assert_eq!(fast, assd(&b, &a, s).unwrap());
        }
    }

    #[test]
    fn distance_transform_matches_direct_minimum() {
        let pts = [[0, 0, 0], [3, 4, 1], [5, 1, 6]];
        let s = [1.0, 2.0, 0.5];
        let g = distance_to_set([6, 5, 7], &pts, s);
        for idx in 0..g.len() {
            let c = g.coords(idx);
            let want = pts
                .iter()
                .map(|p| (0..3).map(|a| ((c[a] as f64 - p[a] as f64) * s[a]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!((g.as_slice()[idx] - want).abs() < 1e-12);
        }
    }
}
