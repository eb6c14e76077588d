//! Brute-force reference implementations.

use rand::Rng;
use scribbleseg::Grid;

use super::rng;

pub fn brute_dice(a: &Grid<bool>, b: &Grid<bool>) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let (x, y) = (a.value(r, c), b.value(r, c));
            na += x as usize;
            nb += y as usize;
            inter += (x && y) as usize;
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Boundary pixels: in the mask and either touching the image border or
/// missing one of the four axis neighbors.
pub fn brute_surface(m: &Grid<bool>) -> Vec<(usize, usize)> {
    let (rows, cols) = m.shape();
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols && m.value(r as usize, c as usize);
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !m.value(r, c) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let border = r == 0 || c == 0 || r + 1 == rows || c + 1 == cols;
            let open = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !inside(ri + dr, ci + dc));
            if border || open {
                out.push((r, c));
            }
        }
    }
    out
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let dr = (r as f64 - r2 as f64) * spacing.0;
                    let dc = (c as f64 - c2 as f64) * spacing.1;
                    (dr * dr + dc * dc).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// 95th percentile by linear interpolation between closest ranks.
fn p95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = 0.95 * (v.len() - 1) as f64;
    let i = rank as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (rank - i as f64)) + v[i + 1] * (rank - i as f64)
}

/// All-pairs HD95; `None` when exactly one mask is empty.
pub fn brute_hd95(a: &Grid<bool>, b: &Grid<bool>, spacing: (f64, f64)) -> Option<f64> {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => Some(0.0),
        (false, false) => Some(p95(directed(&sa, &sb, spacing)).max(p95(directed(&sb, &sa, spacing)))),
        _ => None,
    }
}

/// A random mask: a union of a few rectangles and disks, or sparse noise.
pub fn random_mask(r: &mut impl Rng, rows: usize, cols: usize) -> Grid<bool> {
    let mut m = Grid::filled(rows, cols, false);
    match r.random_range(0..4) {
        0 => {
            let p = r.random_range(0.0..0.3);
            for v in m.as_mut_slice() {
                *v = r.random_bool(p);
            }
        }
        kind => {
            for _ in 0..r.random_range(0..=3) {
                let (cr, cc) = (r.random_range(0..rows) as f64, r.random_range(0..cols) as f64);
                let (hr, hc) = (r.random_range(0.5..rows as f64 / 2.0 + 1.0), r.random_range(0.5..cols as f64 / 2.0 + 1.0));
                for y in 0..rows {
                    for x in 0..cols {
                        let (dy, dx) = ((y as f64 - cr) / hr, (x as f64 - cc) / hc);
                        let hit = if kind == 1 { dy.abs() <= 1.0 && dx.abs() <= 1.0 } else { dy * dy + dx * dx <= 1.0 };
                        if hit {
                            m.set(y, x, true);
                        }
                    }
                }
            }
        }
    }
    m
}

/// Prediction, reference and spacing.
pub type MaskPair = (Grid<bool>, Grid<bool>, (f64, f64));

/// `count` random mask pairs with shapes up to `max × max` and random
/// anisotropic spacing.
pub fn random_mask_pairs(count: usize, max: usize, seed: u64) -> Vec<MaskPair> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let (rows, cols) = (r.random_range(1..=max), r.random_range(1..=max));
            let spacing = (r.random_range(0.3..3.0), r.random_range(0.3..3.0));
            (random_mask(&mut r, rows, cols), random_mask(&mut r, rows, cols), spacing)
        })
        .collect()
}
