//! Artificial scribbles: skeletons of the dense classes, and endpoint
//! pruning to shorten existing scribbles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ScribbleLabel, UNLABELED};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Fraction of background pixels kept as background scribble.
pub const BACKGROUND_COVERAGE: f64 = 0.005;

const NEIGHBORS8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Zhang–Suen thinning of a binary mask. Pixels outside the grid count as
/// off. The result is a subset of the input with medial curves one or two
/// pixels wide.
pub fn thin(mask: &Grid<bool>) -> Grid<bool> {
    let (rows, cols) = mask.shape();
    let mut img = mask.clone();
    let on = |g: &Grid<bool>, r: isize, c: isize| -> bool { g.at(r, c).copied().unwrap_or(false) };
    let mut to_clear = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            to_clear.clear();
            for r in 0..rows {
                for c in 0..cols {
                    if !img.value(r, c) {
                        continue;
                    }
                    let (ri, ci) = (r as isize, c as isize);
                    // P2..P9 clockwise from north.
                    let p = [
                        on(&img, ri - 1, ci),
                        on(&img, ri - 1, ci + 1),
                        on(&img, ri, ci + 1),
                        on(&img, ri + 1, ci + 1),
                        on(&img, ri + 1, ci),
                        on(&img, ri + 1, ci - 1),
                        on(&img, ri, ci - 1),
                        on(&img, ri - 1, ci - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        to_clear.push((r, c));
                    }
                }
            }
            for &(r, c) in &to_clear {
                img.set(r, c, false);
            }
            changed |= !to_clear.is_empty();
        }
        if !changed {
            return img;
        }
    }
}

/// Skeleton of each connected component. Components that thinning erases
/// entirely keep their innermost pixel (largest chessboard distance to
/// the outside).
fn skeleton_with_fallback(mask: &Grid<bool>) -> Grid<bool> {
    let mut skel = thin(mask);
    let (rows, cols) = mask.shape();
    let mut comp = Grid::filled(rows, cols, usize::MAX);
    let depth = chessboard_depth(mask);
    let mut stack = Vec::new();
    let mut next = 0;
    for r0 in 0..rows {
        for c0 in 0..cols {
            if !mask.value(r0, c0) || comp.value(r0, c0) != usize::MAX {
                continue;
            }
            let mut has_skel = false;
            let mut best = (0u32, r0, c0);
            comp.set(r0, c0, next);
            stack.push((r0, c0));
            while let Some((r, c)) = stack.pop() {
                has_skel |= skel.value(r, c);
                let d = depth.value(r, c);
                if d > best.0 {
                    best = (d, r, c);
                }
                for (dr, dc) in NEIGHBORS8 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if mask.at(nr, nc) == Some(&true) && comp.value(nr as usize, nc as usize) == usize::MAX {
                        comp.set(nr as usize, nc as usize, next);
                        stack.push((nr as usize, nc as usize));
                    }
                }
            }
            if !has_skel {
                skel.set(best.1, best.2, true);
            }
            next += 1;
        }
    }
    skel
}

/// Chessboard distance from each on-pixel to the nearest off pixel (the
/// grid border counts as off).
fn chessboard_depth(mask: &Grid<bool>) -> Grid<u32> {
    let (rows, cols) = mask.shape();
    let inf = u32::MAX / 2;
    let mut d = mask.map(|&v| if v { inf } else { 0 });
    let get = |d: &Grid<u32>, r: isize, c: isize| d.at(r, c).copied().unwrap_or(0);
    for r in 0..rows {
        for c in 0..cols {
            if d.value(r, c) == 0 {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let m = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
                .iter()
                .map(|(dr, dc)| get(&d, ri + dr, ci + dc))
                .min()
                .unwrap();
            d.set(r, c, (m + 1).min(d.value(r, c)));
        }
    }
    for r in (0..rows).rev() {
        for c in (0..cols).rev() {
            if d.value(r, c) == 0 {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let m = [(1, 1), (1, 0), (1, -1), (0, 1)]
                .iter()
                .map(|(dr, dc)| get(&d, ri + dr, ci + dc))
                .min()
                .unwrap();
            d.set(r, c, (m + 1).min(d.value(r, c)));
        }
    }
    d
}

/// Scribbles from a dense mask: the skeleton of every class region. The
/// background skeleton is then shortened by endpoint pruning until it
/// covers about [`BACKGROUND_COVERAGE`] of the background pixels.
pub fn synthesize_scribbles(gt_mask: &Grid<u8>, num_classes: usize, seed: u64) -> Result<ScribbleLabel> {
    synthesize_scribbles_with(gt_mask, num_classes, seed, BACKGROUND_COVERAGE)
}

/// [`synthesize_scribbles`] with an explicit background coverage fraction.
pub fn synthesize_scribbles_with(gt_mask: &Grid<u8>, num_classes: usize, seed: u64, background_coverage: f64) -> Result<ScribbleLabel> {
    if !(background_coverage > 0.0 && background_coverage <= 1.0) {
        return Err(Error::invalid(format!("background coverage {background_coverage} outside (0, 1]")));
    }
    if let Some(&bad) = gt_mask.as_slice().iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::invalid(format!("mask value {bad} out of range for {num_classes} classes")));
    }
    let (rows, cols) = gt_mask.shape();
    let mut labels = Grid::filled(rows, cols, UNLABELED);
    for k in 0..num_classes as u8 {
        let region = gt_mask.map(|&v| v == k);
        let area = region.as_slice().iter().filter(|&&v| v).count();
        if area == 0 {
            continue;
        }
        let skel = skeleton_with_fallback(&region);
        for (dst, &on) in labels.as_mut_slice().iter_mut().zip(skel.as_slice()) {
            if on {
                *dst = k;
            }
        }
        if k == 0 {
            let len = skel.as_slice().iter().filter(|&&v| v).count();
            let keep = ((background_coverage * area as f64).round() as usize).clamp(1, len);
            let single = ScribbleLabel::new(labels.clone(), num_classes)?;
            let pruned = prune_class(&single, 0, keep, seed)?;
            labels = pruned;
        }
    }
    ScribbleLabel::new(labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Fraction of each class's scribble pixels to keep, in `(0, 1]`.
    pub ratio: f64,
    /// Seed for the random-pixel fallback.
    pub seed: u64,
}

impl PruneSpec {
    pub fn new(ratio: f64, seed: u64) -> Result<Self> {
        let s = PruneSpec { ratio, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(format!("prune ratio {} outside (0, 1]", self.ratio)));
        }
        Ok(())
    }
}

/// Whether the scribble pixel at `(r, c)` of `class` has at most one
/// same-class 8-neighbor.
pub fn is_endpoint(labels: &Grid<u8>, r: usize, c: usize, class: u8) -> bool {
    let n = NEIGHBORS8
        .iter()
        .filter(|(dr, dc)| labels.at(r as isize + dr, c as isize + dc) == Some(&class))
        .count();
    n <= 1
}

/// Shortens class `class` to exactly `keep` pixels: each round removes the
/// current endpoints in row-major order; a round without endpoints
/// removes one seeded-random pixel instead.
fn prune_class(scribble: &ScribbleLabel, class: u8, keep: usize, seed: u64) -> Result<Grid<u8>> {
    let mut labels = scribble.labels().clone();
    let (rows, cols) = labels.shape();
    let mut count = scribble.count(class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    while count > keep {
        let endpoints: Vec<(usize, usize)> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .filter(|&(r, c)| labels.value(r, c) == class && is_endpoint(&labels, r, c, class))
            .collect();
        if endpoints.is_empty() {
            let pixels: Vec<usize> = labels
                .as_slice()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == class)
                .map(|(i, _)| i)
                .collect();
            let i = pixels[rng.random_range(0..pixels.len())];
            labels.as_mut_slice()[i] = UNLABELED;
            count -= 1;
            continue;
        }
        for (r, c) in endpoints {
            if count == keep {
                break;
            }
            labels.set(r, c, UNLABELED);
            count -= 1;
        }
    }
    Ok(labels)
}

/// Shortens every class's scribble to `⌈ratio · original⌉` pixels.
pub fn prune_scribbles(scribble: &ScribbleLabel, spec: &PruneSpec) -> Result<ScribbleLabel> {
    spec.validate()?;
    let mut current = scribble.clone();
    for k in 0..scribble.num_classes() as u8 {
        let n = scribble.count(k);
        if n == 0 {
            continue;
        }
        let keep = ((spec.ratio * n as f64).ceil() as usize).clamp(1, n);
        if keep == n {
            continue;
        }
        let labels = prune_class(&current, k, keep, spec.seed)?;
        current = ScribbleLabel::new(labels, scribble.num_classes())?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(n: usize, lo: usize, hi: usize) -> Grid<u8> {
        Grid::from_fn(n, n, |r, c| u8::from((lo..hi).contains(&r) && (lo..hi).contains(&c)))
    }

    fn eight_connected(labels: &Grid<u8>, class: u8) -> bool {
        let pts: Vec<(usize, usize)> = (0..labels.rows())
            .flat_map(|r| (0..labels.cols()).map(move |c| (r, c)))
            .filter(|&(r, c)| labels.value(r, c) == class)
            .collect();
        if pts.is_empty() {
            return true;
        }
        let mut seen = vec![pts[0]];
        let mut stack = vec![pts[0]];
        while let Some((r, c)) = stack.pop() {
            for &q in &pts {
                let near = (q.0 as isize - r as isize).abs() <= 1 && (q.1 as isize - c as isize).abs() <= 1;
                if near && !seen.contains(&q) {
                    seen.push(q);
                    stack.push(q);
                }
            }
        }
        seen.len() == pts.len()
    }

    #[test]
    fn square_skeleton_is_inside_thin_and_connected() {
        let gt = square_mask(21, 5, 16);
        let s = synthesize_scribbles(&gt, 2, 0).unwrap();
        let l = s.labels();
        assert!(s.count(1) > 0);
        for r in 0..21 {
            for c in 0..21 {
                if l.value(r, c) == 1 {
                    assert!((5..16).contains(&r) && (5..16).contains(&c));
                }
            }
        }
        assert!(eight_connected(l, 1));
        // No fully scribbled 3×3 block means width ≤ 2.
        for r in 0..19 {
            for c in 0..19 {
                let full = (0..3).all(|i| (0..3).all(|j| l.value(r + i, c + j) == 1));
                assert!(!full);
            }
        }
    }

    #[test]
    fn absent_class_gets_no_scribble() {
        let gt = square_mask(16, 4, 10);
        let s = synthesize_scribbles(&gt, 3, 0).unwrap();
        assert_eq!(s.count(2), 0);
    }

    #[test]
    fn rejects_out_of_range_mask() {
        let gt = Grid::filled(4, 4, 3u8);
        assert!(synthesize_scribbles(&gt, 3, 0).is_err());
    }

    #[test]
    fn thinning_a_line_keeps_it() {
        let m = Grid::from_fn(5, 12, |r, c| r == 2 && (1..11).contains(&c));
        let t = thin(&m);
        assert!(t.as_slice().iter().filter(|&&v| v).count() >= 8);
    }

    #[test]
    fn ratio_one_is_identity() {
        let gt = square_mask(24, 4, 18);
        let s = synthesize_scribbles(&gt, 2, 3).unwrap();
        assert_eq!(prune_scribbles(&s, &PruneSpec::new(1.0, 0).unwrap()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_ratio() {
        assert!(PruneSpec::new(0.0, 0).is_err());
        assert!(PruneSpec::new(1.5, 0).is_err());
    }
}
