//! Random scribbles for pruning checks.

use rand::Rng;
use scribbleseg::{Grid, ScribbleLabel, UNLABELED};

use super::rng;

/// Random strokes of up to three classes on a blank grid.
pub fn random_scribble(seed: u64) -> ScribbleLabel {
    let mut r = rng(seed);
    let (rows, cols) = (r.random_range(8..40), r.random_range(8..40));
    let mut g = Grid::filled(rows, cols, UNLABELED);
    for _ in 0..r.random_range(1..6) {
        let class = r.random_range(0..3u8);
        let (mut y, mut x) = (r.random_range(0..rows) as isize, r.random_range(0..cols) as isize);
        for _ in 0..r.random_range(1..60) {
            if y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols {
                g.set(y as usize, x as usize, class);
            }
            y += r.random_range(-1..=1i32) as isize;
            x += r.random_range(-1..=1i32) as isize;
        }
    }
    ScribbleLabel::new(g, 3).unwrap()
}

pub fn is_subset(small: &ScribbleLabel, big: &ScribbleLabel) -> bool {
    small
        .as_slice()
        .iter()
        .zip(big.as_slice())
        .all(|(&s, &b)| s == UNLABELED || s == b)
}
