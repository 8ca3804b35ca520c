//! Mask generation over the patch grid: blockwise, uniform random, or none.

use rand::Rng;

/// Which patch positions are replaced by the learnable mask embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    /// `true` = masked, one flag per patch in row-major grid order.
    pub grid: Vec<bool>,
    /// Fraction of the grid the sampler was asked to cover.
    pub target_ratio: f64,
}

impl MaskSpec {
    pub fn none(n: usize) -> Self {
        MaskSpec {
            grid: vec![false; n],
            target_ratio: 0.0,
        }
    }

    pub fn popcount(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.popcount() == 0
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }
}

/// Per-view masking ratio: `0` with probability `zero_prob`, otherwise uniform
/// on `[lo, hi]`.
pub fn sample_mask_ratio<R: Rng>(rng: &mut R, zero_prob: f64, lo: f64, hi: f64) -> f64 {
    if rng.gen::<f64>() < zero_prob {
        0.0
    } else {
        rng.gen_range(lo..=hi)
    }
}

const ASPECT_LO: f64 = 0.3;

/// Blockwise mask: rectangles (min side 1, aspect in [0.3, 1/0.3]) are placed
/// until coverage reaches `ratio`; the final block may overshoot by at most
/// its own area.
pub fn sample_block_mask<R: Rng>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> MaskSpec {
    sample_block_mask_with_rects(grid_h, grid_w, ratio, rng).0
}

/// As [`sample_block_mask`], also reporting the placed rectangles
/// `(top, left, h, w)` so tests can verify the mask is exactly their union.
pub fn sample_block_mask_with_rects<R: Rng>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> (MaskSpec, Vec<(usize, usize, usize, usize)>) {
    let n = grid_h * grid_w;
    let ratio = ratio.clamp(0.0, 1.0);
    let target = (ratio * n as f64).ceil() as usize;
    let mut grid = vec![false; n];
    let mut rects = Vec::new();
    if target == 0 {
        return (
            MaskSpec {
                grid,
                target_ratio: ratio,
            },
            rects,
        );
    }

    let mut covered = 0usize;
    let mut attempts = 0usize;
    while covered < target {
        attempts += 1;
        if attempts > 10 * n + 20 {
            // Degenerate geometry (tiny grids, heavy overlap): finish with unit
            // blocks in scan order so the sampler always terminates.
            for (i, cell) in grid.iter_mut().enumerate() {
                if covered >= target {
                    break;
                }
                if !*cell {
                    *cell = true;
                    covered += 1;
                    rects.push((i / grid_w, i % grid_w, 1, 1));
                }
            }
            break;
        }

        let remaining = target - covered;
        // Area at least 2 whenever more than one cell is still needed keeps
        // blocks from degenerating into scattered singletons.
        let min_area = remaining.min(2);
        let area = rng.gen_range(min_area..=remaining).max(1);
        let aspect = (rng.gen_range(ASPECT_LO.ln()..=(1.0 / ASPECT_LO).ln())).exp();
        let mut h = ((area as f64 * aspect).sqrt().round() as usize).clamp(1, grid_h);
        let mut w = ((area as f64 / h as f64).round() as usize).clamp(1, grid_w);
        if h * w < min_area {
            h = ((min_area + w - 1) / w).clamp(1, grid_h);
        }
        if h * w < min_area {
            w = ((min_area + h - 1) / h).clamp(1, grid_w);
        }
        let top = rng.gen_range(0..=grid_h - h);
        let left = rng.gen_range(0..=grid_w - w);
        let mut added = 0;
        for r in top..top + h {
            for c in left..left + w {
                if !grid[r * grid_w + c] {
                    grid[r * grid_w + c] = true;
                    added += 1;
                }
            }
        }
        if added > 0 {
            rects.push((top, left, h, w));
            covered += added;
        }
    }

    (
        MaskSpec {
            grid,
            target_ratio: ratio,
        },
        rects,
    )
}

/// Uniform random mask with exactly `round(n * ratio)` positions.
pub fn sample_random_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> MaskSpec {
    let ratio = ratio.clamp(0.0, 1.0);
    let count = ((n as f64 * ratio).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates: only the first `count` positions matter
    for i in 0..count {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut grid = vec![false; n];
    for &i in &order[..count] {
        grid[i] = true;
    }
    MaskSpec {
        grid,
        target_ratio: ratio,
    }
}
