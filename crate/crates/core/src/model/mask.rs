use rand::Rng;

/// Per-patch boolean mask; the class token is never part of it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub mask: Vec<bool>,
    /// Target ratio the mask was drawn for.
    pub ratio: f64,
}

impl MaskSpec {
    pub fn new(mask: Vec<bool>, ratio: f64) -> Self {
        Self { mask, ratio }
    }

    pub fn empty(len: usize) -> Self {
        Self::new(vec![false; len], 0.0)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Number of masked positions.
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.mask.len() as f64
        }
    }
}

/// Masks exactly `round(ratio * len)` positions chosen uniformly.
pub fn random_mask<R: Rng + ?Sized>(len: usize, ratio: f64, rng: &mut R) -> MaskSpec {
    let ratio = ratio.clamp(0.0, 1.0);
    let count = ((ratio * len as f64).round() as usize).min(len);
    let mut mask = vec![false; len];
    for i in rand::seq::index::sample(rng, len, count) {
        mask[i] = true;
    }
    MaskSpec::new(mask, ratio)
}

const MIN_BLOCK_AREA: usize = 4;
const MIN_ASPECT: f64 = 0.3;
const BLOCK_ATTEMPTS: usize = 10;

/// Iterative blockwise masking on a `grid_h × grid_w` patch grid.
///
/// Random rectangles (aspect in `[0.3, 1/0.3]`, area at least 4 cells when
/// the remaining budget allows) are added until the masked fraction reaches
/// `ratio`, never exceeding `ratio + 0.1`.
pub fn block_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> MaskSpec {
    let ratio = ratio.clamp(0.0, 1.0);
    let len = grid_h * grid_w;
    let target = ((ratio * len as f64) - 1e-9).ceil().max(0.0) as usize;
    let upper = (((ratio + 0.1) * len as f64) + 1e-9).floor() as usize;
    let upper = upper.clamp(target, len);
    let mut mask = vec![false; len];
    let mut count = 0usize;
    let (log_lo, log_hi) = (MIN_ASPECT.ln(), (1.0 / MIN_ASPECT).ln());

    while count < target {
        let budget = upper - count;
        let mut placed = false;
        if budget >= MIN_BLOCK_AREA {
            for _ in 0..BLOCK_ATTEMPTS {
                let area = rng.random_range(MIN_BLOCK_AREA..=budget) as f64;
                let aspect = rng.random_range(log_lo..log_hi).exp();
                let h = (area * aspect).sqrt().round() as usize;
                let w = (area / aspect).sqrt().round() as usize;
                if h == 0 || w == 0 || h > grid_h || w > grid_w {
                    continue;
                }
                let top = rng.random_range(0..=grid_h - h);
                let left = rng.random_range(0..=grid_w - w);
                let fresh = (top..top + h)
                    .flat_map(|r| (left..left + w).map(move |c| r * grid_w + c))
                    .filter(|&i| !mask[i])
                    .count();
                if fresh == 0 || fresh > budget {
                    continue;
                }
                for r in top..top + h {
                    for c in left..left + w {
                        mask[r * grid_w + c] = true;
                    }
                }
                count += fresh;
                placed = true;
                break;
            }
        }
        if !placed {
            // grow next to the existing blocks when possible
            let free: Vec<usize> = (0..len).filter(|&i| !mask[i]).collect();
            let adjacent: Vec<usize> = free
                .iter()
                .copied()
                .filter(|&i| neighbours(i, grid_h, grid_w).any(|j| mask[j]))
                .collect();
            let pool = if adjacent.is_empty() {
                &free
            } else {
                &adjacent
            };
            let pick = pool[rng.random_range(0..pool.len())];
            mask[pick] = true;
            count += 1;
        }
    }
    MaskSpec::new(mask, ratio)
}

pub(crate) fn neighbours(i: usize, grid_h: usize, grid_w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / grid_w, i % grid_w);
    let up = (r > 0).then(|| i - grid_w);
    let down = (r + 1 < grid_h).then(|| i + grid_w);
    let left = (c > 0).then(|| i - 1);
    let right = (c + 1 < grid_w).then(|| i + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Mean number of masked 4-neighbours per masked cell.
pub fn mask_contiguity(m: &MaskSpec, grid_h: usize, grid_w: usize) -> f64 {
    let masked: Vec<usize> = (0..m.len()).filter(|&i| m.mask[i]).collect();
    if masked.is_empty() {
        return 0.0;
    }
    let total: usize = masked
        .iter()
        .map(|&i| neighbours(i, grid_h, grid_w).filter(|&j| m.mask[j]).count())
        .sum();
    total as f64 / masked.len() as f64
}
