//! Weakly supervised part discovery from channel activation maps.
//!
//! Channels are ranked by their share of total mean activation; the top
//! ranked channels are thresholded at a jittered rate into binary masks, and
//! a proposal is admitted only if its box overlaps every admitted box by at
//! most the IoU threshold. When repeated passes cannot fill the set, the
//! remaining slots are filled from the ranking without the overlap test.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::feature::{FeatureMap, Grid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscoveryError {
    #[error("invalid discovery config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryConfig {
    /// Number of parts to return (N).
    pub parts: usize,
    /// Part-stack capacity: how many top-ranked channels a pass considers (R).
    /// Values above the channel count are clamped to it.
    pub capacity: usize,
    pub iou_threshold: f64,
    pub eta_mean: f64,
    pub eta_std: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub eps: f64,
    pub max_iter: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            parts: 4,
            capacity: 64,
            iou_threshold: 0.6,
            eta_mean: 0.5,
            eta_std: 0.1,
            eta_min: 0.05,
            eta_max: 0.95,
            eps: 1e-6,
            max_iter: 8,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        let err = |m: &str| Err(DiscoveryError::Config(m.to_string()));
        if self.parts == 0 || self.parts > self.capacity {
            return err("need 0 < N <= R");
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return err("IoU threshold must lie in [0, 1]");
        }
        if !(0.0 < self.eta_min && self.eta_min < self.eta_max && self.eta_max < 1.0) {
            return err("need 0 < eta_min < eta_max < 1");
        }
        if !(self.eps > 0.0) {
            return err("eps must be positive");
        }
        if !(self.eta_std >= 0.0) {
            return err("eta std must be non-negative");
        }
        if self.max_iter == 0 {
            return err("max_iter must be at least 1");
        }
        Ok(())
    }

    /// Capacity actually usable on a map with `channels` channels.
    pub fn effective_capacity(&self, channels: usize) -> usize {
        self.capacity.min(channels)
    }
}

/// Half-open pixel box: rows `[row_lo, row_hi)`, columns `[col_lo, col_hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub row_lo: usize,
    pub col_lo: usize,
    pub row_hi: usize,
    pub col_hi: usize,
}

impl BBox {
    pub fn new(row_lo: usize, col_lo: usize, row_hi: usize, col_hi: usize) -> Self {
        debug_assert!(row_lo < row_hi && col_lo < col_hi);
        Self { row_lo, col_lo, row_hi, col_hi }
    }

    pub fn area(&self) -> usize {
        (self.row_hi - self.row_lo) * (self.col_hi - self.col_lo)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.row_lo..self.row_hi).contains(&y) && (self.col_lo..self.col_hi).contains(&x)
    }
}

pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let rows = a.row_hi.min(b.row_hi).saturating_sub(a.row_lo.max(b.row_lo));
    let cols = a.col_hi.min(b.col_hi).saturating_sub(a.col_lo.max(b.col_lo));
    let inter = rows * cols;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// A discovered part: binary mask over the grid plus its tight box.
#[derive(Debug, Clone, PartialEq)]
pub struct PartProposal {
    pub grid: Grid,
    /// `W·H` flags in grid order.
    pub mask: Vec<bool>,
    pub bbox: BBox,
    pub source_channel: usize,
    pub eta: f64,
    /// Admitted by the fallback rule, i.e. without the IoU filter.
    pub fallback: bool,
}

impl PartProposal {
    /// Full-grid part, mostly useful for tests and visualisation.
    pub fn full(grid: Grid) -> Self {
        Self {
            grid,
            mask: vec![true; grid.pixels()],
            bbox: BBox::new(0, 0, grid.height, grid.width),
            source_channel: 0,
            eta: 0.0,
            fallback: false,
        }
    }

    /// Builds a proposal from an arbitrary mask; `None` when the mask is empty.
    pub fn from_mask(grid: Grid, mask: Vec<bool>) -> Option<Self> {
        let bbox = tight_bbox(grid, &mask)?;
        Some(Self { grid, mask, bbox, source_channel: 0, eta: 0.0, fallback: false })
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn tight_bbox(grid: Grid, mask: &[bool]) -> Option<BBox> {
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = grid.coords(i);
        lo = (lo.0.min(y), lo.1.min(x));
        hi = (hi.0.max(y + 1), hi.1.max(x + 1));
    }
    (lo.0 != usize::MAX).then(|| BBox::new(lo.0, lo.1, hi.0, hi.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscoveryStatus {
    /// All parts admitted under the IoU filter.
    Complete,
    /// Some parts came from the fallback rule.
    Fallback,
    /// Fewer than N non-degenerate channels were available.
    Insufficient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartSet {
    pub parts: Vec<PartProposal>,
    pub status: DiscoveryStatus,
    pub passes: usize,
}

impl PartSet {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

/// Per-channel share of mean activation: `v_c / Σ_k (v_k + eps)`.
pub fn activation_scores(x: &FeatureMap, eps: f64) -> Vec<f64> {
    let c = x.channels();
    let mut means = vec![0.0; c];
    for px in x.data().chunks(c) {
        for (m, v) in means.iter_mut().zip(px) {
            *m += v;
        }
    }
    let n = x.grid().pixels() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    let denom: f64 = means.iter().map(|v| v + eps).sum();
    means.iter().map(|v| v / denom).collect()
}

/// Channel order by descending score; ties keep ascending channel index.
pub fn activation_sort(scores: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    perm.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    perm
}

/// Gaussian draw clamped into `[lo, hi]`.
pub fn sample_threshold<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64, clamp: (f64, f64)) -> f64 {
    let draw = if std > 0.0 {
        Normal::new(mean, std).expect("finite std").sample(rng)
    } else {
        mean
    };
    draw.clamp(clamp.0, clamp.1)
}

/// Min-max normalises one channel and keeps pixels at or above `eta`.
/// Constant channels are rejected.
pub fn roi_crop(grid: Grid, channel: &[f64], eta: f64, source_channel: usize) -> Option<PartProposal> {
    let min = channel.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = channel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return None;
    }
    let range = max - min;
    let mask: Vec<bool> = channel.iter().map(|v| (v - min) / range >= eta).collect();
    let bbox = tight_bbox(grid, &mask)?;
    Some(PartProposal { grid, mask, bbox, source_channel, eta, fallback: false })
}

/// Runs score → sort → sample → crop passes until `N` mutually
/// non-overlapping parts are admitted, falling back to the top of the
/// ranking after `max_iter` passes.
pub fn discover_parts<R: Rng + ?Sized>(
    x: &FeatureMap,
    cfg: &DiscoveryConfig,
    rng: &mut R,
) -> Result<PartSet, DiscoveryError> {
    cfg.validate()?;
    let grid = x.grid();
    let capacity = cfg.effective_capacity(x.channels());
    let want = cfg.parts.min(capacity);
    let clamp = (cfg.eta_min, cfg.eta_max);
    let channels: Vec<Vec<f64>> = (0..x.channels()).map(|c| x.channel(c)).collect();

    let mut admitted: Vec<PartProposal> = Vec::with_capacity(want);
    let mut passes = 0;
    // Scores are recomputed every pass, on the same snapshot of X.
    'passes: while passes < cfg.max_iter {
        passes += 1;
        let scores = activation_scores(x, cfg.eps);
        let ranking = activation_sort(&scores);
        for &c in ranking.iter().take(capacity) {
            let eta = sample_threshold(rng, cfg.eta_mean, cfg.eta_std, clamp);
            let Some(candidate) = roi_crop(grid, &channels[c], eta, c) else { continue };
            if admitted.iter().all(|p| bbox_iou(&p.bbox, &candidate.bbox) <= cfg.iou_threshold) {
                admitted.push(candidate);
                if admitted.len() == want {
                    break 'passes;
                }
            }
        }
    }

    let mut status = DiscoveryStatus::Complete;
    if admitted.len() < want {
        status = DiscoveryStatus::Fallback;
        let scores = activation_scores(x, cfg.eps);
        let ranking = activation_sort(&scores);
        for &c in ranking.iter().take(capacity) {
            if admitted.len() == want {
                break;
            }
            if admitted.iter().any(|p| p.source_channel == c) {
                continue;
            }
            let eta = sample_threshold(rng, cfg.eta_mean, cfg.eta_std, clamp);
            if let Some(mut p) = roi_crop(grid, &channels[c], eta, c) {
                p.fallback = true;
                admitted.push(p);
            }
        }
    }
    if admitted.len() < cfg.parts {
        log::warn!(
            "part discovery found {} of {} parts ({} usable channels)",
            admitted.len(),
            cfg.parts,
            capacity
        );
        status = DiscoveryStatus::Insufficient;
    }
    Ok(PartSet { parts: admitted, status, passes })
}

/// A feature map with `n` compact Gaussian blobs, each on its own randomly
/// chosen channel and inside its own cell of a `⌈√n⌉×⌈√n⌉` layout, over
/// low-level noise on every channel. Returns the map and `(channel, x, y)`
/// per blob.
pub fn planted_blobs<R: Rng + ?Sized>(
    rng: &mut R,
    grid: Grid,
    channels: usize,
    n: usize,
) -> Result<(FeatureMap, Vec<(usize, usize, usize)>), DiscoveryError> {
    const RADIUS: usize = 2;
    let per_axis = (1..).find(|k| k * k >= n).unwrap_or(1);
    let (cw, ch) = (grid.width / per_axis, grid.height / per_axis);
    if n > channels || cw < 2 * RADIUS + 1 || ch < 2 * RADIUS + 1 {
        return Err(DiscoveryError::Config(format!(
            "cannot plant {n} blobs on a {}x{}x{channels} map",
            grid.width, grid.height
        )));
    }
    let mut data: Vec<f64> = (0..grid.pixels() * channels).map(|_| rng.gen_range(0.0..0.01)).collect();
    let mut pool: Vec<usize> = (0..channels).collect();
    let mut blobs = Vec::with_capacity(n);
    for b in 0..n {
        let c = pool.swap_remove(rng.gen_range(0..pool.len()));
        let (x0, y0) = ((b % per_axis) * cw, (b / per_axis) * ch);
        let cx = rng.gen_range(x0 + RADIUS..x0 + cw - RADIUS);
        let cy = rng.gen_range(y0 + RADIUS..y0 + ch - RADIUS);
        for y in cy - RADIUS..=cy + RADIUS {
            for x in cx - RADIUS..=cx + RADIUS {
                let d2 = ((x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2)) / 2.0;
                data[grid.index(x, y) * channels + c] += (-d2).exp();
            }
        }
        blobs.push((c, cx, cy));
    }
    let map = FeatureMap::new(grid, channels, data).expect("consistent extents");
    Ok((map, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid2() -> Grid {
        Grid::new(2, 2)
    }

    #[test]
    fn scores_constant_channels_split_evenly() {
        let fm = FeatureMap::new(Grid::new(2, 2), 2, vec![1.0; 8]).unwrap();
        let s = activation_scores(&fm, 1e-6);
        assert!((s[0] - 0.5).abs() < 1e-6 && (s[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn scores_direct_arithmetic() {
        // channel means v = (1, 3)
        let fm = FeatureMap::new(Grid::new(1, 2), 2, vec![0.5, 2.0, 1.5, 4.0]).unwrap();
        let s = activation_scores(&fm, 1e-6);
        let denom = 4.0 + 2e-6;
        assert!((s[0] - 1.0 / denom).abs() < 1e-15);
        assert!((s[1] - 3.0 / denom).abs() < 1e-15);
    }

    #[test]
    fn scores_all_zero_map() {
        let fm = FeatureMap::zeros(Grid::new(3, 3), 4);
        let s = activation_scores(&fm, 1e-6);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sort_order_and_ties() {
        assert_eq!(activation_sort(&[0.1, 0.9]), vec![1, 0]);
        assert_eq!(activation_sort(&[0.5, 0.5]), vec![0, 1]);
        assert_eq!(activation_sort(&[0.2, 0.7, 0.2, 0.7]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn threshold_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_threshold(&mut rng, 0.5, 0.0, (0.05, 0.95)), 0.5);
        assert_eq!(sample_threshold(&mut rng, 0.01, 0.0, (0.05, 0.95)), 0.05);
        assert_eq!(sample_threshold(&mut rng, -3.0, 0.1, (0.05, 0.95)), 0.05);
        let a: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            (0..5).map(|_| sample_threshold(&mut r, 0.5, 0.1, (0.05, 0.95))).collect()
        };
        let b: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            (0..5).map(|_| sample_threshold(&mut r, 0.5, 0.1, (0.05, 0.95))).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn crop_thresholds_normalised_map() {
        // rows: [0, 0.2], [0.9, 1.0]
        let p = roi_crop(grid2(), &[0.0, 0.2, 0.9, 1.0], 0.5, 3).unwrap();
        assert_eq!(p.mask, vec![false, false, true, true]);
        assert_eq!(p.bbox, BBox::new(1, 0, 2, 2));
        assert_eq!(p.source_channel, 3);
    }

    #[test]
    fn crop_rejects_constant_and_floors_to_full_extent() {
        assert!(roi_crop(grid2(), &[0.3; 4], 0.5, 0).is_none());
        let p = roi_crop(Grid::new(3, 2), &[0.0, 5.0, 1.0, 2.0, 0.5, 3.0], 1e-12, 0).unwrap();
        assert_eq!(p.bbox, BBox::new(0, 0, 2, 3));
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0, 0, 4, 4);
        assert_eq!(bbox_iou(&a, &a), 1.0);
        assert_eq!(bbox_iou(&a, &BBox::new(5, 5, 6, 6)), 0.0);
        assert_eq!(bbox_iou(&a, &BBox::new(4, 0, 6, 4)), 0.0);
        let b = BBox::new(2, 2, 6, 6);
        assert!((bbox_iou(&a, &b) - 4.0 / 28.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(DiscoveryConfig::default().validate().is_ok());
        let bad = DiscoveryConfig { parts: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DiscoveryConfig { iou_threshold: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DiscoveryConfig { eta_min: 0.9, eta_max: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DiscoveryConfig { max_iter: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn blob_map(grid: Grid, channels: usize, centers: &[(usize, usize, usize)]) -> FeatureMap {
        let mut fm = FeatureMap::zeros(grid, channels);
        for &(c, cx, cy) in centers {
            for y in 0..grid.height {
                for x in 0..grid.width {
                    let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                    fm.set(x, y, c, (-d2 / 2.0).exp());
                }
            }
        }
        fm
    }

    #[test]
    fn single_part_comes_from_argmax_channel() {
        let grid = Grid::new(8, 8);
        let mut fm = blob_map(grid, 3, &[(1, 2, 2), (2, 6, 6)]);
        // channel 2 gets the largest mean
        for y in 0..8 {
            for x in 0..8 {
                let v = fm.get(x, y, 2);
                fm.set(x, y, 2, v * 3.0);
            }
        }
        let cfg = DiscoveryConfig { parts: 1, capacity: 3, ..Default::default() };
        let set = discover_parts(&fm, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.parts[0].source_channel, 2);
        assert_eq!(set.status, DiscoveryStatus::Complete);
    }

    #[test]
    fn identical_channels_use_fallback() {
        let grid = Grid::new(8, 8);
        let centers: Vec<_> = (0..6).map(|c| (c, 4, 4)).collect();
        let fm = blob_map(grid, 6, &centers);
        let cfg = DiscoveryConfig {
            parts: 4,
            capacity: 6,
            eta_std: 0.0,
            ..Default::default()
        };
        let set = discover_parts(&fm, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.status, DiscoveryStatus::Fallback);
        assert!(!set.parts[0].fallback);
        assert!(set.parts[1..].iter().all(|p| p.fallback));
        assert_eq!(set.passes, cfg.max_iter);
        let channels: Vec<_> = set.parts.iter().map(|p| p.source_channel).collect();
        assert_eq!(channels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_few_usable_channels_is_reported() {
        let grid = Grid::new(4, 4);
        let fm = blob_map(grid, 3, &[(0, 1, 1)]);
        let cfg = DiscoveryConfig { parts: 3, capacity: 3, eta_std: 0.0, ..Default::default() };
        let set = discover_parts(&fm, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.status, DiscoveryStatus::Insufficient);
    }

    #[test]
    fn capacity_above_channel_count_is_clamped() {
        let grid = Grid::new(6, 6);
        let fm = blob_map(grid, 2, &[(0, 1, 1), (1, 4, 4)]);
        let cfg = DiscoveryConfig { parts: 2, capacity: 64, ..Default::default() };
        let set = discover_parts(&fm, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(cfg.effective_capacity(2), 2);
    }
}
