//! Synthetic fine-grained dataset.
//!
//! Every image shows the same horizontal body band. A class is identified by
//! an ordered sequence of small motifs placed left to right on the band;
//! classes come in pairs that use the same motifs in opposite order, so
//! the motif content alone identifies a pair and only their spatial
//! arrangement separates the two classes within it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::Image;

/// 5×5 motif bitmaps, row-major.
pub const PATTERNS: [[u8; 25]; 6] = [
    // plus
    [0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0],
    // cross
    [1, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0, 0, 1],
    // ring
    [1, 1, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 1, 1, 1, 1],
    // checker
    [1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1],
    // horizontal bars
    [1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1],
    // vertical bars
    [1, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 0, 1, 0, 1],
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub width: usize,
    pub height: usize,
    /// Motifs per class.
    pub motifs: usize,
    pub motif_size: usize,
    pub noise: f64,
    pub seed: u64,
    /// Horizontal distance between consecutive motif origins.
    pub gap: (usize, usize),
    /// Vertical offset of later motifs relative to the first, `±jitter`.
    pub jitter: usize,
    /// Minimum distance from a motif to the left/right image border.
    pub margin: usize,
    pub body_level: f64,
    pub train_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 40,
            width: 48,
            height: 48,
            motifs: 2,
            motif_size: 5,
            noise: 0.05,
            seed: 0,
            gap: (18, 24),
            jitter: 3,
            margin: 8,
            body_level: 0.35,
            train_fraction: 0.8,
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn combination(n: usize, k: usize, mut index: usize) -> Vec<usize> {
    // Lexicographic unranking.
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for left in (1..=k).rev() {
        for v in start..n {
            let count = binomial(n - v - 1, left - 1);
            if index < count {
                out.push(v);
                start = v + 1;
                break;
            }
            index -= count;
        }
    }
    out
}

impl SynthSpec {
    pub fn max_classes(&self) -> usize {
        match self.motifs {
            0 => 0,
            1 => PATTERNS.len(),
            m if m <= PATTERNS.len() => 2 * binomial(PATTERNS.len(), m),
            _ => 0,
        }
    }

    /// Rows covered by the body band.
    pub fn band(&self) -> (usize, usize) {
        let half = (self.height as f64 * 0.3).round() as usize;
        (self.height / 2 - half.min(self.height / 2), (self.height / 2 + half).min(self.height))
    }

    fn y_range(&self) -> (usize, usize) {
        let (top, bottom) = self.band();
        (top + 2, bottom.saturating_sub(2 + self.motif_size))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Spec(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.classes > self.max_classes() {
            return fail(format!(
                "{} motifs per class support at most {} classes, asked for {}",
                self.motifs,
                self.max_classes(),
                self.classes
            ));
        }
        if self.per_class == 0 || self.motif_size == 0 {
            return fail("per_class and motif_size must be positive".into());
        }
        if self.gap.0 > self.gap.1 || self.gap.0 < self.motif_size {
            return fail(format!("gap range {:?} must be ordered and at least the motif size", self.gap));
        }
        let span = 2 * self.margin + self.motif_size + (self.motifs - 1) * self.gap.1;
        if span > self.width {
            return fail(format!("motifs need {span} columns, image has {}", self.width));
        }
        let (lo, hi) = self.y_range();
        if hi < lo || self.height < 8 {
            return fail(format!("motif size {} does not fit the body band", self.motif_size));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.body_level) {
            return fail("noise must be >= 0 and body level in [0,1]".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train fraction {} not in (0,1)", self.train_fraction));
        }
        Ok(())
    }
}

/// Pattern indices of a class, left to right.
pub fn class_patterns(spec: &SynthSpec, class: usize) -> Result<Vec<usize>, SynthError> {
    if class >= spec.max_classes() {
        return Err(SynthError::Spec(format!("class {class} out of range")));
    }
    if spec.motifs == 1 {
        return Ok(vec![class]);
    }
    let mut p = combination(PATTERNS.len(), spec.motifs, class / 2);
    if class % 2 == 1 {
        p.reverse();
    }
    Ok(p)
}

/// Top-left corner of each motif, left to right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotifLayout {
    pub origins: Vec<(usize, usize)>,
}

impl MotifLayout {
    pub fn sample<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Self {
        let (ylo, yhi) = spec.y_range();
        let x_hi = spec.width - spec.margin - spec.motif_size - (spec.motifs - 1) * spec.gap.1;
        let mut x = rng.gen_range(spec.margin..=x_hi);
        let y0 = rng.gen_range(ylo..=yhi);
        let mut origins = vec![(x, y0)];
        for _ in 1..spec.motifs {
            x += rng.gen_range(spec.gap.0..=spec.gap.1);
            let j = spec.jitter as isize;
            let y = (y0 as isize + rng.gen_range(-j..=j)).clamp(ylo as isize, yhi as isize) as usize;
            origins.push((x, y));
        }
        Self { origins }
    }

    /// Whether `(x, y)` lies inside any motif box.
    pub fn covers(&self, size: usize, x: usize, y: usize) -> bool {
        self.origins.iter().any(|&(ox, oy)| (ox..ox + size).contains(&x) && (oy..oy + size).contains(&y))
    }
}

/// Noiseless image of `class` with the given layout.
pub fn render_template(spec: &SynthSpec, class: usize, layout: &MotifLayout) -> Result<Image, SynthError> {
    let patterns = class_patterns(spec, class)?;
    let mut img = Image::new(spec.width, spec.height, 1);
    let (top, bottom) = spec.band();
    for y in top..bottom {
        for x in 0..spec.width {
            img.set(x, y, 0, spec.body_level);
        }
    }
    let s = spec.motif_size;
    for (&p, &(ox, oy)) in patterns.iter().zip(&layout.origins) {
        for dy in 0..s {
            for dx in 0..s {
                // Nearest-neighbour scaling of the 5×5 bitmap.
                let (bx, by) = (dx * 5 / s, dy * 5 / s);
                img.set(ox + dx, oy + dy, 0, PATTERNS[p][by * 5 + bx] as f64);
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    /// Index within its class.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn sample(spec: &SynthSpec, class: usize, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((class * spec.per_class + index) as u64);
    let layout = MotifLayout::sample(spec, &mut rng);
    let mut image = render_template(spec, class, &layout).expect("validated class");
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("finite noise");
        image.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    image.clip();
    Sample { image, label: class, index }
}

/// Generates `per_class` samples per class; in each class the first
/// `train_fraction` of indices form the training split.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let n_train = ((spec.per_class as f64 * spec.train_fraction).round() as usize).clamp(1, spec.per_class);
    let mut train = Vec::with_capacity(spec.classes * n_train);
    let mut test = Vec::with_capacity(spec.classes * (spec.per_class - n_train));
    for class in 0..spec.classes {
        for index in 0..spec.per_class {
            let s = sample(spec, class, index);
            if index < n_train {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    Ok(Dataset { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unranking_covers_all_combinations() {
        let all: Vec<Vec<usize>> = (0..binomial(6, 2)).map(|i| combination(6, 2, i)).collect();
        assert_eq!(all[0], vec![0, 1]);
        assert_eq!(all[5], vec![1, 2]);
        assert_eq!(all[14], vec![4, 5]);
        let mut dedup = all.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 15);
    }

    #[test]
    fn paired_classes_reverse_order() {
        let spec = SynthSpec::default();
        assert_eq!(class_patterns(&spec, 0).unwrap(), vec![0, 1]);
        assert_eq!(class_patterns(&spec, 1).unwrap(), vec![1, 0]);
        assert_eq!(class_patterns(&spec, 2).unwrap(), vec![0, 2]);
        assert!(class_patterns(&spec, 30).is_err());
    }

    #[test]
    fn default_spec_is_valid() {
        SynthSpec::default().validate().unwrap();
        assert_eq!(SynthSpec::default().band(), (10, 38));
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            SynthSpec { classes: 1, ..SynthSpec::default() },
            SynthSpec { classes: 31, ..SynthSpec::default() },
            SynthSpec { motifs: 3, gap: (18, 24), ..SynthSpec::default() },
            SynthSpec { gap: (4, 3), ..SynthSpec::default() },
            SynthSpec { motif_size: 30, ..SynthSpec::default() },
            SynthSpec { train_fraction: 1.0, ..SynthSpec::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn layout_respects_margins() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let l = MotifLayout::sample(&spec, &mut rng);
            let (a, b) = (l.origins[0], l.origins[1]);
            assert!(a.0 >= 8 && b.0 + 5 <= 40);
            assert!((18..=24).contains(&(b.0 - a.0)));
            assert!(a.1 >= 12 && a.1 + 5 <= 36 && b.1 + 5 <= 36);
        }
    }
}
