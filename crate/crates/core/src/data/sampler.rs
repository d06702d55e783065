use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("batch size {batch} is not a positive multiple of per-class count {per_class}")]
    Shape { batch: usize, per_class: usize },
    #[error("class {class} has {count} samples, fewer than {per_class} per batch")]
    SmallClass { class: usize, count: usize, per_class: usize },
    #[error("{classes} classes cannot fill batches of {needed} distinct classes")]
    TooFewClasses { classes: usize, needed: usize },
}

/// One epoch of balanced batches: each batch holds `batch / per_class`
/// distinct classes with `per_class` samples each, drawn without
/// replacement. Groups that cannot complete a batch are dropped.
pub fn group_sampler<R: Rng + ?Sized>(
    labels: &[usize],
    batch: usize,
    per_class: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, SamplerError> {
    if per_class == 0 || batch == 0 || batch % per_class != 0 {
        return Err(SamplerError::Shape { batch, per_class });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if let Some((&class, idx)) = by_class.iter().find(|(_, v)| v.len() < per_class) {
        return Err(SamplerError::SmallClass { class, count: idx.len(), per_class });
    }
    let needed = batch / per_class;
    if by_class.len() < needed {
        return Err(SamplerError::TooFewClasses { classes: by_class.len(), needed });
    }

    let mut groups: Vec<(usize, Vec<Vec<usize>>)> = Vec::with_capacity(by_class.len());
    let mut dropped = 0;
    for (class, mut idx) in by_class {
        idx.shuffle(rng);
        dropped += idx.len() % per_class;
        let chunks: Vec<Vec<usize>> = idx.chunks_exact(per_class).map(<[usize]>::to_vec).collect();
        groups.push((class, chunks));
    }

    let mut batches = Vec::new();
    loop {
        let mut open: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].1.is_empty()).collect();
        if open.len() < needed {
            dropped += open.iter().map(|&g| groups[g].1.len() * per_class).sum::<usize>();
            break;
        }
        // Fullest classes first so every group gets used when possible;
        // the shuffle randomises ties.
        open.shuffle(rng);
        open.sort_by_key(|&g| std::cmp::Reverse(groups[g].1.len()));
        let mut b = Vec::with_capacity(batch);
        for &g in &open[..needed] {
            b.extend(groups[g].1.pop().expect("open group"));
        }
        batches.push(b);
    }
    if dropped > 0 {
        log::debug!("group sampler dropped {dropped} samples this epoch");
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(k: usize, n: usize) -> Vec<usize> {
        (0..k).flat_map(|c| std::iter::repeat(c).take(n)).collect()
    }

    #[test]
    fn balanced_batches() {
        let l = labels(8, 32);
        let batches = group_sampler(&l, 16, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batches.len(), 16);
        for b in &batches {
            let mut counts = BTreeMap::new();
            for &i in b {
                *counts.entry(l[i]).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 4);
            assert!(counts.values().all(|&c| c == 4));
        }
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 256);
    }

    #[test]
    fn single_class_batches() {
        let l = labels(3, 8);
        let batches = group_sampler(&l, 4, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(batches.len(), 6);
        assert!(batches.iter().all(|b| b.iter().all(|&i| l[i] == l[b[0]])));
    }

    #[test]
    fn deterministic_given_seed() {
        let l = labels(5, 9);
        let a = group_sampler(&l, 8, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = group_sampler(&l, 8, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn leftovers_are_dropped_without_duplicates() {
        // Uneven class sizes leave groups that cannot form a full batch.
        let mut l = labels(4, 4);
        l.extend(std::iter::repeat(0).take(9));
        let batches = group_sampler(&l, 8, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut seen: Vec<usize> = batches.concat();
        let n = seen.len();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), n);
        assert!(batches.iter().all(|b| b.len() == 8));
    }

    #[test]
    fn preconditions() {
        let l = labels(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(group_sampler(&l, 10, 4, &mut rng), Err(SamplerError::Shape { .. })));
        assert!(matches!(group_sampler(&l, 8, 0, &mut rng), Err(SamplerError::Shape { .. })));
        assert!(matches!(group_sampler(&l, 8, 5, &mut rng), Err(SamplerError::Shape { .. })));
        assert!(matches!(group_sampler(&l, 10, 5, &mut rng), Err(SamplerError::SmallClass { .. })));
        assert!(matches!(group_sampler(&l, 20, 4, &mut rng), Err(SamplerError::TooFewClasses { .. })));
    }
}
