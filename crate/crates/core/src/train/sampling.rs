use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Picks `n` patch indices from a bag of `bag_size`.
///
/// Without replacement (returned sorted) when the bag is large enough,
/// otherwise `n` independent uniform draws.
pub fn sample_patches(bag_size: usize, n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if bag_size == 0 {
        return Err(Error::Domain("cannot sample from an empty bag".into()));
    }
    if n == 0 {
        return Err(Error::Domain("sample size must be at least 1".into()));
    }
    if bag_size < n {
        return Ok((0..n).map(|_| rng.below(bag_size)).collect());
    }
    if bag_size == n {
        return Ok((0..n).collect());
    }
    // Partial Fisher-Yates over a sparse swap table.
    let mut swapped = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let j = i + rng.below(bag_size - i);
        let at_j = *swapped.get(&j).unwrap_or(&j);
        let at_i = *swapped.get(&i).unwrap_or(&i);
        swapped.insert(j, at_i);
        out.push(at_j);
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_when_bag_is_large() {
        let mut rng = RngStream::new(3, "sample");
        let idx = sample_patches(100, 32, &mut rng).unwrap();
        assert_eq!(idx.len(), 32);
        let mut dedup = idx.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 32);
        assert!(idx.iter().all(|&i| i < 100));
    }

    #[test]
    fn with_replacement_when_bag_is_small() {
        let mut rng = RngStream::new(3, "sample");
        let idx = sample_patches(10, 32, &mut rng).unwrap();
        assert_eq!(idx.len(), 32);
        assert!(idx.iter().all(|&i| i < 10));
    }

    #[test]
    fn exact_size_covers_bag() {
        let mut rng = RngStream::new(3, "sample");
        assert_eq!(sample_patches(7, 7, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn empty_bag_rejected() {
        let mut rng = RngStream::new(3, "sample");
        assert!(matches!(sample_patches(0, 3, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn roughly_uniform() {
        let mut rng = RngStream::new(11, "sample");
        let mut counts = [0usize; 10];
        for _ in 0..2000 {
            for i in sample_patches(10, 3, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        // Expected 600 each, sd ~ 20.
        assert!(counts.iter().all(|&c| (500..700).contains(&c)), "{counts:?}");
    }
}
