use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MultimodalSample, RawSample};
use crate::error::{Error, Result};

/// Access to the image part of a sample.
pub trait ImageSlot {
    fn zero_image(&mut self);
    fn swap_image(&mut self, other: &mut Self);
    fn class(&self) -> Option<u32>;
}

impl ImageSlot for RawSample {
    fn zero_image(&mut self) {
        self.image_features.iter_mut().flatten().for_each(|x| *x = 0.0);
        self.image_present = false;
    }

    fn swap_image(&mut self, other: &mut Self) {
        core::mem::swap(&mut self.image_features, &mut other.image_features);
        core::mem::swap(&mut self.image_present, &mut other.image_present);
    }

    fn class(&self) -> Option<u32> {
        self.class
    }
}

impl ImageSlot for MultimodalSample {
    fn zero_image(&mut self) {
        self.regions.iter_mut().for_each(|x| *x = 0.0);
        self.image_present = false;
    }

    fn swap_image(&mut self, other: &mut Self) {
        core::mem::swap(&mut self.regions, &mut other.regions);
        core::mem::swap(&mut self.feature_dim, &mut other.feature_dim);
        core::mem::swap(&mut self.image_present, &mut other.image_present);
    }

    fn class(&self) -> Option<u32> {
        self.class
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Zero the images of `round(rate * n)` samples chosen by `seed`.
pub fn mask_images<S: ImageSlot + Clone>(corpus: &[S], rate: f64, seed: u64) -> Result<Vec<S>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("mask_images", format!("rate {rate} outside [0, 1]")));
    }
    let mut out = corpus.to_vec();
    let count = libm::round(rate * corpus.len() as f64) as usize;
    for &i in shuffled(corpus.len(), seed).iter().take(count) {
        out[i].zero_image();
    }
    Ok(out)
}

/// Perturbed corpus plus the swapped index pairs.
pub type Swapped<S> = (Vec<S>, Vec<(usize, usize)>);

/// Exchange images between `pairs` disjoint sample pairs whose classes differ.
///
/// Returns the perturbed corpus and the swapped index pairs. Applying the same
/// swaps again restores the original corpus.
pub fn unpair_swap<S: ImageSlot + Clone>(corpus: &[S], pairs: usize, seed: u64) -> Result<Swapped<S>> {
    if pairs * 2 > corpus.len() {
        return Err(Error::invalid(
            "unpair_swap",
            format!("{pairs} pairs requested from {} samples", corpus.len()),
        ));
    }
    let order = shuffled(corpus.len(), seed);
    let mut used = alloc::vec![false; corpus.len()];
    let mut chosen = Vec::with_capacity(pairs);
    for (k, &i) in order.iter().enumerate() {
        if chosen.len() == pairs {
            break;
        }
        if used[i] {
            continue;
        }
        let Some(ci) = corpus[i].class() else { continue };
        let partner = order[k + 1..]
            .iter()
            .copied()
            .find(|&j| !used[j] && corpus[j].class().is_some_and(|cj| cj != ci));
        if let Some(j) = partner {
            used[i] = true;
            used[j] = true;
            chosen.push((i.min(j), i.max(j)));
        }
    }
    if chosen.len() < pairs {
        return Err(Error::invalid(
            "unpair_swap",
            format!("only {} cross-class pairs available, {} short of {pairs}", chosen.len(), pairs - chosen.len()),
        ));
    }
    let mut out = corpus.to_vec();
    apply_swaps(&mut out, &chosen);
    Ok((out, chosen))
}

/// Swap images for each index pair in place.
pub fn apply_swaps<S: ImageSlot>(corpus: &mut [S], pairs: &[(usize, usize)]) {
    for &(i, j) in pairs {
        let (lo, hi) = (i.min(j), i.max(j));
        let (left, right) = corpus.split_at_mut(hi);
        left[lo].swap_image(&mut right[0]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn corpus(n: usize) -> Vec<RawSample> {
        (0..n)
            .map(|i| RawSample {
                id: i.to_string(),
                text: "a b".into(),
                summary: "a".into(),
                image_features: vec![vec![i as f64 + 1.0, 2.0]],
                phrases: None,
                image_present: true,
                class: Some((i % 4) as u32),
            })
            .collect()
    }

    #[test]
    fn mask_counts() {
        let c = corpus(100);
        assert_eq!(mask_images(&c, 0.0, 1).unwrap(), c);
        let all = mask_images(&c, 1.0, 1).unwrap();
        assert!(all.iter().all(|s| !s.image_present && s.image_features[0] == [0.0, 0.0]));
        let half = mask_images(&c, 0.5, 3).unwrap();
        assert_eq!(half.iter().filter(|s| !s.image_present).count(), 50);
        assert!(mask_images(&c, 1.5, 3).is_err());
    }

    #[test]
    fn swap_alters_exactly_forty() {
        let c = corpus(100);
        let (swapped, pairs) = unpair_swap(&c, 20, 9).unwrap();
        assert_eq!(pairs.len(), 20);
        let changed = c.iter().zip(&swapped).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 40);
        for &(i, j) in &pairs {
            assert_ne!(c[i].class, c[j].class);
        }
    }

    #[test]
    fn swap_twice_is_identity() {
        let c = corpus(30);
        let (mut swapped, pairs) = unpair_swap(&c, 10, 4).unwrap();
        apply_swaps(&mut swapped, &pairs);
        assert_eq!(swapped, c);
    }

    #[test]
    fn zero_pairs_is_identity() {
        let c = corpus(10);
        assert_eq!(unpair_swap(&c, 0, 1).unwrap().0, c);
    }

    #[test]
    fn shortfall_is_reported() {
        let mut c = corpus(10);
        c.iter_mut().for_each(|s| s.class = Some(0));
        let err = unpair_swap(&c, 2, 1).unwrap_err().to_string();
        assert!(err.contains("2 short"), "{err}");
        assert!(unpair_swap(&c, 6, 1).is_err());
    }
}
