//! Property tests over the filter, gains, losses, metrics and perturbations.

use cfsum_core::data::{apply_swaps, chunk_phrases, mask_images, unpair_swap, validate_spans, ImageSlot, Span};
use cfsum_core::metrics::{lcs_len, rouge_l, rouge_n};
use cfsum_core::phrase::{phrase_gain, project_gain};
use cfsum_core::prefilter::{apply_mask, consistency};
use cfsum_core::tensor::kernels::softmax;
use cfsum_core::tensor::{ParamStore, Tape};
use cfsum_core::word::word_gain;
use proptest::prelude::*;

fn stochastic(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, c * c).prop_map(move |mut w| {
        for row in w.chunks_mut(c) {
            let s: f64 = row.iter().sum::<f64>() + 1e-3;
            row.iter_mut().for_each(|x| *x = (*x + 1e-3 / c as f64) / s);
        }
        w
    })
}

fn attention_case() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..10).prop_flat_map(|c| (Just(c), 1..=c, stochastic(c)))
}

proptest! {
    #[test]
    fn masked_rows_are_stochastic((c, t, a) in attention_case()) {
        let out = apply_mask(&a, c, t, false).unwrap();
        for row in out.chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        // text rows never look at the image
        for r in 0..t {
            prop_assert!(out[r * c + t..(r + 1) * c].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn masking_is_idempotent((c, t, a) in attention_case()) {
        let once = apply_mask(&a, c, t, false).unwrap();
        let twice = apply_mask(&once, c, t, false).unwrap();
        for (x, y) in once.iter().zip(&twice) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(apply_mask(&a, c, t, true).unwrap(), a);
    }

    #[test]
    fn restricted_softmax_identity(logits in prop::collection::vec(-20.0f64..20.0, 2..12), cut in 1usize..12) {
        let t = cut.min(logits.len());
        let full = softmax(&logits);
        let mass: f64 = full[..t].iter().sum();
        let renorm: Vec<f64> = full[..t].iter().map(|x| x / mass).collect();
        let sub = softmax(&logits[..t]);
        for (x, y) in renorm.iter().zip(&sub) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant(logits in prop::collection::vec(-30.0f64..30.0, 1..10), shift in -100.0f64..100.0) {
        let a = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let b = softmax(&shifted);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_in_range(
        rows in 1usize..6,
        uni in prop::collection::vec(-3.0f64..3.0, 4 * 6),
        bi in prop::collection::vec(-3.0f64..3.0, 4 * 9),
        alpha in -1.0f64..1.0,
    ) {
        let d = consistency(&uni[..rows * 4], &bi, 4, alpha).unwrap();
        prop_assert!(d.consistency >= -1.0 - 1e-12 && d.consistency <= 1.0 + 1e-12);
        prop_assert_eq!(d.keep, d.consistency >= alpha);
    }

    #[test]
    fn phrase_gain_antisymmetric(
        a in prop::collection::vec(0.0f64..1.0, 1..8),
        seed in prop::collection::vec(0.0f64..1.0, 8),
        truth in prop::collection::vec(0.0f64..1.0, 8),
    ) {
        let k = a.len();
        let b = &seed[..k];
        let r = &truth[..k];
        let g = phrase_gain(&a, b, r).unwrap();
        let h = phrase_gain(b, &a, r).unwrap();
        for (x, y) in g.iter().zip(&h) {
            prop_assert!((x + y).abs() < 1e-15);
        }
        let z = phrase_gain(&a, &a, r).unwrap();
        prop_assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn word_gain_zero_for_equal_streams(p in prop::collection::vec(0.01f64..0.99, 1..10), bits in prop::collection::vec(any::<bool>(), 10)) {
        let targets: Vec<f64> = bits[..p.len()].iter().map(|&b| f64::from(u8::from(b))).collect();
        let g = word_gain(&p, &p, &targets).unwrap();
        prop_assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projection_takes_max_over_cover(len in 1usize..15, k in 1usize..5, gains in prop::collection::vec(-2.0f64..2.0, 15)) {
        let spans = chunk_phrases(len, k);
        prop_assert!(validate_spans(&spans, len).is_ok());
        let g = &gains[..spans.len()];
        let tok = project_gain(g, &spans, len).unwrap();
        for (j, &v) in tok.iter().enumerate() {
            let best = spans.iter().zip(g).filter(|(s, _)| s.contains(j)).map(|(_, &x)| x).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(v, best);
        }
    }

    #[test]
    fn overlapping_spans_project_to_max(g in prop::collection::vec(-2.0f64..2.0, 2)) {
        let spans = [Span::new(0, 3), Span::new(2, 4)];
        let tok = project_gain(&g, &spans, 4).unwrap();
        prop_assert_eq!(tok[2], g[0].max(g[1]));
        prop_assert_eq!(tok[3], g[1]);
    }

    #[test]
    fn rouge_self_is_perfect(x in prop::collection::vec(0u8..5, 1..20)) {
        prop_assert_eq!(rouge_n(&x, &x, 1).unwrap(), 100.0);
        prop_assert_eq!(rouge_l(&x, &x).unwrap(), 100.0);
        if x.len() >= 2 {
            prop_assert_eq!(rouge_n(&x, &x, 2).unwrap(), 100.0);
        }
    }

    #[test]
    fn scores_bounded(h in prop::collection::vec(0u8..4, 0..12), r in prop::collection::vec(0u8..4, 1..12)) {
        for s in [rouge_n(&h, &r, 1).unwrap(), rouge_n(&h, &r, 2).unwrap(), rouge_l(&h, &r).unwrap()] {
            prop_assert!((0.0..=100.0).contains(&s));
        }
        prop_assert!(lcs_len(&h, &r) <= h.len().min(r.len()));
    }

    #[test]
    fn appending_a_match_keeps_recall(h in prop::collection::vec(0u8..4, 0..10), r in prop::collection::vec(0u8..4, 1..10), pick in 0usize..10) {
        let recall = |h: &[u8]| {
            let mut rc = r.clone();
            let mut hit = 0;
            for x in h {
                if let Some(i) = rc.iter().position(|y| y == x) {
                    rc.remove(i);
                    hit += 1;
                }
            }
            hit as f64 / r.len() as f64
        };
        let mut longer = h.clone();
        longer.push(r[pick % r.len()]);
        prop_assert!(recall(&longer) >= recall(&h));
    }

    #[test]
    fn nonnegative_losses(p in prop::collection::vec(0.0f64..1.0, 1..10), bits in prop::collection::vec(any::<bool>(), 10)) {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let n = p.len();
        let targets: Vec<f64> = bits[..n].iter().map(|&b| f64::from(u8::from(b))).collect();
        let x = t.input(&[n, 1], p.clone()).unwrap();
        let bce = t.bce(x, &targets).unwrap();
        let y = t.constant(&[n, 1], targets.clone()).unwrap();
        let mse = t.mse(x, y).unwrap();
        prop_assert!(t.scalar(bce) >= 0.0 && t.scalar(mse) >= 0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    class: u32,
    image: Option<u32>,
}

impl ImageSlot for Slot {
    fn zero_image(&mut self) {
        self.image = None;
    }
    fn swap_image(&mut self, other: &mut Self) {
        core::mem::swap(&mut self.image, &mut other.image);
    }
    fn class(&self) -> Option<u32> {
        Some(self.class)
    }
}

fn slots(n: usize) -> Vec<Slot> {
    (0..n as u32).map(|i| Slot { class: i % 4, image: Some(i) }).collect()
}

proptest! {
    #[test]
    fn mask_count_matches_rate(n in 1usize..60, rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let masked = mask_images(&slots(n), rate, seed).unwrap();
        let gone = masked.iter().filter(|s| s.image.is_none()).count();
        prop_assert_eq!(gone, (rate * n as f64).round() as usize);
    }

    #[test]
    fn unpairing_twice_is_identity(pairs in 1usize..10, seed in any::<u64>()) {
        let corpus = slots(40);
        let (swapped, chosen) = unpair_swap(&corpus, pairs, seed).unwrap();
        let changed = corpus.iter().zip(&swapped).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, 2 * pairs);
        for &(a, b) in &chosen {
            prop_assert_ne!(corpus[a].class, corpus[b].class);
        }
        let mut back = swapped.clone();
        apply_swaps(&mut back, &chosen);
        prop_assert_eq!(back, corpus);
    }
}
