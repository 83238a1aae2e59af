use rand::seq::index;
use rand::Rng;

use crate::data::schema::Sticker;
use crate::error::{Error, Result};

/// Draws `k` distinct negatives uniformly without replacement from the pool
/// entries that differ from `truth` (by id and by image bytes), then inserts
/// the truth at a random position. Returns `(candidates, truth_index)`.
pub fn sample_negatives<R: Rng + ?Sized>(
    pool: &[Sticker],
    truth: &Sticker,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<Sticker>, usize)> {
    let eligible: Vec<&Sticker> = pool.iter().filter(|s| s.id != truth.id && s.image.data != truth.image.data).collect();
    if eligible.len() < k {
        return Err(Error::data(
            None,
            format!("sticker set of {} entries has {} non-truth stickers, {k} negatives requested", pool.len(), eligible.len()),
        ));
    }
    let picks = index::sample(rng, eligible.len(), k);
    let mut out: Vec<Sticker> = picks.iter().map(|i| eligible[i].clone()).collect();
    let pos = rng.random_range(0..=k);
    out.insert(pos, truth.clone());
    Ok((out, pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn sticker(i: u8) -> Sticker {
        Sticker { id: format!("s{i}"), image: Arc::new(Image::from_u8(1, 1, 1, &[i]).unwrap()) }
    }

    #[test]
    fn draws_distinct_negatives_and_one_positive() {
        let pool: Vec<Sticker> = (0..49).map(sticker).collect();
        let truth = pool[7].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, t) = sample_negatives(&pool, &truth, 9, &mut rng).unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!(c[t], truth);
        let mut ids: Vec<&str> = c.iter().map(|s| s.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert_eq!(c.iter().filter(|s| s.image.data == truth.image.data).count(), 1);
    }

    #[test]
    fn exhaustive_draw_uses_every_non_truth() {
        let pool: Vec<Sticker> = (0..10).map(sticker).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, _) = sample_negatives(&pool, &pool[0], 9, &mut rng).unwrap();
        let mut ids: Vec<String> = c.iter().map(|s| s.id.clone()).collect();
        ids.sort();
        let mut all: Vec<String> = pool.iter().map(|s| s.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
    }

    #[test]
    fn same_seed_same_order_and_small_pool_errors() {
        let pool: Vec<Sticker> = (0..20).map(sticker).collect();
        let run = |s| sample_negatives(&pool, &pool[3], 9, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(5), run(5));
        let err = sample_negatives(&pool[..5], &pool[0], 9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("5 entries"));
    }

    #[test]
    fn byte_identical_duplicate_of_truth_is_excluded() {
        let mut pool: Vec<Sticker> = (0..10).map(sticker).collect();
        pool.push(Sticker { id: "copy".into(), image: pool[0].image.clone() });
        for seed in 0..20 {
            let (c, t) = sample_negatives(&pool, &pool[0], 9, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for (i, s) in c.iter().enumerate() {
                assert!(i == t || s.image.data != pool[0].image.data);
            }
        }
    }
}
