use rand::seq::SliceRandom;
use rand::Rng;

use crate::model::Example;

/// Groups example indices into batches whose sentence count times longest
/// sequence stays within `batch_tokens`. Indices are bucketed by length
/// (random order among equal lengths) and the batch order is shuffled.
pub fn make_batches<R: Rng + ?Sized>(examples: &[Example], batch_tokens: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let len = |e: &Example| e.src.len().max(e.tgt_in.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| len(&examples[i]));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let l = len(&examples[i]);
        let new_longest = longest.max(l);
        if !current.is_empty() && (current.len() + 1) * new_longest > batch_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(l);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covers_every_example_within_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let examples: Vec<Example> = (0..300)
            .map(|i| {
                let n = 1 + (i * 7) % 23;
                Example::unweighted(&vec![5; n], &vec![6; 1 + (i % 5)])
            })
            .collect();
        let batches = make_batches(&examples, 64, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..300).collect::<Vec<_>>());
        for b in &batches {
            let longest = b.iter().map(|&i| examples[i].src.len().max(examples[i].tgt_in.len())).max().unwrap();
            assert!(b.len() * longest <= 64);
        }
        let again = make_batches(&examples, 64, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(batches, again);
    }
}
