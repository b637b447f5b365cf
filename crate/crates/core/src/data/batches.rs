use rand::seq::SliceRandom;
use rand::Rng;

use super::{Batch, Dataset};

/// Row indices split into batches of `batch_size`, after a Fisher–Yates
/// shuffle when `shuffle` is set. With `drop_small`, a final batch of fewer
/// than two rows is dropped.
pub fn batch_indices<R: Rng + ?Sized>(
    rows: usize,
    batch_size: usize,
    shuffle: bool,
    drop_small: bool,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..rows).collect();
    if shuffle {
        order.shuffle(rng);
    }
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if drop_small && out.last().is_some_and(|b| b.len() < 2) {
        log::debug!("dropping a trailing batch of {} row(s)", out.last().map_or(0, Vec::len));
        out.pop();
    }
    out
}

/// Iterator of batches over a dataset.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    plan: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> Batches<'a> {
    pub fn new<R: Rng + ?Sized>(dataset: &'a Dataset, batch_size: usize, shuffle: bool, drop_small: bool, rng: &mut R) -> Self {
        let plan = batch_indices(dataset.rows(), batch_size, shuffle, drop_small, rng);
        Self {
            dataset,
            plan: plan.into_iter(),
        }
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.plan.next().map(|idx| self.dataset.batch(&idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unshuffled_batches_are_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batch_indices(7, 3, false, false, &mut rng);
        assert_eq!(b, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
        let b = batch_indices(7, 3, false, true, &mut rng);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn same_seed_same_permutation() {
        let a = batch_indices(50, 8, true, false, &mut ChaCha8Rng::seed_from_u64(4));
        let b = batch_indices(50, 8, true, false, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }
}
