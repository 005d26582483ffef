//! Padded, masked batches of variable-length lists.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Item, RankedList};
use crate::{Error, Result, Scalar};

/// A batch of lists padded to the longest member. Padded positions hold
/// zero feature vectors and a false mask.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    /// (num_lists, l_max, d_x)
    pub features: Array3<F>,
    /// (num_lists, l_max); true marks a real item.
    pub mask: Array2<bool>,
    /// Explicit labels aligned to the mask (0 at padding).
    pub explicit: Array2<u8>,
    /// Implicit labels aligned to the mask; present only when every list
    /// in the batch carries them.
    pub implicit: Option<Array2<u8>>,
    pub listwide: Vec<Option<u8>>,
    pub lengths: Vec<usize>,
    pub query_ids: Vec<String>,
}

impl<F: Scalar> Batch<F> {
    pub fn num_lists(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn l_max(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn d_x(&self) -> usize {
        self.features.shape()[2]
    }

    /// Mask-filtered read-back into plain lists.
    pub fn to_lists(&self) -> Vec<RankedList<F>> {
        (0..self.num_lists())
            .map(|b| {
                let items = (0..self.lengths[b])
                    .map(|i| Item {
                        features: self.features.slice(ndarray::s![b, i, ..]).to_vec(),
                        explicit_label: self.explicit[[b, i]],
                        implicit_label: self.implicit.as_ref().map(|y| y[[b, i]]),
                    })
                    .collect();
                RankedList {
                    query_id: self.query_ids[b].clone(),
                    items,
                    listwide: self.listwide[b],
                }
            })
            .collect()
    }
}

fn build_batch<F: Scalar>(lists: &[&RankedList<F>]) -> Batch<F> {
    let n = lists.len();
    let l_max = lists.iter().map(|l| l.len()).max().unwrap_or(0);
    let d_x = lists[0].items[0].features.len();
    let mut features = Array3::zeros((n, l_max, d_x));
    let mut mask = Array2::from_elem((n, l_max), false);
    let mut explicit = Array2::zeros((n, l_max));
    let all_implicit = lists
        .iter()
        .all(|l| l.items.iter().all(|i| i.implicit_label.is_some()));
    let mut implicit = all_implicit.then(|| Array2::zeros((n, l_max)));

    for (b, list) in lists.iter().enumerate() {
        for (i, item) in list.items.iter().enumerate() {
            for (j, &v) in item.features.iter().enumerate() {
                features[[b, i, j]] = v;
            }
            mask[[b, i]] = true;
            explicit[[b, i]] = item.explicit_label;
            if let Some(y) = &mut implicit {
                y[[b, i]] = item.implicit_label.unwrap();
            }
        }
    }

    Batch {
        features,
        mask,
        explicit,
        implicit,
        listwide: lists.iter().map(|l| l.listwide).collect(),
        lengths: lists.iter().map(|l| l.len()).collect(),
        query_ids: lists.iter().map(|l| l.query_id.clone()).collect(),
    }
}

/// Groups lists into padded batches. With a shuffle RNG the list order is
/// permuted first; the grouping itself is deterministic.
pub fn batch_lists<F: Scalar>(
    lists: &[RankedList<F>],
    batch_size: usize,
    shuffle: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Batch<F>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if lists.is_empty() {
        return Ok(Vec::new());
    }
    for list in lists {
        if list.is_empty() {
            return Err(Error::EmptyInput(format!("list `{}` has no items", list.query_id)));
        }
    }
    let mut order: Vec<usize> = (0..lists.len()).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&RankedList<F>> = chunk.iter().map(|&i| &lists[i]).collect();
            build_batch(&members)
        })
        .collect())
}
