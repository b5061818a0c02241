use std::ops::Range;

use crate::error::{LvrError, Result};
use crate::model::MixedSequence;
use crate::numerics::Real;

/// Sequences sharing one row; attention never crosses a boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch<S> {
    /// Caller-side ids of the packed sequences.
    pub ids: Vec<usize>,
    pub sequences: Vec<MixedSequence<S>>,
    pub boundaries: Vec<Range<usize>>,
    pub total_len: usize,
}

/// First-fit-decreasing bin packing of `lengths` into bins of capacity
/// `l_max`. Returns the member indices of each bin, in placement order.
pub fn pack_lengths(lengths: &[usize], l_max: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((i, &l)) = lengths.iter().enumerate().find(|(_, &l)| l > l_max) {
        return Err(LvrError::Capacity(format!("instance {i} has length {l} > L_max {l_max}")));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]).then(a.cmp(&b)));
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in order {
        match bins.iter_mut().find(|(used, _)| used + lengths[i] <= l_max) {
            Some((used, members)) => {
                *used += lengths[i];
                members.push(i);
            }
            None => bins.push((lengths[i], vec![i])),
        }
    }
    Ok(bins.into_iter().map(|(_, m)| m).collect())
}

pub fn pack_batches<S: Real>(sequences: Vec<MixedSequence<S>>, l_max: usize) -> Result<Vec<PackedBatch<S>>> {
    let lengths: Vec<usize> = sequences.iter().map(MixedSequence::len).collect();
    let bins = pack_lengths(&lengths, l_max)?;
    let mut slots: Vec<Option<MixedSequence<S>>> = sequences.into_iter().map(Some).collect();
    Ok(bins
        .into_iter()
        .map(|members| {
            let mut batch = PackedBatch { ids: Vec::new(), sequences: Vec::new(), boundaries: Vec::new(), total_len: 0 };
            for i in members {
                let seq = slots[i].take().expect("each index packed once");
                batch.boundaries.push(batch.total_len..batch.total_len + seq.len());
                batch.total_len += seq.len();
                batch.ids.push(i);
                batch.sequences.push(seq);
            }
            batch
        })
        .collect())
}
