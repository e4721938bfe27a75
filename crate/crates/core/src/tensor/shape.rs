use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (aligned on the trailing axis).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape("broadcast", a, b)),
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Offsets into an input of shape `input` for every element of a broadcast
/// output of shape `output`, in row-major output order.
pub(crate) fn broadcast_offsets(input: &[usize], output: &[usize]) -> Vec<usize> {
    let rank = output.len();
    let in_strides = strides(input);
    // Effective stride per output axis: 0 where the input is broadcast.
    let mut eff = vec![0usize; rank];
    let pad = rank - input.len();
    for ax in 0..rank {
        if ax >= pad && input[ax - pad] != 1 {
            eff[ax] = in_strides[ax - pad];
        }
    }
    let total = numel(output);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < output[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Source offsets for a permuted copy: `out[i] = in[offsets[i]]` where the
/// output axis `k` is input axis `perm[k]`.
pub(crate) fn permute_offsets(input: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(input);
    let out_shape: Vec<usize> = perm.iter().map(|&p| input[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let total = numel(input);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

pub(crate) fn validate_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::invalid(
            "permute",
            format!("permutation {perm:?} for rank {rank}"),
        ));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::invalid(
                "permute",
                format!("permutation {perm:?} for rank {rank}"),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shapes(&[2, 3, 1], &[3, 1]).unwrap(), vec![2, 3, 1]);
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shapes(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_offsets_column() {
        // [2,1] broadcast to [2,3]
        assert_eq!(broadcast_offsets(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
        // [3] broadcast to [2,3]
        assert_eq!(broadcast_offsets(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn permute_offsets_transpose() {
        // [2,3] -> [3,2]
        assert_eq!(permute_offsets(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }
}
