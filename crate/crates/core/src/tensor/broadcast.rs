//! Numpy-style right-aligned broadcasting for binary elementwise ops.

/// Broadcast result shape, or `None` when the shapes are incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How the elements of an input map onto a broadcast output.
pub(crate) enum IndexMap {
    /// Input and output share a shape.
    Identity,
    /// Input repeats with period `n` (its shape is a suffix of the output's).
    Cyclic(usize),
    /// Arbitrary mapping, one input offset per output element.
    Explicit(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Self {
        if input == out {
            return IndexMap::Identity;
        }
        let n: usize = input.iter().product();
        let rank = out.len();
        let suffix = input.len() <= rank && input == &out[rank - input.len()..];
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if suffix || (trimmed.len() <= rank && trimmed == out[rank - trimmed.len()..]) {
            return IndexMap::Cyclic(n.max(1));
        }
        // Strides of the input aligned to the output; broadcast dims get 0.
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..input.len()).rev() {
            let o = rank - input.len() + i;
            strides[o] = if input[i] == 1 { 0 } else { acc };
            acc *= input[i];
        }
        let total: usize = out.iter().product();
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            idx.push(off);
            for d in (0..rank).rev() {
                counter[d] += 1;
                off += strides[d];
                if counter[d] < out[d] {
                    break;
                }
                off -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        IndexMap::Explicit(idx)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Cyclic(n) => i % n,
            IndexMap::Explicit(v) => v[i],
        }
    }
}

/// Sum an output-shaped gradient back into an input of `len` elements.
pub(crate) fn reduce_into(map: &IndexMap, grad: &[f64], len: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    match map {
        IndexMap::Identity => (0..grad.len()).map(&f).collect(),
        _ => {
            let mut out = vec![0.0; len];
            for i in 0..grad.len() {
                out[map.get(i)] += f(i);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[4, 2, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn explicit_map_matches_manual_indexing() {
        let map = IndexMap::new(&[2, 1], &[2, 3]);
        let got: Vec<usize> = (0..6).map(|i| map.get(i)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1]);
        let map = IndexMap::new(&[3, 1], &[2, 3, 2]);
        let got: Vec<usize> = (0..12).map(|i| map.get(i)).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn suffix_is_cyclic() {
        assert!(matches!(IndexMap::new(&[3], &[2, 3]), IndexMap::Cyclic(3)));
        assert!(matches!(IndexMap::new(&[1, 3], &[2, 3]), IndexMap::Cyclic(3)));
    }
}
