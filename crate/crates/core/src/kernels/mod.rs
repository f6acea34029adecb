//! Raw numeric kernels over [`Tensor`](crate::tensor::Tensor) buffers.
//!
//! Every kernel writes each output element from exactly one task with a fixed
//! accumulation order, so results are bit-identical for any thread count.

pub mod conv;
pub mod matmul;
pub mod norm;
pub mod reduce;
pub mod ska;

/// Output index range `[lo, hi)` such that `o * stride + offset` lands inside `[0, in_len)`.
#[inline]
pub(crate) fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let max_in = in_len as isize - 1 - offset;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Minimum number of planes per parallel task so that each task does at least
/// a few thousand multiply-adds.
#[inline]
pub(crate) fn min_planes(work_per_plane: usize) -> usize {
    (16_384 / work_per_plane.max(1)).max(1)
}

#[cfg(test)]
mod tests {
    use super::valid_range;

    #[test]
    fn valid_range_matches_brute_force() {
        for in_len in 1..9usize {
            for stride in 1..4usize {
                for offset in -4isize..4 {
                    for out_len in 0..10usize {
                        let expect: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let (lo, hi) = valid_range(out_len, in_len, stride, offset);
                        assert_eq!(
                            (lo..hi).collect::<Vec<_>>(),
                            expect,
                            "{in_len} {stride} {offset} {out_len}"
                        );
                    }
                }
            }
        }
    }
}
