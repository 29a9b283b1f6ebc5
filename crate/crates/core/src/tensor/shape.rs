//! Pure shape algebra for the primitives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Zero padding applied before and after one spatial axis.
///
/// SAME pads so that `out = ceil(in / stride)`; an odd total puts the extra
/// element on the high side.
pub fn axis_padding(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
            (total / 2, total - total / 2)
        }
    }
}

pub fn conv_axis_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    if stride < 1 {
        return Err(Error::Parameter("stride must be >= 1".into()));
    }
    let (lo, hi) = axis_padding(input, kernel, stride, padding);
    let padded = input + lo + hi;
    if kernel == 0 || kernel > padded {
        return Err(Error::Parameter(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn matmul_shape(a: &[usize], w: &[usize]) -> Result<[usize; 2]> {
    match (a, w) {
        ([n, k1], [k2, m]) if k1 == k2 => Ok([*n, *m]),
        _ => Err(Error::dim("matmul", a, w)),
    }
}

/// Output shape of an NHWC convolution with a (Kh, Kw, Cin, Cout) kernel.
pub fn conv2d_shape(x: &[usize], k: &[usize], stride: usize, padding: Padding) -> Result<[usize; 4]> {
    let ([n, h, w, cin], [kh, kw, kcin, cout]) = (x, k) else {
        return Err(Error::dim("conv2d", x, k));
    };
    if cin != kcin {
        return Err(Error::dim("conv2d", x, k));
    }
    let oh = conv_axis_len(*h, *kh, stride, padding)?;
    let ow = conv_axis_len(*w, *kw, stride, padding)?;
    Ok([*n, oh, ow, *cout])
}

/// Set of tensor axes, stored as a bitmask (rank <= 8).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct AxisSet(u8);

impl AxisSet {
    pub const EMPTY: AxisSet = AxisSet(0);

    pub fn of(axes: &[usize]) -> Self {
        AxisSet(axes.iter().fold(0u8, |m, &a| m | (1 << a)))
    }

    pub fn contains(self, axis: usize) -> bool {
        self.0 & (1 << axis) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Every axis except the trailing feature/channel axis: (N,H,W) or (N).
    pub fn batch(rank: usize) -> Self {
        Self::of(&(0..rank.saturating_sub(1)).collect::<Vec<_>>())
    }

    /// Every axis except the leading batch axis: (H,W,C) or (D).
    pub fn layer(rank: usize) -> Self {
        Self::of(&(1..rank).collect::<Vec<_>>())
    }

    pub fn all(rank: usize) -> Self {
        Self::of(&(0..rank).collect::<Vec<_>>())
    }

    pub fn check(self, rank: usize) -> Result<()> {
        if rank < 8 && self.0 >> rank != 0 {
            return Err(Error::Usage(format!("axis set {:#b} exceeds rank {rank}", self.0)));
        }
        Ok(())
    }

    /// Shape after reducing these axes with keepdims.
    pub fn reduced_shape(self, shape: &[usize]) -> Vec<usize> {
        shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if self.contains(i) { 1 } else { d })
            .collect()
    }

    /// Number of elements folded into each reduced entry.
    pub fn count(self, shape: &[usize]) -> usize {
        shape
            .iter()
            .enumerate()
            .filter(|(i, _)| self.contains(*i))
            .map(|(_, &d)| d)
            .product()
    }
}

/// True when `small` broadcasts into `big`: same rank, each dim equal or 1.
pub fn broadcastable(big: &[usize], small: &[usize]) -> bool {
    big.len() == small.len() && big.iter().zip(small).all(|(&b, &s)| s == b || s == 1)
}

/// For each element of `big` (row-major), the flat index of the matching
/// element of the broadcast operand `small`.
pub(crate) fn broadcast_index(big: &[usize], small: &[usize]) -> Vec<usize> {
    let n: usize = big.iter().product();
    let rank = big.len();
    // Trailing-channel and leading-sample layouts are the common cases.
    let small_n: usize = small.iter().product();
    if small_n == 1 {
        return vec![0; n];
    }
    if small == big {
        return (0..n).collect();
    }
    if rank >= 1 && small[..rank - 1].iter().all(|&d| d == 1) && small[rank - 1] == big[rank - 1] {
        let c = big[rank - 1];
        return (0..n).map(|i| i % c).collect();
    }
    if rank >= 1 && small[1..].iter().all(|&d| d == 1) && small[0] == big[0] {
        let inner = n / big[0];
        return (0..n).map(|i| i / inner).collect();
    }
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if small[i] == 1 { 0 } else { acc };
        acc *= small[i];
    }
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < big[ax] {
                break;
            }
            off -= strides[ax] * big[ax];
            idx[ax] = 0;
        }
    }
    out
}
