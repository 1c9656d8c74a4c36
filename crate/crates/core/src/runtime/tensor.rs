use std::fmt;

use crate::frontend::ops::DType;

/// Dense row-major tensor. Values are held as `f64` regardless of dtype;
/// the dtype only drives accounting and comparisons.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub dtype: DType,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for k in (0..shape.len()).rev() {
        s[k] = acc;
        acc *= shape[k];
    }
    s
}

/// Strides of `src` viewed as broadcast to `out`: the first `batch` axes
/// align, the rest align to the right; broadcast axes get stride 0.
pub fn broadcast_strides(src: &[usize], out: &[usize], batch: usize) -> Option<Vec<usize>> {
    let st = strides(src);
    let mut res = vec![0; out.len()];
    let b = batch.min(src.len()).min(out.len());
    for k in 0..b {
        if src[k] == out[k] {
            res[k] = st[k];
        } else if src[k] != 1 {
            return None;
        }
    }
    let (rs, ro) = (src.len() - b, out.len() - b);
    if rs > ro {
        return None;
    }
    for k in 0..rs {
        let si = b + k;
        let oi = b + (ro - rs) + k;
        if src[si] == out[oi] {
            res[oi] = st[si];
        } else if src[si] != 1 {
            return None;
        }
    }
    Some(res)
}

pub fn broadcast_shape(a: &[usize], b: &[usize], batch: usize) -> Option<Vec<usize>> {
    if a.len() < batch || b.len() < batch {
        return None;
    }
    let merge = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    let mut out = Vec::new();
    for k in 0..batch {
        out.push(merge(a[k], b[k])?);
    }
    let (ra, rb) = (&a[batch..], &b[batch..]);
    let n = ra.len().max(rb.len());
    for k in 0..n {
        let x = (k + ra.len() >= n).then(|| ra[k + ra.len() - n]);
        let y = (k + rb.len() >= n).then(|| rb[k + rb.len() - n]);
        out.push(match (x, y) {
            (Some(x), Some(y)) => merge(x, y)?,
            (Some(x), None) => x,
            (None, Some(y)) => y,
            (None, None) => unreachable!(),
        });
    }
    Some(out)
}

/// Iterate over all multi-indices of `shape`, yielding the flat offsets
/// under each of the given stride vectors.
pub fn for_each_offset(shape: &[usize], stride_sets: &[&[usize]], mut f: impl FnMut(&[usize])) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    let mut offs = vec![0usize; stride_sets.len()];
    for _ in 0..n {
        f(&offs);
        for k in (0..shape.len()).rev() {
            idx[k] += 1;
            for (o, s) in offs.iter_mut().zip(stride_sets) {
                *o += s[k];
            }
            if idx[k] < shape[k] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(stride_sets) {
                *o -= s[k] * shape[k];
            }
            idx[k] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data, dtype }
    }

    pub fn full(shape: &[usize], v: f64, dtype: DType) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)], dtype }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0, DType::F64)
    }

    pub fn scalar(v: f64, dtype: DType) -> Self {
        Tensor { shape: vec![], data: vec![v], dtype }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, dtype: DType::F64 }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn bytes(&self) -> u64 {
        self.numel() as u64 * self.dtype.size_bytes()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Option<Tensor> {
        (numel(&shape) == self.numel()).then(|| Tensor { shape, data: self.data.clone(), dtype: self.dtype })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| f(*x)).collect(), dtype: self.dtype }
    }

    pub fn broadcast_to(&self, out: &[usize], batch: usize) -> Option<Tensor> {
        let st = broadcast_strides(&self.shape, out, batch)?;
        let mut data = Vec::with_capacity(numel(out));
        for_each_offset(out, &[&st], |o| data.push(self.data[o[0]]));
        Some(Tensor { shape: out.to_vec(), data, dtype: self.dtype })
    }

    /// Sum a broadcast result back down to `target` (inverse of broadcast_to).
    pub fn unbroadcast(&self, target: &[usize], batch: usize) -> Option<Tensor> {
        let st = broadcast_strides(target, &self.shape, batch)?;
        let mut data = vec![0.0; numel(target)];
        let mut k = 0;
        for_each_offset(&self.shape, &[&st], |o| {
            data[o[0]] += self.data[k];
            k += 1;
        });
        Some(Tensor { shape: target.to_vec(), data, dtype: self.dtype })
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let st = strides(&self.shape);
        let shape: Vec<usize> = perm.iter().map(|k| self.shape[*k]).collect();
        let pst: Vec<usize> = perm.iter().map(|k| st[*k]).collect();
        let mut data = Vec::with_capacity(self.numel());
        for_each_offset(&shape, &[&pst], |o| data.push(self.data[o[0]]));
        Tensor { shape, data, dtype: self.dtype }
    }

    /// Split into (outer, axis, inner) extents around `axis`.
    fn around(&self, axis: usize) -> (usize, usize, usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, self.shape[axis], inner)
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (o, n, i) = self.around(axis);
        let mut data = vec![0.0; o * i];
        for a in 0..o {
            for k in 0..n {
                for b in 0..i {
                    data[a * i + b] += self.data[(a * n + k) * i + b];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor { shape, data, dtype: self.dtype }
    }

    pub fn max_axis(&self, axis: usize) -> Tensor {
        let (o, n, i) = self.around(axis);
        let mut data = vec![f64::NEG_INFINITY; o * i];
        for a in 0..o {
            for k in 0..n {
                for b in 0..i {
                    let v = self.data[(a * n + k) * i + b];
                    if v > data[a * i + b] {
                        data[a * i + b] = v;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor { shape, data, dtype: self.dtype }
    }

    /// Apply `f` to every line along `axis` in place.
    pub fn map_lines(&self, axis: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
        let (o, n, i) = self.around(axis);
        let mut out = self.clone();
        let mut line = vec![0.0; n];
        for a in 0..o {
            for b in 0..i {
                for k in 0..n {
                    line[k] = self.data[(a * n + k) * i + b];
                }
                let r = f(&line);
                for k in 0..n {
                    out.data[(a * n + k) * i + b] = r[k];
                }
            }
        }
        out
    }

    /// Reduce every line along `axis` to one value.
    pub fn reduce_lines(&self, axis: usize, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let (o, n, i) = self.around(axis);
        let mut data = vec![0.0; o * i];
        let mut line = vec![0.0; n];
        for a in 0..o {
            for b in 0..i {
                for k in 0..n {
                    line[k] = self.data[(a * n + k) * i + b];
                }
                data[a * i + b] = f(&line);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor { shape, data, dtype: self.dtype }
    }

    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Tensor {
        let (o, n, i) = self.around(axis);
        let len = end.saturating_sub(start);
        let mut data = Vec::with_capacity(o * len * i);
        for a in 0..o {
            let base = (a * n + start) * i;
            data.extend_from_slice(&self.data[base..base + len * i]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor { shape, data, dtype: self.dtype }
    }

    pub fn index_axis(&self, axis: usize, k: usize) -> Tensor {
        let mut t = self.slice_axis(axis, k, k + 1);
        t.shape.remove(axis);
        t
    }

    /// Place `self` into a zero tensor of `shape` at offset `start` on `axis`.
    pub fn pad_axis(&self, shape: &[usize], axis: usize, start: usize) -> Tensor {
        let mut out = Tensor::full(shape, 0.0, self.dtype);
        let o = numel(&shape[..axis]);
        let n = shape[axis];
        let i = numel(&shape[axis + 1..]);
        let len = self.shape[axis];
        for a in 0..o {
            let dst = (a * n + start) * i;
            let src = a * len * i;
            out.data[dst..dst + len * i].copy_from_slice(&self.data[src..src + len * i]);
        }
        out
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Option<Tensor> {
        let first = parts.first()?;
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let o = numel(&shape[..axis]);
        let i = numel(&shape[axis + 1..]);
        let mut data = Vec::with_capacity(numel(&shape));
        for a in 0..o {
            for p in parts {
                if p.rank() != shape.len() {
                    return None;
                }
                let len = p.shape[axis] * i;
                data.extend_from_slice(&p.data[a * len..(a + 1) * len]);
            }
        }
        Some(Tensor { shape, data, dtype: first.dtype })
    }

    /// Stack equally shaped tensors along a new leading axis. `elem` gives
    /// the element shape when `parts` is empty.
    pub fn stack(parts: &[Tensor], elem: &[usize], dtype: DType) -> Option<Tensor> {
        let shape_el = parts.first().map(|p| p.shape.clone()).unwrap_or_else(|| elem.to_vec());
        let mut data = Vec::with_capacity(parts.len() * numel(&shape_el));
        for p in parts {
            if p.shape != shape_el {
                return None;
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(shape_el);
        Some(Tensor { shape, data, dtype: parts.first().map(|p| p.dtype).unwrap_or(dtype) })
    }

    /// Largest relative difference to `other` (shapes must match).
    pub fn rel_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                if a == b || (a.is_nan() && b.is_nan()) {
                    0.0
                } else {
                    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
                }
            })
            .fold(0.0, f64::max)
    }
}
