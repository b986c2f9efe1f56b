//! Fixed sparse linear maps over flattened tensors.
//!
//! Every structural operation in the engine (permutation, im2col, pooling,
//! bilinear resampling, row gathers, concatenation) is expressed as a
//! `SparseMap`. A map is linear, so its adjoint is its transpose, and the
//! transpose of the transpose is the original map. That closure is what lets
//! gradients of these operations be differentiated again.

use std::cell::{OnceCell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

/// A sparse matrix in CSR form mapping `in_len` inputs to `out_len` outputs.
#[derive(Debug)]
pub struct SparseMap {
    out_len: usize,
    in_len: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    transpose: OnceCell<Rc<SparseMap>>,
}

impl SparseMap {
    /// Builds a map from per-output-row entries `(input index, weight)`.
    pub fn from_rows(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let out_len = rows.len();
        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(out_len + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                assert!(c < in_len, "sparse column {c} out of range {in_len}");
                cols.push(c as u32);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        SparseMap {
            out_len,
            in_len,
            row_ptr,
            cols,
            vals,
            transpose: OnceCell::new(),
        }
    }

    /// A gather: output `i` copies input `src[i]`, or is zero when `src[i]` is `None`.
    pub fn gather(in_len: usize, src: &[Option<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(src.len() + 1);
        let mut cols = Vec::with_capacity(src.len());
        row_ptr.push(0);
        for s in src {
            if let Some(c) = *s {
                assert!(c < in_len, "gather index {c} out of range {in_len}");
                cols.push(c as u32);
            }
            row_ptr.push(cols.len());
        }
        let vals = vec![1.0; cols.len()];
        SparseMap {
            out_len: src.len(),
            in_len,
            row_ptr,
            cols,
            vals,
            transpose: OnceCell::new(),
        }
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_len, "sparse map input length");
        self.row_ptr
            .windows(2)
            .map(|w| {
                let (cols, vals) = (&self.cols[w[0]..w[1]], &self.vals[w[0]..w[1]]);
                cols.iter().zip(vals).fold(0.0, |acc, (&c, &v)| acc + v * x[c as usize])
            })
            .collect()
    }

    /// The adjoint map, built once and cached.
    pub fn transposed(&self) -> Rc<SparseMap> {
        self.transpose
            .get_or_init(|| Rc::new(self.build_transpose()))
            .clone()
    }

    fn build_transpose(&self) -> SparseMap {
        let mut counts = vec![0usize; self.in_len + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.in_len {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut cols = vec![0u32; self.cols.len()];
        let mut vals = vec![0.0; self.vals.len()];
        // Rows are visited in increasing order, so each transposed row keeps
        // a fixed, ascending column order. Summation order is therefore stable.
        for r in 0..self.out_len {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k] as usize;
                let slot = next[c];
                cols[slot] = r as u32;
                vals[slot] = self.vals[k];
                next[c] += 1;
            }
        }
        SparseMap {
            out_len: self.in_len,
            in_len: self.out_len,
            row_ptr,
            cols,
            vals,
            transpose: OnceCell::new(),
        }
    }
}

thread_local! {
    static CACHE: RefCell<HashMap<String, Rc<SparseMap>>> = RefCell::new(HashMap::new());
}

fn cached(key: String, build: impl FnOnce() -> SparseMap) -> Rc<SparseMap> {
    if let Some(m) = CACHE.with(|c| c.borrow().get(&key).cloned()) {
        return m;
    }
    let m = Rc::new(build());
    CACHE.with(|c| c.borrow_mut().insert(key, m.clone()));
    m
}

/// Drops every cached structural map on this thread.
pub fn clear_cache() {
    CACHE.with(|c| c.borrow_mut().clear());
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(shape: &[usize], perm: &[usize]) -> Rc<SparseMap> {
    assert_eq!(shape.len(), perm.len());
    let key = format!("permute{shape:?}{perm:?}");
    cached(key, || {
        let in_strides = strides(shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n: usize = shape.iter().product();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            let off: usize = idx
                .iter()
                .zip(perm)
                .map(|(&i, &p)| i * in_strides[p])
                .sum();
            src.push(Some(off));
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        SparseMap::gather(n, &src)
    })
}

/// Unfolds `[B, C, H, W]` into columns `[C*k*k, B*H'*W']` for a stride-1
/// square convolution with zero padding `pad`.
pub fn im2col(b: usize, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Rc<SparseMap> {
    let key = format!("im2col{b},{c},{h},{w},{k},{pad}");
    cached(key, || {
        let ho = h + 2 * pad + 1 - k;
        let wo = w + 2 * pad + 1 - k;
        let ncols = b * ho * wo;
        let mut src = Vec::with_capacity(c * k * k * ncols);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    for bi in 0..b {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    src.push(None);
                                } else {
                                    src.push(Some(
                                        ((bi * c + ci) * h + iy as usize) * w + ix as usize,
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
        SparseMap::gather(b * c * h * w, &src)
    })
}

/// Non-overlapping average pooling with window `k` over `[N, H, W]` planes.
pub fn avg_pool(planes: usize, h: usize, w: usize, k: usize) -> Rc<SparseMap> {
    let key = format!("avgpool{planes},{h},{w},{k}");
    cached(key, || {
        let (ho, wo) = (h / k, w / k);
        let weight = 1.0 / (k * k) as f64;
        let mut rows = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut row = Vec::with_capacity(k * k);
                    for dy in 0..k {
                        for dx in 0..k {
                            row.push(((p * h + oy * k + dy) * w + ox * k + dx, weight));
                        }
                    }
                    rows.push(row);
                }
            }
        }
        SparseMap::from_rows(planes * h * w, rows)
    })
}

/// Interpolation weights along one axis with corner alignment:
/// output `i` samples source coordinate `i * (n_in - 1) / (n_out - 1)`.
pub fn bilinear_weights(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 2]> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                return [(0, 1.0), (0, 0.0)];
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let t = pos - lo as f64;
            [(lo, 1.0 - t), (hi, t)]
        })
        .collect()
}

/// Bilinear resampling of `[N, H, W]` planes to `[N, H', W']` (corner aligned).
pub fn bilinear(planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Rc<SparseMap> {
    let key = format!("bilinear{planes},{h},{w},{ho},{wo}");
    cached(key, || {
        let wy = bilinear_weights(h, ho);
        let wx = bilinear_weights(w, wo);
        let mut rows = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for y in wy.iter() {
                for x in wx.iter() {
                    let mut row = Vec::with_capacity(4);
                    for &(iy, ay) in y {
                        for &(ix, ax) in x {
                            let v = ay * ax;
                            if v != 0.0 {
                                row.push(((p * h + iy) * w + ix, v));
                            }
                        }
                    }
                    rows.push(row);
                }
            }
        }
        SparseMap::from_rows(planes * h * w, rows)
    })
}

/// Gathers rows of a `[rows, cols]` table: output is `[indices.len(), cols]`.
pub fn gather_rows(rows: usize, cols: usize, indices: &[usize]) -> SparseMap {
    let mut src = Vec::with_capacity(indices.len() * cols);
    for &r in indices {
        assert!(r < rows, "row index {r} out of range {rows}");
        for c in 0..cols {
            src.push(Some(r * cols + c));
        }
    }
    SparseMap::gather(rows * cols, &src)
}

/// Places a `[outer, len, inner]` block at offset `start` along the middle
/// axis of a `[outer, total, inner]` tensor (zeros elsewhere).
pub fn embed_block(outer: usize, len: usize, inner: usize, total: usize, start: usize) -> Rc<SparseMap> {
    let key = format!("embed{outer},{len},{inner},{total},{start}");
    cached(key, || {
        let mut src = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in 0..total {
                for i in 0..inner {
                    if t >= start && t < start + len {
                        src.push(Some((o * len + (t - start)) * inner + i));
                    } else {
                        src.push(None);
                    }
                }
            }
        }
        SparseMap::gather(outer * len * inner, &src)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_of_transpose_applies_like_original() {
        let m = SparseMap::from_rows(3, vec![vec![(0, 1.0), (2, 2.0)], vec![(1, -1.0)]]);
        let t = m.transposed();
        let tt = t.transposed();
        let x = [1.0, 2.0, 3.0];
        assert_eq!(m.apply(&x), tt.apply(&x));
        assert_eq!(t.apply(&[1.0, 1.0]), vec![1.0, -1.0, 2.0]);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let m = im2col(1, 1, 3, 3, 3, 1);
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let cols = m.apply(&x);
        // Row for (ky=1,kx=1) is the centre tap.
        assert_eq!(&cols[4 * 9..5 * 9], x.as_slice());
        // Top-left tap of the first output falls in padding.
        assert_eq!(cols[0], 0.0);
    }

    #[test]
    fn bilinear_identity_resolution() {
        let m = bilinear(1, 2, 2, 2, 2);
        assert_eq!(m.apply(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
