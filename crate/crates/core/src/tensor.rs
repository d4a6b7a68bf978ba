//! Dense row-major `f64` tensors and the raw kernels the tape is built on.

use crate::error::{shape_err, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on unequal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// `out = a·b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out = a·bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// `out += aᵀ·b` for `a: k×m`, `b: k×n`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_kernel(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    out
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Dimension(format!(
            "softmax axis {} out of range for shape {:?}",
            axis, x.shape
        )));
    }
    Ok(Tensor::from_parts(
        x.shape.clone(),
        softmax_kernel(&x.data, &x.shape, axis),
    ))
}

/// Output shape and a gather table for an axis permutation.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Dimension(format!(
            "invalid permutation {:?} for shape {:?}",
            axes, shape
        )));
    }
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut gather = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        gather.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok((out_shape, gather))
}

/// Geometry of a same-padded 2-D cross-correlation over `[T, F, C]` inputs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub t: usize,
    pub f: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn check(x: &[usize], w: &[usize], b: &[usize]) -> Result<ConvGeom> {
        if x.len() != 3 || w.len() != 4 || b.len() != 1 {
            return shape_err("conv2d", x, w);
        }
        if w[0] != w[1] || w[0] % 2 == 0 {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be square with odd size, got {:?}",
                &w[..2]
            )));
        }
        if w[2] != x[2] {
            return shape_err("conv2d", x, w);
        }
        if b[0] != w[3] {
            return shape_err("conv2d", w, b);
        }
        Ok(ConvGeom {
            t: x[0],
            f: x[1],
            cin: x[2],
            cout: w[3],
            k: w[0],
        })
    }

    /// Yields (output position, input position, kernel tap) triples inside the padded window.
    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let pad = (self.k / 2) as isize;
        let (t, f, k) = (self.t as isize, self.f as isize, self.k as isize);
        (0..t).flat_map(move |ot| {
            (0..f).flat_map(move |of| {
                (0..k).flat_map(move |dt| {
                    (0..k).filter_map(move |df| {
                        let it = ot + dt - pad;
                        let jf = of + df - pad;
                        (it >= 0 && it < t && jf >= 0 && jf < f).then(|| {
                            (
                                (ot * f + of) as usize,
                                (it * f + jf) as usize,
                                (dt * k + df) as usize,
                            )
                        })
                    })
                })
            })
        })
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.t * g.f * g.cout];
    for pos in 0..g.t * g.f {
        out[pos * g.cout..(pos + 1) * g.cout].copy_from_slice(b);
    }
    let slab = g.cin * g.cout;
    for (o, i, tap) in g.taps() {
        let xrow = &x[i * g.cin..(i + 1) * g.cin];
        let wslab = &w[tap * slab..(tap + 1) * slab];
        let orow = &mut out[o * g.cout..(o + 1) * g.cout];
        for (ci, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wslab[ci * g.cout..(ci + 1) * g.cout];
            for (ov, wv) in orow.iter_mut().zip(wrow) {
                *ov += xv * wv;
            }
        }
    }
    out
}

/// Returns (dx, dw, db).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    for pos in 0..g.t * g.f {
        for (d, v) in db.iter_mut().zip(&dy[pos * g.cout..(pos + 1) * g.cout]) {
            *d += v;
        }
    }
    let slab = g.cin * g.cout;
    for (o, i, tap) in g.taps() {
        let dyrow = &dy[o * g.cout..(o + 1) * g.cout];
        let xrow = &x[i * g.cin..(i + 1) * g.cin];
        for ci in 0..g.cin {
            let wrow = &w[tap * slab + ci * g.cout..tap * slab + (ci + 1) * g.cout];
            let dwrow = &mut dw[tap * slab + ci * g.cout..tap * slab + (ci + 1) * g.cout];
            let xv = xrow[ci];
            let mut acc = 0.0;
            for ((dwv, wv), dyv) in dwrow.iter_mut().zip(wrow).zip(dyrow) {
                acc += wv * dyv;
                *dwv += xv * dyv;
            }
            dx[i * g.cin + ci] += acc;
        }
    }
    (dx, dw, db)
}
