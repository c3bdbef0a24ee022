use crate::tensor3::{Mat3, Vec3};

/// Dense row-major 2-D array. A batch of `N` items with `k` values each is
/// stored as `[N, k]`; 3×3 matrices occupy 9 columns, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length does not match shape"
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor::new(1, data.len(), data)
    }

    pub fn from_mat3s(ms: &[Mat3]) -> Self {
        Tensor::new(ms.len(), 9, ms.iter().flat_map(|m| m.0).collect())
    }

    pub fn from_vec3s(vs: &[Vec3]) -> Self {
        Tensor::new(vs.len(), 3, vs.iter().flat_map(|v| v.to_array()).collect())
    }

    /// `[1, 9]` identity matrix, broadcastable over a batch.
    pub fn identity3() -> Self {
        Tensor::new(1, 9, Mat3::IDENTITY.0.to_vec())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Row `r` of a `[N, 9]` tensor.
    #[inline]
    pub fn mat3(&self, r: usize) -> Mat3 {
        debug_assert_eq!(self.cols, 9);
        Mat3::from_slice(self.row(r))
    }

    #[inline]
    pub fn vec3(&self, r: usize) -> Vec3 {
        debug_assert_eq!(self.cols, 3);
        let s = self.row(r);
        Vec3::new(s[0], s[1], s[2])
    }

    pub fn to_mat3s(&self) -> Vec<Mat3> {
        (0..self.rows).map(|r| self.mat3(r)).collect()
    }

    pub fn to_vec3s(&self) -> Vec<Vec3> {
        (0..self.rows).map(|r| self.vec3(r)).collect()
    }

    /// The single value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_squared(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn add_assign(&mut self, o: &Tensor) {
        assert_eq!(self.shape(), o.shape());
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }
}

/// Flat index into an operand that may be broadcast along rows and/or
/// columns.
#[inline]
pub(crate) fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let r = if t.rows == 1 { 0 } else { r };
    let c = if t.cols == 1 { 0 } else { c };
    r * t.cols + c
}

/// Result shape of broadcasting `a` against `b`, if compatible.
pub(crate) fn broadcast_shape(a: &Tensor, b: &Tensor) -> Option<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    }
    Some((dim(a.rows, b.rows)?, dim(a.cols, b.cols)?))
}

/// Sums `g` down to the shape `(rows, cols)` it was broadcast from.
pub(crate) fn reduce_to(g: &Tensor, rows: usize, cols: usize) -> Tensor {
    if g.rows == rows && g.cols == cols {
        return g.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..g.rows {
        let ro = if rows == 1 { 0 } else { r };
        for c in 0..g.cols {
            let co = if cols == 1 { 0 } else { c };
            out.data[ro * cols + co] += g.data[r * g.cols + c];
        }
    }
    out
}
