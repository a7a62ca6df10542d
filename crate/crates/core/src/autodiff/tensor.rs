use crate::error::{DinError, Result};

/// Dense row-major `f64` array with an optional gradient accumulator.
///
/// The tape treats every tensor as a matrix: a 1-D tensor of length `d`
/// is viewed as a single row `[1, d]`, a scalar as `[1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DinError::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a `[rows.len(), width]` matrix; all rows must share a width.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(DinError::shape("Tensor::from_rows", &[width], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), width, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            shape: vec![n, n],
            data,
            grad: None,
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(DinError::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value-only copy, dropping any accumulated gradient.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Euclidean norm guard shared by normalization and cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `x / ‖x‖₂` on a plain slice.
pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(x);
    if n <= NORM_EPS {
        return Err(DinError::Degenerate {
            op: "l2_normalize",
            norm: n,
            eps: NORM_EPS,
        });
    }
    Ok(x.iter().map(|v| v / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DinError::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    let norm = na.min(nb);
    if norm <= NORM_EPS {
        return Err(DinError::Degenerate {
            op: "cosine_similarity",
            norm,
            eps: NORM_EPS,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `-log softmax(logits)[target]` with max-subtraction.
pub fn log_softmax_nll(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(DinError::Index {
            op: "log_softmax_nll",
            index: target,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::vector(vec![1.0, 2.0]);
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        t.accumulate_grad(&[0.5, -2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, -1.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(DinError::Degenerate { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[2.0, -1.0], &[2.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.7071067811865475).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn nll_examples() {
        let v = log_softmax_nll(&[0.3; 4], 1).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = log_softmax_nll(&[1000.0, 0.0], 0).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);
        let v = log_softmax_nll(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((v - 0.40760596444).abs() < 1e-10);
        assert!(matches!(
            log_softmax_nll(&[1.0], 1),
            Err(DinError::Index { .. })
        ));
    }
}
