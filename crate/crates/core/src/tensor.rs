use crate::error::{Error, Result};

/// Dense row-major array of 64-bit reals.
///
/// Learnable parameters live in `Tensor`s; the gradient tape borrows their
/// data during a forward pass and hands gradients back as plain vectors,
/// which callers may stash in `grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                axis: 0,
                expected: n,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite tensor value {bad}")));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix; rank-1 tensors are a single row.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    /// Stores a gradient, checking that it matches the data shape.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension {
                axis: 0,
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// `target ← α·target + (1−α)·online`, elementwise over matching tensors.
pub fn ema_update(target: &mut [Tensor], online: &[Tensor], alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema alpha {alpha} outside [0, 1]")));
    }
    if target.len() != online.len() {
        return Err(Error::Dimension {
            axis: 0,
            expected: target.len(),
            got: online.len(),
        });
    }
    for (t, o) in target.iter_mut().zip(online) {
        if t.shape() != o.shape() {
            return Err(Error::Contract(format!(
                "ema shape mismatch {:?} vs {:?}",
                t.shape(),
                o.shape()
            )));
        }
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn grad_shape_checked() {
        let mut t = Tensor::zeros(vec![3]);
        assert!(t.set_grad(vec![1.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn ema_endpoints() {
        let online = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let mut target = vec![Tensor::zeros(vec![2])];
        ema_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target[0].data(), &[0.0, 0.0]);
        ema_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target[0].data(), online[0].data());
    }

    #[test]
    fn ema_partial() {
        let online = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut target = vec![Tensor::zeros(vec![1])];
        ema_update(&mut target, &online, 0.995).unwrap();
        assert!((target[0].data()[0] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_bad_alpha() {
        let online = vec![Tensor::zeros(vec![1])];
        let mut target = vec![Tensor::zeros(vec![1])];
        assert!(matches!(
            ema_update(&mut target, &online, 1.5),
            Err(Error::Config(_))
        ));
        assert!(ema_update(&mut target, &online, -0.1).is_err());
    }
}
