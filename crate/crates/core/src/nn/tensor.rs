use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(&[n], &[data.len()]));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, C, H, W)`; panics on other ranks.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4-D tensor, got shape {:?}", self.shape),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Reflect-pads H and W at the bottom/right up to multiples of `m`.
    pub fn reflect_pad_to_multiple(&self, m: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(m) * m;
        if hp == h && wp == w {
            return self.clone();
        }
        let reflect = |i: usize, len: usize| -> usize {
            if len == 1 {
                return 0;
            }
            let period = 2 * (len - 1);
            let k = i % period;
            if k < len {
                k
            } else {
                period - k
            }
        };
        let mut out = Tensor::zeros(vec![n, c, hp, wp]);
        for nc in 0..n * c {
            for y in 0..hp {
                let sy = reflect(y, h);
                for x in 0..wp {
                    out.data[(nc * hp + y) * wp + x] = self.data[(nc * h + sy) * w + reflect(x, w)];
                }
            }
        }
        out
    }

    /// Top-left `h × w` window of every plane.
    pub fn crop(&self, h: usize, w: usize) -> Self {
        let (n, c, hs, ws) = self.dims4();
        assert!(h <= hs && w <= ws);
        let mut out = Tensor::zeros(vec![n, c, h, w]);
        for nc in 0..n * c {
            for y in 0..h {
                let src = (nc * hs + y) * ws;
                let dst = (nc * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }
}
