/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    /// A batch of feature vectors, shaped `n x c x 1 x 1`.
    pub fn matrix(n: usize, c: usize, data: Vec<f64>) -> Self {
        Self::from_vec(n, c, 1, 1, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.image_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.image(i)
    }

    /// Rows `start..end` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let len = self.image_len();
        Tensor::from_vec(end - start, self.c, self.h, self.w, self.data[start * len..end * len].to_vec())
    }

    pub fn concat_batch(parts: &[&Tensor]) -> Tensor {
        let first = parts[0];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut n = 0;
        for p in parts {
            assert_eq!([p.c, p.h, p.w], [first.c, first.h, first.w], "concat shape");
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Tensor::from_vec(n, first.c, first.h, first.w, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "add shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
