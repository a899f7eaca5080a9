use ndarray::{Array2, Array3, Array4};

/// Dense `N × C × H × W` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Tensor { n, c, h, w, data }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.n, other.c, other.h, other.w)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.plane_len();
        let start = (n * self.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.plane_len();
        let start = (n * self.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack single-channel images into an `N × 1 × H × W` batch.
    pub fn from_images(images: &[&Array2<f32>]) -> Self {
        let (h, w) = images.first().map(|i| i.dim()).unwrap_or((0, 0));
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            assert_eq!(img.dim(), (h, w), "batch images must share a size");
            data.extend(img.iter().copied());
        }
        Tensor::from_vec(images.len(), 1, h, w, data)
    }

    /// Channel-last copy, `N × H × W × C`.
    pub fn to_nhwc(&self) -> Array4<f32> {
        Array4::from_shape_fn((self.n, self.h, self.w, self.c), |(n, y, x, c)| {
            self.data[((n * self.c + c) * self.h + y) * self.w + x]
        })
    }

    pub fn from_nhwc(a: &Array4<f32>) -> Self {
        let (n, h, w, c) = a.dim();
        let mut t = Tensor::zeros(n, c, h, w);
        for ((ni, y, x, ci), &v) in a.indexed_iter() {
            t.data[((ni * c + ci) * h + y) * w + x] = v;
        }
        t
    }

    /// Image `n` as a channel-last `H × W × C` map in `f64`.
    pub fn image_hwc(&self, n: usize) -> Array3<f64> {
        Array3::from_shape_fn((self.h, self.w, self.c), |(y, x, c)| {
            f64::from(self.data[((n * self.c + c) * self.h + y) * self.w + x])
        })
    }

    /// Stack channel-last maps into an `N × C × H × W` tensor.
    pub fn from_hwc_maps(maps: &[&Array3<f64>]) -> Self {
        let (h, w, c) = maps.first().map(|m| m.dim()).unwrap_or((0, 0, 0));
        let mut t = Tensor::zeros(maps.len(), c, h, w);
        for (n, m) in maps.iter().enumerate() {
            assert_eq!(m.dim(), (h, w, c), "maps must share a shape");
            for ((y, x, ci), &v) in m.indexed_iter() {
                t.data[((n * c + ci) * h + y) * w + x] = v as f32;
            }
        }
        t
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_vec(self.n, self.c, self.h, self.w, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenate along channels.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
        let p = a.plane_len();
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..a.n {
            data.extend_from_slice(&a.data[n * a.c * p..(n + 1) * a.c * p]);
            data.extend_from_slice(&b.data[n * b.c * p..(n + 1) * b.c * p]);
        }
        Tensor::from_vec(a.n, a.c + b.c, a.h, a.w, data)
    }

    /// Split channels `[0, at)` and `[at, C)`.
    pub fn split_channels(&self, at: usize) -> (Tensor, Tensor) {
        let p = self.plane_len();
        let mut a = Tensor::zeros(self.n, at, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - at, self.h, self.w);
        for n in 0..self.n {
            let src = &self.data[n * self.c * p..(n + 1) * self.c * p];
            a.data[n * at * p..(n + 1) * at * p].copy_from_slice(&src[..at * p]);
            b.data[n * (self.c - at) * p..(n + 1) * (self.c - at) * p]
                .copy_from_slice(&src[at * p..]);
        }
        (a, b)
    }
}
