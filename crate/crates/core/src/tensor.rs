//! Channel-major 3D feature maps and row-major matrices.

/// `channels × d0 × d1 × d2`, channel-major, each channel a C-order 3D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    dims: [usize; 3],
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self { channels, dims, data: vec![0.0; channels * dims.iter().product::<usize>()] }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Option<Self> {
        (data.len() == channels * dims.iter().product::<usize>()).then_some(Self { channels, dims, data })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Concatenates along the channel axis.
    pub fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
        assert_eq!(a.dims, b.dims, "concat needs equal spatial dims");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        FeatureMap { channels: a.channels + b.channels, dims: a.dims, data }
    }

    /// Splits off the first `c` channels.
    pub fn split(&self, c: usize) -> (FeatureMap, FeatureMap) {
        let n = self.spatial_len();
        let (head, tail) = self.data.split_at(c * n);
        (
            FeatureMap { channels: c, dims: self.dims, data: head.to_vec() },
            FeatureMap { channels: self.channels - c, dims: self.dims, data: tail.to_vec() },
        )
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Row-major `rows × cols` matrix (token sequences, linear-layer activations).
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
