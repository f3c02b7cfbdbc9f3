//! Dense 3D grids in C order (last axis fastest).

use serde::{Deserialize, Serialize};

/// A dense 3D array. Index `(i, j, k)` lives at `(i * d1 + j) * d2 + k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        let n = dims.iter().product();
        Self { dims, data: vec![value; n] }
    }
}

impl<T: Clone + Default> Grid<T> {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, T::default())
    }

    /// Copies the `size` window starting at `offset`. The window must lie inside the grid.
    pub fn window(&self, offset: [usize; 3], size: [usize; 3]) -> Grid<T> {
        debug_assert!((0..3).all(|a| offset[a] + size[a] <= self.dims[a]));
        let mut data = Vec::with_capacity(size.iter().product());
        for i in 0..size[0] {
            for j in 0..size[1] {
                let start = self.index([offset[0] + i, offset[1] + j, offset[2]]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Grid { dims: size, data }
    }

    /// Writes `src` into this grid with its corner at `offset`.
    pub fn paste(&mut self, src: &Grid<T>, offset: [usize; 3]) {
        let size = src.dims;
        debug_assert!((0..3).all(|a| offset[a] + size[a] <= self.dims[a]));
        for i in 0..size[0] {
            for j in 0..size[1] {
                let dst = self.index([offset[0] + i, offset[1] + j, offset[2]]);
                let s = src.index([i, j, 0]);
                self.data[dst..dst + size[2]].clone_from_slice(&src.data[s..s + size[2]]);
            }
        }
    }
}

impl<T> Grid<T> {
    /// Wraps `data`; returns `None` when the length does not match `dims`.
    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Option<Self> {
        (dims.iter().product::<usize>() == data.len()).then_some(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f([i, j, k]));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let rest = idx / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    #[inline]
    pub fn get(&self, c: [usize; 3]) -> &T {
        &self.data[self.index(c)]
    }

    #[inline]
    pub fn get_mut(&mut self, c: [usize; 3]) -> &mut T {
        let idx = self.index(c);
        &mut self.data[idx]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { dims: self.dims, data: self.data.iter().map(f).collect() }
    }
}

impl<T: Copy + Default + PartialEq> Grid<T> {
    /// Inclusive-exclusive bounding box `(lo, hi)` of all values not equal to `T::default()`.
    pub fn nonzero_bbox(&self) -> Option<([usize; 3], [usize; 3])> {
        let zero = T::default();
        let mut lo = self.dims;
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, v) in self.data.iter().enumerate() {
            if *v != zero {
                any = true;
                let c = self.coords(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a] + 1);
                }
            }
        }
        any.then_some((lo, hi))
    }
}
