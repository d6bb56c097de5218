use super::Matrix;
use crate::error::{Error, Result};

/// `n` equally shaped matrices in one contiguous buffer; slice `i` occupies
/// `[i·rows·cols, (i+1)·rows·cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedTensor3 {
    n: usize,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl StackedTensor3 {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            n: 0,
            rows,
            cols,
            data: Vec::new(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn slice_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    fn stride(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Appends `m` as the new last slice and returns its index.
    pub fn push(&mut self, m: &Matrix) -> Result<usize> {
        if m.shape() != self.slice_shape() {
            return Err(Error::Shape {
                op: "stack push",
                lhs: self.slice_shape(),
                rhs: m.shape(),
            });
        }
        self.data.extend_from_slice(m.data());
        self.n += 1;
        Ok(self.n - 1)
    }

    /// Borrowed view of slice `i`.
    pub fn slice(&self, i: usize) -> Option<&[f32]> {
        (i < self.n).then(|| &self.data[i * self.stride()..(i + 1) * self.stride()])
    }

    /// Copy of slice `i` as a matrix.
    pub fn matrix(&self, i: usize) -> Option<Matrix> {
        self.slice(i)
            .map(|s| Matrix::new(self.rows, self.cols, s.to_vec()).expect("stride matches shape"))
    }

    /// Removes slice `i` by moving the last slice into its place.
    pub fn swap_remove(&mut self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(Error::Lookup(format!("stack slot {i} (len {})", self.n)));
        }
        let stride = self.stride();
        let last = self.n - 1;
        if i != last {
            self.data.copy_within(last * stride..(last + 1) * stride, i * stride);
        }
        self.data.truncate(last * stride);
        self.n -= 1;
        Ok(())
    }
}
