//! Dense row-major per-pixel containers.

use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("buffer holds {actual} values but {width}x{height} needs {expected}")]
    BadLength {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
}

/// Row-major `width × height` grid; pixel `(u, v)` lives at `v * width + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Per-pixel depth in meters. Non-finite or non-positive values mean "no depth".
pub type DepthMap = Grid<f64>;

/// Per-pixel confidence in `[0, 1]`.
pub type ConfidenceMap = Grid<f64>;

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self, GridError> {
        let expected = width * height;
        if data.len() != expected {
            return Err(GridError::BadLength {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
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
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl Grid<f64> {
    /// True where the value is a usable depth (finite and strictly positive).
    #[inline]
    pub fn is_valid_depth(&self, i: usize) -> bool {
        let d = self.data[i];
        d.is_finite() && d > 0.0
    }

    pub fn valid_count(&self) -> usize {
        (0..self.data.len()).filter(|&i| self.is_valid_depth(i)).count()
    }
}

/// Dense flow from the target image to a source image.
///
/// Pixel `p = (u, v)` of the target corresponds to `p + flow(p)` in the source.
/// Entries whose `valid` flag is false carry no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    flow: Grid<Vector2<f64>>,
    valid: Grid<bool>,
}

impl FlowField {
    pub fn new(flow: Grid<Vector2<f64>>, valid: Grid<bool>) -> Result<Self, GridError> {
        if !flow.same_shape(&valid) {
            return Err(GridError::BadLength {
                width: flow.width(),
                height: flow.height(),
                expected: flow.len(),
                actual: valid.len(),
            });
        }
        Ok(Self { flow, valid })
    }

    /// All-valid flow field from a displacement grid.
    pub fn dense(flow: Grid<Vector2<f64>>) -> Self {
        let valid = Grid::filled(flow.width(), flow.height(), true);
        Self { flow, valid }
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    pub fn len(&self) -> usize {
        self.flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow.is_empty()
    }

    pub fn flow(&self) -> &Grid<Vector2<f64>> {
        &self.flow
    }

    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    #[inline]
    pub fn at(&self, i: usize) -> Option<Vector2<f64>> {
        if self.valid.as_slice()[i] {
            Some(self.flow.as_slice()[i])
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|&&b| b).count()
    }
}
