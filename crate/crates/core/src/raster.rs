//! Row-major 2D rasters used for images, depth maps and masks.

use std::ops::{Index, IndexMut};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type ColorImage = Raster<[f64; 3]>;
pub type DepthMap = Raster<f64>;
pub type Mask = Raster<bool>;

impl<T: Clone> Raster<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Raster {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Raster<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Raster {
            width,
            height,
            data,
        })
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

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
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

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Indexed by `(column, row)`.
impl<T> Index<(usize, usize)> for Raster<T> {
    type Output = T;
    fn index(&self, (u, v): (usize, usize)) -> &T {
        &self.data[v * self.width + u]
    }
}

impl<T> IndexMut<(usize, usize)> for Raster<T> {
    fn index_mut(&mut self, (u, v): (usize, usize)) -> &mut T {
        &mut self.data[v * self.width + u]
    }
}

/// Counts `true` pixels.
pub fn mask_count(mask: &Mask) -> usize {
    mask.as_slice().iter().filter(|&&m| m).count()
}
