use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Unordered set of points, each with `dim` channels (xyz or xyz+rgb).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "point data of length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_points(dim: usize, points: &[Vec<f64>]) -> Result<Self> {
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("points have inconsistent dimension"));
        }
        Self::new(dim, points.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape("point_cloud", format!("{:?}", t.shape())));
        }
        Self::new(t.cols(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.data.clone()).expect("consistent layout")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = self.point(i);
        [p[0], p[1], p[2]]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn has_color(&self) -> bool {
        self.dim >= 6
    }

    /// The first three channels of every point.
    pub fn positions(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.xyz(i)).collect()
    }

    /// A copy holding only the xyz channels.
    pub fn xyz_only(&self) -> PointCloud {
        let data = self.points().flat_map(|p| p[..3].iter().copied()).collect();
        PointCloud { dim: 3, data }
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        PointCloud { dim: self.dim, data }
    }

    pub fn translated(&self, offset: [f64; 3]) -> PointCloud {
        let mut out = self.clone();
        for p in out.data.chunks_exact_mut(self.dim) {
            for k in 0..3 {
                p[k] += offset[k];
            }
        }
        out
    }
}
