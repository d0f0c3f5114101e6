//! Four-dimensional activation maps.
//!
//! Every activation that an aggregation node consumes is an `(N, C, H, W)`
//! tensor. Outputs of fully connected layers are carried as maps whose
//! height and width are collapsed to 1, so a 1x1 convolution over them is the
//! same computation as the fully connected layer.

use candle_core::Tensor;

use crate::error::{DsamError, Result};

#[derive(Clone, Debug)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let dims = tensor.dims();
        if dims.len() != 4 {
            return Err(DsamError::Rank {
                context: "feature map".into(),
                expected: 4,
                actual: dims.len(),
            });
        }
        for (name, &d) in ["batch", "channels", "height", "width"].iter().zip(dims) {
            if d == 0 {
                return Err(DsamError::ShapeMismatch {
                    context: "feature map".into(),
                    dim: name,
                    expected: 1,
                    actual: 0,
                });
            }
        }
        Ok(FeatureMap(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn batch(&self) -> usize {
        self.dims().0
    }

    pub fn channels(&self) -> usize {
        self.dims().1
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.dims();
        (h, w)
    }

    pub fn is_collapsed(&self) -> bool {
        self.spatial() == (1, 1)
    }

    /// `(N, C*H*W)` view, the inverse of [`collapse_fc_output`] for collapsed maps.
    pub fn flatten(&self) -> Result<Tensor> {
        Ok(self.0.flatten_from(1)?)
    }

    /// Global average pool over the spatial dimensions, giving `(N, C)`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        Ok(self.0.flatten_from(2)?.mean(2)?)
    }

    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        FeatureMap::new(self.0.narrow(0, start, len)?)
    }
}

/// Views a `(batch, features)` activation as a `(batch, features, 1, 1)` map.
pub fn collapse_fc_output(vector_output: &Tensor) -> Result<FeatureMap> {
    let dims = vector_output.dims();
    if dims.len() != 2 {
        return Err(DsamError::Rank {
            context: "collapse_fc_output".into(),
            expected: 2,
            actual: dims.len(),
        });
    }
    FeatureMap::new(vector_output.reshape((dims[0], dims[1], 1, 1))?)
}
