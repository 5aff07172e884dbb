//! Face-recognition embedders: the differentiable model contract, toy
//! trainable ensembles, and similarity computation.

pub mod checkpoint;
pub mod net;
pub mod train;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::Image;
pub use net::ArchitectureId;
pub use train::{train_fr, FrTrainSpec};

/// Classification objective used to train an embedder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossId {
    Softmax,
    /// Additive angular margin (margin 0.3, scale 16).
    ArcMargin,
}

impl LossId {
    pub fn tag(self) -> &'static str {
        match self {
            LossId::Softmax => "sm",
            LossId::ArcMargin => "am",
        }
    }
}

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Array1<f64>);

impl FeatureVector {
    /// Wrap a vector, checking the unit-norm invariant to 1e-6.
    pub fn new(values: Array1<f64>) -> Result<Self> {
        let norm = values.dot(&values).sqrt();
        if (norm - 1.0).abs() >= 1e-6 {
            return Err(CoreError::Numeric(format!(
                "feature vector norm {norm} is not 1 within 1e-6"
            )));
        }
        Ok(FeatureVector(values))
    }

    /// Normalize an arbitrary non-zero vector.
    pub fn normalized(values: Array1<f64>) -> Result<Self> {
        let norm = values.dot(&values).sqrt();
        if norm < 1e-12 {
            return Err(CoreError::Numeric("cannot normalize a zero vector".into()));
        }
        Ok(FeatureVector(values / norm))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity of two unit vectors (their dot product).
pub fn cosine_sim(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CoreError::Shape(format!(
            "feature dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.0.dot(&b.0))
}

/// A trained differentiable embedder.
#[derive(Debug, Clone)]
pub struct FRModel {
    pub net: net::ConvNet,
    pub loss_id: LossId,
    pub training_seed: u64,
    /// Verification accuracy achieved on the held-out split.
    pub accuracy: f64,
}

impl FRModel {
    /// Stable identifier derived from the diversity axes.
    pub fn model_id(&self) -> String {
        format!(
            "{}-{}-s{}",
            self.net.arch.tag(),
            self.loss_id.tag(),
            self.training_seed
        )
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let (h, w, c) = image.dim();
        if h != self.net.input_size || w != self.net.input_size || c != self.net.channels {
            return Err(CoreError::Shape(format!(
                "image {}x{}x{} does not match model input {}x{}x{}",
                h, w, c, self.net.input_size, self.net.input_size, self.net.channels
            )));
        }
        Ok(())
    }

    /// Forward pass followed by L2 normalization.
    pub fn embed(&self, image: &Image) -> Result<FeatureVector> {
        self.check_image(image)?;
        let cache = self.net.forward(image);
        FeatureVector::new(cache.feat)
    }

    /// Gradient of `upstream . embed(image)` with respect to the image.
    pub fn embed_with_gradient(&self, image: &Image, upstream: &Array1<f64>) -> Result<Image> {
        self.check_image(image)?;
        if upstream.len() != self.net.feature_dim {
            return Err(CoreError::Shape(format!(
                "upstream dim {} does not match feature dim {}",
                upstream.len(),
                self.net.feature_dim
            )));
        }
        let cache = self.net.forward(image);
        Ok(self.net.backward(&cache, upstream, None))
    }
}

/// The surrogate model team used to train a protection texture.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<FRModel>,
}

impl Ensemble {
    pub fn new(members: Vec<FRModel>) -> Result<Self> {
        if members.is_empty() {
            return Err(CoreError::Config("ensemble must have at least one member".into()));
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[FRModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.model_id()).collect()
    }

    /// True when all members differ in at least one diversity axis
    /// (architecture, loss, training seed), as transfer studies require.
    pub fn members_distinct(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.members
            .iter()
            .all(|m| seen.insert((m.net.arch, m.loss_id, m.training_seed)))
    }

    /// New ensemble without the member at `idx`.
    pub fn without(&self, idx: usize) -> Result<Ensemble> {
        if idx >= self.members.len() {
            return Err(CoreError::Bounds(format!(
                "member index {idx} out of range for ensemble of {}",
                self.members.len()
            )));
        }
        let members: Vec<FRModel> = self
            .members
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, m)| m.clone())
            .collect();
        Ensemble::new(members)
    }
}
