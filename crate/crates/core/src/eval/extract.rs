use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::EmbeddingSet;
use crate::datasets::ImageRecord;
use crate::error::{ReidError, Result};
use crate::images::ImageLoader;
use crate::model::MultiHeadModel;
use crate::nn::{GlobalAvgPool, Pass};

/// How per-head features are combined into a retrieval descriptor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// The active head's pooled tap.
    #[default]
    None,
    /// Normalized pooled backbone features followed by the normalized head descriptor.
    BasePlusHead,
    /// Mean of the normalized descriptors of every trained head.
    AllHeads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescriptorSource {
    pub head: usize,
    pub mode: EnsembleMode,
}

impl DescriptorSource {
    /// Check that `model` can produce this descriptor.
    pub fn for_model(model: &MultiHeadModel, head: usize, mode: EnsembleMode) -> Result<Self> {
        if !model.is_trained(head)? {
            return Err(ReidError::UntrainedHead(head));
        }
        Ok(Self { head, mode })
    }

    pub fn dim(&self, model: &MultiHeadModel) -> Result<usize> {
        let head = model.head(self.head)?.config().tap_channels();
        Ok(match self.mode {
            EnsembleMode::None | EnsembleMode::AllHeads => head,
            EnsembleMode::BasePlusHead => model.backbone().output_channels() + head,
        })
    }
}

fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 1e-12 {
            row /= norm;
        }
    }
    m
}

/// Raw (not yet normalized) descriptors for a batch of images.
pub fn descriptors(
    model: &mut MultiHeadModel,
    images: &ndarray::Array4<f64>,
    source: DescriptorSource,
) -> Result<Array2<f64>> {
    let features = model.forward_backbone(images, Pass::INFER)?;
    let head_desc = |model: &mut MultiHeadModel, i: usize| -> Result<Array2<f64>> {
        let tap = model.head(i)?.config().tap;
        Ok(model.forward_head(i, &features, Pass::INFER)?.descriptor(tap))
    };
    match source.mode {
        EnsembleMode::None => head_desc(model, source.head),
        EnsembleMode::BasePlusHead => {
            let base = normalize_rows(GlobalAvgPool::forward(&features));
            let head = normalize_rows(head_desc(model, source.head)?);
            Ok(concatenate(Axis(1), &[base.view(), head.view()]).expect("same batch size"))
        }
        EnsembleMode::AllHeads => {
            let trained: Vec<usize> = (0..model.num_heads())
                .filter(|&i| model.is_trained(i).unwrap_or(false))
                .collect();
            if trained.is_empty() {
                return Err(ReidError::UntrainedHead(source.head));
            }
            let mut acc: Option<Array2<f64>> = None;
            for &i in &trained {
                let d = normalize_rows(head_desc(model, i)?);
                acc = Some(match acc {
                    Some(a) => a + d,
                    None => d,
                });
            }
            Ok(acc.expect("at least one head") / trained.len() as f64)
        }
    }
}

/// One L2-normalized descriptor per record, with ids and cameras carried over.
pub fn extract(
    model: &mut MultiHeadModel,
    records: &[ImageRecord],
    loader: &ImageLoader,
    source: DescriptorSource,
    batch_size: usize,
) -> Result<EmbeddingSet> {
    if !model.is_trained(source.head)? {
        return Err(ReidError::UntrainedHead(source.head));
    }
    let dim = source.dim(model)?;
    if records.is_empty() {
        return Ok(EmbeddingSet::empty(dim));
    }
    let mut chunks = Vec::new();
    for chunk in records.chunks(batch_size.max(1)) {
        let images = loader.batch(chunk)?;
        chunks.push(normalize_rows(descriptors(model, &images, source)?));
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let vectors = concatenate(Axis(0), &views).expect("same descriptor width");
    EmbeddingSet::new(
        vectors,
        records.iter().map(|r| r.person_id).collect(),
        records.iter().map(|r| r.camera_id as i32).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, HeadConfig};
    use ndarray::Array4;

    fn model() -> MultiHeadModel {
        let mut m = MultiHeadModel::new(
            BackboneConfig::tiny(),
            vec![HeadConfig::new(16, 4), HeadConfig::new(16, 4)],
            3,
        )
        .unwrap();
        m.mark_trained(0).unwrap();
        m
    }

    fn images() -> Array4<f64> {
        Array4::from_shape_fn((3, 3, 64, 32), |(b, c, h, w)| {
            ((b * 7 + c * 3 + h + 2 * w) as f64 * 0.1).sin()
        })
    }

    #[test]
    fn untrained_head_is_rejected() {
        let m = model();
        assert!(matches!(
            DescriptorSource::for_model(&m, 1, EnsembleMode::None),
            Err(ReidError::UntrainedHead(1))
        ));
    }

    #[test]
    fn mode_shapes_and_norms() {
        let mut m = model();
        m.mark_trained(1).unwrap();
        let x = images();
        let src = DescriptorSource::for_model(&m, 1, EnsembleMode::None).unwrap();
        let none = descriptors(&mut m, &x, src).unwrap();
        assert_eq!(none.dim(), (3, 8));
        let src = DescriptorSource::for_model(&m, 1, EnsembleMode::BasePlusHead).unwrap();
        let both = descriptors(&mut m, &x, src).unwrap();
        assert_eq!(both.dim(), (3, 16 + 8));
        assert_eq!(src.dim(&m).unwrap(), 24);
        let src = DescriptorSource::for_model(&m, 1, EnsembleMode::AllHeads).unwrap();
        let all = descriptors(&mut m, &x, src).unwrap();
        for row in all.rows() {
            assert!(row.dot(&row).sqrt() <= 1.0 + 1e-12);
        }
    }
}
