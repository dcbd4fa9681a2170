//! Pose encoders, datasets and (K+1)-tuple sampling.

pub mod index;
pub mod pose;
pub mod sampler;
pub mod synth;

use std::path::Path;

use crate::autograd::Tensor;
use crate::config::DataSource;
use crate::error::{Error, Result};
use crate::networks::SourceInput;

pub use index::{IndexDataset, IndexRecord, PoseAnnotation};
pub use pose::{encode_heatmap, encode_landmarks, encode_view, Keypoint, ViewPose};
pub use sampler::{split_identities, TupleIndices, TupleSampler};
pub use synth::{flow_between, SpriteView, SynthSprites};

/// One image with its pose map, both `[1, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub pose: Tensor,
    pub mask: Option<Tensor>,
}

pub trait Dataset {
    fn len(&self) -> usize;
    fn image_size(&self) -> (usize, usize);
    fn pose_channels(&self) -> usize;
    /// Identity name and image indices, per identity.
    fn groups(&self) -> Vec<(String, Vec<usize>)>;
    fn load(&self, index: usize) -> Result<Sample>;
    /// Flow from `target` to `source` at stride `factor`, when known exactly.
    fn ground_truth_flow(&self, _target: usize, _source: usize, _factor: usize) -> Option<Tensor> {
        None
    }
}

/// A loaded tuple.
#[derive(Debug, Clone)]
pub struct SampleTuple {
    pub identity: String,
    pub indices: TupleIndices,
    pub sources: Vec<Sample>,
    pub target: Sample,
}

pub fn load_tuple(data: &dyn Dataset, indices: &TupleIndices) -> Result<SampleTuple> {
    Ok(SampleTuple {
        identity: data.groups()[indices.group].0.clone(),
        indices: indices.clone(),
        sources: indices.sources.iter().map(|&i| data.load(i)).collect::<Result<_>>()?,
        target: data.load(indices.target)?,
    })
}

/// Tuples stacked along the batch axis.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<TupleIndices>,
    pub sources: Vec<SourceInput>,
    pub target_image: Tensor,
    pub target_pose: Tensor,
    /// Target foreground masks, if every tuple has one.
    pub target_mask: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Keeps the first `k` sources of every tuple.
    pub fn with_sources(&self, k: usize) -> Batch {
        Batch {
            sources: self.sources[..k.min(self.sources.len())].to_vec(),
            ..self.clone()
        }
    }
}

pub fn collate(tuples: &[SampleTuple]) -> Result<Batch> {
    let Some(first) = tuples.first() else {
        return Err(Error::Dataset("cannot collate an empty batch".into()));
    };
    let k = first.sources.len();
    if tuples.iter().any(|t| t.sources.len() != k) {
        return Err(Error::Dataset("tuples in a batch must share K".into()));
    }
    let cat = |f: &dyn Fn(&SampleTuple) -> Tensor| Tensor::concat(&tuples.iter().map(f).collect::<Vec<_>>(), 0);
    let sources = (0..k)
        .map(|j| SourceInput {
            image: cat(&|t| t.sources[j].image.clone()),
            pose: cat(&|t| t.sources[j].pose.clone()),
        })
        .collect();
    let target_mask = if tuples.iter().all(|t| t.target.mask.is_some()) {
        Some(cat(&|t| t.target.mask.clone().unwrap()))
    } else {
        None
    };
    Ok(Batch {
        indices: tuples.iter().map(|t| t.indices.clone()).collect(),
        sources,
        target_image: cat(&|t| t.target.image.clone()),
        target_pose: cat(&|t| t.target.pose.clone()),
        target_mask,
    })
}

/// Ground-truth flows `[k][B, 2, h, w]` at stride `factor`, if the dataset has them.
pub fn batch_flows(data: &dyn Dataset, batch: &Batch, factor: usize) -> Option<Vec<Tensor>> {
    let k = batch.sources.len();
    (0..k)
        .map(|j| {
            let per: Option<Vec<Tensor>> = batch
                .indices
                .iter()
                .map(|t| data.ground_truth_flow(t.target, t.sources[j], factor))
                .collect();
            per.map(|v| Tensor::concat(&v, 0))
        })
        .collect()
}

/// Train and held-out datasets described by a data source.
pub fn open(source: &DataSource, base: &Path, size: (usize, usize)) -> Result<(Box<dyn Dataset>, Box<dyn Dataset>)> {
    match source {
        DataSource::Synth {
            identities,
            views,
            size,
            seed,
            test_identities,
        } => {
            let test = test_identities.unwrap_or((identities / 8).max(1));
            let train = SynthSprites::new(*seed, *size, 0, *identities, *views)?;
            let held = SynthSprites::new(*seed, *size, *identities, test, *views)?;
            Ok((Box::new(train), Box::new(held)))
        }
        DataSource::Index { path, root, test_path } => {
            let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            let root = resolve(root);
            let all = IndexDataset::open(&resolve(path), &root, size)?;
            match test_path {
                Some(t) => Ok((Box::new(all), Box::new(IndexDataset::open(&resolve(t), &root, size)?))),
                None => {
                    let groups = all.groups();
                    let (train, test) = split_identities(groups.len(), (groups.len() / 10).max(1), 0);
                    Ok((Box::new(all.subset(&train)), Box::new(all.subset(&test))))
                }
            }
        }
    }
}
