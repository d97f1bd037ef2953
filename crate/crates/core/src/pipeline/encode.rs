//! Codec-space view of a dataset split, computed once before training or sampling.

use std::path::Path;

use crate::codec::{Codec, GlobalEmbedding, Latent, SkeletonEmbedding};
use crate::error::Result;
use crate::scenegen::{load_sample, CameraPose, SampleRecord};

#[derive(Debug, Clone)]
pub struct EncodedTarget {
    pub id: String,
    pub z: Latent,
    pub skeleton: SkeletonEmbedding,
    pub camera: CameraPose,
    pub bbox_iou: f64,
    pub degradation_level: f64,
}

#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub dir: String,
    pub z_src: Latent,
    pub global: GlobalEmbedding,
    pub targets: Vec<EncodedTarget>,
}

/// Images of this many samples are encoded per codec call.
const CHUNK: usize = 16;

pub fn encode_records(codec: &Codec, root: &Path, records: &[&SampleRecord]) -> Result<Vec<EncodedSample>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let views = chunk.iter().map(|r| load_sample(root, r)).collect::<Result<Vec<_>>>()?;
        let mut images = Vec::new();
        for v in &views {
            images.push(&v.source);
            for t in &v.targets {
                images.push(&t.image);
                images.push(&t.skeleton);
            }
        }
        let mut latents = codec.encode_many(&images)?.into_iter();
        for (rec, v) in chunk.iter().zip(&views) {
            let z_src = latents.next().expect("one latent per image");
            let global = codec.global_from_latent(&z_src)?;
            let mut targets = Vec::with_capacity(v.targets.len());
            for (j, t) in v.targets.iter().enumerate() {
                let z = latents.next().expect("one latent per image");
                let skeleton = SkeletonEmbedding(latents.next().expect("one latent per image"));
                targets.push(EncodedTarget {
                    id: rec.target_id(j),
                    z,
                    skeleton,
                    camera: t.camera,
                    bbox_iou: t.bbox_iou,
                    degradation_level: t.degradation_level,
                });
            }
            out.push(EncodedSample { dir: rec.dir(), z_src, global, targets });
        }
    }
    Ok(out)
}
