//! Dataset generation: objects → (source, target, skeleton) renders on disk
//! plus a JSON manifest.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scenegen::camera::CameraPose;
use crate::scenegen::iou::compute_bbox_iou;
use crate::scenegen::raster::{degrade_skeleton, render_view, RenderMode};
use crate::scenegen::rig::{sample_object, ArticulatedObject, GeneratorConfig};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    /// Orbit radius in scene units; must exceed the generator extent.
    pub radius: f64,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    /// Elevation range in degrees.
    pub elevation_deg: [f64; 2],
}

impl Default for CameraRig {
    fn default() -> Self {
        Self { radius: 3.0, focal_scale: 1.25, elevation_deg: [-15.0, 35.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSchedule {
    /// Levels cycled over training targets.
    pub train_levels: Vec<f64>,
    /// Levels cycled over test targets.
    pub test_levels: Vec<f64>,
}

impl Default for DegradationSchedule {
    fn default() -> Self {
        Self { train_levels: vec![0.0], test_levels: vec![0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub objects: usize,
    pub seed: u64,
    pub frame_stride: usize,
    pub frame_budget: usize,
    /// Cameras per rendered frame: one source, the rest targets.
    pub views_per_frame: usize,
    pub resolution: usize,
    pub test_fraction: f64,
    pub camera: CameraRig,
    pub degradation: DegradationSchedule,
    pub generator: GeneratorConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            objects: 80,
            seed: 0,
            frame_stride: 4,
            frame_budget: 24,
            views_per_frame: 3,
            resolution: 64,
            test_fraction: 0.2,
            camera: CameraRig::default(),
            degradation: DegradationSchedule::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.objects == 0 {
            return bad("dataset must request at least one object");
        }
        if self.frame_stride == 0 || self.frame_budget == 0 {
            return bad("frame_stride and frame_budget must be positive");
        }
        if self.frame_budget > self.generator.frame_count {
            return bad("frame_budget exceeds the generated animation length");
        }
        if self.views_per_frame < 2 {
            return bad("views_per_frame must be at least 2 (one source, one target)");
        }
        if self.resolution < 16 {
            return bad("resolution must be at least 16");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        if !(self.camera.radius > self.generator.extent) {
            return bad("camera radius must exceed the object extent");
        }
        let [lo, hi] = self.camera.elevation_deg;
        if !(lo <= hi && lo > -89.0 && hi < 89.0) || !(self.camera.focal_scale > 0.0) {
            return bad("invalid camera rig");
        }
        let levels = |l: &[f64]| !l.is_empty() && l.iter().all(|v| (0.0..=1.0).contains(v));
        if !levels(&self.degradation.train_levels) || !levels(&self.degradation.test_levels) {
            return bad("degradation levels must be non-empty and within [0, 1]");
        }
        Ok(())
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> {
        (0..self.frame_budget).step_by(self.frame_stride)
    }

    pub fn targets_per_sample(&self) -> usize {
        self.views_per_frame - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub path: String,
    pub camera: CameraPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub image: String,
    pub skeleton: String,
    pub camera: CameraPose,
    pub bbox_iou: f64,
    pub degradation_level: f64,
    pub degradation_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub split: Split,
    pub object_id: String,
    pub object_seed: u64,
    pub frame_index: usize,
    pub source: ViewRecord,
    pub targets: Vec<TargetRecord>,
}

impl SampleRecord {
    /// Stable identifier of target `j` of this sample.
    pub fn target_id(&self, j: usize) -> String {
        format!("{}/f{:02}/t{j}", self.object_id, self.frame_index)
    }

    /// Directory (relative to the dataset root) holding this sample's files.
    pub fn dir(&self) -> String {
        format!("{}/{}/frame_{:02}", self.split.as_str(), self.object_id, self.frame_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: DatasetConfig,
    pub train_objects: Vec<String>,
    pub test_objects: Vec<String>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!("unsupported manifest schema {}", m.schema_version)));
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// One training/evaluation unit loaded from disk.
#[derive(Debug, Clone)]
pub struct ViewSample {
    pub object_id: String,
    pub frame_index: usize,
    pub source: Image,
    pub source_camera: CameraPose,
    pub targets: Vec<TargetView>,
}

#[derive(Debug, Clone)]
pub struct TargetView {
    pub image: Image,
    pub skeleton: Image,
    pub camera: CameraPose,
    pub bbox_iou: f64,
    pub degradation_level: f64,
}

pub fn load_sample(root: &Path, rec: &SampleRecord) -> Result<ViewSample> {
    let load = |p: &str| Image::load_png(&root.join(p));
    let targets = rec
        .targets
        .iter()
        .map(|t| {
            Ok(TargetView {
                image: load(&t.image)?,
                skeleton: load(&t.skeleton)?,
                camera: t.camera,
                bbox_iou: t.bbox_iou,
                degradation_level: t.degradation_level,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSample {
        object_id: rec.object_id.clone(),
        frame_index: rec.frame_index,
        source: load(&rec.source.path)?,
        source_camera: rec.source.camera,
        targets,
    })
}

const STREAM_OBJECT_SEED: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_CAMERA: u64 = 3;
const STREAM_DEGRADE: u64 = 4;

pub fn object_seed(cfg: &DatasetConfig, index: usize) -> u64 {
    seed::derive(cfg.seed, &[STREAM_OBJECT_SEED, index as u64])
}

pub fn object_id(index: usize) -> String {
    format!("obj_{index:05}")
}

/// Which object indices go to the test split.
pub fn test_indices(cfg: &DatasetConfig) -> Vec<usize> {
    let n_test = (cfg.objects as f64 * cfg.test_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..cfg.objects).collect();
    idx.shuffle(&mut seed::rng(cfg.seed, &[STREAM_SPLIT]));
    let mut test = idx[..n_test.min(cfg.objects)].to_vec();
    test.sort_unstable();
    test
}

/// Regenerates object `index` of a dataset.
pub fn dataset_object(cfg: &DatasetConfig, index: usize) -> Result<ArticulatedObject> {
    let mut obj = sample_object(object_seed(cfg, index), &cfg.generator)?;
    obj.id = object_id(index);
    Ok(obj)
}

fn orbit_camera<R: Rng>(rng: &mut R, cfg: &DatasetConfig) -> CameraPose {
    let [lo, hi] = cfg.camera.elevation_deg;
    CameraPose {
        azimuth: rng.gen_range(0.0..std::f64::consts::TAU),
        elevation: rng.gen_range(lo..=hi).to_radians(),
        radius: cfg.camera.radius,
        focal: cfg.camera.focal_scale * cfg.resolution as f64,
        height: cfg.resolution,
        width: cfg.resolution,
    }
}

/// Renders every `(object, frame)` sample and writes images plus
/// `manifest.json` below `out_dir`. Pure in `cfg`.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let test = test_indices(cfg);
    let mut records = Vec::new();
    let (mut train_objects, mut test_objects) = (Vec::new(), Vec::new());
    for index in 0..cfg.objects {
        let split = if test.binary_search(&index).is_ok() { Split::Test } else { Split::Train };
        let obj = dataset_object(cfg, index)?;
        match split {
            Split::Train => train_objects.push(obj.id.clone()),
            Split::Test => test_objects.push(obj.id.clone()),
        }
        let levels = match split {
            Split::Train => &cfg.degradation.train_levels,
            Split::Test => &cfg.degradation.test_levels,
        };
        for (slot, frame) in cfg.frames().enumerate() {
            records.push(render_sample(cfg, out_dir, &obj, index, split, slot, frame, levels)?);
        }
    }
    records.sort_by(|a, b| (&a.object_id, a.frame_index).cmp(&(&b.object_id, b.frame_index)));
    let manifest = DatasetManifest { schema_version: SCHEMA_VERSION, config: cfg.clone(), train_objects, test_objects, records };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
fn render_sample(
    cfg: &DatasetConfig,
    out_dir: &Path,
    obj: &ArticulatedObject,
    index: usize,
    split: Split,
    slot: usize,
    frame: usize,
    levels: &[f64],
) -> Result<SampleRecord> {
    let mut rng = seed::rng(cfg.seed, &[STREAM_CAMERA, index as u64, frame as u64]);
    let cams: Vec<CameraPose> = (0..cfg.views_per_frame).map(|_| orbit_camera(&mut rng, cfg)).collect();
    let dir = format!("{}/{}/frame_{:02}", split.as_str(), obj.id, frame);
    let save = |name: &str, img: &Image| -> Result<String> {
        let rel = format!("{dir}/{name}");
        img.save_png(&out_dir.join(&rel))?;
        Ok(rel)
    };
    let source = render_view(obj, frame, &cams[0], RenderMode::Skin)?.quantized();
    let source_path = save("src.png", &source)?;
    let mut targets = Vec::new();
    for (j, cam) in cams[1..].iter().enumerate() {
        let level = levels[(index + slot + j) % levels.len()];
        let dseed = seed::derive(cfg.seed, &[STREAM_DEGRADE, index as u64, frame as u64, j as u64]);
        let image = render_view(obj, frame, cam, RenderMode::Skin)?.quantized();
        let skeleton = degrade_skeleton(obj, frame, cam, level, dseed)?.quantized();
        targets.push(TargetRecord {
            bbox_iou: compute_bbox_iou(&image, &skeleton)?,
            image: save(&format!("tgt_{j}.png"), &image)?,
            skeleton: save(&format!("skel_{j}.png"), &skeleton)?,
            camera: *cam,
            degradation_level: level,
            degradation_seed: dseed,
        });
    }
    Ok(SampleRecord {
        split,
        object_id: obj.id.clone(),
        object_seed: obj.seed,
        frame_index: frame,
        source: ViewRecord { path: source_path, camera: cams[0] },
        targets,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves a manifest-relative path.
pub fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}
