//! Procedural articulated objects: a joint tree, a capsule skin per bone and a
//! smooth per-joint rotation track.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::kinematics::forward_kinematics;
use crate::seed;

pub const MIN_JOINTS: usize = 2;
pub const MAX_JOINTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub id: usize,
    pub parent: Option<usize>,
    /// Offset from the parent joint in the parent's rest frame. For the root
    /// this is the object origin.
    pub rest_offset: [f64; 3],
}

/// A joint tree with exactly one root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBoneGraph", into = "RawBoneGraph")]
pub struct BoneGraph {
    joints: Vec<Joint>,
    order: Vec<usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawBoneGraph {
    joints: Vec<Joint>,
}

impl TryFrom<RawBoneGraph> for BoneGraph {
    type Error = Error;

    fn try_from(raw: RawBoneGraph) -> Result<Self> {
        BoneGraph::new(raw.joints)
    }
}

impl From<BoneGraph> for RawBoneGraph {
    fn from(g: BoneGraph) -> Self {
        RawBoneGraph { joints: g.joints }
    }
}

impl BoneGraph {
    /// Validates the tree and precomputes a parent-before-child order.
    /// Joint ids must equal their position in `joints`.
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        let n = joints.len();
        if n < MIN_JOINTS {
            return Err(Error::Input(format!("a bone graph needs at least {MIN_JOINTS} joints, got {n}")));
        }
        for (i, j) in joints.iter().enumerate() {
            if j.id != i {
                return Err(Error::Input(format!("joint at position {i} has id {}", j.id)));
            }
            if let Some(p) = j.parent {
                if p >= n || p == i {
                    return Err(Error::Input(format!("joint {i} has invalid parent {p}")));
                }
            }
            if j.rest_offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("joint {i} has a non-finite offset")));
            }
        }
        let roots = joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::Input(format!("expected exactly one root, found {roots}")));
        }
        let order = topological_order(&joints)?;
        Ok(Self { joints, order })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    /// Joint ids with every parent listed before its children.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `(parent, child)` pairs, one per non-root joint, in id order.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.joints.iter().filter_map(|j| j.parent.map(|p| (p, j.id)))
    }

    pub(crate) fn joints_mut(&mut self) -> &mut [Joint] {
        &mut self.joints
    }
}

fn topological_order(joints: &[Joint]) -> Result<Vec<usize>> {
    let n = joints.len();
    let mut children = vec![Vec::new(); n];
    let mut root = None;
    for j in joints {
        match j.parent {
            Some(p) => children[p].push(j.id),
            None => root = Some(j.id),
        }
    }
    let root = root.ok_or_else(|| Error::Input("bone graph has no root".into()))?;
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![root];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != n {
        return Err(Error::Input("bone graph contains a cycle or detached joints".into()));
    }
    Ok(order)
}

/// Per-frame Euler angles (radians, applied as `Rz·Ry·Rx`) for every joint.
/// Root entries are present but ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnimationTrack {
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl AnimationTrack {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, index: usize) -> Result<&[[f64; 3]]> {
        self.frames
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("frame {index} out of range ({} frames)", self.frames.len())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoneSkin {
    pub capsule_radius: f64,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticulatedObject {
    pub id: String,
    pub bones: BoneGraph,
    /// Indexed by joint id; the root entry is never drawn.
    pub skin: Vec<BoneSkin>,
    pub animation: AnimationTrack,
    pub seed: u64,
}

impl ArticulatedObject {
    /// Mean capsule radius over the drawn bones.
    pub fn mean_radius(&self) -> f64 {
        let bones: Vec<_> = self.bones.bones().map(|(_, c)| self.skin[c].capsule_radius).collect();
        bones.iter().sum::<f64>() / bones.len().max(1) as f64
    }

    pub fn joint_positions(&self, frame_index: usize) -> Result<Vec<[f64; 3]>> {
        forward_kinematics(&self.bones, self.animation.frame(frame_index)?)
    }

    /// Largest distance of any skin point from the world origin over all frames.
    pub fn bounding_radius(&self) -> Result<f64> {
        let mut r: f64 = 0.0;
        for f in 0..self.animation.frame_count() {
            let pos = self.joint_positions(f)?;
            for (i, p) in pos.iter().enumerate() {
                let rad = self.skin.get(i).map_or(0.0, |s| s.capsule_radius);
                r = r.max(norm(p) + rad);
            }
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Inclusive joint-count range, within `[2, 16]`.
    pub joint_count: [usize; 2],
    pub frame_count: usize,
    pub bone_length: [f64; 2],
    pub capsule_radius: [f64; 2],
    /// Peak joint rotation amplitude (radians).
    pub max_amplitude: f64,
    /// Bound on the per-frame change of any joint angle (radians).
    pub max_angle_delta: f64,
    /// Objects are recentred and scaled so their bounding radius equals this.
    pub extent: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            joint_count: [3, 8],
            frame_count: 24,
            bone_length: [0.3, 0.7],
            capsule_radius: [0.06, 0.12],
            max_amplitude: 0.9,
            max_angle_delta: 0.2,
            extent: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.joint_count;
        if lo < MIN_JOINTS || hi > MAX_JOINTS || lo > hi {
            return Err(Error::Config(format!("joint_count range [{lo}, {hi}] must lie within [{MIN_JOINTS}, {MAX_JOINTS}]")));
        }
        if self.frame_count == 0 {
            return Err(Error::Config("frame_count must be positive".into()));
        }
        let pos_range = |name: &str, [a, b]: [f64; 2]| {
            if !(a > 0.0 && a <= b && b.is_finite()) {
                Err(Error::Config(format!("{name} range [{a}, {b}] must be positive and ordered")))
            } else {
                Ok(())
            }
        };
        pos_range("bone_length", self.bone_length)?;
        pos_range("capsule_radius", self.capsule_radius)?;
        if !(self.max_amplitude >= 0.0 && self.max_angle_delta > 0.0 && self.extent > 0.0) {
            return Err(Error::Config("amplitude, angle delta and extent must be positive".into()));
        }
        Ok(())
    }
}

const STREAM_OBJECT: u64 = 0x0b1e;

/// Samples an animated articulated object. Pure in `(seed, cfg)`.
pub fn sample_object(seed: u64, cfg: &GeneratorConfig) -> Result<ArticulatedObject> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, &[STREAM_OBJECT]);
    let n = rng.gen_range(cfg.joint_count[0]..=cfg.joint_count[1]);

    let mut joints = vec![Joint { id: 0, parent: None, rest_offset: [0.0; 3] }];
    for id in 1..n {
        // Favour recent joints so chains (limbs) are more common than stars.
        let parent = if id > 1 && rng.gen_bool(0.5) { id - 1 } else { rng.gen_range(0..id) };
        let dir = random_unit(&mut rng);
        let len = rng.gen_range(cfg.bone_length[0]..=cfg.bone_length[1]);
        joints.push(Joint { id, parent: Some(parent), rest_offset: dir.map(|d| d * len) });
    }

    let mut skin = Vec::with_capacity(n);
    for _ in 0..n {
        let radius = rng.gen_range(cfg.capsule_radius[0]..=cfg.capsule_radius[1]);
        let hue = rng.gen_range(0.0..1.0);
        let sat = rng.gen_range(0.55..0.95);
        let val = rng.gen_range(0.35..0.85);
        skin.push(BoneSkin { capsule_radius: radius, color: hsv_to_rgb(hue, sat, val) });
    }

    // Sinusoidal joint trajectories with |d angle / d frame| <= max_angle_delta.
    let mut waves = Vec::with_capacity(n);
    for _ in 0..n {
        let mut axes = [(0.0, 0.0, 0.0); 3];
        for axis in axes.iter_mut() {
            let freq: f64 = rng.gen_range(0.1..0.45);
            let amp = rng.gen_range(0.0..=cfg.max_amplitude).min(cfg.max_angle_delta / freq);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            *axis = (amp, freq, phase);
        }
        waves.push(axes);
    }
    let frames = (0..cfg.frame_count)
        .map(|f| {
            waves
                .iter()
                .enumerate()
                .map(|(j, axes)| if j == 0 { [0.0; 3] } else { axes.map(|(a, w, p)| a * (w * f as f64 + p).sin()) })
                .collect()
        })
        .collect();

    let mut obj = ArticulatedObject {
        id: format!("obj_{seed:016x}"),
        bones: BoneGraph::new(joints)?,
        skin,
        animation: AnimationTrack { frames },
        seed,
    };
    normalize_extent(&mut obj, cfg.extent)?;
    Ok(obj)
}

/// Recentres the animated bounding box on the origin (through the root
/// offset) and rescales so the bounding radius equals `extent`.
fn normalize_extent(obj: &mut ArticulatedObject, extent: f64) -> Result<()> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for f in 0..obj.animation.frame_count() {
        for p in obj.joint_positions(f)? {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    let root = obj.bones.root();
    let centre: [f64; 3] = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
    obj.bones.joints_mut()[root].rest_offset = centre.map(|c| -c);
    let r = obj.bounding_radius()?;
    if r > 0.0 {
        let s = extent / r;
        for j in obj.bones.joints_mut().iter_mut() {
            j.rest_offset = j.rest_offset.map(|v| v * s);
        }
        for sk in obj.skin.iter_mut() {
            sk.capsule_radius *= s;
        }
    }
    Ok(())
}

fn random_unit<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

pub(crate) fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}
