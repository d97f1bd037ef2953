//! Software rasterizer for skin (capsules) and skeleton (disks + segments)
//! renders. Painter's order by depth; coverage-based anti-aliasing.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scenegen::camera::{CameraPoint, CameraPose, NEAR};
use crate::scenegen::rig::ArticulatedObject;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Skin,
    Skeleton,
}

pub const BONE_COLOR: [f32; 3] = [0.15, 0.15, 0.15];
pub const JOINT_COLOR: [f32; 3] = [0.85, 0.12, 0.12];
pub const ROOT_COLOR: [f32; 3] = [0.12, 0.30, 0.85];
/// Half-width of skeleton bone segments, pixels.
const BONE_HALF_WIDTH: f64 = 0.8;
/// World-space joint sphere radius as a fraction of the mean capsule radius.
const JOINT_RADIUS_FACTOR: f64 = 0.6;
const MIN_JOINT_PX: f64 = 1.0;

/// Renders one frame of `obj` through `cam` over a white background.
pub fn render_view(obj: &ArticulatedObject, frame_index: usize, cam: &CameraPose, mode: RenderMode) -> Result<Image> {
    match mode {
        RenderMode::Skin => render_skin(obj, frame_index, cam),
        RenderMode::Skeleton => {
            let sk = project_skeleton(obj, frame_index, cam)?;
            Ok(sk.rasterize(cam.height, cam.width))
        }
    }
}

/// Renders the skeleton after jittering projected joints (σ = level·0.15·W
/// pixels) and dropping each non-root bone with probability level/2.
/// Level 0 reproduces the clean skeleton render exactly.
pub fn degrade_skeleton(obj: &ArticulatedObject, frame_index: usize, cam: &CameraPose, level: f64, seed: u64) -> Result<Image> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::Input(format!("degradation level {level} outside [0, 1]")));
    }
    let mut sk = project_skeleton(obj, frame_index, cam)?;
    sk.degrade(level, cam.width as f64, seed);
    Ok(sk.rasterize(cam.height, cam.width))
}

fn camera_points(obj: &ArticulatedObject, frame_index: usize, cam: &CameraPose) -> Result<Vec<CameraPoint>> {
    cam.validate(0.0)?;
    let pts: Vec<CameraPoint> = obj.joint_positions(frame_index)?.into_iter().map(|p| cam.to_camera(p)).collect();
    if pts.iter().all(|q| q.depth <= NEAR) {
        return Err(Error::Render(format!("object {} lies entirely behind the camera", obj.id)));
    }
    Ok(pts)
}

/// Clips a camera-space segment against the near plane.
fn clip_near(a: CameraPoint, b: CameraPoint) -> Option<(CameraPoint, CameraPoint)> {
    match (a.depth > NEAR, b.depth > NEAR) {
        (true, true) => Some((a, b)),
        (false, false) => None,
        (a_in, _) => {
            let t = (NEAR - a.depth) / (b.depth - a.depth);
            let mid = CameraPoint { x: a.x + t * (b.x - a.x), y: a.y + t * (b.y - a.y), depth: NEAR * (1.0 + 1e-9) };
            if a_in {
                Some((a, mid))
            } else {
                Some((mid, b))
            }
        }
    }
}

fn render_skin(obj: &ArticulatedObject, frame_index: usize, cam: &CameraPose) -> Result<Image> {
    let pts = camera_points(obj, frame_index, cam)?;
    let mut capsules = Vec::new();
    for (p, c) in obj.bones.bones() {
        let skin = obj.skin[c];
        if skin.capsule_radius <= 0.0 {
            continue;
        }
        let Some((a, b)) = clip_near(pts[p], pts[c]) else { continue };
        let (Some(pa), Some(pb)) = (cam.project_camera(a), cam.project_camera(b)) else { continue };
        capsules.push(Capsule {
            a: pa,
            b: pb,
            ra: skin.capsule_radius * cam.focal / a.depth,
            rb: skin.capsule_radius * cam.focal / b.depth,
            depth: 0.5 * (a.depth + b.depth),
            order: c,
            color: skin.color,
        });
    }
    // Far to near; ties broken by joint id.
    capsules.sort_by(|x, y| y.depth.total_cmp(&x.depth).then(x.order.cmp(&y.order)));
    let mut img = Image::white(cam.height, cam.width);
    for cap in &capsules {
        cap.draw(&mut img);
    }
    Ok(img)
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    ra: f64,
    rb: f64,
    depth: f64,
    order: usize,
    color: [f32; 3],
}

impl Capsule {
    fn draw(&self, img: &mut Image) {
        let r = self.ra.max(self.rb) + 1.0;
        let (h, w) = (img.height() as f64, img.width() as f64);
        let x0 = (self.a.0.min(self.b.0) - r).floor().max(0.0);
        let x1 = (self.a.0.max(self.b.0) + r).ceil().min(w);
        let y0 = (self.a.1.min(self.b.1) - r).floor().max(0.0);
        let y1 = (self.a.1.max(self.b.1) + r).ceil().min(h);
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        let (abx, aby) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = abx * abx + aby * aby;
        for y in y0 as usize..y1 as usize {
            for x in x0 as usize..x1 as usize {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 1e-12 { (((px - self.a.0) * abx + (py - self.a.1) * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (qx, qy) = (self.a.0 + t * abx, self.a.1 + t * aby);
                let rad = self.ra + t * (self.rb - self.ra);
                let d = ((px - qx).powi(2) + (py - qy).powi(2)).sqrt() - rad;
                let alpha = (0.5 - d).clamp(0.0, 1.0);
                img.blend(y, x, self.color, alpha as f32);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum End {
    Joint(usize),
    Fixed(f64, f64),
}

#[derive(Debug, Clone)]
struct Segment {
    parent: usize,
    child: usize,
    a: End,
    b: End,
    depth: f64,
    kept: bool,
}

#[derive(Debug, Clone, Copy)]
struct Disk {
    u: f64,
    v: f64,
    radius: f64,
    depth: f64,
}

/// A skeleton projected to the image plane, before rasterization.
#[derive(Debug, Clone)]
pub struct ProjectedSkeleton {
    root: usize,
    joints: Vec<Option<Disk>>,
    segments: Vec<Segment>,
}

pub(crate) fn project_skeleton(obj: &ArticulatedObject, frame_index: usize, cam: &CameraPose) -> Result<ProjectedSkeleton> {
    let pts = camera_points(obj, frame_index, cam)?;
    let joint_world_radius = JOINT_RADIUS_FACTOR * obj.mean_radius();
    let joints = pts
        .iter()
        .map(|&q| {
            cam.project_camera(q).map(|(u, v)| {
                let radius =
                    if joint_world_radius > 0.0 { (joint_world_radius * cam.focal / q.depth).max(MIN_JOINT_PX) } else { 0.0 };
                Disk { u, v, radius, depth: q.depth }
            })
        })
        .collect::<Vec<_>>();
    let mut segments = Vec::new();
    for (p, c) in obj.bones.bones() {
        let Some((a, b)) = clip_near(pts[p], pts[c]) else { continue };
        let end = |j: usize, q: CameraPoint| -> Option<End> {
            if q == pts[j] {
                Some(End::Joint(j))
            } else {
                cam.project_camera(q).map(|(u, v)| End::Fixed(u, v))
            }
        };
        let (Some(ea), Some(eb)) = (end(p, a), end(c, b)) else { continue };
        segments.push(Segment { parent: p, child: c, a: ea, b: eb, depth: 0.5 * (a.depth + b.depth), kept: true });
    }
    Ok(ProjectedSkeleton { root: obj.bones.root(), joints, segments })
}

const STREAM_DEGRADE: u64 = 0xde9;

impl ProjectedSkeleton {
    fn degrade(&mut self, level: f64, width: f64, seed: u64) {
        let mut rng = seed::rng(seed, &[STREAM_DEGRADE]);
        let sigma = level * 0.15 * width;
        for joint in self.joints.iter_mut() {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            if let Some(d) = joint {
                d.u += sigma * nx;
                d.v += sigma * ny;
            }
        }
        for seg in self.segments.iter_mut() {
            let u: f64 = rng.gen();
            seg.kept = u >= level / 2.0;
        }
    }

    fn end_point(&self, e: End) -> Option<(f64, f64)> {
        match e {
            End::Joint(j) => self.joints[j].map(|d| (d.u, d.v)),
            End::Fixed(u, v) => Some((u, v)),
        }
    }

    fn rasterize(&self, height: usize, width: usize) -> Image {
        let mut img = Image::white(height, width);
        let mut segs: Vec<&Segment> = self.segments.iter().filter(|s| s.kept).collect();
        segs.sort_by(|x, y| y.depth.total_cmp(&x.depth).then(x.child.cmp(&y.child)));
        for s in &segs {
            let (Some(a), Some(b)) = (self.end_point(s.a), self.end_point(s.b)) else { continue };
            if (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 {
                continue;
            }
            Capsule { a, b, ra: BONE_HALF_WIDTH, rb: BONE_HALF_WIDTH, depth: s.depth, order: s.child, color: BONE_COLOR }
                .draw(&mut img);
        }
        let mut visible = vec![false; self.joints.len()];
        visible[self.root] = true;
        for s in &segs {
            visible[s.parent] = true;
            visible[s.child] = true;
        }
        let mut disks: Vec<(usize, Disk)> = self
            .joints
            .iter()
            .enumerate()
            .filter_map(|(j, d)| d.filter(|d| visible[j] && d.radius > 0.0).map(|d| (j, d)))
            .collect();
        disks.sort_by(|x, y| y.1.depth.total_cmp(&x.1.depth).then(x.0.cmp(&y.0)));
        for (j, d) in disks {
            let color = if j == self.root { ROOT_COLOR } else { JOINT_COLOR };
            Capsule { a: (d.u, d.v), b: (d.u, d.v), ra: d.radius, rb: d.radius, depth: d.depth, order: j, color }.draw(&mut img);
        }
        img
    }
}
