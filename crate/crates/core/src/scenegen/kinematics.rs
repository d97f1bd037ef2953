use nalgebra::{Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::scenegen::rig::BoneGraph;

/// World-space joint positions for one frame.
///
/// Each joint's angles orient the bone leading into it, composed with every
/// ancestor's rotation: `W_j = W_parent · R(angles_j)` and
/// `p_j = p_parent + W_j · rest_offset_j`. The root sits at its rest offset.
pub fn forward_kinematics(bones: &BoneGraph, angles: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    let n = bones.len();
    if angles.len() != n {
        return Err(Error::Input(format!("expected angles for {n} joints, got {}", angles.len())));
    }
    let joints = bones.joints();
    let mut world_rot = vec![Rotation3::identity(); n];
    let mut pos = vec![Vector3::zeros(); n];
    for &j in bones.order() {
        let offset = Vector3::from(joints[j].rest_offset);
        match joints[j].parent {
            None => pos[j] = offset,
            Some(p) => {
                let [rx, ry, rz] = angles[j];
                if !(rx.is_finite() && ry.is_finite() && rz.is_finite()) {
                    return Err(Error::Input(format!("non-finite angle for joint {j}")));
                }
                world_rot[j] = world_rot[p] * Rotation3::from_euler_angles(rx, ry, rz);
                pos[j] = pos[p] + world_rot[j] * offset;
            }
        }
    }
    Ok(pos.into_iter().map(|v| [v.x, v.y, v.z]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::rig::{sample_object, GeneratorConfig, Joint};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn chain(offsets: &[[f64; 3]]) -> BoneGraph {
        let mut joints = vec![Joint { id: 0, parent: None, rest_offset: [0.0; 3] }];
        for (i, o) in offsets.iter().enumerate() {
            joints.push(Joint { id: i + 1, parent: Some(i), rest_offset: *o });
        }
        BoneGraph::new(joints).unwrap()
    }

    #[test]
    fn single_bone_identity() {
        let g = chain(&[[0.0, 1.0, 0.0]]);
        let p = forward_kinematics(&g, &[[0.0; 3]; 2]).unwrap();
        assert_eq!(p[1], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn two_bone_chain_quarter_turn() {
        // Hand-composed oracle: tip = (0,1,0) + Rz(π/2)·(0,1,0) = (0,1,0) + (-1,0,0).
        let g = chain(&[[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let p = forward_kinematics(&g, &[[0.0; 3], [0.0; 3], [0.0, 0.0, FRAC_PI_2]]).unwrap();
        let expected = [-1.0, 1.0, 0.0];
        for k in 0..3 {
            assert!((p[2][k] - expected[k]).abs() < 1e-12, "{:?}", p[2]);
        }
    }

    #[test]
    fn missing_angles() {
        let g = chain(&[[0.0, 1.0, 0.0]]);
        assert!(forward_kinematics(&g, &[[0.0; 3]]).is_err());
    }

    proptest! {
        #[test]
        fn bone_lengths_preserved(seed in any::<u64>(), frame in 0usize..24) {
            let obj = sample_object(seed, &GeneratorConfig::default()).unwrap();
            let pos = obj.joint_positions(frame).unwrap();
            for (p, c) in obj.bones.bones() {
                let rest = crate::scenegen::rig::norm(&obj.bones.joints()[c].rest_offset);
                let d = [0, 1, 2].map(|k| pos[c][k] - pos[p][k]);
                let len = crate::scenegen::rig::norm(&d);
                prop_assert!((len - rest).abs() <= 1e-9 * rest.max(1.0));
            }
            prop_assert!(pos.iter().flatten().all(|v| v.is_finite()));
        }
    }
}
