use std::collections::BTreeMap;

use nalgebra::Matrix4;

use super::{EgoPose, LabeledPointCloud};
use crate::error::{Error, Result};

/// Expresses static points of every frame within `window` of `target_frame`
/// in the target frame's sensor coordinates. Dynamic points are kept only
/// from the target frame itself.
pub fn accumulate_static(
    clouds: &[LabeledPointCloud],
    poses: &[EgoPose],
    target_frame: u32,
    window: Option<u32>,
) -> Result<LabeledPointCloud> {
    let by_frame: BTreeMap<u32, &EgoPose> = poses.iter().map(|p| (p.frame, p)).collect();
    let target = by_frame.get(&target_frame).ok_or(Error::MissingPose(target_frame))?;
    let world_to_target = target.inverse_matrix();
    let mut to_target: BTreeMap<u32, Matrix4<f64>> = BTreeMap::new();

    let mut out = Vec::new();
    for cloud in clouds {
        for p in &cloud.points {
            if p.dynamic && p.frame != target_frame {
                continue;
            }
            if window.is_some_and(|w| p.frame.abs_diff(target_frame) > w) {
                continue;
            }
            let m = match to_target.get(&p.frame) {
                Some(m) => m,
                None => {
                    let pose = by_frame.get(&p.frame).ok_or(Error::MissingPose(p.frame))?;
                    to_target.entry(p.frame).or_insert(world_to_target * pose.matrix)
                }
            };
            let mut q = *p;
            q.position = if p.frame == target_frame {
                p.position
            } else {
                EgoPose::transform_point(m, p.position)
            };
            out.push(q);
        }
    }
    Ok(LabeledPointCloud::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::LabeledPoint;

    fn pt(pos: [f64; 3], frame: u32, dynamic: bool) -> LabeledPoint {
        LabeledPoint {
            position: pos,
            class_id: if dynamic { 12 } else { 1 },
            instance_id: if dynamic { 1 } else { 0 },
            dynamic,
            frame,
        }
    }

    #[test]
    fn identity_single_frame_is_passthrough() {
        let c = LabeledPointCloud::new(vec![pt([1.0, 2.0, 3.0], 0, false), pt([0.0, 1.0, 4.0], 0, true)]);
        let out = accumulate_static(&[c.clone()], &[EgoPose::identity(0)], 0, None).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn forward_translation_shifts_points_back() {
        let mut m = Matrix4::identity();
        m[(2, 3)] = -1.0;
        // Frame 1 sits 1 m behind frame 0 in world; a target-frame observer sees
        // frame 1's points shifted by -1 m.
        let poses = [EgoPose::identity(0), EgoPose::new(1, m).unwrap()];
        let c1 = LabeledPointCloud::new(vec![pt([0.5, 1.0, 10.0], 1, false), pt([0.0, 1.0, 3.0], 1, true)]);
        let out = accumulate_static(&[c1], &poses, 0, None).unwrap();
        assert_eq!(out.points.len(), 1);
        assert_eq!(out.points[0].position, [0.5, 1.0, 9.0]);
    }

    #[test]
    fn missing_pose_and_window() {
        let c = LabeledPointCloud::new(vec![pt([0.0, 0.0, 1.0], 7, false)]);
        assert!(matches!(
            accumulate_static(&[c.clone()], &[EgoPose::identity(0)], 0, None),
            Err(Error::MissingPose(7))
        ));
        assert!(matches!(
            accumulate_static(&[c.clone()], &[EgoPose::identity(7)], 0, None),
            Err(Error::MissingPose(0))
        ));
        let out = accumulate_static(&[c], &[EgoPose::identity(0)], 0, Some(5)).unwrap();
        assert!(out.is_empty());
    }
}
