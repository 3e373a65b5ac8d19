use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::RigidTransform;
use crate::world::{render_scene_continuous, Image, Mask, Scene};

use super::metrics::arm_mask_from_frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub yaw_range: f64,
    pub yaw_step: f64,
    pub xy_range: f64,
    pub xy_step: f64,
    pub z_range: f64,
    pub z_step: f64,
    /// Finite-difference step of the refinement Jacobian.
    pub jacobian_step: f64,
    pub refine_iterations: usize,
    /// Coarse candidates carried into the position search and a short
    /// screening refinement; only the winner is refined fully.
    pub starts: usize,
    pub screen_iterations: usize,
    /// Frames whose best RMS residual exceeds this are flagged untracked.
    pub max_residual: f64,
    /// Observed frames with less RGB spread than this carry no signal.
    pub min_texture: f64,
    /// Clamp on the constant-velocity prediction.
    pub max_step: f64,
    pub max_yaw_step: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            yaw_range: 0.45,
            yaw_step: 0.05,
            xy_range: 0.15,
            xy_step: 0.05,
            z_range: 0.1,
            z_step: 0.025,
            jacobian_step: 5e-3,
            refine_iterations: 40,
            starts: 5,
            screen_iterations: 6,
            max_residual: 0.1,
            min_texture: 0.01,
            max_step: 0.15,
            max_yaw_step: 0.3,
        }
    }
}

/// 4-DoF head state; yaw is kept unwrapped along a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl HeadState {
    pub fn from_transform(t: &RigidTransform) -> Self {
        let p = t.translation();
        Self {
            x: p.x,
            y: p.y,
            z: p.z,
            yaw: t.yaw_of_forward(),
        }
    }

    pub fn to_transform(self) -> RigidTransform {
        RigidTransform::from_euler([self.x, self.y, self.z], 0.0, 0.0, self.yaw)
    }

    fn offset(self, d: [f64; 4]) -> Self {
        Self {
            x: self.x + d[0],
            y: self.y + d[1],
            z: self.z + d[2],
            yaw: self.yaw + d[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub states: Vec<HeadState>,
    pub tracked: Vec<bool>,
    pub residuals: Vec<f64>,
}

impl TrackResult {
    pub fn poses(&self) -> Vec<RigidTransform> {
        self.states.iter().map(|s| s.to_transform()).collect()
    }

    pub fn untracked(&self) -> usize {
        self.tracked.iter().filter(|t| !**t).count()
    }
}

struct Objective<'a> {
    scene: &'a Scene,
    frame: &'a Image,
    keep: Vec<bool>,
}

impl Objective<'_> {
    /// Color differences over non-arm pixels; `None` outside the room.
    fn residuals(&self, s: HeadState) -> Result<Option<Vec<f64>>> {
        if !self.scene.contains([s.x, s.y, s.z]) {
            return Ok(None);
        }
        let img = render_scene_continuous(self.scene, &s.to_transform(), self.frame.width(), self.frame.height())?;
        let mut out = Vec::with_capacity(3 * self.keep.len());
        for (i, keep) in self.keep.iter().enumerate() {
            if *keep {
                for k in 0..3 {
                    out.push(img[3 * i + k] - self.frame.data()[3 * i + k] as f64);
                }
            }
        }
        Ok(Some(out))
    }

    /// RMS color residual over non-arm pixels.
    fn cost(&self, s: HeadState) -> Result<f64> {
        Ok(match self.residuals(s)? {
            Some(r) => rms(&r),
            None => f64::INFINITY,
        })
    }
}

fn rms(r: &[f64]) -> f64 {
    (r.iter().map(|v| v * v).sum::<f64>() / r.len().max(1) as f64).sqrt()
}

/// Levenberg-Marquardt on the pixel residuals with a central-difference
/// Jacobian.
fn refine(
    obj: &Objective,
    start: HeadState,
    start_cost: f64,
    cfg: &TrackerConfig,
    iterations: usize,
) -> Result<(HeadState, f64)> {
    let (mut best, mut best_cost) = (start, start_cost);
    let mut lambda = 1e-3;
    let mut h = cfg.jacobian_step;
    for _ in 0..iterations {
        let Some(r) = obj.residuals(best)? else { break };
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(4);
        for axis in 0..4 {
            let mut d = [0.0; 4];
            d[axis] = h;
            let plus = obj.residuals(best.offset(d))?;
            d[axis] = -h;
            let minus = obj.residuals(best.offset(d))?;
            let (Some(p), Some(m)) = (plus, minus) else {
                return Ok((best, best_cost));
            };
            cols.push(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect());
        }
        let mut a = Matrix4::zeros();
        let mut g = Vector4::zeros();
        for i in 0..4 {
            g[i] = cols[i].iter().zip(&r).map(|(j, v)| j * v).sum::<f64>();
            for k in i..4 {
                let v: f64 = cols[i].iter().zip(&cols[k]).map(|(p, q)| p * q).sum();
                a[(i, k)] = v;
                a[(k, i)] = v;
            }
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = a;
            for i in 0..4 {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-9);
            }
            let Some(step) = damped.lu().solve(&(-g)) else { break };
            let cand = best.offset([step[0], step[1], step[2], step[3]]);
            let c = obj.cost(cand)?;
            if c < best_cost {
                let small = step.norm() < 1e-7 || best_cost - c < 1e-9 * best_cost;
                best = cand;
                best_cost = c;
                lambda = (lambda / 3.0).max(1e-9);
                improved = !small;
                break;
            }
            lambda *= 4.0;
        }
        if best_cost < 1e-9 {
            break;
        }
        if !improved {
            // a stale Jacobian across a landmark border; retry with a finer one
            if h < 1e-4 {
                break;
            }
            h *= 0.25;
            lambda = 1e-3;
        }
    }
    Ok((best, best_cost))
}

fn texture_spread(frame: &Image, keep: &[bool]) -> f64 {
    let mut best: f64 = 0.0;
    for k in 0..3 {
        let vals: Vec<f64> = keep
            .iter()
            .enumerate()
            .filter(|(_, &kp)| kp)
            .map(|(i, _)| frame.data()[3 * i + k] as f64)
            .collect();
        if vals.len() < 2 {
            return 0.0;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        best = best.max(var.sqrt());
    }
    best
}

fn grid(range: f64, step: f64) -> Vec<f64> {
    let n = (range / step).round() as i64;
    (-n..=n).map(|i| i as f64 * step).collect()
}

/// Coarse grids around the prediction followed by a damped Gauss-Newton
/// refinement of all four coordinates. Yaw and sideways offset are searched
/// jointly because both slide the image horizontally; the best few
/// candidates then get a forward, height and refinement pass each.
fn fit(obj: &Objective, predicted: HeadState, cfg: &TrackerConfig) -> Result<(HeadState, f64)> {
    let (sin, cos) = predicted.yaw.sin_cos();
    let mut coarse = Vec::new();
    for dyaw in grid(cfg.yaw_range, cfg.yaw_step) {
        for side in grid(cfg.xy_range, cfg.xy_step) {
            let s = predicted.offset([-sin * side, cos * side, 0.0, dyaw]);
            coarse.push((obj.cost(s)?, s));
        }
    }
    coarse.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(HeadState, f64)> = None;
    for &(cost, start) in coarse.iter().take(cfg.starts.max(1)) {
        let (mut cur, mut cur_cost) = (start, cost);
        let center = cur;
        for fwd in grid(cfg.xy_range, cfg.xy_step) {
            let s = center.offset([cos * fwd, sin * fwd, 0.0, 0.0]);
            let c = obj.cost(s)?;
            if c < cur_cost {
                (cur, cur_cost) = (s, c);
            }
        }
        let center = cur;
        for dz in grid(cfg.z_range, cfg.z_step) {
            let s = center.offset([0.0, 0.0, dz, 0.0]);
            let c = obj.cost(s)?;
            if c < cur_cost {
                (cur, cur_cost) = (s, c);
            }
        }
        let (s, r) = refine(obj, cur, cur_cost, cfg, cfg.screen_iterations)?;
        if best.is_none_or(|(_, b)| r < b) {
            best = Some((s, r));
        }
    }
    let (s, r) = best.expect("coarse grid is never empty");
    refine(obj, s, r, cfg, cfg.refine_iterations)
}

/// Recovers per-frame head poses by photometric alignment against the known
/// scene, starting from `init` (the pose just before the first frame).
pub fn estimate_head_trajectory(
    frames: &[Image],
    scene: &Scene,
    init: &RigidTransform,
    cfg: &TrackerConfig,
) -> Result<TrackResult> {
    let mut prev = HeadState::from_transform(init);
    let mut vel = [0.0; 4];
    let mut out = TrackResult {
        states: Vec::with_capacity(frames.len()),
        tracked: Vec::with_capacity(frames.len()),
        residuals: Vec::with_capacity(frames.len()),
    };
    for frame in frames {
        let arm: Mask = arm_mask_from_frame(frame);
        let keep: Vec<bool> = arm.data().iter().map(|&m| m == 0).collect();
        let obj = Objective { scene, frame, keep };
        let predicted = prev.offset(vel);
        let (state, residual, ok) = if texture_spread(frame, &obj.keep) < cfg.min_texture {
            (predicted, f64::INFINITY, false)
        } else {
            let (s, r) = fit(&obj, predicted, cfg)?;
            (s, r, r <= cfg.max_residual)
        };
        let step = [state.x - prev.x, state.y - prev.y, state.z - prev.z];
        let norm = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
        let scale = if norm > cfg.max_step { cfg.max_step / norm } else { 1.0 };
        vel = [
            step[0] * scale,
            step[1] * scale,
            step[2] * scale,
            (state.yaw - prev.yaw).clamp(-cfg.max_yaw_step, cfg.max_yaw_step),
        ];
        if !ok {
            vel = [0.0; 4];
        }
        out.states.push(state);
        out.tracked.push(ok);
        out.residuals.push(residual);
        prev = state;
    }
    if out.states.iter().any(|s| !s.x.is_finite() || !s.yaw.is_finite()) {
        return Err(Error::Data("tracker produced non-finite poses".into()));
    }
    Ok(out)
}
