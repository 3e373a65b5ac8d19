use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng_from;

/// Color of arm geometry. Scene colors keep green at or above
/// [`MIN_SCENE_GREEN`], so they stay well away from it.
pub const ARM_COLOR: [f64; 3] = [1.0, 0.0, 1.0];
pub const MIN_SCENE_GREEN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    PosX,
    NegX,
    PosY,
    NegY,
    Floor,
    Ceiling,
}

impl Surface {
    pub const ALL: [Surface; 6] = [
        Surface::PosX,
        Surface::NegX,
        Surface::PosY,
        Surface::NegY,
        Surface::Floor,
        Surface::Ceiling,
    ];
    pub const WALLS: [Surface; 4] = [Surface::PosX, Surface::NegX, Surface::PosY, Surface::NegY];

    pub fn index(self) -> usize {
        self as usize
    }

    /// 2-D surface coordinates of a point on this surface.
    pub fn uv(self, p: [f64; 3]) -> [f64; 2] {
        match self {
            Surface::PosX | Surface::NegX => [p[1], p[2]],
            Surface::PosY | Surface::NegY => [p[0], p[2]],
            Surface::Floor | Surface::Ceiling => [p[0], p[1]],
        }
    }
}

/// Smooth color field `base + amp · sin(fu·u + pu + c) · cos(fv·v + pv)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub base: [f64; 3],
    pub amp: [f64; 3],
    pub freq: [f64; 2],
    pub phase: [f64; 2],
}

impl Texture {
    pub fn color(&self, uv: [f64; 2]) -> [f64; 3] {
        let mut c = [0.0; 3];
        let cv = (self.freq[1] * uv[1] + self.phase[1]).cos();
        for (k, out) in c.iter_mut().enumerate() {
            let s = (self.freq[0] * uv[0] + self.phase[0] + 1.3 * k as f64).sin();
            *out = self.base[k] + self.amp[k] * s * cv;
        }
        c
    }

    fn min_green(&self) -> f64 {
        self.base[1] - self.amp[1].abs()
    }
}

/// Flat colored rectangle painted on a wall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landmark {
    pub surface: Surface,
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub color: [f64; 3],
}

/// Width of the blend band at landmark borders, in meters.
pub const LANDMARK_EDGE: f64 = 0.06;

impl Landmark {
    pub fn contains(&self, uv: [f64; 2]) -> bool {
        (uv[0] - self.center[0]).abs() <= 0.5 * self.size[0] && (uv[1] - self.center[1]).abs() <= 0.5 * self.size[1]
    }

    /// Paint coverage in `[0, 1]`: 1 in the interior, smoothstep down to 0
    /// across the border band.
    pub fn coverage(&self, uv: [f64; 2]) -> f64 {
        let inside = |d: f64, half: f64| {
            let t = ((half - d) / LANDMARK_EDGE + 0.5).clamp(0.0, 1.0);
            t * t * (3.0 - 2.0 * t)
        };
        inside((uv[0] - self.center[0]).abs(), 0.5 * self.size[0])
            * inside((uv[1] - self.center[1]).abs(), 0.5 * self.size[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub half_x: f64,
    pub half_y: f64,
    pub height: f64,
    pub landmarks: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            half_x: 2.5,
            half_y: 2.5,
            height: 3.0,
            landmarks: 8,
        }
    }
}

/// Axis-aligned room `[-half_x, half_x] × [-half_y, half_y] × [0, height]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub half_x: f64,
    pub half_y: f64,
    pub height: f64,
    pub textures: Vec<Texture>,
    pub landmarks: Vec<Landmark>,
    pub seed: u64,
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Scene {
    pub fn generate(config: &SceneConfig, seed: u64) -> Result<Scene> {
        let mut rng = rng_from(seed, &[0x5C]);
        let textures = Surface::ALL
            .iter()
            .map(|s| {
                let (lo, hi) = match s {
                    Surface::Floor => (0.35, 0.55),
                    Surface::Ceiling => (0.65, 0.8),
                    _ => (0.45, 0.75),
                };
                Texture {
                    base: [0; 3].map(|_| rng.gen_range(lo..hi)),
                    amp: [0; 3].map(|_| rng.gen_range(0.06..0.18)),
                    freq: [rng.gen_range(3.0..6.0), rng.gen_range(2.0..5.0)],
                    phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
                }
            })
            .collect();
        let mut landmarks = Vec::with_capacity(config.landmarks);
        for i in 0..config.landmarks {
            let surface = Surface::WALLS[i % 4];
            let extent = match surface {
                Surface::PosX | Surface::NegX => config.half_y,
                _ => config.half_x,
            };
            let size = [rng.gen_range(0.4..0.9), rng.gen_range(0.4..0.9)];
            let span = (extent - 0.5 * size[0] - LANDMARK_EDGE).max(0.0);
            let center = [
                rng.gen_range(-span..=span),
                rng.gen_range((0.5 * size[1] + 0.3)..(config.height - 0.5 * size[1] - 0.3).max(0.5 * size[1] + 0.31)),
            ];
            // saturated hue with green kept above the floor
            let hue = (i as f64 / config.landmarks.max(1) as f64 + rng.gen_range(0.0..0.1)) * std::f64::consts::TAU;
            let color = [
                0.55 + 0.4 * hue.cos(),
                0.55 + 0.3 * (hue + 2.1).cos(),
                0.55 + 0.4 * (hue + 4.2).cos(),
            ];
            landmarks.push(Landmark {
                surface,
                center,
                size,
                color,
            });
        }
        let scene = Scene {
            half_x: config.half_x,
            half_y: config.half_y,
            height: config.height,
            textures,
            landmarks,
            seed,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_x > 0.5 && self.half_y > 0.5 && self.height > 2.0) {
            return Err(Error::Config(format!(
                "room {}x{}x{} is too small",
                2.0 * self.half_x,
                2.0 * self.half_y,
                self.height
            )));
        }
        if self.textures.len() != 6 {
            return Err(Error::Config("scene needs one texture per surface".into()));
        }
        if self.textures.iter().any(|t| t.min_green() < MIN_SCENE_GREEN) {
            return Err(Error::Config(
                "texture green channel can fall below the scene floor".into(),
            ));
        }
        for l in &self.landmarks {
            if !Surface::WALLS.contains(&l.surface) {
                return Err(Error::Config("landmarks must sit on walls".into()));
            }
            let extent = match l.surface {
                Surface::PosX | Surface::NegX => self.half_y,
                _ => self.half_x,
            };
            if l.center[0].abs() + 0.5 * l.size[0] > extent
                || l.center[1] - 0.5 * l.size[1] < 0.0
                || l.center[1] + 0.5 * l.size[1] > self.height
            {
                return Err(Error::Config(format!("landmark {l:?} leaves its wall")));
            }
            if l.color[1] < MIN_SCENE_GREEN || color_distance(l.color, ARM_COLOR) < MIN_SCENE_GREEN {
                return Err(Error::Config(format!(
                    "landmark color {:?} too close to the arm color",
                    l.color
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p[0].abs() < self.half_x && p[1].abs() < self.half_y && p[2] > 0.0 && p[2] < self.height
    }

    /// Exit point of a ray cast from inside the room: `(t, surface)`.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> (f64, Surface) {
        let mut best = (f64::INFINITY, Surface::Floor);
        let planes = [
            (0, self.half_x, Surface::PosX),
            (0, -self.half_x, Surface::NegX),
            (1, self.half_y, Surface::PosY),
            (1, -self.half_y, Surface::NegY),
            (2, 0.0, Surface::Floor),
            (2, self.height, Surface::Ceiling),
        ];
        for (axis, bound, surface) in planes {
            let d = dir[axis];
            if d == 0.0 {
                continue;
            }
            let t = (bound - origin[axis]) / d;
            if t > 0.0 && t < best.0 {
                best = (t, surface);
            }
        }
        best
    }

    /// Scene radiance along a ray from inside the room.
    pub fn shade(&self, origin: [f64; 3], dir: [f64; 3]) -> [f64; 3] {
        let (t, surface) = self.intersect(origin, dir);
        let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
        let uv = surface.uv(p);
        let mut c = self.textures[surface.index()].color(uv);
        for l in &self.landmarks {
            if l.surface == surface {
                let a = l.coverage(uv);
                if a > 0.0 {
                    for k in 0..3 {
                        c[k] += a * (l.color[k] - c[k]);
                    }
                }
            }
        }
        c
    }
}
