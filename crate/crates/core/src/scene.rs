//! Procedural sRGB test content: fractal backgrounds with shapes and
//! textures, and short clips with global camera drift plus one
//! independently moving object. Used when no video corpus is supplied.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Value-noise octave: random lattice values, bilinearly interpolated.
struct Lattice {
    cells: usize,
    values: Vec<f64>,
}

impl Lattice {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = (cells + 2) * (cells + 2);
        Lattice {
            cells,
            values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// `u, v` in [0, 1].
    fn sample(&self, u: f64, v: f64) -> f64 {
        let stride = self.cells + 2;
        let x = u.clamp(0.0, 1.0) * self.cells as f64;
        let y = v.clamp(0.0, 1.0) * self.cells as f64;
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        // smoothstep weights give C1 continuity across cells
        let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
        let at = |yy: usize, xx: usize| self.values[yy * stride + xx];
        let top = at(y0, x0) * (1.0 - sx) + at(y0, x0 + 1) * sx;
        let bot = at(y0 + 1, x0) * (1.0 - sx) + at(y0 + 1, x0 + 1) * sx;
        top * (1.0 - sy) + bot * sy
    }
}

struct Fractal {
    octaves: Vec<(Lattice, f64)>,
}

impl Fractal {
    fn new(rng: &mut ChaCha8Rng, base_cells: usize, octaves: usize) -> Self {
        let octaves = (0..octaves)
            .map(|o| (Lattice::new(rng, base_cells << o), 0.5f64.powi(o as i32)))
            .collect();
        Fractal { octaves }
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        let norm: f64 = self.octaves.iter().map(|(_, a)| a).sum();
        self.octaves.iter().map(|(l, a)| a * l.sample(u, v)).sum::<f64>() / norm
    }
}

fn correlated_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let lum: f64 = rng.random_range(0.1..0.9);
    let mut c = [0.0; 3];
    for v in c.iter_mut() {
        *v = (lum + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
    }
    c
}

enum ShapeKind {
    Ellipse { rx: f64, ry: f64, angle: f64 },
    Rect { hw: f64, hh: f64, angle: f64 },
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    color: [f64; 3],
    /// Stripe frequency (cycles per unit) and orientation; zero for flat fill.
    stripes: (f64, f64),
    softness: f64,
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let angle = rng.random_range(0.0..PI);
        let kind = if rng.random_bool(0.5) {
            ShapeKind::Ellipse {
                rx: rng.random_range(0.04..0.25),
                ry: rng.random_range(0.04..0.25),
                angle,
            }
        } else {
            ShapeKind::Rect {
                hw: rng.random_range(0.03..0.2),
                hh: rng.random_range(0.03..0.2),
                angle,
            }
        };
        let stripes = if rng.random_bool(0.35) {
            (rng.random_range(10.0..40.0), rng.random_range(0.0..PI))
        } else {
            (0.0, 0.0)
        };
        Shape {
            kind,
            cx: rng.random_range(0.0..1.0),
            cy: rng.random_range(0.0..1.0),
            color: correlated_color(rng),
            stripes,
            softness: rng.random_range(0.001..0.01),
        }
    }

    /// Coverage in [0, 1] at `(u, v)` with the shape translated by `(du, dv)`.
    fn alpha(&self, u: f64, v: f64, du: f64, dv: f64) -> f64 {
        let (x, y) = (u - self.cx - du, v - self.cy - dv);
        let sd = match self.kind {
            ShapeKind::Ellipse { rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (xr, yr) = (c * x + s * y, -s * x + c * y);
                let r = ((xr / rx).powi(2) + (yr / ry).powi(2)).sqrt();
                (r - 1.0) * rx.min(ry)
            }
            ShapeKind::Rect { hw, hh, angle } => {
                let (s, c) = angle.sin_cos();
                let (xr, yr) = (c * x + s * y, -s * x + c * y);
                (xr.abs() - hw).max(yr.abs() - hh)
            }
        };
        (0.5 - sd / self.softness).clamp(0.0, 1.0)
    }

    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        if self.stripes.0 == 0.0 {
            return self.color;
        }
        let (s, c) = self.stripes.1.sin_cos();
        let t = 0.5 + 0.5 * (2.0 * PI * self.stripes.0 * (c * u + s * v)).sin();
        let k = 0.6 + 0.4 * t;
        [self.color[0] * k, self.color[1] * k, self.color[2] * k]
    }
}

struct Scene {
    lum: Fractal,
    chroma: [Fractal; 3],
    base: [f64; 3],
    shapes: Vec<Shape>,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let lum = Fractal::new(rng, 3, 5);
        let chroma = [
            Fractal::new(rng, 2, 2),
            Fractal::new(rng, 2, 2),
            Fractal::new(rng, 2, 2),
        ];
        let base = correlated_color(rng);
        let n = rng.random_range(6..14);
        let shapes = (0..n).map(|_| Shape::random(rng)).collect();
        Scene {
            lum,
            chroma,
            base,
            shapes,
        }
    }

    fn background(&self, u: f64, v: f64) -> [f64; 3] {
        let l = 0.3 * self.lum.sample(u, v);
        let mut c = [0.0; 3];
        for (i, v_) in c.iter_mut().enumerate() {
            *v_ = self.base[i] + l + 0.08 * self.chroma[i].sample(u, v);
        }
        c
    }

    fn render_at(&self, u: f64, v: f64, sprite: Option<(&Shape, f64, f64)>) -> [f64; 3] {
        let mut c = self.background(u, v);
        let layers = self.shapes.iter().map(|s| (s, 0.0, 0.0)).chain(sprite);
        for (shape, du, dv) in layers {
            let a = shape.alpha(u, v, du, dv);
            if a > 0.0 {
                let s = shape.shade(u - du, v - dv);
                for i in 0..3 {
                    c[i] = c[i] * (1.0 - a) + s[i] * a;
                }
            }
        }
        c
    }
}

/// A random natural-looking sRGB image in [0, 1], deterministic in `seed`.
pub fn natural_image(seed: u64, height: usize, width: usize) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng);
    let scale = height.max(width) as f64;
    Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
        let (u, v) = ((x as f64 + 0.5) / scale, (y as f64 + 0.5) / scale);
        scene.render_at(u, v, None)[c].clamp(0.0, 1.0) as f32
    })
}

/// `frames` consecutive sRGB frames with sub-pixel camera drift and one
/// object moving on its own trajectory.
pub fn natural_clip(seed: u64, frames: usize, height: usize, width: usize) -> Vec<Array3<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng);
    let scale = height.max(width) as f64;
    let cam_v = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let mut sprite = Shape::random(&mut rng);
    sprite.cx = rng.random_range(0.2..0.8) * width as f64 / scale;
    sprite.cy = rng.random_range(0.2..0.8) * height as f64 / scale;
    let obj_v = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    (0..frames)
        .map(|t| {
            let t = t as f64;
            let (cx, cy) = (cam_v.0 * t, cam_v.1 * t);
            let (ox, oy) = (obj_v.0 * t / scale, obj_v.1 * t / scale);
            Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
                let u = (x as f64 + 0.5 + cx) / scale;
                let v = (y as f64 + 0.5 + cy) / scale;
                scene.render_at(u, v, Some((&sprite, ox, oy)))[c]
                    .clamp(0.0, 1.0) as f32
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = natural_image(3, 32, 48);
        assert_eq!(a, natural_image(3, 32, 48));
        assert_ne!(a, natural_image(4, 32, 48));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn clip_frames_move() {
        let clip = natural_clip(1, 3, 32, 32);
        assert_eq!(clip.len(), 3);
        assert_ne!(clip[0], clip[1]);
        assert!(clip.iter().all(|f| f.dim() == (32, 32, 3)));
    }

    #[test]
    fn images_have_structure() {
        let img = natural_image(11, 64, 64);
        let mean = img.mean().unwrap();
        let var = img.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(var > 1e-3, "{var}");
    }
}
