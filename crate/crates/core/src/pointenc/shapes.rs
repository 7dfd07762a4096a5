use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::rng;

/// Point feature width: xyz + rgb.
pub const POINT_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
    Pyramid,
    Disk,
    Helix,
    Ellipsoid,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 10] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Cone,
        ShapeKind::Pyramid,
        ShapeKind::Disk,
        ShapeKind::Helix,
        ShapeKind::Ellipsoid,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Cone => "cone",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Disk => "disk",
            ShapeKind::Helix => "helix",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Cross => "cross",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "shape kind",
                name: s.to_string(),
            })
    }
}

/// `n×6` cloud of xyz (object units) and rgb in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Array<f32>,
}

impl PointCloud {
    pub fn new(points: Array<f32>) -> Result<Self> {
        if points.rank() != 2 || points.cols() != POINT_DIM {
            return Err(Error::shape("point cloud", points.shape(), &[0, POINT_DIM]));
        }
        if !points.is_finite() {
            return Err(Error::Invalid("point cloud has non-finite values".into()));
        }
        for i in 0..points.rows() {
            if points.row(i)[3..].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Invalid(format!("color of point {i} outside [0, 1]")));
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let r = self.points.row(i);
        [r[0] as f64, r[1] as f64, r[2] as f64]
    }

    pub fn translated(&self, t: [f32; 3]) -> Self {
        let mut p = self.points.clone();
        for i in 0..p.rows() {
            let row = p.row_mut(i);
            for d in 0..3 {
                row[d] += t[d];
            }
        }
        Self { points: p }
    }
}

fn unit_sphere(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Uniform point on the triangle `a, b, c`.
fn triangle(rng: &mut impl Rng, a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let r1: f64 = rng.gen::<f64>().sqrt();
    let r2: f64 = rng.gen();
    let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
    [
        wa * a[0] + wb * b[0] + wc * c[0],
        wa * a[1] + wb * b[1] + wc * c[1],
        wa * a[2] + wb * b[2] + wc * c[2],
    ]
}

fn pick_weighted(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Uniform point on the surface of the axis-aligned box with half-extents `h`.
fn box_surface(rng: &mut impl Rng, h: [f64; 3]) -> [f64; 3] {
    // faces normal to x, y, z
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let axis = pick_weighted(rng, &areas);
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for d in 0..3 {
        p[d] = if d == axis {
            sign * h[d]
        } else {
            rng.gen_range(-h[d]..=h[d])
        };
    }
    p
}

fn sample_unit(kind: ShapeKind, rng: &mut impl Rng) -> [f64; 3] {
    match kind {
        ShapeKind::Sphere => unit_sphere(rng),
        ShapeKind::Cube => box_surface(rng, [1.0; 3]),
        ShapeKind::Cylinder => {
            // side 2πrh = 4π, caps π each
            let part = pick_weighted(rng, &[4.0 * PI, PI, PI]);
            let th = rng.gen_range(0.0..2.0 * PI);
            match part {
                0 => [th.cos(), th.sin(), rng.gen_range(-1.0..=1.0)],
                k => {
                    let r = rng.gen::<f64>().sqrt();
                    [r * th.cos(), r * th.sin(), if k == 1 { 1.0 } else { -1.0 }]
                }
            }
        }
        ShapeKind::Torus => {
            let (big, small) = (0.7, 0.3);
            loop {
                let u = rng.gen_range(0.0..2.0 * PI);
                let v = rng.gen_range(0.0..2.0 * PI);
                let w = (big + small * v.cos()) / (big + small);
                if rng.gen::<f64>() <= w {
                    let ring = big + small * v.cos();
                    return [ring * u.cos(), ring * u.sin(), small * v.sin()];
                }
            }
        }
        ShapeKind::Cone => {
            // apex (0,0,1), base radius 1 at z=-1; lateral area π·√5, base π
            let part = pick_weighted(rng, &[PI * 5f64.sqrt(), PI]);
            let th = rng.gen_range(0.0..2.0 * PI);
            let r = rng.gen::<f64>().sqrt();
            if part == 0 {
                [r * th.cos(), r * th.sin(), 1.0 - 2.0 * r]
            } else {
                [r * th.cos(), r * th.sin(), -1.0]
            }
        }
        ShapeKind::Pyramid => {
            let apex = [0.0, 0.0, 1.0];
            let base = [
                [-1.0, -1.0, -1.0],
                [1.0, -1.0, -1.0],
                [1.0, 1.0, -1.0],
                [-1.0, 1.0, -1.0],
            ];
            // slant faces: base edge 2, slant height √5 → area √5 each; base 4
            let s = 5f64.sqrt();
            match pick_weighted(rng, &[s, s, s, s, 4.0]) {
                4 => [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), -1.0],
                f => triangle(rng, apex, base[f], base[(f + 1) % 4]),
            }
        }
        ShapeKind::Disk => {
            let th = rng.gen_range(0.0..2.0 * PI);
            let r = rng.gen::<f64>().sqrt();
            [r * th.cos(), r * th.sin(), 0.0]
        }
        ShapeKind::Helix => {
            let t: f64 = rng.gen();
            let a = 3.0 * 2.0 * PI * t;
            [a.cos(), a.sin(), 2.0 * t - 1.0]
        }
        ShapeKind::Ellipsoid => {
            let (a, b, c) = (1.0, 0.6, 0.4);
            let wmax = f64::max(b * c, f64::max(a * c, a * b));
            loop {
                let u = unit_sphere(rng);
                let w = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
                if rng.gen::<f64>() * wmax <= w {
                    return [a * u[0], b * u[1], c * u[2]];
                }
            }
        }
        ShapeKind::Cross => {
            let bars = [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2]];
            let area = |h: [f64; 3]| h[1] * h[2] + h[0] * h[2] + h[0] * h[1];
            loop {
                let which = pick_weighted(rng, &[area(bars[0]), area(bars[1])]);
                let p = box_surface(rng, bars[which]);
                let other = bars[1 - which];
                let inside = (0..3).all(|d| p[d].abs() < other[d]);
                if !inside {
                    return p;
                }
            }
        }
    }
}

/// Samples `n` surface points (curve points for a helix) of a shape scaled
/// by `scale`, colored `color` with ±0.05 per-point jitter.
pub fn generate_shape(kind: ShapeKind, scale: f64, color: [f64; 3], n: usize, seed: u64) -> Result<PointCloud> {
    if n < 16 {
        return Err(Error::Invalid(format!("need at least 16 points, got {n}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Invalid(format!("scale must be positive, got {scale}")));
    }
    let mut geo = rng::stream(seed, "shape.geometry");
    let mut tint = rng::stream(seed, "shape.color");
    let mut data = Vec::with_capacity(n * POINT_DIM);
    for _ in 0..n {
        let p = sample_unit(kind, &mut geo);
        data.extend(p.iter().map(|&v| (v * scale) as f32));
        for c in color {
            let j = c + tint.gen_range(-0.05..=0.05);
            data.push(j.clamp(0.0, 1.0) as f32);
        }
    }
    PointCloud::new(Array::new(&[n, POINT_DIM], data)?)
}
