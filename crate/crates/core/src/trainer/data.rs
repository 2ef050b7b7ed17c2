//! Seeded synthetic datasets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Images drawn around per-class prototype patterns.
///
/// Each prototype is a sum of random low-frequency plane waves per channel.
/// A sample is `gain · (prototype + noise) + offset`.
#[derive(Debug, Clone)]
pub struct ClusterTask {
    prototypes: Vec<Tensor4>,
    pub noise: f32,
    pub gain: f32,
    pub offset: f32,
}

impl ClusterTask {
    pub const SIZE: usize = 16;
    pub const CHANNELS: usize = 3;

    pub fn new(seed: u64, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("a classification task needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Self::SIZE;
        let prototypes = (0..classes)
            .map(|_| {
                let waves: Vec<[f32; 4]> = (0..Self::CHANNELS * 3)
                    .map(|_| {
                        [
                            rng.random_range(-0.6..0.6),
                            rng.random_range(-0.6..0.6),
                            rng.random_range(0.0..std::f32::consts::TAU),
                            rng.random_range(0.4..0.8),
                        ]
                    })
                    .collect();
                Tensor4::from_fn(Shape4::new(1, Self::CHANNELS, s, s), |_, c, y, x| {
                    waves[c * 3..c * 3 + 3]
                        .iter()
                        .map(|[fy, fx, ph, amp]| amp * (fy * y as f32 + fx * x as f32 + ph).sin())
                        .sum()
                })
            })
            .collect();
        Ok(Self {
            prototypes,
            noise: 0.6,
            gain: 1.0,
            offset: 0.0,
        })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor4, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.classes())).collect();
        let normal = Normal::new(0.0f32, self.noise.max(0.0)).expect("finite std");
        let plane = Self::CHANNELS * Self::SIZE * Self::SIZE;
        let mut data = Vec::with_capacity(n * plane);
        for &l in &labels {
            for &p in self.prototypes[l].data() {
                data.push(self.gain * (p + normal.sample(rng)) + self.offset);
            }
        }
        let shape = Shape4::new(n, Self::CHANNELS, Self::SIZE, Self::SIZE);
        (Tensor4::from_vec(shape, data).expect("sized"), labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
    pub class: usize,
}

impl GtBox {
    pub fn area(&self) -> f32 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

pub fn iou(a: &GtBox, b: &GtBox) -> f32 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_extent: usize,
    pub max_extent: usize,
    pub classes: usize,
    pub background_noise: f32,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_objects: 1,
            max_objects: 3,
            min_extent: 10,
            max_extent: 36,
            classes: 3,
            background_noise: 0.15,
        }
    }
}

/// One image with its boxes. Pixel `(y, x)` covers `[x, x+1) × [y, y+1)`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor4,
    pub boxes: Vec<GtBox>,
}

/// Colored rectangles and disks on noise. The class sets the color; the
/// shape is drawn at random and carries no label.
pub fn generate_scenes(cfg: &ShapesConfig, count: usize, seed: u64) -> Result<Vec<Scene>> {
    if cfg.classes == 0 || cfg.classes > 3 {
        return Err(Error::Config("shapes dataset supports 1..=3 classes".into()));
    }
    if cfg.min_objects == 0
        || cfg.min_objects > cfg.max_objects
        || cfg.min_extent < 2
        || cfg.min_extent > cfg.max_extent
        || cfg.max_extent > cfg.size
    {
        return Err(Error::Config(format!("invalid shapes configuration {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = Normal::new(0.0f32, cfg.background_noise.max(0.0)).expect("finite std");
    let s = cfg.size;
    (0..count)
        .map(|_| {
            let mut img: Vec<f32> = (0..3 * s * s).map(|_| bg.sample(&mut rng)).collect();
            let want = rng.random_range(cfg.min_objects..=cfg.max_objects);
            let mut boxes: Vec<GtBox> = Vec::with_capacity(want);
            let mut tries = 0;
            while boxes.len() < want {
                tries += 1;
                if tries > 200 {
                    return Err(Error::Config("could not place non-overlapping objects".into()));
                }
                let w = rng.random_range(cfg.min_extent..=cfg.max_extent);
                let disk = rng.random_bool(0.5);
                let h = if disk { w } else { rng.random_range(cfg.min_extent..=cfg.max_extent) };
                let x0 = rng.random_range(0..=s - w);
                let y0 = rng.random_range(0..=s - h);
                let class = rng.random_range(0..cfg.classes);
                let b = GtBox {
                    x0: x0 as f32,
                    y0: y0 as f32,
                    x1: (x0 + w) as f32,
                    y1: (y0 + h) as f32,
                    class,
                };
                if boxes.iter().any(|o| iou(o, &b) > 0.0) {
                    continue;
                }
                let (cx, cy, r) = (x0 as f32 + w as f32 / 2.0, y0 as f32 + h as f32 / 2.0, w as f32 / 2.0);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        let inside = !disk || {
                            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                            dx * dx + dy * dy <= r * r
                        };
                        if inside {
                            for c in 0..3 {
                                img[(c * s + y) * s + x] += if c == class { 1.0 } else { 0.2 };
                            }
                        }
                    }
                }
                boxes.push(b);
            }
            let image = Tensor4::from_vec(Shape4::new(1, 3, s, s), img).expect("sized");
            Ok(Scene { image, boxes })
        })
        .collect()
}
