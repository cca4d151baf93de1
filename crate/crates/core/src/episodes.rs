//! Procedurally generated few-shot episodes.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Attempts at placing a shape before `sample_episode` gives up.
pub const MAX_RETRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeFamily {
    Disk,
    Rectangle,
    Triangle,
    Ring,
    Cross,
    Bar,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Disk,
        ShapeFamily::Rectangle,
        ShapeFamily::Triangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Bar,
    ];

    /// Membership test in shape-local coordinates scaled so the nominal
    /// radius is 1.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeFamily::Disk => u * u + v * v <= 1.0,
            ShapeFamily::Rectangle => u.abs() <= 1.0 && v.abs() <= 0.7,
            ShapeFamily::Triangle => {
                // Equilateral, inscribed in the unit circle, apex at (0, -1).
                let h = 3f64.sqrt() / 2.0;
                v <= 0.5 && -h * u - 0.5 * v <= 0.5 && h * u - 0.5 * v <= 0.5
            }
            ShapeFamily::Ring => (0.16..=1.0).contains(&(u * u + v * v)),
            ShapeFamily::Cross => (u.abs() <= 1.0 && v.abs() <= 0.45) || (u.abs() <= 0.45 && v.abs() <= 1.0),
            ShapeFamily::Bar => u.abs() <= 1.0 && v.abs() <= 0.55,
        }
    }

    /// Radius of the smallest centred disk containing the shape, in units of
    /// the nominal radius.
    pub fn extent(self) -> f64 {
        match self {
            ShapeFamily::Rectangle => 1.49f64.sqrt(),
            ShapeFamily::Cross => 1.2025f64.sqrt(),
            ShapeFamily::Bar => 1.3025f64.sqrt(),
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Disk => "disk",
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Bar => "bar",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClass {
    pub id: usize,
    pub family: ShapeFamily,
    /// Base RGB colour in `[0, 1]`.
    pub color: [f64; 3],
    /// Half-width of the uniform texture noise added to the colour.
    pub noise: f64,
    /// Nominal radius range as a fraction of `min(H, W)`.
    pub scale: (f64, f64),
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// `n` classes cycling through the shape families, with evenly spaced hues
/// behind a seeded offset.
pub fn generate_class_bank(n: usize, seed: u64) -> Result<Vec<SyntheticClass>> {
    if n < 2 {
        return Err(contract("generate_class_bank", "need at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: f64 = rng.gen();
    Ok((0..n)
        .map(|id| {
            let hue = offset + id as f64 / n as f64;
            let family = ShapeFamily::ALL[id % ShapeFamily::ALL.len()];
            // Reach (radius times extent) spans 36% to 46% of the short side.
            let lo = rng.gen_range(0.36..0.40) / family.extent();
            SyntheticClass {
                id,
                family,
                color: hsv_to_rgb(hue, rng.gen_range(0.75..0.95), rng.gen_range(0.8..0.95)),
                noise: rng.gen_range(0.02..0.06),
                scale: (lo, lo + 0.06 / family.extent()),
            }
        })
        .collect())
}

/// One image `[3, H, W]` with its binary mask `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn foreground(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_id: usize,
    pub query: Sample,
    pub support: Vec<Sample>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    /// Support images paired with their masks, as the model consumes them.
    pub fn support_pairs(&self) -> Vec<(&Tensor, &Tensor)> {
        self.support.iter().map(|s| (&s.image, &s.mask)).collect()
    }
}

/// Renders one instance at a random position, scale and rotation on a noisy
/// grey background.
pub fn render_instance<R: Rng>(class: &SyntheticClass, height: usize, width: usize, rng: &mut R) -> Result<Sample> {
    if height == 0 || width == 0 {
        return Err(contract("render_instance", "image must be non-empty"));
    }
    let side = height.min(width) as f64;
    for _ in 0..MAX_RETRIES {
        let radius = rng.gen_range(class.scale.0..=class.scale.1) * side;
        let reach = radius * class.family.extent();
        if radius < 1.0 || 2.0 * reach > side {
            continue;
        }
        let cx = rng.gen_range(reach..=width as f64 - reach);
        let cy = rng.gen_range(reach..=height as f64 - reach);
        let theta = rng.gen_range(0.0..2.0 * PI);
        let (sin, cos) = theta.sin_cos();
        let mut mask = vec![0.0; height * width];
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (cos * dx + sin * dy) / radius;
                let v = (-sin * dx + cos * dy) / radius;
                if class.family.contains(u, v) {
                    mask[y * width + x] = 1.0;
                }
            }
        }
        if !mask.iter().any(|&m| m > 0.0) {
            continue;
        }
        let mut image = vec![0.0; 3 * height * width];
        for i in 0..height * width {
            let grey = 0.5 + rng.gen_range(-0.15..0.15);
            for ch in 0..3 {
                let value = if mask[i] > 0.0 {
                    class.color[ch] + rng.gen_range(-class.noise..=class.noise)
                } else {
                    grey + rng.gen_range(-0.03..0.03)
                };
                image[ch * height * width + i] = value.clamp(0.0, 1.0);
            }
        }
        return Ok(Sample {
            image: Tensor::new(vec![3, height, width], image)?,
            mask: Tensor::new(vec![height, width], mask)?,
        });
    }
    Err(Error::Contract {
        op: "render_instance",
        msg: format!("class {} does not fit a {height}x{width} image", class.id),
    })
}

pub fn sample_episode<R: Rng>(class: &SyntheticClass, k: usize, height: usize, width: usize, rng: &mut R) -> Result<Episode> {
    if k == 0 {
        return Err(contract("sample_episode", "K must be at least 1"));
    }
    let query = render_instance(class, height, width, rng)?;
    let support = (0..k)
        .map(|_| render_instance(class, height, width, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        class_id: class.id,
        query,
        support,
    })
}

/// Disjoint train and test class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    train: Vec<usize>,
    test: Vec<usize>,
}

impl SplitSpec {
    pub fn new(train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let a: BTreeSet<_> = train.iter().collect();
        let b: BTreeSet<_> = test.iter().collect();
        if a.len() != train.len() || b.len() != test.len() {
            return Err(contract("SplitSpec", "duplicate class id"));
        }
        if let Some(id) = a.intersection(&b).next() {
            return Err(Error::Contract {
                op: "SplitSpec",
                msg: format!("class {id} is in both train and test"),
            });
        }
        Ok(Self { train, test })
    }

    /// The first `n_train` classes train, the next `n_test` are held out.
    pub fn leading(n_train: usize, n_test: usize) -> Result<Self> {
        Self::new((0..n_train).collect(), (n_train..n_train + n_test).collect())
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn check_bank(&self, bank: &[SyntheticClass]) -> Result<()> {
        match self.train.iter().chain(&self.test).find(|&&id| id >= bank.len()) {
            Some(id) => Err(Error::Config(format!("class {id} is not in a bank of {}", bank.len()))),
            None => Ok(()),
        }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::leading(6, 2).expect("disjoint default split")
    }
}

/// Episode `index` of a stream: class drawn uniformly from `classes`, with an
/// rng stream of its own so episodes are independent of evaluation order.
pub fn indexed_episode(
    bank: &[SyntheticClass],
    classes: &[usize],
    index: u64,
    k: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Episode> {
    if classes.is_empty() {
        return Err(contract("indexed_episode", "no classes to sample from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let id = classes[rng.gen_range(0..classes.len())];
    let class = bank
        .get(id)
        .ok_or_else(|| Error::Config(format!("class {id} is not in a bank of {}", bank.len())))?;
    sample_episode(class, k, height, width, &mut rng)
}

pub fn episode_pool(
    bank: &[SyntheticClass],
    classes: &[usize],
    n: usize,
    k: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    (0..n as u64)
        .map(|i| indexed_episode(bank, classes, i, k, height, width, seed))
        .collect()
}
