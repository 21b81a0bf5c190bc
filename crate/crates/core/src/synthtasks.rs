//! Synthetic 32x32 raster tasks with exact ground truth: a sun/pole/shadow
//! scene whose features satisfy l1/h1 = l2/h2, and a two-squares scene with
//! l2 = 1.5 l1. Includes patch token ordering (raster and parallel),
//! color-mask feature extraction, and ratio/R^2 evaluation.
//!
//! Scene parameters are sampled on a pixel-exact lattice (quarter-integer
//! slopes times multiple-of-4 heights), so mask extraction inverts the
//! generator exactly; the extractor itself works on arbitrary images.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{NormalStream, SeedPath};

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const SUN: [u8; 3] = [255, 215, 0];
pub const POLE: [u8; 3] = [139, 69, 19];
pub const SHADOW: [u8; 3] = [105, 105, 105];
pub const UPPER_SQUARE: [u8; 3] = [220, 20, 60];
pub const LOWER_SQUARE: [u8; 3] = [30, 144, 255];

/// Fixed-size RGB pixel grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, color: [u8; 3]) {
        self.pixels[row * self.width + col] = color;
    }

    /// Binary PPM (P6, maxval 255) encoding.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut at = 0usize;
        let mut token = |what: &'static str| -> Result<Vec<u8>> {
            // skip whitespace and '#' comments
            loop {
                while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                    at += 1;
                }
                if at < bytes.len() && bytes[at] == b'#' {
                    while at < bytes.len() && bytes[at] != b'\n' {
                        at += 1;
                    }
                } else {
                    break;
                }
            }
            let start = at;
            while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if start == at {
                return Err(Error::Parse {
                    what,
                    why: "unexpected end of header".into(),
                });
            }
            Ok(bytes[start..at].to_vec())
        };
        let magic = token("ppm magic")?;
        if magic != b"P6" {
            return Err(Error::Parse {
                what: "ppm magic",
                why: format!("expected P6, got {:?}", String::from_utf8_lossy(&magic)),
            });
        }
        let parse = |what: &'static str, v: Vec<u8>| -> Result<usize> {
            String::from_utf8_lossy(&v)
                .parse()
                .map_err(|_| Error::Parse {
                    what,
                    why: "not a number".into(),
                })
        };
        let width = parse("ppm width", token("ppm width")?)?;
        let height = parse("ppm height", token("ppm height")?)?;
        let maxval = parse("ppm maxval", token("ppm maxval")?)?;
        if maxval != 255 {
            return Err(Error::Parse {
                what: "ppm maxval",
                why: format!("expected 255, got {maxval}"),
            });
        }
        at += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < at + need {
            return Err(Error::Parse {
                what: "ppm payload",
                why: format!("need {need} bytes, got {}", bytes.len() - at),
            });
        }
        let pixels = bytes[at..at + need]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm_bytes())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_ppm_bytes(&bytes)
    }
}

/// Which synthetic scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Sun, flagpole, and shadow with l1/h1 = l2/h2 (target ratio 1).
    SunShadow,
    /// Two squares with l2 = 1.5 l1 (target ratio 1.5).
    ScaledSquares,
}

impl TaskKind {
    pub fn target_ratio(self) -> f64 {
        match self {
            TaskKind::SunShadow => 1.0,
            TaskKind::ScaledSquares => 1.5,
        }
    }
}

/// Ground-truth geometric features in continuous coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Features {
    SunShadow { l1: f64, h1: f64, h2: f64, l2: f64 },
    Squares { l1: f64, l2: f64 },
}

impl Features {
    /// The constraint ratio: (l2 h1)/(l1 h2) for the shadow scene, l2/l1 for
    /// the squares.
    pub fn ratio(&self) -> f64 {
        match self {
            Features::SunShadow { l1, h1, h2, l2 } => (l2 * h1) / (l1 * h2),
            Features::Squares { l1, l2 } => l2 / l1,
        }
    }

    /// Paired features for the through-origin fit: (l1 h2, l2 h1) or (l1, l2).
    pub fn pair(&self) -> (f64, f64) {
        match self {
            Features::SunShadow { l1, h1, h2, l2 } => (l1 * h2, l2 * h1),
            Features::Squares { l1, l2 } => (*l1, *l2),
        }
    }
}

/// One generated sample with its exact truth.
#[derive(Clone, Debug)]
pub struct TaskSample {
    pub image: RasterImage,
    pub truth: Features,
    pub target_ratio: f64,
}

/// Admissible sun/pole/shadow geometry. Slopes are quarter-integers and
/// heights multiples of 4, so every derived length is a whole pixel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Task1Bounds {
    pub sun_heights: Vec<u32>,
    pub pole_heights: Vec<u32>,
    pub slopes: Vec<f64>,
}

impl Default for Task1Bounds {
    fn default() -> Self {
        Self {
            sun_heights: vec![8, 12, 16, 20],
            pole_heights: vec![4, 8],
            slopes: vec![0.5, 0.75, 1.0],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Task2Bounds {
    /// Upper-square sides; must be even so that 1.5x is a whole pixel.
    pub upper_sides: Vec<u32>,
}

impl Default for Task2Bounds {
    fn default() -> Self {
        Self {
            upper_sides: vec![4, 6, 8],
        }
    }
}

const CANVAS: usize = 32;
const SUN_RADIUS: i64 = 2;
const MAX_ATTEMPTS: usize = 64;

fn pick<T: Copy>(stream: &mut NormalStream, items: &[T]) -> T {
    items[(stream.next_uniform() * items.len() as f64) as usize % items.len()]
}

fn pick_range(stream: &mut NormalStream, lo: usize, hi: usize) -> usize {
    lo + ((stream.next_uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

pub(crate) fn paint_sun_shadow(
    l1: usize,
    h1: usize,
    h2: usize,
    l2: usize,
    base_col: usize,
) -> RasterImage {
    let mut img = RasterImage::filled(CANVAS, CANVAS, BACKGROUND);
    let ground = CANVAS - 1;
    // pole: one column from the ground up
    for row in (ground + 1 - h2)..=ground {
        img.set(row, base_col, POLE);
    }
    // shadow: run on the ground row away from the sun
    for col in (base_col + 1)..=(base_col + l2) {
        img.set(ground, col, SHADOW);
    }
    // sun: disc centered l1 left of the pole base, h1 above the ground
    let (cr, cc) = ((ground - h1) as i64, (base_col - l1) as i64);
    for dr in -SUN_RADIUS..=SUN_RADIUS {
        for dc in -SUN_RADIUS..=SUN_RADIUS {
            if dr * dr + dc * dc <= SUN_RADIUS * SUN_RADIUS {
                img.set((cr + dr) as usize, (cc + dc) as usize, SUN);
            }
        }
    }
    img
}

/// Generate sun/pole/shadow samples; the shadow closes the similar-triangles
/// constraint l2 = l1 h2 / h1 exactly.
pub fn gen_task1(n: usize, seed: u64, bounds: &Task1Bounds) -> Result<Vec<TaskSample>> {
    let root = SeedPath::root(seed).child(1);
    (0..n)
        .into_par_iter()
        .map(|s| {
            let mut stream = NormalStream::new(root.child(s as u64));
            for _ in 0..MAX_ATTEMPTS {
                let h1 = pick(&mut stream, &bounds.sun_heights) as usize;
                let h2 = pick(&mut stream, &bounds.pole_heights) as usize;
                let slope = pick(&mut stream, &bounds.slopes);
                if h2 >= h1 {
                    continue;
                }
                let l1f = slope * h1 as f64;
                let l2f = slope * h2 as f64;
                if l1f.fract() != 0.0 || l2f.fract() != 0.0 {
                    continue;
                }
                let (l1, l2) = (l1f as usize, l2f as usize);
                // fit: sun disc left of the pole, shadow right of it
                let lo = l1 + SUN_RADIUS as usize;
                let hi = CANVAS - 1 - l2;
                if l1 < 3 || lo > hi || h1 + SUN_RADIUS as usize > CANVAS - 1 {
                    continue;
                }
                let base_col = pick_range(&mut stream, lo, hi);
                return Ok(TaskSample {
                    image: paint_sun_shadow(l1, h1, h2, l2, base_col),
                    truth: Features::SunShadow {
                        l1: l1f,
                        h1: h1 as f64,
                        h2: h2 as f64,
                        l2: l2f,
                    },
                    target_ratio: 1.0,
                });
            }
            Err(Error::GeometryOverflow {
                attempts: MAX_ATTEMPTS,
            })
        })
        .collect()
}

/// Generate two-squares samples with the lower side exactly 1.5x the upper.
pub fn gen_task2(n: usize, seed: u64, bounds: &Task2Bounds) -> Result<Vec<TaskSample>> {
    let root = SeedPath::root(seed).child(2);
    (0..n)
        .into_par_iter()
        .map(|s| {
            let mut stream = NormalStream::new(root.child(s as u64));
            for _ in 0..MAX_ATTEMPTS {
                let a = pick(&mut stream, &bounds.upper_sides) as usize;
                if !a.is_multiple_of(2) {
                    continue;
                }
                let b = a + a / 2;
                let half = CANVAS / 2;
                if a + 2 > half || b + 2 > half {
                    continue;
                }
                let r0 = pick_range(&mut stream, 1, half - 1 - a);
                let c0 = pick_range(&mut stream, 1, CANVAS - 1 - a);
                let r1 = pick_range(&mut stream, half, CANVAS - 1 - b);
                let c1 = pick_range(&mut stream, 1, CANVAS - 1 - b);
                let mut img = RasterImage::filled(CANVAS, CANVAS, BACKGROUND);
                for r in r0..r0 + a {
                    for c in c0..c0 + a {
                        img.set(r, c, UPPER_SQUARE);
                    }
                }
                for r in r1..r1 + b {
                    for c in c1..c1 + b {
                        img.set(r, c, LOWER_SQUARE);
                    }
                }
                return Ok(TaskSample {
                    image: img,
                    truth: Features::Squares {
                        l1: a as f64,
                        l2: 1.5 * a as f64,
                    },
                    target_ratio: 1.5,
                });
            }
            Err(Error::GeometryOverflow {
                attempts: MAX_ATTEMPTS,
            })
        })
        .collect()
}

/// Patch emission order for token sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchOrder {
    /// Left to right, top to bottom.
    Raster,
    /// Column-major over patch rows: vertically aligned patches occupy the
    /// same sequence position class.
    Parallel,
}

fn patch_grid(image: &RasterImage, patch_size: usize) -> Result<(usize, usize)> {
    if patch_size == 0
        || !image.width.is_multiple_of(patch_size)
        || !image.height.is_multiple_of(patch_size)
    {
        return Err(Error::PatchSize {
            size: patch_size,
            width: image.width,
            height: image.height,
        });
    }
    Ok((image.height / patch_size, image.width / patch_size))
}

fn patch_coords(rows: usize, cols: usize, order: PatchOrder) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(rows * cols);
    match order {
        PatchOrder::Raster => {
            for pr in 0..rows {
                for pc in 0..cols {
                    out.push((pr, pc));
                }
            }
        }
        PatchOrder::Parallel => {
            for pc in 0..cols {
                for pr in 0..rows {
                    out.push((pr, pc));
                }
            }
        }
    }
    out
}

/// Flatten the image into per-patch token vectors (patch_size^2 * 3 values
/// each, raw 0..255 channel values).
pub fn patch_order(
    image: &RasterImage,
    patch_size: usize,
    order: PatchOrder,
) -> Result<Vec<Vec<f64>>> {
    let (rows, cols) = patch_grid(image, patch_size)?;
    Ok(patch_coords(rows, cols, order)
        .into_iter()
        .map(|(pr, pc)| {
            let mut token = Vec::with_capacity(patch_size * patch_size * 3);
            for r in 0..patch_size {
                for c in 0..patch_size {
                    let px = image.get(pr * patch_size + r, pc * patch_size + c);
                    token.extend(px.iter().map(|&v| v as f64));
                }
            }
            token
        })
        .collect())
}

/// Inverse of [`patch_order`].
pub fn reassemble(
    tokens: &[Vec<f64>],
    patch_size: usize,
    order: PatchOrder,
    width: usize,
    height: usize,
) -> Result<RasterImage> {
    let mut img = RasterImage::filled(width, height, [0, 0, 0]);
    let (rows, cols) = patch_grid(&img, patch_size)?;
    let coords = patch_coords(rows, cols, order);
    if tokens.len() != coords.len() {
        return Err(Error::LengthMismatch {
            expected: coords.len(),
            got: tokens.len(),
        });
    }
    for (token, (pr, pc)) in tokens.iter().zip(coords) {
        if token.len() != patch_size * patch_size * 3 {
            return Err(Error::LengthMismatch {
                expected: patch_size * patch_size * 3,
                got: token.len(),
            });
        }
        for r in 0..patch_size {
            for c in 0..patch_size {
                let at = (r * patch_size + c) * 3;
                let px = [
                    token[at].round().clamp(0.0, 255.0) as u8,
                    token[at + 1].round().clamp(0.0, 255.0) as u8,
                    token[at + 2].round().clamp(0.0, 255.0) as u8,
                ];
                img.set(pr * patch_size + r, pc * patch_size + c, px);
            }
        }
    }
    Ok(img)
}

/// Features read back from an image, plus the mask sizes used.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractedFeatures {
    pub features: Features,
    pub mask_pixels: Vec<(String, usize)>,
}

struct Mask {
    count: usize,
    sum_row: f64,
    sum_col: f64,
    min_row: usize,
    max_row: usize,
    min_col: usize,
    max_col: usize,
    rows: std::collections::BTreeSet<usize>,
}

fn color_mask(image: &RasterImage, color: [u8; 3], tol: u8) -> Mask {
    let mut m = Mask {
        count: 0,
        sum_row: 0.0,
        sum_col: 0.0,
        min_row: usize::MAX,
        max_row: 0,
        min_col: usize::MAX,
        max_col: 0,
        rows: Default::default(),
    };
    for r in 0..image.height {
        for c in 0..image.width {
            let p = image.get(r, c);
            if p.iter().zip(color).all(|(a, b)| a.abs_diff(b) <= tol) {
                m.count += 1;
                m.sum_row += r as f64;
                m.sum_col += c as f64;
                m.min_row = m.min_row.min(r);
                m.max_row = m.max_row.max(r);
                m.min_col = m.min_col.min(c);
                m.max_col = m.max_col.max(c);
                m.rows.insert(r);
            }
        }
    }
    m
}

/// Build per-element color masks and read the geometric features back.
pub fn extract_features(
    image: &RasterImage,
    task: TaskKind,
    tolerance: u8,
) -> Result<ExtractedFeatures> {
    if tolerance > 128 {
        return Err(Error::InvalidInput {
            what: "color tolerance",
            why: format!("{tolerance} > 128"),
        });
    }
    match task {
        TaskKind::SunShadow => {
            let ground = (image.height - 1) as f64;
            let sun = color_mask(image, SUN, tolerance);
            if sun.count == 0 {
                return Err(Error::EmptyMask { element: "sun" });
            }
            let pole = color_mask(image, POLE, tolerance);
            if pole.count == 0 {
                return Err(Error::EmptyMask { element: "pole" });
            }
            let shadow = color_mask(image, SHADOW, tolerance);
            if shadow.count == 0 {
                return Err(Error::EmptyMask { element: "shadow" });
            }
            let sun_row = sun.sum_row / sun.count as f64;
            let sun_col = sun.sum_col / sun.count as f64;
            let pole_col = pole.sum_col / pole.count as f64;
            let features = Features::SunShadow {
                l1: (pole_col - sun_col).abs(),
                h1: ground - sun_row,
                h2: pole.rows.len() as f64,
                l2: (shadow.max_col - shadow.min_col + 1) as f64,
            };
            Ok(ExtractedFeatures {
                features,
                mask_pixels: vec![
                    ("sun".into(), sun.count),
                    ("pole".into(), pole.count),
                    ("shadow".into(), shadow.count),
                ],
            })
        }
        TaskKind::ScaledSquares => {
            let upper = color_mask(image, UPPER_SQUARE, tolerance);
            if upper.count == 0 {
                return Err(Error::EmptyMask {
                    element: "upper square",
                });
            }
            let lower = color_mask(image, LOWER_SQUARE, tolerance);
            if lower.count == 0 {
                return Err(Error::EmptyMask {
                    element: "lower square",
                });
            }
            let side = |m: &Mask| {
                ((m.max_row - m.min_row + 1) as f64 + (m.max_col - m.min_col + 1) as f64) / 2.0
            };
            Ok(ExtractedFeatures {
                features: Features::Squares {
                    l1: side(&upper),
                    l2: side(&lower),
                },
                mask_pixels: vec![
                    ("upper square".into(), upper.count),
                    ("lower square".into(), lower.count),
                ],
            })
        }
    }
}

/// Ratio statistics and constraint fit over a set of images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub target_ratio: f64,
    /// Per-sample ratios of every extractable image.
    pub ratios: Vec<f64>,
    /// Ratios surviving the 5th-95th percentile filter.
    pub filtered_ratios: Vec<f64>,
    /// Through-origin slope of the paired-feature fit on filtered samples.
    pub slope: f64,
    pub r_squared: f64,
    /// Fraction of filtered samples within +-10% of the target ratio.
    pub fraction_within_10pct: f64,
    pub extracted: usize,
    pub failed: usize,
}

pub fn evaluate(images: &[RasterImage], task: TaskKind, tolerance: u8) -> Result<Evaluation> {
    let mut feats = Vec::new();
    let mut failed = 0usize;
    for img in images {
        match extract_features(img, task, tolerance) {
            Ok(f) => feats.push(f.features),
            Err(_) => failed += 1,
        }
    }
    if feats.len() < 10 {
        return Err(Error::TooFewSamples {
            needed: 10,
            got: feats.len(),
        });
    }
    let ratios: Vec<f64> = feats.iter().map(Features::ratio).collect();
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let lo = sorted[(0.05 * (n - 1) as f64).floor() as usize];
    let hi = sorted[(0.95 * (n - 1) as f64).ceil() as usize];
    let kept: Vec<usize> = (0..n)
        .filter(|&i| ratios[i] >= lo && ratios[i] <= hi)
        .collect();

    let pairs: Vec<(f64, f64)> = kept.iter().map(|&i| feats[i].pair()).collect();
    let sxy: f64 = pairs.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = pairs.iter().map(|(x, _)| x * x).sum();
    let slope = sxy / sxx;
    let ybar: f64 = pairs.iter().map(|(_, y)| y).sum::<f64>() / pairs.len() as f64;
    let ss_res: f64 = pairs
        .iter()
        .map(|(x, y)| (y - slope * x) * (y - slope * x))
        .sum();
    let ss_tot: f64 = pairs.iter().map(|(_, y)| (y - ybar) * (y - ybar)).sum();
    let r_squared = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    let target = task.target_ratio();
    let within = kept
        .iter()
        .filter(|&&i| (ratios[i] / target - 1.0).abs() <= 0.1)
        .count();
    Ok(Evaluation {
        target_ratio: target,
        filtered_ratios: kept.iter().map(|&i| ratios[i]).collect(),
        fraction_within_10pct: within as f64 / kept.len() as f64,
        ratios,
        slope,
        r_squared,
        extracted: feats.len(),
        failed,
    })
}
