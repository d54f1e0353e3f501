//! Deterministic synthetic shape-segmentation tasks.
//!
//! Each sample is a 32×32 single-channel image holding one target shape of the task's
//! family on a textured background plus distractor shapes from other families. The mask
//! covers the target only. Families have distinct foreground intensities, so a prompt
//! naming a family picks out one object among several.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::vocab;

pub const IMAGE_SIZE: usize = 32;
pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
const MAX_ATTEMPTS: usize = 100;
const MIN_FOREGROUND: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Disc,
    Ellipse,
    Ring,
    Bar,
    Blob,
    Cross,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Disc,
        ShapeFamily::Ellipse,
        ShapeFamily::Ring,
        ShapeFamily::Bar,
        ShapeFamily::Blob,
        ShapeFamily::Cross,
    ];

    /// Mean foreground intensity of the family.
    pub fn intensity(self) -> f64 {
        match self {
            ShapeFamily::Disc => 0.95,
            ShapeFamily::Ellipse => 0.85,
            ShapeFamily::Ring => 0.75,
            ShapeFamily::Bar => 0.65,
            ShapeFamily::Blob => 0.55,
            ShapeFamily::Cross => 0.45,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionRule {
    Anywhere,
    LeftHalf,
    RightHalf,
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 200,
            val: 40,
            test: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub family: ShapeFamily,
    /// Background style, 0..=3.
    pub texture: u8,
    /// Target area as a fraction of the image, `0 < lo < hi < 0.5`.
    pub size_range: (f64, f64),
    pub position: PositionRule,
    pub prompt: String,
    #[serde(default)]
    pub counts: SplitCounts,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if !(0.0 < lo && lo < hi && hi < 0.5) {
            return Err(Error::InvalidSpec(format!("{}: size_range must satisfy 0 < lo < hi < 0.5", self.name)));
        }
        if self.texture > 3 {
            return Err(Error::InvalidSpec(format!("{}: texture id must be 0..=3", self.name)));
        }
        if self.counts.train == 0 || self.counts.val == 0 || self.counts.test == 0 {
            return Err(Error::InvalidSpec(format!("{}: split counts must be >= 1", self.name)));
        }
        if self.prompt.split_whitespace().next().is_none() {
            return Err(Error::InvalidSpec(format!("{}: empty prompt", self.name)));
        }
        if let Some(w) = self.prompt.split_whitespace().find(|w| !vocab::is_known(w)) {
            return Err(Error::InvalidSpec(format!("{}: prompt word `{w}` is not in the vocabulary", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// 32×32, values in [0, 1].
    pub image: Tensor,
    /// 32×32, values in {0, 1}.
    pub mask: Tensor,
    pub task: String,
}

impl Sample {
    pub fn foreground(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// An analytic shape; `contains` is evaluated at pixel centers `(col + 0.5, row + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub family: ShapeFamily,
    pub cx: f64,
    pub cy: f64,
    /// Primary size: radius (disc, ring, blob), semi-major axis (ellipse), half length
    /// (bar, cross).
    pub size: f64,
    /// Secondary ratio: minor/major (ellipse), inner/outer (ring), width/length (bar, cross),
    /// lobe amplitude (blob).
    pub ratio: f64,
    pub angle: f64,
}

impl Shape {
    /// Shape of `family` with approximately `area` pixels.
    pub fn with_area<R: Rng + ?Sized>(family: ShapeFamily, area: f64, cx: f64, cy: f64, rng: &mut R) -> Shape {
        let angle = rng.gen_range(0.0..PI);
        let (size, ratio) = match family {
            ShapeFamily::Disc => ((area / PI).sqrt(), 1.0),
            ShapeFamily::Ellipse => {
                let q: f64 = rng.gen_range(1.6..2.2);
                ((area * q / PI).sqrt(), 1.0 / q)
            }
            ShapeFamily::Ring => ((area / (PI * (1.0 - 0.55 * 0.55))).sqrt(), 0.55),
            ShapeFamily::Bar => {
                let asp: f64 = rng.gen_range(3.5..4.5);
                let len = (area * asp).sqrt();
                (len / 2.0, 1.0 / asp)
            }
            ShapeFamily::Blob => ((area / (PI * 1.045)).sqrt(), 0.3),
            ShapeFamily::Cross => {
                let w_over_l = 1.0 / 3.5;
                let len = (area / (2.0 * w_over_l - w_over_l * w_over_l)).sqrt();
                (len / 2.0, w_over_l)
            }
        };
        Shape {
            family,
            cx,
            cy,
            size,
            ratio,
            angle,
        }
    }

    pub fn disc(cx: f64, cy: f64, radius: f64) -> Shape {
        Shape {
            family: ShapeFamily::Disc,
            cx,
            cy,
            size: radius,
            ratio: 1.0,
            angle: 0.0,
        }
    }

    /// Radius of a circle around the center that encloses the shape.
    pub fn extent(&self) -> f64 {
        match self.family {
            ShapeFamily::Blob => self.size * (1.0 + self.ratio),
            ShapeFamily::Bar | ShapeFamily::Cross => self.size * (1.0 + self.ratio * self.ratio).sqrt(),
            _ => self.size,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = (dx * dx + dy * dy).sqrt();
        match self.family {
            ShapeFamily::Disc => r < self.size,
            ShapeFamily::Ellipse => {
                let b = self.size * self.ratio;
                (u / self.size).powi(2) + (v / b).powi(2) < 1.0
            }
            ShapeFamily::Ring => r < self.size && r > self.size * self.ratio,
            ShapeFamily::Bar => u.abs() < self.size && v.abs() < self.size * self.ratio,
            ShapeFamily::Blob => {
                let theta = dy.atan2(dx);
                r < self.size * (1.0 + self.ratio * (3.0 * theta + self.angle).sin())
            }
            ShapeFamily::Cross => {
                let half_w = self.size * self.ratio;
                (u.abs() < self.size && v.abs() < half_w) || (v.abs() < self.size && u.abs() < half_w)
            }
        }
    }

    /// Binary raster over the 32×32 grid, row-major.
    pub fn rasterize(&self) -> Vec<bool> {
        let mut out = vec![false; PIXELS];
        for row in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                out[row * IMAGE_SIZE + col] = self.contains(col as f64 + 0.5, row as f64 + 0.5);
            }
        }
        out
    }

    fn inside_image(&self) -> bool {
        let e = self.extent();
        self.cx - e >= 0.0 && self.cx + e <= IMAGE_SIZE as f64 && self.cy - e >= 0.0 && self.cy + e <= IMAGE_SIZE as f64
    }
}

/// Column/row centroid of a raster.
pub fn centroid(mask: &[bool]) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            sx += (i % IMAGE_SIZE) as f64;
            sy += (i / IMAGE_SIZE) as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

fn position_ok(rule: PositionRule, centroid: (f64, f64)) -> bool {
    let (col, row) = centroid;
    match rule {
        PositionRule::Anywhere => true,
        PositionRule::LeftHalf => col < 16.0,
        PositionRule::RightHalf => col >= 16.0,
        PositionRule::Center => (10.0..=22.0).contains(&col) && (10.0..=22.0).contains(&row),
    }
}

fn center_range(rule: PositionRule) -> ((f64, f64), (f64, f64)) {
    match rule {
        PositionRule::Anywhere => ((3.0, 29.0), (3.0, 29.0)),
        PositionRule::LeftHalf => ((2.0, 14.5), (3.0, 29.0)),
        PositionRule::RightHalf => ((17.5, 30.0), (3.0, 29.0)),
        PositionRule::Center => ((12.0, 20.0), (12.0, 20.0)),
    }
}

fn background<R: Rng + ?Sized>(texture: u8, rng: &mut R) -> Vec<f64> {
    let noise = Normal::new(0.0, 0.03).unwrap();
    let level: f64 = rng.gen_range(0.1..0.25);
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let freq: f64 = rng.gen_range(0.3..0.7);
    let bumps: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0), rng.gen_range(-0.08..0.08)))
        .collect();
    let mut img = vec![0.0; PIXELS];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let (x, y) = (col as f64, row as f64);
            let base = match texture {
                0 => level,
                1 => 0.05 + 0.25 * x / 31.0,
                2 => 0.17 + 0.07 * (freq * y + phase).sin(),
                _ => {
                    level
                        + bumps
                            .iter()
                            .map(|&(bx, by, amp)| amp * (-((x - bx).powi(2) + (y - by).powi(2)) / 40.0).exp())
                            .sum::<f64>()
                }
            };
            img[row * IMAGE_SIZE + col] = base + noise.sample(rng);
        }
    }
    img
}

fn paint<R: Rng + ?Sized>(img: &mut [f64], raster: &[bool], family: ShapeFamily, rng: &mut R) {
    let noise = Normal::new(0.0, 0.02).unwrap();
    for (p, &on) in img.iter_mut().zip(raster) {
        if on {
            *p = family.intensity() + noise.sample(rng);
        }
    }
}

fn place_target<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<(Shape, Vec<bool>)> {
    let ((x0, x1), (y0, y1)) = center_range(spec.position);
    for _ in 0..MAX_ATTEMPTS {
        let frac = rng.gen_range(spec.size_range.0..spec.size_range.1);
        let cx = rng.gen_range(x0..x1);
        let cy = rng.gen_range(y0..y1);
        let shape = Shape::with_area(spec.family, frac * PIXELS as f64, cx, cy, rng);
        if !shape.inside_image() {
            continue;
        }
        let raster = shape.rasterize();
        let count = raster.iter().filter(|&&m| m).count();
        if count < MIN_FOREGROUND {
            continue;
        }
        if centroid(&raster).is_some_and(|c| position_ok(spec.position, c)) {
            return Ok((shape, raster));
        }
    }
    Err(Error::Unsatisfiable(format!(
        "{}: no placement satisfies size_range {:?} with position {:?} after {MAX_ATTEMPTS} attempts",
        spec.name, spec.size_range, spec.position
    )))
}

/// One sample; its RNG is derived from `(seed, split, index)` alone.
pub fn generate_sample(spec: &TaskSpec, split: Split, index: usize) -> Result<Sample> {
    let mut rng = stream_rng(spec.seed, Stream::TaskGen, ((split as u64) << 32) | index as u64);
    let (target, raster) = place_target(spec, &mut rng)?;
    let mut img = background(spec.texture, &mut rng);

    let others: Vec<ShapeFamily> = ShapeFamily::ALL.iter().copied().filter(|f| *f != spec.family).collect();
    let n_distractors = rng.gen_range(1..=2);
    for _ in 0..n_distractors {
        let family = *others.choose(&mut rng).unwrap();
        let mut chosen = None;
        for _ in 0..20 {
            let area = rng.gen_range(0.03..0.08) * PIXELS as f64;
            let cx = rng.gen_range(4.0..28.0);
            let cy = rng.gen_range(4.0..28.0);
            let d = Shape::with_area(family, area, cx, cy, &mut rng);
            let dist = ((d.cx - target.cx).powi(2) + (d.cy - target.cy).powi(2)).sqrt();
            if d.inside_image() && dist > d.extent() + target.extent() + 1.0 {
                chosen = Some(d);
                break;
            }
            chosen.get_or_insert(d);
        }
        let d = chosen.unwrap();
        let draw: Vec<bool> = d.rasterize().iter().zip(&raster).map(|(&o, &t)| o && !t).collect();
        paint(&mut img, &draw, family, &mut rng);
    }
    paint(&mut img, &raster, spec.family, &mut rng);
    img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));

    let mask = raster.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(Sample {
        image: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], img)?,
        mask: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], mask)?,
        task: spec.name.clone(),
    })
}

pub fn generate(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let make = |split, n| (0..n).map(|i| generate_sample(spec, split, i)).collect::<Result<Vec<_>>>();
    Ok(TaskData {
        spec: spec.clone(),
        train: make(Split::Train, spec.counts.train)?,
        val: make(Split::Val, spec.counts.val)?,
        test: make(Split::Test, spec.counts.test)?,
    })
}

/// Pretext sample: one shape of a random family anywhere on a random texture, no
/// distractors. Prompt is always `object`.
pub fn pretext_sample(seed: u64, index: usize) -> Sample {
    let mut rng = stream_rng(seed, Stream::Pretrain, index as u64);
    let family = *ShapeFamily::ALL.choose(&mut rng).unwrap();
    let texture = rng.gen_range(0..4u8);
    loop {
        let area = rng.gen_range(0.04..0.2) * PIXELS as f64;
        let shape = Shape::with_area(family, area, rng.gen_range(5.0..27.0), rng.gen_range(5.0..27.0), &mut rng);
        if !shape.inside_image() {
            continue;
        }
        let raster = shape.rasterize();
        if raster.iter().filter(|&&m| m).count() < MIN_FOREGROUND {
            continue;
        }
        let mut img = background(texture, &mut rng);
        paint(&mut img, &raster, family, &mut rng);
        img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        let mask = raster.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        return Sample {
            image: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], img).unwrap(),
            mask: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], mask).unwrap(),
            task: "pretext".into(),
        };
    }
}

pub const PRETEXT_PROMPT: &str = "object";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteName {
    Homogeneous,
    Heterogeneous,
    Mixed,
}

impl std::str::FromStr for SuiteName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(SuiteName::Homogeneous),
            "heterogeneous" => Ok(SuiteName::Heterogeneous),
            "mixed" => Ok(SuiteName::Mixed),
            other => Err(Error::InvalidSpec(format!("unknown suite `{other}`"))),
        }
    }
}

fn spec(name: &str, family: ShapeFamily, texture: u8, size: (f64, f64), position: PositionRule, prompt: &str, seed: u64) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        family,
        texture,
        size_range: size,
        position,
        prompt: prompt.into(),
        counts: SplitCounts::default(),
        seed,
    }
}

/// The committed five-task sequences.
pub fn default_suite(name: SuiteName) -> Vec<TaskSpec> {
    use PositionRule::*;
    use ShapeFamily::*;
    match name {
        SuiteName::Homogeneous => vec![
            spec("disc-left", Disc, 0, (0.03, 0.08), LeftHalf, "one small bright round disc left", 101),
            spec("disc-right", Disc, 1, (0.03, 0.08), RightHalf, "one small bright round disc right", 102),
            spec("disc-large", Disc, 2, (0.08, 0.15), LeftHalf, "one large bright round disc left", 103),
            spec(
                "ellipse-left",
                Ellipse,
                3,
                (0.03, 0.08),
                LeftHalf,
                "elongated oval ellipse shape left",
                104,
            ),
            spec("disc-any", Disc, 0, (0.03, 0.10), Anywhere, "one small bright round disc anywhere", 105),
        ],
        SuiteName::Heterogeneous => vec![
            spec("disc", Disc, 0, (0.04, 0.10), Anywhere, "one small bright round disc", 201),
            spec("ring", Ring, 1, (0.06, 0.14), Center, "bright hollow circular ring annulus center", 202),
            spec("bar", Bar, 2, (0.04, 0.09), Anywhere, "thin elongated straight bar band", 203),
            spec("blob", Blob, 3, (0.05, 0.12), Anywhere, "irregular lumpy pale blob mass", 204),
            spec("cross", Cross, 0, (0.05, 0.12), Anywhere, "two crossed plus cross shape", 205),
        ],
        SuiteName::Mixed => vec![
            spec("disc-left", Disc, 0, (0.03, 0.08), LeftHalf, "one small bright round disc left", 301),
            spec("bar", Bar, 2, (0.04, 0.09), Anywhere, "thin elongated straight bar band", 302),
            spec("disc-right", Disc, 1, (0.03, 0.08), RightHalf, "one small bright round disc right", 303),
            spec("ring", Ring, 3, (0.06, 0.14), Center, "hollow circular ring annulus center", 304),
            spec(
                "ellipse-left",
                Ellipse,
                0,
                (0.03, 0.08),
                LeftHalf,
                "elongated oval ellipse shape left",
                305,
            ),
        ],
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestTask {
    spec: TaskSpec,
    /// split name -> list of (file stem, sha256 of image+mask bytes)
    files: Vec<ManifestFile>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    split: String,
    index: usize,
    image: String,
    mask: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tasks: Vec<ManifestTask>,
}

fn le_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_le_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() != PIXELS * 8 {
        return Err(Error::Format(format!("expected {} bytes, found {}", PIXELS * 8, bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], data)?)
}

/// Writes each sample as raw little-endian float64 image/mask files plus `manifest.json`.
pub fn export_tasks(tasks: &[TaskData], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        version: 1,
        tasks: Vec::new(),
    };
    for task in tasks {
        let mut files = Vec::new();
        for (split, samples) in [("train", &task.train), ("val", &task.val), ("test", &task.test)] {
            for (i, s) in samples.iter().enumerate() {
                let stem = format!("{}_{}_{:04}", task.spec.name, split, i);
                let (img, mask) = (le_bytes(&s.image), le_bytes(&s.mask));
                fs::write(dir.join(format!("{stem}.image.f64")), &img)?;
                fs::write(dir.join(format!("{stem}.mask.f64")), &mask)?;
                let mut h = Sha256::new();
                h.update(&img);
                h.update(&mask);
                files.push(ManifestFile {
                    split: split.into(),
                    index: i,
                    image: format!("{stem}.image.f64"),
                    mask: format!("{stem}.mask.f64"),
                    sha256: hex::encode(h.finalize()),
                });
            }
        }
        manifest.tasks.push(ManifestTask {
            spec: task.spec.clone(),
            files,
        });
    }
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn import_tasks(dir: &Path) -> Result<Vec<TaskData>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut out = Vec::new();
    for task in manifest.tasks {
        let mut data = TaskData {
            spec: task.spec.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for f in task.files {
            let (img, mask) = (fs::read(dir.join(&f.image))?, fs::read(dir.join(&f.mask))?);
            let mut h = Sha256::new();
            h.update(&img);
            h.update(&mask);
            if hex::encode(h.finalize()) != f.sha256 {
                return Err(Error::Format(format!("checksum mismatch for {}", f.image)));
            }
            let sample = Sample {
                image: from_le_bytes(&img)?,
                mask: from_le_bytes(&mask)?,
                task: task.spec.name.clone(),
            };
            match f.split.as_str() {
                "train" => data.train.push(sample),
                "val" => data.val.push(sample),
                "test" => data.test.push(sample),
                other => return Err(Error::Format(format!("unknown split `{other}`"))),
            }
        }
        out.push(data);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(spec: &TaskSpec) -> TaskSpec {
        let mut s = spec.clone();
        s.counts = SplitCounts { train: 12, val: 4, test: 4 };
        s
    }

    #[test]
    fn disc_raster_matches_independent_count() {
        let shape = Shape::disc(16.0, 16.0, 8.0);
        let raster = shape.rasterize();
        let mut expected = 0;
        for i in 0..32 {
            for j in 0..32 {
                let (x, y) = (j as f64 + 0.5 - 16.0, i as f64 + 0.5 - 16.0);
                if x * x + y * y < 64.0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(raster.iter().filter(|&&m| m).count(), expected);
        assert_eq!(expected, 208);
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = small(&default_suite(SuiteName::Mixed)[1]);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn masks_consistent_and_constraints_hold() {
        for suite in [SuiteName::Homogeneous, SuiteName::Heterogeneous, SuiteName::Mixed] {
            for spec in default_suite(suite) {
                let data = generate(&small(&spec)).unwrap();
                for s in data.train.iter().chain(&data.val).chain(&data.test) {
                    assert!(s.foreground() >= MIN_FOREGROUND);
                    assert!(s.image.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
                    let raster: Vec<bool> = s.mask.data().iter().map(|&m| m > 0.5).collect();
                    let (col, row) = centroid(&raster).unwrap();
                    match spec.position {
                        PositionRule::LeftHalf => assert!(col < 16.0),
                        PositionRule::RightHalf => assert!(col >= 16.0),
                        PositionRule::Center => assert!((10.0..=22.0).contains(&col) && (10.0..=22.0).contains(&row)),
                        PositionRule::Anywhere => {}
                    }
                    // every foreground pixel is painted with the target family's intensity band
                    for (m, v) in s.mask.data().iter().zip(s.image.data()) {
                        if *m > 0.5 {
                            assert!((v - spec.family.intensity()).abs() < 0.12, "{v}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn distractors_never_leak_into_mask() {
        let spec = small(&default_suite(SuiteName::Heterogeneous)[0]);
        let data = generate(&spec).unwrap();
        let mut saw_distractor = false;
        for s in &data.train {
            for (m, v) in s.mask.data().iter().zip(s.image.data()) {
                if *m < 0.5 && *v > 0.4 {
                    saw_distractor = true;
                }
            }
        }
        assert!(saw_distractor);
    }

    #[test]
    fn splits_are_disjoint_streams() {
        let spec = small(&default_suite(SuiteName::Mixed)[0]);
        let data = generate(&spec).unwrap();
        for a in &data.train {
            assert!(!data.test.iter().any(|b| b.image == a.image));
        }
    }

    #[test]
    fn unsatisfiable_constraints_error() {
        let mut spec = small(&default_suite(SuiteName::Mixed)[0]);
        // a bar this large is longer than the image
        spec.family = ShapeFamily::Bar;
        spec.size_range = (0.4, 0.49);
        assert!(matches!(generate(&spec), Err(Error::Unsatisfiable(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small(&default_suite(SuiteName::Mixed)[0]);
        spec.prompt = "one zebra".into();
        assert!(generate(&spec).is_err());
        spec.prompt = "disc".into();
        spec.size_range = (0.2, 0.1);
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn export_import_roundtrip() {
        let spec = small(&default_suite(SuiteName::Mixed)[3]);
        let data = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_tasks(std::slice::from_ref(&data), dir.path()).unwrap();
        let back = import_tasks(dir.path()).unwrap();
        assert_eq!(back[0].spec, data.spec);
        assert_eq!(back[0].test, data.test);
        // corrupt one file
        let victim = dir.path().join(format!("{}_train_0000.image.f64", spec.name));
        let mut bytes = fs::read(&victim).unwrap();
        bytes[3] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        assert!(import_tasks(dir.path()).is_err());
    }
}
