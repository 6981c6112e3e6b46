//! Synthetic multi-granularity image set for desk-scale validation.
//!
//! Coarse groups (species) differ by a global shape mask; fine classes
//! within a species differ by a local texture drawn inside the shape, so
//! coarse discrimination needs global structure and fine discrimination
//! needs local detail. Images are 3xSxS float32 in [0, 1]: channel 0 carries
//! the shape, channels 1 and 2 carry the texture and its complement.
//! Generation is deterministic under the root seed; classes are balanced.
//!
//! On disk a dataset is a directory of raw little-endian f32 image files
//! plus a manifest: a `#dims` header, then one `path<TAB>fine<TAB>coarse`
//! line per image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub species: usize,
    pub classes_per_species: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_image_size() -> usize {
    32
}
fn default_noise() -> f64 {
    0.05
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be >= 16".into()));
        }
        if self.species == 0 || self.species > 8 {
            return Err(Error::Config("species must be 1..=8".into()));
        }
        if self.classes_per_species == 0 || self.classes_per_species > 4 {
            return Err(Error::Config("classes_per_species must be 1..=4".into()));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.species * self.classes_per_species
    }
}

/// In-memory labeled image set. Images are flat 3xSxS row-major buffers.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_size: usize,
    pub images: Vec<Vec<f32>>,
    pub fine: Vec<usize>,
    pub coarse: Vec<usize>,
    pub num_classes: usize,
    pub num_species: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// FNV-1a over all image bytes and labels; test hook for determinism.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        for img in &self.images {
            for v in img {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
        }
        for (&f, &c) in self.fine.iter().zip(self.coarse.iter()) {
            eat(f as u8);
            eat(c as u8);
        }
        h
    }
}

fn shape_mask(species: usize, size: usize, dy: i64, dx: i64) -> Vec<bool> {
    let c = size as f64 / 2.0;
    let r = size as f64 * 0.35;
    let mut mask = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            let u = i as f64 - c - dy as f64 + 0.5;
            let v = j as f64 - c - dx as f64 + 0.5;
            let dist = (u * u + v * v).sqrt();
            let inside = match species {
                0 => dist <= r,
                1 => u.abs() <= r && v.abs() <= r,
                2 => u >= -r && u <= r && v.abs() <= (u + r) / 2.0,
                3 => (u.abs() <= r / 3.0 && v.abs() <= r) || (v.abs() <= r / 3.0 && u.abs() <= r),
                4 => u.abs() + v.abs() <= r,
                5 => dist <= r && dist >= r / 2.0,
                6 => u.abs() <= r / 2.5 && v.abs() <= r,
                _ => (u.abs() - v.abs()).abs() <= r / 3.0 && u.abs().max(v.abs()) <= r,
            };
            mask[i * size + j] = inside;
        }
    }
    mask
}

fn texture_value(kind: usize, i: usize, j: usize) -> bool {
    match kind {
        0 => j.is_multiple_of(2),       // vertical stripes
        1 => i.is_multiple_of(2),       // horizontal stripes
        2 => (i + j).is_multiple_of(2), // checkerboard
        _ => (j / 2).is_multiple_of(2), // coarse vertical stripes
    }
}

fn render(spec: &SyntheticSpec, fine: usize, rng: &mut Rng) -> Vec<f32> {
    let size = spec.image_size;
    let species = fine / spec.classes_per_species;
    let texture = fine % spec.classes_per_species;
    // even-only jitter keeps period-2 texture phase stable across samples
    let dy = 2 * (rng.next_below(3) as i64 - 1);
    let dx = 2 * (rng.next_below(3) as i64 - 1);
    let mask = shape_mask(species, size, dy, dx);

    let mut img = vec![0.0f32; 3 * size * size];
    let plane = size * size;
    for i in 0..size {
        for j in 0..size {
            let m = if mask[i * size + j] { 1.0f32 } else { 0.0 };
            let t = if texture_value(texture, i, j) {
                1.0f32
            } else {
                0.0
            };
            img[i * size + j] = 0.15 + 0.7 * m;
            img[plane + i * size + j] = 0.15 + 0.7 * m * t;
            img[2 * plane + i * size + j] = 0.15 + 0.7 * m * (1.0 - t);
        }
    }
    if spec.noise > 0.0 {
        for v in &mut img {
            let n = (rng.next_f64() - 0.5) * 2.0 * spec.noise;
            *v = (*v + n as f32).clamp(0.0, 1.0);
        }
    }
    img
}

/// Deterministic train/validation pair; per-class sample streams are seeded
/// independently so class order never alters pixel content.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let classes = spec.num_classes();
    let make = |which: u64, per_class: usize| {
        let mut images = Vec::with_capacity(classes * per_class);
        let mut fine = Vec::with_capacity(classes * per_class);
        let mut coarse = Vec::with_capacity(classes * per_class);
        for class in 0..classes {
            let mut rng = Rng::new(seed)
                .split(streams::SYNTH)
                .split(which)
                .split(class as u64);
            for _ in 0..per_class {
                images.push(render(spec, class, &mut rng));
                fine.push(class);
                coarse.push(class / spec.classes_per_species);
            }
        }
        Dataset {
            image_size: spec.image_size,
            images,
            fine,
            coarse,
            num_classes: classes,
            num_species: spec.species,
        }
    };
    Ok((make(0, spec.train_per_class), make(1, spec.val_per_class)))
}

/// Write a dataset as raw f32 images plus a manifest.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut manifest = format!("#dims\t3\t{}\t{}\n", dataset.image_size, dataset.image_size);
    for (idx, img) in dataset.images.iter().enumerate() {
        let rel = format!("images/img_{idx:05}.f32");
        let mut bytes = Vec::with_capacity(img.len() * 4);
        for v in img {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&rel), bytes)?;
        manifest.push_str(&format!(
            "{rel}\t{}\t{}\n",
            dataset.fine[idx], dataset.coarse[idx]
        ));
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Read a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = std::fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut lines = manifest.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty manifest".into()))?;
    let dims: Vec<usize> = header
        .strip_prefix("#dims\t")
        .ok_or_else(|| Error::Data("manifest missing #dims header".into()))?
        .split('\t')
        .map(|s| s.parse().map_err(|_| Error::Data(format!("bad dim '{s}'"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 || dims[0] != 3 || dims[1] != dims[2] {
        return Err(Error::Data(format!("unsupported dims {dims:?}")));
    }
    let size = dims[1];
    let numel = 3 * size * size;

    let mut images = Vec::new();
    let mut fine = Vec::new();
    let mut coarse = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!(
                "manifest line {}: expected path<TAB>fine<TAB>coarse",
                lineno + 2
            )));
        }
        let bytes = std::fs::read(dir.join(parts[0]))?;
        if bytes.len() != numel * 4 {
            return Err(Error::Data(format!(
                "{}: {} bytes, expected {}",
                parts[0],
                bytes.len(),
                numel * 4
            )));
        }
        let img: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        images.push(img);
        fine.push(
            parts[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad fine label '{}'", parts[1])))?,
        );
        coarse.push(
            parts[2]
                .parse()
                .map_err(|_| Error::Data(format!("bad coarse label '{}'", parts[2])))?,
        );
    }
    if images.is_empty() {
        return Err(Error::Data("manifest lists no images".into()));
    }
    let num_classes = fine.iter().max().unwrap() + 1;
    let num_species = coarse.iter().max().unwrap() + 1;
    Ok(Dataset {
        image_size: size,
        images,
        fine,
        coarse,
        num_classes,
        num_species,
    })
}
