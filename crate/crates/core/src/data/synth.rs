//! Seeded synthetic image classes.
//!
//! Class `k` of `K` draws `1 + k % 3` soft-edged blobs whose radius comes
//! from band `(k / 3) % 3` and whose hue is centered at `k * 360 / K`, on
//! a noisy background with a random gradient. `difficulty` in `[0, 1]`
//! widens the hue jitter, raises pixel noise, and adds same-colored
//! distractor specks, pushing classes toward each other.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{encode_pgm, encode_ppm, RgbImage};
use super::manifest::{write_manifest, ManifestEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    /// (height, width)
    pub size: (usize, usize),
    pub seed: u64,
    pub difficulty: f64,
    /// Emit P5 grayscale files instead of P6.
    pub grayscale: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 5,
            per_class: 40,
            size: (32, 32),
            seed: 0,
            difficulty: 0.0,
            grayscale: false,
        }
    }
}

pub fn class_name(k: usize, classes: usize) -> String {
    let width = (classes.saturating_sub(1)).to_string().len().max(2);
    format!("class_{k:0width$}")
}

fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Renders one image of class `k`.
pub(crate) fn render(k: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> RgbImage {
    let (h, w) = spec.size;
    let d = spec.difficulty.clamp(0.0, 1.0);
    let side = h.min(w) as f64;
    let mut px = vec![0.0f64; h * w * 3];

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(15.0..55.0));
    let (gx, gy) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
    for y in 0..h {
        for x in 0..w {
            let t = gx * x as f64 / w as f64 + gy * y as f64 / h as f64;
            for c in 0..3 {
                px[(y * w + x) * 3 + c] = base[c] + t;
            }
        }
    }

    let spacing = 360.0 / spec.classes as f64;
    let hue_jitter = spacing * (0.15 + 0.85 * d);
    let hue = k as f64 * spacing + rng.gen_range(-hue_jitter..=hue_jitter);
    let color = hsv_to_rgb(hue, rng.gen_range(0.6..0.95), rng.gen_range(0.7..1.0));

    let band = (k / 3) % 3;
    let (r_lo, r_hi) = (side * (0.09 + 0.07 * band as f64), side * (0.14 + 0.07 * band as f64));
    let blobs = 1 + k % 3;
    let specks = (d * 4.0).round() as usize;
    let mut shapes: Vec<(f64, f64, f64)> = Vec::new();
    for i in 0..blobs + specks {
        let r = if i < blobs {
            rng.gen_range(r_lo..r_hi)
        } else {
            rng.gen_range(side * 0.03..side * 0.07)
        };
        let cx = rng.gen_range(r..(w as f64 - r).max(r + 1e-9));
        let cy = rng.gen_range(r..(h as f64 - r).max(r + 1e-9));
        shapes.push((cx, cy, r));
    }
    for (cx, cy, r) in shapes {
        for y in 0..h {
            for x in 0..w {
                let dist = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                let alpha = (r + 0.5 - dist).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for c in 0..3 {
                        let p = &mut px[(y * w + x) * 3 + c];
                        *p += (color[c] - *p) * alpha;
                    }
                }
            }
        }
    }

    let noise = 12.0 + 48.0 * d;
    let data = px
        .into_iter()
        .map(|v| (v + rng.gen_range(-noise..=noise)).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage {
        width: w,
        height: h,
        data,
    }
}

fn to_gray(img: &RgbImage) -> Vec<u8> {
    img.data
        .chunks_exact(3)
        .map(|p| ((p[0] as u32 * 299 + p[1] as u32 * 587 + p[2] as u32 * 114 + 500) / 1000) as u8)
        .collect()
}

/// Writes `classes * per_class` images under `out` in one directory per
/// class, plus `manifest.csv` with relative paths. Returns the manifest
/// path.
pub fn synth_generate(out: impl AsRef<Path>, spec: &SynthSpec) -> Result<PathBuf> {
    let out = out.as_ref();
    if spec.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.per_class == 0 || spec.size.0 == 0 || spec.size.1 == 0 {
        return Err(Error::Config("per_class and image size must be >= 1".into()));
    }
    let ext = if spec.grayscale { "pgm" } else { "ppm" };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::with_capacity(spec.classes * spec.per_class);
    for k in 0..spec.classes {
        let name = class_name(k, spec.classes);
        let dir = out.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.per_class {
            let img = render(k, spec, &mut rng);
            let bytes = if spec.grayscale {
                encode_pgm(img.width, img.height, &to_gray(&img))
            } else {
                encode_ppm(&img)
            };
            let rel = PathBuf::from(&name).join(format!("img_{i:04}.{ext}"));
            let path = out.join(&rel);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                path: rel,
                label: name.clone(),
                label_id: k,
            });
        }
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, stratified_split, SplitSpec};

    #[test]
    fn counts_and_closure() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            per_class: 6,
            size: (12, 12),
            ..SynthSpec::default()
        };
        let path = synth_generate(dir.path(), &spec).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 30);
        assert_eq!(m.class_counts(), vec![6; 5]);
        let (train, test) = stratified_split(&m, &SplitSpec::default()).unwrap();
        assert_eq!(train.len() + test.len(), 30);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec {
            size: (10, 14),
            ..SynthSpec::default()
        };
        let a = render(3, &spec, &mut ChaCha8Rng::seed_from_u64(5));
        let b = render(3, &spec, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let c = render(3, &spec, &mut ChaCha8Rng::seed_from_u64(6));
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_single_class() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            classes: 1,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_generate(dir.path(), &spec), Err(Error::Config(_))));
    }

    #[test]
    fn class_names_sort_numerically() {
        let names: Vec<String> = (0..12).map(|k| class_name(k, 12)).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }
}
