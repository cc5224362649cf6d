//! Dataset ingestion: face-image directories (age_gender_... filenames or a
//! CSV manifest), normalization to `[0,1]`, crop/flip augmentation, the
//! age-bracket table, and the synthetic bars dataset used for desk-scale
//! experiments.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One labelled image: pixels in `[0,1]`, gender in {0,1}, age in years when
/// the source provides it.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub gender: u8,
    pub age: Option<f64>,
}

impl Sample {
    pub fn age_class(&self) -> Option<usize> {
        self.age.and_then(|a| age_to_class(a).ok())
    }
}

/// Age brackets, disjoint and consecutive over 0..=116.
pub const AGE_BRACKETS: [(u32, u32); 14] = [
    (0, 2),
    (3, 6),
    (7, 12),
    (13, 17),
    (18, 22),
    (23, 26),
    (27, 33),
    (34, 44),
    (45, 59),
    (60, 69),
    (70, 79),
    (80, 89),
    (90, 99),
    (100, 116),
];

/// Bracket id of an age in years.
pub fn age_to_class(age: f64) -> Result<usize> {
    if !(0.0..=116.0).contains(&age) {
        return Err(Error::invalid("age_to_class", format!("age {age} outside [0, 116]")));
    }
    let whole = age.floor() as u32;
    for (i, &(lo, hi)) in AGE_BRACKETS.iter().enumerate() {
        if whole >= lo && whole <= hi {
            return Ok(i);
        }
    }
    unreachable!("brackets cover 0..=116")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Naming {
    /// `age_gender_race_timestamp.jpg` filenames.
    Utkface,
    /// A CSV manifest `path,gender,age` next to the images.
    CsvManifest,
}

#[derive(Debug)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    /// Files skipped for malformed names or labels.
    pub skipped: usize,
}

/// Load and decode a directory (or manifest) of face images, resized to the
/// model input shape and scaled to `[0,1]`.
pub fn load_directory(path: &Path, naming: Naming, target: [usize; 3]) -> Result<LoadReport> {
    match naming {
        Naming::Utkface => load_utkface_dir(path, target),
        Naming::CsvManifest => load_csv_manifest(path, target),
    }
}

fn load_utkface_dir(dir: &Path, target: [usize; 3]) -> Result<LoadReport> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "jpg" || e == "jpeg" || e == "png"
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir.display())));
    }
    let mut samples = Vec::new();
    let mut skipped = 0;
    for file in files {
        match parse_utkface_name(&file) {
            Some((age, gender)) => {
                let image = decode_image(&file, target)?;
                samples.push(Sample {
                    image,
                    gender,
                    age: Some(age as f64),
                });
            }
            None => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no parseable image names in {} ({skipped} skipped)",
            dir.display()
        )));
    }
    Ok(LoadReport { samples, skipped })
}

/// `age_gender_race_timestamp.ext` -> (age, gender).
fn parse_utkface_name(path: &Path) -> Option<(u32, u8)> {
    let stem = path.file_stem()?.to_str()?;
    let mut parts = stem.split('_');
    let age: u32 = parts.next()?.parse().ok()?;
    let gender: u8 = parts.next()?.parse().ok()?;
    if age > 116 || gender > 1 || parts.next().is_none() {
        return None;
    }
    Some((age, gender))
}

fn load_csv_manifest(manifest: &Path, target: [usize; 3]) -> Result<LoadReport> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::Dataset(format!("cannot read manifest {}: {e}", manifest.display())))?;
    let headers = reader.headers()?.clone();
    let want = ["path", "gender", "age"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Dataset(format!(
            "manifest header must be `path,gender,age`, got {headers:?}"
        )));
    }
    let mut samples = Vec::new();
    let mut skipped = 0;
    for record in reader.records() {
        let record = record?;
        let rel = record.get(0).unwrap_or("");
        let gender: Option<u8> = record.get(1).and_then(|g| g.parse().ok()).filter(|g| *g <= 1);
        let age: Option<f64> = match record.get(2) {
            Some("") | None => None,
            Some(a) => match a.parse::<f64>() {
                Ok(v) if (0.0..=116.0).contains(&v) => Some(v),
                _ => {
                    skipped += 1;
                    continue;
                }
            },
        };
        let Some(gender) = gender else {
            skipped += 1;
            continue;
        };
        let file = base.join(rel);
        if !file.is_file() {
            skipped += 1;
            continue;
        }
        let image = decode_image(&file, target)?;
        samples.push(Sample { image, gender, age });
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable rows in {} ({skipped} skipped)",
            manifest.display()
        )));
    }
    Ok(LoadReport { samples, skipped })
}

fn decode_image(path: &Path, target: [usize; 3]) -> Result<Tensor<f32>> {
    let [h, w, c] = target;
    let img = image::open(path)?;
    let img = img.resize_exact(w as u32, h as u32, FilterType::Triangle);
    let mut data = Vec::with_capacity(h * w * c);
    match c {
        1 => {
            let gray = img.to_luma8();
            for px in gray.pixels() {
                data.push(px.0[0] as f32 / 255.0);
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for px in rgb.pixels() {
                for ch in 0..3 {
                    data.push(px.0[ch] as f32 / 255.0);
                }
            }
        }
        other => {
            return Err(Error::invalid("decode_image", format!("unsupported channel count {other}")));
        }
    }
    Tensor::new(vec![h, w, c], data)
}

/// Horizontal mirror of an `[H,W,C]` image.
pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = (image.dim(0), image.dim(1), image.dim(2));
    let mut out = Tensor::zeros(vec![h, w, c]);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                *out.at_mut(&[r, col, ch]) = image.at(&[r, w - 1 - col, ch]);
            }
        }
    }
    out
}

const CROP_PAD: usize = 4;

/// Random crop (zero-pad by 4, crop back to size) plus an independent 50%
/// horizontal flip; deterministic for a given seed.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (sample.image.dim(0), sample.image.dim(1), sample.image.dim(2));
    let off_r = rng.random_range(0..=2 * CROP_PAD);
    let off_c = rng.random_range(0..=2 * CROP_PAD);
    let mut out = Tensor::zeros(vec![h, w, c]);
    for r in 0..h {
        for col in 0..w {
            // Position in the padded frame, mapped back to the source.
            let src_r = (r + off_r) as isize - CROP_PAD as isize;
            let src_c = (col + off_c) as isize - CROP_PAD as isize;
            if src_r >= 0 && src_r < h as isize && src_c >= 0 && src_c < w as isize {
                for ch in 0..c {
                    *out.at_mut(&[r, col, ch]) = sample.image.at(&[src_r as usize, src_c as usize, ch]);
                }
            }
        }
    }
    if rng.random::<f64>() < 0.5 {
        out = hflip(&out);
    }
    Sample {
        image: out,
        gender: sample.gender,
        age: sample.age,
    }
}

/// Synthetic two-class dataset: class 0 is a bright horizontal bar, class 1 a
/// bright vertical bar, plus Gaussian noise clamped back to `[0,1]`. Balanced
/// and deterministic for a given seed.
pub fn synth_bars(n_samples: usize, size: usize, noise: f64, seed: u64) -> Result<Vec<Sample>> {
    if size < 8 {
        return Err(Error::invalid("synth_bars", "size must be >= 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = if noise > 0.0 {
        Some(Normal::new(0.0, noise).map_err(|e| Error::invalid("synth_bars", e.to_string()))?)
    } else {
        None
    };
    let thickness = (size / 8).max(1);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = (i % 2) as u8;
        let pos = rng.random_range(0..=size - thickness);
        let mut img = Tensor::filled(vec![size, size, 1], 0.1f32);
        for t in 0..thickness {
            for k in 0..size {
                let (r, c) = if label == 0 { (pos + t, k) } else { (k, pos + t) };
                *img.at_mut(&[r, c, 0]) = 0.9;
            }
        }
        if let Some(g) = &gauss {
            for v in img.data_mut() {
                *v = (*v + g.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        samples.push(Sample {
            image: img,
            gender: label,
            age: None,
        });
    }
    Ok(samples)
}

/// Seeded shuffle split into train/validation/test index sets (80/10/10).
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let val_end = (n_train + n_val).min(n);
    let train = idx[..n_train].to_vec();
    let val = idx[n_train..val_end].to_vec();
    let test = idx[val_end..].to_vec();
    (train, val, test)
}

/// Stack samples into a `[B,H,W,C]` batch of the requested precision.
pub fn batch_tensor<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or(Error::EmptyInput("batch_tensor"))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::shape("batch_tensor", "inconsistent sample shapes".to_string()));
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bracket_fixed_points() {
        assert_eq!(age_to_class(2.0).unwrap(), 0);
        assert_eq!(age_to_class(100.0).unwrap(), 13);
        assert_eq!(age_to_class(33.0).unwrap(), 6);
        assert!(age_to_class(-1.0).is_err());
        assert!(age_to_class(117.0).is_err());
    }

    #[test]
    fn brackets_are_total_and_monotone_on_integer_ages() {
        let mut last = 0;
        for age in 0..=116u32 {
            let class = age_to_class(age as f64).unwrap();
            assert!(class >= last, "class regressed at age {age}");
            assert!(class < 14);
            let (lo, hi) = AGE_BRACKETS[class];
            assert!(age >= lo && age <= hi);
            last = class;
        }
        // Boundaries map into their own bracket.
        for (i, &(lo, hi)) in AGE_BRACKETS.iter().enumerate() {
            assert_eq!(age_to_class(lo as f64).unwrap(), i);
            assert_eq!(age_to_class(hi as f64).unwrap(), i);
        }
    }

    #[test]
    fn utkface_names_parse_and_reject() {
        assert_eq!(
            parse_utkface_name(Path::new("25_0_2_20170116174525125.jpg")),
            Some((25, 0))
        );
        assert_eq!(parse_utkface_name(Path::new("badname.jpg")), None);
        assert_eq!(parse_utkface_name(Path::new("130_0_2_x.jpg")), None);
        assert_eq!(parse_utkface_name(Path::new("25_7_2_x.jpg")), None);
    }

    #[test]
    fn synth_bars_is_deterministic_and_balanced() {
        let a = synth_bars(40, 16, 0.3, 9).unwrap();
        let b = synth_bars(40, 16, 0.3, 9).unwrap();
        assert_eq!(a.len(), 40);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.gender, y.gender);
        }
        assert_eq!(a.iter().filter(|s| s.gender == 0).count(), 20);
        assert!(a.iter().all(|s| s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn noiseless_bars_are_separable_by_an_oriented_mean_stump() {
        let samples = synth_bars(100, 16, 0.0, 3).unwrap();
        let mut correct = 0;
        for s in &samples {
            let img = &s.image;
            let max_row_mean = (0..16)
                .map(|r| (0..16).map(|c| img.at(&[r, c, 0]) as f64).sum::<f64>() / 16.0)
                .fold(f64::NEG_INFINITY, f64::max);
            let max_col_mean = (0..16)
                .map(|c| (0..16).map(|r| img.at(&[r, c, 0]) as f64).sum::<f64>() / 16.0)
                .fold(f64::NEG_INFINITY, f64::max);
            let pred = if max_row_mean > max_col_mean { 0 } else { 1 };
            if pred == s.gender {
                correct += 1;
            }
        }
        assert_eq!(correct, 100);
    }

    #[test]
    fn augment_is_deterministic_and_stays_in_range() {
        let sample = &synth_bars(2, 16, 0.2, 4).unwrap()[0];
        let a = augment(sample, 11);
        let b = augment(sample, 11);
        assert_eq!(a.image, b.image);
        assert_eq!(a.image.shape(), sample.image.shape());
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // A different seed eventually produces a different crop.
        let c = augment(sample, 12);
        assert!(c.image != a.image || augment(sample, 13).image != a.image);
    }

    #[test]
    fn hflip_is_an_involution() {
        let sample = &synth_bars(2, 16, 0.3, 5).unwrap()[1];
        assert_eq!(hflip(&hflip(&sample.image)), sample.image);
    }

    #[test]
    fn split_is_80_10_10() {
        let (train, val, test) = split_indices(2000, 7);
        assert_eq!(train.len(), 1600);
        assert_eq!(val.len(), 200);
        assert_eq!(test.len(), 200);
        let mut all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        assert_eq!(split_indices(2000, 7).0, train);
        assert_ne!(split_indices(2000, 8).0, train);
    }

    #[test]
    fn image_files_roundtrip_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        // A white and a black 10x8 image with proper names, one junk name.
        let white = vec![255u8; 10 * 8 * 3];
        let black = vec![0u8; 10 * 8 * 3];
        image::save_buffer(dir.path().join("25_0_2_1.png"), &white, 8, 10, image::ColorType::Rgb8).unwrap();
        image::save_buffer(dir.path().join("40_1_0_2.png"), &black, 8, 10, image::ColorType::Rgb8).unwrap();
        image::save_buffer(dir.path().join("badname.png"), &black, 8, 10, image::ColorType::Rgb8).unwrap();

        let report = load_directory(dir.path(), Naming::Utkface, [10, 8, 3]).unwrap();
        assert_eq!(report.samples.len(), 2);
        assert_eq!(report.skipped, 1);
        let white_sample = &report.samples[0];
        assert_eq!(white_sample.gender, 0);
        assert_eq!(white_sample.age, Some(25.0));
        // 255 scales to exactly 1.0.
        assert!(white_sample.image.data().iter().all(|&v| v == 1.0));

        // Grayscale request collapses channels.
        let gray = load_directory(dir.path(), Naming::Utkface, [10, 8, 1]).unwrap();
        assert_eq!(gray.samples[0].image.shape(), &[10, 8, 1]);

        let empty = tempfile::tempdir().unwrap();
        assert!(load_directory(empty.path(), Naming::Utkface, [10, 8, 3]).is_err());
    }

    #[test]
    fn csv_manifest_loads_and_counts_skips() {
        let dir = tempfile::tempdir().unwrap();
        let px = vec![128u8; 6 * 6 * 3];
        image::save_buffer(dir.path().join("a.png"), &px, 6, 6, image::ColorType::Rgb8).unwrap();
        image::save_buffer(dir.path().join("b.png"), &px, 6, 6, image::ColorType::Rgb8).unwrap();
        let manifest = dir.path().join("data.csv");
        std::fs::write(
            &manifest,
            "path,gender,age\na.png,0,25\nb.png,1,\nmissing.png,0,30\nc.png,9,10\n",
        )
        .unwrap();
        let report = load_directory(&manifest, Naming::CsvManifest, [6, 6, 1]).unwrap();
        assert_eq!(report.samples.len(), 2);
        assert_eq!(report.skipped, 2);
        assert_eq!(report.samples[0].age, Some(25.0));
        assert_eq!(report.samples[1].age, None);
    }
}
