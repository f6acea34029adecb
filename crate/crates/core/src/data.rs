//! Image datasets: the seeded `blobs10` generator, IDX files and directories
//! of PGM/PPM images.
//!
//! IDX layout (big-endian, as in the classic format): magic `0x00 0x00 0x08 rank`,
//! then `rank` u32 extents, then u8 data. A dataset directory holds
//! `images.idx` (rank 4, `N×C×H×W`) and `labels.idx` (rank 1). A raw
//! directory holds one sub-directory per class, named by its index, with
//! binary PGM (P5, one channel) or PPM (P6, three channels) files read in
//! file-name order.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// u8 images with labels and per-channel normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<u8>,
    shape: [usize; 4],
    labels: Vec<usize>,
    classes: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Dataset {
    /// Validates labels and computes per-channel mean and standard deviation of `x/255`.
    pub fn new(images: Vec<u8>, shape: [usize; 4], labels: Vec<usize>, classes: usize) -> Result<Self> {
        let [n, c, h, w] = shape;
        if images.len() != n * c * h * w {
            return Err(Error::Format(format!(
                "{} image bytes for shape {shape:?}",
                images.len()
            )));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} images", labels.len())));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!(
                "label {l} of sample {i} is outside [0, {classes})"
            )));
        }
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let count = (n * plane).max(1) as f64;
        let img = &images;
        for ch in 0..c {
            let vals = || {
                (0..n).flat_map(move |s| {
                    img[(s * c + ch) * plane..(s * c + ch + 1) * plane]
                        .iter()
                        .map(|&b| b as f64 / 255.0)
                })
            };
            mean[ch] = vals().sum::<f64>() / count;
            var[ch] = vals().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / count;
        }
        let std = var.iter().map(|v| v.sqrt().max(1e-3)).collect();
        Ok(Dataset {
            images,
            shape,
            labels,
            classes,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &self.images[i * len..(i + 1) * len]
    }

    /// Normalized `(x/255 − mean)/std` batch; `flip[k]` mirrors sample `k` horizontally.
    pub fn batch<T: Scalar>(&self, indices: &[usize], flip: &[bool]) -> (Tensor<T>, Vec<usize>) {
        let [_, c, h, w] = self.shape;
        let t = Tensor::from_fn([indices.len(), c, h, w], |k, ch, i, j| {
            let jj = if flip.get(k).copied().unwrap_or(false) {
                w - 1 - j
            } else {
                j
            };
            let b = self.image(indices[k])[(ch * h + i) * w + jj];
            T::of((b as f64 / 255.0 - self.mean[ch]) / self.std[ch])
        });
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut images = Vec::new();
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let [_, c, h, w] = self.shape;
        Dataset::new(
            images,
            [indices.len(), c, h, w],
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    /// Writes `images.idx` and `labels.idx` into `dir`.
    pub fn save_idx(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut img = idx_header(&self.shape.map(|d| d as u32));
        img.extend_from_slice(&self.images);
        fs::write(dir.join("images.idx"), img)?;
        let mut lab = idx_header(&[self.len() as u32]);
        for &l in &self.labels {
            lab.push(u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?);
        }
        fs::write(dir.join("labels.idx"), lab)?;
        Ok(())
    }
}

fn idx_header(dims: &[u32]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out
}

fn parse_idx(bytes: &[u8], what: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("{what}: empty or truncated IDX file")));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(Error::Format(format!("{what}: bad IDX magic (u8 data expected)")));
    }
    let rank = bytes[3] as usize;
    let body = 4 + 4 * rank;
    if bytes.len() < body {
        return Err(Error::Format(format!("{what}: truncated IDX header")));
    }
    let dims: Vec<usize> = bytes[4..body]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - body != n {
        return Err(Error::Format(format!(
            "{what}: {} data bytes for dims {dims:?}",
            bytes.len() - body
        )));
    }
    Ok((dims, bytes[body..].to_vec()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Idx,
    RawDir,
}

/// Loads a dataset directory. `classes` defaults to one more than the largest label.
pub fn load_dataset(path: &Path, format: DataFormat, classes: Option<usize>) -> Result<Dataset> {
    let (images, shape, labels) = match format {
        DataFormat::Idx => {
            let (idims, images) = parse_idx(&fs::read(path.join("images.idx"))?, "images.idx")?;
            let (ldims, labels) = parse_idx(&fs::read(path.join("labels.idx"))?, "labels.idx")?;
            let shape: [usize; 4] = idims
                .try_into()
                .map_err(|_| Error::Format("images.idx must have rank 4 (N, C, H, W)".into()))?;
            if ldims != [shape[0]] {
                return Err(Error::Format(format!(
                    "labels.idx dims {ldims:?} do not match {} images",
                    shape[0]
                )));
            }
            (images, shape, labels.into_iter().map(usize::from).collect())
        }
        DataFormat::RawDir => load_raw_dir(path)?,
    };
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(images, shape, labels, classes)
}

/// Picks [`DataFormat::Idx`] when `images.idx` exists.
pub fn detect_format(path: &Path) -> DataFormat {
    if path.join("images.idx").is_file() {
        DataFormat::Idx
    } else {
        DataFormat::RawDir
    }
}

fn load_raw_dir(path: &Path) -> Result<(Vec<u8>, [usize; 4], Vec<usize>)> {
    let mut class_dirs: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for e in fs::read_dir(path)? {
        let e = e?;
        if e.file_type()?.is_dir() {
            let name = e.file_name().to_string_lossy().to_string();
            let k = name
                .parse()
                .map_err(|_| Error::Format(format!("class directory `{name}` is not a class index")))?;
            class_dirs.push((k, e.path()));
        }
    }
    class_dirs.sort();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut dims: Option<[usize; 3]> = None;
    for (k, dir) in class_dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| matches!(p.extension().and_then(|s| s.to_str()), Some("pgm" | "ppm")));
        files.sort();
        for f in files {
            let img = read_pnm(&f)?;
            let d = [img.channels, img.height, img.width];
            if *dims.get_or_insert(d) != d {
                return Err(Error::Format(format!(
                    "{}: image shape {d:?} differs from earlier images",
                    f.display()
                )));
            }
            images.extend(img.planar());
            labels.push(k);
        }
    }
    let [c, h, w] = dims.ok_or_else(|| Error::Format(format!("{}: no PGM/PPM images found", path.display())))?;
    Ok((images, [labels.len(), c, h, w], labels))
}

/// Interleaved 8-bit image from a PNM file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, channels interleaved.
    pub pixels: Vec<u8>,
}

impl Pnm {
    /// Channel-major copy of the pixels.
    pub fn planar(&self) -> Vec<u8> {
        let (c, hw) = (self.channels, self.height * self.width);
        (0..c * hw).map(|k| self.pixels[(k % hw) * c + k / hw]).collect()
    }
}

/// Writes a binary PGM (1 channel) or PPM (3 channels) with `#` comment lines.
pub fn write_pnm(
    path: &Path,
    channels: usize,
    height: usize,
    width: usize,
    interleaved: &[u8],
    comments: &[String],
) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(crate::error::config_err!(
                "PNM supports 1 or 3 channels, got {channels}"
            ))
        }
    };
    if interleaved.len() != channels * height * width {
        return Err(crate::error::config_err!(
            "pixel buffer does not match {channels}x{height}x{width}"
        ));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{magic}")?;
    for c in comments {
        writeln!(f, "# {}", c.replace('\n', " "))?;
    }
    write!(f, "{width} {height}\n255\n")?;
    f.write_all(interleaved)?;
    f.flush()?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).to_string())
    };
    let channels = match token().as_deref() {
        Some("P5") => 1,
        Some("P6") => 3,
        _ => return Err(bad("not a binary PGM/PPM file")),
    };
    let mut num = || token().and_then(|t| t.parse::<usize>().ok());
    let (w, h, maxval) = match (num(), num(), num()) {
        (Some(w), Some(h), Some(m)) => (w, h, m),
        _ => return Err(bad("malformed header")),
    };
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let start = pos + 1;
    let len = channels * h * w;
    if bytes.len() < start + len {
        return Err(bad("truncated pixel data"));
    }
    Ok(Pnm {
        channels,
        height: h,
        width: w,
        pixels: bytes[start..start + len].to_vec(),
    })
}

/// Writes the dataset as one directory per class of PGM/PPM files.
pub fn save_raw_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    for i in 0..ds.len() {
        let class_dir = dir.join(ds.labels[i].to_string());
        fs::create_dir_all(&class_dir)?;
        let planar = ds.image(i);
        let inter: Vec<u8> = (0..c * h * w).map(|k| planar[(k % c) * h * w + k / c]).collect();
        let ext = if c == 1 { "pgm" } else { "ppm" };
        write_pnm(&class_dir.join(format!("{i:06}.{ext}")), c, h, w, &inter, &[])?;
    }
    Ok(())
}

pub const BLOBS_CLASSES: usize = 10;
pub const BLOBS_SIDE: usize = 32;
pub const BLOBS_TRAIN: usize = 2000;
pub const BLOBS_TEST: usize = 500;
const BLOBS_RADIUS: f64 = 9.0;
const BLOBS_TEST_SALT: u64 = 0x7e57_5eed_0b10_b510;

/// `n` 3×32×32 images, class `k` a Gaussian blob centered on the circle of
/// radius 9 at angle `2πk/10`, with position jitter, random color and pixel
/// noise. Classes are balanced and the order is shuffled.
pub fn blobs10(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.06).expect("valid std");
    let s = BLOBS_SIDE;
    let mut labels: Vec<usize> = (0..n).map(|i| i % BLOBS_CLASSES).collect();
    labels.shuffle(&mut rng);
    let mut images = Vec::with_capacity(n * 3 * s * s);
    for &k in &labels {
        let angle = 2.0 * PI * k as f64 / BLOBS_CLASSES as f64;
        let cy = (s as f64 - 1.0) / 2.0 + BLOBS_RADIUS * angle.sin() + rng.random_range(-1.5..1.5);
        let cx = (s as f64 - 1.0) / 2.0 + BLOBS_RADIUS * angle.cos() + rng.random_range(-1.5..1.5);
        let sigma: f64 = rng.random_range(2.0..3.0);
        let bg: f64 = rng.random_range(0.05..0.25);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.4..0.75));
        for amp in color {
            for i in 0..s {
                for j in 0..s {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    let v = bg + amp * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                    images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    Dataset::new(images, [n, 3, s, s], labels, BLOBS_CLASSES).expect("generator output is consistent")
}

/// The 2,000-sample training split.
pub fn blobs10_train(seed: u64) -> Dataset {
    blobs10(BLOBS_TRAIN, seed)
}

/// The 500-sample held-out split, drawn from an independent stream.
pub fn blobs10_test(seed: u64) -> Dataset {
    blobs10(BLOBS_TEST, seed ^ BLOBS_TEST_SALT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let a = blobs10(200, 1);
        assert_eq!(a.classes(), 10);
        for k in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 20);
        }
        assert_eq!(a, blobs10(200, 1));
        assert_ne!(a, blobs10(200, 2));
    }

    #[test]
    fn blob_peak_sits_near_its_class_position() {
        let d = blobs10(50, 3);
        for i in 0..d.len() {
            let img = d.image(i);
            let (mut best, mut arg) = (0u32, 0usize);
            for p in 0..32 * 32 {
                let v: u32 = (0..3).map(|c| img[c * 1024 + p] as u32).sum();
                if v > best {
                    best = v;
                    arg = p;
                }
            }
            let angle = 2.0 * PI * d.labels()[i] as f64 / 10.0;
            let (ey, ex) = (15.5 + 9.0 * angle.sin(), 15.5 + 9.0 * angle.cos());
            let dist = ((arg / 32) as f64 - ey).hypot((arg % 32) as f64 - ex);
            assert!(dist < 4.0, "sample {i}: peak {dist:.1} px from class center");
        }
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = blobs10(30, 4);
        d.save_idx(dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path(), DataFormat::Idx, Some(10)).unwrap(), d);
        assert!(matches!(
            load_dataset(dir.path(), DataFormat::Idx, Some(3)),
            Err(Error::Data(_))
        ));
        fs::write(dir.path().join("images.idx"), b"").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), DataFormat::Idx, None),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn raw_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = blobs10(12, 5);
        save_raw_dir(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path(), DataFormat::RawDir, Some(10)).unwrap();
        // Raw directories are read class by class.
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by_key(|&i| (d.labels()[i], i));
        assert_eq!(back, d.subset(&order).unwrap());
    }

    #[test]
    fn batches_are_normalized_and_flippable() {
        let d = blobs10(100, 6);
        let idx: Vec<usize> = (0..100).collect();
        let (x, y) = d.batch::<f64>(&idx, &[]);
        assert_eq!(y, d.labels());
        for c in 0..3 {
            let vals: Vec<f64> = (0..100).flat_map(|n| x.plane(n, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9);
        }
        let (f, _) = d.batch::<f64>(&[0], &[true]);
        assert_eq!(f.at(0, 1, 3, 0), x.at(0, 1, 3, 31));
    }

    #[test]
    fn pnm_round_trip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pnm(&p, 1, 2, 3, &[0, 1, 2, 3, 4, 255], &["seed 7".into()]).unwrap();
        let img = read_pnm(&p).unwrap();
        assert_eq!((img.height, img.width, img.pixels[5]), (2, 3, 255));
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pnm(&p).is_err());
    }
}
