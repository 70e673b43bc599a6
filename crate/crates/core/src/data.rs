//! ImageFolder scanning, decoding, preprocessing, splitting and batching.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "pgm", "ppm"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: PathBuf,
    pub label: usize,
}

/// Sorted class names and the records that belong to them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
    /// Non-image files ignored during the scan.
    pub skipped: usize,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_class(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    fn view(&self, records: Vec<Record>) -> Self {
        Self { class_names: self.class_names.clone(), records, skipped: 0 }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Indexes `root/<class>/<image>`; classes and files are sorted by name.
pub fn scan_image_folder(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("data root {} does not exist or is not a directory", root.display())));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} has {} class subdirectories; at least 2 are required",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut empty = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("class directory {} is not valid UTF-8", dir.display())))?
            .to_string();
        let before = records.len();
        for path in sorted_entries(dir)? {
            if path.is_file() && is_image(&path) {
                records.push(Record { path, label });
            } else {
                skipped += 1;
            }
        }
        if records.len() == before {
            empty.push(name.clone());
        }
        class_names.push(name);
    }
    if !empty.is_empty() {
        return Err(Error::Dataset(format!("classes without images: {}", empty.join(", "))));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} non-image entries under {}", root.display());
    }
    Ok(DatasetIndex { class_names, records, skipped })
}

/// Decoded 8-bit image in height x width x channels order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "raw image {width}x{height}x{channels} does not match {} bytes",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }
}

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), message: message.into() }
}

/// Reads an 8-bit grayscale or RGB PNG, binary PGM (P5) or binary PPM (P6).
pub fn decode_image(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes).map_err(|m| image_err(path, m))
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(&bytes).map_err(|m| image_err(path, m))
    } else {
        Err(image_err(path, "unrecognised image format (expected PNG, P5 PGM or P6 PPM)"))
    }
}

fn decode_png(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| format!("png: {e}"))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("png bit depth {:?} unsupported; only 8-bit images are accepted", info.bit_depth));
    }
    if info.interlaced {
        return Err("interlaced png unsupported".into());
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(format!("png color type {other:?} unsupported; use grayscale or RGB")),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader.output_buffer_size().ok_or("png: image too large")?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| format!("png: {e}"))?;
    buf.truncate(frame.buffer_size());
    RawImage::new(width, height, channels, buf).map_err(|e| e.to_string())
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format!("truncated header at byte {pos}")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("header number at byte {start} out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported; only 8-bit images are accepted"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format!("missing whitespace after header at byte {pos}"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or("image dimensions overflow")?;
    let pixels = bytes.get(pos..pos + n).ok_or_else(|| {
        format!("truncated pixel data: need {n} bytes after offset {pos}, file has {}", bytes.len().saturating_sub(pos))
    })?;
    let data = if maxval == 255 {
        pixels.to_vec()
    } else {
        pixels
            .iter()
            .map(|&v| ((v.min(maxval as u8) as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
            .collect()
    };
    RawImage::new(width, height, channels, data).map_err(|e| e.to_string())
}

/// Encodes `image` as binary PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(image: &RawImage) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn write_pnm(path: &Path, image: &RawImage) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pnm(image)).map_err(|e| Error::io(path, e))
}

/// Encodes an 8-bit grayscale or RGB PNG.
pub fn encode_png(image: &RawImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(if image.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
        w.write_image_data(&image.data).map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Bilinear resize of an HWC image (align-corners = false: output pixel `i`
/// samples source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the
/// image). Returns HWC floats on the 0..=255 scale.
pub fn resize_bilinear(image: &RawImage, out_h: usize, out_w: usize) -> Result<Vec<f32>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}x{out_w} must be at least 1x1")));
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let px = |y: usize, x: usize, ch: usize| image.data[(y * w + x) * c + ch] as f32;
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = px(y0, x0, ch) * (1.0 - fx) + px(y0, x1, ch) * fx;
                let bottom = px(y1, x0, ch) * (1.0 - fx) + px(y1, x1, ch) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 255.0));
            }
        }
    }
    Ok(out)
}

/// Maps HWC values on the 0..=255 scale to CHW values in [-1, 1] via
/// `(x / 255 - 0.5) / 0.5`. Gray input is replicated when three channels are
/// requested; RGB input is reduced to luma when one is requested.
pub fn normalize(hwc: &[f32], height: usize, width: usize, channels: usize, out_channels: usize) -> Result<Vec<f32>> {
    if hwc.len() != height * width * channels || !(channels == 1 || channels == 3) {
        return Err(Error::InvalidArgument(format!(
            "normalize: {} values for {height}x{width}x{channels}",
            hwc.len()
        )));
    }
    if !(out_channels == 1 || out_channels == 3) {
        return Err(Error::InvalidArgument(format!("normalize: unsupported output channel count {out_channels}")));
    }
    let plane = height * width;
    let scale = |v: f32| (v / 255.0 - 0.5) / 0.5;
    let mut out = vec![0.0f32; out_channels * plane];
    for p in 0..plane {
        let px = &hwc[p * channels..(p + 1) * channels];
        match (channels, out_channels) {
            (1, _) => (0..out_channels).for_each(|c| out[c * plane + p] = scale(px[0])),
            (3, 3) => (0..3).for_each(|c| out[c * plane + p] = scale(px[c])),
            _ => out[p] = scale(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]),
        }
    }
    Ok(out)
}

/// Ratios for [`split_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2, seed: 0, stratified: true }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be nonnegative and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: DatasetIndex,
    pub val: DatasetIndex,
    pub test: DatasetIndex,
}

/// Per class (or globally when not stratified): shuffle with the seeded
/// generator, then cut at `round(train * n)` and `round((train + val) * n)`.
pub fn split_dataset(index: &DatasetIndex, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let counts = index.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("class {:?} has no records", index.class_names[c])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in index.records.iter().enumerate() {
            by_class.entry(r.label).or_default().push(i);
        }
        by_class.into_values().collect()
    } else {
        vec![(0..index.len()).collect()]
    };
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut group in groups {
        group.shuffle(&mut rng);
        let n = group.len() as f64;
        let a = (spec.train * n).round() as usize;
        let b = (((spec.train + spec.val) * n).round() as usize).max(a);
        train.extend_from_slice(&group[..a]);
        val.extend_from_slice(&group[a..b]);
        test.extend_from_slice(&group[b..]);
    }
    let pick = |mut ids: Vec<usize>| {
        ids.sort_unstable();
        index.view(ids.into_iter().map(|i| index.records[i].clone()).collect())
    };
    Ok(Splits { train: pick(train), val: pick(val), test: pick(test) })
}

/// Index batches over `0..len`. With `shuffle`, the order is a permutation
/// drawn from `(seed, epoch)`; the final partial batch is kept.
pub fn batch_iterator(len: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if len == 0 {
        return Err(Error::Dataset("cannot batch an empty split".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Preprocessed images held in memory, in index order.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub class_names: Vec<String>,
    pub channels: usize,
    pub size: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_class(&self) -> usize {
        self.class_names.len()
    }

    fn stride(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.stride()..(i + 1) * self.stride()]
    }

    /// Stacks the given samples into `B x C x S x S`.
    pub fn batch(&self, ids: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(ids.len() * self.stride());
        for &i in ids {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor::new([ids.len(), self.channels, self.size, self.size], data).expect("batch shape");
        (t, ids.iter().map(|&i| self.labels[i]).collect())
    }

    /// All samples as one tensor.
    pub fn all(&self) -> (Tensor<f32>, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Decode, resize to `size x size` and normalize one file.
pub fn load_sample(path: &Path, size: usize, channels: usize) -> Result<Vec<f32>> {
    let raw = decode_image(path)?;
    let resized = resize_bilinear(&raw, size, size)?;
    normalize(&resized, size, size, raw.channels, channels)
}

/// Loads every record of `index`, decoding in parallel; output order
/// follows the index.
pub fn load_samples(index: &DatasetIndex, size: usize, channels: usize) -> Result<SampleSet> {
    let decoded: Vec<Vec<f32>> = index
        .records
        .par_iter()
        .map(|r| load_sample(&r.path, size, channels))
        .collect::<Result<_>>()?;
    Ok(SampleSet {
        class_names: index.class_names.clone(),
        channels,
        size,
        images: decoded.concat(),
        labels: index.labels(),
        paths: index.records.iter().map(|r| r.path.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, data: Vec<u8>) -> RawImage {
        RawImage::new(w, h, 1, data).unwrap()
    }

    fn write_tree(root: &Path, classes: &[(&str, usize)]) {
        for (name, n) in classes {
            let dir = root.join(name);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..*n {
                write_pnm(&dir.join(format!("{i:03}.pgm")), &gray(2, 2, vec![i as u8; 4])).unwrap();
            }
        }
    }

    #[test]
    fn scan_sorts_classes_and_skips_other_files() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &[("B", 2), ("A", 2)]);
        fs::write(dir.path().join("A").join("notes.txt"), "x").unwrap();
        let idx = scan_image_folder(dir.path()).unwrap();
        assert_eq!(idx.class_names, ["A", "B"]);
        assert_eq!(idx.len(), 4);
        assert_eq!(idx.skipped, 1);
        assert_eq!(idx.records[0].label, 0);
        assert_eq!(idx, scan_image_folder(dir.path()).unwrap());
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_image_folder(&dir.path().join("nope")).is_err());
        write_tree(dir.path(), &[("only", 1)]);
        assert!(scan_image_folder(dir.path()).is_err());
        fs::create_dir(dir.path().join("empty")).unwrap();
        let err = scan_image_folder(dir.path()).unwrap_err().to_string();
        assert!(err.contains("empty"), "{err}");
    }

    #[test]
    fn pgm_decode_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        fs::write(&p, b"P5\n# comment\n2 2\n255\n\x00\xff\x80\x40").unwrap();
        let img = decode_image(&p).unwrap();
        assert_eq!((img.height, img.width, img.channels), (2, 2, 1));
        assert_eq!(img.data, [0, 255, 128, 64]);

        let rgb = RawImage::new(3, 2, 3, (0..18).map(|v| v * 13).collect()).unwrap();
        let p = dir.path().join("b.ppm");
        write_pnm(&p, &rgb).unwrap();
        assert_eq!(decode_image(&p).unwrap(), rgb);
    }

    #[test]
    fn png_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = RawImage::new(3, 2, 3, (0..18).map(|v| v * 7).collect()).unwrap();
        let p = dir.path().join("c.png");
        fs::write(&p, encode_png(&rgb).unwrap()).unwrap();
        assert_eq!(decode_image(&p).unwrap(), rgb);

        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            enc.write_header().unwrap().write_image_data(&[1, 2]).unwrap();
        }
        let p16 = dir.path().join("d.png");
        fs::write(&p16, out).unwrap();
        let err = decode_image(&p16).unwrap_err().to_string();
        assert!(err.contains("8-bit") && err.contains("d.png"), "{err}");
    }

    #[test]
    fn truncated_and_garbage_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        fs::write(&p, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(decode_image(&p).unwrap_err().to_string().contains("truncated"));
        fs::write(&p, b"P5\n4").unwrap();
        assert!(decode_image(&p).is_err());
        fs::write(&p, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(decode_image(&p).is_err());
        fs::write(&p, b"hello").unwrap();
        assert!(decode_image(&p).is_err());
        let png_path = dir.path().join("t.png");
        let mut bytes = encode_png(&gray(4, 4, vec![9; 16])).unwrap();
        bytes.truncate(bytes.len() / 2);
        fs::write(&png_path, bytes).unwrap();
        assert!(decode_image(&png_path).is_err());
    }

    #[test]
    fn resize_identity_constant_and_monotone() {
        let img = gray(3, 2, vec![0, 10, 20, 200, 100, 50]);
        let same = resize_bilinear(&img, 2, 3).unwrap();
        for (a, &b) in same.iter().zip(&img.data) {
            assert!((a - b as f32).abs() <= 1e-4);
        }
        let c = resize_bilinear(&gray(5, 3, vec![77; 15]), 11, 2).unwrap();
        assert!(c.iter().all(|&v| v == 77.0));
        let row = resize_bilinear(&gray(2, 1, vec![0, 255]), 1, 4).unwrap();
        assert!(row.windows(2).all(|w| w[0] <= w[1]), "{row:?}");
        // align-corners=false: 0, 63.75, 191.25, 255
        assert_eq!(row, [0.0, 63.75, 191.25, 255.0]);
        assert!(resize_bilinear(&img, 0, 1).is_err());
    }

    #[test]
    fn normalize_endpoints_and_layout() {
        let out = normalize(&[0.0, 255.0, 127.5, 51.0], 2, 2, 1, 1).unwrap();
        assert_eq!(out, [-1.0, 1.0, 0.0, -0.6]);
        let rgb = normalize(&[0.0, 255.0, 0.0, 255.0, 0.0, 255.0], 1, 2, 3, 3).unwrap();
        assert_eq!(rgb, [-1.0, 1.0, 1.0, -1.0, -1.0, 1.0]);
        let rep = normalize(&[255.0], 1, 1, 1, 3).unwrap();
        assert_eq!(rep, [1.0; 3]);
        let luma = normalize(&[255.0, 255.0, 255.0], 1, 1, 3, 1).unwrap();
        assert!((luma[0] - 1.0).abs() < 1e-6);
    }

    fn index_with_counts(counts: &[usize]) -> DatasetIndex {
        let mut records = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(Record { path: PathBuf::from(format!("{label}/{i}")), label });
            }
        }
        DatasetIndex { class_names: (0..counts.len()).map(|c| c.to_string()).collect(), records, skipped: 0 }
    }

    #[test]
    fn ten_records_split_seven_one_two() {
        let idx = index_with_counts(&[10]);
        let s = split_dataset(&idx, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s, split_dataset(&idx, &SplitSpec::default()).unwrap());
        let other = split_dataset(&idx, &SplitSpec { seed: 5, ..SplitSpec::default() }).unwrap();
        assert_ne!(s.train.records, other.train.records);
    }

    #[test]
    fn bad_ratios_rejected() {
        let idx = index_with_counts(&[4, 4]);
        let spec = SplitSpec { train: 0.5, val: 0.1, test: 0.1, ..SplitSpec::default() };
        assert!(split_dataset(&idx, &spec).is_err());
        let spec = SplitSpec { train: -0.1, val: 0.9, test: 0.2, ..SplitSpec::default() };
        assert!(split_dataset(&idx, &spec).is_err());
    }

    #[test]
    fn batches() {
        let b = batch_iterator(10, 4, false, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(b[0], [0, 1, 2, 3]);
        let a = batch_iterator(10, 4, true, 7, 0).unwrap();
        assert_eq!(a, batch_iterator(10, 4, true, 7, 0).unwrap());
        assert_ne!(a, batch_iterator(10, 4, true, 7, 1).unwrap());
        assert!(batch_iterator(0, 4, true, 7, 0).is_err());
        assert!(batch_iterator(3, 0, true, 7, 0).is_err());
    }
}
