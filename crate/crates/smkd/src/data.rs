//! Datasets: procedural synthetic classes, CIFAR-format binary ingestion,
//! class-split files, view augmentation, and PPM image I/O.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::tensor::{Scalar, Tensor};
use crate::util::derive_seed;

pub const CIFAR_SIZE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIZE * CIFAR_SIZE;

#[derive(Debug)]
pub enum DataError {
    Io(io::Error),
    Format { offset: u64, message: String },
    SplitFile { line: usize, message: String },
    BadParameter(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "i/o error: {e}"),
            DataError::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            DataError::SplitFile { line, message } => {
                write!(f, "split file line {line}: {message}")
            }
            DataError::BadParameter(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        DataError::Io(e)
    }
}

pub type DataResult<T> = Result<T, DataError>;

/// 8-bit RGB image in channel-planar layout `[3, size, size]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn zeros(size: usize) -> Self {
        Image {
            size,
            data: vec![0; 3 * size * size],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[c * self.size * self.size + y * self.size + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[c * self.size * self.size + y * self.size + x] = v;
    }

    /// Map to `[-1, 1]` floats as the model input.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| T::from_f64(v as f64 / 255.0 * 2.0 - 1.0))
            .collect();
        Tensor::leaf(&[3, self.size, self.size], data).expect("image tensor")
    }

    /// Interleaved RGB rows, as PPM wants them.
    pub fn to_interleaved(&self) -> Vec<u8> {
        let s = self.size;
        let mut out = Vec::with_capacity(3 * s * s);
        for y in 0..s {
            for x in 0..s {
                out.push(self.get(0, y, x));
                out.push(self.get(1, y, x));
                out.push(self.get(2, y, x));
            }
        }
        out
    }

    pub fn from_interleaved(size: usize, rgb: &[u8]) -> Self {
        let mut img = Image::zeros(size);
        for y in 0..size {
            for x in 0..size {
                let base = (y * size + x) * 3;
                img.set(0, y, x, rgb[base]);
                img.set(1, y, x, rgb[base + 1]);
                img.set(2, y, x, rgb[base + 2]);
            }
        }
        img
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Base,
    Val,
    Novel,
}

/// Labeled images with a class-level base/val/novel partition. Base and novel
/// classes are disjoint by construction: each class carries exactly one tag.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub image_size: usize,
    /// Flat `[n, 3, S, S]` pixel storage.
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
    pub class_split: Vec<Split>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> Image {
        let px = 3 * self.image_size * self.image_size;
        Image {
            size: self.image_size,
            data: self.pixels[i * px..(i + 1) * px].to_vec(),
        }
    }

    pub fn classes_of(&self, split: Split) -> Vec<u16> {
        (0..self.num_classes() as u16)
            .filter(|&c| self.class_split[c as usize] == split)
            .collect()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.class_split[self.labels[i] as usize] == split)
            .collect()
    }

    /// Image indices grouped per class, for the classes of one split.
    pub fn by_class(&self, split: Split) -> Vec<(u16, Vec<usize>)> {
        self.classes_of(split)
            .into_iter()
            .map(|c| {
                let idx = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
                (c, idx)
            })
            .collect()
    }

    pub fn validate(&self) -> DataResult<()> {
        let px = 3 * self.image_size * self.image_size;
        if self.pixels.len() != px * self.labels.len() {
            return Err(DataError::BadParameter(format!(
                "pixel buffer holds {} bytes, expected {}",
                self.pixels.len(),
                px * self.labels.len()
            )));
        }
        if self.class_split.len() != self.num_classes() {
            return Err(DataError::BadParameter(
                "class_split length differs from class count".into(),
            ));
        }
        for &l in &self.labels {
            if l as usize >= self.num_classes() {
                return Err(DataError::BadParameter(format!(
                    "label {l} out of range for {} classes",
                    self.num_classes()
                )));
            }
        }
        Ok(())
    }
}

// ---- synthetic data ---------------------------------------------------------

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Procedurally generated classes: each class couples a base hue band with an
/// oriented stripe pattern and a blob layout; per-image phase, position and
/// lighting noise keep classes from being mean-color separable. Split
/// assignment: 5 novel classes, 1 val class, the rest base (hence >= 7).
pub fn generate_synthetic(
    n_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> DataResult<LabeledDataset> {
    if n_classes < 7 {
        return Err(DataError::BadParameter(format!(
            "need at least 7 classes for a 5-way novel split plus base, got {n_classes}"
        )));
    }
    if per_class == 0 || image_size == 0 {
        return Err(DataError::BadParameter(
            "per_class and image_size must be positive".into(),
        ));
    }
    let s = image_size;
    let n = n_classes * per_class;
    let mut pixels = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);

    for class in 0..n_classes {
        // class recipe
        let hue = class as f64 * 360.0 / n_classes as f64;
        let angle = std::f64::consts::PI * (class as f64) / n_classes as f64;
        let (dir_x, dir_y) = (angle.cos(), angle.sin());
        let freq = 2.0 + ((class * 5) % 7) as f64 * 0.7;
        let n_blobs = 1 + class % 3;
        let mut class_rng = StdRng::seed_from_u64(derive_seed(seed, "class", class as u64));
        let blob_centers: Vec<(f64, f64)> = (0..n_blobs)
            .map(|_| (class_rng.gen_range(0.2..0.8), class_rng.gen_range(0.2..0.8)))
            .collect();

        for idx in 0..per_class {
            let mut rng = StdRng::seed_from_u64(derive_seed(
                seed,
                "image",
                (class * per_class + idx) as u64,
            ));
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let hue_jitter = rng.gen_range(-25.0..25.0);
            let sat = rng.gen_range(0.45..0.8);
            let light = rng.gen_range(0.65..1.0);
            let blob_jitter: Vec<(f64, f64)> = blob_centers
                .iter()
                .map(|&(bx, by)| {
                    (
                        (bx + rng.gen_range(-0.12..0.12)).clamp(0.05, 0.95),
                        (by + rng.gen_range(-0.12..0.12)).clamp(0.05, 0.95),
                    )
                })
                .collect();

            let mut img = Image::zeros(s);
            for y in 0..s {
                for x in 0..s {
                    let u = x as f64 / s as f64;
                    let v = y as f64 / s as f64;
                    let wave =
                        (std::f64::consts::TAU * freq * (u * dir_x + v * dir_y) + phase).sin();
                    let mut value = light * (0.55 + 0.3 * wave);
                    for &(bx, by) in &blob_jitter {
                        let d2 = (u - bx) * (u - bx) + (v - by) * (v - by);
                        value += 0.35 * (-d2 / 0.01).exp();
                    }
                    let (r, g, b) = hsv_to_rgb(hue + hue_jitter, sat, value.clamp(0.0, 1.0));
                    let mut noise = || rng.gen_range(-8.0..8.0);
                    img.set(0, y, x, (r * 255.0 + noise()).clamp(0.0, 255.0) as u8);
                    img.set(1, y, x, (g * 255.0 + noise()).clamp(0.0, 255.0) as u8);
                    img.set(2, y, x, (b * 255.0 + noise()).clamp(0.0, 255.0) as u8);
                }
            }
            pixels.extend_from_slice(&img.data);
            labels.push(class as u16);
        }
    }

    let class_split = (0..n_classes)
        .map(|c| {
            if c >= n_classes - 5 {
                Split::Novel
            } else if c == n_classes - 6 {
                Split::Val
            } else {
                Split::Base
            }
        })
        .collect();

    let ds = LabeledDataset {
        image_size: s,
        pixels,
        labels,
        class_names: (0..n_classes).map(|c| format!("synthetic_{c}")).collect(),
        class_split,
    };
    ds.validate()?;
    Ok(ds)
}

// ---- CIFAR binary format ----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    /// 1 label byte + 3072 pixel bytes per record.
    Cifar10Like,
    /// 2 label bytes (coarse, fine; fine is used) + 3072 pixel bytes.
    Cifar100Like,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10Like => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100Like => 2 + CIFAR_PIXELS,
        }
    }
}

/// Decode a CIFAR-format binary file. Every class starts tagged `Base`;
/// apply a split file with [`apply_class_splits`] afterwards.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> DataResult<LabeledDataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_cifar(&bytes, variant)
}

pub fn decode_cifar(bytes: &[u8], variant: CifarVariant) -> DataResult<LabeledDataset> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        let whole = (bytes.len() / rec) * rec;
        return Err(DataError::Format {
            offset: whole as u64,
            message: format!(
                "file length {} is not a multiple of the {}-byte record",
                bytes.len(),
                rec
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for i in 0..n {
        let start = i * rec;
        let label = match variant {
            CifarVariant::Cifar10Like => bytes[start] as u16,
            CifarVariant::Cifar100Like => bytes[start + 1] as u16,
        };
        labels.push(label);
        let px = &bytes[start + rec - CIFAR_PIXELS..start + rec];
        pixels.extend_from_slice(px);
    }
    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let ds = LabeledDataset {
        image_size: CIFAR_SIZE,
        pixels,
        labels,
        class_names: (0..n_classes).map(|c| format!("class_{c}")).collect(),
        class_split: vec![Split::Base; n_classes],
    };
    ds.validate()?;
    Ok(ds)
}

/// Re-encode as cifar10-like records (the inverse of decode for that variant).
pub fn encode_cifar10(ds: &LabeledDataset) -> DataResult<Vec<u8>> {
    if ds.image_size != CIFAR_SIZE {
        return Err(DataError::BadParameter(format!(
            "cifar encoding requires {CIFAR_SIZE}px images, got {}",
            ds.image_size
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * (1 + CIFAR_PIXELS));
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend_from_slice(&ds.pixels[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]);
    }
    Ok(out)
}

/// Class-split file: one class index per line, sections opened by `#base`,
/// `#val`, `#novel`. Every class of the dataset must be listed exactly once.
pub fn parse_class_splits(text: &str) -> DataResult<Vec<(u16, Split)>> {
    let mut current: Option<Split> = None;
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "#base" => current = Some(Split::Base),
            "#val" => current = Some(Split::Val),
            "#novel" => current = Some(Split::Novel),
            _ if line.starts_with('#') => {
                return Err(DataError::SplitFile {
                    line: ln + 1,
                    message: format!("unknown section {line}"),
                })
            }
            _ => {
                let class: u16 = line.parse().map_err(|_| DataError::SplitFile {
                    line: ln + 1,
                    message: format!("expected a class index, got {line:?}"),
                })?;
                let split = current.ok_or(DataError::SplitFile {
                    line: ln + 1,
                    message: "class index before any #base/#val/#novel section".into(),
                })?;
                out.push((class, split));
            }
        }
    }
    Ok(out)
}

pub fn apply_class_splits(
    mut ds: LabeledDataset,
    splits: &[(u16, Split)],
) -> DataResult<LabeledDataset> {
    let n = ds.num_classes();
    let mut seen = vec![false; n];
    for &(class, split) in splits {
        if class as usize >= n {
            return Err(DataError::BadParameter(format!(
                "split file references class {class}, dataset has {n}"
            )));
        }
        if seen[class as usize] {
            return Err(DataError::BadParameter(format!(
                "class {class} listed twice in split file"
            )));
        }
        seen[class as usize] = true;
        ds.class_split[class as usize] = split;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(DataError::BadParameter(format!(
            "class {missing} missing from split file"
        )));
    }
    Ok(ds)
}

// ---- augmentation -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    pub flip_p: f64,
    /// Brightness/contrast/saturation jitter strength.
    pub jitter: f64,
    pub blur_p: f64,
    pub out_size: usize,
}

impl AugmentParams {
    /// Mild strengths tuned for 32 px inputs.
    pub fn desk_default(out_size: usize) -> Self {
        AugmentParams {
            crop_scale: (0.55, 1.0),
            flip_p: 0.5,
            jitter: 0.25,
            blur_p: 0.1,
            out_size,
        }
    }

    pub fn identity(out_size: usize) -> Self {
        AugmentParams {
            crop_scale: (1.0, 1.0),
            flip_p: 0.0,
            jitter: 0.0,
            blur_p: 0.0,
            out_size,
        }
    }

    pub fn validate(&self) -> DataResult<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(DataError::BadParameter(format!(
                "crop scale range ({lo}, {hi}) not within (0, 1]"
            )));
        }
        for (name, p) in [("flip_p", self.flip_p), ("blur_p", self.blur_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::BadParameter(format!("{name} {p} not in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Random resized crop -> optional horizontal flip -> color jitter ->
/// optional blur. With all probabilities zero and scale (1,1) this is the
/// identity (up to resize when `out_size` differs).
pub fn augment(image: &Image, params: &AugmentParams, rng: &mut StdRng) -> Image {
    let s = image.size;
    let (lo, hi) = params.crop_scale;

    // crop window: resample until it fits, then fall back to the full image
    let mut crop = (0usize, 0usize, s, s);
    for _ in 0..10 {
        let area = rng.gen_range(lo..=hi) * (s * s) as f64;
        let aspect = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln()).exp();
        let w = (area * aspect).sqrt().round() as usize;
        let h = (area / aspect).sqrt().round() as usize;
        if (1..=s).contains(&w) && (1..=s).contains(&h) {
            if w == s && h == s {
                crop = (0, 0, s, s);
            } else {
                let x0 = rng.gen_range(0..=s - w);
                let y0 = rng.gen_range(0..=s - h);
                crop = (x0, y0, w, h);
            }
            break;
        }
    }
    let mut out = resize_bilinear(image, crop, params.out_size);

    if params.flip_p > 0.0 && rng.gen::<f64>() < params.flip_p {
        out = flip_horizontal(&out);
    }

    if params.jitter > 0.0 {
        let j = params.jitter;
        let brightness = rng.gen_range(1.0 - j..=1.0 + j);
        let contrast = rng.gen_range(1.0 - j..=1.0 + j);
        let saturation = rng.gen_range(1.0 - j..=1.0 + j);
        out = color_jitter(&out, brightness, contrast, saturation);
    }

    if params.blur_p > 0.0 && rng.gen::<f64>() < params.blur_p {
        out = blur3(&out);
    }

    out
}

fn resize_bilinear(src: &Image, crop: (usize, usize, usize, usize), out_size: usize) -> Image {
    let (x0, y0, w, h) = crop;
    if w == out_size && h == out_size {
        // exact copy keeps the identity augmentation bit-exact
        let mut out = Image::zeros(out_size);
        for c in 0..3 {
            for y in 0..out_size {
                for x in 0..out_size {
                    out.set(c, y, x, src.get(c, y0 + y, x0 + x));
                }
            }
        }
        return out;
    }
    let mut out = Image::zeros(out_size);
    let sx = w as f64 / out_size as f64;
    let sy = h as f64 / out_size as f64;
    for c in 0..3 {
        for y in 0..out_size {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
            let y1 = fy.floor() as usize;
            let y2 = (y1 + 1).min(h - 1);
            let wy = fy - y1 as f64;
            for x in 0..out_size {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
                let x1 = fx.floor() as usize;
                let x2 = (x1 + 1).min(w - 1);
                let wx = fx - x1 as f64;
                let p11 = src.get(c, y0 + y1, x0 + x1) as f64;
                let p12 = src.get(c, y0 + y1, x0 + x2) as f64;
                let p21 = src.get(c, y0 + y2, x0 + x1) as f64;
                let p22 = src.get(c, y0 + y2, x0 + x2) as f64;
                let v = p11 * (1.0 - wy) * (1.0 - wx)
                    + p12 * (1.0 - wy) * wx
                    + p21 * wy * (1.0 - wx)
                    + p22 * wy * wx;
                out.set(c, y, x, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn flip_horizontal(src: &Image) -> Image {
    let s = src.size;
    let mut out = Image::zeros(s);
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                out.set(c, y, x, src.get(c, y, s - 1 - x));
            }
        }
    }
    out
}

fn color_jitter(src: &Image, brightness: f64, contrast: f64, saturation: f64) -> Image {
    let s = src.size;
    let mut out = Image::zeros(s);
    for y in 0..s {
        for x in 0..s {
            let r = src.get(0, y, x) as f64 * brightness;
            let g = src.get(1, y, x) as f64 * brightness;
            let b = src.get(2, y, x) as f64 * brightness;
            let gray = 0.299 * r + 0.587 * g + 0.114 * b;
            let (r, g, b) = (
                (r - gray) * saturation + gray,
                (g - gray) * saturation + gray,
                (b - gray) * saturation + gray,
            );
            let mid = 127.5;
            let (r, g, b) = (
                (r - mid) * contrast + mid,
                (g - mid) * contrast + mid,
                (b - mid) * contrast + mid,
            );
            out.set(0, y, x, r.round().clamp(0.0, 255.0) as u8);
            out.set(1, y, x, g.round().clamp(0.0, 255.0) as u8);
            out.set(2, y, x, b.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn blur3(src: &Image) -> Image {
    let s = src.size;
    let mut out = Image::zeros(s);
    let k = [1.0, 2.0, 1.0];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (dy, ky) in k.iter().enumerate() {
                    for (dx, kx) in k.iter().enumerate() {
                        let yy = y as isize + dy as isize - 1;
                        let xx = x as isize + dx as isize - 1;
                        if yy >= 0 && yy < s as isize && xx >= 0 && xx < s as isize {
                            acc += ky * kx * src.get(c, yy as usize, xx as usize) as f64;
                            wsum += ky * kx;
                        }
                    }
                }
                out.set(c, y, x, (acc / wsum).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

// ---- PPM --------------------------------------------------------------------

/// Binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> DataResult<()> {
    if rgb.len() != 3 * width * height {
        return Err(DataError::BadParameter(format!(
            "ppm buffer holds {} bytes, expected {}",
            rgb.len(),
            3 * width * height
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> DataResult<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |offset: usize, message: &str| DataError::Format {
        offset: offset as u64,
        message: message.into(),
    };
    if !bytes.starts_with(b"P6") {
        return Err(err(0, "not a P6 ppm"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| err(start, "non-utf8 header field"))?;
        let value: usize = text.parse().map_err(|_| err(start, "bad header number"))?;
        fields.push(value);
    }
    if fields[2] != 255 {
        return Err(err(pos, "maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    let (w, h) = (fields[0], fields[1]);
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(err(bytes.len(), "pixel data truncated"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}
