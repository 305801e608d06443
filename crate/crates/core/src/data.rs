//! Image I/O (binary PGM/PPM), synthetic Gaussian degradation, patch
//! sampling with flip augmentation, file manifests, and a procedural clean
//! image generator for hermetic experiments.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// An image with values in `[0, 1]`, one or three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Planar `[c][h][w]` samples.
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::dim(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "{channels}x{height}x{width} image cannot hold {} samples",
                data.len()
            )));
        }
        Ok(ImageBuffer {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("image shape")
    }

    /// Clamp to `[0, 1]` and wrap a `[1, c, h, w]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 {
            return Err(Error::dim(format!("expected one image, got batch of {n}")));
        }
        ImageBuffer::new(
            c,
            h,
            w,
            t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parse a binary P5 (gray) or P6 (RGB) file with maxval 255.
pub fn parse_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(cur.err("file too short for a magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(cur.err(format!(
                "unsupported magic {:?}; expected P5 or P6",
                String::from_utf8_lossy(other)
            )))
        }
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("maxval {maxval} unsupported; only 8-bit (255) files are accepted"),
        });
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected a single whitespace byte before the raster"));
    }
    cur.pos += 1;
    let need = width * height * channels;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!(
                "raster truncated: need {need} bytes, found {}",
                raster.len()
            ),
        });
    }
    // interleaved -> planar
    let mut data = vec![0.0f32; need];
    for (i, &b) in raster[..need].iter().enumerate() {
        let (pix, ch) = (i / channels, i % channels);
        data[ch * width * height + pix] = b as f32 / 255.0;
    }
    ImageBuffer::new(channels, height, width, data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}

/// Encode as binary PGM/PPM, rounding to 8 bits.
pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.width * img.height;
    for pix in 0..plane {
        for ch in 0..img.channels {
            let v = img.data[ch * plane + pix].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive white Gaussian noise, `sigma` on the 0-255 scale.
    Gaussian { sigma: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn gaussian(sigma: f32, seed: u64) -> Self {
        DegradationSpec {
            kind: Degradation::Gaussian { sigma },
            seed,
        }
    }
}

/// Standard normal draws by the Box-Muller transform.
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        NormalStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1: f64 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Noise samples before clamping, for statistical checks.
pub fn gaussian_noise(len: usize, sigma: f32, seed: u64) -> Vec<f32> {
    let mut s = NormalStream::new(seed);
    let std = sigma as f64 / 255.0;
    (0..len).map(|_| (s.sample() * std) as f32).collect()
}

/// Degrade an image; the result is clamped to `[0, 1]`.
pub fn degrade(img: &ImageBuffer, spec: &DegradationSpec) -> Result<ImageBuffer> {
    match spec.kind {
        Degradation::Gaussian { sigma } => add_gaussian_noise(img, sigma, spec.seed),
    }
}

pub fn add_gaussian_noise(img: &ImageBuffer, sigma: f32, seed: u64) -> Result<ImageBuffer> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::config(format!("noise sigma {sigma} must be > 0")));
    }
    let noise = gaussian_noise(img.data.len(), sigma, seed);
    let data = img
        .data
        .iter()
        .zip(noise)
        .map(|(&v, n)| (v + n).clamp(0.0, 1.0))
        .collect();
    ImageBuffer::new(img.channels, img.height, img.width, data)
}

/// A clean patch and its degraded counterpart, each `[1, c, p, p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub clean: Tensor,
    pub noisy: Tensor,
}

fn crop(t: &Tensor, y: usize, x: usize, size: usize) -> Tensor {
    let [_, c, _, _] = t.shape();
    Tensor::from_fn([1, c, size, size], |[_, ch, h, w]| {
        t.at([0, ch, y + h, x + w])
    })
}

/// Uniformly placed `count` crops of side `patch`, cut at the same place from
/// both images.
pub fn sample_patches(
    clean: &ImageBuffer,
    noisy: &ImageBuffer,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    if clean.channels != noisy.channels
        || clean.height != noisy.height
        || clean.width != noisy.width
    {
        return Err(Error::dim("clean and degraded images differ in shape"));
    }
    if patch == 0 || patch > clean.height || patch > clean.width {
        return Err(Error::config(format!(
            "patch {patch} does not fit a {}x{} image",
            clean.height, clean.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ct, nt) = (clean.to_tensor(), noisy.to_tensor());
    Ok((0..count)
        .map(|_| {
            let y = rng.random_range(0..=clean.height - patch);
            let x = rng.random_range(0..=clean.width - patch);
            PatchPair {
                clean: crop(&ct, y, x, patch),
                noisy: crop(&nt, y, x, patch),
            }
        })
        .collect())
}

/// Flip the pair horizontally and vertically, each with probability 1/2,
/// identically for both members.
pub fn augment_flip(pair: &PatchPair, rng: &mut impl Rng) -> PatchPair {
    let (hflip, vflip) = (rng.random_bool(0.5), rng.random_bool(0.5));
    flip_pair(pair, hflip, vflip)
}

pub fn flip_pair(pair: &PatchPair, horizontal: bool, vertical: bool) -> PatchPair {
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        if horizontal {
            out = tensor::flip(&out, 3);
        }
        if vertical {
            out = tensor::flip(&out, 2);
        }
        out
    };
    PatchPair {
        clean: apply(&pair.clean),
        noisy: apply(&pair.noisy),
    }
}

/// Plain-text list of image paths, one per line; `#` starts a comment.
/// Relative paths resolve against the manifest's directory.
pub fn parse_manifest(text: &str, base: &Path) -> Vec<PathBuf> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_manifest(
        &text,
        path.parent().unwrap_or(Path::new(".")),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub patch_size: usize,
    pub patches_per_image: usize,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.train.iter().find(|p| self.val.contains(p)) {
            return Err(Error::config(format!(
                "{} appears in both train and validation lists",
                p.display()
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::config("patch size must be >= 1"));
        }
        Ok(())
    }
}

/// Procedural piecewise-smooth test image: a tilted gradient, a few soft
/// rectangles and discs, and low-frequency ripples.
pub fn synthetic_image(channels: usize, height: usize, width: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f32, width as f32);
    let gx: f32 = rng.random_range(-0.4..0.4);
    let gy: f32 = rng.random_range(-0.4..0.4);
    let base: f32 = rng.random_range(0.3..0.7);
    let mut shapes = Vec::new();
    for _ in 0..rng.random_range(3..7) {
        let disc = rng.random_bool(0.5);
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        let ry = rng.random_range(0.08 * h..0.35 * h);
        let rx = rng.random_range(0.08 * w..0.35 * w);
        let tint: Vec<f32> = (0..channels)
            .map(|_| rng.random_range(-0.45..0.45))
            .collect();
        shapes.push((disc, cy, cx, ry, rx, tint));
    }
    let ripple_a: f32 = rng.random_range(0.0..0.08);
    let fy: f32 = rng.random_range(0.5..3.0) * std::f32::consts::TAU / h;
    let fx: f32 = rng.random_range(0.5..3.0) * std::f32::consts::TAU / w;
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let mut data = vec![0.0f32; channels * height * width];
    for ch in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let (yf, xf) = (y as f32, x as f32);
                let mut v = base + gx * (xf / w - 0.5) + gy * (yf / h - 0.5);
                v += ripple_a * (fy * yf + phase).sin() * (fx * xf).cos();
                for (disc, cy, cx, ry, rx, tint) in &shapes {
                    let (dy, dx) = ((yf - cy) / ry, (xf - cx) / rx);
                    let inside = if *disc {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        v += tint[ch];
                    }
                }
                data[(ch * height + y) * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(channels, height, width, data).expect("synthetic image shape")
}

/// Training and validation patches.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
}

impl Dataset {
    /// Mean PSNR of the degraded validation inputs against their clean targets.
    pub fn input_psnr(&self) -> Result<f64> {
        crate::distill::mean(
            self.val
                .iter()
                .map(|p| crate::metrics::psnr(&p.noisy, &p.clean)),
        )
    }

    /// Cut patches from clean images degraded with Gaussian noise of `sigma`
    /// (0-255 scale). Image `i` uses noise seed `seed + i`.
    pub fn from_images(
        train: &[ImageBuffer],
        val: &[ImageBuffer],
        sigma: f32,
        patch: usize,
        patches_per_image: usize,
        seed: u64,
    ) -> Result<Dataset> {
        let cut = |imgs: &[ImageBuffer], base: u64, per: usize| -> Result<Vec<PatchPair>> {
            let mut out = Vec::new();
            for (i, img) in imgs.iter().enumerate() {
                let s = base.wrapping_add(i as u64);
                let noisy = add_gaussian_noise(img, sigma, s)?;
                out.extend(sample_patches(
                    img,
                    &noisy,
                    patch,
                    per,
                    s ^ 0x9e37_79b9_7f4a_7c15,
                )?);
            }
            Ok(out)
        };
        Ok(Dataset {
            train: cut(train, seed, patches_per_image)?,
            val: cut(val, seed.wrapping_add(1 << 32), patches_per_image.min(4))?,
        })
    }
}

/// Shape of a procedurally generated dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub patch: usize,
    pub patches_per_image: usize,
    pub sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_images: 25,
            val_images: 4,
            image_size: 64,
            patch: 32,
            patches_per_image: 8,
            sigma: 15.0,
            seed: 0,
        }
    }
}

/// Gray synthetic images split into disjoint training and validation sets.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let n = spec.image_size;
    let imgs = |count: usize, base: u64| -> Vec<ImageBuffer> {
        (0..count)
            .map(|i| synthetic_image(1, n, n, base + i as u64))
            .collect()
    };
    let train = imgs(spec.train_images, spec.seed.wrapping_mul(1_000_003));
    let val = imgs(
        spec.val_images,
        spec.seed.wrapping_mul(1_000_003).wrapping_add(500_000),
    );
    Dataset::from_images(
        &train,
        &val,
        spec.sigma,
        spec.patch,
        spec.patches_per_image,
        spec.seed,
    )
}
