//! Dataset containers, preprocessing, reframing, and synthetic generation.
//!
//! Real datasets load from local IDX (MNIST-family) or CIFAR-10 binary
//! files. Because the experiments must also run fully offline, the module
//! ships a procedural 10-class grayscale benchmark ([`synth_glyphs`]): each
//! class is a small family of smooth random "glyph" silhouettes, and samples
//! are morphs between two prototypes with random cyclic shifts, a wide
//! brightness range, and pixel noise. It is hard enough that regularization
//! measurably changes test accuracy, which is what the robustness
//! experiments need.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Images plus integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[n, d]` flat or `[n, c, h, w]` image tensor.
    pub images: Tensor,
    /// `[n]` class indices (stored as f64), or `[n, k]` regression targets.
    pub labels: Tensor,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Tensor, name: &str) -> Result<Self> {
        if images.shape()[0] != labels.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "{} images vs {} labels",
                images.shape()[0],
                labels.shape()[0]
            )));
        }
        Ok(Dataset { images, labels, name: name.to_string() })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let rep = self.images.len() / self.len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        let images = Tensor::from_vec(&shape, self.images.data()[..n * rep].to_vec())?;
        let lrep = self.labels.len() / self.len();
        let mut lshape = self.labels.shape().to_vec();
        lshape[0] = n;
        let labels = Tensor::from_vec(&lshape, self.labels.data()[..n * lrep].to_vec())?;
        Dataset::new(images, labels, &self.name)
    }
}

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Parse a big-endian IDX byte buffer. Image files (magic 0x803, u8,
/// rank 3) come back as `[n, h, w]` floats scaled to [0, 1]; label files
/// (magic 0x801) as a rank-1 tensor of class indices.
pub fn load_idx(bytes: &[u8]) -> Result<Tensor> {
    let read_u32 = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format("idx: truncated header".into()))
    };
    let magic = read_u32(0)?;
    match magic {
        IDX_MAGIC_LABELS => {
            let n = read_u32(4)? as usize;
            let payload = bytes
                .get(8..8 + n)
                .ok_or_else(|| Error::Format("idx: truncated label payload".into()))?;
            if bytes.len() != 8 + n {
                return Err(Error::Format("idx: trailing bytes after label payload".into()));
            }
            Ok(Tensor::from_slice(&payload.iter().map(|b| f64::from(*b)).collect::<Vec<_>>()))
        }
        IDX_MAGIC_IMAGES => {
            let n = read_u32(4)? as usize;
            let h = read_u32(8)? as usize;
            let w = read_u32(12)? as usize;
            let total = n
                .checked_mul(h)
                .and_then(|v| v.checked_mul(w))
                .ok_or_else(|| Error::Format("idx: dimension overflow".into()))?;
            let payload = bytes
                .get(16..16 + total)
                .ok_or_else(|| Error::Format("idx: truncated image payload".into()))?;
            if bytes.len() != 16 + total {
                return Err(Error::Format("idx: trailing bytes after image payload".into()));
            }
            Tensor::from_vec(
                &[n, h, w],
                payload.iter().map(|b| f64::from(*b) / 255.0).collect(),
            )
        }
        other => Err(Error::Format(format!("idx: unsupported magic 0x{other:08x}"))),
    }
}

/// Inverse of [`load_idx`]: serialize a `[n]` label tensor or `[n, h, w]`
/// image tensor (values in [0,1], multiples of 1/255) back to IDX bytes.
pub fn save_idx(t: &Tensor) -> Result<Vec<u8>> {
    match t.rank() {
        1 => {
            let mut out = Vec::with_capacity(8 + t.len());
            out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
            out.extend_from_slice(&(t.len() as u32).to_be_bytes());
            for v in t.data() {
                out.push(*v as u8);
            }
            Ok(out)
        }
        3 => {
            let mut out = Vec::with_capacity(16 + t.len());
            out.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
            for dim in t.shape() {
                out.extend_from_slice(&(*dim as u32).to_be_bytes());
            }
            for v in t.data() {
                out.push((v * 255.0).round() as u8);
            }
            Ok(out)
        }
        r => Err(Error::Format(format!("idx: cannot serialize rank-{r} tensor"))),
    }
}

/// Parse one CIFAR-10 binary batch (3073-byte records: label + 3×32×32
/// pixels). Images come back `[n, 3, 32, 32]` in [0, 1].
pub fn load_cifar10_batch(bytes: &[u8]) -> Result<Dataset> {
    const REC: usize = 3073;
    if bytes.is_empty() || bytes.len() % REC != 0 {
        return Err(Error::Format(format!(
            "cifar: payload of {} bytes is not a multiple of {REC}",
            bytes.len()
        )));
    }
    let n = bytes.len() / REC;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * 3072);
    for r in 0..n {
        let rec = &bytes[r * REC..(r + 1) * REC];
        labels.push(f64::from(rec[0]));
        images.extend(rec[1..].iter().map(|b| f64::from(*b) / 255.0));
    }
    Dataset::new(
        Tensor::from_vec(&[n, 3, 32, 32], images)?,
        Tensor::from_slice(&labels),
        "cifar10",
    )
}

/// Whether statistics are pooled over all pixels or kept per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeScope {
    Global,
    PerPixel,
}

/// Whether the divisor is the standard deviation (conventional) or the
/// literal variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeScale {
    Std,
    Variance,
}

/// Train-set statistics for standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub scope: StandardizeScope,
    pub scale_mode: StandardizeScale,
    /// One entry in global scope, one per pixel otherwise.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Set when a degenerate (zero-variance) feature forced scale = 1.
    pub degenerate: bool,
}

/// Compute standardization statistics on the training set only.
pub fn standardize_fit(
    train: &Dataset,
    scope: StandardizeScope,
    scale_mode: StandardizeScale,
) -> Result<PreprocessStats> {
    if train.is_empty() {
        return Err(Error::Invalid("standardize_fit: empty training set".into()));
    }
    let n = train.len();
    let rep = train.images.len() / n;
    let data = train.images.data();
    let (mean, var): (Vec<f64>, Vec<f64>) = match scope {
        StandardizeScope::Global => {
            let count = (n * rep) as f64;
            let m = data.iter().sum::<f64>() / count;
            let v = data.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            (vec![m], vec![v])
        }
        StandardizeScope::PerPixel => {
            let mut m = vec![0.0; rep];
            let mut v = vec![0.0; rep];
            for s in 0..n {
                for (j, x) in data[s * rep..(s + 1) * rep].iter().enumerate() {
                    m[j] += x;
                }
            }
            for mj in &mut m {
                *mj /= n as f64;
            }
            for s in 0..n {
                for (j, x) in data[s * rep..(s + 1) * rep].iter().enumerate() {
                    let d = x - m[j];
                    v[j] += d * d;
                }
            }
            for vj in &mut v {
                *vj /= n as f64;
            }
            (m, v)
        }
    };
    let mut degenerate = false;
    let scale = var
        .iter()
        .map(|v| {
            let s = match scale_mode {
                StandardizeScale::Std => v.sqrt(),
                StandardizeScale::Variance => *v,
            };
            if s > 0.0 {
                s
            } else {
                degenerate = true;
                1.0
            }
        })
        .collect();
    Ok(PreprocessStats { scope, scale_mode, mean, scale, degenerate })
}

/// Apply train-set statistics to any split.
pub fn standardize_apply(stats: &PreprocessStats, data: &Dataset) -> Result<Dataset> {
    let n = data.len();
    let rep = data.images.len() / n.max(1);
    let mut images = data.images.clone();
    match stats.scope {
        StandardizeScope::Global => {
            let (m, s) = (stats.mean[0], stats.scale[0]);
            for v in images.data_mut() {
                *v = (*v - m) / s;
            }
        }
        StandardizeScope::PerPixel => {
            if stats.mean.len() != rep {
                return Err(Error::ShapeMismatch(format!(
                    "standardize: stats over {} features, data has {rep}",
                    stats.mean.len()
                )));
            }
            for smp in 0..n {
                for (j, v) in images.data_mut()[smp * rep..(smp + 1) * rep].iter_mut().enumerate()
                {
                    *v = (*v - stats.mean[j]) / stats.scale[j];
                }
            }
        }
    }
    Dataset::new(images, data.labels.clone(), &data.name)
}

/// Reframe a grayscale image into the 28×28 MNIST canvas: aspect-preserving
/// bilinear resize so the larger side is 20, centered on zeros with offset
/// `floor((28 − side)/2)`.
pub fn usps_to_mnist_frame(img: &Tensor) -> Result<Tensor> {
    if img.rank() != 2 || img.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "usps_to_mnist_frame expects a nonempty [h, w] image, got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (nh, nw) = if h >= w {
        (20, ((w as f64 * 20.0 / h as f64).round() as usize).max(1))
    } else {
        ((((h as f64) * 20.0 / w as f64).round() as usize).max(1), 20)
    };
    let resized = bilinear_resize(img, nh, nw);
    let mut canvas = Tensor::zeros(&[28, 28]);
    let (oy, ox) = ((28 - nh) / 2, (28 - nw) / 2);
    for y in 0..nh {
        for x in 0..nw {
            canvas.data_mut()[(oy + y) * 28 + ox + x] = resized.data()[y * nw + x];
        }
    }
    Ok(canvas)
}

/// Bilinear resample of a `[h, w]` image to `[nh, nw]` using corner-aligned
/// sample positions (constant images stay constant).
pub fn bilinear_resize(img: &Tensor, nh: usize, nw: usize) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Tensor::zeros(&[nh, nw]);
    for y in 0..nh {
        let fy = if nh > 1 { y as f64 * (h - 1) as f64 / (nh - 1) as f64 } else { 0.0 };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = if nw > 1 { x as f64 * (w - 1) as f64 / (nw - 1) as f64 } else { 0.0 };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let a = img.data()[y0 * w + x0];
            let b = img.data()[y0 * w + x1];
            let c = img.data()[y1 * w + x0];
            let d = img.data()[y1 * w + x1];
            out.data_mut()[y * nw + x] =
                a * (1.0 - ty) * (1.0 - tx) + b * (1.0 - ty) * tx + c * ty * (1.0 - tx) + d * ty * tx;
        }
    }
    out
}

/// Exact linear regression data: `x ~ N(0, σx²)`, `y = M·x`.
pub fn synth_linear(n: usize, m_slope: f64, sigma_x: f64, rng: &mut RngStream) -> Result<Dataset> {
    if !(sigma_x > 0.0) {
        return Err(Error::Config(format!("sigma_x must be > 0, got {sigma_x}")));
    }
    let xs: Vec<f64> = (0..n).map(|_| sigma_x * rng.next_standard_normal()).collect();
    let ys: Vec<f64> = xs.iter().map(|x| m_slope * x).collect();
    Dataset::new(
        Tensor::from_vec(&[n, 1], xs)?,
        Tensor::from_vec(&[n, 1], ys)?,
        "synth-linear",
    )
}

/// A smooth random field: a `g×g` standard-normal grid bilinearly upsampled
/// to `h×w`.
fn smooth_field(rng: &mut RngStream, h: usize, w: usize, g: usize) -> Tensor {
    let mut coarse = Tensor::zeros(&[g, g]);
    for v in coarse.data_mut() {
        *v = rng.next_standard_normal();
    }
    bilinear_resize(&coarse, h, w)
}

/// Linear-interpolation quantile of a sample (matching the conventional
/// definition used by numerical libraries).
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Tuning knobs for the procedural glyph benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphConfig {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Prototype silhouettes per class.
    pub protos: usize,
    /// Coarse grid size of the smooth fields.
    pub grid: usize,
    /// Mask quantile: pixels above this quantile of the field are on.
    pub mask_quantile: f64,
    /// Max cyclic shift (pixels, each axis, uniform in [-shift, shift]).
    pub shift: usize,
    /// Brightness is `intensity_min + intensity_range·U[0,1)`.
    pub intensity_min: f64,
    pub intensity_range: f64,
    /// Std of the additive per-pixel noise.
    pub pixel_noise: f64,
}

impl GlyphConfig {
    /// The 28×28 variant used by wide single-hidden-layer experiments.
    pub fn glyphs28() -> Self {
        GlyphConfig {
            height: 28,
            width: 28,
            n_classes: 10,
            protos: 8,
            grid: 12,
            mask_quantile: 0.75,
            shift: 6,
            intensity_min: 0.06,
            intensity_range: 1.2,
            pixel_noise: 0.05,
        }
    }

    /// The 20×20 variant used by the robustness experiments.
    pub fn glyphs20() -> Self {
        GlyphConfig { height: 20, width: 20, grid: 10, shift: 5, ..GlyphConfig::glyphs28() }
    }
}

/// Generate the procedural glyph benchmark: `n_train` + `n_test` flat
/// grayscale images with balanced random classes.
///
/// Per class, `protos` binary silhouettes are cut from correlated smooth
/// fields; each sample linearly morphs two prototypes of its class, shifts
/// cyclically, scales by a (mostly faint) random brightness, and adds pixel
/// noise. Train and test come from the same stream, so statistics match.
pub fn synth_glyphs(
    cfg: &GlyphConfig,
    n_train: usize,
    n_test: usize,
    rng: &mut RngStream,
) -> Result<(Dataset, Dataset)> {
    let (h, w) = (cfg.height, cfg.width);
    let d = h * w;
    let mut masks: Vec<Vec<Tensor>> = Vec::with_capacity(cfg.n_classes);
    for _ in 0..cfg.n_classes {
        let base = smooth_field(rng, h, w, cfg.grid);
        let mut class_masks = Vec::with_capacity(cfg.protos);
        for _ in 0..cfg.protos {
            let mut f = smooth_field(rng, h, w, cfg.grid);
            f.scale(0.8);
            f.axpy(1.0, &base)?;
            let thr = quantile(f.data(), cfg.mask_quantile);
            let mut m = Tensor::zeros(&[h, w]);
            for (mv, fv) in m.data_mut().iter_mut().zip(f.data()) {
                *mv = if *fv > thr { 1.0 } else { 0.0 };
            }
            class_masks.push(m);
        }
        masks.push(class_masks);
    }

    let gen = |n: usize, name: &str, rng: &mut RngStream| -> Result<Dataset> {
        let mut images = vec![0.0; n * d];
        let mut labels = vec![0.0; n];
        for i in 0..n {
            let class = rng.next_index(cfg.n_classes);
            labels[i] = class as f64;
            let p0 = rng.next_index(cfg.protos);
            let p1 = rng.next_index(cfg.protos);
            let t = rng.next_uniform();
            let span = 2 * cfg.shift + 1;
            let dy = rng.next_index(span) as isize - cfg.shift as isize;
            let dx = rng.next_index(span) as isize - cfg.shift as isize;
            let intensity = cfg.intensity_min + cfg.intensity_range * rng.next_uniform();
            let m0 = &masks[class][p0];
            let m1 = &masks[class][p1];
            let out = &mut images[i * d..(i + 1) * d];
            for y in 0..h {
                for x in 0..w {
                    // Cyclic shift by (dy, dx): read from the wrapped source.
                    let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                    let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                    let m = (1.0 - t) * m0.data()[sy * w + sx] + t * m1.data()[sy * w + sx];
                    out[y * w + x] =
                        m * intensity + cfg.pixel_noise * rng.next_standard_normal();
                }
            }
        }
        Dataset::new(Tensor::from_vec(&[n, d], images)?, Tensor::from_slice(&labels), name)
    };

    let train = gen(n_train, "glyphs-train", rng)?;
    let test = gen(n_test, "glyphs-test", rng)?;
    Ok((train, test))
}
