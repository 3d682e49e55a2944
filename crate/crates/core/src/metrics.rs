//! PSNR and SSIM on 8-bit RGB images.
//!
//! Both metrics are computed per channel and then averaged over the three
//! channels. SSIM uses an 11×11 Gaussian window (σ = 1.5) over every window
//! that fits entirely inside the image.

use serde::Serialize;

use crate::error::{shape_err, Error, Result};

pub const MAX_PIXEL: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * MAX_PIXEL) * (0.01 * MAX_PIXEL);
pub const SSIM_C2: f64 = (0.03 * MAX_PIXEL) * (0.03 * MAX_PIXEL);

/// Interleaved RGB, row-major (`data[(y·width + x)·3 + c]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(shape_err!("{width}x{height} RGB image needs {} bytes, got {}", width * height * 3, data.len()));
        }
        Ok(ImageU8 { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        ImageU8 { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        ImageU8 { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn flip_horizontal(&self) -> Self {
        ImageU8::from_fn(self.width, self.height, |x, y, c| self.get(self.width - 1 - x, y, c))
    }

    /// Sub-image with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(ImageU8::from_fn(width, height, |x, y, c| self.get(x0 + x, y0 + y, c)))
    }

    fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect()
    }
}

fn check_same(x: &ImageU8, y: &ImageU8) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(shape_err!("images of {}x{} and {}x{}", x.width, x.height, y.width, y.height));
    }
    Ok(())
}

/// Mean squared error per channel, averaged over channels.
pub fn image_mse(x: &ImageU8, y: &ImageU8) -> Result<f64> {
    check_same(x, y)?;
    let n = (x.width * x.height) as f64;
    let mut total = 0.0;
    for c in 0..3 {
        let s: f64 = x.channel(c).iter().zip(y.channel(c)).map(|(a, b)| (a - b) * (a - b)).sum();
        total += s / n;
    }
    Ok(total / 3.0)
}

/// `10·log10(255² / mse)`; identical images give `+∞`.
pub fn psnr(x: &ImageU8, y: &ImageU8) -> Result<f64> {
    let mse = image_mse(x, y)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (MAX_PIXEL * MAX_PIXEL / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of a `w×h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| taps[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, taps: &[f64]) -> f64 {
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, taps);
    let mu_b = filter_valid(b, w, h, taps);
    let e_aa = filter_valid(&prod(a, a), w, h, taps);
    let e_bb = filter_valid(&prod(b, b), w, h, taps);
    let e_ab = filter_valid(&prod(a, b), w, h, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / n as f64
}

/// Mean SSIM over all valid 11×11 windows and the three channels.
pub fn ssim(x: &ImageU8, y: &ImageU8) -> Result<f64> {
    check_same(x, y)?;
    if x.width < SSIM_WINDOW || x.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            x.width, x.height
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let total: f64 = (0..3).map(|c| ssim_channel(&x.channel(c), &y.channel(c), x.width, x.height, &taps)).sum();
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub name: String,
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus dataset means.
///
/// `mean_psnr` averages finite rows only; rows at `+∞` are counted in
/// `inf_psnr_count`. If every row is infinite the mean is `+∞` too.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    #[serde(serialize_with = "ser_psnr")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub inf_psnr_count: usize,
}

fn ser_psnr<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_psnr(*v))
    }
}

pub fn format_psnr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("metric report over zero images".into()));
        }
        let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|v| v.is_finite()).collect();
        let inf_psnr_count = rows.len() - finite.len();
        let mean_psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
        Ok(MetricReport { rows, mean_psnr, mean_ssim, inf_psnr_count })
    }

    /// Scores `(name, prediction, reference)` triples.
    pub fn evaluate<'a>(items: impl IntoIterator<Item = (String, &'a ImageU8, &'a ImageU8)>) -> Result<Self> {
        let rows = items
            .into_iter()
            .map(|(name, p, r)| Ok(MetricRow { name, psnr: psnr(p, r)?, ssim: ssim(p, r)? }))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("filename,psnr,ssim\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.name, format_psnr(r.psnr), r.ssim));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
