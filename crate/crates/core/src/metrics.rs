//! PSNR, SSIM and their affine-aligned ("CC") variants.
//!
//! Identical images give a PSNR of `f64::INFINITY`. JSON cannot encode that
//! value, so reports write it as the string `"inf"`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::guidance::luminance;
use crate::image::Image;
use crate::Rgb;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Smallest image side accepted by [`ssim`].
pub const SSIM_MIN_SIDE: usize = 8;

const DEGENERATE_VARIANCE: f64 = 1e-12;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

/// Per-channel `aligned = scale · pred + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAlignment {
    pub scale: Rgb,
    pub offset: Rgb,
}

impl ChannelAlignment {
    pub const IDENTITY: Self = Self {
        scale: [1.0; 3],
        offset: [0.0; 3],
    };

    pub fn apply(&self, c: Rgb) -> Rgb {
        [0, 1, 2].map(|ch| self.scale[ch] * c[ch] + self.offset[ch])
    }
}

/// Neumaier summation; a constant channel sums to its exact multiple.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Least-squares per-channel scale and offset taking `pred` onto `reference`.
pub fn affine_align(pred: &Image, reference: &Image) -> Result<(Image, ChannelAlignment)> {
    pred.ensure_same_shape(reference)?;
    let n = pred.pixel_count() as f64;
    let mut align = ChannelAlignment::IDENTITY;
    for ch in 0..3 {
        let xs = pred.data().iter().skip(ch).step_by(3);
        let ys = reference.data().iter().skip(ch).step_by(3);
        let mx = compensated_sum(xs.clone().copied()) / n;
        let my = compensated_sum(ys.clone().copied()) / n;
        let (mut vxx, mut vxy) = (0.0, 0.0);
        for (x, y) in xs.zip(ys) {
            vxx += (x - mx) * (x - mx);
            vxy += (x - mx) * (y - my);
        }
        vxx /= n;
        vxy /= n;
        if vxx < DEGENERATE_VARIANCE {
            align.offset[ch] = my - mx;
        } else {
            align.scale[ch] = vxy / vxx;
            align.offset[ch] = my - align.scale[ch] * mx;
        }
    }
    Ok((pred.map(|_, _, c| align.apply(c)), align))
}

/// Normalized 1D Gaussian of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window length used for an image of the given shape: 11, or the largest odd
/// length that fits for images smaller than that.
pub fn ssim_window_size(width: usize, height: usize) -> usize {
    let side = width.min(height).min(SSIM_WINDOW);
    if side % 2 == 0 {
        side - 1
    } else {
        side
    }
}

fn luma_plane(img: &Image) -> Vec<f64> {
    img.pixels().map(luminance).collect()
}

fn check_ssim_input(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_shape(b)?;
    if a.width() < SSIM_MIN_SIDE || a.height() < SSIM_MIN_SIDE {
        return Err(Error::InvalidDimensions(format!(
            "SSIM needs at least {SSIM_MIN_SIDE}x{SSIM_MIN_SIDE}, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Valid-mode separable filter of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid window positions of the luminance planes.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_ssim_input(a, b)?;
    let (w, h) = (a.width(), a.height());
    let k = gaussian_window(ssim_window_size(w, h), SSIM_SIGMA);
    let la = luma_plane(a);
    let lb = luma_plane(b);
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(&la, w, h, &k);
    let mu_b = filter_valid(&lb, w, h, &k);
    let e_aa = filter_valid(&sq(&la, &la), w, h, &k);
    let e_bb = filter_valid(&sq(&lb, &lb), w, h, &k);
    let e_ab = filter_valid(&sq(&la, &lb), w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

fn ser_sentinel<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_sentinel<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected metric value {s:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "ser_sentinel", deserialize_with = "de_sentinel")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_sentinel", deserialize_with = "de_sentinel")]
    pub cc_psnr: f64,
    pub cc_ssim: f64,
    pub alignment: ChannelAlignment,
}

/// All four metrics of `pred` against `reference`. With `quantize` both
/// images are rounded to 8 bits first.
pub fn evaluate(pred: &Image, reference: &Image, quantize: bool) -> Result<MetricsReport> {
    let (pred, reference) = if quantize {
        (pred.quantized(), reference.quantized())
    } else {
        (pred.clone(), reference.clone())
    };
    let (aligned, alignment) = affine_align(&pred, &reference)?;
    Ok(MetricsReport {
        psnr: psnr(&pred, &reference)?,
        ssim: ssim(&pred, &reference)?,
        cc_psnr: psnr(&aligned, &reference)?,
        cc_ssim: ssim(&aligned, &reference)?,
        alignment,
    })
}

pub const METRIC_COLUMNS: [&str; 4] = ["psnr", "ssim", "cc_psnr", "cc_ssim"];

/// Named rows of metrics, written in the layout of a results table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<(String, MetricsReport)>,
}

#[derive(Serialize)]
struct TableJson<'a> {
    views: Vec<NamedReport<'a>>,
    mean: MeanRow,
}

#[derive(Serialize)]
struct NamedReport<'a> {
    name: &'a str,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanRow {
    #[serde(serialize_with = "ser_sentinel")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_sentinel")]
    pub cc_psnr: f64,
    pub cc_ssim: f64,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl MetricsTable {
    pub fn push(&mut self, name: impl Into<String>, report: MetricsReport) {
        self.rows.push((name.into(), report));
    }

    pub fn mean(&self) -> MeanRow {
        let n = self.rows.len().max(1) as f64;
        let avg = |f: fn(&MetricsReport) -> f64| self.rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
        MeanRow {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            cc_psnr: avg(|r| r.cc_psnr),
            cc_ssim: avg(|r| r.cc_ssim),
        }
    }

    /// CSV with a `name` key column followed by [`METRIC_COLUMNS`]; the last
    /// row is the mean.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["name"];
        header.extend(METRIC_COLUMNS);
        out.write_record(&header)?;
        let mut row = |name: &str, m: [f64; 4]| out.write_record(std::iter::once(name.to_string()).chain(m.map(fmt_metric)));
        for (name, r) in &self.rows {
            row(name, [r.psnr, r.ssim, r.cc_psnr, r.cc_ssim])?;
        }
        let m = self.mean();
        row("mean", [m.psnr, m.ssim, m.cc_psnr, m.cc_ssim])?;
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TableJson {
            views: self.rows.iter().map(|(name, report)| NamedReport { name, report }).collect(),
            mean: self.mean(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn save(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(json_path, self.to_json()?)?;
        Ok(())
    }
}
