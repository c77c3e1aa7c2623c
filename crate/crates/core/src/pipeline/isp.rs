//! Per-view camera processing used to corrupt clean renders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::Rgb;

/// Image-space shape of a local gain field. Coordinates are `(u, v)` in
/// `[0, 1]²` with `u` along the image width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum GainField {
    /// Inner side is where `(uv − point) · normal < 0`.
    HalfPlane { point: [f64; 2], normal: [f64; 2] },
    /// Inner side is the disk of `radius` around `center`.
    Radial { center: [f64; 2], radius: f64 },
}

impl GainField {
    fn signed_distance(&self, u: f64, v: f64) -> f64 {
        match *self {
            GainField::HalfPlane { point, normal } => {
                let n = (normal[0] * normal[0] + normal[1] * normal[1]).sqrt();
                ((u - point[0]) * normal[0] + (v - point[1]) * normal[1]) / n
            }
            GainField::Radial { center, radius } => ((u - center[0]).powi(2) + (v - center[1]).powi(2)).sqrt() - radius,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum IspOp {
    ExposureGain { gain: f64 },
    /// `x ↦ sign(x)·|x|^γ`.
    Gamma { gamma: f64 },
    WhiteBalance { gains: Rgb },
    /// `x ↦ x + s·x(1 − x)(2x − 1)`, fixing 0, ½ and 1.
    SCurve { strength: f64 },
    /// Gain blended from `inner_gain` to `outer_gain` by a logistic of the
    /// signed distance over `falloff`.
    LocalToneMap {
        field: GainField,
        inner_gain: f64,
        outer_gain: f64,
        falloff: f64,
    },
}

impl IspOp {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} must be positive and finite")));
        let pos = |x: f64| x > 0.0 && x.is_finite();
        match *self {
            IspOp::ExposureGain { gain } if !pos(gain) => bad("exposure gain"),
            IspOp::Gamma { gamma } if !pos(gamma) => bad("gamma"),
            IspOp::WhiteBalance { gains } if !gains.iter().all(|&g| pos(g)) => bad("white balance gains"),
            IspOp::SCurve { strength } if !strength.is_finite() => bad("s-curve strength"),
            IspOp::LocalToneMap {
                inner_gain,
                outer_gain,
                falloff,
                field,
            } => {
                if !pos(inner_gain) || !pos(outer_gain) {
                    return bad("tone map gains");
                }
                if !pos(falloff) {
                    return bad("tone map falloff");
                }
                match field {
                    GainField::HalfPlane { normal, .. } if normal == [0.0, 0.0] => bad("half-plane normal"),
                    GainField::Radial { radius, .. } if !pos(radius) => bad("radial radius"),
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    /// Applies the op to color `c` at image coordinate `(u, v)`.
    pub fn apply(&self, c: Rgb, u: f64, v: f64) -> Rgb {
        match *self {
            IspOp::ExposureGain { gain } => c.map(|x| gain * x),
            IspOp::Gamma { gamma } => c.map(|x| x.signum() * x.abs().powf(gamma)),
            IspOp::WhiteBalance { gains } => [gains[0] * c[0], gains[1] * c[1], gains[2] * c[2]],
            IspOp::SCurve { strength } => c.map(|x| x + strength * x * (1.0 - x) * (2.0 * x - 1.0)),
            IspOp::LocalToneMap {
                field,
                inner_gain,
                outer_gain,
                falloff,
            } => {
                let t = 1.0 / (1.0 + (-field.signed_distance(u, v) / falloff).exp());
                let gain = inner_gain + (outer_gain - inner_gain) * t;
                c.map(|x| gain * x)
            }
        }
    }
}

/// Ordered ops applied to a whole image.
pub fn apply_chain(image: &Image, chain: &[IspOp], clamp: bool) -> Image {
    let (w, h) = (image.width(), image.height());
    image.map(|x, y, mut c| {
        let u = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
        let v = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        for op in chain {
            c = op.apply(c, u, v);
        }
        if clamp {
            c = c.map(|x| x.clamp(0.0, 1.0));
        }
        c
    })
}

/// Closed interval `[lo, hi]` sampled uniformly.
pub type Range = [f64; 2];

fn sample(rng: &mut impl Rng, r: Range) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

fn check_range(name: &str, r: Range, positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) || (positive && r[0] <= 0.0) {
        return Err(Error::InvalidArgument(format!("invalid {name} range {r:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToneMapKind {
    HalfPlane,
    Radial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneMapRanges {
    pub kind: ToneMapKind,
    pub gain: Range,
    pub falloff: f64,
}

/// Ranges from which each view's chain is drawn. Absent entries are left out
/// of the chain; the default config produces empty (identity) chains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IspConfig {
    pub exposure_gain: Option<Range>,
    pub white_balance: Option<Range>,
    pub local_tone_map: Option<ToneMapRanges>,
    pub gamma: Option<Range>,
    pub s_curve: Option<Range>,
    /// Clamp processed images to `[0, 1]`.
    pub clamp: bool,
}

impl IspConfig {
    /// Gains in 0.5–2, white balance 0.8–1.25, gamma 0.8–1.4 and one
    /// half-plane tone map per view.
    pub fn varied() -> Self {
        Self {
            exposure_gain: Some([0.5, 2.0]),
            white_balance: Some([0.8, 1.25]),
            local_tone_map: Some(ToneMapRanges {
                kind: ToneMapKind::HalfPlane,
                gain: [0.6, 1.6],
                falloff: 0.15,
            }),
            gamma: Some([0.8, 1.4]),
            s_curve: None,
            clamp: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.exposure_gain {
            check_range("exposure gain", r, true)?;
        }
        if let Some(r) = self.white_balance {
            check_range("white balance", r, true)?;
        }
        if let Some(t) = self.local_tone_map {
            check_range("tone map gain", t.gain, true)?;
            if !(t.falloff > 0.0 && t.falloff.is_finite()) {
                return Err(Error::InvalidArgument("tone map falloff must be positive".into()));
            }
        }
        if let Some(r) = self.gamma {
            check_range("gamma", r, true)?;
        }
        if let Some(r) = self.s_curve {
            check_range("s-curve", r, false)?;
        }
        Ok(())
    }

    /// Draws one chain. Op order is fixed: exposure, white balance, tone
    /// map, gamma, s-curve.
    pub fn sample_chain(&self, rng: &mut impl Rng) -> Vec<IspOp> {
        let mut chain = Vec::new();
        if let Some(r) = self.exposure_gain {
            chain.push(IspOp::ExposureGain { gain: sample(rng, r) });
        }
        if let Some(r) = self.white_balance {
            chain.push(IspOp::WhiteBalance {
                gains: [sample(rng, r), sample(rng, r), sample(rng, r)],
            });
        }
        if let Some(t) = self.local_tone_map {
            let field = match t.kind {
                ToneMapKind::HalfPlane => {
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    GainField::HalfPlane {
                        point: [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)],
                        normal: [angle.cos(), angle.sin()],
                    }
                }
                ToneMapKind::Radial => GainField::Radial {
                    center: [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)],
                    radius: rng.gen_range(0.2..0.4),
                },
            };
            chain.push(IspOp::LocalToneMap {
                field,
                inner_gain: sample(rng, t.gain),
                outer_gain: sample(rng, t.gain),
                falloff: t.falloff,
            });
        }
        if let Some(r) = self.gamma {
            chain.push(IspOp::Gamma { gamma: sample(rng, r) });
        }
        if let Some(r) = self.s_curve {
            chain.push(IspOp::SCurve { strength: sample(rng, r) });
        }
        chain
    }
}
