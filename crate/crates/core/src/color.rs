//! Color shunt: RGB → three-channel color space → three single-channel planes.
//!
//! sRGB is decoded with the IEC 61966-2-1 transfer curve and the D65 white
//! point; YUV follows BT.601. Everything is computed in `f64`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    #[default]
    Cielab,
    Rgb,
    Hsv,
    Yuv,
    Hsl,
}

impl ColorSpace {
    pub const ALL: [ColorSpace; 5] = [
        ColorSpace::Cielab,
        ColorSpace::Rgb,
        ColorSpace::Hsv,
        ColorSpace::Yuv,
        ColorSpace::Hsl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::Cielab => "cielab",
            ColorSpace::Rgb => "rgb",
            ColorSpace::Hsv => "hsv",
            ColorSpace::Yuv => "yuv",
            ColorSpace::Hsl => "hsl",
        }
    }
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cielab" | "lab" => Ok(ColorSpace::Cielab),
            "rgb" => Ok(ColorSpace::Rgb),
            "hsv" => Ok(ColorSpace::Hsv),
            "yuv" => Ok(ColorSpace::Yuv),
            "hsl" => Ok(ColorSpace::Hsl),
            other => Err(Error::Config(format!("unknown color space `{other}`"))),
        }
    }
}

// Linear sRGB → XYZ, derived from the sRGB primaries and the D65 chromaticity
// (0.3127, 0.3290) with Y normalized to 1.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4123907992659594, 0.35758433938387796, 0.1804807884018343],
    [0.2126390058715103, 0.7151686787677559, 0.07219231536073371],
    [0.019330818715591825, 0.11919477979462596, 0.9505321522496607],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2409699419045213, -1.5373831775700932, -0.4986107602930032],
    [-0.9692436362808794, 1.8759675015077202, 0.04155505740717556],
    [0.055630079696993594, -0.20397695888897646, 1.0569715142428784],
];

const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

/// Reference white: the XYZ of linear RGB (1, 1, 1).
fn white() -> [f64; 3] {
    [
        RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
        RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
        RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
    ]
}

fn srgb_decode(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn mat3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > LAB_EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

/// 8-bit sRGB → CIELAB (L in [0, 100]).
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_decode(c as f64 / 255.0));
    let xyz = mat3(&RGB_TO_XYZ, lin);
    let wp = white();
    let f = [lab_f(xyz[0] / wp[0]), lab_f(xyz[1] / wp[1]), lab_f(xyz[2] / wp[2])];
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// CIELAB → sRGB on the 0–255 scale, unclamped and unrounded.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let wp = white();
    let yr = if lab[0] > LAB_KAPPA * LAB_EPSILON {
        fy * fy * fy
    } else {
        lab[0] / LAB_KAPPA
    };
    let xyz = [lab_f_inv(fx) * wp[0], yr * wp[1], lab_f_inv(fz) * wp[2]];
    mat3(&XYZ_TO_RGB, xyz).map(|c| srgb_encode(c) * 255.0)
}

fn hue_degrees(r: f64, g: f64, b: f64, max: f64, delta: f64) -> f64 {
    if delta == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    if h < 0.0 {
        h + 360.0
    } else {
        h
    }
}

fn convert_pixel(rgb: [u8; 3], space: ColorSpace) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    match space {
        ColorSpace::Cielab => rgb_to_lab(rgb),
        ColorSpace::Rgb => [r, g, b],
        ColorSpace::Hsv => {
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let delta = max - min;
            let s = if max > 0.0 { delta / max } else { 0.0 };
            [hue_degrees(r, g, b, max, delta), s, max]
        }
        ColorSpace::Hsl => {
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let delta = max - min;
            let l = (max + min) / 2.0;
            let s = if delta == 0.0 {
                0.0
            } else {
                delta / (1.0 - (2.0 * l - 1.0).abs())
            };
            [hue_degrees(r, g, b, max, delta), s, l]
        }
        ColorSpace::Yuv => {
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            [y, 0.492 * (b - y), 0.877 * (r - y)]
        }
    }
}

/// Converts an `H×W×3` 8-bit RGB image into `space`.
pub fn convert(image: ArrayView3<'_, u8>, space: ColorSpace) -> Result<Array3<f64>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 color channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("empty image {h}x{w}")));
    }
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let px = convert_pixel([image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]], space);
            for k in 0..3 {
                out[[y, x, k]] = px[k];
            }
        }
    }
    Ok(out)
}

/// Fixed per-channel affine normalization applied by [`shunt`]:
/// `plane_k = (value_k − mean_k) / scale_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuntNorm {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
}

impl ShuntNorm {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            scale: [1.0; 3],
        }
    }

    /// Constants that map each space's natural range to roughly [-1, 1].
    pub fn for_space(space: ColorSpace) -> Self {
        match space {
            ColorSpace::Cielab => Self {
                mean: [50.0, 0.0, 0.0],
                scale: [50.0, 50.0, 50.0],
            },
            ColorSpace::Rgb => Self {
                mean: [0.5; 3],
                scale: [0.5; 3],
            },
            ColorSpace::Hsv | ColorSpace::Hsl => Self {
                mean: [180.0, 0.5, 0.5],
                scale: [180.0, 0.5, 0.5],
            },
            ColorSpace::Yuv => Self {
                mean: [0.5, 0.0, 0.0],
                scale: [0.5, 0.5, 0.5],
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|s| !(s.is_finite() && *s != 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid shunt normalization {self:?}")));
        }
        Ok(())
    }
}

/// The three planes produced by the shunt. Plane 0 is the core channel
/// (L for CIELAB); planes 1 and 2 are auxiliary.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGroup {
    pub planes: [Array2<f64>; 3],
}

impl ChannelGroup {
    pub const CORE: usize = 0;

    pub fn dim(&self) -> (usize, usize) {
        self.planes[0].dim()
    }

    /// Undoes the normalization and stacks the planes back into `H×W×3`.
    pub fn unnormalize(&self, norm: &ShuntNorm) -> Array3<f64> {
        let (h, w) = self.dim();
        let mut out = Array3::zeros((h, w, 3));
        for (k, plane) in self.planes.iter().enumerate() {
            out.index_axis_mut(Axis(2), k)
                .assign(&plane.mapv(|v| v * norm.scale[k] + norm.mean[k]));
        }
        out
    }
}

/// Splits a converted `H×W×3` tensor into three normalized planes.
pub fn shunt(converted: ArrayView3<'_, f64>, norm: &ShuntNorm) -> Result<ChannelGroup> {
    let (_, _, c) = converted.dim();
    if c != 3 {
        return Err(Error::shape(format!("shunt expects 3 channels, got {c}")));
    }
    norm.validate()?;
    let plane = |k: usize| {
        converted
            .index_axis(Axis(2), k)
            .mapv(|v| (v - norm.mean[k]) / norm.scale[k])
    };
    let group = ChannelGroup {
        planes: [plane(0), plane(1), plane(2)],
    };
    if group.planes.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric("shunt", "non-finite plane value"));
    }
    Ok(group)
}
