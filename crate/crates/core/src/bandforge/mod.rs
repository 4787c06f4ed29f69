//! Feature engineering: bands B15..B26 derived from the 14 distributed bands.
//!
//! | band    | derivation                                  |
//! |---------|---------------------------------------------|
//! | B15-B17 | per-patch min-max normalization of B2, B3, B4 |
//! | B18     | NDVI  `(B8 - B4) / (B8 + B4)`               |
//! | B19     | NDMI  `(B8 - B11) / (B8 + B11)`             |
//! | B20     | NBR   `(B8 - B12) / (B8 + B12)`             |
//! | B21     | gray  `(B2 + B3 + B4) / 3`                  |
//! | B22     | 10×10 Gaussian blur of gray                 |
//! | B23     | 10×10 median of gray                        |
//! | B24     | gray gradient along the height              |
//! | B25     | gray gradient along the width               |
//! | B26     | Canny edge map of gray                      |
//!
//! A zero denominator (normalized differences) or a constant band (min-max) yields 0.
//! Even kernels are anchored at `k/2` with reflect-101 borders.

mod cache;
pub(crate) mod filters;

use std::fmt;

use ndarray::{concatenate, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BandId, BandStack, ORIGINAL_BANDS};
use crate::error::{Error, Result};

pub use cache::{engineered_dir, prepare_engineered_cache, read_engineered_image};
pub use filters::{default_gaussian_sigma, CANNY_SIGMA};

/// How a derived band is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandKind {
    MinMaxNorm { src: BandId },
    Ndvi,
    Ndmi,
    Nbr,
    Gray,
    Gaussian { kernel: usize },
    Median { kernel: usize },
    /// Gradient along the width.
    GradX,
    /// Gradient along the height.
    GradY,
    /// Hysteresis thresholds as fractions of the gray band's value range.
    Canny { low: f32, high: f32 },
}

impl fmt::Display for BandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandKind::MinMaxNorm { src } => write!(f, "minmax_norm({src})"),
            BandKind::Ndvi => f.write_str("ndvi"),
            BandKind::Ndmi => f.write_str("ndmi"),
            BandKind::Nbr => f.write_str("nbr"),
            BandKind::Gray => f.write_str("gray"),
            BandKind::Gaussian { kernel } => write!(f, "gaussian({kernel})"),
            BandKind::Median { kernel } => write!(f, "median({kernel})"),
            BandKind::GradX => f.write_str("grad_x"),
            BandKind::GradY => f.write_str("grad_y"),
            BandKind::Canny { low, high } => write!(f, "canny({low},{high})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandSpec {
    pub kind: BandKind,
    pub output: BandId,
}

impl BandSpec {
    pub fn new(kind: BandKind, output: BandId) -> Result<Self> {
        let spec = BandSpec { kind, output };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            BandKind::Gaussian { kernel } | BandKind::Median { kernel } if kernel < 1 => {
                Err(Error::InvalidConfig(format!("{}: kernel must be >= 1", self.kind)))
            }
            BandKind::Canny { low, high } if !(0.0 <= low && low < high) => Err(
                Error::InvalidConfig(format!("{}: need 0 <= low < high", self.kind)),
            ),
            _ if self.output.is_original() => Err(Error::InvalidConfig(format!(
                "derived band cannot overwrite original {}",
                self.output
            ))),
            _ => Ok(()),
        }
    }
}

/// Named band selections accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Preset {
    None,
    Bands15To17,
    Bands15To21,
    Bands15To23,
    Bands15To25,
    Bands15To26,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::None,
        Preset::Bands15To17,
        Preset::Bands15To21,
        Preset::Bands15To23,
        Preset::Bands15To25,
        Preset::Bands15To26,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::None => "none",
            Preset::Bands15To17 => "15-17",
            Preset::Bands15To21 => "15-21",
            Preset::Bands15To23 => "15-23",
            Preset::Bands15To25 => "15-25",
            Preset::Bands15To26 => "15-26",
        }
    }

    /// Number of derived bands.
    pub fn extra_bands(self) -> usize {
        match self {
            Preset::None => 0,
            Preset::Bands15To17 => 3,
            Preset::Bands15To21 => 7,
            Preset::Bands15To23 => 9,
            Preset::Bands15To25 => 11,
            Preset::Bands15To26 => 12,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown band selection `{s}`")))
    }
}

impl TryFrom<String> for Preset {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Preset> for String {
    fn from(p: Preset) -> String {
        p.name().to_string()
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// All twelve derived bands, B15..B26 in order.
pub fn full_band_table() -> Vec<BandSpec> {
    let kinds = [
        BandKind::MinMaxNorm { src: BandId::B2 },
        BandKind::MinMaxNorm { src: BandId::B3 },
        BandKind::MinMaxNorm { src: BandId::B4 },
        BandKind::Ndvi,
        BandKind::Ndmi,
        BandKind::Nbr,
        BandKind::Gray,
        BandKind::Gaussian { kernel: 10 },
        BandKind::Median { kernel: 10 },
        BandKind::GradY,
        BandKind::GradX,
        BandKind::Canny { low: 0.1, high: 0.3 },
    ];
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| BandSpec {
            kind,
            output: BandId::B15.offset(i).expect("B15..B26"),
        })
        .collect()
}

/// Ordered list of derived bands appended after B1..B14.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSelection {
    specs: Vec<BandSpec>,
}

impl BandSelection {
    /// Output ids must be unique and contiguous from B15.
    pub fn new(specs: Vec<BandSpec>) -> Result<Self> {
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            if Some(spec.output) != BandId::B15.offset(i) {
                return Err(Error::InvalidConfig(format!(
                    "band #{i} of the selection writes {}, expected B{}",
                    spec.output,
                    15 + i
                )));
            }
        }
        Ok(BandSelection { specs })
    }

    pub fn empty() -> Self {
        BandSelection { specs: Vec::new() }
    }

    pub fn preset(preset: Preset) -> Self {
        let mut specs = full_band_table();
        specs.truncate(preset.extra_bands());
        BandSelection { specs }
    }

    pub fn specs(&self) -> &[BandSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Channel count of a stack engineered with this selection.
    pub fn output_channels(&self) -> usize {
        ORIGINAL_BANDS + self.specs.len()
    }

    /// Canonical text form, stable across runs.
    pub fn describe(&self) -> String {
        self.specs
            .iter()
            .map(|s| format!("{}={}", s.output, s.kind))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Short content hash naming the engineered-stack cache directory.
    pub fn cache_key(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl From<Preset> for BandSelection {
    fn from(p: Preset) -> Self {
        BandSelection::preset(p)
    }
}

fn source<'a>(stack: &'a BandStack, id: BandId) -> Result<ArrayView2<'a, f32>> {
    stack.band(id).ok_or(Error::MissingSourceBand(id))
}

fn widen(v: ArrayView2<'_, f32>) -> Array2<f64> {
    v.mapv(f64::from)
}

fn narrow(v: Array2<f64>) -> Array2<f32> {
    v.mapv(|x| x as f32)
}

fn normalized_difference(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Array2<f64> {
    Zip::from(&a).and(&b).map_collect(|&a, &b| {
        let (a, b) = (f64::from(a), f64::from(b));
        let den = a + b;
        if den == 0.0 {
            0.0
        } else {
            (a - b) / den
        }
    })
}

fn min_max(v: &Array2<f64>) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)))
}

fn gray(stack: &BandStack) -> Result<Array2<f64>> {
    let (b2, b3, b4) = (
        source(stack, BandId::B2)?,
        source(stack, BandId::B3)?,
        source(stack, BandId::B4)?,
    );
    Ok(Zip::from(&b2)
        .and(&b3)
        .and(&b4)
        .map_collect(|&a, &b, &c| (f64::from(a) + f64::from(b) + f64::from(c)) / 3.0))
}

fn derive_with_gray(stack: &BandStack, kind: BandKind, gray_cache: &mut Option<Array2<f64>>) -> Result<Array2<f64>> {
    let mut gray_band = || -> Result<Array2<f64>> {
        if gray_cache.is_none() {
            *gray_cache = Some(gray(stack)?);
        }
        Ok(gray_cache.clone().expect("filled above"))
    };
    Ok(match kind {
        BandKind::MinMaxNorm { src } => {
            let x = widen(source(stack, src)?);
            let (lo, hi) = min_max(&x);
            if hi > lo {
                x.mapv(|v| (v - lo) / (hi - lo))
            } else {
                Array2::zeros(x.dim())
            }
        }
        BandKind::Ndvi => normalized_difference(source(stack, BandId::B8)?, source(stack, BandId::B4)?),
        BandKind::Ndmi => normalized_difference(source(stack, BandId::B8)?, source(stack, BandId::B11)?),
        BandKind::Nbr => normalized_difference(source(stack, BandId::B8)?, source(stack, BandId::B12)?),
        BandKind::Gray => gray_band()?,
        BandKind::Gaussian { kernel } => filters::gaussian_blur(&gray_band()?, kernel),
        BandKind::Median { kernel } => filters::median_filter(&gray_band()?, kernel),
        BandKind::GradX => filters::gradient(&gray_band()?, filters::GradAxis::X),
        BandKind::GradY => filters::gradient(&gray_band()?, filters::GradAxis::Y),
        BandKind::Canny { low, high } => {
            let g = gray_band()?;
            let (lo, hi) = min_max(&g);
            let range = hi - lo;
            if range > 0.0 {
                filters::canny(&g, f64::from(low) * range, f64::from(high) * range)
            } else {
                Array2::zeros(g.dim())
            }
        }
    })
}

/// Computes one derived band from `stack`.
pub fn derive_band(stack: &BandStack, spec: &BandSpec) -> Result<Array2<f32>> {
    spec.validate()?;
    derive_with_gray(stack, spec.kind, &mut None).map(narrow)
}

/// Appends the bands of `selection` to a 14-band stack. The original bands are copied
/// bit-for-bit.
pub fn engineer_stack(stack14: &BandStack, selection: &BandSelection) -> Result<BandStack> {
    if stack14.channels() != ORIGINAL_BANDS {
        return Err(Error::InvalidBands(format!(
            "feature engineering expects {ORIGINAL_BANDS} bands, got {}",
            stack14.channels()
        )));
    }
    if selection.is_empty() {
        return Ok(stack14.clone());
    }
    let mut gray_cache = None;
    let mut planes = Vec::with_capacity(selection.len());
    for spec in selection.specs() {
        let band = narrow(derive_with_gray(stack14, spec.kind, &mut gray_cache)?);
        planes.push(band.insert_axis(Axis(2)));
    }
    let mut views = vec![stack14.pixels().view()];
    views.extend(planes.iter().map(|p| p.view()));
    let pixels = concatenate(Axis(2), &views).expect("planes share the spatial shape");
    let mut meta = stack14.band_meta().to_vec();
    meta.extend(selection.specs().iter().map(|s| s.output));
    BandStack::new(pixels, meta, stack14.patch_id())
}
