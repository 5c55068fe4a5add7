//! Colorimetry: CIE colour matching functions, illuminant SPDs, band
//! partitions of the visible range, and the SPD -> XYZ -> RGB chain in both
//! its direct form and its per-band (spectrum map) form.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{RgbImage, SpectrumMapStack};

const CIE1931_2DEG_5NM: &str = include_str!("../data/cie1931_2deg_5nm.txt");
const CIE_D65_5NM: &str = include_str!("../data/cie_d65_5nm.txt");

/// XYZ -> linear RGB matrix.
pub const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.133, -1.616, -0.490],
    [-0.978, 1.916, 0.033],
    [0.072, -0.229, 1.405],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Xyz(pub [f64; 3]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rgb(pub [f64; 3]);

/// Colour matching functions sampled on an ascending wavelength grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CmfTable {
    wavelengths_nm: Vec<f64>,
    fx: Vec<f64>,
    fy: Vec<f64>,
    fz: Vec<f64>,
}

/// Relative spectral power distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Spd {
    wavelengths_nm: Vec<f64>,
    power: Vec<f64>,
}

/// Parses whitespace-separated numeric columns, skipping blanks and `#` comments.
fn parse_columns(text: &str, columns: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); columns];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != columns {
            return Err(Error::Parse(format!(
                "line {}: expected {columns} columns, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        for (col, f) in out.iter_mut().zip(&fields) {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad number `{f}`", lineno + 1)))?;
            col.push(v);
        }
    }
    Ok(out)
}

fn check_ascending(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("empty wavelength table".into()));
    }
    if w.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidArgument(
            "wavelengths must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// Linear interpolation on an ascending grid; exact at nodes.
fn interp(grid: &[f64], values: &[&[f64]], x: f64, out: &mut [f64]) -> Result<()> {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    if !(x >= lo && x <= hi) {
        return Err(Error::OutOfRange(x, lo, hi));
    }
    let i = grid.partition_point(|&g| g <= x);
    if i == 0 || grid[i - 1] == x || i == grid.len() {
        let j = if i == 0 { 0 } else { i - 1 };
        for (o, v) in out.iter_mut().zip(values) {
            *o = v[j];
        }
        return Ok(());
    }
    let t = (x - grid[i - 1]) / (grid[i] - grid[i - 1]);
    for (o, v) in out.iter_mut().zip(values) {
        *o = v[i - 1] + t * (v[i] - v[i - 1]);
    }
    Ok(())
}

impl CmfTable {
    pub fn new(wavelengths_nm: Vec<f64>, fx: Vec<f64>, fy: Vec<f64>, fz: Vec<f64>) -> Result<Self> {
        check_ascending(&wavelengths_nm)?;
        let n = wavelengths_nm.len();
        if fx.len() != n || fy.len() != n || fz.len() != n {
            return Err(Error::InvalidArgument("CMF column lengths differ".into()));
        }
        if fx.iter().chain(&fy).chain(&fz).any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("CMF values must be >= 0".into()));
        }
        Ok(Self {
            wavelengths_nm,
            fx,
            fy,
            fz,
        })
    }

    /// CIE 1931 2 degree observer, 380-780 nm at 5 nm.
    pub fn cie1931() -> Self {
        Self::parse(CIE1931_2DEG_5NM).expect("embedded CMF table is valid")
    }

    /// Four-column text: wavelength, x, y, z.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cols = parse_columns(text, 4)?;
        let fz = cols.pop().unwrap();
        let fy = cols.pop().unwrap();
        let fx = cols.pop().unwrap();
        let w = cols.pop().unwrap();
        Self::new(w, fx, fy, fz)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    pub fn range(&self) -> (f64, f64) {
        (self.wavelengths_nm[0], *self.wavelengths_nm.last().unwrap())
    }

    pub fn node(&self, i: usize) -> [f64; 3] {
        [self.fx[i], self.fy[i], self.fz[i]]
    }

    /// `(f_X, f_Y, f_Z)` at `lambda_nm`, linearly interpolated.
    pub fn lookup(&self, lambda_nm: f64) -> Result<[f64; 3]> {
        let mut out = [0.0; 3];
        interp(
            &self.wavelengths_nm,
            &[&self.fx, &self.fy, &self.fz],
            lambda_nm,
            &mut out,
        )?;
        Ok(out)
    }

    /// Wavelength of the largest `f_Y` sample.
    pub fn peak_y_nm(&self) -> f64 {
        let (i, _) = self
            .fy
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.wavelengths_nm[i]
    }
}

impl Spd {
    pub fn new(wavelengths_nm: Vec<f64>, power: Vec<f64>) -> Result<Self> {
        check_ascending(&wavelengths_nm)?;
        if power.len() != wavelengths_nm.len() {
            return Err(Error::InvalidArgument("SPD column lengths differ".into()));
        }
        if power.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidArgument("SPD power must be >= 0".into()));
        }
        Ok(Self {
            wavelengths_nm,
            power,
        })
    }

    /// CIE standard illuminant D65, 380-780 nm at 5 nm, normalized to 100 at 560 nm.
    pub fn d65() -> Self {
        Self::parse(CIE_D65_5NM).expect("embedded D65 table is valid")
    }

    /// Equal-energy illuminant with unit power over `[lo, hi]`.
    pub fn equal_energy(lo: f64, hi: f64) -> Self {
        Self {
            wavelengths_nm: vec![lo, hi],
            power: vec![1.0, 1.0],
        }
    }

    /// Built-in illuminant by name (`D65` or `E`).
    pub fn named(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "D65" => Ok(Self::d65()),
            "E" | "EQUAL" | "EQUAL-ENERGY" => Ok(Self::equal_energy(300.0, 830.0)),
            other => Err(Error::InvalidArgument(format!("unknown illuminant `{other}`"))),
        }
    }

    /// Two-column text: wavelength, power.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cols = parse_columns(text, 2)?;
        let p = cols.pop().unwrap();
        let w = cols.pop().unwrap();
        Self::new(w, p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn at(&self, lambda_nm: f64) -> Result<f64> {
        let mut out = [0.0];
        interp(&self.wavelengths_nm, &[&self.power], lambda_nm, &mut out)?;
        Ok(out[0])
    }

    /// Same curve with every sample multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            wavelengths_nm: self.wavelengths_nm.clone(),
            power: self.power.iter().map(|p| p * k).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Uniform,
    Explicit,
}

/// The `s_num` wavelength bands spanning the visible range.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandPartition {
    pub mode: PartitionMode,
    pub lambda_min_nm: f64,
    pub lambda_max_nm: f64,
    pub delta_lambda_nm: f64,
    pub centers_nm: Vec<f64>,
}

impl BandPartition {
    /// Uniform partition of `[lambda_min, lambda_max]` into `s_num` bands.
    pub fn uniform(s_num: usize, lambda_min_nm: f64, lambda_max_nm: f64) -> Result<Self> {
        if s_num == 0 {
            return Err(Error::InvalidArgument("s_num must be >= 1".into()));
        }
        if !(lambda_max_nm > lambda_min_nm) {
            return Err(Error::InvalidArgument(format!(
                "inverted range [{lambda_min_nm}, {lambda_max_nm}]"
            )));
        }
        let delta = (lambda_max_nm - lambda_min_nm) / s_num as f64;
        let centers_nm = (0..s_num)
            .map(|k| lambda_min_nm + (k as f64 + 0.5) * delta)
            .collect();
        Ok(Self {
            mode: PartitionMode::Uniform,
            lambda_min_nm,
            lambda_max_nm,
            delta_lambda_nm: delta,
            centers_nm,
        })
    }

    /// Explicit band centers sharing one band width (e.g. filter sets).
    pub fn explicit(centers_nm: Vec<f64>, delta_lambda_nm: f64) -> Result<Self> {
        if centers_nm.is_empty() {
            return Err(Error::InvalidArgument("no band centers".into()));
        }
        if centers_nm.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidArgument(
                "band centers must be strictly ascending".into(),
            ));
        }
        if !(delta_lambda_nm > 0.0) {
            return Err(Error::InvalidArgument("band width must be positive".into()));
        }
        let lo = centers_nm[0] - 0.5 * delta_lambda_nm;
        let hi = centers_nm[centers_nm.len() - 1] + 0.5 * delta_lambda_nm;
        Ok(Self {
            mode: PartitionMode::Explicit,
            lambda_min_nm: lo,
            lambda_max_nm: hi,
            delta_lambda_nm,
            centers_nm,
        })
    }

    /// The 8-filter 400-750 nm layout at 50 nm spacing.
    pub fn filter_bank_400_750() -> Self {
        Self::explicit((0..8).map(|k| 400.0 + 50.0 * k as f64).collect(), 50.0)
            .expect("static layout is valid")
    }

    pub fn s_num(&self) -> usize {
        self.centers_nm.len()
    }

    /// Rebuilds the partition from its defining fields and checks that the
    /// stored centers and width agree exactly.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = match self.mode {
            PartitionMode::Uniform => Self::uniform(self.s_num(), self.lambda_min_nm, self.lambda_max_nm),
            PartitionMode::Explicit => Self::explicit(self.centers_nm.clone(), self.delta_lambda_nm),
        }
        .map_err(|e| Error::BadPartition(e.to_string()))?;
        if rebuilt != *self {
            return Err(Error::BadPartition(format!(
                "inconsistent {:?} partition: centers {:?}, width {}",
                self.mode, self.centers_nm, self.delta_lambda_nm
            )));
        }
        Ok(())
    }
}

/// Uniform partition; see [`BandPartition::uniform`].
pub fn make_partition(s_num: usize, lambda_min_nm: f64, lambda_max_nm: f64) -> Result<BandPartition> {
    BandPartition::uniform(s_num, lambda_min_nm, lambda_max_nm)
}

/// Per-band RGB weights `M * f(lambda_c) * L(lambda_c) * dlambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandCoefficients(pub Vec<[f64; 3]>);

/// Normalizing constant that gives the illuminant unit luminance when summed
/// over the partition.
pub fn kappa_for_illuminant(table: &CmfTable, spd: &Spd, partition: &BandPartition) -> Result<f64> {
    let mut denom = 0.0;
    for &c in &partition.centers_nm {
        let f = table.lookup(c)?;
        denom += f[1] * spd.at(c)? * partition.delta_lambda_nm;
    }
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateIlluminant);
    }
    Ok(1.0 / denom)
}

pub fn xyz_from_spd(table: &CmfTable, spd: &Spd, partition: &BandPartition, kappa: f64) -> Result<Xyz> {
    let mut xyz = [0.0; 3];
    for &c in &partition.centers_nm {
        let f = table.lookup(c)?;
        let l = spd.at(c)? * partition.delta_lambda_nm;
        for (acc, fi) in xyz.iter_mut().zip(f) {
            *acc += fi * l;
        }
    }
    Ok(Xyz(xyz.map(|v| v * kappa)))
}

pub fn mat3_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn rgb_from_xyz(xyz: Xyz) -> Rgb {
    Rgb(mat3_mul(&XYZ_TO_RGB, xyz.0))
}

pub fn band_coefficients(table: &CmfTable, spd: &Spd, partition: &BandPartition) -> Result<BandCoefficients> {
    partition
        .centers_nm
        .iter()
        .map(|&c| {
            let f = table.lookup(c)?;
            let l = spd.at(c)? * partition.delta_lambda_nm;
            Ok(mat3_mul(&XYZ_TO_RGB, f).map(|v| v * l))
        })
        .collect::<Result<Vec<_>>>()
        .map(BandCoefficients)
}

/// White-light composite: `kappa * sum_k stack[k]` per pixel and channel.
/// No clamping; out-of-gamut values survive until export.
pub fn compose_rgb(stack: &SpectrumMapStack, kappa: f64) -> Result<RgbImage> {
    if stack.bands() == 0 {
        return Err(Error::EmptyStack);
    }
    let mut out = RgbImage::zeros(stack.width(), stack.height());
    for p in 0..stack.pixels() {
        let px = stack.pixel(p);
        for c in 0..3 {
            let mut acc = 0.0;
            for k in 0..stack.bands() {
                acc += px[k * 3 + c];
            }
            out.data[p * 3 + c] = kappa * acc;
        }
    }
    Ok(out)
}
