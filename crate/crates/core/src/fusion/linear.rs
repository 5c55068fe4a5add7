use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};
use crate::image::{RgbImage, SpectrumMapStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// One weight per band, shared by R, G and B.
    Shared,
    PerChannel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearFusionWeights {
    /// Per band, per channel. In shared mode the three entries are equal.
    pub weights: Vec<[f64; 3]>,
    pub mode: WeightMode,
    /// RMS of the fit residual over all observations; zero for hand-made weights.
    pub residual_rms: f64,
}

impl LinearFusionWeights {
    pub fn shared(w: &[f64]) -> Self {
        Self {
            weights: w.iter().map(|v| [*v; 3]).collect(),
            mode: WeightMode::Shared,
            residual_rms: 0.0,
        }
    }

    pub fn ones(s_num: usize) -> Self {
        Self::shared(&vec![1.0; s_num])
    }

    pub fn s_num(&self) -> usize {
        self.weights.len()
    }

    /// Shared weights, or the channel mean in per-channel mode.
    pub fn band_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| (w[0] + w[1] + w[2]) / 3.0).collect()
    }

    /// One line per band: center wavelength followed by the weight(s).
    pub fn to_text(&self, centers_nm: &[f64]) -> Result<String> {
        if centers_nm.len() != self.s_num() {
            return Err(shape_err("one center per band required"));
        }
        let mut out = String::new();
        for (c, w) in centers_nm.iter().zip(&self.weights) {
            match self.mode {
                WeightMode::Shared => writeln!(out, "{c} {:e}", w[0]),
                WeightMode::PerChannel => writeln!(out, "{c} {:e} {:e} {:e}", w[0], w[1], w[2]),
            }
            .expect("writing to a String");
        }
        Ok(out)
    }

    /// Parses [`Self::to_text`] output, returning the centers and weights.
    pub fn parse(text: &str) -> Result<(Vec<f64>, Self)> {
        let mut centers = Vec::new();
        let mut weights = Vec::new();
        let mut mode = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("weights line {}: {e}", n + 1)))?;
            let m = match vals.len() {
                2 => WeightMode::Shared,
                4 => WeightMode::PerChannel,
                k => return Err(Error::Parse(format!("weights line {}: {k} fields", n + 1))),
            };
            if *mode.get_or_insert(m) != m {
                return Err(Error::Parse("mixed shared and per-channel lines".into()));
            }
            centers.push(vals[0]);
            weights.push(if m == WeightMode::Shared { [vals[1]; 3] } else { [vals[1], vals[2], vals[3]] });
        }
        if weights.is_empty() {
            return Err(Error::Parse("no weights".into()));
        }
        Ok((
            centers,
            Self {
                weights,
                mode: mode.unwrap(),
                residual_rms: 0.0,
            },
        ))
    }

    pub fn write(&self, path: impl AsRef<Path>, centers_nm: &[f64]) -> Result<()> {
        std::fs::write(path, self.to_text(centers_nm)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Vec<f64>, Self)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }
}

/// `kappa * sum_k w_k * stack[k]` per pixel and channel.
pub fn linear_fuse(stack: &SpectrumMapStack, weights: &LinearFusionWeights, kappa: f64) -> Result<RgbImage> {
    if stack.bands() == 0 {
        return Err(Error::EmptyStack);
    }
    if weights.s_num() != stack.bands() {
        return Err(shape_err(format!(
            "{} weights for {} bands",
            weights.s_num(),
            stack.bands()
        )));
    }
    let mut out = RgbImage::zeros(stack.width(), stack.height());
    for p in 0..stack.pixels() {
        let px = stack.pixel(p);
        for c in 0..3 {
            let mut acc = 0.0;
            for (k, w) in weights.weights.iter().enumerate() {
                acc += w[c] * px[k * 3 + c];
            }
            out.data[p * 3 + c] = kappa * acc;
        }
    }
    Ok(out)
}

fn solve_normal(gram: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let k = gram.nrows();
    if !gram.iter().chain(rhs.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite Gram matrix".into()));
    }
    if gram.diagonal().iter().all(|v| *v <= 0.0) {
        return Err(Error::SingularSystem);
    }
    // Jacobi scaling so the ridge is relative to each band's own energy.
    let d: Vec<f64> = (0..k)
        .map(|i| if gram[(i, i)] > 0.0 { 1.0 / gram[(i, i)].sqrt() } else { 1.0 })
        .collect();
    let scaled = DMatrix::from_fn(k, k, |a, b| gram[(a, b)] * d[a] * d[b]);
    let srhs = DVector::from_fn(k, |a, _| rhs[a] * d[a]);
    let mut g = scaled.clone();
    for i in 0..k {
        g[(i, i)] += 1e-8;
    }
    let chol = g.cholesky().ok_or(Error::SingularSystem)?;
    let mut y = chol.solve(&srhs);
    // Iterative refinement removes the ridge bias along well-conditioned
    // directions and leaves near-null directions damped.
    for _ in 0..3 {
        let r = &srhs - &scaled * &y;
        y += chol.solve(&r);
    }
    Ok(DVector::from_fn(k, |a, _| y[a] * d[a]))
}

/// Least-squares weights mapping band stacks to RGB targets over every
/// pixel and channel of every view.
pub fn fit_weights_least_squares(
    stacks: &[SpectrumMapStack],
    targets: &[RgbImage],
    mode: WeightMode,
) -> Result<LinearFusionWeights> {
    if stacks.is_empty() || stacks.len() != targets.len() {
        return Err(shape_err(format!(
            "{} stacks vs {} targets",
            stacks.len(),
            targets.len()
        )));
    }
    let k = stacks[0].bands();
    if k == 0 {
        return Err(Error::EmptyStack);
    }
    let mut observations = 0usize;
    for (s, t) in stacks.iter().zip(targets) {
        if s.bands() != k || s.width() != t.width || s.height() != t.height {
            return Err(shape_err("stack/target dimensions disagree"));
        }
        observations += s.pixels();
    }
    if observations * 3 < k {
        return Err(Error::InvalidArgument(format!(
            "{observations} pixels cannot determine {k} weights"
        )));
    }
    let channels: &[&[usize]] = match mode {
        WeightMode::Shared => &[&[0, 1, 2]],
        WeightMode::PerChannel => &[&[0], &[1], &[2]],
    };
    let mut weights = vec![[0.0; 3]; k];
    let mut sse = 0.0;
    for chans in channels {
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for (s, t) in stacks.iter().zip(targets) {
            for p in 0..s.pixels() {
                let px = s.pixel(p);
                for &c in *chans {
                    let y = t.data[p * 3 + c];
                    for a in 0..k {
                        let xa = px[a * 3 + c];
                        rhs[a] += xa * y;
                        for b in a..k {
                            gram[(a, b)] += xa * px[b * 3 + c];
                        }
                    }
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let w = solve_normal(gram, rhs)?;
        for &c in *chans {
            for a in 0..k {
                weights[a][c] = w[a];
            }
        }
        for (s, t) in stacks.iter().zip(targets) {
            for p in 0..s.pixels() {
                let px = s.pixel(p);
                for &c in *chans {
                    let pred: f64 = (0..k).map(|a| w[a] * px[a * 3 + c]).sum();
                    let r = pred - t.data[p * 3 + c];
                    sse += r * r;
                }
            }
        }
    }
    Ok(LinearFusionWeights {
        weights,
        mode,
        residual_rms: (sse / (observations * 3) as f64).sqrt(),
    })
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(shape_err("pearson needs two equal-length series of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numeric("pearson of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}
