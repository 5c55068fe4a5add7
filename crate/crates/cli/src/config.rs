//! Run configuration: a TOML file whose top-level keys mirror the command
//! line flags, plus optional tables for the full component configs.
//!
//! ```toml
//! seed = 3
//! snum = 4
//! lr = 2e-3
//!
//! [field.field]
//! width = 32
//! depth = 3
//! ```
//!
//! Flags override file values; file values override the tables.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use specfield::dataset::GenConfig;
use specfield::fusion::SaPlacement;
use specfield::train::{FieldTrainConfig, FusionTrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub snum: Option<usize>,
    pub ncoarse: Option<usize>,
    pub nfine: Option<usize>,
    pub lr: Option<f64>,
    pub lr_final: Option<f64>,
    pub lr_fusion: Option<f64>,
    pub lambda_rgb: Option<f64>,
    pub sa_placement: Option<SaPlacement>,
    pub joint: Option<bool>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub batch_rays: Option<usize>,
    pub eval_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub patch: Option<usize>,

    pub gen: Option<GenConfig>,
    pub field: Option<FieldTrainConfig>,
    pub fusion: Option<FusionTrainConfig>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => specfield::Error::MissingFile(path.to_path_buf()).into(),
                _ => anyhow::Error::from(e),
            })
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| specfield::Error::Parse(format!("{}: {e}", path.display())).into())
    }

    /// File config (if any) with every set field of `flags` on top.
    pub fn resolve(file: Option<&Path>, flags: &RunConfig) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        overlay!(
            cfg, flags, seed, snum, ncoarse, nfine, lr, lr_final, lr_fusion, lambda_rgb, sa_placement, joint,
            workers, out, iterations, batch_rays, eval_every, checkpoint_every, patch, gen, field, fusion
        );
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .ok_or_else(|| specfield::Error::InvalidArgument("--out is required".into()).into())
    }

    pub fn gen_config(&self) -> GenConfig {
        let mut g = self.gen.clone().unwrap_or_default();
        if let Some(s) = self.seed {
            g.seed = s;
        }
        if let Some(k) = self.snum {
            g.s_num = k;
        }
        g
    }

    pub fn field_config(&self) -> FieldTrainConfig {
        let mut f = self.field.clone().unwrap_or_default();
        if let Some(s) = self.seed {
            f.seed = s;
        }
        if let Some(k) = self.snum {
            f.field.s_num = k;
        }
        if let Some(n) = self.ncoarse {
            f.render.n_coarse = n;
        }
        if let Some(n) = self.nfine {
            f.render.n_fine = n;
        }
        if let Some(v) = self.lr {
            f.lr = v;
        }
        if self.lr_final.is_some() {
            f.lr_final = self.lr_final;
        }
        if let Some(v) = self.lambda_rgb {
            f.loss.lambda_rgb = v;
        }
        if let Some(n) = self.iterations {
            f.iterations = n;
        }
        if let Some(n) = self.batch_rays {
            f.batch_rays = n;
        }
        f
    }

    /// `lr` applies to the network when no field is being trained.
    pub fn fusion_config(&self, lr_is_fusion: bool) -> FusionTrainConfig {
        let mut f = self.fusion.clone().unwrap_or_default();
        if let Some(s) = self.seed {
            f.seed = s;
        }
        if let Some(k) = self.snum {
            f.net.s_num = k;
        }
        if let Some(p) = self.sa_placement {
            f.net.sa_placement = p;
        }
        if let Some(v) = self.lr_fusion.or(if lr_is_fusion { self.lr } else { None }) {
            f.lr = v;
        }
        if let Some(n) = self.iterations {
            f.iterations = n;
        }
        f
    }
}

/// Writes `value` as TOML to `dir/name` and prints it.
pub fn echo<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let text = toml::to_string(value).context("serializing config echo")?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), &text)?;
    println!("# {}\n{text}", dir.join(name).display());
    Ok(())
}
