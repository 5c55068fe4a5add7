use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::{RgbImage, SpectrumMapStack};
use crate::nn::checkpoint::{self, Record};
use crate::nn::{Bound, Conv2d, Dense, Graph, Init, ParameterStore, Tensor, Var};

/// Which encoders carry a spectrum-attention block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SaPlacement(pub [bool; 3]);

impl SaPlacement {
    pub const NONE: Self = Self([false; 3]);
    pub const E1: Self = Self([true, false, false]);
    pub const E1_E2: Self = Self([true, true, false]);
    pub const ALL: Self = Self([true; 3]);

    pub fn contains(self, stage: usize) -> bool {
        self.0[stage]
    }
}

impl fmt::Display for SaPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = (0..3).filter(|i| self.0[*i]).map(|i| format!("E{}", i + 1)).collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl FromStr for SaPlacement {
    type Err = Error;

    /// Accepts `none` or encoder names joined by `+` or `,`, e.g. `E1+E2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::NONE);
        }
        let mut out = [false; 3];
        for part in s.split(['+', ',']) {
            match part.trim().to_ascii_uppercase().as_str() {
                "E1" => out[0] = true,
                "E2" => out[1] = true,
                "E3" => out[2] = true,
                other => {
                    return Err(Error::InvalidArgument(format!("unknown encoder `{other}`")));
                }
            }
        }
        Ok(Self(out))
    }
}

impl Serialize for SaPlacement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SaPlacement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaUnetConfig {
    pub s_num: usize,
    pub base_channels: usize,
    pub sa_placement: SaPlacement,
    pub se_reduction: usize,
    pub attention_gates: bool,
}

impl Default for SaUnetConfig {
    fn default() -> Self {
        Self {
            s_num: 11,
            base_channels: 16,
            sa_placement: SaPlacement::E1_E2,
            se_reduction: 4,
            attention_gates: true,
        }
    }
}

/// Spatial dims must be divisible by this (three 2x downsamplings).
pub const SIZE_MULTIPLE: usize = 8;

impl SaUnetConfig {
    pub fn in_channels(&self) -> usize {
        3 * self.s_num
    }

    pub fn enc_channels(&self) -> [usize; 3] {
        [self.base_channels, 2 * self.base_channels, 4 * self.base_channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_num == 0 || self.base_channels == 0 || self.se_reduction == 0 {
            return Err(Error::InvalidArgument(
                "s_num, base_channels and se_reduction must be positive".into(),
            ));
        }
        if self.base_channels % self.se_reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "base_channels {} not divisible by se_reduction {}",
                self.base_channels, self.se_reduction
            )));
        }
        Ok(())
    }
}

/// Additive attention gate on a skip connection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionGate {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub psi: Conv2d,
}

impl AttentionGate {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, skip_ch: usize, gate_ch: usize) -> Self {
        let inner = (skip_ch / 2).max(1);
        Self {
            theta: Conv2d::new(store, init, &format!("{name}.theta"), skip_ch, inner, 1),
            phi: Conv2d::new(store, init, &format!("{name}.phi"), gate_ch, inner, 1),
            psi: Conv2d::new(store, init, &format!("{name}.psi"), inner, 1, 1),
        }
    }

    /// Mask in `(0, 1)`, shape `[B, 1, H, W]`.
    pub fn mask(&self, g: &mut Graph, p: &Bound, skip: Var, gate: Var) -> Result<Var> {
        let (ss, gs) = (g.shape(skip).to_vec(), g.shape(gate).to_vec());
        if ss.len() != 4 || gs.len() != 4 || gs[0] != ss[0] || gs[2] * 2 != ss[2] || gs[3] * 2 != ss[3] {
            return Err(shape_err(format!(
                "attention gate: skip {ss:?} needs a gate at half resolution, got {gs:?}"
            )));
        }
        let t = self.theta.forward(g, p, skip)?;
        let up = g.upsample2(gate)?;
        let f = self.phi.forward(g, p, up)?;
        let s = g.add(t, f)?;
        let a = g.relu(s);
        let psi = self.psi.forward(g, p, a)?;
        Ok(g.sigmoid(psi))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, skip: Var, gate: Var) -> Result<Var> {
        let m = self.mask(g, p, skip, gate)?;
        g.mul_mask(skip, m)
    }
}

/// Three 1x1 conv blocks, squeeze-excitation rescale, residual input.
#[derive(Clone, Debug)]
pub struct SpectrumAttention {
    pub convs: [Conv2d; 3],
    pub squeeze: Dense,
    pub excite: Dense,
}

impl SpectrumAttention {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, ch: usize, reduction: usize) -> Self {
        let convs = [0, 1, 2].map(|i| Conv2d::new(store, init, &format!("{name}.conv{i}"), ch, ch, 1));
        let mid = (ch / reduction).max(1);
        Self {
            convs,
            squeeze: Dense::new(store, init, &format!("{name}.se1"), ch, mid),
            excite: Dense::new(store, init, &format!("{name}.se2"), mid, ch),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            let z = c.forward(g, p, h)?;
            h = g.relu(z);
        }
        let pooled = g.global_avg_pool(h)?;
        let s = self.squeeze.forward(g, p, pooled)?;
        let s = g.relu(s);
        let s = self.excite.forward(g, p, s)?;
        let s = g.sigmoid(s);
        let scaled = g.scale_channels(h, s)?;
        g.add(scaled, x)
    }
}

#[derive(Clone, Debug)]
struct DoubleConv(Conv2d, Conv2d);

impl DoubleConv {
    fn new(store: &mut ParameterStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self(
            Conv2d::new(store, init, &format!("{name}.conv1"), cin, cout, 3),
            Conv2d::new(store, init, &format!("{name}.conv2"), cout, cout, 3),
        )
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let a = self.0.forward(g, p, x)?;
        let a = g.relu(a);
        let b = self.1.forward(g, p, a)?;
        Ok(g.relu(b))
    }
}

/// Three-level U-Net over `3 * s_num` input channels producing RGB.
#[derive(Clone, Debug)]
pub struct SaUnet {
    cfg: SaUnetConfig,
    store: ParameterStore,
    enc: Vec<DoubleConv>,
    sa: Vec<Option<SpectrumAttention>>,
    bottleneck: DoubleConv,
    gates: Vec<Option<AttentionGate>>,
    dec: Vec<DoubleConv>,
    out: Conv2d,
}

impl SaUnet {
    pub fn new(cfg: SaUnetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut init = Init::new(seed);
        let ch = cfg.enc_channels();
        let mut enc = Vec::new();
        let mut sa = Vec::new();
        let mut cin = cfg.in_channels();
        for (i, &c) in ch.iter().enumerate() {
            enc.push(DoubleConv::new(&mut store, &mut init, &format!("enc{}", i + 1), cin, c));
            sa.push(cfg.sa_placement.contains(i).then(|| {
                SpectrumAttention::new(&mut store, &mut init, &format!("sa{}", i + 1), c, cfg.se_reduction)
            }));
            cin = c;
        }
        let bottleneck = DoubleConv::new(&mut store, &mut init, "bottleneck", ch[2], ch[2]);
        // Decoders run deepest first; decoder i restores encoder (2 - i).
        let mut gates = Vec::new();
        let mut dec = Vec::new();
        let mut below = ch[2];
        for lvl in (0..3).rev() {
            let skip = ch[lvl];
            gates.push(cfg.attention_gates.then(|| {
                AttentionGate::new(&mut store, &mut init, &format!("gate{}", lvl + 1), skip, below)
            }));
            dec.push(DoubleConv::new(&mut store, &mut init, &format!("dec{}", lvl + 1), below + skip, skip));
            below = skip;
        }
        let out = Conv2d::new(&mut store, &mut init, "out", ch[0], 3, 1);
        Ok(Self {
            cfg,
            store,
            enc,
            sa,
            bottleneck,
            gates,
            dec,
            out,
        })
    }

    pub fn config(&self) -> &SaUnetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn gates(&self) -> impl Iterator<Item = &AttentionGate> {
        self.gates.iter().flatten()
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if width == 0 || height == 0 || width % SIZE_MULTIPLE != 0 || height % SIZE_MULTIPLE != 0 {
            return Err(Error::BadDimensions(width, height, SIZE_MULTIPLE));
        }
        Ok(())
    }

    /// `x[B, 3 * s_num, H, W] -> [B, 3, H, W]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels() {
            return Err(shape_err(format!(
                "saunet expects [B, {}, H, W], got {s:?}",
                self.cfg.in_channels()
            )));
        }
        self.check_dims(s[3], s[2])?;
        let mut skips = Vec::with_capacity(3);
        let mut h = x;
        for (e, sa) in self.enc.iter().zip(&self.sa) {
            h = e.forward(g, p, h)?;
            if let Some(sa) = sa {
                h = sa.forward(g, p, h)?;
            }
            skips.push(h);
            h = g.downsample2(h)?;
        }
        h = self.bottleneck.forward(g, p, h)?;
        for ((gate, dec), skip) in self.gates.iter().zip(&self.dec).zip(skips.into_iter().rev()) {
            let skip = match gate {
                Some(ag) => ag.forward(g, p, skip, h)?,
                None => skip,
            };
            let up = g.upsample2(h)?;
            let cat = g.concat(&[up, skip], 1)?;
            h = dec.forward(g, p, cat)?;
        }
        let o = self.out.forward(g, p, h)?;
        Ok(g.sigmoid(o))
    }

    pub fn records(&self, prefix: &str, optimizer: bool) -> Vec<Record> {
        let c = &self.cfg;
        let sa = c.sa_placement.0.iter().enumerate().map(|(i, b)| if *b { 1 << i } else { 0 }).sum::<u32>();
        let mut out = vec![
            Record::scalar(format!("{prefix}cfg.s_num"), c.s_num as f64),
            Record::scalar(format!("{prefix}cfg.base_channels"), c.base_channels as f64),
            Record::scalar(format!("{prefix}cfg.sa_placement"), f64::from(sa)),
            Record::scalar(format!("{prefix}cfg.se_reduction"), c.se_reduction as f64),
            Record::scalar(
                format!("{prefix}cfg.attention_gates"),
                f64::from(u8::from(c.attention_gates)),
            ),
        ];
        out.extend(checkpoint::store_records(&self.store, prefix, optimizer));
        out
    }

    pub fn from_records(records: &[Record], prefix: &str) -> Result<Self> {
        let get = |k: &str| checkpoint::scalar(records, &format!("{prefix}cfg.{k}")).map(|v| v as usize);
        let sa = get("sa_placement")?;
        let cfg = SaUnetConfig {
            s_num: get("s_num")?,
            base_channels: get("base_channels")?,
            sa_placement: SaPlacement([sa & 1 != 0, sa & 2 != 0, sa & 4 != 0]),
            se_reduction: get("se_reduction")?,
            attention_gates: get("attention_gates")? != 0,
        };
        let mut net = Self::new(cfg, 0)?;
        checkpoint::load_store(&mut net.store, records, prefix)?;
        Ok(net)
    }
}

/// Stack as a `[1, 3 * s_num, H, W]` graph constant.
pub fn stack_input(g: &mut Graph, stack: &SpectrumMapStack) -> Result<Var> {
    Ok(g.constant(Tensor::new(
        vec![1, stack.bands() * 3, stack.height(), stack.width()],
        stack.to_planar(),
    )?))
}

/// Inference on one stack.
pub fn saunet_forward(stack: &SpectrumMapStack, net: &SaUnet) -> Result<RgbImage> {
    if stack.bands() != net.config().s_num {
        return Err(shape_err(format!(
            "stack has {} bands, network expects {}",
            stack.bands(),
            net.config().s_num
        )));
    }
    net.check_dims(stack.width(), stack.height())?;
    let mut g = Graph::new();
    let p = net.store().bind_frozen(&mut g);
    let x = stack_input(&mut g, stack)?;
    let y = net.forward(&mut g, &p, x)?;
    RgbImage::from_planar(stack.width(), stack.height(), g.value(y).data())
}
