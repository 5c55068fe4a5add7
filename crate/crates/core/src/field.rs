//! Positional encoding and the spectral radiance MLP.
//!
//! The trunk sees only the encoded sample position and produces one density
//! per point. The encoded view direction joins after the density head, so
//! density is view independent and shared across all bands; the final head
//! emits `3 * s_num` radiances through a sigmoid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, Record};
use crate::nn::{Bound, Dense, Graph, Init, ParameterStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub num_freqs_position: usize,
    pub num_freqs_direction: usize,
    pub include_identity: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_freqs_position: 10,
            num_freqs_direction: 4,
            include_identity: true,
        }
    }
}

impl EncodingConfig {
    pub fn width(&self, num_freqs: usize) -> usize {
        3 * (usize::from(self.include_identity) + 2 * num_freqs)
    }

    pub fn position_width(&self) -> usize {
        self.width(self.num_freqs_position)
    }

    pub fn direction_width(&self) -> usize {
        self.width(self.num_freqs_direction)
    }
}

/// Appends `[v, sin(2^k pi v), cos(2^k pi v) for k < num_freqs]` to `out`.
pub fn encode_into(v: [f64; 3], num_freqs: usize, include_identity: bool, out: &mut Vec<f64>) {
    if include_identity {
        out.extend_from_slice(&v);
    }
    if num_freqs == 0 {
        return;
    }
    // Octaves by the double-angle identities; one sin/cos per coordinate.
    let mut s = v.map(|x| (std::f64::consts::PI * x).sin());
    let mut c = v.map(|x| (std::f64::consts::PI * x).cos());
    for k in 0..num_freqs {
        if k > 0 {
            for i in 0..3 {
                let (si, ci) = (s[i], c[i]);
                s[i] = 2.0 * si * ci;
                c[i] = (ci - si) * (ci + si);
            }
        }
        out.extend_from_slice(&s);
        out.extend_from_slice(&c);
    }
}

pub fn encode(v: [f64; 3], num_freqs: usize, include_identity: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * (1 + 2 * num_freqs));
    encode_into(v, num_freqs, include_identity, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub depth: usize,
    pub width: usize,
    /// Trunk layer whose input is re-joined with the encoded position.
    /// Zero disables the skip.
    pub skip_layer: usize,
    pub bottleneck_width: usize,
    pub s_num: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            depth: 8,
            width: 256,
            skip_layer: 4,
            bottleneck_width: 128,
            s_num: 11,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.bottleneck_width == 0 || self.s_num == 0 {
            return Err(Error::InvalidArgument(
                "field depth, widths and s_num must be positive".into(),
            ));
        }
        if self.skip_layer >= self.depth {
            return Err(Error::InvalidArgument(format!(
                "skip layer {} must be < depth {}",
                self.skip_layer, self.depth
            )));
        }
        Ok(())
    }

    fn trunk_input(&self, layer: usize) -> usize {
        let pos = self.encoding.position_width();
        match layer {
            0 => pos,
            l if l == self.skip_layer => self.width + pos,
            _ => self.width,
        }
    }
}

/// One point's density and per-band RGB radiance.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    /// `s_num * 3` values, band-major.
    pub radiance: Vec<f64>,
}

/// Graph handles produced by [`SpectralField::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    /// `[P, 1]` non-negative densities.
    pub sigma: Var,
    /// `[P, 3 * s_num]` radiances in `(0, 1)`.
    pub radiance: Var,
}

#[derive(Clone, Debug)]
pub struct SpectralField {
    cfg: FieldConfig,
    store: ParameterStore,
    trunk: Vec<Dense>,
    sigma_head: Dense,
    feature: Dense,
    bottleneck: Dense,
    head: Dense,
}

impl SpectralField {
    pub fn new(cfg: FieldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut init = Init::new(seed);
        let trunk = (0..cfg.depth)
            .map(|l| Dense::new(&mut store, &mut init, &format!("trunk{l}"), cfg.trunk_input(l), cfg.width))
            .collect();
        let sigma_head = Dense::new(&mut store, &mut init, "sigma", cfg.width, 1);
        let feature = Dense::new(&mut store, &mut init, "feature", cfg.width, cfg.width);
        let bottleneck = Dense::new(
            &mut store,
            &mut init,
            "bottleneck",
            cfg.width + cfg.encoding.direction_width(),
            cfg.bottleneck_width,
        );
        let head = Dense::new(&mut store, &mut init, "radiance", cfg.bottleneck_width, 3 * cfg.s_num);
        Ok(Self {
            cfg,
            store,
            trunk,
            sigma_head,
            feature,
            bottleneck,
            head,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn sigma_head(&self) -> Dense {
        self.sigma_head
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Encoded inputs as graph constants.
    pub fn encode_batch(&self, g: &mut Graph, positions: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<(Var, Var)> {
        if positions.len() != dirs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions vs {} directions",
                positions.len(),
                dirs.len()
            )));
        }
        for (i, d) in dirs.iter().enumerate() {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized(i));
            }
        }
        let enc = self.cfg.encoding;
        let (pw, dw) = (enc.position_width(), enc.direction_width());
        let mut pe = Vec::with_capacity(positions.len() * pw);
        let mut de = Vec::with_capacity(dirs.len() * dw);
        for (p, d) in positions.iter().zip(dirs) {
            encode_into(*p, enc.num_freqs_position, enc.include_identity, &mut pe);
            encode_into(*d, enc.num_freqs_direction, enc.include_identity, &mut de);
        }
        let n = positions.len();
        Ok((
            g.constant(Tensor::new(vec![n, pw], pe)?),
            g.constant(Tensor::new(vec![n, dw], de)?),
        ))
    }

    /// Differentiable evaluation. `sigma_noise`, when given, is added to the
    /// pre-activation density (training-time perturbation).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        positions: &[[f64; 3]],
        dirs: &[[f64; 3]],
        sigma_noise: Option<&[f64]>,
    ) -> Result<FieldVars> {
        let (pos, dir) = self.encode_batch(g, positions, dirs)?;
        self.forward_encoded(g, p, pos, dir, sigma_noise)
    }

    pub fn forward_encoded(
        &self,
        g: &mut Graph,
        p: &Bound,
        pos: Var,
        dir: Var,
        sigma_noise: Option<&[f64]>,
    ) -> Result<FieldVars> {
        let mut h = pos;
        for (l, layer) in self.trunk.iter().enumerate() {
            if l > 0 && l == self.cfg.skip_layer {
                h = g.concat(&[h, pos], 1)?;
            }
            let z = layer.forward(g, p, h)?;
            h = g.relu(z);
        }
        let mut pre_sigma = self.sigma_head.forward(g, p, h)?;
        if let Some(noise) = sigma_noise {
            let n = g.constant(Tensor::new(g.shape(pre_sigma).to_vec(), noise.to_vec())?);
            pre_sigma = g.add(pre_sigma, n)?;
        }
        let sigma = g.relu(pre_sigma);
        let feat = self.feature.forward(g, p, h)?;
        let joined = g.concat(&[feat, dir], 1)?;
        let b = self.bottleneck.forward(g, p, joined)?;
        let b = g.relu(b);
        let logits = self.head.forward(g, p, b)?;
        let radiance = g.sigmoid(logits);
        Ok(FieldVars { sigma, radiance })
    }

    /// Inference without gradients.
    pub fn eval(&self, positions: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<Vec<FieldSample>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, positions, dirs, None)?;
        let k3 = 3 * self.cfg.s_num;
        let sig = g.value(out.sigma).data();
        let rad = g.value(out.radiance).data();
        Ok((0..positions.len())
            .map(|i| FieldSample {
                sigma: sig[i],
                radiance: rad[i * k3..(i + 1) * k3].to_vec(),
            })
            .collect())
    }

    pub fn records(&self, prefix: &str, optimizer: bool) -> Vec<Record> {
        let c = &self.cfg;
        let mut out = vec![
            Record::scalar(format!("{prefix}cfg.depth"), c.depth as f64),
            Record::scalar(format!("{prefix}cfg.width"), c.width as f64),
            Record::scalar(format!("{prefix}cfg.skip_layer"), c.skip_layer as f64),
            Record::scalar(format!("{prefix}cfg.bottleneck_width"), c.bottleneck_width as f64),
            Record::scalar(format!("{prefix}cfg.s_num"), c.s_num as f64),
            Record::scalar(
                format!("{prefix}cfg.freqs_position"),
                c.encoding.num_freqs_position as f64,
            ),
            Record::scalar(
                format!("{prefix}cfg.freqs_direction"),
                c.encoding.num_freqs_direction as f64,
            ),
            Record::scalar(
                format!("{prefix}cfg.include_identity"),
                f64::from(u8::from(c.encoding.include_identity)),
            ),
        ];
        out.extend(checkpoint::store_records(&self.store, prefix, optimizer));
        out
    }

    pub fn config_from_records(records: &[Record], prefix: &str) -> Result<FieldConfig> {
        let get = |k: &str| checkpoint::scalar(records, &format!("{prefix}cfg.{k}")).map(|v| v as usize);
        Ok(FieldConfig {
            encoding: EncodingConfig {
                num_freqs_position: get("freqs_position")?,
                num_freqs_direction: get("freqs_direction")?,
                include_identity: get("include_identity")? != 0,
            },
            depth: get("depth")?,
            width: get("width")?,
            skip_layer: get("skip_layer")?,
            bottleneck_width: get("bottleneck_width")?,
            s_num: get("s_num")?,
        })
    }

    pub fn from_records(records: &[Record], prefix: &str) -> Result<Self> {
        let cfg = Self::config_from_records(records, prefix)?;
        let mut field = Self::new(cfg, 0)?;
        checkpoint::load_store(&mut field.store, records, prefix)?;
        Ok(field)
    }
}

/// Coarse and fine fields with identical architecture and independent weights.
pub fn make_field(cfg: FieldConfig, seed: u64) -> Result<(SpectralField, SpectralField)> {
    Ok((
        SpectralField::new(cfg, seed.wrapping_mul(2).wrapping_add(1))?,
        SpectralField::new(cfg, seed.wrapping_mul(2).wrapping_add(2))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_diff_check;

    fn small(s_num: usize) -> FieldConfig {
        FieldConfig {
            encoding: EncodingConfig {
                num_freqs_position: 3,
                num_freqs_direction: 2,
                include_identity: true,
            },
            depth: 3,
            width: 8,
            skip_layer: 2,
            bottleneck_width: 6,
            s_num,
        }
    }

    #[test]
    fn encode_origin() {
        let e = encode([0.0; 3], 4, true);
        assert_eq!(e.len(), 27);
        assert!(e[..3].iter().all(|v| *v == 0.0));
        for k in 0..4 {
            let base = 3 + 6 * k;
            assert!(e[base..base + 3].iter().all(|v| *v == 0.0));
            assert!(e[base + 3..base + 6].iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn encode_unit_x() {
        let e = encode([1.0, 0.0, 0.0], 1, true);
        assert!(e[3].abs() < 1e-15);
        assert_eq!(e[6], -1.0);
        assert_eq!(EncodingConfig::default().position_width(), 63);
        assert_eq!(encode([0.3, 0.1, 0.2], 10, true).len(), 63);
    }

    proptest::proptest! {
        #[test]
        fn octaves_match_direct_trig(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            let e = encode([x, y, z], 10, false);
            for k in 0..10 {
                let f = std::f64::consts::PI * 2f64.powi(k as i32);
                for (i, v) in [x, y, z].iter().enumerate() {
                    proptest::prop_assert!((e[6 * k + i] - (f * v).sin()).abs() < 1e-11);
                    proptest::prop_assert!((e[6 * k + 3 + i] - (f * v).cos()).abs() < 1e-11);
                }
            }
        }
    }

    #[test]
    fn default_config_parameter_count() {
        // trunk0 63*256+256, trunk1-3,5-7 6*(256*256+256), trunk4 (256+63)*256+256,
        // sigma 256+1, feature 256*256+256, bottleneck (256+27)*128+128,
        // head 128*33+33.
        let expected = (63 * 256 + 256)
            + 6 * (256 * 256 + 256)
            + ((256 + 63) * 256 + 256)
            + (256 + 1)
            + (256 * 256 + 256)
            + ((256 + 27) * 128 + 128)
            + (128 * 33 + 33);
        assert_eq!(expected, 599_714);
        let f = SpectralField::new(FieldConfig::default(), 0).unwrap();
        assert_eq!(f.num_params(), expected);
    }

    #[test]
    fn make_field_determinism() {
        let (a, b) = make_field(small(4), 11).unwrap();
        let (c, _) = make_field(small(4), 11).unwrap();
        assert_eq!(a.store(), c.store());
        assert_ne!(a.store().params()[0].value, b.store().params()[0].value);
    }

    #[test]
    fn zero_sigma_head_gives_zero_density() {
        let mut f = SpectralField::new(small(2), 3).unwrap();
        let head = f.sigma_head();
        for id in [head.w, head.b] {
            f.store_mut().get_mut(id).value.data_mut().fill(0.0);
        }
        let pos = [[0.1, 0.2, 0.3], [-0.5, 0.9, 0.0]];
        let dir = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let out = f.eval(&pos, &dir).unwrap();
        assert!(out.iter().all(|s| s.sigma == 0.0));
        assert!(out
            .iter()
            .flat_map(|s| &s.radiance)
            .all(|r| *r > 0.0 && *r < 1.0));
        assert_eq!(out[0].radiance.len(), 6);
    }

    #[test]
    fn shapes_and_normalization() {
        let f = SpectralField::new(small(5), 1).unwrap();
        let mut g = Graph::new();
        let p = f.store().bind(&mut g);
        let pos = vec![[0.0; 3]; 7];
        let dir = vec![[0.0, 1.0, 0.0]; 7];
        let out = f.forward(&mut g, &p, &pos, &dir, None).unwrap();
        assert_eq!(g.shape(out.sigma), &[7, 1]);
        assert_eq!(g.shape(out.radiance), &[7, 15]);
        let bad = vec![[0.0, 2.0, 0.0]; 7];
        assert!(matches!(
            f.forward(&mut g, &p, &pos, &bad, None),
            Err(Error::NotNormalized(0))
        ));
    }

    #[test]
    fn sigma_is_view_independent() {
        let f = SpectralField::new(small(3), 5).unwrap();
        let pos = [[0.2, -0.1, 0.4]; 3];
        let s = 1.0 / 3f64.sqrt();
        let dirs = [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [s, s, s]];
        let out = f.eval(&pos, &dirs).unwrap();
        assert_eq!(out[0].sigma, out[1].sigma);
        assert_eq!(out[0].sigma, out[2].sigma);
    }

    #[test]
    fn band_count_only_changes_head() {
        let a = SpectralField::new(small(2), 9).unwrap();
        let mut b = SpectralField::new(small(7), 9).unwrap();
        // Share trunk and sigma-head weights; only the radiance head differs.
        for pa in a.store().params() {
            if pa.name.starts_with("trunk") || pa.name.starts_with("sigma") {
                let id = b.store().find(&pa.name).unwrap();
                b.store_mut().get_mut(id).value = pa.value.clone();
            }
        }
        let pos = [[0.3, 0.3, -0.2]];
        let dir = [[0.0, 1.0, 0.0]];
        assert_eq!(a.eval(&pos, &dir).unwrap()[0].sigma, b.eval(&pos, &dir).unwrap()[0].sigma);
    }

    #[test]
    fn field_gradient_check() {
        let f = SpectralField::new(small(2), 21).unwrap();
        let pos = [[0.1, 0.4, -0.3], [0.7, -0.2, 0.05], [-0.6, 0.3, 0.2]];
        let dir = [[0.0, 0.0, 1.0], [0.6, 0.8, 0.0], [0.0, -1.0, 0.0]];
        let target = Tensor::full(&[3, 6], 0.3);
        for name in ["trunk0.w", "trunk2.w", "sigma.w", "bottleneck.w", "radiance.b"] {
            let id = f.store().find(name).unwrap();
            let x = f.store().get(id).value.clone();
            let r = finite_diff_check(
                |g, v| {
                    let p = f.store().bind(g).with_override(id, v);
                    let out = f.forward(g, &p, &pos, &dir, None)?;
                    let t = g.constant(target.clone());
                    let l1 = g.mse(out.radiance, t)?;
                    let s = g.sum(out.sigma);
                    let s = g.scale(s, 0.1);
                    g.add(l1, s)
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "{name}: {r:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = SpectralField::new(small(3), 2).unwrap();
        let bytes = checkpoint::encode(&f.records("coarse/", true));
        let recs = checkpoint::decode(&bytes, "mem").unwrap();
        let g = SpectralField::from_records(&recs, "coarse/").unwrap();
        assert_eq!(g.config(), f.config());
        assert_eq!(g.store(), f.store());
        assert_eq!(checkpoint::encode(&g.records("coarse/", true)), bytes);
    }
}
