//! Finite-difference suite over every differentiable building block.

use crate::error::Result;
use crate::field::{EncodingConfig, FieldConfig, SpectralField};
use crate::fusion::{AttentionGate, SaPlacement, SaUnet, SaUnetConfig, SpectrumAttention};
use crate::nn::gradcheck::{finite_diff_check, GradCheckReport};
use crate::nn::{Graph, Init, ParameterStore, Tensor, Var};

pub const SUITE_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

/// Uniform values in `[lo, hi)`.
fn sample(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut t = Init::new(seed).uniform(shape, 1);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = lo + (hi - lo) * 0.5 * (*v + 1.0));
    t
}

/// Values bounded away from zero so relu kinks are never straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = sample(shape, seed, -1.0, 1.0);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v < 0.0 { *v - 0.1 } else { *v + 0.1 });
    t
}

struct Suite {
    cases: Vec<SuiteCase>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, f: F, x: &Tensor) -> Result<()>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let report = finite_diff_check(f, x, SUITE_TOL)?;
        self.cases.push(SuiteCase {
            name: name.into(),
            report,
        });
        Ok(())
    }
}

fn squash(g: &mut Graph, y: Var) -> Var {
    let s = g.sigmoid(y);
    g.sum(s)
}

fn layer_cases(s: &mut Suite) -> Result<()> {
    let w = sample(&[5, 3], 2, -0.5, 0.5);
    let b = sample(&[3], 3, -0.5, 0.5);
    let x = sample(&[4, 5], 1, -1.0, 1.0);
    s.check(
        "dense/x",
        |g, v| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.dense(v, wv, bv)?;
            Ok(squash(g, y))
        },
        &x,
    )?;
    s.check(
        "dense/w",
        |g, v| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.dense(xv, v, bv)?;
            Ok(squash(g, y))
        },
        &w,
    )?;

    let img = sample(&[2, 2, 6, 6], 4, -1.0, 1.0);
    let k = sample(&[3, 2, 3, 3], 5, -0.4, 0.4);
    let kb = sample(&[3], 6, -0.2, 0.2);
    for stride in [1, 2] {
        s.check(
            &format!("conv2d/s{stride}/x"),
            |g, v| {
                let (kv, bv) = (g.constant(k.clone()), g.constant(kb.clone()));
                let y = g.conv2d(v, kv, bv, stride, 1)?;
                Ok(squash(g, y))
            },
            &img,
        )?;
        s.check(
            &format!("conv2d/s{stride}/k"),
            |g, v| {
                let (xv, bv) = (g.constant(img.clone()), g.constant(kb.clone()));
                let y = g.conv2d(xv, v, bv, stride, 1)?;
                Ok(squash(g, y))
            },
            &k,
        )?;
    }

    let a = away_from_zero(&[3, 4], 7);
    s.check(
        "relu",
        |g, v| {
            let r = g.relu(v);
            let q = g.scale(r, 0.7);
            Ok(squash(g, q))
        },
        &a,
    )?;
    s.check("sigmoid", |g, v| Ok(squash(g, v)), &a)?;

    let planes = sample(&[1, 3, 4, 6], 8, -1.0, 1.0);
    s.check(
        "pool/global_avg",
        |g, v| {
            let p = g.global_avg_pool(v)?;
            Ok(squash(g, p))
        },
        &planes,
    )?;
    s.check(
        "pool/downsample2",
        |g, v| {
            let p = g.downsample2(v)?;
            Ok(squash(g, p))
        },
        &planes,
    )?;
    s.check(
        "pool/upsample2",
        |g, v| {
            let p = g.upsample2(v)?;
            Ok(squash(g, p))
        },
        &planes,
    )?;
    Ok(())
}

fn render_cases(s: &mut Suite) -> Result<()> {
    let n = 6;
    let deltas: Vec<f64> = (0..2 * n).map(|i| 0.1 + 0.02 * (i % n) as f64).collect();
    let sigma = sample(&[2 * n, 1], 20, 0.1, 3.0);
    let rad = sample(&[2 * n, 6], 21, 0.0, 1.0);
    s.check(
        "volume_render/sigma",
        |g, v| {
            let r = g.constant(rad.clone());
            let y = g.volume_render(v, r, n, deltas.clone(), 1.0)?;
            Ok(squash(g, y))
        },
        &sigma,
    )?;
    s.check(
        "volume_render/radiance",
        |g, v| {
            let sg = g.constant(sigma.clone());
            let y = g.volume_render(sg, v, n, deltas.clone(), 0.0)?;
            Ok(squash(g, y))
        },
        &rad,
    )?;
    let target = sample(&[3, 6], 22, 0.0, 1.0);
    s.check(
        "band_mse",
        |g, v| {
            let t = g.constant(target.clone());
            g.band_mse(v, t, &[2.0, 3.5])
        },
        &sample(&[3, 6], 23, 0.0, 1.0),
    )?;
    Ok(())
}

fn attention_cases(s: &mut Suite) -> Result<()> {
    let mut store = ParameterStore::new();
    let ag = AttentionGate::new(&mut store, &mut Init::new(30), "ag", 4, 2);
    let skip = sample(&[1, 4, 4, 4], 31, 0.0, 1.0);
    let gate = sample(&[1, 2, 2, 2], 32, 0.0, 1.0);
    s.check(
        "attention_gate/skip",
        |g, v| {
            let b = store.bind(g);
            let gv = g.constant(gate.clone());
            let y = ag.forward(g, &b, v, gv)?;
            Ok(squash(g, y))
        },
        &skip,
    )?;
    let theta = ag.theta.k;
    s.check(
        "attention_gate/theta",
        |g, v| {
            let b = store.bind(g).with_override(theta, v);
            let (sv, gv) = (g.constant(skip.clone()), g.constant(gate.clone()));
            let y = ag.forward(g, &b, sv, gv)?;
            Ok(squash(g, y))
        },
        &store.get(theta).value.clone(),
    )?;

    let mut store = ParameterStore::new();
    let sa = SpectrumAttention::new(&mut store, &mut Init::new(33), "sa", 4, 2);
    for c in &sa.convs {
        store.get_mut(c.b).value.data_mut().fill(0.05);
    }
    let x = sample(&[1, 4, 3, 3], 34, 0.0, 1.0);
    s.check(
        "spectrum_attention/x",
        |g, v| {
            let b = store.bind(g);
            let y = sa.forward(g, &b, v)?;
            Ok(squash(g, y))
        },
        &x,
    )?;
    let se = sa.squeeze.w;
    s.check(
        "spectrum_attention/se",
        |g, v| {
            let b = store.bind(g).with_override(se, v);
            let xv = g.constant(x.clone());
            let y = sa.forward(g, &b, xv)?;
            Ok(squash(g, y))
        },
        &store.get(se).value.clone(),
    )?;
    Ok(())
}

fn network_cases(s: &mut Suite) -> Result<()> {
    let cfg = FieldConfig {
        encoding: EncodingConfig {
            num_freqs_position: 3,
            num_freqs_direction: 2,
            include_identity: true,
        },
        depth: 3,
        width: 8,
        skip_layer: 2,
        bottleneck_width: 6,
        s_num: 2,
    };
    let f = SpectralField::new(cfg, 40)?;
    let pos: Vec<[f64; 3]> = (0..5)
        .map(|i| [0.1 * i as f64 - 0.2, 0.05 * i as f64, 0.3 - 0.1 * i as f64])
        .collect();
    let dir: Vec<[f64; 3]> = (0..5)
        .map(|i| crate::render::normalize([1.0, 0.2 * i as f64, -0.5]))
        .collect();
    let target = sample(&[5, 6], 41, 0.0, 1.0);
    for name in ["trunk0.w", "trunk2.w", "sigma.w", "bottleneck.w", "radiance.b"] {
        let id = f.store().find(name).expect("field parameter");
        s.check(
            &format!("field/{name}"),
            |g, v| {
                let p = f.store().bind(g).with_override(id, v);
                let out = f.forward(g, &p, &pos, &dir, None)?;
                let t = g.constant(target.clone());
                let l = g.mse(out.radiance, t)?;
                let sg = g.sum(out.sigma);
                let sg = g.scale(sg, 0.1);
                g.add(l, sg)
            },
            &f.store().get(id).value.clone(),
        )?;
    }

    let net = SaUnet::new(
        SaUnetConfig {
            s_num: 1,
            base_channels: 2,
            sa_placement: SaPlacement::E1,
            se_reduction: 2,
            attention_gates: true,
        },
        42,
    )?;
    let x = sample(&[1, 3, 8, 8], 43, 0.0, 1.0);
    let picks = ["enc1.conv1.k", "sa1.se1.w", "gate1.psi.k", "dec1.conv2.k", "out.b"];
    for p in net.store().params() {
        if !picks.iter().any(|n| p.name == *n) {
            continue;
        }
        let id = net.store().find(&p.name).expect("network parameter");
        s.check(
            &format!("saunet/{}", p.name),
            |g, v| {
                let b = net.store().bind(g).with_override(id, v);
                let xv = g.constant(x.clone());
                let y = net.forward(g, &b, xv)?;
                let t = g.constant(Tensor::full(&[1, 3, 8, 8], 0.2));
                g.mse(y, t)
            },
            &p.value,
        )?;
    }
    Ok(())
}

/// Runs the whole suite; deterministic.
pub fn gradcheck_suite() -> Result<Vec<SuiteCase>> {
    let mut s = Suite { cases: Vec::new() };
    layer_cases(&mut s)?;
    render_cases(&mut s)?;
    attention_cases(&mut s)?;
    network_cases(&mut s)?;
    Ok(s.cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_family() {
        let cases = gradcheck_suite().unwrap();
        for c in &cases {
            assert!(c.report.passed(), "{}: {:?}", c.name, c.report);
            assert!(c.report.checked > 0, "{}", c.name);
        }
        for family in ["dense", "conv2d", "relu", "sigmoid", "pool", "attention_gate", "spectrum_attention", "field", "saunet"] {
            assert!(cases.iter().any(|c| c.name.starts_with(family)), "{family}");
        }
        assert!(cases.iter().filter(|c| c.name.starts_with("saunet")).count() >= 4);
    }
}
