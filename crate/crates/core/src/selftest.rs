//! Oracle-equivalence battery run by `canseg selftest`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::complexity::{attention_cost_ratio, dense_attention_flops, reduced_attention_flops, Profiler};
use crate::error::Result;
use crate::gradcheck::{random_tensor, randomize_params};
use crate::io::{load_weights, read_ppm, save_weights, write_ppm, RgbImage};
use crate::label::LabelMap;
use crate::loss::{ohem_ce, OhemConfig};
use crate::model::{CanModel, ModelConfig, ReducedGlobalAttention};
use crate::nn::{spp_flatten, Backend, Forward, Init, ParamStore, SppConfig};
use crate::optim::{poly_lr, TrainSchedule};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = Result<(bool, String)>;
type Property = (&'static str, fn() -> Outcome);

/// Runs every property; a property that errors counts as failed.
pub fn run_selftest() -> Vec<Check> {
    let battery: [Property; 9] = [
        ("spp_positions_m110", spp_positions),
        ("attention_ratio_64x32", attention_ratio),
        ("lossless_spp_equals_dense_attention", lossless_equivalence),
        ("attention_flops_linear_vs_quadratic", flop_scaling),
        ("spatial_branch_stride_8", spatial_stride),
        ("weights_round_trip_and_crc", weights_round_trip),
        ("ppm_round_trip", ppm_round_trip),
        ("poly_lr_fixture", poly_fixture),
        ("ohem_keep_all_is_cross_entropy", ohem_degenerates),
    ];
    battery
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn spp_positions() -> Outcome {
    let spp = SppConfig::default();
    let mut g = Graph::<f32>::new();
    let store = ParamStore::new();
    let mut fw = Forward::new(&mut g, &store, false, false);
    let x = fw.input(Tensor::zeros([1, 2, 8, 8]));
    let flat = spp_flatten(&mut fw, x, &spp)?;
    let width = g.shape(flat).w();
    let m = spp.positions();
    Ok((
        m == 110 && width == 110,
        format!("scales {:?}: M = {m}, flattened width {width}", spp.scales),
    ))
}

fn attention_ratio() -> Outcome {
    let c = attention_cost_ratio(64, 32, 32, &SppConfig::default())?;
    let exact = c.dense_madds * c.m as u64 == c.reduced_madds * c.a as u64;
    Ok((
        exact && (c.a, c.m) == (2048, 110),
        format!("A/M = {}/{} ≈{:.1}×", c.a, c.m, c.ratio),
    ))
}

/// Affinity over every position computed with plain loops.
fn dense_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let [_, e, h, w] = q.shape().dims();
    let vc = v.shape().c();
    let a = h * w;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; vc * a];
    for i in 0..a {
        let logits: Vec<f64> = (0..a)
            .map(|j| (0..e).map(|c| qd[c * a + i] * kd[c * a + j]).sum())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..vc {
            out[c * a + i] = (0..a).map(|j| exps[j] / z * vd[c * a + j]).sum();
        }
    }
    out
}

fn lossless_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..20u64 {
        let side = if seed % 2 == 0 { 4 } else { 8 };
        let cfg = ModelConfig {
            spp: SppConfig::new(vec![side]),
            ga_embed_channels: 4,
            ga_value_channels: 6,
            ..ModelConfig::toy()
        };
        let channels = 5;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ga = ReducedGlobalAttention::build(&mut Init::new(&mut store, &mut rng), "ga", channels, &cfg)?;
        randomize_params(&mut store, 0.4, seed);
        let x = random_tensor(Shape::new(1, channels, side, side), 1.0, &mut rng);

        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, false, false);
        let xv = fw.input(x.clone());
        let reduced = ga.forward(&mut fw, xv)?;
        let q = ga.query.forward(&mut fw, xv)?;
        let k = ga.key.forward(&mut fw, xv)?;
        let v = ga.value_conv.forward(&mut fw, xv)?;
        let agg = dense_attention(g.value(q), g.value(k), g.value(v));

        let a = side * side;
        let proj = store.require(&ga.project.weight_name())?;
        let want: Vec<f64> = (0..channels * a)
            .map(|idx| {
                let (c, p) = (idx / a, idx % a);
                x.data()[idx]
                    + (0..cfg.ga_value_channels)
                        .map(|j| proj.data()[c * cfg.ga_value_channels + j] * agg[j * a + p])
                        .sum::<f64>()
            })
            .collect();
        let got = g.value(reduced).data();
        worst = got.iter().zip(&want).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        cases += 1;
    }
    Ok((
        worst < 1e-5,
        format!("{cases} cases at 4x4 and 8x8, max abs error {worst:.2e}"),
    ))
}

fn flop_scaling() -> Outcome {
    let cfg = ModelConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for (h, w) in [(8, 8), (16, 16), (32, 32)] {
        let (r1, r2) = (
            reduced_attention_flops(&cfg, 32, h, w)?,
            reduced_attention_flops(&cfg, 32, 2 * h, w)?,
        );
        let (d1, d2) = (
            dense_attention_flops(h, w, 32, 32)?,
            dense_attention_flops(2 * h, w, 32, 32)?,
        );
        ok &= r2.abs_diff(2 * r1) <= 1 && d2 == 4 * d1;
        parts.push(format!(
            "{h}x{w}: reduced x{:.3}, dense x{:.3}",
            r2 as f64 / r1 as f64,
            d2 as f64 / d1 as f64
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn spatial_stride() -> Outcome {
    let model = CanModel::new(ModelConfig::toy(), 0)?;
    let mut bad = Vec::new();
    let sizes = [(16, 16), (64, 64), (32, 96), (128, 48), (1024, 2048)];
    for (h, w) in sizes {
        let mut p = Profiler::new(&model.params, false);
        let x = p.input(Shape::new(1, 3, h, w));
        let y = model.layers.spatial.forward(&mut p, x)?;
        let s = p.shape(y);
        if (s.h(), s.w()) != (h / 8, w / 8) {
            bad.push(format!("{h}x{w} -> {}x{}", s.h(), s.w()));
        }
    }
    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} extents", sizes.len())
        } else {
            bad.join(", ")
        },
    ))
}

fn weights_round_trip() -> Outcome {
    let cfg = ModelConfig::toy();
    let model = CanModel::new(cfg.clone(), 3)?;
    let bytes = save_weights(&model)?;
    let back = load_weights(&bytes, &cfg)?;
    let exact = save_weights(&back)? == bytes
        && back.params.iter().zip(model.params.iter()).all(|((_, a), (_, b))| {
            a.tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let mut bad = bytes.clone();
    let at = bad.len() / 2;
    bad[at] ^= 0x10;
    let detected = load_weights(&bad, &cfg).is_err();
    Ok((
        exact && detected,
        format!(
            "{} bytes, bit-exact {exact}, corruption detected {detected}",
            bytes.len()
        ),
    ))
}

fn ppm_round_trip() -> Outcome {
    let (w, h) = (7, 5);
    let img = RgbImage::new(w, h, (0..3 * w * h).map(|i| (i * 37 % 256) as u8).collect())?;
    let bytes = write_ppm(&img);
    Ok((read_ppm(&bytes)? == img, format!("{w}x{h}, {} bytes", bytes.len())))
}

fn poly_fixture() -> Outcome {
    let s = TrainSchedule {
        base_lr: 1.0,
        max_iter: 1000,
        ..Default::default()
    };
    let (start, half, end) = (poly_lr(0, &s), poly_lr(500, &s), poly_lr(1000, &s));
    let ok = (start - 1.0).abs() < 1e-12 && (half - 0.4641).abs() < 1e-4 && end == 0.0;
    Ok((ok, format!("lr(0) = {start}, lr(max/2) = {half:.6}, lr(max) = {end}")))
}

fn ohem_degenerates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random_tensor(Shape::new(2, 3, 4, 4), 2.0, &mut rng);
    let data: Vec<u8> = (0..32).map(|i| if i % 9 == 4 { 255 } else { (i % 3) as u8 }).collect();
    let labels = LabelMap::new(2, 4, 4, data)?;
    let cfg = OhemConfig {
        prob_threshold: 1.0,
        min_kept: Some(32),
        ..Default::default()
    };
    let mut g = Graph::new();
    let lv = g.leaf(logits.clone(), false);
    let term = ohem_ce(&mut g, lv, &labels, &cfg)?;
    let got = g.value(term.loss).item();
    let (k, plane) = (3, 16);
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &l) in labels.data.iter().enumerate() {
        if l == 255 {
            continue;
        }
        let (b, p) = (i / plane, i % plane);
        let z: Vec<f64> = (0..k).map(|c| logits.data()[(b * k + c) * plane + p]).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        sum += lse - z[l as usize];
        n += 1;
    }
    let want = sum / n as f64;
    Ok((
        (got - want).abs() < 1e-12 && term.kept == n,
        format!("{n} pixels, ohem {got:.9} vs ce {want:.9}"),
    ))
}
