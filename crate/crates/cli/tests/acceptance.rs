//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Thresholds are pinned below.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use canseg_core::complexity::{dense_attention_flops, profile, reduced_attention_flops, Profiler};
use canseg_core::gradcheck::{gradcheck_model_config, random_tensor, randomize_params};
use canseg_core::io::{load_weights, save_weights};
use canseg_core::label::LabelMap;
use canseg_core::loss::{ohem_ce, OhemConfig};
use canseg_core::model::{CanModel, FeatureFusion, ModelConfig, ReducedGlobalAttention};
use canseg_core::nn::{spp_flatten, Backend, Conv, Forward, GhostConv, GhostConvConfig, Init, ParamStore, SppConfig};
use canseg_core::optim::{poly_lr, TrainSchedule};
use canseg_core::run_config::RunConfig;
use canseg_core::train::{evaluate, validation_set, Trainer};
use canseg_core::{Graph, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const M_DEFAULT: usize = 110;
const GA_GRID: (usize, usize) = (64, 32);
const LOSSLESS_TOL: f64 = 1e-5;
const LOSSLESS_CASES: u64 = 20;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const FFM_RATIO_MAX: f64 = 0.6;
const TOY_MIOU_MIN: f64 = 0.90;
const TOY_MAX_ITER: usize = 3000;
const TOY_VAL_SAMPLES: usize = 32;
const TOY_BUDGET: Duration = Duration::from_secs(600);
const LOSS_SUM_TOL: f64 = 1e-6;
const POLY_TOL: f64 = 1e-6;
const REF_FLOPS: f64 = 12.03e9;
const REF_PARAMS: f64 = 2.64e6;
const BAND: f64 = 0.5;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn canseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canseg"))
        .args(args)
        .output()
        .expect("canseg binary runs")
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn c1_pooled_positions() -> Outcome {
    let spp = SppConfig::default();
    let mut widths = Vec::new();
    for (h, w) in [(8, 8), (16, 32)] {
        let mut g = Graph::<f32>::new();
        let store = ParamStore::new();
        let mut fw = Forward::new(&mut g, &store, false, false);
        let x = fw.input(Tensor::zeros([1, 3, h, w]));
        let flat = spp_flatten(&mut fw, x, &spp)?;
        widths.push(g.shape(flat).w());
    }
    let closed: usize = spp.scales.iter().map(|n| n * n).sum();
    let text = canseg(&["profile"]);
    let text_ok = text.status.success() && String::from_utf8(text.stdout)?.contains("M = 110 pooled keys");
    let json = canseg(&["profile", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout)?;
    let json_m = v["attention"]["m"].as_u64();
    let ok = closed == M_DEFAULT
        && spp.positions() == M_DEFAULT
        && widths.iter().all(|&w| w == M_DEFAULT)
        && text_ok
        && json_m == Some(M_DEFAULT as u64);
    Ok((
        ok,
        format!(
            "scales {:?}, flattened widths {widths:?}, profile text {text_ok}, json m {json_m:?}",
            spp.scales
        ),
    ))
}

fn c2_attention_ratio() -> Outcome {
    let cfg = ModelConfig::default();
    let (h, w) = GA_GRID;
    let (e, vc) = (cfg.ga_embed_channels, cfg.ga_value_channels);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ga = ReducedGlobalAttention::build(&mut Init::new(&mut store, &mut rng), "ga", 96, &cfg)?;
    let shape = Shape::new(1, 96, h, w);
    let mut p = Profiler::new(&store, false);
    let x = p.input(shape);
    ga.forward(&mut p, x)?;
    let reduced = p.finish(shape).subtotal("ga", &["matmul"]).madd;

    let empty = ParamStore::new();
    let mut p = Profiler::new(&empty, false);
    let a = h * w;
    let q = p.input(Shape::new(1, 1, a, e));
    let k = p.input(Shape::new(1, 1, e, a));
    let v = p.input(Shape::new(1, 1, a, vc));
    let logits = p.matmul(q, k)?;
    let aff = p.softmax(logits)?;
    p.matmul(aff, v)?;
    let dense = p.finish(Shape::new(1, 1, a, e)).subtotal("", &["matmul"]).madd;

    let exact = dense * M_DEFAULT as u64 == reduced * a as u64;
    let ratio = dense as f64 / reduced as f64;
    let cli = canseg(&["profile", "--attention-only", "--height", "64", "--width", "32"]);
    let cli_ok = cli.status.success() && String::from_utf8(cli.stdout)?.contains("≈18.6×");
    Ok((
        exact && format!("{ratio:.1}") == "18.6" && cli_ok,
        format!("dense {dense} / reduced {reduced} MAdd = {ratio:.4} (2048/110 exact {exact}), cli {cli_ok}"),
    ))
}

/// Output of a ghost convolution recomputed with loops from stored weights.
fn ghost_oracle(store: &ParamStore<f64>, name: &str, x: &[f64], cin: usize, out: usize, side: usize) -> Vec<f64> {
    let a = side * side;
    let prim_w = store.get(&format!("{name}.primary.weight")).expect("primary weight");
    let [p, pin, pk, _] = prim_w.shape().dims();
    assert_eq!((pin, pk), (cin, 1));
    let mut y = vec![0.0; out * a];
    for o in 0..p {
        for c in 0..cin {
            let wv = prim_w.data()[o * cin + c];
            for i in 0..a {
                y[o * a + i] += wv * x[c * a + i];
            }
        }
    }
    if out > p {
        let cheap_w = store.get(&format!("{name}.cheap.weight")).expect("cheap weight");
        let k = cheap_w.shape().dims()[2];
        let r = k as isize / 2;
        for j in 0..out - p {
            let src = j % p;
            for yy in 0..side {
                for xx in 0..side {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let (sy, sx) = (yy as isize + dy as isize - r, xx as isize + dx as isize - r);
                            if (0..side as isize).contains(&sy) && (0..side as isize).contains(&sx) {
                                s += cheap_w.data()[(j * k + dy) * k + dx]
                                    * y[src * a + sy as usize * side + sx as usize];
                            }
                        }
                    }
                    y[(p + j) * a + yy * side + xx] = s;
                }
            }
        }
    }
    y
}

/// Every position attends to every position, per group, then projects and
/// adds the input.
fn dense_nonlocal(store: &ParamStore<f64>, cfg: &ModelConfig, x: &[f64], c: usize, side: usize) -> Vec<f64> {
    let a = side * side;
    let (e, vc, g) = (cfg.ga_embed_channels, cfg.ga_value_channels, cfg.ga_groups);
    let q = ghost_oracle(store, "ga.query", x, c, e, side);
    let k = ghost_oracle(store, "ga.key", x, c, e, side);
    let v = ghost_oracle(store, "ga.value", x, c, vc, side);
    let (eg, vg) = (e / g, vc / g);
    let mut agg = vec![0.0; vc * a];
    for gi in 0..g {
        for i in 0..a {
            let logits: Vec<f64> = (0..a)
                .map(|j| {
                    (0..eg)
                        .map(|ch| q[(gi * eg + ch) * a + i] * k[(gi * eg + ch) * a + j])
                        .sum()
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for ch in gi * vg..(gi + 1) * vg {
                agg[ch * a + i] = (0..a).map(|j| (logits[j] - max).exp() / z * v[ch * a + j]).sum();
            }
        }
    }
    let proj = store.get("ga.project.weight").expect("projection weight");
    (0..c * a)
        .map(|idx| {
            let (o, pos) = (idx / a, idx % a);
            x[idx] + (0..vc).map(|j| proj.data()[o * vc + j] * agg[j * a + pos]).sum::<f64>()
        })
        .collect()
}

fn c3_lossless_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..LOSSLESS_CASES {
        let side = if seed % 2 == 0 { 4 } else { 8 };
        let cfg = ModelConfig {
            spp: SppConfig::new(vec![side]),
            ga_embed_channels: 6,
            ga_value_channels: 8,
            ga_groups: if seed % 4 < 2 { 1 } else { 2 },
            ..ModelConfig::toy()
        };
        let channels = 5;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let ga = ReducedGlobalAttention::build(&mut Init::new(&mut store, &mut rng), "ga", channels, &cfg)?;
        randomize_params(&mut store, 0.4, seed);
        let x = random_tensor(Shape::new(1, channels, side, side), 1.0, &mut rng);
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, &store, false, false);
        let xv = fw.input(x.clone());
        let y = ga.forward(&mut fw, xv)?;
        let want = dense_nonlocal(&store, &cfg, x.data(), channels, side);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((
        worst < LOSSLESS_TOL,
        format!("{LOSSLESS_CASES} seeds at 4x4 and 8x8, groups 1 and 2, max abs error {worst:.2e}"),
    ))
}

fn c4_flop_scaling() -> Outcome {
    let cfg = ModelConfig::default();
    let (e, v) = (cfg.ga_embed_channels, cfg.ga_value_channels);
    let mut ok = true;
    let mut parts = Vec::new();
    for (h, w) in [(8, 8), (16, 16), (32, 64)] {
        let (r1, r2) = (
            reduced_attention_flops(&cfg, 96, h, w)?,
            reduced_attention_flops(&cfg, 96, h, 2 * w)?,
        );
        let (d1, d2) = (
            dense_attention_flops(h, w, e, v)?,
            dense_attention_flops(h, 2 * w, e, v)?,
        );
        ok &= r2.abs_diff(2 * r1) <= 1 && d2 == 4 * d1;
        parts.push(format!("{h}x{w}: reduced {r1}->{r2}, dense {d1}->{d2}"));
    }
    Ok((ok, parts.join("; ")))
}

fn c5_spatial_stride() -> Outcome {
    let model = CanModel::new(ModelConfig::toy(), 0)?;
    let mut bad = Vec::new();
    let mut cases = 0;
    for h in [8, 16, 24, 64, 120] {
        for w in [8, 32, 72, 128] {
            let mut g = Graph::<f32>::new();
            let mut fw = Forward::new(&mut g, &model.params, false, false);
            let x = fw.input(Tensor::full([1, 3, h, w], 0.25));
            let y = model.layers.spatial.forward(&mut fw, x)?;
            let s = g.shape(y);
            if (s.h(), s.w()) != (h / 8, w / 8) {
                bad.push(format!("{h}x{w} -> {}x{}", s.h(), s.w()));
            }
            cases += 1;
        }
    }
    for (h, w) in [(512, 1024), (1024, 2048)] {
        let mut p = Profiler::new(&model.params, false);
        let x = p.input(Shape::new(1, 3, h, w));
        let y = model.layers.spatial.forward(&mut p, x)?;
        let s = p.shape(y);
        if (s.h(), s.w()) != (h / 8, w / 8) {
            bad.push(format!("{h}x{w} -> {}x{}", s.h(), s.w()));
        }
        cases += 1;
    }
    let detail = if bad.is_empty() {
        format!("{cases} extents map to H/8 x W/8")
    } else {
        bad.join(", ")
    };
    Ok((bad.is_empty(), detail))
}

fn c6_gradcheck() -> Outcome {
    let cfg = gradcheck_model_config();
    let start = Instant::now();
    let out = canseg(&["gradcheck", "--json"]);
    let elapsed = start.elapsed();
    let entries: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout)?;
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| e["passed"] != true)
        .map(|e| e["block"].as_str().unwrap_or("?").to_string())
        .collect();
    let worst = entries
        .iter()
        .filter_map(|e| e["max_rel_error"].as_f64())
        .fold(0.0, f64::max);
    let has_model = entries.iter().any(|e| e["block"] == "model");
    let ok =
        out.status.success() && failed.is_empty() && has_model && cfg.num_classes == 4 && elapsed < GRADCHECK_BUDGET;
    Ok((
        ok,
        format!(
            "{} blocks incl. model ({has_model}), worst rel err {worst:.2e}, {:.1}s{}",
            entries.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(", "))
            }
        ),
    ))
}

fn ffm_flops(mid: usize) -> Result<u64, Box<dyn std::error::Error>> {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ffm = FeatureFusion::build(
        &mut Init::new(&mut store, &mut rng),
        "ffm",
        cfg.ffm_in_channels(),
        mid,
        cfg.ffm_out_channels,
    )?;
    let mut p = Profiler::new(&store, false);
    let s = p.input(Shape::new(1, cfg.spatial_channels[3], 128, 256));
    let c = p.input(Shape::new(1, cfg.context_out_channels, 128, 256));
    ffm.forward(&mut p, s, c)?;
    Ok(p.finish(Shape::new(1, 3, 1024, 2048)).totals.flops)
}

fn c7_ffm_ratio() -> Outcome {
    let cfg = ModelConfig::default();
    let with = ffm_flops(cfg.ffm_mid_channels)?;
    let without = ffm_flops(cfg.ffm_in_channels())?;
    let ratio = with as f64 / without as f64;
    Ok((
        ratio < FFM_RATIO_MAX,
        format!(
            "bottleneck {} of {} channels: {with} / {without} FLOPs = {ratio:.3}",
            cfg.ffm_mid_channels,
            cfg.ffm_in_channels()
        ),
    ))
}

fn c8_ghost_params() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (cin, cout) in [(16, 16), (96, 32), (32, 96), (40, 7)] {
        let cfg = GhostConvConfig::new(cout);
        assert_eq!(cfg.ratio, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let ghost = GhostConv::build(&mut init, "g", cin, cfg)?;
        let plain = Conv::build(&mut init, "p", cin, cout, 1, 1, 1, false)?;
        let shape = Shape::new(1, cin, 16, 16);
        let count = |f: &dyn Fn(&mut Profiler, usize)| {
            let mut p = Profiler::new(&store, false);
            let x = p.input(shape);
            f(&mut p, x);
            p.finish(shape).totals.params
        };
        let g = count(&|p, x| {
            ghost.forward(p, x).expect("ghost forward");
        });
        let pl = count(&|p, x| {
            plain.forward(p, x).expect("plain forward");
        });
        let prim = cout.div_ceil(2);
        let closed = (cin * prim * cfg.primary_kernel.pow(2) + (cout - prim) * cfg.cheap_kernel.pow(2)) as u64;
        ok &= g < pl && g == closed && pl == (cin * cout) as u64;
        parts.push(format!("{cin}->{cout}: ghost {g} (closed {closed}) < plain {pl}"));
    }
    Ok((ok, parts.join("; ")))
}

/// Trains the toy config once; feeds both the mIoU and the loss-sum criteria.
struct ToyRun {
    miou: f64,
    iters: usize,
    elapsed: Duration,
    worst_sum_gap: f64,
    deterministic: bool,
    config_ok: bool,
}

const DETERMINISM_STEPS: usize = 20;

fn toy_run() -> Result<ToyRun, Box<dyn std::error::Error>> {
    let cfg = RunConfig::load(&config_path("toy.json"))?;
    let t = &cfg.train;
    let config_ok = t.seed == 1
        && (t.data.height, t.data.width) == (64, 64)
        && cfg.model.num_classes == 4
        && t.schedule.max_iter <= TOY_MAX_ITER
        && t.data.val_samples == TOY_VAL_SAMPLES;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone())?;
    let mut worst_sum_gap = 0.0f64;
    let mut early = Vec::new();
    while !trainer.done() {
        let l = trainer.step()?.loss;
        worst_sum_gap = worst_sum_gap.max((l.total - (l.l_p + l.l_c1 + l.l_c2)).abs());
        if trainer.iter == DETERMINISM_STEPS {
            early = save_weights(&trainer.model)?;
        }
    }
    let val = validation_set(&cfg.train, cfg.model.num_classes)?;
    let miou = evaluate(&trainer.model, &val, cfg.train.batch_size)?.mean;
    let elapsed = start.elapsed();

    let mut again = Trainer::new(cfg.model.clone(), cfg.train.clone())?;
    for _ in 0..DETERMINISM_STEPS {
        again.step()?;
    }
    Ok(ToyRun {
        miou,
        iters: trainer.iter,
        elapsed,
        worst_sum_gap,
        deterministic: !early.is_empty() && save_weights(&again.model)? == early,
        config_ok,
    })
}

fn c9_toy_miou(run: &ToyRun) -> Outcome {
    Ok((
        run.config_ok && run.miou >= TOY_MIOU_MIN && run.deterministic && run.elapsed <= TOY_BUDGET,
        format!(
            "val mIoU {:.4} on {TOY_VAL_SAMPLES} samples after {} iters in {:.0}s, config {}, rerun bit-identical {}",
            run.miou,
            run.iters,
            run.elapsed.as_secs_f64(),
            run.config_ok,
            run.deterministic
        ),
    ))
}

fn c10_loss_sum(run: &ToyRun) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random_tensor(Shape::new(2, 4, 6, 6), 2.0, &mut rng);
    let data: Vec<u8> = (0..72)
        .map(|i| if i % 11 == 3 { 255 } else { (i * 7 % 4) as u8 })
        .collect();
    let labels = LabelMap::new(2, 6, 6, data)?;
    let valid = labels.data.iter().filter(|&&l| l != 255).count();
    let cfg = OhemConfig {
        prob_threshold: 1.0,
        min_kept: Some(valid),
        ..Default::default()
    };
    let mut g = Graph::new();
    let lv = g.leaf(logits.clone(), false);
    let term = ohem_ce(&mut g, lv, &labels, &cfg)?;
    let ohem = g.value(term.loss).item();
    let plane = 36;
    let mut ce = 0.0;
    for (i, &l) in labels.data.iter().enumerate().filter(|(_, &l)| l != 255) {
        let (b, p) = (i / plane, i % plane);
        let z: Vec<f64> = (0..4).map(|c| logits.data()[(b * 4 + c) * plane + p]).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ce += max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - z[l as usize];
    }
    ce /= valid as f64;
    let gap = (ohem - ce).abs();
    Ok((
        run.worst_sum_gap <= LOSS_SUM_TOL && gap <= LOSS_SUM_TOL,
        format!(
            "max |total - sum| over {} steps {:.2e}; ohem {ohem:.9} vs ce {ce:.9}",
            run.iters, run.worst_sum_gap
        ),
    ))
}

fn c11_poly_lr() -> Outcome {
    let s = TrainSchedule {
        base_lr: 0.01,
        max_iter: 1000,
        power: 0.9,
        ..Default::default()
    };
    let (start, half, end) = (poly_lr(0, &s), poly_lr(500, &s), poly_lr(1000, &s));
    let want_half = s.base_lr * (1.0 - 0.5f64.powf(0.9));
    let ok = (start - s.base_lr).abs() <= POLY_TOL
        && end.abs() <= POLY_TOL
        && (half - want_half).abs() <= POLY_TOL
        && (half / s.base_lr - 0.4641).abs() < 1e-4;
    Ok((
        ok,
        format!(
            "lr(0) = {start}, lr(500) = {half:.8} ({:.4} x base), lr(1000) = {end}",
            half / s.base_lr
        ),
    ))
}

fn c12_paper_scale() -> Outcome {
    let cfg = RunConfig::load(&config_path("paper-scale.json"))?;
    let model = CanModel::new(cfg.model, 0)?;
    let rep = profile(&model.layers, &model.params, Shape::new(1, 3, 1024, 2048), false)?;
    let f = rep.totals.flops as f64 / REF_FLOPS;
    let p = rep.totals.params as f64 / REF_PARAMS;
    let band = (1.0 - BAND)..=(1.0 + BAND);
    Ok((
        band.contains(&f) && band.contains(&p),
        format!(
            "{:.3} GFLOPs ({f:.2} of reference), {:.3}M params ({p:.2} of reference)",
            rep.totals.flops as f64 / 1e9,
            rep.totals.params as f64 / 1e6
        ),
    ))
}

fn c13_weights() -> Outcome {
    let cfg = ModelConfig::toy();
    let model = CanModel::new(cfg.clone(), 7)?;
    let bytes = save_weights(&model)?;
    let back = load_weights(&bytes, &cfg)?;
    let same_bits = back.params.iter().zip(model.params.iter()).all(|((na, a), (nb, b))| {
        na == nb
            && a.tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let exact = same_bits && back.params.len() == model.params.len() && save_weights(&back)? == bytes;
    let mut detected = 0;
    let probes = [bytes.len() / 3, bytes.len() / 2, bytes.len() - 5];
    for at in probes {
        let mut bad = bytes.clone();
        bad[at] ^= 0x04;
        detected += load_weights(&bad, &cfg).is_err() as usize;
    }
    Ok((
        exact && detected == probes.len(),
        format!(
            "{} bytes bit-exact {exact}, {detected}/{} flipped bytes rejected",
            bytes.len(),
            probes.len()
        ),
    ))
}

fn report(id: &str, name: &str, outcome: Outcome) -> bool {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{} {id} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report("C1", "pooled_positions_m110", c1_pooled_positions());
    all &= report("C2", "attention_madd_ratio_64x32", c2_attention_ratio());
    all &= report("C3", "lossless_spp_equals_dense_nonlocal", c3_lossless_equivalence());
    all &= report("C4", "attention_flops_linear_vs_quadratic", c4_flop_scaling());
    all &= report("C5", "spatial_branch_stride_8", c5_spatial_stride());
    all &= report("C6", "gradcheck_blocks_and_model", c6_gradcheck());
    all &= report("C7", "ffm_bottleneck_ratio", c7_ffm_ratio());
    all &= report("C8", "ghost_params_closed_form", c8_ghost_params());
    match toy_run() {
        Ok(run) => {
            all &= report("C9", "toy_training_miou", c9_toy_miou(&run));
            all &= report("C10", "loss_sum_and_ohem", c10_loss_sum(&run));
        }
        Err(e) => {
            let msg = e.to_string();
            all &= report("C9", "toy_training_miou", Err(msg.clone().into()));
            all &= report("C10", "loss_sum_and_ohem", Err(msg.into()));
        }
    }
    all &= report("C11", "poly_lr_schedule", c11_poly_lr());
    all &= report("C12", "paper_scale_complexity", c12_paper_scale());
    all &= report("C13", "weights_round_trip_crc", c13_weights());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
