use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{Graph, OpKind, Var};
use crate::model::{CanModel, FeatureFusion, ModelConfig, ReducedGlobalAttention};
use crate::nn::{Conv, Forward, GhostConv, GhostConvConfig, Init};
use crate::tensor::Tensor;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Recount of an executed graph, written against autograd node kinds rather
/// than the profiler's op table.
fn graph_totals(g: &Graph<f32>, params: &[Var]) -> Totals {
    let mut t = Totals {
        params: params.iter().map(|&p| g.shape(p).numel() as u64).sum(),
        ..Default::default()
    };
    for v in g.vars() {
        let out = g.shape(v);
        let ins: Vec<Shape> = g.inputs(v).iter().map(|&i| g.shape(i)).collect();
        let n_out = out.numel() as u64;
        let (f, m) = match g.kind(v) {
            OpKind::Leaf => continue,
            OpKind::Conv2d => {
                let w = ins[1];
                let per_out = (w.c() * w.h() * w.w()) as u64;
                let f = per_out * n_out;
                (f, 2 * f)
            }
            OpKind::Matmul => {
                let f = (ins[0].numel() * ins[1].w()) as u64;
                (f, 2 * f)
            }
            OpKind::AdaptiveMaxPool | OpKind::GlobalAvgPool => (ins[0].numel() as u64, ins[0].numel() as u64),
            OpKind::Reshape
            | OpKind::TransposeHw
            | OpKind::ConcatChannels
            | OpKind::ConcatWidth
            | OpKind::SelectChannels => (0, 0),
            OpKind::BatchNorm => {
                t.params += 2 * out.c() as u64;
                (n_out, n_out)
            }
            _ => (n_out, n_out),
        };
        t.flops += f;
        t.madd += m;
        t.activation_bytes += n_out * BYTES_PER_ELEMENT;
    }
    t
}

fn executed_totals(model: &CanModel, input: Shape, train: bool) -> Totals {
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, &model.params, train, true);
    let x = fw.input(Tensor::full(input, 0.25));
    model.layers.forward(&mut fw, x).unwrap();
    let params: Vec<Var> = fw.param_vars().values().copied().collect();
    graph_totals(&g, &params)
}

#[test]
fn single_pointwise_conv() {
    let mut store = ParamStore::new();
    let mut r = rng();
    let conv = Conv::build(&mut Init::new(&mut store, &mut r), "c", 8, 16, 1, 1, 1, true).unwrap();
    let mut p = Profiler::new(&store, false);
    let x = p.input(Shape::new(1, 8, 4, 4));
    conv.forward(&mut p, x).unwrap();
    let rep = p.finish(Shape::new(1, 8, 4, 4));
    assert_eq!(rep.rows.len(), 1);
    assert_eq!(rep.rows[0].params, 128 + 16);
    assert_eq!(rep.rows[0].flops, 2048);
    assert_eq!(rep.rows[0].madd, 4096);
}

#[test]
fn totals_match_executed_graph() {
    for (cfg, input) in [
        (ModelConfig::toy(), Shape::new(1, 3, 64, 64)),
        (ModelConfig::toy(), Shape::new(2, 3, 64, 96)),
        (ModelConfig::default(), Shape::new(1, 3, 128, 128)),
    ] {
        let model = CanModel::new(cfg, 3).unwrap();
        for train in [false, true] {
            let rep = profile(&model.layers, &model.params, input, train).unwrap();
            let exec = executed_totals(&model, input, train);
            assert_eq!(rep.totals, exec, "{input} train={train}");
        }
    }
}

#[test]
fn totals_are_column_sums_and_params_cover_store() {
    let model = CanModel::new(ModelConfig::toy(), 3).unwrap();
    let rep = profile(&model.layers, &model.params, Shape::new(1, 3, 64, 64), true).unwrap();
    assert_eq!(rep.totals.params, model.params.numel() as u64);
    assert_eq!(rep.totals.flops, rep.rows.iter().map(|r| r.flops).sum::<u64>());
    for r in &rep.rows {
        if r.op == "conv2d" || r.op == "matmul" {
            assert_eq!(r.madd, 2 * r.flops);
        } else {
            assert_eq!(r.madd, r.flops);
        }
    }
    assert!(rep.peak_activation_bytes <= rep.totals.activation_bytes);
    assert!(rep.peak_activation_bytes >= 4 * 3 * 64 * 64);
    let infer = profile(&model.layers, &model.params, Shape::new(1, 3, 64, 64), false).unwrap();
    let aux: u64 = ["aux_ga", "aux_la"]
        .iter()
        .map(|n| model.params.get(&format!("{n}.weight")).unwrap().numel() as u64 + 4)
        .sum();
    assert_eq!(infer.totals.params + aux, rep.totals.params);
}

#[test]
fn ghost_profile_is_cheaper_than_plain() {
    for (cin, cout) in [(16, 16), (64, 64), (96, 32), (32, 96)] {
        let mut store = ParamStore::new();
        let mut r = rng();
        let mut init = Init::new(&mut store, &mut r);
        let ghost = GhostConv::build(&mut init, "g", cin, GhostConvConfig::new(cout)).unwrap();
        let plain = Conv::build(&mut init, "p", cin, cout, 1, 1, 1, false).unwrap();
        let shape = Shape::new(1, cin, 8, 8);
        let mut pg = Profiler::new(&store, false);
        let x = pg.input(shape);
        ghost.forward(&mut pg, x).unwrap();
        let g = pg.finish(shape).totals;
        let mut pp = Profiler::new(&store, false);
        let x = pp.input(shape);
        plain.forward(&mut pp, x).unwrap();
        let p = pp.finish(shape).totals;
        assert!(
            g.params < p.params && g.flops < p.flops && g.madd < p.madd,
            "{cin}->{cout}"
        );
        assert_eq!(g.params, GhostConvConfig::new(cout).param_count(cin) as u64);
        assert_eq!(g.params, ghost.param_count() as u64);
    }
}

fn ga_attention_flops(h: usize, w: usize) -> u64 {
    reduced_attention_flops(&ModelConfig::default(), 96, h, w).unwrap()
}

fn dense_flops(h: usize, w: usize, e: usize, v: usize) -> u64 {
    dense_attention_flops(h, w, e, v).unwrap()
}

#[test]
fn reduced_attention_is_linear_dense_is_quadratic() {
    let sizes = [(8, 8), (16, 8), (16, 16), (32, 16)];
    for pair in sizes.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (ra, rb) = (ga_attention_flops(a.0, a.1), ga_attention_flops(b.0, b.1));
        assert_eq!(rb, 2 * ra);
        let (da, db) = (dense_flops(a.0, a.1, 32, 96), dense_flops(b.0, b.1, 32, 96));
        assert_eq!(db, 4 * da);
    }
}

#[test]
fn attention_cost_fixtures() {
    let spp = SppConfig::default();
    let c = attention_cost_ratio(64, 32, 32, &spp).unwrap();
    assert_eq!((c.a, c.m), (2048, 110));
    assert!((c.ratio - 2048.0 / 110.0).abs() < 1e-12);
    assert_eq!(format!("{:.1}", c.ratio), "18.6");
    assert!(c.to_text().contains("≈18.6×"));
    let c = attention_cost_ratio(32, 32, 32, &spp).unwrap();
    assert_eq!(format!("{:.2}", c.ratio), "9.31");
    let lossless = attention_cost_ratio(4, 4, 8, &SppConfig::new(vec![4])).unwrap();
    assert_eq!(lossless.ratio, 1.0);
    assert!(attention_cost_ratio(0, 4, 8, &spp).is_err());
}

#[test]
fn profiled_attention_matmuls_match_closed_form() {
    // with equal embed and value widths the two matmuls of reduced and dense
    // attention reproduce the closed-form MAdds
    let cfg = ModelConfig {
        ga_value_channels: 32,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let mut r = rng();
    let ga = ReducedGlobalAttention::build(&mut Init::new(&mut store, &mut r), "ga", 96, &cfg).unwrap();
    let mut p = Profiler::new(&store, false);
    let x = p.input(Shape::new(1, 96, 64, 32));
    ga.forward(&mut p, x).unwrap();
    let rep = p.finish(Shape::new(1, 96, 64, 32));
    let reduced = rep.subtotal("ga", &["matmul"]).madd;
    let cost = attention_cost_ratio(64, 32, 32, &cfg.spp).unwrap();
    assert_eq!(reduced, cost.reduced_madds * 2);
    let dense = dense_flops(64, 32, 32, 32) - 2048 * 2048;
    assert_eq!(2 * dense, cost.dense_madds * 2);
}

fn ffm_flops(mid: usize) -> u64 {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let mut r = rng();
    let ffm = FeatureFusion::build(
        &mut Init::new(&mut store, &mut r),
        "ffm",
        cfg.ffm_in_channels(),
        mid,
        cfg.ffm_out_channels,
    )
    .unwrap();
    let mut p = Profiler::new(&store, false);
    let s = p.input(Shape::new(1, cfg.spatial_channels[3], 32, 64));
    let c = p.input(Shape::new(1, cfg.context_out_channels, 32, 64));
    ffm.forward(&mut p, s, c).unwrap();
    p.finish(Shape::new(1, 3, 256, 512)).totals.flops
}

#[test]
fn ffm_bottleneck_halves_cost() {
    let cfg = ModelConfig::default();
    let with = ffm_flops(cfg.ffm_mid_channels);
    let without = ffm_flops(cfg.ffm_in_channels());
    let ratio = with as f64 / without as f64;
    assert!(ratio < 0.6, "{ratio}");
    assert!(ratio > 0.45, "{ratio}");
}

#[test]
fn text_and_json_agree() {
    let model = CanModel::new(ModelConfig::toy(), 3).unwrap();
    let rep = profile(&model.layers, &model.params, Shape::new(1, 3, 64, 64), false).unwrap();
    let text = rep.to_text();
    let total_line = text.lines().find(|l| l.starts_with("total")).unwrap();
    assert!(total_line.contains(&rep.totals.flops.to_string()));
    let json: serde_json::Value = serde_json::to_value(&rep).unwrap();
    assert_eq!(json["totals"]["flops"].as_u64(), Some(rep.totals.flops));
    assert_eq!(json["rows"].as_array().unwrap().len(), rep.rows.len());
}

#[test]
fn profile_rejects_bad_extent() {
    let model = CanModel::new(ModelConfig::toy(), 3).unwrap();
    assert!(profile(&model.layers, &model.params, Shape::new(1, 3, 40, 64), false).is_err());
}

#[test]
fn paper_scale_within_band() {
    let model = CanModel::new(ModelConfig::paper_scale(), 0).unwrap();
    let rep = profile(&model.layers, &model.params, Shape::new(1, 3, 1024, 2048), false).unwrap();
    let flops = rep.totals.flops as f64 / 12.03e9;
    let params = rep.totals.params as f64 / 2.64e6;
    assert!((0.5..=1.5).contains(&flops), "{flops}");
    assert!((0.5..=1.5).contains(&params), "{params}");
}
