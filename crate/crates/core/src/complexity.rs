//! Analytical cost model: parameters, FLOPs, multiply-adds and activation
//! memory per layer, computed by walking the network symbolically.
//!
//! Counting convention:
//! - convolution: `kh * kw * Cin / groups * Cout * Ho * Wo` FLOPs, bias folded in;
//! - batched matmul `P x Q` by `Q x R`: `P * Q * R` FLOPs per matrix;
//! - MAdd is `2 * FLOPs` for those two, and equal to FLOPs elsewhere;
//! - batch norm, activations, elementwise ops, softmax and resizing: one FLOP
//!   per output element; pooling: one per input element;
//! - reshapes, transposes, concatenation and channel gathers are free;
//! - activations take 4 bytes per element; peak memory is the largest sum of
//!   live tensors along the execution order, a tensor staying live until its
//!   last consumer runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{self, Activation, BnSpec, ConvSpec};
use crate::model::{CanLayers, ModelConfig, ReducedGlobalAttention};
use crate::nn::{Backend, Init, ParamStore, SppConfig};
use crate::tensor::Shape;

pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    /// Innermost layer scope.
    pub name: String,
    pub op: String,
    pub params: u64,
    pub flops: u64,
    pub madd: u64,
    pub out_shape: Shape,
    pub activation_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
    pub madd: u64,
    pub activation_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub input_shape: Shape,
    pub rows: Vec<LayerRow>,
    pub totals: Totals,
    pub peak_activation_bytes: u64,
}

impl ComplexityReport {
    fn from_rows(input_shape: Shape, rows: Vec<LayerRow>, peak: u64) -> Self {
        let mut totals = Totals::default();
        for r in &rows {
            totals.params += r.params;
            totals.flops += r.flops;
            totals.madd += r.madd;
            totals.activation_bytes += r.activation_bytes;
        }
        ComplexityReport {
            input_shape,
            rows,
            totals,
            peak_activation_bytes: peak,
        }
    }

    /// Sum over rows whose name starts with `prefix` and whose op is in `ops`
    /// (all ops when empty).
    pub fn subtotal(&self, prefix: &str, ops: &[&str]) -> Totals {
        let mut t = Totals::default();
        for r in self
            .rows
            .iter()
            .filter(|r| r.name.starts_with(prefix) && (ops.is_empty() || ops.contains(&r.op.as_str())))
        {
            t.params += r.params;
            t.flops += r.flops;
            t.madd += r.madd;
            t.activation_bytes += r.activation_bytes;
        }
        t
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<15}  {:>16}  {:>10}  {:>14}  {:>14}  {:>12}",
            "layer", "op", "output", "params", "flops", "madd", "act_bytes"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<name_w$}  {:<15}  {:>16}  {:>10}  {:>14}  {:>14}  {:>12}",
                r.name,
                r.op,
                r.out_shape.to_string(),
                r.params,
                r.flops,
                r.madd,
                r.activation_bytes
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<15}  {:>16}  {:>10}  {:>14}  {:>14}  {:>12}",
            "total", "", "", t.params, t.flops, t.madd, t.activation_bytes
        );
        let _ = writeln!(
            s,
            "input {}: params {:.3}M, flops {:.3}G, madd {:.3}G, peak activations {:.1} MiB",
            self.input_shape,
            t.params as f64 / 1e6,
            t.flops as f64 / 1e9,
            t.madd as f64 / 1e9,
            self.peak_activation_bytes as f64 / (1024.0 * 1024.0)
        );
        s
    }
}

/// Per-op cost under the module's convention.
fn op_cost(op: &str, inputs: &[Shape], out: Shape) -> (u64, u64) {
    let elems = out.numel() as u64;
    match op {
        "conv2d" => {
            let [cout, cin_g, kh, kw] = inputs[1].dims();
            let f = (kh * kw * cin_g * cout) as u64 * (out.n() * out.h() * out.w()) as u64;
            (f, 2 * f)
        }
        "matmul" => {
            let [n, c, p, q] = inputs[0].dims();
            let r = inputs[1].w();
            let f = (n * c * p * q * r) as u64;
            (f, 2 * f)
        }
        "adaptive_max_pool" | "global_avg_pool" => {
            let f = inputs[0].numel() as u64;
            (f, f)
        }
        "reshape" | "transpose" | "concat_channels" | "concat_width" | "select_channels" => (0, 0),
        _ => (elems, elems),
    }
}

/// Symbolic [`Backend`] that records one row per primitive.
pub struct Profiler<'a> {
    store: &'a ParamStore<f32>,
    train: bool,
    shapes: Vec<Shape>,
    /// Row index producing each value; `None` for inputs and parameters.
    producer: Vec<Option<usize>>,
    row_inputs: Vec<Vec<usize>>,
    rows: Vec<LayerRow>,
    scopes: Vec<String>,
    counted: BTreeSet<String>,
    pending_params: u64,
    inputs: Vec<usize>,
    params: BTreeSet<usize>,
}

impl<'a> Profiler<'a> {
    pub fn new(store: &'a ParamStore<f32>, train: bool) -> Self {
        Profiler {
            store,
            train,
            shapes: Vec::new(),
            producer: Vec::new(),
            row_inputs: Vec::new(),
            rows: Vec::new(),
            scopes: Vec::new(),
            counted: BTreeSet::new(),
            pending_params: 0,
            inputs: Vec::new(),
            params: BTreeSet::new(),
        }
    }

    pub fn input(&mut self, shape: Shape) -> usize {
        let id = self.value(shape, None);
        self.inputs.push(id);
        id
    }

    fn value(&mut self, shape: Shape, producer: Option<usize>) -> usize {
        self.shapes.push(shape);
        self.producer.push(producer);
        self.shapes.len() - 1
    }

    fn scope(&self) -> String {
        self.scopes.last().cloned().unwrap_or_else(|| "model".to_string())
    }

    fn record(&mut self, op: &str, inputs: &[usize], out: Shape) -> usize {
        let in_shapes: Vec<Shape> = inputs.iter().map(|&i| self.shapes[i]).collect();
        let (flops, madd) = op_cost(op, &in_shapes, out);
        let row = LayerRow {
            name: self.scope(),
            op: op.to_string(),
            params: std::mem::take(&mut self.pending_params),
            flops,
            madd,
            out_shape: out,
            activation_bytes: out.numel() as u64 * BYTES_PER_ELEMENT,
        };
        self.rows.push(row);
        self.row_inputs
            .push(inputs.iter().copied().filter(|i| !self.params.contains(i)).collect());
        let r = self.rows.len() - 1;
        self.value(out, Some(r))
    }

    fn count_param(&mut self, name: &str) -> Result<Shape> {
        let t = self.store.require(name)?;
        if self.counted.insert(name.to_string()) {
            self.pending_params += t.numel() as u64;
        }
        Ok(t.shape())
    }

    /// Peak live activation bytes along the recorded order.
    fn peak(&self) -> u64 {
        let n_rows = self.rows.len();
        let mut last_use = vec![None::<usize>; self.shapes.len()];
        for (r, ins) in self.row_inputs.iter().enumerate() {
            for &v in ins {
                last_use[v] = Some(r);
            }
        }
        let bytes = |v: usize| self.shapes[v].numel() as u64 * BYTES_PER_ELEMENT;
        let mut live: u64 = self.inputs.iter().map(|&v| bytes(v)).sum();
        let mut peak = live;
        let mut out_of_row = vec![0usize; n_rows];
        for (v, p) in self.producer.iter().enumerate() {
            if let Some(r) = p {
                out_of_row[*r] = v;
            }
        }
        let mut frees: Vec<Vec<usize>> = vec![Vec::new(); n_rows];
        for (v, lu) in last_use.iter().enumerate() {
            if let Some(r) = lu {
                frees[*r].push(v);
            }
        }
        for r in 0..n_rows {
            live += bytes(out_of_row[r]);
            peak = peak.max(live);
            for &v in &frees[r] {
                live -= bytes(v);
            }
            // outputs nobody consumes are final results and stay live
        }
        peak
    }

    pub fn finish(self, input_shape: Shape) -> ComplexityReport {
        let peak = self.peak();
        ComplexityReport::from_rows(input_shape, self.rows, peak)
    }
}

impl Backend for Profiler<'_> {
    type Value = usize;

    fn shape(&self, v: usize) -> Shape {
        self.shapes[v]
    }

    fn is_training(&self) -> bool {
        self.train
    }

    fn param(&mut self, name: &str) -> Result<usize> {
        let s = self.count_param(name)?;
        let id = self.value(s, None);
        self.params.insert(id);
        Ok(id)
    }

    fn conv2d(&mut self, x: usize, w: usize, b: Option<usize>, spec: ConvSpec) -> Result<usize> {
        let out = spec.output_shape(self.shapes[x], self.shapes[w])?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.record("conv2d", &ins, out))
    }

    fn batch_norm(&mut self, prefix: &str, x: usize, spec: &BnSpec) -> Result<usize> {
        spec.validate()?;
        let c = self.shapes[x].c();
        for part in ["weight", "bias", "running_mean", "running_var"] {
            let s = self.count_param(&format!("{prefix}.{part}"))?;
            if s.numel() != c {
                return Err(Error::shape(format!(
                    "batch_norm `{prefix}` has {} channels, input {c}",
                    s.numel()
                )));
            }
        }
        Ok(self.record("batch_norm", &[x], self.shapes[x]))
    }

    fn activation(&mut self, x: usize, kind: Activation) -> usize {
        self.record(kind.name(), &[x], self.shapes[x])
    }

    fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        self.elementwise("add", a, b)
    }

    fn mul(&mut self, a: usize, b: usize) -> Result<usize> {
        self.elementwise("mul", a, b)
    }

    fn mul_channel(&mut self, x: usize, gate: usize) -> Result<usize> {
        let (s, g) = (self.shapes[x], self.shapes[gate]);
        if g != Shape::new(s.n(), s.c(), 1, 1) {
            return Err(Error::shape(format!("channel gate {g} does not fit {s}")));
        }
        Ok(self.record("mul_channel", &[x, gate], s))
    }

    fn global_avg_pool(&mut self, x: usize) -> usize {
        let s = self.shapes[x];
        self.record("global_avg_pool", &[x], Shape::new(s.n(), s.c(), 1, 1))
    }

    fn adaptive_max_pool(&mut self, x: usize, out_h: usize, out_w: usize) -> Result<usize> {
        let s = self.shapes[x];
        if out_h == 0 || out_w == 0 || out_h > s.h() || out_w > s.w() {
            return Err(Error::shape(format!("adaptive pool to {out_h}x{out_w} from {s}")));
        }
        Ok(self.record("adaptive_max_pool", &[x], Shape::new(s.n(), s.c(), out_h, out_w)))
    }

    fn bilinear(&mut self, x: usize, out_h: usize, out_w: usize) -> Result<usize> {
        let s = self.shapes[x];
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear resize to an empty extent"));
        }
        Ok(self.record("bilinear", &[x], Shape::new(s.n(), s.c(), out_h, out_w)))
    }

    fn matmul(&mut self, a: usize, b: usize) -> Result<usize> {
        let out = kernels::matmul_shape(self.shapes[a], self.shapes[b])?;
        Ok(self.record("matmul", &[a, b], out))
    }

    fn transpose_hw(&mut self, x: usize) -> usize {
        let [n, c, h, w] = self.shapes[x].dims();
        self.record("transpose", &[x], Shape::new(n, c, w, h))
    }

    fn reshape(&mut self, x: usize, shape: Shape) -> Result<usize> {
        if shape.numel() != self.shapes[x].numel() {
            return Err(Error::shape(format!("cannot reshape {} to {shape}", self.shapes[x])));
        }
        Ok(self.record("reshape", &[x], shape))
    }

    fn concat_channels(&mut self, parts: &[usize]) -> Result<usize> {
        let first = self.shapes[*parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?];
        let mut c = 0;
        for &p in parts {
            let s = self.shapes[p];
            if (s.n(), s.h(), s.w()) != (first.n(), first.h(), first.w()) {
                return Err(Error::shape(format!("channel concat extents differ: {first} vs {s}")));
            }
            c += s.c();
        }
        Ok(self.record("concat_channels", parts, Shape::new(first.n(), c, first.h(), first.w())))
    }

    fn concat_width(&mut self, parts: &[usize]) -> Result<usize> {
        let first = self.shapes[*parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?];
        let mut w = 0;
        for &p in parts {
            let s = self.shapes[p];
            if (s.n(), s.c(), s.h()) != (first.n(), first.c(), first.h()) {
                return Err(Error::shape(format!("width concat extents differ: {first} vs {s}")));
            }
            w += s.w();
        }
        Ok(self.record("concat_width", parts, Shape::new(first.n(), first.c(), first.h(), w)))
    }

    fn select_channels(&mut self, x: usize, idx: &[usize]) -> Result<usize> {
        let s = self.shapes[x];
        if idx.iter().any(|&i| i >= s.c()) {
            return Err(Error::shape(format!("channel index out of range for {s}")));
        }
        Ok(self.record("select_channels", &[x], Shape::new(s.n(), idx.len(), s.h(), s.w())))
    }

    fn softmax(&mut self, x: usize) -> Result<usize> {
        Ok(self.record("softmax", &[x], self.shapes[x]))
    }

    fn enter(&mut self, scope: &str) {
        self.scopes.push(scope.to_string());
    }

    fn exit(&mut self) {
        self.scopes.pop();
    }
}

impl Profiler<'_> {
    fn elementwise(&mut self, op: &str, a: usize, b: usize) -> Result<usize> {
        let (sa, sb) = (self.shapes[a], self.shapes[b]);
        if sa != sb {
            return Err(Error::shape(format!("{op} operands differ: {sa} vs {sb}")));
        }
        Ok(self.record(op, &[a, b], sa))
    }
}

/// Profiles the full network on an `N x C x H x W` input. Auxiliary heads are
/// included only when `train` is set.
pub fn profile(layers: &CanLayers, params: &ParamStore<f32>, input: Shape, train: bool) -> Result<ComplexityReport> {
    let mut p = Profiler::new(params, train);
    let x = p.input(input);
    layers.forward(&mut p, x)?;
    Ok(p.finish(input))
}

/// Cost of the affinity and aggregation products of dense versus
/// pyramid-reduced attention on an `h x w` map.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionCost {
    /// Query positions, `h * w`.
    pub a: usize,
    /// Pooled key positions, the sum of squared pyramid scales.
    pub m: usize,
    /// Embedding width.
    pub embed: usize,
    pub dense_madds: u64,
    pub reduced_madds: u64,
    pub ratio: f64,
}

impl AttentionCost {
    pub fn to_text(&self) -> String {
        format!(
            "attention: A = {} positions, M = {} pooled keys, embed = {}\n\
             dense MAdd = {}, reduced MAdd = {}\n\
             saving ≈{:.1}× (A/M = {}/{})\n",
            self.a, self.m, self.embed, self.dense_madds, self.reduced_madds, self.ratio, self.a, self.m
        )
    }
}

/// `dense = 2 A² E`, `reduced = 2 A M E`, `ratio = A / M`.
pub fn attention_cost_ratio(h: usize, w: usize, embed: usize, spp: &SppConfig) -> Result<AttentionCost> {
    if h == 0 || w == 0 || embed == 0 {
        return Err(Error::invalid("attention cost needs positive extents and width"));
    }
    spp.validate()?;
    let a = h * w;
    let m = spp.positions();
    let dense = 2 * (a * a * embed) as u64;
    let reduced = 2 * (a * m * embed) as u64;
    Ok(AttentionCost {
        a,
        m,
        embed,
        dense_madds: dense,
        reduced_madds: reduced,
        ratio: dense as f64 / reduced as f64,
    })
}

/// Counted FLOPs of the affinity, softmax and aggregation of a reduced
/// global attention block built from `cfg` on a `channels x h x w` map.
pub fn reduced_attention_flops(cfg: &ModelConfig, channels: usize, h: usize, w: usize) -> Result<u64> {
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let ga = ReducedGlobalAttention::build(&mut Init::new(&mut store, &mut rng), "ga", channels, cfg)?;
    let shape = Shape::new(1, channels, h, w);
    let mut p = Profiler::new(&store, false);
    let x = p.input(shape);
    ga.forward(&mut p, x)?;
    Ok(p.finish(shape).subtotal("ga", &["matmul", "softmax"]).flops)
}

/// Counted FLOPs of the same three steps when every position attends to
/// every position, with embedding width `embed` and value width `value`.
pub fn dense_attention_flops(h: usize, w: usize, embed: usize, value: usize) -> Result<u64> {
    let store = ParamStore::new();
    let mut p = Profiler::new(&store, false);
    let a = h * w;
    let q = p.input(Shape::new(1, 1, a, embed));
    let k = p.input(Shape::new(1, 1, embed, a));
    let v = p.input(Shape::new(1, 1, a, value));
    let logits = p.matmul(q, k)?;
    let aff = p.softmax(logits)?;
    p.matmul(aff, v)?;
    Ok(p.finish(Shape::new(1, 1, a, embed)).totals.flops)
}

#[cfg(test)]
mod tests;
