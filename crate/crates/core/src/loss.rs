//! Online hard example mining cross entropy and the three-term joint loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{channel_softmax, Graph, Var};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::model::ForwardOutput;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OhemConfig {
    /// Pixels whose true-class probability reaches this value are dropped.
    pub prob_threshold: f64,
    /// Hardest pixels always kept; `None` keeps `max(1, valid / 16)`.
    pub min_kept: Option<usize>,
    pub ignore_index: u8,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            prob_threshold: 0.7,
            min_kept: None,
            ignore_index: 255,
        }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "prob_threshold must be in (0, 1], got {}",
                self.prob_threshold
            )));
        }
        if self.min_kept == Some(0) {
            return Err(Error::Config("min_kept must be >= 1".into()));
        }
        Ok(())
    }

    pub fn min_kept_for(&self, valid: usize) -> usize {
        self.min_kept.unwrap_or((valid / 16).max(1))
    }
}

/// Outcome of one OHEM term.
#[derive(Clone, Copy, Debug)]
pub struct OhemTerm {
    pub loss: Var,
    pub kept: usize,
}

/// Indices of the pixels OHEM keeps, ordered hardest first.
///
/// `probs` holds each valid pixel's true-class probability with its pixel
/// index; ties break by index.
pub fn ohem_select(mut probs: Vec<(f64, usize)>, cfg: &OhemConfig) -> Vec<usize> {
    let valid = probs.len();
    if valid == 0 {
        return Vec::new();
    }
    probs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let hard = probs.iter().take_while(|(p, _)| *p < cfg.prob_threshold).count();
    let keep = hard.max(cfg.min_kept_for(valid).min(valid));
    probs[..keep].iter().map(|&(_, i)| i).collect()
}

/// Mean cross entropy over the pixels selected by hard example mining.
/// With no valid pixel the loss is zero and nothing is kept.
pub fn ohem_ce<T: Element>(g: &mut Graph<T>, logits: Var, labels: &LabelMap, cfg: &OhemConfig) -> Result<OhemTerm> {
    cfg.validate()?;
    let [n, k, h, w] = g.shape(logits).dims();
    if (labels.n, labels.h, labels.w) != (n, h, w) {
        return Err(Error::shape(format!(
            "labels {}x{}x{} do not match logits {}",
            labels.n,
            labels.h,
            labels.w,
            g.shape(logits)
        )));
    }
    let probs = channel_softmax(g.value(logits));
    let plane = h * w;
    let mut candidates = Vec::with_capacity(labels.len());
    for (i, &l) in labels.data.iter().enumerate() {
        if l == cfg.ignore_index {
            continue;
        }
        if l as usize >= k {
            return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
        }
        let (b, p) = (i / plane, i % plane);
        candidates.push((probs.data()[(b * k + l as usize) * plane + p].as_f64(), i));
    }
    let kept = ohem_select(candidates, cfg);
    let targets: Vec<usize> = labels
        .data
        .iter()
        .map(|&l| if l == cfg.ignore_index { 0 } else { l as usize })
        .collect();
    let mut weights = vec![T::zero(); labels.len()];
    if !kept.is_empty() {
        let wt = T::of(1.0 / kept.len() as f64);
        for &i in &kept {
            weights[i] = wt;
        }
    }
    let loss = g.cross_entropy(logits, &targets, &weights)?;
    Ok(OhemTerm { loss, kept: kept.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_c1: f64,
    pub l_c2: f64,
    /// Value of the summed loss node.
    pub total: f64,
    /// Kept pixels for the primary, GA and LA terms.
    pub kept_pixels: [usize; 3],
}

/// Primary loss plus the two auxiliary losses with unit weights. Auxiliary
/// labels are nearest-neighbour downsampled to the auxiliary resolution.
pub fn joint_loss<T: Element>(
    g: &mut Graph<T>,
    out: &ForwardOutput<Var>,
    labels: &LabelMap,
    cfg: &OhemConfig,
) -> Result<(Var, LossReport)> {
    let (Some(ga), Some(la)) = (out.aux_ga, out.aux_la) else {
        return Err(Error::invalid(
            "joint loss needs training-mode output with auxiliary heads",
        ));
    };
    let p = ohem_ce(g, out.primary, labels, cfg)?;
    let aux = |g: &Graph<T>, v: Var| {
        let s = g.shape(v);
        labels.resize_nearest(s.h(), s.w())
    };
    let ga_labels = aux(g, ga);
    let c1 = ohem_ce(g, ga, &ga_labels, cfg)?;
    let la_labels = aux(g, la);
    let c2 = ohem_ce(g, la, &la_labels, cfg)?;
    let s = g.add(p.loss, c1.loss)?;
    let total = g.add(s, c2.loss)?;
    let val = |v: Var| g.value(v).item().as_f64();
    let report = LossReport {
        l_p: val(p.loss),
        l_c1: val(c1.loss),
        l_c2: val(c2.loss),
        total: val(total),
        kept_pixels: [p.kept, c1.kept, c2.kept],
    };
    Ok((total, report))
}
