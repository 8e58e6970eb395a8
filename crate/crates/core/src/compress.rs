//! Group-wise SVD truncation of a trained model and its accounting.
//!
//! A [`CompressionPlan`] assigns each layer group (`q`, `k`, `v`, `o`,
//! `embed`, `head`) either `full` (leave dense) or a rank `k`. Every layer in
//! a ranked group is replaced by the cascaded pair `W₁ = U_kΣ_k`,
//! `W₂ = V_kᵀ`, keeping its bias on the second factor's output.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::SkeletonSample;
use crate::error::{Error, Result};
use crate::finetune::evaluate;
use crate::layers::{Linear, LowRankLinear};
use crate::linalg::{reconstruction_error, svd_default, truncate_to_factors};
use crate::model::{count_flops, count_params, LayerGroup, SkeletonModel};

pub const REPORT_CSV_HEADER: &str = "layer,group,rows,cols,rank,params_before,params_after,recon_fro,recon_rel";
pub const SWEEP_CSV_HEADER: &str = "plan,params,flops,top1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankDirective {
    #[default]
    Full,
    Rank(usize),
}

impl fmt::Display for RankDirective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankDirective::Full => f.write_str("full"),
            RankDirective::Rank(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompressionPlan {
    ranks: [RankDirective; 6],
}

impl CompressionPlan {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn with(mut self, group: LayerGroup, directive: RankDirective) -> Self {
        self.ranks[group.index()] = directive;
        self
    }

    pub fn get(&self, group: LayerGroup) -> RankDirective {
        self.ranks[group.index()]
    }

    pub fn is_identity(&self) -> bool {
        self.ranks.iter().all(|r| *r == RankDirective::Full)
    }

    /// Canonical text: ranked groups in `q,k,v,o,embed,head` order; empty
    /// for the identity plan.
    pub fn render(&self) -> String {
        LayerGroup::ALL
            .iter()
            .filter_map(|&g| match self.get(g) {
                RankDirective::Full => None,
                r => Some(format!("{}={r}", g.name())),
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for CompressionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for CompressionPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_plan(s)
    }
}

fn parse_group(name: &str) -> Option<LayerGroup> {
    LayerGroup::ALL.into_iter().find(|g| g.name().eq_ignore_ascii_case(name))
}

/// Parses comma-separated `group=rank` tokens (`rank` is a positive integer
/// or `full`). Group names are case-insensitive; omitted groups stay full.
/// Error positions are byte offsets of the offending token.
pub fn parse_plan(text: &str) -> Result<CompressionPlan> {
    let mut plan = CompressionPlan::identity();
    if text.trim().is_empty() {
        return Ok(plan);
    }
    let mut seen = [false; 6];
    let mut offset = 0;
    for raw in text.split(',') {
        let lead = raw.len() - raw.trim_start().len();
        let position = offset + lead;
        offset += raw.len() + 1;
        let token = raw.trim();
        let err = |message: String| Error::PlanParse { position, message };
        let (name, value) =
            token.split_once('=').ok_or_else(|| err(format!("expected group=rank, found {token:?}")))?;
        let group = parse_group(name.trim())
            .ok_or_else(|| err(format!("unknown group {:?} (expected q, k, v, o, embed or head)", name.trim())))?;
        if std::mem::replace(&mut seen[group.index()], true) {
            return Err(err(format!("duplicate group {}", group.name())));
        }
        let value = value.trim();
        let directive = if value.eq_ignore_ascii_case("full") {
            RankDirective::Full
        } else {
            match value.parse::<usize>() {
                Ok(0) => return Err(err(format!("rank for {} must be at least 1", group.name()))),
                Ok(k) => RankDirective::Rank(k),
                Err(_) => return Err(err(format!("invalid rank {value:?}"))),
            }
        };
        plan = plan.with(group, directive);
    }
    Ok(plan)
}

/// One plan per line; `#` starts a comment, blank lines are skipped, and a
/// line reading `full` is the identity plan.
pub fn parse_grid(text: &str) -> Result<Vec<CompressionPlan>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.eq_ignore_ascii_case("full") {
            out.push(CompressionPlan::identity());
            continue;
        }
        out.push(parse_plan(content).map_err(|e| match e {
            Error::PlanParse { position, message } => {
                Error::PlanParse { position, message: format!("line {}: {message}", n + 1) }
            }
            other => other,
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub group: LayerGroup,
    pub rows: usize,
    pub cols: usize,
    /// `None` when the layer was left as it was.
    pub rank: Option<usize>,
    pub params_before: usize,
    pub params_after: usize,
    pub recon_fro: f64,
    pub recon_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub plan: CompressionPlan,
    pub layers: Vec<LayerReport>,
    pub params_before: usize,
    pub params_after: usize,
    pub reference_frames: usize,
    pub flops_before: usize,
    pub flops_after: usize,
    /// Seconds since the Unix epoch; not part of the CSV.
    pub created_unix: u64,
}

impl CompressionReport {
    /// Per-layer rows, then a `total` row (parameter sums) and a `flops`
    /// row (FLOPs at `reference_frames` in the before/after columns).
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_CSV_HEADER}\n");
        for l in &self.layers {
            let rank = l.rank.map_or_else(|| "full".to_string(), |k| k.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                l.name,
                l.group.name(),
                l.rows,
                l.cols,
                rank,
                l.params_before,
                l.params_after,
                l.recon_fro,
                l.recon_rel
            )
            .expect("string write");
        }
        writeln!(out, "total,,,,,{},{},,", self.params_before, self.params_after).expect("string write");
        writeln!(out, "flops,,,,,{},{},,", self.flops_before, self.flops_after).expect("string write");
        out
    }
}

/// Builds a new model with every layer in a ranked group replaced by its
/// truncated factor pair. The source model is not modified; full groups are
/// copied unchanged.
pub fn compress_model(m: &SkeletonModel, plan: &CompressionPlan) -> Result<(SkeletonModel, CompressionReport)> {
    let mut out = m.clone();
    let mut layers = Vec::new();
    let refs = m.layers();
    for (src, dst) in refs.iter().zip(out.layers_mut()) {
        let layer = src.layer;
        let (rows, cols) = (layer.in_dim(), layer.out_dim());
        let before = layer.param_count();
        let row = match plan.get(src.group) {
            RankDirective::Full => LayerReport {
                name: src.name.clone(),
                group: src.group,
                rows,
                cols,
                rank: None,
                params_before: before,
                params_after: before,
                recon_fro: 0.0,
                recon_rel: 0.0,
            },
            RankDirective::Rank(k) => {
                let max = rows.min(cols);
                if k > max {
                    return Err(Error::RankExceedsLayer { layer: src.name.clone(), k, max });
                }
                let w = layer.effective_weight();
                let s = svd_default(&w)?;
                let recon_fro = reconstruction_error(&s, k)?;
                let norm = w.frobenius_norm();
                let factors = truncate_to_factors(&s, k)?;
                *dst = Linear::LowRank(LowRankLinear::from_factors(factors, layer.bias().cloned())?);
                LayerReport {
                    name: src.name.clone(),
                    group: src.group,
                    rows,
                    cols,
                    rank: Some(k),
                    params_before: before,
                    params_after: dst.param_count(),
                    recon_fro,
                    recon_rel: if norm > 0.0 { recon_fro / norm } else { 0.0 },
                }
            }
        };
        layers.push(row);
    }
    let frames = m.config.frames;
    let report = CompressionReport {
        plan: *plan,
        params_before: layers.iter().map(|l| l.params_before).sum(),
        params_after: layers.iter().map(|l| l.params_after).sum(),
        layers,
        reference_frames: frames,
        flops_before: count_flops(m, frames),
        flops_after: count_flops(&out, frames),
        created_unix: unix_now(),
    };
    debug_assert_eq!(report.params_after, count_params(&out));
    Ok((out, report))
}

// The browser target has no clock through std.
#[cfg(not(all(target_arch = "wasm32", target_os = "unknown")))]
fn unix_now() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[cfg(all(target_arch = "wasm32", target_os = "unknown"))]
fn unix_now() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub plan: CompressionPlan,
    pub params: usize,
    pub flops: usize,
    pub top1: f64,
}

/// Compresses and evaluates (without fine-tuning) each plan. Rows come back
/// in grid order.
pub fn rank_sweep(m: &SkeletonModel, test: &[SkeletonSample], grid: &[CompressionPlan]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("rank sweep needs at least one plan".into()));
    }
    grid.par_iter()
        .map(|plan| {
            let (c, report) = compress_model(m, plan)?;
            Ok(SweepRow {
                plan: *plan,
                params: report.params_after,
                flops: report.flops_after,
                top1: evaluate(&c, test)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let plan = if r.plan.is_identity() { "full".to_string() } else { r.plan.render() };
        writeln!(out, "\"{plan}\",{},{},{}", r.params, r.flops, r.top1).expect("string write");
    }
    out
}
