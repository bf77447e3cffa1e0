//! Parameter enumeration and analytic FLOP accounting.
//!
//! FLOPs follow the convention `1 MAC = 1 FLOP`. Convolutions cost
//! `out_sites · k² · (c_in / groups) · c_out`, matrix products `m · k · n`.
//! Normalization, activations, pooling, resizing and elementwise ops are
//! not counted. Padded attention windows are counted.

use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::FfnKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StageConfig};
use crate::store::WeightStore;
use crate::tensor::Scalar;

pub const FLOP_CONVENTION: &str = "1 MAC = 1 FLOP; norms, activations, pooling and resizing excluded";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub path: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    /// `(group, count)` in first-seen order: `stem`, `stages/0`, ..., `expansion`, `head`.
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

fn group_of(path: &str) -> &str {
    match path.strip_prefix("stages/") {
        Some(rest) => {
            let end = rest.find('/').map_or(path.len(), |i| i + "stages/".len());
            &path[..end]
        }
        None => path.split('/').next().unwrap_or(path),
    }
}

/// Exact per-tensor enumeration of a weight store.
pub fn count_params<T: Scalar>(store: &WeightStore<T>) -> ParamReport {
    let mut rows = Vec::with_capacity(store.len());
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, t) in store.iter() {
        let g = group_of(name);
        match groups.iter_mut().find(|(k, _)| k == g) {
            Some(slot) => slot.1 += t.numel(),
            None => groups.push((g.to_string(), t.numel())),
        }
        rows.push(ParamRow { path: name.to_string(), shape: t.dims().to_vec(), count: t.numel() });
    }
    let total = rows.iter().map(|r| r.count).sum();
    ParamReport { rows, groups, total }
}

impl ParamReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,shape,count\n");
        for r in &self.rows {
            let shape: Vec<String> = r.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{},{},{}", r.path, shape.join("x"), r.count);
        }
        s
    }
}

// Closed-form parameter counts, independent of the block constructors.

fn conv_params(cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> usize {
    cout * (cin / groups) * k * k + if bias { cout } else { 0 }
}

fn se_params(c: usize, hidden: usize) -> usize {
    conv_params(c, hidden, 1, 1, true) + conv_params(hidden, c, 1, 1, true)
}

fn norm_params(c: usize) -> usize {
    2 * c
}

pub fn lw_patch_embed_params(cin: usize, cout: usize) -> usize {
    conv_params(cin, cin, 3, cin, true)
        + se_params(cin, cin / 8)
        + conv_params(cin, cin, 1, 1, true)
        + conv_params(cin, cout, 1, 1, true)
        + conv_params(cout, cout, 3, cout, true)
        + norm_params(cout)
}

pub fn baseline_patch_embed_params(cin: usize, cout: usize) -> usize {
    conv_params(cin, cin, 3, cin, true)
        + se_params(cin, cin / 4)
        + conv_params(cin, cin, 1, 1, true)
        + conv_params(cin, cout, 3, 1, true)
        + norm_params(cout)
}

fn ffn_params(c: usize, kind: FfnKind, alpha: usize) -> usize {
    let h = alpha * c;
    let common = conv_params(c, h, 1, 1, true) + conv_params(h, h, 3, h, true);
    match kind {
        FfnKind::Plus => common + norm_params(h) + conv_params(2 * h, c, 1, 1, true),
        FfnKind::Baseline => common + conv_params(h, c, 1, 1, true),
    }
}

fn block_params(cfg: &ModelConfig, s: &StageConfig) -> Result<usize> {
    let c = s.channels;
    let cl = s.local_channels()?;
    let cg = c - cl;
    let mut n = 2 * norm_params(c) + conv_params(cl, 3 * cl, 1, 1, false);
    if s.gsa.is_some() {
        n += conv_params(cg, 3 * cg, 1, 1, false);
    }
    if cfg.attn_out_proj {
        n += conv_params(c, c, 1, 1, true);
    }
    Ok(n + ffn_params(c, cfg.ffn.kind, cfg.ffn.alpha))
}

/// Parameter total computed from the configuration alone.
pub fn analytic_param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let c1 = cfg.stem_channels;
    let mut n = conv_params(cfg.img_channels, c1 / 2, 3, 1, true) + conv_params(c1 / 2, c1, 3, 1, true) + norm_params(c1);
    let mut prev = c1;
    for s in &cfg.stages {
        if s.downsample_in {
            n += lw_patch_embed_params(prev, s.channels);
        }
        n += s.repeats * block_params(cfg, s)?;
        prev = s.channels;
    }
    let c5 = cfg.expansion_channels;
    n += conv_params(prev, prev, 3, prev, true) + conv_params(prev, c5, 1, 1, true) + norm_params(c5);
    n += c5 * cfg.num_classes + cfg.num_classes;
    Ok(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PatchEmbedComparison {
    pub baseline: usize,
    pub lw: usize,
    /// `1 − lw / baseline`.
    pub savings: f64,
}

pub fn compare_patch_embed_params(cin: usize, cout: usize) -> Result<PatchEmbedComparison> {
    if cin < 8 || cout < 8 {
        return Err(Error::Config(format!("patch-embed comparison needs c_in, c_out >= 8 (got {cin}, {cout})")));
    }
    let baseline = baseline_patch_embed_params(cin, cout);
    let lw = lw_patch_embed_params(cin, cout);
    Ok(PatchEmbedComparison { baseline, lw, savings: 1.0 - lw as f64 / baseline as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopCategory {
    /// Convolutions and the linear head, including attention qkv projections.
    Conv,
    /// Score and value products inside local windows.
    LocalAttn,
    /// Score and value products of the global branch.
    GlobalAttn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopRow {
    pub path: String,
    pub input_hw: (usize, usize),
    pub macs: u64,
    pub category: FlopCategory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub convention: &'static str,
    pub input_hw: (usize, usize),
    pub rows: Vec<FlopRow>,
    pub total: u64,
}

impl FlopReport {
    pub fn category_total(&self, cat: FlopCategory) -> u64 {
        self.rows.iter().filter(|r| r.category == cat).map(|r| r.macs).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }

    /// Sum of rows whose path starts with `prefix`.
    pub fn prefix_total(&self, prefix: &str) -> u64 {
        self.rows.iter().filter(|r| r.path.starts_with(prefix)).map(|r| r.macs).sum()
    }
}

/// How the global branch is costed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GlobalMode {
    /// Attention over the fixed pooled grid.
    #[default]
    Pooled,
    /// Reference: no pooling, every token attends globally.
    Naive,
}

struct Acc {
    rows: Vec<FlopRow>,
}

impl Acc {
    fn push(&mut self, path: impl Into<String>, hw: (usize, usize), macs: u64, category: FlopCategory) {
        self.rows.push(FlopRow { path: path.into(), input_hw: hw, macs, category });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        path: String,
        hw: (usize, usize),
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> (usize, usize) {
        let oh = (hw.0 + 2 * pad - k) / stride + 1;
        let ow = (hw.1 + 2 * pad - k) / stride + 1;
        let macs = (oh * ow * k * k * (cin / groups) * cout) as u64;
        self.push(path, hw, macs, FlopCategory::Conv);
        (oh, ow)
    }
}

fn ffn_flops(acc: &mut Acc, p: &str, hw: (usize, usize), c: usize, cfg: &ModelConfig) {
    let h = cfg.ffn.alpha * c;
    acc.conv(format!("{p}/expand"), hw, c, h, 1, 1, 0, 1);
    acc.conv(format!("{p}/dw"), hw, h, h, 3, 1, 1, h);
    match cfg.ffn.kind {
        FfnKind::Plus => acc.conv(format!("{p}/restore"), hw, 2 * h, c, 1, 1, 0, 1),
        FfnKind::Baseline => acc.conv(format!("{p}/fc"), hw, h, c, 1, 1, 0, 1),
    };
}

fn block_flops(acc: &mut Acc, p: &str, hw: (usize, usize), s: &StageConfig, cfg: &ModelConfig, mode: GlobalMode) -> Result<()> {
    let c = s.channels;
    let cl = s.local_channels()?;
    let cg = c - cl;
    let win = s.lsa.window;
    let padded = (hw.0.div_ceil(win) * win, hw.1.div_ceil(win) * win);
    acc.conv(format!("{p}/attn/local/qkv"), padded, cl, 3 * cl, 1, 1, 0, 1);
    let tokens = padded.0 * padded.1;
    acc.push(format!("{p}/attn/local/attention"), padded, (2 * tokens * win * win * cl) as u64, FlopCategory::LocalAttn);
    if let Some(g) = s.gsa {
        let grid = match mode {
            GlobalMode::Pooled => (g.window, g.window),
            GlobalMode::Naive => hw,
        };
        let t = (grid.0 * grid.1) as u64;
        acc.conv(format!("{p}/attn/global/qkv"), grid, cg, 3 * cg, 1, 1, 0, 1);
        acc.push(format!("{p}/attn/global/attention"), grid, 2 * t * t * cg as u64, FlopCategory::GlobalAttn);
    }
    if cfg.attn_out_proj {
        acc.conv(format!("{p}/attn/proj"), hw, c, c, 1, 1, 0, 1);
    }
    ffn_flops(acc, &format!("{p}/ffn"), hw, c, cfg);
    Ok(())
}

fn lw_embed_flops(acc: &mut Acc, p: &str, hw: (usize, usize), cin: usize, cout: usize) -> (usize, usize) {
    acc.conv(format!("{p}/dw1"), hw, cin, cin, 3, 1, 1, cin);
    let hid = cin / 8;
    acc.conv(format!("{p}/se/reduce"), (1, 1), cin, hid, 1, 1, 0, 1);
    acc.conv(format!("{p}/se/expand"), (1, 1), hid, cin, 1, 1, 0, 1);
    acc.conv(format!("{p}/pw1"), hw, cin, cin, 1, 1, 0, 1);
    let out = acc.conv(format!("{p}/pw2"), hw, cin, cout, 1, 2, 0, 1);
    acc.conv(format!("{p}/dw2"), out, cout, cout, 3, 1, 1, cout);
    out
}

/// Per-layer MACs of a forward pass on one `h × w` image.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    count_flops_with(cfg, h, w, GlobalMode::Pooled)
}

pub fn count_flops_with(cfg: &ModelConfig, h: usize, w: usize, mode: GlobalMode) -> Result<FlopReport> {
    cfg.validate()?;
    if h < crate::model::MIN_INPUT || w < crate::model::MIN_INPUT {
        return Err(Error::Config(format!("input {h}x{w} below the {0}x{0} minimum", crate::model::MIN_INPUT)));
    }
    let mut acc = Acc { rows: Vec::new() };
    let c1 = cfg.stem_channels;
    let hw = acc.conv("stem/conv1".into(), (h, w), cfg.img_channels, c1 / 2, 3, 2, 1, 1);
    let mut hw = acc.conv("stem/conv2".into(), hw, c1 / 2, c1, 3, 2, 1, 1);
    let mut prev = c1;
    for (i, s) in cfg.stages.iter().enumerate() {
        if s.downsample_in {
            hw = lw_embed_flops(&mut acc, &format!("stages/{i}/downsample"), hw, prev, s.channels);
        }
        for b in 0..s.repeats {
            block_flops(&mut acc, &format!("stages/{i}/blocks/{b}"), hw, s, cfg, mode)?;
        }
        prev = s.channels;
    }
    let c5 = cfg.expansion_channels;
    acc.conv("expansion/dw".into(), hw, prev, prev, 3, 1, 1, prev);
    acc.conv("expansion/pw".into(), hw, prev, c5, 1, 1, 0, 1);
    acc.push("head", (1, 1), (c5 * cfg.num_classes) as u64, FlopCategory::Conv);
    let total = acc.rows.iter().map(|r| r.macs).sum();
    Ok(FlopReport { convention: FLOP_CONVENTION, input_hw: (h, w), rows: acc.rows, total })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub size: usize,
    pub total_gflops: f64,
    pub local_attn_gflops: f64,
    pub global_attn_gflops: f64,
    pub conv_gflops: f64,
}

fn sweep_row(cfg: &ModelConfig, size: usize, mode: GlobalMode) -> Result<SweepRow> {
    let r = count_flops_with(cfg, size, size, mode)?;
    let g = |v: u64| v as f64 / 1e9;
    Ok(SweepRow {
        size,
        total_gflops: g(r.total),
        local_attn_gflops: g(r.category_total(FlopCategory::LocalAttn)),
        global_attn_gflops: g(r.category_total(FlopCategory::GlobalAttn)),
        conv_gflops: g(r.category_total(FlopCategory::Conv)),
    })
}

/// FLOPs at each square input size.
pub fn resolution_sweep(cfg: &ModelConfig, sizes: &[usize], mode: GlobalMode) -> Result<Vec<SweepRow>> {
    sizes.iter().map(|&s| sweep_row(cfg, s, mode)).collect()
}

/// [`resolution_sweep`] spread over at most `threads` scoped threads; row order follows `sizes`.
pub fn resolution_sweep_parallel(cfg: &ModelConfig, sizes: &[usize], mode: GlobalMode, threads: usize) -> Result<Vec<SweepRow>> {
    let threads = threads.clamp(1, sizes.len().max(1));
    if threads == 1 {
        return resolution_sweep(cfg, sizes, mode);
    }
    let chunk = sizes.len().div_ceil(threads);
    let parts: Vec<Result<Vec<SweepRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = sizes.chunks(chunk).map(|part| s.spawn(move || resolution_sweep(cfg, part, mode))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(sizes.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

/// Formats `v` with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{v:.5e}");
    }
    let mut decimals = (5 - mag).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // rounding can carry into a new leading digit
    if s.trim_start_matches('-').parse::<f64>().unwrap_or(0.0) >= 10f64.powi(mag + 1) && decimals > 0 {
        decimals -= 1;
        return format!("{v:.decimals$}");
    }
    s
}

pub const SWEEP_CSV_HEADER: &str = "size,total_gflops,local_attn_gflops,global_attn_gflops,conv_gflops";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.size,
            sig6(r.total_gflops),
            sig6(r.local_attn_gflops),
            sig6(r.global_attn_gflops),
            sig6(r.conv_gflops)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.416616), "1.41662");
        assert_eq!(sig6(0.0150528), "0.0150528");
        assert_eq!(sig6(12.5), "12.5000");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(9.9999996), "10.0000");
    }

    #[test]
    fn single_conv_count() {
        assert_eq!(conv_params(3, 8, 3, 1, true), 224);
    }

    #[test]
    fn groups_of_paths() {
        assert_eq!(group_of("stages/2/blocks/0/attn/local/qkv/weight"), "stages/2");
        assert_eq!(group_of("stem/conv1/weight"), "stem");
        assert_eq!(group_of("head/bias"), "head");
    }
}
