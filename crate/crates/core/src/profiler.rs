//! Exact parameter and FLOP accounting.
//!
//! FLOP rules (a multiply-add is 2 FLOPs, biases are not counted):
//!
//! | layer | FLOPs |
//! |---|---|
//! | convolution | `2 * oH * oW * oC * iC * F^2` |
//! | transposed convolution | as the strided convolution it is the adjoint of |
//! | batch norm | 2 per output element |
//! | leaky ReLU, element-wise add | 1 per element |
//! | max-pool, upsample, broadcast | 0 |
//! | depth weighting | 6 per window tap |
//! | involution application | `2 * H * W * C * F^2` |
//! | offset modulation | 1 per generator weight per tap |

use std::fmt::Write as _;

use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::operators::{
    count_params, count_params_with_bn_stats, GeneratorMode, OperatorConfig,
    OperatorKind, EMBED_DIM, N1_FILTERS,
};

/// Inference cost reported for the published detector, in GFLOPs.
pub const PUBLISHED_GFLOPS: f64 = 26.72;

/// Published parameter counts for `F = 3, 5, 7`.
pub fn published_params(kind: OperatorKind) -> Option<[usize; 3]> {
    match kind {
        OperatorKind::Convolution => Some([216, 600, 1176]),
        OperatorKind::Involution => Some([145, 289, 505]),
        OperatorKind::DepthAwareHyperInvolution => Some([273, 273, 273]),
        OperatorKind::HyperInvolution => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerProfile {
    pub name: String,
    pub kind: &'static str,
    /// Output `(h, w, c)`.
    pub out: (usize, usize, usize),
    pub params: usize,
    /// Non-trainable batch-norm running statistics.
    pub bn_stats: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelProfile {
    pub layers: Vec<LayerProfile>,
}

/// `ceil(n / s)`, the output extent of a same-padded strided convolution.
fn same_out(n: usize, s: usize) -> usize {
    n.div_ceil(s)
}

pub fn conv_flops(out_h: usize, out_w: usize, out_c: usize, in_c: usize, f: usize) -> u64 {
    2 * (out_h * out_w * out_c * in_c * f * f) as u64
}

/// Same-padded convolution on an `(h, w, in_c)` input.
pub fn conv_layer(name: &str, (h, w, in_c): (usize, usize, usize), out_c: usize, f: usize, stride: usize, bias: bool) -> LayerProfile {
    let (oh, ow) = (same_out(h, stride), same_out(w, stride));
    LayerProfile {
        name: name.to_string(),
        kind: "conv",
        out: (oh, ow, out_c),
        params: out_c * in_c * f * f + if bias { out_c } else { 0 },
        bn_stats: 0,
        flops: conv_flops(oh, ow, out_c, in_c, f),
    }
}

fn elementwise(name: &str, kind: &'static str, out: (usize, usize, usize), per: u64) -> LayerProfile {
    LayerProfile {
        name: name.to_string(),
        kind,
        out,
        params: 0,
        bn_stats: 0,
        flops: per * (out.0 * out.1 * out.2) as u64,
    }
}

fn batchnorm(name: &str, out: (usize, usize, usize)) -> LayerProfile {
    LayerProfile {
        params: 2 * out.2,
        bn_stats: 2 * out.2,
        ..elementwise(name, "batchnorm", out, 2)
    }
}

fn pool(name: &str, (h, w, c): (usize, usize, usize)) -> LayerProfile {
    elementwise(name, "maxpool", (h / 2, w / 2, c), 0)
}

impl ModelProfile {
    fn push(&mut self, l: LayerProfile) -> (usize, usize, usize) {
        let out = l.out;
        self.layers.push(l);
        out
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_bn_stats(&self) -> usize {
        self.layers.iter().map(|l| l.bn_stats).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    pub fn params_of(&self, prefix: &str) -> usize {
        self.layers.iter().filter(|l| l.name.starts_with(prefix)).map(|l| l.params).sum()
    }

    pub fn table_csv(&self) -> String {
        let mut s = String::from("layer,kind,out_h,out_w,out_c,params,bn_stats,flops\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                l.name, l.kind, l.out.0, l.out.1, l.out.2, l.params, l.bn_stats, l.flops
            );
        }
        let _ = writeln!(
            s,
            "total,,,,,{},{},{}",
            self.total_params(),
            self.total_bn_stats(),
            self.total_flops()
        );
        s
    }

    pub fn table_text(&self) -> String {
        let mut s = format!(
            "{:<28}{:<12}{:>16}{:>12}{:>10}{:>16}\n",
            "layer", "kind", "output", "params", "bn_stats", "FLOPs"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<28}{:<12}{:>16}{:>12}{:>10}{:>16}",
                l.name,
                l.kind,
                format!("{}x{}x{}", l.out.0, l.out.1, l.out.2),
                l.params,
                l.bn_stats,
                l.flops
            );
        }
        let _ = writeln!(
            s,
            "{:<56}{:>12}{:>10}{:>16}",
            "total",
            self.total_params(),
            self.total_bn_stats(),
            self.total_flops()
        );
        let _ = writeln!(
            s,
            "GFLOPs: {:.4} (published detector: {PUBLISHED_GFLOPS})",
            self.gflops()
        );
        s
    }
}

/// Hyper-network kernel generation on an `(h, w, c)` input.
fn hyper_layers(p: &mut ModelProfile, name: &str, cfg: &ModelConfig, (h, w, c): (usize, usize, usize)) {
    let mut ch = c;
    for (i, &o) in N1_FILTERS.iter().enumerate() {
        let bn_name = if i == 2 { format!("{name}.lambda") } else { format!("{name}.bn.{i}") };
        p.push(conv_layer(&format!("{name}.n1.{i}"), (h, w, ch), o, 1, 1, true));
        p.push(batchnorm(&bn_name, (h, w, o)));
        p.push(elementwise(&format!("{name}.act.{i}"), "leaky_relu", (h, w, o), 1));
        ch = o;
    }
    let taps = cfg.kernel_size * cfg.kernel_size;
    match cfg.generator {
        GeneratorMode::LiteralBroadcast => {
            p.push(conv_layer(&format!("{name}.n2"), (h, w, EMBED_DIM), cfg.groups, 1, 1, true));
            p.push(elementwise(&format!("{name}.broadcast"), "broadcast", (h, w, taps * cfg.groups), 0));
        }
        GeneratorMode::CoordinateModulated => {
            // Per-tap pointwise weights `w[g, c] * code[t, c]`, then one 1x1 conv.
            p.push(elementwise(&format!("{name}.modulate"), "modulate", (taps, cfg.groups, EMBED_DIM), 1));
            let mut n2 = conv_layer(&format!("{name}.n2"), (h, w * taps, EMBED_DIM), cfg.groups, 1, 1, true);
            n2.out = (h, w, taps * cfg.groups);
            p.push(n2);
        }
    }
}

fn stream_layers(p: &mut ModelProfile, name: &str, cfg: &ModelConfig, depth_aware: bool) -> (usize, usize, usize) {
    let n = cfg.input_size;
    let shape = (n, n, cfg.in_channels);
    let taps = (cfg.kernel_size * cfg.kernel_size) as u64;
    hyper_layers(p, &format!("{name}.hyper"), cfg, shape);
    if depth_aware {
        p.push(LayerProfile {
            name: format!("{name}.depth_weight"),
            kind: "depth_weight",
            out: (n, n, taps as usize),
            params: 0,
            bn_stats: 0,
            flops: 6 * taps * (n * n) as u64,
        });
    }
    p.push(LayerProfile {
        name: format!("{name}.involution"),
        kind: "involution",
        out: shape,
        params: 0,
        bn_stats: 0,
        flops: 2 * taps * (n * n * cfg.in_channels) as u64,
    });
    p.push(pool(&format!("{name}.pool"), shape))
}

/// Static per-layer description of the detector built from `cfg`.
pub fn profile_model(cfg: &ModelConfig) -> Result<ModelProfile> {
    cfg.validate()?;
    let mut p = ModelProfile::default();
    let rgb = stream_layers(&mut p, "rgb", cfg, true);
    stream_layers(&mut p, "depth", cfg, false);

    let fc = cfg.fusion();
    let (h, w, c) = rgb;
    let k = fc.kernel;
    p.push(conv_layer("fusion.residual", rgb, c, k, 1, true));
    p.push(elementwise("fusion.residual.act", "leaky_relu", rgb, 1));
    p.push(elementwise("fusion.residual.add", "add", rgb, 1));
    p.push(elementwise("fusion.stream_add", "add", rgb, 1));
    let up = p.push(elementwise("fusion.upsample", "upsample", (h * fc.upsample, w * fc.upsample, c), 0));
    let e = p.push(conv_layer("fusion.encode", up, fc.width, k, fc.stride, true));
    p.push(elementwise("fusion.encode.act", "leaky_relu", e, 1));
    let b = p.push(conv_layer("fusion.bottleneck", e, fc.width, k, fc.stride, true));
    p.push(elementwise("fusion.bottleneck.act", "leaky_relu", b, 1));
    let mut decode = conv_layer("fusion.decode", b, fc.width, k, 1, true);
    decode.kind = "tconv";
    decode.out = e;
    p.push(decode);
    let mut x = p.push(elementwise("fusion.skip_add", "add", e, 1));

    for (i, &oc) in cfg.backbone.iter().enumerate() {
        let name = format!("backbone.{i}");
        x = p.push(conv_layer(&format!("{name}.conv"), x, oc, 3, 1, false));
        x = p.push(batchnorm(&format!("{name}.bn"), x));
        x = p.push(elementwise(&format!("{name}.act"), "leaky_relu", x, 1));
        if cfg.pool_after.contains(&(i + 1)) {
            x = p.push(pool(&format!("{name}.pool"), x));
        }
    }
    let out = p.push(conv_layer("head", x, cfg.num_anchors() * cfg.slot_len(), 1, 1, true));
    if (out.0, out.1) != (cfg.grid_size(), cfg.grid_size()) {
        return Err(Error::Shape(format!("profiled grid {out:?} disagrees with config")));
    }
    Ok(p)
}

/// CSV of parameter counts: one row per operator, one column per kernel
/// size.
pub fn emit_comparison(kinds: &[OperatorKind], sizes: &[usize], with_bn_stats: bool) -> String {
    let mut s = String::from("operator");
    for f in sizes {
        let _ = write!(s, ",F={f}");
    }
    s.push('\n');
    for &kind in kinds {
        s.push_str(kind.label());
        for &f in sizes {
            let cfg = OperatorConfig::comparison(kind, f);
            let n = if with_bn_stats { count_params_with_bn_stats(&cfg) } else { count_params(&cfg) };
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
    }
    s
}

/// Parses [`emit_comparison`] output back into `(label, counts)` rows.
pub fn parse_comparison(csv: &str) -> Result<Vec<(String, Vec<usize>)>> {
    csv.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut it = l.split(',');
            let label = it.next().unwrap_or_default().to_string();
            let counts = it
                .map(|v| v.parse().map_err(|_| Error::InvalidArgument(format!("bad count `{v}`"))))
                .collect::<Result<Vec<usize>>>()?;
            Ok((label, counts))
        })
        .collect()
}

/// Our counts next to the published ones for `F = 3, 5, 7`.
pub fn published_delta_csv() -> String {
    let mut s = String::from("operator,F,ours_trainable,ours_with_bn_stats,published,delta_trainable,delta_with_bn_stats\n");
    for kind in OperatorKind::ALL {
        let Some(published) = published_params(kind) else { continue };
        for (f, pubv) in [3, 5, 7].into_iter().zip(published) {
            let cfg = OperatorConfig::comparison(kind, f);
            let (a, b) = (count_params(&cfg), count_params_with_bn_stats(&cfg));
            let _ = writeln!(
                s,
                "{},{f},{a},{b},{pubv},{},{}",
                kind.label(),
                a as i64 - pubv as i64,
                b as i64 - pubv as i64
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detector;

    #[test]
    fn conv_formula_instances() {
        let l = conv_layer("c", (10, 10, 1), 1, 1, 1, false);
        assert_eq!(l.flops, 200);
        let big = conv_layer("c", (20, 20, 1), 1, 1, 1, false);
        assert_eq!(big.flops, 4 * l.flops);
        assert_eq!(conv_layer("c", (8, 8, 3), 8, 3, 1, false).params, 216);
    }

    #[test]
    fn empty_profile_is_zero() {
        let p = ModelProfile::default();
        assert_eq!((p.total_params(), p.total_flops()), (0, 0));
    }

    #[test]
    fn params_match_built_model() {
        let cfg = ModelConfig {
            input_size: 64,
            backbone: vec![4, 4, 6, 6, 8, 8, 8, 8, 8, 8, 10, 10, 10],
            ..ModelConfig::default()
        };
        let p = profile_model(&cfg).unwrap();
        let m = Detector::new(cfg, 0).unwrap();
        assert_eq!(p.total_params(), m.store.trainable_scalars());
        let buffers: usize = m
            .store
            .entries()
            .iter()
            .filter(|e| e.kind == crate::params::ParamKind::Buffer)
            .map(|e| e.value.numel())
            .sum();
        assert_eq!(p.total_bn_stats(), buffers);
        assert_eq!(p.params_of("rgb.depth_weight"), 0);
        assert!(p.params_of("fusion") > 0);
    }

    #[test]
    fn comparison_roundtrip() {
        let csv = emit_comparison(&OperatorKind::ALL, &[3, 5, 7], false);
        let rows = parse_comparison(&csv).unwrap();
        assert_eq!(rows[0], ("standard_convolution".to_string(), vec![216, 600, 1176]));
        let hyper = &rows.iter().find(|r| r.0 == "depth_aware_hyper_involution").unwrap().1;
        assert!(hyper.iter().all(|&v| v == hyper[0]));
        assert_eq!(emit_comparison(&OperatorKind::ALL, &[3, 5, 7], false), csv);
    }
}
