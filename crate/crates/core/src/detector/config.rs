//! Architecture hyper-parameters and their flat `key = value` file form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::depth::{DepthWeighting, WeightingKind, WendlandForm, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::operators::GeneratorMode;

pub const BACKBONE_CONVS: usize = 13;

/// VGG-16 channel plan.
pub const DEFAULT_BACKBONE: [usize; BACKBONE_CONVS] =
    [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];

/// Backbone convolutions (1-based) followed by a 2x2/2 max-pool. Together
/// with the pool at the end of each input stream this gives 5 pools.
pub const DEFAULT_POOL_AFTER: [usize; 4] = [2, 4, 7, 10];

/// YOLOv2 VOC priors, in units of a 13-cell grid, normalised to `[0, 1]`.
pub const DEFAULT_ANCHORS: [(f64, f64); 5] = [
    (1.3221 / 13.0, 1.73145 / 13.0),
    (3.19275 / 13.0, 4.00944 / 13.0),
    (5.05587 / 13.0, 8.09892 / 13.0),
    (9.47112 / 13.0, 4.84053 / 13.0),
    (11.2364 / 13.0, 10.0071 / 13.0),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub groups: usize,
    pub weighting: WeightingKind,
    pub gamma: f64,
    pub wendland: WendlandForm,
    pub generator: GeneratorMode,
    pub backbone: Vec<usize>,
    pub pool_after: Vec<usize>,
    pub anchors: Vec<(f64, f64)>,
    pub classes: usize,
    pub fusion_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 416,
            in_channels: 3,
            kernel_size: 3,
            groups: 1,
            weighting: WeightingKind::InverseMultiquadric,
            gamma: DEFAULT_GAMMA,
            wendland: WendlandForm::Canonical,
            generator: GeneratorMode::CoordinateModulated,
            backbone: DEFAULT_BACKBONE.to_vec(),
            pool_after: DEFAULT_POOL_AFTER.to_vec(),
            anchors: DEFAULT_ANCHORS.to_vec(),
            classes: 3,
            fusion_width: 3,
        }
    }
}

impl ModelConfig {
    /// A reduced-width configuration sized for CPU training on small
    /// synthetic datasets. Same topology as the default.
    pub fn desk() -> Self {
        Self {
            input_size: 96,
            backbone: vec![8, 8, 16, 16, 32, 32, 32, 48, 48, 48, 64, 64, 64],
            ..Self::default()
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn slot_len(&self) -> usize {
        5 + self.classes
    }

    pub fn weighting(&self) -> DepthWeighting {
        DepthWeighting {
            kind: self.weighting,
            gamma: self.gamma,
            wendland: self.wendland,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            in_channels: self.in_channels,
            width: self.fusion_width,
            ..FusionConfig::default()
        }
    }

    /// Spatial extent after the stream pool and every backbone pool
    /// (2x2 windows, stride 2, floor division).
    pub fn stream_size(&self) -> usize {
        self.input_size / 2
    }

    pub fn grid_size(&self) -> usize {
        self.pool_after
            .iter()
            .fold(self.stream_size(), |s, _| s / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.backbone.len() != BACKBONE_CONVS {
            return bad(format!(
                "backbone must have exactly {BACKBONE_CONVS} convolutions, got {}",
                self.backbone.len()
            ));
        }
        if self.backbone.contains(&0) {
            return bad("backbone channel counts must be positive".into());
        }
        let mut prev = 0;
        for &p in &self.pool_after {
            if p <= prev || p > BACKBONE_CONVS {
                return bad(format!("pool_after must be increasing indices in 1..=13, got {:?}", self.pool_after));
            }
            prev = p;
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.kernel_size));
        }
        if self.groups == 0 || !self.in_channels.is_multiple_of(self.groups) {
            return bad(format!(
                "{} input channels not divisible into {} groups",
                self.in_channels, self.groups
            ));
        }
        if self.classes == 0 {
            return bad("classes must be >= 1".into());
        }
        if self.anchors.is_empty() || self.anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return bad("anchors must be a non-empty list of positive (w, h)".into());
        }
        if self.grid_size() == 0 {
            return bad(format!("input size {} leaves an empty grid", self.input_size));
        }
        self.weighting().validate()?;
        self.fusion().validate()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "input_size = {}", self.input_size);
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "kernel_size = {}", self.kernel_size);
        let _ = writeln!(s, "groups = {}", self.groups);
        let _ = writeln!(s, "weighting = {}", self.weighting);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "wendland = {}", self.wendland);
        let _ = writeln!(s, "generator = {}", self.generator);
        let _ = writeln!(s, "backbone = {}", list(&self.backbone));
        let _ = writeln!(s, "pool_after = {}", list(&self.pool_after));
        let anchors: Vec<String> = self.anchors.iter().map(|(w, h)| format!("{w}x{h}")).collect();
        let _ = writeln!(s, "anchors = {}", anchors.join(","));
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "fusion_width = {}", self.fusion_width);
        s
    }

    /// Overrides fields from `key = value` pairs; unknown keys are errors.
    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|p| num(key, p)).collect()
        }
        match key {
            "input_size" => self.input_size = num(key, value)?,
            "in_channels" => self.in_channels = num(key, value)?,
            "kernel_size" => self.kernel_size = num(key, value)?,
            "groups" => self.groups = num(key, value)?,
            "weighting" => self.weighting = value.trim().parse()?,
            "gamma" => self.gamma = num(key, value)?,
            "wendland" => self.wendland = value.trim().parse()?,
            "generator" => self.generator = value.trim().parse()?,
            "backbone" => self.backbone = list(key, value)?,
            "pool_after" => self.pool_after = list(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "fusion_width" => self.fusion_width = num(key, value)?,
            "anchors" => {
                self.anchors = value
                    .split(',')
                    .map(|p| {
                        let (w, h) = p.trim().split_once('x').ok_or_else(|| {
                            Error::InvalidArgument(format!("anchor `{p}` is not WxH"))
                        })?;
                        Ok((num(key, w)?, num(key, h)?))
                    })
                    .collect::<Result<_>>()?
            }
            other => {
                return Err(Error::InvalidArgument(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("line {}: expected `key = value`", no + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
