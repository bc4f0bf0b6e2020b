//! Depth-similarity weighting.
//!
//! Each weighting function maps the depth difference between a window's
//! centre pixel and one of its neighbours to a multiplicative weight. The
//! per-position [`weight_field`] holds those weights for every window tap
//! and has no trainable parameters.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default decay for the inverse-multiquadric weight.
pub const DEFAULT_GAMMA: f64 = 9.5;

/// Metric depth per pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "depth values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// `(1, h, w, channels)` tensor with the depth repeated in each channel.
    pub fn to_tensor(&self, channels: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.values.len() * channels);
        for &v in &self.values {
            data.extend(std::iter::repeat_n(v, channels));
        }
        Tensor::new(&[1, self.height, self.width, channels], data).expect("extents match")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightingKind {
    /// `1 / sqrt(1 + (gamma * dd)^2)`
    InverseMultiquadric,
    /// `exp(-(gamma * |dd|)^2)`
    Gaussian,
    /// `max(1 - |dd|, 0)`
    Triangular,
    /// Wendland c2, see [`WendlandForm`].
    WendlandC2,
}

impl WeightingKind {
    pub const ALL: [WeightingKind; 4] = [
        WeightingKind::InverseMultiquadric,
        WeightingKind::Gaussian,
        WeightingKind::Triangular,
        WeightingKind::WendlandC2,
    ];

    pub fn uses_gamma(self) -> bool {
        matches!(
            self,
            WeightingKind::InverseMultiquadric | WeightingKind::Gaussian
        )
    }
}

impl fmt::Display for WeightingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightingKind::InverseMultiquadric => "imq",
            WeightingKind::Gaussian => "gaussian",
            WeightingKind::Triangular => "triangular",
            WeightingKind::WendlandC2 => "wendland",
        })
    }
}

impl FromStr for WeightingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imq" | "inverse-multiquadric" | "inverse_multiquadric" => {
                Ok(WeightingKind::InverseMultiquadric)
            }
            "gaussian" => Ok(WeightingKind::Gaussian),
            "triangular" => Ok(WeightingKind::Triangular),
            "wendland" | "wendland-c2" | "wendland_c2" => Ok(WeightingKind::WendlandC2),
            other => Err(Error::InvalidArgument(format!(
                "unknown weighting `{other}` (expected imq, gaussian, triangular, wendland)"
            ))),
        }
    }
}

/// Which reading of the Wendland c2 polynomial to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WendlandForm {
    /// `(1 - r)^4 (4r + 1)` with `r = min(|dd|, 1)`; compactly supported
    /// on `|dd| < 1`.
    #[default]
    Canonical,
    /// `(1 - dd)^4 (4 dd + 1)` on the signed difference with no clamp.
    /// Not symmetric in its arguments.
    Signed,
}

impl FromStr for WendlandForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(WendlandForm::Canonical),
            "signed" | "literal" => Ok(WendlandForm::Signed),
            other => Err(Error::InvalidArgument(format!("unknown wendland form `{other}`"))),
        }
    }
}

impl fmt::Display for WendlandForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WendlandForm::Canonical => "canonical",
            WendlandForm::Signed => "signed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthWeighting {
    pub kind: WeightingKind,
    pub gamma: f64,
    pub wendland: WendlandForm,
}

impl Default for DepthWeighting {
    fn default() -> Self {
        Self {
            kind: WeightingKind::InverseMultiquadric,
            gamma: DEFAULT_GAMMA,
            wendland: WendlandForm::Canonical,
        }
    }
}

impl DepthWeighting {
    pub fn new(kind: WeightingKind, gamma: f64) -> Result<Self> {
        let w = Self {
            kind,
            gamma,
            wendland: WendlandForm::Canonical,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_gamma() && !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be a positive finite number, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Weight for the centre depth `d1` and neighbour depth `d2`.
    pub fn weight(&self, d1: f64, d2: f64) -> Result<f64> {
        if !d1.is_finite() || !d2.is_finite() {
            return Err(Error::NonFinite(format!("depth pair ({d1}, {d2})")));
        }
        Ok(self.weight_unchecked(d1 - d2))
    }

    pub(crate) fn weight_unchecked(&self, dd: f64) -> f64 {
        match self.kind {
            WeightingKind::InverseMultiquadric => {
                let s = self.gamma * dd;
                1.0 / (1.0 + s * s).sqrt()
            }
            WeightingKind::Gaussian => {
                let s = self.gamma * dd.abs();
                (-(s * s)).exp()
            }
            WeightingKind::Triangular => (1.0 - dd.abs()).max(0.0),
            WeightingKind::WendlandC2 => match self.wendland {
                WendlandForm::Canonical => {
                    let r = dd.abs().min(1.0);
                    (1.0 - r).powi(4) * (4.0 * r + 1.0)
                }
                WendlandForm::Signed => (1.0 - dd).powi(4) * (4.0 * dd + 1.0),
            },
        }
    }
}

/// `(H, W, F, F)` tensor of weights between each pixel and its window
/// neighbours. Neighbours outside the map count as having the centre's
/// depth, so border windows get weight 1 on their padded taps.
pub fn weight_field(depth: &DepthMap, f: usize, weighting: &DepthWeighting) -> Result<Tensor> {
    if f.is_multiple_of(2) {
        return Err(Error::EvenKernel(f));
    }
    weighting.validate()?;
    let (h, w) = (depth.height, depth.width);
    let r = (f / 2) as isize;
    let mut out = Vec::with_capacity(h * w * f * f);
    for i in 0..h {
        for j in 0..w {
            let centre = depth.at(i, j);
            for m in -r..=r {
                for n in -r..=r {
                    let (y, x) = (i as isize + m, j as isize + n);
                    let neighbour = if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        centre
                    } else {
                        depth.at(y as usize, x as usize)
                    };
                    out.push(weighting.weight_unchecked(centre - neighbour));
                }
            }
        }
    }
    Tensor::new(&[h, w, f, f], out)
}

/// Stacks per-sample weight fields into the `(n, h, w, F*F)` layout the
/// involution op consumes.
pub fn batch_weight_field(
    depths: &[DepthMap],
    f: usize,
    weighting: &DepthWeighting,
) -> Result<Tensor> {
    let fields = depths
        .iter()
        .map(|d| {
            weight_field(d, f, weighting)?.reshape(&[1, d.height(), d.width(), f * f])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&fields)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(kind: WeightingKind, gamma: f64) -> DepthWeighting {
        DepthWeighting::new(kind, gamma).unwrap()
    }

    #[test]
    fn zero_difference_is_one() {
        for kind in WeightingKind::ALL {
            assert_eq!(w(kind, DEFAULT_GAMMA).weight(3.2, 3.2).unwrap(), 1.0, "{kind}");
        }
        let signed = DepthWeighting {
            wendland: WendlandForm::Signed,
            ..w(WeightingKind::WendlandC2, 1.0)
        };
        assert_eq!(signed.weight(1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn imq_at_unit_argument() {
        let v = w(WeightingKind::InverseMultiquadric, 2.0).weight(1.5, 1.0).unwrap();
        assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn triangular_clamps() {
        assert_eq!(w(WeightingKind::Triangular, 1.0).weight(0.0, 2.0).unwrap(), 0.0);
        assert_eq!(w(WeightingKind::Triangular, 1.0).weight(0.25, 0.0).unwrap(), 0.75);
    }

    #[test]
    fn wendland_forms() {
        let canon = w(WeightingKind::WendlandC2, 1.0);
        assert_eq!(canon.weight(0.0, 1.5).unwrap(), 0.0);
        let r: f64 = 0.5;
        let expect = (1.0 - r).powi(4) * (4.0 * r + 1.0);
        assert_eq!(canon.weight(0.0, 0.5).unwrap(), expect);
        assert_eq!(canon.weight(0.5, 0.0).unwrap(), expect);

        let signed = DepthWeighting {
            wendland: WendlandForm::Signed,
            ..canon
        };
        // dd = -0.5: (1.5)^4 * (-1)
        assert_eq!(signed.weight(0.0, 0.5).unwrap(), -(1.5f64.powi(4)));
        assert_eq!(signed.weight(0.5, 0.0).unwrap(), expect);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DepthWeighting::new(WeightingKind::Gaussian, 0.0).is_err());
        assert!(DepthWeighting::new(WeightingKind::Triangular, 0.0).is_ok());
        let g = w(WeightingKind::Gaussian, 1.0);
        assert!(g.weight(f64::NAN, 1.0).is_err());
        assert!(g.weight(1.0, f64::INFINITY).is_err());
        assert!(DepthMap::new(1, 1, vec![-1.0]).is_err());
    }

    #[test]
    fn constant_map_gives_ones() {
        let d = DepthMap::constant(4, 5, 2.5).unwrap();
        for kind in WeightingKind::ALL {
            let field = weight_field(&d, 3, &w(kind, DEFAULT_GAMMA)).unwrap();
            assert_eq!(field, Tensor::ones(&[4, 5, 3, 3]));
        }
    }

    #[test]
    fn single_pixel_map_all_neighbours_outside() {
        let d = DepthMap::new(1, 1, vec![7.0]).unwrap();
        let field = weight_field(&d, 3, &DepthWeighting::default()).unwrap();
        assert_eq!(field, Tensor::ones(&[1, 1, 3, 3]));
    }

    #[test]
    fn hand_evaluated_triangular_field() {
        // [1 1; 1 2], F = 3. For the (0,0) centre (depth 1) the in-bounds
        // neighbours are (0,1)=1, (1,0)=1, (1,1)=2 -> weight max(1-1,0) = 0
        // on the bottom-right tap; every other tap is 1.
        let d = DepthMap::new(2, 2, vec![1.0, 1.0, 1.0, 2.0]).unwrap();
        let field = weight_field(&d, 3, &w(WeightingKind::Triangular, 1.0)).unwrap();
        let at = |i: usize, j: usize, m: usize, n: usize| field.data()[((i * 2 + j) * 3 + m) * 3 + n];
        let mut expect00 = [[1.0; 3]; 3];
        expect00[2][2] = 0.0;
        // centre (1,1) has depth 2; neighbours (0,0),(0,1),(1,0) all depth 1.
        let mut expect11 = [[1.0; 3]; 3];
        expect11[0][0] = 0.0;
        expect11[0][1] = 0.0;
        expect11[1][0] = 0.0;
        for m in 0..3 {
            for n in 0..3 {
                assert_eq!(at(0, 0, m, n), expect00[m][n]);
                assert_eq!(at(1, 1, m, n), expect11[m][n]);
            }
        }
    }

    #[test]
    fn even_window_rejected() {
        let d = DepthMap::constant(3, 3, 1.0).unwrap();
        assert!(matches!(
            weight_field(&d, 4, &DepthWeighting::default()),
            Err(Error::EvenKernel(4))
        ));
    }

    #[test]
    fn parse_kinds() {
        for kind in WeightingKind::ALL {
            assert_eq!(kind.to_string().parse::<WeightingKind>().unwrap(), kind);
        }
        assert!("cosine".parse::<WeightingKind>().is_err());
    }
}
