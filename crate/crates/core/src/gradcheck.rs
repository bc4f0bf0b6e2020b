//! Central finite-difference checks of every differentiable op, layer and
//! operator against the tape's analytic gradients.
//!
//! Each case maps a set of input tensors (and, optionally, the trainable
//! parameters of a [`ParamStore`]) to an output tensor `y`; the checked
//! scalar is `sum(R * y)` for a fixed random `R`. The error measure is
//! `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all
//! checked scalars.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnMode, BnState, Graph, Padding, Var};
use crate::boxes::BBox;
use crate::depth::{DepthMap, DepthWeighting, WeightingKind};
use crate::detector::head::{decode, HeadLayout};
use crate::detector::{Detector, ModelConfig};
use crate::error::Result;
use crate::fusion::{Fusion, FusionConfig};
use crate::loss::{assign_targets, loss_and_grad, GroundTruth, LossWeights, TargetAssignment};
use crate::operators::{
    depth_aware_hyper_involution_forward, hyper_involution_forward, involution_forward,
    GeneratorMode, GroupSpec, HyperNetwork, InvolutionGenerator,
};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const SEEDS_PER_CASE: u64 = 5;
/// Step for the whole-detector case. Its thousands of max-pool and
/// leaky-ReLU switch points make a `1e-5` step straddle a kink for some
/// seeds. Every op is also checked on its own at [`FD_STEP`].
pub const COMPOSITE_FD_STEP: f64 = 1e-8;

type Forward = Box<dyn Fn(&mut Graph, &mut ParamStore, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    inputs: Vec<Tensor>,
    store: ParamStore,
    /// Parameters to perturb; all trainable ones when `None`.
    params: Option<Vec<ParamId>>,
    step: f64,
    forward: Forward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub seed: u64,
    pub scalars: usize,
    pub step: f64,
    pub rel_error: f64,
    pub passed: bool,
}

impl Case {
    fn new(
        name: &'static str,
        inputs: Vec<Tensor>,
        store: ParamStore,
        forward: impl Fn(&mut Graph, &mut ParamStore, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            store,
            params: None,
            step: FD_STEP,
            forward: Box::new(forward),
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match &self.params {
            Some(p) => p.clone(),
            None => self
                .store
                .ids()
                .filter(|&id| self.store.entry(id).kind == ParamKind::Trainable)
                .collect(),
        }
    }

    fn output(&self, g: &mut Graph, inputs: &[Tensor], store: &mut ParamStore) -> Result<Var> {
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        (self.forward)(g, store, &vars)
    }

    fn loss(&self, inputs: &[Tensor], store: &ParamStore, r: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let mut store = store.clone();
        let y = self.output(&mut g, inputs, &mut store)?;
        g.value(y).dot(r)
    }

    /// Runs the check; `fault` names an op whose backward is deliberately
    /// corrupted.
    pub fn check(&self, seed: u64, fault: Option<&str>) -> Result<CheckResult> {
        let mut g = Graph::new();
        if let Some(op) = fault {
            g.inject_fault(op);
        }
        let mut store = self.store.clone();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.variable(t.clone())).collect();
        let y = (self.forward)(&mut g, &mut store, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let r = Tensor::uniform(g.value(y).shape(), -1.0, 1.0, &mut rng);
        let loss = g.weighted_sum(y, r.clone())?;
        g.backward(loss)?;
        let mut store_grads = self.store.clone();
        g.write_param_grads(&mut store_grads);

        let mut analytic = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            match g.grad(*v) {
                Some(t) => analytic.extend_from_slice(t.data()),
                None => analytic.extend(std::iter::repeat_n(0.0, self.inputs[i].numel())),
            }
        }
        let ids = self.param_ids();
        for &id in &ids {
            match &store_grads.entry(id).grad {
                Some(t) => analytic.extend_from_slice(t.data()),
                None => analytic.extend(std::iter::repeat_n(0.0, self.store.get(id).numel())),
            }
        }

        let mut numeric = Vec::with_capacity(analytic.len());
        let h = self.step;
        let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * h);
        for i in 0..self.inputs.len() {
            for j in 0..self.inputs[i].numel() {
                let mut p = self.inputs.clone();
                p[i].data_mut()[j] += h;
                let lp = self.loss(&p, &self.store, &r)?;
                p[i].data_mut()[j] -= 2.0 * h;
                let lm = self.loss(&p, &self.store, &r)?;
                numeric.push(central(lp, lm));
            }
        }
        for &id in &ids {
            for j in 0..self.store.get(id).numel() {
                let mut s = self.store.clone();
                s.get_mut(id).data_mut()[j] += h;
                let lp = self.loss(&self.inputs, &s, &r)?;
                s.get_mut(id).data_mut()[j] -= 2.0 * h;
                let lm = self.loss(&self.inputs, &s, &r)?;
                numeric.push(central(lp, lm));
            }
        }

        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel_error = if scale < 1e-12 { diff } else { diff / scale };
        Ok(CheckResult {
            name: self.name,
            seed,
            scalars: analytic.len(),
            step: h,
            rel_error,
            passed: rel_error <= FD_TOLERANCE && scale > 0.0,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn depth_maps(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<DepthMap> {
    (0..n)
        .map(|_| DepthMap::new(h, w, (0..h * w).map(|_| rng.gen_range(1.0..1.3)).collect()).expect("valid depth"))
        .collect()
}

/// Every case, instantiated with shapes and values drawn from `seed`.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
    let mut out = Vec::new();
    let empty = ParamStore::new;

    for (name, stride, padding) in [
        ("conv2d_same", 1, Padding::Same),
        ("conv2d_stride2", 2, Padding::Same),
        ("conv2d_valid", 1, Padding::Valid),
    ] {
        let x = randn(&[2, h, w, 2], &mut rng);
        let k = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        out.push(Case::new(name, vec![x, k, b], empty(), move |g, _, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, padding)
        }));
    }
    for (name, stride, k) in [("transposed_conv2d", 2, 3), ("transposed_conv2d_even", 2, 2)] {
        let y = randn(&[2, h, w, 3], &mut rng);
        let wt = randn(&[3, 2, k, k], &mut rng);
        out.push(Case::new(name, vec![y, wt], empty(), move |g, _, v| {
            g.transposed_conv2d(v[0], v[1], stride, None)
        }));
    }
    out.push(Case::new("maxpool2d", vec![randn(&[2, h + 1, w + 1, 2], &mut rng)], empty(), |g, _, v| {
        g.maxpool2d(v[0], 2, 2)
    }));
    out.push(Case::new("upsample_nearest", vec![randn(&[1, h, w, 2], &mut rng)], empty(), |g, _, v| {
        g.upsample_nearest(v[0], 2)
    }));
    for (name, mode) in [("batchnorm_train", BnMode::Eval), ("batchnorm_eval", BnMode::Eval)] {
        let x = randn(&[3, h, w, 2], &mut rng);
        let scale = randn(&[2], &mut rng);
        let shift = randn(&[2], &mut rng);
        let stats = (randn(&[2], &mut rng), Tensor::uniform(&[2], 0.5, 2.0, &mut rng));
        out.push(Case::new(name, vec![x, scale, shift], empty(), move |g, _, v| {
            let (mut m, mut s) = stats.clone();
            let state = BnState {
                running_mean: &mut m,
                running_var: &mut s,
                eps: 1e-5,
                momentum: 0.9,
            };
            g.batchnorm(v[0], v[1], v[2], state, mode)
        }));
    }
    let x = randn(&[1, h, w, 3], &mut rng);
    out.push(Case::new("relu", vec![x.clone()], empty(), |g, _, v| Ok(g.relu(v[0]))));
    out.push(Case::new("leaky_relu", vec![x.clone()], empty(), |g, _, v| Ok(g.leaky_relu(v[0], 0.1))));
    out.push(Case::new("sigmoid", vec![x.clone()], empty(), |g, _, v| Ok(g.sigmoid(v[0]))));
    out.push(Case::new("exp", vec![x.clone()], empty(), |g, _, v| g.exp(v[0])));
    out.push(Case::new("square", vec![x.clone()], empty(), |g, _, v| Ok(g.square(v[0]))));
    let y = randn(&[1, h, w, 3], &mut rng);
    let b = randn(&[3], &mut rng);
    out.push(Case::new("mul_add_bias_scale", vec![x, y, b], empty(), |g, _, v| {
        let m = g.mul(v[0], v[1])?;
        let a = g.add_bias(m, v[2])?;
        let s = g.scale(a, -1.7);
        g.add(s, v[0])
    }));

    // Involution with explicit kernels, with and without a weight field.
    for (name, groups, weighted) in [("involution", 1, false), ("involution_grouped", 2, false), ("involution_weighted", 1, true)] {
        let f = 3;
        let x = randn(&[2, h, w, 4], &mut rng);
        let k = randn(&[2, h, w, f * f * groups], &mut rng);
        let wt = weighted.then(|| Tensor::uniform(&[2, h, w, f * f], 0.0, 1.0, &mut rng));
        out.push(Case::new(name, vec![x, k], empty(), move |g, _, v| g.involution(v[0], v[1], wt.clone(), f, groups)));
    }

    // Plain involution with its kernel generator.
    {
        let mut store = ParamStore::new();
        let f = 3;
        let gen = InvolutionGenerator::new(&mut store, "inv", 4, f, 2, &mut rng).expect("odd kernel");
        let x = randn(&[2, h, w, 4], &mut rng);
        out.push(Case::new("involution_generated", vec![x], store, move |g, s, v| {
            let k = gen.generate(g, s, v[0], BnMode::Eval)?;
            involution_forward(g, v[0], &k, GroupSpec::new(2, 4)?)
        }));
    }

    // Hyper-involution and the depth-aware variant, through the hyper-network.
    for mode in [GeneratorMode::CoordinateModulated, GeneratorMode::LiteralBroadcast] {
        let f = 3;
        let mut store = ParamStore::new();
        let net = HyperNetwork::new(&mut store, "hyper", 3, 1, f, mode, &mut rng);
        let x = randn(&[2, h, w, 3], &mut rng);
        let name = match mode {
            GeneratorMode::CoordinateModulated => "hyper_involution_modulated",
            GeneratorMode::LiteralBroadcast => "hyper_involution_broadcast",
        };
        let net2 = net.clone();
        out.push(Case::new(name, vec![x.clone()], store.clone(), move |g, s, v| {
            hyper_involution_forward(g, s, &net2, v[0], f, GroupSpec::new(1, 3)?, BnMode::Eval)
        }));
        let depths = depth_maps(2, h, w, &mut rng);
        let name = match mode {
            GeneratorMode::CoordinateModulated => "depth_aware_hyper_involution_modulated",
            GeneratorMode::LiteralBroadcast => "depth_aware_hyper_involution_broadcast",
        };
        out.push(Case::new(name, vec![x], store, move |g, s, v| {
            let weighting = DepthWeighting::new(WeightingKind::InverseMultiquadric, 9.5)?;
            depth_aware_hyper_involution_forward(g, s, &net, v[0], &depths, &weighting, f, GroupSpec::new(1, 3)?, BnMode::Eval)
        }));
    }

    // Fusion: gradients to both streams and all fusion parameters.
    {
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut store, "fusion", FusionConfig::default(), &mut rng).expect("valid fusion");
        let a = randn(&[1, h, w, 3], &mut rng);
        let b = randn(&[1, h, w, 3], &mut rng);
        out.push(Case::new("fusion", vec![a, b], store, move |g, s, v| fusion.fuse(g, s, v[0], v[1])));
    }

    // Detection loss through the head decoding.
    {
        let layout = HeadLayout {
            grid: 2,
            anchors: vec![(0.2, 0.3), (0.5, 0.5)],
            classes: 3,
        };
        let raw = Tensor::uniform(&[layout.len()], -1.5, 1.5, &mut rng);
        let gts: Vec<GroundTruth> = (0..3)
            .map(|_| GroundTruth {
                class: rng.gen_range(0..3),
                bbox: BBox::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6)),
            })
            .collect();
        let preds = decode(raw.data(), &layout).expect("decodable head");
        let targets: TargetAssignment = assign_targets(&gts, &layout, Some(&preds)).expect("valid targets");
        out.push(Case::new("detection_loss", vec![raw], empty(), move |g, _, v| {
            let (parts, grad) = loss_and_grad(g.value(v[0]).data(), &layout, &targets, &LossWeights::default())?;
            let grad = Tensor::new(&[layout.len()], grad)?;
            g.external_scalar(v[0], parts.total(), grad)
        }));
    }

    // Whole detector, perturbing only the depth-stream hyper-network. Eval
    // mode: train-mode batch norm over the 1x1 final grid of a batch of two
    // saturates and leaves gradients below the difference noise floor.
    {
        let cfg = ModelConfig {
            input_size: 32,
            backbone: vec![3; 13],
            anchors: vec![(0.3, 0.3), (0.6, 0.5)],
            classes: 2,
            ..ModelConfig::default()
        };
        let model = Detector::new(cfg, seed).expect("valid config");
        let rgb = Tensor::uniform(&[2, 32, 32, 3], 0.0, 1.0, &mut rng);
        let depths = depth_maps(2, 32, 32, &mut rng);
        let params = model.depth_net_param_ids();
        let mut case = Case::new("detector_depth_stream", vec![], model.store.clone(), move |g, s, _| {
            let mut m = model.clone();
            m.store = s.clone();
            let y = m.forward(g, &rgb, &depths, BnMode::Eval)?;
            *s = m.store;
            Ok(y)
        });
        case.params = Some(params);
        case.step = COMPOSITE_FD_STEP;
        out.push(case);
    }
    out
}

/// Runs every case for `SEEDS_PER_CASE` consecutive seeds from `seed`.
pub fn run_suite(seed: u64, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for s in seed..seed + SEEDS_PER_CASE {
        for case in cases(s) {
            results.push(case.check(s, fault)?);
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_cases_pass_for_one_seed() {
        for case in cases(11) {
            let r = case.check(11, None).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let case = cases(3).into_iter().find(|c| c.name == "conv2d_same").unwrap();
        assert!(!case.check(3, Some("conv2d")).unwrap().passed);
    }
}
