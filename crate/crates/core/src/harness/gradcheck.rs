//! Central finite differences against the autograd gradients, in float64.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::correlation::{correlate, CorrelationMap};
use crate::encoders::{TextFeature, VisionFeature};
use crate::error::{EscError, Result};
use crate::escnet::{image_batch, loss, EscNet};
use crate::nn::{Linear, ParamGroup, ParamStore, Vb};
use crate::ppg::{self, PromptEncoder};
use crate::rng::substream;
use crate::samblock::{block_prefix, SamBlock};
use crate::vlf::{vlf_prefix, Vlf};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;
/// Coordinates checked per tensor (plus its largest analytic entry).
pub const SAMPLES_PER_TENSOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Linear,
    Correlation,
    Vlf,
    Samblock,
    All,
}

impl Scope {
    pub const ALL: [Scope; 5] = [
        Scope::Linear,
        Scope::Correlation,
        Scope::Vlf,
        Scope::Samblock,
        Scope::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Linear => "linear",
            Scope::Correlation => "correlation",
            Scope::Vlf => "vlf",
            Scope::Samblock => "samblock",
            Scope::All => "all",
        }
    }

    /// Acceptance bound on the maximum relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Linear => 1e-7,
            Scope::Correlation | Scope::Vlf | Scope::Samblock => 1e-4,
            Scope::All => 1e-3,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = EscError;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                EscError::Invalid(format!(
                    "unknown gradcheck scope `{s}` (linear, correlation, vlf, samblock, all)"
                ))
            })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub scope: Scope,
    pub seed: u64,
    pub step: f64,
    /// Max relative error per checked tensor.
    pub per_tensor: BTreeMap<String, f64>,
    pub max_relative_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn set_entry(var: &Var, base: &[f64], idx: usize, value: f64) -> Result<()> {
    let mut v = base.to_vec();
    v[idx] = value;
    var.set(&Tensor::from_vec(v, var.dims(), var.device())?)?;
    Ok(())
}

/// Compares autograd and central differences of the scalar `f` on sampled
/// coordinates of every named variable.
pub fn check<F>(f: F, vars: &[(String, Var)], rng: &mut ChaCha8Rng) -> Result<(BTreeMap<String, f64>, usize)>
where
    F: Fn() -> Result<Tensor>,
{
    let out = f()?;
    let grads = out.backward()?;
    let mut per_tensor = BTreeMap::new();
    let mut checked = 0;
    for (name, var) in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => values(g)?,
            None => vec![0.0; var.elem_count()],
        };
        let base = values(var.as_tensor())?;
        let n = base.len();
        let mut idx: Vec<usize> = sample_indices(rng, n, SAMPLES_PER_TENSOR.min(n)).into_vec();
        let largest = (0..n)
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .expect("non-empty tensor");
        if !idx.contains(&largest) {
            idx.push(largest);
        }
        let mut worst = 0f64;
        for &i in &idx {
            set_entry(var, &base, i, base[i] + STEP)?;
            let plus = f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            set_entry(var, &base, i, base[i] - STEP)?;
            let minus = f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            set_entry(var, &base, i, base[i])?;
            let numeric = (plus - minus) / (2.0 * STEP);
            log::debug!("{name}[{i}] analytic {:e} numeric {numeric:e}", analytic[i]);
            worst = worst.max(relative_error(analytic[i], numeric));
            checked += 1;
        }
        per_tensor.insert(name.clone(), worst);
    }
    Ok((per_tensor, checked))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn input_var(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Var> {
    Ok(Var::from_tensor(&random_tensor(rng, shape, scale)?)?)
}

/// Random projection of `t` to a scalar; the weights are divided by the
/// element count so every scope produces an O(1) objective.
#[allow(dead_code)]
fn project(t: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let r = random_tensor(rng, t.dims(), 1.0 / t.elem_count() as f64)?;
    Ok((t * r)?.sum_all()?)
}

fn params(store: &ParamStore) -> Vec<(String, Var)> {
    store.trainable_vars()
}

/// Runs one scope on the tiny configuration.
pub fn gradcheck(scope: Scope, seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::tiny()
    };
    let mut rng = substream(seed, &format!("gradcheck/{}", scope.name()));
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let n_c = 3;
    let (per_tensor, checked) = match scope {
        Scope::Linear => {
            let mut store = ParamStore::new(seed, DType::F64);
            let layer = Linear::new(Vb::root(&mut store, ParamGroup::Head).pp("linear"), 5, 3)?;
            let x = input_var(&mut rng, &[4, 5], 1.0)?;
            let r = random_tensor(&mut rng, &[4, 3], 1.0)?;
            let mut vars = params(&store);
            vars.push(("input".into(), x.clone()));
            check(|| Ok((layer.forward(x.as_tensor())? * &r)?.sum_all()?), &vars, &mut rng)?
        }
        Scope::Correlation => {
            let grid = input_var(&mut rng, &[2, c, h, w], 1.0)?;
            let table = input_var(&mut rng, &[c, n_c], 1.0)?;
            let r = random_tensor(&mut rng, &[2, n_c, h, w], 1.0)?;
            let vars = vec![("vision".to_string(), grid.clone()), ("text".to_string(), table.clone())];
            let f = || {
                let v = VisionFeature {
                    grid: grid.as_tensor().clone(),
                    skips: vec![],
                };
                let t = TextFeature {
                    table: table.as_tensor().clone(),
                };
                Ok((correlate(&v, &t)?.values * &r)?.sum_all()?)
            };
            check(f, &vars, &mut rng)?
        }
        Scope::Vlf => {
            let mut store = ParamStore::new(seed, DType::F64);
            let vlf = Vlf::new(Vb::root(&mut store, ParamGroup::Head).pp(vlf_prefix(0)), &cfg)?;
            let corr = input_var(&mut rng, &[1, n_c, h, w], 0.5)?;
            let refined = input_var(&mut rng, &[1, c, h, w], 1.0)?;
            let table = input_var(&mut rng, &[c, n_c], 1.0)?;
            let r1 = random_tensor(&mut rng, &[n_c, h * w, c], 1.0 / (n_c * h * w * c) as f64)?;
            let r2 = random_tensor(&mut rng, &[1, n_c, h, w], 1.0 / (n_c * h * w) as f64)?;
            let mut vars = params(&store);
            vars.push(("input.corr".into(), corr.clone()));
            vars.push(("input.refined".into(), refined.clone()));
            vars.push(("input.text".into(), table.clone()));
            let f = || {
                let cm = CorrelationMap {
                    values: corr.as_tensor().clone(),
                };
                let t = TextFeature {
                    table: table.as_tensor().clone(),
                };
                let (emb, scalar) = vlf.forward(&cm, refined.as_tensor(), &t)?;
                Ok(((emb.values * &r1)?.sum_all()? + (scalar.values * &r2)?.sum_all()?)?)
            };
            check(f, &vars, &mut rng)?
        }
        Scope::Samblock => {
            let cfg = ModelConfig {
                prompts: crate::config::PromptKinds {
                    points: true,
                    boxes: true,
                    masks: true,
                },
                ..cfg
            };
            let mut store = ParamStore::new(seed, DType::F64);
            let encoder = PromptEncoder::new(Vb::root(&mut store, ParamGroup::Sam).pp("prompt"), &cfg)?;
            let block = SamBlock::new(Vb::root(&mut store, ParamGroup::Sam).pp(block_prefix(0)), &cfg)?;
            let corr = CorrelationMap {
                values: random_tensor(&mut rng, &[1, n_c, h, w], 0.5)?,
            };
            let prompts = ppg::generate(&corr, &cfg, seed)?;
            let grid = input_var(&mut rng, &[1, c, h, w], 1.0)?;
            let r = random_tensor(&mut rng, &[1, c, h, w], 1.0 / (c * h * w) as f64)?;
            let mut vars = params(&store);
            vars.push(("input.vision".into(), grid.clone()));
            let f = || {
                let embeds = encoder.encode(&prompts)?;
                let pe = encoder.image_pe()?;
                Ok((block.refine_vision(grid.as_tensor(), &embeds, &pe)? * &r)?.sum_all()?)
            };
            check(f, &vars, &mut rng)?
        }
        Scope::All => {
            let mut store = ParamStore::new(seed, DType::F64);
            let model = EscNet::new(&cfg, &mut store)?;
            let classes: Vec<usize> = (0..n_c).collect();
            let images: Vec<Vec<f32>> = (0..2)
                .map(|_| (0..3 * cfg.image_size * cfg.image_size).map(|_| rng.gen::<f32>()).collect())
                .collect();
            let x = image_batch(&images, cfg.image_size, DType::F64)?;
            let gt: Vec<Vec<u8>> = (0..2)
                .map(|_| (0..cfg.image_size * cfg.image_size).map(|_| rng.gen_range(0..n_c as u8)).collect())
                .collect();
            let (v, t) = model.encode(&x, &classes)?;
            let prompts: Vec<_> = model
                .forward_features(&v, &t)?
                .blocks
                .into_iter()
                .filter_map(|b| b.prompts)
                .collect();
            let f = || {
                let (v, t) = model.encode(&x, &classes)?;
                let out = model.forward_features_with(&v, &t, Some(&prompts))?;
                loss(&out.logits, &gt)
            };
            check(f, &params(&store), &mut rng)?
        }
    };
    let max_relative_error = per_tensor.values().copied().fold(0.0, f64::max);
    Ok(GradReport {
        scope,
        seed,
        step: STEP,
        per_tensor,
        max_relative_error,
        checked,
        tolerance: scope.tolerance(),
        passed: max_relative_error < scope.tolerance(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!(relative_error(1e-9, 0.0) <= 1e-3);
    }

    #[test]
    fn linear_scope_is_exact_to_rounding() {
        let r = gradcheck(Scope::Linear, 0).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.per_tensor.len(), 3);
    }

    #[test]
    fn correlation_scope_matches_finite_differences() {
        let r = gradcheck(Scope::Correlation, 1).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
