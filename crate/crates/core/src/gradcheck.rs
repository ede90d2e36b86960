//! Central finite-difference verification of reverse-mode gradients in
//! 64-bit precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::AdapterConfig;
use crate::adapter::Mrf;
use crate::autograd::{Fault, Tape, Var};
use crate::backbone::{BackboneConfig, MultiResFeatures};
use crate::classifier::{ClassifierConfig, DecoupledMasks};
use crate::config::RunConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::image::InputImage;
use crate::model::Model;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::train::loss::{set_loss, LossWeights, Target};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 5;

/// Scalar function of differentiable inputs recorded on a tape.
pub type LossFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;
/// Produces the inputs of a case from a seeded generator.
pub type InputFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

pub struct Case {
    pub name: String,
    pub inputs: InputFn,
    pub loss: LossFn,
}

impl Case {
    pub fn new<I, F>(name: impl Into<String>, inputs: I, loss: F) -> Self
    where
        I: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
    {
        Case {
            name: name.into(),
            inputs: Box::new(inputs),
            loss: Box::new(loss),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-12)`.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn eval<F>(loss: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + ?Sized,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = loss(&tape, &vars)?;
    out.value().item()
}

/// Compares analytic and central-difference gradients of `loss` at
/// `inputs`; returns the relative error over all input elements.
pub fn check<F>(inputs: &[Tensor<f64>], loss: &F, fault: Option<Fault>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + ?Sized,
{
    let tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = loss(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.wrt(*v) {
            Some(g) => analytic.extend(g.to_f64_vec()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(loss, &work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(loss, &work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let err = relative_error(&analytic, &numeric);
    if !err.is_finite() {
        return Err(Error::Numeric(
            "non-finite gradient in finite-difference check".into(),
        ));
    }
    Ok(err)
}

/// Runs a case over `seeds` independent input draws.
pub fn run_case(case: &Case, seeds: u64, fault: Option<Fault>) -> Result<CaseReport> {
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ s);
        let inputs = (case.inputs)(&mut rng);
        worst = worst.max(check(&inputs, &*case.loss, fault)?);
    }
    Ok(CaseReport {
        name: case.name.clone(),
        seeds,
        max_rel_err: worst,
        passed: worst < REL_TOL,
    })
}

/// Weighted sum `Σ y ⊙ w` with a fixed pseudo-random `w`, turning any output
/// into a scalar whose gradient exercises every element.
pub fn project<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.754_877_666).sin() + 0.3);
    let w = y.tape().constant(w);
    Ok(y.mul(w)?.sum_all())
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 0.5, 2.0, rng)
}

/// One case per differentiable primitive.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case::new(
            "add_broadcast",
            |r| vec![randn(r, &[3, 4]), randn(r, &[4])],
            |_, v| project(v[0].add(v[1])?),
        ),
        Case::new(
            "sub_broadcast",
            |r| vec![randn(r, &[2, 3]), randn(r, &[2, 1])],
            |_, v| project(v[0].sub(v[1])?),
        ),
        Case::new(
            "mul_broadcast",
            |r| vec![randn(r, &[2, 3, 2]), randn(r, &[3, 1])],
            |_, v| project(v[0].mul(v[1])?),
        ),
        Case::new(
            "div",
            |r| vec![randn(r, &[3, 3]), positive(r, &[3, 3])],
            |_, v| project(v[0].div(v[1])?),
        ),
        Case::new(
            "scale_add_scalar",
            |r| vec![randn(r, &[5])],
            |_, v| project(v[0].scale(-1.7).add_scalar(0.3)),
        ),
        Case::new("exp", |r| vec![randn(r, &[6])], |_, v| project(v[0].exp())),
        Case::new(
            "log",
            |r| vec![positive(r, &[6])],
            |_, v| project(v[0].ln()),
        ),
        Case::new(
            "sqrt",
            |r| vec![positive(r, &[6])],
            |_, v| project(v[0].sqrt()),
        ),
        Case::new(
            "sigmoid",
            |r| vec![randn(r, &[7])],
            |_, v| project(v[0].sigmoid()),
        ),
        Case::new(
            "gelu",
            |r| vec![randn(r, &[7])],
            |_, v| project(v[0].gelu()),
        ),
        Case::new(
            "softplus",
            |r| vec![randn(r, &[7])],
            |_, v| project(v[0].softplus()),
        ),
        Case::new(
            "matmul",
            |r| vec![randn(r, &[4, 3]), randn(r, &[3, 5])],
            |_, v| project(v[0].matmul(v[1])?),
        ),
        Case::new(
            "matmul_batched_shared_rhs",
            |r| vec![randn(r, &[2, 3, 4]), randn(r, &[4, 2])],
            |_, v| project(v[0].matmul(v[1])?),
        ),
        Case::new(
            "matmul_batched_shared_lhs",
            |r| vec![randn(r, &[3, 4]), randn(r, &[2, 4, 2])],
            |_, v| project(v[0].matmul(v[1])?),
        ),
        Case::new(
            "softmax",
            |r| vec![randn(r, &[3, 5])],
            |_, v| project(v[0].softmax()?),
        ),
        Case::new(
            "log_softmax",
            |r| vec![randn(r, &[3, 5])],
            |_, v| project(v[0].log_softmax()?),
        ),
        Case::new(
            "layer_norm",
            |r| vec![randn(r, &[3, 6]), randn(r, &[6]), randn(r, &[6])],
            |_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?),
        ),
        Case::new(
            "sum_axis",
            |r| vec![randn(r, &[2, 3, 4])],
            |_, v| project(v[0].sum_axis(1, false)?),
        ),
        Case::new(
            "reshape_permute",
            |r| vec![randn(r, &[2, 3, 4])],
            |_, v| {
                project(
                    v[0].reshape(&[6, 4])?
                        .reshape(&[2, 12])?
                        .reshape(&[2, 3, 4])?
                        .permute(&[2, 0, 1])?,
                )
            },
        ),
        Case::new(
            "concat_narrow",
            |r| vec![randn(r, &[2, 3]), randn(r, &[2, 2])],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                project(c.narrow(1, 1, 3)?)
            },
        ),
        Case::new(
            "gather_rows",
            |r| vec![randn(r, &[4, 3])],
            |_, v| project(v[0].gather_rows(&[3, 0, 3, 1])?),
        ),
        Case::new(
            "scatter_mean",
            |r| vec![randn(r, &[5, 2])],
            |_, v| project(v[0].scatter_mean(&[0, 2, 0, 1, 2], 3)?),
        ),
        Case::new(
            "depthwise_conv2d",
            |r| vec![randn(r, &[2, 5, 4]), randn(r, &[2, 3, 3])],
            |_, v| project(v[0].depthwise_conv2d(v[1], 1, 1)?),
        ),
        Case::new(
            "depthwise_conv2d_strided",
            |r| vec![randn(r, &[2, 5, 5]), randn(r, &[2, 3, 3])],
            |_, v| project(v[0].depthwise_conv2d(v[1], 2, 0)?),
        ),
        Case::new(
            "transposed_conv2d",
            |r| vec![randn(r, &[3, 2, 3]), randn(r, &[3, 2, 2, 2])],
            |_, v| project(v[0].transposed_conv2d(v[1], 2)?),
        ),
        Case::new(
            "max_pool2d",
            |r| vec![randn(r, &[2, 4, 4])],
            |_, v| project(v[0].max_pool2d(2, 2)?),
        ),
        Case::new(
            "adaptive_avg_pool2d",
            |r| vec![randn(r, &[2, 5, 7])],
            |_, v| project(v[0].adaptive_avg_pool2d(3, 2)?),
        ),
        Case::new(
            "resize_bilinear_up",
            |r| vec![randn(r, &[2, 2, 3])],
            |_, v| project(v[0].resize_bilinear(5, 4)?),
        ),
        Case::new(
            "resize_bilinear_down",
            |r| vec![randn(r, &[1, 6, 5])],
            |_, v| project(v[0].resize_bilinear(3, 2)?),
        ),
        Case::new(
            "l2_normalize",
            |r| vec![randn(r, &[3, 4])],
            |_, v| project(v[0].l2_normalize(1e-12)?),
        ),
    ]
}

/// Largest number of coordinates perturbed per parameter tensor.
pub const MAX_PARAM_COORDS: usize = 16;

pub type ModuleSetup =
    Box<dyn Fn(&mut ChaCha8Rng) -> Result<(ParameterStore<f64>, Vec<Tensor<f64>>)>>;
pub type ModuleLoss = Box<
    dyn for<'t> Fn(&'t Tape<f64>, &ParameterStore<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
>;

/// A composite case: differentiable inputs plus the trainable parameters
/// whose names start with one of `prefixes`.
pub struct ModuleCase {
    pub name: String,
    pub prefixes: Vec<String>,
    pub setup: ModuleSetup,
    pub loss: ModuleLoss,
}

impl ModuleCase {
    pub fn new<S, F>(name: &str, prefixes: &[&str], setup: S, loss: F) -> Self
    where
        S: Fn(&mut ChaCha8Rng) -> Result<(ParameterStore<f64>, Vec<Tensor<f64>>)> + 'static,
        F: for<'t> Fn(&'t Tape<f64>, &ParameterStore<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>
            + 'static,
    {
        ModuleCase {
            name: name.into(),
            prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
            setup: Box::new(setup),
            loss: Box::new(loss),
        }
    }
}

fn eval_module(
    loss: &ModuleLoss,
    store: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    loss(&tape, store, &vars)?.value().item()
}

/// Evenly spaced coordinates of a tensor with `numel` elements.
fn sample_coords(numel: usize) -> Vec<usize> {
    let step = numel.div_ceil(MAX_PARAM_COORDS).max(1);
    (0..numel).step_by(step).collect()
}

/// Finite-difference check over every input element and a strided subset of
/// each selected trainable parameter.
pub fn check_module(
    case: &ModuleCase,
    store: &ParameterStore<f64>,
    inputs: &[Tensor<f64>],
    fault: Option<Fault>,
) -> Result<f64> {
    let tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = (case.loss)(&tape, store, &vars)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.wrt(*v) {
            Some(g) => analytic.extend(g.to_f64_vec()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let names: Vec<String> = store
        .trainable_names()
        .filter(|n| case.prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .map(String::from)
        .collect();
    if names.is_empty() && !case.prefixes.is_empty() {
        return Err(Error::Contract(format!(
            "case `{}` selects no parameters",
            case.name
        )));
    }
    for n in &names {
        let numel = store.get(n).expect("listed").numel();
        let g = grads.get(n);
        analytic.extend(
            sample_coords(numel)
                .into_iter()
                .map(|i| g.map_or(0.0, |g| g.data()[i])),
        );
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval_module(&case.loss, store, &work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval_module(&case.loss, store, &work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let mut st = store.clone();
    for n in &names {
        let numel = st.get(n).expect("listed").numel();
        for j in sample_coords(numel) {
            let orig = st.get(n).expect("listed").data()[j];
            st.get_mut(n)?.data_mut()[j] = orig + FD_STEP;
            let up = eval_module(&case.loss, &st, inputs)?;
            st.get_mut(n)?.data_mut()[j] = orig - FD_STEP;
            let down = eval_module(&case.loss, &st, inputs)?;
            st.get_mut(n)?.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let err = relative_error(&analytic, &numeric);
    if !err.is_finite() {
        return Err(Error::Numeric(
            "non-finite gradient in finite-difference check".into(),
        ));
    }
    Ok(err)
}

pub fn run_module_case(case: &ModuleCase, seeds: u64, fault: Option<Fault>) -> Result<CaseReport> {
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x85eb_ca6b ^ s);
        let (store, inputs) = (case.setup)(&mut rng)?;
        worst = worst.max(check_module(case, &store, &inputs, fault)?);
    }
    Ok(CaseReport {
        name: case.name.clone(),
        seeds,
        max_rel_err: worst,
        passed: worst < REL_TOL,
    })
}

/// A model small enough for finite differences over its modules: 32² input,
/// four 16² slices of 4×4 tokens and, an 8×8 restored grid.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        seed: 7,
        image_hw: (32, 32),
        p: 0.5,
        backbone: BackboneConfig {
            patch: 4,
            dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 1,
            tap_layers: vec![0, 1, 2],
            cls_tap: 1,
            native_window: 16,
            embed_dim: 6,
            init_std: 0.3,
        },
        adapter: AdapterConfig {
            blocks: 3,
            heads: 2,
            dim: 8,
            queries: 3,
            mlp_ratio: 1,
            fusion_layers: vec![0, 1, 2],
            fusion_enabled: true,
            fusion_at_high_res: false,
            init_std: 0.3,
        },
        decoder: DecoderConfig {
            pyramid_width: 4,
            d_pix: 4,
            ladder_steps: 1,
        },
        classifier: ClassifierConfig {
            attn_head_dim: 4,
            ..Default::default()
        },
        ..RunConfig::default()
    }
}

/// The tiny model with every parameter redrawn from `N(0, 0.5²)` so that
/// zero-initialised layers carry gradient, plus its encoding of a random image.
pub fn tiny_model(
    rng: &mut ChaCha8Rng,
) -> Result<(Model, ParameterStore<f64>, MultiResFeatures<f64>)> {
    let model = Model::new(tiny_config())?;
    let init = model.init_store::<f64>()?;
    let mut store = ParameterStore::new();
    for (n, t) in init.iter() {
        store.insert(n, Tensor::randn(t.shape(), 0.5, rng), init.is_frozen(n))?;
    }
    let (h, w) = model.cfg.image_hw;
    let img = InputImage::new(Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, rng))?;
    let feats = model.encode(&store, &img)?;
    Ok((model, store, feats))
}

fn mrf_case(name: &str, high_res: bool) -> ModuleCase {
    ModuleCase::new(
        name,
        &["adapter.mrf.0."],
        |r| {
            let mut store = ParameterStore::new();
            Mrf::new(0, 3).register(&mut store, r)?;
            for n in ["dconv.b", "fa.b"] {
                let name = format!("adapter.mrf.0.{n}");
                let shape = store.get(&name).expect("registered").shape().to_vec();
                store.set(&name, randn(r, &shape))?;
            }
            Ok((store, vec![randn(r, &[4, 4, 3]), randn(r, &[2, 2, 3])]))
        },
        move |t, s, v| {
            let out = Mrf::new(0, 3).fuse(t, s, v[0], v[1], high_res)?;
            project(out.f)?.add(project(out.a)?)
        },
    )
}

/// One case per composite module.
pub fn module_cases() -> Result<Vec<ModuleCase>> {
    let (model, _, feats) = tiny_model(&mut ChaCha8Rng::seed_from_u64(11))?;
    let m = || model.clone();
    Ok(vec![
        mrf_case("mrf_fusion_low_res", false),
        mrf_case("mrf_fusion_high_res", true),
        ModuleCase::new(
            "adapter",
            &["adapter."],
            |r| {
                let (_, store, _) = tiny_model(r)?;
                Ok((store, vec![]))
            },
            {
                let model = m();
                move |t, s, _| {
                    let out = model.adapter.forward(t, s, &feats)?;
                    project(out.q_f)?.add(project(out.h)?)
                }
            },
        ),
        ModuleCase::new(
            "query_mlp",
            &["adapter.mlp_q."],
            |r| {
                let (_, store, _) = tiny_model(r)?;
                Ok((store, vec![randn(r, &[3, 8])]))
            },
            {
                let model = m();
                move |t, s, v| project(model.adapter.project_queries(t, s, v[0])?)
            },
        ),
        ModuleCase::new(
            "mask_decoder",
            &["decoder."],
            |r| {
                let (_, store, _) = tiny_model(r)?;
                Ok((
                    store,
                    vec![
                        randn(r, &[4, 4, 8]),
                        randn(r, &[8, 2, 2]),
                        randn(r, &[3, 8]),
                    ],
                ))
            },
            {
                let model = m();
                move |t, s, v| {
                    let out = model.decoder.forward(t, s, v[0], &[v[1]], v[2])?;
                    project(out.logits)
                }
            },
        ),
        ModuleCase::new(
            "attention_mask_decoding",
            &["classifier.mlp_local.", "classifier.mlp_global."],
            |r| {
                let (_, store, _) = tiny_model(r)?;
                Ok((store, vec![randn(r, &[4, 4, 8]), randn(r, &[3, 8])]))
            },
            {
                let model = m();
                move |t, s, v| {
                    let c = &model.classifier;
                    let h_bar = c.pool_global(v[0], (2, 2))?;
                    let m = c.decode_attention_masks(t, s, v[0], h_bar, v[1])?;
                    project(m.global)?.add(project(m.local)?)
                }
            },
        ),
        ModuleCase::new(
            "masked_attention",
            &["classifier.prop_pos"],
            |r| {
                let (_, store, _) = tiny_model(r)?;
                Ok((
                    store,
                    vec![
                        randn(r, &[3, 8]),
                        randn(r, &[4, 8]),
                        randn(r, &[16, 8]),
                        randn(r, &[2, 3, 4]),
                        randn(r, &[2, 3, 16]),
                    ],
                ))
            },
            {
                let model = m();
                move |t, s, v| {
                    let masks = DecoupledMasks {
                        global: v[3],
                        local: v[4],
                    };
                    let x0 = v[0].add(t.param(s, "classifier.prop_pos")?)?;
                    let x = model.classifier.multigrained_masked_attention(
                        t,
                        s,
                        &model.backbone,
                        x0,
                        v[1],
                        v[2],
                        &masks,
                    )?;
                    project(x)
                }
            },
        ),
        ModuleCase::new(
            "condition_text",
            &["classifier.text_attn."],
            |r| {
                let (_, store, _) = tiny_model(r)?;
                Ok((store, vec![randn(r, &[2, 6]), randn(r, &[4, 8])]))
            },
            {
                let model = m();
                move |t, s, v| project(model.classifier.condition_text(t, s, v[0], v[1])?)
            },
        ),
        ModuleCase::new(
            "class_logits",
            &["classifier.void", "classifier.logit_scale"],
            |r| {
                let (_, store, _) = tiny_model(r)?;
                Ok((store, vec![randn(r, &[3, 8]), randn(r, &[2, 6])]))
            },
            {
                let model = m();
                move |t, s, v| {
                    project(
                        model
                            .classifier
                            .class_logits(t, s, &model.backbone, v[0], v[1])?,
                    )
                }
            },
        ),
        ModuleCase::new(
            "set_losses",
            &[],
            |r| {
                Ok((
                    ParameterStore::new(),
                    vec![randn(r, &[4, 3]), randn(r, &[4, 6])],
                ))
            },
            |t, _, v| {
                let target = Target {
                    classes: vec![1, 0],
                    masks: Tensor::from_fn(&[2, 6], |i| ((i * 7 + 3) % 5 < 2) as u8 as f64),
                };
                let w = LossWeights::default();
                Ok(set_loss(t, v[0], v[1], &target, &[(0, 2), (1, 0)], &w)?.total)
            },
        ),
    ])
}
