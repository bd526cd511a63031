//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ModelParams, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f32,
    /// Floor of the relative-error denominator.
    pub floor: f64,
    /// Coordinates sampled per parameter (all when the parameter is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            floor: 1e-3,
            coords_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    /// Coordinate, analytic and numeric gradient at the worst error.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// First parameter whose error exceeds `tolerance`, as an error.
    pub fn ensure(&self, tolerance: f64) -> Result<()> {
        match self
            .params
            .iter()
            .find(|p| !(p.max_rel_error < tolerance))
        {
            Some(p) => Err(Error::GradCheck {
                param: p.name.clone(),
                error: p.max_rel_error,
                tolerance,
            }),
            None => Ok(()),
        }
    }
}

fn eval<F>(params: &ModelParams, loss_fn: &mut F) -> Result<f32>
where
    F: FnMut(&ModelParams, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::Autograd(format!(
            "loss must be a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients against central differences on sampled coordinates
/// of every trainable parameter. Frozen parameters are not reported.
pub fn gradient_check<F>(
    params: &mut ModelParams,
    mut loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ModelParams, &mut Tape) -> Result<Var>,
{
    let analytic = analytic_grads(params, &mut loss_fn)?;
    check_against(params, &analytic, |p| eval(p, &mut loss_fn).map(f64::from), opts)
}

/// Like [`gradient_check`], but takes the finite differences of an
/// independent `f64` evaluation `reference` of the same loss, so that the
/// numeric side is free of `f32` rounding noise.
pub fn gradient_check_with_reference<F, G>(
    params: &mut ModelParams,
    mut loss_fn: F,
    reference: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ModelParams, &mut Tape) -> Result<Var>,
    G: FnMut(&ModelParams) -> Result<f64>,
{
    let analytic = analytic_grads(params, &mut loss_fn)?;
    check_against(params, &analytic, reference, opts)
}

fn analytic_grads<F>(params: &mut ModelParams, loss_fn: &mut F) -> Result<Vec<Option<Vec<f32>>>>
where
    F: FnMut(&ModelParams, &mut Tape) -> Result<Var>,
{
    let base = eval(params, loss_fn)?;
    let again = eval(params, loss_fn)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "repeated evaluation gave {base:e} then {again:e}"
        )));
    }
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    tape.backward(loss, params)?;
    let grads = params
        .iter()
        .map(|(_, _, t)| t.grad().map(<[f32]>::to_vec))
        .collect();
    params.zero_grads();
    Ok(grads)
}

fn check_against<G>(
    params: &mut ModelParams,
    analytic: &[Option<Vec<f32>>],
    mut numeric_fn: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    G: FnMut(&ModelParams) -> Result<f64>,
{
    let base = numeric_fn(params)?;
    let again = numeric_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "repeated evaluation gave {base:e} then {again:e}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, _, t)| t.requires_grad())
        .map(|(id, name, _)| (id, name.to_string()))
        .collect();
    for (id, name) in ids {
        let numel = params.get(id).numel();
        let zeros = vec![0.0; numel];
        let grad = analytic[id.index()].as_deref().unwrap_or(&zeros);
        let coords: Vec<usize> = if numel <= opts.coords_per_param {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        let mut worst_at = (0, 0.0, 0.0);
        for &c in &coords {
            let orig = params.get(id).data()[c];
            let hi = orig + opts.step;
            let lo = orig - opts.step;
            params.get_mut(id).data_mut()[c] = hi;
            let f_hi = numeric_fn(params)?;
            params.get_mut(id).data_mut()[c] = lo;
            let f_lo = numeric_fn(params)?;
            params.get_mut(id).data_mut()[c] = orig;
            // divide by the step actually taken in f32
            let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
            let a = grad[c] as f64;
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            if rel >= worst {
                worst = rel;
                worst_at = (c, a, numeric);
            }
        }
        report.params.push(ParamCheck {
            name,
            coords: coords.len(),
            max_rel_error: worst,
            worst: worst_at,
        });
    }
    Ok(report)
}
