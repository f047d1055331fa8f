//! Forward noising and the reverse sampling chain.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::schedule::Schedule;
use crate::vocab::EmbeddingTable;

/// What the denoiser output stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Output is the noise estimate plugged into the x0 reconstruction.
    #[default]
    Noise,
    /// Output is the clean-data estimate itself.
    Start,
}

impl std::str::FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" | "eps" => Ok(Self::Noise),
            "start" | "x0" => Ok(Self::Start),
            _ => Err(Error::BadConfig(format!("unknown parameterization {s:?}"))),
        }
    }
}

/// Anything that maps `(x_t, t, feat)` to a `k × d1` prediction.
pub trait Denoiser {
    fn predict(&self, x_t: ArrayView2<f64>, t: usize, feat: &[f64]) -> Result<Array2<f64>>;

    /// Predicts for several chains at the same timestep. The default runs
    /// them one by one.
    fn predict_batch(
        &self,
        xs: &[Array2<f64>],
        t: usize,
        feats: &[&[f64]],
    ) -> Result<Vec<Array2<f64>>> {
        xs.iter()
            .zip(feats)
            .map(|(x, f)| self.predict(x.view(), t, f))
            .collect()
    }
}

impl<F> Denoiser for F
where
    F: Fn(ArrayView2<f64>, usize, &[f64]) -> Result<Array2<f64>>,
{
    fn predict(&self, x_t: ArrayView2<f64>, t: usize, feat: &[f64]) -> Result<Array2<f64>> {
        self(x_t, t, feat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Array2<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mean: Array2<f64>,
    pub var: f64,
}

/// Sampling options shared by every reverse step.
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions<'a> {
    pub parameterization: Parameterization,
    /// Snap each reconstructed row to its nearest embedding when set.
    pub clamp: Option<&'a EmbeddingTable>,
}

impl Default for SampleOptions<'_> {
    fn default() -> Self {
        Self {
            parameterization: Parameterization::Noise,
            clamp: None,
        }
    }
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

pub fn q_sample_step(
    x_prev: ArrayView2<f64>,
    beta_t: f64,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_shape(x_prev.dim(), noise.dim())?;
    if !(0.0..1.0).contains(&beta_t) {
        return Err(Error::BadSchedule(format!("beta {beta_t} outside [0, 1)")));
    }
    Ok(&x_prev * (1.0 - beta_t).sqrt() + &noise * beta_t.sqrt())
}

pub fn q_sample(
    x0: ArrayView2<f64>,
    t: usize,
    sched: &Schedule,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_shape(x0.dim(), noise.dim())?;
    let ab = sched.alpha_bar_at(t)?;
    Ok(&x0 * ab.sqrt() + &noise * (1.0 - ab).sqrt())
}

pub fn reconstruct_x0(
    x_t: ArrayView2<f64>,
    t: usize,
    sched: &Schedule,
    z_tilde: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_shape(x_t.dim(), z_tilde.dim())?;
    let ab = sched.alpha_bar_at(t)?;
    Ok((&x_t - &(&z_tilde * (1.0 - ab).sqrt())) / ab.sqrt())
}

/// Gaussian posterior of a jump from `t` to an earlier `t_prev`, given
/// cumulative products at both ends. `ab_prev = 1` means the jump lands
/// on clean data.
fn posterior_coeffs(ab_t: f64, ab_prev: f64) -> (f64, f64, f64) {
    let beta = 1.0 - ab_t / ab_prev;
    let alpha = 1.0 - beta;
    let denom = 1.0 - ab_t;
    let c_xt = alpha.sqrt() * (1.0 - ab_prev) / denom;
    let c_x0 = ab_prev.sqrt() * beta / denom;
    let var = ((1.0 - ab_prev) / denom * beta).max(0.0);
    (c_xt, c_x0, var)
}

pub fn posterior(
    x_t: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    t: usize,
    sched: &Schedule,
) -> Result<PosteriorParams> {
    posterior_jump(x_t, x0, t, t.wrapping_sub(1), sched)
}

/// Posterior for a respaced jump `t → t_prev` (`t_prev < t`).
pub fn posterior_jump(
    x_t: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    t: usize,
    t_prev: usize,
    sched: &Schedule,
) -> Result<PosteriorParams> {
    check_shape(x_t.dim(), x0.dim())?;
    let ab_t = sched.alpha_bar_at(t)?;
    if t_prev >= t {
        return Err(Error::BadTimestep {
            t: t_prev,
            max: t - 1,
        });
    }
    let ab_prev = sched.alpha_bar_or_one(t_prev)?;
    let (c_xt, c_x0, var) = posterior_coeffs(ab_t, ab_prev);
    let var = if t_prev == 0 { 0.0 } else { var };
    Ok(PosteriorParams {
        mean: &x_t * c_xt + &x0 * c_x0,
        var,
    })
}

fn clamp_rows(x0: &mut Array2<f64>, table: &EmbeddingTable) {
    for mut row in x0.rows_mut() {
        let id = table.nearest(row.view());
        row.assign(&table.matrix().row(id));
    }
}

/// Clean-data estimate from a denoiser output at timestep `t`.
pub fn estimate_x0(
    x_t: ArrayView2<f64>,
    t: usize,
    sched: &Schedule,
    prediction: ArrayView2<f64>,
    opts: &SampleOptions,
) -> Result<Array2<f64>> {
    if prediction.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("denoiser output"));
    }
    let mut x0 = match opts.parameterization {
        Parameterization::Noise => reconstruct_x0(x_t, t, sched, prediction)?,
        Parameterization::Start => {
            check_shape(x_t.dim(), prediction.dim())?;
            prediction.to_owned()
        }
    };
    if let Some(table) = opts.clamp {
        clamp_rows(&mut x0, table);
    }
    Ok(x0)
}

/// One reverse jump given an already-computed denoiser prediction.
pub fn reverse_jump(
    x_t: ArrayView2<f64>,
    t: usize,
    t_prev: usize,
    sched: &Schedule,
    prediction: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    opts: &SampleOptions,
) -> Result<Array2<f64>> {
    let x0 = estimate_x0(x_t, t, sched, prediction, opts)?;
    let post = posterior_jump(x_t, x0.view(), t, t_prev, sched)?;
    if post.var == 0.0 {
        return Ok(post.mean);
    }
    check_shape(x_t.dim(), noise.dim())?;
    Ok(post.mean + &noise * post.var.sqrt())
}

pub fn p_sample_step<D: Denoiser + ?Sized>(
    x_t: ArrayView2<f64>,
    t: usize,
    sched: &Schedule,
    denoiser: &D,
    feat: &[f64],
    noise: ArrayView2<f64>,
    opts: &SampleOptions,
) -> Result<Array2<f64>> {
    sched.alpha_bar_at(t)?;
    let pred = denoiser.predict(x_t, t, feat)?;
    check_shape(x_t.dim(), pred.dim())?;
    reverse_jump(x_t, t, t - 1, sched, pred.view(), noise, opts)
}

/// Evenly spaced timesteps over `1..=T` in descending order, always
/// containing `T` and `1` when `eval_steps >= 2`.
pub fn respaced_timesteps(total: usize, eval_steps: usize) -> Result<Vec<usize>> {
    if eval_steps == 0 || eval_steps > total {
        return Err(Error::BadConfig(format!(
            "eval_steps={eval_steps} must lie in 1..={total}"
        )));
    }
    if eval_steps == 1 {
        return Ok(vec![total]);
    }
    let mut steps: Vec<usize> = (0..eval_steps)
        .map(|i| 1 + ((i * (total - 1)) as f64 / (eval_steps - 1) as f64).round() as usize)
        .collect();
    steps.dedup();
    steps.reverse();
    Ok(steps)
}

/// Runs `seeds.len()` independent chains for the same conditioning
/// feature(s), batching denoiser calls across chains. Chain `i` draws all
/// of its noise from a generator seeded with `seeds[i]`.
pub fn sample_chains<D: Denoiser + ?Sized>(
    denoiser: &D,
    feats: &[&[f64]],
    shape: (usize, usize),
    sched: &Schedule,
    eval_steps: usize,
    seeds: &[u64],
    opts: &SampleOptions,
) -> Result<Vec<LatentState>> {
    if feats.len() != seeds.len() {
        return Err(Error::BadConfig("one feature per chain required".into()));
    }
    let timesteps = respaced_timesteps(sched.steps(), eval_steps)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds
        .iter()
        .map(|&s| ChaCha8Rng::seed_from_u64(s))
        .collect();
    let mut xs: Vec<Array2<f64>> = rngs
        .iter_mut()
        .map(|r| standard_normal(shape.0, shape.1, r))
        .collect();
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let preds = denoiser.predict_batch(&xs, t, feats)?;
        for ((x, pred), rng) in xs.iter_mut().zip(&preds).zip(&mut rngs) {
            check_shape(shape, pred.dim())?;
            let noise = if t_prev == 0 {
                Array2::zeros(shape)
            } else {
                standard_normal(shape.0, shape.1, rng)
            };
            *x = reverse_jump(x.view(), t, t_prev, sched, pred.view(), noise.view(), opts)?;
        }
    }
    Ok(xs.into_iter().map(|x| LatentState { x, t: 0 }).collect())
}

pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    feat: &[f64],
    shape: (usize, usize),
    sched: &Schedule,
    eval_steps: usize,
    seed: u64,
    opts: &SampleOptions,
) -> Result<LatentState> {
    let mut out = sample_chains(denoiser, &[feat], shape, sched, eval_steps, &[seed], opts)?;
    Ok(out.pop().expect("one chain"))
}
