//! Prefix-conditioned transformer denoiser.
//!
//! Image features pass through a two-layer perceptron that yields `l`
//! prefix rows. Caption latents are projected up to the model width,
//! concatenated after the prefix, tagged with positional, type and
//! timestep embeddings, and run through a pre-norm transformer encoder.
//! The caption rows of the result are projected back down to `d1`.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{check_shape, Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Caption embedding width.
    pub d1: usize,
    /// Transformer width.
    pub d2: usize,
    /// Caption length in tokens.
    pub k: usize,
    /// Prefix length.
    pub prefix_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Image feature width.
    pub feat_dim: usize,
    pub prefix_hidden: usize,
    /// Number of diffusion steps the timestep embedding is scaled for.
    pub steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d1: 48,
            d2: 128,
            k: 16,
            prefix_len: 4,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            feat_dim: 64,
            prefix_hidden: 256,
            steps: 1000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d1", self.d1),
            ("d2", self.d2),
            ("k", self.k),
            ("prefix_len", self.prefix_len),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("feat_dim", self.feat_dim),
            ("prefix_hidden", self.prefix_hidden),
            ("steps", self.steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.d1 < 2 {
            return Err(Error::BadConfig("d1 must be >= 2".into()));
        }
        if self.k < 2 {
            return Err(Error::BadConfig("k must be >= 2".into()));
        }
        if self.d2 % self.heads != 0 || self.d2 % 2 != 0 {
            return Err(Error::BadConfig(format!(
                "d2={} must be even and divisible by heads={}",
                self.d2, self.heads
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.prefix_len + self.k
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

#[derive(Debug, Clone)]
struct Slots {
    prefix_w1: usize,
    prefix_b1: usize,
    prefix_w2: usize,
    prefix_b2: usize,
    up_w: usize,
    up_b: usize,
    down_w: usize,
    down_b: usize,
    pos_emb: usize,
    type_emb: usize,
    time_w: usize,
    time_b: usize,
    layers: Vec<LayerSlots>,
}

/// Two-layer tanh perceptron mapping an image feature to `l` prefix rows.
/// Borrowed view into the owning [`DenoiserModel`].
#[derive(Debug, Clone, Copy)]
pub struct PrefixMapper<'a> {
    pub w1: ArrayView2<'a, f64>,
    pub b1: ArrayView2<'a, f64>,
    pub w2: ArrayView2<'a, f64>,
    pub b2: ArrayView2<'a, f64>,
    pub prefix_len: usize,
    pub width: usize,
}

pub fn map_prefix(mapper: &PrefixMapper, feat: &[f64]) -> Result<Array2<f64>> {
    if feat.len() != mapper.w1.nrows() {
        return Err(Error::DimMismatch {
            expected: mapper.w1.nrows(),
            got: feat.len(),
        });
    }
    if feat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image feature"));
    }
    let f = ArrayView2::from_shape((1, feat.len()), feat).expect("row vector");
    let h = (f.dot(&mapper.w1) + &mapper.b1).mapv(f64::tanh);
    let out = h.dot(&mapper.w2) + &mapper.b2;
    Ok(out
        .into_shape_with_order((mapper.prefix_len, mapper.width))
        .expect("prefix reshape"))
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: ModelConfig,
    params: Vec<Param>,
    slots: Slots,
}

/// Tape handles for every model parameter, in slot order.
pub struct ParamVars(pub Vec<Var>);

/// Intermediate handles from a forward pass.
pub struct Forward {
    pub output: Var,
    pub attention: Vec<Var>,
}

/// Sinusoidal timestep features, one row per entry of `ts`.
pub fn timestep_features(ts: &[usize], width: usize) -> Array2<f64> {
    let half = width / 2;
    Array2::from_shape_fn((ts.len(), width), |(r, c)| {
        let i = c % half;
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = ts[r] as f64 * freq;
        if c < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

impl DenoiserModel {
    /// Randomly initialized model: Gaussian weights with std `1/sqrt(fan_in)`,
    /// zero biases, unit layer-norm gains and std-0.02 embedding tables.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut add = |name: String, value: Array2<f64>| {
            params.push(Param { name, value });
            params.len() - 1
        };
        let mut normal = |r: usize, c: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_fn((r, c), |_| n.sample(rng))
        };
        let c = &config;
        let lin_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let ff = c.ff_mult * c.d2;

        let prefix_w1 = add(
            "prefix.w1".into(),
            normal(c.feat_dim, c.prefix_hidden, lin_std(c.feat_dim)),
        );
        let prefix_b1 = add("prefix.b1".into(), Array2::zeros((1, c.prefix_hidden)));
        let prefix_w2 = add(
            "prefix.w2".into(),
            normal(
                c.prefix_hidden,
                c.prefix_len * c.d2,
                lin_std(c.prefix_hidden),
            ),
        );
        let prefix_b2 = add("prefix.b2".into(), Array2::zeros((1, c.prefix_len * c.d2)));
        let up_w = add("up.w".into(), normal(c.d1, c.d2, lin_std(c.d1)));
        let up_b = add("up.b".into(), Array2::zeros((1, c.d2)));
        let down_w = add("down.w".into(), normal(c.d2, c.d1, lin_std(c.d2)));
        let down_b = add("down.b".into(), Array2::zeros((1, c.d1)));
        let pos_emb = add("pos_emb".into(), normal(c.seq_len(), c.d2, 0.02));
        let type_emb = add("type_emb".into(), normal(2, c.d2, 0.02));
        let time_w = add("time.w".into(), normal(c.d2, c.d2, lin_std(c.d2)));
        let time_b = add("time.b".into(), Array2::zeros((1, c.d2)));
        let mut layers = Vec::with_capacity(c.layers);
        for i in 0..c.layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerSlots {
                ln1_g: add(p("ln1.g"), Array2::ones((1, c.d2))),
                ln1_b: add(p("ln1.b"), Array2::zeros((1, c.d2))),
                wq: add(p("attn.wq"), normal(c.d2, c.d2, lin_std(c.d2))),
                bq: add(p("attn.bq"), Array2::zeros((1, c.d2))),
                wk: add(p("attn.wk"), normal(c.d2, c.d2, lin_std(c.d2))),
                bk: add(p("attn.bk"), Array2::zeros((1, c.d2))),
                wv: add(p("attn.wv"), normal(c.d2, c.d2, lin_std(c.d2))),
                bv: add(p("attn.bv"), Array2::zeros((1, c.d2))),
                wo: add(p("attn.wo"), normal(c.d2, c.d2, lin_std(c.d2))),
                bo: add(p("attn.bo"), Array2::zeros((1, c.d2))),
                ln2_g: add(p("ln2.g"), Array2::ones((1, c.d2))),
                ln2_b: add(p("ln2.b"), Array2::zeros((1, c.d2))),
                ff_w1: add(p("ff.w1"), normal(c.d2, ff, lin_std(c.d2))),
                ff_b1: add(p("ff.b1"), Array2::zeros((1, ff))),
                ff_w2: add(p("ff.w2"), normal(ff, c.d2, lin_std(ff))),
                ff_b2: add(p("ff.b2"), Array2::zeros((1, c.d2))),
            });
        }
        let slots = Slots {
            prefix_w1,
            prefix_b1,
            prefix_w2,
            prefix_b2,
            up_w,
            up_b,
            down_w,
            down_b,
            pos_emb,
            type_emb,
            time_w,
            time_b,
            layers,
        };
        Ok(Self {
            config,
            params,
            slots,
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Every
    /// expected parameter must be present with the expected shape.
    pub fn from_named(config: ModelConfig, named: &[(String, Array2<f64>)]) -> Result<Self> {
        let mut model = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for p in &mut model.params {
            let (_, value) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Malformed(format!("missing parameter {}", p.name)))?;
            check_shape(p.value.dim(), value.dim())?;
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("loaded parameter"));
            }
            p.value = value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn prefix_mapper(&self) -> PrefixMapper<'_> {
        let s = &self.slots;
        PrefixMapper {
            w1: self.params[s.prefix_w1].value.view(),
            b1: self.params[s.prefix_b1].value.view(),
            w2: self.params[s.prefix_w2].value.view(),
            b2: self.params[s.prefix_b2].value.view(),
            prefix_len: self.config.prefix_len,
            width: self.config.d2,
        }
    }

    /// Registers every parameter on the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(i, p.value.view()))
                .collect(),
        )
    }

    /// Row indices that interleave `batch` prefixes (stored first) with
    /// `batch` captions (stored after all prefixes).
    fn interleave_index(&self, batch: usize) -> Vec<usize> {
        let (l, k) = (self.config.prefix_len, self.config.k);
        let mut idx = Vec::with_capacity(batch * (l + k));
        for b in 0..batch {
            idx.extend(b * l..(b + 1) * l);
            idx.extend(batch * l + b * k..batch * l + (b + 1) * k);
        }
        idx
    }

    /// Builds the `(batch·(l+k)) × d2` transformer input: prefix rows then
    /// caption rows for each example, plus position, type and timestep
    /// embeddings.
    pub fn assemble_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        prefix: Var,
        caption_up: Var,
        ts: &[usize],
    ) -> Result<Var> {
        let c = &self.config;
        let batch = ts.len();
        let (l, k, seq) = (c.prefix_len, c.k, c.seq_len());
        check_shape((batch * l, c.d2), tape.shape(prefix))?;
        check_shape((batch * k, c.d2), tape.shape(caption_up))?;
        let s = &self.slots;
        let v = |slot: usize| vars.0[slot];

        let joined = tape.concat_rows(vec![prefix, caption_up]);
        let rows = tape.gather_rows(joined, self.interleave_index(batch));

        let type_idx: Vec<usize> = (0..seq).map(|i| usize::from(i >= l)).collect();
        let types = tape.gather_rows(v(s.type_emb), type_idx);
        let pos_type = tape.add(v(s.pos_emb), types);
        let tiled = tape.gather_rows(pos_type, (0..batch * seq).map(|i| i % seq).collect());

        let sinus = tape.input(timestep_features(ts, c.d2));
        let time = tape.matmul(sinus, v(s.time_w));
        let time = tape.add_row(time, v(s.time_b));
        let time = tape.gather_rows(time, (0..batch * seq).map(|i| i / seq).collect());

        let h = tape.add(rows, tiled);
        Ok(tape.add(h, time))
    }

    fn linear(&self, tape: &mut Tape, vars: &ParamVars, x: Var, w: usize, b: usize) -> Var {
        let y = tape.matmul(x, vars.0[w]);
        tape.add_row(y, vars.0[b])
    }

    /// Batched forward pass. `x_t` holds `batch·k` rows (one caption after
    /// another); `feats` is `batch × feat_dim`; `ts[b]` is the timestep of
    /// example `b`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x_t: Var,
        ts: &[usize],
        feats: Var,
    ) -> Result<Forward> {
        let c = &self.config;
        let s = &self.slots;
        let batch = ts.len();
        check_shape((batch * c.k, c.d1), tape.shape(x_t))?;
        check_shape((batch, c.feat_dim), tape.shape(feats))?;
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > c.steps) {
            return Err(Error::BadTimestep { t, max: c.steps });
        }

        let up = self.linear(tape, vars, x_t, s.up_w, s.up_b);
        let hidden = self.linear(tape, vars, feats, s.prefix_w1, s.prefix_b1);
        let hidden = tape.tanh(hidden);
        let prefix = self.linear(tape, vars, hidden, s.prefix_w2, s.prefix_b2);
        let prefix = tape.reshape(prefix, batch * c.prefix_len, c.d2);

        let mut h = self.assemble_on_tape(tape, vars, prefix, up, ts)?;
        let mut attention = Vec::with_capacity(c.layers);
        for ls in &s.layers {
            let n = tape.layer_norm(h, vars.0[ls.ln1_g], vars.0[ls.ln1_b]);
            let q = self.linear(tape, vars, n, ls.wq, ls.bq);
            let k = self.linear(tape, vars, n, ls.wk, ls.bk);
            let v = self.linear(tape, vars, n, ls.wv, ls.bv);
            let a = tape.attention(q, k, v, c.seq_len(), c.heads);
            attention.push(a);
            let o = self.linear(tape, vars, a, ls.wo, ls.bo);
            h = tape.add(h, o);

            let n = tape.layer_norm(h, vars.0[ls.ln2_g], vars.0[ls.ln2_b]);
            let f = self.linear(tape, vars, n, ls.ff_w1, ls.ff_b1);
            let f = tape.gelu(f);
            let f = self.linear(tape, vars, f, ls.ff_w2, ls.ff_b2);
            h = tape.add(h, f);
        }

        let (l, seq) = (c.prefix_len, c.seq_len());
        let caption_rows = (0..batch)
            .flat_map(|b| (0..c.k).map(move |j| b * seq + l + j))
            .collect();
        let h = tape.gather_rows(h, caption_rows);
        let output = self.linear(tape, vars, h, s.down_w, s.down_b);
        if tape.value(output).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output"));
        }
        Ok(Forward { output, attention })
    }

    fn stack_inputs(
        &self,
        xs: &[ArrayView2<f64>],
        feats: &[&[f64]],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let c = &self.config;
        for x in xs {
            check_shape((c.k, c.d1), x.dim())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("denoiser input"));
            }
        }
        for f in feats {
            if f.len() != c.feat_dim {
                return Err(Error::DimMismatch {
                    expected: c.feat_dim,
                    got: f.len(),
                });
            }
        }
        let x = ndarray::concatenate(ndarray::Axis(0), xs).expect("equal widths");
        let f = Array2::from_shape_fn((feats.len(), c.feat_dim), |(r, j)| feats[r][j]);
        Ok((x, f))
    }

    /// Batched inference returning one `k × d1` prediction per example.
    pub fn denoise_batch(
        &self,
        xs: &[ArrayView2<f64>],
        ts: &[usize],
        feats: &[&[f64]],
    ) -> Result<Vec<Array2<f64>>> {
        let (x, f) = self.stack_inputs(xs, feats)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let x = tape.input(x);
        let f = tape.input(f);
        let fwd = self.forward(&mut tape, &vars, x, ts, f)?;
        let out = tape.value(fwd.output);
        let k = self.config.k;
        Ok((0..xs.len())
            .map(|b| out.slice(ndarray::s![b * k..(b + 1) * k, ..]).to_owned())
            .collect())
    }

    pub fn denoise(&self, x_t: ArrayView2<f64>, t: usize, feat: &[f64]) -> Result<Array2<f64>> {
        Ok(self.denoise_batch(&[x_t], &[t], &[feat])?.remove(0))
    }

    /// Attention probabilities of every layer and head for one example.
    pub fn attention_maps(
        &self,
        x_t: ArrayView2<f64>,
        t: usize,
        feat: &[f64],
    ) -> Result<Vec<Array2<f64>>> {
        let (x, f) = self.stack_inputs(&[x_t], &[feat])?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let x = tape.input(x);
        let f = tape.input(f);
        let fwd = self.forward(&mut tape, &vars, x, &[t], f)?;
        Ok(fwd
            .attention
            .iter()
            .flat_map(|&a| tape.attention_probs(a).expect("attention node").to_vec())
            .collect())
    }

    /// Single-example assembly of prefix and up-projected caption rows at
    /// timestep `t`.
    pub fn assemble_sequence(
        &self,
        prefix: ArrayView2<f64>,
        caption_up: ArrayView2<f64>,
        t: usize,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let p = tape.input(prefix.to_owned());
        let cu = tape.input(caption_up.to_owned());
        let out = self.assemble_on_tape(&mut tape, &vars, p, cu, &[t])?;
        Ok(tape.value(out).clone())
    }

    /// Gradients of a scalar loss built by `loss` from the registered
    /// parameters. Slots the loss never reaches come back as zeros.
    pub fn param_gradients<F>(&self, loss: F) -> Result<Gradients>
    where
        F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let root = loss(&mut tape, &vars)?;
        let value = tape.scalar(root);
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let grads = tape.backward(root, self.params.len());
        let tensors: Vec<Array2<f64>> = grads
            .params
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Array2::zeros(p.value.dim())))
            .collect();
        if tensors.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(Gradients {
            loss: value,
            tensors,
        })
    }
}

/// Per-parameter gradients aligned with [`DenoiserModel::params`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub tensors: Vec<Array2<f64>>,
}

impl Denoiser for DenoiserModel {
    fn predict(&self, x_t: ArrayView2<f64>, t: usize, feat: &[f64]) -> Result<Array2<f64>> {
        self.denoise(x_t, t, feat)
    }

    fn predict_batch(
        &self,
        xs: &[Array2<f64>],
        t: usize,
        feats: &[&[f64]],
    ) -> Result<Vec<Array2<f64>>> {
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        self.denoise_batch(&views, &vec![t; xs.len()], feats)
    }
}
