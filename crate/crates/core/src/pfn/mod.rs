//! The transformer PFN: encoders, post-LN blocks with structured masked
//! attention, a two-layer decoder, pretraining and zero-shot inference.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use train::{pretrain, PretrainReport};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::context::{sketch, LabelMode, SketchConfig, SketchMethod};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{AttentionLayout, Graph, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Default number of query rows per inference pass.
pub const QUERY_CHUNK: usize = 512;
/// Default zero-shot context budget.
pub const DEFAULT_CONTEXT_BUDGET: usize = 3000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfnConfig {
    pub e: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub d_max: usize,
    pub c_max: usize,
    pub n_ctx_max: usize,
}

impl Default for PfnConfig {
    fn default() -> Self {
        Self {
            e: 96,
            layers: 3,
            heads: 4,
            ff_mult: 2,
            d_max: 20,
            c_max: 10,
            n_ctx_max: 3072,
        }
    }
}

impl PfnConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.e,
            self.layers,
            self.heads,
            self.ff_mult,
            self.d_max,
            self.n_ctx_max,
        ];
        if extents.contains(&0) || self.c_max < 2 {
            return Err(Error::Config(format!("all model extents must be positive: {self:?}")));
        }
        if !self.e.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.e, self.heads
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters a model with this config holds.
    pub fn param_count(&self) -> usize {
        let e = self.e;
        let f = self.ff_mult * e;
        let block = (e * 3 * e + 3 * e) + (e * e + e) + 2 * e + (e * f + f) + (f * e + e) + 2 * e;
        (self.d_max * e + e) + (self.c_max + 1) * e + self.layers * block + decoder_params(e, self.c_max)
    }
}

fn decoder_params(e: usize, k: usize) -> usize {
    e * e + e + e * k + k
}

/// Row-major feature matrix with an explicit width.
#[derive(Clone, Copy, Debug)]
pub struct Rows<'a> {
    pub data: &'a [f64],
    pub width: usize,
}

impl<'a> Rows<'a> {
    pub fn new(data: &'a [f64], width: usize) -> Self {
        Self { data, width }
    }

    pub fn empty(width: usize) -> Self {
        Self { data: &[], width }
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Prompt tokens prepended to the context, with an optional replacement
/// decoder `[hidden.weight, hidden.bias, out.weight, out.bias]`.
#[derive(Clone, Copy, Debug)]
pub struct PromptRef<'a> {
    pub x_part: &'a Tensor,
    pub y_part: &'a [usize],
    pub decoder: Option<&'a [Tensor]>,
}

#[derive(Clone, Debug)]
struct BlockIds {
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln1_g: usize,
    ln1_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug)]
struct ParamIds {
    x_w: usize,
    x_b: usize,
    y_table: usize,
    blocks: Vec<BlockIds>,
    decoder: [usize; 4],
}

/// Parameter names of the decoder, in [`PromptRef::decoder`] order.
pub const DECODER_NAMES: [&str; 4] = [
    "decoder.hidden.weight",
    "decoder.hidden.bias",
    "decoder.out.weight",
    "decoder.out.bias",
];

#[derive(Clone, Debug)]
pub struct PfnModel {
    config: PfnConfig,
    params: ParamStore,
    ids: ParamIds,
    seed: u64,
}

impl PartialEq for PfnModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.seed == other.seed
    }
}

fn init(rng: &mut crate::rng::Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values = if std == 0.0 {
        vec![0.0; n]
    } else {
        let normal = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| normal.sample(rng)).collect()
    };
    Tensor::new(shape, values).expect("shape and length agree")
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("vector")
}

/// Fresh decoder tensors `e -> k`.
pub fn init_decoder(e: usize, k: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = seeded(seed);
    vec![
        init(&mut rng, vec![e, e], 1.0 / (e as f64).sqrt()),
        init(&mut rng, vec![e], 0.0),
        init(&mut rng, vec![e, k], 0.02),
        init(&mut rng, vec![k], 0.0),
    ]
}

impl PfnModel {
    pub fn new(config: PfnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let (e, f) = (config.e, config.ff_mult * config.e);
        let mut p = ParamStore::new();
        let x_w = p.push(
            "x_encoder.weight",
            init(&mut rng, vec![config.d_max, e], 1.0 / (config.d_max as f64).sqrt()),
        );
        let x_b = p.push("x_encoder.bias", init(&mut rng, vec![e], 0.0));
        let y_table = p.push("y_encoder.table", init(&mut rng, vec![config.c_max + 1, e], 1.0));
        let depth_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockIds {
                qkv_w: p.push(
                    name("qkv.weight"),
                    init(&mut rng, vec![e, 3 * e], 1.0 / (e as f64).sqrt()),
                ),
                qkv_b: p.push(name("qkv.bias"), init(&mut rng, vec![3 * e], 0.0)),
                out_w: p.push(
                    name("out.weight"),
                    init(&mut rng, vec![e, e], depth_scale / (e as f64).sqrt()),
                ),
                out_b: p.push(name("out.bias"), init(&mut rng, vec![e], 0.0)),
                ln1_g: p.push(name("ln1.gain"), ones(e)),
                ln1_b: p.push(name("ln1.bias"), init(&mut rng, vec![e], 0.0)),
                ff1_w: p.push(name("ff1.weight"), init(&mut rng, vec![e, f], 1.0 / (e as f64).sqrt())),
                ff1_b: p.push(name("ff1.bias"), init(&mut rng, vec![f], 0.0)),
                ff2_w: p.push(
                    name("ff2.weight"),
                    init(&mut rng, vec![f, e], depth_scale / (f as f64).sqrt()),
                ),
                ff2_b: p.push(name("ff2.bias"), init(&mut rng, vec![e], 0.0)),
                ln2_g: p.push(name("ln2.gain"), ones(e)),
                ln2_b: p.push(name("ln2.bias"), init(&mut rng, vec![e], 0.0)),
            });
        }
        let dec = init_decoder(e, config.c_max, derive_seed(seed, 1));
        let mut decoder = [0; 4];
        for (slot, (name, t)) in decoder.iter_mut().zip(DECODER_NAMES.iter().zip(dec)) {
            *slot = p.push(*name, t);
        }
        p.set_trainable(|_| true);
        let ids = ParamIds {
            x_w,
            x_b,
            y_table,
            blocks,
            decoder,
        };
        debug_assert_eq!(p.total_params(), config.param_count());
        Ok(Self {
            config,
            params: p,
            ids,
            seed,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: PfnConfig, seed: u64, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            let want = model.params.get(i);
            if name != model.params.name(i) || t.shape() != want.shape() {
                return Err(Error::Format(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    model.params.name(i),
                    want.shape(),
                    t.shape()
                )));
            }
        }
        model.params = params;
        model.params.set_trainable(|_| true);
        Ok(model)
    }

    pub fn config(&self) -> &PfnConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Decoder tensors in [`DECODER_NAMES`] order.
    pub fn decoder(&self) -> Vec<Tensor> {
        self.ids.decoder.iter().map(|&i| self.params.get(i).clone()).collect()
    }

    pub fn n_out(&self) -> usize {
        self.config.c_max
    }

    fn check_inputs(&self, train: Rows<'_>, train_y: &[usize], test: Rows<'_>, wrap_labels: bool) -> Result<()> {
        let d = train.width;
        if test.width != d {
            return Err(Error::Shape {
                op: "forward",
                left: vec![train.len(), d],
                right: vec![test.len(), test.width],
            });
        }
        if d > self.config.d_max {
            return Err(Error::FeatureBudget {
                got: d,
                max: self.config.d_max,
            });
        }
        if d == 0 || !train.data.len().is_multiple_of(d) || !test.data.len().is_multiple_of(d) || train_y.len() != train.len() {
            return Err(Error::Shape {
                op: "forward",
                left: vec![train.data.len(), test.data.len(), d],
                right: vec![train_y.len()],
            });
        }
        if !wrap_labels {
            if let Some(&l) = train_y.iter().find(|&&l| l >= self.config.c_max) {
                return Err(Error::ClassBudget {
                    got: l + 1,
                    max: self.config.c_max,
                });
            }
        }
        Ok(())
    }

    /// Binds every parameter on `g`; tensors receive gradients iff
    /// `trainable` and their own `requires_grad` flag is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        if trainable {
            self.params.bind(g)
        } else {
            self.params.bind_frozen(g)
        }
    }

    /// Zero-pads rows to `d_max` columns.
    fn padded(&self, rows: Rows<'_>) -> Vec<f64> {
        let dm = self.config.d_max;
        let mut out = vec![0.0; rows.len() * dm];
        for (r, chunk) in rows.data.chunks(rows.width.max(1)).enumerate() {
            out[r * dm..r * dm + rows.width].copy_from_slice(chunk);
        }
        out
    }

    fn label_index(&self, y: usize, wrap: bool) -> usize {
        if wrap {
            y % self.config.c_max
        } else {
            y
        }
    }

    /// Token embeddings `[ (n + m) x e ]` on `g`.
    fn tokens_on(
        &self,
        g: &mut Graph,
        vars: &[Var],
        train: Rows<'_>,
        train_y: &[usize],
        test: Rows<'_>,
        wrap: bool,
    ) -> Result<Var> {
        let (n, m) = (train.len(), test.len());
        let dm = self.config.d_max;
        let mut x = self.padded(train);
        x.extend(self.padded(test));
        let xv = g.constant(vec![n + m, dm], x)?;
        let xe = g.matmul(xv, vars[self.ids.x_w])?;
        let xe = g.add_bias(xe, vars[self.ids.x_b])?;
        let mut idx: Vec<usize> = train_y.iter().map(|&y| self.label_index(y, wrap)).collect();
        idx.extend(std::iter::repeat_n(self.config.c_max, m));
        let ye = g.gather_rows(vars[self.ids.y_table], &idx)?;
        g.add(xe, ye)
    }

    /// Records a forward pass on `g` and returns the decoder logits of the
    /// query rows, `[m x n_out]`.
    ///
    /// `prompt` carries prompt embeddings `[p x e]` already on the graph and
    /// their labels; `decoder` replaces the model's own decoder variables.
    #[allow(clippy::too_many_arguments)]
    pub fn logits_on(
        &self,
        g: &mut Graph,
        vars: &[Var],
        prompt: Option<(Var, &[usize])>,
        decoder: Option<&[Var]>,
        train: Rows<'_>,
        train_y: &[usize],
        test: Rows<'_>,
    ) -> Result<Var> {
        let wrap = decoder.is_some();
        self.check_inputs(train, train_y, test, wrap)?;
        let (n, m) = (train.len(), test.len());
        let p = prompt.map_or(0, |(v, _)| g.shape(v)[0]);
        let tokens_total = p + n + m;
        if tokens_total > self.config.n_ctx_max {
            return Err(Error::Capacity {
                tokens: tokens_total,
                max: self.config.n_ctx_max,
            });
        }
        let data_tokens = self.tokens_on(g, vars, train, train_y, test, wrap)?;
        let mut h = match prompt {
            Some((px, py)) => {
                if g.shape(px) != [p, self.config.e] || py.len() != p {
                    return Err(Error::Shape {
                        op: "prompt",
                        left: g.shape(px).to_vec(),
                        right: vec![py.len(), self.config.e],
                    });
                }
                if !wrap {
                    if let Some(&l) = py.iter().find(|&&l| l >= self.config.c_max) {
                        return Err(Error::ClassBudget {
                            got: l + 1,
                            max: self.config.c_max,
                        });
                    }
                }
                let idx: Vec<usize> = py.iter().map(|&y| self.label_index(y, wrap)).collect();
                let ye = g.gather_rows(vars[self.ids.y_table], &idx)?;
                let pt = g.add(px, ye)?;
                g.concat_rows(&[pt, data_tokens])?
            }
            None => data_tokens,
        };
        let layout = AttentionLayout { context: p + n };
        for b in &self.ids.blocks {
            let qkv = g.matmul(h, vars[b.qkv_w])?;
            let qkv = g.add_bias(qkv, vars[b.qkv_b])?;
            let a = g.attention(qkv, self.config.heads, layout)?;
            let a = g.matmul(a, vars[b.out_w])?;
            let a = g.add_bias(a, vars[b.out_b])?;
            let r = g.add(h, a)?;
            h = g.layer_norm(r, vars[b.ln1_g], vars[b.ln1_b], LN_EPS)?;
            let f = g.matmul(h, vars[b.ff1_w])?;
            let f = g.add_bias(f, vars[b.ff1_b])?;
            let f = g.gelu(f);
            let f = g.matmul(f, vars[b.ff2_w])?;
            let f = g.add_bias(f, vars[b.ff2_b])?;
            let r = g.add(h, f)?;
            h = g.layer_norm(r, vars[b.ln2_g], vars[b.ln2_b], LN_EPS)?;
        }
        let q = g.slice_rows(h, p + n, p + n + m)?;
        let dec: Vec<Var> = match decoder {
            Some(d) => d.to_vec(),
            None => self.ids.decoder.iter().map(|&i| vars[i]).collect(),
        };
        let z = g.matmul(q, dec[0])?;
        let z = g.add_bias(z, dec[1])?;
        let z = g.gelu(z);
        let z = g.matmul(z, dec[2])?;
        g.add_bias(z, dec[3])
    }

    /// Token embeddings of `[train | test]` without a prompt.
    pub fn encode_batch(&self, train: Rows<'_>, train_y: &[usize], test: Rows<'_>) -> Result<Tensor> {
        self.check_inputs(train, train_y, test, false)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let t = self.tokens_on(&mut g, &vars, train, train_y, test, false)?;
        Ok(g.tensor(t))
    }

    /// Class probabilities `[m x n_out]` of the query rows in one pass.
    pub fn forward(
        &self,
        train: Rows<'_>,
        train_y: &[usize],
        test: Rows<'_>,
        prompt: Option<PromptRef<'_>>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (pv, dec) = match prompt {
            Some(pr) => {
                let x = g.constant(pr.x_part.shape().to_vec(), pr.x_part.values().to_vec())?;
                let dec = match pr.decoder {
                    Some(ts) => Some(
                        ts.iter()
                            .map(|t| g.constant(t.shape().to_vec(), t.values().to_vec()))
                            .collect::<Result<Vec<_>>>()?,
                    ),
                    None => None,
                };
                (Some((x, pr.y_part)), dec)
            }
            None => (None, None),
        };
        let logits = self.logits_on(&mut g, &vars, pv, dec.as_deref(), train, train_y, test)?;
        let probs = g.softmax(logits)?;
        Ok(g.tensor(probs))
    }

    /// [`forward`](Self::forward) over query chunks of at most `chunk` rows;
    /// the context is re-encoded for every chunk.
    pub fn forward_chunked(
        &self,
        train: Rows<'_>,
        train_y: &[usize],
        test: Rows<'_>,
        prompt: Option<PromptRef<'_>>,
        chunk: usize,
    ) -> Result<Tensor> {
        let d = test.width;
        let m = test.len();
        let n_out = prompt
            .and_then(|p| p.decoder)
            .map_or(self.n_out(), |dec| dec[3].numel());
        let chunk = chunk.max(1);
        let mut values = Vec::with_capacity(m * n_out);
        for start in (0..m).step_by(chunk) {
            let end = (start + chunk).min(m);
            let rows = Rows::new(&test.data[start * d..end * d], d);
            values.extend(self.forward(train, train_y, rows, prompt)?.into_values());
        }
        if m == 0 {
            self.check_inputs(train, train_y, test, prompt.is_some_and(|p| p.decoder.is_some()))?;
        }
        Tensor::new(vec![m, n_out], values)
    }
}

/// First `k` columns of each row, renormalized.
pub fn class_slice(probs: &Tensor, k: usize) -> Result<Tensor> {
    let c = probs.cols();
    if k < 2 || k > c {
        return Err(Error::Config(format!("class slice width {k} must be in [2, {c}]")));
    }
    let m = probs.rows();
    let mut out = Vec::with_capacity(m * k);
    for r in 0..m {
        let row = &probs.row(r)[..k];
        let s: f64 = row.iter().sum::<f64>().max(crate::tensor::LOG_EPS);
        out.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![m, k], out)
}

/// Per-row argmax with lowest-index tie-break.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Hard labels plus class probabilities `[m x k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub probs: Tensor,
}

impl Prediction {
    pub fn from_probs(probs: Tensor) -> Self {
        Self {
            labels: argmax_rows(&probs),
            probs,
        }
    }
}

/// Zero-shot prediction for `query_rows`, conditioning on the dataset's
/// training split. Contexts above `context_budget` are reduced by a random
/// proportional sketch.
pub fn predict_zero_shot(
    model: &PfnModel,
    ds: &TabularDataset,
    query_rows: &[usize],
    context_budget: usize,
    seed: u64,
) -> Result<Prediction> {
    let cfg = model.config();
    if ds.n_features() > cfg.d_max {
        return Err(Error::FeatureBudget {
            got: ds.n_features(),
            max: cfg.d_max,
        });
    }
    if ds.class_count > cfg.c_max {
        return Err(Error::ClassBudget {
            got: ds.class_count,
            max: cfg.c_max,
        });
    }
    let context = zero_shot_context(ds, &ds.split.train, context_budget, seed)?;
    let d = ds.n_features();
    let cx = ds.gather_features(&context);
    let cy = ds.gather_labels(&context);
    let qx = ds.gather_features(query_rows);
    let chunk = cfg.n_ctx_max.saturating_sub(context.len()).clamp(1, QUERY_CHUNK);
    let probs = model.forward_chunked(Rows::new(&cx, d), &cy, Rows::new(&qx, d), None, chunk)?;
    let k = ds.class_count.max(2);
    Ok(Prediction::from_probs(class_slice(&probs, k)?))
}

/// Context rows for zero-shot inference: `rows` itself when it fits in
/// `budget`, else a seeded random proportional sketch.
pub fn zero_shot_context(ds: &TabularDataset, rows: &[usize], budget: usize, seed: u64) -> Result<Vec<usize>> {
    if rows.len() <= budget {
        return Ok(rows.to_vec());
    }
    let cfg = SketchConfig {
        method: SketchMethod::Random,
        n: budget,
        label_mode: LabelMode::Proportional,
        seed,
    };
    Ok(sketch(ds, rows, &cfg)?.indices)
}
