//! Sequence classifier built around the multi-resolution attention layer.
//!
//! Architecture per block: attention sublayer and a two-layer ReLU
//! feed-forward sublayer, each wrapped with a residual connection and
//! layer normalization in front of the sublayer (with one final norm before
//! pooling). Normalizing the sublayer inputs rather than the residual
//! stream keeps gradients flowing to the bottom layers without a warmup
//! schedule, which this trainer deliberately doesn't have. Token embeddings
//! plus learned positional embeddings feed the first block; the classifier
//! mean-pools the last block's outputs and applies a linear head.
//!
//! Everything trains through the manual reverse pass: [`Model::forward`]
//! records a [`ModelTrace`] and [`Model::backward`] turns it plus a label
//! into gradients shaped exactly like the model ([`Model::zeros_like`]).

use crate::backward::adamra_backward;
use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::layer::{adamra_forward, AdamraConfig, AdamraParams, ForwardTrace};
use crate::mat::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;

/// Network hyperparameters.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Transformer block count.
    pub layers: usize,
    /// Model width; must equal the attention config's width.
    pub d: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ffn_hidden: usize,
    /// Attention layer settings, shared by all blocks.
    pub attention: AdamraConfig,
    /// Learned positional embeddings on/off.
    pub pos_embedding: bool,
    /// Classifier output width.
    pub num_classes: usize,
}

impl ModelConfig {
    /// Two 64-wide blocks with a 128-wide feed-forward, the default
    /// attention layer, and positional embeddings.
    pub fn default_for(num_classes: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            d: 64,
            ffn_hidden: 128,
            attention: AdamraConfig::default_layer(),
            pos_embedding: true,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.layers == 0 || self.num_classes < 2 || self.ffn_hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "need layers ≥ 1, classes ≥ 2, ffn ≥ 1; got {}, {}, {}",
                self.layers, self.num_classes, self.ffn_hidden
            )));
        }
        if self.attention.d != self.d {
            return Err(Error::InvalidConfig(format!(
                "attention width {} != model width {}",
                self.attention.d, self.d
            )));
        }
        Ok(())
    }

    /// Reads `model.*` keys (and nested `adamra.*` keys) from a config map.
    pub fn apply_config(&mut self, cfg: &mut ConfigMap) -> Result<()> {
        self.layers = cfg.get("model.layers", self.layers)?;
        self.d = cfg.get("model.d", self.d)?;
        self.ffn_hidden = cfg.get("model.ffn", self.ffn_hidden)?;
        self.pos_embedding = cfg.get_bool("model.pos_embedding", self.pos_embedding)?;
        self.attention.d = self.d;
        self.attention.apply_config(cfg)?;
        self.d = self.attention.d;
        self.validate()
    }
}

/// Scale-and-shift parameters of one layer norm.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Matrix, // 1×d
    pub beta: Matrix,  // 1×d
}

impl LayerNorm {
    fn ones(d: usize) -> LayerNorm {
        LayerNorm { gamma: Matrix::from_fn(1, d, |_, _| 1.0), beta: Matrix::zeros(1, d) }
    }

    fn zeros(d: usize) -> LayerNorm {
        LayerNorm { gamma: Matrix::zeros(1, d), beta: Matrix::zeros(1, d) }
    }
}

/// One transformer block's weights. `ln1` normalizes the attention input,
/// `ln2` the feed-forward input.
#[derive(Debug, Clone)]
pub struct Block {
    pub attn: AdamraParams,
    pub ln1: LayerNorm,
    pub w1: Matrix, // d×ffn
    pub b1: Matrix, // 1×ffn
    pub w2: Matrix, // ffn×d
    pub b2: Matrix, // 1×d
    pub ln2: LayerNorm,
}

/// The full classifier: embeddings, blocks, linear head.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
    pub embed: Matrix, // vocab×d
    pub pos: Matrix,   // max_len×d
    pub blocks: Vec<Block>,
    /// Final normalization before pooling.
    pub ln_f: LayerNorm,
    pub w_cls: Matrix, // d×classes
    pub b_cls: Matrix, // 1×classes
}

impl Model {
    pub fn init(cfg: &ModelConfig, vocab_size: usize, max_len: usize, seed: u64) -> Result<Model> {
        cfg.validate()?;
        if vocab_size == 0 || max_len == 0 {
            return Err(Error::InvalidConfig(format!(
                "vocab {} / max_len {} must be positive",
                vocab_size, max_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let s = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| {
                // key projections start equal to the query projections, so
                // attention begins as a similarity kernel: a token's strongest
                // matches are tokens like itself. The comparison circuits the
                // tasks need bootstrap much faster from that point than from
                // unrelated random q/k maps (the two still train apart).
                let mut attn = AdamraParams::init(&cfg.attention, &mut rng)?;
                attn.qkv.w_k = attn.qkv.w_q.clone();
                for head in attn.sub.iter_mut() {
                    for sub in head.iter_mut() {
                        sub.w_k = sub.w_q.clone();
                    }
                }
                Ok(Block {
                    attn,
                    ln1: LayerNorm::ones(d),
                    w1: Matrix::random_uniform(d, cfg.ffn_hidden, s, &mut rng),
                    b1: Matrix::zeros(1, cfg.ffn_hidden),
                    w2: Matrix::random_uniform(
                        cfg.ffn_hidden,
                        d,
                        1.0 / (cfg.ffn_hidden as f64).sqrt(),
                        &mut rng,
                    ),
                    b2: Matrix::zeros(1, d),
                    ln2: LayerNorm::ones(d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            cfg: cfg.clone(),
            vocab_size,
            max_len,
            embed: Matrix::random_uniform(vocab_size, d, 1.0, &mut rng),
            pos: sinusoidal_table(max_len, d),
            blocks,
            ln_f: LayerNorm::ones(d),
            w_cls: Matrix::random_uniform(d, cfg.num_classes, s, &mut rng),
            b_cls: Matrix::zeros(1, cfg.num_classes),
        })
    }

    /// Same shapes, all zeros — the gradient accumulator.
    pub fn zeros_like(&self) -> Model {
        let d = self.cfg.d;
        Model {
            cfg: self.cfg.clone(),
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            embed: Matrix::zeros(self.vocab_size, d),
            pos: Matrix::zeros(self.max_len, d),
            blocks: self
                .blocks
                .iter()
                .map(|_| Block {
                    attn: AdamraParams::zeros(&self.cfg.attention),
                    ln1: LayerNorm::zeros(d),
                    w1: Matrix::zeros(d, self.cfg.ffn_hidden),
                    b1: Matrix::zeros(1, self.cfg.ffn_hidden),
                    w2: Matrix::zeros(self.cfg.ffn_hidden, d),
                    b2: Matrix::zeros(1, d),
                    ln2: LayerNorm::zeros(d),
                })
                .collect(),
            ln_f: LayerNorm::zeros(d),
            w_cls: Matrix::zeros(d, self.cfg.num_classes),
            b_cls: Matrix::zeros(1, self.cfg.num_classes),
        }
    }

    /// Every weight tensor with a stable name, embeddings first, classifier
    /// last. The optimizer walks models and gradients in this order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (name, m) in b.attn.blocks_mut() {
                out.push((format!("block{}.attn.{}", l, name), m));
            }
            out.push((format!("block{}.ln1.gamma", l), &mut b.ln1.gamma));
            out.push((format!("block{}.ln1.beta", l), &mut b.ln1.beta));
            out.push((format!("block{}.w1", l), &mut b.w1));
            out.push((format!("block{}.b1", l), &mut b.b1));
            out.push((format!("block{}.w2", l), &mut b.w2));
            out.push((format!("block{}.b2", l), &mut b.b2));
            out.push((format!("block{}.ln2.gamma", l), &mut b.ln2.gamma));
            out.push((format!("block{}.ln2.beta", l), &mut b.ln2.beta));
        }
        out.push(("ln_f.gamma".into(), &mut self.ln_f.gamma));
        out.push(("ln_f.beta".into(), &mut self.ln_f.beta));
        out.push(("w_cls".into(), &mut self.w_cls));
        out.push(("b_cls".into(), &mut self.b_cls));
        out
    }

    /// Runs one sequence and captures everything backward needs.
    ///
    /// `routing_seed` only matters under random routing; callers vary it
    /// per example so random assignment differs across the batch.
    pub fn forward(&self, tokens: &[usize], routing_seed: u64) -> Result<(Matrix, ModelTrace)> {
        let n = tokens.len();
        if n == 0 || n > self.max_len {
            return Err(Error::InvalidArgument {
                op: "Model::forward",
                msg: format!("sequence length {} outside 1..={}", n, self.max_len),
            });
        }
        let d = self.cfg.d;
        let mut x = Matrix::zeros(n, d);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.vocab_size {
                return Err(Error::InvalidArgument {
                    op: "Model::forward",
                    msg: format!("token {} outside vocab {}", t, self.vocab_size),
                });
            }
            x.row_mut(i).copy_from_slice(self.embed.row(t));
            if self.cfg.pos_embedding {
                for (acc, &p) in x.row_mut(i).iter_mut().zip(self.pos.row(i)) {
                    *acc += p;
                }
            }
        }

        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let (normed1, ln1_cache) = layer_norm_forward(&x, &b.ln1);
            let (attn_out, attn_trace) =
                adamra_forward(&normed1, &b.attn, &self.cfg.attention, routing_seed ^ l as u64)?;
            let res1 = x.add(&attn_out)?;

            let (normed2, ln2_cache) = layer_norm_forward(&res1, &b.ln2);
            let mut pre = normed2.matmul(&b.w1)?;
            for i in 0..n {
                for (slot, &bias) in pre.row_mut(i).iter_mut().zip(b.b1.row(0)) {
                    *slot += bias;
                }
            }
            let act = pre.relu();
            let mut ffn_out = act.matmul(&b.w2)?;
            for i in 0..n {
                for (slot, &bias) in ffn_out.row_mut(i).iter_mut().zip(b.b2.row(0)) {
                    *slot += bias;
                }
            }
            let next = res1.add(&ffn_out)?;

            layers.push(LayerTrace {
                attn: attn_trace,
                ln1: ln1_cache,
                ln2: ln2_cache,
                normed2,
                pre,
                act,
            });
            x = next;
        }

        let (final_x, lnf_cache) = layer_norm_forward(&x, &self.ln_f);

        // mean pool and classify
        let mut pooled = Matrix::zeros(1, d);
        for i in 0..n {
            for (acc, &v) in pooled.row_mut(0).iter_mut().zip(final_x.row(i)) {
                *acc += v;
            }
        }
        pooled.scale_in_place(1.0 / n as f64);
        let mut logits = pooled.matmul(&self.w_cls)?;
        for (slot, &bias) in logits.row_mut(0).iter_mut().zip(self.b_cls.row(0)) {
            *slot += bias;
        }

        Ok((
            logits,
            ModelTrace { tokens: tokens.to_vec(), layers, ln_f: lnf_cache, final_x, pooled },
        ))
    }

    /// Cross-entropy loss and gradient accumulation for one traced example.
    ///
    /// Adds this example's parameter gradients into `grads` (so batching is
    /// a loop over examples) and returns the loss.
    pub fn backward(
        &self,
        logits: &Matrix,
        trace: &ModelTrace,
        label: usize,
        grads: &mut Model,
    ) -> Result<f64> {
        if label >= self.cfg.num_classes {
            return Err(Error::InvalidArgument {
                op: "Model::backward",
                msg: format!("label {} outside {} classes", label, self.cfg.num_classes),
            });
        }
        let n = trace.tokens.len();
        let d = self.cfg.d;

        // softmax cross-entropy; d logits = probs − one-hot
        let probs = logits.softmax_rows();
        let loss = -probs.get(0, label).max(1e-300).ln();
        let mut d_logits = probs;
        *d_logits
            .row_mut(0)
            .get_mut(label)
            .expect("label bounds checked above") -= 1.0;

        // classifier head
        grads.w_cls.add_assign(&trace.pooled.matmul_tn(&d_logits)?)?;
        grads.b_cls.add_assign(&d_logits)?;
        let d_pooled = d_logits.matmul_nt(&self.w_cls)?;

        // mean pool: every row shares the pooled gradient
        let mut d_final = Matrix::zeros(n, d);
        for i in 0..n {
            for (slot, &g) in d_final.row_mut(i).iter_mut().zip(d_pooled.row(0)) {
                *slot = g / n as f64;
            }
        }
        let mut dx = layer_norm_backward(&d_final, &trace.ln_f, &self.ln_f, &mut grads.ln_f)?;

        // blocks in reverse; dx is the gradient wrt each block's output
        for (l, b) in self.blocks.iter().enumerate().rev() {
            let lt = &trace.layers[l];
            let gb = &mut grads.blocks[l];

            // feed-forward branch: out = res1 + relu(LN2(res1)·w1 + b1)·w2 + b2
            gb.w2.add_assign(&lt.act.matmul_tn(&dx)?)?;
            for i in 0..n {
                for (slot, &g) in gb.b2.row_mut(0).iter_mut().zip(dx.row(i)) {
                    *slot += g;
                }
            }
            let mut d_act = dx.matmul_nt(&b.w2)?;
            for (slot, &z) in d_act.data_mut().iter_mut().zip(lt.pre.data()) {
                if z <= 0.0 {
                    *slot = 0.0;
                }
            }
            gb.w1.add_assign(&lt.normed2.matmul_tn(&d_act)?)?;
            for i in 0..n {
                for (slot, &g) in gb.b1.row_mut(0).iter_mut().zip(d_act.row(i)) {
                    *slot += g;
                }
            }
            let d_normed2 = d_act.matmul_nt(&b.w1)?;
            let mut d_res1 = layer_norm_backward(&d_normed2, &lt.ln2, &b.ln2, &mut gb.ln2)?;
            d_res1.add_assign(&dx)?; // residual skip around the feed-forward

            // attention branch: res1 = x + attn(LN1(x))
            let (attn_grads, d_normed1) = adamra_backward(&lt.attn, &b.attn, &d_res1)?;
            accumulate_attn(&mut gb.attn, &attn_grads)?;
            dx = layer_norm_backward(&d_normed1, &lt.ln1, &b.ln1, &mut gb.ln1)?;
            dx.add_assign(&d_res1)?; // residual skip around attention
        }

        // embeddings
        for (i, &t) in trace.tokens.iter().enumerate() {
            for (slot, &g) in grads.embed.row_mut(t).iter_mut().zip(dx.row(i)) {
                *slot += g;
            }
            if self.cfg.pos_embedding {
                for (slot, &g) in grads.pos.row_mut(i).iter_mut().zip(dx.row(i)) {
                    *slot += g;
                }
            }
        }
        Ok(loss)
    }

    /// Predicted class of one sequence.
    pub fn predict(&self, tokens: &[usize], routing_seed: u64) -> Result<usize> {
        let (logits, _) = self.forward(tokens, routing_seed)?;
        Ok(crate::layer::argmax_lowest(logits.row(0)))
    }
}

/// Sine/cosine position codes at geometrically spaced wavelengths — the
/// classic fixed encoding, used here as the *initialization* of the learned
/// positional table. Distances and reflections of positions are linear maps
/// of these codes, so attention can learn positional addressing through its
/// projections instead of having to invent position features from scratch.
fn sinusoidal_table(max_len: usize, d: usize) -> Matrix {
    Matrix::from_fn(max_len, d, |i, j| {
        let pair = (j / 2) as f64;
        let angle = i as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn accumulate_attn(acc: &mut AdamraParams, g: &AdamraParams) -> Result<()> {
    acc.qkv.w_q.add_assign(&g.qkv.w_q)?;
    acc.qkv.w_k.add_assign(&g.qkv.w_k)?;
    acc.qkv.w_v.add_assign(&g.qkv.w_v)?;
    acc.w_router.add_assign(&g.w_router)?;
    for (ah, gh) in acc.sub.iter_mut().zip(&g.sub) {
        for (a, b) in ah.iter_mut().zip(gh) {
            a.w_q.add_assign(&b.w_q)?;
            a.w_k.add_assign(&b.w_k)?;
            a.w_v.add_assign(&b.w_v)?;
        }
    }
    acc.w_o.add_assign(&g.w_o)
}

/// Per-row normalization cache: the normalized values and each row's
/// reciprocal standard deviation.
#[derive(Debug, Clone)]
pub struct LnCache {
    normed: Matrix, // x̂, before scale/shift
    inv_std: Vec<f64>,
}

fn layer_norm_forward(x: &Matrix, ln: &LayerNorm) -> (Matrix, LnCache) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut normed = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let xhat = (row[j] - mean) * inv;
            normed.row_mut(i)[j] = xhat;
            out.row_mut(i)[j] = xhat * ln.gamma.get(0, j) + ln.beta.get(0, j);
        }
    }
    (out, LnCache { normed, inv_std })
}

/// Standard layer-norm reverse pass; accumulates `dγ`/`dβ` and returns `dx`.
fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    ln: &LayerNorm,
    grads: &mut LayerNorm,
) -> Result<Matrix> {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    for i in 0..dy.rows() {
        let xhat = cache.normed.row(i);
        let g = dy.row(i);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            grads.gamma.row_mut(0)[j] += g[j] * xhat[j];
            grads.beta.row_mut(0)[j] += g[j];
            let dxhat = g[j] * ln.gamma.get(0, j);
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat[j];
        }
        let inv = cache.inv_std[i];
        let dn = d as f64;
        for j in 0..d {
            let dxhat = g[j] * ln.gamma.get(0, j);
            dx.row_mut(i)[j] = inv * (dxhat - sum_dxhat / dn - xhat[j] * sum_dxhat_xhat / dn);
        }
    }
    Ok(dx)
}

/// Intermediates of one block's forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub attn: ForwardTrace,
    ln1: LnCache,
    ln2: LnCache,
    /// Normalized feed-forward input.
    normed2: Matrix,
    /// Feed-forward pre-activation.
    pre: Matrix,
    /// Feed-forward post-ReLU activation.
    act: Matrix,
}

/// Everything recorded during [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ModelTrace {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    ln_f: LnCache,
    /// Normalized final block output (input to pooling).
    pub final_x: Matrix,
    pub pooled: Matrix,
}
