//! Pre-norm ViT encoder with a pluggable attention operator.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::attention::{attend_graph, AttentionParams, AttentionSpec, AttnVars, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Rng, Tensor, Var, LN_EPS};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub attention: AttentionSpec,
    pub use_cls_token: bool,
}

impl ViTConfig {
    /// Softmax-attention config with the usual defaults.
    pub fn new(image_size: usize, patch_size: usize, depth: usize, d_model: usize, heads: usize, num_classes: usize) -> Self {
        ViTConfig {
            image_size,
            patch_size,
            depth,
            d_model,
            heads,
            mlp_ratio: 4,
            num_classes,
            attention: AttentionSpec::new(Variant::Softmax, d_model, heads),
            use_cls_token: true,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count `N`, including CLS when enabled.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return bad("depth, mlp_ratio and num_classes must be positive".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.attention.d_model != self.d_model || self.attention.heads != self.heads {
            return bad("attention spec disagrees with d_model/heads".into());
        }
        self.attention.validate()?;
        self.attention.check_seq_len(self.seq_len())
    }
}

/// One transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<E> {
    pub ln1_gamma: Tensor<E>,
    pub ln1_beta: Tensor<E>,
    pub attn: AttentionParams<E>,
    pub ln2_gamma: Tensor<E>,
    pub ln2_beta: Tensor<E>,
    pub mlp_w1: Tensor<E>,
    pub mlp_w2: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<E> {
    pub config: ViTConfig,
    pub patch_proj: Tensor<E>,
    pub pos_emb: Tensor<E>,
    pub cls: Tensor<E>,
    pub blocks: Vec<Block<E>>,
    pub norm_gamma: Tensor<E>,
    pub norm_beta: Tensor<E>,
    pub head: Option<Tensor<E>>,
}

/// What [`ViTModel::forward`] should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Logits,
    Features,
    /// Features plus per-block (post-ln1 input, attention output) pairs.
    Taps,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<E> {
    /// `B×C`, only in logits mode.
    pub logits: Option<Tensor<E>>,
    /// Final-norm token features, `B×N×D`.
    pub features: Tensor<E>,
    /// Per block, `(X_i, O_i)` each `B×N×D`; empty unless tapping.
    pub taps: Vec<(Tensor<E>, Tensor<E>)>,
}

/// Block tensors placed on a graph.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub attn: AttnVars,
    pub ln2: (Var, Var),
    pub mlp: (Var, Var),
}

/// Model tensors placed on a graph, plus the name of every trainable leaf.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub patch_proj: Var,
    pub pos_emb: Var,
    pub cls: Var,
    pub blocks: Vec<BlockVars>,
    pub norm: (Var, Var),
    pub head: Option<Var>,
    pub trainable: Vec<(String, Var)>,
}

/// Graph nodes of one batched forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Final-norm tokens, `(B·N)×D`.
    pub features: Var,
    pub taps: Vec<(Var, Var)>,
}

impl<E: Element> ViTModel<E> {
    /// Random initialization drawn from `seed`.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let (d, n) = (config.d_model, config.seq_len());
        let hidden = config.mlp_ratio * d;
        let patch_proj = Tensor::randn(&[config.patch_dim(), d], 1.0 / (config.patch_dim() as f64).sqrt(), &mut rng);
        let pos_emb = Tensor::randn(&[n, d], 0.02, &mut rng);
        let cls = Tensor::randn(&[d], 0.02, &mut rng);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let mut spec = config.attention.clone();
            spec.seed = Rng::substream_seed(config.attention.seed, i as u64);
            blocks.push(Block {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                attn: AttentionParams::init(&spec, &mut rng)?,
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                mlp_w1: Tensor::randn(&[d, hidden], 1.0 / (d as f64).sqrt(), &mut rng),
                mlp_w2: Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), &mut rng),
            });
        }
        let head = Some(Tensor::randn(&[d, config.num_classes], 1.0 / (d as f64).sqrt(), &mut rng));
        Ok(ViTModel {
            config,
            patch_proj,
            pos_emb,
            cls,
            blocks,
            norm_gamma: Tensor::ones(&[d]),
            norm_beta: Tensor::zeros(&[d]),
            head,
        })
    }

    /// Every tensor with its canonical name, sorted by name.
    pub fn named(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("pos_emb".to_string(), &self.pos_emb),
            ("cls".to_string(), &self.cls),
            ("norm.gamma".to_string(), &self.norm_gamma),
            ("norm.beta".to_string(), &self.norm_beta),
        ];
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = block_prefix(i);
            out.push((format!("{p}ln1.gamma"), &b.ln1_gamma));
            out.push((format!("{p}ln1.beta"), &b.ln1_beta));
            out.push((format!("{p}ln2.gamma"), &b.ln2_gamma));
            out.push((format!("{p}ln2.beta"), &b.ln2_beta));
            out.push((format!("{p}mlp.w1"), &b.mlp_w1));
            out.push((format!("{p}mlp.w2"), &b.mlp_w2));
            for (name, t) in b.attn.named() {
                out.push((format!("{p}attn.{name}"), t));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Mutable counterpart of [`ViTModel::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = vec![
            ("patch_proj".to_string(), &mut self.patch_proj),
            ("pos_emb".to_string(), &mut self.pos_emb),
            ("cls".to_string(), &mut self.cls),
            ("norm.gamma".to_string(), &mut self.norm_gamma),
            ("norm.beta".to_string(), &mut self.norm_beta),
        ];
        if let Some(h) = &mut self.head {
            out.push(("head".to_string(), h));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = block_prefix(i);
            out.push((format!("{p}ln1.gamma"), &mut b.ln1_gamma));
            out.push((format!("{p}ln1.beta"), &mut b.ln1_beta));
            out.push((format!("{p}ln2.gamma"), &mut b.ln2_gamma));
            out.push((format!("{p}ln2.beta"), &mut b.ln2_beta));
            out.push((format!("{p}mlp.w1"), &mut b.mlp_w1));
            out.push((format!("{p}mlp.w2"), &mut b.mlp_w2));
            for (name, t) in b.attn.named_mut() {
                out.push((format!("{p}attn.{name}"), t));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Place the model on `g`; `trainable(name)` picks parameters over constants.
    pub fn bind(&self, g: &mut Graph<E>, trainable: impl Fn(&str) -> bool) -> ModelVars {
        let mut names = Vec::new();
        let leaf = |g: &mut Graph<E>, names: &mut Vec<(String, Var)>, name: String, t: &Tensor<E>| {
            if trainable(&name) {
                let v = g.param(t.clone());
                names.push((name, v));
                v
            } else {
                g.constant(t.clone())
            }
        };
        let patch_proj = leaf(g, &mut names, "patch_proj".into(), &self.patch_proj);
        let pos_emb = leaf(g, &mut names, "pos_emb".into(), &self.pos_emb);
        let cls = leaf(g, &mut names, "cls".into(), &self.cls);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let p = block_prefix(i);
            let ln1 = (
                leaf(g, &mut names, format!("{p}ln1.gamma"), &b.ln1_gamma),
                leaf(g, &mut names, format!("{p}ln1.beta"), &b.ln1_beta),
            );
            let attn = bind_attention(g, &b.attn, &format!("{p}attn."), &trainable, &mut names);
            let ln2 = (
                leaf(g, &mut names, format!("{p}ln2.gamma"), &b.ln2_gamma),
                leaf(g, &mut names, format!("{p}ln2.beta"), &b.ln2_beta),
            );
            let mlp = (
                leaf(g, &mut names, format!("{p}mlp.w1"), &b.mlp_w1),
                leaf(g, &mut names, format!("{p}mlp.w2"), &b.mlp_w2),
            );
            blocks.push(BlockVars { ln1, attn, ln2, mlp });
        }
        let norm = (
            leaf(g, &mut names, "norm.gamma".into(), &self.norm_gamma),
            leaf(g, &mut names, "norm.beta".into(), &self.norm_beta),
        );
        let head = self.head.as_ref().map(|h| leaf(g, &mut names, "head".into(), h));
        names.sort_by(|a, b| a.0.cmp(&b.0));
        ModelVars {
            patch_proj,
            pos_emb,
            cls,
            blocks,
            norm,
            head,
            trainable: names,
        }
    }

    /// Bind only block `i`'s attention; returns the vars and trainable names.
    pub fn bind_block_attention(
        &self,
        g: &mut Graph<E>,
        i: usize,
        trainable: impl Fn(&str) -> bool,
    ) -> (AttnVars, Vec<(String, Var)>) {
        let mut names = Vec::new();
        let vars = bind_attention(g, &self.blocks[i].attn, &format!("{}attn.", block_prefix(i)), &trainable, &mut names);
        (vars, names)
    }

    /// Flattened patches of a `B×3×S×S` batch as a `(B·P_n)×(3·P²)` matrix.
    pub fn patchify(&self, batch: &Tensor<E>) -> Result<Tensor<E>> {
        let c = &self.config;
        let s = c.image_size;
        let shape = batch.shape();
        let b = match shape {
            [3, h, w] if *h == s && *w == s => 1,
            [b, 3, h, w] if *h == s && *w == s => *b,
            _ => return Err(Error::shape("patchify", shape, &[0, 3, s, s])),
        };
        let (p, grid, pd) = (c.patch_size, c.grid(), c.patch_dim());
        let src = batch.data();
        let mut out = Vec::with_capacity(b * c.num_patches() * pd);
        for img in 0..b {
            let base = img * 3 * s * s;
            for pr in 0..grid {
                for pc in 0..grid {
                    for ch in 0..3 {
                        for dy in 0..p {
                            let row = base + ch * s * s + (pr * p + dy) * s + pc * p;
                            out.extend_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(&[b * c.num_patches(), pd], out)
    }

    /// Token embedding on the graph: projection, CLS, positions. Returns `(B·N)×D`.
    pub fn embed_graph(&self, g: &mut Graph<E>, vars: &ModelVars, patches: &Tensor<E>, batch: usize) -> Result<Var> {
        let np = self.config.num_patches();
        if patches.rows() != batch * np || patches.cols() != self.config.patch_dim() {
            return Err(Error::shape("embed", patches.shape(), &[batch * np, self.config.patch_dim()]));
        }
        let x = g.constant(patches.clone());
        let proj = g.matmul(x, vars.patch_proj)?;
        let mut seqs = Vec::with_capacity(batch);
        for i in 0..batch {
            let tokens = g.slice_rows(proj, i * np, np)?;
            let tokens = if self.config.use_cls_token {
                g.concat_rows(&[vars.cls, tokens])?
            } else {
                tokens
            };
            seqs.push(g.add(tokens, vars.pos_emb)?);
        }
        if batch == 1 {
            Ok(seqs[0])
        } else {
            g.concat_rows(&seqs)
        }
    }

    /// Attention of one block over each sequence of a stacked `(B·N)×D` input.
    pub fn attention_graph(&self, g: &mut Graph<E>, attn: &AttnVars, x: Var, batch: usize) -> Result<Var> {
        let n = g.value(x).rows() / batch;
        if batch == 1 {
            return attend_graph(g, x, attn, &self.config.attention);
        }
        let mut outs = Vec::with_capacity(batch);
        for i in 0..batch {
            let xi = g.slice_rows(x, i * n, n)?;
            outs.push(attend_graph(g, xi, attn, &self.config.attention)?);
        }
        g.concat_rows(&outs)
    }

    /// Blocks and final norm over embedded tokens.
    pub fn encode_graph(&self, g: &mut Graph<E>, vars: &ModelVars, tokens: Var, batch: usize, taps: bool) -> Result<Trace> {
        let eps = E::lit(LN_EPS);
        let mut x = tokens;
        let mut recorded = Vec::new();
        for bv in &vars.blocks {
            let h = g.layernorm(x, bv.ln1.0, bv.ln1.1, eps)?;
            let o = self.attention_graph(g, &bv.attn, h, batch)?;
            if taps {
                recorded.push((h, o));
            }
            x = g.add(x, o)?;
            let h = g.layernorm(x, bv.ln2.0, bv.ln2.1, eps)?;
            let u = g.matmul(h, bv.mlp.0)?;
            let u = g.gelu(u)?;
            let m = g.matmul(u, bv.mlp.1)?;
            x = g.add(x, m)?;
        }
        let features = g.layernorm(x, vars.norm.0, vars.norm.1, eps)?;
        Ok(Trace {
            features,
            taps: recorded,
        })
    }

    /// Full graph forward from a `B×3×S×S` batch.
    pub fn forward_graph(&self, g: &mut Graph<E>, vars: &ModelVars, batch: &Tensor<E>, taps: bool) -> Result<Trace> {
        let patches = self.patchify(batch)?;
        let b = patches.rows() / self.config.num_patches();
        let tokens = self.embed_graph(g, vars, &patches, b)?;
        self.encode_graph(g, vars, tokens, b, taps)
    }

    /// `B×C` logits from final features: CLS row, or mean of patch rows without CLS.
    pub fn logits_graph(&self, g: &mut Graph<E>, vars: &ModelVars, features: Var, batch: usize) -> Result<Var> {
        let head = vars
            .head
            .ok_or_else(|| Error::Config("model has no classification head".into()))?;
        let n = self.config.seq_len();
        let mut pooled = Vec::with_capacity(batch);
        for i in 0..batch {
            if self.config.use_cls_token {
                pooled.push(g.slice_rows(features, i * n, 1)?);
            } else {
                let rows = g.slice_rows(features, i * n, n)?;
                pooled.push(g.mean_rows(rows)?);
            }
        }
        let pooled = if batch == 1 { pooled[0] } else { g.concat_rows(&pooled)? };
        g.matmul(pooled, head)
    }

    /// Gradient-free evaluation.
    pub fn forward(&self, batch: &Tensor<E>, mode: ForwardMode) -> Result<ForwardOutput<E>> {
        if mode == ForwardMode::Logits && self.head.is_none() {
            return Err(Error::Config("logits requested from a model without a head".into()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, |_| false);
        let trace = self.forward_graph(&mut g, &vars, batch, mode == ForwardMode::Taps)?;
        let (n, d) = (self.config.seq_len(), self.config.d_model);
        let b = g.value(trace.features).rows() / n;
        let to3 = |t: &Tensor<E>| t.reshape(&[b, n, d]);
        let logits = if mode == ForwardMode::Logits {
            let l = self.logits_graph(&mut g, &vars, trace.features, b)?;
            Some(g.value(l).clone())
        } else {
            None
        };
        let taps = trace
            .taps
            .iter()
            .map(|&(x, o)| Ok((to3(g.value(x))?, to3(g.value(o))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            logits,
            features: to3(g.value(trace.features))?,
            taps,
        })
    }

    /// Copy of a softmax model whose blocks use `target` attention instead.
    ///
    /// Projections are inherited bit for bit; extras are freshly initialized.
    pub fn linearize(&self, target: &AttentionSpec) -> Result<Self> {
        if self.config.attention.variant != Variant::Softmax {
            return Err(Error::Config(format!(
                "linearize expects a softmax teacher, found {}",
                self.config.attention.variant
            )));
        }
        if target.variant == Variant::Softmax {
            return Err(Error::Param("linearizing to softmax attention is a no-op".into()));
        }
        let mut spec = target.clone();
        spec.d_model = self.config.d_model;
        spec.heads = self.config.heads;
        let n = self.config.seq_len();
        if spec.variant == Variant::Linformer {
            spec.seq_len_fixed = n;
        }
        if spec.variant == Variant::Nystrom {
            spec.landmarks = spec.landmarks.min(n);
        }
        let mut student = self.clone();
        student.config.attention = spec.clone();
        student.config.validate()?;
        for (i, b) in student.blocks.iter_mut().enumerate() {
            b.attn.extras = AttentionParams::<E>::init_extras(&spec, Rng::substream_seed(spec.seed, i as u64))?;
        }
        Ok(student)
    }

    /// Assign tensors by name; every name must exist with a matching shape.
    pub fn set_named(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        let mut slots = self.named_mut();
        let (_, slot) = slots
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Param(format!("unknown tensor {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape(
                "set_named",
                slot.shape(),
                t.shape(),
            ));
        }
        **slot = t;
        Ok(())
    }
}

fn block_prefix(i: usize) -> String {
    format!("blocks.{i:02}.")
}

fn bind_attention<E: Element>(
    g: &mut Graph<E>,
    p: &AttentionParams<E>,
    prefix: &str,
    trainable: &impl Fn(&str) -> bool,
    names: &mut Vec<(String, Var)>,
) -> AttnVars {
    let vars = p.bind(g, |local| trainable(&format!("{prefix}{local}")));
    // leaves come back in the same order as `named()`
    for ((local, _), v) in p.named().into_iter().zip(vars.leaves()) {
        let full = format!("{prefix}{local}");
        if local != "performer.omega" && trainable(&full) {
            names.push((full, v));
        }
    }
    vars
}
