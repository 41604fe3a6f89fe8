//! Encoder-decoder Transformer over reordered infilling sequences.
//!
//! Tokens of the past, future and target segments get absolute positions
//! shifted by per-segment offsets before the positional lookup, so the model
//! sees the musical order past < target < future even though the sequence is
//! laid out as past, future, target. Every decoder layer cross-attends to the
//! encoder memory of the structural context picked by each token's structure
//! index; index 0 bypasses cross-attention entirely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ingest::{reorder_and_wrap, InfillingExample, SegmentBounds};
use crate::scalar::Scalar;
use crate::tensor::{self, Matrix};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub cross_attention_heads: usize,
    /// Size of the learned positional table.
    pub max_position: usize,
    /// Position offsets `(O_0, O_1, O_2)` for past, target and future.
    pub order_offsets: [usize; 3],
    pub vocab_size: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Published architecture: 512-wide, six 8-head layers on each side, 2048 FFN.
    pub fn paper() -> Self {
        Self {
            d_model: 512,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            ffn_dim: 2048,
            cross_attention_heads: 8,
            max_position: 8192,
            order_offsets: default_offsets(8192),
            vocab_size: Vocabulary::SIZE,
            dropout: 0.1,
        }
    }

    /// Desk-scale model used for overfitting and structural sanity runs.
    pub fn tiny() -> Self {
        Self {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            cross_attention_heads: 4,
            max_position: 1024,
            order_offsets: default_offsets(1024),
            vocab_size: Vocabulary::SIZE,
            dropout: 0.0,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn gradient_check() -> Self {
        Self {
            d_model: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_dim: 32,
            cross_attention_heads: 2,
            max_position: 128,
            order_offsets: default_offsets(128),
            vocab_size: Vocabulary::SIZE,
            dropout: 0.0,
        }
    }

    /// Resizes the positional table and resets offsets to their defaults.
    pub fn with_max_position(mut self, max_position: usize) -> Self {
        self.max_position = max_position;
        self.order_offsets = default_offsets(max_position);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("cross_attention_heads", self.cross_attention_heads),
            ("max_position", self.max_position),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) || !self.d_model.is_multiple_of(self.cross_attention_heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads and {} cross-attention heads", self.d_model, self.heads, self.cross_attention_heads)));
        }
        if self.vocab_size != Vocabulary::SIZE {
            return Err(Error::Config(format!("vocab_size must be {}, got {}", Vocabulary::SIZE, self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(o) = self.order_offsets.iter().find(|&&o| o >= self.max_position) {
            return Err(Error::Config(format!("order offset {o} exceeds max_position {}", self.max_position)));
        }
        Ok(())
    }
}

/// `(0, 0, max_position / 2)`
pub fn default_offsets(max_position: usize) -> [usize; 3] {
    [0, 0, max_position / 2]
}

/// Shifted absolute position of each of the first `len` tokens of a wrapped
/// sequence. BOS and past take `O_0`; the first SEP and future take `O_2`;
/// the second SEP, target and EOS take `O_1`.
///
/// Fails when the shifted past, target and future (the parts present within
/// `len`) are not strictly ordered, or when a position overflows the table.
pub fn effective_positions(bounds: &SegmentBounds, len: usize, offsets: [usize; 3], max_position: usize) -> Result<Vec<usize>> {
    let offset = |i: usize| {
        if i < bounds.past.end {
            offsets[0]
        } else if i < bounds.future.end {
            offsets[2]
        } else {
            offsets[1]
        }
    };
    let positions: Vec<usize> = (0..len).map(|i| i + offset(i)).collect();
    let span = |r: &std::ops::Range<usize>| {
        let (s, e) = (r.start, r.end.min(len));
        (s < e).then(|| (positions[s], positions[e - 1]))
    };
    let ordered: Vec<(usize, usize)> = [span(&bounds.past), span(&bounds.target), span(&bounds.future)].into_iter().flatten().collect();
    for w in ordered.windows(2) {
        if w[0].1 >= w[1].0 {
            return Err(Error::Config(format!("order offsets {offsets:?} do not keep past < target < future (positions {} and {})", w[0].1, w[1].0)));
        }
    }
    if let Some(&p) = positions.iter().max() {
        if p >= max_position {
            return Err(Error::Capacity(format!("effective position {p} exceeds max_position {max_position}")));
        }
    }
    Ok(positions)
}

/// Which predicted tokens contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossRegion {
    /// Target tokens and the closing EOS.
    #[default]
    Target,
    /// Every token after BOS.
    Full,
}

/// One model input: wrapped sequence, positions, structure indices, contexts
/// and the `(row, next id)` pairs scored by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub indices: Vec<usize>,
    pub contexts: Vec<Vec<usize>>,
    pub picks: Vec<(usize, usize)>,
}

impl BatchItem {
    pub fn from_example(example: &InfillingExample, config: &ModelConfig, region: LossRegion) -> Result<Self> {
        let wrapped = reorder_and_wrap(example);
        let ids = wrapped.tokens.ids();
        let positions = effective_positions(&wrapped.bounds, ids.len(), config.order_offsets, config.max_position)?;
        let first = match region {
            LossRegion::Target => wrapped.bounds.target.start - 1,
            LossRegion::Full => 0,
        };
        let picks = (first..ids.len() - 1).map(|r| (r, ids[r + 1])).collect();
        let item = Self { ids, positions, indices: wrapped.indices.iter().map(|&y| y as usize).collect(), contexts: example.contexts.iter().map(|c| c.ids()).collect(), picks };
        item.check(config)?;
        Ok(item)
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if let Some(&y) = self.indices.iter().max() {
            if y > self.contexts.len() {
                return Err(Error::Index { index: y, available: self.contexts.len() });
            }
        }
        for c in &self.contexts {
            if c.is_empty() {
                return Err(Error::EmptySegment("structural context without tokens"));
            }
            if c.len() > config.max_position {
                return Err(Error::Capacity(format!("context of {} tokens exceeds max_position {}", c.len(), config.max_position)));
            }
        }
        Ok(())
    }
}

/// Examples are kept at their true lengths rather than padded; each item is
/// run through the model separately and gradients are summed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn from_examples(examples: &[InfillingExample], config: &ModelConfig, region: LossRegion) -> Result<Self> {
        Ok(Self { items: examples.iter().map(|e| BatchItem::from_example(e, config, region)).collect::<Result<_>>()? })
    }

    /// Number of positions scored by the loss.
    pub fn masked_count(&self) -> usize {
        self.items.iter().map(|i| i.picks.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Zeros,
    Ones,
}

#[derive(Default)]
struct Builder {
    specs: Vec<(String, usize, usize, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push((name, rows, cols, init));
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm { g: self.add(format!("{prefix}.g"), 1, d, Init::Ones), b: self.add(format!("{prefix}.b"), 1, d, Init::Zeros) }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let mut pair = |n: &str| (self.add(format!("{prefix}.w{n}"), d, d, Init::Uniform), self.add(format!("{prefix}.b{n}"), 1, d, Init::Zeros));
        let (wq, bq) = pair("q");
        let (wk, bk) = pair("k");
        let (wv, bv) = pair("v");
        let (wo, bo) = pair("o");
        Attn { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            w1: self.add(format!("{prefix}.w1"), d, hidden, Init::Uniform),
            b1: self.add(format!("{prefix}.b1"), 1, hidden, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), hidden, d, Init::Uniform),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Vec<(String, usize, usize, Init)>) {
    let d = c.d_model;
    let mut b = Builder::default();
    let tok = b.add("tok_emb".into(), c.vocab_size, d, Init::Uniform);
    let pos = b.add("pos_emb".into(), c.max_position, d, Init::Uniform);
    let encoder = (0..c.encoder_layers)
        .map(|l| EncoderLayer {
            ln_attn: b.norm(&format!("enc{l}.ln_attn"), d),
            attn: b.attn(&format!("enc{l}.attn"), d),
            ln_ffn: b.norm(&format!("enc{l}.ln_ffn"), d),
            ffn: b.ffn(&format!("enc{l}.ffn"), d, c.ffn_dim),
        })
        .collect();
    let enc_norm = b.norm("enc.ln_out", d);
    let decoder = (0..c.decoder_layers)
        .map(|l| DecoderLayer {
            ln_self: b.norm(&format!("dec{l}.ln_self"), d),
            self_attn: b.attn(&format!("dec{l}.self"), d),
            ln_cross: b.norm(&format!("dec{l}.ln_cross"), d),
            cross: b.attn(&format!("dec{l}.cross"), d),
            ln_ffn: b.norm(&format!("dec{l}.ln_ffn"), d),
            ffn: b.ffn(&format!("dec{l}.ffn"), d, c.ffn_dim),
        })
        .collect();
    let dec_norm = b.norm("dec.ln_out", d);
    let out_w = b.add("out.w".into(), d, c.vocab_size, Init::Uniform);
    let out_b = b.add("out.b".into(), 1, c.vocab_size, Init::Zeros);
    (Layout { tok, pos, encoder, enc_norm, decoder, dec_norm, out_w, out_b }, b.specs)
}

/// Half-width of the uniform initializer (standard deviation 0.02).
const INIT_RANGE: f64 = 0.02 * 1.732_050_807_568_877_2;

/// Inverted-dropout state threaded through a training forward pass.
pub(crate) struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

fn dropout<T: Scalar>(g: &mut Graph<'_, T>, x: Var, drop: &mut Option<Dropout>) -> Var {
    let Some(d) = drop.as_mut().filter(|d| d.rate > 0.0) else { return x };
    let keep = T::from_f64_lossy(1.0 / (1.0 - d.rate));
    let n = g.value(x).data().len();
    let mask = (0..n).map(|_| if d.rng.gen::<f64>() < d.rate { T::zero() } else { keep }).collect();
    g.dropout(x, mask)
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Matrix<T>>,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), layout: self.layout.clone(), names: self.names.clone(), params: self.params.clone() }
    }
}

impl<T: Scalar> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).field("parameters", &self.parameter_count()).finish()
    }
}

impl<T: Scalar> Model<T> {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, rows, cols, init) in specs {
            params.push(match init {
                Init::Zeros => Matrix::zeros(rows, cols),
                Init::Ones => Matrix::from_vec(rows, cols, vec![T::one(); rows * cols]),
                Init::Uniform => Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.gen_range(-INIT_RANGE..INIT_RANGE))),
            });
            names.push(name);
        }
        Ok(Self { config, layout, names, params })
    }

    /// Rebuilds a model from named arrays, checking names and shapes.
    pub fn from_named(config: ModelConfig, arrays: Vec<(String, Matrix<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if arrays.len() != specs.len() {
            return Err(Error::Checkpoint(format!("expected {} arrays, found {}", specs.len(), arrays.len())));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for ((name, rows, cols, _), (got_name, m)) in specs.into_iter().zip(arrays) {
            if name != got_name || m.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!("array `{got_name}` {:?} does not match expected `{name}` {:?}", m.shape(), (rows, cols))));
            }
            if !m.is_finite() {
                return Err(Error::Checkpoint(format!("array `{name}` holds non-finite values")));
            }
            names.push(name);
            params.push(m);
        }
        Ok(Self { config, layout, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|m| m.data().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), layout: self.layout.clone(), names: self.names.clone(), params: self.params.iter().map(|m| m.cast()).collect() }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(Error::Index { index: id, available: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn attention_graph<'p>(&self, g: &mut Graph<'p, T>, xq: Var, xkv: Var, a: Attn, heads: usize, causal: bool) -> Var {
        let p = |g: &mut Graph<'p, T>, i| g.param(i);
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (p(g, a.wq), p(g, a.bq), p(g, a.wk), p(g, a.bk), p(g, a.wv), p(g, a.bv), p(g, a.wo), p(g, a.bo));
        let q = g.linear(xq, wq, Some(bq));
        let k = g.linear(xkv, wk, Some(bk));
        let v = g.linear(xkv, wv, Some(bv));
        let h = g.attention(q, k, v, heads, causal);
        g.linear(h, wo, Some(bo))
    }

    fn norm_graph(&self, g: &mut Graph<'_, T>, x: Var, n: Norm) -> Var {
        let (gain, bias) = (g.param(n.g), g.param(n.b));
        g.layer_norm(x, gain, bias)
    }

    fn ffn_graph(&self, g: &mut Graph<'_, T>, x: Var, f: Ffn) -> Var {
        let (w1, b1, w2, b2) = (g.param(f.w1), g.param(f.b1), g.param(f.w2), g.param(f.b2));
        let h = g.linear(x, w1, Some(b1));
        let h = g.gelu(h);
        g.linear(h, w2, Some(b2))
    }

    fn embed_graph(&self, g: &mut Graph<'_, T>, ids: &[usize], positions: Vec<usize>) -> Var {
        let (tok, pos) = (g.param(self.layout.tok), g.param(self.layout.pos));
        let t = g.gather(tok, ids.to_vec());
        let p = g.gather(pos, positions);
        g.add(t, p)
    }

    /// Bidirectional encoder over one context; positions start at 0.
    pub(crate) fn encoder_graph<'p>(&'p self, g: &mut Graph<'p, T>, ids: &[usize], drop: &mut Option<Dropout>) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptySegment("structural context without tokens"));
        }
        if ids.len() > self.config.max_position {
            return Err(Error::Capacity(format!("context of {} tokens exceeds max_position {}", ids.len(), self.config.max_position)));
        }
        self.check_ids(ids)?;
        let x = self.embed_graph(g, ids, (0..ids.len()).collect());
        let mut x = dropout(g, x, drop);
        for layer in &self.layout.encoder {
            let h = self.norm_graph(g, x, layer.ln_attn);
            let a = self.attention_graph(g, h, h, layer.attn, self.config.heads, false);
            let a = dropout(g, a, drop);
            x = g.add(x, a);
            let h = self.norm_graph(g, x, layer.ln_ffn);
            let f = self.ffn_graph(g, h, layer.ffn);
            let f = dropout(g, f, drop);
            x = g.add(x, f);
        }
        Ok(self.norm_graph(g, x, self.layout.enc_norm))
    }

    /// Cross-attention sublayer in its batched form: attention is computed
    /// against every referenced memory and each row keeps the result for its
    /// own index, or nothing when the index is 0.
    fn cross_graph(&self, g: &mut Graph<'_, T>, layer: &DecoderLayer, x: Var, memories: &[Option<Var>], indices: &[usize], drop: &mut Option<Dropout>) -> Result<Var> {
        if let Some(&y) = indices.iter().max() {
            if y > memories.len() {
                return Err(Error::Index { index: y, available: memories.len() });
            }
        }
        if indices.iter().all(|&y| y == 0) {
            return Ok(x);
        }
        let h = self.norm_graph(g, x, layer.ln_cross);
        let c = layer.cross;
        let (wq, bq) = (g.param(c.wq), g.param(c.bq));
        let q = g.linear(h, wq, Some(bq));
        let mut sources = Vec::with_capacity(memories.len());
        for (n, mem) in memories.iter().enumerate() {
            if !indices.contains(&(n + 1)) {
                sources.push(None);
                continue;
            }
            let mem = mem.ok_or(Error::Index { index: n + 1, available: n })?;
            let (wk, bk, wv, bv, wo, bo) = (g.param(c.wk), g.param(c.bk), g.param(c.wv), g.param(c.bv), g.param(c.wo), g.param(c.bo));
            let k = g.linear(mem, wk, Some(bk));
            let v = g.linear(mem, wv, Some(bv));
            let a = g.attention(q, k, v, self.config.cross_attention_heads, false);
            sources.push(Some(g.linear(a, wo, Some(bo))));
        }
        let selected = g.row_select(sources, indices.to_vec(), self.config.d_model);
        let selected = dropout(g, selected, drop);
        Ok(g.add(x, selected))
    }

    fn decoder_graph<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        ids: &[usize],
        positions: &[usize],
        indices: &[usize],
        memories: &[Option<Var>],
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        if ids.len() != positions.len() || ids.len() != indices.len() {
            return Err(Error::Config(format!("{} ids, {} positions and {} indices must align", ids.len(), positions.len(), indices.len())));
        }
        self.check_ids(ids)?;
        if let Some(&p) = positions.iter().max() {
            if p >= self.config.max_position {
                return Err(Error::Capacity(format!("effective position {p} exceeds max_position {}", self.config.max_position)));
            }
        }
        let x = self.embed_graph(g, ids, positions.to_vec());
        let mut x = dropout(g, x, drop);
        for layer in &self.layout.decoder {
            let h = self.norm_graph(g, x, layer.ln_self);
            let a = self.attention_graph(g, h, h, layer.self_attn, self.config.heads, true);
            let a = dropout(g, a, drop);
            x = g.add(x, a);
            x = self.cross_graph(g, layer, x, memories, indices, drop)?;
            let h = self.norm_graph(g, x, layer.ln_ffn);
            let f = self.ffn_graph(g, h, layer.ffn);
            let f = dropout(g, f, drop);
            x = g.add(x, f);
        }
        let x = self.norm_graph(g, x, self.layout.dec_norm);
        let (w, b) = (g.param(self.layout.out_w), g.param(self.layout.out_b));
        Ok(g.linear(x, w, Some(b)))
    }

    /// Logits node for one item; only contexts referenced by some index are encoded.
    pub(crate) fn item_graph<'p>(&'p self, g: &mut Graph<'p, T>, item: &BatchItem, drop: &mut Option<Dropout>) -> Result<Var> {
        item.check(&self.config)?;
        let mut memories = Vec::with_capacity(item.contexts.len());
        for (n, ctx) in item.contexts.iter().enumerate() {
            memories.push(if item.indices.contains(&(n + 1)) { Some(self.encoder_graph(g, ctx, drop)?) } else { None });
        }
        self.decoder_graph(g, &item.ids, &item.positions, &item.indices, &memories, drop)
    }

    /// One encoder memory (`len × d_model`) per context.
    pub fn encode_contexts(&self, contexts: &[Vec<usize>]) -> Result<Vec<Matrix<T>>> {
        contexts
            .iter()
            .map(|ids| {
                let mut g = Graph::new(&self.params);
                let m = self.encoder_graph(&mut g, ids, &mut None)?;
                Ok(g.value(m).clone())
            })
            .collect()
    }

    /// Logits (`sequence length × vocab_size`) without dropout.
    pub fn forward(&self, item: &BatchItem) -> Result<Matrix<T>> {
        let mut g = Graph::new(&self.params);
        let logits = self.item_graph(&mut g, item, &mut None)?;
        Ok(g.value(logits).clone())
    }

    /// Decoder logits for already-encoded memories.
    pub fn forward_with_memories(&self, ids: &[usize], positions: &[usize], indices: &[usize], memories: &[Matrix<T>]) -> Result<Matrix<T>> {
        let mut g = Graph::new(&self.params);
        let mems: Vec<Option<Var>> = memories.iter().map(|m| Some(g.input(m.clone()))).collect();
        let logits = self.decoder_graph(&mut g, ids, positions, indices, &mems, &mut None)?;
        Ok(g.value(logits).clone())
    }

    /// The cross-attention sublayer of decoder layer `layer` applied to
    /// `states`, exactly as the full forward pass computes it.
    pub fn cross_sublayer(&self, layer: usize, states: &Matrix<T>, memories: &[Matrix<T>], indices: &[usize]) -> Result<Matrix<T>> {
        let dl = self.decoder_layer(layer)?;
        if indices.len() != states.rows() {
            return Err(Error::Config(format!("{} indices for {} states", indices.len(), states.rows())));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(states.clone());
        let mems: Vec<Option<Var>> = memories.iter().map(|m| Some(g.input(m.clone()))).collect();
        let out = self.cross_graph(&mut g, dl, x, &mems, indices, &mut None)?;
        Ok(g.value(out).clone())
    }

    /// Token-by-token cross-attention: each row attends only to the memory
    /// its index names. Used to validate the batched form.
    pub fn cross_sublayer_reference(&self, layer: usize, states: &Matrix<T>, memories: &[Matrix<T>], indices: &[usize]) -> Result<Matrix<T>> {
        let dl = self.decoder_layer(layer)?;
        let mut out = states.clone();
        for (k, &y) in indices.iter().enumerate() {
            if y == 0 {
                continue;
            }
            let mem = memories.get(y - 1).ok_or(Error::Index { index: y, available: memories.len() })?;
            let row = Matrix::from_vec(1, states.cols(), states.row(k).to_vec());
            let delta = self.cross_row(dl, &row, &self.cross_kv(dl, mem));
            for (o, &d) in out.row_mut(k).iter_mut().zip(delta.data()) {
                *o += d;
            }
        }
        Ok(out)
    }

    fn decoder_layer(&self, layer: usize) -> Result<&DecoderLayer> {
        self.layout.decoder.get(layer).ok_or(Error::Index { index: layer, available: self.layout.decoder.len() })
    }

    fn p(&self, i: usize) -> &Matrix<T> {
        &self.params[i]
    }

    fn norm(&self, x: &Matrix<T>, n: Norm) -> Matrix<T> {
        tensor::layer_norm(x, self.p(n.g), self.p(n.b)).0
    }

    fn ffn(&self, x: &Matrix<T>, f: Ffn) -> Matrix<T> {
        let mut h = tensor::linear(x, self.p(f.w1), Some(self.p(f.b1)));
        for v in h.data_mut() {
            *v = tensor::gelu(*v);
        }
        tensor::linear(&h, self.p(f.w2), Some(self.p(f.b2)))
    }

    fn cross_kv(&self, dl: &DecoderLayer, memory: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let c = dl.cross;
        (tensor::linear(memory, self.p(c.wk), Some(self.p(c.bk))), tensor::linear(memory, self.p(c.wv), Some(self.p(c.bv))))
    }

    /// Cross-attention branch output (before the residual add) for one row.
    fn cross_row(&self, dl: &DecoderLayer, x: &Matrix<T>, kv: &(Matrix<T>, Matrix<T>)) -> Matrix<T> {
        let c = dl.cross;
        let h = self.norm(x, dl.ln_cross);
        let q = tensor::linear(&h, self.p(c.wq), Some(self.p(c.bq)));
        let (a, _) = tensor::attention(&q, &kv.0, &kv.1, self.config.cross_attention_heads, None);
        tensor::linear(&a, self.p(c.wo), Some(self.p(c.bo)))
    }

    /// Starts token-by-token decoding against fixed memories.
    pub fn decoder<'m>(&'m self, memories: &[Matrix<T>]) -> IncrementalDecoder<'m, T> {
        let d = self.config.d_model;
        IncrementalDecoder {
            model: self,
            self_kv: self.layout.decoder.iter().map(|_| (Matrix::zeros(0, d), Matrix::zeros(0, d))).collect(),
            cross_kv: self.layout.decoder.iter().map(|dl| memories.iter().map(|m| self.cross_kv(dl, m)).collect()).collect(),
        }
    }
}

/// Decoder state with cached self-attention keys and values, so each new
/// token costs one row of work per layer.
pub struct IncrementalDecoder<'m, T: Scalar> {
    model: &'m Model<T>,
    self_kv: Vec<(Matrix<T>, Matrix<T>)>,
    cross_kv: Vec<Vec<(Matrix<T>, Matrix<T>)>>,
}

impl<T: Scalar> IncrementalDecoder<'_, T> {
    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.self_kv.first().map_or(0, |kv| kv.0.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feeds one token and returns the logits predicting the next one.
    pub fn step(&mut self, id: usize, position: usize, index: usize) -> Result<Vec<T>> {
        let m = self.model;
        let cfg = &m.config;
        m.check_ids(&[id])?;
        if position >= cfg.max_position {
            return Err(Error::Capacity(format!("effective position {position} exceeds max_position {}", cfg.max_position)));
        }
        let memories = self.cross_kv.first().map_or(0, |v| v.len());
        if index > memories {
            return Err(Error::Index { index, available: memories });
        }
        let mut x = Matrix::from_vec(1, cfg.d_model, m.p(m.layout.tok).row(id).to_vec());
        for (a, &b) in x.data_mut().iter_mut().zip(m.p(m.layout.pos).row(position)) {
            *a += b;
        }
        for (l, dl) in m.layout.decoder.iter().enumerate() {
            let s = dl.self_attn;
            let h = m.norm(&x, dl.ln_self);
            let q = tensor::linear(&h, m.p(s.wq), Some(m.p(s.bq)));
            let (kc, vc) = &mut self.self_kv[l];
            kc.push_row(tensor::linear(&h, m.p(s.wk), Some(m.p(s.bk))).data());
            vc.push_row(tensor::linear(&h, m.p(s.wv), Some(m.p(s.bv))).data());
            let (a, _) = tensor::attention(&q, kc, vc, cfg.heads, None);
            x.add_assign(&tensor::linear(&a, m.p(s.wo), Some(m.p(s.bo))));
            if index > 0 {
                x.add_assign(&m.cross_row(dl, &x, &self.cross_kv[l][index - 1]));
            }
            let h = m.norm(&x, dl.ln_ffn);
            x.add_assign(&m.ffn(&h, dl.ffn));
        }
        let h = m.norm(&x, m.layout.dec_norm);
        Ok(tensor::linear(&h, m.p(m.layout.out_w), Some(m.p(m.layout.out_b))).into_vec())
    }
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_training_examples, make_synthetic_corpus};
    use proptest::prelude::*;
    use rand::Rng;

    fn item(ids: Vec<usize>, indices: Vec<usize>, contexts: Vec<Vec<usize>>) -> BatchItem {
        let n = ids.len();
        BatchItem { positions: (0..n).collect(), picks: (0..n - 1).map(|r| (r, ids[r + 1])).collect(), ids, indices, contexts }
    }

    fn random_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..Vocabulary::SIZE)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::paper().validate().is_ok());
        assert_eq!(ModelConfig::paper().order_offsets, [0, 0, 4096]);
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny();
        c.vocab_size = 100;
        assert!(c.validate().is_err());
        assert!(ModelConfig::tiny().with_max_position(0).validate().is_err());
    }

    #[test]
    fn effective_positions_worked_example() {
        let b = SegmentBounds::from_lengths(10, 8, 12);
        let pos = effective_positions(&b, b.total_len(), [0, 0, 4096], 8192).unwrap();
        assert_eq!(pos.len(), 34);
        assert_eq!(&pos[..11], &(0..11).collect::<Vec<_>>()[..]);
        assert_eq!(pos[11], 11 + 4096);
        assert_eq!(pos[12], 12 + 4096);
        assert_eq!(pos[21], 21);
        assert!(pos[21] >= 19);
        assert_eq!(pos[33], 33);
    }

    #[test]
    fn effective_positions_errors() {
        let b = SegmentBounds::from_lengths(3, 4, 5);
        assert!(matches!(effective_positions(&b, b.total_len(), [0, 0, 0], 64), Err(Error::Config(_))));
        assert!(matches!(effective_positions(&b, b.total_len(), [0, 0, 60], 64), Err(Error::Capacity(_))));
        let only_target = SegmentBounds::from_lengths(0, 0, 5);
        for offsets in [[0, 0, 0], [7, 3, 1], [0, 50, 0]] {
            assert!(effective_positions(&only_target, only_target.total_len(), offsets, 64).is_ok());
        }
    }

    proptest! {
        #[test]
        fn default_offsets_order_segments(past in 0usize..300, future in 0usize..300, target in 1usize..300) {
            let b = SegmentBounds::from_lengths(past, future, target);
            let pos = effective_positions(&b, b.total_len(), default_offsets(2048), 2048).unwrap();
            let max_past = b.past.clone().map(|i| pos[i]).max();
            let min_t = b.target.clone().map(|i| pos[i]).min().unwrap();
            let max_t = b.target.clone().map(|i| pos[i]).max().unwrap();
            let min_future = b.future.clone().map(|i| pos[i]).min();
            prop_assert!(max_past.map_or(true, |p| p < min_t));
            prop_assert!(min_future.map_or(true, |f| max_t < f));
        }
    }

    #[test]
    fn parameter_layout_is_stable() {
        let m = Model64::new(ModelConfig::gradient_check(), 0).unwrap();
        assert_eq!(m.param_names()[0], "tok_emb");
        assert_eq!(m.params()[1].shape(), (128, 16));
        assert!(m.param_names().iter().any(|n| n == "dec1.cross.wk"));
        let unique: std::collections::BTreeSet<_> = m.param_names().iter().collect();
        assert_eq!(unique.len(), m.param_names().len());
        let again = Model64::new(ModelConfig::gradient_check(), 0).unwrap();
        assert_eq!(m.params(), again.params());
    }

    #[test]
    fn memories_have_context_shapes() {
        let m = Model64::new(ModelConfig::gradient_check(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ctx: Vec<Vec<usize>> = [20, 30, 25].iter().map(|&n| random_ids(&mut rng, n)).collect();
        let mems = m.encode_contexts(&ctx).unwrap();
        assert_eq!(mems.iter().map(|x| x.shape()).collect::<Vec<_>>(), vec![(20, 16), (30, 16), (25, 16)]);
        let dup = m.encode_contexts(&[ctx[0].clone(), ctx[0].clone()]).unwrap();
        assert_eq!(dup[0], dup[1]);
        assert!(m.encode_contexts(&[]).unwrap().is_empty());
    }

    #[test]
    fn softmax_rows_normalize_and_runs_repeat() {
        let m = Model64::new(ModelConfig::gradient_check(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let it = item(random_ids(&mut rng, 12), vec![0, 1, 1, 2, 2, 0, 1, 1, 2, 0, 0, 1], vec![random_ids(&mut rng, 5), random_ids(&mut rng, 7)]);
        let logits = m.forward(&it).unwrap();
        assert_eq!(logits.shape(), (12, Vocabulary::SIZE));
        for r in 0..12 {
            let mut row = logits.row(r).to_vec();
            tensor::softmax_prefix(&mut row, Vocabulary::SIZE);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(logits, m.forward(&it).unwrap());
    }

    #[test]
    fn bypass_ignores_context_contents() {
        let m = Model64::new(ModelConfig::gradient_check(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ids = random_ids(&mut rng, 10);
        let a = item(ids.clone(), vec![0; 10], vec![random_ids(&mut rng, 6)]);
        let b = item(ids, vec![0; 10], vec![random_ids(&mut rng, 9)]);
        assert_eq!(m.forward(&a).unwrap(), m.forward(&b).unwrap());
    }

    #[test]
    fn index_beyond_contexts_is_rejected() {
        let m = Model64::new(ModelConfig::gradient_check(), 5).unwrap();
        let it = item(vec![1, 2, 3], vec![0, 2, 0], vec![vec![4, 5]]);
        assert!(matches!(m.forward(&it), Err(Error::Index { index: 2, available: 1 })));
        let states = Matrix::zeros(3, 16);
        assert!(matches!(m.cross_sublayer(0, &states, &[], &[0, 1, 0]), Err(Error::Index { .. })));
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let m = Model64::new(ModelConfig::gradient_check(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let contexts = vec![random_ids(&mut rng, 6), random_ids(&mut rng, 4)];
        let ids = random_ids(&mut rng, 15);
        let indices: Vec<usize> = (0..15).map(|i| i % 3).collect();
        let positions: Vec<usize> = (0..15).map(|i| if i < 5 { i } else { i + 40 }).collect();
        let mut it = item(ids.clone(), indices.clone(), contexts.clone());
        it.positions = positions.clone();
        let full = m.forward(&it).unwrap();
        let mems = m.encode_contexts(&contexts).unwrap();
        let mut dec = m.decoder(&mems);
        for k in 0..15 {
            let row = dec.step(ids[k], positions[k], indices[k]).unwrap();
            let diff = row.iter().zip(full.row(k)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "row {k}: {diff}");
        }
        assert_eq!(dec.len(), 15);
        assert_eq!(full, m.forward_with_memories(&ids, &positions, &indices, &mems).unwrap());
    }

    #[test]
    fn batch_items_from_examples() {
        let songs = make_synthetic_corpus(1, 2, &["i2 A4 B4 A4 o2"]);
        let examples = build_training_examples(&songs[0]).unwrap();
        let cfg = ModelConfig::tiny();
        let batch = Batch::from_examples(&examples, &cfg, LossRegion::Target).unwrap();
        for (ex, it) in examples.iter().zip(&batch.items) {
            assert_eq!(it.picks.len(), ex.target.len() + 1);
            assert_eq!(it.picks.last().unwrap().1, Vocabulary::id_of(crate::tokenizer::Token::Eos));
            assert_eq!(it.contexts.len(), 2);
        }
        let full = Batch::from_examples(&examples, &cfg, LossRegion::Full).unwrap();
        assert_eq!(full.items[0].picks.len(), full.items[0].ids.len() - 1);
        assert!(full.masked_count() > batch.masked_count());
    }
}
