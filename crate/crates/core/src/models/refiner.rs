use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{BackboneConfig, Variant};
use crate::channel_sim::ChannelMatrix;
use crate::error::{Error, Result};
use crate::tensor_core::{NodeId, ParamStore, Tape, Tensor};
use crate::transforms::{channel_to_rows, denormalize, preprocess, rows_to_channel, NormStats};

pub const LN_EPS: f64 = 1e-5;

const MASK_FILL: f64 = -1e30;

/// Sinusoidal encoding of position `i`: `sin` on even entries, `cos` on odd.
pub fn positional_encoding(i: usize, d_em: usize) -> Result<Vec<f64>> {
    if !d_em.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs even d_em, got {d_em}"
        )));
    }
    let mut out = vec![0.0; d_em];
    for j in 0..d_em / 2 {
        let angle = i as f64 / 10000f64.powf(2.0 * j as f64 / d_em as f64);
        out[2 * j] = angle.sin();
        out[2 * j + 1] = angle.cos();
    }
    Ok(out)
}

/// Trainability of a parameter when the backbone is frozen.
pub fn is_trainable_under_freeze(name: &str) -> bool {
    match name.strip_prefix("backbone.") {
        Some(rest) => rest.split('.').any(|seg| seg.starts_with("ln")),
        None => true,
    }
}

/// Tape nodes produced by [`RefinerModel::forward_tape`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[B, 2Nt, Nc]` prediction in the normalized domain.
    pub output: NodeId,
    /// Per-layer attention probabilities, each `[B, heads, L, L]`.
    pub attention: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct RefinerModel {
    config: BackboneConfig,
    n_tx: usize,
    n_sub: usize,
    patch_size: usize,
    params: ParamStore,
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

fn add_dense(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.insert(format!("{name}.w"), xavier(fan_in, fan_out, rng), true)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), true)
}

fn add_ln(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.g"), Tensor::ones(&[d]), true)?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]), true)
}

impl RefinerModel {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: BackboneConfig, n_tx: usize, n_sub: usize, patch_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_tx == 0 || n_sub == 0 || patch_size == 0 || !n_sub.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "patch size {patch_size} must divide n_sub {n_sub} (n_tx {n_tx})"
            )));
        }
        if config.l_tokens != n_sub / patch_size {
            return Err(Error::Config(format!(
                "l_tokens {} does not equal n_sub / patch_size = {}",
                config.l_tokens,
                n_sub / patch_size
            )));
        }
        let (d, l, w) = (config.d_em, config.l_tokens, 2 * n_tx * patch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();

        add_dense(&mut p, "embed", w, d, &mut rng)?;
        let mut table = Vec::with_capacity(l * d);
        for i in 0..l {
            table.extend(positional_encoding(i, d)?);
        }
        p.insert("pos_encoding", Tensor::new(&[l, d], table)?, true)?;

        match config.variant {
            Variant::Llm => {
                for i in 0..config.n_layers {
                    add_ln(&mut p, &format!("backbone.{i}.ln1"), d)?;
                    add_dense(&mut p, &format!("backbone.{i}.attn.qkv"), d, 3 * d, &mut rng)?;
                    add_dense(&mut p, &format!("backbone.{i}.attn.proj"), d, d, &mut rng)?;
                    add_ln(&mut p, &format!("backbone.{i}.ln2"), d)?;
                    add_dense(&mut p, &format!("backbone.{i}.mlp.fc"), d, config.d_ff, &mut rng)?;
                    add_dense(&mut p, &format!("backbone.{i}.mlp.proj"), config.d_ff, d, &mut rng)?;
                }
                add_ln(&mut p, "backbone.ln_f", d)?;
            }
            Variant::Small => {
                let h = config.small_hidden;
                add_dense(&mut p, "small.fc1", l * d, h, &mut rng)?;
                add_dense(&mut p, "small.fc2", h, h, &mut rng)?;
                add_dense(&mut p, "small.fc3", h, l * d, &mut rng)?;
            }
            Variant::Identical => {}
        }

        add_dense(&mut p, "post.token", d, w, &mut rng)?;
        add_dense(&mut p, "post.freq", n_sub, n_sub, &mut rng)?;

        let mut model = Self {
            config,
            n_tx,
            n_sub,
            patch_size,
            params: p,
        };
        model.apply_freeze_policy()?;
        Ok(model)
    }

    /// Sets trainable flags from `config.freeze`.
    pub fn apply_freeze_policy(&mut self) -> Result<()> {
        let freeze = self.config.freeze;
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        for name in names {
            let trainable = !freeze || is_trainable_under_freeze(&name);
            self.params.set_trainable(&name, trainable)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn n_tx(&self) -> usize {
        self.n_tx
    }

    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Real width of one token before embedding, `2Nt·P`.
    pub fn token_width(&self) -> usize {
        2 * self.n_tx * self.patch_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces one tensor, keeping its trainable flag.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_param", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Token tensor `[B, L, 2Nt·P]` and per-sample normalization stats.
    pub fn token_batch(&self, h_ins: &[ChannelMatrix]) -> Result<(Tensor, Vec<NormStats>)> {
        let (l, w) = (self.config.l_tokens, self.token_width());
        let mut data = Vec::with_capacity(h_ins.len() * l * w);
        let mut stats = Vec::with_capacity(h_ins.len());
        for h in h_ins {
            self.check_dims(h)?;
            let (tokens, s) = preprocess(h, self.patch_size)?;
            data.extend(tokens.flat());
            stats.push(s);
        }
        Ok((Tensor::new(&[h_ins.len(), l, w], data)?, stats))
    }

    /// Loss targets `[B, 2Nt, Nc]`: each true channel divided by the scale of
    /// its coarse estimate.
    pub fn target_batch(&self, hs: &[ChannelMatrix], stats: &[NormStats]) -> Result<Tensor> {
        if hs.len() != stats.len() {
            return Err(Error::dim("target_batch", &[hs.len()], &[stats.len()]));
        }
        let mut data = Vec::with_capacity(hs.len() * 2 * self.n_tx * self.n_sub);
        for (h, s) in hs.iter().zip(stats) {
            self.check_dims(h)?;
            data.extend(channel_to_rows(h).into_iter().map(|v| v / s.scale));
        }
        Tensor::new(&[hs.len(), 2 * self.n_tx, self.n_sub], data)
    }

    fn check_dims(&self, h: &ChannelMatrix) -> Result<()> {
        if h.shape() != (self.n_tx, self.n_sub) {
            return Err(Error::dim(
                "refiner input",
                &[h.n_tx(), h.n_sub()],
                &[self.n_tx, self.n_sub],
            ));
        }
        Ok(())
    }

    /// Dense embedding plus positional table: `[B, L, w] → [B, L, d_em]`.
    pub fn embed(&self, tape: &mut Tape, tokens: NodeId) -> Result<NodeId> {
        let shape = tape.shape(tokens).to_vec();
        let (l, w) = (self.config.l_tokens, self.token_width());
        if shape.len() != 3 || shape[1] != l || shape[2] != w {
            return Err(Error::dim("embed", &shape, &[0, l, w]));
        }
        let wt = tape.param(&self.params, "embed.w")?;
        let b = tape.param(&self.params, "embed.b")?;
        let x = tape.dense(tokens, wt, b)?;
        let pe = tape.param(&self.params, "pos_encoding")?;
        tape.add(x, pe)
    }

    fn check_sequence(&self, tape: &Tape, x: NodeId, op: &'static str) -> Result<usize> {
        let shape = tape.shape(x);
        let (l, d) = (self.config.l_tokens, self.config.d_em);
        if shape.len() != 3 || shape[1] != l || shape[2] != d {
            return Err(Error::dim(op, shape, &[0, l, d]));
        }
        Ok(shape[0])
    }

    /// Backbone on `[B, L, d_em]`. Returns the output and, for the
    /// transformer, each layer's attention probabilities.
    pub fn backbone_forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_sequence(tape, x, "backbone")?;
        match self.config.variant {
            Variant::Identical => Ok((x, Vec::new())),
            Variant::Small => Ok((self.small_forward(tape, x)?, Vec::new())),
            Variant::Llm => self.transformer(tape, x),
        }
    }

    fn layer_norm(&self, tape: &mut Tape, x: NodeId, name: &str) -> Result<NodeId> {
        let g = tape.param(&self.params, &format!("{name}.g"))?;
        let b = tape.param(&self.params, &format!("{name}.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn dense(&self, tape: &mut Tape, x: NodeId, name: &str) -> Result<NodeId> {
        let w = tape.param(&self.params, &format!("{name}.w"))?;
        let b = tape.param(&self.params, &format!("{name}.b"))?;
        tape.dense(x, w, b)
    }

    fn transformer(&self, tape: &mut Tape, mut x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let c = &self.config;
        let (l, d, h, dh) = (c.l_tokens, c.d_em, c.n_heads, c.head_dim());
        let b = tape.shape(x)[0];
        let mask = c.causal.then(|| {
            let mut m = Tensor::zeros(&[l, l]);
            for i in 0..l {
                for j in i + 1..l {
                    m.data_mut()[i * l + j] = MASK_FILL;
                }
            }
            tape.input(m)
        });
        let mut probs = Vec::with_capacity(c.n_layers);
        for i in 0..c.n_layers {
            let pre = format!("backbone.{i}");
            let a = self.layer_norm(tape, x, &format!("{pre}.ln1"))?;
            let qkv = self.dense(tape, a, &format!("{pre}.attn.qkv"))?;
            let mut heads = [qkv; 3];
            for (k, slot) in heads.iter_mut().enumerate() {
                let part = tape.slice_last(qkv, k * d, d)?;
                let part = tape.reshape(part, &[b, l, h, dh])?;
                *slot = tape.permute(part, &[0, 2, 1, 3])?;
            }
            let [q, k, v] = heads;
            let scores = tape.batch_matmul(q, k, true)?;
            let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let p = tape.softmax(scores)?;
            probs.push(p);
            let ctx = tape.batch_matmul(p, v, false)?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b, l, d])?;
            let attn = self.dense(tape, ctx, &format!("{pre}.attn.proj"))?;
            x = tape.add(x, attn)?;

            let a = self.layer_norm(tape, x, &format!("{pre}.ln2"))?;
            let f = self.dense(tape, a, &format!("{pre}.mlp.fc"))?;
            let f = tape.gelu(f)?;
            let f = self.dense(tape, f, &format!("{pre}.mlp.proj"))?;
            x = tape.add(x, f)?;
        }
        let out = self.layer_norm(tape, x, "backbone.ln_f")?;
        Ok((out, probs))
    }

    /// Flatten, two leaky dense layers, project back and reshape.
    pub fn small_forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        if self.config.variant != Variant::Small {
            return Err(Error::Contract(format!(
                "small_forward on a {} model",
                self.config.variant
            )));
        }
        let b = self.check_sequence(tape, x, "small_forward")?;
        let (l, d, slope) = (self.config.l_tokens, self.config.d_em, self.config.leaky_slope);
        let flat = tape.reshape(x, &[b, l * d])?;
        let y = self.dense(tape, flat, "small.fc1")?;
        let y = tape.leaky_relu(y, slope)?;
        let y = self.dense(tape, y, "small.fc2")?;
        let y = tape.leaky_relu(y, slope)?;
        let y = self.dense(tape, y, "small.fc3")?;
        tape.reshape(y, &[b, l, d])
    }

    /// Token dense, unpatch, then per-row frequency mixing:
    /// `[B, L, d_em] → [B, 2Nt, Nc]` in the normalized domain.
    pub fn post_process(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let b = self.check_sequence(tape, x, "post_process")?;
        let y = self.dense(tape, x, "post.token")?;
        let y = tape.reshape(y, &[b, self.n_sub, 2 * self.n_tx])?;
        let rows = tape.permute(y, &[0, 2, 1])?;
        self.dense(tape, rows, "post.freq")
    }

    /// Records the full refiner for a token batch.
    pub fn forward_tape(&self, tape: &mut Tape, tokens: &Tensor) -> Result<ForwardTrace> {
        let t = tape.input(tokens.clone());
        let x = self.embed(tape, t)?;
        let (y, attention) = self.backbone_forward(tape, x)?;
        let output = self.post_process(tape, y)?;
        Ok(ForwardTrace { output, attention })
    }

    /// Refines a batch of coarse estimates.
    pub fn forward_batch(&self, h_ins: &[ChannelMatrix]) -> Result<Vec<ChannelMatrix>> {
        if h_ins.is_empty() {
            return Ok(Vec::new());
        }
        let (tokens, stats) = self.token_batch(h_ins)?;
        let mut tape = Tape::new();
        let trace = self.forward_tape(&mut tape, &tokens)?;
        self.decode(tape.value(trace.output), &stats)
    }

    /// Turns `[B, 2Nt, Nc]` normalized rows back into channels.
    pub fn decode(&self, rows: &Tensor, stats: &[NormStats]) -> Result<Vec<ChannelMatrix>> {
        let per = 2 * self.n_tx * self.n_sub;
        if rows.len() != per * stats.len() {
            return Err(Error::dim(
                "decode",
                rows.shape(),
                &[stats.len(), 2 * self.n_tx, self.n_sub],
            ));
        }
        rows.data()
            .chunks(per)
            .zip(stats)
            .map(|(r, s)| Ok(denormalize(&rows_to_channel(r, self.n_tx, self.n_sub)?, *s)))
            .collect()
    }

    pub fn forward_full(&self, h_in: &ChannelMatrix) -> Result<ChannelMatrix> {
        Ok(self.forward_batch(std::slice::from_ref(h_in))?.remove(0))
    }

    /// Attention probabilities `[heads, L, L]` of every layer for one input.
    pub fn attention_maps(&self, h_in: &ChannelMatrix) -> Result<Vec<Tensor>> {
        let (tokens, _) = self.token_batch(std::slice::from_ref(h_in))?;
        let mut tape = Tape::new();
        let trace = self.forward_tape(&mut tape, &tokens)?;
        trace
            .attention
            .iter()
            .map(|&p| {
                let v = tape.value(p);
                v.clone().reshape(&v.shape()[1..])
            })
            .collect()
    }
}
