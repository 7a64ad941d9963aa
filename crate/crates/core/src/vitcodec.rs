//! The learned transceiver: patch embedding, a pre-norm transformer stack on
//! both sides, noise-heatmap conditioning, power-normalized channel symbols
//! on the encode side, and a sign-symmetric Siamese front end plus output
//! projection on the decode side.

use rand::Rng;
use thiserror::Error;

use crate::channel::{pack_complex, unpack_real, ChannelError, Heatmap};
use crate::datasets::Image;
use crate::mimolin::CMatrix;
use crate::numerics::{Graph, NumericsError, Tensor, VarId};
use crate::par::ExecMode;
use crate::rng::stream;

pub const LN_EPS: f64 = 1e-6;
/// MLP hidden width as a multiple of the model dimension.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Error)]
pub enum VitError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite activation in {place}, layer {layer}")]
    NonFinite { place: &'static str, layer: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

impl VitError {
    /// Collapses into a [`NumericsError`] for closures that must return one.
    pub fn into_numerics(self) -> NumericsError {
        match self {
            VitError::Numerics(n) => n,
            other => NumericsError::NonFinite { context: other.to_string() },
        }
    }
}

/// Denominator inside the attention softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttnScale {
    /// sqrt(d): scale by the full model dimension.
    #[default]
    ModelDim,
    /// sqrt(d_s): scale by the per-head dimension.
    HeadDim,
}

/// Architecture hyperparameters. `l`, `c`, `head_dim` and `seq_cols` are
/// derived; constructor validates all divisibility constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    /// patches per image side (the grid is p×p)
    pub p: usize,
    /// sequence length, p²
    pub l: usize,
    /// per-patch feature dimension, 3hw/p²
    pub c: usize,
    /// model dimension
    pub d: usize,
    /// transformer layers per side
    pub layers: usize,
    /// attention heads
    pub heads: usize,
    /// per-head dimension, d / heads
    pub head_dim: usize,
    /// antennas
    pub m: usize,
    /// channel uses per image
    pub k: usize,
    pub h: usize,
    pub w: usize,
    /// packed symbol columns per sequence row, 2Mk/l
    pub seq_cols: usize,
    pub attn_scale: AttnScale,
}

impl ViTConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: usize,
        d: usize,
        layers: usize,
        heads: usize,
        m: usize,
        k: usize,
        h: usize,
        w: usize,
        attn_scale: AttnScale,
    ) -> Result<Self, VitError> {
        if p == 0 || d == 0 || layers == 0 || heads == 0 || m == 0 || k == 0 {
            return Err(VitError::Config("all dimensions must be positive".into()));
        }
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(VitError::Config(format!("image {h}x{w} not divisible into a {p}x{p} patch grid")));
        }
        if !d.is_multiple_of(heads) {
            return Err(VitError::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        let l = p * p;
        if !(2 * m * k).is_multiple_of(l) {
            return Err(VitError::Config(format!("2Mk = {} not divisible by l = {l}", 2 * m * k)));
        }
        let c = 3 * h * w / (p * p);
        Ok(ViTConfig {
            p,
            l,
            c,
            d,
            layers,
            heads,
            head_dim: d / heads,
            m,
            k,
            h,
            w,
            seq_cols: 2 * m * k / l,
            attn_scale,
        })
    }

    fn attn_denom(&self) -> f64 {
        match self.attn_scale {
            AttnScale::ModelDim => self.d as f64,
            AttnScale::HeadDim => self.head_dim as f64,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub heads: Vec<HeadParams>,
    pub wi: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w0: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub wc: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub siam_w1: Tensor,
    pub siam_b1: Tensor,
    pub siam_w2: Tensor,
    pub siam_b2: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub w_out: Tensor,
}

/// All learnable weights of the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

fn xavier(rows: usize, cols: usize, seed: u64, name: &str) -> Tensor {
    let mut rng = stream(seed, &[crate::datasets::fnv1a(name.as_bytes())]);
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).unwrap().with_grad()
}

fn small_table(rows: usize, cols: usize, seed: u64, name: &str) -> Tensor {
    let mut rng = stream(seed, &[crate::datasets::fnv1a(name.as_bytes())]);
    let data = (0..rows * cols).map(|_| rng.gen_range(-0.02..0.02)).collect();
    Tensor::new(vec![rows, cols], data).unwrap().with_grad()
}

fn ones_vec(n: usize) -> Tensor {
    Tensor::full(vec![n], 1.0).with_grad()
}

fn zeros_vec(n: usize) -> Tensor {
    Tensor::zeros(vec![n]).with_grad()
}

fn init_layer(cfg: &ViTConfig, seed: u64, prefix: &str) -> LayerParams {
    let d = cfg.d;
    let ds = cfg.head_dim;
    LayerParams {
        ln1_gain: ones_vec(d),
        ln1_bias: zeros_vec(d),
        heads: (0..cfg.heads)
            .map(|h| HeadParams {
                wq: xavier(d, ds, seed, &format!("{prefix}.h{h}.wq")),
                wk: xavier(d, ds, seed, &format!("{prefix}.h{h}.wk")),
                wv: xavier(d, ds, seed, &format!("{prefix}.h{h}.wv")),
            })
            .collect(),
        wi: xavier(ds * cfg.heads, d, seed, &format!("{prefix}.wi")),
        ln2_gain: ones_vec(d),
        ln2_bias: zeros_vec(d),
        mlp_w1: xavier(d, MLP_RATIO * d, seed, &format!("{prefix}.mlp_w1")),
        mlp_b1: zeros_vec(MLP_RATIO * d),
        mlp_w2: xavier(MLP_RATIO * d, d, seed, &format!("{prefix}.mlp_w2")),
        mlp_b2: zeros_vec(d),
    }
}

impl ViTParams {
    /// Deterministic seeded initialization; each tensor draws from its own
    /// name-keyed stream, so the layout is order-independent.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Self {
        let enc = EncoderParams {
            w0: xavier(cfg.c + cfg.seq_cols, cfg.d, seed, "enc.w0"),
            pos: small_table(cfg.l, cfg.d, seed, "enc.pos"),
            layers: (0..cfg.layers).map(|i| init_layer(cfg, seed, &format!("enc.l{i}"))).collect(),
            wc: xavier(cfg.d, cfg.seq_cols, seed, "enc.wc"),
        };
        let dec = DecoderParams {
            siam_w1: xavier(2 * cfg.seq_cols, cfg.d, seed, "dec.siam_w1"),
            siam_b1: zeros_vec(cfg.d),
            siam_w2: xavier(cfg.d, cfg.d, seed, "dec.siam_w2"),
            siam_b2: zeros_vec(cfg.d),
            pos: small_table(cfg.l, cfg.d, seed, "dec.pos"),
            layers: (0..cfg.layers).map(|i| init_layer(cfg, seed, &format!("dec.l{i}"))).collect(),
            w_out: xavier(cfg.d, cfg.c, seed, "dec.w_out"),
        };
        ViTParams { encoder: enc, decoder: dec }
    }

    /// Every tensor with its canonical name, in checkpoint order. The
    /// same order is used by `bind_params`, the optimizer slots, and the
    /// checkpoint format.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        fn layer<'a>(prefix: &str, lp: &'a LayerParams, out: &mut Vec<(String, &'a Tensor)>) {
            out.push((format!("{prefix}.ln1.gain"), &lp.ln1_gain));
            out.push((format!("{prefix}.ln1.bias"), &lp.ln1_bias));
            for (h, hp) in lp.heads.iter().enumerate() {
                out.push((format!("{prefix}.h{h}.wq"), &hp.wq));
                out.push((format!("{prefix}.h{h}.wk"), &hp.wk));
                out.push((format!("{prefix}.h{h}.wv"), &hp.wv));
            }
            out.push((format!("{prefix}.wi"), &lp.wi));
            out.push((format!("{prefix}.ln2.gain"), &lp.ln2_gain));
            out.push((format!("{prefix}.ln2.bias"), &lp.ln2_bias));
            out.push((format!("{prefix}.mlp.w1"), &lp.mlp_w1));
            out.push((format!("{prefix}.mlp.b1"), &lp.mlp_b1));
            out.push((format!("{prefix}.mlp.w2"), &lp.mlp_w2));
            out.push((format!("{prefix}.mlp.b2"), &lp.mlp_b2));
        }
        let mut out = Vec::new();
        out.push(("enc.w0".to_string(), &self.encoder.w0));
        out.push(("enc.pos".to_string(), &self.encoder.pos));
        for (i, lp) in self.encoder.layers.iter().enumerate() {
            layer(&format!("enc.l{i}"), lp, &mut out);
        }
        out.push(("enc.wc".to_string(), &self.encoder.wc));
        out.push(("dec.siam_w1".to_string(), &self.decoder.siam_w1));
        out.push(("dec.siam_b1".to_string(), &self.decoder.siam_b1));
        out.push(("dec.siam_w2".to_string(), &self.decoder.siam_w2));
        out.push(("dec.siam_b2".to_string(), &self.decoder.siam_b2));
        out.push(("dec.pos".to_string(), &self.decoder.pos));
        for (i, lp) in self.decoder.layers.iter().enumerate() {
            layer(&format!("dec.l{i}"), lp, &mut out);
        }
        out.push(("dec.w_out".to_string(), &self.decoder.w_out));
        out
    }

    /// Mutable counterpart of [`ViTParams::named`], identical order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn layer<'a>(prefix: &str, lp: &'a mut LayerParams, out: &mut Vec<(String, &'a mut Tensor)>) {
            out.push((format!("{prefix}.ln1.gain"), &mut lp.ln1_gain));
            out.push((format!("{prefix}.ln1.bias"), &mut lp.ln1_bias));
            for (h, hp) in lp.heads.iter_mut().enumerate() {
                out.push((format!("{prefix}.h{h}.wq"), &mut hp.wq));
                out.push((format!("{prefix}.h{h}.wk"), &mut hp.wk));
                out.push((format!("{prefix}.h{h}.wv"), &mut hp.wv));
            }
            out.push((format!("{prefix}.wi"), &mut lp.wi));
            out.push((format!("{prefix}.ln2.gain"), &mut lp.ln2_gain));
            out.push((format!("{prefix}.ln2.bias"), &mut lp.ln2_bias));
            out.push((format!("{prefix}.mlp.w1"), &mut lp.mlp_w1));
            out.push((format!("{prefix}.mlp.b1"), &mut lp.mlp_b1));
            out.push((format!("{prefix}.mlp.w2"), &mut lp.mlp_w2));
            out.push((format!("{prefix}.mlp.b2"), &mut lp.mlp_b2));
        }
        let mut out = Vec::new();
        out.push(("enc.w0".to_string(), &mut self.encoder.w0));
        out.push(("enc.pos".to_string(), &mut self.encoder.pos));
        for (i, lp) in self.encoder.layers.iter_mut().enumerate() {
            layer(&format!("enc.l{i}"), lp, &mut out);
        }
        out.push(("enc.wc".to_string(), &mut self.encoder.wc));
        out.push(("dec.siam_w1".to_string(), &mut self.decoder.siam_w1));
        out.push(("dec.siam_b1".to_string(), &mut self.decoder.siam_b1));
        out.push(("dec.siam_w2".to_string(), &mut self.decoder.siam_w2));
        out.push(("dec.siam_b2".to_string(), &mut self.decoder.siam_b2));
        out.push(("dec.pos".to_string(), &mut self.decoder.pos));
        for (i, lp) in self.decoder.layers.iter_mut().enumerate() {
            layer(&format!("dec.l{i}"), lp, &mut out);
        }
        out.push(("dec.w_out".to_string(), &mut self.decoder.w_out));
        out
    }

    pub fn n_tensors(&self) -> usize {
        self.named().len()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Patchify
// ---------------------------------------------------------------------------

/// Image → l×c sequence. Patch order is row-major over the p×p grid; within
/// a patch, pixels row-major with color channels innermost.
pub fn patchify(img: &Image, p: usize) -> Result<Tensor, VitError> {
    let (h, w) = (img.h, img.w);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(VitError::Config(format!("image {h}x{w} not divisible into a {p}x{p} patch grid")));
    }
    let (ph, pw) = (h / p, w / p);
    let l = p * p;
    let c = 3 * ph * pw;
    let mut data = vec![0.0; l * c];
    for gr in 0..p {
        for gc in 0..p {
            let row = gr * p + gc;
            for pr in 0..ph {
                for pc in 0..pw {
                    for ch in 0..3 {
                        data[row * c + (pr * pw + pc) * 3 + ch] = img.at(gr * ph + pr, gc * pw + pc, ch);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![l, c], data).unwrap())
}

/// Exact inverse of [`patchify`].
pub fn depatchify(seq: &[f64], p: usize, h: usize, w: usize) -> Result<Image, VitError> {
    let (ph, pw) = (h / p, w / p);
    let c = 3 * ph * pw;
    if !h.is_multiple_of(p) || !w.is_multiple_of(p) || seq.len() != p * p * c {
        return Err(VitError::Config(format!(
            "sequence of {} values does not depatchify to {h}x{w} with grid {p}",
            seq.len()
        )));
    }
    let mut img = Image::constant(h, w, 0.0);
    for gr in 0..p {
        for gc in 0..p {
            let row = gr * p + gc;
            for pr in 0..ph {
                for pc in 0..pw {
                    for ch in 0..3 {
                        img.set(gr * ph + pr, gc * pw + pc, ch, seq[row * c + (pr * pw + pc) * 3 + ch]);
                    }
                }
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

pub struct BoundHead {
    pub wq: VarId,
    pub wk: VarId,
    pub wv: VarId,
}

pub struct BoundLayer {
    pub ln1_gain: VarId,
    pub ln1_bias: VarId,
    pub heads: Vec<BoundHead>,
    pub wi: VarId,
    pub ln2_gain: VarId,
    pub ln2_bias: VarId,
    pub mlp_w1: VarId,
    pub mlp_b1: VarId,
    pub mlp_w2: VarId,
    pub mlp_b2: VarId,
}

pub struct BoundParams {
    pub enc_w0: VarId,
    pub enc_pos: VarId,
    pub enc_layers: Vec<BoundLayer>,
    pub enc_wc: VarId,
    pub siam_w1: VarId,
    pub siam_b1: VarId,
    pub siam_w2: VarId,
    pub siam_b2: VarId,
    pub dec_pos: VarId,
    pub dec_layers: Vec<BoundLayer>,
    pub dec_w_out: VarId,
    /// Leaf ids in `ViTParams::visit` order, for gradient extraction.
    pub flat: Vec<VarId>,
}

fn bind_layer(g: &mut Graph, lp: &LayerParams, flat: &mut Vec<VarId>) -> BoundLayer {
    let ln1_gain = g.leaf(&lp.ln1_gain);
    let ln1_bias = g.leaf(&lp.ln1_bias);
    flat.push(ln1_gain);
    flat.push(ln1_bias);
    let heads = lp
        .heads
        .iter()
        .map(|hp| {
            let b = BoundHead { wq: g.leaf(&hp.wq), wk: g.leaf(&hp.wk), wv: g.leaf(&hp.wv) };
            flat.extend([b.wq, b.wk, b.wv]);
            b
        })
        .collect();
    let wi = g.leaf(&lp.wi);
    let ln2_gain = g.leaf(&lp.ln2_gain);
    let ln2_bias = g.leaf(&lp.ln2_bias);
    let mlp_w1 = g.leaf(&lp.mlp_w1);
    let mlp_b1 = g.leaf(&lp.mlp_b1);
    let mlp_w2 = g.leaf(&lp.mlp_w2);
    let mlp_b2 = g.leaf(&lp.mlp_b2);
    flat.extend([wi, ln2_gain, ln2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2]);
    BoundLayer { ln1_gain, ln1_bias, heads, wi, ln2_gain, ln2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2 }
}

/// Reassembles a [`BoundParams`] from leaves created elsewhere (gradient
/// checking binds the leaves itself). Consumes ids in `ViTParams::named`
/// order; must stay in lockstep with [`bind_params`].
pub fn rebind_params(g: &Graph, ids: &[VarId], cfg: &ViTConfig) -> BoundParams {
    let _ = g;
    let mut it = ids.iter().copied();
    let mut next = || it.next().expect("enough leaves");
    let enc_w0 = next();
    let enc_pos = next();
    let take_layer = |next: &mut dyn FnMut() -> VarId| BoundLayer {
        ln1_gain: next(),
        ln1_bias: next(),
        heads: (0..cfg.heads).map(|_| BoundHead { wq: next(), wk: next(), wv: next() }).collect(),
        wi: next(),
        ln2_gain: next(),
        ln2_bias: next(),
        mlp_w1: next(),
        mlp_b1: next(),
        mlp_w2: next(),
        mlp_b2: next(),
    };
    let enc_layers: Vec<BoundLayer> = (0..cfg.layers).map(|_| take_layer(&mut next)).collect();
    let enc_wc = next();
    let siam_w1 = next();
    let siam_b1 = next();
    let siam_w2 = next();
    let siam_b2 = next();
    let dec_pos = next();
    let dec_layers: Vec<BoundLayer> = (0..cfg.layers).map(|_| take_layer(&mut next)).collect();
    let dec_w_out = next();
    assert!(it.next().is_none(), "leaf count mismatch");
    BoundParams {
        enc_w0,
        enc_pos,
        enc_layers,
        enc_wc,
        siam_w1,
        siam_b1,
        siam_w2,
        siam_b2,
        dec_pos,
        dec_layers,
        dec_w_out,
        flat: ids.to_vec(),
    }
}

/// Binds every parameter as a graph leaf, in `visit` order.
pub fn bind_params(g: &mut Graph, params: &ViTParams) -> BoundParams {
    let mut flat = Vec::new();
    let enc_w0 = g.leaf(&params.encoder.w0);
    let enc_pos = g.leaf(&params.encoder.pos);
    flat.extend([enc_w0, enc_pos]);
    let enc_layers = params.encoder.layers.iter().map(|lp| bind_layer(g, lp, &mut flat)).collect();
    let enc_wc = g.leaf(&params.encoder.wc);
    flat.push(enc_wc);
    let siam_w1 = g.leaf(&params.decoder.siam_w1);
    let siam_b1 = g.leaf(&params.decoder.siam_b1);
    let siam_w2 = g.leaf(&params.decoder.siam_w2);
    let siam_b2 = g.leaf(&params.decoder.siam_b2);
    let dec_pos = g.leaf(&params.decoder.pos);
    flat.extend([siam_w1, siam_b1, siam_w2, siam_b2, dec_pos]);
    let dec_layers = params.decoder.layers.iter().map(|lp| bind_layer(g, lp, &mut flat)).collect();
    let dec_w_out = g.leaf(&params.decoder.w_out);
    flat.push(dec_w_out);
    BoundParams {
        enc_w0,
        enc_pos,
        enc_layers,
        enc_wc,
        siam_w1,
        siam_b1,
        siam_w2,
        siam_b2,
        dec_pos,
        dec_layers,
        dec_w_out,
        flat,
    }
}

/// One pre-norm transformer layer: residual multi-head self-attention block
/// followed by a residual MLP branch on the block output.
pub fn transformer_layer(
    g: &mut Graph,
    f_in: VarId,
    lp: &BoundLayer,
    cfg: &ViTConfig,
) -> Result<VarId, NumericsError> {
    let ln1 = g.layer_norm(f_in, lp.ln1_gain, lp.ln1_bias, LN_EPS)?;
    let inv_scale = 1.0 / cfg.attn_denom().sqrt();
    let mut concat: Option<VarId> = None;
    for head in &lp.heads {
        let q = g.matmul(ln1, head.wq)?;
        let k = g.matmul(ln1, head.wk)?;
        let v = g.matmul(ln1, head.wv)?;
        let scores = g.matmul_nt(q, k)?;
        let scaled = g.scale(scores, inv_scale);
        let attn = g.softmax_rows(scaled);
        let sa = g.matmul(attn, v)?;
        concat = Some(match concat {
            None => sa,
            Some(prev) => g.concat_cols(prev, sa)?,
        });
    }
    let proj = g.matmul(concat.expect("at least one head"), lp.wi)?;
    let msa = g.add(f_in, proj)?;

    let ln2 = g.layer_norm(msa, lp.ln2_gain, lp.ln2_bias, LN_EPS)?;
    let h1 = g.matmul(ln2, lp.mlp_w1)?;
    let h1b = g.add_row(h1, lp.mlp_b1)?;
    let act = g.gelu(h1b);
    let h2 = g.matmul(act, lp.mlp_w2)?;
    let h2b = g.add_row(h2, lp.mlp_b2)?;
    g.add(msa, h2b)
}

/// Encoder output nodes: the raw latent sequence and its power-normalized
/// version (the packed channel input).
pub struct EncoderNodes {
    pub z_e: VarId,
    pub x: VarId,
}

/// Builds the encoder graph from an l×(c+seq_cols) input node (source
/// features concatenated with the heatmap).
pub fn encoder_graph(
    g: &mut Graph,
    bound: &BoundParams,
    s_in: VarId,
    cfg: &ViTConfig,
    ps: f64,
) -> Result<EncoderNodes, VitError> {
    let indices: Vec<usize> = (0..cfg.l).collect();
    let proj = g.matmul(s_in, bound.enc_w0)?;
    let pos = g.embed_lookup(bound.enc_pos, &indices)?;
    let mut f = g.add(proj, pos)?;
    for (i, lp) in bound.enc_layers.iter().enumerate() {
        f = transformer_layer(g, f, lp, cfg)?;
        if !g.is_finite(f) {
            return Err(VitError::NonFinite { place: "encoder", layer: i });
        }
    }
    let z_e = g.matmul(f, bound.enc_wc)?;
    let x = g.normalize_power(z_e, (cfg.m * cfg.k) as f64 * ps)?;
    Ok(EncoderNodes { z_e, x })
}

/// Weight-shared Siamese front end: g(S_d) + g(−S_d) with a
/// linear→GeLU→linear branch. An even function of the concatenated input.
pub fn siamese_graph(g: &mut Graph, bound: &BoundParams, s_d: VarId) -> Result<VarId, NumericsError> {
    let branch = |g: &mut Graph, input: VarId| -> Result<VarId, NumericsError> {
        let h1 = g.matmul(input, bound.siam_w1)?;
        let h1b = g.add_row(h1, bound.siam_b1)?;
        let act = g.gelu(h1b);
        let h2 = g.matmul(act, bound.siam_w2)?;
        g.add_row(h2, bound.siam_b2)
    };
    let pos_branch = branch(g, s_d)?;
    let neg_in = g.scale(s_d, -1.0);
    let neg_branch = branch(g, neg_in)?;
    g.add(pos_branch, neg_branch)
}

/// Builds the decoder graph from the received l×seq_cols node and the
/// heatmap node; returns the l×c reconstructed sequence (unclamped).
pub fn decoder_graph(
    g: &mut Graph,
    bound: &BoundParams,
    xs: VarId,
    heat: VarId,
    cfg: &ViTConfig,
) -> Result<VarId, VitError> {
    let s_d = g.concat_cols(xs, heat)?;
    let siam = siamese_graph(g, bound, s_d)?;
    let indices: Vec<usize> = (0..cfg.l).collect();
    let pos = g.embed_lookup(bound.dec_pos, &indices)?;
    let mut dcur = g.add(siam, pos)?;
    for (i, lp) in bound.dec_layers.iter().enumerate() {
        dcur = transformer_layer(g, dcur, lp, cfg)?;
        if !g.is_finite(dcur) {
            return Err(VitError::NonFinite { place: "decoder", layer: i });
        }
    }
    Ok(g.matmul(dcur, bound.dec_w_out)?)
}

/// Concatenates source features with heatmap columns into the encoder input
/// matrix.
pub fn concat_heatmap(seq: &Tensor, heat: &Heatmap) -> Tensor {
    let (l, c) = seq.dims2();
    assert_eq!(heat.rows, l, "heatmap rows must match sequence length");
    let cols = heat.cols;
    let mut data = vec![0.0; l * (c + cols)];
    for i in 0..l {
        data[i * (c + cols)..i * (c + cols) + c].copy_from_slice(&seq.data()[i * c..(i + 1) * c]);
        data[i * (c + cols) + c..(i + 1) * (c + cols)].copy_from_slice(&heat.values()[i * cols..(i + 1) * cols]);
    }
    Tensor::new(vec![l, c + cols], data).unwrap()
}

// ---------------------------------------------------------------------------
// Standalone forward wrappers (no gradients)
// ---------------------------------------------------------------------------

/// l×c patch sequence + heatmap → power-normalized channel symbols.
pub fn encoder_forward(
    s_s: &Tensor,
    heat: &Heatmap,
    params: &ViTParams,
    cfg: &ViTConfig,
    ps: f64,
) -> Result<CMatrix, VitError> {
    let mut g = Graph::new(ExecMode::Sequential);
    let bound = bind_params(&mut g, params);
    let s_in = g.leaf(&concat_heatmap(s_s, heat));
    let nodes = encoder_graph(&mut g, &bound, s_in, cfg, ps)?;
    Ok(unpack_real(g.value(nodes.x), cfg.m, cfg.k)?)
}

/// Received packed sequence + heatmap → Siamese front-end output
/// (position embedding not yet added).
pub fn siamese_forward(xs: &Tensor, heat: &Heatmap, params: &ViTParams) -> Result<Tensor, VitError> {
    let mut g = Graph::new(ExecMode::Sequential);
    let bound = bind_params(&mut g, params);
    let xs_id = g.leaf(xs);
    let heat_id = g.leaf_data(heat.rows, heat.cols, heat.values().to_vec(), false);
    let s_d = g.concat_cols(xs_id, heat_id)?;
    let out = siamese_graph(&mut g, &bound, s_d)?;
    let (r, c) = g.dims(out);
    Ok(Tensor::new(vec![r, c], g.value(out).to_vec()).unwrap())
}

/// Equalized symbols + heatmap → reconstructed image, clamped to [0,1]
/// (evaluation-time path; training reads the unclamped graph output).
pub fn decoder_forward(
    x_prime: &CMatrix,
    heat: &Heatmap,
    params: &ViTParams,
    cfg: &ViTConfig,
) -> Result<Image, VitError> {
    let mut g = Graph::new(ExecMode::Sequential);
    let bound = bind_params(&mut g, params);
    let packed = pack_complex(x_prime);
    let xs = g.leaf_data(cfg.l, cfg.seq_cols, packed, false);
    let heat_id = g.leaf_data(heat.rows, heat.cols, heat.values().to_vec(), false);
    let seq = decoder_graph(&mut g, &bound, xs, heat_id, cfg)?;
    let clamped: Vec<f64> = g.value(seq).iter().map(|v| v.clamp(0.0, 1.0)).collect();
    depatchify(&clamped, cfg.p, cfg.h, cfg.w)
}
