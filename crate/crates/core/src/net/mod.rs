//! Shared transformer encoder, modality-aware decoder and the pretraining
//! forward pass.
//!
//! Optical and auxiliary tokens are masked independently, tagged with a
//! stream-type embedding and encoded as one joint sequence. The decoder
//! restores each stream with its own mask token, lets the two streams attend
//! to each other, and reconstructs every spectral group and auxiliary
//! modality through its own linear head.

mod blocks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geoposition::{absolute_2d_sincos, chip_geo_embedding, MercatorBounds, PatchGrid};
use crate::kv::KvMap;
use crate::masking::{apply_mask, batch_plans, restore_with_mask_tokens, MaskPlan};
use crate::modal_input::{clip_modalities, patchify, Branch, ChannelMap, MultimodalSample, Stream, StreamProjection};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};

use blocks::{DecoderStreamBlock, EncoderBlock, Linear, Norm};

/// Prefix shared by every decoder parameter name.
pub const DECODER_PREFIX: &str = "decoder.";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub channels: ChannelMap,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            patch_size: 4,
            encoder_dim: 64,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
            channels: ChannelMap::default(),
        }
    }

    /// ViT-L sized encoder with the two-block decoder.
    pub fn large() -> Self {
        ModelConfig {
            patch_size: 16,
            encoder_dim: 1024,
            encoder_depth: 24,
            encoder_heads: 16,
            decoder_dim: 768,
            decoder_depth: 2,
            decoder_heads: 16,
            mlp_ratio: 4,
            channels: ChannelMap::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.patch_size > 0, "patch_size must be positive"),
            (self.encoder_depth >= 1, "encoder_depth must be at least 1"),
            (self.decoder_depth >= 1, "decoder_depth must be at least 1"),
            (self.mlp_ratio >= 1, "mlp_ratio must be at least 1"),
            (
                self.encoder_heads > 0 && self.encoder_dim % self.encoder_heads == 0,
                "encoder_dim must be divisible by encoder_heads",
            ),
            (
                self.decoder_heads > 0 && self.decoder_dim % self.decoder_heads == 0,
                "decoder_dim must be divisible by decoder_heads",
            ),
            (self.encoder_dim % 4 == 0, "encoder_dim must be a multiple of 4"),
            (self.decoder_dim % 4 == 0, "decoder_dim must be a multiple of 4"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::contract(msg));
            }
        }
        self.channels.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.insert("patch_size", self.patch_size);
        m.insert("encoder_dim", self.encoder_dim);
        m.insert("encoder_depth", self.encoder_depth);
        m.insert("encoder_heads", self.encoder_heads);
        m.insert("decoder_dim", self.decoder_dim);
        m.insert("decoder_depth", self.decoder_depth);
        m.insert("decoder_heads", self.decoder_heads);
        m.insert("mlp_ratio", self.mlp_ratio);
        m.insert(
            "channels",
            self.channels.0.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
        );
        m
    }

    /// Reads the keys written by [`ModelConfig::to_kv`]; missing keys keep
    /// the values of `base`.
    pub fn from_kv(m: &KvMap, base: &ModelConfig) -> Result<Self> {
        let mut c = base.clone();
        let fields: [(&str, &mut usize); 8] = [
            ("patch_size", &mut c.patch_size),
            ("encoder_dim", &mut c.encoder_dim),
            ("encoder_depth", &mut c.encoder_depth),
            ("encoder_heads", &mut c.encoder_heads),
            ("decoder_dim", &mut c.decoder_dim),
            ("decoder_depth", &mut c.decoder_depth),
            ("decoder_heads", &mut c.decoder_heads),
            ("mlp_ratio", &mut c.mlp_ratio),
        ];
        for (key, slot) in fields {
            if let Some(v) = m.parse_opt(key)? {
                *slot = v;
            }
        }
        if let Some(text) = m.get("channels") {
            let vals: Vec<usize> = text
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("channels: cannot parse {text:?}")))?;
            c.channels = ChannelMap(
                vals.try_into()
                    .map_err(|_| Error::Format("channels: expected six counts".into()))?,
            );
        }
        c.validate()?;
        Ok(c)
    }

    /// Name and shape of every parameter, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, dd, p2) = (self.encoder_dim, self.decoder_dim, self.patch_size * self.patch_size);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let linear = |push: &mut dyn FnMut(String, Vec<usize>), name: &str, i: usize, o: usize| {
            push(format!("{name}.weight"), vec![i, o]);
            push(format!("{name}.bias"), vec![o]);
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), name: &str, n: usize| {
            push(format!("{name}.gamma"), vec![n]);
            push(format!("{name}.beta"), vec![n]);
        };
        for s in Stream::ALL {
            let c = self.channels.get(s);
            linear(&mut push, &format!("patch_embed.{}", s.name()), (c + 1) * p2, d);
            push(format!("avail_embed.{}", s.name()), vec![d]);
        }
        push("encoder.type_embed.optical".into(), vec![d]);
        push("encoder.type_embed.aux".into(), vec![d]);
        for i in 0..self.encoder_depth {
            let b = format!("encoder.blocks.{i}");
            norm(&mut push, &format!("{b}.norm1"), d);
            linear(&mut push, &format!("{b}.attn.qkv"), d, 3 * d);
            linear(&mut push, &format!("{b}.attn.proj"), d, d);
            norm(&mut push, &format!("{b}.norm2"), d);
            linear(&mut push, &format!("{b}.mlp.fc1"), d, self.mlp_ratio * d);
            linear(&mut push, &format!("{b}.mlp.fc2"), self.mlp_ratio * d, d);
        }
        norm(&mut push, "decoder.embed.norm", d);
        linear(&mut push, "decoder.embed", d, dd);
        for side in STREAM_SIDES {
            push(format!("decoder.mask_token.{side}"), vec![dd]);
        }
        for i in 0..self.decoder_depth {
            for side in STREAM_SIDES {
                let b = format!("decoder.blocks.{i}.{side}");
                norm(&mut push, &format!("{b}.norm1"), dd);
                linear(&mut push, &format!("{b}.self_attn.qkv"), dd, 3 * dd);
                linear(&mut push, &format!("{b}.self_attn.proj"), dd, dd);
                norm(&mut push, &format!("{b}.norm2"), dd);
                norm(&mut push, &format!("{b}.norm_context"), dd);
                linear(&mut push, &format!("{b}.cross_attn.q"), dd, dd);
                linear(&mut push, &format!("{b}.cross_attn.kv"), dd, 2 * dd);
                linear(&mut push, &format!("{b}.cross_attn.proj"), dd, dd);
                norm(&mut push, &format!("{b}.norm3"), dd);
                linear(&mut push, &format!("{b}.mlp.fc1"), dd, self.mlp_ratio * dd);
                linear(&mut push, &format!("{b}.mlp.fc2"), self.mlp_ratio * dd, dd);
            }
        }
        for side in STREAM_SIDES {
            norm(&mut push, &format!("decoder.norm.{side}"), dd);
        }
        for s in Stream::ALL {
            linear(&mut push, &format!("decoder.head.{}", s.name()), dd, self.channels.get(s) * p2);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn num_encoder_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .filter(|(n, _)| !n.starts_with(DECODER_PREFIX))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

const STREAM_SIDES: [&str; 2] = ["optical", "aux"];

fn side_index(b: Branch) -> usize {
    match b {
        Branch::Optical => 0,
        Branch::Auxiliary => 1,
    }
}

const INIT_STD: f64 = 0.02;

/// Fresh parameters: truncated normal (std 0.02, cut at two std) for
/// weights and embeddings, zeros for biases and norm shifts, ones for norm
/// scales.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut store = ParamStore::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") || name.ends_with(".beta") {
            vec![0.0; n]
        } else if name.ends_with(".gamma") {
            vec![1.0; n]
        } else {
            (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v;
                    }
                })
                .collect()
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Keeps only the parameters the encoder needs.
pub fn encoder_only(params: &ParamStore) -> ParamStore {
    let mut p = params.clone();
    p.retain(|n| !n.starts_with(DECODER_PREFIX));
    p
}

/// Which positional branches are added to the patch tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeOptions {
    /// Add the geographic embedding for samples that carry a geotransform.
    pub geo: bool,
    pub bounds: MercatorBounds,
}

impl Default for PeOptions {
    fn default() -> Self {
        PeOptions {
            geo: true,
            bounds: MercatorBounds::default(),
        }
    }
}

impl PeOptions {
    pub fn absolute_only() -> Self {
        PeOptions {
            geo: false,
            ..Self::default()
        }
    }
}

/// Masking used by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Masking {
    /// Draw optical and auxiliary plans from `(seed, epoch, batch)`.
    Random {
        ratio: f64,
        seed: u64,
        epoch: usize,
        batch: usize,
    },
    /// Use the given `[optical, auxiliary]` plans.
    Plans(Box<[MaskPlan; 2]>),
}

/// Patch tokens with positional encodings, before masking.
#[derive(Clone, Debug)]
pub struct EmbeddedTokens {
    /// `[optical, auxiliary]`, each `[B, L, D]`.
    pub tokens: [Var; 2],
    pub grid: PatchGrid,
    pub availability: Vec<[bool; 6]>,
}

/// Patchifies the (clipped) batch and adds absolute and, per sample,
/// geographic positional encodings.
pub fn embed_tokens(
    tape: &mut Tape,
    binds: &Bindings,
    config: &ModelConfig,
    batch: &[MultimodalSample],
    pe: &PeOptions,
) -> Result<EmbeddedTokens> {
    let clipped: Vec<MultimodalSample> = batch.iter().map(clip_modalities).collect();
    if clipped.iter().any(|s| s.channels != config.channels) {
        return Err(Error::contract("sample channel map differs from the model's"));
    }
    let mut projections = Vec::with_capacity(6);
    for s in Stream::ALL {
        projections.push(StreamProjection {
            weight: binds.get(&format!("patch_embed.{}.weight", s.name()))?,
            bias: binds.get(&format!("patch_embed.{}.bias", s.name()))?,
            availability: binds.get(&format!("avail_embed.{}", s.name()))?,
        });
    }
    let projections: [StreamProjection; 6] = projections.try_into().expect("six streams");
    let bundle = patchify(tape, &clipped, config.patch_size, &projections)?;
    let grid = bundle.grid;
    let d = config.encoder_dim;
    let abs = absolute_2d_sincos(&grid, d)?;
    let mut geo = Vec::with_capacity(clipped.len());
    if pe.geo {
        pe.bounds.validate()?;
        for s in &clipped {
            geo.push(chip_geo_embedding(s.geotransform.as_ref(), &grid, &pe.bounds, d)?);
        }
    }
    let pos = if geo.iter().any(Option::is_some) {
        let mut data = Vec::with_capacity(clipped.len() * grid.len() * d);
        for g in &geo {
            match g {
                Some(g) => data.extend(abs.data().iter().zip(g.data()).map(|(a, b)| a + b)),
                None => data.extend_from_slice(abs.data()),
            }
        }
        Tensor::new(vec![clipped.len(), grid.len(), d], data)?
    } else {
        abs
    };
    let pos = tape.constant(pos);
    let optical = tape.add(bundle.optical, pos)?;
    let aux = tape.add(bundle.aux, pos)?;
    Ok(EmbeddedTokens {
        tokens: [optical, aux],
        grid,
        availability: bundle.availability,
    })
}

/// Runs the shared encoder over visible optical and auxiliary tokens
/// (`[B, Vo, D]`, `[B, Va, D]`) as one sequence and splits the result back.
///
/// `depth` below `config.encoder_depth` runs only the first blocks; zero
/// blocks leaves the tokens plus their stream-type embedding.
pub fn encode(
    tape: &mut Tape,
    binds: &Bindings,
    config: &ModelConfig,
    visible: [Var; 2],
    depth: usize,
) -> Result<[Var; 2]> {
    let d = config.encoder_dim;
    for v in visible {
        let s = tape.shape(v);
        if s.len() != 3 || s[2] != d {
            return Err(Error::Shape {
                op: "encode",
                lhs: s.to_vec(),
                rhs: vec![d],
            });
        }
    }
    let n_opt = tape.shape(visible[0])[1];
    let n_all = n_opt + tape.shape(visible[1])[1];
    let opt_t = binds.get("encoder.type_embed.optical")?;
    let aux_t = binds.get("encoder.type_embed.aux")?;
    let opt = tape.add(visible[0], opt_t)?;
    let aux = tape.add(visible[1], aux_t)?;
    let mut x = tape.concat(&[opt, aux], 1)?;
    for i in 0..depth.min(config.encoder_depth) {
        let block = EncoderBlock::bind(binds, &format!("encoder.blocks.{i}"), config.encoder_heads)?;
        x = block.forward(tape, x)?;
    }
    let opt = tape.slice(x, 1, 0, n_opt)?;
    let aux = tape.slice(x, 1, n_opt, n_all)?;
    Ok([opt, aux])
}

/// Options of [`decode`] used to probe the decoder in isolation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecodeHooks {
    /// Skip cross-attention so the two streams decode independently.
    pub disable_cross_attention: bool,
}

/// Reconstructs every group from encoder latents: `[B, L, c P P]` per
/// stream, indexed by [`Stream::index`].
pub fn decode(
    tape: &mut Tape,
    binds: &Bindings,
    config: &ModelConfig,
    latents: [Var; 2],
    plans: &[MaskPlan; 2],
    grid: &PatchGrid,
    hooks: DecodeHooks,
) -> Result<[Var; 6]> {
    let dd = config.decoder_dim;
    let embed_norm = Norm::bind(binds, "decoder.embed.norm")?;
    let embed = Linear::bind(binds, "decoder.embed")?;
    let pos = tape.constant(absolute_2d_sincos(grid, dd)?);
    let mut h = [latents[0]; 2];
    for (i, side) in STREAM_SIDES.iter().enumerate() {
        if plans[i].len() != grid.len() {
            return Err(Error::contract(format!(
                "plan covers {} tokens, grid has {}",
                plans[i].len(),
                grid.len()
            )));
        }
        let z = embed_norm.forward(tape, latents[i])?;
        let z = embed.forward(tape, z)?;
        let token = binds.get(&format!("decoder.mask_token.{side}"))?;
        let z = restore_with_mask_tokens(tape, z, &plans[i], token)?;
        h[i] = tape.add(z, pos)?;
    }
    for b in 0..config.decoder_depth {
        let blocks = [
            DecoderStreamBlock::bind(binds, &format!("decoder.blocks.{b}.optical"), config.decoder_heads)?,
            DecoderStreamBlock::bind(binds, &format!("decoder.blocks.{b}.aux"), config.decoder_heads)?,
        ];
        let s0 = blocks[0].self_step(tape, h[0])?;
        let s1 = blocks[1].self_step(tape, h[1])?;
        let (c0, c1) = if hooks.disable_cross_attention {
            (s0, s1)
        } else {
            (blocks[0].cross_step(tape, s0, s1)?, blocks[1].cross_step(tape, s1, s0)?)
        };
        h = [blocks[0].mlp_step(tape, c0)?, blocks[1].mlp_step(tape, c1)?];
    }
    for (i, side) in STREAM_SIDES.iter().enumerate() {
        h[i] = Norm::bind(binds, &format!("decoder.norm.{side}"))?.forward(tape, h[i])?;
    }
    let mut out = Vec::with_capacity(6);
    for s in Stream::ALL {
        let head = Linear::bind(binds, &format!("decoder.head.{}", s.name()))?;
        out.push(head.forward(tape, h[side_index(s.branch())])?);
    }
    Ok(out.try_into().expect("six heads"))
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    /// Reconstructions `[B, L, c P P]`, indexed by [`Stream::index`].
    pub recon: [Var; 6],
    /// `[optical, auxiliary]`.
    pub plans: [MaskPlan; 2],
    /// Encoder outputs of the visible tokens, `[optical, auxiliary]`.
    pub latents: [Var; 2],
    pub grid: PatchGrid,
    pub availability: Vec<[bool; 6]>,
}

/// Clip, patchify, add positional encodings, mask each stream, encode and
/// decode.
pub fn forward_pretrain(
    tape: &mut Tape,
    binds: &Bindings,
    config: &ModelConfig,
    batch: &[MultimodalSample],
    masking: &Masking,
    pe: &PeOptions,
) -> Result<PretrainOutput> {
    forward_pretrain_with(tape, binds, config, batch, masking, pe, DecodeHooks::default())
}

pub fn forward_pretrain_with(
    tape: &mut Tape,
    binds: &Bindings,
    config: &ModelConfig,
    batch: &[MultimodalSample],
    masking: &Masking,
    pe: &PeOptions,
    hooks: DecodeHooks,
) -> Result<PretrainOutput> {
    config.validate()?;
    let emb = embed_tokens(tape, binds, config, batch, pe)?;
    let plans = match masking {
        Masking::Random {
            ratio,
            seed,
            epoch,
            batch,
        } => batch_plans(emb.grid.len(), *ratio, *seed, *epoch, *batch)?,
        Masking::Plans(p) => (**p).clone(),
    };
    let visible = [
        apply_mask(tape, emb.tokens[0], &plans[0])?,
        apply_mask(tape, emb.tokens[1], &plans[1])?,
    ];
    let latents = encode(tape, binds, config, visible, config.encoder_depth)?;
    let recon = decode(tape, binds, config, latents, &plans, &emb.grid, hooks)?;
    Ok(PretrainOutput {
        recon,
        plans,
        latents,
        grid: emb.grid,
        availability: emb.availability,
    })
}

/// Unmasked encoder outputs mean-pooled over all tokens of both streams:
/// `[B, encoder_dim]`.
pub fn encoder_features(
    tape: &mut Tape,
    binds: &Bindings,
    config: &ModelConfig,
    batch: &[MultimodalSample],
    pe: &PeOptions,
) -> Result<Var> {
    config.validate()?;
    let emb = embed_tokens(tape, binds, config, batch, pe)?;
    let latents = encode(tape, binds, config, emb.tokens, config.encoder_depth)?;
    let all = tape.concat(&latents, 1)?;
    tape.mean_axis(all, 1)
}
