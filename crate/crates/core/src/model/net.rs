use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{normal_tensor, Linear, LoraLinear, Norm};
use super::params::{Bound, ParamKind, ParamStore, TuneScope};
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};

/// Architecture of the toy ViT-style depth network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub use_pos_embed: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch: 8,
            embed_dim: 64,
            blocks: 2,
            mlp_hidden: 128,
            decoder_hidden: 64,
            use_pos_embed: true,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl NetConfig {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.embed_dim == 0 || self.blocks == 0 {
            return Err(Error::InvalidArgument("empty network".into()));
        }
        Ok(())
    }

    /// Flat encoding used by checkpoints.
    pub(crate) fn to_values(&self) -> Vec<f64> {
        vec![
            self.height as f64,
            self.width as f64,
            self.patch as f64,
            self.embed_dim as f64,
            self.blocks as f64,
            self.mlp_hidden as f64,
            self.decoder_hidden as f64,
            if self.use_pos_embed { 1.0 } else { 0.0 },
            self.lora_rank as f64,
            self.lora_alpha,
        ]
    }

    pub(crate) fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 10 || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Format("bad network config record".into()));
        }
        Ok(Self {
            height: v[0] as usize,
            width: v[1] as usize,
            patch: v[2] as usize,
            embed_dim: v[3] as usize,
            blocks: v[4] as usize,
            mlp_hidden: v[5] as usize,
            decoder_hidden: v[6] as usize,
            use_pos_embed: v[7] != 0.0,
            lora_rank: v[8] as usize,
            lora_alpha: v[9],
        })
    }
}

/// Pre-norm transformer block with single-head attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub qkv: LoraLinear,
    pub proj: LoraLinear,
    pub norm2: Norm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Block {
    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, dim: usize) -> Result<Var> {
        let h = self.norm1.forward(tape, bound, x)?;
        let qkv = self.qkv.forward(tape, bound, h)?;
        let q = tape.narrow_cols(qkv, 0, dim)?;
        let k = tape.narrow_cols(qkv, dim, dim)?;
        let v = tape.narrow_cols(qkv, 2 * dim, dim)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dim as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.matmul(attn, v)?;
        let out = self.proj.forward(tape, bound, ctx)?;
        let x = tape.add(x, out)?;

        let h = self.norm2.forward(tape, bound, x)?;
        let m = self.mlp_in.forward(tape, bound, h)?;
        let m = tape.gelu(m);
        let m = self.mlp_out.forward(tape, bound, m)?;
        tape.add(x, m)
    }
}

/// Student depth network: patch embedding, attention blocks and a per-token
/// linear decoder producing a strictly positive disparity map.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentNet {
    pub config: NetConfig,
    pub store: ParamStore,
    pub patch_embed: LoraLinear,
    pub pos_embed: crate::model::ParamId,
    pub blocks: Vec<Block>,
    pub norm_out: Norm,
    pub decoder_hidden: Linear,
    pub decoder_out: Linear,
}

/// `softplus⁻¹(1)`: the decoder starts out predicting unit disparity.
const UNIT_DISPARITY_BIAS: f64 = 0.541_324_854_612_918_1;

impl StudentNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = config.patch;
        let d = config.embed_dim;
        let (r, a) = (config.lora_rank, config.lora_alpha);
        let enc = ParamKind::EncoderBase;

        let patch_embed =
            LoraLinear::new(&mut store, "patch_embed", enc, p * p * 3, d, r, a, &mut rng)?;
        let pos_embed = store.add(
            "pos_embed",
            enc,
            normal_tensor(&mut rng, &[config.tokens(), d], 0.02),
        );
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let name = |s: &str| format!("blocks.{b}.{s}");
            blocks.push(Block {
                norm1: Norm::new(&mut store, &name("norm1"), enc, d),
                qkv: LoraLinear::new(&mut store, &name("qkv"), enc, d, 3 * d, r, a, &mut rng)?,
                proj: LoraLinear::new(&mut store, &name("proj"), enc, d, d, r, a, &mut rng)?,
                norm2: Norm::new(&mut store, &name("norm2"), enc, d),
                mlp_in: Linear::new(&mut store, &name("mlp_in"), enc, d, config.mlp_hidden, &mut rng),
                mlp_out: Linear::new(&mut store, &name("mlp_out"), enc, config.mlp_hidden, d, &mut rng),
            });
        }
        let norm_out = Norm::new(&mut store, "norm_out", enc, d);
        let dec = ParamKind::DecoderBase;
        let decoder_hidden =
            Linear::new(&mut store, "decoder.hidden", dec, d, config.decoder_hidden, &mut rng);
        let decoder_out =
            Linear::new(&mut store, "decoder.out", dec, config.decoder_hidden, p * p, &mut rng);
        store.set(decoder_out.bias, Tensor::full(&[p * p], UNIT_DISPARITY_BIAS));

        Ok(Self {
            config,
            store,
            patch_embed,
            pos_embed,
            blocks,
            norm_out,
            decoder_hidden,
            decoder_out,
        })
    }

    /// Every adapter-carrying layer, in a fixed order.
    pub fn lora_layers(&self) -> Vec<&LoraLinear> {
        let mut out = vec![&self.patch_embed];
        for b in &self.blocks {
            out.push(&b.qkv);
            out.push(&b.proj);
        }
        out
    }

    fn lora_layers_mut(&mut self) -> Vec<&mut LoraLinear> {
        let mut out = vec![&mut self.patch_embed];
        for b in &mut self.blocks {
            out.push(&mut b.qkv);
            out.push(&mut b.proj);
        }
        out
    }

    /// Fresh adapters on every LoRA layer: `U ~ N(0, 0.02²)`, `V = 0`.
    pub fn init_lora(&mut self, rank: usize, lora_alpha: f64, seed: u64) -> Result<()> {
        self.init_lora_with(rank, lora_alpha, 0.02, seed)
    }

    /// As [`StudentNet::init_lora`] with a custom std for `U`.
    pub fn init_lora_with(&mut self, rank: usize, lora_alpha: f64, u_std: f64, seed: u64) -> Result<()> {
        if let Some(l) = self
            .lora_layers()
            .into_iter()
            .find(|l| rank == 0 || rank > l.d_in.min(l.d_out) / 2)
        {
            return Err(Error::InvalidArgument(format!(
                "LoRA rank {rank} too large for a {}x{} layer",
                l.d_in, l.d_out
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = std::mem::take(&mut self.store);
        for layer in self.lora_layers_mut() {
            layer.reset_adapter(&mut store, rank, lora_alpha, u_std, &mut rng)?;
        }
        self.store = store;
        self.config.lora_rank = rank;
        self.config.lora_alpha = lora_alpha;
        Ok(())
    }

    pub fn adapter_param_count(&self) -> usize {
        self.lora_layers().iter().map(|l| l.adapter_params()).sum()
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let c = &self.config;
        let (h, w) = match image.shape() {
            [h, w, 3] => (*h, *w),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "student_forward",
                    lhs: other.to_vec(),
                    rhs: vec![c.height, c.width, 3],
                })
            }
        };
        if h % c.patch != 0 || w % c.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} is not divisible by patch size {}",
                c.patch
            )));
        }
        if c.use_pos_embed && (h, w) != (c.height, c.width) {
            return Err(Error::ShapeMismatch {
                op: "student_forward",
                lhs: image.shape().to_vec(),
                rhs: vec![c.height, c.width, 3],
            });
        }
        Ok((h, w))
    }

    /// Disparity map `[H×W]` for `image[H×W×3]` on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: &Tensor) -> Result<Var> {
        let (h, w) = self.check_image(image)?;
        let p = self.config.patch;
        let tokens = (h / p) * (w / p);
        let feat = p * p * 3;

        let img = tape.constant(image.clone());
        let patches = tape.gather(img, &patch_indices(h, w, p))?;
        let patches = tape.reshape(patches, vec![tokens, feat])?;
        let mut x = self.patch_embed.forward(tape, bound, patches)?;
        if self.config.use_pos_embed {
            x = tape.add(x, bound.var(self.pos_embed))?;
        }
        for block in &self.blocks {
            x = block.forward(tape, bound, x, self.config.embed_dim)?;
        }
        let x = self.norm_out.forward(tape, bound, x)?;
        let y = self.decoder_hidden.forward(tape, bound, x)?;
        let y = tape.gelu(y);
        let y = self.decoder_out.forward(tape, bound, y)?;
        let y = tape.softplus(y);
        let flat = tape.reshape(y, vec![tokens * p * p])?;
        let pixels = tape.gather(flat, &unpatch_indices(h, w, p))?;
        tape.reshape(pixels, vec![h, w])
    }

    /// Forward pass with no trainable parameters.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, TuneScope::None);
        let out = self.forward(&mut tape, &bound, image)?;
        Ok(tape.value(out).clone())
    }
}

/// Gather order turning `[H×W×3]` into `[tokens × P·P·3]` rows.
fn patch_indices(h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * 3);
    for ty in 0..gh {
        for tx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let pix = (ty * p + dy) * w + tx * p + dx;
                    idx.extend([pix * 3, pix * 3 + 1, pix * 3 + 2]);
                }
            }
        }
    }
    idx
}

/// Gather order placing per-token `P×P` tiles back onto the `H×W` grid.
fn unpatch_indices(h: usize, w: usize, p: usize) -> Vec<usize> {
    let gw = w / p;
    (0..h * w)
        .map(|pix| {
            let (y, x) = (pix / w, pix % w);
            let token = (y / p) * gw + x / p;
            token * p * p + (y % p) * p + x % p
        })
        .collect()
}

/// Exponential-moving-average copy of a student network.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherNet {
    net: StudentNet,
    pub ema_alpha: f64,
}

impl TeacherNet {
    /// Deep copy of `student`; the teacher is never bound with trainable
    /// parameters.
    pub fn from_student(student: &StudentNet, ema_alpha: f64) -> Self {
        Self {
            net: student.clone(),
            ema_alpha,
        }
    }

    pub fn net(&self) -> &StudentNet {
        &self.net
    }

    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        self.net.predict(image)
    }

    /// `θ̃ ← α·θ̃ + (1 − α)·θ` for every parameter. Entries already equal
    /// are left alone, so frozen weights stay bit-identical.
    pub fn ema_update(&mut self, student: &StudentNet) -> Result<()> {
        self.net.store.check_compatible(&student.store)?;
        let a = self.ema_alpha;
        for ((_, t), (_, s)) in self.net.store.iter_mut().zip(student.store.iter()) {
            for (tv, sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
                if *tv != *sv {
                    *tv = a * *tv + (1.0 - a) * sv;
                }
            }
        }
        Ok(())
    }
}

pub fn clone_to_teacher(student: &StudentNet, ema_alpha: f64) -> TeacherNet {
    TeacherNet::from_student(student, ema_alpha)
}

pub fn ema_update(teacher: &mut TeacherNet, student: &StudentNet) -> Result<()> {
    teacher.ema_update(student)
}
