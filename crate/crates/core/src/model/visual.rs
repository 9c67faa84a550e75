//! Patch transformer producing the visual descriptor `h_v`.

use serde::{Deserialize, Serialize};

use super::{dropout, layer_norm, linear, Bound, Ctx, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self { image_side: 32, patch_side: 8, embed_dim: 64, layers: 2, heads: 4, mlp_ratio: 4, dropout: 0.0 }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} is not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("mlp_ratio must be >= 1 and dropout in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_side / self.patch_side).pow(2)
    }

    pub fn patch_width(&self) -> usize {
        self.patch_side * self.patch_side * 3
    }
}

pub fn init_visual(cfg: &ViTConfig, store: &mut ParamStore, init: &mut Init) {
    let d = cfg.embed_dim;
    store.insert("visual.embed", init.glorot(cfg.patch_width(), d));
    store.insert("visual.cls", init.normal(&[d], 0.02));
    store.insert("visual.pos", init.normal(&[cfg.num_patches() + 1, d], 0.02));
    for l in 0..cfg.layers {
        let p = format!("visual.block{l}");
        init.layer_norm(store, &format!("{p}.ln1"), d);
        for m in ["q", "k", "v", "o"] {
            init.linear(store, &format!("{p}.attn.{m}"), d, d);
        }
        init.layer_norm(store, &format!("{p}.ln2"), d);
        init.linear(store, &format!("{p}.fc1"), d, d * cfg.mlp_ratio);
        init.linear(store, &format!("{p}.fc2"), d * cfg.mlp_ratio, d);
    }
    init.layer_norm(store, "visual.ln", d);
}

/// `[B, N, P*P*3] → [B, N+1, D]`: class token first, then the projected
/// patches, all plus positional embeddings.
pub fn patch_embed(tape: &mut Tape, b: &Bound, cfg: &ViTConfig, patches: Var) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    if s.len() != 3 || s[1] != cfg.num_patches() || s[2] != cfg.patch_width() {
        return Err(Error::dim(format!(
            "patch tensor {s:?} does not match [B, {}, {}]",
            cfg.num_patches(),
            cfg.patch_width()
        )));
    }
    let d = cfg.embed_dim;
    let projected = tape.matmul(patches, b.get("visual.embed")?)?;
    let cls = tape.broadcast_to(b.get("visual.cls")?, &[s[0], 1, d])?;
    let seq = tape.concat(&[cls, projected], 1)?;
    tape.add(seq, b.get("visual.pos")?)
}

/// Pre-LN multi-head self-attention and GELU MLP, each with a residual.
pub fn encoder_block(tape: &mut Tape, b: &Bound, cfg: &ViTConfig, layer: usize, z: Var, ctx: &mut Ctx) -> Result<Var> {
    let p = format!("visual.block{layer}");
    let x = layer_norm(tape, b, &format!("{p}.ln1"), z)?;
    let q = linear(tape, b, &format!("{p}.attn.q"), x)?;
    let k = linear(tape, b, &format!("{p}.attn.k"), x)?;
    let v = linear(tape, b, &format!("{p}.attn.v"), x)?;
    let a = tape.attention(q, k, v, cfg.heads)?;
    let a = linear(tape, b, &format!("{p}.attn.o"), a)?;
    let a = dropout(tape, a, cfg.dropout, ctx)?;
    let z = tape.add(z, a)?;

    let x = layer_norm(tape, b, &format!("{p}.ln2"), z)?;
    let h = linear(tape, b, &format!("{p}.fc1"), x)?;
    let h = tape.gelu(h);
    let h = linear(tape, b, &format!("{p}.fc2"), h)?;
    let h = dropout(tape, h, cfg.dropout, ctx)?;
    tape.add(z, h)
}

/// Returns the final-normalised token sequence `[B, N+1, D]` and the class
/// token row `h_v: [B, D]`.
pub fn encode(tape: &mut Tape, b: &Bound, cfg: &ViTConfig, patches: Var, ctx: &mut Ctx) -> Result<(Var, Var)> {
    let mut z = patch_embed(tape, b, cfg, patches)?;
    for l in 0..cfg.layers {
        z = encoder_block(tape, b, cfg, l, z, ctx)?;
    }
    let tokens = layer_norm(tape, b, "visual.ln", z)?;
    let batch = tape.shape(tokens)[0];
    let cls = tape.narrow(tokens, 1, 0, 1)?;
    let h_v = tape.reshape(cls, &[batch, cfg.embed_dim])?;
    Ok((tokens, h_v))
}

/// Single-image convenience: `h_v` as a plain tensor of length D.
pub fn encode_one(store: &ParamStore, cfg: &ViTConfig, patches: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bound::frozen(&mut tape, store);
    let p = tape.constant(patches.clone());
    let (_, h_v) = encode(&mut tape, &b, cfg, p, &mut Ctx::eval())?;
    Ok(Tensor::vector(tape.data(h_v).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tape::LN_EPS;

    fn cfg(layers: usize) -> ViTConfig {
        ViTConfig { image_side: 8, patch_side: 4, embed_dim: 8, layers, heads: 2, mlp_ratio: 2, dropout: 0.0 }
    }

    fn store(cfg: &ViTConfig, seed: u64) -> ParamStore {
        let mut rng = rng_for(seed, &[]);
        let mut s = ParamStore::new();
        init_visual(cfg, &mut s, &mut Init { rng: &mut rng });
        s
    }

    fn random_patches(cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, &[9]);
        Init { rng: &mut rng }.normal(&[1, cfg.num_patches(), cfg.patch_width()], 1.0)
    }

    #[test]
    fn default_sequence_length() {
        let c = ViTConfig::default();
        assert_eq!(c.num_patches() + 1, 17);
    }

    #[test]
    fn zero_embedding_gives_positions() {
        let c = cfg(0);
        let mut s = store(&c, 1);
        *s.get_mut("visual.embed").unwrap() = Tensor::zeros(&[c.patch_width(), c.embed_dim]);
        *s.get_mut("visual.cls").unwrap() = Tensor::zeros(&[c.embed_dim]);
        let mut tape = Tape::new();
        let b = Bound::frozen(&mut tape, &s);
        let p = tape.constant(Tensor::zeros(&[1, c.num_patches(), c.patch_width()]));
        let z = patch_embed(&mut tape, &b, &c, p).unwrap();
        assert_eq!(tape.data(z), s.get("visual.pos").unwrap().data());
    }

    #[test]
    fn zeroed_output_maps_make_block_identity() {
        let c = cfg(1);
        let mut s = store(&c, 2);
        for n in ["attn.o.w", "fc2.w"] {
            let t = s.get_mut(&format!("visual.block0.{n}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let b = Bound::frozen(&mut tape, &s);
        let z = tape.constant(random_patches(&cfg(0), 3).reshaped(vec![1, 4, 48]).unwrap());
        let z = tape.narrow(z, 2, 0, 8).unwrap();
        let out = encoder_block(&mut tape, &b, &c, 0, z, &mut Ctx::eval()).unwrap();
        assert_eq!(tape.data(out), tape.data(z));
    }

    #[test]
    fn empty_stack_normalises_class_row() {
        let c = cfg(0);
        let s = store(&c, 4);
        let h = encode_one(&s, &c, &random_patches(&c, 1)).unwrap();
        let cls = s.get("visual.cls").unwrap().data();
        let pos = &s.get("visual.pos").unwrap().data()[..c.embed_dim];
        let row: Vec<f64> = cls.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
        for (got, x) in h.data().iter().zip(&row) {
            assert!((got - (x - mean) / (var + LN_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_patch_change_moves_h_v() {
        let c = cfg(2);
        let s = store(&c, 5);
        let a = random_patches(&c, 1);
        let mut b = a.clone();
        b.data_mut()[c.patch_width() * 3] += 1.0;
        let (ha, hb) = (encode_one(&s, &c, &a).unwrap(), encode_one(&s, &c, &b).unwrap());
        assert_eq!(ha.numel(), c.embed_dim);
        assert_ne!(ha, hb);
    }

    #[test]
    fn rejects_mismatched_patches() {
        let c = cfg(1);
        let s = store(&c, 5);
        assert!(matches!(encode_one(&s, &c, &Tensor::zeros(&[1, 3, 48])), Err(Error::Dimension(_))));
    }
}
