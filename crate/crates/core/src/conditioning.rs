//! Conditioning pathways: discrete attribute embeddings (the caption
//! stand-in), sinusoidal size/crop embeddings, and the stage-1 condition
//! dropout policy used both for training robustness and CFG.

use crate::autograd::Value;
use crate::nn::{sinusoidal_embedding, Ctx, Init, Linear, VarStore};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CondError {
    #[error("attribute id {id} out of vocabulary {vocab} in slot {slot}")]
    OutOfVocab { slot: usize, id: usize, vocab: usize },
    #[error("batch size mismatch: {0} vs {1}")]
    BatchMismatch(usize, usize),
}

/// Original-size and crop coordinates fed alongside the timestep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeCrop {
    pub height: u32,
    pub width: u32,
    pub top: u32,
    pub left: u32,
}

impl SizeCrop {
    pub fn full(res: usize) -> Self {
        Self { height: res as u32, width: res as u32, top: 0, left: 0 }
    }
}

/// Learned embedding tables: one per attribute slot plus a distinct learned
/// null (unconditional) vector, and a projection for the size/crop
/// sinusoids. Output vectors add onto the time embedding.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    slot_tables: Vec<String>,
    vocab_sizes: Vec<usize>,
    null_name: String,
    sizecrop_proj: Linear,
    pub dim: usize,
    sin_dim: usize,
}

impl ConditionEncoder {
    pub fn new<R: Rng>(
        vs: &mut VarStore,
        rng: &mut R,
        prefix: &str,
        vocab_sizes: &[usize],
        dim: usize,
    ) -> Self {
        let sin_dim = 16;
        let mut slot_tables = Vec::new();
        for (i, &v) in vocab_sizes.iter().enumerate() {
            let name = format!("{}.slot{}", prefix, i);
            vs.insert(&name, Tensor::randn_std(&[v, dim], 0.1, rng));
            slot_tables.push(name);
        }
        let null_name = format!("{}.null", prefix);
        vs.insert(&null_name, Tensor::randn_std(&[1, dim], 0.1, rng));
        let sizecrop_proj =
            Linear::new(vs, rng, &format!("{}.sizecrop", prefix), 4 * sin_dim, dim, Init::Linear);
        Self { slot_tables, vocab_sizes: vocab_sizes.to_vec(), null_name, sizecrop_proj, dim, sin_dim }
    }

    /// Per-sample attribute embedding: sum of slot embeddings, or the
    /// learned null vector for `None` entries.
    pub fn embed_attributes(
        &self,
        cx: &mut Ctx,
        attrs: &[Option<[usize; 3]>],
    ) -> Result<Value, CondError> {
        let n = attrs.len();
        for ids in attrs.iter().flatten() {
            for (slot, (&id, &vocab)) in ids.iter().zip(&self.vocab_sizes).enumerate() {
                if id >= vocab {
                    return Err(CondError::OutOfVocab { slot, id, vocab });
                }
            }
        }
        // Conditional rows take slot sums; null rows take the null vector.
        // Both paths stay on the tape so their tables keep receiving grads.
        let mut keep = Tensor::zeros(&[n, self.dim]);
        for (i, a) in attrs.iter().enumerate() {
            if a.is_some() {
                for j in 0..self.dim {
                    keep.data_mut()[i * self.dim + j] = 1.0;
                }
            }
        }
        let drop = keep.map(|v| 1.0 - v);
        let mut sum: Option<Value> = None;
        for (slot, table) in self.slot_tables.iter().enumerate() {
            let idx: Vec<usize> = attrs.iter().map(|a| a.map_or(0, |ids| ids[slot])).collect();
            let tv = cx.param(table);
            let rows = cx.tape.gather_rows(tv, idx);
            sum = Some(match sum {
                Some(s) => cx.tape.add(s, rows),
                None => rows,
            });
        }
        let slot_sum = sum.expect("at least one slot");
        let null = cx.param(&self.null_name);
        let null_rows = cx.tape.gather_rows(null, vec![0; n]);
        let keep_v = cx.input(keep);
        let drop_v = cx.input(drop);
        let kept = cx.tape.mul(slot_sum, keep_v);
        let dropped = cx.tape.mul(null_rows, drop_v);
        Ok(cx.tape.add(kept, dropped))
    }

    /// Sinusoidal embedding of (height, width, top, left), projected to the
    /// time-embedding width.
    pub fn embed_size_crop(&self, cx: &mut Ctx, entries: &[SizeCrop]) -> Value {
        let feats = size_crop_features(entries, self.sin_dim);
        let v = cx.input(feats);
        self.sizecrop_proj.forward(cx, v)
    }
}

/// Raw (pre-projection) sinusoidal features for size/crop scalars.
pub fn size_crop_features(entries: &[SizeCrop], sin_dim: usize) -> Tensor {
    let n = entries.len();
    let mut out = Tensor::zeros(&[n, 4 * sin_dim]);
    for (i, sc) in entries.iter().enumerate() {
        for (k, scalar) in
            [sc.height as f64, sc.width as f64, sc.top as f64, sc.left as f64].into_iter().enumerate()
        {
            let e = sinusoidal_embedding(&[scalar], sin_dim);
            out.data_mut()[i * 4 * sin_dim + k * sin_dim..i * 4 * sin_dim + (k + 1) * sin_dim]
                .copy_from_slice(e.data());
        }
    }
    out
}

/// Stage-1 condition dropout: independently with probability `rate`, the
/// attributes fall back to the null token and the pose raster becomes a
/// zero image. The attribute draw happens first.
pub fn dropout_conditions_stage1<R: Rng>(
    attrs: Option<[usize; 3]>,
    pose: &Tensor,
    rate: f64,
    rng: &mut R,
) -> (Option<[usize; 3]>, Tensor) {
    assert!((0.0..=1.0).contains(&rate), "dropout rate {} outside [0, 1]", rate);
    let drop_attrs = rng.gen_bool(rate);
    let drop_pose = rng.gen_bool(rate);
    (
        if drop_attrs { None } else { attrs },
        if drop_pose { Tensor::zeros(pose.shape()) } else { pose.clone() },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (VarStore, ConditionEncoder) {
        let mut vs = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ConditionEncoder::new(&mut vs, &mut rng, "cond", &[6, 8, 4], 32);
        (vs, enc)
    }

    #[test]
    fn null_embedding_is_stable_and_nonzero() {
        let (vs, enc) = encoder();
        let mut cx = Ctx::new(&vs);
        let a = enc.embed_attributes(&mut cx, &[None]).unwrap();
        let b = enc.embed_attributes(&mut cx, &[None]).unwrap();
        let (ta, tb) = (cx.tape.value(a).clone(), cx.tape.value(b).clone());
        assert_eq!(ta, tb);
        assert!(ta.max_abs() > 0.0, "null vector must be a learned non-zero vector");
    }

    #[test]
    fn same_attrs_identical_and_slot_delta_is_additive() {
        let (vs, enc) = encoder();
        let mut cx = Ctx::new(&vs);
        let x = enc.embed_attributes(&mut cx, &[Some([1, 2, 3])]).unwrap();
        let y = enc.embed_attributes(&mut cx, &[Some([1, 2, 3])]).unwrap();
        assert_eq!(cx.tape.value(x), cx.tape.value(y));

        // Differ in one slot: the difference equals that slot's row delta.
        let z = enc.embed_attributes(&mut cx, &[Some([1, 5, 3])]).unwrap();
        let diff = cx.tape.value(x).sub(cx.tape.value(z));
        let table = vs.get("cond.slot1");
        let dim = enc.dim;
        for j in 0..dim {
            let expect = table.data()[2 * dim + j] - table.data()[5 * dim + j];
            assert!((diff.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_rejected() {
        let (vs, enc) = encoder();
        let mut cx = Ctx::new(&vs);
        let err = enc.embed_attributes(&mut cx, &[Some([0, 8, 0])]).unwrap_err();
        assert_eq!(err, CondError::OutOfVocab { slot: 1, id: 8, vocab: 8 });
    }

    #[test]
    fn size_crop_embedding_discriminates() {
        let (vs, enc) = encoder();
        let mut cx = Ctx::new(&vs);
        let a = enc.embed_size_crop(&mut cx, &[SizeCrop::full(48)]);
        let b = enc.embed_size_crop(&mut cx, &[SizeCrop::full(48)]);
        assert_eq!(cx.tape.value(a), cx.tape.value(b));
        let c = enc.embed_size_crop(&mut cx, &[SizeCrop::full(96)]);
        assert!(cx.tape.value(a).sub(cx.tape.value(c)).max_abs() > 0.0);
    }

    #[test]
    fn sinusoid_of_zero_scalar() {
        let f = size_crop_features(&[SizeCrop { height: 0, width: 0, top: 0, left: 0 }], 8);
        for k in 0..4 {
            for j in 0..4 {
                assert_eq!(f.data()[k * 8 + j], 0.0, "sin(0) = 0");
                assert_eq!(f.data()[k * 8 + 4 + j], 1.0, "cos(0) = 1");
            }
        }
    }

    #[test]
    fn dropout_rate_zero_and_one() {
        let pose = Tensor::full(&[3, 4, 4], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, p) = dropout_conditions_stage1(Some([1, 2, 3]), &pose, 0.0, &mut rng);
        assert_eq!(a, Some([1, 2, 3]));
        assert_eq!(p, pose);
        let (a, p) = dropout_conditions_stage1(Some([1, 2, 3]), &pose, 1.0, &mut rng);
        assert_eq!(a, None);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_monte_carlo_rate_and_independence() {
        let pose = Tensor::full(&[1, 2, 2], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 10_000;
        let (mut na, mut np, mut nboth) = (0usize, 0usize, 0usize);
        for _ in 0..trials {
            let (a, p) = dropout_conditions_stage1(Some([0, 0, 0]), &pose, 0.15, &mut rng);
            let da = a.is_none();
            let dp = p.data()[0] == 0.0;
            na += da as usize;
            np += dp as usize;
            nboth += (da && dp) as usize;
        }
        let (fa, fp) = (na as f64 / trials as f64, np as f64 / trials as f64);
        assert!((fa - 0.15).abs() < 0.01, "attr drop rate {}", fa);
        assert!((fp - 0.15).abs() < 0.01, "pose drop rate {}", fp);
        // Correlation between the two indicators.
        let fboth = nboth as f64 / trials as f64;
        let cov = fboth - fa * fp;
        let corr = cov / ((fa * (1.0 - fa)).sqrt() * (fp * (1.0 - fp)).sqrt());
        assert!(corr.abs() < 0.05, "correlation {}", corr);
    }
}
