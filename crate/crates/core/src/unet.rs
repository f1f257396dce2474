//! UNet with per-modality structural expert branches around a shared trunk.
//!
//! Each modality owns replicated input/output blocks (`conv_in`, the first
//! down block(s), the last up block(s), `conv_out`) while everything in
//! between — deeper levels, the middle block, the time/conditioning
//! pathway — is stored once and runs once per forward pass. Branch features
//! are fused coordinate-wise before entering the trunk, and the trunk's
//! output is distributed identically to every branch's up path. Each
//! branch's skip connections never cross into another branch.
//!
//! Parameter names are namespaced `shared/*` and `branch/<modality>/*`,
//! which is also the checkpoint group layout.

use crate::autograd::{PadMode, Value};
use crate::conditioning::{CondError, ConditionEncoder, SizeCrop};
use crate::nn::{
    sinusoidal_embedding, AttnBlock, Conv2d, Ctx, GroupNorm, Init, ResBlock, TimeEmbed, VarStore,
};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown modality {0}")]
    UnknownModality(String),
    #[error("missing modality {0}")]
    MissingModality(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Cond(#[from] CondError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Mean,
    Sum,
}

/// How many down/up blocks are replicated per branch, beyond the always
/// replicated `conv_in`/`conv_out` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateDepth {
    /// Only `conv_in`/`conv_out` (the "half block" ablation).
    ConvOnly,
    /// `conv_in`, first down block, last up block, `conv_out` — the default.
    OneBlock,
    /// First two down blocks and last two up blocks.
    TwoBlocks,
}

impl ReplicateDepth {
    pub fn levels(&self) -> usize {
        match self {
            ReplicateDepth::ConvOnly => 0,
            ReplicateDepth::OneBlock => 1,
            ReplicateDepth::TwoBlocks => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub modalities: Vec<ModalitySpec>,
    pub replicate: ReplicateDepth,
    pub fusion: Fusion,
}

impl BranchConfig {
    /// RGB + depth + normal with the default replication set.
    pub fn rgbdn() -> Self {
        Self {
            modalities: vec![
                ModalitySpec { name: "rgb".into(), channels: 3 },
                ModalitySpec { name: "depth".into(), channels: 1 },
                ModalitySpec { name: "normal".into(), channels: 3 },
            ],
            replicate: ReplicateDepth::OneBlock,
            fusion: Fusion::Mean,
        }
    }

    pub fn rgb_only() -> Self {
        Self {
            modalities: vec![ModalitySpec { name: "rgb".into(), channels: 3 }],
            replicate: ReplicateDepth::OneBlock,
            fusion: Fusion::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub branch: BranchConfig,
    pub width: usize,
    pub multipliers: Vec<usize>,
    /// Pose raster channels concatenated to every branch input; 0 disables
    /// pose conditioning.
    pub pose_channels: usize,
    pub attr_vocab: Vec<usize>,
    pub attention_at_bottom: bool,
}

impl UNetConfig {
    pub fn toy(branch: BranchConfig, width: usize, multipliers: Vec<usize>) -> Self {
        Self {
            branch,
            width,
            multipliers,
            pose_channels: 3,
            attr_vocab: crate::synthworld::Attrs::vocab_sizes().to_vec(),
            attention_at_bottom: true,
        }
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.width
    }

    pub fn levels(&self) -> usize {
        self.multipliers.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.multipliers.iter().map(|m| m * self.width).collect()
    }
}

struct BranchBlocks {
    conv_in: Conv2d,
    /// Replicated encoder levels, shallow to deep: (resblock, downsample).
    enc: Vec<(ResBlock, Conv2d)>,
    /// Replicated decoder levels, deep to shallow: (resblock, upsample
    /// conv for levels above 0).
    dec: Vec<(ResBlock, Option<Conv2d>)>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

pub struct StructuralUNet {
    pub cfg: UNetConfig,
    branches: Vec<BranchBlocks>,
    /// Shared encoder levels d..L: (resblock, downsample except at bottom).
    enc_shared: Vec<(ResBlock, Option<Conv2d>)>,
    mid_res1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid_res2: ResBlock,
    /// Shared decoder levels L-1 down to d: (resblock, upsample for i > 0).
    dec_shared: Vec<(ResBlock, Option<Conv2d>)>,
    time_embed: TimeEmbed,
    pub cond: ConditionEncoder,
}

/// Everything a forward pass takes. `t` is one timestep per batch element,
/// shared by every branch of that element.
pub struct ForwardInput<'a> {
    pub noisy: &'a BTreeMap<String, Tensor>,
    pub t: &'a [usize],
    pub attrs: &'a [Option<[usize; 3]>],
    pub size_crop: &'a [SizeCrop],
    pub pose: Option<&'a Tensor>,
    pub pad_mode: PadMode,
}

/// Build the network, registering parameters into a fresh store. Weight
/// init is deterministic in `seed`.
pub fn build_model(cfg: &UNetConfig, seed: u64) -> Result<(StructuralUNet, VarStore), UNetError> {
    if cfg.branch.modalities.is_empty() {
        return Err(UNetError::Config("at least one modality required".into()));
    }
    let levels = cfg.levels();
    if levels < 2 {
        return Err(UNetError::Config("need at least 2 resolution levels".into()));
    }
    let d = cfg.branch.replicate.levels();
    if d >= levels {
        return Err(UNetError::Config(format!(
            "replicate depth {} must stay below level count {}",
            d, levels
        )));
    }
    let mut names = std::collections::BTreeSet::new();
    for m in &cfg.branch.modalities {
        if m.channels == 0 {
            return Err(UNetError::Config(format!("modality {} has zero channels", m.name)));
        }
        if !names.insert(m.name.clone()) {
            return Err(UNetError::Config(format!("duplicate modality {}", m.name)));
        }
    }

    let mut vs = VarStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.channels();
    let temb = cfg.temb_dim();

    // Shared trunk first so its init does not depend on the branch list.
    let time_embed = TimeEmbed::new(&mut vs, &mut rng, "shared/time_embed", temb, temb);
    let cond = ConditionEncoder::new(&mut vs, &mut rng, "shared/cond", &cfg.attr_vocab, temb);
    let mut enc_shared = Vec::new();
    for i in d..levels {
        let cin = if i == 0 { c[0] } else { c[i - 1] };
        let res = ResBlock::new(&mut vs, &mut rng, &format!("shared/enc{}", i), cin, c[i], temb);
        let down = (i < levels - 1).then(|| {
            Conv2d::new(&mut vs, &mut rng, &format!("shared/down{}", i), c[i], c[i], 3, 2, 1, Init::He)
        });
        enc_shared.push((res, down));
    }
    let cb = c[levels - 1];
    let mid_res1 = ResBlock::new(&mut vs, &mut rng, "shared/mid/res1", cb, cb, temb);
    let mid_attn = cfg
        .attention_at_bottom
        .then(|| AttnBlock::new(&mut vs, &mut rng, "shared/mid/attn", cb));
    let mid_res2 = ResBlock::new(&mut vs, &mut rng, "shared/mid/res2", cb, cb, temb);
    let mut dec_shared = Vec::new();
    for i in (d..levels).rev() {
        let cout = if i == 0 { c[0] } else { c[i - 1] };
        let res =
            ResBlock::new(&mut vs, &mut rng, &format!("shared/dec{}", i), 2 * c[i], cout, temb);
        let up = (i > 0).then(|| {
            Conv2d::new(&mut vs, &mut rng, &format!("shared/up{}", i), cout, cout, 3, 1, 1, Init::He)
        });
        dec_shared.push((res, up));
    }

    let mut branches = Vec::new();
    for m in &cfg.branch.modalities {
        let p = format!("branch/{}", m.name);
        let conv_in = Conv2d::new(
            &mut vs,
            &mut rng,
            &format!("{}/conv_in", p),
            m.channels + cfg.pose_channels,
            c[0],
            3,
            1,
            1,
            Init::He,
        );
        let mut enc = Vec::new();
        for i in 0..d {
            let cin = if i == 0 { c[0] } else { c[i - 1] };
            let res = ResBlock::new(&mut vs, &mut rng, &format!("{}/enc{}", p, i), cin, c[i], temb);
            let down =
                Conv2d::new(&mut vs, &mut rng, &format!("{}/down{}", p, i), c[i], c[i], 3, 2, 1, Init::He);
            enc.push((res, down));
        }
        let mut dec = Vec::new();
        for i in (0..d).rev() {
            let cout = if i == 0 { c[0] } else { c[i - 1] };
            let res =
                ResBlock::new(&mut vs, &mut rng, &format!("{}/dec{}", p, i), 2 * c[i], cout, temb);
            let up = (i > 0).then(|| {
                Conv2d::new(&mut vs, &mut rng, &format!("{}/up{}", p, i), cout, cout, 3, 1, 1, Init::He)
            });
            dec.push((res, up));
        }
        let out_norm = GroupNorm::new(&mut vs, &format!("{}/out_norm", p), c[0]);
        let conv_out = Conv2d::new(
            &mut vs,
            &mut rng,
            &format!("{}/conv_out", p),
            c[0],
            m.channels,
            3,
            1,
            1,
            Init::Zero,
        );
        branches.push(BranchBlocks { conv_in, enc, dec, out_norm, conv_out });
    }

    Ok((
        StructuralUNet {
            cfg: cfg.clone(),
            branches,
            enc_shared,
            mid_res1,
            mid_attn,
            mid_res2,
            dec_shared,
            time_embed,
            cond,
        },
        vs,
    ))
}

impl StructuralUNet {
    /// Combined time + attribute + size/crop embedding, `[N, temb_dim]`.
    pub fn embed_conditions(
        &self,
        cx: &mut Ctx,
        t: &[usize],
        attrs: &[Option<[usize; 3]>],
        size_crop: &[SizeCrop],
    ) -> Result<Value, UNetError> {
        if t.len() != attrs.len() || t.len() != size_crop.len() {
            return Err(UNetError::Shape(format!(
                "t/attrs/size_crop lengths differ: {}/{}/{}",
                t.len(),
                attrs.len(),
                size_crop.len()
            )));
        }
        let tvals: Vec<f64> = t.iter().map(|&x| x as f64).collect();
        let sin = sinusoidal_embedding(&tvals, self.cfg.temb_dim());
        let sin_v = cx.input(sin);
        let temb = self.time_embed.forward(cx, sin_v);
        let attr = self.cond.embed_attributes(cx, attrs)?;
        let sc = self.cond.embed_size_crop(cx, size_crop);
        let e = cx.tape.add(temb, attr);
        Ok(cx.tape.add(e, sc))
    }

    /// Joint forward over all branches; returns one prediction per modality
    /// with its input shape. Inputs are keyed by modality name, so map
    /// ordering never matters.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        input: ForwardInput,
    ) -> Result<BTreeMap<String, Value>, UNetError> {
        let temb = self.embed_conditions(cx, input.t, input.attrs, input.size_crop)?;
        let tembs: BTreeMap<String, Value> = self
            .cfg
            .branch
            .modalities
            .iter()
            .map(|m| (m.name.clone(), temb))
            .collect();
        self.forward_impl(cx, input.noisy, &tembs, temb, input.t.len(), input.pose, input.pad_mode)
    }

    /// Forward with independently sampled timesteps per modality (the
    /// different-timesteps ablation). Branch blocks receive their own time
    /// embedding; the shared trunk receives the branch mean.
    pub fn forward_per_modality_t(
        &self,
        cx: &mut Ctx,
        noisy: &BTreeMap<String, Tensor>,
        t_map: &BTreeMap<String, Vec<usize>>,
        attrs: &[Option<[usize; 3]>],
        size_crop: &[SizeCrop],
        pose: Option<&Tensor>,
    ) -> Result<BTreeMap<String, Value>, UNetError> {
        let mods = &self.cfg.branch.modalities;
        let n = attrs.len();
        let mut tembs = BTreeMap::new();
        let mut trunk: Option<Value> = None;
        for m in mods {
            let ts = t_map
                .get(&m.name)
                .ok_or_else(|| UNetError::MissingModality(format!("timesteps for {}", m.name)))?;
            if ts.len() != n {
                return Err(UNetError::Shape("timestep batch length mismatch".into()));
            }
            let e = self.embed_conditions(cx, ts, attrs, size_crop)?;
            tembs.insert(m.name.clone(), e);
            trunk = Some(match trunk {
                Some(t) => cx.tape.add(t, e),
                None => e,
            });
        }
        let mut trunk = trunk.expect("at least one modality");
        if mods.len() > 1 {
            trunk = cx.tape.scale(trunk, 1.0 / mods.len() as f64);
        }
        self.forward_impl(cx, noisy, &tembs, trunk, n, pose, PadMode::Zeros)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_impl(
        &self,
        cx: &mut Ctx,
        noisy: &BTreeMap<String, Tensor>,
        branch_tembs: &BTreeMap<String, Value>,
        trunk_temb: Value,
        n: usize,
        pose_in: Option<&Tensor>,
        pad: PadMode,
    ) -> Result<BTreeMap<String, Value>, UNetError> {
        let cfg = &self.cfg;
        let mods = &cfg.branch.modalities;
        for key in noisy.keys() {
            if !mods.iter().any(|m| &m.name == key) {
                return Err(UNetError::UnknownModality(key.clone()));
            }
        }
        let mut spatial: Option<(usize, usize)> = None;
        for m in mods {
            let x = noisy
                .get(&m.name)
                .ok_or_else(|| UNetError::MissingModality(m.name.clone()))?;
            let s = x.shape();
            if s.len() != 4 || s[0] != n || s[1] != m.channels {
                return Err(UNetError::Shape(format!(
                    "modality {} expected [{}, {}, H, W], got {:?}",
                    m.name, n, m.channels, s
                )));
            }
            match spatial {
                None => spatial = Some((s[2], s[3])),
                Some(hw) => {
                    if hw != (s[2], s[3]) {
                        return Err(UNetError::Shape("modalities disagree on H x W".into()));
                    }
                }
            }
        }
        let (h, w) = spatial.expect("at least one modality");
        let down_factor = 1 << (cfg.levels() - 1);
        if h % down_factor != 0 || w % down_factor != 0 {
            return Err(UNetError::Shape(format!(
                "spatial size {}x{} not divisible by {}",
                h, w, down_factor
            )));
        }
        let pose = match (cfg.pose_channels, pose_in) {
            (0, _) => None,
            (pc, Some(p)) => {
                if p.shape() != [n, pc, h, w] {
                    return Err(UNetError::Shape(format!(
                        "pose raster expected [{}, {}, {}, {}], got {:?}",
                        n,
                        pc,
                        h,
                        w,
                        p.shape()
                    )));
                }
                Some(cx.input(p.clone()))
            }
            (_, None) => return Err(UNetError::MissingModality("pose raster".into())),
        };
        // Per-branch encoders.
        let mut branch_skips: Vec<Vec<Value>> = Vec::with_capacity(mods.len());
        let mut fused: Option<Value> = None;
        for (bi, m) in mods.iter().enumerate() {
            let blocks = &self.branches[bi];
            let temb = branch_tembs[&m.name];
            let x = cx.input(noisy[&m.name].clone());
            let x = match pose {
                Some(p) => cx.tape.concat_chan(x, p),
                None => x,
            };
            let mut hcur = blocks.conv_in.forward(cx, x, pad);
            let mut skips = Vec::new();
            for (res, down) in &blocks.enc {
                hcur = res.forward(cx, hcur, temb, pad);
                skips.push(hcur);
                hcur = down.forward(cx, hcur, pad);
            }
            branch_skips.push(skips);
            fused = Some(match fused {
                Some(f) => cx.tape.add(f, hcur),
                None => hcur,
            });
        }
        let mut hcur = fused.expect("at least one branch");
        if cfg.branch.fusion == Fusion::Mean && mods.len() > 1 {
            hcur = cx.tape.scale(hcur, 1.0 / mods.len() as f64);
        }

        // Shared trunk.
        let mut shared_skips = Vec::new();
        for (res, down) in &self.enc_shared {
            hcur = res.forward(cx, hcur, trunk_temb, pad);
            shared_skips.push(hcur);
            if let Some(dc) = down {
                hcur = dc.forward(cx, hcur, pad);
            }
        }
        hcur = self.mid_res1.forward(cx, hcur, trunk_temb, pad);
        if let Some(attn) = &self.mid_attn {
            hcur = attn.forward(cx, hcur, pad);
        }
        hcur = self.mid_res2.forward(cx, hcur, trunk_temb, pad);
        for (k, (res, up)) in self.dec_shared.iter().enumerate() {
            let skip = shared_skips[shared_skips.len() - 1 - k];
            let cat = cx.tape.concat_chan(hcur, skip);
            hcur = res.forward(cx, cat, trunk_temb, pad);
            if let Some(uc) = up {
                let upsampled = cx.tape.upsample_nearest_2x(hcur);
                hcur = uc.forward(cx, upsampled, pad);
            }
        }
        let trunk_out = hcur;

        // Distribute the trunk output to every branch's up path.
        let mut outputs = BTreeMap::new();
        for (bi, m) in mods.iter().enumerate() {
            let blocks = &self.branches[bi];
            let temb = branch_tembs[&m.name];
            let mut hb = trunk_out;
            for (k, (res, up)) in blocks.dec.iter().enumerate() {
                let skip = branch_skips[bi][blocks.dec.len() - 1 - k];
                let cat = cx.tape.concat_chan(hb, skip);
                hb = res.forward(cx, cat, temb, pad);
                if let Some(uc) = up {
                    let upsampled = cx.tape.upsample_nearest_2x(hb);
                    hb = uc.forward(cx, upsampled, pad);
                }
            }
            let normed = blocks.out_norm.forward(cx, hb);
            let act = cx.tape.silu(normed);
            let out = blocks.conv_out.forward(cx, act, pad);
            outputs.insert(m.name.clone(), out);
        }
        Ok(outputs)
    }
}

/// Shared vs per-branch parameter accounting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub shared: usize,
    pub per_branch: BTreeMap<String, usize>,
    pub total: usize,
    /// True when every parameter lives in exactly one named slot and every
    /// branch prefix holds an identical parameter count.
    pub single_storage: bool,
}

pub fn branch_param_report(net: &StructuralUNet, vs: &VarStore) -> ParamReport {
    let shared = vs.param_count_matching(|k| k.starts_with("shared/"));
    let mut per_branch = BTreeMap::new();
    for m in &net.cfg.branch.modalities {
        let prefix = format!("branch/{}/", m.name);
        per_branch.insert(m.name.clone(), vs.param_count_matching(|k| k.starts_with(&prefix)));
    }
    let total = vs.param_count();
    let accounted: usize = shared + per_branch.values().sum::<usize>();
    // Branch I/O channel counts differ, so replicated totals may differ by
    // conv_in/conv_out rows; storage uniqueness is what we assert.
    let single_storage = accounted == total;
    ParamReport { shared, per_branch, total, single_storage }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Ctx;

    fn toy_cfg(modalities: BranchConfig, width: usize) -> UNetConfig {
        UNetConfig::toy(modalities, width, vec![1, 2, 4])
    }

    /// Replace every zero-initialized tensor with random values so tests
    /// exercise real signal paths (fresh nets output zeros by design).
    fn randomize_zero_params(vs: &mut VarStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = vs.names().cloned().collect();
        for name in names {
            let t = vs.get_mut(&name);
            if t.max_abs() == 0.0 {
                *t = Tensor::randn_std(t.shape(), 0.05, &mut rng);
            }
        }
    }

    fn forward_once(
        net: &StructuralUNet,
        vs: &VarStore,
        res: usize,
        seed: u64,
    ) -> BTreeMap<String, Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2;
        let mut noisy = BTreeMap::new();
        for m in &net.cfg.branch.modalities {
            noisy.insert(m.name.clone(), Tensor::randn(&[n, m.channels, res, res], &mut rng));
        }
        let pose = Tensor::randn(&[n, 3, res, res], &mut rng);
        let mut cx = Ctx::new(vs);
        let out = net
            .forward(
                &mut cx,
                ForwardInput {
                    noisy: &noisy,
                    t: &[10, 500],
                    attrs: &[Some([0, 1, 2]), None],
                    size_crop: &[SizeCrop::full(res); 2],
                    pose: Some(&pose),
                    pad_mode: PadMode::Zeros,
                },
            )
            .unwrap();
        out.into_iter().map(|(k, v)| (k, cx.tape.value(v).clone())).collect()
    }

    #[test]
    fn output_shapes_match_inputs() {
        let (net, vs) = build_model(&toy_cfg(BranchConfig::rgbdn(), 8), 0).unwrap();
        let out = forward_once(&net, &vs, 16, 1);
        assert_eq!(out["rgb"].shape(), &[2, 3, 16, 16]);
        assert_eq!(out["depth"].shape(), &[2, 1, 16, 16]);
        assert_eq!(out["normal"].shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn zero_conv_out_means_zero_outputs() {
        let (net, vs) = build_model(&toy_cfg(BranchConfig::rgbdn(), 8), 0).unwrap();
        // conv_out weights are zero-initialized, so fresh nets emit zeros
        // for any input — the final projection is linear.
        let out = forward_once(&net, &vs, 16, 2);
        for (name, t) in out {
            assert_eq!(t.max_abs(), 0.0, "branch {} non-zero at init", name);
        }
    }

    #[test]
    fn param_counts_scale_only_per_branch() {
        let cfg3 = toy_cfg(BranchConfig::rgbdn(), 8);
        let (net3, vs3) = build_model(&cfg3, 0).unwrap();
        let rep3 = branch_param_report(&net3, &vs3);

        let mut cfg1 = cfg3.clone();
        cfg1.branch.modalities = vec![ModalitySpec { name: "rgb".into(), channels: 3 }];
        let (net1, vs1) = build_model(&cfg1, 0).unwrap();
        let rep1 = branch_param_report(&net1, &vs1);

        assert_eq!(rep3.shared, rep1.shared, "shared trunk must not depend on branch count");
        assert!(rep3.single_storage && rep1.single_storage);

        // Adding a 4th branch with rgb-like channels adds exactly one more
        // replicated set.
        let mut cfg4 = cfg3.clone();
        cfg4.branch.modalities.push(ModalitySpec { name: "extra".into(), channels: 3 });
        let (net4, vs4) = build_model(&cfg4, 0).unwrap();
        let rep4 = branch_param_report(&net4, &vs4);
        assert_eq!(rep4.shared, rep3.shared);
        assert_eq!(
            rep4.total - rep3.total,
            rep3.per_branch["rgb"],
            "4th branch must cost exactly one replicated block set"
        );
    }

    #[test]
    fn replication_set_matches_contract() {
        let (_, vs) = build_model(&toy_cfg(BranchConfig::rgbdn(), 8), 0).unwrap();
        for m in ["rgb", "depth", "normal"] {
            for block in ["conv_in", "enc0", "down0", "dec0", "conv_out", "out_norm"] {
                assert!(
                    vs.names().any(|n| n.starts_with(&format!("branch/{}/{}", m, block))),
                    "missing branch/{}/{}",
                    m,
                    block
                );
            }
            // Level-1 blocks must NOT be replicated at the default depth.
            assert!(!vs.names().any(|n| n.starts_with(&format!("branch/{}/enc1", m))));
            assert!(!vs.names().any(|n| n.starts_with(&format!("branch/{}/dec1", m))));
        }
        for block in ["enc1", "enc2", "dec1", "dec2", "mid", "up1", "down1"] {
            assert!(
                vs.names().any(|n| n.starts_with(&format!("shared/{}", block))),
                "missing shared/{}",
                block
            );
        }
    }

    #[test]
    fn modality_key_order_is_irrelevant_and_unknown_keys_rejected() {
        let (net, mut vs) = build_model(&toy_cfg(BranchConfig::rgbdn(), 8), 3).unwrap();
        randomize_zero_params(&mut vs, 97);
        let a = forward_once(&net, &vs, 16, 7);
        // BTreeMap iteration is sorted regardless of insertion order; feed
        // the same tensors through a map built in reverse order.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 2;
        let mut noisy_rev = BTreeMap::new();
        let mut tensors = Vec::new();
        for m in &net.cfg.branch.modalities {
            tensors.push((m.name.clone(), Tensor::randn(&[n, m.channels, 16, 16], &mut rng)));
        }
        for (k, v) in tensors.into_iter().rev() {
            noisy_rev.insert(k, v);
        }
        let pose = Tensor::randn(&[n, 3, 16, 16], &mut rng);
        let mut cx = Ctx::new(&vs);
        let out = net
            .forward(
                &mut cx,
                ForwardInput {
                    noisy: &noisy_rev,
                    t: &[10, 500],
                    attrs: &[Some([0, 1, 2]), None],
                    size_crop: &[SizeCrop::full(16); 2],
                    pose: Some(&pose),
                    pad_mode: PadMode::Zeros,
                },
            )
            .unwrap();
        for (k, v) in out {
            assert_eq!(cx.tape.value(v), &a[&k], "modality {} differs", k);
        }

        let mut bad = BTreeMap::new();
        bad.insert("rgb".to_string(), Tensor::zeros(&[1, 3, 16, 16]));
        bad.insert("bogus".to_string(), Tensor::zeros(&[1, 3, 16, 16]));
        let mut cx = Ctx::new(&vs);
        let err = net.forward(
            &mut cx,
            ForwardInput {
                noisy: &bad,
                t: &[1],
                attrs: &[None],
                size_crop: &[SizeCrop::full(16)],
                pose: Some(&Tensor::zeros(&[1, 3, 16, 16])),
                pad_mode: PadMode::Zeros,
            },
        );
        assert!(matches!(err, Err(UNetError::UnknownModality(_))));
    }

    #[test]
    fn equal_weight_branches_with_equal_inputs_agree() {
        // Two branches with the same channel count; copy rgb's replicated
        // weights onto the twin, feed identical inputs: outputs must match.
        let mut cfg = toy_cfg(BranchConfig::rgbdn(), 8);
        cfg.branch.modalities = vec![
            ModalitySpec { name: "rgb".into(), channels: 3 },
            ModalitySpec { name: "twin".into(), channels: 3 },
        ];
        let (net, mut vs) = build_model(&cfg, 5).unwrap();
        randomize_zero_params(&mut vs, 99);
        let copy: Vec<(String, String)> = vs
            .names()
            .filter(|n| n.starts_with("branch/rgb/"))
            .map(|n| (n.clone(), n.replace("branch/rgb/", "branch/twin/")))
            .collect();
        for (src, dst) in copy {
            *vs.get_mut(&dst) = vs.get(&src).clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 3, 16, 16], &mut rng);
        let pose = Tensor::randn(&[2, 3, 16, 16], &mut rng);
        let mut noisy = BTreeMap::new();
        noisy.insert("rgb".to_string(), x.clone());
        noisy.insert("twin".to_string(), x);
        let mut cx = Ctx::new(&vs);
        let out = net
            .forward(
                &mut cx,
                ForwardInput {
                    noisy: &noisy,
                    t: &[3, 800],
                    attrs: &[Some([1, 1, 1]), Some([2, 3, 0])],
                    size_crop: &[SizeCrop::full(16); 2],
                    pose: Some(&pose),
                    pad_mode: PadMode::Zeros,
                },
            )
            .unwrap();
        let rgb = cx.tape.value(out["rgb"]).clone();
        let twin = cx.tape.value(out["twin"]).clone();
        assert!(rgb.sub(&twin).max_abs() < 1e-12);
    }

    #[test]
    fn translation_equivariance_with_circular_padding() {
        let (net, mut vs) = build_model(&toy_cfg(BranchConfig::rgbdn(), 8), 11).unwrap();
        randomize_zero_params(&mut vs, 101);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let res = 16;
        let shift = 8;
        let mut noisy = BTreeMap::new();
        for m in &net.cfg.branch.modalities {
            noisy.insert(m.name.clone(), Tensor::randn(&[1, m.channels, res, res], &mut rng));
        }
        let pose = Tensor::randn(&[1, 3, res, res], &mut rng);

        let translate = |t: &Tensor| -> Tensor {
            let s = t.shape().to_vec();
            let (c, h, w) = (s[1], s[2], s[3]);
            let mut out = Tensor::zeros(&s);
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = ((y + h - shift) % h, (x + w - shift) % w);
                        out.data_mut()[ci * h * w + y * w + x] =
                            t.data()[ci * h * w + sy * w + sx];
                    }
                }
            }
            out
        };

        let run = |noisy: &BTreeMap<String, Tensor>, pose: &Tensor| -> BTreeMap<String, Tensor> {
            let mut cx = Ctx::new(&vs);
            let out = net
                .forward(
                    &mut cx,
                    ForwardInput {
                        noisy,
                        t: &[250],
                        attrs: &[Some([0, 0, 0])],
                        size_crop: &[SizeCrop::full(res)],
                        pose: Some(pose),
                        pad_mode: PadMode::Circular,
                    },
                )
                .unwrap();
            out.into_iter().map(|(k, v)| (k, cx.tape.value(v).clone())).collect()
        };

        let base = run(&noisy, &pose);
        let shifted: BTreeMap<String, Tensor> =
            noisy.iter().map(|(k, v)| (k.clone(), translate(v))).collect();
        let out_shifted = run(&shifted, &translate(&pose));
        for (k, v) in &base {
            let expect = translate(v);
            let got = &out_shifted[k];
            assert!(
                got.sub(&expect).max_abs() < 1e-4,
                "branch {} not equivariant: {}",
                k,
                got.sub(&expect).max_abs()
            );
        }
    }

    #[test]
    fn single_branch_equals_hand_composed_plain_unet() {
        // One modality: the branch/fusion/distribution machinery must
        // collapse to a plain UNet. The reference below walks the same
        // layers sequentially with no branch bookkeeping at all.
        let cfg = toy_cfg(BranchConfig::rgb_only(), 8);
        let (net, mut vs) = build_model(&cfg, 21).unwrap();
        randomize_zero_params(&mut vs, 103);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let res = 16;
        let x0 = Tensor::randn(&[2, 3, res, res], &mut rng);
        let pose = Tensor::randn(&[2, 3, res, res], &mut rng);
        let t = [37usize, 912];
        let attrs = [Some([2, 4, 1]), None];
        let sc = [SizeCrop::full(res); 2];

        let mut noisy = BTreeMap::new();
        noisy.insert("rgb".to_string(), x0.clone());
        let mut cx = Ctx::new(&vs);
        let out = net
            .forward(
                &mut cx,
                ForwardInput {
                    noisy: &noisy,
                    t: &t,
                    attrs: &attrs,
                    size_crop: &sc,
                    pose: Some(&pose),
                    pad_mode: PadMode::Zeros,
                },
            )
            .unwrap();
        let branched = cx.tape.value(out["rgb"]).clone();

        // Plain sequential reference with identical weights.
        let mut cx = Ctx::new(&vs);
        let pad = PadMode::Zeros;
        let temb = net.embed_conditions(&mut cx, &t, &attrs, &sc).unwrap();
        let xin = cx.input(x0);
        let pv = cx.input(pose);
        let cat = cx.tape.concat_chan(xin, pv);
        let b = &net.branches[0];
        let mut h = b.conv_in.forward(&mut cx, cat, pad);
        let mut skips = Vec::new();
        for (resb, down) in &b.enc {
            h = resb.forward(&mut cx, h, temb, pad);
            skips.push(h);
            h = down.forward(&mut cx, h, pad);
        }
        for (resb, down) in &net.enc_shared {
            h = resb.forward(&mut cx, h, temb, pad);
            skips.push(h);
            if let Some(d) = down {
                h = d.forward(&mut cx, h, pad);
            }
        }
        h = net.mid_res1.forward(&mut cx, h, temb, pad);
        if let Some(attn) = &net.mid_attn {
            h = attn.forward(&mut cx, h, pad);
        }
        h = net.mid_res2.forward(&mut cx, h, temb, pad);
        for (resb, up) in net.dec_shared.iter().chain(&b.dec) {
            let skip = skips.pop().unwrap();
            let c = cx.tape.concat_chan(h, skip);
            h = resb.forward(&mut cx, c, temb, pad);
            if let Some(u) = up {
                let us = cx.tape.upsample_nearest_2x(h);
                h = u.forward(&mut cx, us, pad);
            }
        }
        let n = b.out_norm.forward(&mut cx, h);
        let a = cx.tape.silu(n);
        let plain = b.conv_out.forward(&mut cx, a, pad);
        let plain = cx.tape.value(plain).clone();

        assert!(
            branched.sub(&plain).max_abs() < 1e-6,
            "single-branch forward deviates from the plain composition: {}",
            branched.sub(&plain).max_abs()
        );
    }

    #[test]
    fn empty_modalities_rejected() {
        let mut cfg = toy_cfg(BranchConfig::rgbdn(), 8);
        cfg.branch.modalities.clear();
        assert!(matches!(build_model(&cfg, 0), Err(UNetError::Config(_))));
    }
}
