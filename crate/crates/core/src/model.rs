//! Three-branch embedding network: a shared trunk feeds a global branch and
//! two spatial branches (height strips and width strips). The spatial
//! branches read the trunk maps through one shared self-alignment module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_last_axis, Axis, Group, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::init;
use crate::stn;

const STN_PREFIX: &str = "stn.loc";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SANetConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Widths of the trunk stages. The first stage keeps resolution, every
    /// later stage halves it.
    pub trunk_channels: Vec<usize>,
    /// Width of the conv block heading each branch.
    pub branch_channels: usize,
    pub embed_dim_global: usize,
    pub embed_dim_part: usize,
    /// Strips per spatial branch.
    pub parts_per_branch: usize,
    pub num_classes: usize,
    /// `false` gives the baseline: spatial branches read the trunk maps
    /// directly and no localisation parameters exist.
    pub stn_enabled: bool,
}

impl Default for SANetConfig {
    fn default() -> Self {
        SANetConfig {
            input_size: 64,
            in_channels: 3,
            trunk_channels: vec![16, 32, 64, 64],
            branch_channels: 128,
            embed_dim_global: 64,
            embed_dim_part: 64,
            parts_per_branch: 2,
            num_classes: 64,
            stn_enabled: true,
        }
    }
}

impl SANetConfig {
    /// Spatial extent of the trunk output.
    pub fn feature_extent(&self) -> usize {
        let mut s = self.input_size;
        for _ in 1..self.trunk_channels.len() {
            // 3x3, stride 2, pad 1 under the floor convention.
            s = (s + 2 - 3) / 2 + 1;
        }
        s
    }

    pub fn feature_channels(&self) -> usize {
        *self.trunk_channels.last().unwrap_or(&self.in_channels)
    }

    /// Length of the concatenated embedding, `d_g + 2·M·d_p`.
    pub fn embedding_dim(&self) -> usize {
        self.embed_dim_global + 2 * self.parts_per_branch * self.embed_dim_part
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("in_channels", self.in_channels),
            ("branch_channels", self.branch_channels),
            ("embed_dim_global", self.embed_dim_global),
            ("embed_dim_part", self.embed_dim_part),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid!("model config: {name} must be positive"));
        }
        if self.trunk_channels.is_empty() || self.trunk_channels.contains(&0) {
            return Err(invalid!("model config: trunk_channels must be non-empty and positive"));
        }
        let m = self.parts_per_branch;
        if m == 0 || m % 2 != 0 {
            return Err(invalid!("model config: parts_per_branch must be a positive even number, got {m}"));
        }
        let extent = self.feature_extent();
        if extent < 2 || extent % m != 0 {
            return Err(invalid!(
                "model config: feature map extent {extent} cannot be split into {m} equal strips"
            ));
        }
        Ok(())
    }
}

/// Branch features for one batch. With two strips per branch the height
/// strips are (top, down) and the width strips are (left, right).
pub struct BranchOutputs<'t, T: Real> {
    pub global: Var<'t, T>,
    pub height_parts: Vec<Var<'t, T>>,
    pub width_parts: Vec<Var<'t, T>>,
    /// `[N,6]` alignment parameters; identity rows when the module is off.
    pub theta: Var<'t, T>,
}

impl<'t, T: Real> BranchOutputs<'t, T> {
    pub fn parts_per_branch(&self) -> usize {
        self.height_parts.len()
    }
}

/// Everything the objective needs from one forward pass.
pub struct ForwardOutput<'t, T: Real> {
    pub branches: BranchOutputs<'t, T>,
    pub logits_global: Var<'t, T>,
    pub logits_height: Var<'t, T>,
    pub logits_width: Var<'t, T>,
    /// `[N, d_g + 2·M·d_p]` in the order global, height strips, width strips.
    pub embedding: Var<'t, T>,
}

/// Concatenates branch features in the fixed order (global, height strips,
/// width strips).
pub fn assemble_embedding<'t, T: Real>(b: &BranchOutputs<'t, T>) -> Result<Var<'t, T>> {
    let mut parts = vec![b.global];
    parts.extend(b.height_parts.iter().copied());
    parts.extend(b.width_parts.iter().copied());
    concat_last_axis(&parts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SANet<T: Real = f32> {
    pub config: SANetConfig,
    pub params: ParamStore<T>,
}

fn branch_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Height => "td",
        Axis::Width => "lr",
    }
}

impl<T: Real> SANet<T> {
    /// Fresh model with He-initialised weights drawn from `seed`.
    ///
    /// Localisation parameters are drawn last, so a baseline and an aligned
    /// model built from the same seed share every other parameter.
    pub fn new(config: SANetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let cb = config.branch_channels;

        let mut c_in = config.in_channels;
        for (i, &c) in config.trunk_channels.iter().enumerate() {
            ps.insert(format!("trunk.conv{i}.weight"), Group::Trunk, init::he_conv(&mut rng, c, c_in, 3, 3))?;
            ps.insert(format!("trunk.conv{i}.bias"), Group::Trunk, Tensor::zeros([c]))?;
            c_in = c;
        }

        ps.insert("global.conv.weight", Group::Head, init::he_conv(&mut rng, cb, c_in, 3, 3))?;
        ps.insert("global.conv.bias", Group::Head, Tensor::zeros([cb]))?;
        ps.insert("global.reduce.weight", Group::Head, init::he_linear(&mut rng, cb, config.embed_dim_global))?;
        ps.insert("global.reduce.bias", Group::Head, Tensor::zeros([config.embed_dim_global]))?;

        for axis in [Axis::Height, Axis::Width] {
            let b = branch_name(axis);
            ps.insert(format!("{b}.conv.weight"), Group::Head, init::he_conv(&mut rng, cb, c_in, 3, 3))?;
            ps.insert(format!("{b}.conv.bias"), Group::Head, Tensor::zeros([cb]))?;
            for k in 0..config.parts_per_branch {
                ps.insert(
                    format!("{b}.reduce{k}.weight"),
                    Group::Head,
                    init::he_linear(&mut rng, cb, config.embed_dim_part),
                )?;
                ps.insert(format!("{b}.reduce{k}.bias"), Group::Head, Tensor::zeros([config.embed_dim_part]))?;
            }
        }

        let part_width = config.parts_per_branch * config.embed_dim_part;
        for (name, width) in [
            ("global", config.embed_dim_global),
            ("td", part_width),
            ("lr", part_width),
        ] {
            // Classifier logits start small so the initial loss sits near ln C.
            let w = init::he_linear::<T, _>(&mut rng, width, config.num_classes).map(|v| v * T::lit(0.1));
            ps.insert(format!("cls.{name}.weight"), Group::Head, w)?;
            ps.insert(format!("cls.{name}.bias"), Group::Head, Tensor::zeros([config.num_classes]))?;
        }

        if config.stn_enabled {
            stn::init_localisation(&mut ps, STN_PREFIX, c_in, &mut rng)?;
        }
        Ok(SANet { config, params: ps })
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> SANet<U> {
        SANet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn p<'t>(&self, tape: &'t Tape<T>, name: &str) -> Result<Var<'t, T>> {
        tape.parameter(&self.params, name)
    }

    /// Shared trunk: `[N,3,S,S]` images to `[N,C,S/8,S/8]` maps. Each input
    /// channel is centred on its per-image mean first.
    pub fn trunk_forward<'t>(&self, tape: &'t Tape<T>, images: &Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = images.shape();
        let cfg = &self.config;
        if shape.len() != 4
            || shape[1] != cfg.in_channels
            || shape[2] != cfg.input_size
            || shape[3] != cfg.input_size
        {
            return Err(Error::InvalidShape {
                op: "trunk_forward",
                reason: format!(
                    "expected [N,{},{},{}] images, got {shape:?}",
                    cfg.in_channels, cfg.input_size, cfg.input_size
                ),
            });
        }
        let mut x = images.center_spatial()?;
        for i in 0..cfg.trunk_channels.len() {
            let stride = if i == 0 { 1 } else { 2 };
            let w = self.p(tape, &format!("trunk.conv{i}.weight"))?;
            let b = self.p(tape, &format!("trunk.conv{i}.bias"))?;
            x = x.conv2d(&w, &b, stride, 1)?.relu();
        }
        Ok(x)
    }

    /// Stride-2 conv block, pooling, and reduction to `d_g`.
    pub fn global_branch<'t>(&self, tape: &'t Tape<T>, feats: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = feats
            .conv2d(&self.p(tape, "global.conv.weight")?, &self.p(tape, "global.conv.bias")?, 2, 1)?
            .relu()
            .global_avg_pool()?;
        x.linear(&self.p(tape, "global.reduce.weight")?, &self.p(tape, "global.reduce.bias")?)
    }

    /// Self-aligned trunk maps and their `[N,6]` parameters. With the module
    /// disabled the maps pass through and the parameters are identity rows.
    pub fn align<'t>(&self, tape: &'t Tape<T>, feats: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if self.config.stn_enabled {
            stn::stn_forward(tape, &self.params, STN_PREFIX, feats)
        } else {
            let n = feats.shape()[0];
            let theta = tape.constant(stn::AffineTheta::identity(n).to_tensor()?);
            Ok((*feats, theta))
        }
    }

    /// Stride-1 conv block over (aligned) maps, `M` strips along `axis`,
    /// each pooled and reduced to `d_p`.
    pub fn spatial_branch<'t>(
        &self,
        tape: &'t Tape<T>,
        aligned: &Var<'t, T>,
        axis: Axis,
    ) -> Result<Vec<Var<'t, T>>> {
        let b = branch_name(axis);
        let x = aligned
            .conv2d(
                &self.p(tape, &format!("{b}.conv.weight"))?,
                &self.p(tape, &format!("{b}.conv.bias"))?,
                1,
                1,
            )?
            .relu();
        let m = self.config.parts_per_branch;
        (0..m)
            .map(|k| {
                let pooled = x.spatial_strip(axis, k, m)?.global_avg_pool()?;
                pooled.linear(
                    &self.p(tape, &format!("{b}.reduce{k}.weight"))?,
                    &self.p(tape, &format!("{b}.reduce{k}.bias"))?,
                )
            })
            .collect()
    }

    pub fn branches<'t>(&self, tape: &'t Tape<T>, images: &Var<'t, T>) -> Result<BranchOutputs<'t, T>> {
        let feats = self.trunk_forward(tape, images)?;
        let global = self.global_branch(tape, &feats)?;
        let (aligned, theta) = self.align(tape, &feats)?;
        let height_parts = self.spatial_branch(tape, &aligned, Axis::Height)?;
        let width_parts = self.spatial_branch(tape, &aligned, Axis::Width)?;
        Ok(BranchOutputs {
            global,
            height_parts,
            width_parts,
            theta,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, images: &Var<'t, T>) -> Result<ForwardOutput<'t, T>> {
        let branches = self.branches(tape, images)?;
        let classify = |name: &str, x: &Var<'t, T>| -> Result<Var<'t, T>> {
            x.linear(
                &self.p(tape, &format!("cls.{name}.weight"))?,
                &self.p(tape, &format!("cls.{name}.bias"))?,
            )
        };
        let logits_global = classify("global", &branches.global)?;
        let logits_height = classify("td", &concat_last_axis(&branches.height_parts)?)?;
        let logits_width = classify("lr", &concat_last_axis(&branches.width_parts)?)?;
        let embedding = assemble_embedding(&branches)?;
        Ok(ForwardOutput {
            branches,
            logits_global,
            logits_height,
            logits_width,
            embedding,
        })
    }
}

impl SANet<f32> {
    /// Embeddings for `[N,3,S,S]` images, evaluated in batches of
    /// `batch_size`. Each sample's result is independent of the batching.
    pub fn embed(&self, images: &Tensor<f32>, batch_size: usize) -> Result<Tensor<f32>> {
        let [n, c, h, w] = images.dims4("embed")?;
        let batch_size = batch_size.max(1);
        let per = c * h * w;
        let dim = self.config.embedding_dim();
        let mut out = Vec::with_capacity(n * dim);
        for start in (0..n).step_by(batch_size) {
            let end = (start + batch_size).min(n);
            let chunk = Tensor::new(
                vec![end - start, c, h, w],
                images.data()[start * per..end * per].to_vec(),
            )?;
            let tape = Tape::no_grad();
            let x = tape.constant(chunk);
            let b = self.branches(&tape, &x)?;
            let e = assemble_embedding(&b)?.value();
            out.extend_from_slice(e.data());
        }
        Tensor::new(vec![n, dim], out)
    }

    /// Alignment parameters regressed for each image.
    pub fn regress_theta(&self, images: &Tensor<f32>) -> Result<stn::AffineTheta> {
        let tape = Tape::no_grad();
        let x = tape.constant(images.clone());
        let feats = self.trunk_forward(&tape, &x)?;
        let (_, theta) = self.align(&tape, &feats)?;
        let t = theta.value();
        stn::AffineTheta::from_tensor(&t)
    }
}
