//! Backbone, feature pyramid and the shared two-branch fovea head.
//!
//! Layout, for pyramid levels `min_level..=max_level`:
//!
//! * backbone: a stride-2 stem, then per level `l >= 2` a stride-2 `down`
//!   conv and a stride-1 `block` conv (all 3x3 + ReLU), giving `C_l` at stride
//!   `2^l`;
//! * pyramid: `M_max = lateral(C_max)`, `M_l = lateral(C_l) + up2(M_{l+1})`,
//!   `P_l = smooth(M_l)` with 1x1 laterals and 3x3 smoothing;
//! * head: one set of weights applied to every `P_l`: a class branch of
//!   `head_depth` 3x3 convs + ReLU then a 3x3 conv to `C` logits, and a box
//!   branch of the same depth ending in a 3x3 conv to 4 offsets.
//!
//! Backward passes are written out by hand against cached activations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::TargetMaps;
use crate::geometry::PyramidSpec;
use crate::loss::{self, LossParams, LossReport};
use crate::math;
use crate::tensor::{
    conv2d_backward_raw, conv2d_forward_raw, relu_backward_inplace, relu_inplace, sgd_step,
    upsample2x_backward, upsample2x_nearest, ConvGeometry, SgdConfig, SgdState, Tensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub min_level: u32,
    pub max_level: u32,
    pub channels: usize,
    pub head_depth: usize,
    pub class_agnostic: bool,
    pub in_channels: usize,
    /// Prior foreground probability used to initialize the class-logit bias.
    pub prior_prob: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            min_level: 2,
            max_level: 4,
            channels: 32,
            head_depth: 2,
            class_agnostic: false,
            in_channels: 1,
            prior_prob: 0.01,
        }
    }
}

impl DetectorConfig {
    /// Channels of the class branch output.
    pub fn cls_channels(&self) -> usize {
        if self.class_agnostic {
            1
        } else {
            self.num_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.min_level == 0 || self.min_level > self.max_level || self.max_level > 10 {
            return Err(Error::Config(format!(
                "levels {}..={} unsupported",
                self.min_level, self.max_level
            )));
        }
        if self.channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::Config(format!(
                "prior_prob must be in (0, 1), got {}",
                self.prior_prob
            )));
        }
        Ok(())
    }

    pub fn pyramid(&self, image_w: usize, image_h: usize) -> Result<PyramidSpec> {
        PyramidSpec::new(image_w, image_h, self.min_level, self.max_level)
    }
}

/// Raw head output for one level; maps are channel-major over `height x width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOutput {
    pub level: u32,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub cls_logits: Vec<f64>,
    pub box_offsets: Vec<f64>,
}

impl LevelOutput {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

pub type HeadOutputs = Vec<LevelOutput>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub geometry: ConvGeometry,
}

/// Per-parameter gradient buffers, aligned with [`Detector::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self(params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        math::sqrt(self.0.iter().flatten().map(|v| v * v).sum())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    stem: usize,
    /// `(down, block)` for backbone levels 2..=max
    backbone: usize,
    lateral: usize,
    smooth: usize,
    cls_hidden: usize,
    cls_out: usize,
    box_hidden: usize,
    box_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    layers: Vec<LayerInfo>,
    /// Weight of layer `i` at `2i`, bias at `2i + 1`.
    params: Vec<Tensor>,
}

/// A feature map with its spatial dims (batch of one).
#[derive(Debug, Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Map {
    fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.c, self.h, self.w], self.data.clone()).expect("consistent map")
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    cls_hidden: Vec<Map>,
    box_hidden: Vec<Map>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    input: Map,
    stem: Map,
    /// `(down, block)` outputs for backbone levels 2..=max
    backbone: Vec<(Map, Map)>,
    merged: Vec<Map>,
    pyramid: Vec<Map>,
    heads: Vec<HeadCache>,
}

impl Detector {
    /// Builds the network with seeded He-uniform weights.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = Self::layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = Self::ids(&config);
        let mut params = Vec::with_capacity(2 * layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let g = &layer.geometry;
            let fan_in = (g.in_channels * g.kernel * g.kernel) as f64;
            let is_out = i == ids.cls_out || i == ids.box_out;
            let linear = (ids.lateral..ids.cls_hidden).contains(&i);
            // output convs start near zero so the prior bias dominates;
            // pyramid convs have no ReLU and get unit gain
            let bound = if is_out {
                0.01 * math::sqrt(3.0)
            } else if linear {
                math::sqrt(3.0 / fan_in)
            } else {
                math::sqrt(6.0 / fan_in)
            };
            let w: Vec<f64> = (0..g.weight_len())
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let mut b = vec![0.0; g.out_channels];
            if i == ids.cls_out {
                let p = config.prior_prob;
                b.fill(math::ln(p / (1.0 - p)));
            }
            params.push(Tensor::from_vec(
                &[g.out_channels, g.in_channels, g.kernel, g.kernel],
                w,
            )?);
            params.push(Tensor::from_vec(&[g.out_channels], b)?);
        }
        Ok(Self {
            config,
            layers,
            params,
        })
    }

    /// Rebuilds a detector from stored parameters, checking every shape.
    pub fn from_params(config: DetectorConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layers = Self::layout(&config);
        if params.len() != 2 * layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors for {} layers",
                params.len(),
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            let g = &l.geometry;
            if params[2 * i].shape() != [g.out_channels, g.in_channels, g.kernel, g.kernel]
                || params[2 * i + 1].shape() != [g.out_channels]
            {
                return Err(Error::Shape(format!("parameters of layer {}", l.name)));
            }
        }
        Ok(Self {
            config,
            layers,
            params: params.into_iter().map(|p| p.with_grad_cleared()).collect(),
        })
    }

    fn layout(cfg: &DetectorConfig) -> Vec<LayerInfo> {
        let c = cfg.channels;
        let conv = |name: String, i, o, k, s| LayerInfo {
            name,
            geometry: ConvGeometry {
                in_channels: i,
                out_channels: o,
                kernel: k,
                stride: s,
                padding: k / 2,
            },
        };
        let mut v = vec![conv("stem".into(), cfg.in_channels, c, 3, 2)];
        for l in 2..=cfg.max_level {
            v.push(conv(format!("down{l}"), c, c, 3, 2));
            v.push(conv(format!("block{l}"), c, c, 3, 1));
        }
        for l in cfg.min_level..=cfg.max_level {
            v.push(conv(format!("lateral{l}"), c, c, 1, 1));
        }
        for l in cfg.min_level..=cfg.max_level {
            v.push(conv(format!("smooth{l}"), c, c, 3, 1));
        }
        for i in 0..cfg.head_depth {
            v.push(conv(format!("cls{i}"), c, c, 3, 1));
        }
        v.push(conv("cls_out".into(), c, cfg.cls_channels(), 3, 1));
        for i in 0..cfg.head_depth {
            v.push(conv(format!("box{i}"), c, c, 3, 1));
        }
        v.push(conv("box_out".into(), c, 4, 3, 1));
        v
    }

    fn ids(cfg: &DetectorConfig) -> LayerIds {
        let n_back = 2 * (cfg.max_level as usize - 1);
        let n_lvl = (cfg.max_level - cfg.min_level + 1) as usize;
        let backbone = 1;
        let lateral = backbone + n_back;
        let smooth = lateral + n_lvl;
        let cls_hidden = smooth + n_lvl;
        let cls_out = cls_hidden + cfg.head_depth;
        let box_hidden = cls_out + 1;
        let box_out = box_hidden + cfg.head_depth;
        LayerIds {
            stem: 0,
            backbone,
            lateral,
            smooth,
            cls_hidden,
            cls_out,
            box_hidden,
            box_out,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// `"<layer>.weight"` / `"<layer>.bias"`, aligned with [`Self::params`].
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn conv(&self, layer: usize, x: &Map) -> Map {
        let g = &self.layers[layer].geometry;
        let (oh, ow) = g.output_hw(x.h, x.w).expect("validated dims");
        let mut out = vec![0.0; g.out_channels * oh * ow];
        conv2d_forward_raw(
            &x.data,
            1,
            x.h,
            x.w,
            self.params[2 * layer].data(),
            self.params[2 * layer + 1].data(),
            g,
            &mut out,
        );
        Map {
            c: g.out_channels,
            h: oh,
            w: ow,
            data: out,
        }
    }

    fn conv_relu(&self, layer: usize, x: &Map) -> Map {
        let mut y = self.conv(layer, x);
        relu_inplace(&mut y.data);
        y
    }

    /// Accumulates parameter gradients of `layer`; returns the input gradient if asked.
    fn conv_back(
        &self,
        layer: usize,
        x: &Map,
        grad_out: &[f64],
        grads: &mut Gradients,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let g = &self.layers[layer].geometry;
        let mut gi = want_input.then(|| vec![0.0; x.data.len()]);
        let (gw_slot, rest) = grads.0[2 * layer..].split_at_mut(1);
        conv2d_backward_raw(
            &x.data,
            1,
            x.h,
            x.w,
            self.params[2 * layer].data(),
            g,
            grad_out,
            gi.as_deref_mut(),
            &mut gw_slot[0],
            &mut rest[0],
        );
        gi
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let (n, c, h, w) = image.dims4()?;
        if n != 1 || c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected a 1x{}xHxW image, got {:?}",
                self.config.in_channels,
                image.shape()
            )));
        }
        let s = 1usize << self.config.max_level;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible by the largest stride {s}"
            )));
        }
        Ok((h, w))
    }

    fn forward_cached(&self, image: &Tensor) -> Result<(HeadOutputs, ForwardCache)> {
        let (h, w) = self.check_image(image)?;
        let cfg = &self.config;
        let ids = Self::ids(cfg);
        let input = Map {
            c: cfg.in_channels,
            h,
            w,
            data: image.data().to_vec(),
        };
        let stem = self.conv_relu(ids.stem, &input);
        let mut backbone: Vec<(Map, Map)> = Vec::new();
        for (k, _) in (2..=cfg.max_level).enumerate() {
            let prev = backbone.last().map_or(&stem, |(_, b)| b);
            let down = self.conv_relu(ids.backbone + 2 * k, prev);
            let block = self.conv_relu(ids.backbone + 2 * k + 1, &down);
            backbone.push((down, block));
        }
        let c_level = |l: u32| -> &Map {
            if l == 1 {
                &stem
            } else {
                &backbone[(l - 2) as usize].1
            }
        };

        let n_lvl = (cfg.max_level - cfg.min_level + 1) as usize;
        let mut merged: Vec<Map> = Vec::with_capacity(n_lvl);
        for j in (0..n_lvl).rev() {
            let l = cfg.min_level + j as u32;
            let mut m = self.conv(ids.lateral + j, c_level(l));
            if let Some(above) = merged.last() {
                let up = upsample2x_nearest(&above.to_tensor())?;
                for (a, b) in m.data.iter_mut().zip(up.data()) {
                    *a += b;
                }
            }
            merged.push(m);
        }
        merged.reverse();

        let mut pyramid = Vec::with_capacity(n_lvl);
        let mut heads = Vec::with_capacity(n_lvl);
        let mut outputs = Vec::with_capacity(n_lvl);
        for (j, m) in merged.iter().enumerate() {
            let p = self.conv(ids.smooth + j, m);
            let mut cls_hidden = Vec::with_capacity(cfg.head_depth);
            for i in 0..cfg.head_depth {
                let x = cls_hidden.last().unwrap_or(&p);
                let y = self.conv_relu(ids.cls_hidden + i, x);
                cls_hidden.push(y);
            }
            let cls = self.conv(ids.cls_out, cls_hidden.last().unwrap_or(&p));
            let mut box_hidden = Vec::with_capacity(cfg.head_depth);
            for i in 0..cfg.head_depth {
                let x = box_hidden.last().unwrap_or(&p);
                let y = self.conv_relu(ids.box_hidden + i, x);
                box_hidden.push(y);
            }
            let bx = self.conv(ids.box_out, box_hidden.last().unwrap_or(&p));
            outputs.push(LevelOutput {
                level: cfg.min_level + j as u32,
                num_classes: cls.c,
                height: cls.h,
                width: cls.w,
                cls_logits: cls.data,
                box_offsets: bx.data,
            });
            pyramid.push(p);
            heads.push(HeadCache {
                cls_hidden,
                box_hidden,
            });
        }
        Ok((
            outputs,
            ForwardCache {
                input,
                stem,
                backbone,
                merged,
                pyramid,
                heads,
            },
        ))
    }

    /// Raw head outputs for a `1 x in_channels x H x W` image.
    pub fn forward(&self, image: &Tensor) -> Result<HeadOutputs> {
        self.forward_cached(image).map(|(o, _)| o)
    }

    /// Gradients of the loss whose output gradients are `head_grads`.
    fn backward(&self, cache: &ForwardCache, head_grads: &[loss::LevelGrads]) -> Result<Gradients> {
        let cfg = &self.config;
        let ids = Self::ids(cfg);
        let mut grads = Gradients::zeros_like(&self.params);
        let n_lvl = cache.pyramid.len();

        // head, shared across levels
        let mut d_pyr: Vec<Vec<f64>> = Vec::with_capacity(n_lvl);
        for (j, hg) in head_grads.iter().enumerate() {
            let p = &cache.pyramid[j];
            let hc = &cache.heads[j];
            let mut dp = vec![0.0; p.data.len()];
            for (hidden, first, out_id, g_out) in [
                (&hc.cls_hidden, ids.cls_hidden, ids.cls_out, &hg.cls),
                (&hc.box_hidden, ids.box_hidden, ids.box_out, &hg.boxes),
            ] {
                let x = hidden.last().unwrap_or(p);
                let mut d = self
                    .conv_back(out_id, x, g_out, &mut grads, true)
                    .expect("requested");
                for i in (0..hidden.len()).rev() {
                    relu_backward_inplace(&hidden[i].data, &mut d);
                    let x = if i == 0 { p } else { &hidden[i - 1] };
                    d = self
                        .conv_back(first + i, x, &d, &mut grads, true)
                        .expect("requested");
                }
                for (a, b) in dp.iter_mut().zip(&d) {
                    *a += b;
                }
            }
            d_pyr.push(dp);
        }

        // smoothing, then the top-down path from fine to coarse
        let mut d_merged: Vec<Vec<f64>> = Vec::with_capacity(n_lvl);
        for j in 0..n_lvl {
            let d = self
                .conv_back(
                    ids.smooth + j,
                    &cache.merged[j],
                    &d_pyr[j],
                    &mut grads,
                    true,
                )
                .expect("requested");
            d_merged.push(d);
        }
        for j in 0..n_lvl.saturating_sub(1) {
            let m = &cache.merged[j];
            let g = Tensor::from_vec(&[1, m.c, m.h, m.w], d_merged[j].clone())?;
            let up = upsample2x_backward(&g)?;
            for (a, b) in d_merged[j + 1].iter_mut().zip(up.data()) {
                *a += b;
            }
        }

        // laterals into the backbone features
        let n_back = (cfg.max_level - 1) as usize;
        let mut d_block: Vec<Vec<f64>> = cache
            .backbone
            .iter()
            .map(|(_, b)| vec![0.0; b.data.len()])
            .collect();
        let mut d_stem = vec![0.0; cache.stem.data.len()];
        for j in 0..n_lvl {
            let l = cfg.min_level + j as u32;
            let x = if l == 1 {
                &cache.stem
            } else {
                &cache.backbone[(l - 2) as usize].1
            };
            let d = self
                .conv_back(ids.lateral + j, x, &d_merged[j], &mut grads, true)
                .expect("requested");
            let target = if l == 1 {
                &mut d_stem
            } else {
                &mut d_block[(l - 2) as usize]
            };
            for (a, b) in target.iter_mut().zip(&d) {
                *a += b;
            }
        }

        for k in (0..n_back).rev() {
            let (down, block) = &cache.backbone[k];
            let mut d = core::mem::take(&mut d_block[k]);
            relu_backward_inplace(&block.data, &mut d);
            let mut d = self
                .conv_back(ids.backbone + 2 * k + 1, down, &d, &mut grads, true)
                .expect("requested");
            relu_backward_inplace(&down.data, &mut d);
            let x = if k == 0 {
                &cache.stem
            } else {
                &cache.backbone[k - 1].1
            };
            let d = self
                .conv_back(ids.backbone + 2 * k, x, &d, &mut grads, true)
                .expect("requested");
            let target = if k == 0 {
                &mut d_stem
            } else {
                &mut d_block[k - 1]
            };
            for (a, b) in target.iter_mut().zip(&d) {
                *a += b;
            }
        }
        relu_backward_inplace(&cache.stem.data, &mut d_stem);
        self.conv_back(ids.stem, &cache.input, &d_stem, &mut grads, false);
        Ok(grads)
    }

    /// Loss and parameter gradients for one image.
    ///
    /// The loss is normalized by `normalizer` (the positive count of the whole
    /// batch when called from a batched step).
    pub fn forward_backward(
        &self,
        image: &Tensor,
        targets: &[TargetMaps],
        loss_params: &LossParams,
        normalizer: f64,
    ) -> Result<(LossReport, Gradients)> {
        let (outputs, cache) = self.forward_cached(image)?;
        self.check_targets(&outputs, targets)?;
        let (report, head_grads) =
            loss::total_loss_with_normalizer(&outputs, targets, loss_params, normalizer)
                .map_err(|e| annotate_non_finite(e, &outputs))?;
        if !report.total.is_finite() {
            return Err(annotate_non_finite(
                Error::NonFinite(format!("loss {report:?}")),
                &outputs,
            ));
        }
        let grads = self.backward(&cache, &head_grads)?;
        Ok((report, grads))
    }

    fn check_targets(&self, outputs: &[LevelOutput], targets: &[TargetMaps]) -> Result<()> {
        if outputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} target levels for {} output levels",
                targets.len(),
                outputs.len()
            )));
        }
        for (o, t) in outputs.iter().zip(targets) {
            if o.level != t.level.level || o.height != t.level.grid_h || o.width != t.level.grid_w {
                return Err(Error::Shape(format!(
                    "targets for level {} ({}x{}) do not match output level {} ({}x{})",
                    t.level.level, t.level.grid_h, t.level.grid_w, o.level, o.height, o.width
                )));
            }
            if self.config.class_agnostic
                && t.cls.iter().any(|c| matches!(c, crate::assignment::CellLabel::Positive { category, .. } if *category != 0))
            {
                return Err(Error::Config(
                    "class-agnostic detector needs single-class targets".into(),
                ));
            }
        }
        Ok(())
    }

    /// Writes summed gradients into the parameters' gradient buffers.
    pub fn set_gradients(&mut self, grads: &Gradients) -> Result<()> {
        if grads.0.len() != self.params.len() {
            return Err(Error::Shape("gradient count".into()));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.zero_grad();
            p.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// One SGD step on a batch of `(image, targets)` pairs.
    ///
    /// Per-image gradients are summed in batch order, so the result is
    /// identical to a parallel evaluation reduced in the same order.
    pub fn train_step(
        &mut self,
        batch: &[(Tensor, Vec<TargetMaps>)],
        state: &mut SgdState,
        sgd: &SgdConfig,
        loss_params: &LossParams,
    ) -> Result<LossReport> {
        let normalizer = batch_normalizer(batch.iter().map(|(_, t)| t.as_slice()));
        let mut parts = Vec::with_capacity(batch.len());
        for (image, targets) in batch {
            parts.push(self.forward_backward(image, targets, loss_params, normalizer)?);
        }
        self.apply_step(parts, state, sgd, loss_params)
    }

    /// Reduces per-image results in order and takes the optimizer step.
    pub fn apply_step(
        &mut self,
        parts: Vec<(LossReport, Gradients)>,
        state: &mut SgdState,
        sgd: &SgdConfig,
        loss_params: &LossParams,
    ) -> Result<LossReport> {
        let mut total = Gradients::zeros_like(&self.params);
        let mut report = LossReport::default();
        for (r, g) in &parts {
            total.add_assign(g);
            report.cls_loss += r.cls_loss;
            report.box_loss += r.box_loss;
            report.num_pos += r.num_pos;
        }
        report.total = report.cls_loss + loss_params.box_weight * report.box_loss;
        self.set_gradients(&total)?;
        sgd_step(&mut self.params, state, sgd)?;
        Ok(report)
    }

    pub fn sgd_state(&self) -> SgdState {
        SgdState::new(&self.params)
    }
}

/// `max(1, total positives)` over a batch of target sets.
pub fn batch_normalizer<'a>(targets: impl Iterator<Item = &'a [TargetMaps]>) -> f64 {
    let n: usize = targets
        .map(|t| t.iter().map(|m| m.pos_count).sum::<usize>())
        .sum();
    n.max(1) as f64
}

/// Location of the most extreme head output, for non-finite diagnostics.
pub fn worst_cell(outputs: &[LevelOutput]) -> Option<(u32, usize, usize, usize, f64)> {
    let mut worst: Option<(u32, usize, usize, usize, f64)> = None;
    let mut worst_mag = -1.0;
    for o in outputs {
        let cells = o.cells();
        // box channels are numbered after the class channels
        let branches = [(&o.cls_logits, 0usize), (&o.box_offsets, o.num_classes)];
        for (buf, offset) in branches {
            for (i, v) in buf.iter().enumerate() {
                let mag = if v.is_finite() {
                    v.abs()
                } else {
                    f64::INFINITY
                };
                if mag > worst_mag {
                    worst_mag = mag;
                    let cell = i % cells;
                    worst = Some((
                        o.level,
                        cell % o.width,
                        cell / o.width,
                        offset + i / cells,
                        *v,
                    ));
                }
            }
        }
    }
    worst
}

fn annotate_non_finite(e: Error, outputs: &[LevelOutput]) -> Error {
    match e {
        Error::NonFinite(msg) => match worst_cell(outputs) {
            Some((level, x, y, ch, v)) => Error::NonFinite(format!(
                "{msg}; most extreme output at level {level} cell ({x}, {y}) channel {ch}: {v}"
            )),
            None => Error::NonFinite(msg),
        },
        other => other,
    }
}

trait ClearGrad {
    fn with_grad_cleared(self) -> Self;
}

impl ClearGrad for Tensor {
    fn with_grad_cleared(self) -> Self {
        let shape = self.shape().to_vec();
        Tensor::from_vec(&shape, self.into_data()).expect("same shape")
    }
}

/// Sigmoid of every class logit, for inspection.
pub fn class_probabilities(out: &LevelOutput) -> Vec<f64> {
    out.cls_logits.iter().map(|z| math::sigmoid(*z)).collect()
}
