//! The two-branch network: a scene-classification trunk whose first `n`
//! layers are shared with a fully-convolutional segmentation branch.
//!
//! Layer counting is over parameterized layers only (conv, fc); relu, pool
//! and dropout attach to the preceding countable layer. Fully-connected
//! trunk layers that fall inside the shared prefix are cast into 1x1
//! convolutions so the branch point always carries a spatial map.
//!
//! Backward follows the routing rule: shared parameters accumulate
//! `dL_scene + alpha * dL_object`, scene-suffix parameters only `dL_scene`,
//! segmentation-suffix parameters only `alpha * dL_object`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::labels::{IgnoreMask, LabelMap, IGNORE_LABEL};
use crate::layers::{
    Conv2d, ConvSpec, Dropout, FullyConnected, Layer, MaxPool2d, Mode, PoolSpec, Relu,
};
use crate::loss::{
    pixel_softmax, scene_cross_entropy, scene_loss_logit_grad, seg_loss_logit_grad,
    segmentation_cross_entropy, softmax,
};
use crate::param::Parameter;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTrunkLayer {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub relu: bool,
    pub pool: Option<PoolSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FcTrunkLayer {
    pub width: usize,
    pub relu: bool,
    pub dropout: Option<f64>,
}

/// One countable trunk layer plus its attached non-parameterized ops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrunkLayerSpec {
    Conv(ConvTrunkLayer),
    Fc(FcTrunkLayer),
}

/// One convolution of the segmentation head; stride 1, same-padding for odd
/// kernels, input channels inferred from the branch point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegHeadLayer {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub num_scenes: usize,
    pub num_objects: usize,
    /// The countable trunk layers; their count is the network depth used
    /// for branch-point arithmetic.
    pub trunk: Vec<TrunkLayerSpec>,
    /// Fully-connected layers appended after the trunk on the scene branch
    /// (empty when the trunk itself ends in the scene classifier).
    pub scene_head: Vec<FcTrunkLayer>,
    /// Convolutional head producing the per-pixel object scores.
    pub seg_head: Vec<SegHeadLayer>,
    /// Branch point n, 0..=trunk.len(); 0 yields parameter-disjoint
    /// branches.
    pub branch_point: usize,
    /// Weight of the segmentation loss in the combined objective.
    pub alpha: f64,
    /// Fixed affine input normalization applied before both branches.
    pub input_scale: f64,
    pub input_shift: f64,
}

impl NetworkConfig {
    /// Total countable trunk depth.
    pub fn num_trunk_layers(&self) -> usize {
        self.trunk.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::InvalidConfig("input geometry must be >= 1".into()));
        }
        if self.num_scenes < 2 {
            return Err(Error::InvalidConfig("need at least 2 scene classes".into()));
        }
        if self.num_objects < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 object classes".into(),
            ));
        }
        if self.trunk.is_empty() {
            return Err(Error::InvalidConfig("trunk must not be empty".into()));
        }
        if self.branch_point > self.trunk.len() {
            return Err(Error::InvalidConfig(format!(
                "branch point {} exceeds trunk depth {}",
                self.branch_point,
                self.trunk.len()
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        match self.seg_head.last() {
            None => {
                return Err(Error::InvalidConfig(
                    "segmentation head must not be empty".into(),
                ))
            }
            Some(last) if last.out_channels != self.num_objects => {
                return Err(Error::InvalidConfig(format!(
                    "segmentation head ends with {} channels, expected {} object classes",
                    last.out_channels, self.num_objects
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Which branch owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Shared,
    Scene,
    Seg,
}

/// Outputs and losses of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub p_s: Tensor,
    pub p_o: Tensor,
    pub loss_scene: f64,
    pub loss_object: f64,
    /// `loss_scene + alpha * loss_object`, assembled once; never re-derived.
    pub loss_combined: f64,
    pub floor_hits: u64,
    pub all_pixels_ignored: bool,
}

struct ForwardState {
    mode: Mode,
    scene_label: usize,
    p_s: Tensor,
    p_o: Tensor,
    labels_ds: LabelMap,
    mask_ds: IgnoreMask,
}

pub struct SSCNNModel {
    config: NetworkConfig,
    shared: Vec<Box<dyn Layer>>,
    scene: Vec<Box<dyn Layer>>,
    seg: Vec<Box<dyn Layer>>,
    seg_out: (usize, usize),
    state: Option<ForwardState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Geom {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Geom {
    fn len(&self) -> usize {
        match *self {
            Geom::Spatial(h, w, c) => h * w * c,
            Geom::Flat(n) => n,
        }
    }
}

/// Build a model from a config; parameters are drawn deterministically from
/// the seed.
pub fn build_sscnn(config: &NetworkConfig, seed: u64) -> Result<SSCNNModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.branch_point;

    let mut shared: Vec<Box<dyn Layer>> = Vec::new();
    let mut scene: Vec<Box<dyn Layer>> = Vec::new();
    let mut geom = Geom::Spatial(
        config.input_height,
        config.input_width,
        config.input_channels,
    );
    let mut branch_geom = geom;

    for (idx, spec) in config.trunk.iter().enumerate() {
        let layer_no = idx + 1;
        let in_prefix = layer_no <= n;
        let name = format!("trunk{layer_no}");
        let dest = if in_prefix { &mut shared } else { &mut scene };
        match spec {
            TrunkLayerSpec::Conv(cs) => {
                let (h, w, c) = match geom {
                    Geom::Spatial(h, w, c) => (h, w, c),
                    Geom::Flat(_) => {
                        return Err(Error::InvalidConfig(format!(
                            "trunk layer {layer_no}: convolution after a fully-connected layer"
                        )))
                    }
                };
                let conv_spec = ConvSpec {
                    in_channels: c,
                    out_channels: cs.out_channels,
                    kernel: cs.kernel,
                    stride: cs.stride,
                    padding: cs.padding,
                };
                let (oh, ow) = conv_spec.output_size(h, w)?;
                dest.push(Box::new(Conv2d::new(&name, conv_spec, &mut rng)?));
                geom = Geom::Spatial(oh, ow, cs.out_channels);
                if cs.relu {
                    dest.push(Box::new(Relu::new(format!("{name}.relu"))));
                }
                if let Some(pool) = cs.pool {
                    let (ph, pw) = pool.output_size(oh, ow)?;
                    dest.push(Box::new(MaxPool2d::new(format!("{name}.pool"), pool)));
                    geom = Geom::Spatial(ph, pw, cs.out_channels);
                }
            }
            TrunkLayerSpec::Fc(fs) => {
                if in_prefix {
                    // Cast into a 1x1 convolution to keep the map spatial
                    // for the segmentation branch.
                    let (h, w, c) = match geom {
                        Geom::Spatial(h, w, c) => (h, w, c),
                        Geom::Flat(_) => unreachable!("prefix stays spatial by construction"),
                    };
                    let conv_spec = ConvSpec {
                        in_channels: c,
                        out_channels: fs.width,
                        kernel: (1, 1),
                        stride: (1, 1),
                        padding: (0, 0),
                    };
                    dest.push(Box::new(Conv2d::new(&name, conv_spec, &mut rng)?));
                    geom = Geom::Spatial(h, w, fs.width);
                } else {
                    dest.push(Box::new(FullyConnected::new(
                        &name,
                        geom.len(),
                        fs.width,
                        &mut rng,
                    )?));
                    geom = Geom::Flat(fs.width);
                }
                if fs.relu {
                    dest.push(Box::new(Relu::new(format!("{name}.relu"))));
                }
                if let Some(rate) = fs.dropout {
                    dest.push(Box::new(Dropout::new(format!("{name}.dropout"), rate, 0)?));
                }
            }
        }
        if layer_no == n {
            branch_geom = geom;
        }
    }

    for (idx, fs) in config.scene_head.iter().enumerate() {
        let name = format!("scene_head{}", idx + 1);
        scene.push(Box::new(FullyConnected::new(
            &name,
            geom.len(),
            fs.width,
            &mut rng,
        )?));
        geom = Geom::Flat(fs.width);
        if fs.relu {
            scene.push(Box::new(Relu::new(format!("{name}.relu"))));
        }
        if let Some(rate) = fs.dropout {
            scene.push(Box::new(Dropout::new(format!("{name}.dropout"), rate, 0)?));
        }
    }
    match geom {
        Geom::Flat(len) if len == config.num_scenes => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "scene branch must end with a {}-way logit vector, got {other:?}",
                config.num_scenes
            )))
        }
    }

    let (mut sh, mut sw, mut sc) = match branch_geom {
        Geom::Spatial(h, w, c) => (h, w, c),
        Geom::Flat(_) => {
            return Err(Error::InvalidConfig(
                "branch point does not carry a spatial map".into(),
            ))
        }
    };
    let mut seg: Vec<Box<dyn Layer>> = Vec::new();
    for (idx, hs) in config.seg_head.iter().enumerate() {
        let name = format!("seg_head{}", idx + 1);
        let conv_spec = ConvSpec {
            in_channels: sc,
            out_channels: hs.out_channels,
            kernel: hs.kernel,
            stride: (1, 1),
            padding: ((hs.kernel.0 - 1) / 2, (hs.kernel.1 - 1) / 2),
        };
        let (oh, ow) = conv_spec.output_size(sh, sw)?;
        seg.push(Box::new(Conv2d::new(&name, conv_spec, &mut rng)?));
        sh = oh;
        sw = ow;
        sc = hs.out_channels;
        if hs.relu {
            seg.push(Box::new(Relu::new(format!("{name}.relu"))));
        }
    }
    debug_assert_eq!(sc, config.num_objects);

    let mut model = SSCNNModel {
        config: config.clone(),
        shared,
        scene,
        seg,
        seg_out: (sh, sw),
        state: None,
    };
    model.reseed(seed);
    Ok(model)
}

impl SSCNNModel {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Spatial size of the segmentation output (at the head's native
    /// stride).
    pub fn seg_output_size(&self) -> (usize, usize) {
        self.seg_out
    }

    /// Reset every dropout stream, deterministically per layer position.
    pub fn reseed(&mut self, seed: u64) {
        for (i, layer) in self
            .shared
            .iter_mut()
            .chain(self.scene.iter_mut())
            .chain(self.seg.iter_mut())
            .enumerate()
        {
            layer.reseed(seed.wrapping_add(0x5851f42d4c957f2d ^ i as u64));
        }
    }

    pub fn parameters(&self) -> Vec<(Owner, &Parameter)> {
        let mut out = Vec::new();
        for layer in &self.shared {
            out.extend(layer.params().into_iter().map(|p| (Owner::Shared, p)));
        }
        for layer in &self.scene {
            out.extend(layer.params().into_iter().map(|p| (Owner::Scene, p)));
        }
        for layer in &self.seg {
            out.extend(layer.params().into_iter().map(|p| (Owner::Seg, p)));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(Owner, &mut Parameter)> {
        let mut out: Vec<(Owner, &mut Parameter)> = Vec::new();
        for layer in &mut self.shared {
            out.extend(layer.params_mut().into_iter().map(|p| (Owner::Shared, p)));
        }
        for layer in &mut self.scene {
            out.extend(layer.params_mut().into_iter().map(|p| (Owner::Scene, p)));
        }
        for layer in &mut self.seg {
            out.extend(layer.params_mut().into_iter().map(|p| (Owner::Seg, p)));
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn normalize_input(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let (scale, shift) = (self.config.input_scale, self.config.input_shift);
        for v in out.data_mut() {
            *v = *v * scale + shift;
        }
        out
    }

    /// Run both branches on one sample. Segmentation supervision is applied
    /// at the head's native output stride: labels are downsampled with
    /// nearest neighbor (masked pixels stay masked).
    pub fn forward(&mut self, sample: &SampleRecord, mode: Mode) -> Result<ForwardResult> {
        let expected = [
            self.config.input_height,
            self.config.input_width,
            self.config.input_channels,
        ];
        if sample.input.shape() != expected {
            return Err(Error::InvalidShape(format!(
                "sample input shape {:?} does not match network input {expected:?}",
                sample.input.shape()
            )));
        }
        if sample.scene >= self.config.num_scenes {
            return Err(Error::InvalidArgument(format!(
                "scene label {} out of range for {} classes",
                sample.scene, self.config.num_scenes
            )));
        }
        let normalized = self.normalize_input(&sample.input);

        let mut branch_in = normalized;
        for layer in &mut self.shared {
            branch_in = layer.forward(&branch_in, mode)?;
        }

        let mut scene_logits = branch_in.clone();
        for layer in &mut self.scene {
            scene_logits = layer.forward(&scene_logits, mode)?;
        }
        let p_s = softmax(&scene_logits)?;
        let scene_loss = scene_cross_entropy(&p_s, sample.scene)?;

        let mut seg_scores = branch_in;
        for layer in &mut self.seg {
            seg_scores = layer.forward(&seg_scores, mode)?;
        }
        let p_o = pixel_softmax(&seg_scores)?;

        let (labels_ds, mask_ds) =
            downsample_supervision(&sample.labels, &sample.mask, self.seg_out.0, self.seg_out.1)?;
        let seg_loss = segmentation_cross_entropy(&p_o, &labels_ds, &mask_ds)?;

        let loss_combined = scene_loss.value + self.config.alpha * seg_loss.value;
        self.state = Some(ForwardState {
            mode,
            scene_label: sample.scene,
            p_s: p_s.clone(),
            p_o: p_o.clone(),
            labels_ds,
            mask_ds,
        });
        Ok(ForwardResult {
            p_s,
            p_o,
            loss_scene: scene_loss.value,
            loss_object: seg_loss.value,
            loss_combined,
            floor_hits: seg_loss.floor_hits + u64::from(scene_loss.floored),
            all_pixels_ignored: seg_loss.all_ignored,
        })
    }

    /// Standard backward: scene loss at weight 1, segmentation at alpha.
    pub fn backward(&mut self) -> Result<Tensor> {
        let alpha = self.config.alpha;
        self.backward_weighted(1.0, alpha)
    }

    /// Backward with explicit loss weights, accumulating parameter
    /// gradients. Returns the gradient w.r.t. the raw (unnormalized) input.
    pub fn backward_weighted(&mut self, scene_weight: f64, object_weight: f64) -> Result<Tensor> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Contract("backward called before forward".into()))?;
        if state.mode != Mode::Train {
            return Err(Error::Contract(
                "backward requires a train-mode forward pass".into(),
            ));
        }

        let mut scene_grad = scene_loss_logit_grad(&state.p_s, state.scene_label)?;
        scene_grad.scale(scene_weight);
        let mut seg_grad = seg_loss_logit_grad(&state.p_o, &state.labels_ds, &state.mask_ds)?;
        seg_grad.scale(object_weight);

        let mut g_scene = scene_grad;
        for layer in self.scene.iter_mut().rev() {
            g_scene = layer.backward(&g_scene)?;
        }
        let mut g_seg = seg_grad;
        for layer in self.seg.iter_mut().rev() {
            g_seg = layer.backward(&g_seg)?;
        }

        let mut g = g_scene;
        g.add_scaled(&g_seg, 1.0)?;
        for layer in self.shared.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        // Chain through the fixed input normalization.
        g.scale(self.config.input_scale);
        Ok(g)
    }
}

/// Downsample labels and mask together: masked pixels are forced to the
/// ignore label before the nearest-neighbor resize so exclusions survive.
pub fn downsample_supervision(
    labels: &LabelMap,
    mask: &IgnoreMask,
    height: usize,
    width: usize,
) -> Result<(LabelMap, IgnoreMask)> {
    let mut merged = labels.clone();
    for i in 0..labels.height {
        for j in 0..labels.width {
            if mask.is_ignored(i, j) {
                merged.set(i, j, IGNORE_LABEL);
            }
        }
    }
    let ds = merged.resize_nearest(height, width)?;
    let mask_ds = IgnoreMask::from_labels(&ds);
    Ok((ds, mask_ds))
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

fn conv3(out_channels: usize, pool: Option<PoolSpec>) -> TrunkLayerSpec {
    TrunkLayerSpec::Conv(ConvTrunkLayer {
        out_channels,
        kernel: (3, 3),
        stride: (1, 1),
        padding: (1, 1),
        relu: true,
        pool,
    })
}

fn pool2() -> Option<PoolSpec> {
    Some(PoolSpec {
        window: (2, 2),
        stride: (2, 2),
    })
}

/// Desk-scale preset: 32x32 input, four 3x3 conv layers (8, 16, 16, 32
/// channels) with two stride-2 pools, a 64-wide fully-connected scene head,
/// and a single 1x1 segmentation conv (output stride 4 at branch point 4).
pub fn tiny_preset(
    input_channels: usize,
    num_scenes: usize,
    num_objects: usize,
    branch_point: usize,
) -> NetworkConfig {
    NetworkConfig {
        input_height: 32,
        input_width: 32,
        input_channels,
        num_scenes,
        num_objects,
        trunk: vec![
            conv3(8, None),
            conv3(16, pool2()),
            conv3(16, None),
            conv3(32, pool2()),
        ],
        scene_head: vec![
            FcTrunkLayer {
                width: 64,
                relu: true,
                dropout: Some(0.5),
            },
            FcTrunkLayer {
                width: num_scenes,
                relu: false,
                dropout: None,
            },
        ],
        seg_head: vec![SegHeadLayer {
            out_channels: num_objects,
            kernel: (1, 1),
            relu: false,
        }],
        branch_point,
        // The 32x32 segmentation map sums over few pixels, so the pixel
        // term needs more weight than at full scale to pull comparably.
        alpha: 0.08,
        input_scale: 1.0 / 255.0,
        input_shift: -0.5,
    }
}

/// Full-scale preset mirroring the experimental geometry: 158x210 input, an
/// eight-layer trunk with overall stride 16 and receptive field 81x81 at
/// the branch, 512-wide fc7, alpha = 1/1000. Depth is reproduced at reduced
/// channel counts; for branch point 8 the scene branch gains two fresh
/// fully-connected layers since the trunk classifier is cast into a
/// convolution.
pub fn paper_preset(
    input_channels: usize,
    num_scenes: usize,
    num_objects: usize,
    branch_point: usize,
) -> NetworkConfig {
    let fc = |width: usize| {
        TrunkLayerSpec::Fc(FcTrunkLayer {
            width,
            relu: true,
            dropout: Some(0.5),
        })
    };
    let scene_head = if branch_point == 8 {
        vec![
            FcTrunkLayer {
                width: 512,
                relu: true,
                dropout: Some(0.5),
            },
            FcTrunkLayer {
                width: num_scenes,
                relu: false,
                dropout: None,
            },
        ]
    } else {
        Vec::new()
    };
    NetworkConfig {
        input_height: 158,
        input_width: 210,
        input_channels,
        num_scenes,
        num_objects,
        trunk: vec![
            TrunkLayerSpec::Conv(ConvTrunkLayer {
                out_channels: 32,
                kernel: (11, 11),
                stride: (2, 2),
                padding: (5, 5),
                relu: true,
                pool: pool2(),
            }),
            conv3(64, pool2()),
            conv3(96, None),
            conv3(96, None),
            conv3(64, pool2()),
            fc(512), // fc6
            fc(512), // fc7: width pinned to 512
            TrunkLayerSpec::Fc(FcTrunkLayer {
                width: num_scenes,
                relu: false,
                dropout: None,
            }), // fc8
        ],
        scene_head,
        seg_head: vec![SegHeadLayer {
            out_channels: num_objects,
            kernel: (1, 1),
            relu: false,
        }],
        branch_point,
        alpha: 1e-3,
        input_scale: 1.0 / 255.0,
        input_shift: -0.5,
    }
}

/// Cumulative (stride, receptive field) of the segmentation output w.r.t.
/// the input, walking the realized ops up to the branch point plus the
/// head's own convolutions.
pub fn seg_receptive_field(config: &NetworkConfig) -> Result<(usize, usize)> {
    config.validate()?;
    let mut stride = 1usize;
    let mut rf = 1usize;
    let grow = |kernel: usize, layer_stride: usize, s: &mut usize, r: &mut usize| {
        *r += (kernel - 1) * *s;
        *s *= layer_stride;
    };
    for spec in config.trunk.iter().take(config.branch_point) {
        match spec {
            TrunkLayerSpec::Conv(cs) => {
                grow(
                    cs.kernel.0.max(cs.kernel.1),
                    cs.stride.0.max(cs.stride.1),
                    &mut stride,
                    &mut rf,
                );
                if let Some(p) = cs.pool {
                    grow(
                        p.window.0.max(p.window.1),
                        p.stride.0.max(p.stride.1),
                        &mut stride,
                        &mut rf,
                    );
                }
            }
            // Cast fully-connected layers are 1x1 convolutions.
            TrunkLayerSpec::Fc(_) => grow(1, 1, &mut stride, &mut rf),
        }
    }
    for hs in &config.seg_head {
        grow(hs.kernel.0.max(hs.kernel.1), 1, &mut stride, &mut rf);
    }
    Ok((stride, rf))
}
