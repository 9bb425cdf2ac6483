//! Small convolutional feature extractor with clustering hooks at its
//! deepest downsampling layers.
//!
//! The stem (no clustering module) reduces the image by `stem_stride`; each
//! stage then halves the grid with a pluggable downsampling layer followed by
//! plain 3×3 conv blocks. At the deepest `hierarchical_level` stages the
//! (pre, post) feature pair around the downsample is captured, projected, and
//! turned into an assignment matrix. Clustering is a pure side computation:
//! the feed-forward path is identical whatever the hierarchical level.
//!
//! Convolutions use edge-replicating padding so spatially constant inputs
//! remain constant through every block.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{
    compute_assignment_dense, compute_assignment_local, project_features, AssignmentHandle,
    ClusteringRefs,
};
use crate::params::{ParamId, ParamStore, TapeBinding};
use crate::tensor::{PadMode, Result as TensorResult, Tape, TensorError, TensorRef};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("unknown downsample kind '{0}'; expected one of {1}")]
    UnknownDownsample(String, String),
    #[error("stem stride must be 1, 2, or 4, got {0}")]
    BadStemStride(usize),
    #[error("hierarchical level {level} exceeds the {stages} downsampling stages")]
    LevelOutOfRange { level: usize, stages: usize },
    #[error("input {h}x{w} not divisible by the total stride {stride}")]
    IndivisibleInput { h: usize, w: usize, stride: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(&self, tape: &mut Tape, x: TensorRef) -> TensorResult<TensorRef> {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Image reduction before the first stage; no clustering module here.
    pub stem_stride: usize,
    pub stem_channels: usize,
    /// Output channels per stage; the length is the stage count.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Registry name of the downsampling layer: `avg_pool2` or `strided_conv3`.
    pub downsample: String,
    pub activation: Activation,
    /// How many of the deepest downsampling stages carry clustering modules.
    pub hierarchical_level: usize,
    /// Embedding width of the clustering projections.
    pub feature_dim: usize,
    /// Initial value of every level's trainable scale.
    pub scale_init: f64,
    /// Windowed local attention when true, dense otherwise.
    pub local_attention: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_stride: 2,
            stem_channels: 16,
            stage_channels: vec![32, 48],
            blocks_per_stage: 1,
            downsample: "strided_conv3".into(),
            activation: Activation::Silu,
            hierarchical_level: 2,
            feature_dim: 32,
            scale_init: 0.1,
            local_attention: true,
        }
    }
}

impl BackboneConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Product of all spatial reductions.
    pub fn total_stride(&self) -> usize {
        self.stem_stride << self.num_stages()
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if ![1, 2, 4].contains(&self.stem_stride) {
            return Err(BackboneError::BadStemStride(self.stem_stride));
        }
        if self.hierarchical_level > self.num_stages() {
            return Err(BackboneError::LevelOutOfRange {
                level: self.hierarchical_level,
                stages: self.num_stages(),
            });
        }
        build_downsample_check(&self.downsample)?;
        Ok(())
    }
}

// ---- downsampling strategies ----

/// A layer that halves the spatial grid (and may change channel count),
/// selected from the registry by name at build time.
pub trait Downsample: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, tape: &mut Tape, binding: &TapeBinding, x: TensorRef) -> TensorResult<TensorRef>;
}

/// 2×2 average pooling followed by a 1×1 channel projection.
struct AvgPoolDown {
    proj_w: ParamId,
    proj_b: ParamId,
}

impl Downsample for AvgPoolDown {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn apply(&self, tape: &mut Tape, binding: &TapeBinding, x: TensorRef) -> TensorResult<TensorRef> {
        let pooled = tape.avg_pool2(x)?;
        let shape = tape.shape(pooled).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(pooled, vec![c, h * w])?;
        let projected = tape.linear_cols(flat, binding.get(self.proj_w), Some(binding.get(self.proj_b)))?;
        let co = tape.shape(projected)[0];
        tape.reshape(projected, vec![co, h, w])
    }
}

/// Learnable 3×3 convolution with stride 2 and padding 1.
struct StridedConvDown {
    w: ParamId,
    b: ParamId,
}

impl Downsample for StridedConvDown {
    fn name(&self) -> &'static str {
        "strided_conv3"
    }

    fn apply(&self, tape: &mut Tape, binding: &TapeBinding, x: TensorRef) -> TensorResult<TensorRef> {
        tape.conv2d(x, binding.get(self.w), Some(binding.get(self.b)), 2, 1, PadMode::Clamp)
    }
}

type DownsampleBuilder =
    fn(prefix: &str, c_in: usize, c_out: usize, store: &mut ParamStore) -> Box<dyn Downsample>;

/// Name → builder table of the available downsampling layers.
pub fn downsample_registry() -> &'static [(&'static str, DownsampleBuilder)] {
    &[
        ("avg_pool2", |prefix, c_in, c_out, store| {
            Box::new(AvgPoolDown {
                proj_w: store.register_uniform(&format!("{prefix}.proj.w"), vec![c_out, c_in], c_in),
                proj_b: store.register_const(&format!("{prefix}.proj.b"), vec![c_out], 0.0),
            })
        }),
        ("strided_conv3", |prefix, c_in, c_out, store| {
            Box::new(StridedConvDown {
                w: store.register_uniform(&format!("{prefix}.w"), vec![c_out, c_in, 3, 3], c_in * 9),
                b: store.register_const(&format!("{prefix}.b"), vec![c_out], 0.0),
            })
        }),
    ]
}

fn build_downsample_check(kind: &str) -> Result<(), BackboneError> {
    if downsample_registry().iter().any(|(n, _)| *n == kind) {
        Ok(())
    } else {
        let known: Vec<&str> = downsample_registry().iter().map(|(n, _)| *n).collect();
        Err(BackboneError::UnknownDownsample(kind.to_string(), known.join(", ")))
    }
}

fn build_downsample(
    kind: &str,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    store: &mut ParamStore,
) -> Result<Box<dyn Downsample>, BackboneError> {
    build_downsample_check(kind)?;
    let (_, builder) = downsample_registry().iter().find(|(n, _)| *n == kind).unwrap();
    Ok(builder(prefix, c_in, c_out, store))
}

// ---- clustering module parameters ----

pub struct ClusteringParams {
    pub ln_q_gain: ParamId,
    pub ln_q_bias: ParamId,
    pub ln_k_gain: ParamId,
    pub ln_k_bias: ParamId,
    pub proj_q_w: ParamId,
    pub proj_q_b: ParamId,
    pub proj_k_w: ParamId,
    pub proj_k_b: ParamId,
    pub scale: ParamId,
}

impl ClusteringParams {
    pub fn register(
        prefix: &str,
        c_pre: usize,
        c_post: usize,
        c_f: usize,
        scale_init: f64,
        store: &mut ParamStore,
    ) -> Self {
        ClusteringParams {
            ln_q_gain: store.register_const(&format!("{prefix}.ln_q.gain"), vec![c_pre], 1.0),
            ln_q_bias: store.register_const(&format!("{prefix}.ln_q.bias"), vec![c_pre], 0.0),
            ln_k_gain: store.register_const(&format!("{prefix}.ln_k.gain"), vec![c_post], 1.0),
            ln_k_bias: store.register_const(&format!("{prefix}.ln_k.bias"), vec![c_post], 0.0),
            proj_q_w: store.register_uniform(&format!("{prefix}.proj_q.w"), vec![c_f, c_pre], c_pre),
            proj_q_b: store.register_const(&format!("{prefix}.proj_q.b"), vec![c_f], 0.0),
            proj_k_w: store.register_uniform(&format!("{prefix}.proj_k.w"), vec![c_f, c_post], c_post),
            proj_k_b: store.register_const(&format!("{prefix}.proj_k.b"), vec![c_f], 0.0),
            scale: store.register_const(&format!("{prefix}.scale"), vec![1], scale_init),
        }
    }

    pub fn bind(&self, binding: &TapeBinding) -> ClusteringRefs {
        ClusteringRefs {
            ln_q_gain: binding.get(self.ln_q_gain),
            ln_q_bias: binding.get(self.ln_q_bias),
            ln_k_gain: binding.get(self.ln_k_gain),
            ln_k_bias: binding.get(self.ln_k_bias),
            proj_q_w: binding.get(self.proj_q_w),
            proj_q_b: binding.get(self.proj_q_b),
            proj_k_w: binding.get(self.proj_k_w),
            proj_k_b: binding.get(self.proj_k_b),
            scale: binding.get(self.scale),
        }
    }
}

// ---- the backbone ----

struct ConvBlock {
    w: ParamId,
    b: ParamId,
}

struct Stage {
    down: Box<dyn Downsample>,
    blocks: Vec<ConvBlock>,
    /// Present on the deepest `hierarchical_level` stages.
    clustering: Option<ClusteringParams>,
}

pub struct Backbone {
    cfg: BackboneConfig,
    stem: Vec<ConvBlock>,
    stages: Vec<Stage>,
}

/// Per-level capture around a hooked downsampling layer.
pub struct LevelOutput {
    pub assignment: AssignmentHandle,
    /// `[c, n]` features entering the downsample.
    pub f_pre: TensorRef,
    /// `[c', n/4]` features leaving it.
    pub f_post: TensorRef,
    pub fine_shape: (usize, usize),
    pub coarse_shape: (usize, usize),
}

/// Everything the backbone emits for one image.
pub struct FeaturePyramid {
    /// Hooked levels ordered fine→coarse; empty at hierarchical level 0.
    pub levels: Vec<LevelOutput>,
    /// `[c, n]` features on the coarsest grid.
    pub final_features: TensorRef,
    pub final_grid: (usize, usize),
}

impl Backbone {
    pub fn build(cfg: &BackboneConfig, store: &mut ParamStore) -> Result<Backbone, BackboneError> {
        cfg.validate()?;
        let mut stem = Vec::new();
        let stem_convs = match cfg.stem_stride {
            4 => 2,
            _ => 1,
        };
        let mut c_in = 3;
        for i in 0..stem_convs {
            let prefix = format!("backbone.stem.{i}");
            stem.push(ConvBlock {
                w: store.register_uniform(&format!("{prefix}.w"), vec![cfg.stem_channels, c_in, 3, 3], c_in * 9),
                b: store.register_const(&format!("{prefix}.b"), vec![cfg.stem_channels], 0.0),
            });
            c_in = cfg.stem_channels;
        }
        let mut stages = Vec::new();
        let first_hooked = cfg.num_stages() - cfg.hierarchical_level;
        for (s, &c_out) in cfg.stage_channels.iter().enumerate() {
            let prefix = format!("backbone.stage{s}");
            let down = build_downsample(&cfg.downsample, &format!("{prefix}.down"), c_in, c_out, store)?;
            let clustering = (s >= first_hooked).then(|| {
                ClusteringParams::register(
                    &format!("cluster.level{}", s - first_hooked),
                    c_in,
                    c_out,
                    cfg.feature_dim,
                    cfg.scale_init,
                    store,
                )
            });
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ConvBlock {
                    w: store.register_uniform(&format!("{prefix}.block{b}.w"), vec![c_out, c_out, 3, 3], c_out * 9),
                    b: store.register_const(&format!("{prefix}.block{b}.b"), vec![c_out], 0.0),
                })
                .collect();
            stages.push(Stage { down, blocks, clustering });
            c_in = c_out;
        }
        Ok(Backbone { cfg: cfg.clone(), stem, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Scale parameter ids of the hooked levels, fine→coarse.
    pub fn scale_params(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .filter_map(|s| s.clustering.as_ref().map(|c| c.scale))
            .collect()
    }

    /// Run the stem and stages, capturing assignments at hooked stages.
    pub fn forward_with_hooks(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        image: TensorRef,
    ) -> Result<FeaturePyramid, BackboneError> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(BackboneError::Tensor(TensorError::ShapeMismatch {
                op: "forward_with_hooks",
                detail: format!("expected [3,h,w] image, got {:?}", shape),
            }));
        }
        let (h, w) = (shape[1], shape[2]);
        let stride = self.cfg.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(BackboneError::IndivisibleInput { h, w, stride });
        }

        let act = self.cfg.activation;
        let mut x = image;
        let stem_stride = if self.cfg.stem_stride == 1 { 1 } else { 2 };
        for block in &self.stem {
            x = tape.conv2d(x, binding.get(block.w), Some(binding.get(block.b)), stem_stride, 1, PadMode::Clamp)?;
            x = act.apply(tape, x)?;
        }

        let mut levels = Vec::new();
        for stage in &self.stages {
            let pre_shape = tape.shape(x).to_vec();
            let (c_pre, fh, fw) = (pre_shape[0], pre_shape[1], pre_shape[2]);
            let f_pre = x;
            let mut post = stage.down.apply(tape, binding, x)?;
            if let Some(cluster) = &stage.clustering {
                let post_shape = tape.shape(post).to_vec();
                let (c_post, ch, cw) = (post_shape[0], post_shape[1], post_shape[2]);
                let pre_flat = tape.reshape(f_pre, vec![c_pre, fh * fw])?;
                let post_flat = tape.reshape(post, vec![c_post, ch * cw])?;
                let refs = cluster.bind(binding);
                let (q, k) = project_features(tape, pre_flat, post_flat, &refs)?;
                let level = levels.len();
                let assignment = if self.cfg.local_attention {
                    compute_assignment_local(tape, q, k, refs.scale, level, (fh, fw), (ch, cw))?
                } else {
                    compute_assignment_dense(tape, q, k, refs.scale, level, (fh, fw), (ch, cw))?
                };
                levels.push(LevelOutput {
                    assignment,
                    f_pre: pre_flat,
                    f_post: post_flat,
                    fine_shape: (fh, fw),
                    coarse_shape: (ch, cw),
                });
            }
            for block in &stage.blocks {
                post = tape.conv2d(post, binding.get(block.w), Some(binding.get(block.b)), 1, 1, PadMode::Clamp)?;
                post = act.apply(tape, post)?;
            }
            x = post;
        }

        let final_shape = tape.shape(x).to_vec();
        let (c, gh, gw) = (final_shape[0], final_shape[1], final_shape[2]);
        let final_features = tape.reshape(x, vec![c, gh * gw])?;
        Ok(FeaturePyramid { levels, final_features, final_grid: (gh, gw) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![3, h, w], |_| rng.random_range(0.0..1.0)).unwrap()
    }

    fn forward(cfg: &BackboneConfig, img: &Tensor) -> (Vec<(usize, usize)>, Vec<f64>, (usize, usize)) {
        let mut store = ParamStore::new(11);
        let bb = Backbone::build(cfg, &mut store).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind_all_frozen(&mut tape);
        let img_ref = tape.constant(img);
        let pyr = bb.forward_with_hooks(&mut tape, &binding, img_ref).unwrap();
        let grids: Vec<(usize, usize)> = pyr.levels.iter().map(|l| l.fine_shape).collect();
        (grids, tape.data(pyr.final_features).to_vec(), pyr.final_grid)
    }

    #[test]
    fn level_zero_has_no_hooks_and_expected_final_grid() {
        let cfg = BackboneConfig {
            hierarchical_level: 0,
            stage_channels: vec![8, 12, 16, 16],
            stem_channels: 6,
            ..Default::default()
        };
        let img = image(64, 64, 1);
        let (grids, _, final_grid) = forward(&cfg, &img);
        assert!(grids.is_empty());
        // 64 / (2 stem * 2^4 stages) = 2
        assert_eq!(final_grid, (2, 2));
    }

    #[test]
    fn level_three_hooks_the_deepest_three_stages() {
        let cfg = BackboneConfig {
            hierarchical_level: 3,
            stage_channels: vec![8, 12, 16, 16],
            stem_channels: 6,
            ..Default::default()
        };
        let img = image(64, 64, 2);
        let (grids, _, final_grid) = forward(&cfg, &img);
        // assignments at 16², 8², 4² mapping to 8², 4², 2²
        assert_eq!(grids, vec![(16, 16), (8, 8), (4, 4)]);
        assert_eq!(final_grid, (2, 2));
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::new(3);
        let bb = Backbone::build(&cfg, &mut store).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind_all_frozen(&mut tape);
        let img = tape.constant(&image(60, 64, 3));
        assert!(matches!(
            bb.forward_with_hooks(&mut tape, &binding, img),
            Err(BackboneError::IndivisibleInput { .. })
        ));
    }

    #[test]
    fn hooks_never_change_forward_activations() {
        // same seed, different hierarchical level: identical final features
        let img = image(32, 32, 4);
        let base = BackboneConfig {
            stage_channels: vec![8, 12],
            stem_channels: 6,
            ..Default::default()
        };
        let l0 = BackboneConfig { hierarchical_level: 0, ..base.clone() };
        let l2 = BackboneConfig { hierarchical_level: 2, ..base };
        let (_, f0, _) = forward(&l0, &img);
        let (_, f2, _) = forward(&l2, &img);
        assert_eq!(f0, f2);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = BackboneConfig { stage_channels: vec![8, 12], stem_channels: 6, ..Default::default() };
        let img = image(32, 32, 5);
        let a = forward(&cfg, &img);
        let b = forward(&cfg, &img);
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn constant_image_gives_uniform_rows_over_candidates() {
        let cfg = BackboneConfig { stage_channels: vec![8, 12], stem_channels: 6, ..Default::default() };
        let img = Tensor::full(vec![3, 32, 32], 0.5).unwrap();
        let mut store = ParamStore::new(9);
        let bb = Backbone::build(&cfg, &mut store).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind_all_frozen(&mut tape);
        let img_ref = tape.constant(&img);
        let pyr = bb.forward_with_hooks(&mut tape, &binding, img_ref).unwrap();
        for level in &pyr.levels {
            let a = level.assignment.detach(&tape);
            for r in 0..a.fine_count() {
                let rw = a.row_weights(r);
                let want = 1.0 / rw.len() as f64;
                for (_, w) in rw {
                    assert!((w - want).abs() < 1e-9, "non-uniform row weight {w} vs {want}");
                }
            }
        }
    }

    #[test]
    fn both_downsample_strategies_build_and_run() {
        for kind in ["avg_pool2", "strided_conv3"] {
            let cfg = BackboneConfig {
                downsample: kind.into(),
                stage_channels: vec![8, 12],
                stem_channels: 6,
                ..Default::default()
            };
            let img = image(16, 16, 6);
            let (grids, _, final_grid) = forward(&cfg, &img);
            assert_eq!(grids.len(), 2);
            assert_eq!(final_grid, (2, 2));
        }
        assert!(build_downsample_check("bilinear").is_err());
    }
}
