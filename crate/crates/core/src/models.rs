//! L3UNet-2D, L3UNet-1D and the sliding-window VGG-style regressor, plus
//! checkpoint persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mipslice_nn::state::{export_state, import_state, read_f32s, write_f32s};
use mipslice_nn::{
    concat_channels, parameter_count, split_channels, BatchNorm, Conv2d, Dense, Dropout, Flatten,
    GlobalHorizontalMaxPool, Layer, LeakyRelu, MaxPool, Param, Sequential, Sigmoid, Tensor, TrainContext, Upsample,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height and width of the baseline's input window.
pub const BASELINE_CROP: (usize, usize) = (100, 512);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    L3unet2d,
    L3unet1d,
    BaselineRegression,
    BaselineRegressionDual,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::L3unet2d, Variant::L3unet1d, Variant::BaselineRegression, Variant::BaselineRegressionDual];

    /// Name used on the command line.
    pub fn cli_name(&self) -> &'static str {
        match self {
            Variant::L3unet2d => "l3unet2d",
            Variant::L3unet1d => "l3unet1d",
            Variant::BaselineRegression => "baseline",
            Variant::BaselineRegressionDual => "baseline-dual",
        }
    }

    pub fn is_unet(&self) -> bool {
        matches!(self, Variant::L3unet2d | Variant::L3unet1d)
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, Variant::BaselineRegressionDual)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l3unet2d" => Ok(Variant::L3unet2d),
            "l3unet1d" => Ok(Variant::L3unet1d),
            "baseline" | "baseline_regression" => Ok(Variant::BaselineRegression),
            "baseline-dual" | "baseline_regression_dual" => Ok(Variant::BaselineRegressionDual),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected l3unet2d, l3unet1d, baseline, baseline-dual)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.cli_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_alpha")]
    pub leaky_relu_alpha: f32,
    #[serde(default = "default_dropout")]
    pub dropout_p: f32,
    #[serde(default = "default_final_pool")]
    pub final_pool: usize,
    /// Width of the baseline's two hidden dense layers.
    #[serde(default = "default_hidden")]
    pub dense_units: usize,
}

fn default_depth() -> usize {
    5
}
fn default_base() -> usize {
    32
}
fn default_alpha() -> f32 {
    0.05
}
fn default_dropout() -> f32 {
    0.25
}
fn default_final_pool() -> usize {
    4
}
fn default_hidden() -> usize {
    4096
}

impl ModelConfig {
    /// Defaults for a variant: 32 base channels for the U-Nets, 64 for the
    /// VGG16 trunk.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            depth: default_depth(),
            base_channels: if variant.is_unet() { 32 } else { 64 },
            leaky_relu_alpha: default_alpha(),
            dropout_p: if variant.is_unet() { 0.25 } else { 0.5 },
            final_pool: default_final_pool(),
            dense_units: default_hidden(),
        }
    }

    /// Total downsampling of the U-Net encoder: `2^(depth-1) * final_pool`.
    pub fn total_factor(&self) -> usize {
        if self.variant.is_unet() {
            (1usize << (self.depth - 1)) * self.final_pool
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.is_unet() {
            if !(1..=8).contains(&self.depth) {
                return Err(Error::Config(format!("depth {} outside 1..=8", self.depth)));
            }
            if self.final_pool == 0 {
                return Err(Error::Config("final_pool must be at least 1".into()));
            }
        }
        if self.base_channels == 0 || self.dense_units == 0 {
            return Err(Error::Config("channel and unit counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if !(self.leaky_relu_alpha >= 0.0 && self.leaky_relu_alpha < 1.0) {
            return Err(Error::Config("leaky_relu_alpha must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Checks that an input of `(h, w)` pixels can be fed to the network.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if self.variant.is_unet() {
            let f = self.total_factor();
            if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
                return Err(Error::Shape(format!("input {h}x{w} is not divisible by {f}; pad it first")));
            }
        } else if (h, w) != BASELINE_CROP {
            return Err(Error::Shape(format!(
                "baseline expects {}x{} crops, got {h}x{w}",
                BASELINE_CROP.0, BASELINE_CROP.1
            )));
        }
        Ok(())
    }
}

/// 3x3 (or 3x1) conv, batch-norm, leaky ReLU.
fn conv_unit(cin: usize, cout: usize, one_d: bool, alpha: f32, rng: &mut ChaCha8Rng) -> Sequential {
    let kw = if one_d { 1 } else { 3 };
    Sequential::new()
        .with(Conv2d::new(cin, cout, 3, kw, rng))
        .with(BatchNorm::new(cout))
        .with(LeakyRelu::new(alpha))
}

fn units_at(level: usize) -> usize {
    if level == 0 {
        1
    } else {
        2
    }
}

/// Encoder-decoder with skip connections. The 1D variant reduces every skip
/// tensor and the bottleneck to width 1 by a global horizontal max-pool and
/// uses `k x 1` convolutions in the decoder.
pub struct L3UNet {
    one_d: bool,
    encoder: Vec<Sequential>,
    pools: Vec<MaxPool>,
    squeeze_skips: Vec<GlobalHorizontalMaxPool>,
    squeeze_bottom: GlobalHorizontalMaxPool,
    ups: Vec<Upsample>,
    up_channels: Vec<usize>,
    decoder: Vec<Sequential>,
    head: Sequential,
}

impl L3UNet {
    fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let one_d = cfg.variant == Variant::L3unet1d;
        let alpha = cfg.leaky_relu_alpha;
        let depth = cfg.depth;
        let widths: Vec<usize> = (0..depth).map(|l| cfg.base_channels << l).collect();
        let mut encoder = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth);
        let mut cin = 1;
        for (l, &w) in widths.iter().enumerate() {
            let mut block = Sequential::new();
            for u in 0..units_at(l) {
                block.push(conv_unit(if u == 0 { cin } else { w }, w, false, alpha, rng));
            }
            encoder.push(block);
            let p = if l + 1 == depth { cfg.final_pool } else { 2 };
            pools.push(MaxPool::new(p, p));
            cin = w;
        }

        let mut ups = Vec::with_capacity(depth);
        let mut up_channels = Vec::with_capacity(depth);
        let mut decoder = Vec::with_capacity(depth);
        let mut current = widths[depth - 1];
        for l in (0..depth).rev() {
            let f = if l + 1 == depth { cfg.final_pool } else { 2 };
            ups.push(Upsample::new(f, if one_d { 1 } else { f }));
            up_channels.push(current);
            let out = (widths[l] / 2).max(1);
            let mut block = Sequential::new();
            for u in 0..units_at(l) {
                block.push(conv_unit(if u == 0 { current + widths[l] } else { out }, out, one_d, alpha, rng));
            }
            block.push(Conv2d::new(out, out, 1, 1, rng));
            block.push(LeakyRelu::new(alpha));
            block.push(if one_d { Dropout::new(cfg.dropout_p) } else { Dropout::spatial(cfg.dropout_p) });
            decoder.push(block);
            current = out;
        }
        let head = Sequential::new().with(Conv2d::new(current, 1, 1, 1, rng)).with(Sigmoid::new());
        Self {
            one_d,
            encoder,
            pools,
            squeeze_skips: (0..depth).map(|_| GlobalHorizontalMaxPool::new()).collect(),
            squeeze_bottom: GlobalHorizontalMaxPool::new(),
            ups,
            up_channels,
            decoder,
            head,
        }
    }
}

impl Layer for L3UNet {
    fn infer(&self, x: &Tensor) -> Tensor {
        let depth = self.encoder.len();
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for l in 0..depth {
            h = self.encoder[l].infer(&h);
            skips.push(if self.one_d { self.squeeze_skips[l].infer(&h) } else { h.clone() });
            h = self.pools[l].infer(&h);
        }
        if self.one_d {
            h = self.squeeze_bottom.infer(&h);
        }
        for (i, l) in (0..depth).rev().enumerate() {
            h = self.ups[i].infer(&h);
            h = concat_channels(&h, &skips[l]);
            h = self.decoder[i].infer(&h);
        }
        self.head.infer(&h)
    }

    fn forward(&mut self, x: &Tensor, ctx: &mut TrainContext) -> Tensor {
        let depth = self.encoder.len();
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for l in 0..depth {
            h = self.encoder[l].forward(&h, ctx);
            skips.push(if self.one_d { self.squeeze_skips[l].forward(&h, ctx) } else { h.clone() });
            h = self.pools[l].forward(&h, ctx);
        }
        if self.one_d {
            h = self.squeeze_bottom.forward(&h, ctx);
        }
        for (i, l) in (0..depth).rev().enumerate() {
            h = self.ups[i].forward(&h, ctx);
            h = concat_channels(&h, &skips[l]);
            h = self.decoder[i].forward(&h, ctx);
        }
        self.head.forward(&h, ctx)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let depth = self.encoder.len();
        let mut g = self.head.backward(grad);
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; depth];
        for i in (0..depth).rev() {
            let l = depth - 1 - i;
            g = self.decoder[i].backward(&g);
            let (gu, gs) = split_channels(&g, self.up_channels[i]);
            skip_grads[l] = Some(gs);
            g = self.ups[i].backward(&gu);
        }
        if self.one_d {
            g = self.squeeze_bottom.backward(&g);
        }
        for l in (0..depth).rev() {
            g = self.pools[l].backward(&g);
            let gs = skip_grads[l].take().expect("skip gradient recorded");
            let gs = if self.one_d { self.squeeze_skips[l].backward(&gs) } else { gs };
            g += &gs;
            g = self.encoder[l].backward(&g);
        }
        g
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.iter_mut().for_each(|b| b.visit_params(f));
        self.decoder.iter_mut().for_each(|b| b.visit_params(f));
        self.head.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        self.encoder.iter_mut().for_each(|b| b.visit_buffers(f));
        self.decoder.iter_mut().for_each(|b| b.visit_buffers(f));
        self.head.visit_buffers(f);
    }

    fn clear_cache(&mut self) {
        self.encoder.iter_mut().for_each(|b| b.clear_cache());
        self.pools.iter_mut().for_each(|p| p.clear_cache());
        self.squeeze_skips.iter_mut().for_each(|p| p.clear_cache());
        self.squeeze_bottom.clear_cache();
        self.decoder.iter_mut().for_each(|b| b.clear_cache());
        self.head.clear_cache();
    }
}

/// VGG16-style trunk (13 conv layers in 5 blocks) with a dense head. Emits
/// `(n, 1, 1, 1)` row estimates, or `(n, 2, 1, 1)` with a presence logit in
/// channel 1 for the dual variant.
fn build_vgg(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Sequential {
    let b = cfg.base_channels;
    let blocks = [(2, b), (2, 2 * b), (3, 4 * b), (3, 8 * b), (3, 8 * b)];
    let mut net = Sequential::new();
    let mut cin = 1;
    let (mut h, mut w) = BASELINE_CROP;
    for (convs, width) in blocks {
        for _ in 0..convs {
            net.push(Conv2d::new(cin, width, 3, 3, rng));
            net.push(LeakyRelu::relu());
            cin = width;
        }
        net.push(MaxPool::new(2, 2));
        h /= 2;
        w /= 2;
    }
    let outputs = if cfg.variant.is_dual() { 2 } else { 1 };
    net.with(Flatten::new())
        .with(Dense::new(cin * h * w, cfg.dense_units, rng))
        .with(LeakyRelu::relu())
        .with(Dropout::new(cfg.dropout_p))
        .with(Dense::new(cfg.dense_units, cfg.dense_units, rng))
        .with(LeakyRelu::relu())
        .with(Dropout::new(cfg.dropout_p))
        .with(Dense::new(cfg.dense_units, outputs, rng))
}

/// A built network together with its configuration.
pub struct Model {
    config: ModelConfig,
    net: Box<dyn Layer>,
    parameter_count: usize,
}

impl Model {
    /// Build with weights drawn from a generator seeded by `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net: Box<dyn Layer> = if config.variant.is_unet() {
            Box::new(L3UNet::build(&config, &mut rng))
        } else {
            Box::new(build_vgg(&config, &mut rng))
        };
        let parameter_count = parameter_count(net.as_mut());
        Ok(Self { config, net, parameter_count })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.parameter_count
    }

    pub fn layer_mut(&mut self) -> &mut dyn Layer {
        self.net.as_mut()
    }

    /// Evaluation-mode forward on a `(n, 1, h, w)` batch. U-Nets return the
    /// confidence map (`(n, 1, h, w)` or `(n, 1, h, 1)`); baselines return
    /// the raw head outputs.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dim();
        if c != 1 {
            return Err(Error::Shape(format!("expected a single input channel, got {c}")));
        }
        self.config.check_input(h, w)?;
        Ok(self.net.infer(x))
    }

    pub fn export_state(&mut self) -> Vec<f32> {
        export_state(self.net.as_mut())
    }

    pub fn import_state(&mut self, state: &[f32]) -> Result<()> {
        import_state(self.net.as_mut(), state).map_err(|e| Error::Format(format!("checkpoint weights: {e}")))
    }
}

/// JSON manifest stored next to the `.bin` weights of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub variant: Variant,
    pub config: ModelConfig,
    pub parameter_count: usize,
    pub training_config_hash: String,
    pub epoch: usize,
    /// Weights file name, relative to the manifest.
    pub weights: String,
}

/// Write `<stem>.json` and `<stem>.bin`; returns the manifest path.
pub fn save_checkpoint(model: &mut Model, stem: impl AsRef<Path>, training_config_hash: &str, epoch: usize) -> Result<PathBuf> {
    let stem = stem.as_ref();
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = stem.with_extension("json");
    let bin = stem.with_extension("bin");
    let file = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    write_f32s(std::io::BufWriter::new(file), &model.export_state()).map_err(|e| Error::io(&bin, e))?;
    let manifest = CheckpointManifest {
        variant: model.variant(),
        config: model.config.clone(),
        parameter_count: model.parameter_count,
        training_config_hash: training_config_hash.to_string(),
        epoch,
        weights: bin.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
    };
    fs::write(&json, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
    Ok(json)
}

/// Load a checkpoint from its manifest path.
pub fn load_checkpoint(manifest_path: impl AsRef<Path>) -> Result<(Model, CheckpointManifest)> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.variant != manifest.config.variant {
        return Err(Error::Format(format!("{}: variant disagrees with config", path.display())));
    }
    let mut model = Model::build(manifest.config.clone(), 0)?;
    if model.parameter_count != manifest.parameter_count {
        return Err(Error::Format(format!(
            "{}: manifest lists {} parameters, architecture has {}",
            path.display(),
            manifest.parameter_count,
            model.parameter_count
        )));
    }
    let bin = path.with_file_name(&manifest.weights);
    let file = fs::File::open(&bin).map_err(|e| Error::io(&bin, e))?;
    let state = read_f32s(std::io::BufReader::new(file)).map_err(|e| Error::io(&bin, e))?;
    model.import_state(&state)?;
    Ok((model, manifest))
}
