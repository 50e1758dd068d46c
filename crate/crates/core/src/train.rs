//! SGD training of the segmenter from clip tags, heatmap masks and CRF
//! consistency, plus argmax inference.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::KeyValues;
use crate::crf::{CrfConfig, DenseCrf, PixelFeatures, UpdateMode};
use crate::error::{Error, Result};
use crate::heatmap::{binarize, BinaryMask, Heatmap, DEFAULT_MASK_RATIO};
use crate::losses::{weak_loss, KlDirection, LossReport, LossWeights, TagSet, WeakTargets, DEFAULT_LSE_R};
use crate::net::{encode_flow_stack, forward, forward_on_tape, init_weights, FlowStack, NetConfig, StreamWeights};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::synth::{ClipSample, LabelMap};
use crate::tensor::Tensor;

/// Which classes receive a heatmap localization term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeatmapMode {
    Off,
    Foreground,
    #[default]
    All,
}

impl HeatmapMode {
    /// Classes whose masks are used, given the foreground subset.
    pub fn classes(self, foreground: &[usize], num_classes: usize) -> Vec<usize> {
        match self {
            HeatmapMode::Off => Vec::new(),
            HeatmapMode::Foreground => foreground.to_vec(),
            HeatmapMode::All => (0..num_classes).collect(),
        }
    }
}

impl fmt::Display for HeatmapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeatmapMode::Off => "off",
            HeatmapMode::Foreground => "foreground",
            HeatmapMode::All => "all",
        })
    }
}

impl FromStr for HeatmapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(HeatmapMode::Off),
            "foreground" => Ok(HeatmapMode::Foreground),
            "all" => Ok(HeatmapMode::All),
            _ => Err(Error::Config(format!("heatmap mode must be off|foreground|all, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub heatmap_mode: HeatmapMode,
    pub mask_ratio: f64,
    pub crf: CrfConfig,
    /// The CRF term is evaluated on iterations divisible by this.
    pub crf_every: usize,
    pub kl_direction: KlDirection,
    pub lse_r: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            max_iterations: 3000,
            batch_size: 1,
            weights: LossWeights::default(),
            heatmap_mode: HeatmapMode::All,
            mask_ratio: DEFAULT_MASK_RATIO,
            crf: CrfConfig::default(),
            crf_every: 1,
            kl_direction: KlDirection::default(),
            lse_r: DEFAULT_LSE_R,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.crf.validate()?;
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch size must be 1, got {}", self.batch_size)));
        }
        if self.crf_every == 0 {
            return Err(Error::Config("crf_every must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio must lie in (0, 1), got {}", self.mask_ratio)));
        }
        if !(self.lse_r > 0.0 && self.lse_r.is_finite()) {
            return Err(Error::Config(format!("lse_r must be positive, got {}", self.lse_r)));
        }
        if self.weights.heatmap < 0.0 || self.weights.crf < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    fn uses_crf(&self) -> bool {
        self.weights.crf != 0.0
    }

    pub fn apply(&mut self, kv: &mut KeyValues, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        kv.take_parsed(&key("base_lr"), &mut self.sgd.base_lr)?;
        kv.take_parsed(&key("decay_interval"), &mut self.sgd.decay_interval)?;
        kv.take_parsed(&key("momentum"), &mut self.sgd.momentum)?;
        kv.take_parsed(&key("weight_decay"), &mut self.sgd.weight_decay)?;
        kv.take_parsed(&key("max_iterations"), &mut self.max_iterations)?;
        kv.take_parsed(&key("batch_size"), &mut self.batch_size)?;
        kv.take_parsed(&key("lambda_heatmap"), &mut self.weights.heatmap)?;
        kv.take_parsed(&key("lambda_crf"), &mut self.weights.crf)?;
        kv.take_parsed(&key("heatmap_mode"), &mut self.heatmap_mode)?;
        kv.take_parsed(&key("mask_ratio"), &mut self.mask_ratio)?;
        kv.take_parsed(&key("crf_every"), &mut self.crf_every)?;
        kv.take_parsed(&key("lse_r"), &mut self.lse_r)?;
        kv.take_parsed(&key("seed"), &mut self.seed)?;
        if let Some(v) = kv.take(&key("kl_direction")) {
            self.kl_direction = match v.as_str() {
                "crf_to_net" => KlDirection::CrfToNet,
                "net_to_crf" => KlDirection::NetToCrf,
                _ => return Err(Error::Config(format!("kl_direction must be crf_to_net|net_to_crf, got {v:?}"))),
            };
        }
        Ok(())
    }

    pub fn to_key_values(&self, prefix: &str) -> String {
        let kl = match self.kl_direction {
            KlDirection::CrfToNet => "crf_to_net",
            KlDirection::NetToCrf => "net_to_crf",
        };
        [
            ("base_lr", format!("{:?}", self.sgd.base_lr)),
            ("decay_interval", self.sgd.decay_interval.to_string()),
            ("momentum", format!("{:?}", self.sgd.momentum)),
            ("weight_decay", format!("{:?}", self.sgd.weight_decay)),
            ("max_iterations", self.max_iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lambda_heatmap", format!("{:?}", self.weights.heatmap)),
            ("lambda_crf", format!("{:?}", self.weights.crf)),
            ("heatmap_mode", self.heatmap_mode.to_string()),
            ("mask_ratio", format!("{:?}", self.mask_ratio)),
            ("crf_every", self.crf_every.to_string()),
            ("kl_direction", kl.to_string()),
            ("lse_r", format!("{:?}", self.lse_r)),
            ("seed", self.seed.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{prefix}{k} = {v}\n"))
        .collect()
    }
}

/// Reads `<prefix>key` CRF settings.
pub fn apply_crf_config(cfg: &mut CrfConfig, kv: &mut KeyValues, prefix: &str) -> Result<()> {
    let key = |k: &str| format!("{prefix}{k}");
    kv.take_parsed(&key("w_bilateral"), &mut cfg.w_bilateral)?;
    kv.take_parsed(&key("w_spatial"), &mut cfg.w_spatial)?;
    kv.take_parsed(&key("sigma_alpha"), &mut cfg.sigma_alpha)?;
    kv.take_parsed(&key("sigma_beta"), &mut cfg.sigma_beta)?;
    kv.take_parsed(&key("sigma_gamma"), &mut cfg.sigma_gamma)?;
    kv.take_parsed(&key("iterations"), &mut cfg.iterations)?;
    kv.take_parsed(&key("scale_sigma_alpha"), &mut cfg.scale_sigma_alpha)?;
    if let Some(v) = kv.take(&key("update_mode")) {
        cfg.update_mode = match v.as_str() {
            "parallel" => UpdateMode::Parallel,
            "sequential" => UpdateMode::Sequential,
            _ => return Err(Error::Config(format!("update_mode must be parallel|sequential, got {v:?}"))),
        };
    }
    Ok(())
}

pub fn crf_config_key_values(cfg: &CrfConfig, prefix: &str) -> String {
    let mode = match cfg.update_mode {
        UpdateMode::Parallel => "parallel",
        UpdateMode::Sequential => "sequential",
    };
    [
        ("w_bilateral", format!("{:?}", cfg.w_bilateral)),
        ("w_spatial", format!("{:?}", cfg.w_spatial)),
        ("sigma_alpha", format!("{:?}", cfg.sigma_alpha)),
        ("sigma_beta", format!("{:?}", cfg.sigma_beta)),
        ("sigma_gamma", format!("{:?}", cfg.sigma_gamma)),
        ("iterations", cfg.iterations.to_string()),
        ("scale_sigma_alpha", cfg.scale_sigma_alpha.to_string()),
        ("update_mode", mode.to_string()),
    ]
    .iter()
    .map(|(k, v)| format!("{prefix}{k} = {v}\n"))
    .collect()
}

/// Everything one training iteration needs for a clip's reference frame.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub clip_id: usize,
    pub image: Tensor,
    pub flow: Option<FlowStack>,
    pub tags: TagSet,
    pub masks: Vec<BinaryMask>,
    pub crf: Option<DenseCrf>,
}

/// Builds the training input of one clip. `heatmaps` must hold a heatmap for
/// every present class in `mask_classes`; other entries are ignored.
pub fn prepare_example(
    clip: &ClipSample,
    heatmaps: &[Heatmap],
    mask_classes: &[usize],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainingExample> {
    let t = clip.reference();
    let frame = &clip.frames[t];
    if (frame.height, frame.width) != (net_cfg.height, net_cfg.width) {
        return Err(Error::shape(format!(
            "clip {}: frames are {}×{}, network expects {}×{}",
            clip.id, frame.height, frame.width, net_cfg.height, net_cfg.width
        )));
    }
    let image = frame.to_tensor();
    let flow = if net_cfg.two_stream { Some(encode_flow_stack(&clip.flows, t, net_cfg.flow_frames)?) } else { None };
    let mut masks = Vec::new();
    for k in clip.tags.present().filter(|k| mask_classes.contains(k)) {
        let hm = heatmaps
            .iter()
            .find(|h| h.class == k)
            .ok_or_else(|| Error::Missing(format!("heatmap for {} class {k}", clip.frame_id())))?;
        masks.push(binarize(hm, net_cfg.height, net_cfg.width, cfg.mask_ratio)?);
    }
    let crf = if cfg.uses_crf() { Some(DenseCrf::new(&PixelFeatures::from_image(&image)?, &cfg.crf)?) } else { None };
    Ok(TrainingExample { clip_id: clip.id, image, flow, tags: clip.tags.clone(), masks, crf })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: StreamWeights,
    /// One row per iteration.
    pub losses: Vec<LossReport>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = format!("{}\n", LossReport::CSV_HEADER);
        for (i, r) in self.losses.iter().enumerate() {
            s.push_str(&r.csv_row(i));
            s.push('\n');
        }
        s
    }
}

/// Runs `cfg.max_iterations` SGD steps, visiting examples in a seeded
/// reshuffled order each epoch. Deterministic for a given seed.
pub fn train(examples: &[TrainingExample], net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InsufficientSamples("no training clips".into()));
    }
    let mut weights = init_weights(net_cfg, cfg.seed)?;
    let mut state = SgdState::zeros_like(&weights.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.max_iterations);
    for iter in 0..cfg.max_iterations {
        let pos = iter % examples.len();
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let ex = &examples[order[pos]];
        let mut tape = Tape::new();
        let vars = weights.params.to_tape(&mut tape);
        let image = tape.leaf(ex.image.clone());
        let flow = ex.flow.as_ref().map(|f| tape.leaf(f.channels.clone()));
        let out = forward_on_tape(&mut tape, &weights, &vars, net_cfg, image, flow)?;
        let crf_target = match &ex.crf {
            Some(crf) if iter % cfg.crf_every == 0 => Some(crf.infer(tape.value(out.probs))?),
            _ => None,
        };
        let heatmap_weight = if cfg.heatmap_mode == HeatmapMode::Off { 0.0 } else { cfg.weights.heatmap };
        let targets = WeakTargets {
            tags: &ex.tags,
            masks: &ex.masks,
            crf_target: crf_target.as_ref(),
            weights: LossWeights { heatmap: heatmap_weight, crf: cfg.weights.crf },
            lse_r: cfg.lse_r,
            kl_direction: cfg.kl_direction,
        };
        let (total, report) = weak_loss(&mut tape, out.probs, &targets)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {iter} (clip {})", ex.clip_id)));
        }
        let mut grads = tape.backward(total)?;
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
        sgd_step(&mut weights.params, &g, &mut state, &cfg.sgd, iter)?;
        if iter % 500 == 0 || iter + 1 == cfg.max_iterations {
            log::info!("iter {iter}: total {:.5} (tag {:.5})", report.total, report.tag_loss);
        }
        losses.push(report);
    }
    Ok(TrainOutcome { weights, losses })
}

/// Per-pixel argmax over channels of a 1×K×H×W (or K×H×W) tensor; ties go to
/// the lowest class id.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    let (n, k, h, w) = probs.dims4()?;
    if n != 1 || k == 0 || k > 256 {
        return Err(Error::shape(format!("cannot take labels of {:?}", probs.shape())));
    }
    let hw = h * w;
    let d = probs.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(LabelMap { height: h, width: w, labels })
}

/// Labels the reference frame of a clip, optionally refining the network's
/// probabilities with the dense CRF first.
pub fn infer(
    weights: &StreamWeights,
    net_cfg: &NetConfig,
    image: &Tensor,
    flow: Option<&FlowStack>,
    crf: Option<&CrfConfig>,
) -> Result<LabelMap> {
    let s = image.shape();
    if s.len() < 2 || s[s.len() - 2..] != [net_cfg.height, net_cfg.width] {
        return Err(Error::shape(format!(
            "image {:?} does not match the checkpoint resolution {}×{}",
            s, net_cfg.height, net_cfg.width
        )));
    }
    let (_, probs) = forward(image, flow, weights, net_cfg)?;
    let probs = match crf {
        Some(cfg) => DenseCrf::new(&PixelFeatures::from_image(image)?, cfg)?.infer(&probs)?,
        None => probs,
    };
    argmax_labels(&probs)
}

pub fn infer_clip(weights: &StreamWeights, net_cfg: &NetConfig, clip: &ClipSample, crf: Option<&CrfConfig>) -> Result<LabelMap> {
    let t = clip.reference();
    let flow = if net_cfg.two_stream { Some(encode_flow_stack(&clip.flows, t, net_cfg.flow_frames)?) } else { None };
    infer(weights, net_cfg, &clip.frames[t].to_tensor(), flow.as_ref(), crf)
}
