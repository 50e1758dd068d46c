//! Two-stream segmentation network.
//!
//! Appearance and motion streams are stacks of 3×3 conv + relu blocks with
//! 2×2 max pooling between blocks. The deepest feature maps of both streams
//! are concatenated and mixed by a trainable 3×3 convolution (early fusion);
//! 1×1 score convolutions on the appearance features and on the fused
//! features are summed (late fusion), upsampled bilinearly to the input
//! resolution, and passed through a channel softmax.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::params::{gaussian_kernel, ParamSet};
use crate::tensor::Tensor;

pub const NET_CONFIG_FILE: &str = "net.cfg";

/// 2·L_f motion channels (u₁, v₁, u₂, v₂, …) for the flow fields around a
/// reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    pub reference: usize,
    pub frames: usize,
    /// 1×2L_f×H×W.
    pub channels: Tensor,
}

impl FlowStack {
    /// First and last covered flow index: `(t − ⌈L/2⌉, t + ⌊L/2⌋]`, which for
    /// even L is the symmetric window `(t − L/2, t + L/2]` and always holds
    /// exactly L frames.
    pub fn window(reference: usize, frames: usize) -> Option<(usize, usize)> {
        if frames == 0 {
            return None;
        }
        let first = (reference + 1).checked_sub(frames.div_ceil(2))?;
        Some((first, reference + frames / 2))
    }
}

/// Stacks the flow fields covering the window around `reference`;
/// `flows[n]` is the displacement from frame n to frame n+1.
pub fn encode_flow_stack(flows: &[FlowField], reference: usize, frames: usize) -> Result<FlowStack> {
    let (first, last) = FlowStack::window(reference, frames).ok_or_else(|| {
        Error::Missing(format!("flow window of {frames} frames around frame {reference} starts before frame 0"))
    })?;
    if last >= flows.len() {
        return Err(Error::Missing(format!(
            "flow window {first}..={last} needs flow {last}, clip has {} flows",
            flows.len()
        )));
    }
    let (h, w) = (flows[first].height, flows[first].width);
    let mut data = Vec::with_capacity(2 * frames * h * w);
    for f in &flows[first..=last] {
        if (f.height, f.width) != (h, w) {
            return Err(Error::shape(format!("flow fields of mixed size {h}×{w} and {}×{}", f.height, f.width)));
        }
        data.extend(f.uv.iter().step_by(2).map(|&u| u as f64));
        data.extend(f.uv.iter().skip(1).step_by(2).map(|&v| v as f64));
    }
    Ok(FlowStack { reference, frames, channels: Tensor::new(&[1, 2 * frames, h, w], data)? })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub num_classes: usize,
    /// Channel width of each conv block; pooling sits between blocks.
    pub widths: Vec<usize>,
    pub convs_per_block: usize,
    pub fusion_width: usize,
    pub height: usize,
    pub width: usize,
    /// L_f, flow fields per motion stack.
    pub flow_frames: usize,
    /// Without the motion stream the network is the appearance stream and its
    /// score layer alone.
    pub two_stream: bool,
    /// Kernels are drawn from N(0, (init_std / √fan_in)²).
    pub init_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            num_classes: 5,
            widths: vec![16, 32, 64],
            convs_per_block: 1,
            fusion_width: 64,
            height: 32,
            width: 32,
            flow_frames: 10,
            two_stream: true,
            init_std: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) || self.convs_per_block == 0 || self.fusion_width == 0 {
            return bad("need at least 2 blocks with positive widths".into());
        }
        let factor = self.upsample_factor();
        if self.height == 0 || self.width == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return bad(format!("input {}×{} must be a positive multiple of {factor}", self.height, self.width));
        }
        if self.two_stream && self.flow_frames == 0 {
            return bad("two-stream network needs at least one flow frame".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn upsample_factor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let widths = self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        writeln!(s, "num_classes = {}", self.num_classes).unwrap();
        writeln!(s, "widths = {widths}").unwrap();
        writeln!(s, "convs_per_block = {}", self.convs_per_block).unwrap();
        writeln!(s, "fusion_width = {}", self.fusion_width).unwrap();
        writeln!(s, "height = {}", self.height).unwrap();
        writeln!(s, "width = {}", self.width).unwrap();
        writeln!(s, "flow_frames = {}", self.flow_frames).unwrap();
        writeln!(s, "two_stream = {}", self.two_stream).unwrap();
        writeln!(s, "init_std = {:?}", self.init_std).unwrap();
        s
    }

    /// Reads the keys written by [`to_key_values`](Self::to_key_values);
    /// missing keys keep their current value.
    pub fn apply(&mut self, kv: &mut KeyValues, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        kv.take_parsed(&key("num_classes"), &mut self.num_classes)?;
        if let Some(v) = kv.take(&key("widths")) {
            self.widths = v
                .split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("{}: expected comma-separated integers, got {v:?}", key("widths"))))?;
        }
        kv.take_parsed(&key("convs_per_block"), &mut self.convs_per_block)?;
        kv.take_parsed(&key("fusion_width"), &mut self.fusion_width)?;
        kv.take_parsed(&key("height"), &mut self.height)?;
        kv.take_parsed(&key("width"), &mut self.width)?;
        kv.take_parsed(&key("flow_frames"), &mut self.flow_frames)?;
        kv.take_parsed(&key("two_stream"), &mut self.two_stream)?;
        kv.take_parsed(&key("init_std"), &mut self.init_std)?;
        Ok(())
    }
}

/// Every kernel and bias of the network: the parameter vector θ.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamWeights {
    pub params: ParamSet,
}

fn block_param(stream: &str, block: usize, conv: usize, what: &str) -> String {
    format!("{stream}.b{block}.c{conv}.{what}")
}

/// (name, shape) of every parameter, in storage order.
fn param_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let stream = |name: &str, in_ch: usize, out: &mut Vec<(String, Vec<usize>)>| {
        let mut c_in = in_ch;
        for (b, &width) in cfg.widths.iter().enumerate() {
            for c in 0..cfg.convs_per_block {
                out.push((block_param(name, b, c, "weight"), vec![width, c_in, 3, 3]));
                out.push((block_param(name, b, c, "bias"), vec![width]));
                c_in = width;
            }
        }
    };
    stream("app", 3, &mut out);
    let deepest = *cfg.widths.last().unwrap();
    if cfg.two_stream {
        stream("mot", 2 * cfg.flow_frames, &mut out);
        out.push(("fuse.weight".into(), vec![cfg.fusion_width, 2 * deepest, 3, 3]));
        out.push(("fuse.bias".into(), vec![cfg.fusion_width]));
    }
    out.push(("score_app.weight".into(), vec![cfg.num_classes, deepest, 1, 1]));
    out.push(("score_app.bias".into(), vec![cfg.num_classes]));
    if cfg.two_stream {
        out.push(("score_st.weight".into(), vec![cfg.num_classes, cfg.fusion_width, 1, 1]));
        out.push(("score_st.bias".into(), vec![cfg.num_classes]));
    }
    out
}

/// Deterministic for a given seed: kernels Gaussian with std
/// `init_std / √fan_in`, biases zero.
pub fn init_weights(cfg: &NetConfig, seed: u64) -> Result<StreamWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in param_layout(cfg) {
        let t = match shape[..] {
            [a, b, c, d] => gaussian_kernel(&mut rng, [a, b, c, d], cfg.init_std),
            _ => Tensor::zeros(&shape),
        };
        params.push(name, t);
    }
    Ok(StreamWeights { params })
}

impl StreamWeights {
    pub fn check(&self, cfg: &NetConfig) -> Result<()> {
        let layout = param_layout(cfg);
        if layout.len() != self.params.len() {
            return Err(Error::shape(format!(
                "config implies {} parameter tensors, weights have {}",
                layout.len(),
                self.params.len()
            )));
        }
        for ((name, shape), (have, t)) in layout.iter().zip(self.params.names().iter().zip(self.params.tensors())) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::shape(format!("expected {name} {shape:?}, found {have} {:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Writes the parameter snapshots, manifest and `net.cfg`.
    pub fn save_checkpoint(&self, cfg: &NetConfig, dir: &Path) -> Result<()> {
        self.params.save(dir)?;
        let path = dir.join(NET_CONFIG_FILE);
        fs::write(&path, cfg.to_key_values()).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(NetConfig, StreamWeights)> {
        let path = dir.join(NET_CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kv = KeyValues::parse(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut cfg = NetConfig::default();
        cfg.apply(&mut kv, "")?;
        kv.finish().map_err(|e| Error::format(&path, e.to_string()))?;
        cfg.validate()?;
        let weights = StreamWeights { params: ParamSet::load(dir)? };
        weights.check(&cfg)?;
        Ok((cfg, weights))
    }
}

/// Tape handles of the network outputs.
#[derive(Clone, Copy, Debug)]
pub struct NetOutputs {
    /// Appearance-stream class scores at feature resolution.
    pub app_scores: Var,
    /// Spatio-temporal class scores at feature resolution (two-stream only).
    pub st_scores: Option<Var>,
    /// Upsampled, fused class scores, 1×K×H×W.
    pub scores: Var,
    pub probs: Var,
}

fn run_stream(tape: &mut Tape, lookup: &dyn Fn(&str) -> Var, cfg: &NetConfig, name: &str, input: Var) -> Result<Var> {
    let mut x = input;
    for b in 0..cfg.widths.len() {
        if b > 0 {
            x = tape.maxpool2(x)?;
        }
        for c in 0..cfg.convs_per_block {
            let conv = tape.conv2d(
                x,
                lookup(&block_param(name, b, c, "weight")),
                lookup(&block_param(name, b, c, "bias")),
                1,
                1,
            )?;
            x = tape.relu(conv);
        }
    }
    Ok(x)
}

/// Records the forward pass. `params` are the tape leaves of `weights`, in
/// storage order; `image` is 1×3×H×W and `flow` 1×2L_f×H×W.
pub fn forward_on_tape(
    tape: &mut Tape,
    weights: &StreamWeights,
    params: &[Var],
    cfg: &NetConfig,
    image: Var,
    flow: Option<Var>,
) -> Result<NetOutputs> {
    let expect = |v: Var, ch: usize, what: &str, tape: &Tape| -> Result<()> {
        let s = tape.value(v).shape();
        if s != [1, ch, cfg.height, cfg.width] {
            return Err(Error::shape(format!("{what} must be [1, {ch}, {}, {}], got {s:?}", cfg.height, cfg.width)));
        }
        Ok(())
    };
    expect(image, 3, "image", tape)?;
    let lookup = |name: &str| params[weights.params.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"))];

    let app = run_stream(tape, &lookup, cfg, "app", image)?;
    let app_scores = tape.conv2d(app, lookup("score_app.weight"), lookup("score_app.bias"), 1, 0)?;
    let (fused, st_scores) = if cfg.two_stream {
        let flow = flow.ok_or_else(|| Error::invalid("two-stream network needs a flow stack"))?;
        expect(flow, 2 * cfg.flow_frames, "flow stack", tape)?;
        let mot = run_stream(tape, &lookup, cfg, "mot", flow)?;
        let both = tape.concat_channels(app, mot)?;
        let fuse = tape.conv2d(both, lookup("fuse.weight"), lookup("fuse.bias"), 1, 1)?;
        let st = tape.relu(fuse);
        let st_scores = tape.conv2d(st, lookup("score_st.weight"), lookup("score_st.bias"), 1, 0)?;
        (tape.add(app_scores, st_scores)?, Some(st_scores))
    } else {
        (app_scores, None)
    };
    let scores = tape.bilinear_upsample(fused, cfg.upsample_factor())?;
    let probs = tape.softmax_channels(scores)?;
    Ok(NetOutputs { app_scores, st_scores, scores, probs })
}

/// Class scores and probabilities, both 1×K×H×W.
pub fn forward(
    image: &Tensor,
    flow: Option<&FlowStack>,
    weights: &StreamWeights,
    cfg: &NetConfig,
) -> Result<(Tensor, Tensor)> {
    weights.check(cfg)?;
    let mut tape = Tape::new();
    let params = weights.params.to_tape(&mut tape);
    let image = tape.leaf(image.clone().reshape(&[1, 3, cfg.height, cfg.width])?);
    let flow = flow.map(|f| tape.leaf(f.channels.clone()));
    let out = forward_on_tape(&mut tape, weights, &params, cfg, image, flow)?;
    Ok((tape.value(out.scores).clone(), tape.value(out.probs).clone()))
}
