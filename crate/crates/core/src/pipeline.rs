//! End-to-end runs: dataset synthesis, heatmap cache, training, inference,
//! evaluation and the four-arm ablation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::KeyValues;
use crate::dataset::{clip_dir, gt_path, read_dataset, write_dataset, write_pgm};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::heatmap::{read_heatmap, write_heatmap, ClassifierBank, ClassifierConfig, Heatmap};
use crate::net::{NetConfig, StreamWeights};
use crate::synth::{generate_clip, iconic_images, ClipSample, LabelMap, SceneSpec};
use crate::train::{
    apply_crf_config, crf_config_key_values, infer_clip, prepare_example, train, HeatmapMode, TrainConfig,
    TrainOutcome,
};

pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Every knob of a run, read from one `key = value` file with `scene.`,
/// `net.`, `train.`, `crf.` and `heatmap.` sections.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub scene: SceneSpec,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    /// Side of the single-class images the heatmap classifiers learn from.
    pub iconic_size: usize,
    pub iconic_per_class: usize,
    /// Refine test-time predictions with the dense CRF.
    pub use_crf: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_clips: 16,
            eval_clips: 8,
            scene: SceneSpec::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            iconic_size: 16,
            iconic_per_class: 8,
            use_crf: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = RunConfig::default();
        kv.take_parsed("seed", &mut cfg.seed)?;
        kv.take_parsed("train_clips", &mut cfg.train_clips)?;
        kv.take_parsed("eval_clips", &mut cfg.eval_clips)?;
        kv.take_parsed("use_crf", &mut cfg.use_crf)?;
        kv.take_parsed("heatmap.iconic_size", &mut cfg.iconic_size)?;
        kv.take_parsed("heatmap.iconic_per_class", &mut cfg.iconic_per_class)?;
        kv.take_parsed("heatmap.patch", &mut cfg.classifier.patch)?;
        kv.take_parsed("heatmap.hidden", &mut cfg.classifier.hidden)?;
        kv.take_parsed("heatmap.init_std", &mut cfg.classifier.init_std)?;
        kv.take_parsed("heatmap.epochs", &mut cfg.classifier.epochs)?;
        kv.take_parsed("heatmap.lr", &mut cfg.classifier.sgd.base_lr)?;
        kv.take_parsed("heatmap.momentum", &mut cfg.classifier.sgd.momentum)?;
        cfg.scene.apply(&mut kv, "scene.")?;
        let explicit_net_shape = ["net.num_classes", "net.height", "net.width"].iter().any(|k| kv.contains(k));
        cfg.net.apply(&mut kv, "net.")?;
        cfg.train.apply(&mut kv, "train.")?;
        apply_crf_config(&mut cfg.train.crf, &mut kv, "crf.")?;
        kv.finish()?;
        if !explicit_net_shape {
            cfg.net.num_classes = cfg.scene.num_classes();
            cfg.net.height = cfg.scene.height;
            cfg.net.width = cfg.scene.width;
        }
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// One seed drives scene synthesis, classifier and network training.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scene.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.net.num_classes != self.scene.num_classes()
            || (self.net.height, self.net.width) != (self.scene.height, self.scene.width)
        {
            return Err(Error::Config(format!(
                "network ({} classes, {}×{}) does not match the scene ({} classes, {}×{})",
                self.net.num_classes,
                self.net.height,
                self.net.width,
                self.scene.num_classes(),
                self.scene.height,
                self.scene.width
            )));
        }
        if self.net.two_stream && crate::net::FlowStack::window(self.scene.reference_frame(), self.net.flow_frames)
            .is_none_or(|(_, last)| last + 1 >= self.scene.clip_length)
        {
            return Err(Error::Config(format!(
                "a {}-flow window around frame {} does not fit {}-frame clips",
                self.net.flow_frames,
                self.scene.reference_frame(),
                self.scene.clip_length
            )));
        }
        if self.iconic_size == 0 || self.iconic_size % self.classifier.patch != 0 || self.iconic_per_class < 2 {
            return Err(Error::Config("iconic images must be a positive multiple of the patch, ≥ 2 per class".into()));
        }
        Ok(())
    }

    /// Canonical text form; [`parse`](Self::parse) reads it back unchanged.
    pub fn to_key_values(&self) -> String {
        let mut s = format!(
            "seed = {}\ntrain_clips = {}\neval_clips = {}\nuse_crf = {}\n",
            self.seed, self.train_clips, self.eval_clips, self.use_crf
        );
        let c = &self.classifier;
        s.push_str(&format!(
            "heatmap.iconic_size = {}\nheatmap.iconic_per_class = {}\nheatmap.patch = {}\nheatmap.hidden = {}\n\
             heatmap.init_std = {:?}\nheatmap.epochs = {}\nheatmap.lr = {:?}\nheatmap.momentum = {:?}\n",
            self.iconic_size, self.iconic_per_class, c.patch, c.hidden, c.init_std, c.epochs, c.sgd.base_lr, c.sgd.momentum
        ));
        s.push_str(&self.scene.to_key_values("scene."));
        for line in self.net.to_key_values().lines() {
            s.push_str(&format!("net.{line}\n"));
        }
        s.push_str(&self.train.to_key_values("train."));
        s.push_str(&crf_config_key_values(&self.train.crf, "crf."));
        s
    }

    fn classifier_seed(&self) -> u64 {
        self.seed ^ 0x5EED_C1A5_51F1_E250
    }
}

/// Synthesizes `root/train` and `root/eval`. Eval clip ids continue after the
/// training ids so every frame id is unique.
pub fn generate_dataset(cfg: &RunConfig, root: &Path) -> Result<(Vec<ClipSample>, Vec<ClipSample>)> {
    let n = cfg.train_clips;
    let train_set = (0..n).map(|id| generate_clip(&cfg.scene, id)).collect::<Result<Vec<_>>>()?;
    let eval_set = (n..n + cfg.eval_clips).map(|id| generate_clip(&cfg.scene, id)).collect::<Result<Vec<_>>>()?;
    write_dataset(&root.join(TRAIN_SPLIT), &train_set)?;
    write_dataset(&root.join(EVAL_SPLIT), &eval_set)?;
    Ok((train_set, eval_set))
}

pub fn train_classifiers(cfg: &RunConfig) -> Result<ClassifierBank> {
    let images = iconic_images(&cfg.scene, cfg.iconic_size, cfg.iconic_per_class, cfg.classifier_seed())?;
    ClassifierBank::train(&images, cfg.scene.num_classes(), &cfg.classifier, cfg.classifier_seed())
}

/// Writes the heatmaps of every class for each clip's reference frame.
pub fn fill_heatmap_cache(bank: &ClassifierBank, clips: &[ClipSample], cache: &Path) -> Result<()> {
    for clip in clips {
        let image = clip.frames[clip.reference()].to_tensor();
        for hm in bank.heatmaps(&image)? {
            write_heatmap(cache, &clip.frame_id(), &hm)?;
        }
    }
    Ok(())
}

/// Trains on `clips` with heatmaps read from `cache` for the classes the
/// heatmap mode selects.
pub fn train_from_cache(cfg: &RunConfig, clips: &[ClipSample], cache: &Path) -> Result<TrainOutcome> {
    let mask_classes =
        cfg.train.heatmap_mode.classes(&cfg.scene.foreground_classes(), cfg.scene.num_classes());
    let examples = clips
        .iter()
        .map(|clip| {
            let heatmaps = clip
                .tags
                .present()
                .filter(|k| mask_classes.contains(k))
                .map(|k| read_heatmap(cache, &clip.frame_id(), k))
                .collect::<Result<Vec<Heatmap>>>()?;
            prepare_example(clip, &heatmaps, &mask_classes, &cfg.net, &cfg.train)
        })
        .collect::<Result<Vec<_>>>()?;
    train(&examples, &cfg.net, &cfg.train)
}

pub fn save_training(cfg: &RunConfig, outcome: &TrainOutcome, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    outcome.weights.save_checkpoint(&cfg.net, &out.join(CHECKPOINT_DIR))?;
    write_text(&out.join(LOSS_FILE), &outcome.loss_csv())?;
    write_text(&out.join(RUN_CONFIG_FILE), &cfg.to_key_values())
}

/// Reference-frame predictions for each clip.
pub fn predict(
    weights: &StreamWeights,
    net: &NetConfig,
    clips: &[ClipSample],
    crf: Option<&crate::crf::CrfConfig>,
) -> Result<Vec<LabelMap>> {
    clips.iter().map(|c| infer_clip(weights, net, c, crf)).collect()
}

/// Writes predictions in the dataset layout: `out/clip_<id>/gt_<ref>.pgm`.
pub fn write_predictions(out: &Path, clips: &[ClipSample], preds: &[LabelMap]) -> Result<()> {
    for (clip, pred) in clips.iter().zip(preds) {
        let dir = clip_dir(out, clip.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_pgm(&gt_path(&dir, clip.reference()), pred)?;
    }
    Ok(())
}

pub fn evaluate_clips(preds: &[LabelMap], clips: &[ClipSample], num_classes: usize) -> Result<MetricsReport> {
    let gt: Vec<LabelMap> = clips.iter().map(|c| c.gt[c.reference()].clone()).collect();
    evaluate(preds, &gt, num_classes)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One ablation arm and the configuration it runs with.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: &'static str,
    pub config: RunConfig,
}

/// The four arms in their expected order of quality. They differ from `base`
/// only in `train.heatmap_mode` and `net.two_stream`.
pub fn ablation_arms(base: &RunConfig) -> Vec<Arm> {
    let arm = |name, mode, two_stream| {
        let mut config = base.clone();
        config.train.heatmap_mode = mode;
        config.net.two_stream = two_stream;
        Arm { name, config }
    };
    vec![
        arm("no_heatmap", HeatmapMode::Off, false),
        arm("foreground_heatmap", HeatmapMode::Foreground, false),
        arm("our_heatmap", HeatmapMode::All, false),
        arm("two_stream", HeatmapMode::All, true),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub name: &'static str,
    pub metrics: MetricsReport,
    pub dir: PathBuf,
}

pub fn ablation_csv(results: &[ArmResult]) -> String {
    let mut s = String::from("arm,miou,mean_class_acc,global_acc\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.name, r.metrics.miou, r.metrics.mean_class_accuracy, r.metrics.global_accuracy
        ));
    }
    s
}

pub fn ablation_table(results: &[ArmResult]) -> String {
    let mut s = format!("{:<20} {:>8} {:>15} {:>11}\n", "arm", "mIoU", "mean class acc", "global acc");
    for r in results {
        s.push_str(&format!(
            "{:<20} {:>7.1}% {:>14.1}% {:>10.1}%\n",
            r.name,
            100.0 * r.metrics.miou,
            100.0 * r.metrics.mean_class_accuracy,
            100.0 * r.metrics.global_accuracy
        ));
    }
    s
}

/// Synthesizes the dataset, fills the heatmap cache, then trains and
/// evaluates each arm under `out/<arm>/`.
pub fn run_ablation(base: &RunConfig, out: &Path) -> Result<Vec<ArmResult>> {
    base.validate()?;
    let data = out.join("data");
    let cache = out.join("heatmaps");
    let (train_set, eval_set) = generate_dataset(base, &data)?;
    let bank = train_classifiers(base)?;
    fill_heatmap_cache(&bank, &train_set, &cache)?;
    let mut results = Vec::new();
    for arm in ablation_arms(base) {
        log::info!("arm {}: training", arm.name);
        let dir = out.join(arm.name);
        let outcome = train_from_cache(&arm.config, &train_set, &cache)?;
        save_training(&arm.config, &outcome, &dir)?;
        let crf = arm.config.use_crf.then_some(&arm.config.train.crf);
        let preds = predict(&outcome.weights, &arm.config.net, &eval_set, crf)?;
        write_predictions(&dir.join("predictions"), &eval_set, &preds)?;
        let metrics = evaluate_clips(&preds, &eval_set, base.scene.num_classes())?;
        write_text(&dir.join(METRICS_FILE), &metrics.to_csv())?;
        log::info!("arm {}: mIoU {:.4}", arm.name, metrics.miou);
        results.push(ArmResult { name: arm.name, metrics, dir });
    }
    write_text(&out.join(ABLATION_FILE), &ablation_csv(&results))?;
    Ok(results)
}

/// Reads a dataset split written by [`generate_dataset`].
pub fn load_split(root: &Path, num_classes: usize) -> Result<Vec<ClipSample>> {
    read_dataset(root, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(42);
        cfg.use_crf = true;
        cfg.train.crf_every = 4;
        let back = RunConfig::parse(&cfg.to_key_values()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("train.max_iteratons = 5").unwrap_err();
        assert!(err.to_string().contains("train.max_iteratons"));
    }

    #[test]
    fn net_follows_scene_shape() {
        let cfg = RunConfig::parse("scene.height = 16\nscene.width = 16\nscene.object_size_max = 8").unwrap();
        assert_eq!((cfg.net.height, cfg.net.width, cfg.net.num_classes), (16, 16, 5));
        let cfg = RunConfig::parse("scene.height = 16\nscene.width = 16\nscene.object_size_max = 8\nnet.widths = 4,8").unwrap();
        assert_eq!((cfg.net.height, cfg.net.widths.len()), (16, 2));
    }
}
