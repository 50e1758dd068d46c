//! Deterministic synthetic video clips: banded background regions plus a blob,
//! textured foreground objects moving at constant integer velocity, with
//! exact flow, per-frame label maps and clip tags.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::heatmap::LabeledImage;
use crate::losses::TagSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub foreground: bool,
    /// Mean RGB color, 0..=255.
    pub color: [f64; 3],
    /// Half-width of the uniform per-channel texture noise.
    pub noise: f64,
}

impl ClassSpec {
    fn new(name: &str, foreground: bool, color: [f64; 3], noise: f64) -> Self {
        ClassSpec { name: name.into(), foreground, color, noise }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Class ids are indices into this list.
    pub classes: Vec<ClassSpec>,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Objects are ellipses with axis lengths in this range (pixels).
    pub object_size_min: usize,
    pub object_size_max: usize,
    /// Velocity components are integers in `[-velocity_max, velocity_max]`.
    pub velocity_max: usize,
    pub clip_length: usize,
    /// Maximum number of horizontal background bands.
    pub max_bands: usize,
    /// Probability that a clip carries an extra background blob.
    pub blob_probability: f64,
    /// Std of Gaussian noise added to the flow (0 keeps flow exact).
    pub flow_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            classes: vec![
                ClassSpec::new("sky", false, [110.0, 160.0, 230.0], 30.0),
                ClassSpec::new("vegetation", false, [70.0, 150.0, 60.0], 30.0),
                ClassSpec::new("road", false, [120.0, 110.0, 110.0], 30.0),
                ClassSpec::new("car", true, [200.0, 60.0, 50.0], 30.0),
                ClassSpec::new("person", true, [230.0, 200.0, 70.0], 30.0),
            ],
            objects_min: 1,
            objects_max: 3,
            object_size_min: 6,
            object_size_max: 12,
            velocity_max: 1,
            clip_length: 16,
            max_bands: 3,
            blob_probability: 0.5,
            flow_noise: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn background_classes(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&k| !self.classes[k].foreground).collect()
    }

    pub fn foreground_classes(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&k| self.classes[k].foreground).collect()
    }

    /// Middle frame of the clip.
    pub fn reference_frame(&self) -> usize {
        self.clip_length / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("scene resolution must be positive".into());
        }
        if self.classes.is_empty() || self.classes.len() > 256 {
            return bad(format!("need 1..=256 classes, got {}", self.classes.len()));
        }
        if self.background_classes().is_empty() {
            return bad("at least one background class is required to tile the frame".into());
        }
        if self.objects_max > 0 && self.foreground_classes().is_empty() {
            return bad("objects requested but the palette has no foreground class".into());
        }
        if self.objects_min > self.objects_max || self.object_size_min > self.object_size_max || self.object_size_min == 0 {
            return bad("object count and size ranges must be nonempty".into());
        }
        if self.objects_max > 0 && self.object_size_max > self.height.min(self.width) {
            return bad(format!(
                "objects up to {} px cannot fit a {}×{} frame",
                self.object_size_max, self.height, self.width
            ));
        }
        if self.clip_length < 2 || self.max_bands == 0 {
            return bad("clip length must be at least 2 and max_bands positive".into());
        }
        if !(0.0..=1.0).contains(&self.blob_probability) || self.flow_noise < 0.0 {
            return bad("blob probability must lie in [0, 1] and flow noise be nonnegative".into());
        }
        for c in &self.classes {
            if c.noise < 0.0 || c.color.iter().any(|v| !(0.0..=255.0).contains(v)) {
                return bad(format!("class {}: color must lie in 0..=255 and noise be nonnegative", c.name));
            }
        }
        Ok(())
    }

    /// Reads `<prefix>key` entries; `<prefix>class.<id> = name fg|bg r g b noise`
    /// entries, when present, replace the whole palette.
    pub fn apply(&mut self, kv: &mut KeyValues, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        kv.take_parsed(&key("height"), &mut self.height)?;
        kv.take_parsed(&key("width"), &mut self.width)?;
        kv.take_parsed(&key("objects_min"), &mut self.objects_min)?;
        kv.take_parsed(&key("objects_max"), &mut self.objects_max)?;
        kv.take_parsed(&key("object_size_min"), &mut self.object_size_min)?;
        kv.take_parsed(&key("object_size_max"), &mut self.object_size_max)?;
        kv.take_parsed(&key("velocity_max"), &mut self.velocity_max)?;
        kv.take_parsed(&key("clip_length"), &mut self.clip_length)?;
        kv.take_parsed(&key("max_bands"), &mut self.max_bands)?;
        kv.take_parsed(&key("blob_probability"), &mut self.blob_probability)?;
        kv.take_parsed(&key("flow_noise"), &mut self.flow_noise)?;
        kv.take_parsed(&key("seed"), &mut self.seed)?;
        let class_prefix = key("class.");
        let class_keys = kv.keys_with_prefix(&class_prefix);
        if !class_keys.is_empty() {
            let mut classes: Vec<(usize, ClassSpec)> = Vec::new();
            for k in class_keys {
                let id: usize = k[class_prefix.len()..]
                    .parse()
                    .map_err(|_| Error::Config(format!("{k}: class key must end in an integer id")))?;
                let v = kv.take(&k).unwrap();
                classes.push((id, parse_class(&k, &v)?));
            }
            classes.sort_by_key(|(id, _)| *id);
            if classes.iter().enumerate().any(|(i, (id, _))| i != *id) {
                return Err(Error::Config("class ids must be dense 0..K-1".into()));
            }
            self.classes = classes.into_iter().map(|(_, c)| c).collect();
        }
        Ok(())
    }

    pub fn to_key_values(&self, prefix: &str) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{prefix}{k} = {v}\n"));
        line("height", self.height.to_string());
        line("width", self.width.to_string());
        line("objects_min", self.objects_min.to_string());
        line("objects_max", self.objects_max.to_string());
        line("object_size_min", self.object_size_min.to_string());
        line("object_size_max", self.object_size_max.to_string());
        line("velocity_max", self.velocity_max.to_string());
        line("clip_length", self.clip_length.to_string());
        line("max_bands", self.max_bands.to_string());
        line("blob_probability", format!("{:?}", self.blob_probability));
        line("flow_noise", format!("{:?}", self.flow_noise));
        line("seed", self.seed.to_string());
        for (i, c) in self.classes.iter().enumerate() {
            let kind = if c.foreground { "fg" } else { "bg" };
            line(
                &format!("class.{i}"),
                format!("{} {kind} {} {} {} {}", c.name, c.color[0], c.color[1], c.color[2], c.noise),
            );
        }
        s
    }
}

fn parse_class(key: &str, value: &str) -> Result<ClassSpec> {
    let f: Vec<&str> = value.split_whitespace().collect();
    let err = || Error::Config(format!("{key}: expected `name fg|bg r g b noise`, got {value:?}"));
    let [name, kind, r, g, b, noise] = f[..] else { return Err(err()) };
    let foreground = match kind {
        "fg" => true,
        "bg" => false,
        _ => return Err(err()),
    };
    let num = |s: &str| s.parse::<f64>().map_err(|_| err());
    Ok(ClassSpec { name: name.into(), foreground, color: [num(r)?, num(g)?, num(b)?], noise: num(noise)? })
}

/// Interleaved 8-bit RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// 1×3×H×W, values scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            self.data[3 * p + c] as f64 / 255.0
        })
    }
}

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

/// The exact set of class ids occurring in the map.
pub fn derive_tags(gt: &LabelMap, num_classes: usize) -> Result<TagSet> {
    let present: BTreeSet<usize> = gt.labels.iter().map(|&l| l as usize).collect();
    TagSet::new(present, num_classes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub id: usize,
    pub frames: Vec<RgbImage>,
    /// `flows[n]` maps frame n to frame n+1.
    pub flows: Vec<FlowField>,
    pub tags: TagSet,
    /// Evaluation-only ground truth; never read by training.
    pub gt: Vec<LabelMap>,
}

impl ClipSample {
    pub fn reference(&self) -> usize {
        self.frames.len() / 2
    }

    pub fn frame_id(&self) -> String {
        format!("clip_{}_{}", self.id, self.reference())
    }
}

#[derive(Clone, Debug)]
struct MovingObject {
    class: usize,
    w: usize,
    h: usize,
    x0: i64,
    y0: i64,
    vx: i64,
    vy: i64,
    /// Local coverage mask and texture (RGB), w×h.
    inside: Vec<bool>,
    texture: Vec<[u8; 3]>,
}

impl MovingObject {
    fn origin(&self, frame: usize) -> (i64, i64) {
        (self.x0 + self.vx * frame as i64, self.y0 + self.vy * frame as i64)
    }
}

fn texel<R: Rng>(rng: &mut R, class: &ClassSpec) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, &mean) in out.iter_mut().zip(&class.color) {
        let noise = if class.noise > 0.0 { rng.random_range(-class.noise..=class.noise) } else { 0.0 };
        *o = (mean + noise).round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn clip_rng(seed: u64, clip_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(clip_id as u64);
    rng
}

/// Scene state shared by all frames of one clip.
struct Scene {
    bg_labels: Vec<u8>,
    bg_colors: Vec<[u8; 3]>,
    objects: Vec<MovingObject>,
}

fn build_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let mut bg = spec.background_classes();
    bg.shuffle(rng);
    let n_bands = rng.random_range(1..=spec.max_bands.min(bg.len()).min(h));
    let mut cuts: BTreeSet<usize> = BTreeSet::new();
    while cuts.len() + 1 < n_bands {
        cuts.insert(rng.random_range(1..h));
    }
    let mut row_class = vec![0usize; h];
    let mut band = 0;
    for (y, slot) in row_class.iter_mut().enumerate() {
        if cuts.contains(&y) {
            band += 1;
        }
        *slot = bg[band];
    }
    let mut bg_labels: Vec<u8> = (0..h * w).map(|p| row_class[p / w] as u8).collect();
    if rng.random_bool(spec.blob_probability) {
        let class = *spec.background_classes().choose(rng).unwrap();
        let (cx, cy) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        let rx = rng.random_range((w / 8).max(1)..=(w / 4).max(1)) as f64;
        let ry = rng.random_range((h / 8).max(1)..=(h / 4).max(1)) as f64;
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    bg_labels[y * w + x] = class as u8;
                }
            }
        }
    }
    let bg_colors = bg_labels.iter().map(|&l| texel(rng, &spec.classes[l as usize])).collect();

    let fg = spec.foreground_classes();
    let n_objects = if spec.objects_max == 0 { 0 } else { rng.random_range(spec.objects_min..=spec.objects_max) };
    let span = (spec.clip_length - 1) as i64;
    let vmax = spec.velocity_max as i64;
    let objects = (0..n_objects)
        .map(|_| {
            let class = *fg.choose(rng).unwrap();
            let ow = rng.random_range(spec.object_size_min..=spec.object_size_max);
            let oh = rng.random_range(spec.object_size_min..=spec.object_size_max);
            let (mut vx, mut vy) = (0, 0);
            while vmax > 0 && vx == 0 && vy == 0 {
                vx = rng.random_range(-vmax..=vmax);
                vy = rng.random_range(-vmax..=vmax);
            }
            // Keep the whole trajectory inside the frame.
            let fit = |v: i64, room: i64| v.signum() * v.abs().min(room / span.max(1));
            vx = fit(vx, (w - ow) as i64);
            vy = fit(vy, (h - oh) as i64);
            let place = |v: i64, room: i64, rng: &mut ChaCha8Rng| {
                let lo = (-v * span).max(0);
                let hi = room - (v * span).max(0);
                rng.random_range(lo..=hi)
            };
            let x0 = place(vx, (w - ow) as i64, rng);
            let y0 = place(vy, (h - oh) as i64, rng);
            let (rx, ry) = (ow as f64 / 2.0, oh as f64 / 2.0);
            let inside = (0..ow * oh)
                .map(|i| {
                    let (lx, ly) = ((i % ow) as f64 + 0.5 - rx, (i / ow) as f64 + 0.5 - ry);
                    (lx / rx).powi(2) + (ly / ry).powi(2) <= 1.0
                })
                .collect();
            let texture = (0..ow * oh).map(|_| texel(rng, &spec.classes[class])).collect();
            MovingObject { class, w: ow, h: oh, x0, y0, vx, vy, inside, texture }
        })
        .collect();
    Scene { bg_labels, bg_colors, objects }
}

/// Renders one frame: colors, labels and the index of the object owning each
/// pixel (`None` for background). Later objects are drawn on top.
fn render(spec: &SceneSpec, scene: &Scene, frame: usize) -> (RgbImage, LabelMap, Vec<Option<usize>>) {
    let (h, w) = (spec.height, spec.width);
    let mut colors = scene.bg_colors.clone();
    let mut labels = scene.bg_labels.clone();
    let mut owner = vec![None; h * w];
    for (oi, o) in scene.objects.iter().enumerate() {
        let (ox, oy) = o.origin(frame);
        for ly in 0..o.h {
            for lx in 0..o.w {
                let li = ly * o.w + lx;
                if !o.inside[li] {
                    continue;
                }
                let (x, y) = (ox + lx as i64, oy + ly as i64);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let p = y as usize * w + x as usize;
                colors[p] = o.texture[li];
                labels[p] = o.class as u8;
                owner[p] = Some(oi);
            }
        }
    }
    let data = colors.iter().flat_map(|c| c.iter().copied()).collect();
    (RgbImage { height: h, width: w, data }, LabelMap { height: h, width: w, labels }, owner)
}

pub fn generate_clip(spec: &SceneSpec, clip_id: usize) -> Result<ClipSample> {
    spec.validate()?;
    let mut rng = clip_rng(spec.seed, clip_id);
    let scene = build_scene(spec, &mut rng);
    let mut frames = Vec::with_capacity(spec.clip_length);
    let mut gt = Vec::with_capacity(spec.clip_length);
    let mut flows = Vec::with_capacity(spec.clip_length - 1);
    let noise = (spec.flow_noise > 0.0).then(|| Normal::new(0.0, spec.flow_noise).unwrap());
    for n in 0..spec.clip_length {
        let (img, labels, owner) = render(spec, &scene, n);
        if n + 1 < spec.clip_length {
            let mut flow = FlowField::zeros(spec.height, spec.width);
            for (p, o) in owner.iter().enumerate() {
                let (mut u, mut v) = match o {
                    Some(oi) => (scene.objects[*oi].vx as f32, scene.objects[*oi].vy as f32),
                    None => (0.0, 0.0),
                };
                if let Some(dist) = &noise {
                    u += dist.sample(&mut rng) as f32;
                    v += dist.sample(&mut rng) as f32;
                }
                flow.set(p % spec.width, p / spec.width, u, v);
            }
            flows.push(flow);
        }
        frames.push(img);
        gt.push(labels);
    }
    let tags = derive_tags(&gt[spec.reference_frame()], spec.num_classes())?;
    Ok(ClipSample { id: clip_id, frames, flows, tags, gt })
}

/// Images of `size×size` pixels filled with one class's texture, labelled by
/// that class: the training set of the one-vs-all heatmap classifiers.
pub fn iconic_images(spec: &SceneSpec, size: usize, per_class: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * spec.num_classes());
    for (k, class) in spec.classes.iter().enumerate() {
        for _ in 0..per_class {
            let data = (0..size * size).flat_map(|_| texel(&mut rng, class)).collect();
            let img = RgbImage { height: size, width: size, data };
            out.push(LabeledImage { image: img.to_tensor(), class: k });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warping_reproduces_next_frame_on_unoccluded_pixels() {
        let spec = SceneSpec { velocity_max: 2, objects_max: 4, seed: 11, ..SceneSpec::default() };
        for clip_id in 0..6 {
            let mut rng = clip_rng(spec.seed, clip_id);
            let scene = build_scene(&spec, &mut rng);
            let clip = generate_clip(&spec, clip_id).unwrap();
            let mut checked = 0;
            for n in 0..spec.clip_length - 1 {
                let (_, _, owner_now) = render(&spec, &scene, n);
                let (_, _, owner_next) = render(&spec, &scene, n + 1);
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        let (u, v) = clip.flows[n].get(x, y);
                        let (tx, ty) = (x as i64 + u as i64, y as i64 + v as i64);
                        if tx < 0 || ty < 0 || tx >= spec.width as i64 || ty >= spec.height as i64 {
                            continue;
                        }
                        let (tx, ty) = (tx as usize, ty as usize);
                        if owner_next[ty * spec.width + tx] != owner_now[y * spec.width + x] {
                            continue;
                        }
                        assert_eq!(clip.frames[n + 1].pixel(tx, ty), clip.frames[n].pixel(x, y));
                        checked += 1;
                    }
                }
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn objects_stay_inside_the_frame() {
        let spec = SceneSpec { velocity_max: 3, objects_max: 5, object_size_max: 20, seed: 3, ..SceneSpec::default() };
        for clip_id in 0..20 {
            let mut rng = clip_rng(spec.seed, clip_id);
            let scene = build_scene(&spec, &mut rng);
            for o in &scene.objects {
                for n in [0, spec.clip_length - 1] {
                    let (x, y) = o.origin(n);
                    assert!(x >= 0 && y >= 0);
                    assert!(x as usize + o.w <= spec.width && y as usize + o.h <= spec.height);
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_spec_rejected() {
        let spec = SceneSpec { object_size_min: 40, object_size_max: 40, ..SceneSpec::default() };
        assert!(generate_clip(&spec, 0).is_err());
    }

    #[test]
    fn config_round_trip() {
        let spec = SceneSpec { seed: 99, velocity_max: 2, flow_noise: 0.25, ..SceneSpec::default() };
        let mut kv = KeyValues::parse(&spec.to_key_values("scene.")).unwrap();
        let mut back = SceneSpec { classes: vec![], ..SceneSpec::default() };
        back.apply(&mut kv, "scene.").unwrap();
        kv.finish().unwrap();
        assert_eq!(back, spec);
    }
}
