//! Procedural shape-grid scenes with paired real/synthetic renders.
//!
//! A scene is a `grid`×`grid` layout of cells, each either empty or holding a
//! colored shape. Both renders of a scene share the object layout and differ
//! only in a trailing style block plus independent per-entry noise, so a model
//! that grounds captions in object content should produce matching pooled
//! descriptors for the two branches while a caption-only model has no reason
//! to cancel the style block.
//!
//! Captions list objects in raster order as a color token followed by a shape
//! token. Batches are derived statelessly from `(seed, step)` so a training
//! run can be replayed or resumed from any step without carrying RNG state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mat::Mat;

use super::ToycapError;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const COLOR_BASE: usize = 3;
pub const N_COLORS: usize = 8;
pub const SHAPE_BASE: usize = COLOR_BASE + N_COLORS;
pub const N_SHAPES: usize = 8;
/// Toy vocabulary size. Ids above `SHAPE_BASE + N_SHAPES` are reserved.
pub const VOCAB: usize = 64;

/// Per-patch raw layout: occupancy flag, color one-hot, shape one-hot, style.
const OCCUPANCY_DIMS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    /// Grid side length; a scene has `grid * grid` patches.
    pub grid: usize,
    /// Trailing raw dims that carry the render's style vector.
    pub style_dim: usize,
    /// Half-width of the uniform noise added to every raw entry.
    pub noise: f64,
    /// Separation between the real and synthetic style vectors, per style dim.
    pub style_gap: f64,
    /// Minimum objects per scene (at least 1, at most `grid * grid`).
    pub min_objects: usize,
    /// Scenes per batch.
    pub batch: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            grid: 2,
            style_dim: 3,
            noise: 0.02,
            style_gap: 1.0,
            min_objects: 1,
            batch: 4,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<(), ToycapError> {
        if self.grid == 0 {
            return Err(ToycapError::Scene("grid must be at least 1".into()));
        }
        if self.style_dim == 0 {
            return Err(ToycapError::Scene("style_dim must be at least 1".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(ToycapError::Scene(format!("noise must be a nonnegative float, got {}", self.noise)));
        }
        if !(self.style_gap.is_finite() && self.style_gap >= 0.0) {
            return Err(ToycapError::Scene(format!("style_gap must be a nonnegative float, got {}", self.style_gap)));
        }
        if self.min_objects == 0 || self.min_objects > self.patches() {
            return Err(ToycapError::Scene(format!(
                "min_objects must lie in 1..={}, got {}",
                self.patches(),
                self.min_objects
            )));
        }
        if self.batch == 0 {
            return Err(ToycapError::Scene("batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn raw_dim(&self) -> usize {
        OCCUPANCY_DIMS + N_COLORS + N_SHAPES + self.style_dim
    }

    /// Teacher-forced sequence length: BOS plus two tokens per patch on the
    /// input side, tokens plus EOS on the target side, padded to match.
    pub fn seq_len(&self) -> usize {
        2 * self.patches() + 1
    }
}

/// One batch of paired scenes with teacher-forcing tensors.
///
/// `mask[b][t]` is true where `targets[b][t]` is padding; masked positions are
/// excluded from the caption loss and from attention aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    raw_real: Vec<Mat>,
    raw_syn: Vec<Mat>,
    inputs: Vec<Vec<usize>>,
    targets: Vec<Vec<usize>>,
    mask: Vec<Vec<bool>>,
}

impl TripletBatch {
    pub fn new(
        raw_real: Vec<Mat>,
        raw_syn: Vec<Mat>,
        inputs: Vec<Vec<usize>>,
        targets: Vec<Vec<usize>>,
        mask: Vec<Vec<bool>>,
    ) -> Result<Self, ToycapError> {
        let b = raw_real.len();
        if b == 0 {
            return Err(ToycapError::Scene("batch must hold at least one scene".into()));
        }
        for (name, len) in [
            ("raw_syn", raw_syn.len()),
            ("inputs", inputs.len()),
            ("targets", targets.len()),
            ("mask", mask.len()),
        ] {
            if len != b {
                return Err(ToycapError::Scene(format!("{name} has {len} entries for a batch of {b}")));
            }
        }
        let shape = raw_real[0].shape();
        let seq = inputs[0].len();
        for i in 0..b {
            if raw_real[i].shape() != shape || raw_syn[i].shape() != shape {
                return Err(ToycapError::Scene(format!("scene {i} patch tensors disagree on shape")));
            }
            for m in [&raw_real[i], &raw_syn[i]] {
                if m.data().iter().any(|v| !v.is_finite()) {
                    return Err(ToycapError::Scene(format!("scene {i} has a non-finite patch entry")));
                }
            }
            if inputs[i].len() != seq || targets[i].len() != seq || mask[i].len() != seq {
                return Err(ToycapError::Scene(format!("scene {i} sequences disagree on length")));
            }
            if inputs[i][0] != BOS_ID {
                return Err(ToycapError::Scene(format!("scene {i} input does not start with BOS")));
            }
            let mut seen_pad = false;
            for t in 0..seq {
                for id in [inputs[i][t], targets[i][t]] {
                    if id >= VOCAB {
                        return Err(ToycapError::Scene(format!("scene {i} token id {id} outside vocabulary")));
                    }
                }
                let masked = mask[i][t];
                if masked != (targets[i][t] == PAD_ID) {
                    return Err(ToycapError::Scene(format!("scene {i} mask disagrees with padding at step {t}")));
                }
                if seen_pad && !masked {
                    return Err(ToycapError::Scene(format!("scene {i} padding is not a contiguous suffix")));
                }
                seen_pad |= masked;
            }
            if mask[i][0] {
                return Err(ToycapError::Scene(format!("scene {i} has an empty caption")));
            }
        }
        Ok(TripletBatch { raw_real, raw_syn, inputs, targets, mask })
    }

    pub fn batch(&self) -> usize {
        self.raw_real.len()
    }

    pub fn patches(&self) -> usize {
        self.raw_real[0].rows()
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_real[0].cols()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn raw_real(&self, i: usize) -> &Mat {
        &self.raw_real[i]
    }

    pub fn raw_syn(&self, i: usize) -> &Mat {
        &self.raw_syn[i]
    }

    pub fn input_tokens(&self, i: usize) -> &[usize] {
        &self.inputs[i]
    }

    pub fn target_tokens(&self, i: usize) -> &[usize] {
        &self.targets[i]
    }

    pub fn mask(&self, i: usize) -> &[bool] {
        &self.mask[i]
    }

    /// Caption token ids without BOS, EOS, or padding.
    pub fn caption(&self, i: usize) -> Vec<usize> {
        self.targets[i]
            .iter()
            .copied()
            .take_while(|&id| id != EOS_ID && id != PAD_ID)
            .collect()
    }
}

#[derive(PartialEq)]
struct Scene {
    // (cell, color, shape), raster order.
    objects: Vec<(usize, usize, usize)>,
}

fn sample_scene(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> Scene {
    let patches = cfg.patches();
    let count = rng.random_range(cfg.min_objects..=patches);
    // Partial Fisher-Yates over cell indices, then raster order.
    let mut cells: Vec<usize> = (0..patches).collect();
    for i in 0..count {
        let j = rng.random_range(i..patches);
        cells.swap(i, j);
    }
    let mut chosen = cells[..count].to_vec();
    chosen.sort_unstable();
    let objects = chosen
        .into_iter()
        .map(|cell| (cell, rng.random_range(0..N_COLORS), rng.random_range(0..N_SHAPES)))
        .collect();
    Scene { objects }
}

fn render(cfg: &SceneGenConfig, scene: &Scene, style: f64, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(cfg.patches(), cfg.raw_dim());
    for &(cell, color, shape) in &scene.objects {
        m.set(cell, 0, 1.0);
        m.set(cell, OCCUPANCY_DIMS + color, 1.0);
        m.set(cell, OCCUPANCY_DIMS + N_COLORS + shape, 1.0);
    }
    let style_base = OCCUPANCY_DIMS + N_COLORS + N_SHAPES;
    for p in 0..cfg.patches() {
        for d in 0..cfg.style_dim {
            m.set(p, style_base + d, style);
        }
    }
    if cfg.noise > 0.0 {
        for v in m.data_mut() {
            *v += rng.random_range(-cfg.noise..cfg.noise);
        }
    }
    m
}

fn caption_tensors(cfg: &SceneGenConfig, scene: &Scene) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let seq = cfg.seq_len();
    let mut words = Vec::with_capacity(seq);
    for &(_, color, shape) in &scene.objects {
        words.push(COLOR_BASE + color);
        words.push(SHAPE_BASE + shape);
    }
    let mut input = vec![PAD_ID; seq];
    let mut target = vec![PAD_ID; seq];
    input[0] = BOS_ID;
    input[1..=words.len()].copy_from_slice(&words);
    target[..words.len()].copy_from_slice(&words);
    target[words.len()] = EOS_ID;
    let mask = target.iter().map(|&id| id == PAD_ID).collect();
    (input, target, mask)
}

/// Derives batch `step` of a run deterministically. The RNG stream index is
/// `step + 1`; stream 0 and the top stream are reserved for model init.
pub fn make_batch(cfg: &SceneGenConfig, seed: u64, step: usize) -> Result<TripletBatch, ToycapError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    let half = cfg.style_gap / 2.0;
    let mut raw_real = Vec::with_capacity(cfg.batch);
    let mut raw_syn = Vec::with_capacity(cfg.batch);
    let mut inputs = Vec::with_capacity(cfg.batch);
    let mut targets = Vec::with_capacity(cfg.batch);
    let mut mask = Vec::with_capacity(cfg.batch);
    let mut scenes: Vec<Scene> = Vec::with_capacity(cfg.batch);
    for slot in 0..cfg.batch {
        // Batch members serve as each other's contrastive negatives, so two
        // scenes with identical content would make a positive pair
        // unlearnable. Resample until this slot's content is fresh.
        let mut scene = sample_scene(cfg, &mut rng);
        let mut attempts = 0;
        while scenes.contains(&scene) {
            attempts += 1;
            if attempts > 64 {
                return Err(ToycapError::Scene(format!(
                    "could not draw a distinct scene for slot {slot}; \
                     the configuration offers too little content variety"
                )));
            }
            scene = sample_scene(cfg, &mut rng);
        }
        raw_real.push(render(cfg, &scene, half, &mut rng));
        raw_syn.push(render(cfg, &scene, -half, &mut rng));
        let (i, t, m) = caption_tensors(cfg, &scene);
        inputs.push(i);
        targets.push(t);
        mask.push(m);
        scenes.push(scene);
    }
    TripletBatch::new(raw_real, raw_syn, inputs, targets, mask)
}

pub fn make_dataset(cfg: &SceneGenConfig, seed: u64, batches: usize) -> Result<Vec<TripletBatch>, ToycapError> {
    if batches == 0 {
        return Err(ToycapError::Scene("dataset needs at least one batch".into()));
    }
    (0..batches).map(|step| make_batch(cfg, seed, step)).collect()
}
