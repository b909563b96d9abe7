//! Toy query-based detector used for both student and teacher.
//!
//! A frozen random-feature backbone turns the image into a `G×G` grid of
//! `d_model` features. Learnable queries attend once over that grid, pass
//! through a residual MLP and feed two heads: a 2-layer projector producing
//! L2-normalized embeddings and a sigmoid box head producing
//! `(cx, cy, w, h)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxN, BoxSet};
use crate::pipeline::ImageTensor;
use crate::seed;
use crate::tensor::{matmul, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub queries: usize,
    pub d_model: usize,
    pub d_proj: usize,
    pub projector_hidden: usize,
    /// Side of the square network input, in pixels.
    pub input_size: usize,
    /// Backbone cells per side.
    pub grid: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { queries: 8, d_model: 64, d_proj: 32, projector_hidden: 64, input_size: 64, grid: 8 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.queries, self.d_model, self.d_proj, self.projector_hidden, self.input_size, self.grid];
        if dims.contains(&0) {
            return Err(Error::Config(format!("detector dimensions must be >= 1: {self:?}")));
        }
        if self.input_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not a multiple of grid {}",
                self.input_size, self.grid
            )));
        }
        Ok(())
    }

    fn ffn_hidden(&self) -> usize {
        2 * self.d_model
    }

    /// Name and shape of every learnable tensor, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (n, d, h, p, f) = (self.queries, self.d_model, self.projector_hidden, self.d_proj, self.ffn_hidden());
        vec![
            ("queries", vec![n, d]),
            ("attn.wq", vec![d, d]),
            ("attn.wk", vec![d, d]),
            ("attn.wv", vec![d, d]),
            ("attn.wo", vec![d, d]),
            ("ffn.w1", vec![d, f]),
            ("ffn.b1", vec![f]),
            ("ffn.w2", vec![f, d]),
            ("ffn.b2", vec![d]),
            ("proj.w1", vec![d, h]),
            ("proj.b1", vec![h]),
            ("proj.w2", vec![h, p]),
            ("proj.b2", vec![p]),
            ("box.w", vec![d, 4]),
            ("box.b", vec![4]),
        ]
    }
}

/// Named learnable tensors of one detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    tensors: BTreeMap<String, Tensor>,
}

impl DetectorParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        DetectorParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Errors unless names and shapes agree with `other`.
    pub fn check_compatible(&self, other: &DetectorParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Contract(format!(
                "parameter sets differ in size: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(Error::Contract(format!("parameter {name} missing from the other set"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Contract(format!(
                        "parameter {name} has shape {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Errors unless the set is exactly what `cfg` prescribes; the message
    /// carries both shapes.
    pub fn check_config(&self, cfg: &DetectorConfig) -> Result<()> {
        let expected = cfg.parameter_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(*name) {
                None => return Err(Error::Config(format!("parameter {name} missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?} but the config expects {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != expected.len() {
            return Err(Error::Config(format!(
                "{} parameters present, config expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        Ok(())
    }
}

/// Frozen patch-embedding backbone. Never placed on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    grid: usize,
    patch: usize,
    weight: Tensor,
    bias: Tensor,
    position: Tensor,
}

impl Backbone {
    pub fn new(cfg: &DetectorConfig, seed: u64) -> Self {
        let mut rng = seed::rng(&[seed, seed::stream::BACKBONE]);
        let patch = cfg.input_size / cfg.grid;
        let patch_dim = patch * patch * 3;
        let bound = (3.0 / patch_dim as f32).sqrt();
        let weight = uniform(&mut rng, &[patch_dim, cfg.d_model], bound);
        let bias = uniform(&mut rng, &[cfg.d_model], 0.1);
        let position = uniform(&mut rng, &[cfg.grid * cfg.grid, cfg.d_model], 0.5);
        Backbone { grid: cfg.grid, patch, weight, bias, position }
    }

    /// `[G² × d_model]` features, one row per cell in row-major cell order:
    /// `tanh((2·patch - 1) · W + b + position)`, pixels mapped to `[-1, 1]`.
    pub fn features(&self, img: &ImageTensor) -> Result<Tensor> {
        let side = self.grid * self.patch;
        if img.height() != side || img.width() != side {
            return Err(Error::Shape(format!(
                "backbone expects a {side}x{side} image, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let patch_dim = self.patch * self.patch * 3;
        let cells = self.grid * self.grid;
        let mut patches = Vec::with_capacity(cells * patch_dim);
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                for py in 0..self.patch {
                    for px in 0..self.patch {
                        patches.extend(img.pixel(gy * self.patch + py, gx * self.patch + px).map(|v| 2.0 * v - 1.0));
                    }
                }
            }
        }
        let patches = Tensor::matrix(cells, patch_dim, patches)?;
        let mut out = matmul(&patches, &self.weight)?;
        let d = self.bias.numel();
        for (c, row) in out.data_mut().chunks_mut(d).enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v + self.bias.data()[k] + self.position.at(c, k)).tanh();
            }
        }
        Ok(out)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Gain on the `1/sqrt(fan_in)` bound of each weight.
fn init_gain(name: &str) -> f32 {
    match name {
        // Distinct starting queries.
        "queries" => 3.0,
        // Lets attended content compete with the query residual.
        "attn.wv" | "attn.wo" => 2.0,
        // Spreads the starting boxes.
        "box.w" => 4.0,
        // The projector output is L2-normalized, so its scale only sets how far
        // each optimizer step turns it.
        n if n.starts_with("proj.") => 0.05,
        _ => 1.0,
    }
}

/// Shifts every column to zero mean, so a layer reading ReLU outputs does not
/// add the same offset to every row.
fn center_columns(t: &mut Tensor) {
    let cols = t.shape()[1];
    let rows = t.numel() / cols;
    let data = t.data_mut();
    for c in 0..cols {
        let mean = (0..rows).map(|r| data[r * cols + c] as f64).sum::<f64>() / rows as f64;
        for r in 0..rows {
            data[r * cols + c] -= mean as f32;
        }
    }
}

/// Student and teacher start identical. Weights are drawn from
/// `U(-g/sqrt(fan_in), g/sqrt(fan_in))` with a per-tensor gain `g`, queries
/// from `U(-3, 3)`, biases start at zero. Weights that read ReLU outputs are
/// column-centered.
pub fn init_pair(cfg: &DetectorConfig, seed: u64) -> Result<(DetectorParams, DetectorParams)> {
    cfg.validate()?;
    let mut rng = seed::rng(&[seed, seed::stream::STUDENT_INIT]);
    let mut tensors = BTreeMap::new();
    for (name, shape) in cfg.parameter_shapes() {
        let t = if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let fan_in = if name == "queries" { 1 } else { shape[0] };
            let mut t = uniform(&mut rng, &shape, init_gain(name) / (fan_in as f32).sqrt());
            if name == "ffn.w2" || name == "proj.w2" {
                center_columns(&mut t);
            }
            t
        };
        tensors.insert(name.to_string(), t);
    }
    let student = DetectorParams { tensors };
    let teacher = student.clone();
    Ok((student, teacher))
}

/// `θ_t ← keep·θ_t + (1 − keep)·θ_s` for every tensor.
pub fn ema_update(teacher: &mut DetectorParams, student: &DetectorParams, keep_rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&keep_rate) {
        return Err(Error::Contract(format!("keep rate {keep_rate} outside [0, 1]")));
    }
    teacher.check_compatible(student)?;
    if keep_rate == 1.0 {
        return Ok(());
    }
    for (name, t) in teacher.tensors.iter_mut() {
        let s = &student.tensors[name];
        if keep_rate == 0.0 {
            t.data_mut().copy_from_slice(s.data());
            continue;
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = (keep_rate * *tv as f64 + (1.0 - keep_rate) * sv as f64) as f32;
        }
    }
    Ok(())
}

/// Detector outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    /// `[N × d_proj]`, unit rows.
    pub embeddings: Tensor,
    pub boxes: BoxSet,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Parameters registered on a tape.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Registers every tensor as a leaf; `trainable` controls whether they
    /// receive gradients.
    pub fn register(tape: &mut Tape, params: &DetectorParams, trainable: bool) -> Self {
        let vars = params.iter().map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable))).collect();
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Points `name` at another tape variable, e.g. a probe leaf.
    pub fn replace(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Tape outputs of one image: `[N × d_proj]` embeddings and `[N × 4]` boxes.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub embeddings: Var,
    pub boxes: Var,
}

/// Records one detector pass over precomputed backbone features.
pub fn forward_on_tape(tape: &mut Tape, params: &ParamVars, features: &Tensor) -> Result<ForwardVars> {
    let d = tape.value(params.get("queries")).shape()[1];
    let feats = tape.constant(features.clone());
    let queries = params.get("queries");

    let q = tape.matmul(queries, params.get("attn.wq"))?;
    let k = tape.matmul(feats, params.get("attn.wk"))?;
    let v = tape.matmul(feats, params.get("attn.wv"))?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f32).sqrt());
    let attn = tape.masked_softmax_rows(scores, None)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.matmul(ctx, params.get("attn.wo"))?;
    let h = tape.add(queries, ctx)?;

    let f = tape.matmul(h, params.get("ffn.w1"))?;
    let f = tape.add_row_vector(f, params.get("ffn.b1"))?;
    let f = tape.relu(f);
    let f = tape.matmul(f, params.get("ffn.w2"))?;
    let f = tape.add_row_vector(f, params.get("ffn.b2"))?;
    let h = tape.add(h, f)?;

    let p = tape.matmul(h, params.get("proj.w1"))?;
    let p = tape.add_row_vector(p, params.get("proj.b1"))?;
    let p = tape.relu(p);
    let p = tape.matmul(p, params.get("proj.w2"))?;
    let p = tape.add_row_vector(p, params.get("proj.b2"))?;
    let embeddings = tape.l2_normalize_rows(p)?;

    let b = tape.matmul(h, params.get("box.w"))?;
    let b = tape.add_row_vector(b, params.get("box.b"))?;
    let boxes = tape.sigmoid(b);

    Ok(ForwardVars { embeddings, boxes })
}

/// Reads a [`ProposalSet`] back from tape values.
pub fn proposals_from_tape(tape: &Tape, out: ForwardVars, image_id: &str) -> Result<ProposalSet> {
    let embeddings = tape.value(out.embeddings).clone();
    let raw = tape.value(out.boxes);
    let boxes = raw
        .data()
        .chunks(4)
        .map(|b| BoxN::new(b[0], b[1], b[2], b[3]))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProposalSet { embeddings, boxes: BoxSet::new(image_id, boxes) })
}

/// Untracked forward pass, as used for the teacher.
pub fn forward(params: &DetectorParams, backbone: &Backbone, img: &ImageTensor) -> Result<ProposalSet> {
    let features = backbone.features(img)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let out = forward_on_tape(&mut tape, &vars, &features)?;
    proposals_from_tape(&tape, out, "")
}
