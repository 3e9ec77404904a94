//! The shared coarse-resolution solver: a small convolutional network, its
//! auxiliary input channels and the staggered ensemble built around it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvPadding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{extract_subgrid, Boundary, Field, GridSpec, StaggerFactors, SubtaskIndex};
use crate::parallel::WorkerPool;
use crate::physics::{field_tensor, ResidualOp};
use crate::snapshot::{load_tensor, save_tensor};

fn default_hidden() -> usize {
    32
}
fn default_depth() -> usize {
    4
}
fn default_kernel() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// State channel plus auxiliary channels.
    pub in_channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden_channels: usize,
    /// Number of hidden convolution layers before the output layer.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    pub padding: ConvPadding,
    #[serde(default = "default_true")]
    pub predict_delta: bool,
    /// Typical magnitude of the state; the network sees `state / state_scale`
    /// and its output is multiplied back.
    #[serde(default = "default_scale")]
    pub state_scale: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.depth == 0 || self.hidden_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("depth, hidden and input channels must be at least 1".into()));
        }
        if !(self.state_scale > 0.0 && self.state_scale.is_finite()) {
            return Err(Error::Config(format!("state scale must be positive, got {}", self.state_scale)));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for l in 0..self.depth {
            out.push((format!("conv{l}.weight"), vec![self.hidden_channels, c_in, k, k]));
            out.push((format!("conv{l}.bias"), vec![self.hidden_channels]));
            c_in = self.hidden_channels;
        }
        out.push(("head.weight".into(), vec![1, c_in, k, k]));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    /// `(C_in, C_out)` of each convolution layer.
    pub fn conv_channels(&self) -> Vec<(usize, usize)> {
        let mut layers = Vec::new();
        let mut c_in = self.in_channels;
        for _ in 0..self.depth {
            layers.push((c_in, self.hidden_channels));
            c_in = self.hidden_channels;
        }
        layers.push((c_in, 1));
        layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Kaiming-uniform hidden layers, zero biases and a zero output layer.
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.parameter_shapes();
        let head = shapes.len() - 2;
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(n, (_, shape))| {
                let len = shape.iter().product();
                if n % 2 == 1 || n >= head {
                    return Tensor::zeros(shape);
                }
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape.clone(), data).expect("parameter shape")
            })
            .collect();
        Ok(Self { spec, tensors })
    }

    pub fn from_tensors(spec: ModelSpec, tensors: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.parameter_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Length {
                expected: shapes.len(),
                got: tensors.len(),
            });
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Training(format!("parameter {name} is not finite")));
            }
        }
        Ok(Self { spec, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        self.spec.parameter_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundNetwork<'t> {
        BoundNetwork {
            spec: self.spec,
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Writes `manifest.txt` and one snapshot per tensor into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let s = &self.spec;
        let padding = match s.padding {
            ConvPadding::Periodic => "periodic",
            ConvPadding::Zero => "zero",
        };
        let mut manifest = format!(
            "stagger-checkpoint 1\nspec in_channels {}\nspec hidden_channels {}\nspec depth {}\nspec kernel_size {}\nspec padding {padding}\nspec predict_delta {}\nspec state_scale {:e}\n",
            s.in_channels, s.hidden_channels, s.depth, s.kernel_size, s.predict_delta, s.state_scale
        );
        for (name, t) in self.names().iter().zip(&self.tensors) {
            let file = format!("{name}.nstg");
            save_tensor(&dir.join(&file), t.shape(), t.data())?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {name} {} {file}\n", dims.join(",")));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let bad = |line: usize, msg: &str| Error::Config(format!("checkpoint manifest line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "stagger-checkpoint 1")) => {}
            _ => return Err(bad(0, "missing 'stagger-checkpoint 1' header")),
        }
        let mut spec: BTreeMap<String, String> = BTreeMap::new();
        let mut tensors = Vec::new();
        for (n, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => {}
                ["spec", key, value] => {
                    spec.insert(key.to_string(), value.to_string());
                }
                ["tensor", _name, dims, file] => {
                    let dims: Vec<usize> = dims
                        .split(',')
                        .map(|d| d.parse().map_err(|_| bad(n, "bad dimension")))
                        .collect::<Result<_>>()?;
                    let (got, data) = load_tensor(&dir.join(file))?;
                    if got != dims {
                        return Err(bad(n, "tensor shape disagrees with its file"));
                    }
                    tensors.push(Tensor::new(dims, data)?);
                }
                _ => return Err(bad(n, "unrecognised entry")),
            }
        }
        let get = |key: &str| {
            spec.get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint manifest lacks spec {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint spec {key} is not an integer")))
        };
        let padding = match get("padding")?.as_str() {
            "periodic" => ConvPadding::Periodic,
            "zero" => ConvPadding::Zero,
            other => return Err(Error::Config(format!("unknown padding {other}"))),
        };
        let spec = ModelSpec {
            in_channels: num("in_channels")?,
            hidden_channels: num("hidden_channels")?,
            depth: num("depth")?,
            kernel_size: num("kernel_size")?,
            padding,
            predict_delta: get("predict_delta")? == "true",
            state_scale: get("state_scale")?
                .parse()
                .map_err(|_| Error::Config("checkpoint spec state_scale is not a number".into()))?,
        };
        Self::from_tensors(spec, tensors)
    }
}

/// Parameters registered on one tape.
pub struct BoundNetwork<'t> {
    spec: ModelSpec,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundNetwork<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Runs the network on a `[in_channels, h, w]` input and returns `[1, h, w]`.
pub fn forward_var<'t>(spec: &ModelSpec, params: &[Var<'t>], input: Var<'t>) -> Result<Var<'t>> {
    let shape = input.shape();
    if shape.len() != 3 || shape[0] != spec.in_channels {
        return Err(Error::Shape {
            left: shape,
            right: vec![spec.in_channels],
            context: "model input channels",
        });
    }
    let state = input.slice(0, 0, 1)?;
    let scaled = state.scale(1.0 / spec.state_scale);
    let mut x = if spec.in_channels > 1 {
        Var::concat_channels(&[scaled, input.slice(0, 1, spec.in_channels - 1)?])?
    } else {
        scaled
    };
    for l in 0..spec.depth {
        x = x
            .conv2d(params[2 * l], spec.padding)?
            .add_channel_bias(params[2 * l + 1])?
            .gelu();
    }
    let d = spec.depth;
    let out = x
        .conv2d(params[2 * d], spec.padding)?
        .add_channel_bias(params[2 * d + 1])?
        .scale(spec.state_scale);
    if spec.predict_delta {
        state.add(out)
    } else {
        Ok(out)
    }
}

pub fn forward(params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(forward_var(&params.spec, &vars, tape.constant(input.clone()))?.value())
}

/// A coarse solver for one subtask.
pub trait CoarseSolver<'t> {
    /// Predicts subtask `index` from its `[C, h, w]` input. `source` is the
    /// `[1, H, W]` fine frame the input was cut from.
    fn predict(&self, index: SubtaskIndex, input: Var<'t>, source: Var<'t>) -> Result<Var<'t>>;
}

impl<'t> CoarseSolver<'t> for ModelParams {
    fn predict(&self, _index: SubtaskIndex, input: Var<'t>, _source: Var<'t>) -> Result<Var<'t>> {
        let tape = input.tape();
        let vars: Vec<Var<'t>> = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        forward_var(&self.spec, &vars, input)
    }
}

impl<'t> CoarseSolver<'t> for BoundNetwork<'t> {
    fn predict(&self, _index: SubtaskIndex, input: Var<'t>, _source: Var<'t>) -> Result<Var<'t>> {
        forward_var(&self.spec, &self.vars, input)
    }
}

fn default_frequencies() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    None,
    NormalizedCoords,
    SinusoidalPe,
    Vorticity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxChannelSpec {
    pub mode: AuxMode,
    #[serde(default = "default_frequencies")]
    pub pe_frequencies: usize,
}

impl Default for AuxChannelSpec {
    fn default() -> Self {
        Self {
            mode: AuxMode::None,
            pe_frequencies: default_frequencies(),
        }
    }
}

impl AuxChannelSpec {
    pub fn channel_count(&self) -> usize {
        match self.mode {
            AuxMode::None => 0,
            AuxMode::NormalizedCoords => 2,
            AuxMode::SinusoidalPe => 4 * self.pe_frequencies,
            AuxMode::Vorticity => 1,
        }
    }
}

/// Positional channels of subgrid `(i, j)` as a `[C, H/s_H, W/s_W]` tensor.
///
/// Coordinates are the fine-grid positions `(r s_H + i) / H` and
/// `(c s_W + j) / W`, row coordinate first. Sinusoidal encodings use
/// frequencies `2^f`, `f = 0..pe_frequencies`, each contributing
/// `sin y, cos y, sin x, cos x` at angle `2 pi 2^f (coordinate)`.
pub fn positional_channels(grid: &GridSpec, factors: StaggerFactors, i: usize, j: usize, spec: &AuxChannelSpec) -> Result<Tensor> {
    factors.check_grid(grid)?;
    if i >= factors.s_h || j >= factors.s_w {
        return Err(Error::Layout(format!(
            "subgrid ({i},{j}) outside factors ({},{})",
            factors.s_h, factors.s_w
        )));
    }
    let (h, w) = (grid.height / factors.s_h, grid.width / factors.s_w);
    let ycoord = |r: usize| (r * factors.s_h + i) as f64 / grid.height as f64;
    let xcoord = |c: usize| (c * factors.s_w + j) as f64 / grid.width as f64;
    let plane = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        (0..h * w).map(|n| f(ycoord(n / w), xcoord(n % w))).collect()
    };
    let mut data = Vec::new();
    match spec.mode {
        AuxMode::None => {}
        AuxMode::NormalizedCoords => {
            data.extend(plane(&|y, _| y));
            data.extend(plane(&|_, x| x));
        }
        AuxMode::SinusoidalPe => {
            for f in 0..spec.pe_frequencies {
                let omega = 2.0 * PI * (1u64 << f) as f64;
                data.extend(plane(&|y, _| (omega * y).sin()));
                data.extend(plane(&|y, _| (omega * y).cos()));
                data.extend(plane(&|_, x| (omega * x).sin()));
                data.extend(plane(&|_, x| (omega * x).cos()));
            }
        }
        AuxMode::Vorticity => {
            return Err(Error::Config(
                "vorticity auxiliary channel needs a velocity-pair state".into(),
            ))
        }
    }
    Tensor::new(vec![spec.channel_count(), h, w], data)
}

/// `d vy / dx - d vx / dy` by central differences; one-sided at walls.
pub fn discrete_curl(vx: &Field, vy: &Field, dx: f64) -> Result<Field> {
    if !vx.grid().same_shape(vy.grid()) {
        return Err(Error::Shape {
            left: vx.grid().shape().to_vec(),
            right: vy.grid().shape().to_vec(),
            context: "discrete_curl velocity components",
        });
    }
    let (h, w) = (vx.height(), vx.width());
    let periodic = vx.grid().boundary == Boundary::Periodic;
    let deriv = |f: &Field, r: usize, c: usize, along_rows: bool| -> f64 {
        let n = if along_rows { h } else { w };
        let pos = if along_rows { r } else { c };
        let at = |p: usize| if along_rows { f.at(p, c) } else { f.at(r, p) };
        if periodic {
            (at((pos + 1) % n) - at((pos + n - 1) % n)) / (2.0 * dx)
        } else if pos == 0 {
            (at(1) - at(0)) / dx
        } else if pos + 1 == n {
            (at(pos) - at(pos - 1)) / dx
        } else {
            (at(pos + 1) - at(pos - 1)) / (2.0 * dx)
        }
    };
    Field::from_fn(*vx.grid(), vx.time(), |r, c| deriv(vy, r, c, false) - deriv(vx, r, c, true))
}

/// Per-subgrid constant inputs and state masks of a staggered ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleLayout {
    grid: GridSpec,
    factors: StaggerFactors,
    aux: Vec<Tensor>,
    masks: Option<Vec<Tensor>>,
}

impl EnsembleLayout {
    /// Auxiliary channels are the positional channels followed by the
    /// equation's forcing, if any.
    pub fn new(grid: GridSpec, factors: StaggerFactors, aux: &AuxChannelSpec, op: &ResidualOp) -> Result<Self> {
        factors.check_grid(&grid)?;
        let mut tensors = Vec::new();
        let mut masks = Vec::new();
        let state_mask = op.state_mask(grid.height, grid.width);
        for i in 0..factors.s_h {
            for j in 0..factors.s_w {
                let pos = positional_channels(&grid, factors, i, j, aux)?;
                let t = match op.forcing() {
                    Some(f) => {
                        let sub = extract_subgrid(f.values(), grid.height, grid.width, factors.s_h, factors.s_w, i, j);
                        let mut data = pos.into_data();
                        data.extend(sub);
                        let (h, w) = (grid.height / factors.s_h, grid.width / factors.s_w);
                        Tensor::new(vec![data.len() / (h * w), h, w], data)?
                    }
                    None => pos,
                };
                tensors.push(t);
                if let Some(m) = &state_mask {
                    let sub = extract_subgrid(m.data(), grid.height, grid.width, factors.s_h, factors.s_w, i, j);
                    masks.push(Tensor::new(
                        vec![1, grid.height / factors.s_h, grid.width / factors.s_w],
                        sub,
                    )?);
                }
            }
        }
        Ok(Self {
            grid,
            factors,
            aux: tensors,
            masks: state_mask.map(|_| masks),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn factors(&self) -> StaggerFactors {
        self.factors
    }

    pub fn coarse_grid(&self) -> Result<GridSpec> {
        self.grid.coarsen(self.factors)
    }

    /// Channels the network receives: the state plus every auxiliary channel.
    pub fn in_channels(&self) -> usize {
        1 + self.aux[0].shape()[0]
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        i * self.factors.s_w + j
    }

    /// Network input of subgrid `(i, j)` from its `[1, h, w]` state.
    pub fn input_var<'t>(&self, state: Var<'t>, i: usize, j: usize) -> Result<Var<'t>> {
        let aux = &self.aux[self.slot(i, j)];
        if aux.shape()[0] == 0 {
            return Ok(state);
        }
        Var::concat_channels(&[state, state.tape().constant(aux.clone())])
    }

    /// Predicts one subtask, pinning wall points to zero where the equation requires it.
    pub fn predict_var<'t, S>(&self, solver: &S, index: SubtaskIndex, state: Var<'t>, source: Var<'t>) -> Result<Var<'t>>
    where
        S: CoarseSolver<'t> + ?Sized,
    {
        let input = self.input_var(state, index.i, index.j)?;
        let out = solver.predict(index, input, source)?;
        match &self.masks {
            Some(m) => out.mul(state.tape().constant(m[self.slot(index.i, index.j)].clone())),
            None => Ok(out),
        }
    }

    /// One ensemble step on the tape: `s_T` fine frames `[1, H, W]` in,
    /// the next `s_T` fine frames out.
    pub fn step_var<'t, S>(&self, solver: &S, frames: &[Var<'t>]) -> Result<Vec<Var<'t>>>
    where
        S: CoarseSolver<'t> + ?Sized,
    {
        let f = self.factors;
        if frames.len() != f.s_t {
            return Err(Error::Length {
                expected: f.s_t,
                got: frames.len(),
            });
        }
        let mut out = Vec::with_capacity(f.s_t);
        for (k, frame) in frames.iter().enumerate() {
            let mut parts = Vec::with_capacity(f.spatial_count());
            for i in 0..f.s_h {
                for j in 0..f.s_w {
                    let state = frame.subgrid(f.s_h, f.s_w, i, j)?;
                    parts.push(self.predict_var(solver, SubtaskIndex { i, j, k }, state, *frame)?);
                }
            }
            out.push(Var::interleave(&parts, f.s_h, f.s_w)?);
        }
        Ok(out)
    }

    /// Runs one subtask on its own tape.
    pub fn run_subtask<S>(&self, solver: &S, index: SubtaskIndex, state: &Tensor, source: &Tensor) -> Result<Tensor>
    where
        S: for<'t> CoarseSolver<'t> + ?Sized,
    {
        let tape = Tape::new();
        let s = tape.constant(state.clone());
        let src = tape.constant(source.clone());
        Ok(self.predict_var(solver, index, s, src)?.value())
    }

    /// One ensemble step with all `s_H s_W s_T` subtasks spread over `pool`.
    /// Prediction `k` is stamped `frames[k].time() + s_T dt`.
    pub fn step<S>(&self, solver: &S, frames: &[Field], dt: f64, pool: &WorkerPool) -> Result<Vec<Field>>
    where
        S: for<'t> CoarseSolver<'t> + Sync + ?Sized,
    {
        let f = self.factors;
        if frames.len() != f.s_t {
            return Err(Error::Length {
                expected: f.s_t,
                got: frames.len(),
            });
        }
        for frame in frames {
            if !frame.grid().same_shape(&self.grid) {
                return Err(Error::Dimension(format!(
                    "frame is {}x{}, ensemble grid is {}x{}",
                    frame.height(),
                    frame.width(),
                    self.grid.height,
                    self.grid.width
                )));
            }
        }
        let sources: Vec<Tensor> = frames.iter().map(field_tensor).collect();
        let (h, w) = (self.grid.height / f.s_h, self.grid.width / f.s_w);
        let tasks = f.subtasks();
        let results = pool.try_map(&tasks, |idx| {
            let sub = extract_subgrid(frames[idx.k].values(), self.grid.height, self.grid.width, f.s_h, f.s_w, idx.i, idx.j);
            let state = Tensor::new(vec![1, h, w], sub)?;
            self.run_subtask(solver, *idx, &state, &sources[idx.k])
        })?;
        let mut out = Vec::with_capacity(f.s_t);
        for k in 0..f.s_t {
            let tape = Tape::new();
            let parts: Vec<Var<'_>> = tasks
                .iter()
                .zip(&results)
                .filter(|(idx, _)| idx.k == k)
                .map(|(_, t)| tape.constant(t.clone()))
                .collect();
            let fine = Var::interleave(&parts, f.s_h, f.s_w)?.value();
            let time = frames[k].time() + f.s_t as f64 * dt;
            out.push(Field::new(*frames[k].grid(), fine.into_data(), time)?);
        }
        Ok(out)
    }
}
