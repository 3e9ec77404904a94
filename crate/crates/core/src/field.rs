//! Regular grids, scalar fields and the staggered decomposition operators.
//!
//! A grid of `H x W` points is split into `s_H x s_W` interleaved subgrids:
//! subgrid `(i, j)` keeps every fine point whose row is `i (mod s_H)` and
//! whose column is `j (mod s_W)`. Time sequences are split the same way with
//! the single factor `s_T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used whenever two simulation times are compared.
pub const TIME_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    DirichletLid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Column spacing.
    pub dx: f64,
    /// Row spacing. Equal to `dx` on every fine grid; coarse grids scale each axis by its factor.
    pub dy: f64,
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, dx: f64, boundary: Boundary) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::Config(format!(
                "grid must be at least 2x2, got {height}x{width}"
            )));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::Config(format!("grid spacing must be positive, got {dx}")));
        }
        Ok(Self {
            height,
            width,
            dx,
            dy: dx,
            boundary,
        })
    }

    /// Unit-square periodic grid, `dx = 1 / width`.
    pub fn unit_periodic(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, 1.0 / width as f64, Boundary::Periodic)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn is_power_of_two(&self) -> bool {
        self.height.is_power_of_two() && self.width.is_power_of_two()
    }

    /// Grid of one subgrid under `factors`. Spacing grows per axis.
    pub fn coarsen(&self, factors: StaggerFactors) -> Result<GridSpec> {
        factors.check_grid(self)?;
        Ok(GridSpec {
            height: self.height / factors.s_h,
            width: self.width / factors.s_w,
            dx: self.dx * factors.s_w as f64,
            dy: self.dy * factors.s_h as f64,
            boundary: self.boundary,
        })
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Immutable scalar field on a grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Vec<f64>,
    time: f64,
}

impl Field {
    pub fn new(grid: GridSpec, values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "field on {}x{} grid needs {} values, got {}",
                grid.height,
                grid.width,
                grid.len(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite field value at index {pos}")));
        }
        Ok(Self { grid, values, time })
    }

    pub fn zeros(grid: GridSpec, time: f64) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
            time,
        }
    }

    pub fn from_fn(grid: GridSpec, time: f64, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for r in 0..grid.height {
            for c in 0..grid.width {
                values.push(f(r, c));
            }
        }
        Self::new(grid, values, time)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.width + col]
    }

    pub fn with_time(&self, time: f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.clone(),
            time,
        }
    }

    pub fn with_grid(self, grid: GridSpec) -> Result<Field> {
        Field::new(grid, self.values, self.time)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaggerFactors {
    pub s_h: usize,
    pub s_w: usize,
    pub s_t: usize,
}

impl StaggerFactors {
    pub fn new(s_h: usize, s_w: usize, s_t: usize) -> Result<Self> {
        if s_h == 0 || s_w == 0 || s_t == 0 {
            return Err(Error::Config(format!(
                "stagger factors must be positive, got ({s_h},{s_w},{s_t})"
            )));
        }
        Ok(Self { s_h, s_w, s_t })
    }

    pub fn identity() -> Self {
        Self {
            s_h: 1,
            s_w: 1,
            s_t: 1,
        }
    }

    pub fn spatial_count(&self) -> usize {
        self.s_h * self.s_w
    }

    /// Number of independent coarse subtasks, `s_H * s_W * s_T`.
    pub fn subtask_count(&self) -> usize {
        self.s_h * self.s_w * self.s_t
    }

    pub fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        if self.s_h == 0 || self.s_w == 0 || grid.height % self.s_h != 0 || grid.width % self.s_w != 0
        {
            return Err(Error::Dimension(format!(
                "factors ({}, {}) do not divide a {}x{} grid",
                self.s_h, self.s_w, grid.height, grid.width
            )));
        }
        Ok(())
    }

    /// Subtask indices in canonical order: offset `k` outermost, then row `i`, then column `j`.
    pub fn subtasks(&self) -> Vec<SubtaskIndex> {
        let mut out = Vec::with_capacity(self.subtask_count());
        for k in 0..self.s_t {
            for i in 0..self.s_h {
                for j in 0..self.s_w {
                    out.push(SubtaskIndex { i, j, k });
                }
            }
        }
        out
    }
}

/// One coarse subtask: spatial subgrid `(i, j)` at temporal offset `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubtaskIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubfieldArray {
    factors: StaggerFactors,
    subfields: Vec<Field>,
    origin_grid: GridSpec,
}

impl SubfieldArray {
    /// Assembles an array from subfields given row-major over `(i, j)`.
    pub fn new(factors: StaggerFactors, subfields: Vec<Field>, origin_grid: GridSpec) -> Result<Self> {
        factors.check_grid(&origin_grid)?;
        if subfields.len() != factors.spatial_count() {
            return Err(Error::Dimension(format!(
                "expected {} subfields, got {}",
                factors.spatial_count(),
                subfields.len()
            )));
        }
        let (h, w) = (origin_grid.height / factors.s_h, origin_grid.width / factors.s_w);
        for (n, sub) in subfields.iter().enumerate() {
            if sub.height() != h || sub.width() != w {
                return Err(Error::Dimension(format!(
                    "subfield {} is {}x{}, expected {h}x{w}",
                    n,
                    sub.height(),
                    sub.width()
                )));
            }
        }
        Ok(Self {
            factors,
            subfields,
            origin_grid,
        })
    }

    pub fn factors(&self) -> StaggerFactors {
        self.factors
    }

    pub fn origin_grid(&self) -> &GridSpec {
        &self.origin_grid
    }

    pub fn get(&self, i: usize, j: usize) -> &Field {
        &self.subfields[i * self.factors.s_w + j]
    }

    pub fn subfields(&self) -> &[Field] {
        &self.subfields
    }

    pub fn into_subfields(self) -> Vec<Field> {
        self.subfields
    }
}

/// Extracts subgrid `(i, j)` from row-major fine data.
pub fn extract_subgrid(
    values: &[f64],
    height: usize,
    width: usize,
    s_h: usize,
    s_w: usize,
    i: usize,
    j: usize,
) -> Vec<f64> {
    let (h, w) = (height / s_h, width / s_w);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let row = (r * s_h + i) * width;
        for c in 0..w {
            out.push(values[row + c * s_w + j]);
        }
    }
    out
}

pub fn decompose_spatial(field: &Field, factors: StaggerFactors) -> Result<SubfieldArray> {
    let grid = *field.grid();
    let coarse = grid.coarsen(factors)?;
    let mut subfields = Vec::with_capacity(factors.spatial_count());
    for i in 0..factors.s_h {
        for j in 0..factors.s_w {
            let values = extract_subgrid(
                field.values(),
                grid.height,
                grid.width,
                factors.s_h,
                factors.s_w,
                i,
                j,
            );
            subfields.push(Field {
                grid: coarse,
                values,
                time: field.time(),
            });
        }
    }
    Ok(SubfieldArray {
        factors,
        subfields,
        origin_grid: grid,
    })
}

pub fn reconstruct_spatial(subs: &SubfieldArray) -> Result<Field> {
    let grid = subs.origin_grid;
    let f = subs.factors;
    let (h, w) = (grid.height / f.s_h, grid.width / f.s_w);
    let time = subs.subfields[0].time();
    let mut values = vec![0.0; grid.len()];
    for i in 0..f.s_h {
        for j in 0..f.s_w {
            let sub = subs.get(i, j);
            if sub.height() != h || sub.width() != w {
                return Err(Error::Dimension(format!(
                    "subfield ({i},{j}) is {}x{}, expected {h}x{w}",
                    sub.height(),
                    sub.width()
                )));
            }
            for r in 0..h {
                for c in 0..w {
                    values[(r * f.s_h + i) * grid.width + c * f.s_w + j] = sub.values[r * w + c];
                }
            }
        }
    }
    Ok(Field { grid, values, time })
}

/// Frames `t, t + dt, t + 2 dt, ...` on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSequence {
    frames: Vec<Field>,
    dt: f64,
}

impl FieldSequence {
    pub fn new(frames: Vec<Field>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("timestep must be positive, got {dt}")));
        }
        if let Some(first) = frames.first() {
            for (n, frame) in frames.iter().enumerate() {
                if !frame.grid().same_shape(first.grid()) {
                    return Err(Error::Dimension(format!(
                        "frame {n} is {}x{}, sequence grid is {}x{}",
                        frame.height(),
                        frame.width(),
                        first.height(),
                        first.width()
                    )));
                }
                let expected = first.time() + n as f64 * dt;
                if !times_close(frame.time(), expected) {
                    return Err(Error::Layout(format!(
                        "frame {n} has time {}, expected {expected}",
                        frame.time()
                    )));
                }
            }
        }
        Ok(Self { frames, dt })
    }

    pub fn frames(&self) -> &[Field] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Field> {
        self.frames
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn first(&self) -> Option<&Field> {
        self.frames.first()
    }

    pub fn last(&self) -> Option<&Field> {
        self.frames.last()
    }

    /// Appends `other`, which must start one step after this sequence ends.
    pub fn extend(&mut self, other: FieldSequence) -> Result<()> {
        let mut frames = std::mem::take(&mut self.frames);
        frames.extend(other.frames);
        *self = FieldSequence::new(frames, self.dt)?;
        Ok(())
    }
}

pub fn times_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIME_TOLERANCE * (1.0 + a.abs().max(b.abs()))
}

pub fn decompose_temporal(seq: &FieldSequence, s_t: usize) -> Result<Vec<(usize, Field)>> {
    if seq.len() != s_t {
        return Err(Error::Length {
            expected: s_t,
            got: seq.len(),
        });
    }
    Ok(seq.frames.iter().cloned().enumerate().collect())
}

/// Orders predictions by offset and checks that they form one consecutive block.
pub fn interleave_temporal(
    mut predictions: Vec<(usize, Field)>,
    s_t: usize,
    dt: f64,
) -> Result<FieldSequence> {
    if predictions.len() != s_t {
        return Err(Error::Layout(format!(
            "expected {s_t} predictions, got {}",
            predictions.len()
        )));
    }
    predictions.sort_by_key(|(k, _)| *k);
    for (n, (k, _)) in predictions.iter().enumerate() {
        if *k != n {
            return Err(Error::Layout(format!(
                "offsets must be exactly 0..{s_t}, found duplicate or missing offset near {k}"
            )));
        }
    }
    FieldSequence::new(predictions.into_iter().map(|(_, f)| f).collect(), dt)
}

/// Splits a sequence whose length is a multiple of `s_t` into the `s_t`
/// coarse-time streams: stream `k` holds frames `k, k + s_t, ...` spaced `s_t dt`.
pub fn split_temporal(seq: &FieldSequence, s_t: usize) -> Result<Vec<FieldSequence>> {
    if s_t == 0 || seq.is_empty() || seq.len() % s_t != 0 {
        return Err(Error::Length {
            expected: seq.len().div_ceil(s_t.max(1)) * s_t.max(1),
            got: seq.len(),
        });
    }
    (0..s_t)
        .map(|k| FieldSequence::new(seq.frames.iter().skip(k).step_by(s_t).cloned().collect(), seq.dt * s_t as f64))
        .collect()
}

/// Inverse of [`split_temporal`].
pub fn merge_temporal(streams: &[FieldSequence]) -> Result<FieldSequence> {
    let s_t = streams.len();
    let first = streams.first().ok_or_else(|| Error::Layout("no streams to merge".into()))?;
    if streams.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Layout("streams differ in length".into()));
    }
    let mut frames = Vec::with_capacity(s_t * first.len());
    for n in 0..first.len() {
        for s in streams {
            frames.push(s.frames[n].clone());
        }
    }
    FieldSequence::new(frames, first.dt / s_t as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Field {
        let grid = GridSpec::unit_periodic(h, w).unwrap();
        Field::new(grid, (0..h * w).map(|v| v as f64).collect(), 0.0).unwrap()
    }

    #[test]
    fn four_by_four_splits_into_four() {
        let subs = decompose_spatial(&ramp(4, 4), StaggerFactors::new(2, 2, 1).unwrap()).unwrap();
        assert_eq!(subs.subfields().len(), 4);
        assert_eq!(subs.get(0, 0).values(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(subs.get(1, 1).values(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(subs.get(0, 0).grid().dx, 0.5);
        assert_eq!(reconstruct_spatial(&subs).unwrap(), ramp(4, 4));
    }

    #[test]
    fn identity_factors() {
        let f = ramp(3, 5);
        let subs = decompose_spatial(&f, StaggerFactors::identity()).unwrap();
        assert_eq!(subs.get(0, 0).values(), f.values());
        assert_eq!(reconstruct_spatial(&subs).unwrap(), f);
    }

    #[test]
    fn non_divisible_factors_rejected() {
        let err = decompose_spatial(&ramp(4, 6), StaggerFactors::new(3, 2, 1).unwrap());
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn mismatched_subfields_rejected() {
        let grid = GridSpec::unit_periodic(4, 4).unwrap();
        let small = Field::zeros(GridSpec::unit_periodic(2, 2).unwrap(), 0.0);
        let odd = Field::zeros(GridSpec::unit_periodic(2, 3).unwrap(), 0.0);
        let res = SubfieldArray::new(
            StaggerFactors::new(2, 2, 1).unwrap(),
            vec![small.clone(), small.clone(), small, odd],
            grid,
        );
        assert!(matches!(res, Err(Error::Dimension(_))));
    }

    fn seq(times: &[f64], dt: f64) -> FieldSequence {
        let grid = GridSpec::unit_periodic(2, 2).unwrap();
        let frames = times
            .iter()
            .enumerate()
            .map(|(n, t)| Field::new(grid, vec![n as f64; 4], *t).unwrap())
            .collect();
        FieldSequence::new(frames, dt).unwrap()
    }

    #[test]
    fn temporal_offsets_follow_frames() {
        let s = seq(&[0.0, 0.01, 0.02], 0.01);
        let pairs = decompose_temporal(&s, 3).unwrap();
        let times: Vec<f64> = pairs.iter().map(|(_, f)| f.time()).collect();
        assert_eq!(pairs.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(times, vec![0.0, 0.01, 0.02]);
        assert!(matches!(decompose_temporal(&s, 2), Err(Error::Length { .. })));
    }

    #[test]
    fn interleave_sorts_and_validates() {
        let s = seq(&[0.1, 0.2], 0.1);
        let mut pairs = decompose_temporal(&s, 2).unwrap();
        pairs.reverse();
        let out = interleave_temporal(pairs, 2, 0.1).unwrap();
        assert_eq!(out, s);

        let dup = vec![(0, s.frames()[0].clone()), (0, s.frames()[1].clone())];
        assert!(matches!(interleave_temporal(dup, 2, 0.1), Err(Error::Layout(_))));
        let missing = vec![(1, s.frames()[1].clone())];
        assert!(matches!(interleave_temporal(missing, 2, 0.1), Err(Error::Layout(_))));
    }

    #[test]
    fn sequence_rejects_bad_spacing() {
        let grid = GridSpec::unit_periodic(2, 2).unwrap();
        let frames = vec![Field::zeros(grid, 0.0), Field::zeros(grid, 0.3)];
        assert!(FieldSequence::new(frames, 0.1).is_err());
    }

    fn factor_and_field() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..=3, 1usize..=3).prop_flat_map(|(sh, sw)| {
            let (h, w) = (sh * 2, sw * 3);
            (
                Just(sh),
                Just(sw),
                proptest::collection::vec(-1e3f64..1e3, h * w),
            )
        })
    }

    proptest! {
        #[test]
        fn spatial_round_trip_is_exact((sh, sw, vals) in factor_and_field()) {
            let grid = GridSpec::unit_periodic(sh * 2, sw * 3).unwrap();
            let f = Field::new(grid, vals, 0.5).unwrap();
            let factors = StaggerFactors::new(sh, sw, 1).unwrap();
            let subs = decompose_spatial(&f, factors).unwrap();
            for i in 0..sh {
                for j in 0..sw {
                    let sub = subs.get(i, j);
                    for r in 0..sub.height() {
                        for c in 0..sub.width() {
                            prop_assert_eq!(sub.at(r, c), f.at(r * sh + i, c * sw + j));
                        }
                    }
                }
            }
            let mut all: Vec<f64> = subs.subfields().iter().flat_map(|s| s.values().to_vec()).collect();
            let mut orig = f.values().to_vec();
            all.sort_by(f64::total_cmp);
            orig.sort_by(f64::total_cmp);
            prop_assert_eq!(all, orig);
            prop_assert_eq!(reconstruct_spatial(&subs).unwrap(), f);
        }

        #[test]
        fn temporal_round_trip(vals in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let grid = GridSpec::unit_periodic(2, 2).unwrap();
            let frames: Vec<Field> = (0..3)
                .map(|n| Field::new(grid, vals[n * 4..n * 4 + 4].to_vec(), n as f64 * 0.01).unwrap())
                .collect();
            let s = FieldSequence::new(frames, 0.01).unwrap();
            let shifted: Vec<(usize, Field)> = decompose_temporal(&s, 3)
                .unwrap()
                .into_iter()
                .map(|(k, f)| (k, f.with_time(f.time() + 0.03)))
                .collect();
            let out = interleave_temporal(shifted, 3, 0.01).unwrap();
            for (a, b) in out.frames().iter().zip(s.frames()) {
                prop_assert_eq!(a.values(), b.values());
            }
        }
    }

    #[test]
    fn split_merge_temporal() {
        let g = GridSpec::unit_periodic(2, 2).unwrap();
        let frames: Vec<Field> = (0..6).map(|n| Field::from_fn(g, n as f64 * 0.1, |r, c| (n * 4 + r * 2 + c) as f64).unwrap()).collect();
        let seq = FieldSequence::new(frames, 0.1).unwrap();
        let streams = split_temporal(&seq, 3).unwrap();
        assert_eq!(streams[1].frames()[1].at(0, 0), 16.0);
        assert!((streams[2].dt() - 0.3).abs() < 1e-15);
        assert_eq!(merge_temporal(&streams).unwrap().frames(), seq.frames());
        assert!(split_temporal(&seq, 4).is_err());
    }
}
