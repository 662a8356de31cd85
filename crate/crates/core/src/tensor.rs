//! Behavior tensors and evidence masks.
//!
//! A behavior tensor holds `C` channels over a `T × H × W` spatio-temporal
//! grid, stored row-major in `(c, t, h, w)` order. An evidence mask selects
//! grid coordinates `(t, h, w)`; selection always applies to every channel
//! at that coordinate.

use crate::error::{Error, Result};

/// Shape of a behavior tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub channels: usize,
    pub time: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(channels: usize, time: usize, height: usize, width: usize) -> Result<Self> {
        let dims = Self {
            channels,
            time,
            height,
            width,
        };
        dims.validate()?;
        Ok(dims)
    }

    /// The desk-scale default `(3, 32, 8, 8)`.
    pub fn desk() -> Self {
        Self {
            channels: 3,
            time: 32,
            height: 8,
            width: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.time == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Shape(format!("every dimension must be >= 1, got {self:?}")));
        }
        self.checked_len()
            .ok_or_else(|| Error::Shape(format!("{self:?} overflows the address space")))?;
        Ok(())
    }

    pub fn checked_len(&self) -> Option<usize> {
        self.channels
            .checked_mul(self.time)?
            .checked_mul(self.height)?
            .checked_mul(self.width)
    }

    pub fn len(&self) -> usize {
        self.channels * self.time * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> GridDims {
        GridDims {
            time: self.time,
            height: self.height,
            width: self.width,
        }
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, h: usize, w: usize) -> usize {
        ((c * self.time + t) * self.height + h) * self.width + w
    }
}

/// Shape of the `T × H × W` coordinate grid shared by all channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub time: usize,
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    /// `N = T·H·W`.
    pub fn coords(&self) -> usize {
        self.time * self.height * self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.height + h) * self.width + w
    }

    /// Inverse of [`GridDims::index`].
    #[inline]
    pub fn unravel(&self, i: usize) -> (usize, usize, usize) {
        let w = i % self.width;
        let h = (i / self.width) % self.height;
        let t = i / (self.width * self.height);
        (t, h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelRole {
    AppActivity,
    TrafficVolume,
    LocationOccupancy,
    Other,
}

impl ChannelRole {
    /// Conventional role of channel `c` in generated data.
    pub fn default_for(c: usize) -> Self {
        match c {
            0 => Self::AppActivity,
            1 => Self::TrafficVolume,
            2 => Self::LocationOccupancy,
            _ => Self::Other,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::AppActivity => "app-activity",
            Self::TrafficVolume => "traffic-volume",
            Self::LocationOccupancy => "location-occupancy",
            Self::Other => "other",
        }
    }
}

/// Dense `C × T × H × W` grid of behavioral signals, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorTensor {
    dims: Dims,
    values: Vec<f32>,
    roles: Vec<ChannelRole>,
}

impl BehaviorTensor {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.len()],
            roles: (0..dims.channels).map(ChannelRole::default_for).collect(),
        }
    }

    pub fn from_values(dims: Dims, values: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} values do not fill {:?} ({} expected)",
                values.len(),
                dims,
                dims.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            dims,
            values,
            roles: (0..dims.channels).map(ChannelRole::default_for).collect(),
        })
    }

    /// Rounds `f64` values to storage precision.
    pub fn from_f64(dims: Dims, values: &[f64]) -> Result<Self> {
        Self::from_values(dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn with_roles(mut self, roles: Vec<ChannelRole>) -> Result<Self> {
        if roles.len() != self.dims.channels {
            return Err(Error::Shape(format!(
                "{} channel roles for {} channels",
                roles.len(),
                self.dims.channels
            )));
        }
        self.roles = roles;
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn roles(&self) -> &[ChannelRole] {
        &self.roles
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, h: usize, w: usize) -> f32 {
        self.values[self.dims.index(c, t, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, h: usize, w: usize, v: f32) {
        let i = self.dims.index(c, t, h, w);
        self.values[i] = v;
    }

    /// Channel index holding `role`, if any.
    pub fn channel_of(&self, role: ChannelRole) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    /// Copy with every coordinate at time `>= from` set to zero.
    pub fn truncate_time(&self, from: usize) -> Self {
        let mut out = self.clone();
        let d = self.dims;
        for c in 0..d.channels {
            for t in from.min(d.time)..d.time {
                let start = d.index(c, t, 0, 0);
                out.values[start..start + d.height * d.width].fill(0.0);
            }
        }
        out
    }
}

/// Binary selection over the `T × H × W` grid plus aligned importance
/// weights. Invariants: exactly `budget` ones, and a weight is positive
/// exactly where the binary map is set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceMask {
    grid: GridDims,
    binary: Vec<bool>,
    weights: Vec<f64>,
    budget: usize,
}

impl EvidenceMask {
    pub fn new(grid: GridDims, binary: Vec<bool>, weights: Vec<f64>) -> Result<Self> {
        let n = grid.coords();
        if binary.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "mask buffers ({}, {}) do not match grid of {n} coordinates",
                binary.len(),
                weights.len()
            )));
        }
        for (i, (&b, &w)) in binary.iter().zip(&weights).enumerate() {
            if !w.is_finite() || b != (w > 0.0) {
                return Err(Error::Shape(format!(
                    "weight {w} at coordinate {i} inconsistent with binary {b}"
                )));
            }
        }
        let budget = binary.iter().filter(|&&b| b).count();
        Ok(Self {
            grid,
            binary,
            weights,
            budget,
        })
    }

    /// Binary mask with unit weights on selected coordinates.
    pub fn from_binary(grid: GridDims, binary: Vec<bool>) -> Result<Self> {
        let weights = binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self::new(grid, binary, weights)
    }

    pub fn full(grid: GridDims) -> Self {
        Self::from_binary(grid, vec![true; grid.coords()]).expect("consistent by construction")
    }

    pub fn empty(grid: GridDims) -> Self {
        Self::from_binary(grid, vec![false; grid.coords()]).expect("consistent by construction")
    }

    pub fn grid(&self) -> GridDims {
        self.grid
    }

    pub fn binary(&self) -> &[bool] {
        &self.binary
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn is_selected(&self, t: usize, h: usize, w: usize) -> bool {
        self.binary[self.grid.index(t, h, w)]
    }

    /// `1.0` / `0.0` indicator as floats.
    pub fn indicator(&self) -> Vec<f64> {
        self.binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Element-wise masking with broadcast over channels:
/// `out(c,t,h,w) = x(c,t,h,w) · m(t,h,w)`.
pub fn apply_mask(x: &BehaviorTensor, m: &EvidenceMask) -> Result<BehaviorTensor> {
    let d = x.dims();
    if d.grid() != m.grid() {
        return Err(Error::Shape(format!(
            "mask grid {:?} does not match tensor grid {:?}",
            m.grid(),
            d.grid()
        )));
    }
    let n = m.grid().coords();
    let mut out = x.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        if !m.binary[i % n] {
            *v = 0.0;
        }
    }
    Ok(out)
}
