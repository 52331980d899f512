//! Euclidean TSP instances, tours and the unit-square symmetry group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TourError};

pub type Point = [f64; 2];

/// Euclidean distance between two points.
#[inline]
pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Original coordinate frame of a normalized instance: `original = normalized * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub offset: Point,
    pub scale: f64,
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        offset: [0.0, 0.0],
        scale: 1.0,
    };

    pub fn to_original(&self, p: Point) -> Point {
        [
            p[0] * self.scale + self.offset[0],
            p[1] * self.scale + self.offset[1],
        ]
    }
}

/// A complete undirected Euclidean graph given by node coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRecord", into = "InstanceRecord")]
pub struct Instance {
    name: Option<String>,
    coords: Vec<Point>,
    source_frame: Option<Frame>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    #[serde(default)]
    name: Option<String>,
    coords: Vec<Point>,
}

impl TryFrom<InstanceRecord> for Instance {
    type Error = Error;

    fn try_from(r: InstanceRecord) -> Result<Self> {
        let mut inst = Instance::new(r.coords)?;
        inst.name = r.name;
        Ok(inst)
    }
}

impl From<Instance> for InstanceRecord {
    fn from(i: Instance) -> Self {
        InstanceRecord {
            name: i.name,
            coords: i.coords,
        }
    }
}

impl Instance {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::param(format!(
                "an instance needs at least 2 nodes, got {}",
                coords.len()
            )));
        }
        if let Some(i) = coords
            .iter()
            .position(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(Error::NonFinite(format!("coordinates of node {i}")));
        }
        Ok(Instance {
            name: None,
            coords,
            source_frame: None,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Frame of the original coordinates if this instance was produced by
    /// [`normalize_to_unit_square`].
    pub fn source_frame(&self) -> Option<Frame> {
        self.source_frame
    }

    #[inline]
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        distance(self.coords[i], self.coords[j])
    }

    pub fn is_normalized(&self) -> bool {
        self.coords
            .iter()
            .all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]))
    }

    /// Returns an error naming the first node outside the unit square.
    pub fn require_normalized(&self) -> Result<()> {
        match self
            .coords
            .iter()
            .position(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
        {
            None => Ok(()),
            Some(node) => Err(Error::NotNormalized {
                node,
                x: self.coords[node][0],
                y: self.coords[node][1],
            }),
        }
    }

    /// Instance with every coordinate mapped through `f`.
    pub fn map_coords(&self, f: impl Fn(Point) -> Point) -> Result<Instance> {
        let mut out = Instance::new(self.coords.iter().map(|&p| f(p)).collect())?;
        out.name = self.name.clone();
        Ok(out)
    }

    /// Instance with nodes relabelled so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Instance> {
        validate_tour(self, perm)?;
        let mut out = Instance::new(perm.iter().map(|&i| self.coords[i]).collect())?;
        out.name = self.name.clone();
        Ok(out)
    }
}

/// A closed tour with its cached length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tour {
    order: Vec<usize>,
    length: f64,
}

impl Tour {
    pub fn new(instance: &Instance, order: Vec<usize>) -> Result<Self> {
        let length = tour_length(instance, &order)?;
        Ok(Tour { order, length })
    }

    /// Trusted constructor for orders already known to be permutations.
    pub(crate) fn from_parts(order: Vec<usize>, length: f64) -> Self {
        Tour { order, length }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn into_order(self) -> Vec<usize> {
        self.order
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn reward(&self) -> f64 {
        -self.length
    }
}

/// Checks that `order` is a permutation of `0..instance.len()`.
pub fn validate_tour(instance: &Instance, order: &[usize]) -> Result<(), TourError> {
    validate_permutation(instance.len(), order)
}

pub fn validate_permutation(n: usize, order: &[usize]) -> Result<(), TourError> {
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n {
            return Err(TourError::OutOfRange { index: i, n });
        }
        if seen[i] {
            return Err(TourError::Duplicate { index: i });
        }
        seen[i] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(index) => Err(TourError::Missing { index }),
        None => Ok(()),
    }
}

/// Length of the closed tour, including the edge back to the first node.
pub fn tour_length(instance: &Instance, order: &[usize]) -> Result<f64> {
    validate_tour(instance, order)?;
    Ok(closed_length(instance, order))
}

/// Closed tour length without validation. Callers guarantee `order` is a permutation.
pub(crate) fn closed_length(instance: &Instance, order: &[usize]) -> f64 {
    let n = order.len();
    let mut total = instance.cost(order[n - 1], order[0]);
    for w in order.windows(2) {
        total += instance.cost(w[0], w[1]);
    }
    total
}

/// Canonical form of a cyclic tour: smallest index rotated to the front, then the
/// lexicographically smaller of the two directions.
pub fn canonical_order(order: &[usize]) -> Vec<usize> {
    if order.is_empty() {
        return Vec::new();
    }
    let n = order.len();
    let pos = order
        .iter()
        .enumerate()
        .min_by_key(|&(_, &v)| v)
        .map(|(i, _)| i)
        .unwrap();
    let forward: Vec<usize> = (0..n).map(|k| order[(pos + k) % n]).collect();
    let backward: Vec<usize> = (0..n).map(|k| order[(pos + n - k) % n]).collect();
    forward.min(backward)
}

/// The eight isometries of the unit square, in their fixed feature order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symmetry {
    Identity,
    Transpose,
    FlipY,
    RotateY,
    FlipX,
    RotateX,
    FlipBoth,
    AntiTranspose,
}

impl Symmetry {
    pub const ALL: [Symmetry; 8] = [
        Symmetry::Identity,
        Symmetry::Transpose,
        Symmetry::FlipY,
        Symmetry::RotateY,
        Symmetry::FlipX,
        Symmetry::RotateX,
        Symmetry::FlipBoth,
        Symmetry::AntiTranspose,
    ];

    #[inline]
    pub fn apply(self, p: Point) -> Point {
        let [x, y] = p;
        match self {
            Symmetry::Identity => [x, y],
            Symmetry::Transpose => [y, x],
            Symmetry::FlipY => [x, 1.0 - y],
            Symmetry::RotateY => [y, 1.0 - x],
            Symmetry::FlipX => [1.0 - x, y],
            Symmetry::RotateX => [1.0 - y, x],
            Symmetry::FlipBoth => [1.0 - x, 1.0 - y],
            Symmetry::AntiTranspose => [1.0 - y, 1.0 - x],
        }
    }

    /// The transform equal to applying `self` after `first`, found by probing
    /// two points that pin down any isometry of the square.
    pub fn compose(self, first: Symmetry) -> Symmetry {
        let probes = [[0.25, 0.125], [0.625, 0.875]];
        let target: Vec<Point> = probes.iter().map(|&p| self.apply(first.apply(p))).collect();
        *Symmetry::ALL
            .iter()
            .find(|s| {
                probes
                    .iter()
                    .zip(&target)
                    .all(|(&p, t)| s.apply(p) == *t)
            })
            .expect("the square symmetry group is closed under composition")
    }
}

/// All eight symmetric images of a point, in [`Symmetry::ALL`] order.
pub fn apply_symmetries(p: Point) -> [Point; 8] {
    Symmetry::ALL.map(|s| s.apply(p))
}

/// `count` instances of `n` nodes drawn uniformly from the unit square.
pub fn generate_instances(seed: u64, n: usize, count: usize) -> Result<Vec<Instance>> {
    if n < 2 {
        return Err(Error::param(format!("n must be at least 2, got {n}")));
    }
    if count < 1 {
        return Err(Error::param("count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let coords = (0..n)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
                .collect();
            Instance {
                name: None,
                coords,
                source_frame: None,
            }
        })
        .collect())
}

/// Translates the bounding box to the origin and scales uniformly by the larger
/// extent, so the output lies in the unit square with its aspect ratio kept.
pub fn normalize_to_unit_square(instance: &Instance) -> Result<(Instance, Point, f64)> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in instance.coords() {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let scale = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if scale <= 0.0 {
        return Err(Error::Degenerate("all nodes coincide".into()));
    }
    let coords = instance
        .coords()
        .iter()
        .map(|p| {
            [
                ((p[0] - lo[0]) / scale).clamp(0.0, 1.0),
                ((p[1] - lo[1]) / scale).clamp(0.0, 1.0),
            ]
        })
        .collect();
    let frame = Frame { offset: lo, scale };
    let out = Instance {
        name: instance.name.clone(),
        coords,
        source_frame: Some(frame),
    };
    Ok((out, lo, scale))
}

/// Percentage by which `length` exceeds `opt`.
pub fn optimality_gap(length: f64, opt: f64) -> Result<f64> {
    if !(opt > 0.0) {
        return Err(Error::param(format!("optimum must be positive, got {opt}")));
    }
    Ok(100.0 * (length - opt) / opt)
}
