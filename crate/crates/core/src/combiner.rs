//! The adaptive-summation operator and the quantities derived from it.
//!
//! For two gradients `a` and `b`:
//!
//! ```text
//! adasum(a, b) = (1 - a·b / (2‖a‖²))·a + (1 - a·b / (2‖b‖²))·b
//! ```
//!
//! Orthogonal inputs are summed, parallel equal inputs are averaged, and
//! everything in between is interpolated. When a [`LayerLayout`] is supplied
//! the dot products and coefficients are computed independently per layer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::tensor::{dot_triple_slices, DotTriple, Tensor};

/// One contiguous layer inside a flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

/// Partition of a flat vector into consecutive layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerLayout {
    segments: Vec<Segment>,
}

impl LayerLayout {
    /// Validates that `boundaries` tile `[0, total)` in order.
    pub fn new(boundaries: &[(usize, usize)]) -> Result<Self> {
        let mut expected = 0;
        let mut segments = Vec::with_capacity(boundaries.len());
        for &(offset, len) in boundaries {
            if offset != expected {
                return Err(Error::Argument(format!(
                    "layer at offset {offset} does not start where the previous one ends ({expected})"
                )));
            }
            segments.push(Segment { offset, len });
            expected = offset + len;
        }
        Ok(LayerLayout { segments })
    }

    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offset = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = Segment { offset, len };
                offset += len;
                s
            })
            .collect();
        LayerLayout { segments }
    }

    /// A single layer spanning the whole vector.
    pub fn single(len: usize) -> Self {
        LayerLayout::from_lengths(&[len])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_layers(&self) -> usize {
        self.segments.len()
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, Segment::end)
    }

    pub fn boundaries(&self) -> Vec<(usize, usize)> {
        self.segments.iter().map(|s| (s.offset, s.len)).collect()
    }

    /// Layers intersecting the global range `[lo, hi)`, as
    /// `(layer index, start, end)` with global offsets clipped to the range.
    pub fn fragments(&self, lo: usize, hi: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // First segment whose end is past `lo`.
        let first = self.segments.partition_point(|s| s.end() <= lo);
        self.segments[first..]
            .iter()
            .enumerate()
            .take_while(move |(_, s)| s.offset < hi)
            .filter_map(move |(k, s)| {
                let start = s.offset.max(lo);
                let end = s.end().min(hi);
                (start < end).then_some((first + k, start, end))
            })
    }

    pub(crate) fn check_covers(&self, len: usize) -> Result<()> {
        if self.total_len() != len {
            return Err(Error::Argument(format!(
                "layout covers {} elements but the vector has {len}",
                self.total_len()
            )));
        }
        Ok(())
    }
}

/// Per-layer dot triples for the slices `a` and `b`, which sit at global
/// offset `lo` of a vector partitioned by `layout`. Layers not present in
/// the slice are left at zero.
pub fn layer_triples(a: &[f64], b: &[f64], lo: usize, layout: &LayerLayout) -> Vec<DotTriple> {
    let mut triples = vec![DotTriple::default(); layout.num_layers()];
    for (layer, start, end) in layout.fragments(lo, lo + a.len()) {
        triples[layer] += dot_triple_slices(&a[start - lo..end - lo], &b[start - lo..end - lo]);
    }
    triples
}

/// `c_a·a + c_b·b` with coefficients taken per layer from `triples`.
pub fn apply_layer_coefficients(
    a: &[f64],
    b: &[f64],
    lo: usize,
    layout: &LayerLayout,
    triples: &[DotTriple],
) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for (layer, start, end) in layout.fragments(lo, lo + a.len()) {
        let (ca, cb) = triples[layer].adasum_coefficients();
        for i in (start - lo)..(end - lo) {
            out[i] = ca * a[i] + cb * b[i];
        }
    }
    out
}

pub(crate) fn adasum_slices(a: &[f64], b: &[f64], layout: &LayerLayout) -> Vec<f64> {
    let triples = layer_triples(a, b, 0, layout);
    apply_layer_coefficients(a, b, 0, layout, &triples)
}

fn check_pair(g1: &Tensor, g2: &Tensor, layout: Option<&LayerLayout>) -> Result<()> {
    if g1.len() != g2.len() {
        return Err(Error::shape(g1.len(), g2.len()));
    }
    if let Some(l) = layout {
        l.check_covers(g1.len())?;
    }
    Ok(())
}

/// Adaptive sum of two gradients.
///
/// The result has `g1`'s dtype; for `F16` inputs the weighted sum is
/// evaluated in `f64` and rounded once. NaNs in the inputs propagate into the
/// result; callers check with [`Tensor::has_nan`].
pub fn adasum_pair(g1: &Tensor, g2: &Tensor, layout: Option<&LayerLayout>) -> Result<Tensor> {
    check_pair(g1, g2, layout)?;
    let whole;
    let layout = match layout {
        Some(l) => l,
        None => {
            whole = LayerLayout::single(g1.len());
            &whole
        }
    };
    let out = match (g1.as_f64_slice(), g2.as_f64_slice()) {
        (Some(a), Some(b)) => adasum_slices(a, b, layout),
        _ => adasum_slices(&g1.to_f64_vec(), &g2.to_f64_vec(), layout),
    };
    Ok(Tensor::from_values(out, g1.dtype()))
}

fn check_list(gs: &[Tensor]) -> Result<()> {
    let first = gs
        .first()
        .ok_or_else(|| Error::Argument("at least one gradient is required".into()))?;
    if let Some(bad) = gs.iter().find(|g| g.len() != first.len()) {
        return Err(Error::shape(first.len(), bad.len()));
    }
    Ok(())
}

/// Left fold: `adasum(adasum(adasum(g0, g1), g2), ...)`.
pub fn adasum_linear(gs: &[Tensor], layout: Option<&LayerLayout>) -> Result<Tensor> {
    check_list(gs)?;
    let mut acc = gs[0].clone();
    for g in &gs[1..] {
        acc = adasum_pair(&acc, g, layout)?;
    }
    Ok(acc)
}

/// Balanced binary recursion splitting at `floor(n/2)`.
///
/// For a power-of-two count this is exactly the reduction order of the
/// recursive vector-halving allreduce.
pub fn adasum_tree(gs: &[Tensor], layout: Option<&LayerLayout>) -> Result<Tensor> {
    check_list(gs)?;
    if let Some(l) = layout {
        l.check_covers(gs[0].len())?;
    }
    fn rec(gs: &[Tensor], layout: Option<&LayerLayout>) -> Result<Tensor> {
        if gs.len() == 1 {
            return Ok(gs[0].clone());
        }
        let mid = gs.len() / 2;
        let left = rec(&gs[..mid], layout)?;
        let right = rec(&gs[mid..], layout)?;
        adasum_pair(&left, &right, layout)
    }
    rec(gs, layout)
}

/// `‖adasum_tree(gs)‖² / Σ‖gᵢ‖²` over the whole vector.
///
/// 1 for mutually orthogonal gradients, `1/n` for `n` identical ones.
pub fn orthogonality(gs: &[Tensor]) -> Result<f64> {
    check_list(gs)?;
    let denom: f64 = gs.iter().map(|g| g.to_f64_vec().iter().map(|x| x * x).sum::<f64>()).sum();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric);
    }
    let combined = adasum_tree(gs, None)?.into_f64_vec();
    Ok(dot(&combined, &combined) / denom)
}

/// Orthogonality of each layer, using per-layer coefficients in the tree.
/// A layer where every gradient is zero yields [`Error::UndefinedMetric`].
pub fn orthogonality_per_layer(gs: &[Tensor], layout: &LayerLayout) -> Result<Vec<f64>> {
    check_list(gs)?;
    layout.check_covers(gs[0].len())?;
    let combined = adasum_tree(gs, Some(layout))?.into_f64_vec();
    let inputs: Vec<Vec<f64>> = gs.iter().map(Tensor::to_f64_vec).collect();
    layout
        .segments()
        .iter()
        .map(|s| {
            let r = s.offset..s.end();
            let denom: f64 = inputs.iter().map(|g| sq(&g[r.clone()])).sum();
            if denom == 0.0 {
                return Err(Error::UndefinedMetric);
            }
            Ok(sq(&combined[r]) / denom)
        })
        .collect()
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Uniform distribution over a finite set of equal-dimension vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDistribution {
    atoms: Vec<Vec<f64>>,
}

impl FiniteDistribution {
    pub fn new(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let dim = atoms
            .first()
            .ok_or_else(|| Error::Argument("a distribution needs at least one atom".into()))?
            .len();
        if let Some(bad) = atoms.iter().find(|a| a.len() != dim) {
            return Err(Error::shape(dim, bad.len()));
        }
        Ok(FiniteDistribution { atoms })
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.atoms.len() as f64;
        let mut m = vec![0.0; self.dim()];
        for a in &self.atoms {
            for (mi, ai) in m.iter_mut().zip(a) {
                *mi += ai;
            }
        }
        m.iter_mut().for_each(|x| *x /= n);
        m
    }

    /// `M = (1/N) Σ xᵢxᵢᵀ / ‖xᵢ‖²`
    pub fn projector_mean(&self) -> Result<Matrix> {
        let n = self.atoms.len() as f64;
        let mut m = Matrix::zeros(self.dim());
        for a in &self.atoms {
            let nn = dot(a, a);
            if nn == 0.0 {
                return Err(Error::Argument("distribution contains a zero-norm atom".into()));
            }
            m.add_outer(a, 1.0 / (nn * n));
        }
        Ok(m)
    }

    /// Draws a random distribution mixing isotropic atoms with a tight
    /// near-parallel cluster, which is where the angle bound is tightest.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, atoms: usize) -> Self {
        let gauss = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        let style = rng.gen_range(0..3);
        let direction: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let spread = 10f64.powf(rng.gen_range(-3.0..0.5));
        let cluster_frac: f64 = rng.gen_range(0.0..1.0);
        let atoms = (0..atoms)
            .map(|_| {
                let scale = 10f64.powf(rng.gen_range(-1.0..1.0));
                let v: Vec<f64> = match style {
                    0 => (0..dim).map(|_| gauss(rng)).collect(),
                    1 => direction.iter().map(|d| d + spread * gauss(rng)).collect(),
                    _ => {
                        if rng.gen_bool(cluster_frac) {
                            direction.iter().map(|d| d + spread * gauss(rng)).collect()
                        } else {
                            (0..dim).map(|_| gauss(rng)).collect()
                        }
                    }
                };
                v.into_iter().map(|x| x * scale).collect()
            })
            .collect();
        FiniteDistribution { atoms }
    }
}

/// `E(adasum(a, b))` for independent `a, b ~ X`, evaluated in closed form as
/// `(2I − M)·E(X)`.
pub fn expected_combined(x: &FiniteDistribution) -> Result<Vec<f64>> {
    let m = x.projector_mean()?;
    let mean = x.mean();
    let mm = m.matvec(&mean);
    Ok(mean.iter().zip(&mm).map(|(e, p)| 2.0 * e - p).collect())
}

/// Average of `adasum(a, b)` over all `N²` ordered pairs of atoms.
pub fn ordered_pair_average(x: &FiniteDistribution) -> Result<Vec<f64>> {
    let n = x.atoms().len();
    let layout = LayerLayout::single(x.dim());
    let mut acc = vec![0.0; x.dim()];
    for a in x.atoms() {
        for b in x.atoms() {
            let y = adasum_slices(a, b, &layout);
            for (s, v) in acc.iter_mut().zip(&y) {
                *s += v;
            }
        }
    }
    let nn = (n * n) as f64;
    acc.iter_mut().for_each(|v| *v /= nn);
    Ok(acc)
}

/// Measured quantities behind the angle and norm bounds for one
/// distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LemmaReport {
    /// Cosine between `E(X)` and `E(Y)`; bounded below by `2√2/3`.
    pub cos_angle: f64,
    /// `‖E(Y)‖ / ‖E(X)‖`, within `[1, 2]`.
    pub norm_ratio: f64,
    pub eig_min: f64,
    pub eig_max: f64,
}

/// Lower bound on [`LemmaReport::cos_angle`]: the minimum over `c ∈ [0, 1]`
/// of `(2 − c²) / sqrt(4 − 3c²)`, reached at `c² = 2/3`.
pub const COS_ANGLE_BOUND: f64 = 0.942_809_041_582_063_4;

pub fn lemma_checks(x: &FiniteDistribution) -> Result<LemmaReport> {
    let mean = x.mean();
    let mean_norm = norm(&mean);
    if mean_norm == 0.0 {
        return Err(Error::DegenerateDistribution("E(X) is the zero vector".into()));
    }
    let m = x.projector_mean()?;
    let ey = expected_combined(x)?;
    let ey_norm = norm(&ey);
    let cos_angle = dot(&mean, &ey) / (mean_norm * ey_norm);

    let mut two_i_minus_m = Matrix::identity(x.dim());
    for i in 0..x.dim() {
        for j in 0..x.dim() {
            two_i_minus_m[(i, j)] = 2.0 * two_i_minus_m[(i, j)] - m[(i, j)];
        }
    }
    let eig = two_i_minus_m.symmetric_eigenvalues(1e-12);
    Ok(LemmaReport {
        cos_angle,
        norm_ratio: ey_norm / mean_norm,
        eig_min: eig[0],
        eig_max: *eig.last().unwrap(),
    })
}

/// Dtype-preserving sum of tensors, accumulated left to right in `f64`.
pub fn sum_tensors(gs: &[Tensor]) -> Result<Tensor> {
    check_list(gs)?;
    let mut acc = gs[0].to_f64_vec();
    for g in &gs[1..] {
        for (a, v) in acc.iter_mut().zip(g.to_f64_vec()) {
            *a += v;
        }
    }
    Ok(Tensor::from_values(acc, gs[0].dtype()))
}
