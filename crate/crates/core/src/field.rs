//! Epipolar attention fields.
//!
//! For BEV query `q` and feature pixel `k` of camera `i` the weight is
//!
//! ```text
//! W[q,k] = exp(-(λ·λ_qi)² · (x_k · l̂_qi)²)
//! ```
//!
//! where `l̂_qi` is the normalized epipolar line of the query's vertical ray
//! and `λ_qi = d_qi / (f̄_i · cell_size)` grows with the horizontal distance
//! `d_qi` between the cell and the camera. At `λ = 1` the Gaussian's standard
//! deviation is about 0.7 of the projected cell width, so near cells get
//! wide fields and far cells narrow ones.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{self, BevGrid, CameraView};
use crate::math;
use crate::{Error, Result};

/// How a query that cannot see a camera is treated at the attention stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VisibilityMode {
    /// Weighted logits exactly as written: a zero weight zeroes the logit.
    #[default]
    Literal,
    /// Keys of a camera whose field row is all zero are excluded from the
    /// softmax of that query.
    Masked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub lambda: f64,
    pub lambda_learnable: bool,
    pub visibility_mode: VisibilityMode,
    /// Lower bound on the camera distance in meters; `None` means one cell.
    pub min_distance_clamp: Option<f64>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { lambda: 1.0, lambda_learnable: false, visibility_mode: VisibilityMode::Literal, min_distance_clamp: None }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if let Some(c) = self.min_distance_clamp {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig(format!("distance clamp must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn clamp_for(&self, grid: &BevGrid) -> f64 {
        self.min_distance_clamp.unwrap_or(grid.cell_size)
    }
}

/// Weight matrix for one (camera, feature scale) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionField {
    n_q: usize,
    n_k: usize,
    feature_size: (usize, usize),
    view_id: usize,
    scale_id: usize,
    lambda: f64,
    /// `(λ_qi · distance)²`, so that `W = exp(-λ² · exponent)`.
    exponent: Vec<f64>,
    weights: Vec<f64>,
    query_visibility: Vec<bool>,
}

impl AttentionField {
    /// A field of all ones with every query visible (the W ≡ 1 ablation).
    pub fn uniform(n_q: usize, feature_size: (usize, usize), view_id: usize, scale_id: usize) -> Self {
        let n_k = feature_size.0 * feature_size.1;
        Self {
            n_q,
            n_k,
            feature_size,
            view_id,
            scale_id,
            lambda: 0.0,
            exponent: vec![0.0; n_q * n_k],
            weights: vec![1.0; n_q * n_k],
            query_visibility: vec![true; n_q],
        }
    }

    pub fn n_queries(&self) -> usize {
        self.n_q
    }

    pub fn n_keys(&self) -> usize {
        self.n_k
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.feature_size
    }

    pub fn view_id(&self) -> usize {
        self.view_id
    }

    pub fn scale_id(&self) -> usize {
        self.scale_id
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Row-major `n_q × n_k` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn exponent(&self) -> &[f64] {
        &self.exponent
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.weights[q * self.n_k..(q + 1) * self.n_k]
    }

    pub fn query_visibility(&self) -> &[bool] {
        &self.query_visibility
    }

    /// Re-evaluates the weights for a new distance strength.
    pub fn recompute(&mut self, lambda: f64) {
        self.lambda = lambda;
        let l2 = lambda * lambda;
        for (q, &vis) in self.query_visibility.iter().enumerate() {
            let range = q * self.n_k..(q + 1) * self.n_k;
            for (w, a) in self.weights[range.clone()].iter_mut().zip(&self.exponent[range]) {
                *w = if vis { math::exp(-l2 * a) } else { 0.0 };
            }
        }
    }

    /// `∂W/∂λ = -2λ · exponent · W`, evaluated at the field's current λ.
    pub fn weight_grad_lambda(&self) -> Vec<f64> {
        self.weights.iter().zip(&self.exponent).map(|(w, a)| -2.0 * self.lambda * a * w).collect()
    }

    /// Fraction of weights above `threshold`.
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        self.weights.iter().filter(|w| **w > threshold).count() as f64 / self.weights.len() as f64
    }
}

/// Per-query, per-camera width factor `d / (f̄ · cell_size)` with `d`
/// clamped below by `clamp` meters. `view` must be at feature scale.
pub fn lambda_qi(grid: &BevGrid, cell: (usize, usize), view: &CameraView, clamp: f64) -> Result<f64> {
    if !geometry::cheirality(view, grid, cell) {
        return Err(Error::InvisibleCell { i: cell.0, j: cell.1 });
    }
    let d = geometry::ground_distance(view, grid, cell).max(clamp);
    Ok(d / (view.intrinsics().mean_focal() * grid.cell_size))
}

/// Gaussian weight of a feature at signed pixel distance `dist` from the line.
pub fn field_weight(dist: f64, lambda: f64, lambda_qi: f64) -> f64 {
    let s = lambda * lambda_qi;
    math::exp(-(s * s) * (dist * dist))
}

/// Standard deviation in pixels of the Gaussian `field_weight` describes.
pub fn sigma_pixels(lambda: f64, lambda_qi: f64) -> f64 {
    1.0 / (core::f64::consts::SQRT_2 * lambda * lambda_qi)
}

/// Field of every grid cell over the feature pixels of `view` at
/// `feature_size`. Keys enumerate feature pixels row-major with centers at
/// `(u + 0.5, v + 0.5)`.
pub fn compute_field(
    grid: &BevGrid,
    view: &CameraView,
    feature_size: (usize, usize),
    cfg: &FieldConfig,
    scale_id: usize,
) -> Result<AttentionField> {
    cfg.validate()?;
    let scaled = view.scale_intrinsics(feature_size)?;
    let (fw, fh) = feature_size;
    let n_q = grid.num_cells();
    let n_k = fw * fh;
    let clamp = cfg.clamp_for(grid);
    let mut exponent = vec![0.0; n_q * n_k];
    let mut visible = vec![false; n_q];
    for q in 0..n_q {
        let cell = grid.cell_of_query(q);
        if !geometry::cheirality(&scaled, grid, cell) {
            continue;
        }
        let line = geometry::epipolar_line(&scaled, grid, cell);
        if line.degenerate {
            continue;
        }
        visible[q] = true;
        let lq = lambda_qi(grid, cell, &scaled, clamp)?;
        let row = &mut exponent[q * n_k..(q + 1) * n_k];
        for v in 0..fh {
            for u in 0..fw {
                let x = [u as f64 + 0.5, v as f64 + 0.5, 1.0];
                let d = geometry::point_line_distance(&x, &line)?;
                let s = lq * d;
                row[v * fw + u] = s * s;
            }
        }
    }
    let mut field = AttentionField {
        n_q,
        n_k,
        feature_size,
        view_id: view.view_id(),
        scale_id,
        lambda: cfg.lambda,
        exponent,
        weights: vec![0.0; n_q * n_k],
        query_visibility: visible,
    };
    field.recompute(cfg.lambda);
    Ok(field)
}

/// Feature-map size of an image at the given pooling patch size.
pub fn feature_size_for(view: &CameraView, patch: usize) -> Result<(usize, usize)> {
    let (w, h) = view.image_size();
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::InvalidConfig(format!("{w}x{h} image is not divisible by patch {patch}")));
    }
    Ok((w / patch, h / patch))
}

/// Fields for every (camera, scale) pair, ordered view-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBank {
    fields: Vec<AttentionField>,
    n_views: usize,
    n_scales: usize,
}

impl FieldBank {
    pub fn from_fields(fields: Vec<AttentionField>, n_views: usize, n_scales: usize) -> Result<Self> {
        if fields.len() != n_views * n_scales {
            return Err(Error::Shape(format!(
                "{} fields for {n_views} views x {n_scales} scales",
                fields.len()
            )));
        }
        Ok(Self { fields, n_views, n_scales })
    }

    /// W ≡ 1 fields matching the shapes of `self`.
    pub fn uniform_like(&self) -> Self {
        let fields = self
            .fields
            .iter()
            .map(|f| AttentionField::uniform(f.n_q, f.feature_size, f.view_id, f.scale_id))
            .collect();
        Self { fields, n_views: self.n_views, n_scales: self.n_scales }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_scales(&self) -> usize {
        self.n_scales
    }

    pub fn get(&self, view: usize, scale: usize) -> &AttentionField {
        &self.fields[view * self.n_scales + scale]
    }

    pub fn fields(&self) -> &[AttentionField] {
        &self.fields
    }

    /// Re-evaluates every field for a new λ.
    pub fn recompute(&mut self, lambda: f64) {
        self.fields.iter_mut().for_each(|f| f.recompute(lambda));
    }

    pub fn fraction_above(&self, threshold: f64) -> f64 {
        let total: usize = self.fields.iter().map(|f| f.weights.len()).sum();
        let above: usize =
            self.fields.iter().map(|f| f.weights.iter().filter(|w| **w > threshold).count()).sum();
        above as f64 / total as f64
    }
}

/// Computes one field per (view, patch) pair, in view-major order.
pub fn field_bank(grid: &BevGrid, views: &[CameraView], patches: &[usize], cfg: &FieldConfig) -> Result<FieldBank> {
    let mut fields = Vec::with_capacity(views.len() * patches.len());
    for view in views {
        for (s, &patch) in patches.iter().enumerate() {
            fields.push(compute_field(grid, view, feature_size_for(view, patch)?, cfg, s)?);
        }
    }
    FieldBank::from_fields(fields, views.len(), patches.len())
}
