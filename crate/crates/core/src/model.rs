//! Desk-scale BEV segmentation model: pooled-patch backbone stub, per-scale
//! epipolar cross-attention encoder (coarse to fine), 3×3 mixing decoder and
//! a per-class logit head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_attention_block, AttentionConfig, BlockVars};
use crate::field::{field_bank, FieldBank, FieldConfig};
use crate::geometry::{BevGrid, CameraView};
use crate::math;
use crate::synth::{toy_grid, Image};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const CLASS_NAMES: [&str; 2] = ["vehicle", "drivable"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: BevGrid,
    pub d_model: usize,
    pub n_heads: usize,
    /// Pooling patch per scale, coarse first (16 is the 1/16 scale).
    pub patches: Vec<usize>,
    pub blocks_per_scale: usize,
    pub ff_hidden: usize,
    pub decoder_hidden: usize,
    /// Input image channels.
    pub channels: usize,
    pub seed: u64,
    pub field: FieldConfig,
    /// Replace every field by W ≡ 1 (the no-geometry baseline).
    pub uniform_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: toy_grid(),
            d_model: 32,
            n_heads: 4,
            patches: vec![16, 4],
            blocks_per_scale: 1,
            ff_hidden: 64,
            decoder_hidden: 32,
            channels: 3,
            seed: 0,
            field: FieldConfig::default(),
            uniform_weights: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.d_model, self.n_heads, self.field.visibility_mode)?;
        self.field.validate()?;
        if self.patches.is_empty() || self.patches.contains(&0) {
            return Err(Error::InvalidConfig("at least one non-zero patch size is required".into()));
        }
        if self.patches.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidConfig(format!("patches must run coarse to fine, got {:?}", self.patches)));
        }
        if self.blocks_per_scale == 0 || self.ff_hidden == 0 || self.decoder_hidden == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("block count and layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { d_model: self.d_model, n_heads: self.n_heads, visibility_mode: self.field.visibility_mode }
    }

    pub fn classes(&self) -> usize {
        CLASS_NAMES.len()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t.requires_grad()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Replaces values from `other`, which must hold the same names and
    /// shapes; errors name the first offending parameter.
    pub fn load(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Shape(format!("{} parameters, model has {}", other.len(), self.entries.len())));
        }
        for ((name, t), (oname, o)) in self.entries.iter().zip(other) {
            if name != oname || t.shape() != o.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match {oname} {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
        }
        for ((_, t), (_, o)) in self.entries.iter_mut().zip(other) {
            t.data_mut().copy_from_slice(o.data());
        }
        Ok(())
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive extents")
}

fn filled(n: usize, v: f64) -> Tensor {
    Tensor::new(&[n], vec![v; n]).expect("positive extent")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[n_q × classes]` logits in query order.
    pub logits: Var,
    /// One handle per parameter, in store order.
    pub params: Vec<Var>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let n_q = cfg.grid.num_cells();
        let mut p = ParamStore::default();
        let qdata = (0..n_q * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.insert("queries", Tensor::new(&[n_q, d], qdata)?);
        for s in 0..cfg.patches.len() {
            p.insert(format!("backbone.{s}.weight"), xavier(&mut rng, cfg.channels, d));
            p.insert(format!("backbone.{s}.bias"), filled(d, 0.0));
        }
        for s in 0..cfg.patches.len() {
            for b in 0..cfg.blocks_per_scale {
                let pre = format!("encoder.{s}.{b}");
                p.insert(format!("{pre}.ln1.gain"), filled(d, 1.0));
                p.insert(format!("{pre}.ln1.bias"), filled(d, 0.0));
                for w in ["wq", "wk", "wv", "wo"] {
                    p.insert(format!("{pre}.{w}"), xavier(&mut rng, d, d));
                }
                p.insert(format!("{pre}.ln2.gain"), filled(d, 1.0));
                p.insert(format!("{pre}.ln2.bias"), filled(d, 0.0));
                p.insert(format!("{pre}.ff1.weight"), xavier(&mut rng, d, cfg.ff_hidden));
                p.insert(format!("{pre}.ff1.bias"), filled(cfg.ff_hidden, 0.0));
                p.insert(format!("{pre}.ff2.weight"), xavier(&mut rng, cfg.ff_hidden, d));
                p.insert(format!("{pre}.ff2.bias"), filled(d, 0.0));
            }
        }
        let h = cfg.decoder_hidden;
        p.insert("decoder.conv1.weight", xavier(&mut rng, 9 * d, h));
        p.insert("decoder.conv1.bias", filled(h, 0.0));
        p.insert("decoder.conv2.weight", xavier(&mut rng, 9 * h, h));
        p.insert("decoder.conv2.bias", filled(h, 0.0));
        p.insert("decoder.head.weight", Tensor::zeros(&[h, cfg.classes()])?);
        p.insert("decoder.head.bias", filled(cfg.classes(), 0.0));
        if cfg.field.lambda_learnable && !cfg.uniform_weights {
            p.insert("field.log_lambda", filled(1, math::ln(cfg.field.lambda)));
        }
        Ok(Self { cfg, params: p })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Current distance-strength λ (learned when enabled).
    pub fn lambda(&self) -> f64 {
        match self.params.get("field.log_lambda") {
            Some(t) => math::exp(t.data()[0]),
            None => self.cfg.field.lambda,
        }
    }

    /// Field bank for `rig` at the model's scales, or W ≡ 1 for the baseline.
    pub fn field_bank(&self, rig: &[CameraView]) -> Result<FieldBank> {
        let mut cfg = self.cfg.field.clone();
        cfg.lambda = self.lambda();
        let bank = field_bank(&self.cfg.grid, rig, &self.cfg.patches, &cfg)?;
        Ok(if self.cfg.uniform_weights { bank.uniform_like() } else { bank })
    }

    /// Records the forward pass for one multi-view sample.
    pub fn forward(&self, tape: &mut Tape, images: &[Image], bank: &FieldBank) -> Result<Forward> {
        let cfg = &self.cfg;
        let n_scales = cfg.patches.len();
        if images.is_empty() || bank.n_views() != images.len() || bank.n_scales() != n_scales {
            return Err(Error::Shape(format!(
                "{} images and {} scales against a bank of {} views x {} scales",
                images.len(),
                n_scales,
                bank.n_views(),
                bank.n_scales()
            )));
        }
        let n_q = cfg.grid.num_cells();
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| tape.leaf(t)).collect();
        let var = |name: &str| vars[self.params.index_of(name).expect("parameter exists")];

        let mut feats: Vec<Vec<Var>> = vec![Vec::with_capacity(images.len()); n_scales];
        for (v, img) in images.iter().enumerate() {
            if img.channels != cfg.channels {
                return Err(Error::Shape(format!("image has {} channels, model expects {}", img.channels, cfg.channels)));
            }
            let x = tape.constant(&[img.height, img.width, img.channels], img.data.clone())?;
            for (s, &patch) in cfg.patches.iter().enumerate() {
                let field = bank.get(v, s);
                if (img.width / patch, img.height / patch) != field.feature_size() {
                    return Err(Error::Shape(format!(
                        "view {v} scale {s}: {}x{} image with patch {patch} does not give feature map {:?}",
                        img.width,
                        img.height,
                        field.feature_size()
                    )));
                }
                let pooled = tape.avg_pool(x, patch)?;
                let f = tape.matmul(pooled, var(&format!("backbone.{s}.weight")))?;
                feats[s].push(tape.add_row_bias(f, var(&format!("backbone.{s}.bias")))?);
            }
        }

        let lambda = match self.params.index_of("field.log_lambda") {
            Some(i) => Some(tape.exp(vars[i])?),
            None => None,
        };
        let attn_cfg = cfg.attention();
        let mut x = var("queries");
        for s in 0..n_scales {
            let mut fields = Vec::with_capacity(images.len());
            for v in 0..images.len() {
                let f = bank.get(v, s);
                if f.n_queries() != n_q {
                    return Err(Error::Shape(format!("field has {} queries, grid has {n_q}", f.n_queries())));
                }
                let shape = [f.n_queries(), f.n_keys()];
                fields.push(match lambda {
                    Some(l) => tape.field_weights(l, shape, f.exponent().to_vec(), f.query_visibility().to_vec())?,
                    None => tape.constant(&shape, f.weights().to_vec())?,
                });
            }
            for b in 0..cfg.blocks_per_scale {
                let pre = format!("encoder.{s}.{b}");
                let block = BlockVars {
                    ln1_gain: var(&format!("{pre}.ln1.gain")),
                    ln1_bias: var(&format!("{pre}.ln1.bias")),
                    wq: var(&format!("{pre}.wq")),
                    wk: var(&format!("{pre}.wk")),
                    wv: var(&format!("{pre}.wv")),
                    wo: var(&format!("{pre}.wo")),
                    ln2_gain: var(&format!("{pre}.ln2.gain")),
                    ln2_bias: var(&format!("{pre}.ln2.bias")),
                    ff1_weight: var(&format!("{pre}.ff1.weight")),
                    ff1_bias: var(&format!("{pre}.ff1.bias")),
                    ff2_weight: var(&format!("{pre}.ff2.weight")),
                    ff2_bias: var(&format!("{pre}.ff2.bias")),
                };
                x = cross_attention_block(tape, x, &feats[s], &fields, &block, &attn_cfg)?;
            }
        }
        let logits = decoder_head(
            tape,
            x,
            &cfg.grid,
            [var("decoder.conv1.weight"), var("decoder.conv1.bias")],
            [var("decoder.conv2.weight"), var("decoder.conv2.bias")],
            [var("decoder.head.weight"), var("decoder.head.bias")],
        )?;
        Ok(Forward { logits, params: vars })
    }

    /// Logits `[n_q × classes]` without gradient bookkeeping.
    pub fn predict(&self, images: &[Image], bank: &FieldBank) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, bank)?;
        Ok(tape.value(out.logits).to_vec())
    }
}

/// Row indices of the 3×3 neighborhood of every cell for one offset, `None`
/// outside the grid (zero padding).
fn neighbor_index(grid: &BevGrid, di: isize, dj: isize) -> Vec<Option<usize>> {
    (0..grid.num_cells())
        .map(|q| {
            let (i, j) = grid.cell_of_query(q);
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if ni < 0 || nj < 0 || ni >= grid.cells_x as isize || nj >= grid.cells_y as isize {
                None
            } else {
                Some(grid.query_index(ni as usize, nj as usize))
            }
        })
        .collect()
}

fn mix3x3(tape: &mut Tape, x: Var, grid: &BevGrid, weight: Var, bias: Var) -> Result<Var> {
    let mut cols = Vec::with_capacity(9);
    for dj in -1..=1 {
        for di in -1..=1 {
            cols.push(tape.gather_rows(x, neighbor_index(grid, di, dj))?);
        }
    }
    let patches = tape.concat_cols(&cols)?;
    let h = tape.matmul(patches, weight)?;
    let h = tape.add_row_bias(h, bias)?;
    tape.relu(h)
}

/// Two 3×3 mixing layers with ReLU then a 1×1 projection to class logits.
/// Returns `[n_q × classes]`; see [`to_class_maps`] for the grid layout.
pub fn decoder_head(
    tape: &mut Tape,
    bev: Var,
    grid: &BevGrid,
    conv1: [Var; 2],
    conv2: [Var; 2],
    head: [Var; 2],
) -> Result<Var> {
    let shape = tape.shape(bev).to_vec();
    if shape.len() != 2 || shape[0] != grid.num_cells() {
        return Err(Error::Shape(format!("BEV embedding {shape:?} for {} cells", grid.num_cells())));
    }
    let h = mix3x3(tape, bev, grid, conv1[0], conv1[1])?;
    let h = mix3x3(tape, h, grid, conv2[0], conv2[1])?;
    let out = tape.matmul(h, head[0])?;
    tape.add_row_bias(out, head[1])
}

/// Rearranges `[n_q × classes]` logits into `classes × cells_y × cells_x`.
pub fn to_class_maps(logits: &[f64], grid: &BevGrid, classes: usize) -> Vec<f64> {
    let n_q = grid.num_cells();
    let mut out = vec![0.0; classes * n_q];
    for q in 0..n_q {
        for c in 0..classes {
            out[c * n_q + q] = logits[q * classes + c];
        }
    }
    out
}

/// Per-class 0.5-threshold masks (sigmoid > 0.5, i.e. logit > 0).
pub fn class_mask(logits: &[f64], classes: usize, class: usize) -> Vec<bool> {
    logits.chunks(classes).map(|row| row[class] > 0.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::scaled_dot_product_attention;
    use crate::field::AttentionField;
    use crate::geometry::Intrinsics;
    use crate::synth::{generate, render, toy_rig, GenParams};

    fn micro_config() -> ModelConfig {
        ModelConfig {
            grid: BevGrid::new(4, 4, 1.0, [3.5, -1.5]).unwrap(),
            d_model: 8,
            n_heads: 2,
            patches: vec![8, 4],
            ff_hidden: 8,
            decoder_hidden: 4,
            ..ModelConfig::default()
        }
    }

    fn micro_rig() -> Vec<CameraView> {
        let k = Intrinsics { fx: 8.0, fy: 8.0, cx: 8.0, cy: 4.0 };
        [0.5, -0.5]
            .iter()
            .enumerate()
            .map(|(i, y)| CameraView::looking_along(k, [0.0, *y, 1.5], 0.0, (16, 8), i).unwrap())
            .collect()
    }

    fn micro_images(rig: &[CameraView], seed: u64) -> Vec<Image> {
        let cfg = micro_config();
        let params = GenParams { box_count: (1, 1), size_range: (1.0, 1.5), ..GenParams::for_grid(&cfg.grid) };
        let scene = generate(seed, &params, rig).unwrap();
        rig.iter().map(|v| render(&scene, v)).collect()
    }

    fn randomize(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in model.params_mut().tensors_mut() {
            for x in t.data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }

    fn loss_of(model: &Model, images: &[Image], bank: &FieldBank, targets: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, images, bank).unwrap();
        let l = tape.focal_loss(f.logits, targets.to_vec(), 0.25, 2.0).unwrap();
        tape.scalar_value(l)
    }

    fn check_end_to_end(mut model: Model) {
        randomize(&mut model, 11);
        let rig = micro_rig();
        let images = micro_images(&rig, 4);
        let bank = model.field_bank(&rig).unwrap();
        let targets: Vec<f64> = (0..32).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &images, &bank).unwrap();
        let l = tape.focal_loss(f.logits, targets.clone(), 0.25, 2.0).unwrap();
        tape.backward(l).unwrap();
        let grads: Vec<Vec<f64>> = f.params.iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect();
        let names: Vec<String> = model.params().iter().map(|(n, _)| String::from(n)).collect();
        let h = 1e-5;
        for (pi, name) in names.iter().enumerate() {
            let n = grads[pi].len();
            let picks: Vec<usize> = if n <= 4 { (0..n).collect() } else { vec![0, n / 3, n / 2, n - 1] };
            for idx in picks {
                let mut plus = model.clone();
                plus.params_mut().entries[pi].1.data_mut()[idx] += h;
                let mut minus = model.clone();
                minus.params_mut().entries[pi].1.data_mut()[idx] -= h;
                let numeric = (loss_of(&plus, &images, &bank, &targets) - loss_of(&minus, &images, &bank, &targets)) / (2.0 * h);
                let analytic = grads[pi][idx];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-3, "{name}[{idx}]: analytic {analytic} numeric {numeric}");
            }
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        check_end_to_end(Model::new(micro_config()).unwrap());
    }

    #[test]
    fn end_to_end_gradient_with_learnable_lambda() {
        let mut cfg = micro_config();
        cfg.field.lambda_learnable = true;
        cfg.field.lambda = 0.8;
        let model = Model::new(cfg).unwrap();
        assert!(model.params().get("field.log_lambda").is_some());
        check_end_to_end(model);
    }

    #[test]
    fn backbone_pool_and_linear_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img: Vec<f64> = (0..8 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w = xavier(&mut rng, 3, 5).requires_grad();
        let run = |w: &Tensor, tape: &mut Tape| {
            let x = tape.constant(&[8, 16, 3], img.clone()).unwrap();
            let wv = tape.leaf(w);
            let p = tape.avg_pool(x, 4).unwrap();
            let f = tape.matmul(p, wv).unwrap();
            let s = tape.pow(f, 2.0).unwrap();
            (wv, tape.sum(s).unwrap())
        };
        let mut tape = Tape::new();
        let (wv, l) = run(&w, &mut tape);
        tape.backward(l).unwrap();
        let g = tape.grad(wv).unwrap().to_vec();
        for idx in 0..15 {
            let mut wp = w.clone();
            wp.data_mut()[idx] += 1e-6;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= 1e-6;
            let (mut tp, mut tm) = (Tape::new(), Tape::new());
            let lp = run(&wp, &mut tp).1;
            let lm = run(&wm, &mut tm).1;
            let numeric = (tp.scalar_value(lp) - tm.scalar_value(lm)) / 2e-6;
            assert!((numeric - g[idx]).abs() / numeric.abs().max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn feature_map_sizes_and_constant_images() {
        let mut tape = Tape::new();
        let x = tape.constant(&[32, 64, 3], vec![0.4; 32 * 64 * 3]).unwrap();
        let p = tape.avg_pool(x, 4).unwrap();
        assert_eq!(tape.shape(p), &[16 * 8, 3]);
        assert!(tape.value(p).iter().all(|v| (v - 0.4).abs() < 1e-15));
        let x = tape.constant(&[32, 60, 3], vec![0.4; 32 * 60 * 3]).unwrap();
        assert!(tape.avg_pool(x, 16).is_err());
    }

    #[test]
    fn fresh_decoder_predicts_one_half() {
        let cfg = micro_config();
        let grid = cfg.grid;
        let model = Model::new(cfg).unwrap();
        let mut tape = Tape::new();
        let bev = tape.constant(&[16, 8], vec![0.0; 128]).unwrap();
        let vars: Vec<Var> = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "head.weight", "head.bias"]
            .iter()
            .map(|n| tape.leaf(model.params().get(&format!("decoder.{n}")).unwrap()))
            .collect();
        let logits =
            decoder_head(&mut tape, bev, &grid, [vars[0], vars[1]], [vars[2], vars[3]], [vars[4], vars[5]]).unwrap();
        assert_eq!(tape.shape(logits), &[16, 2]);
        let maps = to_class_maps(tape.value(logits), &grid, 2);
        assert_eq!(maps.len(), 2 * 4 * 4);
        assert!(maps.iter().all(|z| *z == 0.0));
        let probs: Vec<f64> = maps.iter().map(|z| 1.0 / (1.0 + math::exp(-z))).collect();
        assert!(probs.iter().all(|p| *p == 0.5));
    }

    #[test]
    fn class_map_layout() {
        let grid = BevGrid::new(3, 2, 1.0, [0.0, 0.0]).unwrap();
        let logits: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let maps = to_class_maps(&logits, &grid, 2);
        // Class 1 at (i=2, j=1) is query 5.
        assert_eq!(maps[6 + 5], logits[5 * 2 + 1]);
        assert_eq!(class_mask(&[1.0, -1.0, -2.0, 3.0], 2, 1), vec![false, true]);
    }

    #[test]
    fn output_shape_for_any_scale_count() {
        let rig = micro_rig();
        let images = micro_images(&rig, 1);
        for patches in [vec![4], vec![8, 4], vec![8, 4, 2]] {
            let model = Model::new(ModelConfig { patches, ..micro_config() }).unwrap();
            let bank = model.field_bank(&rig).unwrap();
            assert_eq!(model.predict(&images, &bank).unwrap().len(), 16 * 2);
        }
    }

    #[test]
    fn swapping_cameras_with_their_calibration_is_invisible() {
        let rig = micro_rig();
        let images = micro_images(&rig, 3);
        let mut model = Model::new(micro_config()).unwrap();
        randomize(&mut model, 5);
        let a = model.predict(&images, &model.field_bank(&rig).unwrap()).unwrap();
        let rig_rev: Vec<CameraView> = rig.iter().rev().cloned().collect();
        let images_rev: Vec<Image> = images.iter().rev().cloned().collect();
        let b = model.predict(&images_rev, &model.field_bank(&rig_rev).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn single_scale_uniform_encoder_reduces_to_plain_attention() {
        let cfg = ModelConfig { patches: vec![4], uniform_weights: true, ..micro_config() };
        let mut model = Model::new(cfg.clone()).unwrap();
        randomize(&mut model, 9);
        for name in ["encoder.0.0.ff2.weight", "encoder.0.0.ff2.bias"] {
            let i = model.params().index_of(name).unwrap();
            model.params_mut().entries[i].1.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let rig = micro_rig();
        let images = micro_images(&rig, 2);
        let bank = model.field_bank(&rig).unwrap();
        assert!(bank.fields().iter().all(|f: &AttentionField| f.weights().iter().all(|w| *w == 1.0)));

        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &images, &bank).unwrap();
        // Independent route: LN, projections and plain softmax attention.
        let mut t2 = Tape::new();
        let p = |t2: &mut Tape, n: &str| t2.leaf(model.params().get(n).unwrap());
        let q0 = p(&mut t2, "queries");
        let mut feats = Vec::new();
        for img in &images {
            let x = t2.constant(&[img.height, img.width, 3], img.data.clone()).unwrap();
            let pooled = t2.avg_pool(x, 4).unwrap();
            let w = p(&mut t2, "backbone.0.weight");
            let b = p(&mut t2, "backbone.0.bias");
            let f = t2.matmul(pooled, w).unwrap();
            feats.push(t2.add_row_bias(f, b).unwrap());
        }
        let feats = t2.concat_rows(&feats).unwrap();
        let n = t2.layer_norm_rows(q0, crate::attention::LAYER_NORM_EPS).unwrap();
        let g = p(&mut t2, "encoder.0.0.ln1.gain");
        let b = p(&mut t2, "encoder.0.0.ln1.bias");
        let n = t2.mul_col_gain(n, g).unwrap();
        let n = t2.add_row_bias(n, b).unwrap();
        let (wq, wk, wv, wo) = (
            p(&mut t2, "encoder.0.0.wq"),
            p(&mut t2, "encoder.0.0.wk"),
            p(&mut t2, "encoder.0.0.wv"),
            p(&mut t2, "encoder.0.0.wo"),
        );
        let q = t2.matmul(n, wq).unwrap();
        let k = t2.matmul(feats, wk).unwrap();
        let v = t2.matmul(feats, wv).unwrap();
        let a = scaled_dot_product_attention(&mut t2, q, k, v, 2).unwrap();
        let a = t2.matmul(a, wo).unwrap();
        let x1 = t2.add(q0, a).unwrap();
        let conv = |t2: &mut Tape, s: &str| [p(t2, &format!("decoder.{s}.weight")), p(t2, &format!("decoder.{s}.bias"))];
        let (c1, c2, hd) = (conv(&mut t2, "conv1"), conv(&mut t2, "conv2"), conv(&mut t2, "head"));
        let expected = decoder_head(&mut t2, x1, &cfg.grid, c1, c2, hd).unwrap();
        for (x, y) in tape.value(out.logits).iter().zip(t2.value(expected)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn toy_model_runs_on_the_toy_rig() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let rig = toy_rig();
        let scene = generate(0, &GenParams::for_grid(&model.config().grid), &rig).unwrap();
        let images: Vec<Image> = rig.iter().map(|v| render(&scene, v)).collect();
        let bank = model.field_bank(&rig).unwrap();
        assert_eq!(bank.get(0, 0).feature_size(), (4, 2));
        assert_eq!(bank.get(0, 1).feature_size(), (16, 8));
        let logits = model.predict(&images, &bank).unwrap();
        assert_eq!(logits.len(), 256 * 2);
    }

    #[test]
    fn checkpoint_load_rejects_mismatch() {
        let mut a = Model::new(micro_config()).unwrap();
        let b = Model::new(ModelConfig { d_model: 4, ..micro_config() }).unwrap();
        let err = a.params_mut().load(&b.params().entries).unwrap_err();
        assert!(format!("{err}").contains("queries"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Model::new(ModelConfig { patches: vec![4, 16], ..micro_config() }).is_err());
        assert!(Model::new(ModelConfig { n_heads: 3, ..micro_config() }).is_err());
        assert!(Model::new(ModelConfig { patches: vec![], ..micro_config() }).is_err());
    }
}
