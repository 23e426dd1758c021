//! The four subcommands, as library functions returning their results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use eaf_core::field::{compute_field, feature_size_for, FieldBank, FieldConfig};
use eaf_core::geometry::{BevGrid, CameraView};
use eaf_core::loss::{distance_banded_counts, IouCounts, BAND_WIDTH};
use eaf_core::model::{Model, CLASS_NAMES};
use eaf_core::synth::generate;
use eaf_core::train::{self, predict_masks, MetricRow, Sample};

use crate::config::RunConfig;
use crate::rig::Rig;
use crate::scene_io::SceneFile;
use crate::specs::{GridSpec, PerturbSpec};
use crate::verify::{self, Report};
use crate::{checkpoint, parallel, pnm, CliError, Result};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_rig(path: Option<&Path>) -> Result<Rig> {
    match path {
        Some(p) => Rig::load(p),
        None => Ok(Rig::from_views(&eaf_core::synth::toy_rig())),
    }
}

pub struct FieldsArgs {
    pub rig: Option<PathBuf>,
    pub grid: GridSpec,
    pub patch: usize,
    pub lambda: f64,
    pub query: (usize, usize),
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldsOutcome {
    pub files: Vec<PathBuf>,
    /// Whether any camera sees the query cell.
    pub visible: bool,
}

/// Writes one heatmap per camera for the query cell plus `index.txt`.
pub fn fields(args: &FieldsArgs) -> Result<FieldsOutcome> {
    let rig = load_rig(args.rig.as_deref())?;
    let grid = args.grid.grid()?;
    let (i, j) = args.query;
    if i >= grid.cells_x || j >= grid.cells_y {
        return Err(CliError::Usage(format!(
            "query ({i}, {j}) outside the {}x{} grid",
            grid.cells_x, grid.cells_y
        )));
    }
    let cfg = FieldConfig { lambda: args.lambda, ..FieldConfig::default() };
    cfg.validate()?;
    // A one-cell grid at the query's center yields exactly the query's row;
    // the clamp stays tied to the full grid's cell size.
    let cell = BevGrid { cells_x: 1, cells_y: 1, origin: grid.cell_center(i, j), ..grid };
    create_dir(&args.out)?;
    let mut index = String::new();
    let mut files = Vec::new();
    let mut visible = false;
    for cam in &rig.cameras {
        let fs = feature_size_for(&cam.view, args.patch)?;
        let field = compute_field(&cell, &cam.view, fs, &cfg, 0)?;
        let seen = field.query_visibility()[0];
        visible |= seen;
        let name = format!("{}_q{i}_{j}.pgm", cam.name);
        let path = args.out.join(&name);
        pnm::write_file(&path, &pnm::encode_pgm(fs.0, fs.1, field.row(0)))?;
        let _ = writeln!(
            index,
            "{name}\tview={}\tcamera={}\tquery={i},{j}\tfeature={}x{}\tvisible={seen}",
            cam.view.view_id(),
            cam.name,
            fs.0,
            fs.1
        );
        files.push(path);
    }
    let path = args.out.join("index.txt");
    fs::write(&path, index).map_err(|e| CliError::io(&path, e))?;
    Ok(FieldsOutcome { files, visible })
}

pub fn verify(rig: Option<&Path>, grid: &GridSpec, samples: usize, seed: u64) -> Result<Report> {
    let rig = load_rig(rig)?;
    Ok(verify::run(&rig, &grid.grid()?, samples, seed))
}

/// Field bank of `model` for `views`, computed in parallel.
pub fn field_bank(model: &Model, views: &[CameraView]) -> Result<FieldBank> {
    let cfg = model.config();
    let field = FieldConfig { lambda: model.lambda(), ..cfg.field.clone() };
    let bank = parallel::field_bank(&cfg.grid, views, &cfg.patches, &field)?;
    Ok(if cfg.uniform_weights { bank.uniform_like() } else { bank })
}

pub struct TrainOutcome {
    pub model: Model,
    pub rows: Vec<MetricRow>,
}

/// Trains per `cfg` without touching the filesystem beyond reading the rig.
pub fn train_model(cfg: &RunConfig) -> Result<TrainOutcome> {
    let rig = cfg.rig()?;
    let views = rig.views();
    let mut model = Model::new(cfg.model_config()?)?;
    let stream = cfg.train_stream(&rig)?;
    let eval = cfg.eval_stream(&rig)?.samples(cfg.eval_count())?;
    let rows = train::train(&mut model, &views, |k| stream.sample(k), &eval, &cfg.loss_config(), &cfg.train_config())?;
    Ok(TrainOutcome { model, rows })
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,iou_vehicle,iou_drivable\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.iou_vehicle, r.iou_drivable);
    }
    s
}

/// `train`: writes the resolved config, metrics CSV, checkpoint, and the
/// first training scene with its renders into the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let out = cfg.out_dir();
    create_dir(&out)?;
    let rig = cfg.rig()?;
    let scene = generate(cfg.seed << 20, &cfg.gen_params()?, &rig.views())?;
    let scene_path = out.join("scene_0000.json");
    fs::write(&scene_path, SceneFile::from_scene(&scene, &cfg.rig_reference()).to_json())
        .map_err(|e| CliError::io(&scene_path, e))?;
    for cam in &rig.cameras {
        let img = eaf_core::synth::render(&scene, &cam.view);
        pnm::write_file(&out.join(format!("scene_0000_{}.ppm", cam.name)), &pnm::encode_ppm(&img))?;
    }
    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml()).map_err(|e| CliError::io(&config_path, e))?;

    let outcome = train_model(cfg)?;
    let metrics = out.join("metrics.csv");
    fs::write(&metrics, metrics_csv(&outcome.rows)).map_err(|e| CliError::io(&metrics, e))?;
    checkpoint::save(&out.join("checkpoint.bin"), &outcome.model)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub perturbation: Option<PerturbSpec>,
    pub lambda: f64,
    pub vehicle: IouCounts,
    pub drivable: IouCounts,
    /// Per distance band from the ego origin: (vehicle, drivable).
    pub bands: Vec<(IouCounts, IouCounts)>,
}

impl EvalReport {
    pub fn mean_iou(&self) -> f64 {
        0.5 * (self.vehicle.iou() + self.drivable.iou())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        match &self.perturbation {
            Some(p) => {
                let _ = writeln!(s, "rig perturbation applied: {p}; fields recomputed");
            }
            None => s.push_str("rig: as configured\n"),
        }
        let _ = writeln!(s, "lambda {:.6}", self.lambda);
        let _ = writeln!(
            s,
            "iou {} {:.6} {} {:.6} mean {:.6}",
            CLASS_NAMES[0],
            self.vehicle.iou(),
            CLASS_NAMES[1],
            self.drivable.iou(),
            self.mean_iou()
        );
        for (b, (v, d)) in self.bands.iter().enumerate() {
            let (lo, hi) = (b as f64 * BAND_WIDTH, (b + 1) as f64 * BAND_WIDTH);
            let _ = writeln!(
                s,
                "band {lo:.0}-{hi:.0}m {} {:.6} {} {:.6}",
                CLASS_NAMES[0],
                v.iou(),
                CLASS_NAMES[1],
                d.iou()
            );
        }
        s
    }
}

/// Held-out IoU of `model` on the configured rig, optionally perturbed, with
/// fields recomputed for the rig actually used.
pub fn evaluate_model(cfg: &RunConfig, model: &Model, perturb: Option<&PerturbSpec>) -> Result<EvalReport> {
    let rig = cfg.rig()?;
    let eval_rig = match perturb {
        Some(p) => rig.perturbed(p)?,
        None => rig.clone(),
    };
    // Scenes and their ground truth do not depend on the cameras; only the
    // renders use the (possibly perturbed) rig.
    let stream = cfg.eval_stream(&rig)?;
    let views = eval_rig.views();
    let bank = field_bank(model, &views)?;
    let grid = &model.config().grid;
    let mut report = EvalReport {
        perturbation: perturb.copied(),
        lambda: model.lambda(),
        vehicle: IouCounts::default(),
        drivable: IouCounts::default(),
        bands: Vec::new(),
    };
    for k in 0..cfg.eval_count() {
        let seed = if stream.fixed { stream.base_seed } else { stream.base_seed.wrapping_add(k as u64) };
        let scene = generate(seed, &stream.params, &stream.rig)?;
        let sample = Sample::render(&scene, &views, grid);
        let (veh, drv) = predict_masks(model, &bank, &sample.images)?;
        report.vehicle.add(IouCounts::of(&veh, &sample.masks.vehicle));
        report.drivable.add(IouCounts::of(&drv, &sample.masks.drivable));
        let bv = distance_banded_counts(grid, &veh, &sample.masks.vehicle);
        let bd = distance_banded_counts(grid, &drv, &sample.masks.drivable);
        if report.bands.len() < bv.len() {
            report.bands.resize(bv.len(), Default::default());
        }
        for (b, (v, d)) in bv.into_iter().zip(bd).enumerate() {
            report.bands[b].0.add(v);
            report.bands[b].1.add(d);
        }
    }
    Ok(report)
}

/// `eval`: loads the checkpoint into a model built from `cfg`.
pub fn eval(cfg: &RunConfig, checkpoint_path: &Path, perturb: Option<&PerturbSpec>) -> Result<EvalReport> {
    let mut model = Model::new(cfg.model_config()?)?;
    checkpoint::load_into(checkpoint_path, &mut model)?;
    evaluate_model(cfg, &model, perturb)
}
