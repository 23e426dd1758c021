//! Field-bank computation across worker threads.

use std::num::NonZeroUsize;

use eaf_core::field::{compute_field, feature_size_for, AttentionField, FieldBank, FieldConfig};
use eaf_core::geometry::{BevGrid, CameraView};

use crate::Result;

/// Worker cap: `EAF_THREADS` when set to a positive integer, otherwise the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var("EAF_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1))
}

/// Same result as [`eaf_core::field::field_bank`], one (view, scale) field
/// per task.
pub fn field_bank(grid: &BevGrid, views: &[CameraView], patches: &[usize], cfg: &FieldConfig) -> Result<FieldBank> {
    let tasks: Vec<(usize, usize)> =
        (0..views.len()).flat_map(|v| (0..patches.len()).map(move |s| (v, s))).collect();
    let workers = worker_count().min(tasks.len()).max(1);
    let run = |&(v, s): &(usize, usize)| -> Result<AttentionField> {
        let fs = feature_size_for(&views[v], patches[s])?;
        Ok(compute_field(grid, &views[v], fs, cfg, s)?)
    };
    let fields: Vec<AttentionField> = if workers == 1 {
        tasks.iter().map(run).collect::<Result<_>>()?
    } else {
        let chunk = tasks.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> =
                tasks.chunks(chunk).map(|part| scope.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>())).collect();
            let mut out = Vec::with_capacity(tasks.len());
            for h in handles {
                out.extend(h.join().expect("field worker panicked")?);
            }
            Ok::<_, crate::CliError>(out)
        })?
    };
    Ok(FieldBank::from_fields(fields, views.len(), patches.len())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use eaf_core::synth::{toy_grid, toy_rig};

    #[test]
    fn matches_serial_bank() {
        let grid = toy_grid();
        let rig = toy_rig();
        let cfg = FieldConfig::default();
        let serial = eaf_core::field::field_bank(&grid, &rig, &[16, 4], &cfg).unwrap();
        assert_eq!(field_bank(&grid, &rig, &[16, 4], &cfg).unwrap(), serial);
    }
}
