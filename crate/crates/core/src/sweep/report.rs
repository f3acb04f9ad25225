use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::vit::{Module, TapId};

use super::{best_per_module, AccuracyMatrix};

/// One line of a sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    /// `none` for clean data.
    pub corruption_kind: String,
    /// 0 for clean data.
    pub severity: u8,
    pub layer: usize,
    pub module: Module,
    pub depth_pct: f64,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub converged: bool,
    pub seed: u64,
}

/// One line of the best-per-module table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub dataset: String,
    pub corruption_kind: String,
    pub severity: u8,
    pub seed: u64,
    pub module: Module,
    pub best_accuracy: f64,
    pub best_layer: usize,
    pub best_depth_pct: f64,
    pub final_accuracy: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::storage(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

pub fn write_best_table_csv(path: impl AsRef<Path>, rows: &[BestRow]) -> Result<()> {
    write_rows(path.as_ref(), rows)
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::storage(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Groups rows by (dataset, corruption, severity, seed) in order of first
/// appearance and reduces each group to its best layer per module.
pub fn best_per_module_table(rows: &[ReportRow]) -> Result<Vec<BestRow>> {
    let mut groups: Vec<(&ReportRow, Vec<&ReportRow>)> = Vec::new();
    for r in rows {
        let same = |k: &&ReportRow| {
            k.dataset == r.dataset
                && k.corruption_kind == r.corruption_kind
                && k.severity == r.severity
                && k.seed == r.seed
        };
        match groups.iter_mut().find(|(k, _)| same(k)) {
            Some((_, members)) => members.push(r),
            None => groups.push((r, vec![r])),
        }
    }
    let mut out = Vec::new();
    for (key, members) in groups {
        let layers = members.iter().map(|r| r.layer).max().unwrap_or(0) + 1;
        let mut matrix = AccuracyMatrix::new(layers);
        for r in &members {
            if matrix.get(r.layer, r.module).is_some() {
                return Err(Error::Data(format!(
                    "duplicate row for layer {} module {} in {}",
                    r.layer, r.module, r.dataset
                )));
            }
            matrix.set(TapId::new(r.layer, r.module), r.accuracy)?;
        }
        for (module, (best, layer)) in best_per_module(&matrix) {
            out.push(BestRow {
                dataset: key.dataset.clone(),
                corruption_kind: key.corruption_kind.clone(),
                severity: key.severity,
                seed: key.seed,
                module,
                best_accuracy: best,
                best_layer: layer,
                best_depth_pct: matrix.depth_pct[layer],
                final_accuracy: matrix.get(layers - 1, module).expect("complete profile"),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(layer: usize, module: Module, accuracy: f64, seed: u64) -> ReportRow {
        ReportRow {
            dataset: "synth".into(),
            corruption_kind: "none".into(),
            severity: 0,
            layer,
            module,
            depth_pct: 50.0 * (layer + 1) as f64,
            accuracy,
            n_train: 8,
            n_test: 2,
            converged: true,
            seed,
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![row(0, Module::Act, 0.1 + 0.2, 1), row(1, Module::Act, 1.0 / 3.0, 1)];
        write_report_csv(&p, &rows).unwrap();
        assert_eq!(read_report_csv(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "dataset,corruption_kind,severity,layer,module,depth_pct,accuracy,n_train,n_test,converged,seed\n"
        ));
    }

    #[test]
    fn table_groups_by_seed() {
        let rows = vec![
            row(0, Module::FC2, 0.5, 1),
            row(1, Module::FC2, 0.4, 1),
            row(0, Module::FC2, 0.3, 2),
            row(1, Module::FC2, 0.6, 2),
        ];
        let t = best_per_module_table(&rows).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].best_layer, t[0].final_accuracy), (0, 0.4));
        assert_eq!((t[1].best_layer, t[1].best_accuracy), (1, 0.6));
        let dup = vec![row(0, Module::FC2, 0.5, 1), row(0, Module::FC2, 0.5, 1)];
        assert!(best_per_module_table(&dup).is_err());
    }
}
