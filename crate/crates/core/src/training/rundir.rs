//! Run-directory artifacts.
//!
//! A completed pipeline run is a self-describing directory:
//!
//! ```text
//! config.json          resolved family + configuration (incl. the seed)
//! problems/prior.json  the three stage datasets
//! problems/val.json
//! problems/train.json
//! checkpoints/alpha0.bin     prior center (post-refinement weights)
//! checkpoints/atom-NN.bin    every prior atom
//! checkpoints/final.bin      posterior-mode selection
//! acceptance_log.csv   refinement accept/reject decisions
//! certificate.json     the PAC-Bayes certificate
//! report.csv           per-atom condition reports on the certification set
//! ```
//!
//! Checkpoints are flat little-endian `f64` weight vectors behind a layout
//! header, so a checkpoint is loadable without knowing which family wrote
//! it. All writers are deterministic: same run, same bytes.

use super::{AcceptanceRecord, PipelineConfig, PipelineError, PipelineOutput};
use crate::conditions::{ConditionReport, REPORT_CSV_HEADER};
use crate::optimizers::{BlockSpec, HyperLayout, Hyperparameters};
use crate::problems::Family;
use serde::Serialize;
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 4] = b"L2OH";
const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a weight vector with its layout header.
pub fn save_checkpoint(path: &Path, hyper: &Hyperparameters) -> Result<(), PipelineError> {
    let layout = hyper.layout();
    let mut buf = Vec::with_capacity(16 + hyper.flat().len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(layout.blocks.len() as u32).to_le_bytes());
    for block in &layout.blocks {
        let name = block.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(block.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(block.cols as u64).to_le_bytes());
    }
    for w in hyper.flat() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        if self.rest.len() < n {
            return Err(PipelineError::Checkpoint {
                path: self.path.display().to_string(),
                reason: format!("truncated: wanted {n} more bytes, found {}", self.rest.len()),
            });
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, PipelineError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read a checkpoint back; the layout is reconstructed from the header.
pub fn load_checkpoint(path: &Path) -> Result<Hyperparameters, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |reason: String| PipelineError::Checkpoint {
        path: path.display().to_string(),
        reason,
    };
    let mut r = Reader {
        path,
        rest: &bytes,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let n_blocks = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| bad(format!("block name not utf-8: {e}")))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        blocks.push(BlockSpec::new(name, rows, cols));
    }
    let layout = HyperLayout { blocks };
    let total = layout.total();
    let mut flat = Vec::with_capacity(total);
    for _ in 0..total {
        flat.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
    }
    if !r.rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.rest.len())));
    }
    Ok(Hyperparameters::new(layout, flat))
}

/// CSV header of `acceptance_log.csv`.
pub const ACCEPTANCE_CSV_HEADER: &str = "window,candidate_p_hat,incumbent_p_hat,accepted";

pub fn write_acceptance_log(path: &Path, log: &[AcceptanceRecord]) -> Result<(), PipelineError> {
    let mut out = String::from(ACCEPTANCE_CSV_HEADER);
    out.push('\n');
    for rec in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            rec.window, rec.candidate_p_hat, rec.incumbent_p_hat, rec.accepted
        ));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn write_report_csv(path: &Path, reports: &[ConditionReport]) -> Result<(), PipelineError> {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    family: Family,
    config: &'a PipelineConfig,
}

/// The exact bytes `config.json` holds for this family + configuration.
/// Callers compare against this to decide whether an existing run
/// directory was produced by the same resolved configuration.
pub fn config_json(family: Family, config: &PipelineConfig) -> Result<String, PipelineError> {
    let resolved = ResolvedConfig { family, config };
    serde_json::to_string_pretty(&resolved)
        .map(|json| json + "\n")
        .map_err(|e| PipelineError::Checkpoint {
            path: "config.json".into(),
            reason: format!("config serialization: {e}"),
        })
}

/// Serialize the resolved configuration (family + every parameter,
/// including the seed) as `config.json`.
pub fn write_config(path: &Path, family: Family, config: &PipelineConfig) -> Result<(), PipelineError> {
    let json = config_json(family, config)?;
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

/// Write the complete run directory for a finished pipeline.
pub fn write_run_dir(
    dir: &Path,
    family: Family,
    config: &PipelineConfig,
    output: &PipelineOutput,
) -> Result<(), PipelineError> {
    let problems = dir.join("problems");
    let checkpoints = dir.join("checkpoints");
    for d in [dir, &problems, &checkpoints] {
        std::fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    write_config(&dir.join("config.json"), family, config)?;
    output.datasets.prior.save(&problems.join("prior.json"))?;
    output.datasets.val.save(&problems.join("val.json"))?;
    output.datasets.train.save(&problems.join("train.json"))?;
    save_checkpoint(&checkpoints.join("alpha0.bin"), &output.state.hyper)?;
    for (i, atom) in output.prior.atoms.iter().enumerate() {
        save_checkpoint(&checkpoints.join(format!("atom-{i:02}.bin")), atom)?;
    }
    save_checkpoint(&checkpoints.join("final.bin"), &output.final_hyper)?;
    write_acceptance_log(&dir.join("acceptance_log.csv"), &output.state.acceptance)?;
    output.certificate.save(&dir.join("certificate.json"))?;
    write_report_csv(&dir.join("report.csv"), &output.train_reports)?;
    Ok(())
}
