//! Checkpoints: one tensor file per parameter and per optimizer moment, plus
//! a JSON manifest carrying the configs, the step counter, and the init seed.
//! The frozen encoder is rebuilt from the seed rather than stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::numio::{load_tensor, save_tensor, RunConfig, TensorFile};

use super::model::ToyModel;
use super::train::{AdamMoments, StepMetrics, TrainOptions, TrainRun, TrainState};
use super::ToycapError;

const FORMAT: &str = "capalign-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    init_seed: u64,
    run: RunConfig,
    opts: TrainOptions,
    state: TrainState,
    moment_count: usize,
    /// Parameter names in layout order; doubles as a layout fingerprint.
    params: Vec<String>,
}

fn tensor_path(dir: &Path, sub: &str, index: usize) -> std::path::PathBuf {
    dir.join(sub).join(format!("{index:03}.tnsr"))
}

pub fn save_checkpoint(
    dir: &Path,
    run: &TrainRun,
    cfg: &RunConfig,
    opts: &TrainOptions,
) -> Result<(), ToycapError> {
    let model = &run.model;
    for sub in ["params", "moments_m", "moments_v"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| checkpoint_io(dir, e))?;
    }
    for (i, mat) in model.params.mats.iter().enumerate() {
        save_tensor(&tensor_path(dir, "params", i), &TensorFile::from_mat(mat))?;
    }
    for (i, mat) in run.moments.m.iter().enumerate() {
        save_tensor(&tensor_path(dir, "moments_m", i), &TensorFile::from_mat(mat))?;
    }
    for (i, mat) in run.moments.v.iter().enumerate() {
        save_tensor(&tensor_path(dir, "moments_v", i), &TensorFile::from_mat(mat))?;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        init_seed: model.init_seed,
        run: cfg.clone(),
        opts: opts.clone(),
        state: run.state,
        moment_count: run.moments.count,
        params: model.layout.specs().iter().map(|s| s.name.clone()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(crate::numio::NumioError::from)?;
    fs::write(dir.join("manifest.json"), text + "\n").map_err(|e| checkpoint_io(dir, e))?;
    let history = serde_json::to_string_pretty(&run.history).map_err(crate::numio::NumioError::from)?;
    fs::write(dir.join("history.json"), history + "\n").map_err(|e| checkpoint_io(dir, e))?;
    Ok(())
}

fn checkpoint_io(dir: &Path, e: std::io::Error) -> ToycapError {
    ToycapError::Checkpoint(format!("{}: {e}", dir.display()))
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ToyModel,
    pub moments: AdamMoments,
    pub state: TrainState,
    pub history: Vec<StepMetrics>,
    pub run: RunConfig,
    pub opts: TrainOptions,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, ToycapError> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| checkpoint_io(dir, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(crate::numio::NumioError::from)?;
    if manifest.format != FORMAT {
        return Err(ToycapError::Checkpoint(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    manifest.run.validate().map_err(|e| ToycapError::Checkpoint(e.to_string()))?;
    manifest.opts.validate()?;

    let mut model = ToyModel::new(manifest.opts.model.clone(), manifest.init_seed)?;
    let names: Vec<String> = model.layout.specs().iter().map(|s| s.name.clone()).collect();
    if names != manifest.params {
        return Err(ToycapError::Checkpoint(
            "stored parameter list does not match the model layout".into(),
        ));
    }

    let load_all = |sub: &str| -> Result<Vec<Mat>, ToycapError> {
        let mut out = Vec::with_capacity(names.len());
        for i in 0..names.len() {
            let t = load_tensor(&tensor_path(dir, sub, i))?;
            out.push(t.to_mat()?);
        }
        Ok(out)
    };
    let params = load_all("params")?;
    for (i, (mat, spec)) in params.iter().zip(model.layout.specs()).enumerate() {
        if mat.shape() != (spec.rows, spec.cols) {
            return Err(ToycapError::Checkpoint(format!(
                "tensor {i} ({}) has shape {:?}, layout expects {:?}",
                spec.name,
                mat.shape(),
                (spec.rows, spec.cols)
            )));
        }
    }
    model.params.mats = params;
    let moments = AdamMoments {
        m: load_all("moments_m")?,
        v: load_all("moments_v")?,
        count: manifest.moment_count,
    };
    for (side, mats) in [("m", &moments.m), ("v", &moments.v)] {
        for (mat, spec) in mats.iter().zip(model.layout.specs()) {
            if mat.shape() != (spec.rows, spec.cols) {
                return Err(ToycapError::Checkpoint(format!(
                    "moment {side} tensor for {} has shape {:?}",
                    spec.name,
                    mat.shape()
                )));
            }
        }
    }

    let history_text =
        fs::read_to_string(dir.join("history.json")).map_err(|e| checkpoint_io(dir, e))?;
    let history: Vec<StepMetrics> =
        serde_json::from_str(&history_text).map_err(crate::numio::NumioError::from)?;
    if history.len() != manifest.state.step {
        return Err(ToycapError::Checkpoint(format!(
            "history has {} steps but the manifest records {}",
            history.len(),
            manifest.state.step
        )));
    }

    Ok(Checkpoint {
        model,
        moments,
        state: manifest.state,
        history,
        run: manifest.run,
        opts: manifest.opts,
    })
}
