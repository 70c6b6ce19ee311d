//! JSON files for nominal solutions and gain schedules. Each file carries a
//! shape header that is checked on load.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ene::GainSchedule;
use crate::error::{EneError, Result};
use crate::ocp::NominalSolution;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub horizon: usize,
    pub state: usize,
    pub control: usize,
    pub preview: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionFile {
    pub version: u32,
    pub shape: Shape,
    pub solution: NominalSolution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainFile {
    pub version: u32,
    pub shape: Shape,
    pub schedule: GainSchedule,
}

fn file_error(path: &Path, message: impl ToString) -> EneError {
    EneError::File {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| file_error(path, e))?;
    fs::write(path, text + "\n").map_err(|e| file_error(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| file_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_error(path, e))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(file_error(path, format!("unsupported format version {version}")));
    }
    Ok(())
}

fn solution_shape(s: &NominalSolution) -> Shape {
    let t = &s.trajectory;
    Shape {
        horizon: t.horizon(),
        state: t.x.first().map_or(0, |v| v.len()),
        control: t.u.first().map_or(0, |v| v.len()),
        preview: t.w.first().map_or(0, |v| v.len()),
    }
}

fn schedule_shape(g: &GainSchedule) -> Shape {
    Shape {
        horizon: g.horizon(),
        state: g.dims.state,
        control: g.dims.control,
        preview: g.dims.preview,
    }
}

pub fn save_solution(path: &Path, solution: &NominalSolution) -> Result<()> {
    write_json(
        path,
        &SolutionFile {
            version: FORMAT_VERSION,
            shape: solution_shape(solution),
            solution: solution.clone(),
        },
    )
}

pub fn load_solution(path: &Path) -> Result<NominalSolution> {
    let file: SolutionFile = read_json(path)?;
    check_version(path, file.version)?;
    let t = &file.solution.trajectory;
    let found = solution_shape(&file.solution);
    let consistent = t.x.len() == found.horizon + 1
        && t.w.len() == found.horizon + 1
        && t.active.len() == found.horizon
        && t.x.iter().all(|v| v.len() == found.state)
        && t.u.iter().all(|v| v.len() == found.control)
        && t.w.iter().all(|v| v.len() == found.preview);
    if found != file.shape || !consistent {
        return Err(file_error(path, format!("shape header {:?} does not match the stored trajectory", file.shape)));
    }
    Ok(file.solution)
}

pub fn save_gains(path: &Path, schedule: &GainSchedule) -> Result<()> {
    write_json(
        path,
        &GainFile {
            version: FORMAT_VERSION,
            shape: schedule_shape(schedule),
            schedule: schedule.clone(),
        },
    )
}

pub fn load_gains(path: &Path) -> Result<GainSchedule> {
    let file: GainFile = read_json(path)?;
    check_version(path, file.version)?;
    let g = &file.schedule;
    let d = g.dims;
    let consistent = g.value_xx.len() == g.horizon() + 1
        && g.steps
            .iter()
            .all(|s| s.k1.shape() == (d.control, d.state) && s.k2.shape() == (d.control, d.preview));
    if schedule_shape(g) != file.shape || !consistent {
        return Err(file_error(path, format!("shape header {:?} does not match the stored gains", file.shape)));
    }
    Ok(file.schedule)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| file_error(path, e))
}
