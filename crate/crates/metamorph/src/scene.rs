//! On-disk scene and design documents.
//!
//! A scene is a structure plus its forms:
//! `{"bars": [...], "joints": [...], "springs": [...], "gravity": [...],
//!   "forms": [{"label": ..., "poses": [[px,py,pz,ax,ay,az], ...]}]}`.
//! A design document wraps a scene with the optimized spring parameters and
//! the stability report under the `metamorph/v1` schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rigidbody::{Form, Structure};
use crate::spring_energy::SpringParam;

/// Maximum joint-constraint violation a stored form may carry, millimeters.
pub const FORM_FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    #[serde(flatten)]
    pub structure: Structure,
    pub forms: Vec<Form>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.structure.validate()?;
        if self.forms.is_empty() {
            return Err(Error::InvalidScene("scene has no forms".into()));
        }
        for form in &self.forms {
            if form.poses.len() != self.structure.bars.len() {
                return Err(Error::InvalidScene(format!(
                    "form '{}' has {} poses for {} bars",
                    form.label,
                    form.poses.len(),
                    self.structure.bars.len()
                )));
            }
            if !form.poses.iter().all(|p| p.is_finite()) {
                return Err(Error::InvalidScene(format!("form '{}' has non-finite poses", form.label)));
            }
            let violation = self.structure.max_constraint_violation(form);
            if violation > FORM_FEASIBILITY_TOL {
                return Err(Error::InvalidScene(format!(
                    "form '{}' violates joint constraints by {violation} mm (tolerance {FORM_FEASIBILITY_TOL})",
                    form.label
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let scene: Scene = serde_json::from_str(&text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Stability summary of one form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormStability {
    pub label: String,
    /// Norm of the null-space-projected force residual.
    pub residual_norm: f64,
    /// Eigenvalues of the projected energy Hessian, ascending.
    pub eigenvalues: Vec<f64>,
    /// Spring potential at this form.
    pub potential: f64,
}

/// Result summary of a stability optimization run.
///
/// Wall time is reported on the console but never serialized so identical
/// runs produce byte-identical artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub forms: Vec<FormStability>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Design-variable block of a design document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignBlock {
    pub params: Vec<SpringParam>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

/// Versioned full output of the design stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignDocument {
    pub schema: String,
    pub scene: Scene,
    pub design: DesignBlock,
    #[serde(default)]
    pub report: Option<StabilityReport>,
}

pub const DESIGN_SCHEMA: &str = "metamorph/v1";

impl DesignDocument {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: DesignDocument = serde_json::from_str(&text)?;
        if doc.schema != DESIGN_SCHEMA {
            return Err(Error::InvalidScene(format!(
                "unsupported design schema '{}', expected '{DESIGN_SCHEMA}'",
                doc.schema
            )));
        }
        doc.scene.validate()?;
        if doc.design.params.len() != doc.scene.structure.springs.len() {
            return Err(Error::InvalidScene(
                "design parameter count does not match spring count".into(),
            ));
        }
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Serializes a value as pretty JSON with a trailing newline; output is a
/// pure function of the value, so re-exports are byte-identical.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
