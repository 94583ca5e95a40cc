//! The three trained networks and how each is derived from a base config.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::eval::Models;
use crate::manifest::derive_seed;
use crate::model::{load_checkpoint, CommandMode, ModelConfig, ModelError};
use crate::train::{train, LabelMode, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Cgnet,
    Agnostic,
    Retrieval,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Cgnet, Role::Agnostic, Role::Retrieval];

    pub fn name(&self) -> &'static str {
        match self {
            Role::Cgnet => "cgnet",
            Role::Agnostic => "agnostic",
            Role::Retrieval => "retrieval",
        }
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.name())
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        match self {
            Role::Cgnet => base.clone(),
            Role::Agnostic => ModelConfig { command_mode: CommandMode::Constant, ..base.clone() },
            Role::Retrieval => {
                let mut c = base.clone();
                c.anchors.scales = base.anchors.scales.iter().map(|s| s * 2.0).collect();
                c
            }
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let label_mode = match self {
            Role::Cgnet => LabelMode::Command,
            Role::Agnostic => LabelMode::Agnostic,
            Role::Retrieval => LabelMode::ObjectBoxes,
        };
        let seed = match self {
            Role::Cgnet => base.seed,
            _ => derive_seed(base.seed, *self as u64),
        };
        TrainConfig { label_mode, seed, ..base.clone() }
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Role::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown model role `{s}` (expected cgnet, agnostic or retrieval)"))
    }
}

pub fn train_role(
    ds: &Dataset,
    role: Role,
    model: &ModelConfig,
    tc: &TrainConfig,
    out_root: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let dir = out_root.map(|r| role.dir(r));
    train(ds, &role.model_config(model), &role.train_config(tc), dir.as_deref(), None)
}

/// Load whichever final checkpoints exist under `root`.
pub fn load_models(root: &Path) -> Result<Models, ModelError> {
    let load = |role: Role| -> Result<_, ModelError> {
        let p = role.dir(root).join(crate::train::FINAL_CHECKPOINT);
        if p.exists() {
            Ok(Some(load_checkpoint(&p)?.weights))
        } else {
            Ok(None)
        }
    };
    Ok(Models {
        cgnet: load(Role::Cgnet)?,
        agnostic: load(Role::Agnostic)?,
        retrieval: load(Role::Retrieval)?,
    })
}
