//! Lossless run checkpoints. Floats are written in shortest-roundtrip
//! decimal form, so a reloaded state continues the march bit for bit.

use crate::config::RunConfig;
use iga::assembly::Problem;
use iga::timesolver::TimeState;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub case: String,
    pub p: usize,
    pub a: usize,
    pub b: usize,
    pub nel: [usize; 3],
    pub dt: f64,
    /// Time at step index zero; step times are `t_anchor + index * dt`.
    pub t_anchor: f64,
    pub step_index: usize,
    pub u: Vec<f64>,
    pub pres: Vec<f64>,
    pub v: Vec<f64>,
    pub udot: Vec<f64>,
    pub pdot: Vec<f64>,
    pub vdot: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(
        cfg: &RunConfig,
        state: &TimeState,
        t_anchor: f64,
        step_index: usize,
    ) -> Checkpoint {
        Checkpoint {
            case: cfg.case.to_string(),
            p: cfg.p,
            a: cfg.a,
            b: cfg.b,
            nel: cfg.nel,
            dt: cfg.dt,
            t_anchor,
            step_index,
            u: state.u.clone(),
            pres: state.p.clone(),
            v: state.v.clone(),
            udot: state.udot.clone(),
            pdot: state.pdot.clone(),
            vdot: state.vdot.clone(),
        }
    }

    /// Rebuilds the marching state; the problem must match the stored
    /// discretization sizes.
    pub fn restore(&self, pr: &Problem) -> Result<TimeState, String> {
        let nv = 3 * pr.space.n_vel_ctrl();
        let np = pr.space.n_pres_ctrl();
        if self.u.len() != nv || self.pres.len() != np {
            return Err(format!(
                "checkpoint stores {} displacement and {} pressure coefficients \
                 but the mesh needs {nv} and {np}",
                self.u.len(),
                self.pres.len()
            ));
        }
        Ok(TimeState {
            t: self.t_anchor + self.step_index as f64 * self.dt,
            u: self.u.clone(),
            p: self.pres.clone(),
            v: self.v.clone(),
            udot: self.udot.clone(),
            pdot: self.pdot.clone(),
            vdot: self.vdot.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self).map_err(std::io::Error::other)
    }

    pub fn load(path: &Path) -> std::io::Result<Checkpoint> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        serde_json::from_reader(f).map_err(std::io::Error::other)
    }
}
