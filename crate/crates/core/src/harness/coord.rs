//! Coordinate checks: activation sizes across widths after a few steps.

use serde::{Deserialize, Serialize};

use super::{RunConfig, StepOutcome, Trainer};
use crate::data::ShardSet;
use crate::error::{Error, Result};
use crate::model::{bind_params, forward, ForwardOptions, ParamSet, TokenBatch};
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMetric {
    /// RMS at initialization.
    Init,
    /// RMS after the training steps.
    After,
    /// RMS of the change between the two.
    Delta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub probe: String,
    /// One value per width, in the report's width order.
    pub init_rms: Vec<f64>,
    pub after_rms: Vec<f64>,
    pub delta_rms: Vec<f64>,
}

impl ProbeRow {
    pub fn values(&self, metric: ProbeMetric) -> &[f64] {
        match metric {
            ProbeMetric::Init => &self.init_rms,
            ProbeMetric::After => &self.after_rms,
            ProbeMetric::Delta => &self.delta_rms,
        }
    }

    /// Largest over smallest value across widths.
    pub fn ratio(&self, metric: ProbeMetric) -> f64 {
        let v = self.values(metric);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheckReport {
    pub widths: Vec<usize>,
    pub steps: u64,
    pub rows: Vec<ProbeRow>,
}

impl CoordCheckReport {
    pub fn row(&self, probe: &str) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.probe == probe)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("coordinate check after {} steps\n", self.steps);
        out.push_str(&format!("{:<10} {:<6}", "probe", "metric"));
        for w in &self.widths {
            out.push_str(&format!(" {:>11}", format!("M={w}")));
        }
        out.push_str(&format!(" {:>9}\n", "max/min"));
        for row in &self.rows {
            for metric in [ProbeMetric::Init, ProbeMetric::After, ProbeMetric::Delta] {
                let name = match metric {
                    ProbeMetric::Init => "init",
                    ProbeMetric::After => "after",
                    ProbeMetric::Delta => "delta",
                };
                out.push_str(&format!("{:<10} {:<6}", row.probe, name));
                for v in row.values(metric) {
                    out.push_str(&format!(" {v:>11.4e}"));
                }
                out.push_str(&format!(" {:>9.3}\n", row.ratio(metric)));
            }
        }
        out
    }
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

fn probe_values(params: &ParamSet<f32>, batch: &TokenBatch) -> Result<Vec<(String, Vec<f64>)>> {
    let mut graph = Graph::<f32>::new();
    let vars = bind_params(&mut graph, params);
    let out = forward(
        &mut graph,
        params,
        &vars,
        batch,
        ForwardOptions {
            record_probes: true,
        },
    )?;
    Ok(out
        .probes
        .iter()
        .map(|(name, v)| (name.clone(), graph.value(*v).to_f64()))
        .collect())
}

/// Trains `base` at each width for `steps` steps and measures every probe
/// on the first validation batch before and after.
pub fn coord_check(
    base: &RunConfig,
    widths: &[usize],
    steps: u64,
    shards: &ShardSet,
) -> Result<CoordCheckReport> {
    if widths.len() < 2 || widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidRun(
            "coordinate check needs at least two increasing widths".into(),
        ));
    }
    if steps == 0 {
        return Err(Error::InvalidRun("coordinate check needs at least one step".into()));
    }
    let mut rows: Vec<ProbeRow> = Vec::new();
    for (wi, &width) in widths.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model = cfg.model.with_width(width);
        cfg.max_steps = Some(steps);
        let mut trainer = Trainer::new(&cfg, shards)?;
        let batch = trainer.validation()[0].clone();
        let before = probe_values(trainer.params(), &batch)?;
        for _ in 0..steps {
            if trainer.train_step()? == StepOutcome::Diverged {
                return Err(Error::non_finite(format!(
                    "coordinate check diverged at width {width}"
                )));
            }
        }
        let after = probe_values(trainer.params(), &batch)?;
        for ((name, b), (_, a)) in before.iter().zip(&after) {
            if wi == 0 {
                rows.push(ProbeRow {
                    probe: name.clone(),
                    init_rms: Vec::new(),
                    after_rms: Vec::new(),
                    delta_rms: Vec::new(),
                });
            }
            let row = rows
                .iter_mut()
                .find(|r| &r.probe == name)
                .ok_or_else(|| Error::InvalidRun(format!("probe {name} missing at width {width}")))?;
            let delta: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            row.init_rms.push(rms(b));
            row.after_rms.push(rms(a));
            row.delta_rms.push(rms(&delta));
        }
    }
    Ok(CoordCheckReport {
        widths: widths.to_vec(),
        steps,
        rows,
    })
}
