//! Append-only training log.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Per-layer snapshot taken after an optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub step: usize,
    pub layer: String,
    /// ‖running_mean‖₂, or NaN for layers without batch norm.
    pub bn_mean_norm: f64,
    pub bn_var_norm: f64,
    pub weight_l2: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    steps: Vec<StepRecord>,
    layers: Vec<LayerRecord>,
}

impl TrainRecord {
    pub fn new() -> Self {
        Self::default()
    }

    /// Step indices must strictly increase.
    pub fn push_step(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if rec.step <= last.step {
                return Err(Error::Config(format!(
                    "step {} does not follow step {}",
                    rec.step, last.step
                )));
            }
        }
        self.steps.push(rec);
        Ok(())
    }

    /// Layer snapshots must belong to the latest recorded step.
    pub fn push_layer(&mut self, rec: LayerRecord) -> Result<()> {
        match self.steps.last() {
            Some(s) if s.step == rec.step => {
                self.layers.push(rec);
                Ok(())
            }
            _ => Err(Error::Config(format!(
                "layer snapshot for step {} has no matching step record",
                rec.step
            ))),
        }
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn layers(&self) -> &[LayerRecord] {
        &self.layers
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    /// Mean loss over the last `window` steps.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        if self.steps.is_empty() || window == 0 {
            return None;
        }
        let tail = &self.steps[self.steps.len().saturating_sub(window)..];
        Some(tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64)
    }

    /// Sum over layers of the total variation of ‖running_mean‖ across steps.
    pub fn bn_mean_total_variation(&self) -> f64 {
        let mut names: Vec<&str> = self.layers.iter().map(|l| l.layer.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
            .iter()
            .map(|name| {
                let traj: Vec<f64> = self
                    .layers
                    .iter()
                    .filter(|l| l.layer == *name && l.bn_mean_norm.is_finite())
                    .map(|l| l.bn_mean_norm)
                    .collect();
                traj.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>()
            })
            .sum()
    }

    /// CSV with columns `step,loss,lr,layer,bn_mean_norm,bn_var_norm,weight_l2`,
    /// one row per layer snapshot. Steps without snapshots get one row
    /// with empty layer fields.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,loss,lr,layer,bn_mean_norm,bn_var_norm,weight_l2")?;
        let fmt = |v: f64| if v.is_finite() { format!("{v:.6}") } else { String::new() };
        let mut li = 0;
        for s in &self.steps {
            let start = li;
            while li < self.layers.len() && self.layers[li].step == s.step {
                let l = &self.layers[li];
                writeln!(
                    out,
                    "{},{:.6},{:.6e},{},{},{},{}",
                    s.step,
                    s.loss,
                    s.lr,
                    l.layer,
                    fmt(l.bn_mean_norm),
                    fmt(l.bn_var_norm),
                    fmt(l.weight_l2)
                )?;
                li += 1;
            }
            if li == start {
                writeln!(out, "{},{:.6},{:.6e},,,,", s.step, s.loss, s.lr)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(step: usize, name: &str, mean: f64) -> LayerRecord {
        LayerRecord { step, layer: name.into(), bn_mean_norm: mean, bn_var_norm: 1.0, weight_l2: 2.0 }
    }

    #[test]
    fn steps_strictly_increase() {
        let mut r = TrainRecord::new();
        r.push_step(StepRecord { step: 0, loss: 1.0, lr: 0.1 }).unwrap();
        assert!(r.push_step(StepRecord { step: 0, loss: 1.0, lr: 0.1 }).is_err());
        assert!(r.push_layer(layer(1, "a", 0.0)).is_err());
        r.push_layer(layer(0, "a", 0.0)).unwrap();
    }

    #[test]
    fn losses_and_variation() {
        let mut r = TrainRecord::new();
        for (s, m) in [(0, 1.0), (1, 3.0), (2, 2.0)] {
            r.push_step(StepRecord { step: s, loss: 4.0 - s as f64, lr: 0.1 }).unwrap();
            r.push_layer(layer(s, "a", m)).unwrap();
            r.push_layer(layer(s, "b", 10.0)).unwrap();
        }
        assert_eq!(r.initial_loss(), Some(4.0));
        assert_eq!(r.final_loss(2), Some(2.5));
        assert_eq!(r.bn_mean_total_variation(), 3.0);
    }

    #[test]
    fn csv_layout() {
        let mut r = TrainRecord::new();
        r.push_step(StepRecord { step: 0, loss: 1.5, lr: 0.1 }).unwrap();
        r.push_layer(LayerRecord { bn_mean_norm: f64::NAN, ..layer(0, "fc", 0.0) }).unwrap();
        r.push_step(StepRecord { step: 1, loss: 1.0, lr: 0.05 }).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,loss,lr,layer,bn_mean_norm,bn_var_norm,weight_l2\n\
             0,1.500000,1.000000e-1,fc,,1.000000,2.000000\n\
             1,1.000000,5.000000e-2,,,,\n"
        );
    }
}
