//! Spread of batch-norm batch statistics as a function of batch size.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct BnStatRow {
    pub batch_size: usize,
    pub batches: usize,
    /// Std across batches of the per-batch channel mean, averaged over channels.
    pub mean_std: f64,
    /// Same for the per-batch (biased) channel variance.
    pub var_std: f64,
}

/// Shuffles the samples of `data` once per batch size, cuts them into
/// disjoint batches and measures how much the per-channel batch
/// statistics fluctuate.
pub fn bn_stat_variance_experiment(data: &Tensor4, batch_sizes: &[usize], seed: u64) -> Result<Vec<BnStatRow>> {
    let s = data.shape();
    let plane = s.h * s.w;
    batch_sizes
        .iter()
        .map(|&bs| {
            if bs == 0 || s.n / bs < 2 {
                return Err(Error::Config(format!(
                    "batch size {bs} leaves fewer than two batches of {} samples",
                    s.n
                )));
            }
            let mut order: Vec<usize> = (0..s.n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ bs as u64));
            let batches = s.n / bs;
            let mut mean_std = 0.0;
            let mut var_std = 0.0;
            for c in 0..s.c {
                let mut means = Vec::with_capacity(batches);
                let mut vars = Vec::with_capacity(batches);
                for b in 0..batches {
                    let vals = order[b * bs..(b + 1) * bs]
                        .iter()
                        .flat_map(|&n| data.plane(n, c).iter().map(|&v| f64::from(v)));
                    let count = (bs * plane) as f64;
                    let (sum, sq) = vals.fold((0.0, 0.0), |(a, q), v| (a + v, q + v * v));
                    let m = sum / count;
                    means.push(m);
                    vars.push((sq / count - m * m).max(0.0));
                }
                mean_std += std(&means);
                var_std += std(&vars);
            }
            Ok(BnStatRow {
                batch_size: bs,
                batches,
                mean_std: mean_std / s.c as f64,
                var_std: var_std / s.c as f64,
            })
        })
        .collect()
}

fn std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}
