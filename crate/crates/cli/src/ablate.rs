//! Hyperparameter sweep harness: train and evaluate per (value, seed),
//! one CSV row each, then per-value medians with absolute median
//! deviation across seeds.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Result};
use zipflab_agent::{train, Config};

use crate::eval::{evaluate, EvalContext};
use crate::make_pool;

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub param: String,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn new(param: &str, values: Vec<f64>, seeds: Vec<u64>) -> Result<Self> {
        if values.is_empty() || seeds.is_empty() {
            bail!("ablation grid needs at least one value and one seed");
        }
        if !matches!(param, "K" | "hp" | "t_k" | "t_f") {
            bail!("unknown ablation parameter '{param}' (expected K, hp, t_k or t_f)");
        }
        Ok(AblationGrid {
            param: param.to_string(),
            values,
            seeds,
        })
    }

    fn apply(&self, cfg: &mut Config, value: f64) {
        let v = value as usize;
        match self.param.as_str() {
            "K" => cfg.knn_k = v,
            "hp" => cfg.hop = v,
            "t_k" => cfg.t_k = v,
            "t_f" => cfg.t_f = v,
            _ => unreachable!(),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation from the median.
pub fn median_abs_dev(values: &[f64]) -> f64 {
    let med = median(values);
    let devs: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&devs)
}

/// Run the grid sequentially; failed runs become status=failed rows and
/// the sweep continues. Writes `ablation.csv` under `out_dir`.
pub fn run_ablation(grid: &AblationGrid, base: &Config, out_dir: &Path, verbose: bool) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("ablation.csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "param,value,seed,status,zipfian,uniform,rare")?;

    let mut per_value: Vec<(f64, Vec<(f64, f64, f64)>)> = Vec::new();
    for &value in &grid.values {
        let mut rows = Vec::new();
        for &seed in &grid.seeds {
            let mut cfg = base.clone();
            grid.apply(&mut cfg, value);
            cfg.seed = seed;
            let run_dir = out_dir.join(format!("{}_{}_s{}", grid.param, value, seed));
            if verbose {
                eprintln!("ablate: {} = {} seed {}", grid.param, value, seed);
            }
            match run_point(&cfg, &run_dir) {
                Ok((z, u, r)) => {
                    writeln!(csv, "{},{},{},ok,{:.4},{:.4},{:.4}", grid.param, value, seed, z, u, r)?;
                    rows.push((z, u, r));
                }
                Err(e) => {
                    eprintln!("ablation point {}={} seed {} failed: {e}", grid.param, value, seed);
                    writeln!(csv, "{},{},{},failed,,,", grid.param, value, seed)?;
                }
            }
        }
        per_value.push((value, rows));
    }

    writeln!(csv, "param,value,median_zipfian,median_uniform,median_rare,mad_zipfian,mad_uniform,mad_rare")?;
    for (value, rows) in &per_value {
        if rows.is_empty() {
            writeln!(csv, "{},{},,,,,,", grid.param, value)?;
            continue;
        }
        let z: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let u: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let r: Vec<f64> = rows.iter().map(|r| r.2).collect();
        writeln!(
            csv,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            grid.param,
            value,
            median(&z),
            median(&u),
            median(&r),
            median_abs_dev(&z),
            median_abs_dev(&u),
            median_abs_dev(&r)
        )?;
    }
    Ok(())
}

fn run_point(cfg: &Config, run_dir: &Path) -> Result<(f64, f64, f64)> {
    let result = train::<f32>(cfg, run_dir, false)?;
    let pool = make_pool(cfg.n_threads)?;
    let ctx = EvalContext {
        net: &result.net,
        params: &result.params,
        mem: &result.mem,
        cfg,
        maps: &result.maps,
        pool: pool.as_ref(),
    };
    let report = evaluate(&ctx, cfg.trials_per_cell, cfg.eval_trials)?;
    Ok((
        report.zipfian_accuracy,
        report.uniform_accuracy,
        report.rare_accuracy,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_mad() {
        assert_eq!(median(&[0.2, 0.5, 0.9]), 0.5);
        assert_eq!(median(&[0.2, 0.4]), 0.30000000000000004);
        assert_eq!(median_abs_dev(&[1.0, 2.0, 4.0]), 1.0);
    }

    #[test]
    fn grid_validation() {
        assert!(AblationGrid::new("K", vec![2.0], vec![1]).is_ok());
        assert!(AblationGrid::new("bogus", vec![2.0], vec![1]).is_err());
        assert!(AblationGrid::new("K", vec![], vec![1]).is_err());
    }
}
