//! Evaluation harness: the per-(map, object) success matrix with the
//! uniform / Zipfian / rare accuracy summaries, plus heatmap emission.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zipflab_agent::{run_trial, AgentNet, Config, MemBuffer};
use zipflab_envs::{MapSpec, TrialSampler, ZipfParams};
use zipflab_numeric::{ParamSet, Real};

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub zipfian_accuracy: f64,
    pub uniform_accuracy: f64,
    pub rare_accuracy: f64,
    pub matrix: Vec<Vec<f64>>,
    pub trials_per_cell: usize,
    pub zipfian_trials: usize,
}

pub struct EvalContext<'a, R: Real> {
    pub net: &'a AgentNet,
    pub params: &'a ParamSet<R>,
    pub mem: &'a MemBuffer<R>,
    pub cfg: &'a Config,
    pub maps: &'a [MapSpec],
    pub pool: Option<&'a rayon::ThreadPool>,
}

/// Success fraction per (map, object) cell under the greedy policy.
pub fn eval_uniform<R: Real>(ctx: &EvalContext<R>, trials_per_cell: usize) -> Result<Vec<Vec<f64>>> {
    let cells: Vec<(usize, usize)> = (0..ctx.cfg.n_maps)
        .flat_map(|m| (0..ctx.cfg.n_objects).map(move |o| (m, o)))
        .collect();
    let run_cell = |&(m, o): &(usize, usize)| -> Result<f64, zipflab_agent::AgentError> {
        let mut wins = 0usize;
        for trial in 0..trials_per_cell {
            let mut rng = ChaCha8Rng::seed_from_u64(
                ctx.cfg.seed ^ ((m as u64) << 40) ^ ((o as u64) << 20) ^ trial as u64,
            );
            let ok = run_trial(
                ctx.net,
                ctx.params,
                ctx.mem,
                ctx.cfg,
                ctx.maps[m].clone(),
                o,
                true,
                &mut rng,
            )?;
            if ok {
                wins += 1;
            }
        }
        Ok(wins as f64 / trials_per_cell as f64)
    };
    let flat: Vec<f64> = match ctx.pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            cells.par_iter().map(run_cell).collect::<Result<Vec<_>, _>>()
        })?,
        None => cells.iter().map(run_cell).collect::<Result<Vec<_>, _>>()?,
    };
    Ok(flat
        .chunks(ctx.cfg.n_objects)
        .map(|row| row.to_vec())
        .collect())
}

/// Success fraction over trials drawn from the training distribution.
pub fn eval_zipfian<R: Real>(ctx: &EvalContext<R>, n_trials: usize, seed: u64) -> Result<f64> {
    let zp = ZipfParams::new(ctx.cfg.n_maps, ctx.cfg.zipf_exponent)?;
    let zo = ZipfParams::new(ctx.cfg.n_objects, ctx.cfg.zipf_exponent)?;
    let sampler = TrialSampler::new(&zp, &zo);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials: Vec<(usize, usize)> = (0..n_trials).map(|_| sampler.sample(&mut rng)).collect();

    let run_one = |(i, &(m, o)): (usize, &(usize, usize))| -> Result<bool, zipflab_agent::AgentError> {
        let mut trng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
        run_trial(
            ctx.net,
            ctx.params,
            ctx.mem,
            ctx.cfg,
            ctx.maps[m].clone(),
            o,
            true,
            &mut trng,
        )
    };
    let results: Vec<bool> = match ctx.pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            trials
                .par_iter()
                .enumerate()
                .map(run_one)
                .collect::<Result<Vec<_>, _>>()
        })?,
        None => trials
            .iter()
            .enumerate()
            .map(run_one)
            .collect::<Result<Vec<_>, _>>()?,
    };
    Ok(results.iter().filter(|&&b| b).count() as f64 / n_trials as f64)
}

/// Mean over the rarest ceil(20%) maps x rarest ceil(20%) objects
/// (rarity grows with index).
pub fn eval_rare(matrix: &[Vec<f64>], n_maps: usize, n_objects: usize) -> f64 {
    let rare_maps = n_maps.div_ceil(5).max(1);
    let rare_objs = n_objects.div_ceil(5).max(1);
    let mut total = 0.0;
    let mut count = 0usize;
    for row in matrix.iter().skip(n_maps - rare_maps) {
        for &v in row.iter().skip(n_objects - rare_objs) {
            total += v;
            count += 1;
        }
    }
    total / count as f64
}

pub fn mean_of(matrix: &[Vec<f64>]) -> f64 {
    let n: usize = matrix.iter().map(|r| r.len()).sum();
    matrix.iter().flatten().sum::<f64>() / n as f64
}

/// Full report: matrix, uniform, Zipfian and rare accuracy.
pub fn evaluate<R: Real>(
    ctx: &EvalContext<R>,
    trials_per_cell: usize,
    zipf_trials: usize,
) -> Result<EvalReport> {
    let matrix = eval_uniform(ctx, trials_per_cell)?;
    let uniform_accuracy = mean_of(&matrix);
    let rare_accuracy = eval_rare(&matrix, ctx.cfg.n_maps, ctx.cfg.n_objects);
    let zipfian_accuracy = eval_zipfian(ctx, zipf_trials, ctx.cfg.seed ^ 0xE7A1_5EED)?;
    Ok(EvalReport {
        zipfian_accuracy,
        uniform_accuracy,
        rare_accuracy,
        matrix,
        trials_per_cell,
        zipfian_trials: zipf_trials,
    })
}

/// heatmap.csv: header row/column of ids, cells to 4 decimals.
/// heatmap.pgm: binary 8-bit grayscale, one pixel per cell,
/// value = round(255 * cell).
pub fn emit_heatmap(matrix: &[Vec<f64>], dir: &Path) -> Result<()> {
    let csv_path = dir.join("heatmap.csv");
    let mut csv = std::fs::File::create(&csv_path)
        .with_context(|| format!("create {}", csv_path.display()))?;
    let n_objects = matrix.first().map(|r| r.len()).unwrap_or(0);
    write!(csv, "map\\object")?;
    for o in 0..n_objects {
        write!(csv, ",{o}")?;
    }
    writeln!(csv)?;
    for (m, row) in matrix.iter().enumerate() {
        write!(csv, "{m}")?;
        for v in row {
            write!(csv, ",{v:.4}")?;
        }
        writeln!(csv)?;
    }

    let pgm_path = dir.join("heatmap.pgm");
    let mut pgm = std::fs::File::create(&pgm_path)
        .with_context(|| format!("create {}", pgm_path.display()))?;
    writeln!(pgm, "P5")?;
    writeln!(pgm, "{} {}", n_objects, matrix.len())?;
    writeln!(pgm, "255")?;
    let bytes: Vec<u8> = matrix
        .iter()
        .flatten()
        .map(|&v| (255.0 * v).round() as u8)
        .collect();
    pgm.write_all(&bytes)?;
    Ok(())
}

/// Re-read a heatmap.csv back into a matrix (round-trip support).
pub fn read_heatmap_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()?;
        rows.push(cells);
    }
    Ok(rows)
}

pub fn write_report(report: &EvalReport, cfg: &Config, dir: &Path) -> Result<()> {
    let path = dir.join("report.txt");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "env: {} mode: {}", cfg.env.as_str(), cfg.mode.as_str())?;
    writeln!(f, "maps: {} objects: {} zipf_e: {}", cfg.n_maps, cfg.n_objects, cfg.zipf_exponent)?;
    writeln!(f, "zipfian_accuracy: {:.4} ({} trials)", report.zipfian_accuracy, report.zipfian_trials)?;
    writeln!(f, "uniform_accuracy: {:.4} ({} trials/cell)", report.uniform_accuracy, report.trials_per_cell)?;
    writeln!(f, "rare_accuracy: {:.4}", report.rare_accuracy)?;
    writeln!(f, "matrix (rows = maps, cols = objects, rarity grows with index):")?;
    for row in &report.matrix {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
        writeln!(f, "  {}", cells.join(" "))?;
    }
    Ok(())
}
