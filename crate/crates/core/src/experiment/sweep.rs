//! Noise-rate and λ sweeps, and multi-seed batches of runs.
//!
//! Each sweep point is a self-contained training loop. Points run on worker
//! threads (at most one per available core) and share loaded datasets.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use crate::data::LabeledDataset;
use crate::error::Result;
use crate::losses::LambdaSchedule;
use crate::noise::NoiseKind;

use super::config::{DataSource, ExperimentConfig, NoiseSetting};
use super::metrics::{emit_metrics, EpochRecord};
use super::runner::{load_source, prepare_from, train_on, TrainedRun};

/// One finished sweep point.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub tag: String,
    pub path: Option<PathBuf>,
    pub records: Vec<EpochRecord>,
}

/// `<dir>/<stem>_<tag>.csv` next to `base`.
pub fn sweep_path(base: &Path, tag: &str) -> PathBuf {
    let stem = base
        .file_stem()
        .map_or_else(|| "metrics".into(), |s| s.to_string_lossy().into_owned());
    base.with_file_name(format!("{stem}_{tag}.csv"))
}

type Pool = Arc<(LabeledDataset, Option<LabeledDataset>)>;

fn same_data(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let synth = matches!(a.source, DataSource::Synth { .. });
    a.source == b.source
        && a.train_limit == b.train_limit
        && a.test_limit == b.test_limit
        && (!synth || a.seed == b.seed)
}

/// Trains every config, loading each distinct dataset once. Results come
/// back in input order.
pub fn run_many(configs: &[ExperimentConfig]) -> Result<Vec<TrainedRun>> {
    let mut pools: Vec<(usize, Pool)> = Vec::new();
    let mut pool_of = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        cfg.validate()?;
        let found = pools.iter().find(|(j, _)| same_data(&configs[*j], cfg));
        let pool = match found {
            Some((_, p)) => Arc::clone(p),
            None => {
                let p = Arc::new(load_source(cfg)?);
                pools.push((i, Arc::clone(&p)));
                p
            }
        };
        pool_of.push(pool);
    }
    drop(pools);

    let workers = thread::available_parallelism().map_or(1, |n| n.get());
    let mut results: Vec<Option<Result<TrainedRun>>> = (0..configs.len()).map(|_| None).collect();
    let jobs: Vec<usize> = (0..configs.len()).collect();
    for wave in jobs.chunks(workers) {
        let finished: Vec<(usize, Result<TrainedRun>)> = thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&i| {
                    let cfg = &configs[i];
                    let pool = Arc::clone(&pool_of[i]);
                    s.spawn(move || {
                        let data = prepare_from(cfg, &pool.0, pool.1.clone())?;
                        train_on(cfg, &data)
                    })
                })
                .collect();
            wave.iter()
                .zip(handles)
                .map(|(&i, h)| (i, h.join().expect("sweep worker panicked")))
                .collect()
        });
        for (i, r) in finished {
            results[i] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every job ran")).collect()
}

fn run_points(points: Vec<(String, ExperimentConfig)>, base: Option<&Path>) -> Result<Vec<SweepPoint>> {
    let configs: Vec<ExperimentConfig> = points.iter().map(|(_, c)| c.clone()).collect();
    let runs = run_many(&configs)?;
    points
        .into_iter()
        .zip(runs)
        .map(|((tag, _), run)| {
            let path = base.map(|b| sweep_path(b, &tag));
            if let Some(p) = &path {
                emit_metrics(&run.records, p)?;
            }
            Ok(SweepPoint {
                tag,
                path,
                records: run.records,
            })
        })
        .collect()
}

/// Repeats `cfg` at each noise rate, writing one CSV per rate when `base`
/// is given. A config without noise is swept with symmetric noise.
pub fn sweep_noise_rates(
    cfg: &ExperimentConfig,
    rates: &[f64],
    base: Option<&Path>,
) -> Result<Vec<SweepPoint>> {
    let points = rates
        .iter()
        .map(|&rate| {
            let mut c = cfg.clone();
            let setting = c.noise.take().unwrap_or(NoiseSetting {
                kind: NoiseKind::Symmetric,
                rate,
                flip_map: None,
            });
            c.noise = Some(NoiseSetting { rate, ..setting });
            (format!("eta{rate}"), c)
        })
        .collect();
    run_points(points, base)
}

/// Repeats `cfg` under each entropy schedule (`None` = no entropy term).
pub fn sweep_lambdas(
    cfg: &ExperimentConfig,
    schedules: &[Option<LambdaSchedule>],
    base: Option<&Path>,
) -> Result<Vec<SweepPoint>> {
    let points = schedules
        .iter()
        .map(|s| {
            let mut c = cfg.clone();
            c.set_entropy_schedule(*s)?;
            let tag = s.map_or_else(
                || "lambda-none".to_string(),
                |s| format!("lambda-{}", s.to_string().replace(':', "-")),
            );
            Ok((tag, c))
        })
        .collect::<Result<Vec<_>>>()?;
    run_points(points, base)
}

/// Runs `cfg` once per seed.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<Vec<EpochRecord>>> {
    let configs: Vec<_> = seeds
        .iter()
        .map(|&seed| ExperimentConfig { seed, ..cfg.clone() })
        .collect();
    Ok(run_many(&configs)?.into_iter().map(|r| r.records).collect())
}

/// Mean of the last record's test accuracy across runs.
pub fn mean_final_test_acc(runs: &[Vec<EpochRecord>]) -> f64 {
    let finals: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.last().map(|r| r.test_acc))
        .collect();
    finals.iter().sum::<f64>() / finals.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::parse_config_str;
    use crate::experiment::runner::run_experiment;
    use crate::losses::ScheduleKind;

    fn cfg() -> ExperimentConfig {
        parse_config_str(
            "dataset = synth\nsynth_n = 400\nsynth_classes = 3\nsynth_dim = 3\n\
             loss = ce\nepochs = 2\nbatch_size = 32\nlr = 0.05\n",
        )
        .unwrap()
    }

    #[test]
    fn paths_are_tagged() {
        assert_eq!(sweep_path(Path::new("out/run.csv"), "eta0.2"), PathBuf::from("out/run_eta0.2.csv"));
    }

    #[test]
    fn noise_sweep_writes_one_csv_per_rate() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("m.csv");
        let points = sweep_noise_rates(&cfg(), &[0.2, 0.4, 0.6, 0.8], Some(&base)).unwrap();
        assert_eq!(points.len(), 4);
        for p in &points {
            assert!(p.path.as_ref().unwrap().exists());
        }
        let csvs = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(csvs, 4);
    }

    #[test]
    fn sweep_points_match_single_runs() {
        let points = sweep_noise_rates(&cfg(), &[0.4], None).unwrap();
        let mut single = cfg();
        single.noise = Some(NoiseSetting {
            kind: NoiseKind::Symmetric,
            rate: 0.4,
            flip_map: None,
        });
        assert_eq!(points[0].records, run_experiment(&single).unwrap());
    }

    #[test]
    fn lambda_sweep_tags_and_schedules() {
        let schedules = [
            None,
            Some(LambdaSchedule::new(ScheduleKind::Constant, 0.1, 1).unwrap()),
            Some(LambdaSchedule::new(ScheduleKind::Linear, 0.3, 1).unwrap()),
        ];
        let points = sweep_lambdas(&cfg(), &schedules, None).unwrap();
        let tags: Vec<_> = points.iter().map(|p| p.tag.as_str()).collect();
        assert_eq!(tags, ["lambda-none", "lambda-constant-0.1", "lambda-linear-0.3"]);
        assert_eq!(points[2].records[0].lambda, 0.0);
        assert_eq!(points[2].records[1].lambda, 0.3);
    }

    #[test]
    fn seeds_differ() {
        let runs = run_seeds(&cfg(), &[1, 2]).unwrap();
        assert_ne!(runs[0], runs[1]);
        let m = mean_final_test_acc(&runs);
        assert!((0.0..=1.0).contains(&m));
    }
}
