//! End-to-end runs on the synthetic benchmark: train on some tracklets of
//! every identity, evaluate on the held-out tracklets, and sweep the
//! ablation ladder.

use std::collections::HashMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::memory::cosine;
use crate::model::Toggles;
use crate::synth::{generate_in_memory, Dataset, SynthConfig};
use crate::trainer::{MetricsRecord, Trainer};

/// Benchmark setup: the generated population and how each
/// identity/platform/session cell is split.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub synth: SynthConfig,
    /// Tracklets per cell used for training; the rest are evaluated.
    pub train_per_cell: usize,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                num_identities: 32,
                tracklets_per_cell: 10,
                noise_std: 0.03,
                ..SynthConfig::default()
            },
            train_per_cell: 8,
        }
    }
}

impl Benchmark {
    /// Generates the population for `seed` and splits it.
    pub fn split(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let synth = SynthConfig {
            seed,
            ..self.synth.clone()
        };
        if self.train_per_cell == 0 || self.train_per_cell >= synth.tracklets_per_cell {
            return Err(Error::InvalidConfig(format!(
                "train_per_cell must be in 1..{}, got {}",
                synth.tracklets_per_cell, self.train_per_cell
            )));
        }
        Ok(split_by_cell(&generate_in_memory(&synth)?, self.train_per_cell))
    }
}

/// Splits every identity/platform/session cell: the first `train_per_cell`
/// tracklets (in manifest order) go to the first set, the rest to the second.
pub fn split_by_cell(data: &Dataset, train_per_cell: usize) -> (Dataset, Dataset) {
    let mut seen: HashMap<(u32, u8, u8), usize> = HashMap::new();
    let empty = || Dataset {
        records: Vec::new(),
        frames: Vec::new(),
    };
    let (mut train, mut test) = (empty(), empty());
    for (r, f) in data.records.iter().zip(&data.frames) {
        let n = seen
            .entry((r.identity, r.platform as u8, r.session.number()))
            .or_insert(0);
        let dst = if *n < train_per_cell { &mut train } else { &mut test };
        *n += 1;
        dst.records.push(r.clone());
        dst.frames.push(f.clone());
    }
    (train, test)
}

/// Mean cosine distance between shape descriptors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeDistances {
    /// Same identity, different session.
    pub cross_session: f64,
    /// Different identities.
    pub cross_identity: f64,
}

impl ShapeDistances {
    /// `(cross_identity - cross_session) / cross_identity`.
    pub fn relative_margin(&self) -> f64 {
        (self.cross_identity - self.cross_session) / self.cross_identity
    }
}

pub fn shape_distances(f_s: &[Vec<f32>], data: &Dataset) -> Option<ShapeDistances> {
    let (mut same, mut n_same, mut diff, mut n_diff) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..f_s.len() {
        for j in i + 1..f_s.len() {
            let (a, b) = (&data.records[i], &data.records[j]);
            let d = 1.0 - f64::from(cosine(&f_s[i], &f_s[j]));
            if a.identity == b.identity {
                if a.session != b.session {
                    same += d;
                    n_same += 1;
                }
            } else {
                diff += d;
                n_diff += 1;
            }
        }
    }
    (n_same > 0 && n_diff > 0).then(|| ShapeDistances {
        cross_session: same / n_same as f64,
        cross_identity: diff / n_diff as f64,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub records: Vec<MetricsRecord>,
    pub shape: Option<ShapeDistances>,
    /// Wall-clock seconds for training and evaluation.
    pub seconds: f64,
}

impl RunOutcome {
    pub fn map3(&self) -> f64 {
        self.report.map3.unwrap_or(f64::NAN)
    }
}

/// Trains on the training tracklets for `config.seed` and evaluates the fused
/// descriptors on the held-out tracklets.
pub fn train_and_evaluate(config: &TrainConfig, bench: &Benchmark) -> Result<RunOutcome> {
    let (train, test) = bench.split(config.seed)?;
    train_and_evaluate_on(config, &train, &test)
}

/// Trains on `train` and evaluates on `test`.
pub fn train_and_evaluate_on(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    let start = std::time::Instant::now();
    let mut trainer = Trainer::<f32>::new(config.clone(), train.num_identities())?;
    let records = trainer.fit(train, None, |_| {})?;
    let embeddings = trainer.embeddings(test)?;
    let report = trainer.embedding_set(test)?.evaluate()?;
    let shape = if config.toggles.shape {
        let f_s: Vec<Vec<f32>> = embeddings.iter().filter_map(|e| e.f_s.clone()).collect();
        shape_distances(&f_s, test)
    } else {
        None
    };
    Ok(RunOutcome {
        report,
        records,
        shape,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    pub toggles: Toggles,
    /// One run per seed, in seed order.
    pub runs: Vec<RunOutcome>,
}

impl AblationRow {
    pub fn map3(&self) -> Vec<f64> {
        self.runs.iter().map(RunOutcome::map3).collect()
    }

    pub fn median(&self) -> f64 {
        median(&self.map3())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Runs every rung of the toggle ladder for every seed. `split` supplies the
/// train/test sets for a seed. Runs execute on separate threads; each is
/// fully determined by its config and data.
pub fn ablate<S>(config: &TrainConfig, seeds: &[u64], split: S) -> Result<Vec<AblationRow>>
where
    S: Fn(u64) -> Result<(Dataset, Dataset)> + Sync,
{
    let jobs: Vec<TrainConfig> = Toggles::ladder()
        .iter()
        .flat_map(|&(_, toggles)| {
            seeds.iter().map(move |&seed| TrainConfig {
                toggles,
                seed,
                ..config.clone()
            })
        })
        .collect();
    let results = run_parallel(&jobs, |c| {
        let (train, test) = split(c.seed)?;
        train_and_evaluate_on(c, &train, &test)
    })?;
    let mut results = results.into_iter();
    let rows = Toggles::ladder()
        .iter()
        .map(|&(name, toggles)| AblationRow {
            name,
            toggles,
            runs: results.by_ref().take(seeds.len()).collect(),
        })
        .collect();
    Ok(rows)
}

/// Maps `f` over `items` using all available cores, preserving order.
pub fn run_parallel<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<O>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= items.len() {
                            break done;
                        }
                        done.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every item processed")).collect()
}

/// Ablation table: one row per rung with a check mark per enabled module.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { " " };
    let mut out = String::from("setting     MDLR  VC-CJ  MGTM  PRSD  mAP-3 (median)  per seed\n");
    for r in rows {
        let seeds: Vec<String> = r.map3().iter().map(|m| format!("{:.4}", m)).collect();
        out.push_str(&format!(
            "{:<10}  [{}]   [{}]    [{}]   [{}]   {:>14.4}  {}\n",
            r.name,
            mark(r.toggles.mdlr),
            mark(r.toggles.color_jitter),
            mark(r.toggles.temporal),
            mark(r.toggles.shape),
            r.median(),
            seeds.join(" ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u64> = (0..37).collect();
        let out = run_parallel(&items, |&i| Ok(i * i)).unwrap();
        assert_eq!(out, items.iter().map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn split_keeps_every_cell_on_both_sides() {
        let bench = Benchmark {
            synth: SynthConfig {
                num_identities: 3,
                tracklets_per_cell: 3,
                frames_per_tracklet: 4,
                ..SynthConfig::default()
            },
            train_per_cell: 2,
        };
        let (train, test) = bench.split(5).unwrap();
        assert_eq!(train.len(), 3 * 2 * 2 * 2);
        assert_eq!(test.len(), 3 * 2 * 2);
        assert!(test.records.iter().all(|r| r.tracklet_id.ends_with("_02")));
        assert!(train.records.iter().all(|r| !r.tracklet_id.ends_with("_02")));
        assert_eq!(train.frames.len(), train.len());
    }

    #[test]
    fn split_rejects_empty_side() {
        let bench = Benchmark {
            train_per_cell: 10,
            ..Benchmark::default()
        };
        assert!(bench.split(0).is_err());
    }

    #[test]
    fn table_has_one_line_per_rung() {
        let rows: Vec<AblationRow> = Toggles::ladder()
            .iter()
            .map(|&(name, toggles)| AblationRow {
                name,
                toggles,
                runs: vec![RunOutcome {
                    report: EvalReport {
                        protocols: Vec::new(),
                        map3: Some(0.5),
                    },
                    records: Vec::new(),
                    shape: None,
                    seconds: 0.0,
                }],
            })
            .collect();
        let t = ablation_table(&rows);
        assert_eq!(t.lines().count(), 6);
        assert!(t.lines().nth(1).unwrap().contains("[ ]   [ ]    [ ]   [ ]"));
        assert!(t.lines().nth(5).unwrap().contains("[x]   [x]    [x]   [x]"));
    }
}
