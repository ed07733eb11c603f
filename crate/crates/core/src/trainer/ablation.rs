use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{train_target, write_file, write_json, TargetSummary, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::{self, CED_GRID, DEFAULT_THRESHOLD};
use crate::model::{SourceModel, Variant};
use crate::synthfaces::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOptions {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Runs trained concurrently; each run is itself single-threaded.
    pub jobs: usize,
    /// Per-run logs and summaries go to `<dir>/runs/<variant>_s<seed>/`.
    pub run_dir: Option<PathBuf>,
    pub keep_checkpoints: bool,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: (1..=5).collect(),
            jobs: 1,
            run_dir: None,
            keep_checkpoints: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub summary: TargetSummary,
    /// Per-image test errors, input pixels.
    pub test_errors: Vec<f64>,
}

/// One variant, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub runs: usize,
    pub me: f64,
    /// Mean over seeds of the per-run SD of per-image errors.
    pub sd: f64,
    pub fr: f64,
    pub auc: f64,
    /// Spread of the per-run ME across seeds (population SD).
    pub me_seed_sd: f64,
}

impl AblationRow {
    pub fn is_finite(&self) -> bool {
        [self.me, self.sd, self.fr, self.auc, self.me_seed_sd]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub epochs: usize,
    pub lambda: f32,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub rows: Vec<AblationRow>,
    /// Whether mean FE ME ≥ mean FT ME (frozen-encoder handicap).
    pub fe_not_better_than_ft: Option<bool>,
    /// Whether mean CTD-ED ME ≤ mean FT ME (the expected direction of the
    /// embedding regularizer).
    pub ctd_ed_not_worse_than_ft: Option<bool>,
    pub runs: Vec<RunResult>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,runs,me,sd,fr,auc,me_seed_sd\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.variant, r.runs, r.me, r.sd, r.fr, r.auc, r.me_seed_sd
            );
        }
        s
    }

    /// CED over the pooled per-image test errors of every seed of `variant`.
    pub fn ced(&self, variant: Variant) -> Result<Vec<(f64, f64)>> {
        let errors: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.summary.variant == variant)
            .flat_map(|r| r.test_errors.iter().copied())
            .collect();
        evalkit::ced(&errors, self.threshold, CED_GRID)
    }

    /// Write `ablation.csv`, `ablation.json` and `ced_<variant>.csv`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        write_file(&out_dir.join("ablation.csv"), self.to_csv().as_bytes())?;
        write_json(&out_dir.join("ablation.json"), self)?;
        for row in &self.rows {
            let curve = self.ced(row.variant)?;
            write_file(
                &out_dir.join(format!("ced_{}.csv", row.variant)),
                evalkit::ced_csv(&curve).as_bytes(),
            )?;
        }
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn one_run(dataset: &Dataset, source: Option<&SourceModel>, config: &TrainConfig, options: &AblationOptions) -> Result<RunResult> {
    let run = train_target(dataset, source, config)?;
    let report = run
        .test_report
        .as_ref()
        .ok_or_else(|| Error::usage("the ablation needs a non-empty test split"))?;
    if let Some(dir) = &options.run_dir {
        let dir = dir.join("runs").join(format!("{}_s{}", config.variant, config.seed));
        if options.keep_checkpoints {
            run.write(&dir)?;
        } else {
            run.write_logs(&dir)?;
        }
    }
    Ok(RunResult {
        test_errors: report.per_image.iter().map(|e| e.error).collect(),
        summary: run.summary,
    })
}

/// Train every `(variant, seed)` pair from `base`, evaluate each on the test
/// split and average per variant.
pub fn run_ablation(
    dataset: &Dataset,
    source: Option<&SourceModel>,
    base: &TrainConfig,
    options: &AblationOptions,
) -> Result<AblationTable> {
    if options.variants.is_empty() || options.seeds.is_empty() {
        return Err(Error::usage("an ablation needs at least one variant and one seed"));
    }
    base.validate()?;
    let jobs: Vec<TrainConfig> = options
        .variants
        .iter()
        .flat_map(|&variant| {
            options.seeds.iter().map(move |&seed| TrainConfig {
                variant,
                seed,
                ..base.clone()
            })
        })
        .collect();
    if source.is_none() {
        if let Some(c) = jobs.iter().find(|c| c.variant.needs_source_outputs()) {
            return Err(Error::usage(format!("variant {} needs a source checkpoint", c.variant)));
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = options.jobs.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(config) = jobs.get(i) else { break };
                let result = one_run(dataset, source, config, options);
                let failed = result.is_err();
                results.lock().expect("result slot poisoned")[i] = Some(result);
                if failed {
                    // Stop handing out work after the first failure.
                    next.store(jobs.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut runs = Vec::with_capacity(jobs.len());
    for slot in results.into_inner().expect("result slot poisoned") {
        match slot {
            Some(r) => runs.push(r?),
            None => continue,
        }
    }
    if runs.len() != jobs.len() {
        return Err(Error::usage("ablation stopped before every run finished"));
    }

    let rows: Vec<AblationRow> = options
        .variants
        .iter()
        .map(|&variant| {
            let tests: Vec<_> = runs
                .iter()
                .filter(|r| r.summary.variant == variant)
                .filter_map(|r| r.summary.test)
                .collect();
            let me = mean(tests.iter().map(|t| t.me));
            AblationRow {
                variant,
                runs: tests.len(),
                me,
                sd: mean(tests.iter().map(|t| t.sd)),
                fr: mean(tests.iter().map(|t| t.fr)),
                auc: mean(tests.iter().map(|t| t.auc)),
                me_seed_sd: mean(tests.iter().map(|t| (t.me - me).powi(2))).sqrt(),
            }
        })
        .collect();
    let me_of = |v: Variant| rows.iter().find(|r| r.variant == v).map(|r| r.me);
    let ft = me_of(Variant::Ft);
    Ok(AblationTable {
        epochs: base.epochs,
        lambda: base.lambda,
        seeds: options.seeds.clone(),
        threshold: DEFAULT_THRESHOLD,
        fe_not_better_than_ft: me_of(Variant::Fe).zip(ft).map(|(fe, ft)| fe >= ft),
        ctd_ed_not_worse_than_ft: me_of(Variant::CtdEd).zip(ft).map(|(ed, ft)| ed <= ft),
        rows,
        runs,
    })
}
