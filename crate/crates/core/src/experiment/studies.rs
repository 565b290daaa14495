//! Multi-run studies: budget sweeps, language-distance correlation and
//! training-set size.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{run_experiment, ExperimentResult, ExperimentSpec, ResultsStore, TaskSource};
use crate::budget::{solve_budget, Family};
use crate::data::subset_indices;
use crate::error::{Error, Result};
use crate::eval::{pearson_r, relative_performance};
use crate::peft::PeftMethod;
use crate::plot::LineChart;

fn child(base: &ExperimentSpec, suffix: &str, method: PeftMethod) -> ExperimentSpec {
    ExperimentSpec {
        name: format!("{}-{suffix}", base.name),
        method,
        ..base.clone()
    }
}

fn rel(row: &ExperimentResult, full: &ExperimentResult) -> Option<f64> {
    relative_performance(row.bleu, full.bleu).ok()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub family: String,
    pub budget: Option<u64>,
    pub method: PeftMethod,
    pub trainable: u64,
    pub bleu: f64,
    pub chrf: f64,
    pub rel_perf_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    /// Sorted by trainable count; the full fine-tuning row is included.
    pub rows: Vec<SweepRow>,
    pub csv: String,
    pub svg: String,
}

/// Trains every family at the size nearest each budget and compares with
/// full fine-tuning of the same base spec. Without `include_full` the
/// baseline must already be in the output directory's results.
pub fn sweep(base: &ExperimentSpec, families: &[Family], budgets: &[u64], include_full: bool) -> Result<SweepOutcome> {
    base.validate()?;
    if families.is_empty() || budgets.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one family and one budget".into()));
    }
    let methods = families
        .iter()
        .flat_map(|&f| budgets.iter().map(move |&b| (f, b)))
        .map(|(f, b)| Ok((f, b, solve_budget(&base.model, f, b)?)))
        .collect::<Result<Vec<_>>>()?;

    let full = if include_full {
        run_experiment(&child(base, "full", PeftMethod::FullFt))?.result
    } else {
        ResultsStore::load(&base.output_dir)?
            .baseline(&base.group())
            .cloned()
            .ok_or_else(|| {
                Error::MissingBaseline(format!(
                    "no full fine-tuning result for this spec in {}; run `peftlab train --spec <file> --method full` first or pass --include-full",
                    base.output_dir.display()
                ))
            })?
    };

    let mut done: HashMap<String, ExperimentResult> = HashMap::new();
    let mut rows = Vec::new();
    for (family, budget, method) in methods {
        let key = method.to_string();
        if !done.contains_key(&key) {
            let r = run_experiment(&child(base, &key, method))?.result;
            done.insert(key.clone(), r);
        }
        let r = &done[&key];
        rows.push(SweepRow {
            family: family.to_string(),
            budget: Some(budget),
            method,
            trainable: r.trainable,
            bleu: r.bleu,
            chrf: r.chrf,
            rel_perf_pct: rel(r, &full),
        });
    }
    rows.push(SweepRow {
        family: "full".into(),
        budget: None,
        method: PeftMethod::FullFt,
        trainable: full.trainable,
        bleu: full.bleu,
        chrf: full.chrf,
        rel_perf_pct: rel(&full, &full),
    });
    rows.sort_by_key(|r| r.trainable);

    let mut csv = String::from("family,budget,method,trainable,bleu,chrf,rel_perf_pct\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.2},{:.2},{}",
            r.family,
            r.budget.map(|b| b.to_string()).unwrap_or_default(),
            r.method,
            r.trainable,
            r.bleu,
            r.chrf,
            fmt_opt(r.rel_perf_pct)
        );
    }
    let mut chart = LineChart::new(
        "Relative performance vs. trainable parameters",
        "trainable parameters (log scale)",
        "relative performance (% of full fine-tuning)",
        true,
    );
    for family in families {
        let name = family.to_string();
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.family == name)
            .filter_map(|r| Some((r.trainable as f64, r.rel_perf_pct?)))
            .collect();
        pts.dedup();
        chart.push(&name, pts);
    }
    let svg = chart.render()?;
    std::fs::create_dir_all(&base.output_dir)?;
    std::fs::write(base.output_dir.join("sweep.csv"), &csv)?;
    std::fs::write(base.output_dir.join("sweep.svg"), &svg)?;
    Ok(SweepOutcome { rows, csv, svg })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceRow {
    pub substitution_rate: f64,
    pub reorder_rate: f64,
    pub distance: f64,
    pub method: PeftMethod,
    pub trainable: u64,
    pub bleu: f64,
    pub rel_perf_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub method: PeftMethod,
    pub n: usize,
    pub r: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceOutcome {
    pub rows: Vec<DistanceRow>,
    pub correlations: Vec<Correlation>,
    pub csv: String,
    pub correlation_csv: String,
}

/// Generates one synthetic task per `(substitution, reorder)` point, trains
/// full fine-tuning and every method on it, and correlates distance with
/// relative performance per method.
pub fn distance_experiment(base: &ExperimentSpec, points: &[(f64, f64)], methods: &[PeftMethod]) -> Result<DistanceOutcome> {
    base.validate()?;
    let TaskSource::Synthetic { generator, .. } = &base.task else {
        return Err(Error::Config("the distance experiment needs a synthetic task".into()));
    };
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "correlation needs at least 3 distance points, got {}",
            points.len()
        )));
    }
    let distances: Vec<f64> = points
        .iter()
        .map(|&(s, r)| {
            let g = crate::data::SyntheticTaskSpec {
                substitution_rate: s,
                reorder_rate: r,
                ..generator.clone()
            };
            g.validate().map(|_| g.distance())
        })
        .collect::<Result<_>>()?;
    // surfaces a constant distance axis before any training happens
    pearson_r(&distances, &distances)?;
    let methods: Vec<PeftMethod> = methods.iter().filter(|m| **m != PeftMethod::FullFt).cloned().collect();
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods to compare against full fine-tuning".into()));
    }

    let mut rows = Vec::new();
    for (&(s, r), &distance) in points.iter().zip(&distances) {
        let mut spec = base.clone();
        if let TaskSource::Synthetic { generator, .. } = &mut spec.task {
            generator.substitution_rate = s;
            generator.reorder_rate = r;
        }
        spec.name = format!("{}-s{s}-r{r}", base.name);
        let full = run_experiment(&child(&spec, "full", PeftMethod::FullFt))?.result;
        for method in &methods {
            let res = run_experiment(&child(&spec, &method.to_string(), *method))?.result;
            rows.push(DistanceRow {
                substitution_rate: s,
                reorder_rate: r,
                distance,
                method: *method,
                trainable: res.trainable,
                bleu: res.bleu,
                rel_perf_pct: rel(&res, &full),
            });
        }
    }

    let mut correlations = Vec::new();
    for method in &methods {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| &r.method == method)
            .filter_map(|r| Some((r.distance, r.rel_perf_pct?)))
            .unzip();
        let c = pearson_r(&x, &y)?;
        correlations.push(Correlation {
            method: *method,
            n: c.n,
            r: c.r,
            p_value: c.p_value,
        });
    }

    let mut csv = String::from("substitution_rate,reorder_rate,distance,method,trainable,bleu,rel_perf_pct\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.4},{},{},{:.2},{}",
            r.substitution_rate,
            r.reorder_rate,
            r.distance,
            r.method,
            r.trainable,
            r.bleu,
            fmt_opt(r.rel_perf_pct)
        );
    }
    let mut correlation_csv = String::from("method,n,r,p_value\n");
    for c in &correlations {
        let _ = writeln!(correlation_csv, "{},{},{:.6},{:.6}", c.method, c.n, c.r, c.p_value);
    }
    std::fs::create_dir_all(&base.output_dir)?;
    std::fs::write(base.output_dir.join("distance.csv"), &csv)?;
    std::fs::write(base.output_dir.join("correlation.csv"), &correlation_csv)?;
    Ok(DistanceOutcome {
        rows,
        correlations,
        csv,
        correlation_csv,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeRow {
    pub size: usize,
    pub method: PeftMethod,
    pub trainable: u64,
    pub bleu: f64,
    pub chrf: f64,
    pub rel_perf_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeMetadata {
    pub corpus_pairs: usize,
    pub subset_seed: u64,
    pub sizes: Vec<usize>,
    /// Every subset is a prefix of the next larger one.
    pub nested: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeOutcome {
    pub rows: Vec<SizeRow>,
    pub metadata: SizeMetadata,
    pub csv: String,
    pub svg: String,
}

/// Trains every method on nested subsets of the training split. Relative
/// performance is filled when full fine-tuning is among `methods`.
pub fn size_experiment(base: &ExperimentSpec, sizes: &[usize], methods: &[PeftMethod]) -> Result<SizeOutcome> {
    base.validate()?;
    if sizes.is_empty() || methods.is_empty() {
        return Err(Error::InvalidArgument("size experiment needs sizes and methods".into()));
    }
    let corpus_pairs = base.task.load()?.train.len();
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let seed = base.train.seed;
    let subsets = sorted
        .iter()
        .map(|&n| subset_indices(corpus_pairs, n, seed))
        .collect::<Result<Vec<_>>>()?;
    let nested = subsets.windows(2).all(|w| w[1].starts_with(&w[0]));

    let mut rows = Vec::new();
    for &size in &sorted {
        let mut results = Vec::new();
        for method in methods {
            let spec = ExperimentSpec {
                name: format!("{}-n{size}-{method}", base.name),
                method: *method,
                subset: Some(size),
                ..base.clone()
            };
            results.push(run_experiment(&spec)?.result);
        }
        let full = results.iter().find(|r| r.method == PeftMethod::FullFt).cloned();
        for r in results {
            rows.push(SizeRow {
                size,
                rel_perf_pct: full.as_ref().and_then(|f| rel(&r, f)),
                method: r.method,
                trainable: r.trainable,
                bleu: r.bleu,
                chrf: r.chrf,
            });
        }
    }

    let mut csv = String::from("size,method,trainable,bleu,chrf,rel_perf_pct\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{:.2},{:.2},{}",
            r.size,
            r.method,
            r.trainable,
            r.bleu,
            r.chrf,
            fmt_opt(r.rel_perf_pct)
        );
    }
    let mut chart = LineChart::new("BLEU vs. training-set size", "training pairs (log scale)", "test BLEU", true);
    for method in methods {
        let pts = rows
            .iter()
            .filter(|r| &r.method == method)
            .map(|r| (r.size as f64, r.bleu))
            .collect();
        chart.push(&method.to_string(), pts);
    }
    let svg = chart.render()?;
    let metadata = SizeMetadata {
        corpus_pairs,
        subset_seed: seed,
        sizes: sorted,
        nested,
    };
    std::fs::create_dir_all(&base.output_dir)?;
    std::fs::write(base.output_dir.join("size.csv"), &csv)?;
    std::fs::write(base.output_dir.join("size.svg"), &svg)?;
    std::fs::write(
        base.output_dir.join("size.json"),
        serde_json::to_string_pretty(&metadata)? + "\n",
    )?;
    Ok(SizeOutcome {
        rows,
        metadata,
        csv,
        svg,
    })
}
