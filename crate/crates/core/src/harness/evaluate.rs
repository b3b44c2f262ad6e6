//! Paired evaluation of the single-step and brute-force classifiers.

use rayon::prelude::*;
use serde::Serialize;

use crate::classify::{classify_bruteforce, classify_multistep, classify_single_step};
use crate::error::Result;
use crate::graph::ParamSet;
use crate::harness::data::Dataset;
use crate::model::FlowModel;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiStepResult {
    pub steps: usize,
    pub lr: f64,
    pub accuracy: f64,
    /// Agreement with the single-step prediction.
    pub agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifyReport {
    pub samples: usize,
    pub single_step_accuracy: f64,
    pub bruteforce_accuracy: f64,
    pub agreement: f64,
    pub multistep: Vec<MultiStepResult>,
}

/// Label, single-step, brute-force and multi-step predictions of one example.
type Row = (usize, usize, usize, Vec<usize>);

/// Classifies the first `limit` examples of `data` with every method.
pub fn classify_eval(
    model: &FlowModel,
    params: &ParamSet,
    data: &Dataset,
    limit: usize,
    multistep: &[(usize, f64)],
) -> Result<ClassifyReport> {
    let n = limit.min(data.len());
    let rows: Vec<Row> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &data.examples[i];
            let single = classify_single_step(model, params, x)?.label;
            let brute = classify_bruteforce(model, params, x)?.0;
            let multi = multistep
                .iter()
                .map(|&(steps, lr)| classify_multistep(model, params, x, steps, lr))
                .collect::<Result<Vec<_>>>()?;
            Ok((data.labels[i], single, brute, multi))
        })
        .collect::<Result<_>>()?;
    let frac =
        |f: &dyn Fn(&Row) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / n.max(1) as f64;
    Ok(ClassifyReport {
        samples: n,
        single_step_accuracy: frac(&|r| r.1 == r.0),
        bruteforce_accuracy: frac(&|r| r.2 == r.0),
        agreement: frac(&|r| r.1 == r.2),
        multistep: multistep
            .iter()
            .enumerate()
            .map(|(j, &(steps, lr))| MultiStepResult {
                steps,
                lr,
                accuracy: frac(&|r| r.3[j] == r.0),
                agreement: frac(&|r| r.3[j] == r.1),
            })
            .collect(),
    })
}
