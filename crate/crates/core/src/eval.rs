use std::fmt::Write as _;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{SpikeBert, TokenBatch};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCount {
    pub total: usize,
    pub correct: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassCount>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy {:.4} ({}/{})", self.accuracy(), self.correct, self.total);
        for (c, k) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "class {c}: {} samples, {} correct, {} predicted",
                k.total, k.correct, k.predicted
            );
        }
        s
    }
}

/// Hard-spike predictions over encoded, labelled samples.
pub fn evaluate(model: &SpikeBert, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let c = model.config.num_classes;
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let y = s.label.ok_or_else(|| Error::input(format!("sample {i} has no label")))? as usize;
        if y >= c {
            return Err(Error::input(format!("label {y} but the model has {c} classes")));
        }
        if s.token_ids.is_empty() {
            return Err(Error::input(format!("sample {i} is not encoded")));
        }
        labels.push(y);
    }
    let mut per_class = vec![ClassCount::default(); c];
    let mut correct = 0;
    for (chunk, ys) in samples.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let batch = TokenBatch::from_rows(chunk.iter().map(|s| s.token_ids.as_slice()))?;
        for (p, &y) in model.predict(&batch)?.into_iter().zip(ys) {
            per_class[y].total += 1;
            per_class[p].predicted += 1;
            if p == y {
                per_class[y].correct += 1;
                correct += 1;
            }
        }
    }
    Ok(EvalReport {
        correct,
        total: samples.len(),
        per_class,
    })
}
