//! Mean-of-outputs ensembles. A model listed more than once gets one vote per listing.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::encoder::TokenBatch;
use crate::error::{Error, Result};
use crate::heads::MultitaskModel;
use crate::nn::ForwardCtx;
use crate::tensor::no_grad;
use crate::train::{load_checkpoint, predict_outputs, score_outputs, Loaders, Scores, TaskOutputs};

/// Element-wise mean of equally shaped outputs. Each element's values are
/// sorted before summing in f64, so the result does not depend on member order.
pub fn mean_outputs(outputs: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = outputs.first().ok_or_else(|| Error::Config("ensemble has no members".into()))?;
    if outputs.iter().any(|o| o.len() != first.len()) {
        return Err(Error::Shape { op: "ensemble", msg: "member outputs differ in shape".into() });
    }
    let n = outputs.len() as f64;
    let mut col = vec![0f32; outputs.len()];
    Ok((0..first.len())
        .map(|i| {
            for (c, o) in col.iter_mut().zip(outputs) {
                *c = o[i];
            }
            col.sort_by(f32::total_cmp);
            (col.iter().map(|&v| v as f64).sum::<f64>() / n) as f32
        })
        .collect())
}

pub fn mean_task_outputs(outs: &[TaskOutputs]) -> Result<TaskOutputs> {
    let pick = |f: fn(&TaskOutputs) -> &Vec<f32>| outs.iter().map(|o| f(o).clone()).collect::<Vec<_>>();
    Ok(TaskOutputs {
        sst: mean_outputs(&pick(|o| &o.sst))?,
        para: mean_outputs(&pick(|o| &o.para))?,
        sts: mean_outputs(&pick(|o| &o.sts))?,
    })
}

pub struct Ensemble {
    members: Vec<Arc<MultitaskModel>>,
}

impl Ensemble {
    pub fn new(members: Vec<Arc<MultitaskModel>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Arc<MultitaskModel>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn each(&self, f: impl Fn(&MultitaskModel, &mut ForwardCtx) -> Result<Vec<f32>>) -> Result<Vec<f32>> {
        let outs = no_grad(|| {
            self.members
                .iter()
                .map(|m| f(m, &mut ForwardCtx::eval()))
                .collect::<Result<Vec<_>>>()
        })?;
        mean_outputs(&outs)
    }

    pub fn predict_sentiment(&self, batch: &TokenBatch) -> Result<Vec<f32>> {
        self.each(|m, ctx| Ok(m.predict_sentiment(batch, ctx)?.to_vec()))
    }

    pub fn predict_paraphrase(&self, a: &TokenBatch, b: &TokenBatch) -> Result<Vec<f32>> {
        self.each(|m, ctx| Ok(m.predict_paraphrase(a, b, ctx)?.to_vec()))
    }

    pub fn predict_similarity(&self, a: &TokenBatch, b: &TokenBatch) -> Result<Vec<f32>> {
        self.each(|m, ctx| Ok(m.predict_similarity(a, b, ctx)?.to_vec()))
    }

    pub fn predict_outputs(&self, dev: &Loaders) -> Result<TaskOutputs> {
        let outs = self.members.iter().map(|m| predict_outputs(m, dev)).collect::<Result<Vec<_>>>()?;
        mean_task_outputs(&outs)
    }

    pub fn evaluate(&self, dev: &Loaders) -> Result<Scores> {
        score_outputs(&self.predict_outputs(dev)?, &dev.labels()?)
    }
}

/// Load checkpoints in order. Each model's architecture comes from its own
/// header; a path repeated in the list is loaded once and counted per listing.
pub fn load_ensemble(paths: &[PathBuf]) -> Result<Ensemble> {
    if paths.is_empty() {
        return Err(Error::Config("no checkpoint paths given".into()));
    }
    let mut cache: HashMap<&Path, Arc<MultitaskModel>> = HashMap::new();
    let mut members = Vec::with_capacity(paths.len());
    for p in paths {
        let m = match cache.get(p.as_path()) {
            Some(m) => m.clone(),
            None => {
                let (model, _) = load_checkpoint(p).map_err(|e| Error::Checkpoint {
                    path: p.clone(),
                    msg: format!("ensemble member failed to load: {e}"),
                })?;
                let m = Arc::new(model);
                cache.insert(p.as_path(), m.clone());
                m
            }
        };
        members.push(m);
    }
    Ensemble::new(members)
}
