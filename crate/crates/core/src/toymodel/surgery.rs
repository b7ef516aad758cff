use std::collections::BTreeMap;

use super::model::ToyModel;
use crate::attention::{BlockKind, FeatureMapPair, HybridMode};
use crate::error::{Error, Result};
use crate::planner::RatePlan;

/// Copies the teacher, switching each block to its planned rate and
/// installing the distilled feature maps for `(block, rate)`.
pub fn assemble_student(
    teacher: &ToyModel,
    plan: &RatePlan,
    checkpoints: &BTreeMap<(usize, usize), FeatureMapPair>,
    mode: HybridMode,
) -> Result<ToyModel> {
    if plan.rates.len() != teacher.blocks.len() {
        return Err(Error::Shape(format!(
            "plan covers {} blocks, model has {}",
            plan.rates.len(),
            teacher.blocks.len()
        )));
    }
    let mut student = teacher.clone();
    for (b, (block, &rate)) in student.blocks.iter_mut().zip(&plan.rates).enumerate() {
        if rate == 0 {
            return Err(Error::Argument(format!("block {b}: rate 0")));
        }
        block.kind = BlockKind::from_rate(rate);
        block.mode = mode;
        block.features = if rate == 1 {
            None
        } else {
            let pair = checkpoints
                .get(&(b, rate))
                .ok_or(Error::MissingCheckpoint { block: b, rate })?;
            Some(pair.clone())
        };
        block.validate()?;
    }
    Ok(student)
}
