//! Exponential moving average of the student into the teacher.

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// `teacher <- m * teacher + (1 - m) * student`, evaluated as
/// `teacher + (1 - m) * (student - teacher)` so `m = 1` is an exact no-op and
/// `m = 0` an exact copy.
pub fn ema_update(teacher: &ParamStore, student: &ParamStore, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {momentum} is outside [0, 1]")));
    }
    let students = student.vars();
    if students.len() != teacher.len() {
        return Err(Error::Checkpoint(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            students.len()
        )));
    }
    for (name, s) in students {
        let t = teacher
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("teacher is missing parameter `{name}`")))?;
        if t.shape() != s.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?} in the teacher and {:?} in the student",
                t.shape(),
                s.shape()
            )));
        }
        if momentum == 1.0 {
            continue;
        }
        let next = if momentum == 0.0 {
            s.as_tensor().copy()?
        } else {
            let tt = t.as_tensor();
            (tt + ((s.as_tensor() - tt)? * (1.0 - momentum))?)?
        };
        t.set(&next.detach())?;
    }
    Ok(())
}
