//! Batch-mean regression losses on the tape, plus plain-slice twins for
//! reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Msle,
    Mse,
    L1,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mse, LossKind::L1, LossKind::Msle];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Msle => "msle",
            LossKind::Mse => "mse",
            LossKind::L1 => "l1",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msle" => Ok(LossKind::Msle),
            "mse" => Ok(LossKind::Mse),
            "l1" | "mae" => Ok(LossKind::L1),
            other => Err(Error::Config(format!("unknown loss `{other}` (msle|mse|l1)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_pair(tape: &Tape, pred: Var, target: Var) -> Result<()> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim(format!(
            "prediction {:?} and target {:?} differ in shape",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    Ok(())
}

fn check_nonnegative(values: &[f64], what: &str) -> Result<()> {
    match values.iter().find(|v| !(**v >= 0.0)) {
        Some(v) => Err(Error::Domain(format!("msle needs non-negative {what}, got {v}"))),
        None => Ok(()),
    }
}

/// `mean((ln(1 + ŷ) − ln(1 + y))²)`.
pub fn msle(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target)?;
    check_nonnegative(tape.data(pred), "predictions")?;
    check_nonnegative(tape.data(target), "targets")?;
    let lp = tape.ln1p(pred)?;
    let lt = tape.ln1p(target)?;
    mse(tape, lp, lt)
}

pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

pub fn mae_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair(tape, pred, target)?;
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

pub fn loss(kind: LossKind, tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    match kind {
        LossKind::Msle => msle(tape, pred, target),
        LossKind::Mse => mse(tape, pred, target),
        LossKind::L1 => mae_loss(tape, pred, target),
    }
}

/// Value of `kind` on plain slices, without a tape.
pub fn loss_value(kind: LossKind, pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim(format!("loss over {} predictions and {} targets", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    let pairs = pred.iter().zip(target);
    Ok(match kind {
        LossKind::Msle => {
            check_nonnegative(pred, "predictions")?;
            check_nonnegative(target, "targets")?;
            pairs.map(|(p, t)| (p.ln_1p() - t.ln_1p()).powi(2)).sum::<f64>() / n
        }
        LossKind::Mse => pairs.map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n,
        LossKind::L1 => pairs.map(|(p, t)| (p - t).abs()).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn on_tape(kind: LossKind, p: &[f64], t: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::vector(p.to_vec()));
        let tv = tape.constant(Tensor::vector(t.to_vec()));
        let l = loss(kind, &mut tape, pv, tv)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn perfect_prediction_is_zero() {
        for k in LossKind::ALL {
            assert_eq!(on_tape(k, &[1.0, 5.0], &[1.0, 5.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn closed_forms() {
        let e1 = std::f64::consts::E - 1.0;
        assert!((on_tape(LossKind::Msle, &[e1], &[0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(on_tape(LossKind::Mse, &[3.0, -3.0], &[0.0, 0.0]).unwrap(), 9.0);
        assert_eq!(on_tape(LossKind::L1, &[3.0, -3.0], &[0.0, 0.0]).unwrap(), 3.0);
    }

    #[test]
    fn msle_rejects_negative() {
        assert!(matches!(on_tape(LossKind::Msle, &[-0.5], &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(loss_value(LossKind::Msle, &[1.0], &[-1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn tape_and_slice_agree() {
        let p = [1.0, 20.0, 300.0];
        let t = [2.0, 10.0, 330.0];
        for k in LossKind::ALL {
            assert_eq!(on_tape(k, &p, &t).unwrap(), loss_value(k, &p, &t).unwrap());
        }
    }

    #[test]
    fn relative_errors_cost_about_the_same() {
        let a = loss_value(LossKind::Msle, &[110.0], &[100.0]).unwrap();
        let b = loss_value(LossKind::Msle, &[1100.0], &[1000.0]).unwrap();
        assert!((a - b).abs() / b < 0.05);
    }
}
