use super::{EvalError, EvalRecord};

/// Builds an `n x m` record set whose MAE, Max AE and bias equal the
/// requested values (up to float rounding). Every sample shares
/// `reference`. One record carries the largest error; the remaining
/// positive and negative error mass is spread evenly over as many records
/// as needed to keep each magnitude within `max_ae`.
pub fn records_with_metrics(
    n: usize,
    m: usize,
    mae: f64,
    max_ae: f64,
    bias: f64,
    reference: f64,
) -> Result<Vec<EvalRecord>, EvalError> {
    let k = n * m;
    if k == 0 {
        return Err(EvalError::EmptyRecords);
    }
    if !(bias.abs() <= mae && mae <= max_ae) {
        return Err(EvalError::Unsatisfiable(format!(
            "need |bias| <= mae <= max_ae, got bias {bias} mae {mae} max_ae {max_ae}"
        )));
    }
    let kf = k as f64;
    let mut positive = kf * (mae + bias) / 2.0;
    let mut negative = kf * (mae - bias) / 2.0;
    let peak_sign = if bias >= 0.0 { 1.0 } else { -1.0 };
    if peak_sign > 0.0 {
        positive -= max_ae;
    } else {
        negative -= max_ae;
    }
    let tiny = 1e-9;
    if positive < -tiny || negative < -tiny {
        return Err(EvalError::Unsatisfiable("max_ae exceeds the available error mass".into()));
    }
    positive = positive.max(0.0);
    negative = negative.max(0.0);
    let rest = k - 1;
    let need = |mass: f64| if mass <= tiny { 0 } else { (mass / max_ae - tiny).ceil().max(1.0) as usize };
    let (p_min, q_min) = (need(positive), need(negative));
    if p_min + q_min > rest {
        return Err(EvalError::Unsatisfiable("too few records for the requested error mass".into()));
    }
    let p = if positive <= tiny {
        0
    } else if negative <= tiny {
        rest
    } else {
        let share = (rest as f64 * positive / (positive + negative)).round() as usize;
        share.clamp(p_min, rest - q_min)
    };
    let q = if negative <= tiny { 0 } else { rest - p };

    let mut errors = Vec::with_capacity(k);
    errors.push(peak_sign * max_ae);
    errors.extend(std::iter::repeat_n(positive / p.max(1) as f64, p));
    errors.extend(std::iter::repeat_n(-negative / q.max(1) as f64, q));
    errors.resize(k, 0.0);

    Ok(errors
        .into_iter()
        .enumerate()
        .map(|(i, e)| EvalRecord {
            sample: i / m + 1,
            run: i % m + 1,
            predicted: reference + e,
            reference,
        })
        .collect())
}
