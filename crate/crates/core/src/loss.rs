//! Captioning loss and the joint objective.

use candle::{DType, Tensor, D};

use crate::error::{Error, Result};

/// Per-example summed token negative log-likelihood, averaged over the
/// batch. `logits` is `(B, L, V)`, `targets` `(B, L)` u32 and `mask`
/// `(B, L)` with 1 on real target positions and 0 on padding.
pub fn captioning_loss(logits: &Tensor, targets: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (b, l, _) = logits.dims3()?;
    if targets.dims() != [b, l] {
        return Err(Error::Shape(format!(
            "targets {:?} do not align with logits {:?}",
            targets.dims(),
            logits.dims()
        )));
    }
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let nll = logp.gather(&targets.unsqueeze(2)?, 2)?.squeeze(2)?.neg()?;
    let nll = match mask {
        Some(m) => {
            if m.dims() != [b, l] {
                return Err(Error::Shape(format!("mask {:?} vs targets {:?}", m.dims(), targets.dims())));
            }
            (nll * m.to_dtype(logits.dtype())?)?
        }
        None => nll,
    };
    Ok(nll.sum(1)?.mean(0)?)
}

/// Summed negative log-likelihood of one target sequence given its logits
/// rows.
pub fn sequence_nll(logits: &[Vec<f64>], targets: &[u32]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!("{} logits rows for {} targets", logits.len(), targets.len())));
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::Data(format!("target {t} outside vocabulary of {}", row.len())));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total)
}

/// Mask `(B, L)` marking the first `lengths[i]` positions of each row.
pub fn length_mask(lengths: &[usize], max_len: usize, dtype: DType, device: &candle::Device) -> Result<Tensor> {
    let v: Vec<f32> = lengths
        .iter()
        .flat_map(|&n| (0..max_len).map(move |j| if j < n { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(v, (lengths.len(), max_len), device)?.to_dtype(dtype)?)
}

/// `alpha * l1 + (1 - alpha) * l2`.
pub fn joint_loss(l1: f64, l2: f64, alpha: f64) -> f64 {
    alpha * l1 + (1.0 - alpha) * l2
}

/// Tensor form of [`joint_loss`]. Without a speaker term the result is `l1`.
pub fn joint_loss_tensor(l1: &Tensor, l2: Option<&Tensor>, alpha: f64) -> Result<Tensor> {
    Ok(match l2 {
        Some(l2) => ((l1 * alpha)? + (l2 * (1.0 - alpha))?)?,
        None => l1.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::Device;

    #[test]
    fn joint_loss_values() {
        assert!((joint_loss(2.0, 1.0, 0.3) - 1.3).abs() < 1e-15);
        assert_eq!(joint_loss(2.5, 9.0, 1.0), 2.5);
        assert_eq!(joint_loss(2.5, 9.0, 0.0), 9.0);
    }

    #[test]
    fn uniform_logits_cost_log_vocab_per_token() {
        let logits = Tensor::zeros((1, 4, 100), DType::F64, &Device::Cpu).unwrap();
        let targets = Tensor::new(&[[1u32, 7, 42, 99]], &Device::Cpu).unwrap();
        let l = captioning_loss(&logits, &targets, None).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 4.0 * 100f64.ln()).abs() < 1e-9);
        assert!((l - 18.4207).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_cost_nothing() {
        let mut rows = vec![vec![-1e4; 5]; 3];
        let targets = [2u32, 0, 4];
        for (r, &t) in rows.iter_mut().zip(&targets) {
            r[t as usize] = 0.0;
        }
        assert!(sequence_nll(&rows, &targets).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mask_drops_padding() {
        let dev = Device::Cpu;
        let logits = Tensor::randn(0.0f64, 1.0, (2, 3, 6), &dev).unwrap();
        let targets = Tensor::new(&[[1u32, 2, 3], [4, 5, 0]], &dev).unwrap();
        let mask = length_mask(&[3, 2], 3, DType::F64, &dev).unwrap();
        let got = captioning_loss(&logits, &targets, Some(&mask)).unwrap().to_scalar::<f64>().unwrap();
        let rows: Vec<Vec<Vec<f64>>> = logits.to_vec3().unwrap();
        let want = (sequence_nll(&rows[0], &[1, 2, 3]).unwrap() + sequence_nll(&rows[1][..2], &[4, 5]).unwrap()) / 2.0;
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn misaligned_targets_are_shape_errors() {
        let logits = Tensor::zeros((1, 4, 10), DType::F64, &Device::Cpu).unwrap();
        let targets = Tensor::new(&[[1u32, 2, 3]], &Device::Cpu).unwrap();
        assert!(matches!(captioning_loss(&logits, &targets, None), Err(Error::Shape(_))));
        assert!(matches!(sequence_nll(&[vec![0.0; 3]], &[1, 2]), Err(Error::Shape(_))));
    }
}
