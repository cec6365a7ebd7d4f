//! Training criteria: positive-weighted binary cross-entropy for the AU head
//! and focal loss for the expression head.
//!
//! Each loss comes in two forms. The `f64` slice functions are the reference
//! definitions, with closed-form gradients with respect to the pre-activation
//! logits. The tensor functions are what the trainers differentiate through.
//!
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::{NUM_AUS, NUM_EXPRESSIONS};
use crate::error::{Error, Result};
use crate::nn;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BceParams {
    pub pos_weight: [f64; NUM_AUS],
}

impl BceParams {
    pub fn new(pos_weight: [f64; NUM_AUS]) -> Result<Self> {
        if pos_weight.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::contract(format!(
                "positive weights must be > 0, got {pos_weight:?}"
            )));
        }
        Ok(Self { pos_weight })
    }

    pub fn unweighted() -> Self {
        Self {
            pos_weight: [1.0; NUM_AUS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: [f64; NUM_EXPRESSIONS],
    pub gamma: f64,
}

impl FocalParams {
    pub const DEFAULT_GAMMA: f64 = 2.0;

    pub fn new(alpha: [f64; NUM_EXPRESSIONS], gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::contract(format!("gamma must be >= 0, got {gamma}")));
        }
        if alpha.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::contract(format!("alpha must be > 0, got {alpha:?}")));
        }
        Ok(Self { alpha, gamma })
    }

    /// Plain cross-entropy: `alpha = 1`, `gamma = 0`.
    pub fn cross_entropy() -> Self {
        Self {
            alpha: [1.0; NUM_EXPRESSIONS],
            gamma: 0.0,
        }
    }

    /// Per-class inverse frequency scaled to mean 1. Classes never seen get
    /// the weight of a class seen once.
    pub fn inverse_frequency(counts: &[u64; NUM_EXPRESSIONS], gamma: f64) -> Result<Self> {
        let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        let mean = inv.iter().sum::<f64>() / NUM_EXPRESSIONS as f64;
        let mut alpha = [1.0; NUM_EXPRESSIONS];
        for (a, v) in alpha.iter_mut().zip(&inv) {
            *a = v / mean;
        }
        Self::new(alpha, gamma)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean over the 12 components of `-[w_i t_i log p_i + (1 - t_i) log(1 - p_i)]`.
pub fn weighted_bce(probs: &[f64], targets: &[u8], params: &BceParams) -> Result<f64> {
    if probs.len() != NUM_AUS || targets.len() != NUM_AUS {
        return Err(Error::contract(format!(
            "weighted_bce expects {NUM_AUS} probabilities and targets, got {} and {}",
            probs.len(),
            targets.len()
        )));
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .zip(&params.pos_weight)
        .map(|((&p, &t), &w)| {
            let p = clamp_prob(p);
            let t = t as f64;
            -(w * t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / NUM_AUS as f64)
}

/// Gradient of [`weighted_bce`]`(sigmoid(logits))` with respect to the logits.
pub fn weighted_bce_logit_grad(logits: &[f64], targets: &[u8], params: &BceParams) -> Result<Vec<f64>> {
    if logits.len() != NUM_AUS || targets.len() != NUM_AUS {
        return Err(Error::contract("weighted_bce_logit_grad length mismatch"));
    }
    Ok(logits
        .iter()
        .zip(targets)
        .zip(&params.pos_weight)
        .map(|((&z, &t), &w)| {
            let p = sigmoid(z);
            let t = t as f64;
            (-w * t * (1.0 - p) + (1.0 - t) * p) / NUM_AUS as f64
        })
        .collect())
}

/// `-alpha_t (1 - p_t)^gamma log p_t` for one sample.
pub fn focal_loss(probs: &[f64], target: usize, params: &FocalParams) -> Result<f64> {
    if target >= NUM_EXPRESSIONS {
        return Err(Error::contract(format!("target class {target} out of range")));
    }
    if probs.len() != NUM_EXPRESSIONS {
        return Err(Error::contract(format!(
            "focal_loss expects {NUM_EXPRESSIONS} probabilities, got {}",
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|p| *p < 0.0) {
        return Err(Error::contract(format!(
            "probabilities must form a distribution (sum {sum})"
        )));
    }
    let p = clamp_prob(probs[target]);
    Ok(-params.alpha[target] * (1.0 - p).powf(params.gamma) * p.ln())
}

/// Gradient of [`focal_loss`]`(softmax(logits))` with respect to the logits.
pub fn focal_loss_logit_grad(logits: &[f64], target: usize, params: &FocalParams) -> Result<Vec<f64>> {
    if target >= NUM_EXPRESSIONS || logits.len() != NUM_EXPRESSIONS {
        return Err(Error::contract("focal_loss_logit_grad shape or target out of range"));
    }
    let probs = softmax(logits);
    let p = probs[target];
    let g = params.gamma;
    let a = params.alpha[target];
    let modulating_grad = if g == 0.0 {
        0.0
    } else {
        g * (1.0 - p).powf(g - 1.0) * p.ln()
    };
    let dl_dp = -a * (-modulating_grad + (1.0 - p).powf(g) / p);
    Ok(probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            dl_dp * p * (delta - pj)
        })
        .collect())
}

/// Batch weighted BCE over `(N, 12)` logits and `(N, 12)` 0/1 targets.
///
/// `row_weight`, when given, is an `(N,)` 0/1 mask: rows with weight 0 do not
/// contribute and the mean is taken over the remaining rows.
pub fn weighted_bce_tensor(
    logits: &Tensor,
    targets: &Tensor,
    params: &BceParams,
    row_weight: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if targets.dims() != [n, k] || k != NUM_AUS {
        return Err(Error::contract(format!(
            "bce shapes: logits {:?}, targets {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    let w: Vec<f32> = params.pos_weight.iter().map(|&v| v as f32).collect();
    let w = Tensor::from_vec(w, (1, NUM_AUS), logits.device())?;
    // log p and log(1 - p) from the logits, clamped like the probabilities
    let (lo, hi) = (PROB_EPS.ln() as f32, (1.0 - PROB_EPS).ln() as f32);
    let log_p = nn::softplus(&logits.neg()?)?.neg()?.clamp(lo, hi)?;
    let log_q = nn::softplus(logits)?.neg()?.clamp(lo, hi)?;
    let pos = targets.broadcast_mul(&w)?.mul(&log_p)?;
    let neg = targets.affine(-1.0, 1.0)?.mul(&log_q)?;
    let per_row = (pos + neg)?.neg()?.mean(D::Minus1)?;
    masked_mean(&per_row, row_weight)
}

/// Batch focal loss over `(N, 7)` logits and class indices.
pub fn focal_loss_tensor(
    logits: &Tensor,
    targets: &[u32],
    params: &FocalParams,
    row_weight: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n || k != NUM_EXPRESSIONS {
        return Err(Error::contract(format!(
            "focal shapes: logits {:?}, {} targets",
            logits.dims(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= NUM_EXPRESSIONS) {
        return Err(Error::contract(format!("target class {t} out of range")));
    }
    let dev = logits.device();
    let idx = Tensor::from_slice(targets, (n, 1), dev)?;
    let alpha: Vec<f32> = targets.iter().map(|&t| params.alpha[t as usize] as f32).collect();
    let alpha = Tensor::from_vec(alpha, n, dev)?;
    let log_p = nn::log_softmax_last(logits)?.gather(&idx, 1)?.squeeze(1)?;
    let p = log_p
        .exp()?
        .clamp(PROB_EPS as f32, 1.0 - PROB_EPS as f32)?;
    let modulating = if params.gamma == 0.0 {
        Tensor::ones(n, DType::F32, dev)?
    } else {
        p.affine(-1.0, 1.0)?.powf(params.gamma)?
    };
    let per_row = alpha.mul(&modulating)?.mul(&p.log()?)?.neg()?;
    masked_mean(&per_row, row_weight)
}

fn masked_mean(per_row: &Tensor, row_weight: Option<&Tensor>) -> Result<Tensor> {
    match row_weight {
        None => Ok(per_row.mean_all()?),
        Some(w) => {
            let denom = w.sum_all()?.to_scalar::<f32>()?;
            if denom <= 0.0 {
                return Err(Error::contract("loss mask selects no rows"));
            }
            Ok((per_row.mul(w)?.sum_all()? / denom as f64)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bce_examples() {
        let p = vec![0.5; NUM_AUS];
        let t = vec![1u8; NUM_AUS];
        let l = weighted_bce(&p, &t, &BceParams::unweighted()).unwrap();
        assert!((l - LN2).abs() < 1e-4);

        // perfect prediction limit
        let eps = PROB_EPS;
        let t: Vec<u8> = (0..NUM_AUS).map(|i| (i % 2) as u8).collect();
        let p: Vec<f64> = t.iter().map(|&v| if v == 1 { 1.0 - eps } else { eps }).collect();
        let l = weighted_bce(&p, &t, &BceParams::unweighted()).unwrap();
        assert!(l <= 12.0 * (1.0 - eps).ln().abs() + 1e-12);

        // single active term with w = 2: that term contributes 2 * ln 2
        let mut w = [1.0; NUM_AUS];
        w[0] = 2.0;
        let mut p = vec![0.0; NUM_AUS];
        p[0] = 0.5;
        let mut t = vec![0u8; NUM_AUS];
        t[0] = 1;
        let l = weighted_bce(&p, &t, &BceParams::new(w).unwrap()).unwrap();
        let rest = 11.0 * -(1.0 - PROB_EPS).ln();
        assert!((l * NUM_AUS as f64 - rest - 2.0 * LN2).abs() < 1e-4);
        assert!((2.0 * LN2 - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn bce_rejects_length_mismatch() {
        assert!(weighted_bce(&[0.5; 3], &[1; 3], &BceParams::unweighted()).is_err());
        assert!(BceParams::new([0.0; NUM_AUS]).is_err());
    }

    #[test]
    fn focal_examples() {
        let mut probs = [0.125; NUM_EXPRESSIONS];
        probs[0] = 0.25;
        let ce = focal_loss(&probs, 0, &FocalParams::cross_entropy()).unwrap();
        assert!((ce - 1.3863).abs() < 1e-4);

        let mut one = [0.0; NUM_EXPRESSIONS];
        one[3] = 1.0;
        let l = focal_loss(&one, 3, &FocalParams::new([1.0; 7], 2.0).unwrap()).unwrap();
        assert!(l.abs() < 1e-12);

        let mut half = [0.5 / 6.0; NUM_EXPRESSIONS];
        half[1] = 0.5;
        let l = focal_loss(&half, 1, &FocalParams::new([1.0; 7], 2.0).unwrap()).unwrap();
        assert!((l - 0.25 * LN2).abs() < 1e-4);
        assert!((0.25 * LN2 - 0.1733).abs() < 1e-4);
    }

    #[test]
    fn focal_contract_errors() {
        let p = [1.0 / 7.0; NUM_EXPRESSIONS];
        assert!(focal_loss(&p, 7, &FocalParams::cross_entropy()).is_err());
        assert!(focal_loss(&[0.5; NUM_EXPRESSIONS], 0, &FocalParams::cross_entropy()).is_err());
        assert!(FocalParams::new([1.0; 7], -1.0).is_err());
        assert!(FocalParams::new([0.0; 7], 1.0).is_err());
    }

    #[test]
    fn inverse_frequency_alpha_has_mean_one() {
        let a = FocalParams::inverse_frequency(&[10, 20, 40, 10, 10, 0, 5], 2.0).unwrap();
        let mean: f64 = a.alpha.iter().sum::<f64>() / 7.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(a.alpha[6] > a.alpha[0] && a.alpha[0] > a.alpha[2]);
    }

    fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
    }

    #[test]
    fn tensor_forms_match_reference_values_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dev = Device::Cpu;
        let n = 5;
        let z: Vec<f64> = random_logits(&mut rng, n * NUM_AUS);
        let t: Vec<u8> = (0..n * NUM_AUS).map(|_| rng.gen_range(0..2)).collect();
        let mut w = [1.0; NUM_AUS];
        for v in w.iter_mut() {
            *v = rng.gen_range(0.5..4.0);
        }
        let params = BceParams::new(w).unwrap();
        let zt = Var::from_tensor(
            &Tensor::from_vec(z.iter().map(|&v| v as f32).collect::<Vec<_>>(), (n, NUM_AUS), &dev).unwrap(),
        )
        .unwrap();
        let tt = Tensor::from_vec(t.iter().map(|&v| v as f32).collect::<Vec<_>>(), (n, NUM_AUS), &dev).unwrap();
        let loss = weighted_bce_tensor(zt.as_tensor(), &tt, &params, None).unwrap();
        let grad = loss.backward().unwrap();
        let g = grad.get(&zt).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mut reference = 0.0;
        for r in 0..n {
            let row = &z[r * NUM_AUS..(r + 1) * NUM_AUS];
            let tr = &t[r * NUM_AUS..(r + 1) * NUM_AUS];
            let probs: Vec<f64> = row.iter().map(|&v| sigmoid(v)).collect();
            reference += weighted_bce(&probs, tr, &params).unwrap() / n as f64;
            let gr = weighted_bce_logit_grad(row, tr, &params).unwrap();
            for i in 0..NUM_AUS {
                assert!((g[r * NUM_AUS + i] as f64 - gr[i] / n as f64).abs() < 1e-5);
            }
        }
        assert!((loss.to_scalar::<f32>().unwrap() as f64 - reference).abs() < 1e-5);

        let z: Vec<f64> = random_logits(&mut rng, n * NUM_EXPRESSIONS);
        let targets: Vec<u32> = (0..n).map(|_| rng.gen_range(0..7)).collect();
        let fp = FocalParams::new([0.5, 1.0, 1.5, 0.7, 1.2, 0.9, 1.1], 2.0).unwrap();
        let zt = Var::from_tensor(
            &Tensor::from_vec(z.iter().map(|&v| v as f32).collect::<Vec<_>>(), (n, NUM_EXPRESSIONS), &dev)
                .unwrap(),
        )
        .unwrap();
        let loss = focal_loss_tensor(zt.as_tensor(), &targets, &fp, None).unwrap();
        let grad = loss.backward().unwrap();
        let g = grad.get(&zt).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mut reference = 0.0;
        for r in 0..n {
            let row = &z[r * NUM_EXPRESSIONS..(r + 1) * NUM_EXPRESSIONS];
            let tr = targets[r] as usize;
            reference += focal_loss(&softmax(row), tr, &fp).unwrap() / n as f64;
            let gr = focal_loss_logit_grad(row, tr, &fp).unwrap();
            for i in 0..NUM_EXPRESSIONS {
                assert!((g[r * NUM_EXPRESSIONS + i] as f64 - gr[i] / n as f64).abs() < 1e-5);
            }
        }
        assert!((loss.to_scalar::<f32>().unwrap() as f64 - reference).abs() < 1e-5);
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let dev = Device::Cpu;
        for margin in [0.0f32, 20.0, 200.0] {
            let mut z = vec![0.0f32; 2 * NUM_EXPRESSIONS];
            z[3] = margin;
            z[NUM_EXPRESSIONS + 1] = -margin;
            let zv = Var::from_tensor(&Tensor::from_vec(z, (2, NUM_EXPRESSIONS), &dev).unwrap()).unwrap();
            let loss = focal_loss_tensor(zv.as_tensor(), &[3, 1], &FocalParams::new([1.0; 7], 2.0).unwrap(), None).unwrap();
            assert!(loss.to_scalar::<f32>().unwrap().is_finite());
            let g = loss.backward().unwrap().get(&zv).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(g.iter().all(|v| v.is_finite()), "margin {margin}: {g:?}");

            let mut z = vec![margin; 2 * NUM_AUS];
            z[NUM_AUS..].iter_mut().for_each(|v| *v = -margin);
            let zv = Var::from_tensor(&Tensor::from_vec(z, (2, NUM_AUS), &dev).unwrap()).unwrap();
            let t = Tensor::from_vec(vec![1.0f32; 2 * NUM_AUS], (2, NUM_AUS), &dev).unwrap();
            let loss = weighted_bce_tensor(zv.as_tensor(), &t, &BceParams::unweighted(), None).unwrap();
            assert!(loss.to_scalar::<f32>().unwrap().is_finite());
            let g = loss.backward().unwrap().get(&zv).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(g.iter().all(|v| v.is_finite()), "margin {margin}: {g:?}");
        }
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let dev = Device::Cpu;
        let z = Tensor::from_vec(vec![0.3f32, -1.0, 2.0, 0.1, 0.0, 0.0, 0.0, 5.0, -5.0, 1.0, 1.0, 1.0, 0.2, 0.4], (2, 7), &dev)
            .unwrap();
        let mask = Tensor::from_vec(vec![1.0f32, 0.0], 2, &dev).unwrap();
        let fp = FocalParams::cross_entropy();
        let both = focal_loss_tensor(&z, &[2, 6], &fp, Some(&mask)).unwrap();
        let first = focal_loss_tensor(&z.narrow(0, 0, 1).unwrap(), &[2], &fp, None).unwrap();
        assert!((both.to_scalar::<f32>().unwrap() - first.to_scalar::<f32>().unwrap()).abs() < 1e-6);
        let none = Tensor::zeros(2, DType::F32, &dev).unwrap();
        assert!(focal_loss_tensor(&z, &[2, 6], &fp, Some(&none)).is_err());
    }

    proptest! {
        #[test]
        fn focal_strictly_decreasing_in_pt(a in 0.01f64..0.98, gap in 0.005f64..0.5, gamma in 0.0f64..5.0) {
            let b = (a + gap).min(0.999);
            prop_assume!(b > a);
            let params = FocalParams::new([0.7; 7], gamma).unwrap();
            let dist = |p: f64| {
                let mut d = [(1.0 - p) / 6.0; NUM_EXPRESSIONS];
                d[2] = p;
                d
            };
            let la = focal_loss(&dist(a), 2, &params).unwrap();
            let lb = focal_loss(&dist(b), 2, &params).unwrap();
            prop_assert!(lb < la);
            prop_assert!(la >= 0.0 && lb >= 0.0);
        }

        #[test]
        fn bce_non_negative(z in proptest::collection::vec(-20.0f64..20.0, NUM_AUS),
                            t in proptest::collection::vec(0u8..2, NUM_AUS),
                            w in proptest::collection::vec(0.01f64..30.0, NUM_AUS)) {
            let probs: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            let mut pw = [1.0; NUM_AUS];
            pw.copy_from_slice(&w);
            prop_assert!(weighted_bce(&probs, &t, &BceParams::new(pw).unwrap()).unwrap() >= 0.0);
        }
    }
}
