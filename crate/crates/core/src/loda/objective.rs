//! Pairwise-divergence objective on smoothed attention distributions.

use tokensplit_tensor::{blur_2d, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Added to every cell before normalizing so logarithms stay finite.
pub const EPS_FLOOR: f64 = 1e-12;

/// Strictly positive `[H, W]` map summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub p: Tensor<f64>,
}

/// Blur, add the floor, divide by the total. An all-zero slice becomes
/// uniform.
pub fn smooth_and_normalize(slice: &Tensor<f64>, kernel: &[f64]) -> Result<TokenDistribution> {
    let (h, w) = slice.dims2("smooth_and_normalize")?;
    if slice.data().iter().any(|&v| v < 0.0) {
        return Err(Error::contract("attention slice has negative entries"));
    }
    let blurred: Vec<f64> = blur_2d(slice.data(), h, w, kernel)
        .iter()
        .map(|v| v + EPS_FLOOR)
        .collect();
    let inv = 1.0 / blurred.iter().sum::<f64>();
    Ok(TokenDistribution {
        p: Tensor::from_vec(&[h, w], blurred.iter().map(|v| v * inv).collect())?,
    })
}

/// `Σ p·ln(p/q)` over all cells.
pub fn pairwise_kl(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    if p.p.shape() != q.p.shape() {
        return Err(Error::contract(format!(
            "distributions have shapes {:?} and {:?}",
            p.p.shape(),
            q.p.shape()
        )));
    }
    Ok(p.p
        .data()
        .iter()
        .zip(q.p.data())
        .map(|(&a, &b)| a * (a.ln() - b.ln()))
        .sum())
}

/// `count / Σ 1/v`, with values below the floor raised to it.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("harmonic mean of no values"));
    }
    let recip: f64 = values.iter().map(|&v| 1.0 / v.max(EPS_FLOOR)).sum();
    Ok(values.len() as f64 / recip)
}

/// `max(0, τ − klh)`.
pub fn kl_loss(klh: f64, tau: f64) -> f64 {
    (tau - klh).max(0.0)
}

/// Step size `base − slope·t/total`.
pub fn eta_schedule(t: f64, total: f64, base: f64, slope: f64) -> f64 {
    base - slope * (t / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlObjective {
    /// Divergences of ordered pairs `(i, j)`, `i ≠ j`, row-major.
    pub pair_kl: Vec<f64>,
    pub klh: f64,
    pub loss: f64,
}

/// Objective over all ordered pairs of `slices`.
pub fn kl_objective(slices: &[Tensor<f64>], kernel: &[f64], tau: f64) -> Result<KlObjective> {
    if slices.len() < 2 {
        return Err(Error::contract(format!(
            "divergence needs at least 2 tokens, got {}",
            slices.len()
        )));
    }
    let dists = slices
        .iter()
        .map(|s| smooth_and_normalize(s, kernel))
        .collect::<Result<Vec<_>>>()?;
    let mut pair_kl = Vec::new();
    for (i, p) in dists.iter().enumerate() {
        for (j, q) in dists.iter().enumerate() {
            if i != j {
                pair_kl.push(pairwise_kl(p, q)?);
            }
        }
    }
    let klh = harmonic_mean(&pair_kl)?;
    Ok(KlObjective {
        loss: kl_loss(klh, tau),
        pair_kl,
        klh,
    })
}

/// Tape form of [`kl_objective`] on an aggregate `(H·W × k)`; returns
/// `(loss, klh)`.
pub fn kl_objective_on_tape<T: Real>(
    tape: &mut Tape<T>,
    aggregate: Var,
    height: usize,
    width: usize,
    kernel: &[T],
    tau: f64,
) -> Result<(Var, Var)> {
    let (_, k) = tape.value(aggregate).dims2("kl_objective")?;
    if k < 2 {
        return Err(Error::contract(format!("divergence needs at least 2 tokens, got {k}")));
    }
    let mut logs = Vec::with_capacity(k);
    let mut probs = Vec::with_capacity(k);
    for j in 0..k {
        let col = tape.select_columns(aggregate, &[j])?;
        let map = tape.reshape(col, &[height, width])?;
        let blurred = tape.blur_2d(map, kernel)?;
        let floored = tape.add_scalar(blurred, T::lit(EPS_FLOOR));
        let total = tape.sum(floored);
        let inv = tape.recip(total);
        let p = tape.mul_scalar_var(floored, inv)?;
        logs.push(tape.log(p));
        probs.push(p);
    }
    let mut recip_sum: Option<Var> = None;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let diff = tape.sub(logs[i], logs[j])?;
            let terms = tape.mul(probs[i], diff)?;
            let kl = tape.sum(terms);
            let kl = tape.clamp_min(kl, T::lit(EPS_FLOOR));
            let r = tape.recip(kl);
            recip_sum = Some(match recip_sum {
                Some(acc) => tape.add(acc, r)?,
                None => r,
            });
        }
    }
    let inv = tape.recip(recip_sum.expect("k >= 2"));
    let klh = tape.scale(inv, T::lit((k * (k - 1)) as f64));
    let neg = tape.scale(klh, T::lit(-1.0));
    let margin = tape.add_scalar(neg, T::lit(tau));
    Ok((tape.relu(margin), klh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokensplit_tensor::gaussian_kernel;

    fn dist(v: &[f64]) -> TokenDistribution {
        TokenDistribution {
            p: Tensor::from_f64(&[1, v.len()], v).unwrap(),
        }
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[0.75, 0.25]);
        let q = dist(&[0.25, 0.75]);
        assert!((pairwise_kl(&p, &q).unwrap() - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(pairwise_kl(&p, &p).unwrap(), 0.0);
        let a = dist(&[0.9, 0.1]);
        let b = dist(&[0.5, 0.5]);
        let ab = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let ba = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((pairwise_kl(&a, &b).unwrap() - ab).abs() < 1e-12);
        assert!((pairwise_kl(&b, &a).unwrap() - ba).abs() < 1e-12);
        assert!((ab - ba).abs() > 0.1);
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(&[0.7, 0.7, 0.7]).unwrap() - 0.7).abs() < 1e-15);
        assert!((harmonic_mean(&[1.0, 3.0]).unwrap() - 1.5).abs() < 1e-15);
        assert!((harmonic_mean(&[2.0, 6.0, 6.0]).unwrap() - 3.6).abs() < 1e-14);
        assert!(harmonic_mean(&[]).is_err());
        assert_eq!(harmonic_mean(&[0.0, 1.0]).unwrap(), 2.0 / (1e12 + 1.0));
    }

    #[test]
    fn kl_loss_clamps() {
        assert_eq!(kl_loss(1.5, 1.0), 0.0);
        assert!((kl_loss(0.4, 1.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn eta_endpoints() {
        assert_eq!(eta_schedule(200.0, 200.0, 40.0, 20.0), 20.0);
        assert_eq!(eta_schedule(0.0, 200.0, 40.0, 20.0), 40.0);
        assert_eq!(eta_schedule(100.0, 200.0, 40.0, 20.0), 30.0);
    }

    #[test]
    fn smoothing_degenerate_cases() {
        let k = gaussian_kernel::<f64>(3, 1.0);
        for fill in [0.0, 0.3] {
            let d = smooth_and_normalize(&Tensor::full(&[4, 5], fill), &k).unwrap();
            for &v in d.p.data() {
                assert!((v - 1.0 / 20.0).abs() < 1e-15);
            }
        }
        let mut one_hot = Tensor::zeros(&[5, 5]);
        one_hot.data_mut()[12] = 1.0;
        let d = smooth_and_normalize(&one_hot, &k).unwrap();
        assert!((d.p.sum() - 1.0).abs() < 1e-9);
        // interior bump is the outer product of the kernel with itself
        assert!((d.p.data()[12] - k[1] * k[1]).abs() < 1e-9);
        assert!((d.p.data()[6] - k[0] * k[0]).abs() < 1e-9);
        assert!(d.p.data()[0] > 0.0 && d.p.data()[0] < 1e-9);
    }

    #[test]
    fn tape_objective_matches_direct() {
        let k = gaussian_kernel::<f64>(3, 1.0);
        let mut rng = crate::rng::SplitMix64::new(3);
        let agg: Vec<f64> = (0..16 * 3).map(|_| rng.next_f64()).collect();
        let agg = Tensor::from_vec(&[16, 3], agg).unwrap();
        let slices: Vec<Tensor<f64>> = (0..3)
            .map(|j| agg.select_columns(&[j]).unwrap().reshape(&[4, 4]).unwrap())
            .collect();
        let direct = kl_objective(&slices, &k, 5.0).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(agg);
        let (loss, klh) = kl_objective_on_tape(&mut tape, a, 4, 4, &k, 5.0).unwrap();
        assert!((tape.value(klh).item() - direct.klh).abs() < 1e-12);
        assert!((tape.value(loss).item() - direct.loss).abs() < 1e-12);
        assert_eq!(direct.pair_kl.len(), 6);
    }
}
