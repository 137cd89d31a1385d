//! Signing and verification cost as a function of ring size.

use std::time::Instant;

use rand::{CryptoRng, RngCore};
use ringauth_core::{lrs, GroupParams, Ring};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Fit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Fit {
        slope,
        intercept,
        r2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub ring_size: usize,
    pub sign_secs: f64,
    pub verify_secs: f64,
    pub size_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub points: Vec<BenchPoint>,
    pub sign_fit: Fit,
    pub verify_fit: Fit,
    pub size_fit: Fit,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ring_size,sign_secs,verify_secs,size_bytes\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                p.ring_size, p.sign_secs, p.verify_secs, p.size_bytes
            ));
        }
        out
    }
}

/// Times sign and verify over rings of freshly generated keys, on the
/// calling thread. Signatures use an empty scope. Reported times are means
/// over the repetitions, after one untimed warm-up per size.
pub fn run<R: RngCore + CryptoRng>(
    sizes: &[usize],
    repetitions: usize,
    params: &GroupParams,
    rng: &mut R,
) -> Result<BenchReport, CliError> {
    let mut distinct = sizes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 || distinct[0] == 0 {
        return Err(CliError::Usage(
            "bench needs at least two distinct positive ring sizes".into(),
        ));
    }
    if repetitions == 0 {
        return Err(CliError::Usage("bench needs at least one repetition".into()));
    }
    let msg = b"benchmark message";
    let mut points = Vec::with_capacity(distinct.len());
    for &n in &distinct {
        let xs: Vec<_> = (0..n).map(|_| params.random_nonzero_scalar(rng)).collect();
        let ys = xs.iter().map(|x| lrs::public_key(x, params)).collect();
        let ring = Ring::new(ys, params)?;
        let signer = (rng.next_u64() % n as u64) as usize;
        let x = xs
            .iter()
            .find(|x| ring.position(&lrs::public_key(x, params)) == Some(signer))
            .expect("signer key present");

        // Untimed warm-up so the first timed repetition is not an outlier.
        let warm = lrs::sign(msg, &ring, signer, x, b"", params, rng)?;
        lrs::verify(msg, &ring, &warm, params)?;

        let mut sign_total = 0.0;
        let mut verify_total = 0.0;
        let mut size = 0;
        for _ in 0..repetitions {
            let t = Instant::now();
            let sig = lrs::sign(msg, &ring, signer, x, b"", params, rng)?;
            sign_total += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let outcome = lrs::verify(msg, &ring, &sig, params)?;
            verify_total += t.elapsed().as_secs_f64();
            if !outcome.accepted {
                return Err(CliError::Crypto("benchmark signature failed to verify".into()));
            }
            size = lrs::encode(&sig, params).len();
        }
        points.push(BenchPoint {
            ring_size: n,
            sign_secs: sign_total / repetitions as f64,
            verify_secs: verify_total / repetitions as f64,
            size_bytes: size,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.ring_size as f64).collect();
    let series = |f: fn(&BenchPoint) -> f64| points.iter().map(f).collect::<Vec<f64>>();
    Ok(BenchReport {
        repetitions,
        sign_fit: linear_fit(&xs, &series(|p| p.sign_secs)),
        verify_fit: linear_fit(&xs, &series(|p| p.verify_secs)),
        size_fit: linear_fit(&xs, &series(|p| p.size_bytes as f64)),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 0.5).collect();
        let fit = linear_fit(&xs, &ys);
        assert!((fit.slope - 3.0).abs() < 1e-12);
        assert!((fit.intercept - 0.5).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_r2_against_hand_computed_value() {
        // Worked by hand: slope 1, intercept 0.2, ss_res 0.24, ss_tot 5.24.
        let fit = linear_fit(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.6, 2.0, 3.2]);
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 0.2).abs() < 1e-12);
        let expected_r2 = 1.0 - 0.24 / 5.24;
        assert!((fit.r2 - expected_r2).abs() < 1e-9, "{}", fit.r2);
    }

    #[test]
    fn bench_sizes_follow_layout() {
        let params = GroupParams::production();
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let report = run(&[2, 3, 5], 1, params, &mut rng).unwrap();
        for p in &report.points {
            assert_eq!(p.size_bytes, 296 + 32 * p.ring_size);
        }
        assert!((report.size_fit.slope - 32.0).abs() < 1e-9);
        assert!(report.to_csv().starts_with("ring_size,"));
        assert!(run(&[4, 4], 1, params, &mut rng).is_err());
    }
}
