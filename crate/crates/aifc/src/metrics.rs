//! PSNR, rate-distortion curve bookkeeping, and the BD-rate calculator.

use std::path::Path;

use thiserror::Error;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// One point of a rate-distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    pub lambda: f64,
}

/// Peak signal-to-noise ratio in dB for [0,1]-scaled images, capped at 100.
pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let mse = x
        .data()
        .iter()
        .zip(x_hat.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.numel() as f64;
    if mse <= 1e-10 {
        return Ok(100.0);
    }
    Ok((-10.0 * mse.log10()).min(100.0))
}

#[derive(Debug, Error)]
pub enum BdRateError {
    #[error("each curve needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("curves have no overlapping psnr range")]
    NoOverlap,
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
}

/// Average percent rate difference of `test` against `anchor` over their
/// common quality range. Negative means the test curve spends fewer bits
/// for equal quality.
///
/// Natural cubic interpolation of ln(rate) against PSNR, mean difference
/// over the overlapped PSNR interval, reported as `(e^mean - 1) * 100`.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64, BdRateError> {
    let a = prepared(anchor)?;
    let b = prepared(test)?;
    let lo = a.0[0].max(b.0[0]);
    let hi = a.0.last().unwrap().min(*b.0.last().unwrap());
    if lo >= hi {
        return Err(BdRateError::NoOverlap);
    }
    let sa = Spline::natural(&a.0, &a.1);
    let sb = Spline::natural(&b.0, &b.1);
    let mean_diff = (sb.integral(lo, hi) - sa.integral(lo, hi)) / (hi - lo);
    Ok((mean_diff.exp() - 1.0) * 100.0)
}

fn prepared(curve: &[RdPoint]) -> Result<(Vec<f64>, Vec<f64>), BdRateError> {
    if curve.len() < 4 {
        return Err(BdRateError::TooFewPoints(curve.len()));
    }
    let mut pts: Vec<(f64, f64)> = curve
        .iter()
        .map(|p| {
            if p.bpp <= 0.0 || !p.bpp.is_finite() || !p.psnr_db.is_finite() {
                Err(BdRateError::InvalidCurve(format!(
                    "bad point (bpp {}, psnr {})",
                    p.bpp, p.psnr_db
                )))
            } else {
                Ok((p.psnr_db, p.bpp.ln()))
            }
        })
        .collect::<Result<_, _>>()?;
    pts.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    for w in pts.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(BdRateError::InvalidCurve(format!(
                "duplicate psnr value {}",
                w[1].0
            )));
        }
    }
    Ok(pts.into_iter().unzip())
}

/// Natural cubic spline with analytic piecewise integration.
pub struct Spline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl Spline {
    pub fn natural(xs: &[f64], ys: &[f64]) -> Spline {
        let n = xs.len();
        assert!(n >= 2 && n == ys.len());
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for interior second derivatives
            let mut sub = vec![0.0; n];
            let mut diag = vec![0.0; n];
            let mut sup = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            for i in 1..n - 1 {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                sub[i] = h0;
                diag[i] = 2.0 * (h0 + h1);
                sup[i] = h1;
                rhs[i] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
            }
            // Thomas algorithm on rows 1..n-1 (natural ends: m[0] = m[n-1] = 0)
            for i in 2..n - 1 {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[n - 2] = rhs[n - 2] / diag[n - 2];
            for i in (1..n - 2).rev() {
                m[i] = (rhs[i] - sup[i] * m[i + 1]) / diag[i];
            }
        }
        Spline {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            m,
        }
    }

    fn segment_of(&self, x: f64) -> usize {
        let n = self.xs.len();
        match self.xs.partition_point(|&k| k <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment_of(x);
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let h = x1 - x0;
        let (a, b) = ((x1 - x) / h, (x - x0) / h);
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    /// Exact integral over [a, b] (clamped to the knot range, matching the
    /// way BD-rate restricts to the overlapped interval).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        assert!(a <= b);
        let lo = a.max(self.xs[0]);
        let hi = b.min(*self.xs.last().unwrap());
        if lo >= hi {
            return 0.0;
        }
        let mut total = 0.0;
        let mut at = lo;
        while at < hi {
            let i = self.segment_of(at);
            let seg_end = self.xs[i + 1].min(hi);
            total += self.segment_integral(i, at, seg_end);
            at = seg_end;
        }
        total
    }

    fn segment_integral(&self, i: usize, a: f64, b: f64) -> f64 {
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let h = x1 - x0;
        // antiderivative of eval(); du = -dx/h and dv = dx/h flip the u terms
        let prim = |x: f64| {
            let u = (x1 - x) / h;
            let v = (x - x0) / h;
            h * (-self.ys[i] * u * u / 2.0
                + self.ys[i + 1] * v * v / 2.0
                + self.m[i] * h * h / 6.0 * (u * u / 2.0 - u.powi(4) / 4.0)
                + self.m[i + 1] * h * h / 6.0 * (v.powi(4) / 4.0 - v * v / 2.0))
        };
        prim(b) - prim(a)
    }
}

// ---------------------------------------------------------------------------
// CSV formats
// ---------------------------------------------------------------------------

pub const RD_CSV_HEADER: &str = "bpp,psnr_db,lambda";

pub fn write_rd_csv(points: &[RdPoint]) -> String {
    let mut out = String::from(RD_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.bpp, p.psnr_db, p.lambda));
    }
    out
}

#[derive(Debug, Error)]
#[error("csv line {line}: {message}")]
pub struct CsvError {
    pub line: usize,
    pub message: String,
}

pub fn parse_rd_csv(text: &str) -> Result<Vec<RdPoint>, CsvError> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 {
            if line != RD_CSV_HEADER {
                return Err(CsvError {
                    line: 1,
                    message: format!("expected header {RD_CSV_HEADER:?}, got {line:?}"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CsvError {
                line: i + 1,
                message: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| {
            s.trim().parse::<f64>().map_err(|_| CsvError {
                line: i + 1,
                message: format!("cannot parse {what} from {s:?}"),
            })
        };
        points.push(RdPoint {
            bpp: parse(fields[0], "bpp")?,
            psnr_db: parse(fields[1], "psnr")?,
            lambda: parse(fields[2], "lambda")?,
        });
    }
    Ok(points)
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdPoint>, crate::error::CodecError> {
    let text = std::fs::read_to_string(path)?;
    parse_rd_csv(&text).map_err(|e| crate::error::CodecError::InvalidInput(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn psnr_of_identical_images_is_capped() {
        let x = Tensor::full(&[1, 3, 4, 4], 0.25);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
    }

    #[test]
    fn psnr_uniform_one_step_error() {
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        let y = Tensor::full(&[1, 1, 16, 16], 1.0 / 255.0);
        let p = psnr(&x, &y).unwrap();
        assert!((p - 48.1308).abs() < 1e-4, "psnr {p}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let x = Tensor::rand_uniform(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
        let y = Tensor::rand_uniform(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha12Rng::seed_from_u64(62);
        let x = Tensor::rand_uniform(&mut rng, &[1, 3, 16, 16], 0.2, 0.8);
        let noise = Tensor::rand_uniform(&mut rng, &[1, 3, 16, 16], -1.0, 1.0);
        let mut last = f64::INFINITY;
        for k in 1..=8 {
            let amp = k as f64 * 0.01;
            let noisy = Tensor::from_vec(
                x.shape(),
                x.data()
                    .iter()
                    .zip(noise.data())
                    .map(|(a, n)| a + amp * n)
                    .collect(),
            );
            let p = psnr(&x, &noisy).unwrap();
            assert!(p < last, "amplitude {amp}: {p} !< {last}");
            last = p;
        }
    }

    fn curve(points: &[(f64, f64)]) -> Vec<RdPoint> {
        points
            .iter()
            .map(|&(bpp, psnr_db)| RdPoint {
                bpp,
                psnr_db,
                lambda: 0.0,
            })
            .collect()
    }

    #[test]
    fn identical_curves_give_zero() {
        let c = curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)]);
        assert_eq!(bd_rate(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn constant_rate_scale_gives_constant_percent() {
        let a = curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)]);
        let b: Vec<RdPoint> = a
            .iter()
            .map(|p| RdPoint {
                bpp: 0.9 * p.bpp,
                ..*p
            })
            .collect();
        let r = bd_rate(&a, &b).unwrap();
        assert!((r - -10.0).abs() < 1e-9, "bd-rate {r}");
    }

    #[test]
    fn signs_negate_between_orderings() {
        let a = curve(&[(0.11, 29.7), (0.23, 33.1), (0.39, 35.2), (0.81, 38.9)]);
        let b = curve(&[(0.10, 30.0), (0.2, 32.5), (0.45, 36.0), (0.7, 38.0)]);
        let ab = bd_rate(&a, &b).unwrap();
        let ba = bd_rate(&b, &a).unwrap();
        assert!(ab * ba < 0.0, "{ab} vs {ba}");
        // the mean log offsets negate exactly
        let da = (1.0 + ab / 100.0).ln();
        let db = (1.0 + ba / 100.0).ln();
        assert!((da + db).abs() < 1e-12);
    }

    #[test]
    fn matches_dense_trapezoid_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(63);
        for _ in 0..20 {
            // random monotone curves with overlapping quality ranges
            let mk = |rng: &mut ChaCha12Rng| {
                let mut bpp = rng.random_range(0.05..0.15);
                let mut q = rng.random_range(28.0..31.0);
                let mut pts = Vec::new();
                for _ in 0..rng.random_range(4..8) {
                    pts.push((bpp, q));
                    bpp *= rng.random_range(1.4..2.2);
                    q += rng.random_range(1.5..4.0);
                }
                curve(&pts)
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let got = match bd_rate(&a, &b) {
                Ok(v) => v,
                Err(BdRateError::NoOverlap) => continue,
                Err(e) => panic!("{e}"),
            };
            // oracle: same splines, dense trapezoidal integration
            let pa = prepared(&a).unwrap();
            let pb = prepared(&b).unwrap();
            let sa = Spline::natural(&pa.0, &pa.1);
            let sb = Spline::natural(&pb.0, &pb.1);
            let lo = pa.0[0].max(pb.0[0]);
            let hi = pa.0.last().unwrap().min(*pb.0.last().unwrap());
            let n = 10_000;
            let mut acc = 0.0;
            for k in 0..=n {
                let x = lo + (hi - lo) * k as f64 / n as f64;
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                acc += w * (sb.eval(x) - sa.eval(x));
            }
            let mean = acc / n as f64;
            let oracle = (mean.exp() - 1.0) * 100.0;
            assert!(
                (got - oracle).abs() < 0.1,
                "bd {got} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn error_cases() {
        let a = curve(&[(0.1, 30.0), (0.2, 33.0), (0.4, 36.0)]);
        assert!(matches!(
            bd_rate(&a, &a),
            Err(BdRateError::TooFewPoints(3))
        ));
        let lowq = curve(&[(0.1, 10.0), (0.2, 11.0), (0.3, 12.0), (0.4, 13.0)]);
        let highq = curve(&[(0.1, 30.0), (0.2, 31.0), (0.3, 32.0), (0.4, 33.0)]);
        assert!(matches!(
            bd_rate(&lowq, &highq),
            Err(BdRateError::NoOverlap)
        ));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let pts = vec![
            RdPoint {
                bpp: 0.125,
                psnr_db: 31.5,
                lambda: 0.0025,
            },
            RdPoint {
                bpp: 0.5,
                psnr_db: 36.25,
                lambda: 0.04,
            },
        ];
        let text = write_rd_csv(&pts);
        let back = parse_rd_csv(&text).unwrap();
        assert_eq!(pts, back);

        let bad = "bpp,psnr_db,lambda\n0.1,30\n";
        let err = parse_rd_csv(bad).unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn spline_integral_matches_dense_sampling() {
        let xs = [0.0, 1.0, 2.5, 4.0, 5.0];
        let ys = [1.0, 2.0, 0.5, 3.0, 2.0];
        let s = Spline::natural(&xs, &ys);
        let (a, b) = (0.3, 4.7);
        let n = 200_000;
        let mut acc = 0.0;
        for k in 0..=n {
            let x = a + (b - a) * k as f64 / n as f64;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            acc += w * s.eval(x);
        }
        let dense = acc * (b - a) / n as f64;
        let exact = s.integral(a, b);
        assert!((dense - exact).abs() < 1e-6, "{dense} vs {exact}");
    }
}
