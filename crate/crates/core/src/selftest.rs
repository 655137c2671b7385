//! Self-test battery behind `detfuse refmath check`: scalar fixtures,
//! finite-difference gradient checks and the heatmap encode/decode identity.

use rand::Rng;
use serde::Serialize;

use crate::geometry::BBox;
use crate::refmath::*;
use crate::synth::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const SAMPLES: usize = 100;

fn fixture(name: &str, got: f64, want: f64, tol: f64) -> Check {
    Check {
        name: name.to_string(),
        passed: (got - want).abs() <= tol,
        detail: format!("got {got:.6}, expected {want:.6} ± {tol:e}"),
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Worst relative error of `samples` gradient comparisons.
fn grad_check(name: &str, errors: impl Iterator<Item = f64>) -> Check {
    let (count, worst) = errors.fold((0usize, 0.0f64), |(n, w), e| (n + 1, w.max(e)));
    Check {
        name: name.to_string(),
        passed: count >= SAMPLES && worst < GRAD_TOL,
        detail: format!("{count} points, worst relative error {worst:.2e}"),
    }
}

fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox::new(x0, y0, x1, y1).expect("fixture box")
}

/// Uniform draw in `(lo, hi)` that stays `margin` away from `kinks`.
fn away_from(rng: &mut impl Rng, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            return v;
        }
    }
}

pub fn run(seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = stream_rng(seed, 0x5e1f);

    let gt = b(0.0, 0.0, 10.0, 10.0);
    checks.push(fixture("smooth_l1(0.5)", smooth_l1(0.5), 0.125, 1e-4));
    checks.push(fixture("smooth_l1(-2)", smooth_l1(-2.0), 1.5, 1e-4));
    checks.push(fixture(
        "bbox_reg_loss shift 1",
        bbox_reg_loss(&b(1.0, 1.0, 11.0, 11.0), &gt),
        2.0,
        1e-4,
    ));
    checks.push(fixture(
        "cascade_stage_loss p=0.5 y=1",
        cascade_stage_loss(0.5, 1, &b(1.0, 1.0, 11.0, 11.0), &gt).unwrap_or(f64::NAN),
        2.6931,
        1e-4,
    ));
    let one = Heatmap::from_values(1, 1, 1, vec![1.0]).expect("1x1");
    let half = Heatmap::from_values(1, 1, 1, vec![0.5]).expect("1x1");
    checks.push(fixture(
        "focal positive cell",
        focal_keypoint_loss(&half, &one, 1).unwrap_or(f64::NAN),
        0.1733,
        1e-4,
    ));
    let hm = render_heatmap(&[((8.0, 8.0), 1.0)], 6, 6, 4).expect("grid");
    checks.push(fixture("heatmap neighbor", hm.get(3, 2), 0.6065, 1e-4));
    let size = SizeTarget {
        category: 1,
        wh: (8.0, 12.0),
    };
    checks.push(fixture(
        "size_loss",
        size_loss(&[(10.0, 10.0)], &[size]).unwrap_or(f64::NAN),
        4.0,
        1e-4,
    ));
    let decoded = decode_center((50.0, 50.0), (0.2, 0.3), (10.0, 20.0), 1).map(|d| d.corners());
    let want = [45.2, 40.3, 55.2, 60.3];
    let worst = decoded.map_or(f64::INFINITY, |c| {
        c.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
    });
    checks.push(fixture("decode_center", worst, 0.0, 1e-4));

    checks.push(grad_check(
        "grad smooth_l1",
        (0..SAMPLES).map(|_| {
            let x = away_from(&mut rng, -3.0, 3.0, &[-1.0, 1.0], 1e-3);
            rel_err(smooth_l1_grad(x), central(smooth_l1, x))
        }),
    ));

    checks.push(grad_check(
        "grad bbox_reg_loss",
        (0..SAMPLES).map(|_| {
            let g = b(10.0, 10.0, 30.0, 30.0);
            let p: [f64; 4] =
                std::array::from_fn(|i| g.corners()[i] + away_from(&mut rng, -2.5, 2.5, &[-1.0, 1.0], 1e-3));
            let pred = BBox::from_corners(p).expect("small offsets keep order");
            let analytic = bbox_reg_loss_grad(&pred, &g);
            (0..4)
                .map(|i| {
                    let f = |v: f64| {
                        let mut c = p;
                        c[i] = v;
                        bbox_reg_loss(&BBox::from_corners(c).expect("order"), &g)
                    };
                    rel_err(analytic[i], central(f, p[i]))
                })
                .fold(0.0, f64::max)
        }),
    ));

    checks.push(grad_check(
        "grad focal_keypoint_loss",
        (0..SAMPLES).map(|_| {
            let g = rng.random_range(0.0..0.99);
            let gt_val = if rng.random_bool(0.5) { 1.0 } else { g };
            let p = rng.random_range(0.01..0.99);
            let gt = Heatmap::from_values(1, 1, 1, vec![gt_val]).expect("1x1");
            let f = |v: f64| {
                let pred = Heatmap::from_values(1, 1, 1, vec![v]).expect("1x1");
                focal_keypoint_loss(&pred, &gt, 1).expect("shapes")
            };
            let pred = Heatmap::from_values(1, 1, 1, vec![p]).expect("1x1");
            rel_err(
                focal_keypoint_loss_grad(&pred, &gt, 1).expect("shapes")[0],
                central(f, p),
            )
        }),
    ));

    checks.push(grad_check(
        "grad offset_loss",
        (0..SAMPLES).map(|_| {
            let t = KeypointTarget::new((rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)), 4, 1.0)
                .expect("valid target");
            let p = (
                t.offset.0 + away_from(&mut rng, -0.5, 0.5, &[0.0], 1e-3),
                t.offset.1 + away_from(&mut rng, -0.5, 0.5, &[0.0], 1e-3),
            );
            let analytic = offset_loss_grad(&[p], &[t]).expect("aligned")[0];
            let fx = |v: f64| offset_loss(&[(v, p.1)], &[t]).expect("aligned");
            let fy = |v: f64| offset_loss(&[(p.0, v)], &[t]).expect("aligned");
            rel_err(analytic.0, central(fx, p.0)).max(rel_err(analytic.1, central(fy, p.1)))
        }),
    ));

    checks.push(grad_check(
        "grad size_loss",
        (0..SAMPLES).map(|_| {
            let t = SizeTarget {
                category: 1,
                wh: (rng.random_range(1.0..50.0), rng.random_range(1.0..50.0)),
            };
            let p = (
                t.wh.0 + away_from(&mut rng, -5.0, 5.0, &[0.0], 1e-3),
                t.wh.1 + away_from(&mut rng, -5.0, 5.0, &[0.0], 1e-3),
            );
            let analytic = size_loss_grad(&[p], &[t]).expect("aligned")[0];
            let fx = |v: f64| size_loss(&[(v, p.1)], &[t]).expect("aligned");
            let fy = |v: f64| size_loss(&[(p.0, v)], &[t]).expect("aligned");
            rel_err(analytic.0, central(fx, p.0)).max(rel_err(analytic.1, central(fy, p.1)))
        }),
    ));

    let stride = 4u32;
    let mut worst = 0.0f64;
    for _ in 0..SAMPLES {
        let w = 2.0 * rng.random_range(2..20) as f64 * stride as f64;
        let h = 2.0 * rng.random_range(2..20) as f64 * stride as f64;
        let x = rng.random_range(0..16) as f64 * stride as f64;
        let y = rng.random_range(0..16) as f64 * stride as f64;
        let truth = BBox::from_xywh(x, y, w, h).expect("positive");
        let t = KeypointTarget::from_box(&truth, stride).expect("stride");
        let hm = render_heatmap(&[(t.gt_point, t.sigma)], 64, 64, stride).expect("grid");
        let err = match peak_pick(&hm, 1, 3) {
            Ok(p) if p.len() == 1 => {
                let ((cx, cy), _) = p[0];
                let wh = (w / stride as f64, h / stride as f64);
                decode_center((cx as f64, cy as f64), t.offset, wh, stride)
                    .map(|d| {
                        d.corners()
                            .iter()
                            .zip(truth.corners())
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0, f64::max)
                    })
                    .unwrap_or(f64::INFINITY)
            }
            _ => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    checks.push(Check {
        name: "encode/decode identity".into(),
        passed: worst <= 1e-6,
        detail: format!("{SAMPLES} boxes, worst corner error {worst:.2e} px"),
    });

    checks
}

#[cfg(test)]
mod tests {
    #[test]
    fn battery_passes() {
        let checks = super::run(0);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(checks.len() >= 14);
    }
}
