//! Property suites with closed-form expectations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{make_pair, procedural_image, swap_channels};
use crate::deform::{
    compose, gaussian_svf, svf_exp, warp, Affine, Deformation, EquivarianceTransform, Image, Mask, Preset, RigidParams,
    SimDeformParams, Svf,
};
use crate::error::Result;
use crate::losses::{commutation_loss, nonrigidity, similarity_equivariance, RigidityWeights};
use crate::metrics::{mde, nmi, psnr, ssim, DEFAULT_NMI_BINS};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{select_best_epoch, INTENSITY_RANGE};

/// Outcome of one property suite.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Flow of the analytic Gaussian velocity field from `start` by forward Euler.
pub fn euler_gaussian_flow(
    mu: (f64, f64),
    sigma: (f64, f64),
    m: (f64, f64),
    start: (f64, f64),
    steps: usize,
) -> (f64, f64) {
    let (mut r, mut c) = start;
    let dt = 1.0 / steps as f64;
    for _ in 0..steps {
        let d2 = (r - mu.0).powi(2) + (c - mu.1).powi(2);
        r += dt * m.0 * (-0.5 * d2 / (sigma.0 * sigma.0)).exp();
        c += dt * m.1 * (-0.5 * d2 / (sigma.1 * sigma.1)).exp();
    }
    (r, c)
}

fn mean_length(field: &Tensor) -> f64 {
    let p = field.len() / 2;
    (0..p).map(|q| field.data()[q].hypot(field.data()[p + q])).sum::<f64>() / p as f64
}

/// Worst per-field mean deviations of scaling and squaring from Euler
/// integration and of `exp(v) o exp(-v)` from the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffeoStats {
    pub flow_error: f64,
    pub round_trip: f64,
}

/// Random Gaussian fields on a `size x size` grid: centres on the grid,
/// `|m| <= 10` px per component and `sigma` in `[10, 30]` px.
pub fn diffeomorphism_stats(fields: usize, size: usize, euler_steps: usize, seed: u64) -> Result<DiffeoStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = DiffeoStats { flow_error: 0.0, round_trip: 0.0 };
    let n = size as f64;
    for _ in 0..fields {
        let mu = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
        let sigma = (rng.gen_range(10.0..30.0), rng.gen_range(10.0..30.0));
        let m = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let tape = Tape::new();
        let v = Svf::new(tape.constant(gaussian_svf(mu, sigma, m, size, size)?))?;
        let fwd = svf_exp(&v)?;
        let phi = fwd.coords()?.value();
        let p = size * size;
        let flow = (0..p)
            .map(|q| {
                let (er, ec) = euler_gaussian_flow(mu, sigma, m, ((q / size) as f64, (q % size) as f64), euler_steps);
                (phi.data()[q] - er).hypot(phi.data()[p + q] - ec)
            })
            .sum::<f64>()
            / p as f64;
        let round = mean_length(&compose(&fwd, &svf_exp(&v.neg())?)?.displacement()?.value());
        stats.flow_error = stats.flow_error.max(flow);
        stats.round_trip = stats.round_trip.max(round);
    }
    Ok(stats)
}

pub fn diffeomorphism_suite(seed: u64) -> Result<PropertyCheck> {
    let s = diffeomorphism_stats(50, 64, 1000, seed)?;
    Ok(PropertyCheck {
        name: "diffeomorphism",
        passed: s.flow_error < 0.05 && s.round_trip < 0.1,
        detail: format!(
            "worst mean flow error {:.4} px (< 0.05), worst round trip {:.4} px (< 0.1)",
            s.flow_error, s.round_trip
        ),
    })
}

/// Largest total penalty over `count` random rigid motions, and the unweighted
/// terms of a uniform scaling by two.
pub fn rigidity_stats(count: usize, seed: u64) -> Result<(f64, [f64; 3])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = RigidityWeights::default();
    let size = (32, 32);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let shift = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let tape = Tape::new();
        let d = Deformation::from_affine(&tape, &RigidParams::new(angle, shift).to_affine(size), size.0, size.1);
        let dense = Deformation::dense(d.coords()?, Mask::full(size.0, size.1))?;
        worst = worst.max(nonrigidity(&dense, &weights)?.total.item().abs());
    }
    let tape = Tape::new();
    let scale = Affine::about([[2.0, 0.0], [0.0, 2.0]], crate::deform::image_center(size));
    let d = Deformation::from_affine(&tape, &scale, size.0, size.1);
    let n = nonrigidity(&Deformation::dense(d.coords()?, Mask::full(size.0, size.1))?, &weights)?;
    Ok((worst, [n.affinity.item(), n.orthogonality.item(), n.properness.item()]))
}

pub fn rigidity_suite(seed: u64) -> Result<PropertyCheck> {
    let (worst, [aff, orth, prop]) = rigidity_stats(100, seed)?;
    Ok(PropertyCheck {
        name: "rigidity",
        passed: worst < 1e-9 && aff.abs() < 1e-6 && (orth - 18.0).abs() < 1e-6 && (prop - 9.0).abs() < 1e-6,
        detail: format!(
            "worst rigid penalty {worst:.2e}; scaling by 2: affinity {aff}, orthogonality {orth}, properness {prop}"
        ),
    })
}

/// `NMI(x,x) = 2`, `SSIM(x,x) = 1`, `MDE(d,d) = 0` and an unbounded PSNR, all exact.
pub fn metric_identity_suite(seed: u64) -> Result<PropertyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..50 {
        let n = 32;
        let x = Tensor::from_fn(&[3, n, n], |_| rng.gen_range(0.0..255.0));
        let d = Tensor::from_fn(&[2, n, n], |_| rng.gen_range(-5.0..40.0));
        let (hr, hc) = (rng.gen_range(0..n / 2), rng.gen_range(0..n / 2));
        let m = Mask::from_fn(n, n, |r, c| r >= hr || c >= hc);
        let values = (
            nmi(&x, &x, &m, DEFAULT_NMI_BINS)?,
            ssim(&x, &x, &m, INTENSITY_RANGE)?,
            mde(&d, &d, &m)?,
            psnr(&x, &x, &m, INTENSITY_RANGE)?,
        );
        if values != (2.0, 1.0, 0.0, f64::INFINITY) {
            failures.push(format!("case {i}: {values:?}"));
        }
    }
    Ok(PropertyCheck {
        name: "metric identities",
        passed: failures.is_empty(),
        detail: if failures.is_empty() { "50 random cases exact".into() } else { failures.join("; ") },
    })
}

/// Largest equivariance residuals of the true channel-swap synthesis, in units
/// of the intensity range: commutation under flips and quarter turns, under
/// small rotations, and the equivariance similarity with the true deformation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivarianceStats {
    pub orthogonal_com: f64,
    pub rotation_com: f64,
    pub rotation_sim: f64,
}

/// Tolerance on rotation residuals as a fraction of the intensity range.
pub const EQUIVARIANCE_TOLERANCE: f64 = 0.02;

pub fn equivariance_stats(images: usize, size: usize, max_angle_deg: f64, seed: u64) -> Result<EquivarianceStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = EquivarianceStats { orthogonal_com: 0.0, rotation_com: 0.0, rotation_sim: 0.0 };
    let extent = (size, size);
    for _ in 0..images {
        let x = procedural_image(&mut rng, size, size)?.map(|v| v / INTENSITY_RANGE);
        let sample = make_pair(x.clone(), &SimDeformParams::preset_for_size(Preset::LargeRandom, size), &mut rng)?;
        let tape = Tape::new();
        let xi = Image::full(tape.constant(x.clone()))?;
        let f = |img: &Image<'_>| -> Result<Tensor> { swap_channels(&img.data.value()) };
        let commute = |t: &Affine| -> Result<f64> {
            let td = Deformation::from_affine(&tape, t, size, size);
            let tx = warp(&xi, &td)?;
            let f_tx = Image::new(tape.constant(f(&tx)?), tx.mask.clone())?;
            let f_x = Image::full(tape.constant(f(&xi)?))?;
            Ok(commutation_loss(&f_x, &f_tx, &td)?.value.item())
        };
        for k in 0..4 {
            for (fr, fc) in [(false, false), (true, false), (false, true), (true, true)] {
                let t = Affine::flips(fr, fc, extent).then(&Affine::quarter_turns(k, extent));
                s.orthogonal_com = s.orthogonal_com.max(commute(&t)?);
            }
        }
        let angle = rng.gen_range(-max_angle_deg..=max_angle_deg).to_radians();
        let t = EquivarianceTransform {
            forward: Affine::rotation(angle, extent),
            inverse: Affine::rotation(-angle, extent),
            angle,
            quarter_turns: 0,
            flip_rows: false,
            flip_cols: false,
        };
        s.rotation_com = s.rotation_com.max(commute(&t.forward)?);

        let (fwd, inv) = (
            Deformation::from_affine(&tape, &t.forward, size, size),
            Deformation::from_affine(&tape, &t.inverse, size, size),
        );
        let tx = warp(&xi, &fwd)?;
        let f_tx = Image::new(tape.constant(f(&tx)?), tx.mask.clone())?;
        let y_tilde = Image::new(tape.constant(sample.y_tilde.clone()), sample.y_mask.clone())?;
        let d_true = sample.deformation.to_deformation(&tape)?;
        let sim = similarity_equivariance(&f_tx, &y_tilde, &d_true, &inv)?;
        s.rotation_sim = s.rotation_sim.max(sim.value.item());
    }
    Ok(s)
}

pub fn equivariance_suite(seed: u64) -> Result<PropertyCheck> {
    let s = equivariance_stats(8, 64, 15.0, seed)?;
    Ok(PropertyCheck {
        name: "equivariance",
        passed: s.orthogonal_com == 0.0 && s.rotation_com < EQUIVARIANCE_TOLERANCE && s.rotation_sim < EQUIVARIANCE_TOLERANCE,
        detail: format!(
            "flips/quarter turns {:e} (exactly 0), rotations {:.4} and similarity {:.4} (< {EQUIVARIANCE_TOLERANCE} of range)",
            s.orthogonal_com, s.rotation_com, s.rotation_sim
        ),
    })
}

/// Fixtures `(validation scores, selected 1-based epoch)`.
pub const SELECTION_FIXTURES: [(&[f64], usize); 6] = [
    (&[3.0], 1),
    (&[5.0, 4.0, 3.0], 3),
    (&[1.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0], 2),
    (&[9.0, 8.0, 7.0, 6.0, 2.0, 2.0, 3.0, 2.0], 5),
    (&[0.5, 4.0, 3.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 4),
    (&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 3),
];

pub fn selection_suite() -> Result<PropertyCheck> {
    let mut failures = Vec::new();
    for (scores, want) in SELECTION_FIXTURES {
        let got = select_best_epoch(scores)?;
        if got != want {
            failures.push(format!("{scores:?}: epoch {got}, expected {want}"));
        }
    }
    Ok(PropertyCheck {
        name: "epoch selection",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{} fixtures", SELECTION_FIXTURES.len())
        } else {
            failures.join("; ")
        },
    })
}
