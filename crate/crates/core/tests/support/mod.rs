#![allow(dead_code)]

pub mod grads;
pub mod oracle;
pub mod props;

use man3d::geometry::Box7;
use rand::Rng;

/// Outcome of one criterion: a summary either way.
pub type Check = Result<String, String>;

pub fn random_box(rng: &mut impl Rng, spread: f64) -> Box7 {
    Box7::new(
        rng.gen_range(-spread..spread),
        rng.gen_range(-spread..spread),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(0.5..6.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

/// Second box near the first, occasionally identical or axis-aligned with it.
pub fn nearby_box(rng: &mut impl Rng, a: &Box7) -> Box7 {
    let mut b = random_box(rng, 1.0);
    b.cx = a.cx + rng.gen_range(-3.0..3.0);
    b.cy = a.cy + rng.gen_range(-3.0..3.0);
    match rng.gen_range(0..10) {
        0 => *a,
        1 => Box7 {
            heading: a.heading,
            cy: a.cy,
            ..b
        },
        2 => Box7 {
            heading: man3d::geometry::wrap_angle(a.heading + std::f64::consts::FRAC_PI_2).unwrap(),
            ..*a
        },
        _ => b,
    }
}
