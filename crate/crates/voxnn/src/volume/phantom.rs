use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Label, Shape4, Volume};

/// Voxel intensities of the phantom regions.
pub const INTENSITY_BACKGROUND: f32 = 0.0;
pub const INTENSITY_INTERIOR: f32 = 1.0;
pub const INTENSITY_SHELL: f32 = 1.5;
pub const INTENSITY_CAVITY: f32 = 0.2;

/// Normal distribution over one geometric quantity. `sd = 0` is a point mass.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Gaussian {
    pub const fn point(mean: f64) -> Self {
        Self { mean, sd: 0.0 }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        // Always consume one draw so the RNG stream does not depend on sd.
        let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
        self.mean + self.sd * z
    }
}

/// Per-class distributions of the three phantom quantities: outer ellipsoid
/// radius ("brain size"), shell thickness ("cortical thickness"), and central
/// cavity radius ("ventricle size").
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct GeometrySpec {
    pub outer_radius: Gaussian,
    pub shell_thickness: Gaussian,
    pub cavity_radius: Gaussian,
}

/// Parameters of the synthetic phantom generator.
///
/// Class separation is built in: AD has the widest cavity and the thinnest
/// shell, NC the opposite, MCI sits in between.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct PhantomParams {
    pub grid: usize,
    pub ad: GeometrySpec,
    pub mci: GeometrySpec,
    pub nc: GeometrySpec,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        let outer = Gaussian { mean: 12.5, sd: 0.4 };
        Self {
            grid: 32,
            ad: GeometrySpec {
                outer_radius: outer,
                shell_thickness: Gaussian { mean: 1.5, sd: 0.15 },
                cavity_radius: Gaussian { mean: 5.0, sd: 0.3 },
            },
            mci: GeometrySpec {
                outer_radius: outer,
                shell_thickness: Gaussian { mean: 2.25, sd: 0.15 },
                cavity_radius: Gaussian { mean: 3.5, sd: 0.3 },
            },
            nc: GeometrySpec {
                outer_radius: outer,
                shell_thickness: Gaussian { mean: 3.0, sd: 0.15 },
                cavity_radius: Gaussian { mean: 2.0, sd: 0.3 },
            },
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn class(&self, label: Label) -> &GeometrySpec {
        match label {
            Label::Ad => &self.ad,
            Label::Mci => &self.mci,
            Label::Nc => &self.nc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(Error::InvalidParam("phantom grid extent must be >= 4".into()));
        }
        if self.noise_sd < 0.0 || !self.noise_sd.is_finite() {
            return Err(Error::InvalidParam("noise sd must be finite and >= 0".into()));
        }
        if !(self.ad.cavity_radius.mean > self.mci.cavity_radius.mean
            && self.mci.cavity_radius.mean > self.nc.cavity_radius.mean)
        {
            return Err(Error::InvalidParam(
                "mean cavity radii must satisfy AD > MCI > NC".into(),
            ));
        }
        if !(self.ad.shell_thickness.mean < self.mci.shell_thickness.mean
            && self.mci.shell_thickness.mean < self.nc.shell_thickness.mean)
        {
            return Err(Error::InvalidParam(
                "mean shell thickness must satisfy AD < MCI < NC".into(),
            ));
        }
        let half = (self.grid as f64 - 1.0) / 2.0;
        for (label, spec) in [
            (Label::Ad, &self.ad),
            (Label::Mci, &self.mci),
            (Label::Nc, &self.nc),
        ] {
            for (name, g) in [
                ("outer radius", spec.outer_radius),
                ("shell thickness", spec.shell_thickness),
                ("cavity radius", spec.cavity_radius),
            ] {
                if g.mean <= 0.0 || g.sd < 0.0 || !g.mean.is_finite() || !g.sd.is_finite() {
                    return Err(Error::InvalidParam(format!(
                        "{label}: {name} must have positive finite mean and sd >= 0"
                    )));
                }
            }
            if spec.outer_radius.mean > half {
                return Err(Error::Geometry(format!(
                    "{label}: mean outer radius {} exceeds half grid {half}",
                    spec.outer_radius.mean
                )));
            }
            if spec.cavity_radius.mean + spec.shell_thickness.mean >= spec.outer_radius.mean {
                return Err(Error::Geometry(format!(
                    "{label}: mean cavity + shell does not fit inside the outer ellipsoid"
                )));
            }
        }
        Ok(())
    }
}

fn draw_rng(seed: u64, label: Label, draw: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = match label {
        Label::Ad => 1,
        Label::Mci => 2,
        Label::Nc => 3,
    };
    key[9..17].copy_from_slice(&draw.to_le_bytes());
    key[17..24].copy_from_slice(b"phantom");
    ChaCha8Rng::from_seed(key)
}

/// Generates one single-channel phantom volume for `(params, label, draw)`.
///
/// The volume holds a filled ellipsoid at intensity 1.0 with an outer shell
/// at 1.5 and a central cavity at 0.2 over a zero background, plus Gaussian
/// voxel noise. The same `(seed, label, draw)` triple always yields the same
/// volume.
pub fn generate_phantom(params: &PhantomParams, label: Label, draw: u64) -> Result<Volume<f32>> {
    params.validate()?;
    let spec = params.class(label);
    let mut rng = draw_rng(params.seed, label, draw);

    // Fixed draw order: radius, thickness, cavity, three axis factors, noise.
    let outer = spec.outer_radius.sample(&mut rng);
    let thickness = spec.shell_thickness.sample(&mut rng);
    let cavity = spec.cavity_radius.sample(&mut rng);
    let factors = [
        rng.random_range(0.90..=1.0),
        rng.random_range(0.90..=1.0),
        rng.random_range(0.90..=1.0),
    ];

    let half = (params.grid as f64 - 1.0) / 2.0;
    if outer <= 0.0 || outer > half {
        return Err(Error::Geometry(format!(
            "{label} draw {draw}: outer radius {outer:.3} outside (0, {half:.3}]"
        )));
    }
    if thickness <= 0.0 || cavity <= 0.0 || cavity + thickness >= outer {
        return Err(Error::Geometry(format!(
            "{label} draw {draw}: shell {thickness:.3} / cavity {cavity:.3} do not fit in radius {outer:.3}"
        )));
    }

    let g = params.grid;
    let shape = Shape4::new(1, g, g, g)?;
    let center = half;
    let shell_inner = 1.0 - thickness / outer;

    let mut data = vec![INTENSITY_BACKGROUND; shape.elements()];
    let mut idx = 0usize;
    for z in 0..g {
        let dz = (z as f64 - center) / (outer * factors[0]);
        let cz = (z as f64 - center) / (cavity * factors[0]);
        for y in 0..g {
            let dy = (y as f64 - center) / (outer * factors[1]);
            let cy = (y as f64 - center) / (cavity * factors[1]);
            for x in 0..g {
                let dx = (x as f64 - center) / (outer * factors[2]);
                let cx = (x as f64 - center) / (cavity * factors[2]);
                let d_outer = (dz * dz + dy * dy + dx * dx).sqrt();
                let d_cavity = (cz * cz + cy * cy + cx * cx).sqrt();
                data[idx] = if d_cavity <= 1.0 {
                    INTENSITY_CAVITY
                } else if d_outer <= 1.0 {
                    if d_outer > shell_inner {
                        INTENSITY_SHELL
                    } else {
                        INTENSITY_INTERIOR
                    }
                } else {
                    INTENSITY_BACKGROUND
                };
                idx += 1;
            }
        }
    }

    if params.noise_sd > 0.0 {
        let noise = Normal::new(0.0, params.noise_sd).unwrap();
        for v in &mut data {
            *v = (f64::from(*v) + noise.sample(&mut rng)) as f32;
        }
    }

    Volume::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_mass_params() -> PhantomParams {
        let mut p = PhantomParams::default();
        for spec in [&mut p.ad, &mut p.mci, &mut p.nc] {
            spec.outer_radius.sd = 0.0;
            spec.shell_thickness.sd = 0.0;
            spec.cavity_radius.sd = 0.0;
        }
        p
    }

    fn cavity_count(v: &Volume<f32>) -> usize {
        v.data()
            .iter()
            .filter(|&&x| x == INTENSITY_CAVITY)
            .count()
    }

    #[test]
    fn same_seed_same_volume() {
        let p = PhantomParams::default();
        let a = generate_phantom(&p, Label::Mci, 7).unwrap();
        let b = generate_phantom(&p, Label::Mci, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_draws_differ() {
        let p = PhantomParams::default();
        let a = generate_phantom(&p, Label::Mci, 0).unwrap();
        let b = generate_phantom(&p, Label::Mci, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn ad_cavity_larger_than_nc() {
        let p = PhantomParams::default();
        let ad = generate_phantom(&p, Label::Ad, 3).unwrap();
        let nc = generate_phantom(&p, Label::Nc, 3).unwrap();
        assert!(cavity_count(&ad) > cavity_count(&nc));
    }

    #[test]
    fn class_means_of_cavity_counts_are_ordered() {
        let mut p = PhantomParams::default();
        p.seed = 42;
        let mut means = [0.0f64; 3];
        for (slot, label) in [Label::Ad, Label::Mci, Label::Nc].into_iter().enumerate() {
            let mut total = 0usize;
            for draw in 0..50 {
                total += cavity_count(&generate_phantom(&p, label, draw).unwrap());
            }
            means[slot] = total as f64 / 50.0;
        }
        assert!(
            means[0] > means[1] && means[1] > means[2],
            "cavity count means not ordered: {means:?}"
        );
    }

    #[test]
    fn point_mass_radii_are_ordered_for_every_draw() {
        let p = point_mass_params();
        for draw in 0..20 {
            let ad = cavity_count(&generate_phantom(&p, Label::Ad, draw).unwrap());
            let mci = cavity_count(&generate_phantom(&p, Label::Mci, draw).unwrap());
            let nc = cavity_count(&generate_phantom(&p, Label::Nc, draw).unwrap());
            assert!(ad > mci && mci > nc, "draw {draw}: {ad} {mci} {nc}");
        }
    }

    #[test]
    fn oversized_geometry_errors() {
        let mut p = point_mass_params();
        p.ad.outer_radius = Gaussian::point(40.0);
        assert!(matches!(
            generate_phantom(&p, Label::Ad, 0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn bad_ordering_is_rejected() {
        let mut p = PhantomParams::default();
        p.nc.cavity_radius = Gaussian::point(9.0);
        assert!(generate_phantom(&p, Label::Nc, 0).is_err());
    }

    #[test]
    fn noise_keeps_determinism() {
        let mut p = PhantomParams::default();
        p.noise_sd = 0.2;
        let a = generate_phantom(&p, Label::Nc, 11).unwrap();
        let b = generate_phantom(&p, Label::Nc, 11).unwrap();
        assert_eq!(a, b);
    }
}
