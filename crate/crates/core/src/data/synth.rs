//! Synthetic SAR-like ship chips.
//!
//! Each chip holds one ship rendered as an oriented rectangle with a tapered
//! bow, at 10 m per pixel. Hull reflectivity follows a class-specific
//! along-track profile with optional periodic stripes, is multiplied by
//! single-look exponential speckle and sits on exponential sea clutter.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry, Split};
use super::pgm;
use crate::error::{Error, Result};
use crate::rng;

pub const CHIP_SIZE: usize = 64;
pub const METERS_PER_PIXEL: f64 = 10.0;

/// Mean hull reflectivity before profile and texture.
const HULL_LEVEL: f64 = 0.45;
/// Mean sea clutter intensity.
const CLUTTER_LEVEL: f64 = 0.05;
/// Maximum centre offset from the chip centre, in pixels.
const CENTER_JITTER: f64 = 2.0;
/// Hull lengths the chip geometry supports, in pixels.
const MIN_LENGTH_PX: f64 = 9.0;
const MAX_LENGTH_PX: f64 = 40.0;
/// Narrowest strip the bow tapers to; wide enough that every unit of hull
/// length holds at least one pixel centre at any heading.
const MIN_HALF_WIDTH_PX: f64 = 0.75;
/// Fraction of the hull length taken by the bow taper.
const BOW_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrightnessProfile {
    Uniform,
    BowBright,
    SternBright,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassSpec {
    pub name: String,
    /// Hull length in meters, `[min, max]`.
    pub length_range: [f64; 2],
    /// Hull width in meters, `[min, max]`.
    pub width_range: [f64; 2],
    pub brightness_profile: BrightnessProfile,
    /// Period in pixels of along-hull reflectivity stripes; 0 disables them.
    pub texture_scale: f64,
}

impl SyntheticClassSpec {
    fn new(name: &str, length: [f64; 2], width: [f64; 2], profile: BrightnessProfile, texture: f64) -> Self {
        SyntheticClassSpec {
            name: name.to_string(),
            length_range: length,
            width_range: width,
            brightness_profile: profile,
            texture_scale: texture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("class {}: {msg}", self.name)));
        for (what, [lo, hi]) in [("length", self.length_range), ("width", self.width_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
                return fail(format!("{what} range [{lo}, {hi}] must be positive with min < max"));
            }
        }
        let [l0, l1] = self.length_range;
        if l0 < MIN_LENGTH_PX * METERS_PER_PIXEL || l1 > MAX_LENGTH_PX * METERS_PER_PIXEL {
            return fail(format!(
                "lengths must lie in [{}, {}] m",
                MIN_LENGTH_PX * METERS_PER_PIXEL,
                MAX_LENGTH_PX * METERS_PER_PIXEL
            ));
        }
        let min_width = 2.0 * MIN_HALF_WIDTH_PX * METERS_PER_PIXEL;
        if self.width_range[0] < min_width {
            return fail(format!("widths below {min_width} m do not rasterize reliably"));
        }
        if self.width_range[1] > self.length_range[0] {
            return fail("widths must not exceed lengths".into());
        }
        if !(self.texture_scale.is_finite() && self.texture_scale >= 0.0) {
            return fail(format!("texture_scale {} must be >= 0", self.texture_scale));
        }
        Ok(())
    }
}

pub fn validate_specs(specs: &[SyntheticClassSpec]) -> Result<()> {
    if specs.len() < 2 {
        return Err(Error::Config("at least two ship classes are needed".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::Config(format!("duplicate class name {}", s.name)));
        }
    }
    Ok(())
}

/// The three classes of the 3-class tables, with overlapping size ranges so
/// that size alone cannot separate them.
pub fn overlapping_three_class() -> Vec<SyntheticClassSpec> {
    use BrightnessProfile::*;
    vec![
        SyntheticClassSpec::new("Bulk Carrier", [150.0, 275.0], [23.0, 38.0], Uniform, 4.0),
        SyntheticClassSpec::new("Container Ship", [170.0, 300.0], [26.0, 40.0], SternBright, 0.0),
        SyntheticClassSpec::new("Tanker", [110.0, 230.0], [16.0, 34.0], BowBright, 0.0),
    ]
}

/// Three classes with disjoint size ranges.
pub fn separable_three_class() -> Vec<SyntheticClassSpec> {
    use BrightnessProfile::*;
    vec![
        SyntheticClassSpec::new("Fishing", [90.0, 120.0], [15.0, 20.0], Uniform, 0.0),
        SyntheticClassSpec::new("General Cargo", [210.0, 250.0], [28.0, 36.0], Uniform, 0.0),
        SyntheticClassSpec::new("Tanker", [320.0, 400.0], [46.0, 60.0], Uniform, 0.0),
    ]
}

/// Six classes mirroring the 6-class tables; bulk carriers and general cargo
/// ships use the published size ranges.
pub fn six_class() -> Vec<SyntheticClassSpec> {
    use BrightnessProfile::*;
    vec![
        SyntheticClassSpec::new("Bulk Carrier", [150.0, 275.0], [23.0, 38.0], Uniform, 4.0),
        SyntheticClassSpec::new("Container Ship", [140.0, 290.0], [20.0, 40.0], SternBright, 2.5),
        SyntheticClassSpec::new("Tanker", [120.0, 260.0], [18.0, 44.0], BowBright, 0.0),
        SyntheticClassSpec::new("Cargo", [100.0, 230.0], [16.0, 35.0], SternBright, 0.0),
        SyntheticClassSpec::new("Fishing", [90.0, 130.0], [15.0, 20.0], Uniform, 0.0),
        SyntheticClassSpec::new("General Cargo", [90.0, 200.0], [15.0, 33.0], Uniform, 3.0),
    ]
}

/// Named class-spec presets: `overlap3`, `separable3` and `six`.
pub fn preset(name: &str) -> Option<Vec<SyntheticClassSpec>> {
    match name {
        "overlap3" => Some(overlapping_three_class()),
        "separable3" => Some(separable_three_class()),
        "six" => Some(six_class()),
        _ => None,
    }
}

pub const PRESETS: [&str; 3] = ["overlap3", "separable3", "six"];

/// Placement of one rendered ship.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShipGeometry {
    pub length_m: f64,
    pub width_m: f64,
    /// Bow direction, radians from the +x axis.
    pub heading: f64,
    /// Centre in pixel coordinates.
    pub center: (f64, f64),
}

impl ShipGeometry {
    pub fn sample(spec: &SyntheticClassSpec, rng: &mut ChaCha8Rng) -> Self {
        let [l0, l1] = spec.length_range;
        let [w0, w1] = spec.width_range;
        let mid = CHIP_SIZE as f64 / 2.0;
        ShipGeometry {
            length_m: rng.random_range(l0..=l1),
            width_m: rng.random_range(w0..=w1),
            heading: rng.random_range(0.0..2.0 * PI),
            center: (
                mid + rng.random_range(-CENTER_JITTER..=CENTER_JITTER),
                mid + rng.random_range(-CENTER_JITTER..=CENTER_JITTER),
            ),
        }
    }

    /// Along-track and cross-track coordinates of a pixel centre, in pixels.
    fn local(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = x as f64 + 0.5 - self.center.0;
        let dy = y as f64 + 0.5 - self.center.1;
        let (s, c) = self.heading.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }

    fn half_width_at(&self, u: f64) -> f64 {
        let length = self.length_m / METERS_PER_PIXEL;
        let half = self.width_m / METERS_PER_PIXEL / 2.0;
        let taper = BOW_FRACTION * length;
        let to_tip = length / 2.0 - u;
        if to_tip >= taper {
            half
        } else {
            (half * to_tip / taper).max(MIN_HALF_WIDTH_PX)
        }
    }

    /// Row-major hull mask.
    pub fn mask(&self) -> Vec<bool> {
        let half_length = self.length_m / METERS_PER_PIXEL / 2.0;
        (0..CHIP_SIZE * CHIP_SIZE)
            .map(|i| {
                let (u, v) = self.local(i % CHIP_SIZE, i / CHIP_SIZE);
                u.abs() <= half_length && v.abs() <= self.half_width_at(u)
            })
            .collect()
    }

    /// Extent of the mask along and across the hull, in pixels, measured
    /// from pixel centres plus one pixel.
    pub fn measured_extent(&self, mask: &[bool]) -> (f64, f64) {
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (u, v) = self.local(i % CHIP_SIZE, i / CHIP_SIZE);
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        (umax - umin + 1.0, vmax - vmin + 1.0)
    }
}

fn profile_gain(profile: BrightnessProfile, along: f64) -> f64 {
    // `along` runs from 0 at the stern to 1 at the bow.
    match profile {
        BrightnessProfile::Uniform => 1.0,
        BrightnessProfile::BowBright => 0.3 + 1.4 * along,
        BrightnessProfile::SternBright => 1.7 - 1.4 * along,
    }
}

/// Renders one chip as 8-bit intensities.
pub fn render(spec: &SyntheticClassSpec, geom: &ShipGeometry, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let length = geom.length_m / METERS_PER_PIXEL;
    let mask = geom.mask();
    mask.iter()
        .enumerate()
        .map(|(i, &on)| {
            let clutter: f64 = Exp1.sample(rng);
            let speckle: f64 = Exp1.sample(rng);
            let mut value = CLUTTER_LEVEL * clutter;
            if on {
                let (u, _) = geom.local(i % CHIP_SIZE, i / CHIP_SIZE);
                let along = (u / length + 0.5).clamp(0.0, 1.0);
                let mut sigma = HULL_LEVEL * profile_gain(spec.brightness_profile, along);
                if spec.texture_scale > 0.0 {
                    sigma *= 1.0 + 0.6 * (2.0 * PI * u / spec.texture_scale).cos();
                }
                value += sigma * speckle;
            }
            (value.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Writes `images/{split}/{class}_{index}.pgm` under `out_dir` together with
/// `manifest.csv` and a `classes.json` echo of the specs.
pub fn generate_synthetic(
    specs: &[SyntheticClassSpec],
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    validate_specs(specs)?;
    let mut entries = Vec::new();
    for (split, count) in [(Split::Train, train_per_class), (Split::Test, test_per_class)] {
        let dir = out_dir.join("images").join(split.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (label, spec) in specs.iter().enumerate() {
            for i in 0..count {
                let index = (label as u64) << 32 | (split as u64) << 31 | i as u64;
                let mut rng = rng::stream(seed, rng::SYNTH, index);
                let geom = ShipGeometry::sample(spec, &mut rng);
                let pixels = render(spec, &geom, &mut rng);
                let rel = PathBuf::from("images")
                    .join(split.as_str())
                    .join(format!("{}_{i:04}.pgm", slug(&spec.name)));
                pgm::write(&out_dir.join(&rel), &pixels, CHIP_SIZE, CHIP_SIZE)?;
                entries.push(ManifestEntry { path: rel, label, split });
            }
        }
    }
    let manifest = Manifest::new(
        out_dir.to_path_buf(),
        specs.iter().map(|s| s.name.clone()).collect(),
        entries,
    )?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    let echo = serde_json::to_string_pretty(specs).expect("specs serialize");
    let path = out_dir.join("classes.json");
    std::fs::write(&path, echo + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a JSON array of class specs.
pub fn load_specs(path: &Path) -> Result<Vec<SyntheticClassSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let specs: Vec<SyntheticClassSpec> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    validate_specs(&specs)?;
    Ok(specs)
}
