//! Seeded generator of fingerprint-like training data.
//!
//! Ridges are a planar wave whose phase is bent by a low-order harmonic warp
//! and carries a ±1 spiral singularity at each minutia, which is what makes a
//! ridge end or fork there. The warp amplitude is capped so the local ridge
//! spacing stays within half to one and a half times the nominal period.
//! Impressions apply a rigid motion, noise and a brightness offset, and carry
//! the correspondingly moved minutiae as ground truth.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{format_err, validation, Result};
use crate::minutiae_map::{Minutia, MinutiaeTemplate};
use crate::spatial_transform::GrayImage;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub min_minutiae: usize,
    pub max_minutiae: usize,
    pub min_frequency: f64,
    pub max_frequency: f64,
    /// Impression perturbation bounds.
    pub max_rotation: f64,
    pub max_translation: f64,
    pub max_noise: f64,
    pub max_brightness: f64,
    /// Per-impression global ridge phase shift bound, radians.
    pub max_phase_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            min_minutiae: 15,
            max_minutiae: 40,
            min_frequency: 0.08,
            max_frequency: 0.12,
            max_rotation: 20f64.to_radians(),
            max_translation: 10.0,
            max_noise: 0.05,
            max_brightness: 0.1,
            max_phase_jitter: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn with_size(size: usize) -> Self {
        SynthConfig {
            size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(validation("synthetic image size must be at least 2"));
        }
        if self.min_minutiae == 0 || self.min_minutiae > self.max_minutiae {
            return Err(validation("need 1 <= min_minutiae <= max_minutiae"));
        }
        if !(self.min_frequency > 0.0 && self.min_frequency <= self.max_frequency) {
            return Err(validation("need 0 < min_frequency <= max_frequency"));
        }
        Ok(())
    }
}

/// One cosine term of the ridge phase warp.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
struct Harmonic {
    amplitude: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticIdentity {
    pub id: String,
    pub seed: u64,
    pub master_minutiae: MinutiaeTemplate,
    /// Ridge orientation per pixel centre, `size × size`, in `[0, π)`.
    pub orientation_field: Vec<f32>,
    /// Cycles per pixel.
    pub ridge_frequency: f64,
    size: usize,
    base_orientation: f64,
    harmonics: Vec<Harmonic>,
    /// Spiral winding (+1 or −1) per master minutia.
    polarity: Vec<f64>,
    ridge_phase: f64,
}

impl SyntheticIdentity {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Gradient of the smooth ridge phase (planar wave plus warp).
    fn phase_gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.size as f64;
        let (u, v) = (x / s, y / s);
        let k = TAU * self.ridge_frequency;
        let normal = self.base_orientation + FRAC_PI_2;
        let (mut gx, mut gy) = (k * normal.cos(), k * normal.sin());
        for h in &self.harmonics {
            let d = -h.amplitude * (TAU * (h.kx * u + h.ky * v) + h.phase).sin() * TAU / s;
            gx += d * h.kx;
            gy += d * h.ky;
        }
        (gx, gy)
    }

    /// Ridge orientation (along the ridges) at continuous pixel coordinates,
    /// unreduced.
    fn orientation_at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = self.phase_gradient(x, y);
        gy.atan2(gx) - FRAC_PI_2
    }

    /// Ridge intensity in `[0, 1]` at continuous master coordinates.
    fn ridge_value(&self, x: f64, y: f64, phase_shift: f64) -> f64 {
        let s = self.size as f64;
        let c = s / 2.0;
        let normal = self.base_orientation + FRAC_PI_2;
        let (u, v) = (x / s, y / s);
        let mut phase = TAU * self.ridge_frequency * ((x - c) * normal.cos() + (y - c) * normal.sin())
            + self.ridge_phase
            + phase_shift;
        for h in &self.harmonics {
            phase += h.amplitude * (TAU * (h.kx * u + h.ky * v) + h.phase).cos();
        }
        for (m, p) in self.master_minutiae.minutiae().iter().zip(&self.polarity) {
            phase += p * (y - m.y).atan2(x - m.x);
        }
        0.5 * (1.0 + phase.cos())
    }

    /// Noise-free rendering in master coordinates.
    pub fn render_master(&self) -> GrayImage {
        render_with(self, &Perturbation::none(), 0).image
    }
}

fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Draws an identity from `seed`.
pub fn gen_identity(seed: u64, config: &SynthConfig) -> Result<SyntheticIdentity> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.size;
    let s = size as f64;
    let base_orientation = rng.random_range(0.0..PI);
    // Σ amplitude·|k| ≤ f_min·size/2 keeps the warp gradient under half the
    // carrier's.
    const TERMS: usize = 3;
    let max_amp = 0.5 * config.min_frequency * s / (TERMS as f64 * 2f64.sqrt());
    let harmonics = (0..TERMS)
        .map(|_| Harmonic {
            amplitude: rng.random_range(0.0..max_amp),
            kx: rng.random_range(-1.0..1.0),
            ky: rng.random_range(-1.0..1.0),
            phase: rng.random_range(0.0..TAU),
        })
        .collect();
    let ridge_frequency = rng.random_range(config.min_frequency..=config.max_frequency);
    let ridge_phase = rng.random_range(0.0..TAU);
    let mut identity = SyntheticIdentity {
        id: format!("synth-{seed:016x}"),
        seed,
        master_minutiae: MinutiaeTemplate::empty(size as u32, size as u32)?,
        orientation_field: Vec::new(),
        ridge_frequency,
        size,
        base_orientation,
        harmonics,
        polarity: Vec::new(),
        ridge_phase,
    };

    let n = rng.random_range(config.min_minutiae..=config.max_minutiae);
    let mut minutiae = Vec::with_capacity(n);
    let mut polarity = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(0.0..s);
        let y = rng.random_range(0.0..s);
        // The spiral adds one ridge on the side the minutia points to.
        let p = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let flip = if p < 0.0 { PI } else { 0.0 };
        minutiae.push(Minutia::new(x, y, identity.orientation_at(x, y) + flip)?);
        polarity.push(p);
    }
    identity.master_minutiae = MinutiaeTemplate::new(minutiae, size as u32, size as u32)?;
    identity.polarity = polarity;
    identity.orientation_field = (0..size * size)
        .map(|k| {
            let (y, x) = ((k / size) as f64 + 0.5, (k % size) as f64 + 0.5);
            identity.orientation_at(x, y).rem_euclid(PI) as f32
        })
        .map(|v| if v >= PI as f32 { 0.0 } else { v })
        .collect();
    Ok(identity)
}

/// Rigid motion and photometric changes applied to one impression.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Perturbation {
    /// Rotation about the image centre, radians.
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub brightness: f64,
    pub phase_shift: f64,
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation {
            rotation: 0.0,
            tx: 0.0,
            ty: 0.0,
            noise_sigma: 0.0,
            noise_seed: 0,
            brightness: 0.0,
            phase_shift: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, config: &SynthConfig) -> Self {
        let sym = |rng: &mut R, bound: f64| {
            if bound > 0.0 {
                rng.random_range(-bound..=bound)
            } else {
                0.0
            }
        };
        Perturbation {
            rotation: sym(rng, config.max_rotation),
            tx: sym(rng, config.max_translation),
            ty: sym(rng, config.max_translation),
            noise_sigma: if config.max_noise > 0.0 {
                rng.random_range(0.0..=config.max_noise)
            } else {
                0.0
            },
            noise_seed: rng.random(),
            brightness: sym(rng, config.max_brightness),
            phase_shift: sym(rng, config.max_phase_jitter),
        }
    }

    /// Master → impression coordinates.
    pub fn forward(&self, x: f64, y: f64, centre: f64) -> (f64, f64) {
        if self.rotation == 0.0 {
            return (x + self.tx, y + self.ty);
        }
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - centre, y - centre);
        (c * dx - s * dy + centre + self.tx, s * dx + c * dy + centre + self.ty)
    }

    /// Impression → master coordinates.
    pub fn inverse(&self, x: f64, y: f64, centre: f64) -> (f64, f64) {
        if self.rotation == 0.0 {
            return (x - self.tx, y - self.ty);
        }
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - centre - self.tx, y - centre - self.ty);
        (c * dx + s * dy + centre, -s * dx + c * dy + centre)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Impression {
    pub image: GrayImage,
    pub minutiae: MinutiaeTemplate,
    pub label: usize,
    pub params: Perturbation,
}

/// Renders one impression with perturbations drawn from `seed`.
pub fn render_impression(identity: &SyntheticIdentity, seed: u64, config: &SynthConfig) -> Result<Impression> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Perturbation::sample(&mut rng, config);
    Ok(render_with(identity, &p, 0))
}

/// Renders an impression under an explicit perturbation.
pub fn render_with(identity: &SyntheticIdentity, p: &Perturbation, label: usize) -> Impression {
    let size = identity.size;
    let centre = size as f64 / 2.0;
    let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).expect("sigma is non-negative");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
    let mut pixels = vec![0.0f32; size * size];
    for (k, px) in pixels.iter_mut().enumerate() {
        let (x, y) = ((k % size) as f64 + 0.5, (k / size) as f64 + 0.5);
        let (mx, my) = p.inverse(x, y, centre);
        let mut v = identity.ridge_value(mx, my, p.phase_shift) + p.brightness;
        if p.noise_sigma > 0.0 {
            v += noise.sample(&mut noise_rng);
        }
        *px = v.clamp(0.0, 1.0) as f32;
    }
    let minutiae = identity
        .master_minutiae
        .minutiae()
        .iter()
        .filter_map(|m| {
            let (x, y) = p.forward(m.x, m.y, centre);
            let inside = (0.0..size as f64).contains(&x) && (0.0..size as f64).contains(&y);
            inside.then(|| Minutia::new(x, y, m.theta + p.rotation).expect("finite"))
        })
        .collect();
    Impression {
        image: GrayImage::new(size, size, pixels).expect("rendered image is valid"),
        minutiae: MinutiaeTemplate::new(minutiae, size as u32, size as u32).expect("in-frame minutiae"),
        label,
        params: *p,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImpressionRecord {
    pub class: usize,
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub image: String,
    pub minutiae: String,
    pub perturbation: Perturbation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub num_classes: usize,
    pub impressions_per_class: usize,
    pub config: SynthConfig,
    pub identity_seeds: Vec<u64>,
    pub impressions: Vec<ImpressionRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Impression>,
    pub eval: Vec<Impression>,
    pub manifest: Manifest,
}

/// `num_classes` identities with `impressions_per_class` impressions each;
/// the last impression of every class is held out for evaluation.
pub fn make_dataset(
    num_classes: usize,
    impressions_per_class: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<Dataset> {
    if num_classes < 2 || impressions_per_class < 2 {
        return Err(validation("need at least 2 classes and 2 impressions per class"));
    }
    config.validate()?;
    let mut train = Vec::with_capacity(num_classes * (impressions_per_class - 1));
    let mut eval = Vec::with_capacity(num_classes);
    let mut records = Vec::with_capacity(num_classes * impressions_per_class);
    let mut identity_seeds = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let id_seed = derive_seed(seed, &[class as u64]);
        identity_seeds.push(id_seed);
        let identity = gen_identity(id_seed, config)?;
        for index in 0..impressions_per_class {
            let imp_seed = derive_seed(seed, &[class as u64, index as u64 + 1]);
            let mut imp = render_impression(&identity, imp_seed, config)?;
            imp.label = class;
            let split = if index + 1 == impressions_per_class {
                Split::Eval
            } else {
                Split::Train
            };
            records.push(ImpressionRecord {
                class,
                index,
                seed: imp_seed,
                split,
                image: format!("class_{class}/imp_{index}.pgm"),
                minutiae: format!("class_{class}/imp_{index}.mnt"),
                perturbation: imp.params,
            });
            match split {
                Split::Train => train.push(imp),
                Split::Eval => eval.push(imp),
            }
        }
    }
    Ok(Dataset {
        train,
        eval,
        manifest: Manifest {
            seed,
            num_classes,
            impressions_per_class,
            config: config.clone(),
            identity_seeds,
            impressions: records,
        },
    })
}

impl Dataset {
    /// Writes `class_<k>/imp_<j>.pgm`, sibling `.mnt` files and `manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut train_iter = self.train.iter();
        let mut eval_iter = self.eval.iter();
        for rec in &self.manifest.impressions {
            let imp = match rec.split {
                Split::Train => train_iter.next(),
                Split::Eval => eval_iter.next(),
            }
            .ok_or_else(|| validation("manifest does not match dataset contents"))?;
            let img_path = dir.join(&rec.image);
            std::fs::create_dir_all(img_path.parent().expect("has parent"))?;
            imp.image.save(&img_path)?;
            let mut mnt = Vec::new();
            imp.minutiae.write_mnt(&mut mnt)?;
            crate::io::write_atomic(dir.join(&rec.minutiae), &mnt)?;
        }
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| format_err(e.to_string()))?;
        crate::io::write_atomic(dir.join("manifest.json"), &json)
    }

    /// Loads a dataset directory written by [`Dataset::write`]. Images come
    /// back quantized to 8 bits.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)
            .map_err(|e| format_err(format!("bad manifest: {e}")))?;
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for rec in &manifest.impressions {
            let image = GrayImage::load(resolve(dir, &rec.image))?;
            let file = std::fs::File::open(resolve(dir, &rec.minutiae))?;
            let minutiae = MinutiaeTemplate::read_mnt(std::io::BufReader::new(file))?;
            let imp = Impression {
                image,
                minutiae,
                label: rec.class,
                params: rec.perturbation,
            };
            match rec.split {
                Split::Train => train.push(imp),
                Split::Eval => eval.push(imp),
            }
        }
        Ok(Dataset { train, eval, manifest })
    }
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}
