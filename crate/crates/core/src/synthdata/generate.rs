use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::split::assign_strata;
use super::{
    Cohort, DataError, Density, ImageRecord, LesionBox, LesionType, Pathology, PatientRecord,
    PriorityClass, Rect, StratumLabel,
};
use crate::rng;

/// Parameters of the synthetic cohort generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub images_per_patient: usize,
    /// Probability of each density category A..D.
    pub density_marginal: [f64; 4],
    /// Probability that a patient carries at least one lesion.
    pub lesion_prevalence: f64,
    /// Among lesion patients, probability that the primary finding is malignant.
    pub malignant_fraction: f64,
    /// Among benign primary findings, probability of an "other" lesion
    /// (architectural distortion and similar).
    pub other_fraction: f64,
    /// Probability that a lesion patient has a second, benign finding.
    pub second_lesion_fraction: f64,
    /// Lesion amplitude multiplier per density; must decrease from A to D.
    pub contrast_by_density: [f64; 4],
    pub noise_sigma: f64,
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 1000,
            images_per_patient: 2,
            density_marginal: [0.10, 0.40, 0.40, 0.10],
            lesion_prevalence: 0.4,
            malignant_fraction: 0.4,
            other_fraction: 0.12,
            second_lesion_fraction: 0.15,
            contrast_by_density: [1.0, 0.8, 0.55, 0.35],
            noise_sigma: 0.04,
            image_size: 64,
            patch_size: 16,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        let sum: f64 = self.density_marginal.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("density_marginal sums to {sum}, expected 1"));
        }
        if self.density_marginal.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return bad("density_marginal entries must lie in [0, 1]".into());
        }
        if !self.contrast_by_density.windows(2).all(|w| w[0] > w[1]) {
            return bad(format!(
                "contrast_by_density {:?} must be strictly decreasing from A to D",
                self.contrast_by_density
            ));
        }
        if self.contrast_by_density.iter().any(|&c| c <= 0.0) {
            return bad("contrast_by_density entries must be positive".into());
        }
        for (name, p) in [
            ("lesion_prevalence", self.lesion_prevalence),
            ("malignant_fraction", self.malignant_fraction),
            ("other_fraction", self.other_fraction),
            ("second_lesion_fraction", self.second_lesion_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        if self.n_patients == 0 || self.images_per_patient == 0 {
            return bad("n_patients and images_per_patient must be positive".into());
        }
        if self.patch_size == 0 || self.patch_size > self.image_size {
            return bad(format!(
                "patch_size {} must be in 1..={}",
                self.patch_size, self.image_size
            ));
        }
        if self.image_size < 24 {
            return bad("image_size must be at least 24 pixels".into());
        }
        Ok(())
    }
}

/// One finding of a patient, rendered in every image of that patient.
#[derive(Clone, Copy, Debug)]
struct Finding {
    lesion_type: LesionType,
    pathology: Pathology,
}

const BACKGROUND_LEVEL: [f64; 4] = [0.12, 0.22, 0.32, 0.42];
const TISSUE_BLOBS: [usize; 4] = [2, 4, 7, 10];

/// Generates a cohort; a pure function of `(cfg, seed)`.
pub fn generate_cohort(cfg: &GeneratorConfig, seed: u64) -> Result<Cohort, DataError> {
    cfg.validate()?;
    let mut patients: Vec<PatientRecord> = (0..cfg.n_patients as u64)
        .into_par_iter()
        .map(|pid| generate_patient(cfg, seed, pid))
        .collect();
    assign_strata(&mut patients);
    Ok(Cohort::new(patients))
}

fn draw_density(r: &mut ChaCha8Rng, marginal: &[f64; 4]) -> Density {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for d in Density::ALL {
        acc += marginal[d.index()];
        if u < acc {
            return d;
        }
    }
    // rounding slack lands on the last category with positive mass
    Density::ALL
        .into_iter()
        .rev()
        .find(|d| marginal[d.index()] > 0.0)
        .unwrap_or(Density::D)
}

fn draw_findings(r: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Vec<Finding> {
    if r.random::<f64>() >= cfg.lesion_prevalence {
        return Vec::new();
    }
    let mass_or_calc = |r: &mut ChaCha8Rng| {
        if r.random::<f64>() < 0.6 {
            LesionType::Mass
        } else {
            LesionType::Calcification
        }
    };
    let primary = if r.random::<f64>() < cfg.malignant_fraction {
        Finding {
            lesion_type: mass_or_calc(r),
            pathology: Pathology::Malignant,
        }
    } else if r.random::<f64>() < cfg.other_fraction {
        Finding {
            lesion_type: LesionType::Other,
            pathology: Pathology::Benign,
        }
    } else {
        Finding {
            lesion_type: mass_or_calc(r),
            pathology: Pathology::Benign,
        }
    };
    let mut findings = vec![primary];
    if r.random::<f64>() < cfg.second_lesion_fraction {
        findings.push(Finding {
            lesion_type: mass_or_calc(r),
            pathology: Pathology::Benign,
        });
    }
    findings
}

fn generate_patient(cfg: &GeneratorConfig, seed: u64, pid: u64) -> PatientRecord {
    let mut r = rng::stream(&[seed, pid]);
    let density = draw_density(&mut r, &cfg.density_marginal);
    let findings = draw_findings(&mut r, cfg);
    let images = (0..cfg.images_per_patient as u64)
        .map(|view| {
            let image_id = pid * cfg.images_per_patient as u64 + view;
            render_image(cfg, density, &findings, image_id, &mut r)
        })
        .collect();
    PatientRecord {
        patient_id: pid,
        density,
        images,
        // overwritten by assign_strata once the whole cohort exists
        stratum: StratumLabel {
            priority_class: PriorityClass::Normal,
            lesion_type: None,
            density,
        },
    }
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn add(&mut self, x: i64, y: i64, v: f64) {
        let n = self.size as i64;
        if (0..n).contains(&x) && (0..n).contains(&y) {
            self.px[(y * n + x) as usize] += v;
        }
    }

    fn add_gaussian(&mut self, cx: f64, cy: f64, sigma: f64, amp: f64) {
        let reach = (3.0 * sigma).ceil() as i64;
        let (ix, iy) = (cx.round() as i64, cy.round() as i64);
        for y in iy - reach..=iy + reach {
            for x in ix - reach..=ix + reach {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                self.add(x, y, amp * (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }

    fn add_line(&mut self, cx: f64, cy: f64, angle: f64, from: f64, to: f64, amp: f64) {
        let steps = ((to - from) * 2.0).ceil().max(1.0) as usize;
        let mut last = None;
        for s in 0..=steps {
            let t = from + (to - from) * s as f64 / steps as f64;
            let p = (
                (cx + t * angle.cos()).round() as i64,
                (cy + t * angle.sin()).round() as i64,
            );
            if last != Some(p) {
                self.add(p.0, p.1, amp);
                last = Some(p);
            }
        }
    }
}

fn render_image(
    cfg: &GeneratorConfig,
    density: Density,
    findings: &[Finding],
    image_id: u64,
    r: &mut ChaCha8Rng,
) -> ImageRecord {
    let n = cfg.image_size;
    let di = density.index();
    let mut canvas = Canvas {
        size: n,
        px: vec![BACKGROUND_LEVEL[di]; n * n],
    };
    for _ in 0..TISSUE_BLOBS[di] {
        let cx = r.random_range(0.0..n as f64);
        let cy = r.random_range(0.0..n as f64);
        let sigma = r.random_range(2.5..6.0);
        let amp = r.random_range(0.04..0.12);
        canvas.add_gaussian(cx, cy, sigma, amp);
    }

    let contrast = cfg.contrast_by_density[di];
    let mut lesions = Vec::with_capacity(findings.len());
    for f in findings {
        lesions.push(render_lesion(&mut canvas, *f, contrast, r));
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in canvas.px.iter_mut() {
            *v += noise.sample(r);
        }
    }
    let pixels = canvas
        .px
        .iter()
        .map(|&v| v.clamp(0.0, 1.0) as f32)
        .collect();
    let label = lesions.iter().any(|l| l.pathology == Pathology::Malignant);
    ImageRecord {
        image_id,
        height: n,
        width: n,
        pixels,
        lesions,
        label,
    }
}

/// Draws one lesion at a random location; returns its bounding box, which
/// always lies inside the canvas.
fn render_lesion(canvas: &mut Canvas, f: Finding, contrast: f64, r: &mut ChaCha8Rng) -> LesionBox {
    let n = canvas.size;
    let malignant = f.pathology == Pathology::Malignant;
    // half-extent of the bounding box around the center pixel
    let (half, radius) = match f.lesion_type {
        LesionType::Mass => {
            let radius = r.random_range(3.0..5.0f64);
            let spike = if malignant { 4.0 } else { 0.0 };
            ((radius + 1.0 + spike).ceil() as usize, radius)
        }
        LesionType::Calcification => (r.random_range(3..5usize), 0.0),
        LesionType::Other => (5, 0.0),
    };
    let cx = r.random_range(half..n - half);
    let cy = r.random_range(half..n - half);
    let (fx, fy) = (cx as f64, cy as f64);

    match f.lesion_type {
        LesionType::Mass => {
            let amp = contrast * if malignant { 0.6 } else { 0.35 };
            let reach = radius.ceil() as i64 + 1;
            for y in cy as i64 - reach..=cy as i64 + reach {
                for x in cx as i64 - reach..=cx as i64 + reach {
                    let d = ((x as f64 - fx).powi(2) + (y as f64 - fy).powi(2)).sqrt();
                    let edge = ((radius + 1.0 - d) / 1.5).clamp(0.0, 1.0);
                    canvas.add(x, y, amp * edge);
                }
            }
            if malignant {
                let spikes = r.random_range(4..7);
                for _ in 0..spikes {
                    let angle = r.random_range(0.0..std::f64::consts::TAU);
                    canvas.add_line(fx, fy, angle, radius, radius + 4.0, 0.7 * amp);
                }
            }
        }
        LesionType::Calcification => {
            let (dots, amp) = if malignant {
                (r.random_range(7..11), 0.75 * contrast)
            } else {
                (r.random_range(3..5), 0.45 * contrast)
            };
            let h = half as i64;
            for _ in 0..dots {
                let dx = r.random_range(-h..=h);
                let dy = r.random_range(-h..=h);
                canvas.add(cx as i64 + dx, cy as i64 + dy, amp);
            }
        }
        LesionType::Other => {
            let amp = 0.25 * contrast;
            let base = r.random_range(0.0..std::f64::consts::PI);
            for k in 0..3 {
                let angle = base + k as f64 * std::f64::consts::PI / 3.0;
                canvas.add_line(fx, fy, angle, -(half as f64), half as f64, amp);
            }
        }
    }

    LesionBox {
        rect: Rect::new(cx - half, cy - half, 2 * half + 1, 2 * half + 1),
        lesion_type: f.lesion_type,
        pathology: f.pathology,
    }
}

/// Absolute difference between the mean intensity inside lesion boxes and
/// the mean intensity elsewhere. `None` for lesion-free images.
pub fn lesion_contrast(image: &ImageRecord) -> Option<f64> {
    if image.lesions.is_empty() {
        return None;
    }
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..image.height {
        for x in 0..image.width {
            let v = image.pixels[y * image.width + x] as f64;
            if image.lesions.iter().any(|l| l.rect.contains_point(x, y)) {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
    }
    if n_in == 0 || n_out == 0 {
        return None;
    }
    Some((inside / n_in as f64 - outside / n_out as f64).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_patients: n,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn density_counts_follow_marginal() {
        let cfg = GeneratorConfig {
            n_patients: 1000,
            images_per_patient: 1,
            ..GeneratorConfig::default()
        };
        let cohort = generate_cohort(&cfg, 7).unwrap();
        let counts = cohort.density_counts();
        for (d, &p) in cfg.density_marginal.iter().enumerate() {
            let expected = 1000.0 * p;
            let sd = (1000.0 * p * (1.0 - p)).sqrt();
            assert!(
                (counts[d] as f64 - expected).abs() <= 3.0 * sd,
                "density {d}: {} vs {expected}",
                counts[d]
            );
        }
    }

    #[test]
    fn zero_prevalence_gives_only_normal_patients() {
        let cfg = GeneratorConfig {
            lesion_prevalence: 0.0,
            ..small(50)
        };
        let cohort = generate_cohort(&cfg, 3).unwrap();
        for p in &cohort.patients {
            assert_eq!(p.stratum.priority_class, PriorityClass::Normal);
            assert!(p.images.iter().all(|im| !im.label && im.lesions.is_empty()));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(40);
        assert_eq!(generate_cohort(&cfg, 11).unwrap(), generate_cohort(&cfg, 11).unwrap());
        assert_ne!(generate_cohort(&cfg, 11).unwrap(), generate_cohort(&cfg, 12).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = GeneratorConfig {
            density_marginal: [0.2, 0.2, 0.2, 0.2],
            ..small(10)
        };
        assert!(matches!(generate_cohort(&cfg, 0), Err(DataError::InvalidConfig(m)) if m.contains("sums to")));
        let cfg = GeneratorConfig {
            contrast_by_density: [1.0, 0.8, 0.8, 0.3],
            ..small(10)
        };
        assert!(matches!(generate_cohort(&cfg, 0), Err(DataError::InvalidConfig(m)) if m.contains("decreasing")));
    }

    #[test]
    fn image_invariants_hold() {
        let cohort = generate_cohort(&small(200), 5).unwrap();
        let ids: std::collections::HashSet<u64> = cohort.patient_ids().into_iter().collect();
        assert_eq!(ids.len(), cohort.len());
        for p in &cohort.patients {
            assert_eq!(p.stratum.density, p.density);
            for im in &p.images {
                assert_eq!(im.pixels.len(), im.height * im.width);
                assert!(im.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(im.label, im.has_malignancy());
                for l in &im.lesions {
                    assert!(l.rect.w > 0 && l.rect.h > 0);
                    assert!(l.rect.fits_in(im.height, im.width));
                }
            }
        }
    }

    #[test]
    fn lesion_contrast_decreases_with_density() {
        let cfg = GeneratorConfig {
            n_patients: 2000,
            images_per_patient: 1,
            density_marginal: [0.25; 4],
            lesion_prevalence: 1.0,
            ..GeneratorConfig::default()
        };
        let cohort = generate_cohort(&cfg, 21).unwrap();
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        for p in &cohort.patients {
            for im in &p.images {
                if let Some(c) = lesion_contrast(im) {
                    sums[p.density.index()] += c;
                    counts[p.density.index()] += 1;
                }
            }
        }
        assert!(counts.iter().all(|&c| c >= 200), "{counts:?}");
        let means: Vec<f64> = (0..4).map(|d| sums[d] / counts[d] as f64).collect();
        assert!(means.windows(2).all(|w| w[0] > w[1]), "{means:?}");
    }
}
