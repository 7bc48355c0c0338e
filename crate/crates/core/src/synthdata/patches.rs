use rand::Rng;

use super::{DataError, ImageRecord, LesionType, Pathology, Rect};
use crate::rng;

/// Patches sampled around each mass or calcification.
pub const PATCHES_PER_LESION: usize = 5;
/// Placement attempts per patch slot before the slot is skipped.
pub const MAX_PATCH_ATTEMPTS: usize = 10;
/// Candidates overlapping an accepted patch above this IoU are discarded.
pub const MAX_PATCH_IOU: f64 = 0.5;

/// Five-way patch label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchLabel {
    Normal,
    BenignMass,
    BenignCalcification,
    MalignantMass,
    MalignantCalcification,
}

impl PatchLabel {
    pub const ALL: [PatchLabel; 5] = [
        PatchLabel::Normal,
        PatchLabel::BenignMass,
        PatchLabel::BenignCalcification,
        PatchLabel::MalignantMass,
        PatchLabel::MalignantCalcification,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            PatchLabel::Normal => "NM",
            PatchLabel::BenignMass => "BM",
            PatchLabel::BenignCalcification => "BC",
            PatchLabel::MalignantMass => "MM",
            PatchLabel::MalignantCalcification => "MC",
        }
    }

    /// `None` for lesion types that do not produce patches.
    pub fn of(lesion_type: LesionType, pathology: Pathology) -> Option<Self> {
        match (lesion_type, pathology) {
            (LesionType::Mass, Pathology::Benign) => Some(PatchLabel::BenignMass),
            (LesionType::Mass, Pathology::Malignant) => Some(PatchLabel::MalignantMass),
            (LesionType::Calcification, Pathology::Benign) => Some(PatchLabel::BenignCalcification),
            (LesionType::Calcification, Pathology::Malignant) => {
                Some(PatchLabel::MalignantCalcification)
            }
            (LesionType::Other, _) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub label: PatchLabel,
    pub source_image: u64,
    pub bbox: Rect,
}

/// Intersection over union of two boxes.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

fn centered_box(cx: usize, cy: usize, size: usize, image: &ImageRecord) -> Rect {
    let x = cx.saturating_sub(size / 2).min(image.width - size);
    let y = cy.saturating_sub(size / 2).min(image.height - size);
    Rect::new(x, y, size, size)
}

fn crop(image: &ImageRecord, b: &Rect) -> Vec<f32> {
    let mut out = Vec::with_capacity(b.area());
    for y in b.y..b.y + b.h {
        let row = y * image.width;
        out.extend_from_slice(&image.pixels[row + b.x..row + b.x + b.w]);
    }
    out
}

/// Samples training patches from one image.
///
/// One normal patch is centered at a random location that touches no
/// lesion; then each mass or calcification contributes up to
/// [`PATCHES_PER_LESION`] patches centered at random points inside its box.
/// A candidate whose IoU with any accepted patch exceeds 0.5 is redrawn, at
/// most [`MAX_PATCH_ATTEMPTS`] times per slot.
pub fn extract_patches(image: &ImageRecord, patch_size: usize, seed: u64) -> Result<Vec<Patch>, DataError> {
    if patch_size == 0 || patch_size > image.height || patch_size > image.width {
        return Err(DataError::ImageTooSmall {
            height: image.height,
            width: image.width,
            patch: patch_size,
        });
    }
    let mut r = rng::stream(&[seed, image.image_id, rng::label_key("patches")]);
    let mut accepted: Vec<(Rect, PatchLabel)> = Vec::new();
    let clashes = |b: &Rect, acc: &[(Rect, PatchLabel)]| acc.iter().any(|(a, _)| iou(a, b) > MAX_PATCH_IOU);

    for _ in 0..MAX_PATCH_ATTEMPTS {
        let cx = r.random_range(0..image.width);
        let cy = r.random_range(0..image.height);
        let b = centered_box(cx, cy, patch_size, image);
        if image.lesions.iter().all(|l| !l.rect.intersects(&b)) {
            accepted.push((b, PatchLabel::Normal));
            break;
        }
    }

    for lesion in &image.lesions {
        let Some(label) = PatchLabel::of(lesion.lesion_type, lesion.pathology) else {
            continue;
        };
        let lb = lesion.rect;
        for _ in 0..PATCHES_PER_LESION {
            for _ in 0..MAX_PATCH_ATTEMPTS {
                let cx = r.random_range(lb.x..lb.x + lb.w);
                let cy = r.random_range(lb.y..lb.y + lb.h);
                let b = centered_box(cx, cy, patch_size, image);
                if !clashes(&b, &accepted) {
                    accepted.push((b, label));
                    break;
                }
            }
        }
    }

    Ok(accepted
        .into_iter()
        .map(|(bbox, label)| Patch {
            size: patch_size,
            pixels: crop(image, &bbox),
            label,
            source_image: image.image_id,
            bbox,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_cohort, GeneratorConfig, LesionBox};
    use proptest::prelude::*;

    fn blank(size: usize, lesions: Vec<LesionBox>) -> ImageRecord {
        ImageRecord {
            image_id: 1,
            height: size,
            width: size,
            pixels: (0..size * size).map(|i| (i % 7) as f32 / 7.0).collect(),
            label: lesions.iter().any(|l| l.pathology == Pathology::Malignant),
            lesions,
        }
    }

    #[test]
    fn iou_examples() {
        let a = Rect::new(0, 0, 8, 8);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Rect::new(8, 8, 8, 8)), 0.0);
        assert_eq!(iou(&a, &Rect::new(4, 0, 8, 8)), 1.0 / 3.0);
        let b = Rect::new(2, 2, 8, 8);
        assert_eq!(iou(&a, &b), 36.0 / 92.0);
        assert!(iou(&a, &b) < MAX_PATCH_IOU);
    }

    #[test]
    fn lesion_free_image_gives_one_normal_patch() {
        let image = blank(64, vec![]);
        let patches = extract_patches(&image, 16, 0).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].label, PatchLabel::Normal);
        assert_eq!(patches[0].pixels.len(), 256);
    }

    #[test]
    fn two_lesions_give_at_most_eleven_patches() {
        let lesions = vec![
            LesionBox {
                rect: Rect::new(2, 2, 20, 20),
                lesion_type: LesionType::Mass,
                pathology: Pathology::Malignant,
            },
            LesionBox {
                rect: Rect::new(40, 40, 20, 20),
                lesion_type: LesionType::Calcification,
                pathology: Pathology::Benign,
            },
        ];
        let image = blank(64, lesions);
        for seed in 0..20 {
            let patches = extract_patches(&image, 16, seed).unwrap();
            assert!(patches.len() <= 11);
            assert!(patches.iter().any(|p| p.label == PatchLabel::MalignantMass));
            assert!(patches.iter().any(|p| p.label == PatchLabel::BenignCalcification));
        }
    }

    #[test]
    fn other_lesions_produce_no_lesion_patches() {
        let image = blank(
            64,
            vec![LesionBox {
                rect: Rect::new(10, 10, 10, 10),
                lesion_type: LesionType::Other,
                pathology: Pathology::Benign,
            }],
        );
        let patches = extract_patches(&image, 16, 3).unwrap();
        assert!(patches.iter().all(|p| p.label == PatchLabel::Normal));
        assert!(patches.len() <= 1);
    }

    #[test]
    fn image_smaller_than_patch() {
        let image = blank(8, vec![]);
        assert!(matches!(
            extract_patches(&image, 16, 0),
            Err(DataError::ImageTooSmall { patch: 16, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn generated_patches_respect_iou_and_labels(seed in 0u64..1000) {
            let cfg = GeneratorConfig { n_patients: 6, lesion_prevalence: 1.0, ..GeneratorConfig::default() };
            let cohort = generate_cohort(&cfg, seed).unwrap();
            for image in cohort.images() {
                let patches = extract_patches(image, cfg.patch_size, seed).unwrap();
                for (i, a) in patches.iter().enumerate() {
                    prop_assert!(a.bbox.fits_in(image.height, image.width));
                    let touches = image.lesions.iter().any(|l| l.rect.intersects(&a.bbox));
                    prop_assert_eq!(a.label == PatchLabel::Normal, !touches);
                    for b in &patches[i + 1..] {
                        prop_assert!(iou(&a.bbox, &b.bbox) <= MAX_PATCH_IOU);
                    }
                }
            }
        }
    }
}
