//! On-disk cohort archive.
//!
//! A directory containing:
//!
//! * `MANIFEST`: magic line `FHSIM1` followed by `key=value` lines
//! * `patients.csv`: `patient_id,density,stratum`
//! * `lesions.csv`: `image_id,x,y,w,h,lesion_type,pathology`
//! * `images.idx`: `image_id,patient_id,label,offset,height,width`
//!   where `offset` counts f32 values after the blob header
//! * `images.bin`: the magic bytes `FHSIM1\n` then little-endian f32 pixels

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{
    Cohort, DataError, Density, ImageRecord, LesionBox, LesionType, Pathology, PatientRecord, Rect,
    StratumLabel,
};

pub const ARCHIVE_MAGIC: &str = "FHSIM1";

fn bad(msg: impl Into<String>) -> DataError {
    DataError::Archive(msg.into())
}

pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{ARCHIVE_MAGIC}\n");
    manifest.push_str(&format!("patients={}\n", cohort.len()));
    manifest.push_str(&format!("images={}\n", cohort.image_count()));
    fs::write(dir.join("MANIFEST"), manifest)?;

    let mut patients = BufWriter::new(fs::File::create(dir.join("patients.csv"))?);
    let mut lesions = BufWriter::new(fs::File::create(dir.join("lesions.csv"))?);
    let mut index = BufWriter::new(fs::File::create(dir.join("images.idx"))?);
    let mut blob = BufWriter::new(fs::File::create(dir.join("images.bin"))?);
    writeln!(patients, "patient_id,density,stratum")?;
    writeln!(lesions, "image_id,x,y,w,h,lesion_type,pathology")?;
    writeln!(index, "image_id,patient_id,label,offset,height,width")?;
    writeln!(blob, "{ARCHIVE_MAGIC}")?;

    let mut offset = 0usize;
    for p in &cohort.patients {
        writeln!(patients, "{},{},{}", p.patient_id, p.density, p.stratum.encode())?;
        for im in &p.images {
            writeln!(
                index,
                "{},{},{},{},{},{}",
                im.image_id,
                p.patient_id,
                u8::from(im.label),
                offset,
                im.height,
                im.width
            )?;
            for v in &im.pixels {
                blob.write_all(&v.to_le_bytes())?;
            }
            offset += im.pixels.len();
            for l in &im.lesions {
                writeln!(
                    lesions,
                    "{},{},{},{},{},{},{}",
                    im.image_id,
                    l.rect.x,
                    l.rect.y,
                    l.rect.w,
                    l.rect.h,
                    l.lesion_type.name(),
                    l.pathology.name()
                )?;
            }
        }
    }
    patients.flush()?;
    lesions.flush()?;
    index.flush()?;
    blob.flush()?;
    Ok(())
}

fn rows(text: &str, columns: usize, file: &str) -> Result<Vec<Vec<String>>, DataError> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<String> = line.split(',').map(str::to_owned).collect();
            if cells.len() != columns {
                Err(bad(format!("{file} line {}: expected {columns} columns", i + 2)))
            } else {
                Ok(cells)
            }
        })
        .collect()
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, DataError> {
    s.parse().map_err(|_| bad(format!("bad {what}: {s:?}")))
}

pub fn read_cohort(dir: &Path) -> Result<Cohort, DataError> {
    let manifest = fs::read_to_string(dir.join("MANIFEST"))?;
    if manifest.lines().next() != Some(ARCHIVE_MAGIC) {
        return Err(bad("MANIFEST does not start with FHSIM1"));
    }
    let blob = fs::read(dir.join("images.bin"))?;
    let header = format!("{ARCHIVE_MAGIC}\n");
    let body = blob
        .strip_prefix(header.as_bytes())
        .ok_or_else(|| bad("images.bin does not start with FHSIM1"))?;
    if body.len() % 4 != 0 {
        return Err(bad("images.bin length is not a multiple of 4"));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut lesions: HashMap<u64, Vec<LesionBox>> = HashMap::new();
    for row in rows(&fs::read_to_string(dir.join("lesions.csv"))?, 7, "lesions.csv")? {
        let lesion = LesionBox {
            rect: Rect::new(
                num(&row[1], "x")?,
                num(&row[2], "y")?,
                num(&row[3], "w")?,
                num(&row[4], "h")?,
            ),
            lesion_type: LesionType::from_name(&row[5]).ok_or_else(|| bad(format!("lesion type {}", row[5])))?,
            pathology: Pathology::from_name(&row[6]).ok_or_else(|| bad(format!("pathology {}", row[6])))?,
        };
        lesions.entry(num(&row[0], "image_id")?).or_default().push(lesion);
    }

    let mut images: HashMap<u64, Vec<ImageRecord>> = HashMap::new();
    for row in rows(&fs::read_to_string(dir.join("images.idx"))?, 6, "images.idx")? {
        let image_id: u64 = num(&row[0], "image_id")?;
        let offset: usize = num(&row[3], "offset")?;
        let height: usize = num(&row[4], "height")?;
        let width: usize = num(&row[5], "width")?;
        let pixels = values
            .get(offset..offset + height * width)
            .ok_or_else(|| bad(format!("image {image_id} runs past the blob")))?
            .to_vec();
        images.entry(num(&row[1], "patient_id")?).or_default().push(ImageRecord {
            image_id,
            height,
            width,
            pixels,
            lesions: lesions.remove(&image_id).unwrap_or_default(),
            label: &row[2] == "1",
        });
    }

    let mut patients = Vec::new();
    for row in rows(&fs::read_to_string(dir.join("patients.csv"))?, 3, "patients.csv")? {
        let patient_id: u64 = num(&row[0], "patient_id")?;
        let density = row[1]
            .chars()
            .next()
            .and_then(Density::from_letter)
            .ok_or_else(|| bad(format!("density {}", row[1])))?;
        let stratum = StratumLabel::decode(&row[2]).ok_or_else(|| bad(format!("stratum {}", row[2])))?;
        patients.push(PatientRecord {
            patient_id,
            density,
            images: images.remove(&patient_id).unwrap_or_default(),
            stratum,
        });
    }
    Ok(Cohort::new(patients))
}
