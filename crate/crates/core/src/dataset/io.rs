//! On-disk layout: `metadata.csv`, `categories.txt` and `images/<id>.ppm`.
//!
//! The CSV `category` column is 1-based; names from the vocabulary are also
//! accepted on load. Floats are written in Rust's shortest round-trip form so
//! save → load is exact.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::generate::WasteRecord;
use super::image::Image;
use crate::error::{Error, Result};
use crate::features::RawGeometry;

pub const METADATA_FILE: &str = "metadata.csv";
pub const VOCABULARY_FILE: &str = "categories.txt";
pub const IMAGE_DIR: &str = "images";
pub const HEADER: [&str; 9] = ["id", "category", "L_x", "L_y", "L_z", "D_x", "D_y", "weight_kg", "image_path"];

pub fn image_rel_path(id: u64) -> String {
    format!("{IMAGE_DIR}/{id}.ppm")
}

pub fn write_vocabulary(path: &Path, vocabulary: &[String]) -> Result<()> {
    let mut text = vocabulary.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_vocabulary(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if vocab.is_empty() {
        return Err(Error::Config(format!("{} lists no categories", path.display())));
    }
    Ok(vocab)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    img.write_ppm(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Image::read_ppm(BufReader::new(f))
}

pub fn save_dataset(dir: &Path, records: &[WasteRecord], vocabulary: &[String]) -> Result<()> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    write_vocabulary(&dir.join(VOCABULARY_FILE), vocabulary)?;

    let csv_path = dir.join(METADATA_FILE);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_io(&csv_path, e))?;
    w.write_record(HEADER).map_err(|e| csv_io(&csv_path, e))?;
    for r in records {
        let g = &r.geometry;
        let rel = image_rel_path(r.id);
        let row = [
            r.id.to_string(),
            (r.category + 1).to_string(),
            g.l_x.to_string(),
            g.l_y.to_string(),
            g.l_z.to_string(),
            g.d_x.to_string(),
            g.d_y.to_string(),
            r.weight_kg.to_string(),
            rel.clone(),
        ];
        w.write_record(&row).map_err(|e| csv_io(&csv_path, e))?;
        write_image(&dir.join(rel), &r.image)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::IoOther(format!("{}: {other:?}", path.display())),
    }
}

/// One parsed metadata row, before the image is attached.
#[derive(Clone, Debug, PartialEq)]
pub struct MetadataRow {
    pub id: u64,
    pub category: usize,
    pub geometry: RawGeometry,
    pub weight_kg: f64,
    pub image_path: String,
}

pub fn parse_category(field: &str, vocabulary: &[String]) -> Result<usize> {
    if let Ok(k) = field.parse::<usize>() {
        return if (1..=vocabulary.len()).contains(&k) {
            Ok(k - 1)
        } else {
            Err(Error::Index(format!("category index {k} outside 1..={}", vocabulary.len())))
        };
    }
    vocabulary
        .iter()
        .position(|v| v == field)
        .ok_or_else(|| Error::Vocabulary(field.to_string()))
}

/// Parses metadata rows; errors carry the 1-based file line (header is line 1).
pub fn parse_metadata<R: std::io::Read>(reader: R, vocabulary: &[String]) -> Result<Vec<MetadataRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let perr = |message: String| Error::Parse { line, message };
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if rec.len() != HEADER.len() {
            return Err(perr(format!("expected {} fields, found {}", HEADER.len(), rec.len())));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k].trim().parse::<f64>().map_err(|_| perr(format!("{} is not a number: `{}`", HEADER[k], &rec[k])))
        };
        let id = rec[0].trim().parse::<u64>().map_err(|_| perr(format!("bad id `{}`", &rec[0])))?;
        // vocabulary misses keep their own error kind; they are not syntax errors
        let category = parse_category(rec[1].trim(), vocabulary).map_err(|e| match e {
            Error::Vocabulary(name) => Error::Vocabulary(format!("{name}` at line `{line}")),
            other => perr(other.to_string()),
        })?;
        let geometry = RawGeometry::new(num(2)?, num(3)?, num(4)?, num(5)?, num(6)?).map_err(|e| perr(e.to_string()))?;
        let weight_kg = num(7)?;
        if !(weight_kg.is_finite() && weight_kg >= 0.0) {
            return Err(perr(format!("weight_kg must be non-negative, got {weight_kg}")));
        }
        rows.push(MetadataRow { id, category, geometry, weight_kg, image_path: rec[8].to_string() });
    }
    Ok(rows)
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<WasteRecord>, Vec<String>)> {
    let vocabulary = read_vocabulary(&dir.join(VOCABULARY_FILE))?;
    let records = load_records(&dir.join(METADATA_FILE), &vocabulary)?;
    Ok((records, vocabulary))
}

/// Reads a metadata CSV; image paths are relative to the CSV's directory.
pub fn load_records(csv_path: &Path, vocabulary: &[String]) -> Result<Vec<WasteRecord>> {
    let dir = csv_path.parent().unwrap_or(Path::new("."));
    let f = File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let rows = parse_metadata(BufReader::new(f), vocabulary)?;
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let path: PathBuf = dir.join(&row.image_path);
        let image = read_image(&path).map_err(|e| match e {
            Error::Io { source, .. } => Error::IoOther(format!("image for record {} ({}): {source}", row.id, path.display())),
            other => other,
        })?;
        records.push(WasteRecord {
            id: row.id,
            category: row.category,
            geometry: row.geometry,
            weight_kg: row.weight_kg,
            image,
        });
    }
    Ok(records)
}
