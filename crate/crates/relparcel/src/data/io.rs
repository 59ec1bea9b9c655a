//! Dataset directory layout:
//!
//! ```text
//! <dir>/recipe.toml          the generating recipe
//! <dir>/labels.csv           header `image,<label_1>,...`, 0/1 cells
//! <dir>/images/<id>.pgm      binary P5, maxval 255
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MultiHot;

use super::{LabeledImage, SceneRecipe};

/// Write one grayscale image as binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::data(format!(
            "pgm payload {} does not match {width}x{height}",
            bytes.len()
        )));
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(bytes)?;
    Ok(())
}

/// Read a binary PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    let header_err = || Error::data(format!("{}: malformed PGM header", path.display()));
    // header: magic, width, height, maxval, single whitespace, payload
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(header_err());
    }
    let width: usize = fields[1].parse().map_err(|_| header_err())?;
    let height: usize = fields[2].parse().map_err(|_| header_err())?;
    let maxval: usize = fields[3].parse().map_err(|_| header_err())?;
    if maxval != 255 {
        return Err(Error::data(format!(
            "{}: only maxval 255 is supported, got {maxval}",
            path.display()
        )));
    }
    pos += 1; // single whitespace after maxval
    let payload = raw
        .get(pos..pos + width * height)
        .ok_or_else(|| Error::data(format!("{}: truncated pixel payload", path.display())))?;
    Ok((width, height, payload.to_vec()))
}

fn quantize(pixels: &[f64]) -> Vec<u8> {
    pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Write the dataset with its recipe. Pixels are quantized to 8 bits.
pub fn save_dataset(dir: &Path, dataset: &[LabeledImage], recipe: &SceneRecipe) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::contract("refusing to save an empty dataset"));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    fs::write(
        dir.join("recipe.toml"),
        toml::to_string_pretty(recipe).map_err(|e| Error::data(e.to_string()))?,
    )?;

    let mut csv = String::from("image");
    for name in recipe.label_names() {
        csv.push(',');
        csv.push_str(&name);
    }
    csv.push('\n');
    for img in dataset {
        write_pgm(
            &images.join(format!("{}.pgm", img.id)),
            img.size,
            img.size,
            &quantize(&img.pixels),
        )?;
        csv.push_str(&img.id);
        for b in img.labels.bits() {
            csv.push(',');
            csv.push((b'0' + b) as char);
        }
        csv.push('\n');
    }
    fs::write(dir.join("labels.csv"), csv)?;
    Ok(())
}

/// Load a dataset directory. Returns the examples, the label names from
/// the CSV header, and the recipe if one is present.
pub fn load_dataset(dir: &Path) -> Result<(Vec<LabeledImage>, Vec<String>, Option<SceneRecipe>)> {
    let labels_path = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path)
        .map_err(|e| Error::data(format!("{}: {e}", labels_path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data("labels.csv is empty"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("image") {
        return Err(Error::data("labels.csv header must start with `image`"));
    }
    let names: Vec<String> = cols.map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::data("labels.csv header names no labels"));
    }

    let mut dataset = Vec::new();
    let mut size: Option<usize> = None;
    for (lineno, line) in lines.enumerate() {
        let row = lineno + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields
            .next()
            .ok_or_else(|| Error::data(format!("labels.csv row {row}: missing image id")))?
            .to_string();
        let bits: Vec<u8> = fields
            .map(|f| match f {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::data(format!(
                    "labels.csv row {row}: label cell `{other}` is not 0/1"
                ))),
            })
            .collect::<Result<_>>()?;
        if bits.len() != names.len() {
            return Err(Error::data(format!(
                "labels.csv row {row}: {} cells for {} labels",
                bits.len(),
                names.len()
            )));
        }
        let img_path = dir.join("images").join(format!("{id}.pgm"));
        let (w, h, bytes) = read_pgm(&img_path)?;
        if w != h {
            return Err(Error::data(format!("{id}: images must be square, got {w}x{h}")));
        }
        match size {
            None => size = Some(w),
            Some(s) if s == w => {}
            Some(s) => {
                return Err(Error::data(format!(
                    "{id}: size {w} differs from the dataset's {s}"
                )))
            }
        }
        dataset.push(LabeledImage {
            id,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            size: w,
            labels: MultiHot::new(bits)?,
        });
    }
    if dataset.is_empty() {
        return Err(Error::data("labels.csv lists no examples"));
    }

    let recipe_path = dir.join("recipe.toml");
    let recipe = if recipe_path.exists() {
        let text = fs::read_to_string(&recipe_path)?;
        Some(toml::from_str(&text).map_err(|e| Error::data(format!("recipe.toml: {e}")))?)
    } else {
        None
    };
    Ok((dataset, names, recipe))
}
