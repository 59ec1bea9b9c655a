//! Visualization exports: attention corner records, relation matrices,
//! and parcel heatmaps.
//!
//! Per image `<id>` the export writes:
//!
//! ```text
//! <id>_corners.csv          label,BL_x,BL_y,TR_x,TR_y (6 decimals)
//! <id>_relation.csv         L x L grid, empty diagonal (relation models)
//! <id>_parcel_<label>.pgm   strongest parcel channel, min-max to 0..255
//! ```

use std::fs;
use std::path::Path;

use crate::attention::region_corners;
use crate::data::{io::write_pgm, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{Classifier, Model};
use crate::tensor::Tape;

/// Corner records of every label for one image.
pub fn corners_csv(model: &Model, image: &LabeledImage, names: &[String]) -> Result<String> {
    let tape = Tape::new();
    let img = tape.constant(image.pixels.clone(), &[1, image.size, image.size])?;
    let bound = model.bind(&tape, false)?;
    let pass = bound.forward(&tape, model, &img)?;
    let mut out = String::from("label,BL_x,BL_y,TR_x,TR_y\n");
    for l in 0..model.config.num_labels {
        let m = pass.transform(&tape, l);
        let (bl, tr) = region_corners(&m);
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            names[l], bl.0, bl.1, tr.0, tr.1
        ));
    }
    Ok(out)
}

/// Strongest-channel heatmaps of every feature parcel, min-max scaled.
fn parcel_heatmaps(model: &Model, image: &LabeledImage) -> Result<Vec<Vec<u8>>> {
    let tape = Tape::new();
    let img = tape.constant(image.pixels.clone(), &[1, image.size, image.size])?;
    let bound = model.bind(&tape, false)?;
    let pass = bound.forward(&tape, model, &img)?;
    let side = model.feature_side();
    let plane = side * side;
    let mut maps = Vec::with_capacity(pass.parcels.len());
    for parcel in &pass.parcels {
        let v = tape.value(&parcel.maps);
        // representative channel: the one with the highest peak activation
        let k = model.config.parcel_channels;
        let best = (0..k)
            .max_by(|&a, &b| {
                let pa = v[a * plane..(a + 1) * plane].iter().copied().fold(f64::MIN, f64::max);
                let pb = v[b * plane..(b + 1) * plane].iter().copied().fold(f64::MIN, f64::max);
                pa.total_cmp(&pb)
            })
            .unwrap_or(0);
        let chan = &v[best * plane..(best + 1) * plane];
        let lo = chan.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = chan.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let bytes: Vec<u8> = chan
            .iter()
            .map(|&x| {
                if span > 0.0 {
                    ((x - lo) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        maps.push(bytes);
    }
    Ok(maps)
}

/// Write all visualization files for the given images.
pub fn export_visualizations(
    model: &Model,
    images: &[&LabeledImage],
    names: &[String],
    out_dir: &Path,
) -> Result<()> {
    if names.len() != model.config.num_labels {
        return Err(Error::data(format!(
            "{} label names for a {}-label model",
            names.len(),
            model.config.num_labels
        )));
    }
    fs::create_dir_all(out_dir)?;
    let side = model.feature_side();
    for image in images {
        fs::write(
            out_dir.join(format!("{}_corners.csv", image.id)),
            corners_csv(model, image, names)?,
        )?;
        if matches!(model.classifier, Classifier::Relation { .. }) {
            let matrix = model.relation_matrix_for(&image.pixels, image.size, image.size)?;
            fs::write(
                out_dir.join(format!("{}_relation.csv", image.id)),
                matrix.to_csv(),
            )?;
        }
        for (l, bytes) in parcel_heatmaps(model, image)?.iter().enumerate() {
            write_pgm(
                &out_dir.join(format!("{}_parcel_{}.pgm", image.id, names[l])),
                side,
                side,
                bytes,
            )?;
        }
    }
    Ok(())
}

/// Parse a corners CSV back into `(label, BL, TR)` rows; used by tests
/// and downstream tooling.
pub fn parse_corners_csv(text: &str) -> Result<Vec<(String, (f64, f64), (f64, f64))>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "label,BL_x,BL_y,TR_x,TR_y" {
                return Err(Error::data("unexpected corners header"));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::data(format!("corners row {} malformed", i + 1)));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::data(format!("bad number `{s}`")))
        };
        rows.push((
            fields[0].to_string(),
            (num(fields[1])?, num(fields[2])?),
            (num(fields[3])?, num(fields[4])?),
        ));
    }
    Ok(rows)
}
