//! Label-map export as binary portable pixmaps (P6).

use std::fs;
use std::path::Path;

use crate::embeddings::LabelMap;
use crate::error::{Error, Result};

/// Fixed palette: class c maps to
/// `(37c + 11, 73c + 29, 151c + 47)`, each taken mod 256.
pub fn class_color(class: usize) -> [u8; 3] {
    [
        ((37 * class + 11) % 256) as u8,
        ((73 * class + 29) % 256) as u8,
        ((151 * class + 47) % 256) as u8,
    ]
}

/// Writes `P6\n{W} {H}\n255\n` followed by three palette bytes per pixel.
pub fn export_label_image(labels: &LabelMap, path: &Path) -> Result<()> {
    if let Some(&bad) = labels.data.iter().find(|&&l| l >= 256) {
        return Err(Error::LabelTooLarge { label: bad });
    }
    let mut bytes = format!("P6\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    for &label in &labels.data {
        bytes.extend_from_slice(&class_color(label));
    }
    fs::write(path, bytes)?;
    Ok(())
}
