//! Dataset layer: image/label containers, 16-bit PGM storage, TSV manifests,
//! intensity preprocessing, the procedural phantom generator, and the
//! unpaired training sampler. Every file read is recorded in [`audit`] so
//! tests can prove which paths a run actually touched.

pub mod audit;
pub mod manifest;
pub mod pgm;
pub mod phantom;
pub mod preprocess;
pub mod sampler;

use crate::error::{Error, Result};

/// Which side of the unpaired-domain pair a slice belongs to. Source is the
/// modality with labels at training time; target is the unlabeled one the
/// segmenter must generalize to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Source,
    Target,
}

impl Modality {
    pub fn tag(&self) -> &'static str {
        match self {
            Modality::Source => "SOURCE",
            Modality::Target => "TARGET",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "SOURCE" => Some(Modality::Source),
            "TARGET" => Some(Modality::Target),
            _ => None,
        }
    }
}

/// One 2-D grayscale slice with physical pixel spacing.
#[derive(Clone, Debug)]
pub struct IntensityImage {
    /// Row-major, `h * w` values in [0, 1].
    pub pixels: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub modality: Modality,
    /// (row spacing, col spacing) in millimetres.
    pub spacing_mm: (f32, f32),
    pub scan_id: String,
    /// Position of this slice within its scan, in manifest order.
    pub slice_index: usize,
}

impl IntensityImage {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.h * self.w {
            return Err(Error::Data(format!(
                "image {}[{}]: {} pixels for {}x{}",
                self.scan_id,
                self.slice_index,
                self.pixels.len(),
                self.h,
                self.w
            )));
        }
        Ok(())
    }
}

/// Per-pixel class indices for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    /// Row-major, values in [0, n_classes).
    pub classes: Vec<u8>,
    pub h: usize,
    pub w: usize,
    pub n_classes: usize,
    pub spacing_mm: (f32, f32),
}

/// An image together with its label when one is available.
#[derive(Clone, Debug)]
pub struct Slice {
    pub image: IntensityImage,
    pub label: Option<LabelMap>,
}
