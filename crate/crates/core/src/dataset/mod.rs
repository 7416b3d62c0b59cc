//! Blur-annotated samples and their JSON-lines manifest.
//!
//! Masks mark blurred pixels with 0 and sharp pixels with 1. On disk they
//! are 8-bit grayscale PNGs holding only 0 and 255.

mod blurmap;
pub mod curate;
mod image_io;
mod manifest;
mod mask;
mod patch;
pub mod synth;

pub use blurmap::{binarize, estimate_blur_map, luma, region_gradient_stats, sobel, BlurMapEstimate, GroupStat, Grouping};
pub use image_io::{decode_rgb_png, encode_rgb_png, load_rgb, save_rgb};
pub use manifest::{parse_manifest, Manifest};
pub use mask::{
    blur_area_fraction, decode_mask_png, encode_mask_png, filter_sample, load_mask, save_mask, size_category,
    FilterDecision, FilterRole,
};
pub use patch::{sample_patch, Batch, PatchSource};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

macro_rules! label_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), s
                    ))),
                }
            }
        }
    };
}

label_enum!(BlurType {
    Defocus => "defocus",
    Motion => "motion",
    None => "none",
});

label_enum!(
    /// Only ever set by a person; nothing in the toolkit assigns it.
    Intensity {
        Little => "little",
        Middle => "middle",
        Heavy => "heavy",
        Unlabeled => "unlabeled",
    }
);

label_enum!(Source {
    Real => "real",
    Synthetic => "synthetic",
    Web => "web",
});

label_enum!(ReviewState {
    Auto => "auto",
    HumanVerified => "human_verified",
    Rejected => "rejected",
});

label_enum!(SizeCategory {
    Small => "small",
    Medium => "medium",
    Large => "large",
});

impl Default for Intensity {
    fn default() -> Self {
        Intensity::Unlabeled
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurSample {
    pub id: String,
    pub hr_path: String,
    pub mask_path: String,
    pub blur_type: BlurType,
    #[serde(default)]
    pub intensity: Intensity,
    pub source: Source,
    pub review_state: ReviewState,
    /// Cached blur fraction of the mask, refreshed whenever the mask changes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blur_fraction: Option<f64>,
    /// Bumped on every mutation; used for optimistic concurrency.
    #[serde(default)]
    pub revision: u64,
}

impl BlurSample {
    pub fn size_category(&self) -> Option<SizeCategory> {
        self.blur_fraction.map(size_category)
    }
}

/// Ids appear in URLs and file names, so keep them to a safe alphabet.
pub fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || id.len() > 128 {
        return Err(Error::invalid("sample id must have 1 to 128 characters"));
    }
    if !id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        || id.starts_with('.')
    {
        return Err(Error::invalid(format!("sample id `{id}` has disallowed characters")));
    }
    Ok(())
}

/// In-memory `(hr, mask)` pairs for the two training branches plus an
/// optional held-out set.
#[derive(Clone, Debug, Default)]
pub struct DataSplits {
    pub general: Vec<(Tensor, Tensor)>,
    pub blur: Vec<(Tensor, Tensor)>,
    pub heldout: Vec<(Tensor, Tensor)>,
}

impl DataSplits {
    /// Loads every non-rejected sample of each manifest.
    pub fn from_manifests(general: &Manifest, blur: &Manifest, heldout: Option<&Manifest>) -> Result<Self> {
        let load = |m: &Manifest| -> Result<Vec<(Tensor, Tensor)>> {
            m.training_samples()
                .map(|s| Ok((load_rgb(m.hr_path(s))?, load_mask(m.mask_path(s))?)))
                .collect()
        };
        Ok(Self {
            general: load(general)?,
            blur: load(blur)?,
            heldout: heldout.map(load).transpose()?.unwrap_or_default(),
        })
    }
}
