//! Volume files, intensity normalization, cropping, augmentation and
//! synthetic cases.

mod synthetic;
mod transform;
mod volume;

pub use synthetic::synthetic_case;
pub use transform::{augment, normalize_nonzero, random_crop, AugmentParams, CropWindow};
pub use volume::{
    decode_volume, encode_volume, load_volume, save_volume, Volume, MVOL_HEADER_LEN, MVOL_MAGIC, MVOL_VERSION,
};
