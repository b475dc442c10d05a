//! Dataset ingestion and image/table output.

mod cifar;
mod image;
mod synthetic;

pub use cifar::{
    load_cifar10, load_split, parse_cifar10, split_files, Dataset, Split, RECORDS_PER_FILE,
    RECORD_LEN,
};
pub use image::{quantize, read_png, tile_sheet, to_rgb, write_png, RgbImage};
pub use synthetic::{synthetic_batch, write_synthetic_cifar};
