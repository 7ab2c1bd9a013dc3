//! File formats: weights, annotations, images and corpora.

mod annotations;
mod corpus;
mod image;
mod weights;

pub use annotations::{
    annotations_to_json, load_annotations, parse_annotations, save_annotations, BBox, RegionAnnotation, Source,
    BBOX_TOLERANCE, SCHEMA_VERSION,
};
pub use corpus::{bbox_window, load_corpus, save_corpus, ANNOTATIONS_FILE, IMAGES_DIR};
pub use image::{crop_image, decode_image, encode_png, image_dimensions, load_image, save_png};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, MAGIC, VERSION};
