//! File formats and the synthetic dataset.

pub mod image;
pub mod synth;
pub mod weights;

pub use image::{color_map, palette, read_pgm, read_ppm, write_label_pgm, write_ppm, GrayImage, RgbImage};
pub use synth::{collate, decode_image, synth_dataset, synth_sample, SynthConfig, SynthSample};
pub use weights::{
    decode_tensors, encode_tensors, load_checkpoint, load_into, load_weights, save_checkpoint, save_store,
    save_weights, Checkpoint,
};
