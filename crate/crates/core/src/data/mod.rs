//! Synthetic volumes, chunked episodes, Dice evaluation and file formats.

mod io;
mod mask;
mod png;
mod synth;
mod volume;

pub use io::{list_volumes, load_volume, save_volume, VolumeManifest, MASKS_MAGIC, SLICES_MAGIC, VOLUME_VERSION};
pub use mask::{dsc, Mask};
pub use png::{composite_png, mask_overlay_png, slice_png};
pub use synth::{default_families, gen_volume, gen_volume_clean, gen_volume_with, OrganFamilySpec, BACKGROUND, BODY};
pub use volume::{chunk, make_episodes, Chunk, ChunkedVolume, Chunking, Episode, EpisodeSet, Sample, Skipped};
