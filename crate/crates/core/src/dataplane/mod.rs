//! Scene containers, label rasterisation, QA filtering, patching, splits
//! and the synthetic scene generator.

mod patches;
mod qa;
mod raster;
mod scene;
mod split;
mod synth;

pub use patches::{axis_origins, crop, make_patches, tile_origins, Patch};
pub use qa::{qa_filter, QaThresholds, QaVerdict, RejectReason};
pub use raster::rasterize_polygon;
pub use scene::{
    decode_scene, encode_scene, read_scene, write_scene, Mask, Qa, RasterScene, SceneMeta, BANDS,
    BARC_MAGIC,
};
pub use split::{
    build_split, Partition, SplitEntry, SplitManifest, SplitMode, SplitSpec, DEFAULT_BIOMES,
};
pub use synth::{synth_generate, synth_scene, ScarParams};
