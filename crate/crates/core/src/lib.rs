//! Cross-data image dehazing toolkit.
//!
//! * [`imgdata`]: planar RGB images, PPM/IMGF I/O, datasets, procedural scenes
//! * [`hazesim`]: atmospheric scattering haze synthesis
//! * [`xalign`]: dataset-level per-channel gamma alignment (external augmentor)
//! * [`ssaug`]: crop/blur consistency term with cosine-decayed weight (internal augmentor)
//! * [`nnet`]: tensors, a reverse-mode tape and the U-Net dehazer
//! * [`metrics`]: L1/total losses, PSNR and SSIM
//! * [`trainer`]: AdamW, schedules, mixed sampling, training, evaluation, ablation

pub mod hazesim;
pub mod imgdata;
pub mod metrics;
pub mod nnet;
pub mod rng;
pub mod ssaug;
pub mod trainer;
pub mod xalign;

pub use imgdata::{Channel, Dataset, Image, ImageError, ImageFormat, Pair, Provenance, Rect};
pub use rng::Rng;
