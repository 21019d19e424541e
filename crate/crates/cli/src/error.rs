use std::fmt;

use dehaze_core::hazesim::HazeError;
use dehaze_core::nnet::NnError;
use dehaze_core::trainer::TrainError;
use dehaze_core::xalign::AlignError;
use dehaze_core::ImageError;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DOMAIN: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn io(path: &std::path::Path, err: impl fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn image_code(e: &ImageError) -> u8 {
    match e {
        ImageError::Missing(_)
        | ImageError::Io { .. }
        | ImageError::Manifest(_)
        | ImageError::MalformedHeader { .. }
        | ImageError::Truncated { .. }
        | ImageError::NotThreeChannel { .. } => EXIT_IO,
        _ => EXIT_DOMAIN,
    }
}

fn nn_code(e: &NnError) -> u8 {
    match e {
        NnError::Io(_) | NnError::Checkpoint(_) => EXIT_IO,
        _ => EXIT_DOMAIN,
    }
}

fn align_code(e: &AlignError) -> u8 {
    match e {
        AlignError::Io { .. } => EXIT_IO,
        AlignError::Image(i) => image_code(i),
        _ => EXIT_DOMAIN,
    }
}

impl From<ImageError> for Failure {
    fn from(e: ImageError) -> Self {
        Self::new(image_code(&e), e.to_string())
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        Self::new(nn_code(&e), e.to_string())
    }
}

impl From<AlignError> for Failure {
    fn from(e: AlignError) -> Self {
        Self::new(align_code(&e), e.to_string())
    }
}

impl From<HazeError> for Failure {
    fn from(e: HazeError) -> Self {
        let code = match &e {
            HazeError::Image(i) => image_code(i),
            _ => EXIT_DOMAIN,
        };
        Self::new(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Config(_) | TrainError::EmptyAuxiliary(_) => EXIT_USAGE,
            TrainError::NonFinite { .. } => EXIT_NUMERIC,
            TrainError::Io { .. } => EXIT_IO,
            TrainError::Image(i) => image_code(i),
            TrainError::Nn(n) => nn_code(n),
            TrainError::Align(a) => align_code(a),
            TrainError::Haze(HazeError::Image(i)) => image_code(i),
            _ => EXIT_DOMAIN,
        };
        Self::new(code, e.to_string())
    }
}
