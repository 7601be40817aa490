pub mod attention;
pub mod discriminator;
pub mod emotion;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod remi;
pub mod tensor;
pub mod trainer;

pub use emotion::EmotionClass;
pub use error::{Error, Result};
