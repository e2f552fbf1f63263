pub mod montage;
pub mod preprocess;
pub mod recording;
pub mod synth;
pub mod windows;

pub use montage::{channel_names, standard_coords, STANDARD_CHANNELS};
pub use preprocess::{preprocess, preprocess_with, PreprocessConfig, TARGET_RATE};
pub use recording::{read_dataset, read_recording, write_dataset, write_recording, Recording};
pub use synth::{derive_seed, synthesize_dataset, synthesize_subject, SeizureConfig, SynthConfig};
pub use windows::{majority_label, sample_windows, tile_windows, window_samples, WindowBatch};
