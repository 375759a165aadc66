//! Audio ingestion and log-mel feature extraction.

mod audio;
mod cache;
mod mel;

pub use audio::{
    fit_length, load_audio, resample_linear, save_wav_f32, save_wav_pcm16, LoadOptions, Waveform, SAMPLE_RATE,
};
pub(crate) use audio::interpolate;
pub use cache::FeatureCache;
pub use mel::{hz_to_mel, log_mel, mel_to_hz, FrontendConfig, LogMelSpectrogram, MelExtractor, MelFilterbank};
