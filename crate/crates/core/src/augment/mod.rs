//! Waveform and spectrogram augmentations.

mod dsp;
mod fir;
mod mask;
mod policy;
mod rawboost;
mod stretch;

pub use dsp::{design_bandpass, design_from_response, fir_magnitude};
pub use fir::{bandpass, narrowband_fir};
pub use mask::{freq_mask, mask_columns, mask_rows, time_mask};
pub use policy::{
    apply_policy_x1, apply_policy_x2, Augmentation, AugmentationPolicy, Augmented, Domain, Selection, HEADROOM,
};
pub use rawboost::{
    apply_convolutive, design_multi_notch, isd_additive_at_snr, rawboost_convolutive, rawboost_isd_additive,
    ConvolutiveParams, Notch,
};
pub use stretch::{pitch_shift, stretch_samples, time_stretch};

#[cfg(test)]
mod tests;
